//! Hybrid segmentation objective: weighted soft Dice loss plus categorical
//! focal loss with unit weight.
//!
//! Both terms take class probabilities `[.., C]` (softmax output) and a one-hot
//! target of the same shape, and are recorded on the tape with analytic
//! backward rules.

use crate::autodiff::{CustomOp, Tape, Var};
use crate::tensor::{Element, Tensor, TensorError};

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-6;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Focusing parameter of the focal loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn new(gamma: f64) -> Result<Self, TensorError> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(TensorError::InvalidArgument(format!(
                "focal gamma must be finite and >= 0, got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }
}

fn check_pair<T: Element>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<(), TensorError> {
    if probs.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "probabilities {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Per class `(sum p*g, sum p + sum g)`.
fn dice_sums<T: Element>(probs: &Tensor<T>, target: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let c = probs.channels();
    let mut inter = vec![0.0; c];
    let mut total = vec![0.0; c];
    for (p, g) in probs.data().chunks_exact(c).zip(target.data().chunks_exact(c)) {
        for k in 0..c {
            let (pv, gv) = (p[k].f64(), g[k].f64());
            inter[k] += pv * gv;
            total[k] += pv + gv;
        }
    }
    (inter, total)
}

/// `1 - sum_c w_c * (2 I_c + eps) / (S_c + eps)` evaluated outside the tape.
pub fn soft_dice_value<T: Element>(probs: &Tensor<T>, target: &Tensor<T>, weights: &[f64]) -> Result<f64, TensorError> {
    check_pair(probs, target)?;
    if weights.len() != probs.channels() {
        return Err(TensorError::InvalidArgument(format!(
            "{} class weights for {} classes",
            weights.len(),
            probs.channels()
        )));
    }
    let (inter, total) = dice_sums(probs, target);
    let score: f64 = (0..weights.len())
        .map(|k| weights[k] * (2.0 * inter[k] + DICE_SMOOTH) / (total[k] + DICE_SMOOTH))
        .sum();
    Ok(1.0 - score)
}

#[inline]
fn focal_term(p: f64, gamma: f64) -> f64 {
    let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(1.0 - q).powf(gamma) * q.ln()
}

#[inline]
fn focal_term_grad(p: f64, gamma: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    let one_minus = 1.0 - p;
    let decay = if gamma == 0.0 {
        0.0
    } else {
        gamma * one_minus.powf(gamma - 1.0) * p.ln()
    };
    decay - one_minus.powf(gamma) / p
}

/// Mean over voxels of `-sum_c g_c (1 - p_c)^gamma ln p_c`.
pub fn focal_value<T: Element>(probs: &Tensor<T>, target: &Tensor<T>, params: FocalParams) -> Result<f64, TensorError> {
    check_pair(probs, target)?;
    FocalParams::new(params.gamma)?;
    let c = probs.channels();
    let voxels = probs.len() / c;
    let total: f64 = probs
        .data()
        .iter()
        .zip(target.data())
        .filter(|(_, g)| g.f64() != 0.0)
        .map(|(p, g)| g.f64() * focal_term(p.f64(), params.gamma))
        .sum();
    Ok(total / voxels as f64)
}

struct SoftDiceOp<T: Element> {
    target: Tensor<T>,
    weights: Vec<f64>,
}

impl<T: Element> CustomOp<T> for SoftDiceOp<T> {
    fn name(&self) -> &'static str {
        "soft dice loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let probs = inputs[0];
        let c = probs.channels();
        let (inter, total) = dice_sums(probs, &self.target);
        // d/dp of (2I + e)/(S + e) = (2g(S + e) - (2I + e)) / (S + e)^2
        let coef: Vec<(f64, f64)> = (0..c)
            .map(|k| {
                let den = total[k] + DICE_SMOOTH;
                (
                    -self.weights[k] * 2.0 / den,
                    self.weights[k] * (2.0 * inter[k] + DICE_SMOOTH) / (den * den),
                )
            })
            .collect();
        let up = grad.item().f64();
        let data = self
            .target
            .data()
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let (a, b) = coef[i % c];
                T::of(up * (a * g.f64() + b))
            })
            .collect();
        vec![Some(Tensor::new(probs.shape().to_vec(), data).expect("shape"))]
    }
}

struct FocalOp<T: Element> {
    target: Tensor<T>,
    gamma: f64,
}

impl<T: Element> CustomOp<T> for FocalOp<T> {
    fn name(&self) -> &'static str {
        "categorical focal loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let probs = inputs[0];
        let voxels = probs.len() / probs.channels();
        let scale = grad.item().f64() / voxels as f64;
        let data = probs
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(p, g)| {
                let gv = g.f64();
                if gv == 0.0 {
                    T::zero()
                } else {
                    T::of(scale * gv * focal_term_grad(p.f64(), self.gamma))
                }
            })
            .collect();
        vec![Some(Tensor::new(probs.shape().to_vec(), data).expect("shape"))]
    }
}

/// Records the weighted soft Dice loss; `weights` must sum to one.
pub fn soft_dice_loss<T: Element>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &Tensor<T>,
    weights: &[f64],
) -> Result<Var, TensorError> {
    let value = soft_dice_value(tape.value(probs), target, weights)?;
    tape.custom(
        &[probs],
        Tensor::scalar(T::of(value)),
        Box::new(SoftDiceOp {
            target: target.clone(),
            weights: weights.to_vec(),
        }),
    )
}

/// Records the categorical focal loss (mean over voxels).
pub fn categorical_focal_loss<T: Element>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &Tensor<T>,
    params: FocalParams,
) -> Result<Var, TensorError> {
    let value = focal_value(tape.value(probs), target, params)?;
    tape.custom(
        &[probs],
        Tensor::scalar(T::of(value)),
        Box::new(FocalOp {
            target: target.clone(),
            gamma: params.gamma,
        }),
    )
}

/// The three loss nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub dice: Var,
    pub focal: Var,
}

/// Dice loss plus focal loss with unit weight.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &Tensor<T>,
    weights: &[f64],
    params: FocalParams,
) -> Result<LossTerms, TensorError> {
    let dice = soft_dice_loss(tape, probs, target, weights)?;
    let focal = categorical_focal_loss(tape, probs, target, params)?;
    let total = tape.add(dice, focal)?;
    Ok(LossTerms { total, dice, focal })
}

/// Uniform class weights `1 / C`.
pub fn uniform_weights(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(labels: &[usize], c: usize) -> Tensor<f64> {
        let mut data = vec![0.0; labels.len() * c];
        for (i, &l) in labels.iter().enumerate() {
            data[i * c + l] = 1.0;
        }
        Tensor::new(vec![1, labels.len(), c], data).unwrap()
    }

    #[test]
    fn perfect_prediction_has_near_zero_dice_loss() {
        let g = onehot(&[0, 1, 2, 3, 1, 1], 4);
        let v = soft_dice_value(&g, &g, &uniform_weights(4)).unwrap();
        assert!(v.abs() <= 1e-5);
    }

    #[test]
    fn uniform_probabilities_on_one_class_grid() {
        // 2x2 grid, all voxels class 0, probs 0.25 everywhere.
        // class 0: I = 1, S = 1 + 4 = 5 -> (2 + e)/(5 + e)
        // classes 1..3: I = 0, S = 1 -> e / (1 + e)
        let g = Tensor::new(vec![1, 2, 2, 4], (0..16).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let p = Tensor::full(&[1, 2, 2, 4], 0.25);
        let e = DICE_SMOOTH;
        let mut direct = 0.0;
        for k in 0..4 {
            let mut inter = 0.0;
            let mut s = 0.0;
            for v in 0..4 {
                inter += p.data()[v * 4 + k] * g.data()[v * 4 + k];
                s += p.data()[v * 4 + k] + g.data()[v * 4 + k];
            }
            direct += 0.25 * (2.0 * inter + e) / (s + e);
        }
        let expected = 1.0 - direct;
        let closed = 1.0 - 0.25 * ((2.0 + e) / (5.0 + e) + 3.0 * e / (1.0 + e));
        assert!((expected - closed).abs() < 1e-15);
        let v = soft_dice_value(&p, &g, &uniform_weights(4)).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn wrong_weight_count() {
        let g = onehot(&[0, 1], 4);
        assert!(soft_dice_value(&g, &g, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let p = Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap();
        let g = onehot(&[1], 2);
        let v = focal_value(&p, &g, FocalParams::new(0.0).unwrap()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_two_at_point_nine() {
        let p = Tensor::new(vec![1, 1, 2], vec![0.9, 0.1]).unwrap();
        let g = onehot(&[0], 2);
        let v = focal_value(&p, &g, FocalParams::default()).unwrap();
        let expected = 0.1f64.powi(2) * -(0.9f64.ln());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.0010536).abs() < 1e-7);
    }

    #[test]
    fn focal_vanishes_when_confident() {
        let p = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let g = onehot(&[0], 2);
        let v = focal_value(&p, &g, FocalParams::default()).unwrap();
        assert!(v < 1e-15);
    }

    #[test]
    fn negative_gamma_rejected() {
        assert!(FocalParams::new(-0.5).is_err());
        assert!(FocalParams::new(f64::NAN).is_err());
    }

    #[test]
    fn total_is_exact_sum() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new(vec![1, 2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.7, 0.1, 0.1, 0.1]).unwrap());
        let g = onehot(&[3, 0], 4);
        let terms = total_loss(&mut tape, p, &g, &uniform_weights(4), FocalParams::default()).unwrap();
        let (t, d, f) = (
            tape.value(terms.total).item(),
            tape.value(terms.dice).item(),
            tape.value(terms.focal).item(),
        );
        assert_eq!(t, d + f);
    }
}
