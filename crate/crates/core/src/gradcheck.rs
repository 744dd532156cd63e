//! Central finite-difference verification of tape gradients.
//!
//! Each case builds a scalar from random binary64 inputs, differentiates it on
//! the tape and compares every input gradient with
//! `(f(x + h e_i) - f(x - h e_i)) / 2h`. The reported error for a case is the
//! largest, over its inputs, of `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{PoolMode, Tape, Var};
use crate::loss::{self, FocalParams};
use crate::mask::LabelMask;
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Builder = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

/// Largest norm-wise relative error between tape and finite-difference
/// gradients over all `inputs`.
pub fn check(inputs: &[Tensor<f64>], build: &Builder, h: f64) -> Result<f64, TensorError> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for i in 0..inputs[k].len() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so ReLU kinks are not straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(out * weights)` with fixed random weights, so every output element
/// carries a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.leaf(uniform(&shape, &mut rng, -1.0, 1.0));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn random_labels(shape: &[usize], classes: u8, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabelMask::new(shape.to_vec(), labels)
        .expect("shape")
        .one_hot(classes as usize)
        .expect("labels in range")
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Box<Builder>,
}

fn conv_case(name: &'static str, x: &[usize], k: &[usize], stride: usize, transposed: bool, rng: &mut ChaCha8Rng) -> Case {
    let c_out = k[k.len() - 1];
    Case {
        name,
        inputs: vec![
            uniform(x, rng, -1.0, 1.0),
            uniform(k, rng, -1.0, 1.0),
            uniform(&[c_out], rng, -1.0, 1.0),
        ],
        build: Box::new(move |t, v| {
            let y = if transposed {
                t.conv_transpose(v[0], v[1], Some(v[2]), stride)?
            } else {
                t.conv(v[0], v[1], Some(v[2]), stride)?
            };
            project(t, y, 11)
        }),
    }
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = vec![
        conv_case("conv2d 3x3", &[2, 5, 6, 3], &[3, 3, 3, 4], 1, false, r),
        conv_case("conv3d 3x3x3", &[1, 4, 5, 3, 2], &[3, 3, 3, 2, 3], 1, false, r),
        conv_case("conv3d 1x1x1", &[2, 3, 3, 3, 3], &[1, 1, 1, 3, 2], 1, false, r),
        conv_case("conv3d 1x1x7", &[1, 3, 4, 6, 2], &[1, 1, 7, 2, 2], 1, false, r),
        conv_case("conv3d 7x7x1", &[1, 6, 6, 2, 2], &[7, 7, 1, 2, 2], 1, false, r),
        conv_case("conv2d 2x2 even", &[1, 5, 5, 2], &[2, 2, 2, 2], 1, false, r),
        conv_case("conv2d stride 2", &[1, 6, 5, 2], &[3, 3, 2, 3], 2, false, r),
        conv_case("conv_transpose2d 2x2", &[2, 3, 3, 3], &[2, 2, 3, 2], 2, true, r),
        conv_case("conv_transpose3d 2x2x2", &[1, 2, 3, 2, 2], &[2, 2, 2, 2, 3], 2, true, r),
        conv_case("conv_transpose2d 3x3", &[1, 3, 3, 2], &[3, 3, 2, 2], 2, true, r),
    ];
    out.push(Case {
        name: "max_pool3d",
        inputs: vec![uniform(&[2, 4, 4, 6, 2], r, -1.0, 1.0)],
        build: Box::new(|t, v| {
            let y = t.pool(v[0], 2, PoolMode::Max)?;
            project(t, y, 12)
        }),
    });
    out.push(Case {
        name: "avg_pool2d",
        inputs: vec![uniform(&[2, 6, 4, 3], r, -1.0, 1.0)],
        build: Box::new(|t, v| {
            let y = t.pool(v[0], 2, PoolMode::Avg)?;
            project(t, y, 13)
        }),
    });
    out.push(Case {
        name: "avg_pool_same3d",
        inputs: vec![uniform(&[1, 4, 3, 5, 2], r, -1.0, 1.0)],
        build: Box::new(|t, v| {
            let y = t.avg_pool_same(v[0], 3)?;
            project(t, y, 14)
        }),
    });
    out.push(Case {
        name: "hybrid_pool2d",
        inputs: vec![uniform(&[1, 4, 6, 2], r, -1.0, 1.0)],
        build: Box::new(|t, v| {
            let m = t.pool(v[0], 2, PoolMode::Max)?;
            let a = t.pool(v[0], 2, PoolMode::Avg)?;
            let y = t.concat(&[m, a])?;
            project(t, y, 15)
        }),
    });
    out.push(Case {
        name: "relu",
        inputs: vec![away_from_zero(&[2, 4, 4, 3], r)],
        build: Box::new(|t, v| {
            let y = t.relu(v[0])?;
            project(t, y, 16)
        }),
    });
    out.push(Case {
        name: "softmax",
        inputs: vec![uniform(&[2, 3, 3, 4], r, -3.0, 3.0)],
        build: Box::new(|t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, 17)
        }),
    });
    out.push(Case {
        name: "dropout",
        inputs: vec![uniform(&[1, 5, 5, 4], r, -1.0, 1.0)],
        build: Box::new(|t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            let y = t.dropout(v[0], 0.3, true, &mut mask_rng)?;
            project(t, y, 18)
        }),
    });
    out.push(Case {
        name: "concat",
        inputs: vec![uniform(&[1, 3, 4, 2], r, -1.0, 1.0), uniform(&[1, 3, 4, 3], r, -1.0, 1.0)],
        build: Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]])?;
            project(t, y, 19)
        }),
    });
    out.push(Case {
        name: "add/mul/scale/sum",
        inputs: vec![uniform(&[2, 3, 4], r, -1.0, 1.0), uniform(&[2, 3, 4], r, -1.0, 1.0)],
        build: Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let m = t.mul(a, v[0])?;
            let s = t.scale(m, -1.7)?;
            t.sum(s)
        }),
    });

    let onehot3 = random_labels(&[2, 4, 5], 4, r);
    let onehot2 = random_labels(&[1, 3, 3, 3], 4, r);
    let weights = vec![0.1, 0.2, 0.3, 0.4];
    {
        let g = onehot3.clone();
        let w = weights.clone();
        out.push(Case {
            name: "soft_dice_loss",
            inputs: vec![uniform(&[2, 4, 5, 4], r, -2.0, 2.0)],
            build: Box::new(move |t, v| {
                let p = t.softmax(v[0])?;
                loss::soft_dice_loss(t, p, &g, &w)
            }),
        });
    }
    for gamma in [0.0, 0.5, 2.0] {
        let g = onehot2.clone();
        out.push(Case {
            name: if gamma == 0.0 {
                "focal_loss gamma=0"
            } else if gamma == 0.5 {
                "focal_loss gamma=0.5"
            } else {
                "focal_loss gamma=2"
            },
            inputs: vec![uniform(&[1, 3, 3, 3, 4], r, -2.0, 2.0)],
            build: Box::new(move |t, v| {
                let p = t.softmax(v[0])?;
                loss::categorical_focal_loss(t, p, &g, FocalParams { gamma })
            }),
        });
    }
    {
        let g = onehot3;
        let w = weights;
        out.push(Case {
            name: "total_loss",
            inputs: vec![uniform(&[2, 4, 5, 4], r, -2.0, 2.0)],
            build: Box::new(move |t, v| {
                let p = t.softmax(v[0])?;
                Ok(loss::total_loss(t, p, &g, &w, FocalParams::default())?.total)
            }),
        });
    }
    out
}

/// Runs the full operator and loss suite.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckCase>, TensorError> {
    cases(seed)
        .into_iter()
        .map(|c| {
            Ok(GradCheckCase {
                name: c.name.to_string(),
                max_rel_error: check(&c.inputs, c.build.as_ref(), DEFAULT_STEP)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // x * x reported through a custom op whose backward is off by 2x
        struct Bad;
        impl crate::autodiff::CustomOp<f64> for Bad {
            fn name(&self) -> &'static str {
                "bad"
            }
            fn backward(&self, inputs: &[&Tensor<f64>], _o: &Tensor<f64>, g: &Tensor<f64>) -> Vec<Option<Tensor<f64>>> {
                vec![Some(inputs[0].map(|x| 4.0 * x * g.item()))]
            }
        }
        let build = |t: &mut Tape<f64>, v: &[Var]| {
            let x = t.value(v[0]).item();
            t.custom(&[v[0]], Tensor::scalar(x * x), Box::new(Bad))
        };
        let err = check(&[Tensor::scalar(1.5)], &build, DEFAULT_STEP).unwrap();
        assert!((err - 0.5).abs() < 1e-6);
    }
}
