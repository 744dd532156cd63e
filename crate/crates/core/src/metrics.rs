//! Evaluation metrics on hard label masks and class probabilities.
//!
//! Dice and accuracy are computed from confusion counts; the averaged
//! Hausdorff distance is the mean of the two directed mean nearest-neighbour
//! distances between class boundaries, in voxel units.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mask::LabelMask;
use crate::tensor::{Element, Tensor, TensorError};

/// Default binarisation threshold for IoU.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Confusion counts of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<Self, TensorError> {
        same_shape(pred, gt)?;
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            match (p == class, g == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2 TP / ((TP + FP) + (TP + FN))`, or 1 when the class is absent from both.
    pub fn dice(&self) -> f64 {
        let den = (self.tp + self.fp) + (self.tp + self.fn_);
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }
}

fn same_shape(a: &LabelMask, b: &LabelMask) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "masks {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn dice_score(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64, TensorError> {
    Ok(ConfusionCounts::from_masks(pred, gt, class)?.dice())
}

/// Fraction of voxels with identical labels.
pub fn accuracy(pred: &LabelMask, gt: &LabelMask) -> Result<f64, TensorError> {
    same_shape(pred, gt)?;
    let hits = pred.labels().iter().zip(gt.labels()).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Boundary voxels of one class, as coordinates lifted to three axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryPointSet {
    pub class: u8,
    pub points: Vec<[usize; 3]>,
}

impl BoundaryPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn lift_shape(shape: &[usize]) -> ([usize; 3], usize) {
    let rank = shape.len().min(3);
    let mut s = [1usize; 3];
    s[3 - rank..].copy_from_slice(&shape[shape.len() - rank..]);
    (s, 3 - rank)
}

/// Voxels of `class` with a face neighbour of another class or outside the
/// volume (4-connectivity in 2D, 6-connectivity in 3D).
pub fn boundary_points(mask: &LabelMask, class: u8) -> BoundaryPointSet {
    let (s, first_axis) = lift_shape(mask.shape());
    let labels = mask.labels();
    let at = |z: usize, y: usize, x: usize| labels[(z * s[1] + y) * s[2] + x];
    let mut points = Vec::new();
    for z in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                if at(z, y, x) != class {
                    continue;
                }
                let p = [z, y, x];
                let on_edge = (first_axis..3).any(|a| {
                    [-1isize, 1].iter().any(|&d| {
                        let q = p[a] as isize + d;
                        if q < 0 || q as usize >= s[a] {
                            return true;
                        }
                        let mut n = p;
                        n[a] = q as usize;
                        at(n[0], n[1], n[2]) != class
                    })
                });
                if on_edge {
                    points.push(p);
                }
            }
        }
    }
    BoundaryPointSet { class, points }
}

fn dist(a: &[usize; 3], b: &[usize; 3]) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        let d = a[k] as f64 - b[k] as f64;
        s += d * d;
    }
    s.sqrt()
}

fn directed_mean(from: &[[usize; 3]], to: &[[usize; 3]]) -> f64 {
    let mins: Vec<f64> = from
        .par_iter()
        .map(|x| to.iter().map(|y| dist(x, y)).fold(f64::INFINITY, f64::min))
        .collect();
    mins.iter().sum::<f64>() / from.len() as f64
}

/// `(mean_x min_y d(x, y) + mean_y min_x d(x, y)) / 2` over two point sets.
pub fn hausdorff_avg(x: &BoundaryPointSet, y: &BoundaryPointSet) -> Result<f64, TensorError> {
    if x.is_empty() || y.is_empty() {
        return Err(TensorError::InvalidArgument(
            "averaged Hausdorff distance of an empty boundary".into(),
        ));
    }
    Ok((directed_mean(&x.points, &y.points) + directed_mean(&y.points, &x.points)) / 2.0)
}

const FAR: f64 = 1e30;

/// Exact squared Euclidean distance transform along one line (lower
/// envelope of parabolas rooted at the finite entries of `f`).
fn edt_line(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    z.push(f64::NEG_INFINITY);
    for q in (0..f.len()).filter(|&q| f[q] < FAR) {
        let fq = f[q] + (q * q) as f64;
        loop {
            let Some(&p) = v.last() else { break };
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= *z.last().expect("one boundary per seed") {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        // the first parabola is never popped: its boundary is -inf
        v.push(q);
    }
    if v.is_empty() {
        out.fill(FAR);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every voxel to the nearest point of `points`.
fn squared_distance_field(shape: [usize; 3], points: &[[usize; 3]]) -> Vec<f64> {
    let n = shape[0] * shape[1] * shape[2];
    let mut field = vec![FAR; n];
    for p in points {
        field[(p[0] * shape[1] + p[1]) * shape[2] + p[2]] = 0.0;
    }
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let len = shape[axis];
        if len == 1 {
            continue;
        }
        let mut f = vec![0.0; len];
        let mut out = vec![0.0; len];
        let mut v = Vec::with_capacity(len);
        let mut z = Vec::with_capacity(len + 1);
        for start in 0..n {
            // visit each line once, from its first element
            if !(start / strides[axis]).is_multiple_of(len) {
                continue;
            }
            for i in 0..len {
                f[i] = field[start + i * strides[axis]];
            }
            edt_line(&f, &mut out, &mut v, &mut z);
            for i in 0..len {
                field[start + i * strides[axis]] = out[i].min(FAR);
            }
        }
    }
    field
}

/// Averaged Hausdorff distance between the boundaries of `class` in two
/// masks, using distance fields instead of pairwise search. `None` when either
/// boundary is empty.
pub fn hausdorff_avg_masks(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<Option<f64>, TensorError> {
    same_shape(pred, gt)?;
    let x = boundary_points(gt, class);
    let y = boundary_points(pred, class);
    if x.is_empty() || y.is_empty() {
        return Ok(None);
    }
    let (shape, _) = lift_shape(gt.shape());
    let idx = |p: &[usize; 3]| (p[0] * shape[1] + p[1]) * shape[2] + p[2];
    let to_y = squared_distance_field(shape, &y.points);
    let to_x = squared_distance_field(shape, &x.points);
    let mean = |pts: &[[usize; 3]], field: &[f64]| pts.iter().map(|p| field[idx(p)].sqrt()).sum::<f64>() / pts.len() as f64;
    Ok(Some((mean(&x.points, &to_y) + mean(&y.points, &to_x)) / 2.0))
}

/// Per-class and mean IoU after thresholding probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouScores {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Binarises each class channel at `threshold` (strictly greater) and returns
/// `|P & G| / |P | G|`, or 1 for an empty union.
pub fn iou_score<T: Element>(probs: &Tensor<T>, onehot: &Tensor<T>, threshold: f64) -> Result<IouScores, TensorError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(TensorError::InvalidArgument(format!(
            "IoU threshold {threshold} outside (0, 1)"
        )));
    }
    if probs.shape() != onehot.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "probabilities {:?} vs target {:?}",
            probs.shape(),
            onehot.shape()
        )));
    }
    let c = probs.channels();
    let mut inter = vec![0u64; c];
    let mut union = vec![0u64; c];
    for (i, (p, g)) in probs.data().iter().zip(onehot.data()).enumerate() {
        let (pb, gb) = (p.f64() > threshold, g.f64() > threshold);
        inter[i % c] += (pb && gb) as u64;
        union[i % c] += (pb || gb) as u64;
    }
    let per_class: Vec<f64> = (0..c)
        .map(|k| if union[k] == 0 { 1.0 } else { inter[k] as f64 / union[k] as f64 })
        .collect();
    let mean = per_class.iter().sum::<f64>() / c as f64;
    Ok(IouScores { per_class, mean })
}

/// All metrics of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    /// Index 0 (background) is always `None`; foreground entries are `None`
    /// when a boundary is empty on either side.
    pub hausdorff: Vec<Option<f64>>,
    pub accuracy: f64,
    pub mean_dice_foreground: f64,
    pub mean_dice_all: f64,
    pub mean_iou: f64,
}

impl MetricsReport {
    fn assemble(dice: Vec<f64>, iou: IouScores, hausdorff: Vec<Option<f64>>, accuracy: f64) -> Self {
        let c = dice.len();
        let mean_dice_all = dice.iter().sum::<f64>() / c as f64;
        let mean_dice_foreground = if c > 1 {
            dice[1..].iter().sum::<f64>() / (c - 1) as f64
        } else {
            mean_dice_all
        };
        Self {
            dice,
            iou: iou.per_class,
            hausdorff,
            accuracy,
            mean_dice_foreground,
            mean_dice_all,
            mean_iou: iou.mean,
        }
    }

    /// Arithmetic mean of several reports; Hausdorff entries average the
    /// reports where they are defined.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let c = first.dice.len();
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let per = |f: &dyn Fn(&MetricsReport, usize) -> f64| -> Vec<f64> {
            (0..c).map(|k| reports.iter().map(|r| f(r, k)).sum::<f64>() / n).collect()
        };
        let hausdorff = (0..c)
            .map(|k| {
                let vals: Vec<f64> = reports.iter().filter_map(|r| r.hausdorff[k]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Some(MetricsReport {
            dice: per(&|r, k| r.dice[k]),
            iou: per(&|r, k| r.iou[k]),
            hausdorff,
            accuracy: avg(&|r| r.accuracy),
            mean_dice_foreground: avg(&|r| r.mean_dice_foreground),
            mean_dice_all: avg(&|r| r.mean_dice_all),
            mean_iou: avg(&|r| r.mean_iou),
        })
    }
}

/// Report from a hard predicted mask.
pub fn metrics_report(pred: &LabelMask, gt: &LabelMask, n_classes: usize) -> Result<MetricsReport, TensorError> {
    same_shape(pred, gt)?;
    let p: Tensor<f32> = pred.one_hot(n_classes)?;
    let g: Tensor<f32> = gt.one_hot(n_classes)?;
    let iou = iou_score(&p, &g, IOU_THRESHOLD)?;
    report_with_iou(pred, gt, n_classes, iou)
}

/// Report from class probabilities `[spatial.., C]`: hard metrics use the
/// argmax decoding, IoU thresholds the probabilities.
pub fn metrics_report_from_probs<T: Element>(probs: &Tensor<T>, gt: &LabelMask) -> Result<MetricsReport, TensorError> {
    let n_classes = probs.channels();
    let pred = LabelMask::argmax_decode(probs);
    same_shape(&pred, gt)?;
    let g: Tensor<T> = gt.one_hot(n_classes)?;
    let iou = iou_score(probs, &g, IOU_THRESHOLD)?;
    report_with_iou(&pred, gt, n_classes, iou)
}

fn report_with_iou(pred: &LabelMask, gt: &LabelMask, n_classes: usize, iou: IouScores) -> Result<MetricsReport, TensorError> {
    let dice = (0..n_classes)
        .map(|k| dice_score(pred, gt, k as u8))
        .collect::<Result<Vec<_>, _>>()?;
    let mut hausdorff = vec![None];
    for k in 1..n_classes {
        hausdorff.push(hausdorff_avg_masks(pred, gt, k as u8)?);
    }
    let acc = accuracy(pred, gt)?;
    Ok(MetricsReport::assemble(dice, iou, hausdorff, acc))
}
