use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, PreprocessedSample};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Axis-aligned spatial transforms. Each is a bijection of the voxel grid, so
/// labels are preserved exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transform {
    /// `k` quarter turns in the plane of two spatial axes.
    Rot90 { k: u8, plane: (usize, usize) },
    Flip { axis: usize },
    /// Output axis `i` is input axis `perm[i]`.
    Transpose { perm: Vec<usize> },
    /// Crop on one side and pad with the cropped voxels on the other: a
    /// cyclic shift.
    CropPad { shift: Vec<isize> },
}

impl Transform {
    fn validate(&self, rank: usize) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidTransform(m));
        match self {
            Transform::Rot90 { plane: (a, b), .. } if *a >= rank || *b >= rank || a == b => {
                bad(format!("plane ({a}, {b}) for rank {rank}"))
            }
            Transform::Flip { axis } if *axis >= rank => bad(format!("axis {axis} for rank {rank}")),
            Transform::Transpose { perm } => {
                let mut seen = perm.clone();
                seen.sort_unstable();
                if seen != (0..rank).collect::<Vec<_>>() {
                    return bad(format!("{perm:?} is not a permutation of {rank} axes"));
                }
                Ok(())
            }
            Transform::CropPad { shift } if shift.len() != rank => {
                bad(format!("{} shifts for rank {rank}", shift.len()))
            }
            _ => Ok(()),
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// Output shape and, for every output voxel, the source voxel index.
fn index_map(t: &Transform, shape: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let (out_shape, src_of): (Vec<usize>, Box<dyn Fn(&[usize], &mut [usize])>) = match t {
        Transform::Rot90 { k, plane: (a, b) } => {
            let (a, b) = (*a, *b);
            let k = k % 4;
            let mut out = shape.to_vec();
            if k % 2 == 1 {
                out.swap(a, b);
            }
            let (na, nb) = (shape[a], shape[b]);
            (
                out,
                Box::new(move |o: &[usize], s: &mut [usize]| {
                    s.copy_from_slice(o);
                    match k {
                        1 => {
                            s[a] = o[b];
                            s[b] = nb - 1 - o[a];
                        }
                        2 => {
                            s[a] = na - 1 - o[a];
                            s[b] = nb - 1 - o[b];
                        }
                        3 => {
                            s[a] = na - 1 - o[b];
                            s[b] = o[a];
                        }
                        _ => {}
                    }
                }),
            )
        }
        Transform::Flip { axis } => {
            let (axis, n) = (*axis, shape[*axis]);
            (
                shape.to_vec(),
                Box::new(move |o: &[usize], s: &mut [usize]| {
                    s.copy_from_slice(o);
                    s[axis] = n - 1 - o[axis];
                }),
            )
        }
        Transform::Transpose { perm } => {
            let perm = perm.clone();
            let out = perm.iter().map(|&p| shape[p]).collect();
            (
                out,
                Box::new(move |o: &[usize], s: &mut [usize]| {
                    for (i, &p) in perm.iter().enumerate() {
                        s[p] = o[i];
                    }
                }),
            )
        }
        Transform::CropPad { shift } => {
            let shift = shift.clone();
            let dims = shape.to_vec();
            (
                shape.to_vec(),
                Box::new(move |o: &[usize], s: &mut [usize]| {
                    for a in 0..o.len() {
                        let n = dims[a] as isize;
                        s[a] = (o[a] as isize - shift[a]).rem_euclid(n) as usize;
                    }
                }),
            )
        }
    };
    let in_strides = strides(shape);
    let n: usize = shape.iter().product();
    let mut o = vec![0usize; rank];
    let mut s = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        src_of(&o, &mut s);
        map.push(s.iter().zip(&in_strides).map(|(a, b)| a * b).sum());
        for a in (0..rank).rev() {
            o[a] += 1;
            if o[a] < out_shape[a] {
                break;
            }
            o[a] = 0;
        }
    }
    (out_shape, map)
}

/// Applies the same spatial transform to image and mask.
pub fn apply_transform(sample: &PreprocessedSample, t: &Transform) -> Result<PreprocessedSample, DataError> {
    let spatial = sample.spatial();
    t.validate(spatial.len())?;
    let (out_shape, map) = index_map(t, spatial);
    let c = sample.x.channels();
    let xd = sample.x.data();
    let mut x = Vec::with_capacity(xd.len());
    for &src in &map {
        x.extend_from_slice(&xd[src * c..(src + 1) * c]);
    }
    let y: Vec<u8> = map.iter().map(|&src| sample.y.labels()[src]).collect();
    let mut x_shape = out_shape.clone();
    x_shape.push(c);
    PreprocessedSample::new(
        sample.id.clone(),
        Tensor::new(x_shape, x)?,
        LabelMask::new(out_shape, y)?,
    )
}

/// Uniform choice among the four families. Rotations and transposes only
/// mix axes of equal extent so every sample keeps its shape; if no such
/// pair exists the draw falls back to a flip.
pub fn random_transform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Transform {
    let rank = shape.len();
    let square: Vec<(usize, usize)> = (0..rank)
        .flat_map(|a| (a + 1..rank).map(move |b| (a, b)))
        .filter(|&(a, b)| shape[a] == shape[b])
        .collect();
    let family = rng.random_range(0..4u8);
    match family {
        0 | 2 if !square.is_empty() => {
            let plane = square[rng.random_range(0..square.len())];
            if family == 0 {
                Transform::Rot90 {
                    k: rng.random_range(1..4),
                    plane,
                }
            } else {
                let mut perm: Vec<usize> = (0..rank).collect();
                perm.swap(plane.0, plane.1);
                Transform::Transpose { perm }
            }
        }
        3 => Transform::CropPad {
            shift: shape
                .iter()
                .map(|&n| {
                    let m = (n / 8).max(1) as i64;
                    rng.random_range(-m..=m) as isize
                })
                .collect(),
        },
        _ => Transform::Flip {
            axis: rng.random_range(0..rank),
        },
    }
}

/// Originals followed by `round(ratio * N)` augmented copies of uniformly
/// drawn originals.
pub fn expand_with_augmentation<R: Rng + ?Sized>(
    samples: &[PreprocessedSample],
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<PreprocessedSample>, DataError> {
    if !(ratio >= 0.0) || !ratio.is_finite() {
        return Err(DataError::InvalidTransform(format!("augmentation ratio {ratio}")));
    }
    let extra = (ratio * samples.len() as f64).round() as usize;
    let mut out = samples.to_vec();
    if samples.is_empty() {
        return Ok(out);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    for i in 0..extra {
        let src = &samples[order[i % order.len()]];
        let t = random_transform(src.spatial(), rng);
        let mut aug = apply_transform(src, &t)?;
        aug.id = format!("{}_aug{i}", src.id);
        out.push(aug);
    }
    Ok(out)
}
