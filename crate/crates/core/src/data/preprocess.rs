use super::{DataError, PreprocessedSample, StudyCase, RAW_LABELS};
use crate::mask::{LabelMask, N_CLASSES};
use crate::tensor::{Element, Tensor};

/// Spatial shape of a BraTS volume.
pub const BRATS_SHAPE: [usize; 3] = [240, 240, 155];
/// Network input extent after cropping.
pub const CROP_SHAPE: [usize; 3] = [128, 128, 128];
/// Frequency assigned to classes absent from every mask.
pub const ABSENT_CLASS_FREQUENCY: f64 = 1e-7;

/// `(v - min) / (max - min)`; a constant volume maps to zeros.
pub fn min_max_normalize<T: Element>(v: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = v
        .data()
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if !(range > T::zero()) {
        return Tensor::zeros(v.shape());
    }
    v.map(|x| ((x - lo) / range).min(T::one()).max(T::zero()))
}

/// Per-axis `floor((source - target) / 2)`.
pub fn center_crop_offsets(source: &[usize], target: &[usize]) -> Result<Vec<usize>, DataError> {
    if source.len() != target.len() || source.iter().zip(target).any(|(s, t)| t > s) {
        return Err(DataError::CropTooLarge {
            source_shape: source.to_vec(),
            target: target.to_vec(),
        });
    }
    Ok(source.iter().zip(target).map(|(s, t)| (s - t) / 2).collect())
}

fn crop_flat<E: Copy>(src: &[E], shape: &[usize], target: &[usize]) -> Result<Vec<E>, DataError> {
    let off = center_crop_offsets(shape, target)?;
    let n: usize = target.iter().product();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let mut s = 0;
        for a in 0..rank {
            s = s * shape[a] + idx[a] + off[a];
        }
        out.push(src[s]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < target[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(out)
}

/// Centered crop of a single-channel grid (shape given without channel axis).
pub fn center_crop<T: Element>(v: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>, DataError> {
    let data = crop_flat(v.data(), v.shape(), target)?;
    Ok(Tensor::new(target.to_vec(), data)?)
}

fn crop_mask(m: &LabelMask, target: &[usize]) -> Result<LabelMask, DataError> {
    let data = crop_flat(m.labels(), m.shape(), target)?;
    Ok(LabelMask::new(target.to_vec(), data)?)
}

/// Raw labels `{0,1,2,4}` to contiguous class indices `{0,1,2,3}`.
pub fn remap_labels(mask: &LabelMask) -> Result<LabelMask, DataError> {
    let mut out = mask.clone();
    for l in out.labels_mut() {
        *l = match *l {
            0..=2 => *l,
            4 => 3,
            other => return Err(DataError::UnexpectedLabel(other)),
        };
    }
    Ok(out)
}

/// Class indices back to raw labels.
pub fn inverse_remap_labels(mask: &LabelMask) -> Result<LabelMask, DataError> {
    let mut out = mask.clone();
    for l in out.labels_mut() {
        *l = *RAW_LABELS.get(*l as usize).ok_or(DataError::UnexpectedLabel(*l))?;
    }
    Ok(out)
}

/// Interleaves the four modalities into a channels-last `[spatial.., 4]`.
pub fn stack_modalities(case: &StudyCase) -> Result<Tensor<f32>, DataError> {
    let mods = case.modalities();
    let shape = mods[0].shape().to_vec();
    if let Some(m) = mods.iter().find(|m| m.shape() != shape.as_slice()) {
        return Err(DataError::ModalityShape(format!("{:?} vs {:?}", m.shape(), shape)));
    }
    let n = mods[0].len();
    let mut data = Vec::with_capacity(n * 4);
    for i in 0..n {
        data.extend(mods.iter().map(|m| m.data()[i]));
    }
    let mut out_shape = shape;
    out_shape.push(mods.len());
    Ok(Tensor::new(out_shape, data)?)
}

/// normalize -> crop -> remap -> stack. `target` of `None` keeps the full
/// extent.
pub fn preprocess(case: &StudyCase, target: Option<&[usize]>) -> Result<PreprocessedSample, DataError> {
    case.validate()?;
    let target = target.unwrap_or(case.shape()).to_vec();
    let crop = |v: &Tensor<f32>| center_crop(&min_max_normalize(v), &target);
    let cropped = StudyCase {
        id: case.id.clone(),
        flair: crop(&case.flair)?,
        t1: crop(&case.t1)?,
        t1ce: crop(&case.t1ce)?,
        t2: crop(&case.t2)?,
        mask: remap_labels(&crop_mask(&case.mask, &target)?)?,
    };
    let x = stack_modalities(&cropped)?;
    PreprocessedSample::new(case.id.clone(), x, cropped.mask)
}

/// Normalised inverse class frequency over all voxels of remapped masks.
pub fn compute_class_weights(masks: &[&LabelMask]) -> Result<[f64; N_CLASSES], DataError> {
    if masks.is_empty() {
        return Err(DataError::Empty("class weights need at least one mask"));
    }
    let mut counts = [0u64; N_CLASSES];
    let mut total = 0u64;
    for m in masks {
        for &l in m.labels() {
            *counts.get_mut(l as usize).ok_or(DataError::UnexpectedLabel(l))? += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(DataError::Empty("class weights need at least one voxel"));
    }
    let inv = counts.map(|c| {
        let f = c as f64 / total as f64;
        1.0 / if c == 0 { ABSENT_CLASS_FREQUENCY } else { f }
    });
    let z: f64 = inv.iter().sum();
    Ok(inv.map(|w| w / z))
}
