use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, PreprocessedSample};
use crate::mask::{LabelMask, N_CLASSES};
use crate::tensor::Tensor;

/// Spatial axis along which volumes are cut into 2D samples.
pub const SLICE_AXIS: usize = 2;

/// One 2D sample per index of the third spatial axis, in order.
pub fn slices_2d(sample: &PreprocessedSample) -> Result<Vec<PreprocessedSample>, DataError> {
    let sp = sample.spatial();
    if sp.len() != 3 {
        return Err(DataError::InvalidTransform(format!("slicing needs a 3D sample, got {sp:?}")));
    }
    let (nx, ny, nz) = (sp[0], sp[1], sp[2]);
    let c = sample.x.channels();
    let (xd, yd) = (sample.x.data(), sample.y.labels());
    (0..nz)
        .map(|k| {
            let mut x = Vec::with_capacity(nx * ny * c);
            let mut y = Vec::with_capacity(nx * ny);
            for ij in 0..nx * ny {
                let v = ij * nz + k;
                x.extend_from_slice(&xd[v * c..(v + 1) * c]);
                y.push(yd[v]);
            }
            PreprocessedSample::new(
                format!("{}_z{k:03}", sample.id),
                Tensor::new(vec![nx, ny, c], x)?,
                LabelMask::new(vec![nx, ny], y)?,
            )
        })
        .collect()
}

/// Inverse of [`slices_2d`].
pub fn restack_slices(id: &str, slices: &[PreprocessedSample]) -> Result<PreprocessedSample, DataError> {
    let first = slices.first().ok_or(DataError::Empty("no slices to restack"))?;
    let (nx, ny) = (first.spatial()[0], first.spatial()[1]);
    let c = first.x.channels();
    let nz = slices.len();
    let mut x = vec![0f32; nx * ny * nz * c];
    let mut y = vec![0u8; nx * ny * nz];
    for (k, s) in slices.iter().enumerate() {
        if s.x.shape() != first.x.shape() {
            return Err(DataError::ModalityShape(format!("slice {k}: {:?}", s.x.shape())));
        }
        for ij in 0..nx * ny {
            let v = ij * nz + k;
            x[v * c..(v + 1) * c].copy_from_slice(&s.x.data()[ij * c..(ij + 1) * c]);
            y[v] = s.y.labels()[ij];
        }
    }
    PreprocessedSample::new(
        id,
        Tensor::new(vec![nx, ny, nz, c], x)?,
        LabelMask::new(vec![nx, ny, nz], y)?,
    )
}

/// Index batches of `batch_size`, last one partial. Shuffling depends only
/// on `seed`.
pub fn batches(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Empty("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks samples into `x: [B, spatial.., 4]` and one-hot `y: [B, spatial.., 4]`.
pub fn stack_batch(samples: &[PreprocessedSample], indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>), DataError> {
    if indices.is_empty() {
        return Err(DataError::Empty("empty batch"));
    }
    let xs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &samples[i].x).collect();
    let ys: Vec<Tensor<f32>> = indices
        .iter()
        .map(|&i| samples[i].y.one_hot(N_CLASSES))
        .collect::<Result<_, _>>()?;
    let y_refs: Vec<&Tensor<f32>> = ys.iter().collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&y_refs)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Seeded permutation cut into `k` test folds whose sizes differ by at most
/// one (larger folds first); each train set is the complement.
pub fn k_fold(n: usize, k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k == 0 || k > n {
        return Err(DataError::InvalidFolds { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    let folds = (0..k)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let mut test = order[start..start + len].to_vec();
            start += len;
            test.sort_unstable();
            let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_and_order() {
        let b = batches(10, 4, false, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());
        assert_eq!(batches(10, 4, true, 5).unwrap(), batches(10, 4, true, 5).unwrap());
        assert!(batches(3, 0, false, 0).is_err());
    }

    #[test]
    fn seven_into_five_folds() {
        let plan = k_fold(7, 5, 3).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        assert!(k_fold(4, 5, 0).is_err());
        assert!(k_fold(4, 0, 0).is_err());
    }

    #[test]
    fn slices_restack() {
        let x = Tensor::from_fn(&[3, 2, 5, 4], |i| i as f32);
        let y = LabelMask::new(vec![3, 2, 5], (0..30).map(|i| (i % 4) as u8).collect()).unwrap();
        let s = PreprocessedSample::new("v", x, y).unwrap();
        let sl = slices_2d(&s).unwrap();
        assert_eq!(sl.len(), 5);
        // voxel (2, 1, 3) of the volume is voxel (2, 1) of slice 3
        assert_eq!(sl[3].y.labels()[2 * 2 + 1], s.y.labels()[(2 * 2 + 1) * 5 + 3]);
        assert_eq!(restack_slices("v", &sl).unwrap(), s);
    }
}
