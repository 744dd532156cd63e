//! Integer label grids and their one-hot encodings.

use crate::tensor::{Element, Tensor, TensorError};

/// Number of segmentation classes after remapping (background + 3 tumour regions).
pub const N_CLASSES: usize = 4;

/// A spatial grid of class labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    shape: Vec<usize>,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(shape: Vec<usize>, labels: Vec<u8>) -> Result<Self, TensorError> {
        let n = crate::tensor::check_shape(&shape)?;
        if n != labels.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: n,
                got: labels.len(),
            });
        }
        Ok(Self { shape, labels })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = crate::tensor::check_shape(shape).expect("valid mask shape");
        Self {
            shape: shape.to_vec(),
            labels: vec![0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Voxel count per label value `0..=255`.
    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Encodes as `[spatial.., n_classes]` (no batch axis).
    pub fn one_hot<T: Element>(&self, n_classes: usize) -> Result<Tensor<T>, TensorError> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(TensorError::InvalidArgument(format!(
                "label {bad} outside 0..{n_classes}"
            )));
        }
        let mut data = vec![T::zero(); self.labels.len() * n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            data[i * n_classes + l as usize] = T::one();
        }
        let mut shape = self.shape.clone();
        shape.push(n_classes);
        Tensor::new(shape, data)
    }

    /// Per-voxel argmax over the trailing axis; ties go to the lowest class.
    pub fn argmax_decode<T: Element>(probs: &Tensor<T>) -> Self {
        let c = probs.channels();
        let labels = probs
            .data()
            .chunks_exact(c)
            .map(|px| {
                let mut best = 0usize;
                for k in 1..c {
                    if px[k] > px[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        let shape = probs.shape()[..probs.rank() - 1].to_vec();
        Self { shape, labels }
    }

    /// Removes a leading axis of extent 1.
    pub fn squeeze_leading(mut self) -> Self {
        if self.shape.len() > 1 && self.shape[0] == 1 {
            self.shape.remove(0);
        }
        self
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.labels)
    }
}
