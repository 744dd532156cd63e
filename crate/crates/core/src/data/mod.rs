//! Everything between raw volumes and training batches.

mod augment;
mod batch;
pub mod layout;
mod phantom;
mod preprocess;

use crate::mask::{LabelMask, N_CLASSES};
use crate::tensor::{Tensor, TensorError};

pub use augment::{apply_transform, expand_with_augmentation, random_transform, Transform};
pub use batch::{batches, SLICE_AXIS, k_fold, restack_slices, slices_2d, stack_batch, Fold, FoldPlan};
pub use phantom::{generate_phantom, PhantomSpec};
pub use preprocess::{
    center_crop, center_crop_offsets, compute_class_weights, inverse_remap_labels, min_max_normalize, preprocess,
    remap_labels, stack_modalities, ABSENT_CLASS_FREQUENCY, BRATS_SHAPE, CROP_SHAPE,
};

/// Label values that may appear in a raw segmentation.
pub const RAW_LABELS: [u8; 4] = [0, 1, 2, 4];
/// Modality order of the stacked input channels.
pub const MODALITIES: [&str; 4] = ["flair", "t1", "t1ce", "t2"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unexpected label value {0}")]
    UnexpectedLabel(u8),
    #[error("crop target {target:?} exceeds source {source_shape:?}")]
    CropTooLarge {
        source_shape: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("modality shapes differ: {0}")]
    ModalityShape(String),
    #[error("{0}")]
    Empty(&'static str),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("k = {k} folds requested for {n} cases")]
    InvalidFolds { k: usize, n: usize },
    #[error("phantom radii must be strictly nested and positive: {0}")]
    PhantomRadii(String),
    #[error("invalid phantom spec: {0}")]
    PhantomSpec(String),
}

/// One subject: four co-registered modalities and a raw label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCase {
    pub id: String,
    pub flair: Tensor<f32>,
    pub t1: Tensor<f32>,
    pub t1ce: Tensor<f32>,
    pub t2: Tensor<f32>,
    /// Labels from [`RAW_LABELS`].
    pub mask: LabelMask,
}

impl StudyCase {
    /// Modalities in channel order.
    pub fn modalities(&self) -> [&Tensor<f32>; 4] {
        [&self.flair, &self.t1, &self.t1ce, &self.t2]
    }

    pub fn shape(&self) -> &[usize] {
        self.mask.shape()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (name, m) in MODALITIES.iter().zip(self.modalities()) {
            if m.shape() != self.mask.shape() {
                return Err(DataError::ModalityShape(format!(
                    "{name} {:?} vs mask {:?}",
                    m.shape(),
                    self.mask.shape()
                )));
            }
        }
        if let Some(&bad) = self.mask.labels().iter().find(|l| !RAW_LABELS.contains(l)) {
            return Err(DataError::UnexpectedLabel(bad));
        }
        Ok(())
    }
}

/// Network-ready sample: stacked normalised modalities `[spatial.., 4]` and
/// a remapped mask over `[spatial..]` with labels `0..4`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedSample {
    pub id: String,
    pub x: Tensor<f32>,
    pub y: LabelMask,
}

impl PreprocessedSample {
    pub fn new(id: impl Into<String>, x: Tensor<f32>, y: LabelMask) -> Result<Self, DataError> {
        if x.shape()[..x.rank() - 1] != *y.shape() {
            return Err(DataError::ModalityShape(format!("x {:?} vs y {:?}", x.shape(), y.shape())));
        }
        Ok(Self { id: id.into(), x, y })
    }

    pub fn spatial(&self) -> &[usize] {
        self.y.shape()
    }

    /// One-hot target `[spatial.., 4]`.
    pub fn y_one_hot(&self) -> Tensor<f32> {
        self.y.one_hot(N_CLASSES).expect("remapped labels are below the class count")
    }
}
