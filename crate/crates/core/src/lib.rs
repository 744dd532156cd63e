//! Volumetric glioma segmentation engine.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`init`], [`optim`]: channels-last tensors,
//!   a reverse-mode tape, He-uniform initialisation and Adam.
//! * [`nifti`]: single-file NIfTI-1 reader and writer.
//! * [`data`]: normalisation, cropping, label handling, augmentation,
//!   2D slicing, batching, k-fold planning and synthetic tumour phantoms.
//! * [`arch`]: UNet, Inception-v3/v4 and ResNet style encoder-decoders in 2D
//!   and 3D, described declaratively and executed on the tape.
//! * [`loss`], [`metrics`]: soft Dice + focal objective; Dice, IoU, accuracy
//!   and averaged Hausdorff distance.
//! * [`train`]: training loop, evaluation, k-fold harness and checkpoints.
//! * [`cli`]: the `gseg` command line.

pub mod arch;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod nifti;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, PoolMode, Tape, Var};
pub use mask::{LabelMask, N_CLASSES};
pub use params::{ParamStore, Parameter};
pub use tensor::{DType, Element, Tensor, TensorError};
