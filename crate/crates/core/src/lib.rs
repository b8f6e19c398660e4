//! 2D U-Net segmentation of planning target volumes on CT, with the full
//! training, cross-validation and evaluation pipeline on plain `f64` tensors.

pub mod cvharness;
pub mod dataprep;
pub mod loss;
pub mod metrics;
pub mod phantom;
pub mod report;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use loss::LossKind;
pub use tensor::Tensor;
pub use unet::{build_unet, UNetConfig, UNetModel};
