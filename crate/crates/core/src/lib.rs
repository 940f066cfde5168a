//! Class activation maps for semantic segmentation networks.
//!
//! The crate carries its own small reverse-mode autodiff ([`tape`]), a U-Net
//! ([`unet`]) with named activation capture points, a desk-scale trainer
//! ([`trainer`]), the CAM family ([`cam`]) and heatmap rendering ([`render`]).

pub mod cam;
pub mod classifier;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod label;
pub mod model;
pub mod render;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use label::{predict_classes, LabelMap};
pub use model::{CapturePoint, Explainable, ForwardPass};
pub use tape::{NodeId, OpKind, ScalarTarget, Tape};
pub use tensor::Tensor;
pub use unet::{UNetConfig, UNetModel};
