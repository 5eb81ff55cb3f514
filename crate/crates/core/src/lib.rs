//! Unsupervised optical-flow learning with an encoder-decoder network, a
//! stacked motion classifier, synthetic data with exact ground truth, and
//! flow evaluation utilities.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow_io;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod parallel;
pub mod losses;
pub mod motionnet;
pub mod params;
pub mod stacked;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod warp;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
