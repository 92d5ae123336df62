//! CBDES MoE: a mixture-of-experts over structurally heterogeneous vision
//! backbones, routed per image by a self-attention router, trained with soft
//! weighted fusion plus a load-balance regularizer, and served with sparse
//! top-1 expert activation.
//!
//! Everything runs on a small CPU f64 autodiff core so each formula and
//! invariant is directly testable. Start from [`train::MoeModel`] for the
//! end-to-end model, or the `examples/` directory for runnable tours of each
//! capability.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod param;
pub mod router;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Mode, Value};
pub use error::{Error, Result};
pub use param::Parameter;
pub use tensor::Tensor;
