//! Parallel-stream semantic image transmission.

pub mod autodiff;
pub mod channel;
pub mod codec;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod experiment;
pub mod fec;
pub mod metrics;
pub mod model;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod rate;
pub mod tensor;
pub mod train;

pub use autodiff::{AutodiffError, Graph, ParamId, ParamStore, Var};
pub use tensor::Tensor;
