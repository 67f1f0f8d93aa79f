//! Scalable deep compressive sensing.
//!
//! One trained sampling matrix serves every CS ratio up to a maximum `R_M`:
//! sampling at ratio `r` uses the first `ceil(r N)` rows, and the
//! reconstruction network is trained with random per-sample ratio masks so
//! that it works across the whole range.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape over
//! dense `f64` tensors, the block CS primitives, two reconstructor families
//! (a residual MLP and an unfolded ISTA-style network), training, metrics,
//! and the binary checkpoint and measurement formats.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod cs;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod train;
mod wire;

pub use autodiff::{BackwardFault, Tape, Var};
pub use checkpoint::Checkpoint;
pub use codec::MeasurementFile;
pub use cs::{BlockGeometry, Ratio};
pub use data::GrayImage;
pub use error::{Error, Result};
pub use models::ModelSpec;
pub use pipeline::ScalableModel;
pub use tensor::Tensor;
pub use train::{Strategy, TrainConfig};
