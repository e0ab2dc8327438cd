//! Lightweight depth-estimation toolkit: deterministic rank-4 tensor kernels
//! with a reverse-mode gradient tape, a sparse encoder/decoder network, a
//! train-time multi-branch filter bank with exact single-filter fusion, a
//! closed-form complexity profiler, and pyramid/distillation losses.

pub mod distill;
pub mod drop;
pub mod error;
pub mod etm;
pub mod io;
pub mod loss;
pub mod net;
pub mod profile;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use drop::{DropSchedule, Mode};
pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{Axis, ConvSpec, Tensor4};

/// Production compute precision.
pub type Tensor4f = Tensor4<f32>;
/// Verification precision.
pub type Tensor4d = Tensor4<f64>;

pub type GradTapeF = tape::GradTape<f32>;
pub type GradTapeD = tape::GradTape<f64>;
