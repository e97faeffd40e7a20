//! Super-kernel optical flow: a self-contained CPU implementation of an
//! iterative flow network built from large-kernel depthwise blocks, with
//! exact operation accounting, finite-difference-verified gradients, and a
//! synthetic training/evaluation pipeline.

pub mod block;
pub mod config;
pub mod conv;
pub mod corr;
pub mod data;
pub mod error;
pub mod flow;
pub mod gma;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod upsample;
pub mod viz;

pub use error::{Result, SkError};
pub use tensor::{Precision, Shape4, Tensor4};
