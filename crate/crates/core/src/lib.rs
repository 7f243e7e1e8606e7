//! Online video super-resolution with a deformable attention pyramid.
//!
//! The crate is organized bottom-up: [`tensor`] holds the differentiable
//! kernels, [`encoder`], [`dap`] and [`cell`] compose them into the recurrent
//! model, and [`trainer`], [`degrade`], [`metrics`] and [`analysis`] provide
//! the tooling around it.

pub mod cell;
pub mod config;
pub mod counter;
pub(crate) mod ctx;
pub mod dap;
pub mod analysis;
pub mod degrade;
pub mod encoder;
pub mod error;
pub mod fault;
pub mod metrics;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use cell::{run_frames, run_sequence, step, Direction, HiddenState, RunOptions, StepOutput};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
pub use weights::ModelWeights;
