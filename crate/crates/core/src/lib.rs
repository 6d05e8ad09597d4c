//! Physics-informed neural network training engine built around adaptive
//! pseudo-time stepping, plus a numerical verification harness for the
//! spurious-solution analysis that motivates the method.
//!
//! The crate is organized along the training pipeline:
//!
//! - [`autodiff`]: forward jets for input derivatives, reverse tape for
//!   parameter gradients
//! - [`models`]: PirateNet / MLP backbones, Fourier features, exact periodic
//!   embeddings
//! - [`problems`]: benchmark PDE residuals, collocation sampling, reference
//!   solutions, error metric
//! - [`losses`]: empirical and pseudo-time-relaxed losses, causal and
//!   grad-norm weighting
//! - [`pts`]: fixed and adaptive pseudo-time step-size state
//! - [`optim`]: Adam, SOAP, learning-rate schedule
//! - [`trainer`]: the training loop, evaluation, checkpoints
//! - [`verify`]: cutoff constructions, spurious fields, quadrature, scaling
//!   fits

pub mod autodiff;
pub mod losses;
pub mod models;
pub mod optim;
pub mod params;
pub mod problems;
pub mod pts;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use autodiff::{Jet, Scalar, Tape, Var};
pub use models::{Activation, Arch, Model, ModelConfig};
pub use pts::PtsState;
pub use trainer::{TrainConfig, TrainHistory};
pub use params::{Layout, ParamVector, Segment};
pub use problems::{Batch, ProblemSpec, ReferenceSolution};


