//! Memory-based continual learning as nonconvex optimization, at desk scale.
//!
//! The library implements the two-gradient continual update over a previous/
//! current task split, pluggable adaptive step-size policies (fine-tune,
//! fixed-rate replay, A-GEM projection, and the interference/transfer
//! adaptive rates with either sub-alpha or fixed clipping), replay memories
//! (FIFO ring and reservoir sampling), and the theoretical diagnostics that
//! make the convergence accounting observable: the per-step forgetting term,
//! the memory-bias term, their closed-form optima, the finite-population
//! variance of the memory error, and the telescoped bound ledger.
//!
//! Everything is deterministic given a master seed; stochastic components
//! draw from named ChaCha sub-streams.

pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod optimizer;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
pub use memory::{Minibatch, ReplayMemory};
pub use nn::{Activation, HeadSelect, LossGrad, MlpSpec, ParamVector};
pub use optimizer::{GradPair, PolicyConfig, PolicyKind, StepSizes};
pub use tasks::{Example, TaskStream};
