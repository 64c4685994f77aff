//! Generalized preference optimization (GPO) over tabular softmax policies.
//!
//! The crate is organised around the offline objective
//! `E_{(w,l)~μ}[f(β ρθ(w,l))]` for a convex surrogate `f`:
//!
//! - [`loss`]: the surrogate family, derivatives and admissibility checks.
//! - [`policy`]: softmax policies, preference datasets, the GPO loss, KL and
//!   the μ-weighted squared loss with exact gradients.
//! - [`trainer`]: deterministic gradient descent with per-step telemetry.
//! - [`bandit`], [`gaussian`], [`reward`], [`goodhart`]: experiments.

pub mod bandit;
pub mod checks;
pub mod csvfmt;
pub mod error;
pub mod gaussian;
pub mod goodhart;
pub mod loss;
pub mod math;
pub mod numdiff;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use loss::{make_loss, ConvexLoss, LossKind, LossRegistry};
pub use policy::{Pair, PreferenceDataset, SoftmaxPolicy};
pub use trainer::{train, TraceRecord, TrainConfig, TrainError};
