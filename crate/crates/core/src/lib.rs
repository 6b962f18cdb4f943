//! Desk-scale laboratory for noise shift in denoising generative models.
//!
//! The pieces, bottom up:
//!
//! - [`schedule`]: interpolant coefficients, score/velocity algebra, shift law.
//! - [`oracle`]: exact marginals, scores and velocities for Gaussian mixtures.
//! - [`net`]: a dense network with reverse-mode gradients, AdamW and EMA.
//! - [`model`]: the noise- and class-conditioned velocity model.
//! - [`guidance`]: CFG, classifier-free and classifier-based noise awareness guidance.
//! - [`sampler`]: Euler ODE and Euler-Maruyama SDE integrators.
//! - [`estimator`]: the noise-level regressor, shift measurement and KDE.
//! - [`metrics`]: sliced Wasserstein-2 against an analytic mixture.

pub mod container;
pub mod error;
pub mod estimator;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod net;
pub mod oracle;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use oracle::{MixtureComponent, MixtureSpec, TimePrior};
pub use schedule::{NoiseShift, Schedule, ScheduleEval, ScheduleKind};
