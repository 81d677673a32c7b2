//! Schedule Deviation for conditional diffusion flows.
//!
//! A conditional flow `v_s(x, z)` is *model-consistent* when the probability
//! path it traverses is the plain noising path of its own samples. This crate
//! measures how fast a flow departs from that path (its Schedule Deviation),
//! and ships everything needed to reproduce the phenomenon at desk scale:
//!
//! - [`schedules`]: log-linear variance-exploding schedules and the
//!   coefficient algebra (`c1`, `c2`, `gamma1`, `gamma2`).
//! - [`flows`]: the [`flows::ConditionalFlow`] contract, Gaussian-mixture
//!   ideal flows with analytic scores and divergences, and the empirical
//!   noise-prediction oracle.
//! - [`interpolants`]: natural cubic-spline and kernel self-guidance across the
//!   conditioning variable.
//! - [`samplers`]: DDPM, DDIM and gradient-estimation reverse samplers.
//! - [`sd_metric`]: the Monte-Carlo estimator, total deviation and a 1-D
//!   total-variation bound check.
//! - [`transport`]: exact empirical 1-Wasserstein distances.
//! - [`datasets`]: toy conditional mixtures and maze trajectories.
//! - [`tinyflow`]: a small FiLM-conditioned MLP denoiser with hand-written
//!   backpropagation.
//! - [`experiments`]: scripted reproductions emitting CSV bundles.
//!
//! Sign convention: `epsilon` is the noise prediction `E[xi | X_s = x]` and
//! the velocity is `v = sigma_dot(s) * epsilon` under the variance-exploding
//! schedule.
//!
//! Monte-Carlo loops run on rayon when the `parallel` feature is enabled
//! (the default); every random stream is keyed by `(seed, index)`, so results
//! are bit-identical with or without the feature.

pub mod config;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod flows;
pub mod interpolants;
pub mod io;
pub mod par;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod sd_metric;
pub mod stats;
pub mod tinyflow;
pub mod transport;

pub use error::{Error, Result};
pub use flows::{ConditionalFlow, GaussianMixture, MixtureComponent, MixtureFlow, SampleSet};
pub use par::Execution;
pub use schedules::{DiffusionSchedule, ScheduleCoefficients};
