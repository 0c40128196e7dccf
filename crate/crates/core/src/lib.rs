//! Multilevel ensemble Kalman filtering for spatially extended models.
//!
//! States live in a truncated orthonormal eigenbasis. A [`LevelHierarchy`]
//! fixes the nested resolutions `N(l) = kappa^l`; forward models advance
//! coefficient vectors with keyed noise so that coarse/fine particle pairs
//! share their driving noise exactly.
//!
//! The crate ships three filters over the same model and observation
//! layers:
//!
//! * [`enkf`]: single-level perturbed-observation ensemble Kalman filter.
//! * [`mlenkf`]: multilevel ensemble Kalman filter with telescoping moments,
//!   PSD-repaired innovation covariance and per-level projected updates.
//! * [`kf`]: the exact Kalman filter for the linear Gaussian heat model,
//!   used as ground truth.
//!
//! [`experiment`] derives level/ensemble schedules from a target accuracy,
//! keeps cost ledgers and runs cost-versus-accuracy studies.

pub mod config;
pub mod enkf;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kf;
pub mod mlenkf;
pub mod model;
pub mod moments;
pub mod noise;
pub mod observable;
pub mod observation;
pub mod spectral;

pub use crate::enkf::{Ensemble, Enkf, EnkfRun};
pub use crate::error::{Error, Result};
pub use crate::experiment::{CostLedger, EpsilonPlan, Regime};
pub use crate::kf::GaussianState;
pub use crate::mlenkf::{Mlenkf, MlenkfRun, MultilevelEnsemble};
pub use crate::model::{ForwardModel, HeatModel, HeatModelParams, LinearGaussianModel};
pub use crate::moments::{CrossCovariance, GainOperator, ParticleBlock};
pub use crate::noise::{NoiseStream, StreamRole};
pub use crate::observable::Observable;
pub use crate::observation::{ObservationKind, ObservationOperator, ObservationRecord};
pub use crate::spectral::{LevelHierarchy, SpectralField};
