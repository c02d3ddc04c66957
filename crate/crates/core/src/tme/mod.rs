//! Tensor mixed effects model: design, configuration, estimators and the
//! double flip-flop fit.

pub mod config;
pub mod design;
pub mod em;
pub mod estimators;
pub mod existence;
pub mod fit;

pub use config::{DesignSpec, Normalization, RandomEffectsMethod, ResidualStructure, TmeConfig};
pub use em::{marginal_loglik, RandomPosterior};
pub use design::TmeDesign;
pub use estimators::{
    convergence_index, estimate_fixed, estimate_random_effects, loglik, normalize_identifiability, recover_random_cov,
    update_residual_cov, update_total_cov,
};
pub use existence::{existence_check, necessary_bound, ExistenceReport, ExistenceVerdict, SufficientRule};
pub use fit::{fit_tme, parameter_count, ConvergenceTrace, IterationRecord, PredictionMode, TmeFit};
