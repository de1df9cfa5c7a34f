//! Sufficient statistics, likelihoods, scores and estimators.
//!
//! Everything downstream of simulation consumes [`SufficientStats`]: the
//! likelihoods depend on a path only through statewise occupation times and
//! jump counts, so each evaluation is O(N) per parameter value.

pub mod fit;
pub mod likelihood;
pub mod optim;
pub mod score;
pub mod stats;

pub use fit::{
    default_init, fit_conditional_mle, fit_qmle, mle_marked_closed_form, mle_unconditional, moment_init, EstimatorKind,
    FitFlag, FitOptions, FitResult,
};
pub use likelihood::{loglik_conditional, loglik_conditional_with, loglik_unconditional};
pub use score::{
    full_score, full_score_with, full_weights, unconditional_score, working_score, working_score_with, working_weights,
    ScoreVector, ScoreWeights,
};
pub use stats::{sufficient_stats, SufficientStats};
