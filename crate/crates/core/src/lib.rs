//! Semiparametric estimation under nonignorable nonresponse with an
//! instrument and a working model for the covariate part of the propensity.
//!
//! The response propensity is `expit{h(y, beta) + g(u)}` with `h` known up to
//! `beta` and `g` unknown. Estimation plugs a possibly wrong `g*` into the
//! efficient score; conditional moments of the respondent outcome law come
//! from a [`moments::MomentProvider`].

pub mod error;
pub mod estimator;
pub mod io;
pub mod kernel;
pub mod model;
pub mod moments;
mod quadrature;
pub mod score;
pub mod simlab;
pub mod solver;

pub use error::{Error, Result};
pub use estimator::{
    bootstrap_se, estimate_theta_mean, fit_beta_point, solve_beta, solve_beta_with, solve_theta, BetaFit,
    KCorrection, SandwichOptions, ThetaFit,
};
pub use kernel::{nw_regress, KernelFamily, KernelSpec};
pub use model::{CovariateLayout, GFunction, HFamily, ModelSpec, Observation, Sample};
pub use moments::{MomentProvider, ProviderKind, ProviderSettings};
pub use score::{efficient_score, estimating_equation, ScoreContext};
pub use solver::{SolverMethod, SolverOptions};

pub use nalgebra;
