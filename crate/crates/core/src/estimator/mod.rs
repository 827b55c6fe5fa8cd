//! Point estimates and standard errors for `beta` and `theta`.

pub mod beta;
pub mod bootstrap;
pub mod theta;

pub use beta::{
    beta_sandwich, fit_beta_point, solve_beta, solve_beta_with, BetaFit, KCorrection, Sandwich, SandwichOptions,
};
pub use bootstrap::{bootstrap_se, task_rng};
pub use theta::{
    estimate_theta_mean, mean_zeta, solve_theta, theta_influence, theta_influence_variance, theta_moment, SeMethod,
    ThetaFit, Zeta,
};
