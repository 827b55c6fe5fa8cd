//! Closed-form conditional moments for designs with a discrete scalar
//! instrument: `Z` takes finitely many levels, `U_k | Z = z ~ N(z, 1)`
//! independently, and `Y | x, R = 1 ~ N(sum_k (u_k - z)^2, sigma2)`.

use std::sync::Arc;

use super::{discrete_outer, gaussian_delta, gaussian_tilted, DeltaTriple, Integrand, OutcomeFn};
use crate::error::{Error, Result};
use crate::model::{CovariateLayout, GFunction, HFamily};

/// Full-data law of `X`, respondent law of `Y` and the true propensity.
#[derive(Debug, Clone)]
pub struct InstrumentLaw {
    pub levels: Vec<f64>,
    pub probs: Vec<f64>,
    pub q: usize,
    pub sigma2: f64,
    pub beta: Vec<f64>,
    pub g: GFunction,
}

impl InstrumentLaw {
    /// `x = (u_1, .., u_q, z)`.
    pub fn layout(&self) -> CovariateLayout {
        CovariateLayout::leading(self.q, self.q + 1).expect("valid leading layout")
    }

    pub fn outcome_mean(&self, u: &[f64], z: f64) -> f64 {
        u.iter().map(|v| (v - z) * (v - z)).sum()
    }

    /// `w(x) = pr(R = 1 | x) = 1 / (1 + e^{-g(u)} E{e^{-h(Y)} | x, 1})` at the true `beta`.
    pub fn response_prob(&self, h: &HFamily, u: &[f64], z: f64) -> f64 {
        let d1 = gaussian_delta(h, self.outcome_mean(u, z), self.sigma2, &self.beta).d1;
        1.0 / (1.0 + (-self.g.eval(u)).exp() * d1)
    }

    /// `log pr(z) + log f(u | z)` up to a constant shared by all levels.
    fn log_joint(&self, u: &[f64], k: usize) -> f64 {
        let z = self.levels[k];
        self.probs[k].ln() - 0.5 * u.iter().map(|v| (v - z) * (v - z)).sum::<f64>()
    }

    /// Posterior log-weights of each level given `u` among respondents.
    pub fn respondent_log_posterior(&self, h: &HFamily, u: &[f64]) -> Vec<f64> {
        (0..self.levels.len())
            .map(|k| self.log_joint(u, k) + self.response_prob(h, u, self.levels[k]).ln())
            .collect()
    }
}

/// Moments computed from the true data-generating law.
#[derive(Debug, Clone)]
pub struct OracleProvider {
    law: Arc<InstrumentLaw>,
    h: HFamily,
    layout: CovariateLayout,
}

impl OracleProvider {
    pub fn new(law: InstrumentLaw, h: HFamily) -> Result<Self> {
        if law.levels.len() != law.probs.len() || law.levels.is_empty() {
            return Err(Error::Config("instrument levels and probabilities disagree".into()));
        }
        if law.beta.len() != h.dim() {
            return Err(Error::Config("true beta has wrong dimension for h".into()));
        }
        law.g.check_dim(law.q)?;
        let layout = law.layout();
        Ok(OracleProvider {
            law: Arc::new(law),
            h,
            layout,
        })
    }

    pub fn law(&self) -> &InstrumentLaw {
        &self.law
    }

    pub fn h(&self) -> &HFamily {
        &self.h
    }

    fn split<'a>(&self, x: &'a [f64]) -> Result<(&'a [f64], f64)> {
        if x.len() != self.layout.p() {
            return Err(Error::Config(format!(
                "oracle expects x of length {}, got {}",
                self.layout.p(),
                x.len()
            )));
        }
        Ok((&x[..self.law.q], x[self.law.q]))
    }

    pub fn inner_moments(&self, x: &[f64], beta: &[f64]) -> Result<DeltaTriple> {
        let (u, z) = self.split(x)?;
        let m = self.law.outcome_mean(u, z);
        gaussian_delta(&self.h, m, self.law.sigma2, beta).check()
    }

    pub fn outer_expect(&self, u: &[f64], beta: &[f64], integrand: Integrand<'_>) -> Result<Vec<f64>> {
        let log_post = self.law.respondent_log_posterior(&self.h, u);
        discrete_outer(&log_post, |k| {
            let x = self.layout.compose(u, &[self.law.levels[k]]);
            let delta = self.inner_moments(&x, beta)?;
            Ok(integrand(&x, &delta))
        })
    }

    pub fn tilted_expect(&self, x: &[f64], beta: &[f64], f: OutcomeFn<'_>) -> Result<Vec<f64>> {
        let (u, z) = self.split(x)?;
        let m = self.law.outcome_mean(u, z);
        Ok(gaussian_tilted(&self.h, m, self.law.sigma2, beta, |y| f(x, y)))
    }
}
