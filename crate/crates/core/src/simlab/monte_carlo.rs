//! Replicated simulation runs.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use log::{debug, info, warn};
use rand::Rng;
use rayon::prelude::*;

use super::design::Design;
use super::metrics::{Draw, MetricsRow};
use crate::error::{Error, Result};
use crate::estimator::{
    bootstrap_se, estimate_theta_mean, fit_beta_point, mean_zeta, solve_beta_with, task_rng, theta_influence_variance,
    BetaFit, KCorrection, SandwichOptions, SeMethod,
};
use crate::kernel::KernelSpec;
use crate::model::{GFunction, ModelSpec, Sample};
use crate::moments::{ProviderKind, ProviderSettings};
use crate::score::ScoreContext;
use crate::solver::SolverOptions;

const BOOTSTRAP_SALT: u64 = 0x5eed_b007_57a9_0001;

/// Respondent mean with standard error `sd(y_resp) / sqrt(n1)`.
pub fn naive_estimator(sample: &Sample) -> Result<Draw> {
    let ys: Vec<f64> = sample.observations().iter().filter_map(|o| o.y_opt()).collect();
    if ys.is_empty() {
        return Err(Error::Data("naive estimator needs at least one respondent".into()));
    }
    Ok(mean_and_se(&ys))
}

/// Full-data mean including latent outcomes, with standard error `sd(y) / sqrt(N)`.
pub fn oracle_estimator(sample: &Sample) -> Result<Draw> {
    let ys = sample.full_outcomes().map_err(|_| Error::OracleUnavailable)?;
    Ok(mean_and_se(ys))
}

fn mean_and_se(ys: &[f64]) -> Draw {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let se = if ys.len() > 1 {
        (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        f64::NAN
    };
    Draw { estimate: mean, se }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaSe {
    None,
    Influence,
    /// Bootstrap with this many resamples.
    Bootstrap(usize),
}

/// One row of the comparison table.
#[derive(Debug, Clone)]
pub enum EstimatorSpec {
    /// First component of `beta`.
    Beta { provider: ProviderKind, k: KCorrection },
    /// Mean of `Y` with tilted imputation.
    Theta { provider: ProviderKind, se: ThetaSe },
    Naive,
    Oracle,
}

impl EstimatorSpec {
    pub fn beta(provider: ProviderKind) -> Self {
        EstimatorSpec::Beta { provider, k: KCorrection::Estimated }
    }

    pub fn theta(provider: ProviderKind, se: ThetaSe) -> Self {
        EstimatorSpec::Theta { provider, se }
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Beta { provider, k } => match k {
                KCorrection::Estimated => format!("beta[{provider}]"),
                KCorrection::TrueG(_) => format!("beta[{provider},true-g]"),
                KCorrection::Omit => format!("beta[{provider},no-k]"),
            },
            EstimatorSpec::Theta { provider, se } => match se {
                ThetaSe::Bootstrap(b) => format!("theta[{provider},boot{b}]"),
                _ => format!("theta[{provider}]"),
            },
            EstimatorSpec::Naive => "naive".into(),
            EstimatorSpec::Oracle => "oracle-mean".into(),
        }
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloConfig {
    pub design: Design,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub g_star: GFunction,
    pub estimators: Vec<EstimatorSpec>,
    pub solver: SolverOptions,
    /// Replaces every kernel of the design when set.
    pub kernel: Option<KernelSpec>,
}

impl MonteCarloConfig {
    /// Defaults to the design's working model, the default solver and the
    /// design's kernels.
    pub fn new(design: Design, n: usize, replicates: usize, seed: u64, estimators: Vec<EstimatorSpec>) -> Self {
        let g_star = design.g_star.clone();
        MonteCarloConfig {
            design,
            n,
            replicates,
            seed,
            g_star,
            estimators,
            solver: SolverOptions::default(),
            kernel: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::key("replicates", "need at least 2 replicates"));
        }
        if self.n < 2 {
            return Err(Error::key("n", "sample size must be at least 2"));
        }
        if self.estimators.is_empty() {
            return Err(Error::key("estimators", "no estimators requested"));
        }
        self.g_star.check_dim(self.design.q())?;
        self.solver.validate()?;
        for e in &self.estimators {
            if let EstimatorSpec::Theta { se: ThetaSe::Bootstrap(b), .. } = e {
                if *b < 2 {
                    return Err(Error::key("bootstrap", "need at least 2 resamples"));
                }
            }
        }
        Ok(())
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::new(self.design.h(), self.g_star.clone())
    }

    fn beta_settings(&self, kind: ProviderKind) -> ProviderSettings {
        let (inner, outer) = self.kernel.map_or(self.design.beta_kernels, |k| (k, k));
        self.settings(kind, inner, outer)
    }

    fn theta_settings(&self, kind: ProviderKind) -> ProviderSettings {
        let (inner, outer) = self.kernel.map_or(self.design.theta_kernels, |k| (k, k));
        self.settings(kind, inner, outer)
    }

    fn settings(&self, kind: ProviderKind, inner: KernelSpec, outer: KernelSpec) -> ProviderSettings {
        match kind {
            ProviderKind::Oracle => ProviderSettings::oracle(self.design.law.clone()),
            ProviderKind::Parametric => ProviderSettings::parametric(self.design.basis.clone()),
            ProviderKind::Nonparametric => ProviderSettings::nonparametric(inner, outer),
        }
    }

    /// Target of each estimator under the design.
    pub fn truth(&self, e: &EstimatorSpec) -> f64 {
        match e {
            EstimatorSpec::Beta { .. } => self.design.true_beta()[0],
            _ => self.design.true_theta(),
        }
    }
}

/// Per-replicate cache of sandwich fits keyed by provider.
struct Replicate<'a> {
    cfg: &'a MonteCarloConfig,
    sample: Sample,
    spec: ModelSpec,
    index: u64,
    fits: HashMap<ProviderKind, Arc<BetaFit>>,
}

impl Replicate<'_> {
    fn beta_fit(&mut self, kind: ProviderKind, k: &KCorrection) -> Result<Arc<BetaFit>> {
        let cacheable = matches!(k, KCorrection::Estimated);
        if cacheable {
            if let Some(f) = self.fits.get(&kind) {
                return Ok(Arc::clone(f));
            }
        }
        let settings = self.cfg.beta_settings(kind);
        let provider = settings.fit(&self.sample, &self.spec.h)?;
        let opts = SandwichOptions { k: k.clone(), response_kernel: None };
        let fit = Arc::new(solve_beta_with(&self.sample, &self.spec, &provider, &self.cfg.solver, &opts)?);
        if cacheable {
            self.fits.insert(kind, Arc::clone(&fit));
        }
        Ok(fit)
    }

    fn run(&mut self, e: &EstimatorSpec) -> Result<Draw> {
        match e {
            EstimatorSpec::Naive => naive_estimator(&self.sample),
            EstimatorSpec::Oracle => oracle_estimator(&self.sample),
            EstimatorSpec::Beta { provider, k } => {
                let fit = self.beta_fit(*provider, k)?;
                Ok(Draw { estimate: fit.beta[0], se: fit.se_or_nan()[0] })
            }
            EstimatorSpec::Theta { provider, se } => self.theta(*provider, *se),
        }
    }

    fn theta(&mut self, kind: ProviderKind, se: ThetaSe) -> Result<Draw> {
        let bf = match se {
            ThetaSe::Influence => self.beta_fit(kind, &KCorrection::Estimated)?,
            _ => match self.fits.get(&kind) {
                Some(f) => Arc::clone(f),
                None => {
                    let p = self.cfg.beta_settings(kind).fit(&self.sample, &self.spec.h)?;
                    Arc::new(fit_beta_point(&self.sample, &self.spec, &p, &self.cfg.solver)?)
                }
            },
        };
        let provider = self.cfg.theta_settings(kind).fit(&self.sample, &self.spec.h)?;
        let fit = estimate_theta_mean(&self.sample, &bf, &provider)?;
        let estimate = fit.theta[0];
        let se = match se {
            ThetaSe::None => f64::NAN,
            ThetaSe::Influence => {
                let fit = fit.with_se(Vec::new(), SeMethod::Influence);
                let cov = theta_influence_variance(&self.sample, &mean_zeta(), &fit, &provider, None)?;
                cov[(0, 0)].max(0.0).sqrt()
            }
            ThetaSe::Bootstrap(b) => {
                let seed = task_rng(self.cfg.seed ^ BOOTSTRAP_SALT, self.index).random::<u64>();
                let cfg = self.cfg;
                let spec = &self.spec;
                let est = |s: &Sample| -> Result<Vec<f64>> {
                    let bp = cfg.beta_settings(kind).fit(s, &spec.h)?;
                    let bf = Arc::new(fit_beta_point(s, spec, &bp, &cfg.solver)?);
                    let tp = cfg.theta_settings(kind).fit(s, &spec.h)?;
                    Ok(estimate_theta_mean(s, &bf, &tp)?.theta)
                };
                bootstrap_se(&self.sample, est, b, seed)?[0]
            }
        };
        Ok(Draw { estimate, se })
    }
}

/// Outcome of every estimator on every replicate, in replicate order.
pub fn run_replicates(cfg: &MonteCarloConfig) -> Result<Vec<Vec<Result<Draw>>>> {
    cfg.validate()?;
    let spec = cfg.spec();
    spec.validate(cfg.design.q())?;
    info!(
        "design {} n={} replicates={} seed={} g*={}",
        cfg.design.id, cfg.n, cfg.replicates, cfg.seed, cfg.g_star
    );
    Ok((0..cfg.replicates as u64)
        .into_par_iter()
        .map(|k| {
            let sample = match cfg.design.generate(cfg.n, cfg.seed, k) {
                Ok(s) => s,
                Err(e) => return cfg.estimators.iter().map(|_| Err(clone_err(&e))).collect(),
            };
            let mut rep = Replicate { cfg, sample, spec: spec.clone(), index: k, fits: HashMap::new() };
            cfg.estimators
                .iter()
                .map(|e| {
                    let out = rep.run(e).and_then(|d| {
                        if d.estimate.is_finite() {
                            Ok(d)
                        } else {
                            Err(Error::DegenerateConditional("non-finite estimate".into()))
                        }
                    });
                    if let Err(err) = &out {
                        debug!("replicate {k} {e}: {err}");
                    }
                    out
                })
                .collect()
        })
        .collect())
}

fn clone_err(e: &Error) -> Error {
    Error::Data(e.to_string())
}

/// One metrics row per estimator, in roster order.
pub fn run_monte_carlo(cfg: &MonteCarloConfig) -> Result<Vec<MetricsRow>> {
    let reps = run_replicates(cfg)?;
    Ok(summarize(cfg, &reps))
}

pub fn summarize(cfg: &MonteCarloConfig, reps: &[Vec<Result<Draw>>]) -> Vec<MetricsRow> {
    cfg.estimators
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let mut draws = Vec::with_capacity(reps.len());
            let mut failures = 0;
            for rep in reps {
                match &rep[j] {
                    Ok(d) => draws.push(*d),
                    Err(_) => failures += 1,
                }
            }
            let row = MetricsRow::aggregate(e.label(), &draws, failures, cfg.truth(e));
            if row.flagged {
                warn!("{}: {} of {} replicates failed", row.label, failures, reps.len());
            }
            row
        })
        .collect()
}

/// Mean and standard deviation of each score component at the true `beta`
/// over one large sample of size `m`.
pub fn score_mean_at_truth(design: &Design, g_star: &GFunction, m: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let sample = design.generate(m, seed, 0)?;
    let spec = ModelSpec::new(design.h(), g_star.clone());
    spec.validate(design.q())?;
    let provider = ProviderSettings::oracle(design.law.clone()).fit(&sample, &spec.h)?;
    let ctx = ScoreContext::new(&spec, &provider, &sample)?;
    let eval = ctx.evaluate(design.true_beta())?;
    let d = spec.beta_dim;
    let mf = m as f64;
    let mut mean = vec![0.0; d];
    for s in &eval.scores {
        for (a, v) in mean.iter_mut().zip(s) {
            *a += v / mf;
        }
    }
    let sd = (0..d)
        .map(|j| (eval.scores.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / (mf - 1.0)).sqrt())
        .collect();
    Ok((mean, sd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CovariateLayout, Observation};
    use crate::simlab::DesignId;

    fn tiny() -> Sample {
        let layout = CovariateLayout::leading(1, 2).unwrap();
        let obs = vec![
            Observation::respondent(vec![0.0, 1.0], 1.0),
            Observation::respondent(vec![0.5, 1.0], 3.0),
            Observation::nonrespondent(vec![1.0, -1.0]),
        ];
        Sample::new(layout, obs).unwrap()
    }

    #[test]
    fn naive_and_oracle_means() {
        let s = tiny();
        let naive = naive_estimator(&s).unwrap();
        assert_eq!(naive.estimate, 2.0);
        assert!((naive.se - 1.0).abs() < 1e-12);
        assert!(matches!(oracle_estimator(&s), Err(Error::OracleUnavailable)));
        let full = s.clone().with_latent_outcomes(vec![1.0, 3.0, 5.0]).unwrap();
        assert_eq!(oracle_estimator(&full).unwrap().estimate, 3.0);
    }

    #[test]
    fn oracle_matches_naive_without_missingness() {
        let layout = CovariateLayout::leading(1, 2).unwrap();
        let obs: Vec<_> = (0..6).map(|i| Observation::respondent(vec![i as f64, 1.0], 0.7)).collect();
        let s = Sample::new(layout, obs).unwrap().with_latent_outcomes(vec![0.7; 6]).unwrap();
        assert_eq!(naive_estimator(&s).unwrap(), oracle_estimator(&s).unwrap());
        assert!((naive_estimator(&s).unwrap().estimate - 0.7).abs() < 1e-15);
    }

    #[test]
    fn small_run_is_deterministic() {
        let d = Design::new(DesignId::A);
        let cfg = MonteCarloConfig::new(
            d,
            200,
            6,
            42,
            vec![
                EstimatorSpec::beta(ProviderKind::Oracle),
                EstimatorSpec::theta(ProviderKind::Oracle, ThetaSe::Influence),
                EstimatorSpec::Naive,
                EstimatorSpec::Oracle,
            ],
        );
        let a = run_monte_carlo(&cfg).unwrap();
        let b = run_monte_carlo(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a[2].label, "naive");
        assert!(a.iter().all(|r| r.n_replicates + r.n_failures == 6));
        assert!(a[0].se_x100 > 0.0);
    }

    #[test]
    fn config_validation() {
        let d = Design::new(DesignId::B2);
        let mut cfg = MonteCarloConfig::new(d, 100, 1, 0, vec![EstimatorSpec::Naive]);
        assert!(cfg.validate().is_err());
        cfg.replicates = 3;
        assert!(cfg.validate().is_ok());
        cfg.g_star = GFunction::zero(1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn labels_are_distinct() {
        let roster = [
            EstimatorSpec::beta(ProviderKind::Nonparametric),
            EstimatorSpec::Beta { provider: ProviderKind::Nonparametric, k: KCorrection::Omit },
            EstimatorSpec::theta(ProviderKind::Parametric, ThetaSe::Bootstrap(50)),
            EstimatorSpec::Oracle,
        ];
        let labels: std::collections::HashSet<_> = roster.iter().map(EstimatorSpec::label).collect();
        assert_eq!(labels.len(), roster.len());
    }
}
