//! Estimation of the tilt parameter `beta` and its sandwich covariance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::model::{GFunction, ModelSpec, Sample};
use crate::moments::{response_kernel_for, response_rate, MomentProvider, ProviderKind};
use crate::score::{exp_neg_g, ScoreContext};
use crate::solver::{solve, SolverOptions};

#[derive(Debug, Clone)]
pub struct BetaFit {
    pub beta: Vec<f64>,
    /// `None` for point-only fits.
    pub cov: Option<DMatrix<f64>>,
    pub se: Option<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the mean score at `beta`.
    pub residual_norm: f64,
    pub provider_kind: ProviderKind,
    pub spec: ModelSpec,
    /// Mean derivative of the score in `beta`.
    pub a_hat: Option<DMatrix<f64>>,
    /// Per-observation influence `phi_beta,i = -A^{-1} psi_i`.
    pub influence: Option<Vec<Vec<f64>>>,
}

impl BetaFit {
    pub fn se_or_nan(&self) -> Vec<f64> {
        self.se.clone().unwrap_or_else(|| vec![f64::NAN; self.beta.len()])
    }
}

/// Source of `e^{-g(u)}` in the kernel-provider influence correction.
#[derive(Debug, Clone, Default)]
pub enum KCorrection {
    /// `(1 / w_hat(x) - 1) / d1_hat(x)` with `w_hat` a kernel regression of `r` on `x`.
    #[default]
    Estimated,
    /// The true `g`, available in simulation.
    TrueG(GFunction),
    Omit,
}

#[derive(Debug, Clone, Default)]
pub struct SandwichOptions {
    pub k: KCorrection,
    /// Kernel for the response-rate regression; derived from the provider when absent.
    pub response_kernel: Option<KernelSpec>,
}

#[derive(Debug, Clone)]
pub struct Sandwich {
    pub cov: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    /// Influence contributions `psi_i` entering `B`.
    pub psi: Vec<Vec<f64>>,
}

fn mean_score(ctx: &ScoreContext<'_>, beta: &[f64]) -> Result<Vec<f64>> {
    let n = ctx.sample().len() as f64;
    Ok(ctx.evaluate(beta)?.sum().into_iter().map(|v| v / n).collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Solves the estimating equation without computing a covariance.
pub fn fit_beta_point(sample: &Sample, spec: &ModelSpec, provider: &MomentProvider, opts: &SolverOptions) -> Result<BetaFit> {
    sample.check_estimable()?;
    let ctx = ScoreContext::new(spec, provider, sample)?;
    let d = spec.beta_dim;
    let root = solve(|b| mean_score(&ctx, b), d, opts)?;
    let residual_norm = norm(&mean_score(&ctx, &root.x)?);
    Ok(BetaFit {
        beta: root.x,
        cov: None,
        se: None,
        iterations: root.iterations,
        converged: residual_norm < opts.tol_residual,
        residual_norm,
        provider_kind: provider.kind(),
        spec: spec.clone(),
        a_hat: None,
        influence: None,
    })
}

/// Solves for `beta` and fills in the sandwich covariance with default options.
pub fn solve_beta(sample: &Sample, spec: &ModelSpec, provider: &MomentProvider, opts: &SolverOptions) -> Result<BetaFit> {
    solve_beta_with(sample, spec, provider, opts, &SandwichOptions::default())
}

pub fn solve_beta_with(
    sample: &Sample,
    spec: &ModelSpec,
    provider: &MomentProvider,
    opts: &SolverOptions,
    sandwich: &SandwichOptions,
) -> Result<BetaFit> {
    let mut fit = fit_beta_point(sample, spec, provider, opts)?;
    let sw = beta_sandwich(sample, &fit, provider, spec, sandwich)?;
    let a_inv = sw.a_hat.clone().try_inverse().ok_or(Error::SingularJacobian)?;
    fit.influence = Some(
        sw.psi
            .iter()
            .map(|p| (-(&a_inv * DVector::from_column_slice(p))).iter().copied().collect())
            .collect(),
    );
    fit.se = Some(sw.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect());
    fit.cov = Some(sw.cov);
    fit.a_hat = Some(sw.a_hat);
    Ok(fit)
}

/// Forward-difference derivative of the mean score at `beta`.
pub(crate) fn score_jacobian(ctx: &ScoreContext<'_>, beta: &[f64]) -> Result<DMatrix<f64>> {
    let d = beta.len();
    let base = mean_score(ctx, beta)?;
    let mut a = DMatrix::zeros(d, d);
    let mut bp = beta.to_vec();
    for k in 0..d {
        let h = 1e-5 * (1.0 + beta[k].abs());
        bp[k] = beta[k] + h;
        let sp = mean_score(ctx, &bp)?;
        bp[k] = beta[k];
        for r in 0..d {
            a[(r, k)] = (sp[r] - base[r]) / h;
        }
    }
    Ok(a)
}

/// `A^{-1} B A^{-T} / N` with `A` the mean score derivative and `B` the mean
/// outer product of the provider-specific influence contributions.
pub fn beta_sandwich(
    sample: &Sample,
    fit: &BetaFit,
    provider: &MomentProvider,
    spec: &ModelSpec,
    opts: &SandwichOptions,
) -> Result<Sandwich> {
    let ctx = ScoreContext::new(spec, provider, sample)?;
    let beta = &fit.beta;
    let d = beta.len();
    let n = sample.len();
    let a_hat = score_jacobian(&ctx, beta)?;
    let eval = ctx.evaluate(beta)?;
    let mut psi = eval.scores.clone();

    match provider {
        MomentProvider::Oracle(_) => {}
        MomentProvider::Parametric(p) => {
            let phi = p.influence(sample)?;
            let params = p.params();
            let base = eval.sum();
            let mut dsda = DMatrix::zeros(d, params.len());
            for l in 0..params.len() {
                let h = 1e-5 * (1.0 + params[l].abs());
                let mut shifted = params.clone();
                shifted[l] += h;
                let moved = MomentProvider::Parametric(p.with_params(&shifted));
                let ctx_l = ScoreContext::new(spec, &moved, sample)?;
                let s = ctx_l.evaluate(beta)?.sum();
                for r in 0..d {
                    dsda[(r, l)] = (s[r] - base[r]) / (h * n as f64);
                }
            }
            for (row, ph) in psi.iter_mut().zip(&phi) {
                let corr = &dsda * DVector::from_column_slice(ph);
                for (a, c) in row.iter_mut().zip(corr.iter()) {
                    *a += c;
                }
            }
        }
        MomentProvider::Nonparametric(p) => {
            let g_hat_exp: Option<Vec<f64>> = match &opts.k {
                KCorrection::Omit => None,
                KCorrection::TrueG(g) => Some((0..n).map(|i| exp_neg_g(g, &sample.u(i)).0).collect()),
                KCorrection::Estimated => {
                    let kernel = opts
                        .response_kernel
                        .unwrap_or_else(|| response_kernel_for(p.inner_kernel()));
                    let w = response_rate(sample, &kernel)?;
                    Some(
                        w.iter()
                            .zip(&eval.inner)
                            .map(|(w, t)| estimated_exp_neg_g(*w, t.d1, n))
                            .collect(),
                    )
                }
            };
            if let Some(ge) = g_hat_exp {
                let k = ctx.k_corrections(beta, &ge)?;
                for (row, kr) in psi.iter_mut().zip(&k) {
                    for (a, c) in row.iter_mut().zip(kr) {
                        *a += c;
                    }
                }
            }
        }
    }

    let (b_hat, cov) = assemble(&a_hat, &psi)?;
    Ok(Sandwich { cov, a_hat, b_hat, psi })
}

/// `(B, A^{-1} B A^{-T} / N)` with `B` the mean outer product of `psi`, symmetrized.
pub(crate) fn assemble(a_hat: &DMatrix<f64>, psi: &[Vec<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = a_hat.nrows();
    let n = psi.len() as f64;
    let mut b_hat = DMatrix::zeros(d, d);
    for p in psi {
        let v = DVector::from_column_slice(p);
        b_hat += &v * v.transpose();
    }
    b_hat /= n;
    let a_inv = a_hat.clone().try_inverse().ok_or(Error::SingularJacobian)?;
    let cov = &a_inv * &b_hat * a_inv.transpose() / n;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((b_hat, cov))
}

/// `e^{-g(u)} = (1 / w(x) - 1) / d1(x)`, with `w` clipped to `[1 / (2N), 1]`.
pub(crate) fn estimated_exp_neg_g(w: f64, d1: f64, n: usize) -> f64 {
    let w = w.clamp(0.5 / n as f64, 1.0);
    (1.0 / w - 1.0) / d1
}
