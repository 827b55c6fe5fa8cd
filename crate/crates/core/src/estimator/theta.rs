//! Estimation of full-data moments `E zeta(X, Y, theta) = 0`.
//!
//! Nonrespondent terms are imputed by the tilted conditional mean
//! `E{zeta e^{-h(Y)} | x, 1} / E{e^{-h(Y)} | x, 1}` at the fitted `beta`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::beta::{estimated_exp_neg_g, BetaFit};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::model::Sample;
use crate::moments::{response_kernel_for, response_rate, MomentProvider};
use crate::solver::{fd_jacobian, solve, SolverOptions};

/// `zeta(x, y, theta)`.
pub type Zeta = Arc<dyn Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// `zeta = y - theta`, whose root is the mean of `Y`.
pub fn mean_zeta() -> Zeta {
    Arc::new(|_: &[f64], y: f64, t: &[f64]| vec![y - t[0]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeMethod {
    NotComputed,
    Bootstrap,
    Influence,
}

impl fmt::Display for SeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeMethod::NotComputed => "none",
            SeMethod::Bootstrap => "bootstrap",
            SeMethod::Influence => "influence",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ThetaFit {
    pub theta: Vec<f64>,
    /// Empty until a standard error is attached.
    pub se: Vec<f64>,
    pub se_method: SeMethod,
    pub beta_fit: Arc<BetaFit>,
}

impl ThetaFit {
    pub fn with_se(mut self, se: Vec<f64>, method: SeMethod) -> Self {
        self.se = se;
        self.se_method = method;
        self
    }
}

fn nonrespondents(sample: &Sample) -> Vec<usize> {
    (0..sample.len()).filter(|&i| !sample.get(i).r()).collect()
}

/// Per-observation terms `r zeta(x, y) + (1 - r) T(x)` at `(beta, theta)`.
fn moment_terms(
    sample: &Sample,
    zeta: &Zeta,
    theta: &[f64],
    beta: &[f64],
    provider: &MomentProvider,
) -> Result<Vec<Vec<f64>>> {
    let miss = nonrespondents(sample);
    let f = |x: &[f64], y: f64| zeta(x, y, theta);
    let imputed = provider.tilted_batch(sample, beta, &f, &miss)?;
    let mut terms: Vec<Option<Vec<f64>>> = vec![None; sample.len()];
    for (&i, v) in miss.iter().zip(imputed) {
        terms[i] = Some(v);
    }
    Ok(sample
        .observations()
        .iter()
        .zip(terms)
        .map(|(o, t)| match o.y_opt() {
            Some(y) => zeta(o.x(), y, theta),
            None => t.expect("imputed every nonrespondent"),
        })
        .collect())
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut m = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b / n;
        }
    }
    m
}

/// Empirical moment `N^{-1} sum_i {r zeta + (1 - r) T}`.
pub fn theta_moment(
    sample: &Sample,
    zeta: &Zeta,
    theta: &[f64],
    beta: &[f64],
    provider: &MomentProvider,
) -> Result<Vec<f64>> {
    Ok(column_mean(&moment_terms(sample, zeta, theta, beta, provider)?))
}

/// Mean of `Y` with tilted imputation for nonrespondents.
pub fn estimate_theta_mean(sample: &Sample, beta_fit: &Arc<BetaFit>, provider: &MomentProvider) -> Result<ThetaFit> {
    let ident: Zeta = Arc::new(|_: &[f64], y: f64, _: &[f64]| vec![y]);
    let theta = theta_moment(sample, &ident, &[], &beta_fit.beta, provider)?;
    Ok(ThetaFit {
        theta,
        se: Vec::new(),
        se_method: SeMethod::NotComputed,
        beta_fit: Arc::clone(beta_fit),
    })
}

/// Root of the imputed moment equation; `opts.init` fixes the dimension of `theta`.
pub fn solve_theta(
    sample: &Sample,
    zeta: &Zeta,
    beta_fit: &Arc<BetaFit>,
    provider: &MomentProvider,
    opts: &SolverOptions,
) -> Result<ThetaFit> {
    if opts.init.is_empty() {
        return Err(Error::key("init", "solve_theta needs an initial theta"));
    }
    let beta = &beta_fit.beta;
    let root = solve(|t| theta_moment(sample, zeta, t, beta, provider), opts.init.len(), opts)?;
    Ok(ThetaFit {
        theta: root.x,
        se: Vec::new(),
        se_method: SeMethod::NotComputed,
        beta_fit: Arc::clone(beta_fit),
    })
}

/// `A_theta^{-1} V A_theta^{-T} / N` from the plug-in influence function.
///
/// `beta_fit` must carry its influence rows (see `solve_beta`).
/// `response_kernel` overrides the kernel used for `E(R | x)` with a kernel provider.
pub fn theta_influence_variance(
    sample: &Sample,
    zeta: &Zeta,
    theta_fit: &ThetaFit,
    provider: &MomentProvider,
    response_kernel: Option<KernelSpec>,
) -> Result<DMatrix<f64>> {
    let phi = theta_influence(sample, zeta, theta_fit, provider, response_kernel)?;
    let theta = &theta_fit.theta;
    let beta = &theta_fit.beta_fit.beta;
    let base = theta_moment(sample, zeta, theta, beta, provider)?;
    let mut f = |t: &[f64]| theta_moment(sample, zeta, t, beta, provider);
    let a = fd_jacobian(&mut f, theta, &base, 1e-5)?;
    let n = sample.len() as f64;
    let p = theta.len();
    let mut v = DMatrix::zeros(p, p);
    for row in &phi {
        let r = DVector::from_column_slice(row);
        v += &r * r.transpose();
    }
    v /= n;
    let a_inv = a.try_inverse().ok_or(Error::SingularJacobian)?;
    let cov = &a_inv * v * a_inv.transpose() / n;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Per-observation influence of the imputed moment at `theta_fit.theta`.
pub fn theta_influence(
    sample: &Sample,
    zeta: &Zeta,
    theta_fit: &ThetaFit,
    provider: &MomentProvider,
    response_kernel: Option<KernelSpec>,
) -> Result<Vec<Vec<f64>>> {
    let bf = &theta_fit.beta_fit;
    let phi_beta = bf.influence.as_ref().ok_or(Error::NotFitted)?;
    let theta = &theta_fit.theta;
    let beta = &bf.beta;
    let n = sample.len();
    let p = theta.len();
    let d = beta.len();
    let miss = nonrespondents(sample);
    let nf = n as f64;

    let terms = moment_terms(sample, zeta, theta, beta, provider)?;
    let mean = column_mean(&terms);

    // G = N^{-1} sum (1 - r_i) dT_i / dbeta
    let f = |x: &[f64], y: f64| zeta(x, y, theta);
    let t0 = provider.tilted_batch(sample, beta, &f, &miss)?;
    let mut g = DMatrix::<f64>::zeros(p, d);
    for k in 0..d {
        let h = 1e-5 * (1.0 + beta[k].abs());
        let mut bp = beta.clone();
        bp[k] += h;
        let t1 = provider.tilted_batch(sample, &bp, &f, &miss)?;
        for (a, b) in t1.iter().zip(&t0) {
            for r in 0..p {
                g[(r, k)] += (a[r] - b[r]) / (h * nf);
            }
        }
    }

    let k_alpha: Vec<Vec<f64>> = match provider {
        MomentProvider::Oracle(_) => vec![vec![0.0; p]; n],
        MomentProvider::Parametric(pp) => {
            let phi_alpha = pp.influence(sample)?;
            let params = pp.params();
            let mut dt = DMatrix::<f64>::zeros(p, params.len());
            for l in 0..params.len() {
                let h = 1e-5 * (1.0 + params[l].abs());
                let mut shifted = params.clone();
                shifted[l] += h;
                let moved = MomentProvider::Parametric(pp.with_params(&shifted));
                let t1 = moved.tilted_batch(sample, beta, &f, &miss)?;
                for (a, b) in t1.iter().zip(&t0) {
                    for r in 0..p {
                        dt[(r, l)] += (a[r] - b[r]) / (h * nf);
                    }
                }
            }
            phi_alpha
                .iter()
                .map(|ph| (&dt * DVector::from_column_slice(ph)).iter().copied().collect())
                .collect()
        }
        MomentProvider::Nonparametric(np) => {
            let kernel = response_kernel.unwrap_or_else(|| response_kernel_for(np.inner_kernel()));
            let w = response_rate(sample, &kernel)?;
            let resp: Vec<usize> = (0..n).filter(|&i| sample.get(i).r()).collect();
            let t_resp = provider.tilted_batch(sample, beta, &f, &resp)?;
            let inner = provider.inner_batch(sample, beta)?;
            let h = provider.h();
            let mut out = vec![vec![0.0; p]; n];
            for (&i, t) in resp.iter().zip(&t_resp) {
                let o = sample.get(i);
                let y = o.y();
                // (1 - w) / w = e^{-g} d1
                let odds = estimated_exp_neg_g(w[i], inner[i].d1, n) * inner[i].d1;
                let scale = odds * (-h.eval(y, beta)).exp() / inner[i].d1;
                let z = zeta(o.x(), y, theta);
                for r in 0..p {
                    out[i][r] = scale * (z[r] - t[r]);
                }
            }
            out
        }
    };

    Ok((0..n)
        .map(|i| {
            let gb = &g * DVector::from_column_slice(&phi_beta[i]);
            (0..p)
                .map(|r| terms[i][r] - mean[r] + gb[r] + k_alpha[i][r])
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::beta::{solve_beta, BetaFit};
    use crate::model::{CovariateLayout, GFunction, HFamily, ModelSpec, Observation};
    use crate::moments::{InstrumentLaw, NonparametricProvider, OracleProvider, ProviderKind};
    use crate::kernel::KernelFamily;

    fn stub_fit(beta: f64, n: usize) -> Arc<BetaFit> {
        Arc::new(BetaFit {
            beta: vec![beta],
            cov: None,
            se: None,
            iterations: 0,
            converged: true,
            residual_norm: 0.0,
            provider_kind: ProviderKind::Nonparametric,
            spec: ModelSpec::new(HFamily::Linear, GFunction::zero(1)),
            a_hat: None,
            influence: Some(vec![vec![0.0]; n]),
        })
    }

    fn small() -> Sample {
        let layout = CovariateLayout::leading(1, 2).unwrap();
        Sample::new(
            layout,
            vec![
                Observation::respondent(vec![0.1, 1.0], 1.2),
                Observation::nonrespondent(vec![0.3, 1.0]),
                Observation::respondent(vec![-0.4, 1.0], 0.4),
                Observation::respondent(vec![0.9, 1.0], 2.5),
                Observation::nonrespondent(vec![-0.2, 1.0]),
            ],
        )
        .unwrap()
    }

    fn kernel_provider(s: &Sample) -> MomentProvider {
        let k = KernelSpec::new(KernelFamily::Gaussian, 0.8, 1.0 / 3.0).unwrap();
        MomentProvider::Nonparametric(NonparametricProvider::fit(s, HFamily::Linear, k, k).unwrap())
    }

    #[test]
    fn full_response_gives_plain_mean() {
        let layout = CovariateLayout::leading(1, 2).unwrap();
        let ys = [1.0, 2.5, -0.5, 4.0];
        let obs = ys
            .iter()
            .enumerate()
            .map(|(i, y)| Observation::respondent(vec![i as f64, 1.0], *y))
            .collect();
        let s = Sample::new(layout, obs).unwrap();
        let p = kernel_provider(&s);
        let fit = estimate_theta_mean(&s, &stub_fit(-0.3, 4), &p).unwrap();
        assert_eq!(fit.theta[0], ys.iter().sum::<f64>() / 4.0);
    }

    #[test]
    fn zero_tilt_reduces_to_regression_imputation() {
        let s = small();
        let p = kernel_provider(&s);
        let fit = estimate_theta_mean(&s, &stub_fit(0.0, s.len()), &p).unwrap();
        let bw = 0.8 * 5f64.powf(-1.0 / 3.0);
        let resp = [(0.1, 1.2), (-0.4, 0.4), (0.9, 2.5)];
        let nw = |u: f64| {
            let (mut a, mut b) = (0.0, 0.0);
            for (uj, yj) in resp {
                let w = (-0.5 * ((uj - u) / bw).powi(2)).exp();
                a += w * yj;
                b += w;
            }
            a / b
        };
        let want = (1.2 + 0.4 + 2.5 + nw(0.3) + nw(-0.2)) / 5.0;
        assert!((fit.theta[0] - want).abs() < 1e-12);
    }

    #[test]
    fn solve_theta_matches_closed_form_mean() {
        let s = small();
        let p = kernel_provider(&s);
        let bf = stub_fit(-0.4, s.len());
        let direct = estimate_theta_mean(&s, &bf, &p).unwrap();
        let opts = SolverOptions { init: vec![0.0], ..Default::default() };
        let solved = solve_theta(&s, &mean_zeta(), &bf, &p, &opts).unwrap();
        assert!((direct.theta[0] - solved.theta[0]).abs() < 1e-8);
    }

    #[test]
    fn no_missingness_variance_is_sample_variance_over_n() {
        let layout = CovariateLayout::leading(1, 2).unwrap();
        let ys = [1.0, 2.5, -0.5, 4.0, 0.3];
        let obs = ys
            .iter()
            .enumerate()
            .map(|(i, y)| Observation::respondent(vec![i as f64 * 0.1, 1.0], *y))
            .collect();
        let s = Sample::new(layout, obs).unwrap();
        let p = kernel_provider(&s);
        let bf = stub_fit(-0.3, 5);
        let fit = estimate_theta_mean(&s, &bf, &p).unwrap();
        let cov = theta_influence_variance(&s, &mean_zeta(), &fit, &p, None).unwrap();
        let m = ys.iter().sum::<f64>() / 5.0;
        let var = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / 5.0;
        assert!((cov[(0, 0)] - var / 5.0).abs() < 1e-6 * var);
    }

    #[test]
    fn oracle_has_no_alpha_term() {
        let law = InstrumentLaw {
            levels: vec![-1.0, 1.0],
            probs: vec![0.5, 0.5],
            q: 1,
            sigma2: 1.0,
            beta: vec![-0.2],
            g: GFunction::affine(-0.4, vec![0.3]),
        };
        let layout = law.layout();
        let mut obs = Vec::new();
        for k in 0..40 {
            let u = -2.0 + 0.1 * k as f64;
            let z = if k % 2 == 0 { 1.0 } else { -1.0 };
            if k % 3 == 0 {
                obs.push(Observation::nonrespondent(vec![u, z]));
            } else {
                obs.push(Observation::respondent(vec![u, z], (u - z).powi(2) + 0.1 * (k % 5) as f64));
            }
        }
        let s = Sample::new(layout, obs).unwrap();
        let p = MomentProvider::Oracle(OracleProvider::new(law, HFamily::Linear).unwrap());
        let spec = ModelSpec::new(HFamily::Linear, GFunction::affine(0.0, vec![-0.4]));
        let bf = Arc::new(solve_beta(&s, &spec, &p, &SolverOptions::default()).unwrap());
        let fit = estimate_theta_mean(&s, &bf, &p).unwrap();
        let phi = theta_influence(&s, &mean_zeta(), &fit, &p, None).unwrap();
        // with k_alpha = 0, phi is the centred term plus the beta correction only
        let ident: Zeta = Arc::new(|_: &[f64], y: f64, _: &[f64]| vec![y]);
        let terms = moment_terms(&s, &ident, &[], &bf.beta, &p).unwrap();
        let mean = column_mean(&terms)[0];
        let phib = bf.influence.as_ref().unwrap();
        let ratio: Vec<f64> = (0..s.len())
            .filter(|&i| phib[i][0].abs() > 1e-6)
            .map(|i| (phi[i][0] - (terms[i][0] - mean)) / phib[i][0])
            .collect();
        for r in &ratio {
            assert!((r - ratio[0]).abs() < 1e-9);
        }
    }
}
