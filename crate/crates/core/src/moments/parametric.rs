//! Parametric moments.
//!
//! Inner law: `Y | x, R = 1 ~ N(b(x)'alpha, sigma2)` with a user-chosen mean
//! basis `b`, fitted by least squares on respondents. Outer law: the
//! instrument level given `u` among respondents follows a multinomial logit in
//! `(1, u_k, u_k^2)`, fitted by maximum likelihood on respondents.
//!
//! All fitted quantities are collected in one parameter vector
//! `(alpha, sigma2, logit coefficients)` so that the score can be
//! differentiated in it and paired with the per-observation influence
//! functions from [`ParametricProvider::influence`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use super::{discrete_outer, gaussian_delta, gaussian_tilted, DeltaTriple, Integrand, OutcomeFn};
use crate::error::{Error, Result};
use crate::model::{CovariateLayout, HFamily, Sample};

const MAX_LEVELS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum BasisTerm {
    Const,
    Linear(usize),
    Square(usize),
    Cross(usize, usize),
    /// `sum (x_a - x_b)^2` over the listed pairs.
    SquaredDiffSum(Vec<(usize, usize)>),
}

impl BasisTerm {
    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            BasisTerm::Const => 1.0,
            BasisTerm::Linear(a) => x[*a],
            BasisTerm::Square(a) => x[*a] * x[*a],
            BasisTerm::Cross(a, b) => x[*a] * x[*b],
            BasisTerm::SquaredDiffSum(pairs) => pairs
                .iter()
                .map(|&(a, b)| (x[a] - x[b]) * (x[a] - x[b]))
                .sum(),
        }
    }

    fn max_index(&self) -> Option<usize> {
        match self {
            BasisTerm::Const => None,
            BasisTerm::Linear(a) | BasisTerm::Square(a) => Some(*a),
            BasisTerm::Cross(a, b) => Some(*a.max(b)),
            BasisTerm::SquaredDiffSum(p) => p.iter().map(|&(a, b)| a.max(b)).max(),
        }
    }
}

/// Terms of the respondent mean `E(Y | x, R = 1)`.
///
/// Text form: terms separated by `;`, each one of `1`, `x0`, `x0^2`,
/// `x0*x1` or a sum of squared differences `(x0-x2)^2+(x1-x2)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanBasis(pub Vec<BasisTerm>);

impl MeanBasis {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.0.iter().map(|t| t.eval(x)).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check(&self, p: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::key("basis", "mean basis is empty"));
        }
        match self.0.iter().filter_map(BasisTerm::max_index).max() {
            Some(m) if m >= p => Err(Error::key(
                "basis",
                format!("basis refers to x{m} but x has {p} coordinates"),
            )),
            _ => Ok(()),
        }
    }
}

fn parse_var(s: &str) -> Option<usize> {
    s.trim().strip_prefix('x')?.parse().ok()
}

impl FromStr for BasisTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::key("basis", format!("cannot parse basis term `{s}`"));
        let t = s.trim();
        if t == "1" {
            return Ok(BasisTerm::Const);
        }
        if t.starts_with('(') {
            let pairs = t
                .split('+')
                .map(|part| {
                    let inner = part
                        .trim()
                        .strip_prefix('(')
                        .and_then(|p| p.strip_suffix(")^2"))
                        .ok_or_else(bad)?;
                    let (a, b) = inner.split_once('-').ok_or_else(bad)?;
                    Ok((parse_var(a).ok_or_else(bad)?, parse_var(b).ok_or_else(bad)?))
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(BasisTerm::SquaredDiffSum(pairs));
        }
        if let Some((a, b)) = t.split_once('*') {
            return Ok(BasisTerm::Cross(
                parse_var(a).ok_or_else(bad)?,
                parse_var(b).ok_or_else(bad)?,
            ));
        }
        if let Some(a) = t.strip_suffix("^2") {
            return Ok(BasisTerm::Square(parse_var(a).ok_or_else(bad)?));
        }
        parse_var(t).map(BasisTerm::Linear).ok_or_else(bad)
    }
}

impl fmt::Display for BasisTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisTerm::Const => f.write_str("1"),
            BasisTerm::Linear(a) => write!(f, "x{a}"),
            BasisTerm::Square(a) => write!(f, "x{a}^2"),
            BasisTerm::Cross(a, b) => write!(f, "x{a}*x{b}"),
            BasisTerm::SquaredDiffSum(p) => {
                let parts: Vec<String> = p.iter().map(|(a, b)| format!("(x{a}-x{b})^2")).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

impl FromStr for MeanBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(';')
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()
            .map(MeanBasis)
    }
}

impl fmt::Display for MeanBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| t.to_string()).collect();
        f.write_str(&parts.join(";"))
    }
}

#[derive(Debug, Clone)]
pub struct ParametricProvider {
    h: HFamily,
    layout: CovariateLayout,
    basis: MeanBasis,
    alpha: Vec<f64>,
    sigma2: f64,
    levels: Vec<Vec<f64>>,
    /// `(levels - 1) x features`, row-major; the last level is the reference.
    logit: Vec<f64>,
}

fn outer_features(u: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + 2 * u.len());
    f.push(1.0);
    f.extend_from_slice(u);
    f.extend(u.iter().map(|v| v * v));
    f
}

/// Softmax probabilities with the last class as reference (`eta = 0`).
fn class_probs(logit: &[f64], n_classes: usize, feat: &[f64]) -> Vec<f64> {
    let nf = feat.len();
    let mut eta: Vec<f64> = (0..n_classes - 1)
        .map(|k| logit[k * nf..(k + 1) * nf].iter().zip(feat).map(|(a, b)| a * b).sum())
        .collect();
    eta.push(0.0);
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct RespondentView {
    idx: Vec<usize>,
    basis: Vec<Vec<f64>>,
    y: Vec<f64>,
    feat: Vec<Vec<f64>>,
    class: Vec<usize>,
}

impl ParametricProvider {
    pub fn fit(sample: &Sample, h: HFamily, basis: MeanBasis) -> Result<Self> {
        basis.check(sample.p())?;
        let layout = sample.layout().clone();
        let mut levels: Vec<Vec<f64>> = Vec::new();
        for o in sample.observations().iter().filter(|o| o.r()) {
            let z = layout.z_of(o.x());
            if !levels.contains(&z) {
                levels.push(z);
                if levels.len() > MAX_LEVELS {
                    return Err(Error::Config(format!(
                        "parametric provider needs a discrete instrument (found more than {MAX_LEVELS} levels)"
                    )));
                }
            }
        }
        if levels.is_empty() {
            return Err(Error::Data("sample has no respondents".into()));
        }
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));

        let mut provider = ParametricProvider {
            h,
            layout,
            basis,
            alpha: Vec::new(),
            sigma2: 0.0,
            levels,
            logit: Vec::new(),
        };
        let view = provider.respondents(sample);
        provider.fit_mean(&view)?;
        provider.fit_logit(&view)?;
        Ok(provider)
    }

    fn respondents(&self, sample: &Sample) -> RespondentView {
        let mut v = RespondentView {
            idx: Vec::new(),
            basis: Vec::new(),
            y: Vec::new(),
            feat: Vec::new(),
            class: Vec::new(),
        };
        for (i, o) in sample.observations().iter().enumerate().filter(|(_, o)| o.r()) {
            v.idx.push(i);
            v.basis.push(self.basis.eval(o.x()));
            v.y.push(o.y());
            v.feat.push(outer_features(&self.layout.u_of(o.x())));
            let z = self.layout.z_of(o.x());
            v.class.push(self.levels.iter().position(|l| *l == z).unwrap_or(0));
        }
        v
    }

    fn fit_mean(&mut self, v: &RespondentView) -> Result<()> {
        let n1 = v.y.len();
        let p = self.basis.len();
        if n1 <= p {
            return Err(Error::Data(format!(
                "{n1} respondents cannot identify a {p}-term mean basis"
            )));
        }
        let b = DMatrix::from_fn(n1, p, |i, k| v.basis[i][k]);
        let y = DVector::from_column_slice(&v.y);
        let gram = b.transpose() * &b;
        let rhs = b.transpose() * &y;
        let chol = gram.cholesky().ok_or_else(|| {
            Error::DegenerateConditional("mean basis is collinear on respondents".into())
        })?;
        let alpha = chol.solve(&rhs);
        let resid = &y - &b * &alpha;
        self.sigma2 = resid.norm_squared() / n1 as f64;
        if !(self.sigma2 > 0.0) {
            return Err(Error::DegenerateConditional(
                "respondent residual variance is zero".into(),
            ));
        }
        self.alpha = alpha.iter().copied().collect();
        Ok(())
    }

    fn n_classes(&self) -> usize {
        self.levels.len()
    }

    fn n_features(&self) -> usize {
        1 + 2 * self.layout.q()
    }

    /// Gradient and negative Hessian of the respondent multinomial log-likelihood.
    fn logit_derivatives(&self, logit: &[f64], v: &RespondentView) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.n_classes() - 1;
        let nf = self.n_features();
        let dim = k * nf;
        let mut grad = DVector::zeros(dim);
        let mut info = DMatrix::zeros(dim, dim);
        for (feat, &c) in v.feat.iter().zip(&v.class) {
            let p = class_probs(logit, self.n_classes(), feat);
            for a in 0..k {
                let resid = if c == a { 1.0 } else { 0.0 } - p[a];
                for f in 0..nf {
                    grad[a * nf + f] += feat[f] * resid;
                }
                for b in 0..k {
                    let w = p[a] * (if a == b { 1.0 } else { 0.0 } - p[b]);
                    for f in 0..nf {
                        for g in 0..nf {
                            info[(a * nf + f, b * nf + g)] += w * feat[f] * feat[g];
                        }
                    }
                }
            }
        }
        (grad, info)
    }

    fn fit_logit(&mut self, v: &RespondentView) -> Result<()> {
        let dim = (self.n_classes() - 1) * self.n_features();
        self.logit = vec![0.0; dim];
        if dim == 0 {
            return Ok(());
        }
        for iter in 0..100 {
            let (grad, mut info) = self.logit_derivatives(&self.logit, v);
            for d in 0..dim {
                info[(d, d)] += 1e-10;
            }
            let step = info
                .cholesky()
                .ok_or(Error::SingularJacobian)?
                .solve(&grad);
            // Halve the step if it would be absurdly large (near-separation).
            let scale = (10.0 / step.amax()).min(1.0);
            for (c, s) in self.logit.iter_mut().zip(step.iter()) {
                *c += scale * s;
            }
            if step.amax() * scale < 1e-10 {
                return Ok(());
            }
            if iter == 99 {
                return Err(Error::NoConvergence {
                    last: self.logit.clone(),
                    iterations: 100,
                    residual: grad.amax(),
                });
            }
        }
        Ok(())
    }

    pub fn h(&self) -> &HFamily {
        &self.h
    }

    pub fn basis(&self) -> &MeanBasis {
        &self.basis
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    /// `(alpha, sigma2, logit coefficients)`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.alpha.clone();
        p.push(self.sigma2);
        p.extend_from_slice(&self.logit);
        p
    }

    pub fn with_params(&self, params: &[f64]) -> Self {
        assert_eq!(params.len(), self.params().len());
        let na = self.alpha.len();
        let mut out = self.clone();
        out.alpha = params[..na].to_vec();
        out.sigma2 = params[na];
        out.logit = params[na + 1..].to_vec();
        out
    }

    /// Per-observation influence `phi_i` with `params_hat - params ~ N^{-1} sum_i r_i phi_i`;
    /// rows of nonrespondents are zero.
    pub fn influence(&self, sample: &Sample) -> Result<Vec<Vec<f64>>> {
        let n = sample.len() as f64;
        let v = self.respondents(sample);
        let n1 = v.y.len() as f64;
        let pa = self.alpha.len();
        let total = self.params().len();

        let mut gram = DMatrix::<f64>::zeros(pa, pa);
        for b in &v.basis {
            let bv = DVector::from_column_slice(b);
            gram += &bv * bv.transpose();
        }
        gram /= n;
        let gram_inv = gram.try_inverse().ok_or(Error::SingularJacobian)?;

        let (_, mut info) = self.logit_derivatives(&self.logit, &v);
        let info_inv = if info.nrows() > 0 {
            info /= n;
            Some(info.try_inverse().ok_or(Error::SingularJacobian)?)
        } else {
            None
        };

        let mut rows = vec![vec![0.0; total]; sample.len()];
        let k = self.n_classes() - 1;
        let nf = self.n_features();
        for (j, &i) in v.idx.iter().enumerate() {
            let bv = DVector::from_column_slice(&v.basis[j]);
            let eps = v.y[j] - bv.dot(&DVector::from_column_slice(&self.alpha));
            let phi_a = &gram_inv * (bv * eps);
            let row = &mut rows[i];
            row[..pa].copy_from_slice(phi_a.as_slice());
            row[pa] = (eps * eps - self.sigma2) * n / n1;
            if let Some(inv) = &info_inv {
                let p = class_probs(&self.logit, self.n_classes(), &v.feat[j]);
                let mut s = DVector::zeros(k * nf);
                for a in 0..k {
                    let resid = if v.class[j] == a { 1.0 } else { 0.0 } - p[a];
                    for f in 0..nf {
                        s[a * nf + f] = v.feat[j][f] * resid;
                    }
                }
                let phi_g = inv * s;
                row[pa + 1..].copy_from_slice(phi_g.as_slice());
            }
        }
        Ok(rows)
    }

    fn mean_at(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.layout.p() {
            return Err(Error::Config(format!(
                "expected x of length {}, got {}",
                self.layout.p(),
                x.len()
            )));
        }
        Ok(self.basis.eval(x).iter().zip(&self.alpha).map(|(b, a)| b * a).sum())
    }

    pub fn inner_moments(&self, x: &[f64], beta: &[f64]) -> Result<DeltaTriple> {
        if self.alpha.is_empty() {
            return Err(Error::NotFitted);
        }
        let m = self.mean_at(x)?;
        gaussian_delta(&self.h, m, self.sigma2, beta).check()
    }

    pub fn outer_expect(&self, u: &[f64], beta: &[f64], integrand: Integrand<'_>) -> Result<Vec<f64>> {
        if self.alpha.is_empty() {
            return Err(Error::NotFitted);
        }
        let probs = class_probs(&self.logit, self.n_classes(), &outer_features(u));
        let log_post: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        discrete_outer(&log_post, |k| {
            let x = self.layout.compose(u, &self.levels[k]);
            let delta = self.inner_moments(&x, beta)?;
            Ok(integrand(&x, &delta))
        })
    }

    pub fn tilted_expect(&self, x: &[f64], beta: &[f64], f: OutcomeFn<'_>) -> Result<Vec<f64>> {
        if self.alpha.is_empty() {
            return Err(Error::NotFitted);
        }
        let m = self.mean_at(x)?;
        Ok(gaussian_tilted(&self.h, m, self.sigma2, beta, |y| f(x, y)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy_sample(n: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = CovariateLayout::leading(1, 2).unwrap();
        let obs = (0..n)
            .map(|_| {
                let z: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let u: f64 = z + rng.sample::<f64, _>(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                if rng.random::<f64>() < 0.6 {
                    Observation::respondent(vec![u, z], 0.5 + 2.0 * (u - z).powi(2) + 0.7 * e)
                } else {
                    Observation::nonrespondent(vec![u, z])
                }
            })
            .collect();
        Sample::new(layout, obs).unwrap()
    }

    #[test]
    fn basis_text_round_trip() {
        let b: MeanBasis = "1;x0;x1^2;x0*x1;(x0-x2)^2+(x1-x2)^2".parse().unwrap();
        assert_eq!(b.len(), 5);
        let back: MeanBasis = b.to_string().parse().unwrap();
        assert_eq!(b, back);
        assert_eq!(b.eval(&[1.0, 2.0, 3.0]), vec![1.0, 1.0, 4.0, 2.0, 5.0]);
        assert!("1;y0".parse::<MeanBasis>().is_err());
    }

    #[test]
    fn recovers_mean_model() {
        let s = toy_sample(20_000, 3);
        let basis: MeanBasis = "1;(x0-x1)^2".parse().unwrap();
        let p = ParametricProvider::fit(&s, HFamily::Linear, basis).unwrap();
        assert!((p.alpha()[0] - 0.5).abs() < 0.03);
        assert!((p.alpha()[1] - 2.0).abs() < 0.03);
        assert!((p.sigma2() - 0.49).abs() < 0.03);
        assert_eq!(p.levels().len(), 2);
    }

    #[test]
    fn influence_rows_average_to_zero_and_skip_nonrespondents() {
        let s = toy_sample(800, 5);
        let basis: MeanBasis = "1;(x0-x1)^2".parse().unwrap();
        let p = ParametricProvider::fit(&s, HFamily::Linear, basis).unwrap();
        let inf = p.influence(&s).unwrap();
        let total = p.params().len();
        assert_eq!(total, 2 + 1 + 3);
        for k in 0..total {
            let mean: f64 = inf.iter().map(|r| r[k]).sum::<f64>() / s.len() as f64;
            assert!(mean.abs() < 1e-8, "component {k} has mean {mean}");
        }
        for (o, r) in s.observations().iter().zip(&inf) {
            if !o.r() {
                assert!(r.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn outer_posterior_sums_to_one() {
        let s = toy_sample(2000, 9);
        let p = ParametricProvider::fit(&s, HFamily::Linear, "1;(x0-x1)^2".parse().unwrap()).unwrap();
        let c = p
            .outer_expect(&[0.4], &[-0.2], &|_: &[f64], _: &DeltaTriple| vec![2.0])
            .unwrap();
        assert!((c[0] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn unfitted_basis_reference_is_rejected() {
        let s = toy_sample(50, 1);
        let err = ParametricProvider::fit(&s, HFamily::Linear, "1;x5".parse().unwrap());
        assert!(matches!(err, Err(Error::ConfigKey { .. })));
    }
}
