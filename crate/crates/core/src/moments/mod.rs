//! Conditional moments among respondents.
//!
//! Every backend answers two kinds of queries:
//!
//! * inner, given `x` among respondents: the triple
//!   `E{e^{-h(Y)} | x, 1}`, `E{e^{-2h(Y)} | x, 1}`, `E{e^{-h(Y)} h'(Y) | x, 1}`,
//!   plus tilted expectations `E{f(Y) e^{-h(Y)} | x, 1} / E{e^{-h(Y)} | x, 1}`;
//! * outer, given `u` among respondents: `E{F(X) | u, 1}` for an integrand built
//!   from the inner triple.
//!
//! The batch entry points are aligned with the sample a provider was fitted on
//! (or, for closed-form providers, any sample) and are what the score engine uses.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::model::{HFamily, Sample};
use crate::quadrature::normal_expect;

pub mod nonparametric;
pub mod oracle;
pub mod parametric;

pub use nonparametric::{response_rate, NonparametricProvider};
pub use oracle::{InstrumentLaw, OracleProvider};
pub use parametric::{BasisTerm, MeanBasis, ParametricProvider};

/// Inner moments `(Δ1, Δ2, Δ3)` at one covariate value.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTriple {
    pub d1: f64,
    pub d2: f64,
    pub d3: Vec<f64>,
}

impl DeltaTriple {
    pub(crate) fn check(self) -> Result<Self> {
        if self.d1 > 0.0 && self.d2 > 0.0 && self.d1.is_finite() && self.d2.is_finite() {
            Ok(self)
        } else {
            Err(Error::DegenerateConditional(format!(
                "inner moments not positive (d1 = {}, d2 = {})",
                self.d1, self.d2
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProviderKind {
    Oracle,
    Parametric,
    Nonparametric,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Oracle => "oracle",
            ProviderKind::Parametric => "parametric",
            ProviderKind::Nonparametric => "nonparametric",
        })
    }
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "oracle" => Ok(ProviderKind::Oracle),
            "parametric" => Ok(ProviderKind::Parametric),
            "nonparametric" => Ok(ProviderKind::Nonparametric),
            other => Err(Error::key("provider", format!("unknown provider `{other}`"))),
        }
    }
}

/// Integrand for outer expectations: a function of `x` and the inner triple at `x`.
pub type Integrand<'a> = &'a (dyn Fn(&[f64], &DeltaTriple) -> Vec<f64> + Sync);

/// Outcome function `f(x, y)` for tilted expectations; `x` is the query point.
pub type OutcomeFn<'a> = &'a (dyn Fn(&[f64], f64) -> Vec<f64> + Sync);

#[derive(Debug, Clone)]
pub enum MomentProvider {
    Oracle(OracleProvider),
    Parametric(ParametricProvider),
    Nonparametric(NonparametricProvider),
}

impl MomentProvider {
    pub fn kind(&self) -> ProviderKind {
        match self {
            MomentProvider::Oracle(_) => ProviderKind::Oracle,
            MomentProvider::Parametric(_) => ProviderKind::Parametric,
            MomentProvider::Nonparametric(_) => ProviderKind::Nonparametric,
        }
    }

    pub fn h(&self) -> &HFamily {
        match self {
            MomentProvider::Oracle(p) => p.h(),
            MomentProvider::Parametric(p) => p.h(),
            MomentProvider::Nonparametric(p) => p.h(),
        }
    }

    pub fn inner_moments(&self, x: &[f64], beta: &[f64]) -> Result<DeltaTriple> {
        match self {
            MomentProvider::Oracle(p) => p.inner_moments(x, beta),
            MomentProvider::Parametric(p) => p.inner_moments(x, beta),
            MomentProvider::Nonparametric(p) => p.inner_moments(x, beta),
        }
    }

    /// `E{integrand(X) | u, R = 1}`.
    pub fn outer_expect(&self, u: &[f64], beta: &[f64], integrand: Integrand<'_>) -> Result<Vec<f64>> {
        match self {
            MomentProvider::Oracle(p) => p.outer_expect(u, beta, integrand),
            MomentProvider::Parametric(p) => p.outer_expect(u, beta, integrand),
            MomentProvider::Nonparametric(p) => p.outer_expect(u, beta, integrand),
        }
    }

    /// `E{f(x, Y) e^{-h(Y)} | x, 1} / E{e^{-h(Y)} | x, 1}`, the conditional mean
    /// of `f(x, Y)` among nonrespondents at `x`.
    pub fn tilted_expect(&self, x: &[f64], beta: &[f64], f: OutcomeFn<'_>) -> Result<Vec<f64>> {
        match self {
            MomentProvider::Oracle(p) => p.tilted_expect(x, beta, f),
            MomentProvider::Parametric(p) => p.tilted_expect(x, beta, f),
            MomentProvider::Nonparametric(p) => p.tilted_expect(x, beta, f),
        }
    }

    /// Inner triple at every observation of `sample`.
    pub fn inner_batch(&self, sample: &Sample, beta: &[f64]) -> Result<Vec<DeltaTriple>> {
        match self {
            MomentProvider::Nonparametric(p) => p.inner_batch(sample, beta),
            _ => sample
                .observations()
                .iter()
                .map(|o| self.inner_moments(o.x(), beta))
                .collect(),
        }
    }

    /// Outer expectation at every `u_i` of `sample`; `inner` must be `inner_batch(sample, beta)`.
    pub fn outer_batch(
        &self,
        sample: &Sample,
        beta: &[f64],
        inner: &[DeltaTriple],
        integrand: Integrand<'_>,
    ) -> Result<Vec<Vec<f64>>> {
        match self {
            MomentProvider::Nonparametric(p) => p.outer_batch(sample, inner, integrand),
            _ => (0..sample.len())
                .map(|i| self.outer_expect(&sample.u(i), beta, integrand))
                .collect(),
        }
    }

    /// Tilted expectation at the observations listed in `which`.
    pub fn tilted_batch(
        &self,
        sample: &Sample,
        beta: &[f64],
        f: OutcomeFn<'_>,
        which: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        match self {
            MomentProvider::Nonparametric(p) => p.tilted_batch(sample, beta, f, which),
            _ => which
                .iter()
                .map(|&i| self.tilted_expect(sample.get(i).x(), beta, f))
                .collect(),
        }
    }
}

/// Everything needed to (re)fit a provider on a sample, e.g. per bootstrap resample.
#[derive(Debug, Clone)]
pub struct ProviderSettings {
    pub kind: ProviderKind,
    /// Required for [`ProviderKind::Oracle`].
    pub law: Option<InstrumentLaw>,
    /// Required for [`ProviderKind::Parametric`].
    pub basis: Option<MeanBasis>,
    pub inner_kernel: KernelSpec,
    pub outer_kernel: KernelSpec,
}

impl ProviderSettings {
    pub fn oracle(law: InstrumentLaw) -> Self {
        ProviderSettings {
            kind: ProviderKind::Oracle,
            law: Some(law),
            basis: None,
            inner_kernel: KernelSpec::default(),
            outer_kernel: KernelSpec::default(),
        }
    }

    pub fn parametric(basis: MeanBasis) -> Self {
        ProviderSettings {
            kind: ProviderKind::Parametric,
            law: None,
            basis: Some(basis),
            inner_kernel: KernelSpec::default(),
            outer_kernel: KernelSpec::default(),
        }
    }

    pub fn nonparametric(inner_kernel: KernelSpec, outer_kernel: KernelSpec) -> Self {
        ProviderSettings {
            kind: ProviderKind::Nonparametric,
            law: None,
            basis: None,
            inner_kernel,
            outer_kernel,
        }
    }

    pub fn fit(&self, sample: &Sample, h: &HFamily) -> Result<MomentProvider> {
        match self.kind {
            ProviderKind::Oracle => {
                let law = self.law.clone().ok_or(Error::OracleUnavailable)?;
                Ok(MomentProvider::Oracle(OracleProvider::new(law, h.clone())?))
            }
            ProviderKind::Parametric => {
                let basis = self
                    .basis
                    .clone()
                    .ok_or_else(|| Error::key("basis", "parametric provider needs a mean basis"))?;
                Ok(MomentProvider::Parametric(ParametricProvider::fit(sample, h.clone(), basis)?))
            }
            ProviderKind::Nonparametric => Ok(MomentProvider::Nonparametric(NonparametricProvider::fit(
                sample,
                h.clone(),
                self.inner_kernel,
                self.outer_kernel,
            )?)),
        }
    }

    /// Kernel for smoothing the response indicator: the inner kernel when it
    /// is nonnegative, otherwise a Gaussian kernel with the same bandwidth rule.
    pub fn response_kernel(&self) -> KernelSpec {
        response_kernel_for(&self.inner_kernel)
    }
}

pub(crate) fn response_kernel_for(inner: &KernelSpec) -> KernelSpec {
    if inner.family.is_nonnegative() {
        *inner
    } else {
        KernelSpec {
            family: KernelFamily::Gaussian,
            rule: inner.rule,
        }
    }
}

/// Inner triple when `Y | x, R = 1 ~ N(mean, var)`.
///
/// Uses the normal moment generating function for linear `h` and
/// Gauss–Hermite quadrature otherwise.
pub(crate) fn gaussian_delta(h: &HFamily, mean: f64, var: f64, beta: &[f64]) -> DeltaTriple {
    if h.is_linear() {
        let b = beta[0];
        let d1 = (b * mean + 0.5 * b * b * var).exp();
        let d2 = (2.0 * b * mean + 2.0 * b * b * var).exp();
        return DeltaTriple {
            d1,
            d2,
            d3: vec![-(mean + b * var) * d1],
        };
    }
    let d = h.dim();
    let d1 = normal_expect(mean, var, |y| (-h.eval(y, beta)).exp());
    let d2 = normal_expect(mean, var, |y| (-2.0 * h.eval(y, beta)).exp());
    let mut grad = vec![0.0; d];
    let d3 = (0..d)
        .map(|k| {
            normal_expect(mean, var, |y| {
                h.grad(y, beta, &mut grad);
                (-h.eval(y, beta)).exp() * grad[k]
            })
        })
        .collect();
    DeltaTriple { d1, d2, d3 }
}

/// Tilted expectation when `Y | x, R = 1 ~ N(mean, var)`.
///
/// For linear `h` the tilted law is `N(mean + beta var, var)`.
pub(crate) fn gaussian_tilted(
    h: &HFamily,
    mean: f64,
    var: f64,
    beta: &[f64],
    mut f: impl FnMut(f64) -> Vec<f64>,
) -> Vec<f64> {
    let (nodes, weights) = crate::quadrature::standard_normal_rule();
    let sd = var.sqrt();
    let mut acc: Vec<f64> = Vec::new();
    let mut mass = 0.0;
    let shifted = if h.is_linear() { mean + beta[0] * var } else { mean };
    for (z, w) in nodes.iter().zip(weights) {
        let y = shifted + sd * z;
        let tilt = if h.is_linear() { 1.0 } else { (-h.eval(y, beta)).exp() };
        let v = f(y);
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, vi) in acc.iter_mut().zip(&v) {
            *a += w * tilt * vi;
        }
        mass += w * tilt;
    }
    for a in &mut acc {
        *a /= mass;
    }
    acc
}

/// `sum_z post(z) * integrand(x(u, z))` with log-scale posterior weights.
pub(crate) fn discrete_outer(
    log_weights: &[f64],
    mut value_at: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let max = log_weights
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateConditional(
            "posterior over instrument levels has zero mass".into(),
        ));
    }
    let weights: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut acc: Vec<f64> = Vec::new();
    for (k, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let v = value_at(k)?;
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, vi) in acc.iter_mut().zip(&v) {
            *a += w / total * vi;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HFunction;

    #[derive(Debug)]
    struct LinearAsCustom;

    impl HFunction for LinearAsCustom {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, y: f64, b: &[f64]) -> f64 {
            -b[0] * y
        }
        fn grad(&self, y: f64, _: &[f64], out: &mut [f64]) {
            out[0] = -y;
        }
    }

    #[test]
    fn closed_form_and_quadrature_agree() {
        let custom = HFamily::custom(LinearAsCustom);
        for (m, v, b) in [(0.0, 1.0, -0.2), (2.3, 0.5, 0.4), (1.0, 1.0, 0.0)] {
            let a = gaussian_delta(&HFamily::Linear, m, v, &[b]);
            let q = gaussian_delta(&custom, m, v, &[b]);
            assert!((a.d1 - q.d1).abs() < 1e-12 * a.d1);
            assert!((a.d2 - q.d2).abs() < 1e-12 * a.d2);
            assert!((a.d3[0] - q.d3[0]).abs() < 1e-11 * (1.0 + a.d3[0].abs()));
            let ta = gaussian_tilted(&HFamily::Linear, m, v, &[b], |y| vec![y, y * y]);
            let tq = gaussian_tilted(&custom, m, v, &[b], |y| vec![y, y * y]);
            assert!((ta[0] - (m + b * v)).abs() < 1e-12);
            assert!((ta[0] - tq[0]).abs() < 1e-11);
            assert!((ta[1] - tq[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn unit_moments_at_zero_tilt() {
        let t = gaussian_delta(&HFamily::Linear, 3.0, 2.0, &[0.0]);
        assert_eq!((t.d1, t.d2), (1.0, 1.0));
    }

    #[test]
    fn discrete_outer_constant_and_degenerate() {
        let v = discrete_outer(&[-1.0, 0.5, 2.0], |_| Ok(vec![3.5])).unwrap();
        assert!((v[0] - 3.5).abs() < 1e-15);
        let err = discrete_outer(&[f64::NEG_INFINITY; 2], |_| Ok(vec![1.0]));
        assert!(matches!(err, Err(Error::DegenerateConditional(_))));
    }
}
