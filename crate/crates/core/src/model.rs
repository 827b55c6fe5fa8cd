//! Observations, samples and the tilted-logistic propensity
//! `pi(y, u) = expit{h(y, beta) + g(u)}`.
//!
//! The covariate vector `x` splits into the part `u` that enters the
//! propensity and the instrument `z` that does not. `h` is known up to the
//! tilt parameter `beta`; `g` is never estimated, only replaced by a working
//! function `g*`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Logistic function, evaluated without overflow for large `|t|`.
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Which coordinates of `x` form `u` and which form the instrument `z`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovariateLayout {
    p: usize,
    u_idx: Vec<usize>,
    z_idx: Vec<usize>,
}

impl CovariateLayout {
    pub fn new(p: usize, u_idx: Vec<usize>, z_idx: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; p];
        for &i in u_idx.iter().chain(z_idx.iter()) {
            if i >= p {
                return Err(Error::Config(format!(
                    "covariate index {i} out of range for p = {p}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!(
                    "covariate index {i} appears in both u and z (or twice)"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config(
                "u and z index sets must cover every covariate".into(),
            ));
        }
        if u_idx.is_empty() {
            return Err(Error::Config("u must have at least one coordinate".into()));
        }
        Ok(CovariateLayout { p, u_idx, z_idx })
    }

    /// `u` is the first `q` coordinates and `z` the remaining `p - q`.
    pub fn leading(q: usize, p: usize) -> Result<Self> {
        Self::new(p, (0..q).collect(), (q..p).collect())
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.u_idx.len()
    }

    pub fn u_idx(&self) -> &[usize] {
        &self.u_idx
    }

    pub fn z_idx(&self) -> &[usize] {
        &self.z_idx
    }

    pub fn u_of(&self, x: &[f64]) -> Vec<f64> {
        self.u_idx.iter().map(|&i| x[i]).collect()
    }

    pub fn z_of(&self, x: &[f64]) -> Vec<f64> {
        self.z_idx.iter().map(|&i| x[i]).collect()
    }

    /// Reassembles a full covariate vector from its two parts.
    pub fn compose(&self, u: &[f64], z: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.p];
        for (&i, &v) in self.u_idx.iter().zip(u) {
            x[i] = v;
        }
        for (&i, &v) in self.z_idx.iter().zip(z) {
            x[i] = v;
        }
        x
    }
}

/// One record `(x, r, r*y)`. `y` is stored only for respondents.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    x: Vec<f64>,
    y: Option<f64>,
}

impl Observation {
    pub fn respondent(x: Vec<f64>, y: f64) -> Self {
        Observation { x, y: Some(y) }
    }

    pub fn nonrespondent(x: Vec<f64>) -> Self {
        Observation { x, y: None }
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn r(&self) -> bool {
        self.y.is_some()
    }

    /// `r` as 0.0 / 1.0.
    pub fn r_f64(&self) -> f64 {
        if self.r() {
            1.0
        } else {
            0.0
        }
    }

    pub fn y_opt(&self) -> Option<f64> {
        self.y
    }

    /// Observed outcome.
    ///
    /// # Panics
    /// If the observation is a nonrespondent; reading `y` when `r = 0` is a bug.
    pub fn y(&self) -> f64 {
        self.y
            .expect("outcome accessed on a nonrespondent (r = 0)")
    }
}

/// Indexed collection of observations sharing one covariate layout.
///
/// Simulated samples may also carry the latent outcomes of nonrespondents,
/// which only the full-data benchmark estimator reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    observations: Vec<Observation>,
    layout: Arc<CovariateLayout>,
    latent_y: Option<Vec<f64>>,
}

impl Sample {
    pub fn new(layout: CovariateLayout, observations: Vec<Observation>) -> Result<Self> {
        Self::with_layout(Arc::new(layout), observations)
    }

    pub fn with_layout(layout: Arc<CovariateLayout>, observations: Vec<Observation>) -> Result<Self> {
        if let Some((i, _)) = observations
            .iter()
            .enumerate()
            .find(|(_, o)| o.x.len() != layout.p())
        {
            return Err(Error::Data(format!(
                "observation {i} has {} covariates, expected {}",
                observations[i].x.len(),
                layout.p()
            )));
        }
        Ok(Sample {
            observations,
            layout,
            latent_y: None,
        })
    }

    /// Attaches the complete outcome vector (observed and latent).
    pub fn with_latent_outcomes(mut self, full_y: Vec<f64>) -> Result<Self> {
        if full_y.len() != self.observations.len() {
            return Err(Error::Data("latent outcome vector has wrong length".into()));
        }
        for (o, &y) in self.observations.iter().zip(&full_y) {
            if let Some(obs) = o.y {
                if obs != y {
                    return Err(Error::Data(
                        "latent outcomes disagree with observed outcomes".into(),
                    ));
                }
            }
        }
        self.latent_y = Some(full_y);
        Ok(self)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn get(&self, i: usize) -> &Observation {
        &self.observations[i]
    }

    pub fn layout(&self) -> &CovariateLayout {
        &self.layout
    }

    pub fn shared_layout(&self) -> Arc<CovariateLayout> {
        Arc::clone(&self.layout)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn n_respondents(&self) -> usize {
        self.observations.iter().filter(|o| o.r()).count()
    }

    pub fn p(&self) -> usize {
        self.layout.p()
    }

    pub fn q(&self) -> usize {
        self.layout.q()
    }

    pub fn u(&self, i: usize) -> Vec<f64> {
        self.layout.u_of(&self.observations[i].x)
    }

    /// Full outcome vector including latent values, when the sample was simulated.
    pub fn full_outcomes(&self) -> Result<&[f64]> {
        self.latent_y.as_deref().ok_or(Error::OracleUnavailable)
    }

    /// Estimation needs at least one respondent and one nonrespondent.
    pub fn check_estimable(&self) -> Result<()> {
        let n1 = self.n_respondents();
        if n1 == 0 {
            return Err(Error::Data("sample has no respondents".into()));
        }
        if n1 == self.len() {
            return Err(Error::Data("sample has no nonrespondents".into()));
        }
        Ok(())
    }

    /// New sample made of the given rows (repeats allowed).
    pub fn resample(&self, indices: &[usize]) -> Sample {
        Sample {
            observations: indices.iter().map(|&i| self.observations[i].clone()).collect(),
            layout: Arc::clone(&self.layout),
            latent_y: self
                .latent_y
                .as_ref()
                .map(|y| indices.iter().map(|&i| y[i]).collect()),
        }
    }
}

/// A user-supplied `h(y, beta)` with its gradient in `beta`.
pub trait HFunction: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn eval(&self, y: f64, beta: &[f64]) -> f64;
    fn grad(&self, y: f64, beta: &[f64], out: &mut [f64]);
}

/// The known part `h(y, beta)` of the propensity logit.
#[derive(Debug, Clone)]
pub enum HFamily {
    /// `h(y, beta) = -beta * y` with scalar `beta`.
    Linear,
    Custom(Arc<dyn HFunction>),
}

/// `(h, dh/dbeta)` for the linear family.
pub fn h_linear_eval_grad(y: f64, beta: f64) -> (f64, f64) {
    (-beta * y, -y)
}

impl HFamily {
    pub fn custom(f: impl HFunction + 'static) -> Self {
        HFamily::Custom(Arc::new(f))
    }

    pub fn dim(&self) -> usize {
        match self {
            HFamily::Linear => 1,
            HFamily::Custom(f) => f.dim(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, HFamily::Linear)
    }

    #[inline]
    pub fn eval(&self, y: f64, beta: &[f64]) -> f64 {
        match self {
            HFamily::Linear => -beta[0] * y,
            HFamily::Custom(f) => f.eval(y, beta),
        }
    }

    #[inline]
    pub fn grad(&self, y: f64, beta: &[f64], out: &mut [f64]) {
        match self {
            HFamily::Linear => out[0] = -y,
            HFamily::Custom(f) => f.grad(y, beta, out),
        }
    }

    pub fn grad_vec(&self, y: f64, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.grad(y, beta, &mut out);
        out
    }
}

/// Function of `u` used either as the true `g` or as a working `g*`.
#[derive(Clone)]
pub enum GFunction {
    /// `c + sum_k l_k u_k`
    Affine { constant: f64, linear: Vec<f64> },
    /// `c + sum_k (l_k u_k + s_k u_k^2)`
    QuadraticDiagonal {
        constant: f64,
        linear: Vec<f64>,
        squared: Vec<f64>,
    },
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for GFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GFunction::Custom(_) => f.write_str("GFunction::Custom(..)"),
            other => write!(f, "GFunction({other})"),
        }
    }
}

impl GFunction {
    pub fn zero(q: usize) -> Self {
        GFunction::Affine {
            constant: 0.0,
            linear: vec![0.0; q],
        }
    }

    pub fn affine(constant: f64, linear: Vec<f64>) -> Self {
        GFunction::Affine { constant, linear }
    }

    pub fn quadratic(constant: f64, linear: Vec<f64>, squared: Vec<f64>) -> Self {
        assert_eq!(linear.len(), squared.len());
        GFunction::QuadraticDiagonal {
            constant,
            linear,
            squared,
        }
    }

    pub fn custom(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        GFunction::Custom(Arc::new(f))
    }

    /// Dimension of `u` this function expects; `None` for callbacks.
    pub fn dim(&self) -> Option<usize> {
        match self {
            GFunction::Affine { linear, .. } => Some(linear.len()),
            GFunction::QuadraticDiagonal { linear, .. } => Some(linear.len()),
            GFunction::Custom(_) => None,
        }
    }

    #[inline]
    pub fn eval(&self, u: &[f64]) -> f64 {
        match self {
            GFunction::Affine { constant, linear } => {
                constant + linear.iter().zip(u).map(|(l, v)| l * v).sum::<f64>()
            }
            GFunction::QuadraticDiagonal {
                constant,
                linear,
                squared,
            } => {
                constant
                    + linear
                        .iter()
                        .zip(squared)
                        .zip(u)
                        .map(|((l, s), v)| l * v + s * v * v)
                        .sum::<f64>()
            }
            GFunction::Custom(f) => f(u),
        }
    }

    pub fn check_dim(&self, q: usize) -> Result<()> {
        match self.dim() {
            Some(d) if d != q => Err(Error::Config(format!(
                "g function expects u of length {d}, but u has length {q}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Text form: `affine:c,l1,..,lq` or `quadratic:c,l1,..,lq,s1,..,sq`.
impl fmt::Display for GFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| {
            v.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            GFunction::Affine { constant, linear } => {
                write!(f, "affine:{constant},{}", join(linear))
            }
            GFunction::QuadraticDiagonal {
                constant,
                linear,
                squared,
            } => write!(f, "quadratic:{constant},{},{}", join(linear), join(squared)),
            GFunction::Custom(_) => f.write_str("custom"),
        }
    }
}

impl FromStr for GFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::key("gstar", format!("{m} in `{s}`"));
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| bad("expected `affine:...` or `quadratic:...`"))?;
        let coefs = rest
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("malformed number"))?;
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(bad("non-finite coefficient"));
        }
        match kind.trim() {
            "affine" => {
                if coefs.len() < 2 {
                    return Err(bad("affine needs a constant and at least one slope"));
                }
                Ok(GFunction::affine(coefs[0], coefs[1..].to_vec()))
            }
            "quadratic" => {
                if coefs.len() < 3 || coefs.len() % 2 == 0 {
                    return Err(bad("quadratic needs 1 + 2q coefficients"));
                }
                let q = (coefs.len() - 1) / 2;
                Ok(GFunction::quadratic(
                    coefs[0],
                    coefs[1..=q].to_vec(),
                    coefs[q + 1..].to_vec(),
                ))
            }
            _ => Err(bad("unknown g family")),
        }
    }
}

/// Known `h` family plus the working `g*`.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub h: HFamily,
    pub g_star: GFunction,
    pub beta_dim: usize,
}

impl ModelSpec {
    pub fn new(h: HFamily, g_star: GFunction) -> Self {
        let beta_dim = h.dim();
        ModelSpec {
            h,
            g_star,
            beta_dim,
        }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if self.beta_dim != self.h.dim() {
            return Err(Error::Config(format!(
                "beta dimension {} disagrees with h gradient length {}",
                self.beta_dim,
                self.h.dim()
            )));
        }
        self.g_star.check_dim(q)
    }
}

/// `expit{h(y, beta) + g(u)}`.
pub fn propensity(y: f64, u: &[f64], beta: &[f64], g: &GFunction, h: &HFamily) -> Result<f64> {
    if beta.len() != h.dim() {
        return Err(Error::Config(format!(
            "beta has length {}, h expects {}",
            beta.len(),
            h.dim()
        )));
    }
    g.check_dim(u.len())?;
    Ok(expit(h.eval(y, beta) + g.eval(u)))
}
