//! Registered simulation designs.
//!
//! All three share one structure: a binary instrument `Z`, `U_k | Z = z ~ N(z, 1)`
//! independently for `k = 1..q`, respondent outcome law
//! `Y | x, R = 1 ~ N(sum_k (u_k - z)^2, 1)`, and propensity
//! `expit{-beta y + g(u)}`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimator::task_rng;
use crate::kernel::{KernelFamily, KernelSpec};
use crate::model::{GFunction, HFamily, Observation, Sample};
use crate::moments::{InstrumentLaw, MeanBasis};
use crate::quadrature::standard_normal_rule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DesignId {
    A,
    B1,
    B2,
}

impl fmt::Display for DesignId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesignId::A => "A",
            DesignId::B1 => "B1",
            DesignId::B2 => "B2",
        })
    }
}

impl FromStr for DesignId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" | "SETTING-A" => Ok(DesignId::A),
            "B1" | "SETTING-B1" => Ok(DesignId::B1),
            "B2" | "SETTING-B2" => Ok(DesignId::B2),
            other => Err(Error::key("design", format!("unknown design `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Design {
    pub id: DesignId,
    pub law: InstrumentLaw,
    /// The working model used in the published experiments.
    pub g_star: GFunction,
    /// Three wrong working models used for the mean-zero check.
    pub misspecified: Vec<GFunction>,
    /// Kernels `(inner, outer)` for the kernel provider when estimating `beta`.
    pub beta_kernels: (KernelSpec, KernelSpec),
    /// Kernels `(inner, outer)` for the kernel provider when imputing `theta`.
    pub theta_kernels: (KernelSpec, KernelSpec),
    pub basis: MeanBasis,
}

fn kernel(family: KernelFamily, scale: f64, exponent: f64) -> KernelSpec {
    KernelSpec::new(family, scale, exponent).expect("registered kernel is valid")
}

impl Design {
    pub fn new(id: DesignId) -> Self {
        let gauss = kernel(KernelFamily::Gaussian, 1.5, 1.0 / 3.0);
        match id {
            DesignId::A => Design {
                id,
                law: InstrumentLaw {
                    levels: vec![-1.0, 1.0],
                    probs: vec![0.5, 0.5],
                    q: 1,
                    sigma2: 1.0,
                    beta: vec![-0.2],
                    g: GFunction::affine(-0.4, vec![0.3]),
                },
                g_star: GFunction::affine(0.0, vec![-0.4]),
                misspecified: vec![
                    GFunction::affine(0.0, vec![-0.4]),
                    GFunction::zero(1),
                    GFunction::quadratic(0.5, vec![0.0], vec![-0.2]),
                ],
                beta_kernels: (gauss, gauss),
                theta_kernels: (gauss, gauss),
                basis: "1;(x0-x1)^2".parse().expect("valid basis"),
            },
            DesignId::B1 => Design {
                id,
                law: InstrumentLaw {
                    levels: vec![-1.0, 1.0],
                    probs: vec![0.5, 0.5],
                    q: 1,
                    sigma2: 1.0,
                    beta: vec![-0.1],
                    g: GFunction::quadratic(-0.2, vec![0.0], vec![0.3]),
                },
                g_star: GFunction::affine(0.0, vec![-0.4]),
                misspecified: vec![
                    GFunction::affine(0.0, vec![-0.4]),
                    GFunction::zero(1),
                    GFunction::affine(0.3, vec![0.2]),
                ],
                beta_kernels: (gauss, gauss),
                theta_kernels: (gauss, gauss),
                basis: "1;(x0-x1)^2".parse().expect("valid basis"),
            },
            DesignId::B2 => {
                let tri4 = kernel(KernelFamily::Triweight4, 1.0, 1.0 / 6.0);
                let g_theta = kernel(KernelFamily::Gaussian, 1.0, 1.0 / 3.0);
                Design {
                    id,
                    law: InstrumentLaw {
                        levels: vec![1.0, 2.0],
                        probs: vec![0.5, 0.5],
                        q: 2,
                        sigma2: 1.0,
                        beta: vec![-0.1],
                        g: GFunction::quadratic(-0.8, vec![0.0, 0.0], vec![0.2, 0.2]),
                    },
                    g_star: GFunction::affine(0.0, vec![-0.4, -0.6]),
                    misspecified: vec![
                        GFunction::affine(0.0, vec![-0.4, -0.6]),
                        GFunction::zero(2),
                        GFunction::affine(0.2, vec![0.3, -0.2]),
                    ],
                    beta_kernels: (tri4, tri4),
                    theta_kernels: (g_theta, g_theta),
                    basis: "1;(x0-x2)^2+(x1-x2)^2".parse().expect("valid basis"),
                }
            }
        }
    }

    pub fn h(&self) -> HFamily {
        HFamily::Linear
    }

    pub fn true_beta(&self) -> &[f64] {
        &self.law.beta
    }

    pub fn true_g(&self) -> &GFunction {
        &self.law.g
    }

    pub fn q(&self) -> usize {
        self.law.q
    }

    /// `E f(U, Z)` by tensor Gauss–Hermite quadrature over `U | Z`.
    fn integrate(&self, f: impl Fn(&[f64], f64) -> f64) -> f64 {
        let (nodes, weights) = standard_normal_rule();
        let q = self.law.q;
        let mut total = 0.0;
        for (&z, &pz) in self.law.levels.iter().zip(&self.law.probs) {
            let mut idx = vec![0usize; q];
            let mut u = vec![0.0; q];
            'grid: loop {
                let mut w = pz;
                for k in 0..q {
                    u[k] = z + nodes[idx[k]];
                    w *= weights[idx[k]];
                }
                total += w * f(&u, z);
                for k in 0..q {
                    idx[k] += 1;
                    if idx[k] < nodes.len() {
                        continue 'grid;
                    }
                    idx[k] = 0;
                }
                break;
            }
        }
        total
    }

    /// Population probability of nonresponse.
    pub fn missing_probability(&self) -> f64 {
        let h = self.h();
        self.integrate(|u, z| 1.0 - self.law.response_prob(&h, u, z))
    }

    /// `E(Y)`: respondents have mean `m(x)` and nonrespondents `m(x) + beta sigma2`.
    pub fn true_theta(&self) -> f64 {
        self.law.q as f64 + self.law.beta[0] * self.law.sigma2 * self.missing_probability()
    }

    /// `E(Y | R = 1)`, the limit of the respondent mean.
    pub fn respondent_mean(&self) -> f64 {
        let h = self.h();
        let p1 = 1.0 - self.missing_probability();
        self.integrate(|u, z| self.law.response_prob(&h, u, z) * self.law.outcome_mean(u, z)) / p1
    }

    /// Draws `N` observations: `Z`, then `U | Z`, then `R ~ Bernoulli{w(X)}`,
    /// then `Y` from its law given `(X, R)`. Latent outcomes are retained.
    pub fn generate(&self, n: usize, seed: u64, stream: u64) -> Result<Sample> {
        if n < 2 {
            return Err(Error::key("n", "sample size must be at least 2"));
        }
        let mut rng = task_rng(seed, stream);
        let h = self.h();
        let law = &self.law;
        let q = law.q;
        let shift = law.beta[0] * law.sigma2;
        let sd = law.sigma2.sqrt();
        let mut obs = Vec::with_capacity(n);
        let mut full = Vec::with_capacity(n);
        for _ in 0..n {
            let pick: f64 = rng.random();
            let mut k = 0;
            let mut acc = law.probs[0];
            while pick >= acc && k + 1 < law.levels.len() {
                k += 1;
                acc += law.probs[k];
            }
            let z = law.levels[k];
            let u: Vec<f64> = (0..q).map(|_| z + rng.sample::<f64, _>(StandardNormal)).collect();
            let w = law.response_prob(&h, &u, z);
            let r = rng.random::<f64>() < w;
            let e: f64 = rng.sample(StandardNormal);
            let m = law.outcome_mean(&u, z);
            let mut x = u;
            x.push(z);
            if r {
                let y = m + sd * e;
                obs.push(Observation::respondent(x, y));
                full.push(y);
            } else {
                obs.push(Observation::nonrespondent(x));
                full.push(m + shift + sd * e);
            }
        }
        Sample::new(law.layout(), obs)?.with_latent_outcomes(full)
    }
}
