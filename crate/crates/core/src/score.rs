//! Working efficient score with a user-chosen `g*`.
//!
//! For one observation,
//!
//! ```text
//! d*(x) = d1 + e^{-g*(u)} d2
//! a*(u) = E{d3 d1 / d* | u, 1} / E{d1^2 / d* | u, 1}
//! S*    = (a* d1 - d3) / d* * [1 - r {1 + e^{-g*(u) - h(y, beta)}}]
//! ```
//!
//! and the estimating equation is the sum of `S*` over the sample.

use std::sync::{Arc, Mutex};

use log::warn;

use crate::error::{Error, Result};
use crate::model::{GFunction, ModelSpec, Observation, Sample};
use crate::moments::{DeltaTriple, MomentProvider};

const EXP_CLAMP: f64 = 700.0;

/// `e^{-g(u)}` with the exponent clamped to `[-700, 700]`; the flag reports clamping.
pub fn exp_neg_g(g: &GFunction, u: &[f64]) -> (f64, bool) {
    let t = -g.eval(u);
    if t.is_nan() {
        return (f64::NAN, false);
    }
    let c = t.clamp(-EXP_CLAMP, EXP_CLAMP);
    (c.exp(), c != t)
}

/// Every per-observation quantity of the score at one `beta`.
#[derive(Debug, Clone)]
pub struct ScoreEval {
    pub beta: Vec<f64>,
    pub inner: Vec<DeltaTriple>,
    pub dstar: Vec<f64>,
    pub astar: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreEval {
    pub fn sum(&self) -> Vec<f64> {
        let d = self.beta.len();
        let mut s = vec![0.0; d];
        for row in &self.scores {
            for (a, b) in s.iter_mut().zip(row) {
                *a += b;
            }
        }
        s
    }
}

/// Model, provider and sample bundled for repeated score evaluation.
///
/// The last evaluation is cached and reused while `beta` is unchanged.
pub struct ScoreContext<'a> {
    spec: &'a ModelSpec,
    provider: &'a MomentProvider,
    sample: &'a Sample,
    exp_neg_g_star: Vec<f64>,
    cache: Mutex<Option<Arc<ScoreEval>>>,
}

impl<'a> ScoreContext<'a> {
    pub fn new(spec: &'a ModelSpec, provider: &'a MomentProvider, sample: &'a Sample) -> Result<Self> {
        spec.validate(sample.q())?;
        if provider.h().dim() != spec.beta_dim {
            return Err(Error::Config(
                "provider and model disagree on the dimension of beta".into(),
            ));
        }
        let mut clamped = 0usize;
        let exp_neg_g_star = (0..sample.len())
            .map(|i| {
                let (v, c) = exp_neg_g(&spec.g_star, &sample.u(i));
                clamped += c as usize;
                v
            })
            .collect();
        if clamped > 0 {
            warn!("g* exponent clamped to [-{EXP_CLAMP}, {EXP_CLAMP}] at {clamped} observations");
        }
        Ok(ScoreContext {
            spec,
            provider,
            sample,
            exp_neg_g_star,
            cache: Mutex::new(None),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn provider(&self) -> &MomentProvider {
        self.provider
    }

    pub fn sample(&self) -> &Sample {
        self.sample
    }

    /// `e^{-g*(u_i)}` for every observation.
    pub fn exp_neg_g_star(&self) -> &[f64] {
        &self.exp_neg_g_star
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.spec.beta_dim {
            return Err(Error::Config(format!(
                "beta has length {}, model expects {}",
                beta.len(),
                self.spec.beta_dim
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::DegenerateConditional(format!("non-finite beta {beta:?}")));
        }
        Ok(())
    }

    /// Scores and intermediates at every observation.
    pub fn evaluate(&self, beta: &[f64]) -> Result<Arc<ScoreEval>> {
        self.check_beta(beta)?;
        let mut guard = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(hit) = guard.as_ref() {
            if hit.beta == beta {
                return Ok(Arc::clone(hit));
            }
        }
        let eval = Arc::new(self.compute(beta)?);
        *guard = Some(Arc::clone(&eval));
        Ok(eval)
    }

    fn compute(&self, beta: &[f64]) -> Result<ScoreEval> {
        let d = self.spec.beta_dim;
        let inner = self.provider.inner_batch(self.sample, beta)?;
        let dstar: Vec<f64> = inner
            .iter()
            .zip(&self.exp_neg_g_star)
            .map(|(t, eg)| t.d1 + eg * t.d2)
            .collect();
        let layout = self.sample.layout();
        let g_star = &self.spec.g_star;
        let integrand = move |x: &[f64], t: &DeltaTriple| {
            let (eg, _) = exp_neg_g(g_star, &layout.u_of(x));
            outer_terms(t, t.d1 + eg * t.d2)
        };
        let outer = self.provider.outer_batch(self.sample, beta, &inner, &integrand)?;
        let astar = outer
            .iter()
            .map(|o| ratio(o, d))
            .collect::<Result<Vec<_>>>()?;
        let h = self.provider.h();
        let scores = self
            .sample
            .observations()
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let e_h = o.y_opt().map(|y| (-h.eval(y, beta)).exp());
                score_value(&inner[i], dstar[i], &astar[i], self.exp_neg_g_star[i], e_h)
            })
            .collect();
        Ok(ScoreEval {
            beta: beta.to_vec(),
            inner,
            dstar,
            astar,
            scores,
        })
    }

    /// The influence correction for kernel-estimated moments at every
    /// observation (zero rows for nonrespondents), given estimates of
    /// `e^{-g(u_i)}`.
    pub fn k_corrections(&self, beta: &[f64], g_hat_exp: &[f64]) -> Result<Vec<Vec<f64>>> {
        let eval = self.evaluate(beta)?;
        let h = self.provider.h();
        Ok(self
            .sample
            .observations()
            .iter()
            .enumerate()
            .map(|(i, o)| match o.y_opt() {
                None => vec![0.0; beta.len()],
                Some(y) => k_value(
                    &eval.inner[i],
                    eval.dstar[i],
                    &eval.astar[i],
                    self.exp_neg_g_star[i],
                    g_hat_exp[i],
                    (-h.eval(y, beta)).exp(),
                ),
            })
            .collect())
    }
}

/// Outer targets `(d3 d1 / d*, d1^2 / d*)`, stacked.
fn outer_terms(t: &DeltaTriple, dstar: f64) -> Vec<f64> {
    let mut v: Vec<f64> = t.d3.iter().map(|c| c * t.d1 / dstar).collect();
    v.push(t.d1 * t.d1 / dstar);
    v
}

fn ratio(outer: &[f64], d: usize) -> Result<Vec<f64>> {
    let den = outer[d];
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::DegenerateConditional(format!(
            "a* denominator is {den}"
        )));
    }
    Ok(outer[..d].iter().map(|n| n / den).collect())
}

/// `e_h` is `e^{-h(y)}` for respondents and `None` otherwise.
fn score_value(t: &DeltaTriple, dstar: f64, astar: &[f64], eg: f64, e_h: Option<f64>) -> Vec<f64> {
    let bracket = match e_h {
        None => 1.0,
        Some(e) => -eg * e,
    };
    astar
        .iter()
        .zip(&t.d3)
        .map(|(a, d3)| (a * t.d1 - d3) / dstar * bracket)
        .collect()
}

fn k_value(t: &DeltaTriple, dstar: f64, astar: &[f64], eg_star: f64, eg_hat: f64, e_h: f64) -> Vec<f64> {
    let second = 2.0 * t.d1 - e_h - t.d1 * (e_h + eg_star * e_h * e_h) / dstar;
    astar
        .iter()
        .zip(&t.d3)
        .map(|(a, d3)| (eg_hat - eg_star) * (a * t.d1 - d3) / dstar * second)
        .collect()
}

/// `d1 + e^{-g*(u)} d2` at a single point.
pub fn d_star(x: &[f64], beta: &[f64], ctx: &ScoreContext<'_>) -> Result<f64> {
    ctx.check_beta(beta)?;
    let t = ctx.provider.inner_moments(x, beta)?;
    let (eg, _) = exp_neg_g(&ctx.spec.g_star, &ctx.sample.layout().u_of(x));
    Ok(t.d1 + eg * t.d2)
}

/// `a*(u)` at a single point.
pub fn a_star(u: &[f64], beta: &[f64], ctx: &ScoreContext<'_>) -> Result<Vec<f64>> {
    ctx.check_beta(beta)?;
    let g_star = &ctx.spec.g_star;
    let layout = ctx.sample.layout();
    let integrand = move |x: &[f64], t: &DeltaTriple| {
        let (eg, _) = exp_neg_g(g_star, &layout.u_of(x));
        outer_terms(t, t.d1 + eg * t.d2)
    };
    let outer = ctx.provider.outer_expect(u, beta, &integrand)?;
    ratio(&outer, ctx.spec.beta_dim)
}

/// `S*` for one observation, computed from point queries.
pub fn efficient_score(obs: &Observation, beta: &[f64], ctx: &ScoreContext<'_>) -> Result<Vec<f64>> {
    let u = ctx.sample.layout().u_of(obs.x());
    let t = ctx.provider.inner_moments(obs.x(), beta)?;
    let (eg, _) = exp_neg_g(&ctx.spec.g_star, &u);
    let astar = a_star(&u, beta, ctx)?;
    let h = ctx.provider.h();
    let e_h = obs.y_opt().map(|y| (-h.eval(y, beta)).exp());
    Ok(score_value(&t, t.d1 + eg * t.d2, &astar, eg, e_h))
}

/// `sum_i S*_i`. Uses the cached batch path when `sample` is the context's sample.
pub fn estimating_equation(sample: &Sample, beta: &[f64], ctx: &ScoreContext<'_>) -> Result<Vec<f64>> {
    if std::ptr::eq(sample, ctx.sample) {
        return Ok(ctx.evaluate(beta)?.sum());
    }
    let mut s = vec![0.0; beta.len()];
    for o in sample.observations() {
        for (a, b) in s.iter_mut().zip(efficient_score(o, beta, ctx)?) {
            *a += b;
        }
    }
    Ok(s)
}

/// Influence correction for one respondent given an estimate of `e^{-g(u)}`.
///
/// Zero for nonrespondents.
pub fn k_correction(obs: &Observation, beta: &[f64], ctx: &ScoreContext<'_>, g_hat_exp: f64) -> Result<Vec<f64>> {
    let Some(y) = obs.y_opt() else {
        return Ok(vec![0.0; beta.len()]);
    };
    let u = ctx.sample.layout().u_of(obs.x());
    let t = ctx.provider.inner_moments(obs.x(), beta)?;
    let (eg, _) = exp_neg_g(&ctx.spec.g_star, &u);
    let astar = a_star(&u, beta, ctx)?;
    let e_h = (-ctx.provider.h().eval(y, beta)).exp();
    Ok(k_value(&t, t.d1 + eg * t.d2, &astar, eg, g_hat_exp, e_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{expit, CovariateLayout, HFamily};
    use crate::moments::{InstrumentLaw, OracleProvider};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn law_a() -> InstrumentLaw {
        InstrumentLaw {
            levels: vec![-1.0, 1.0],
            probs: vec![0.5, 0.5],
            q: 1,
            sigma2: 1.0,
            beta: vec![-0.2],
            g: GFunction::affine(-0.4, vec![0.3]),
        }
    }

    fn oracle() -> MomentProvider {
        MomentProvider::Oracle(OracleProvider::new(law_a(), HFamily::Linear).unwrap())
    }

    fn spec_mis() -> ModelSpec {
        ModelSpec::new(HFamily::Linear, GFunction::affine(0.0, vec![-0.4]))
    }

    fn tiny_sample() -> Sample {
        let layout = CovariateLayout::leading(1, 2).unwrap();
        Sample::new(
            layout,
            vec![
                Observation::respondent(vec![0.7, 1.0], 1.5),
                Observation::nonrespondent(vec![0.7, -1.0]),
                Observation::respondent(vec![1.0, 1.0], 0.2),
            ],
        )
        .unwrap()
    }

    /// Draws from the design with `R` first and `Y | R` second.
    fn draw_a(n: usize, seed: u64) -> Sample {
        let law = law_a();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = (0..n)
            .map(|_| {
                let z = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let u = z + rng.sample::<f64, _>(StandardNormal);
                let m = (u - z) * (u - z);
                let w = law.response_prob(&HFamily::Linear, &[u], z);
                if rng.random::<f64>() < w {
                    Observation::respondent(vec![u, z], m + rng.sample::<f64, _>(StandardNormal))
                } else {
                    Observation::nonrespondent(vec![u, z])
                }
            })
            .collect();
        Sample::new(law.layout(), obs).unwrap()
    }

    #[test]
    fn d_star_examples() {
        let p = oracle();
        let s = tiny_sample();
        let zero = ModelSpec::new(HFamily::Linear, GFunction::zero(1));
        let ctx = ScoreContext::new(&zero, &p, &s).unwrap();
        assert!((d_star(&[0.3, 1.0], &[0.0], &ctx).unwrap() - 2.0).abs() < 1e-15);
        let mis = spec_mis();
        let ctx = ScoreContext::new(&mis, &p, &s).unwrap();
        assert!((d_star(&[1.0, 1.0], &[0.0], &ctx).unwrap() - 2.491_824_697_641_270_3).abs() < 1e-14);
        let want = 0.02f64.exp() + 0.4f64.exp() * 0.08f64.exp();
        let got = d_star(&[1.0, 1.0], &[-0.2], &ctx).unwrap();
        assert!((got - want).abs() < 1e-14);
        assert!((got - 2.636_275_742_219_649_2).abs() < 1e-13);
    }

    #[test]
    fn a_star_and_scores_match_script() {
        let p = oracle();
        let s = tiny_sample();
        let spec = spec_mis();
        let ctx = ScoreContext::new(&spec, &p, &s).unwrap();
        let b = [-0.2];
        assert!((a_star(&[0.0], &b, &ctx).unwrap()[0] + 0.8).abs() < 1e-13);
        assert!((a_star(&[0.7], &b, &ctx).unwrap()[0] + 0.441_050_803_852_573_4).abs() < 1e-12);
        assert!((a_star(&[-1.3], &b, &ctx).unwrap()[0] + 0.197_512_133_473_923).abs() < 1e-12);
        let s0 = efficient_score(s.get(0), &b, &ctx).unwrap()[0];
        let s1 = efficient_score(s.get(1), &b, &ctx).unwrap()[0];
        assert!((s0 - 0.226_960_259_722_513_9).abs() < 1e-12);
        assert!((s1 - 1.257_658_993_216_164_1).abs() < 1e-12);
        let batch = ctx.evaluate(&b).unwrap();
        assert!((batch.scores[0][0] - s0).abs() < 1e-13);
        assert!((batch.scores[1][0] - s1).abs() < 1e-13);
        let total = estimating_equation(&s, &b, &ctx).unwrap()[0];
        let other = s.clone();
        let pointwise = estimating_equation(&other, &b, &ctx).unwrap()[0];
        assert!((total - pointwise).abs() < 1e-12);
    }

    #[test]
    fn nonrespondent_bracket_is_one() {
        let p = oracle();
        let s = tiny_sample();
        let spec = spec_mis();
        let ctx = ScoreContext::new(&spec, &p, &s).unwrap();
        let b = [-0.2];
        let o = s.get(1);
        let t = p.inner_moments(o.x(), &b).unwrap();
        let a = a_star(&[0.7], &b, &ctx).unwrap()[0];
        let ds = d_star(o.x(), &b, &ctx).unwrap();
        let sc = efficient_score(o, &b, &ctx).unwrap()[0];
        assert!((sc - (a * t.d1 - t.d3[0]) / ds).abs() < 1e-15);
    }

    #[test]
    fn single_level_collapses_to_inner_ratio() {
        let mut law = law_a();
        law.levels = vec![0.5];
        law.probs = vec![1.0];
        let p = MomentProvider::Oracle(OracleProvider::new(law, HFamily::Linear).unwrap());
        let s = tiny_sample();
        let spec = spec_mis();
        let ctx = ScoreContext::new(&spec, &p, &s).unwrap();
        for u in [-1.0, 0.2, 1.7] {
            let t = p.inner_moments(&[u, 0.5], &[-0.3]).unwrap();
            let a = a_star(&[u], &[-0.3], &ctx).unwrap()[0];
            assert!((a - t.d3[0] / t.d1).abs() < 1e-12);
            // zero numerator: every score vanishes at a single-level design
            let o = Observation::respondent(vec![u, 0.5], 0.3);
            assert!(efficient_score(&o, &[-0.3], &ctx).unwrap()[0].abs() < 1e-12);
        }
    }

    #[test]
    fn k_vanishes_when_g_hat_equals_g_star() {
        let p = oracle();
        let s = tiny_sample();
        let spec = spec_mis();
        let ctx = ScoreContext::new(&spec, &p, &s).unwrap();
        let eg = ctx.exp_neg_g_star().to_vec();
        for row in ctx.k_corrections(&[-0.2], &eg).unwrap() {
            assert_eq!(row, vec![0.0]);
        }
        let single = k_correction(s.get(0), &[-0.2], &ctx, eg[0] * 1.3).unwrap();
        let batch = ctx.k_corrections(&[-0.2], &[eg[0] * 1.3, 0.0, eg[2]]).unwrap();
        assert!((single[0] - batch[0][0]).abs() < 1e-13);
        assert_eq!(batch[1], vec![0.0]);
    }

    #[test]
    fn clamps_extreme_working_model() {
        let (v, c) = exp_neg_g(&GFunction::affine(-1e6, vec![0.0]), &[0.0]);
        assert!(c && v.is_finite() && v > 0.0);
        let (v, c) = exp_neg_g(&GFunction::affine(0.5, vec![0.0]), &[0.0]);
        assert!(!c && (v - (-0.5f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn mean_zero_under_misspecified_g_star() {
        let s = draw_a(40_000, 17);
        let p = oracle();
        let spec = spec_mis();
        let ctx = ScoreContext::new(&spec, &p, &s).unwrap();
        let eval = ctx.evaluate(&[-0.2]).unwrap();
        let v: Vec<f64> = eval.scores.iter().map(|r| r[0]).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 4.0 * sd / n.sqrt(), "mean {mean}, sd {sd}");
    }

    #[test]
    fn equation_changes_sign_over_grid() {
        let s = draw_a(5000, 23);
        let p = oracle();
        let spec = spec_mis();
        let ctx = ScoreContext::new(&spec, &p, &s).unwrap();
        let lo = estimating_equation(&s, &[-1.0], &ctx).unwrap()[0];
        let hi = estimating_equation(&s, &[0.5], &ctx).unwrap()[0];
        assert!(lo * hi < 0.0, "{lo} {hi}");
    }

    #[test]
    fn cache_tracks_beta() {
        let s = tiny_sample();
        let p = oracle();
        let spec = spec_mis();
        let ctx = ScoreContext::new(&spec, &p, &s).unwrap();
        let a = ctx.evaluate(&[-0.2]).unwrap();
        let b = ctx.evaluate(&[-0.2]).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let c = ctx.evaluate(&[-0.1]).unwrap();
        assert!(!Arc::ptr_eq(&a, &c));
        assert_ne!(a.scores, c.scores);
    }

    #[derive(Debug)]
    struct ConstantSlope(f64);

    impl crate::model::HFunction for ConstantSlope {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, _: f64, b: &[f64]) -> f64 {
            -b[0] * self.0
        }
        fn grad(&self, _: f64, _: &[f64], out: &mut [f64]) {
            out[0] = -self.0;
        }
    }

    #[test]
    fn a_star_collapses_when_d3_is_proportional_to_d1() {
        let h = HFamily::custom(ConstantSlope(0.75));
        let p = MomentProvider::Oracle(OracleProvider::new(law_a(), h.clone()).unwrap());
        let s = tiny_sample();
        let spec = ModelSpec::new(h, GFunction::affine(0.0, vec![-0.4]));
        let ctx = ScoreContext::new(&spec, &p, &s).unwrap();
        for u in [-2.0, 0.0, 0.9] {
            let a = a_star(&[u], &[-0.2], &ctx).unwrap()[0];
            assert!((a + 0.75).abs() < 1e-10, "{a}");
        }
    }

    proptest! {
        #[test]
        fn respondent_bracket_is_one_minus_inverse_propensity(
            y in -4.0f64..4.0, u in -3.0f64..3.0, b in -1.0f64..1.0, c in -2.0f64..2.0
        ) {
            let g = GFunction::affine(c, vec![-0.4]);
            let (eg, _) = exp_neg_g(&g, &[u]);
            let e_h = (b * y).exp();
            let bracket = -eg * e_h;
            let pi = expit(-b * y + g.eval(&[u]));
            let want = 1.0 - 1.0 / pi;
            prop_assert!((bracket - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}
