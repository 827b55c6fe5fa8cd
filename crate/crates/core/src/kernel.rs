//! Univariate kernels, product kernels and Nadaraya–Watson smoothing.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

const TRIWEIGHT_NORM: f64 = 35.0 / 32.0;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Gaussian,
    /// `(35/32)(1 - t^2)^3` on `[-1, 1]`.
    Triweight,
    /// Fourth-order triweight `(315/512)(3 - 11 t^2)(1 - t^2)^3` on `[-1, 1]`.
    ///
    /// The polynomial factor `(a + b t^2)` is the unique one making the
    /// kernel integrate to one with vanishing second moment.
    Triweight4,
}

impl KernelFamily {
    #[inline]
    pub fn eval(self, t: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => FRAC_1_SQRT_2PI * (-0.5 * t * t).exp(),
            KernelFamily::Triweight => {
                let s = 1.0 - t * t;
                if s <= 0.0 {
                    0.0
                } else {
                    TRIWEIGHT_NORM * s * s * s
                }
            }
            KernelFamily::Triweight4 => {
                let t2 = t * t;
                let s = 1.0 - t2;
                if s <= 0.0 {
                    0.0
                } else {
                    (315.0 / 512.0) * (3.0 - 11.0 * t2) * s * s * s
                }
            }
        }
    }

    pub fn order(self) -> u32 {
        match self {
            KernelFamily::Gaussian | KernelFamily::Triweight => 2,
            KernelFamily::Triweight4 => 4,
        }
    }

    pub fn is_nonnegative(self) -> bool {
        self.order() == 2
    }

    fn name(self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Triweight => "triweight",
            KernelFamily::Triweight4 => "triweight4",
        }
    }
}

/// Bandwidth `scale * n^(-exponent)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthRule {
    pub scale: f64,
    pub exponent: f64,
}

impl BandwidthRule {
    pub fn new(scale: f64, exponent: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::key("bandwidth_scale", format!("must be positive, got {scale}")));
        }
        if !(exponent.is_finite() && exponent > 0.0) {
            return Err(Error::key(
                "bandwidth_exponent",
                format!("must be positive, got {exponent}"),
            ));
        }
        Ok(BandwidthRule { scale, exponent })
    }

    pub fn bandwidth(&self, n: usize) -> f64 {
        self.scale * (n as f64).powf(-self.exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub rule: BandwidthRule,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian,
            rule: BandwidthRule {
                scale: 1.5,
                exponent: 1.0 / 3.0,
            },
        }
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, scale: f64, exponent: f64) -> Result<Self> {
        Ok(KernelSpec {
            family,
            rule: BandwidthRule::new(scale, exponent)?,
        })
    }

    pub fn order(&self) -> u32 {
        self.family.order()
    }

    pub fn bandwidth(&self, n: usize) -> f64 {
        self.rule.bandwidth(n)
    }

    /// Product kernel `prod_k K((a_k - b_k) / bandwidth)`, without the `bandwidth^-q` factor.
    #[inline]
    pub fn weight(&self, a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
        product_weight(self.family, a, b, bandwidth)
    }
}

#[inline]
pub(crate) fn product_weight(family: KernelFamily, a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    match family {
        KernelFamily::Gaussian => {
            let mut s = 0.0;
            for (x, y) in a.iter().zip(b) {
                let t = (x - y) / bandwidth;
                s += t * t;
            }
            FRAC_1_SQRT_2PI.powi(a.len() as i32) * (-0.5 * s).exp()
        }
        _ => {
            let mut w = 1.0;
            for (x, y) in a.iter().zip(b) {
                w *= family.eval((x - y) / bandwidth);
                if w == 0.0 {
                    break;
                }
            }
            w
        }
    }
}

/// Text form `family[:scale:exponent]`, e.g. `triweight4:1.0:0.1667`.
impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let family = match parts.next().map(str::trim) {
            Some("gaussian") => KernelFamily::Gaussian,
            Some("triweight") => KernelFamily::Triweight,
            Some("triweight4") => KernelFamily::Triweight4,
            _ => return Err(Error::key("kernel", format!("unknown kernel family in `{s}`"))),
        };
        let rest: Vec<&str> = parts.collect();
        let default = KernelSpec::default().rule;
        let (scale, exponent) = match rest.as_slice() {
            [] => (default.scale, default.exponent),
            [c, g] => {
                let c = parse_num("kernel", c)?;
                let g = parse_exponent(g)?;
                (c, g)
            }
            _ => return Err(Error::key("kernel", format!("expected family:scale:exponent, got `{s}`"))),
        };
        KernelSpec::new(family, scale, exponent)
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.family.name(), self.rule.scale, self.rule.exponent)
    }
}

fn parse_num(key: &str, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::key(key, format!("malformed number `{s}`")))
}

/// Accepts decimals or simple fractions such as `1/3`.
pub(crate) fn parse_exponent(s: &str) -> Result<f64> {
    match s.split_once('/') {
        Some((a, b)) => Ok(parse_num("bandwidth_exponent", a)? / parse_num("bandwidth_exponent", b)?),
        None => parse_num("bandwidth_exponent", s),
    }
}

/// Nadaraya–Watson ratio `sum_j K_j t_j / sum_j K_j` at `query`.
pub fn nw_regress<P: AsRef<[f64]>>(
    targets: &[f64],
    points: &[P],
    query: &[f64],
    kernel: &KernelSpec,
    bandwidth: f64,
) -> Result<f64> {
    assert_eq!(targets.len(), points.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, p) in targets.iter().zip(points) {
        let w = kernel.weight(p.as_ref(), query, bandwidth);
        num += w * t;
        den += w;
    }
    if den.is_nan() || den <= 0.0 {
        return Err(Error::EmptyNeighborhood);
    }
    Ok(num / den)
}

/// Normalized smoothing weights for a fixed set of queries over a fixed
/// set of points; rows drop points with exactly zero weight.
#[derive(Debug, Clone)]
pub(crate) struct SmoothingRows {
    rows: Vec<Vec<(u32, f64)>>,
}

impl SmoothingRows {
    pub(crate) fn build<Q: AsRef<[f64]>, P: AsRef<[f64]>>(
        queries: &[Q],
        points: &[P],
        family: KernelFamily,
        bandwidth: f64,
    ) -> Result<Self> {
        let rows = queries
            .iter()
            .map(|q| Self::row(q.as_ref(), points, family, bandwidth))
            .collect::<Result<Vec<_>>>()?;
        Ok(SmoothingRows { rows })
    }

    pub(crate) fn row<P: AsRef<[f64]>>(
        query: &[f64],
        points: &[P],
        family: KernelFamily,
        bandwidth: f64,
    ) -> Result<Vec<(u32, f64)>> {
        let mut row = Vec::new();
        let mut den = 0.0;
        for (j, p) in points.iter().enumerate() {
            let w = product_weight(family, p.as_ref(), query, bandwidth);
            if w != 0.0 {
                row.push((j as u32, w));
                den += w;
            }
        }
        if den.is_nan() || den <= 0.0 {
            return Err(Error::EmptyNeighborhood);
        }
        for e in &mut row {
            e.1 /= den;
        }
        Ok(row)
    }

    pub(crate) fn len(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub(crate) fn row_at(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    #[inline]
    pub(crate) fn apply(&self, i: usize, values: &[f64]) -> f64 {
        self.rows[i].iter().map(|&(j, w)| w * values[j as usize]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Composite Simpson rule on `[a, b]` with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            let x = a + h * k as f64;
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    fn moment(family: KernelFamily, power: i32) -> f64 {
        let (a, b) = match family {
            KernelFamily::Gaussian => (-12.0, 12.0),
            _ => (-1.0, 1.0),
        };
        simpson(|t| t.powi(power) * family.eval(t), a, b, 20_000)
    }

    #[test]
    fn kernel_moment_conditions() {
        for fam in [KernelFamily::Gaussian, KernelFamily::Triweight, KernelFamily::Triweight4] {
            assert!((moment(fam, 0) - 1.0).abs() < 1e-6, "{fam:?} mass");
            assert!(moment(fam, 1).abs() < 1e-6, "{fam:?} first moment");
        }
        assert!(moment(KernelFamily::Triweight4, 2).abs() < 1e-6);
        assert!(moment(KernelFamily::Triweight4, 4).abs() > 1e-3);
        assert!((moment(KernelFamily::Triweight, 2) - 1.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn triweight4_coefficients_solve_moment_system() {
        // Independent 2x2 solve: a*m0 + b*m2 = 1, a*m2 + b*m4 = 0 with triweight moments.
        let m0 = moment(KernelFamily::Triweight, 0);
        let m2 = moment(KernelFamily::Triweight, 2);
        let m4 = moment(KernelFamily::Triweight, 4);
        let det = m0 * m4 - m2 * m2;
        let a = m4 / det;
        let b = -m2 / det;
        for t in [0.0, 0.2, 0.5, 0.77, 0.99] {
            let want = (a + b * t * t) * KernelFamily::Triweight.eval(t);
            assert!((KernelFamily::Triweight4.eval(t) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn nw_single_point_and_symmetric_pair() {
        for fam in [KernelFamily::Gaussian, KernelFamily::Triweight, KernelFamily::Triweight4] {
            let k = KernelSpec::new(fam, 1.0, 0.2).unwrap();
            let v = nw_regress(&[4.2], &[[0.3]], &[0.5], &k, 1.0).unwrap();
            assert!((v - 4.2).abs() < 1e-14);
            let v = nw_regress(&[1.0, 3.0], &[[-0.4], [0.4]], &[0.0], &k, 1.0).unwrap();
            assert!((v - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn nw_matches_brute_force() {
        let k = KernelSpec::default();
        let v = nw_regress(&[0.0, 1.0, 4.0], &[[0.0], [1.0], [2.0]], &[1.0], &k, 1.0).unwrap();
        // exp(-1/2)*(0 + 4) + 1 over 2 exp(-1/2) + 1, from an mpmath evaluation
        assert!((v - 1.548_137_238_122_394).abs() < 1e-14);
    }

    #[test]
    fn nw_isolated_query_is_an_error() {
        let k = KernelSpec::new(KernelFamily::Triweight, 1.0, 0.2).unwrap();
        let err = nw_regress(&[1.0, 2.0], &[[0.0], [0.5]], &[10.0], &k, 1.0);
        assert!(matches!(err, Err(Error::EmptyNeighborhood)));
        let g = KernelSpec::default();
        let err = nw_regress(&[1.0], &[[0.0]], &[1e6], &g, 1e-3);
        assert!(matches!(err, Err(Error::EmptyNeighborhood)));
    }

    #[test]
    fn kernel_text_forms() {
        let k: KernelSpec = "triweight4:1.0:1/6".parse().unwrap();
        assert_eq!(k.family, KernelFamily::Triweight4);
        assert!((k.rule.exponent - 1.0 / 6.0).abs() < 1e-15);
        let d: KernelSpec = "gaussian".parse().unwrap();
        assert_eq!(d, KernelSpec::default());
        assert!("gaussian:-1:0.3".parse::<KernelSpec>().is_err());
        assert!("epanechnikov".parse::<KernelSpec>().is_err());
        assert!((KernelSpec::default().bandwidth(1000) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn smoothing_rows_agree_with_direct_ratio() {
        let pts: Vec<Vec<f64>> = (0..7).map(|j| vec![j as f64 * 0.3, (j % 2) as f64]).collect();
        let targets: Vec<f64> = (0..7).map(|j| (j as f64).sin()).collect();
        let queries = vec![vec![0.4, 1.0], vec![1.1, 0.0]];
        let k = KernelSpec::default();
        let rows = SmoothingRows::build(&queries, &pts, k.family, 0.7).unwrap();
        for (i, q) in queries.iter().enumerate() {
            let direct = nw_regress(&targets, &pts, q, &k, 0.7).unwrap();
            assert!((rows.apply(i, &targets) - direct).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn order_two_smoother_stays_within_target_range(
            pts in proptest::collection::vec(-3.0..3.0f64, 1..12),
            seed in 0u64..1000, q in -3.0..3.0f64, bw in 0.3..3.0f64
        ) {
            let targets: Vec<f64> = pts.iter().enumerate()
                .map(|(j, p)| ((j as f64 + seed as f64) * 1.7).sin() * 5.0 + p).collect();
            let points: Vec<[f64; 1]> = pts.iter().map(|&p| [p]).collect();
            let lo = targets.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for fam in [KernelFamily::Gaussian, KernelFamily::Triweight] {
                let k = KernelSpec::new(fam, 1.0, 0.2).unwrap();
                if let Ok(v) = nw_regress(&targets, &points, &[q], &k, bw) {
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
