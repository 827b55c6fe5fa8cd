//! Monte Carlo summaries on the ×100 scale.

/// Replicates with more failures than this fraction are flagged.
pub const FAILURE_FLAG_FRACTION: f64 = 0.05;

const Z95: f64 = 1.96;

/// Summary of one estimator over a set of replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub bias_x100: f64,
    pub sd_x100: f64,
    pub rmse_x100: f64,
    /// Mean of the per-replicate standard errors; `NaN` when none were computed.
    pub se_x100: f64,
    /// `NaN` when no standard errors were computed.
    pub cvp_percent: f64,
    /// Successful replicates.
    pub n_replicates: usize,
    pub n_failures: usize,
    pub flagged: bool,
}

/// One successful replicate: the estimate and its standard error (`NaN` if absent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub estimate: f64,
    pub se: f64,
}

impl MetricsRow {
    /// Aggregates successful draws against `truth`.
    ///
    /// SD uses the `R - 1` denominator and RMSE the `R` denominator, so
    /// `rmse^2 = bias^2 + sd^2 (R - 1) / R`. An interval covers when
    /// `|est - truth| <= 1.96 se`.
    pub fn aggregate(label: impl Into<String>, draws: &[Draw], n_failures: usize, truth: f64) -> MetricsRow {
        let r = draws.len();
        let total = r + n_failures;
        let flagged = total == 0 || n_failures as f64 > FAILURE_FLAG_FRACTION * total as f64;
        let label = label.into();
        if r == 0 {
            return MetricsRow {
                label,
                bias_x100: f64::NAN,
                sd_x100: f64::NAN,
                rmse_x100: f64::NAN,
                se_x100: f64::NAN,
                cvp_percent: f64::NAN,
                n_replicates: 0,
                n_failures,
                flagged,
            };
        }
        let rf = r as f64;
        let mean = draws.iter().map(|d| d.estimate).sum::<f64>() / rf;
        let bias = mean - truth;
        let sd = if r > 1 {
            (draws.iter().map(|d| (d.estimate - mean).powi(2)).sum::<f64>() / (rf - 1.0)).sqrt()
        } else {
            f64::NAN
        };
        let mse = draws.iter().map(|d| (d.estimate - truth).powi(2)).sum::<f64>() / rf;
        let with_se: Vec<&Draw> = draws.iter().filter(|d| d.se.is_finite()).collect();
        let (se, cvp) = if with_se.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = with_se.len() as f64;
            let se = with_se.iter().map(|d| d.se).sum::<f64>() / m;
            let covered = with_se
                .iter()
                .filter(|d| (d.estimate - truth).abs() <= Z95 * d.se)
                .count();
            (se, 100.0 * covered as f64 / m)
        };
        MetricsRow {
            label,
            bias_x100: 100.0 * bias,
            sd_x100: 100.0 * sd,
            rmse_x100: 100.0 * mse.sqrt(),
            se_x100: 100.0 * se,
            cvp_percent: cvp,
            n_replicates: r,
            n_failures,
            flagged,
        }
    }
}
