//! Nonparametric bootstrap over observations.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Sample;

/// Generator for task `k` of a run seeded with `seed`; streams make task `k`
/// reproducible on its own.
pub fn task_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Standard deviation of `estimator` over `b` with-replacement resamples.
///
/// Failed resamples are skipped; more than 10% failures is an error.
pub fn bootstrap_se<F>(sample: &Sample, estimator: F, b: usize, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&Sample) -> Result<Vec<f64>> + Sync,
{
    if b < 2 {
        return Err(Error::key("bootstrap", "need at least 2 resamples"));
    }
    let n = sample.len();
    let results: Vec<Result<Vec<f64>>> = (0..b as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = task_rng(seed, k);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            estimator(&sample.resample(&idx))
        })
        .collect();
    let mut ok = Vec::with_capacity(b);
    let mut failures = 0;
    for r in results {
        match r {
            Ok(v) if v.iter().all(|x| x.is_finite()) => ok.push(v),
            Ok(_) => failures += 1,
            Err(e) => {
                debug!("bootstrap resample failed: {e}");
                failures += 1;
            }
        }
    }
    if failures * 10 > b || ok.len() < 2 {
        return Err(Error::BootstrapUnstable { failures, total: b });
    }
    let m = ok.len() as f64;
    let dim = ok[0].len();
    Ok((0..dim)
        .map(|j| {
            let mean = ok.iter().map(|v| v[j]).sum::<f64>() / m;
            (ok.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CovariateLayout, Observation};

    fn sample() -> Sample {
        let layout = CovariateLayout::leading(1, 1).unwrap();
        let obs = (0..50)
            .map(|i| Observation::respondent(vec![i as f64], (i as f64 * 0.37).sin()))
            .collect();
        Sample::new(layout, obs).unwrap()
    }

    fn mean_y(s: &Sample) -> Result<Vec<f64>> {
        Ok(vec![s.observations().iter().map(|o| o.y()).sum::<f64>() / s.len() as f64])
    }

    #[test]
    fn constant_estimator_has_zero_se() {
        let se = bootstrap_se(&sample(), |_| Ok(vec![3.0]), 20, 1).unwrap();
        assert_eq!(se, vec![0.0]);
    }

    #[test]
    fn deterministic_given_seed() {
        let s = sample();
        let a = bootstrap_se(&s, mean_y, 50, 9).unwrap();
        let b = bootstrap_se(&s, mean_y, 50, 9).unwrap();
        let c = bootstrap_se(&s, mean_y, 50, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // close to the textbook sd / sqrt(n)
        let ys: Vec<f64> = s.observations().iter().map(|o| o.y()).collect();
        let m = ys.iter().sum::<f64>() / 50.0;
        let sd = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / 50.0).sqrt();
        assert!((a[0] / (sd / 50f64.sqrt()) - 1.0).abs() < 0.35);
    }

    #[test]
    fn too_many_failures_is_unstable() {
        let s = sample();
        let flaky = |r: &Sample| {
            if r.get(0).x()[0] < 10.0 {
                Err(Error::EmptyNeighborhood)
            } else {
                Ok(vec![1.0])
            }
        };
        let err = bootstrap_se(&s, flaky, 40, 3);
        assert!(matches!(err, Err(Error::BootstrapUnstable { .. })));
    }
}
