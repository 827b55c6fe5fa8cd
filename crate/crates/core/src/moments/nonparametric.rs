//! Kernel (Nadaraya–Watson) moments over the respondent subsample.
//!
//! Inner queries smooth in `x`, outer queries in `u`. Smoothing weights for
//! the sample the provider was fitted on do not depend on `beta`, so they are
//! built once at fit time and reused by every score evaluation.

use std::sync::Arc;

use super::{DeltaTriple, Integrand, OutcomeFn};
use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, SmoothingRows};
use crate::model::{CovariateLayout, HFamily, Sample};

#[derive(Debug, Clone)]
pub struct NonparametricProvider {
    h: HFamily,
    layout: Arc<CovariateLayout>,
    inner_kernel: KernelSpec,
    outer_kernel: KernelSpec,
    inner_bw: f64,
    outer_bw: f64,
    resp_x: Arc<Vec<Vec<f64>>>,
    resp_u: Arc<Vec<Vec<f64>>>,
    resp_y: Arc<Vec<f64>>,
    resp_index: Arc<Vec<usize>>,
    n_fitted: usize,
    inner_rows: Arc<SmoothingRows>,
    outer_rows: Arc<SmoothingRows>,
}

/// `e^{-h(y_j)}`, its square and `e^{-h(y_j)} h'(y_j)` at every respondent.
struct Targets {
    e1: Vec<f64>,
    e2: Vec<f64>,
    e3: Vec<Vec<f64>>,
}

impl NonparametricProvider {
    /// Bandwidths follow each kernel's rule at `N = sample.len()`.
    pub fn fit(sample: &Sample, h: HFamily, inner_kernel: KernelSpec, outer_kernel: KernelSpec) -> Result<Self> {
        let layout = sample.shared_layout();
        let mut resp_x = Vec::new();
        let mut resp_u = Vec::new();
        let mut resp_y = Vec::new();
        let mut resp_index = Vec::new();
        for (i, o) in sample.observations().iter().enumerate() {
            if o.r() {
                resp_x.push(o.x().to_vec());
                resp_u.push(layout.u_of(o.x()));
                resp_y.push(o.y());
                resp_index.push(i);
            }
        }
        if resp_y.is_empty() {
            return Err(Error::Data("sample has no respondents".into()));
        }
        let n = sample.len();
        let inner_bw = inner_kernel.bandwidth(n);
        let outer_bw = outer_kernel.bandwidth(n);
        let xs: Vec<&[f64]> = sample.observations().iter().map(|o| o.x()).collect();
        let us: Vec<Vec<f64>> = (0..n).map(|i| sample.u(i)).collect();
        let inner_rows = SmoothingRows::build(&xs, &resp_x, inner_kernel.family, inner_bw)?;
        let outer_rows = SmoothingRows::build(&us, &resp_u, outer_kernel.family, outer_bw)?;
        Ok(NonparametricProvider {
            h,
            layout,
            inner_kernel,
            outer_kernel,
            inner_bw,
            outer_bw,
            resp_x: Arc::new(resp_x),
            resp_u: Arc::new(resp_u),
            resp_y: Arc::new(resp_y),
            resp_index: Arc::new(resp_index),
            n_fitted: n,
            inner_rows: Arc::new(inner_rows),
            outer_rows: Arc::new(outer_rows),
        })
    }

    pub fn h(&self) -> &HFamily {
        &self.h
    }

    pub fn inner_kernel(&self) -> &KernelSpec {
        &self.inner_kernel
    }

    pub fn outer_kernel(&self) -> &KernelSpec {
        &self.outer_kernel
    }

    pub fn bandwidths(&self) -> (f64, f64) {
        (self.inner_bw, self.outer_bw)
    }

    pub fn n_respondents(&self) -> usize {
        self.resp_y.len()
    }

    fn targets(&self, beta: &[f64]) -> Targets {
        let d = self.h.dim();
        let mut grad = vec![0.0; d];
        let mut t = Targets {
            e1: Vec::with_capacity(self.resp_y.len()),
            e2: Vec::with_capacity(self.resp_y.len()),
            e3: Vec::with_capacity(self.resp_y.len()),
        };
        for &y in self.resp_y.iter() {
            let e = (-self.h.eval(y, beta)).exp();
            self.h.grad(y, beta, &mut grad);
            t.e1.push(e);
            t.e2.push(e * e);
            t.e3.push(grad.iter().map(|g| e * g).collect());
        }
        t
    }

    fn triple(&self, row: &[(u32, f64)], t: &Targets) -> Result<DeltaTriple> {
        let d = self.h.dim();
        let (mut d1, mut d2) = (0.0, 0.0);
        let mut d3 = vec![0.0; d];
        for &(j, w) in row {
            let j = j as usize;
            d1 += w * t.e1[j];
            d2 += w * t.e2[j];
            for (a, b) in d3.iter_mut().zip(&t.e3[j]) {
                *a += w * b;
            }
        }
        DeltaTriple { d1, d2, d3 }.check()
    }

    fn check_aligned(&self, sample: &Sample) -> Result<()> {
        if sample.len() != self.n_fitted {
            return Err(Error::Config(format!(
                "kernel provider was fitted on {} observations but queried with {}",
                self.n_fitted,
                sample.len()
            )));
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.layout.p() {
            return Err(Error::Config(format!(
                "expected x of length {}, got {}",
                self.layout.p(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn inner_moments(&self, x: &[f64], beta: &[f64]) -> Result<DeltaTriple> {
        self.check_x(x)?;
        let row = SmoothingRows::row(x, &self.resp_x, self.inner_kernel.family, self.inner_bw)?;
        self.triple(&row, &self.targets(beta))
    }

    pub fn outer_expect(&self, u: &[f64], beta: &[f64], integrand: Integrand<'_>) -> Result<Vec<f64>> {
        let row = SmoothingRows::row(u, &self.resp_u, self.outer_kernel.family, self.outer_bw)?;
        let t = self.targets(beta);
        let mut acc: Vec<f64> = Vec::new();
        for &(j, w) in &row {
            let x = &self.resp_x[j as usize];
            let inner_row = SmoothingRows::row(x, &self.resp_x, self.inner_kernel.family, self.inner_bw)?;
            let v = integrand(x, &self.triple(&inner_row, &t)?);
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            for (a, vi) in acc.iter_mut().zip(&v) {
                *a += w * vi;
            }
        }
        Ok(acc)
    }

    pub fn tilted_expect(&self, x: &[f64], beta: &[f64], f: OutcomeFn<'_>) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let row = SmoothingRows::row(x, &self.resp_x, self.inner_kernel.family, self.inner_bw)?;
        self.tilted_row(&row, x, beta, f)
    }

    fn tilted_row(&self, row: &[(u32, f64)], x: &[f64], beta: &[f64], f: OutcomeFn<'_>) -> Result<Vec<f64>> {
        let mut acc: Vec<f64> = Vec::new();
        let mut mass = 0.0;
        for &(j, w) in row {
            let y = self.resp_y[j as usize];
            let tw = w * (-self.h.eval(y, beta)).exp();
            let v = f(x, y);
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            for (a, vi) in acc.iter_mut().zip(&v) {
                *a += tw * vi;
            }
            mass += tw;
        }
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::DegenerateConditional(format!(
                "tilted weights sum to {mass}"
            )));
        }
        for a in &mut acc {
            *a /= mass;
        }
        Ok(acc)
    }

    pub fn inner_batch(&self, sample: &Sample, beta: &[f64]) -> Result<Vec<DeltaTriple>> {
        self.check_aligned(sample)?;
        let t = self.targets(beta);
        (0..self.inner_rows.len())
            .map(|i| self.triple(self.inner_rows.row_at(i), &t))
            .collect()
    }

    /// Outer targets are the integrand at each respondent `x_j`, with the
    /// inner triple taken from `inner` (aligned with the fitted sample).
    pub fn outer_batch(&self, sample: &Sample, inner: &[DeltaTriple], integrand: Integrand<'_>) -> Result<Vec<Vec<f64>>> {
        self.check_aligned(sample)?;
        let values: Vec<Vec<f64>> = self
            .resp_index
            .iter()
            .zip(self.resp_x.iter())
            .map(|(&i, x)| integrand(x, &inner[i]))
            .collect();
        let width = values.first().map_or(0, Vec::len);
        Ok((0..self.outer_rows.len())
            .map(|i| {
                let mut acc = vec![0.0; width];
                for &(j, w) in self.outer_rows.row_at(i) {
                    for (a, v) in acc.iter_mut().zip(&values[j as usize]) {
                        *a += w * v;
                    }
                }
                acc
            })
            .collect())
    }

    pub fn tilted_batch(&self, sample: &Sample, beta: &[f64], f: OutcomeFn<'_>, which: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_aligned(sample)?;
        which
            .iter()
            .map(|&i| self.tilted_row(self.inner_rows.row_at(i), sample.get(i).x(), beta, f))
            .collect()
    }
}

/// Kernel regression of the response indicator on `x` over all observations,
/// `w_hat(x_i) = E_hat(R | x_i)`, evaluated at every observation.
pub fn response_rate(sample: &Sample, kernel: &KernelSpec) -> Result<Vec<f64>> {
    let bw = kernel.bandwidth(sample.len());
    let xs: Vec<&[f64]> = sample.observations().iter().map(|o| o.x()).collect();
    let r: Vec<f64> = sample.observations().iter().map(|o| o.r_f64()).collect();
    let rows = SmoothingRows::build(&xs, &xs, kernel.family, bw)?;
    Ok((0..rows.len()).map(|i| rows.apply(i, &r)).collect())
}
