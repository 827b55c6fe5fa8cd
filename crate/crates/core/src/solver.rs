//! Root finding for estimating equations.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMethod {
    /// Bracketed Brent for scalar problems, Newton otherwise.
    #[default]
    Auto,
    NewtonFd,
    BrentScalar,
}

impl FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(SolverMethod::Auto),
            "newton-fd" | "newton" => Ok(SolverMethod::NewtonFd),
            "brent-scalar" | "brent" => Ok(SolverMethod::BrentScalar),
            other => Err(Error::key("solver", format!("unknown solver `{other}`"))),
        }
    }
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverMethod::Auto => "auto",
            SolverMethod::NewtonFd => "newton-fd",
            SolverMethod::BrentScalar => "brent-scalar",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub method: SolverMethod,
    pub tol_residual: f64,
    pub tol_step: f64,
    pub max_iter: usize,
    /// Starting point; zeros of the right length when empty.
    pub init: Vec<f64>,
    /// Initial scalar bracket; `[init - 2, init + 2]` when absent.
    pub bracket: Option<(f64, f64)>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            method: SolverMethod::Auto,
            tol_residual: 1e-8,
            tol_step: 1e-10,
            max_iter: 100,
            init: Vec::new(),
            bracket: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_residual > 0.0) {
            return Err(Error::key("tol_residual", "must be positive"));
        }
        if !(self.tol_step > 0.0) {
            return Err(Error::key("tol_step", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::key("max_iter", "must be at least 1"));
        }
        if let Some((a, b)) = self.bracket {
            if !(a < b) {
                return Err(Error::key("bracket", "lower end must be below upper end"));
            }
        }
        Ok(())
    }

    pub fn start(&self, dim: usize) -> Vec<f64> {
        if self.init.len() == dim {
            self.init.clone()
        } else {
            vec![0.0; dim]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Root {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

const MAX_EXPANSIONS: usize = 8;
const SCAN_INTERVALS: usize = 16;

/// Finds `[a, b]` with a sign change.
///
/// The initial interval is scanned on a grid first and the sign change
/// closest to `init` is returned; otherwise the interval is widened
/// geometrically around its midpoint.
pub fn find_bracket(
    f: &mut impl FnMut(f64) -> Result<f64>,
    init: f64,
    bracket: Option<(f64, f64)>,
) -> Result<((f64, f64), (f64, f64))> {
    let (mut a, mut b) = bracket.unwrap_or((init - 2.0, init + 2.0));
    let changes = |fa: f64, fb: f64| fa == 0.0 || fb == 0.0 || fa.signum() != fb.signum();

    let mut grid = Vec::with_capacity(SCAN_INTERVALS + 1);
    for k in 0..=SCAN_INTERVALS {
        let x = a + (b - a) * k as f64 / SCAN_INTERVALS as f64;
        grid.push((x, f(x)?));
    }
    let best = grid
        .windows(2)
        .filter(|w| changes(w[0].1, w[1].1))
        .min_by(|p, q| {
            let dp = (0.5 * (p[0].0 + p[1].0) - init).abs();
            let dq = (0.5 * (q[0].0 + q[1].0) - init).abs();
            dp.total_cmp(&dq)
        });
    if let Some(w) = best {
        return Ok((w[0], w[1]));
    }

    let mut fa = grid[0].1;
    let mut fb = grid[SCAN_INTERVALS].1;
    for _ in 0..MAX_EXPANSIONS {
        let mid = 0.5 * (a + b);
        let half = b - a;
        a = mid - half;
        b = mid + half;
        fa = f(a)?;
        fb = f(b)?;
        if changes(fa, fb) {
            return Ok(((a, fa), (b, fb)));
        }
    }
    Err(Error::NoConvergence {
        last: vec![init],
        iterations: 0,
        residual: fa.abs().min(fb.abs()),
    })
}

/// Brent's method on a bracketing interval.
pub fn brent(mut f: impl FnMut(f64) -> Result<f64>, init: f64, opts: &SolverOptions) -> Result<Root> {
    let ((mut a, mut fa), (mut b, mut fb)) = find_bracket(&mut f, init, opts.bracket)?;
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for iter in 1..=opts.max_iter {
        if fb.abs() < opts.tol_residual {
            return Ok(Root { x: vec![b], iterations: iter - 1, residual: fb.abs() });
        }
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * opts.tol_step;
        let m = 0.5 * (c - b);
        if m.abs() <= tol {
            if fb.abs() < opts.tol_residual {
                return Ok(Root { x: vec![b], iterations: iter, residual: fb.abs() });
            }
            return Err(Error::NoConvergence {
                last: vec![b],
                iterations: iter,
                residual: fb.abs(),
            });
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = d;
            }
        } else {
            d = m;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b)?;
    }
    if fb.abs() < opts.tol_residual {
        return Ok(Root { x: vec![b], iterations: opts.max_iter, residual: fb.abs() });
    }
    Err(Error::NoConvergence {
        last: vec![b],
        iterations: opts.max_iter,
        residual: fb.abs(),
    })
}

/// Forward-difference Jacobian of `f` at `x`, given `fx = f(x)`.
pub fn fd_jacobian(
    f: &mut impl FnMut(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    fx: &[f64],
    rel_step: f64,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let m = fx.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    for k in 0..n {
        let h = rel_step * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        let fp = f(&xp)?;
        xp[k] = x[k];
        for r in 0..m {
            jac[(r, k)] = (fp[r] - fx[r]) / h;
        }
    }
    Ok(jac)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Newton's method with a forward-difference Jacobian and step halving.
pub fn newton(mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>, init: &[f64], opts: &SolverOptions) -> Result<Root> {
    let mut x = init.to_vec();
    let mut fx = f(&x)?;
    let mut res = norm(&fx);
    for iter in 1..=opts.max_iter {
        if res < opts.tol_residual {
            return Ok(Root { x, iterations: iter - 1, residual: res });
        }
        let jac = fd_jacobian(&mut f, &x, &fx, 1e-7)?;
        let step = jac
            .lu()
            .solve(&DVector::from_column_slice(&fx))
            .ok_or(Error::SingularJacobian)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            if let Ok(ft) = f(&trial) {
                let rt = norm(&ft);
                if rt.is_finite() && rt < res {
                    x = trial;
                    fx = ft;
                    res = rt;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted || t * step.amax() < opts.tol_step {
            if res < opts.tol_residual {
                return Ok(Root { x, iterations: iter, residual: res });
            }
            return Err(Error::NoConvergence { last: x, iterations: iter, residual: res });
        }
    }
    if res < opts.tol_residual {
        return Ok(Root { x, iterations: opts.max_iter, residual: res });
    }
    Err(Error::NoConvergence { last: x, iterations: opts.max_iter, residual: res })
}

/// Dispatches on `opts.method` and the problem dimension.
pub fn solve(mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>, dim: usize, opts: &SolverOptions) -> Result<Root> {
    opts.validate()?;
    let init = opts.start(dim);
    let scalar = match opts.method {
        SolverMethod::Auto => dim == 1,
        SolverMethod::BrentScalar => {
            if dim != 1 {
                return Err(Error::key("solver", "brent-scalar needs a one-dimensional parameter"));
            }
            true
        }
        SolverMethod::NewtonFd => false,
    };
    if scalar {
        brent(|b| Ok(f(&[b])?[0]), init[0], opts)
    } else {
        newton(f, &init, opts)
    }
}
