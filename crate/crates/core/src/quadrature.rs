//! Gauss–Hermite rule for expectations under a normal law.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

const NODES: usize = 64;

/// Nodes and weights for `E f(Z)`, `Z ~ N(0, 1)`; weights sum to one.
pub(crate) fn standard_normal_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| golub_welsch(NODES))
}

/// Probabilists' Hermite Jacobi matrix has zero diagonal and `sqrt(k)` off-diagonal.
fn golub_welsch(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

/// `E f(Y)` for `Y ~ N(mean, var)`.
pub(crate) fn normal_expect(mean: f64, var: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let (nodes, weights) = standard_normal_rule();
    let sd = var.sqrt();
    nodes
        .iter()
        .zip(weights)
        .map(|(z, w)| w * f(mean + sd * z))
        .sum()
}
