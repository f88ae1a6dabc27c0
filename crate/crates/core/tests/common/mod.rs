#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use stgm::data::DataTable;

pub fn table(cols: Vec<(&str, Vec<String>)>) -> DataTable {
    DataTable::from_columns(cols.into_iter().map(|(n, v)| (n.to_string(), v)).collect()).unwrap()
}

pub fn nums(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x}")).collect()
}

pub fn strs<S: ToString>(v: &[S]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Gauss–Hermite nodes and weights for `∫ e^{-x²} f(x) dx` (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `log Σ exp(v)` without overflow.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-density of `N(0, cov)` at `x`.
pub fn mvn_logpdf(x: &nalgebra::DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let ch = cov.clone().cholesky().expect("covariance not SPD");
    let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + x.dot(&ch.solve(x)))
}
