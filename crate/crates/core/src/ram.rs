//! Path matrix `P` and exogenous matrix `G` of a RAM, the SEM/DSEM precision
//! `(I - P)ᵀ G⁻ᵀ G⁻¹ (I - P)`, and the projection `(I - P)⁻¹ G` used when `G`
//! is singular.
//!
//! Flat index order is time-major: variable `c` at time `t` sits at
//! `t * C + c`. A one-headed term `from -> to` at lag `l` writes
//! `P[t*C + to, (t-l)*C + from]` for every `t >= l`; edges that would reach
//! before the first time are dropped, so the first `l` times only carry
//! exogenous variance.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};
use crate::notation::{Heads, RamModel};
use crate::sparse::{CscMatrix, SparseSymMatrix};

#[derive(Debug, Clone)]
pub struct RamMatrices {
    pub p: CscMatrix,
    pub g: CscMatrix,
    pub n_vars: usize,
    pub n_times: usize,
    pub rank_deficient: bool,
    /// Variables whose exogenous variance is fixed at zero.
    pub zero_variance: Vec<String>,
    lag0: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

pub fn assemble_ram(ram: &RamModel, theta: &[f64], n_times: usize) -> Result<RamMatrices> {
    if theta.len() != ram.params.len() {
        return Err(Error::Dimension(format!(
            "RAM has {} parameters but {} values were given",
            ram.params.len(),
            theta.len()
        )));
    }
    if n_times == 0 {
        return Err(Error::Dimension("number of times must be at least 1".into()));
    }
    if ram.max_lag > 0 && n_times < ram.max_lag + 1 {
        return Err(Error::Dimension(format!(
            "lag {} needs at least {} times, got {n_times}",
            ram.max_lag,
            ram.max_lag + 1
        )));
    }
    let c = ram.n_vars();
    let n = c * n_times;
    let mut pt = Vec::new();
    let mut gt = Vec::new();
    let mut zero_variance = Vec::new();
    for (k, term) in ram.terms.iter().enumerate() {
        let (from, to) = ram.term_vars(k);
        let value = ram.term_value(k, theta);
        if term.is_self_variance() && term.is_fixed() && value == 0.0 {
            zero_variance.push(term.from.clone());
        }
        let target = match term.heads {
            Heads::One => &mut pt,
            Heads::Two => &mut gt,
        };
        for t in term.lag..n_times {
            target.push((t * c + to, (t - term.lag) * c + from, value));
        }
    }
    let p = CscMatrix::from_triplets(n, n, &pt);
    let g = CscMatrix::from_triplets(n, n, &gt);

    let mut block = DMatrix::<f64>::identity(c, c);
    for (r, col, v) in p.triplets() {
        if r < c && col < c {
            block[(r, col)] -= v;
        }
    }
    let scale = block.amax().max(1.0);
    let lag0 = block.lu();
    let min_pivot = lag0.u().diagonal().iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    if c > 0 && min_pivot <= 1e-12 * scale {
        return Err(Error::Singular(
            "I - P is singular (simultaneous paths form a unit-gain loop)".into(),
        ));
    }
    Ok(RamMatrices {
        p,
        g,
        n_vars: c,
        n_times,
        rank_deficient: !zero_variance.is_empty(),
        zero_variance,
        lag0,
    })
}

impl RamMatrices {
    pub fn dim(&self) -> usize {
        self.n_vars * self.n_times
    }

    /// `(I - P)⁻¹ x` by forward substitution over time blocks.
    fn solve_i_minus_p(&self, x: &mut [f64]) {
        let c = self.n_vars;
        for t in 0..self.n_times {
            let block = t * c..(t + 1) * c;
            let rhs = DVector::from_column_slice(&x[block.clone()]);
            let sol = self.lag0.solve(&rhs).expect("lag-0 block checked nonsingular");
            x[block.clone()].copy_from_slice(sol.as_slice());
            for j in block {
                let (rows, vals) = self.p.col(j);
                for (&r, &v) in rows.iter().zip(vals) {
                    if r >= (t + 1) * c {
                        x[r] += v * x[j];
                    }
                }
            }
        }
    }

    /// Applies `(I - P)⁻¹ G` to each column of `white` (n × k).
    pub fn project(&self, white: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if white.nrows() != self.dim() {
            return Err(Error::Dimension(format!(
                "white effects have {} rows, RAM dimension is {}",
                white.nrows(),
                self.dim()
            )));
        }
        let mut out = DMatrix::zeros(white.nrows(), white.ncols());
        for k in 0..white.ncols() {
            let mut x = self.g.mul_vec(white.column(k).as_slice());
            self.solve_i_minus_p(&mut x);
            out.column_mut(k).copy_from_slice(&x);
        }
        Ok(out)
    }

    /// Dense `(I - P)⁻¹ G`.
    pub fn projection_matrix(&self) -> DMatrix<f64> {
        self.project(&DMatrix::identity(self.dim(), self.dim()))
            .expect("identity has matching dimension")
    }

    /// Dense `(I - P)⁻¹ G Gᵀ (I - P)⁻ᵀ`; defined for rank-deficient RAMs too.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let m = self.projection_matrix();
        &m * m.transpose()
    }

    /// Topological order under which `G` is lower triangular.
    fn g_order(&self) -> Result<Vec<usize>> {
        let n = self.dim();
        let mut indeg = vec![0usize; n];
        for (r, c, _) in self.g.triplets() {
            if r != c {
                indeg[r] += 1;
            }
        }
        let mut queue: std::collections::VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(k) = queue.pop_front() {
            order.push(k);
            let (rows, _) = self.g.col(k);
            for &r in rows {
                if r != k {
                    indeg[r] -= 1;
                    if indeg[r] == 0 {
                        queue.push_back(r);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(Error::Singular("exogenous matrix G is not triangular under any ordering".into()));
        }
        Ok(order)
    }

    /// `G⁻¹ B` for sparse `B`, keeping every structurally reachable entry.
    fn g_solve(&self, b: &CscMatrix) -> Result<CscMatrix> {
        let n = self.dim();
        let diag: Vec<f64> = (0..n).map(|i| self.g.get(i, i)).collect();
        if let Some(i) = diag.iter().position(|&d| d == 0.0) {
            return Err(Error::RankDeficient(format!(
                "exogenous standard deviation at flat index {i} is zero"
            )));
        }
        let off_diagonal = self.g.triplets().any(|(r, c, _)| r != c);
        if !off_diagonal {
            let triplets: Vec<_> = b.triplets().map(|(r, c, v)| (r, c, v / diag[r])).collect();
            return Ok(CscMatrix::from_triplets(n, b.ncols(), &triplets));
        }
        let order = self.g_order()?;
        let mut x = vec![0.0; n];
        let mut touched = vec![false; n];
        let mut triplets = Vec::new();
        for j in 0..b.ncols() {
            let (rows, vals) = b.col(j);
            for (&r, &v) in rows.iter().zip(vals) {
                x[r] = v;
                touched[r] = true;
            }
            for &k in &order {
                if !touched[k] {
                    continue;
                }
                x[k] /= diag[k];
                let (grows, gvals) = self.g.col(k);
                for (&r, &g) in grows.iter().zip(gvals) {
                    if r != k {
                        x[r] -= g * x[k];
                        touched[r] = true;
                    }
                }
            }
            for k in 0..n {
                if touched[k] {
                    triplets.push((k, j, x[k]));
                    x[k] = 0.0;
                    touched[k] = false;
                }
            }
        }
        Ok(CscMatrix::from_triplets(n, b.ncols(), &triplets))
    }
}

/// `Q = (I - P)ᵀ G⁻ᵀ G⁻¹ (I - P)`, symmetrized.
pub fn precision_from_ram(m: &RamMatrices) -> Result<SparseSymMatrix> {
    if m.rank_deficient {
        return Err(Error::RankDeficient(format!(
            "reduced rank (arising from variable {} specified to have zero variance)",
            m.zero_variance.join(", ")
        )));
    }
    let b = precision_factor(m)?;
    let q = b.transpose().mul(&b);
    SparseSymMatrix::from_csc(&q)
}

/// `B = G⁻¹ (I - P)`, so that the precision is `Bᵀ B`.
pub fn precision_factor(m: &RamMatrices) -> Result<CscMatrix> {
    let n = m.dim();
    let i_minus_p = CscMatrix::identity(n).add_scaled(1.0, &m.p, -1.0);
    m.g_solve(&i_minus_p)
}

/// Maps full-rank white effects (rows indexed like the RAM) to effects with
/// covariance `(I - P)⁻¹ G Gᵀ (I - P)⁻ᵀ`.
pub fn project_rank_deficient(m: &RamMatrices, white: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.project(white)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notation::{parse_dsem, parse_sem};
    use approx::assert_relative_eq;

    fn vars(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn linear_model_matrices() {
        let ram = parse_sem("X -> Y, b\n", &vars(&["X", "Y"])).unwrap();
        let m = assemble_ram(&ram, &[0.5, 1.5, 2.0], 1).unwrap();
        assert_eq!(m.p.nnz(), 1);
        assert_eq!(m.p.get(1, 0), 0.5);
        assert_eq!(m.g.to_dense(), DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 2.0])));
        assert!(!m.rank_deficient);
    }

    #[test]
    fn implied_covariance_of_linear_model() {
        // Var(Y) = b² σx² + σy²
        let ram = parse_sem("X -> Y, b\n", &vars(&["X", "Y"])).unwrap();
        let m = assemble_ram(&ram, &[0.5, 1.0, 1.0], 1).unwrap();
        let q = precision_from_ram(&m).unwrap();
        let cov = q.to_dense().try_inverse().unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.25]);
        assert_relative_eq!(cov, expected, epsilon = 1e-12);
    }

    #[test]
    fn independent_variables_give_inverse_variances() {
        let ram = parse_sem("", &vars(&["X"])).unwrap();
        let m = assemble_ram(&ram, &[2.0], 1).unwrap();
        assert_eq!(m.p.nnz(), 0);
        let q = precision_from_ram(&m).unwrap();
        assert_relative_eq!(q.get(0, 0), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn ar1_unrolled_indices() {
        let ram = parse_dsem("X -> X, 1, rho", &vars(&["X"])).unwrap();
        let m = assemble_ram(&ram, &[0.4, 1.0], 4).unwrap();
        let expected: Vec<(usize, usize, f64)> = (1..4).map(|t| (t, t - 1, 0.4)).collect();
        assert_eq!(m.p.triplets().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn ar1_precision_is_tridiagonal() {
        let ram = parse_dsem("X -> X, 1, rho", &vars(&["X"])).unwrap();
        let m = assemble_ram(&ram, &[0.4, 1.0], 5).unwrap();
        let q = precision_from_ram(&m).unwrap().to_dense();
        for i in 0..5 {
            let d = if i < 4 { 1.16 } else { 1.0 };
            assert!((q[(i, i)] - d).abs() < 1e-12);
            for j in 0..5 {
                if (i as i64 - j as i64).abs() == 1 {
                    assert!((q[(i, j)] + 0.4).abs() < 1e-12);
                } else if i != j {
                    assert_eq!(q[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn identity_projection() {
        let ram = parse_sem("", &vars(&["X", "Y", "Z"])).unwrap();
        let m = assemble_ram(&ram, &[1.0, 1.0, 1.0], 1).unwrap();
        let w = DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        assert_relative_eq!(project_rank_deficient(&m, &w).unwrap(), w, epsilon = 1e-15);
    }

    #[test]
    fn covariance_terms_enter_g() {
        let ram = parse_sem("X <-> Y, c\n", &vars(&["X", "Y"])).unwrap();
        let m = assemble_ram(&ram, &[0.3, 1.0, 1.2], 1).unwrap();
        let q = precision_from_ram(&m).unwrap().to_dense();
        let g = m.g.to_dense();
        let expected = (&g * g.transpose()).try_inverse().unwrap();
        assert_relative_eq!(q, expected, epsilon = 1e-12);
    }

    #[test]
    fn simultaneous_unit_loop_is_singular() {
        let ram = parse_sem("X -> Y, NA, 1\nY -> X, NA, 1\n", &vars(&["X", "Y"])).unwrap();
        assert!(matches!(assemble_ram(&ram, &[1.0, 1.0], 1), Err(Error::Singular(_))));
    }

    #[test]
    fn rank_deficiency_and_dimension_errors() {
        let ram = parse_dsem("X <-> X, 0, NA, 0", &vars(&["X", "F"])).unwrap();
        let m = assemble_ram(&ram, &[1.0], 3).unwrap();
        assert!(m.rank_deficient);
        assert!(matches!(precision_from_ram(&m), Err(Error::RankDeficient(_))));
        assert!(assemble_ram(&ram, &[], 3).is_err());
        let lagged = parse_dsem("X -> X, 2, r", &vars(&["X"])).unwrap();
        assert!(assemble_ram(&lagged, &[0.1, 1.0], 2).is_err());
    }

    #[test]
    fn shared_parameter_moves_every_entry() {
        let ram = parse_sem("X -> Y, b\nY -> Z, b\n", &vars(&["X", "Y", "Z"])).unwrap();
        let m1 = assemble_ram(&ram, &[0.2, 1.0, 1.0, 1.0], 1).unwrap();
        let m2 = assemble_ram(&ram, &[0.7, 1.0, 1.0, 1.0], 1).unwrap();
        let diff = m2.p.add_scaled(1.0, &m1.p, -1.0);
        assert!(diff.values().iter().all(|&d| (d - 0.5).abs() < 1e-15));
        assert_eq!(diff.nnz(), 2);
    }
}
