//! Minimal formula language: `y ~ 1 + x + factor(g) + poly(x, k) + s(x, k) + offset(o)`.
//!
//! `build_design` learns a [`DesignRecipe`] from the training table (factor
//! levels, polynomial recurrences, spline knots and centering) and applies
//! it; the recipe is reused unchanged for prediction rows.

use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::sparse::CscMatrix;

const LN_2PI: f64 = 1.8378770664093453;
const DEFAULT_SMOOTH_K: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Numeric(String),
    Factor(String),
    Poly(String, usize),
    Smooth(String, usize),
    Offset(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Formula {
    pub response: Option<String>,
    pub intercept: bool,
    pub terms: Vec<Term>,
}

fn split_top_level(s: &str, sep: char) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if ch == sep && depth == 0 {
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push(ch);
        }
    }
    out.push(cur);
    out
}

fn call_args<'a>(term: &'a str, name: &str) -> Option<Vec<&'a str>> {
    let rest = term.strip_prefix(name)?.trim_start();
    let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
    Some(inner.split(',').map(str::trim).collect())
}

fn column_name(arg: &str, term: &str) -> Result<String> {
    let ok = !arg.is_empty() && !arg.contains(['(', ')', '~', '+', '*', ':', '^', ' ']);
    if ok {
        Ok(arg.to_string())
    } else {
        Err(Error::Formula(format!("unsupported term '{term}'")))
    }
}

fn parse_k(arg: &str, term: &str) -> Result<usize> {
    let arg = arg.strip_prefix("k").map(|r| r.trim_start().trim_start_matches('=').trim()).unwrap_or(arg);
    arg.parse()
        .map_err(|_| Error::Formula(format!("'{term}': basis size must be an integer")))
}

pub fn parse_formula(text: &str) -> Result<Formula> {
    let sides: Vec<&str> = text.split('~').collect();
    let (lhs, rhs) = match sides[..] {
        [rhs] => ("", rhs),
        [lhs, rhs] => (lhs.trim(), rhs),
        _ => return Err(Error::Formula(format!("more than one '~' in '{text}'"))),
    };
    let response = if lhs.is_empty() {
        None
    } else {
        Some(column_name(lhs, lhs)?)
    };
    let mut intercept = true;
    let mut terms = Vec::new();
    for raw in split_top_level(rhs, '+') {
        let t = raw.trim();
        if t.is_empty() {
            return Err(Error::Formula(format!("empty term in '{text}'")));
        }
        let term = match t {
            "1" => continue,
            "0" | "-1" => {
                intercept = false;
                continue;
            }
            _ => {
                if let Some(args) = call_args(t, "factor") {
                    match args[..] {
                        [c] => Term::Factor(column_name(c, t)?),
                        _ => return Err(Error::Formula(format!("'{t}': factor takes one column"))),
                    }
                } else if let Some(args) = call_args(t, "poly") {
                    match args[..] {
                        [c, k] => Term::Poly(column_name(c, t)?, parse_k(k, t)?),
                        _ => return Err(Error::Formula(format!("'{t}': expected poly(column, degree)"))),
                    }
                } else if let Some(args) = call_args(t, "s") {
                    match args[..] {
                        [c] => Term::Smooth(column_name(c, t)?, DEFAULT_SMOOTH_K),
                        [c, k] => Term::Smooth(column_name(c, t)?, parse_k(k, t)?),
                        _ => return Err(Error::Formula(format!("'{t}': expected s(column, k)"))),
                    }
                } else if let Some(args) = call_args(t, "offset") {
                    match args[..] {
                        [c] => Term::Offset(column_name(c, t)?),
                        _ => return Err(Error::Formula(format!("'{t}': offset takes one column"))),
                    }
                } else {
                    Term::Numeric(column_name(t, t)?)
                }
            }
        };
        match &term {
            Term::Smooth(_, k) if *k < 3 => {
                return Err(Error::Formula(format!("'{t}': s() needs k >= 3")));
            }
            Term::Poly(_, 0) => return Err(Error::Formula(format!("'{t}': degree must be positive"))),
            _ => {}
        }
        if terms.contains(&term) {
            return Err(Error::Formula(format!("term '{t}' repeated")));
        }
        terms.push(term);
    }
    Ok(Formula {
        response,
        intercept,
        terms,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum ColumnRecipe {
    Intercept,
    Numeric(String),
    Factor { col: String, levels: Vec<String>, first: usize },
    Poly { col: String, alpha: Vec<f64>, norm2: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    pub degree: usize,
    pub knots: Vec<f64>,
    pub k: usize,
    pub range: (f64, f64),
    pub means: Vec<f64>,
}

impl SplineBasis {
    /// Clamped knot vector with equally spaced interior knots over `[lo, hi]`.
    pub fn new(k: usize, lo: f64, hi: f64) -> Self {
        let degree = 3.min(k - 1);
        let n_interior = k - degree - 1;
        let mut knots = vec![lo; degree + 1];
        for j in 1..=n_interior {
            knots.push(lo + (hi - lo) * j as f64 / (n_interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Self {
            degree,
            knots,
            k,
            range: (lo, hi),
            means: vec![0.0; k],
        }
    }

    /// Uncentered basis values; `x` is clamped to the training range.
    pub fn eval_raw(&self, x: f64) -> Vec<f64> {
        let (p, k, u) = (self.degree, self.k, &self.knots);
        let x = x.clamp(self.range.0, self.range.1);
        let span = if x >= u[k] {
            k - 1
        } else {
            (p..k).rev().find(|&i| u[i] <= x).unwrap_or(p)
        };
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        let mut out = vec![0.0; k];
        for (r, v) in n.into_iter().enumerate() {
            out[span - p + r] = v;
        }
        out
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut b = self.eval_raw(x);
        for (v, m) in b.iter_mut().zip(&self.means) {
            *v -= m;
        }
        b
    }
}

/// `D₂ᵀ D₂` for the `(k-2) × k` second-difference operator.
pub fn second_difference_penalty(k: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(k - 2, k);
    for i in 0..k - 2 {
        d[(i, i)] = 1.0;
        d[(i, i + 1)] = -2.0;
        d[(i, i + 2)] = 1.0;
    }
    d.transpose() * d
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothBlock {
    pub name: String,
    pub column: String,
    pub columns: Range<usize>,
    pub penalty: CscMatrix,
    pub rank: usize,
    /// Log pseudo-determinant of the penalty.
    pub log_pdet: f64,
    pub basis: SplineBasis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignRecipe {
    fixed: Vec<ColumnRecipe>,
    smooths: Vec<(String, SplineBasis)>,
    offsets: Vec<String>,
    pub response: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlocks {
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub z: CscMatrix,
    pub smooths: Vec<SmoothBlock>,
    pub offset: Vec<f64>,
    pub recipe: DesignRecipe,
    pub warnings: Vec<String>,
}

fn sorted_levels(values: &[String]) -> Vec<String> {
    let mut levels: Vec<String> = values.to_vec();
    levels.sort();
    levels.dedup();
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(levels).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        levels = pairs.into_iter().map(|p| p.1).collect();
    }
    levels
}

/// Orthogonal polynomial recurrence learned from `x` (three-term Stieltjes).
fn poly_coefficients(x: &[f64], degree: usize, col: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut distinct = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() <= degree {
        return Err(Error::Formula(format!(
            "poly({col}, {degree}): degree must be less than the number of distinct values"
        )));
    }
    let n = x.len();
    let mut alpha = Vec::with_capacity(degree);
    let mut norm2 = vec![n as f64];
    let mut prev = vec![0.0; n];
    let mut cur = vec![1.0; n];
    for i in 0..degree {
        let a = x.iter().zip(&cur).map(|(xi, p)| xi * p * p).sum::<f64>() / norm2[i];
        alpha.push(a);
        let ratio = if i == 0 { 0.0 } else { norm2[i] / norm2[i - 1] };
        let next: Vec<f64> = (0..n).map(|j| (x[j] - a) * cur[j] - ratio * prev[j]).collect();
        norm2.push(next.iter().map(|v| v * v).sum());
        prev = std::mem::replace(&mut cur, next);
    }
    Ok((alpha, norm2))
}

fn poly_eval(x: f64, alpha: &[f64], norm2: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(alpha.len());
    let (mut prev, mut cur) = (0.0, 1.0);
    for (i, &a) in alpha.iter().enumerate() {
        let ratio = if i == 0 { 0.0 } else { norm2[i] / norm2[i - 1] };
        let next = (x - a) * cur - ratio * prev;
        out.push(next / norm2[i + 1].sqrt());
        prev = cur;
        cur = next;
    }
    out
}

fn numeric_matrix_rank(x: &DMatrix<f64>) -> usize {
    if x.ncols() == 0 || x.nrows() == 0 {
        return 0;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    sv.iter().filter(|&&s| s > max * 1e-10 * x.nrows().max(x.ncols()) as f64).count()
}

impl DesignRecipe {
    pub fn learn(formula: &Formula, data: &DataTable) -> Result<Self> {
        let mut fixed = Vec::new();
        let mut smooths = Vec::new();
        let mut offsets = Vec::new();
        if formula.intercept {
            fixed.push(ColumnRecipe::Intercept);
        }
        let mut full_factor_used = formula.intercept;
        for term in &formula.terms {
            match term {
                Term::Numeric(col) => {
                    data.numeric(col)?;
                    fixed.push(ColumnRecipe::Numeric(col.clone()));
                }
                Term::Factor(col) => {
                    let levels = sorted_levels(&data.labels(col)?);
                    let first = usize::from(full_factor_used);
                    full_factor_used = true;
                    fixed.push(ColumnRecipe::Factor {
                        col: col.clone(),
                        levels,
                        first,
                    });
                }
                Term::Poly(col, degree) => {
                    let (alpha, norm2) = poly_coefficients(&data.numeric(col)?, *degree, col)?;
                    fixed.push(ColumnRecipe::Poly {
                        col: col.clone(),
                        alpha,
                        norm2,
                    });
                }
                Term::Smooth(col, k) => {
                    let x = data.numeric(col)?;
                    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if x.is_empty() || hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
                        return Err(Error::Formula(format!("s({col}): covariate has no spread")));
                    }
                    let mut basis = SplineBasis::new(*k, lo, hi);
                    let mut means = vec![0.0; *k];
                    for &xi in &x {
                        for (m, b) in means.iter_mut().zip(basis.eval_raw(xi)) {
                            *m += b / x.len() as f64;
                        }
                    }
                    basis.means = means;
                    smooths.push((col.clone(), basis));
                }
                Term::Offset(col) => {
                    data.numeric(col)?;
                    offsets.push(col.clone());
                }
            }
        }
        Ok(Self {
            fixed,
            smooths,
            offsets,
            response: formula.response.clone(),
        })
    }

    pub fn x_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for rec in &self.fixed {
            match rec {
                ColumnRecipe::Intercept => names.push("(Intercept)".to_string()),
                ColumnRecipe::Numeric(c) => names.push(c.clone()),
                ColumnRecipe::Factor { col, levels, first } => {
                    names.extend(levels[*first..].iter().map(|l| format!("factor({col}){l}")))
                }
                ColumnRecipe::Poly { col, alpha, .. } => {
                    let d = alpha.len();
                    names.extend((1..=d).map(|i| format!("poly({col}, {d}){i}")))
                }
            }
        }
        names
    }

    pub fn n_smooth_columns(&self) -> usize {
        self.smooths.iter().map(|s| s.1.k).sum()
    }

    /// Fixed design, smoother design and offset for the rows of `data`.
    pub fn apply(&self, data: &DataTable) -> Result<(DMatrix<f64>, CscMatrix, Vec<f64>)> {
        let n = data.n_rows();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for rec in &self.fixed {
            match rec {
                ColumnRecipe::Intercept => cols.push(vec![1.0; n]),
                ColumnRecipe::Numeric(c) => cols.push(data.numeric(c)?),
                ColumnRecipe::Factor { col, levels, first } => {
                    let labels = data.labels(col)?;
                    for (i, l) in labels.iter().enumerate() {
                        if !levels.contains(l) {
                            return Err(Error::Data(format!(
                                "row {}: level '{l}' of factor({col}) not seen in training data",
                                i + 1
                            )));
                        }
                    }
                    for level in &levels[*first..] {
                        cols.push(labels.iter().map(|l| f64::from(u8::from(l == level))).collect());
                    }
                }
                ColumnRecipe::Poly { col, alpha, norm2 } => {
                    let x = data.numeric(col)?;
                    let evals: Vec<Vec<f64>> = x.iter().map(|&xi| poly_eval(xi, alpha, norm2)).collect();
                    for d in 0..alpha.len() {
                        cols.push(evals.iter().map(|e| e[d]).collect());
                    }
                }
            }
        }
        let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);

        let mut triplets = Vec::new();
        let mut start = 0;
        for (col, basis) in &self.smooths {
            for (i, xi) in data.numeric(col)?.into_iter().enumerate() {
                for (j, b) in basis.eval(xi).into_iter().enumerate() {
                    triplets.push((i, start + j, b));
                }
            }
            start += basis.k;
        }
        let z = CscMatrix::from_triplets(n, start, &triplets);

        let mut offset = vec![0.0; n];
        for col in &self.offsets {
            for (o, v) in offset.iter_mut().zip(data.numeric(col)?) {
                *o += v;
            }
        }
        Ok((x, z, offset))
    }
}

pub fn build_design(formula: &str, data: &DataTable) -> Result<DesignBlocks> {
    let formula = parse_formula(formula)?;
    build_design_from(&formula, data)
}

pub fn build_design_from(formula: &Formula, data: &DataTable) -> Result<DesignBlocks> {
    let recipe = DesignRecipe::learn(formula, data)?;
    let (x, z, offset) = recipe.apply(data)?;
    let mut warnings = Vec::new();
    let rank = numeric_matrix_rank(&x);
    if rank < x.ncols() {
        warnings.push(format!(
            "fixed-effect design has rank {rank} < {} columns",
            x.ncols()
        ));
    }
    let mut smooths = Vec::new();
    let mut start = 0;
    for (col, basis) in &recipe.smooths {
        let k = basis.k;
        let pen = second_difference_penalty(k);
        let eig = SymmetricEigen::new(pen.clone()).eigenvalues;
        let tol = eig.max() * 1e-9;
        let rank = eig.iter().filter(|&&e| e > tol).count();
        let log_pdet = eig.iter().filter(|&&e| e > tol).map(|e| e.ln()).sum();
        smooths.push(SmoothBlock {
            name: format!("s({col})"),
            column: col.clone(),
            columns: start..start + k,
            penalty: CscMatrix::from_dense(&pen),
            rank,
            log_pdet,
            basis: basis.clone(),
        });
        start += k;
    }
    Ok(DesignBlocks {
        x_names: recipe.x_names(),
        x,
        z,
        smooths,
        offset,
        recipe,
        warnings,
    })
}

/// Improper Gaussian log-density of a smoother block, normalized with the
/// penalty rank and pseudo-determinant.
pub fn smoother_logpdf(gamma: &[f64], block: &SmoothBlock, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("smoothing parameter must be positive, got {lambda}")));
    }
    if gamma.len() != block.columns.len() {
        return Err(Error::Dimension(format!(
            "{} has {} coefficients, got {}",
            block.name,
            block.columns.len(),
            gamma.len()
        )));
    }
    let quad: f64 = block
        .penalty
        .mul_vec(gamma)
        .iter()
        .zip(gamma)
        .map(|(a, b)| a * b)
        .sum();
    let r = block.rank as f64;
    Ok(0.5 * r * lambda.ln() + 0.5 * block.log_pdet - 0.5 * r * LN_2PI - 0.5 * lambda * quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table() -> DataTable {
        DataTable::from_columns(vec![
            ("y".into(), ["1", "2", "3", "4", "5"].map(String::from).to_vec()),
            ("g".into(), ["b", "a", "c", "a", "b"].map(String::from).to_vec()),
            ("x".into(), ["0.5", "1.5", "-1", "2", "0"].map(String::from).to_vec()),
            ("o".into(), ["0.1", "0.2", "0.3", "0.4", "0.5"].map(String::from).to_vec()),
        ])
        .unwrap()
    }

    #[test]
    fn intercept_only() {
        let d = build_design("y ~ 1", &table()).unwrap();
        assert_eq!(d.x, DMatrix::from_element(5, 1, 1.0));
        assert_eq!(d.z.ncols(), 0);
        assert!(d.smooths.is_empty());
        assert_eq!(d.offset, vec![0.0; 5]);
    }

    #[test]
    fn factor_treatment_contrasts() {
        let d = build_design("y ~ factor(g)", &table()).unwrap();
        assert_eq!(d.x.ncols(), 3);
        assert_eq!(d.x_names, vec!["(Intercept)", "factor(g)b", "factor(g)c"]);
        assert_eq!(d.x.column(1).as_slice(), &[1.0, 0.0, 0.0, 0.0, 1.0]);
        let d0 = build_design("y ~ 0 + factor(g)", &table()).unwrap();
        assert_eq!(d0.x.ncols(), 3);
        assert_eq!(d0.x_names[0], "factor(g)a");
    }

    #[test]
    fn numeric_levels_sort_numerically() {
        let levels = sorted_levels(&["10", "9", "2"].map(String::from));
        assert_eq!(levels, vec!["2", "9", "10"]);
    }

    #[test]
    fn offsets_and_errors() {
        let d = build_design("y ~ x + offset(o)", &table()).unwrap();
        assert_eq!(d.offset, vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(d.x_names, vec!["(Intercept)", "x"]);
        assert!(matches!(build_design("y ~ w", &table()), Err(Error::Data(_))));
        assert!(matches!(build_design("y ~ g", &table()), Err(Error::Data(_))));
        assert!(matches!(build_design("y ~ s(x, 2)", &table()), Err(Error::Formula(_))));
        assert!(matches!(build_design("y ~ x:g", &table()), Err(Error::Formula(_))));
    }

    #[test]
    fn rank_deficiency_warns() {
        let t = DataTable::from_numeric(&[("y", &[1.0, 2.0, 3.0]), ("a", &[1.0, 1.0, 1.0])]).unwrap();
        let d = build_design("y ~ a", &t).unwrap();
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn second_difference_penalty_rank() {
        let q = second_difference_penalty(9);
        let sv = q.clone().svd(false, false).singular_values;
        let rank = sv.iter().filter(|&&s| s > 1e-10).count();
        assert_eq!(rank, 7);
        // null space is spanned by constants and linear sequences
        let c = DMatrix::from_element(9, 1, 1.0);
        let l = DMatrix::from_fn(9, 1, |i, _| i as f64);
        assert!((&q * c).norm() < 1e-12);
        assert!((&q * l).norm() < 1e-12);
        let x: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let t = DataTable::from_numeric(&[("y", &x), ("x", &x)]).unwrap();
        let d = build_design("y ~ s(x, 9)", &t).unwrap();
        assert_eq!(d.smooths[0].rank, 7);
        assert_eq!(d.smooths[0].penalty.to_dense(), q);
    }

    fn cox_de_boor(i: usize, p: usize, u: &[f64], x: f64) -> f64 {
        if p == 0 {
            let last = u.iter().rposition(|&v| v < u[u.len() - 1]).unwrap();
            return if (u[i] <= x && x < u[i + 1]) || (x == u[u.len() - 1] && i == last) {
                1.0
            } else {
                0.0
            };
        }
        let mut v = 0.0;
        if u[i + p] > u[i] {
            v += (x - u[i]) / (u[i + p] - u[i]) * cox_de_boor(i, p - 1, u, x);
        }
        if u[i + p + 1] > u[i + 1] {
            v += (u[i + p + 1] - x) / (u[i + p + 1] - u[i + 1]) * cox_de_boor(i + 1, p - 1, u, x);
        }
        v
    }

    #[test]
    fn bspline_matches_recursive_definition() {
        for k in [3, 4, 6, 9] {
            let b = SplineBasis::new(k, -1.0, 2.0);
            for step in 0..=40 {
                let x = -1.0 + 3.0 * step as f64 / 40.0;
                let vals = b.eval_raw(x);
                assert_relative_eq!(vals.iter().sum::<f64>(), 1.0, epsilon = 1e-13);
                for (i, v) in vals.iter().enumerate() {
                    assert_relative_eq!(*v, cox_de_boor(i, b.degree, &b.knots, x), epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn smooth_columns_are_centered() {
        let x: Vec<f64> = (0..25).map(|i| ((i * 7) % 25) as f64 * 0.3).collect();
        let t = DataTable::from_numeric(&[("y", &x), ("x", &x)]).unwrap();
        let d = build_design("y ~ s(x, 6)", &t).unwrap();
        let z = d.z.to_dense();
        for j in 0..6 {
            assert!(z.column(j).sum().abs() < 1e-12);
        }
        assert_eq!(d.smooths[0].columns, 0..6);
    }

    #[test]
    fn orthogonal_polynomials() {
        let x: Vec<f64> = vec![0.0, 1.0, 2.5, 3.0, 4.0, 7.0];
        let t = DataTable::from_numeric(&[("y", &x), ("x", &x)]).unwrap();
        let d = build_design("y ~ poly(x, 3)", &t).unwrap();
        let p = d.x.columns(1, 3).into_owned();
        // orthonormal and orthogonal to the intercept
        assert_relative_eq!(p.transpose() * &p, DMatrix::identity(3, 3), epsilon = 1e-12);
        for j in 0..3 {
            assert!(p.column(j).sum().abs() < 1e-12);
        }
        // spans the raw monomials
        let raw = DMatrix::from_fn(6, 4, |i, j| x[i].powi(j as i32));
        let full = d.x.clone();
        let coef = full.clone().svd(true, true).solve(&raw, 1e-12).unwrap();
        assert_relative_eq!(full * coef, raw, epsilon = 1e-9);
        // prediction through the recipe reproduces training columns
        let (x2, _, _) = d.recipe.apply(&t).unwrap();
        assert_eq!(x2, d.x);
    }

    #[test]
    fn smoother_density() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let t = DataTable::from_numeric(&[("y", &x), ("x", &x)]).unwrap();
        let d = build_design("y ~ s(x, 5)", &t).unwrap();
        let block = &d.smooths[0];
        let g = [0.3, -0.2, 0.5, 0.1, -0.4];
        let zero = smoother_logpdf(&[0.0; 5], block, 2.0).unwrap();
        let r = block.rank as f64;
        assert_relative_eq!(
            zero,
            0.5 * r * 2f64.ln() + 0.5 * block.log_pdet - 0.5 * r * LN_2PI,
            epsilon = 1e-12
        );
        let quad: f64 = {
            let q = block.penalty.to_dense();
            let gv = nalgebra::DVector::from_column_slice(&g);
            gv.dot(&(q * &gv))
        };
        let a = smoother_logpdf(&g, block, 1.5).unwrap();
        let b = smoother_logpdf(&g, block, 3.0).unwrap();
        assert_relative_eq!(b - a, 0.5 * r * 2f64.ln() - 0.5 * 1.5 * quad, epsilon = 1e-12);
        assert!(smoother_logpdf(&g, block, 0.0).is_err());
    }

    #[test]
    fn identity_penalty_is_standard_mvn() {
        let block = SmoothBlock {
            name: "s(x)".into(),
            column: "x".into(),
            columns: 0..3,
            penalty: CscMatrix::identity(3),
            rank: 3,
            log_pdet: 0.0,
            basis: SplineBasis::new(3, 0.0, 1.0),
        };
        let g = [0.5, -1.0, 2.0];
        let lambda: f64 = 0.7;
        let ss: f64 = g.iter().map(|v| v * v).sum();
        let dense = -1.5 * LN_2PI + 1.5 * lambda.ln() - 0.5 * lambda * ss;
        assert_relative_eq!(smoother_logpdf(&g, &block, lambda).unwrap(), dense, epsilon = 1e-13);
    }

    #[test]
    fn formula_parsing() {
        let f = parse_formula("count ~ 0 + factor(year) + s(depth, k = 5) + offset(log_area)").unwrap();
        assert_eq!(f.response.as_deref(), Some("count"));
        assert!(!f.intercept);
        assert_eq!(
            f.terms,
            vec![
                Term::Factor("year".into()),
                Term::Smooth("depth".into(), 5),
                Term::Offset("log_area".into())
            ]
        );
        assert!(parse_formula("y ~ x + x").is_err());
        assert!(parse_formula("y ~ te(x, z)").is_err());
    }
}
