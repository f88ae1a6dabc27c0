//! Compressed sparse column storage and the symmetric precision-matrix wrapper.
//!
//! Structural entries are never dropped, even when their value is zero. Model
//! assembly relies on this: a precision built at two parameter vectors has the
//! same pattern, so the symbolic Cholesky analysis can be reused between them.

use std::io::{BufRead, Write};
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;

use crate::cholesky::{Cholesky, SymbolicCholesky};
use crate::error::{Error, Result};

/// General sparse matrix in compressed sparse column layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowidx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            colptr: (0..=n).collect(),
            rowidx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed
    /// and explicit zeros are kept as structural entries.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[c + 1] += 1;
        }
        for j in 0..ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let p = next[c];
            rows[p] = r;
            vals[p] = v;
            next[c] += 1;
        }

        let mut colptr = Vec::with_capacity(ncols + 1);
        let mut rowidx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        colptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for j in 0..ncols {
            scratch.clear();
            scratch.extend((counts[j]..counts[j + 1]).map(|p| (rows[p], vals[p])));
            scratch.sort_by_key(|&(r, _)| r);
            for &(r, v) in &scratch {
                if rowidx.len() > colptr[j] && *rowidx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    rowidx.push(r);
                    values.push(v);
                }
            }
            colptr.push(rowidx.len());
        }
        Self {
            nrows,
            ncols,
            colptr,
            rowidx,
            values,
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if m[(i, j)] != 0.0 {
                    triplets.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &triplets)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.rowidx.len()
    }

    pub fn colptr(&self) -> &[usize] {
        &self.colptr
    }

    pub fn rowidx(&self) -> &[usize] {
        &self.rowidx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row indices and values of column `j`.
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.colptr[j]..self.colptr[j + 1];
        (&self.rowidx[r.clone()], &self.values[r])
    }

    /// Position of entry `(r, c)` in the value array, if structurally present.
    pub fn find(&self, r: usize, c: usize) -> Option<usize> {
        let start = self.colptr[c];
        let rows = &self.rowidx[start..self.colptr[c + 1]];
        rows.binary_search(&r).ok().map(|k| start + k)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.find(r, c).map_or(0.0, |p| self.values[p])
    }

    pub fn same_pattern(&self, other: &CscMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.colptr == other.colptr
            && self.rowidx == other.rowidx
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            (self.colptr[j]..self.colptr[j + 1]).map(move |p| (self.rowidx[p], j, self.values[p]))
        })
    }

    pub fn transpose(&self) -> CscMatrix {
        let triplets: Vec<_> = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        CscMatrix::from_triplets(self.ncols, self.nrows, &triplets)
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `alpha * self + beta * other`, pattern is the union of both patterns.
    pub fn add_scaled(&self, alpha: f64, other: &CscMatrix, beta: f64) -> CscMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let triplets: Vec<_> = self
            .triplets()
            .map(|(r, c, v)| (r, c, alpha * v))
            .chain(other.triplets().map(|(r, c, v)| (r, c, beta * v)))
            .collect();
        CscMatrix::from_triplets(self.nrows, self.ncols, &triplets)
    }

    /// Sparse product `self * other`; the symbolic product pattern is kept in full.
    pub fn mul(&self, other: &CscMatrix) -> CscMatrix {
        assert_eq!(self.ncols, other.nrows, "inner dimensions differ");
        let mut colptr = Vec::with_capacity(other.ncols + 1);
        let mut rowidx = Vec::new();
        let mut values = Vec::new();
        let mut work = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        colptr.push(0);
        for j in 0..other.ncols {
            let start = rowidx.len();
            let (brows, bvals) = other.col(j);
            for (&k, &bkj) in brows.iter().zip(bvals) {
                let (arows, avals) = self.col(k);
                for (&i, &aik) in arows.iter().zip(avals) {
                    if mark[i] != j {
                        mark[i] = j;
                        work[i] = 0.0;
                        rowidx.push(i);
                    }
                    work[i] += aik * bkj;
                }
            }
            rowidx[start..].sort_unstable();
            values.extend(rowidx[start..].iter().map(|&i| work[i]));
            colptr.push(rowidx.len());
        }
        CscMatrix {
            nrows: self.nrows,
            ncols: other.ncols,
            colptr,
            rowidx,
            values,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let (rows, vals) = self.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                y[i] += v * xj;
            }
        }
        y
    }

    /// `selfᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|j| {
                let (rows, vals) = self.col(j);
                rows.iter().zip(vals).map(|(&i, &v)| v * x[i]).sum()
            })
            .collect()
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &CscMatrix) -> CscMatrix {
        let (rb, cb) = (other.nrows, other.ncols);
        let mut triplets = Vec::with_capacity(self.nnz() * other.nnz());
        for (ia, ja, va) in self.triplets() {
            for (ib, jb, vb) in other.triplets() {
                triplets.push((ia * rb + ib, ja * cb + jb, va * vb));
            }
        }
        CscMatrix::from_triplets(self.nrows * rb, self.ncols * cb, &triplets)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}

/// Symmetric sparse matrix (both triangles stored) with a lazily computed
/// Cholesky factor. Any mutation of the values drops the cached factor.
#[derive(Debug)]
pub struct SparseSymMatrix {
    matrix: CscMatrix,
    symbolic: Option<Arc<SymbolicCholesky>>,
    factor: OnceLock<std::result::Result<Cholesky, Error>>,
}

impl Clone for SparseSymMatrix {
    fn clone(&self) -> Self {
        Self {
            matrix: self.matrix.clone(),
            symbolic: self.symbolic.clone(),
            factor: OnceLock::new(),
        }
    }
}

impl PartialEq for SparseSymMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

impl SparseSymMatrix {
    /// Wraps `m` after symmetrizing it as `(m + mᵀ) / 2`.
    pub fn from_csc(m: &CscMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = m.add_scaled(0.5, &m.transpose(), 0.5);
        Ok(Self::from_symmetric_unchecked(sym))
    }

    /// Wraps a matrix the caller has already made symmetric. Asymmetry beyond
    /// 1e-12 relative is rejected.
    pub fn from_symmetric(m: CscMatrix) -> Result<Self> {
        let t = m.transpose();
        if !m.same_pattern(&t) {
            return Err(Error::NotSymmetric("pattern is not symmetric".into()));
        }
        for (a, b) in m.values().iter().zip(t.values()) {
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1e-300) {
                return Err(Error::NotSymmetric(format!("entries {a} and {b} differ")));
            }
        }
        Ok(Self::from_symmetric_unchecked(m))
    }

    pub(crate) fn from_symmetric_unchecked(matrix: CscMatrix) -> Self {
        Self {
            matrix,
            symbolic: None,
            factor: OnceLock::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_symmetric_unchecked(CscMatrix::identity(n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self::from_symmetric_unchecked(CscMatrix::from_diagonal(diag))
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        Self::from_csc(&CscMatrix::from_dense(m))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CscMatrix {
        &self.matrix
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.matrix.get(r, c)
    }

    /// Reuses a symbolic analysis computed for a matrix with the same pattern.
    pub fn with_symbolic(mut self, symbolic: Arc<SymbolicCholesky>) -> Self {
        self.symbolic = Some(symbolic);
        self.factor = OnceLock::new();
        self
    }

    /// Replaces stored values (same pattern) and invalidates the factor.
    pub fn set_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.matrix.nnz());
        self.matrix.values_mut().copy_from_slice(values);
        self.factor = OnceLock::new();
    }

    pub fn scale(&mut self, s: f64) {
        self.matrix.scale(s);
        self.factor = OnceLock::new();
    }

    pub fn is_factored(&self) -> bool {
        self.factor.get().is_some()
    }

    pub fn cholesky(&self) -> Result<&Cholesky> {
        let res = self.factor.get_or_init(|| match &self.symbolic {
            Some(sym) if sym.matches(&self.matrix) => Cholesky::factor_with(sym.clone(), &self.matrix),
            _ => Cholesky::factor(&self.matrix),
        });
        res.as_ref().map_err(Clone::clone)
    }

    pub fn logdet(&self) -> Result<f64> {
        Ok(self.cholesky()?.logdet())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(x)
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.matrix.to_dense()
    }

    pub fn kron(&self, other: &SparseSymMatrix) -> SparseSymMatrix {
        Self::from_symmetric_unchecked(self.matrix.kron(&other.matrix))
    }

    /// Writes the lower triangle in MatrixMarket coordinate format.
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let lower: Vec<_> = self.matrix.triplets().filter(|&(r, c, _)| r >= c).collect();
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(w, "{} {} {}", self.dim(), self.dim(), lower.len())?;
        for (r, c, v) in lower {
            writeln!(w, "{} {} {:e}", r + 1, c + 1, v)?;
        }
        Ok(())
    }

    pub fn read_matrix_market<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty MatrixMarket input".into()))??;
        if header.trim() != "%%MatrixMarket matrix coordinate real symmetric" {
            return Err(Error::Parse(format!("unsupported MatrixMarket header: {header}")));
        }
        let mut size: Option<(usize, usize)> = None;
        let mut triplets = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('%') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse(format!("bad MatrixMarket line: {line}"));
            match size {
                None => {
                    if toks.len() != 3 {
                        return Err(bad());
                    }
                    let n: usize = toks[0].parse().map_err(|_| bad())?;
                    let nnz: usize = toks[2].parse().map_err(|_| bad())?;
                    size = Some((n, nnz));
                }
                Some((n, _)) => {
                    if toks.len() != 3 {
                        return Err(bad());
                    }
                    let i: usize = toks[0].parse().map_err(|_| bad())?;
                    let j: usize = toks[1].parse().map_err(|_| bad())?;
                    let v: f64 = toks[2].parse().map_err(|_| bad())?;
                    if i == 0 || j == 0 || i > n || j > n {
                        return Err(bad());
                    }
                    triplets.push((i - 1, j - 1, v));
                    if i != j {
                        triplets.push((j - 1, i - 1, v));
                    }
                }
            }
        }
        let (n, nnz) = size.ok_or_else(|| Error::Parse("missing MatrixMarket size line".into()))?;
        let stored = triplets.iter().filter(|(r, c, _)| r >= c).count();
        if stored != nnz {
            return Err(Error::Parse(format!("expected {nnz} entries, found {stored}")));
        }
        Ok(Self::from_symmetric_unchecked(CscMatrix::from_triplets(n, n, &triplets)))
    }
}
