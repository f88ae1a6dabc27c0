//! Simplicial sparse Cholesky factorization `P A Pᵀ = L Lᵀ`.
//!
//! The ordering is a plain minimum-degree elimination on the explicit graph
//! (natural order once the matrix is nearly dense). The numeric phase is the
//! up-looking row algorithm driven by the elimination tree. A symbolic
//! analysis can be shared between matrices with identical patterns.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::CscMatrix;

const DENSE_FRACTION: f64 = 0.35;

#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    /// `pinv[old] = new`.
    pinv: Vec<usize>,
    parent: Vec<Option<usize>>,
    lcolptr: Vec<usize>,
    // Pattern of the source matrix, to validate reuse.
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    // Upper triangle of the permuted matrix, and a map from source value index
    // into it (None for entries of the strictly lower permuted triangle).
    ucolptr: Vec<usize>,
    urowidx: Vec<usize>,
    umap: Vec<Option<usize>>,
}

impl SymbolicCholesky {
    pub fn analyze(a: &CscMatrix) -> Result<Arc<Self>> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::Dimension("Cholesky needs a square matrix".into()));
        }
        let perm = if (a.nnz() as f64) > DENSE_FRACTION * (n * n) as f64 {
            (0..n).collect()
        } else {
            minimum_degree(a)
        };
        let mut pinv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }

        // Upper triangle of B = A[perm, perm], column-wise.
        let mut counts = vec![0usize; n + 1];
        for j in 0..n {
            let (rows, _) = a.col(j);
            for &i in rows {
                let (bi, bj) = (pinv[i], pinv[j]);
                if bi <= bj {
                    counts[bj + 1] += 1;
                }
            }
        }
        for j in 0..n {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut urowidx = vec![0; counts[n]];
        let mut umap = vec![None; a.nnz()];
        for j in 0..n {
            let start = a.colptr()[j];
            let (rows, _) = a.col(j);
            for (off, &i) in rows.iter().enumerate() {
                let (bi, bj) = (pinv[i], pinv[j]);
                if bi <= bj {
                    let p = next[bj];
                    urowidx[p] = bi;
                    umap[start + off] = Some(p);
                    next[bj] += 1;
                }
            }
        }
        // Row indices within each column need not be sorted for the up-looking
        // algorithm, but every diagonal entry must be present.
        for j in 0..n {
            if !urowidx[counts[j]..counts[j + 1]].contains(&j) {
                return Err(Error::NotPositiveDefinite { pivot: perm[j], value: 0.0 });
            }
        }

        let parent = etree(n, &counts, &urowidx);
        let lcolptr = column_pointers(n, &counts, &urowidx, &parent);

        Ok(Arc::new(Self {
            n,
            perm,
            pinv,
            parent,
            lcolptr,
            colptr: a.colptr().to_vec(),
            rowidx: a.rowidx().to_vec(),
            ucolptr: counts,
            urowidx,
            umap,
        }))
    }

    pub fn matches(&self, a: &CscMatrix) -> bool {
        a.nrows() == self.n && a.colptr() == self.colptr.as_slice() && a.rowidx() == self.rowidx.as_slice()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.lcolptr[self.n]
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}

fn etree(n: usize, ucolptr: &[usize], urowidx: &[usize]) -> Vec<Option<usize>> {
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for &i0 in &urowidx[ucolptr[k]..ucolptr[k + 1]] {
            let mut i = Some(i0);
            while let Some(ii) = i {
                if ii >= k {
                    break;
                }
                let inext = ancestor[ii];
                ancestor[ii] = Some(k);
                if inext.is_none() {
                    parent[ii] = Some(k);
                }
                i = inext;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of L (excluding the diagonal), written into
/// `stack[top..]` in topological order. Returns `top`.
fn ereach(
    k: usize,
    ucolptr: &[usize],
    urowidx: &[usize],
    parent: &[Option<usize>],
    stack: &mut [usize],
    mark: &mut [usize],
    path: &mut Vec<usize>,
) -> usize {
    let n = parent.len();
    let mut top = n;
    let stamp = k + 1;
    mark[k] = stamp;
    for &i0 in &urowidx[ucolptr[k]..ucolptr[k + 1]] {
        if i0 > k {
            continue;
        }
        path.clear();
        let mut i = i0;
        while mark[i] != stamp {
            path.push(i);
            mark[i] = stamp;
            match parent[i] {
                Some(p) => i = p,
                None => break,
            }
        }
        while let Some(v) = path.pop() {
            top -= 1;
            stack[top] = v;
        }
    }
    top
}

fn column_pointers(n: usize, ucolptr: &[usize], urowidx: &[usize], parent: &[Option<usize>]) -> Vec<usize> {
    let mut counts = vec![1usize; n];
    let mut stack = vec![0; n];
    let mut mark = vec![0; n];
    let mut path = Vec::new();
    for k in 0..n {
        let top = ereach(k, ucolptr, urowidx, parent, &mut stack, &mut mark, &mut path);
        for &i in &stack[top..n] {
            counts[i] += 1;
        }
    }
    let mut colptr = vec![0; n + 1];
    for j in 0..n {
        colptr[j + 1] = colptr[j] + counts[j];
    }
    colptr
}

/// Minimum-degree ordering on the explicit elimination graph. Ties go to the
/// lowest index so the ordering is deterministic.
fn minimum_degree(a: &CscMatrix) -> Vec<usize> {
    let n = a.nrows();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (r, c, _) in a.triplets() {
        if r != c {
            adj[r].insert(c);
            adj[c].insert(r);
        }
    }
    let mut eliminated = vec![false; n];
    // Buckets keyed by degree hold candidate nodes; stale entries are skipped.
    let mut buckets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n.max(1)];
    let mut degree: Vec<usize> = adj.iter().map(|s| s.len()).collect();
    for (v, &d) in degree.iter().enumerate() {
        buckets[d].insert(v);
    }
    let mut order = Vec::with_capacity(n);
    let mut min_deg = 0;
    for _ in 0..n {
        while buckets[min_deg].is_empty() {
            min_deg += 1;
        }
        let v = *buckets[min_deg].iter().next().unwrap();
        buckets[min_deg].remove(&v);
        eliminated[v] = true;
        order.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nbrs {
            adj[u].remove(&v);
        }
        for (ii, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[ii + 1..] {
                if adj[u].insert(w) {
                    adj[w].insert(u);
                }
            }
        }
        for &u in &nbrs {
            let d = adj[u].len();
            if d != degree[u] {
                buckets[degree[u]].remove(&u);
                buckets[d].insert(u);
                degree[u] = d;
            }
        }
        min_deg = nbrs.iter().map(|&u| degree[u]).min().unwrap_or(min_deg).min(min_deg);
    }
    debug_assert!(eliminated.iter().all(|&e| e));
    order
}

/// Numeric factor. `L` is stored column-wise with the diagonal first in each
/// column.
#[derive(Debug, Clone)]
pub struct Cholesky {
    symbolic: Arc<SymbolicCholesky>,
    lrowidx: Vec<usize>,
    lvalues: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &CscMatrix) -> Result<Self> {
        let sym = SymbolicCholesky::analyze(a)?;
        Self::factor_with(sym, a)
    }

    pub fn factor_with(symbolic: Arc<SymbolicCholesky>, a: &CscMatrix) -> Result<Self> {
        if !symbolic.matches(a) {
            return Err(Error::Dimension("matrix pattern differs from symbolic analysis".into()));
        }
        let n = symbolic.n;
        let mut uvals = vec![0.0; symbolic.urowidx.len()];
        for (src, dst) in symbolic.umap.iter().enumerate() {
            if let Some(p) = dst {
                uvals[*p] += a.values()[src];
            }
        }
        let lnz = symbolic.lcolptr[n];
        let mut lrowidx = vec![0; lnz];
        let mut lvalues = vec![0.0; lnz];
        let mut next: Vec<usize> = symbolic.lcolptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0; n];
        let mut mark = vec![0; n];
        let mut path = Vec::new();
        let (ucolptr, urowidx) = (&symbolic.ucolptr, &symbolic.urowidx);

        for k in 0..n {
            let top = ereach(k, ucolptr, urowidx, &symbolic.parent, &mut stack, &mut mark, &mut path);
            for p in ucolptr[k]..ucolptr[k + 1] {
                x[urowidx[p]] += uvals[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / lvalues[symbolic.lcolptr[i]];
                x[i] = 0.0;
                for p in symbolic.lcolptr[i] + 1..next[i] {
                    x[lrowidx[p]] -= lvalues[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                lrowidx[p] = k;
                lvalues[p] = lki;
            }
            if d.is_nan() || d <= 0.0 || d.is_infinite() {
                return Err(Error::NotPositiveDefinite { pivot: symbolic.perm[k], value: d });
            }
            let p = next[k];
            next[k] += 1;
            lrowidx[p] = k;
            lvalues[p] = d.sqrt();
        }
        Ok(Self {
            symbolic,
            lrowidx,
            lvalues,
        })
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn logdet(&self) -> f64 {
        let lp = &self.symbolic.lcolptr;
        (0..self.dim()).map(|j| self.lvalues[lp[j]].ln()).sum::<f64>() * 2.0
    }

    // L y = b, in permuted coordinates.
    fn lsolve(&self, y: &mut [f64]) {
        let lp = &self.symbolic.lcolptr;
        for j in 0..self.dim() {
            y[j] /= self.lvalues[lp[j]];
            let yj = y[j];
            for p in lp[j] + 1..lp[j + 1] {
                y[self.lrowidx[p]] -= self.lvalues[p] * yj;
            }
        }
    }

    // Lᵀ y = b, in permuted coordinates.
    fn ltsolve(&self, y: &mut [f64]) {
        let lp = &self.symbolic.lcolptr;
        for j in (0..self.dim()).rev() {
            let mut s = y[j];
            for p in lp[j] + 1..lp[j + 1] {
                s -= self.lvalues[p] * y[self.lrowidx[p]];
            }
            y[j] = s / self.lvalues[lp[j]];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let sym = &self.symbolic;
        let mut y: Vec<f64> = sym.perm.iter().map(|&old| b[old]).collect();
        self.lsolve(&mut y);
        self.ltsolve(&mut y);
        let mut x = vec![0.0; b.len()];
        for (new, &old) in sym.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Maps white noise `z` to a draw with covariance `A⁻¹`.
    pub fn sample_from_white(&self, z: &[f64]) -> Vec<f64> {
        let mut y = z.to_vec();
        self.ltsolve(&mut y);
        let mut x = vec![0.0; z.len()];
        for (new, &old) in self.symbolic.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹ P b‖²`.
    pub fn inv_quad_form(&self, b: &[f64]) -> f64 {
        let mut y: Vec<f64> = self.symbolic.perm.iter().map(|&old| b[old]).collect();
        self.lsolve(&mut y);
        y.iter().map(|v| v * v).sum()
    }

    pub fn pinv(&self) -> &[usize] {
        &self.symbolic.pinv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, density: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j || rng.random::<f64>() < density {
                    b[(i, j)] = rng.random::<f64>() - 0.5;
                }
            }
        }
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn logdet_and_solve_match_dense() {
        for (seed, density) in [(1u64, 0.05), (2, 0.2), (3, 0.9)] {
            let a = random_spd(30, density, seed);
            let sp = CscMatrix::from_dense(&a);
            let ch = Cholesky::factor(&sp).unwrap();
            let dense = a.clone().cholesky().unwrap();
            let ld: f64 = dense.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            assert_relative_eq!(ch.logdet(), ld, epsilon = 1e-10);
            let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
            let x = ch.solve(&b);
            let xd = dense.solve(&nalgebra::DVector::from_vec(b.clone()));
            for i in 0..30 {
                assert_relative_eq!(x[i], xd[i], epsilon = 1e-10);
            }
            assert_relative_eq!(ch.inv_quad_form(&b), xd.dot(&nalgebra::DVector::from_vec(b)), epsilon = 1e-10);
        }
    }

    #[test]
    fn white_transform_has_inverse_covariance() {
        let a = random_spd(8, 0.3, 7);
        let ch = Cholesky::factor(&CscMatrix::from_dense(&a)).unwrap();
        // Columns of the transform applied to unit vectors give R with R Rᵀ = A⁻¹.
        let mut r = DMatrix::zeros(8, 8);
        for k in 0..8 {
            let mut e = vec![0.0; 8];
            e[k] = 1.0;
            let col = ch.sample_from_white(&e);
            for i in 0..8 {
                r[(i, k)] = col[i];
            }
        }
        let cov = &r * r.transpose();
        assert_relative_eq!(cov, a.try_inverse().unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            Cholesky::factor(&CscMatrix::from_dense(&a)),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn symbolic_reuse_requires_same_pattern() {
        let a = random_spd(10, 0.2, 11);
        let sp = CscMatrix::from_dense(&a);
        let sym = SymbolicCholesky::analyze(&sp).unwrap();
        let mut scaled = sp.clone();
        scaled.scale(3.0);
        let ch = Cholesky::factor_with(sym.clone(), &scaled).unwrap();
        assert_relative_eq!(ch.logdet(), Cholesky::factor(&sp).unwrap().logdet() + 10.0 * 3f64.ln(), epsilon = 1e-10);
        let other = CscMatrix::identity(10);
        assert!(Cholesky::factor_with(sym, &other).is_err());
    }

    #[test]
    fn ordering_reduces_fill_on_arrow_matrix() {
        // Arrow pointing at the first row: natural order fills in completely.
        let n = 40;
        let mut t = vec![];
        for i in 0..n {
            t.push((i, i, 4.0 + i as f64));
            if i > 0 {
                t.push((0, i, 1.0));
                t.push((i, 0, 1.0));
            }
        }
        let sym = SymbolicCholesky::analyze(&CscMatrix::from_triplets(n, n, &t)).unwrap();
        assert!(sym.factor_nnz() <= 2 * n);
    }
}
