//! Separable GMRF kernels over an `S × n` field whose column-stacked vector
//! (site index fastest) has precision `Q_inner ⊗ Q_spatial`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ram::RamMatrices;
use crate::sparse::SparseSymMatrix;
use crate::spatial::ProjectorRow;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
pub enum InnerStructure {
    Precision(SparseSymMatrix),
    /// Rank-deficient RAM: values are white coordinates with identity inner
    /// precision, mapped through `(I - P)⁻¹ G` on read.
    Projected(RamMatrices),
}

impl InnerStructure {
    pub fn dim(&self) -> usize {
        match self {
            InnerStructure::Precision(q) => q.dim(),
            InnerStructure::Projected(m) => m.dim(),
        }
    }

    pub fn is_projected(&self) -> bool {
        matches!(self, InnerStructure::Projected(_))
    }
}

#[derive(Debug, Clone)]
pub struct SeparableField {
    pub inner: InnerStructure,
    pub spatial: SparseSymMatrix,
    pub values: DMatrix<f64>,
}

impl SeparableField {
    pub fn new(inner: InnerStructure, spatial: SparseSymMatrix, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != spatial.dim() || values.ncols() != inner.dim() {
            return Err(Error::Dimension(format!(
                "field values are {}×{}, factors need {}×{}",
                values.nrows(),
                values.ncols(),
                spatial.dim(),
                inner.dim()
            )));
        }
        Ok(Self { inner, spatial, values })
    }

    pub fn is_projected(&self) -> bool {
        self.inner.is_projected()
    }

    /// Field values in model coordinates (white values transformed when projected).
    pub fn effective_values(&self) -> Result<DMatrix<f64>> {
        match &self.inner {
            InnerStructure::Precision(_) => Ok(self.values.clone()),
            InnerStructure::Projected(m) => Ok(m.project(&self.values.transpose())?.transpose()),
        }
    }
}

/// `Σ (Qs V) ∘ (V Qi)`, i.e. `vec(V)ᵀ (Qi ⊗ Qs) vec(V)`.
pub fn kron_quad_form(qi: &SparseSymMatrix, qs: &SparseSymMatrix, v: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    let mut qs_v = DMatrix::zeros(v.nrows(), v.ncols());
    for k in 0..v.ncols() {
        let col = qs.mul_vec(v.column(k).as_slice());
        qs_v.column_mut(k).copy_from_slice(&col);
    }
    let vt = v.transpose();
    for s in 0..v.nrows() {
        let row = qi.mul_vec(vt.column(s).as_slice());
        for (k, r) in row.iter().enumerate() {
            total += r * qs_v[(s, k)];
        }
    }
    total
}

pub fn gmrf_logpdf(field: &SeparableField) -> Result<f64> {
    let s = field.spatial.dim() as f64;
    let n = field.inner.dim() as f64;
    let logdet_s = field.spatial.logdet()?;
    let (logdet, quad) = match &field.inner {
        InnerStructure::Precision(qi) => (
            s * qi.logdet()? + n * logdet_s,
            kron_quad_form(qi, &field.spatial, &field.values),
        ),
        InnerStructure::Projected(_) => {
            let quad = (0..field.values.ncols())
                .map(|k| field.spatial.quad_form(field.values.column(k).as_slice()))
                .sum();
            (n * logdet_s, quad)
        }
    };
    Ok(-0.5 * (s * n * LN_2PI - logdet + quad))
}

/// Draws an `S × n` array with covariance `Q_inner⁻¹ ⊗ Q_spatial⁻¹` (white
/// coordinates for a projected structure).
pub fn gmrf_sample<R: Rng + ?Sized>(
    inner: &InnerStructure,
    spatial: &SparseSymMatrix,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (s, n) = (spatial.dim(), inner.dim());
    let z = DMatrix::<f64>::from_fn(s, n, |_, _| rng.sample(StandardNormal));
    let ls = spatial.cholesky()?;
    let mut y = DMatrix::zeros(s, n);
    for k in 0..n {
        y.column_mut(k).copy_from_slice(&ls.sample_from_white(z.column(k).as_slice()));
    }
    if let InnerStructure::Precision(qi) = inner {
        let li = qi.cholesky()?;
        let yt = y.transpose();
        for r in 0..s {
            let row = li.sample_from_white(yt.column(r).as_slice());
            for (k, v) in row.into_iter().enumerate() {
                y[(r, k)] = v;
            }
        }
    }
    Ok(y)
}

/// `Σ_s w_s Ω[s, k]` for inner index `k` (flat `t·C + c` under DSEM).
pub fn read_field(field: &SeparableField, k: usize, row: &ProjectorRow) -> Result<f64> {
    if k >= field.inner.dim() {
        return Err(Error::Dimension(format!("inner index {k} out of range")));
    }
    if let Some(&(s, _)) = row.entries.iter().find(|&&(s, _)| s >= field.spatial.dim()) {
        return Err(Error::Dimension(format!("node {s} out of range")));
    }
    match &field.inner {
        InnerStructure::Precision(_) => Ok(row.entries.iter().map(|&(s, w)| w * field.values[(s, k)]).sum()),
        InnerStructure::Projected(m) => {
            let mut total = 0.0;
            for &(s, w) in &row.entries {
                let white = DMatrix::from_iterator(field.values.ncols(), 1, field.values.row(s).iter().copied());
                let mapped = m.project(&white)?;
                total += w * mapped[k];
            }
            Ok(total)
        }
    }
}
