//! Model specification: data bindings, parameter layout with transforms, and
//! the latent-vector layout shared by the Laplace solver and prediction.
//!
//! Latent vector `u` = `[vec Ω | vec E | b]`, each field block column-stacked
//! with the site index fastest. When a RAM is rank deficient its block holds
//! white coordinates and every sample row carries the projection weights.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataTable;
use crate::design::{build_design, DesignBlocks};
use crate::error::{Error, Result};
use crate::family::{Distribution, Family, Link};
use crate::notation::{parse_dsem, parse_sem, RamModel};
use crate::ram::assemble_ram;
use crate::spatial::{ProjectorRow, SiteLocation, SpatialDomain, SpatialParam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Log,
    /// `tanh(φ / 2)`, onto `(-1, 1)`.
    ScaledLogit,
}

impl Transform {
    pub fn to_natural(self, phi: f64) -> f64 {
        match self {
            Transform::Identity => phi,
            Transform::Log => phi.exp(),
            Transform::ScaledLogit => (0.5 * phi).tanh(),
        }
    }

    pub fn to_unconstrained(self, x: f64) -> Result<f64> {
        match self {
            Transform::Identity => Ok(x),
            Transform::Log if x > 0.0 => Ok(x.ln()),
            Transform::ScaledLogit if x.abs() < 1.0 => Ok(2.0 * x.atanh()),
            _ => Err(Error::Parameter(format!("value {x} outside the domain of the {} transform", self.name()))),
        }
    }

    /// `d natural / d φ`.
    pub fn derivative(self, phi: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Log => phi.exp(),
            Transform::ScaledLogit => {
                let t = (0.5 * phi).tanh();
                0.5 * (1.0 - t * t)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Log => "log",
            Transform::ScaledLogit => "scaled_logit",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Transform::Identity),
            "log" => Some(Transform::Log),
            "scaled_logit" => Some(Transform::ScaledLogit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Alpha(usize),
    Sem(usize),
    Dsem(usize),
    Spatial,
    Dispersion(usize),
    Lambda(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub transform: Transform,
    pub start: f64,
    pub fixed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterLayout {
    pub entries: Vec<ParamEntry>,
    free: Vec<usize>,
}

impl ParameterLayout {
    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    pub fn free_entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.free.iter().map(|&i| &self.entries[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn start_unconstrained(&self) -> Result<Vec<f64>> {
        self.free
            .iter()
            .map(|&i| {
                let e = &self.entries[i];
                e.transform
                    .to_unconstrained(e.start)
                    .map_err(|_| Error::Parameter(format!("start value {} invalid for {}", e.start, e.name)))
            })
            .collect()
    }

    /// Natural-scale values for every entry, fixed ones included.
    pub fn expand(&self, phi: &[f64]) -> Vec<f64> {
        assert_eq!(phi.len(), self.free.len());
        let mut out: Vec<f64> = self.entries.iter().map(|e| e.fixed.unwrap_or(e.start)).collect();
        for (&i, &p) in self.free.iter().zip(phi) {
            out[i] = self.entries[i].transform.to_natural(p);
        }
        out
    }
}

/// Natural-scale parameters grouped by role.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub alpha: Vec<f64>,
    pub sem: Vec<f64>,
    pub dsem: Vec<f64>,
    pub spatial: Option<f64>,
    /// One per variable; NaN where the family has none.
    pub dispersion: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub formula: String,
    pub sem: Option<String>,
    pub dsem: Option<String>,
    pub variables: Vec<String>,
    pub times: Vec<i64>,
    /// Per-variable family names; variables not listed use `default_family`.
    pub family: BTreeMap<String, String>,
    pub default_family: Option<String>,
    pub variable_column: Option<String>,
    pub time_column: Option<String>,
    pub space_columns: Vec<String>,
    /// Parameters held at a natural-scale value.
    pub fixed: BTreeMap<String, f64>,
    /// Start values on the natural scale.
    pub start: BTreeMap<String, f64>,
    /// RAM parameters mapped onto (-1, 1).
    pub bounded: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentBlock {
    Omega,
    Epsilon,
}

/// One entry of a sample's row of the latent design: `u[u] * w`, times
/// `M[row, col]` of the block's projection when the block is projected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSlot {
    pub u: usize,
    pub w: f64,
    pub proj: Option<(LatentBlock, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothReparam {
    pub name: String,
    /// Columns of the raw smoother design.
    pub raw_columns: Range<usize>,
    /// Penalized eigenvectors (k × r) and eigenvalues.
    pub u_pen: DMatrix<f64>,
    pub d_pen: Vec<f64>,
    /// Null-space directions kept as fixed effects, with their X columns.
    pub u_null: DMatrix<f64>,
    pub null_x_columns: Vec<usize>,
    /// Position of the penalized coefficients inside the smoother block of `u`.
    pub b_range: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct LatentLayout {
    pub n_sites: usize,
    pub omega: Range<usize>,
    pub epsilon: Range<usize>,
    pub smooth: Range<usize>,
    pub omega_projected: bool,
    pub epsilon_projected: bool,
}

impl LatentLayout {
    pub fn dim(&self) -> usize {
        self.smooth.end
    }
}

/// Precomputed sparsity plan for the inner Hessian (pattern and symbolic
/// factorization), shared between evaluations.
pub(crate) type PlanCell = OnceLock<Option<Arc<crate::laplace::HessianPlan>>>;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub domain: SpatialDomain,
    pub variables: Vec<String>,
    pub times: Vec<i64>,
    pub families: Vec<Family>,
    pub sem: Option<RamModel>,
    pub dsem: Option<RamModel>,
    pub design: DesignBlocks,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub zr: DMatrix<f64>,
    pub smooths: Vec<SmoothReparam>,
    pub offset: Vec<f64>,
    pub y: Vec<f64>,
    pub var_idx: Vec<usize>,
    pub time_idx: Vec<usize>,
    pub projectors: Vec<ProjectorRow>,
    pub row_slots: Vec<Vec<RowSlot>>,
    pub layout: ParameterLayout,
    pub latent: LatentLayout,
    pub warnings: Vec<String>,
    patterns: ProjectionPatterns,
    pub(crate) plan: Arc<PlanCell>,
}

type ProjectionPatterns = (Option<Vec<Vec<usize>>>, Option<Vec<Vec<usize>>>);

/// Row-level bindings derived from a data table.
pub(crate) struct RowBindings {
    pub var_idx: Vec<usize>,
    pub time_idx: Vec<usize>,
    pub projectors: Vec<ProjectorRow>,
}

fn parse_time(cell: &str) -> Option<i64> {
    let t = cell.trim();
    t.parse::<i64>().ok().or_else(|| {
        let f = t.parse::<f64>().ok()?;
        (f.fract() == 0.0 && f.abs() < 9e15).then_some(f as i64)
    })
}

/// Keeps the columns of `cand` that add rank to `kept` (modified Gram-Schmidt).
fn prune_dependent(basis: &mut Vec<DVector<f64>>, cand: &DVector<f64>) -> bool {
    let norm = cand.norm();
    if norm == 0.0 {
        return false;
    }
    let mut r = cand.clone();
    for q in basis.iter() {
        let c = q.dot(&r);
        r -= q * c;
    }
    let rn = r.norm();
    if rn > 1e-8 * norm {
        basis.push(r / rn);
        true
    } else {
        false
    }
}

impl Model {
    pub fn new(config: &ModelConfig, domain: SpatialDomain, data: &DataTable) -> Result<Self> {
        let mut config = config.clone();
        let mut warnings = Vec::new();
        let design = build_design(&config.formula, data)?;
        warnings.extend(design.warnings.iter().cloned());
        let response = design
            .recipe
            .response
            .clone()
            .ok_or_else(|| Error::Formula("formula needs a response on the left of '~'".into()))?;
        if config.variables.is_empty() {
            config.variables = match &config.variable_column {
                Some(col) => {
                    let mut v = data.labels(col)?;
                    v.sort();
                    v.dedup();
                    v
                }
                None => vec![response.clone()],
            };
        }
        if config.times.is_empty() {
            config.times = match &config.time_column {
                Some(col) => {
                    let mut t: Vec<i64> = data
                        .labels(col)?
                        .iter()
                        .map(|c| parse_time(c).ok_or_else(|| Error::Data(format!("time '{c}' is not an integer"))))
                        .collect::<Result<_>>()?;
                    t.sort();
                    t.dedup();
                    t
                }
                None => vec![0],
            };
        }
        let variables = config.variables.clone();
        let times = config.times.clone();
        {
            let mut sorted = variables.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != variables.len() {
                return Err(Error::Data("duplicate entries in variables".into()));
            }
        }

        let default_family: Family = match &config.default_family {
            Some(f) => f.parse()?,
            None => Family::GAUSSIAN,
        };
        for name in config.family.keys() {
            if !variables.contains(name) {
                return Err(Error::Data(format!("family given for unknown variable '{name}'")));
            }
        }
        let families: Vec<Family> = variables
            .iter()
            .map(|v| config.family.get(v).map_or(Ok(default_family), |f| f.parse()))
            .collect::<Result<_>>()?;

        let sem = match &config.sem {
            Some(text) => Some(parse_sem(text, &variables)?),
            None => None,
        };
        let dsem = match &config.dsem {
            Some(text) => Some(parse_dsem(text, &variables)?),
            None => None,
        };
        for ram in sem.iter().chain(dsem.iter()) {
            warnings.extend(ram.warnings.iter().cloned());
        }
        if let Some(d) = &dsem {
            if d.max_lag > 0 && times.len() < d.max_lag + 1 {
                return Err(Error::Data(format!("lag {} needs more than {} times", d.max_lag, times.len())));
            }
        }

        let y = data.numeric(&response)?;
        let n = y.len();
        if n == 0 {
            return Err(Error::Data("data has no rows".into()));
        }
        let rows = bind_rows(&config, &variables, &times, &domain, data)?;
        for (i, &yi) in y.iter().enumerate() {
            families[rows.var_idx[i]]
                .check_response(yi)
                .map_err(|e| Error::Data(format!("row {}: {e}", i + 1)))?;
        }

        // smoother reparameterization: penalized eigen-directions stay random,
        // null-space directions join the fixed effects
        let mut x_cols: Vec<DVector<f64>> = (0..design.x.ncols()).map(|j| design.x.column(j).into_owned()).collect();
        let mut x_names = design.x_names.clone();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for c in &x_cols {
            prune_dependent(&mut basis, c);
        }
        let z_dense = design.z.to_dense();
        let mut smooths = Vec::new();
        let mut zr_cols: Vec<DVector<f64>> = Vec::new();
        for block in &design.smooths {
            let pen = block.penalty.to_dense();
            let eig = SymmetricEigen::new(pen);
            let tol = eig.eigenvalues.max() * 1e-9;
            let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let pen_idx: Vec<usize> = order.iter().copied().filter(|&j| eig.eigenvalues[j] > tol).collect();
            let null_idx: Vec<usize> = order.iter().copied().filter(|&j| eig.eigenvalues[j] <= tol).collect();
            let z_block = z_dense.columns(block.columns.start, block.columns.len()).into_owned();
            let u_pen = DMatrix::from_fn(block.columns.len(), pen_idx.len(), |r, c| eig.eigenvectors[(r, pen_idx[c])]);
            let d_pen: Vec<f64> = pen_idx.iter().map(|&j| eig.eigenvalues[j]).collect();
            let mut kept = Vec::new();
            let mut null_x_columns = Vec::new();
            for (m, &j) in null_idx.iter().enumerate() {
                let v = eig.eigenvectors.column(j).into_owned();
                let col = &z_block * &v;
                if prune_dependent(&mut basis, &col) {
                    null_x_columns.push(x_cols.len());
                    x_cols.push(col);
                    x_names.push(format!("{}:null{}", block.name, m + 1));
                    kept.push(v);
                }
            }
            let u_null = if kept.is_empty() {
                DMatrix::zeros(block.columns.len(), 0)
            } else {
                DMatrix::from_columns(&kept)
            };
            let start = zr_cols.len();
            let zr_block = &z_block * &u_pen;
            zr_cols.extend((0..zr_block.ncols()).map(|j| zr_block.column(j).into_owned()));
            smooths.push(SmoothReparam {
                name: block.name.clone(),
                raw_columns: block.columns.clone(),
                u_pen,
                d_pen,
                u_null,
                null_x_columns,
                b_range: start..zr_cols.len(),
            });
        }
        let x = if x_cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&x_cols)
        };
        let zr = if zr_cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&zr_cols)
        };

        let n_sites = domain.n_nodes();
        let c = variables.len();
        let t = times.len();
        let omega_dim = if sem.is_some() { n_sites * c } else { 0 };
        let eps_dim = if dsem.is_some() { n_sites * c * t } else { 0 };
        let n_b = zr.ncols();
        let omega_projected = sem.as_ref().is_some_and(|r| r.zero_variance_count() > 0);
        let epsilon_projected = dsem.as_ref().is_some_and(|r| r.zero_variance_count() > 0);
        let latent = LatentLayout {
            n_sites,
            omega: 0..omega_dim,
            epsilon: omega_dim..omega_dim + eps_dim,
            smooth: omega_dim + eps_dim..omega_dim + eps_dim + n_b,
            omega_projected,
            epsilon_projected,
        };

        let layout = build_layout(&config, &variables, &families, &rows.var_idx, &y, &x, &x_names, &sem, &dsem, &domain, &smooths)?;

        let mut model = Model {
            config,
            domain,
            variables,
            times,
            families,
            sem,
            dsem,
            design,
            x,
            x_names,
            zr,
            smooths,
            offset: Vec::new(),
            y,
            var_idx: rows.var_idx,
            time_idx: rows.time_idx,
            projectors: rows.projectors,
            row_slots: Vec::new(),
            layout,
            latent,
            warnings,
            patterns: (None, None),
            plan: Arc::new(OnceLock::new()),
        };
        model.offset = model.design.offset.clone();
        model.patterns = model.projection_patterns()?;
        model.row_slots = (0..n).map(|i| model.slots_for(i)).collect();
        model.set_alpha_starts()?;
        Ok(model)
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Structural nonzeros of each projection, one list of columns per row,
    /// from the projection at generic parameter values.
    fn projection_patterns(&self) -> Result<ProjectionPatterns> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let pattern = |ram: &RamModel, n_times: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Vec<usize>>> {
            let theta: Vec<f64> = (0..ram.params.len()).map(|_| rng.random_range(0.2..0.7)).collect();
            let m = assemble_ram(ram, &theta, n_times)?.projection_matrix();
            Ok((0..m.nrows())
                .map(|r| (0..m.ncols()).filter(|&k| m[(r, k)] != 0.0).collect())
                .collect())
        };
        let omega = match (&self.sem, self.latent.omega_projected) {
            (Some(ram), true) => Some(pattern(ram, 1, &mut rng)?),
            _ => None,
        };
        let eps = match (&self.dsem, self.latent.epsilon_projected) {
            (Some(ram), true) => Some(pattern(ram, self.n_times(), &mut rng)?),
            _ => None,
        };
        Ok((omega, eps))
    }

    fn field_slots(&self, var: usize, time: usize, proj: &ProjectorRow) -> Vec<RowSlot> {
        let s_count = self.latent.n_sites;
        let mut slots = Vec::new();
        let blocks = [
            (self.sem.is_some(), LatentBlock::Omega, self.latent.omega.start, var, &self.patterns.0),
            (
                self.dsem.is_some(),
                LatentBlock::Epsilon,
                self.latent.epsilon.start,
                time * self.n_vars() + var,
                &self.patterns.1,
            ),
        ];
        for (present, block, start, inner, pattern) in blocks {
            if !present {
                continue;
            }
            for &(s, w) in &proj.entries {
                match pattern {
                    None => slots.push(RowSlot {
                        u: start + inner * s_count + s,
                        w,
                        proj: None,
                    }),
                    Some(p) => slots.extend(p[inner].iter().map(|&k| RowSlot {
                        u: start + k * s_count + s,
                        w,
                        proj: Some((block, inner, k)),
                    })),
                }
            }
        }
        slots
    }

    fn slots_for(&self, row: usize) -> Vec<RowSlot> {
        let mut slots = self.field_slots(self.var_idx[row], self.time_idx[row], &self.projectors[row]);
        for j in 0..self.zr.ncols() {
            slots.push(RowSlot {
                u: self.latent.smooth.start + j,
                w: self.zr[(row, j)],
                proj: None,
            });
        }
        slots.sort_by_key(|s| s.u);
        slots
    }

    /// Field slots for a new row; smoother terms are handled by the caller.
    pub(crate) fn slots_for_new(&self, var: usize, time: usize, proj: &ProjectorRow) -> Vec<RowSlot> {
        let mut slots = self.field_slots(var, time, proj);
        slots.sort_by_key(|s| s.u);
        slots
    }

    /// Family-appropriate moment start for α: least squares of the
    /// link-transformed per-variable means on the fixed design.
    fn set_alpha_starts(&mut self) -> Result<()> {
        let c = self.n_vars();
        let mut sums = vec![0.0; c];
        let mut counts = vec![0usize; c];
        for (i, &y) in self.y.iter().enumerate() {
            sums[self.var_idx[i]] += y;
            counts[self.var_idx[i]] += 1;
        }
        let target: Vec<f64> = (0..c)
            .map(|v| {
                let mean = if counts[v] > 0 { sums[v] / counts[v] as f64 } else { 0.0 };
                let fam = self.families[v];
                let mean = match (fam.dist, fam.link) {
                    (Distribution::Bernoulli, _) => mean.clamp(0.01, 0.99),
                    (_, Link::Log) => mean.max(0.1),
                    _ => mean,
                };
                fam.link(mean)
            })
            .collect();
        if self.x.ncols() == 0 {
            return Ok(());
        }
        let z = DVector::from_fn(self.n_rows(), |i, _| target[self.var_idx[i]] - self.offset[i]);
        let sol = self
            .x
            .clone()
            .svd(true, true)
            .solve(&z, 1e-10)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        for e in self.layout.entries.iter_mut() {
            if let ParamKind::Alpha(j) = e.kind {
                if !self.config.start.contains_key(&e.name) {
                    e.start = sol[j];
                }
            }
        }
        Ok(())
    }

    pub fn params(&self, values: &[f64]) -> Params {
        let mut p = Params {
            alpha: vec![0.0; self.x.ncols()],
            sem: self.sem.as_ref().map_or(Vec::new(), |r| vec![0.0; r.params.len()]),
            dsem: self.dsem.as_ref().map_or(Vec::new(), |r| vec![0.0; r.params.len()]),
            spatial: None,
            dispersion: vec![f64::NAN; self.n_vars()],
            lambda: vec![1.0; self.smooths.len()],
        };
        for (e, &v) in self.layout.entries.iter().zip(values) {
            match e.kind {
                ParamKind::Alpha(j) => p.alpha[j] = v,
                ParamKind::Sem(j) => p.sem[j] = v,
                ParamKind::Dsem(j) => p.dsem[j] = v,
                ParamKind::Spatial => p.spatial = Some(v),
                ParamKind::Dispersion(c) => p.dispersion[c] = v,
                ParamKind::Lambda(z) => p.lambda[z] = v,
            }
        }
        p
    }

    pub fn params_from_phi(&self, phi: &[f64]) -> Params {
        self.params(&self.layout.expand(phi))
    }

    /// Resolves variable/time/site columns of `data` against this model.
    pub(crate) fn bind(&self, data: &DataTable) -> Result<RowBindings> {
        bind_rows(&self.config, &self.variables, &self.times, &self.domain, data)
    }
}

pub(crate) fn bind_rows(
    config: &ModelConfig,
    variables: &[String],
    times: &[i64],
    domain: &SpatialDomain,
    data: &DataTable,
) -> Result<RowBindings> {
    let n = data.n_rows();
    let var_idx: Vec<usize> = match &config.variable_column {
        Some(col) => data
            .labels(col)?
            .iter()
            .enumerate()
            .map(|(i, v)| {
                variables
                    .iter()
                    .position(|x| x == v)
                    .ok_or_else(|| Error::Data(format!("row {}: variable '{v}' not declared", i + 1)))
            })
            .collect::<Result<_>>()?,
        None if variables.len() == 1 => vec![0; n],
        None => return Err(Error::Data("several variables declared but no variable_column".into())),
    };
    let time_idx: Vec<usize> = match &config.time_column {
        Some(col) => data
            .labels(col)?
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                parse_time(cell)
                    .and_then(|t| times.iter().position(|&x| x == t))
                    .ok_or_else(|| Error::Data(format!("row {}: time '{cell}' not declared", i + 1)))
            })
            .collect::<Result<_>>()?,
        None if times.len() == 1 => vec![0; n],
        None => return Err(Error::Data("several times declared but no time_column".into())),
    };
    let sites: Vec<SiteLocation> = match domain {
        SpatialDomain::SingleSite => vec![SiteLocation::Anywhere; n],
        SpatialDomain::Mesh(_) => match &config.space_columns[..] {
            [xc, yc] => {
                let xs = data.numeric(xc)?;
                let ys = data.numeric(yc)?;
                xs.into_iter().zip(ys).map(|(x, y)| SiteLocation::Point(x, y)).collect()
            }
            _ => return Err(Error::Data("mesh domains need two space_columns".into())),
        },
        _ => match &config.space_columns[..] {
            [nc] => data
                .numeric(nc)?
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(SiteLocation::Node(v as usize))
                    } else {
                        Err(Error::Data(format!("row {}: node id {v} is not a nonnegative integer", i + 1)))
                    }
                })
                .collect::<Result<_>>()?,
            _ => return Err(Error::Data("graph domains need one space column (node id)".into())),
        },
    };
    let projectors = domain.make_projector(&sites)?;
    Ok(RowBindings {
        var_idx,
        time_idx,
        projectors,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_layout(
    config: &ModelConfig,
    variables: &[String],
    families: &[Family],
    var_idx: &[usize],
    y: &[f64],
    x: &DMatrix<f64>,
    x_names: &[String],
    sem: &Option<RamModel>,
    dsem: &Option<RamModel>,
    domain: &SpatialDomain,
    smooths: &[SmoothReparam],
) -> Result<ParameterLayout> {
    let mut entries = Vec::new();
    for (j, name) in x_names.iter().enumerate().take(x.ncols()) {
        entries.push(ParamEntry {
            name: format!("alpha:{name}"),
            kind: ParamKind::Alpha(j),
            transform: Transform::Identity,
            start: 0.0,
            fixed: None,
        });
    }
    for (prefix, ram, make) in [
        ("sem", sem, ParamKind::Sem as fn(usize) -> ParamKind),
        ("dsem", dsem, ParamKind::Dsem as fn(usize) -> ParamKind),
    ] {
        let Some(ram) = ram else { continue };
        for (p, param) in ram.params.iter().enumerate() {
            let name = format!("{prefix}:{}", param.label);
            let transform = if config.bounded.contains(&name) {
                Transform::ScaledLogit
            } else if ram.is_scale_param(p) {
                Transform::Log
            } else {
                Transform::Identity
            };
            let start = match transform {
                Transform::Log => param.start.abs().max(1e-3),
                Transform::ScaledLogit => param.start.clamp(-0.9, 0.9),
                Transform::Identity => param.start,
            };
            entries.push(ParamEntry {
                name,
                kind: make(p),
                transform,
                start,
                fixed: None,
            });
        }
    }
    if (sem.is_some() || dsem.is_some()) && !matches!(domain, SpatialDomain::SingleSite) {
        let kind = domain.param().expect("non-single-site domains carry a parameter");
        let (transform, start) = match (kind, domain) {
            (SpatialParam::Kappa, SpatialDomain::Mesh(m)) => {
                let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for v in m.vertices() {
                    for d in 0..2 {
                        lo[d] = lo[d].min(v[d]);
                        hi[d] = hi[d].max(v[d]);
                    }
                }
                let diam = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt();
                (Transform::Log, 8f64.sqrt() / (0.5 * diam))
            }
            (SpatialParam::Theta, SpatialDomain::Stream(s)) => {
                let d: Vec<f64> = s.distance().iter().zip(s.parent()).filter(|(_, p)| p.is_some()).map(|(d, _)| *d).collect();
                let mean = if d.is_empty() { 1.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
                (Transform::Log, 1.0 / mean)
            }
            _ => (Transform::ScaledLogit, 0.0),
        };
        entries.push(ParamEntry {
            name: format!("spatial:{}", kind.name()),
            kind: ParamKind::Spatial,
            transform,
            start,
            fixed: None,
        });
    }
    for (c, fam) in families.iter().enumerate() {
        let ys: Vec<f64> = y.iter().zip(var_idx).filter(|(_, &v)| v == c).map(|(y, _)| *y).collect();
        if !fam.has_dispersion() || ys.is_empty() {
            continue;
        }
        let start = match fam.dist {
            Distribution::Gaussian => {
                let m = ys.iter().sum::<f64>() / ys.len() as f64;
                let sd = (ys.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            }
            _ => 1.0,
        };
        entries.push(ParamEntry {
            name: format!("dispersion:{}", variables[c]),
            kind: ParamKind::Dispersion(c),
            transform: Transform::Log,
            start,
            fixed: None,
        });
    }
    for (z, s) in smooths.iter().enumerate() {
        entries.push(ParamEntry {
            name: format!("lambda:{}", s.name),
            kind: ParamKind::Lambda(z),
            transform: Transform::Log,
            start: 1.0,
            fixed: None,
        });
    }
    for (name, &v) in &config.start {
        let e = entries
            .iter_mut()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Parameter(format!("start given for unknown parameter '{name}'")))?;
        e.start = v;
    }
    for (name, &v) in &config.fixed {
        let e = entries
            .iter_mut()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter '{name}' in fixed")))?;
        e.fixed = Some(v);
    }
    for name in &config.bounded {
        if !entries.iter().any(|e| &e.name == name) {
            return Err(Error::Parameter(format!("unknown parameter '{name}' in bounded")));
        }
    }
    let free = (0..entries.len()).filter(|&i| entries[i].fixed.is_none()).collect();
    Ok(ParameterLayout { entries, free })
}
