//! Outer estimation, prediction, residuals, integrated indices and
//! simulation from a parameterized model.

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::gmrf::{gmrf_sample, InnerStructure};
use crate::laplace::{laplace_marginal, LaplaceFit, LatentPrior};
use crate::model::{Model, Params, RowSlot, Transform};
use crate::optim::{fd_hessian, minimize_bfgs, BfgsOptions, Objective};
use crate::ram::assemble_ram;
use crate::spatial::ProjectorRow;

/// Laplace marginal as a function of the free unconstrained parameters.
///
/// Inner solves start from the mode at the last accepted iterate, so a
/// value depends only on the point and the accepted path.
pub struct MarginalObjective<'a> {
    model: &'a Model,
    anchor: Mutex<Vec<f64>>,
}

impl<'a> MarginalObjective<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self {
            model,
            anchor: Mutex::new(Vec::new()),
        }
    }

    pub fn laplace(&self, phi: &[f64]) -> Result<LaplaceFit> {
        let warm = self.anchor.lock().expect("anchor lock").clone();
        let params = self.model.params_from_phi(phi);
        laplace_marginal(self.model, &params, (!warm.is_empty()).then_some(warm.as_slice()))
    }
}

impl Objective for MarginalObjective<'_> {
    fn value(&self, phi: &[f64]) -> Result<f64> {
        self.laplace(phi).map(|l| l.value)
    }

    fn accept(&self, phi: &[f64]) {
        if let Ok(l) = self.laplace(phi) {
            *self.anchor.lock().expect("anchor lock") = l.mode;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub bfgs: BfgsOptions,
    pub compute_se: bool,
    pub hessian_rel_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            bfgs: BfgsOptions::default(),
            compute_se: true,
            hessian_rel_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Convergence {
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    pub message: String,
    pub inner_converged: bool,
    pub hessian_pd: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// One entry per layout parameter, estimated or fixed.
    pub names: Vec<String>,
    pub transforms: Vec<Transform>,
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
    pub estimated: Vec<bool>,
    pub phi: Vec<f64>,
    pub cov_phi: Option<DMatrix<f64>>,
    pub log_lik: f64,
    pub aic: f64,
    pub k: usize,
    pub convergence: Convergence,
    pub params: Params,
    pub laplace: LaplaceFit,
}

impl FitResult {
    pub fn mode(&self) -> &[f64] {
        &self.laplace.mode
    }

    pub fn estimate(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.estimates[i], self.se[i]))
    }
}

pub fn fit(model: &Model, options: &FitOptions) -> Result<FitResult> {
    let objective = MarginalObjective::new(model);
    let phi0 = model.layout.start_unconstrained()?;
    let opt = minimize_bfgs(&objective, &phi0, &options.bfgs)?;
    objective.accept(&opt.x);
    let laplace = objective.laplace(&opt.x)?;
    let k = model.layout.n_free();

    let mut cov_phi = None;
    let mut hessian_pd = None;
    if options.compute_se && k > 0 {
        let h = fd_hessian(&objective, &opt.x, options.hessian_rel_step)?;
        let sym = 0.5 * (&h + h.transpose());
        match sym.cholesky() {
            Some(ch) => {
                cov_phi = Some(ch.inverse());
                hessian_pd = Some(true);
            }
            None => hessian_pd = Some(false),
        }
    }
    let convergence = Convergence {
        converged: opt.converged && laplace.converged,
        grad_norm: opt.grad_norm,
        iterations: opt.iterations,
        message: opt.message,
        inner_converged: laplace.converged,
        hessian_pd,
    };
    Ok(assemble_fit(model, opt.x, cov_phi, laplace, convergence))
}

/// Rebuilds a fit from saved unconstrained estimates and their covariance.
pub fn fit_from_state(model: &Model, phi: Vec<f64>, cov_phi: Option<DMatrix<f64>>) -> Result<FitResult> {
    if phi.len() != model.layout.n_free() {
        return Err(Error::Parameter(format!(
            "{} estimates saved but the model has {} free parameters",
            phi.len(),
            model.layout.n_free()
        )));
    }
    let laplace = laplace_marginal(model, &model.params_from_phi(&phi), None)?;
    let convergence = Convergence {
        converged: laplace.converged,
        grad_norm: f64::NAN,
        iterations: 0,
        message: "restored".into(),
        inner_converged: laplace.converged,
        hessian_pd: cov_phi.as_ref().map(|_| true),
    };
    Ok(assemble_fit(model, phi, cov_phi, laplace, convergence))
}

fn assemble_fit(
    model: &Model,
    phi: Vec<f64>,
    cov_phi: Option<DMatrix<f64>>,
    laplace: LaplaceFit,
    convergence: Convergence,
) -> FitResult {
    let values = model.layout.expand(&phi);
    let k = model.layout.n_free();
    let entries = &model.layout.entries;
    let mut se = vec![0.0; entries.len()];
    let mut estimated = vec![false; entries.len()];
    for (pos, &i) in model.layout.free_indices().iter().enumerate() {
        estimated[i] = true;
        se[i] = match &cov_phi {
            Some(cov) => entries[i].transform.derivative(phi[pos]).abs() * cov[(pos, pos)].max(0.0).sqrt(),
            None => f64::NAN,
        };
    }
    let log_lik = -laplace.value;
    FitResult {
        names: entries.iter().map(|e| e.name.clone()).collect(),
        transforms: entries.iter().map(|e| e.transform).collect(),
        params: model.params(&values),
        estimates: values,
        se,
        estimated,
        phi,
        cov_phi,
        log_lik,
        aic: -2.0 * log_lik + 2.0 * k as f64,
        k,
        convergence,
        laplace,
    }
}

/// Design of rows not necessarily seen in training.
#[derive(Debug, Clone)]
pub struct RowDesign {
    pub x: DMatrix<f64>,
    pub zr: DMatrix<f64>,
    pub offset: Vec<f64>,
    pub var_idx: Vec<usize>,
    pub time_idx: Vec<usize>,
    pub projectors: Vec<ProjectorRow>,
}

impl RowDesign {
    pub fn new(model: &Model, data: &DataTable) -> Result<Self> {
        let (x_raw, z, offset) = model.design.recipe.apply(data)?;
        let n = data.n_rows();
        let z = z.to_dense();
        let mut x = DMatrix::zeros(n, model.x.ncols());
        x.columns_mut(0, x_raw.ncols()).copy_from(&x_raw);
        let mut zr = DMatrix::zeros(n, model.zr.ncols());
        for sm in &model.smooths {
            let block = z.columns(sm.raw_columns.start, sm.raw_columns.len());
            let pen = block * &sm.u_pen;
            zr.columns_mut(sm.b_range.start, sm.b_range.len()).copy_from(&pen);
            let null = block * &sm.u_null;
            for (m, &col) in sm.null_x_columns.iter().enumerate() {
                x.column_mut(col).copy_from(&null.column(m));
            }
        }
        let rows = model.bind(data)?;
        Ok(Self {
            x,
            zr,
            offset,
            var_idx: rows.var_idx,
            time_idx: rows.time_idx,
            projectors: rows.projectors,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.offset.len()
    }

    fn field_slots(&self, model: &Model, i: usize) -> Vec<RowSlot> {
        model.slots_for_new(self.var_idx[i], self.time_idx[i], &self.projectors[i])
    }
}

/// The additive pieces of one linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Components {
    pub fixed: f64,
    pub smooth: f64,
    pub omega: f64,
    pub epsilon: f64,
    pub offset: f64,
}

impl Components {
    pub fn link(&self) -> f64 {
        self.fixed + self.smooth + self.omega + self.epsilon + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub variable: usize,
    pub link: f64,
    pub response: f64,
    pub components: Components,
}

fn row_components(model: &Model, prior: &LatentPrior, params: &Params, u: &[f64], rows: &RowDesign, i: usize) -> Components {
    let mut c = Components {
        offset: rows.offset[i],
        ..Default::default()
    };
    c.fixed = (0..rows.x.ncols()).map(|j| rows.x[(i, j)] * params.alpha[j]).sum();
    let smooth_u = &u[model.latent.smooth.clone()];
    c.smooth = (0..rows.zr.ncols()).map(|j| rows.zr[(i, j)] * smooth_u[j]).sum();
    for slot in rows.field_slots(model, i) {
        let v = prior.slot_value(&slot) * u[slot.u];
        if model.latent.omega.contains(&slot.u) {
            c.omega += v;
        } else {
            c.epsilon += v;
        }
    }
    c
}

/// Latent design row `a` with `η = … + a·u` for row `i`.
fn latent_row(model: &Model, prior: &LatentPrior, rows: &RowDesign, i: usize) -> Vec<(usize, f64)> {
    let mut a: Vec<(usize, f64)> = rows
        .field_slots(model, i)
        .iter()
        .map(|s| (s.u, prior.slot_value(s)))
        .collect();
    let start = model.latent.smooth.start;
    a.extend((0..rows.zr.ncols()).map(|j| (start + j, rows.zr[(i, j)])));
    a
}

pub fn predict_rows(model: &Model, fit: &FitResult, rows: &RowDesign) -> Vec<Prediction> {
    (0..rows.n_rows())
        .map(|i| {
            let components = row_components(model, &fit.laplace.prior, &fit.params, fit.mode(), rows, i);
            let link = components.link();
            let v = rows.var_idx[i];
            Prediction {
                variable: v,
                link,
                response: model.families[v].inv_link(link),
                components,
            }
        })
        .collect()
}

/// Predictions for every row of `data`; rows that cannot be placed in the
/// domain get their own error.
pub fn predict(model: &Model, fit: &FitResult, data: &DataTable) -> Result<Vec<Result<Prediction>>> {
    match RowDesign::new(model, data) {
        Ok(rows) => Ok(predict_rows(model, fit, &rows).into_iter().map(Ok).collect()),
        Err(Error::OutsideMesh { .. }) => Ok((0..data.n_rows())
            .map(|i| {
                let rows = RowDesign::new(model, &data.select_rows(&[i])).map_err(|e| match e {
                    Error::OutsideMesh { x, y, .. } => Error::OutsideMesh { sample: i, x, y },
                    other => other,
                })?;
                Ok(predict_rows(model, fit, &rows)[0])
            })
            .collect()),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    Response,
    Deviance,
}

pub fn fitted_mean(model: &Model, fit: &FitResult) -> Vec<f64> {
    let eta = crate::laplace::training_eta(model, &fit.params, &fit.laplace.prior, fit.mode());
    eta.iter()
        .zip(&model.var_idx)
        .map(|(&e, &v)| model.families[v].inv_link(e))
        .collect()
}

pub fn residuals(model: &Model, fit: &FitResult, kind: ResidualKind) -> Vec<f64> {
    let mu = fitted_mean(model, fit);
    (0..model.n_rows())
        .map(|i| {
            let v = model.var_idx[i];
            match kind {
                ResidualKind::Response => model.y[i] - mu[i],
                ResidualKind::Deviance => {
                    model.families[v].deviance_residual(model.y[i], mu[i], fit.params.dispersion[v])
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexEstimate {
    pub estimate: f64,
    pub se: f64,
    /// Always false: only the plug-in estimator is provided.
    pub bias_corrected: bool,
}

fn plug_in(model: &Model, params: &Params, prior: &LatentPrior, u: &[f64], rows: &RowDesign, w: &[f64]) -> f64 {
    (0..rows.n_rows())
        .map(|i| {
            let eta = row_components(model, prior, params, u, rows, i).link();
            w[i] * model.families[rows.var_idx[i]].inv_link(eta)
        })
        .sum()
}

/// `Σ_g w_g g⁻¹(η̂_g)` with a delta-method standard error combining the
/// outer covariance (through the mode's dependence on the parameters) and
/// the conditional covariance `H⁻¹` of the random effects.
pub fn integrate_output(model: &Model, fit: &FitResult, rows: &RowDesign, weights: &[f64]) -> Result<IndexEstimate> {
    if weights.len() != rows.n_rows() {
        return Err(Error::Dimension("one weight per grid row is required".into()));
    }
    let prior = &fit.laplace.prior;
    let estimate = plug_in(model, &fit.params, prior, fit.mode(), rows, weights);

    let mut var = 0.0;
    if let Some(cov) = &fit.cov_phi {
        let k = fit.phi.len();
        let grad: Vec<f64> = (0..k)
            .into_par_iter()
            .map(|j| -> Result<f64> {
                let h = crate::optim::fd_step(fit.phi[j], 1e-5);
                let at = |s: f64| -> Result<f64> {
                    let mut phi = fit.phi.clone();
                    phi[j] += s * h;
                    let params = model.params_from_phi(&phi);
                    let lap = laplace_marginal(model, &params, Some(fit.mode()))?;
                    Ok(plug_in(model, &params, &lap.prior, &lap.mode, rows, weights))
                };
                Ok((at(1.0)? - at(-1.0)?) / (2.0 * h))
            })
            .collect::<Result<_>>()?;
        let g = DVector::from_vec(grad);
        var += (g.transpose() * cov * &g)[(0, 0)];
    }
    if !fit.mode().is_empty() {
        let mut gu = vec![0.0; fit.mode().len()];
        for (i, w) in weights.iter().enumerate() {
            let eta = row_components(model, prior, &fit.params, fit.mode(), rows, i).link();
            let dmu = w * model.families[rows.var_idx[i]].inv_link_derivative(eta);
            for (u, a) in latent_row(model, prior, rows, i) {
                gu[u] += dmu * a;
            }
        }
        if gu.iter().any(|&v| v != 0.0) {
            var += fit.laplace.hessian.cholesky()?.inv_quad_form(&gu);
        }
    }
    Ok(IndexEstimate {
        estimate,
        se: var.max(0.0).sqrt(),
        bias_corrected: false,
    })
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub y: Vec<f64>,
    pub eta: Vec<f64>,
    /// Latent vector in the model's own coordinates.
    pub u: Vec<f64>,
}

/// Draws random effects from their prior and responses from each row's
/// family. Zero variances in `params` give degenerate but valid draws.
pub fn simulate<R: Rng + ?Sized>(model: &Model, params: &Params, rows: &RowDesign, rng: &mut R) -> Result<Simulated> {
    let mut u = vec![0.0; model.latent.dim()];
    let needs_spatial = model.sem.is_some() || model.dsem.is_some();
    let qs = if needs_spatial {
        Some(model.domain.precision(params.spatial.unwrap_or(f64::NAN))?)
    } else {
        None
    };
    let mut omega_m = None;
    let mut eps_m = None;
    for (ram, theta, n_times, range, projected, slot) in [
        (&model.sem, &params.sem, 1, model.latent.omega.clone(), model.latent.omega_projected, &mut omega_m),
        (&model.dsem, &params.dsem, model.n_times(), model.latent.epsilon.clone(), model.latent.epsilon_projected, &mut eps_m),
    ] {
        let Some(ram) = ram else { continue };
        let m = assemble_ram(ram, theta, n_times)?;
        let white = gmrf_sample(&InnerStructure::Projected(m.clone()), qs.as_ref().expect("spatial"), rng)?;
        let values = if projected {
            *slot = Some(m.projection_matrix());
            white
        } else {
            m.project(&white.transpose())?.transpose()
        };
        u[range].copy_from_slice(values.as_slice());
    }
    for (z, sm) in model.smooths.iter().enumerate() {
        for (j, &d) in sm.d_pen.iter().enumerate() {
            let sd = (params.lambda[z] * d).recip().sqrt();
            let draw: f64 = rng.sample(rand_distr::StandardNormal);
            u[model.latent.smooth.start + sm.b_range.start + j] = sd * draw;
        }
    }
    let prior = LatentPrior::projection_only(omega_m, eps_m);
    let mut y = Vec::with_capacity(rows.n_rows());
    let mut eta = Vec::with_capacity(rows.n_rows());
    for i in 0..rows.n_rows() {
        let e = row_components(model, &prior, params, &u, rows, i).link();
        let v = rows.var_idx[i];
        let fam = model.families[v];
        let disp = params.dispersion[v];
        if fam.has_dispersion() && disp.is_nan() {
            return Err(Error::Parameter(format!("dispersion of '{}' is needed to simulate", model.variables[v])));
        }
        y.push(fam.sample(fam.inv_link(e), disp, rng)?);
        eta.push(e);
    }
    Ok(Simulated { y, eta, u })
}
