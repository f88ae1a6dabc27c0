//! Joint negative log-likelihood and its Laplace approximation.
//!
//! The inner problem minimizes
//! `f(u) = Σ_i -log f_i(y_i | η_i(u)) + ½ uᵀ Q u` by damped Newton steps;
//! the Hessian `Q + Aᵀ W A` is assembled into a sparsity pattern fixed per
//! model so the symbolic Cholesky analysis is done once.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::cholesky::SymbolicCholesky;
use crate::error::{Error, Result};
use crate::model::{LatentBlock, Model, Params};
use crate::ram::{assemble_ram, precision_factor, precision_from_ram};
use crate::sparse::{CscMatrix, SparseSymMatrix};

const LN_2PI: f64 = 1.8378770664093453;
pub const INNER_TOL: f64 = 1e-8;
pub const INNER_MAX_ITER: usize = 100;
const DECREMENT_TOL: f64 = 1e-6;
const BARRIER: f64 = 1e300;

/// Block-diagonal prior precision of `u` at one parameter vector, plus the
/// numeric values of every sample's latent design row.
#[derive(Debug, Clone)]
pub struct LatentPrior {
    pub q: CscMatrix,
    /// Entries of `q` not covered by `factored`.
    q_rest: CscMatrix,
    /// `(start, B)` for Kronecker blocks `BᵀB ⊗ Q_spatial`. Evaluating the
    /// quadratic form through `B` avoids the cancellation that `BᵀB` suffers
    /// when an exogenous SD is tiny.
    factored: Vec<(usize, CscMatrix)>,
    pub logdet: f64,
    pub q_spatial: Option<SparseSymMatrix>,
    pub q_sem: Option<SparseSymMatrix>,
    pub q_dsem: Option<SparseSymMatrix>,
    pub omega_m: Option<DMatrix<f64>>,
    pub eps_m: Option<DMatrix<f64>>,
    pub row_values: Vec<Vec<f64>>,
}

impl LatentPrior {
    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// Carries only the projections, for mapping simulated white fields.
    pub(crate) fn projection_only(omega_m: Option<DMatrix<f64>>, eps_m: Option<DMatrix<f64>>) -> Self {
        Self {
            q: CscMatrix::zeros(0, 0),
            q_rest: CscMatrix::zeros(0, 0),
            factored: Vec::new(),
            logdet: 0.0,
            q_spatial: None,
            q_sem: None,
            q_dsem: None,
            omega_m,
            eps_m,
            row_values: Vec::new(),
        }
    }

    /// `Q u` and `uᵀ Q u`.
    pub fn apply(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let mut qu = self.q_rest.mul_vec(u);
        let mut total: f64 = qu.iter().zip(u).map(|(a, b)| a * b).sum();
        for (start, b) in &self.factored {
            let qs = self.q_spatial.as_ref().expect("factored blocks carry a field");
            let s = qs.dim();
            let mut v = vec![0.0; b.nrows() * s];
            for (j, k, w) in b.triplets() {
                let src = &u[start + k * s..start + (k + 1) * s];
                v[j * s..(j + 1) * s].iter_mut().zip(src).for_each(|(a, x)| *a += w * x);
            }
            let qv: Vec<f64> = v.chunks(s).flat_map(|col| qs.matrix().mul_vec(col)).collect();
            total += qv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            for (j, k, w) in b.triplets() {
                let src = &qv[j * s..(j + 1) * s];
                qu[start + k * s..start + (k + 1) * s].iter_mut().zip(src).for_each(|(a, x)| *a += w * x);
            }
        }
        (qu, total)
    }

    /// `uᵀ Q u`.
    pub fn quadratic(&self, u: &[f64]) -> f64 {
        self.apply(u).1
    }

    pub(crate) fn slot_value(&self, slot: &crate::model::RowSlot) -> f64 {
        match slot.proj {
            None => slot.w,
            Some((LatentBlock::Omega, r, k)) => slot.w * self.omega_m.as_ref().expect("projected")[(r, k)],
            Some((LatentBlock::Epsilon, r, k)) => slot.w * self.eps_m.as_ref().expect("projected")[(r, k)],
        }
    }
}

pub fn build_prior(model: &Model, params: &Params) -> Result<LatentPrior> {
    let s = model.latent.n_sites;
    let c = model.n_vars();
    let n = model.latent.dim();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut logdet = 0.0;
    let has_field = model.sem.is_some() || model.dsem.is_some();
    let q_spatial = if has_field {
        let param = params.spatial.unwrap_or(f64::NAN);
        let mut qs = model.domain.precision(param)?;
        if let Some(plan) = model.plan.get().and_then(|p| p.as_ref()) {
            if let Some(sym) = &plan.spatial_symbolic {
                qs = qs.with_symbolic(sym.clone());
            }
        }
        Some(qs)
    } else {
        None
    };
    let mut rest: Vec<(usize, usize, f64)> = Vec::new();
    let mut factored = Vec::new();
    let mut push_block = |start: usize, q: &CscMatrix, plain: bool| {
        triplets.extend(q.triplets().map(|(r, c, v)| (start + r, start + c, v)));
        if plain {
            rest.extend(q.triplets().map(|(r, c, v)| (start + r, start + c, v)));
        }
    };

    let mut q_sem = None;
    let mut omega_m = None;
    if let Some(ram) = &model.sem {
        let qs = q_spatial.as_ref().expect("field implies spatial precision");
        let m = assemble_ram(ram, &params.sem, 1)?;
        let ld_s = qs.logdet()?;
        if model.latent.omega_projected {
            let block = CscMatrix::identity(c).kron(qs.matrix());
            push_block(model.latent.omega.start, &block, true);
            logdet += c as f64 * ld_s;
            omega_m = Some(m.projection_matrix());
        } else {
            let qi = precision_from_ram(&m)?;
            logdet += s as f64 * qi.logdet()? + c as f64 * ld_s;
            push_block(model.latent.omega.start, &qi.matrix().kron(qs.matrix()), false);
            factored.push((model.latent.omega.start, precision_factor(&m)?));
            q_sem = Some(qi);
        }
    }
    let mut q_dsem = None;
    let mut eps_m = None;
    if let Some(ram) = &model.dsem {
        let qs = q_spatial.as_ref().expect("field implies spatial precision");
        let t = model.n_times();
        let m = assemble_ram(ram, &params.dsem, t)?;
        let ld_s = qs.logdet()?;
        if model.latent.epsilon_projected {
            let block = CscMatrix::identity(c * t).kron(qs.matrix());
            push_block(model.latent.epsilon.start, &block, true);
            logdet += (c * t) as f64 * ld_s;
            eps_m = Some(m.projection_matrix());
        } else {
            let qi = precision_from_ram(&m)?;
            logdet += s as f64 * qi.logdet()? + (c * t) as f64 * ld_s;
            push_block(model.latent.epsilon.start, &qi.matrix().kron(qs.matrix()), false);
            factored.push((model.latent.epsilon.start, precision_factor(&m)?));
            q_dsem = Some(qi);
        }
    }
    for (z, sm) in model.smooths.iter().enumerate() {
        let lambda = params.lambda[z];
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!("smoothing parameter of {} must be positive", sm.name)));
        }
        for (j, &d) in sm.d_pen.iter().enumerate() {
            let idx = model.latent.smooth.start + sm.b_range.start + j;
            triplets.push((idx, idx, lambda * d));
            rest.push((idx, idx, lambda * d));
            logdet += (lambda * d).ln();
        }
    }
    let q = CscMatrix::from_triplets(n, n, &triplets);
    let q_rest = CscMatrix::from_triplets(n, n, &rest);
    let mut prior = LatentPrior {
        q,
        q_rest,
        factored,
        logdet,
        q_spatial,
        q_sem,
        q_dsem,
        omega_m,
        eps_m,
        row_values: Vec::new(),
    };
    prior.row_values = model
        .row_slots
        .iter()
        .map(|slots| slots.iter().map(|sl| prior.slot_value(sl)).collect())
        .collect();
    Ok(prior)
}

/// Sparsity pattern of the inner Hessian with positions of every prior
/// entry and every per-sample outer product.
#[derive(Debug)]
pub struct HessianPlan {
    pattern: CscMatrix,
    symbolic: Arc<SymbolicCholesky>,
    row_pos: Vec<Vec<usize>>,
    diag_pos: Vec<usize>,
    pub(crate) spatial_symbolic: Option<Arc<SymbolicCholesky>>,
}

impl HessianPlan {
    fn new(model: &Model, prior: &LatentPrior) -> Result<Self> {
        let n = prior.dim();
        let mut triplets: Vec<(usize, usize, f64)> = prior.q.triplets().map(|(r, c, _)| (r, c, 0.0)).collect();
        for i in 0..n {
            triplets.push((i, i, 0.0));
        }
        for slots in &model.row_slots {
            for a in slots {
                for b in slots {
                    triplets.push((a.u, b.u, 0.0));
                }
            }
        }
        let pattern = CscMatrix::from_triplets(n, n, &triplets);
        let row_pos = model
            .row_slots
            .iter()
            .map(|slots| {
                let mut pos = Vec::with_capacity(slots.len() * slots.len());
                for a in slots {
                    for b in slots {
                        pos.push(pattern.find(a.u, b.u).expect("pattern contains outer products"));
                    }
                }
                pos
            })
            .collect();
        let diag_pos = (0..n).map(|i| pattern.find(i, i).expect("diagonal present")).collect();
        let symbolic = SymbolicCholesky::analyze(&pattern)?;
        let spatial_symbolic = match &prior.q_spatial {
            Some(qs) => Some(SymbolicCholesky::analyze(qs.matrix())?),
            None => None,
        };
        Ok(Self {
            pattern,
            symbolic,
            row_pos,
            diag_pos,
            spatial_symbolic,
        })
    }

    fn prior_positions(&self, q: &CscMatrix) -> Option<Vec<usize>> {
        q.triplets().map(|(r, c, _)| self.pattern.find(r, c)).collect()
    }
}

struct Inner<'a> {
    model: &'a Model,
    prior: &'a LatentPrior,
    base_eta: Vec<f64>,
    disp: Vec<f64>,
}

struct InnerEval {
    f: f64,
    grad: Vec<f64>,
    w: Vec<f64>,
}

impl<'a> Inner<'a> {
    fn new(model: &'a Model, prior: &'a LatentPrior, params: &Params) -> Self {
        let base_eta = (0..model.n_rows())
            .map(|i| {
                let mut eta = model.offset[i];
                for (j, a) in params.alpha.iter().enumerate() {
                    eta += model.x[(i, j)] * a;
                }
                eta
            })
            .collect();
        let disp = model.var_idx.iter().map(|&c| params.dispersion[c]).collect();
        Self {
            model,
            prior,
            base_eta,
            disp,
        }
    }

    fn eta(&self, u: &[f64]) -> Vec<f64> {
        self.model
            .row_slots
            .iter()
            .zip(&self.prior.row_values)
            .zip(&self.base_eta)
            .map(|((slots, vals), &b)| b + slots.iter().zip(vals).map(|(s, v)| v * u[s.u]).sum::<f64>())
            .collect()
    }

    fn data_nll(&self, eta: &[f64]) -> f64 {
        let m = self.model;
        (0..m.n_rows())
            .map(|i| m.families[m.var_idx[i]].nll(m.y[i], eta[i], self.disp[i]))
            .sum()
    }

    fn value(&self, u: &[f64]) -> f64 {
        let f = self.data_nll(&self.eta(u)) + 0.5 * self.prior.quadratic(u);
        if f.is_finite() {
            f
        } else {
            f64::INFINITY
        }
    }

    fn eval(&self, u: &[f64]) -> InnerEval {
        let m = self.model;
        let eta = self.eta(u);
        let (qu, quadratic) = self.prior.apply(u);
        let mut f = 0.5 * quadratic;
        let mut grad = qu;
        let mut w = vec![0.0; m.n_rows()];
        for i in 0..m.n_rows() {
            let (v, d1, d2) = m.families[m.var_idx[i]].nll_derivatives(m.y[i], eta[i], self.disp[i]);
            f += v;
            w[i] = d2;
            for (s, val) in m.row_slots[i].iter().zip(&self.prior.row_values[i]) {
                grad[s.u] += d1 * val;
            }
        }
        if !f.is_finite() {
            f = f64::INFINITY;
        }
        InnerEval { f, grad, w }
    }
}

#[cfg(test)]
fn quad(q: &CscMatrix, u: &[f64]) -> f64 {
    q.mul_vec(u).iter().zip(u).map(|(a, b)| a * b).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Assembler {
    plan: Arc<HessianPlan>,
    q_pos: Vec<usize>,
}

impl Assembler {
    fn new(model: &Model, prior: &LatentPrior) -> Result<Self> {
        let shared = model
            .plan
            .get_or_init(|| HessianPlan::new(model, prior).ok().map(Arc::new))
            .clone();
        if let Some(plan) = shared {
            if let Some(q_pos) = plan.prior_positions(&prior.q) {
                return Ok(Self { plan, q_pos });
            }
        }
        let plan = Arc::new(HessianPlan::new(model, prior)?);
        let q_pos = plan.prior_positions(&prior.q).expect("fresh plan covers prior");
        Ok(Self { plan, q_pos })
    }

    fn hessian(&self, model: &Model, prior: &LatentPrior, w: &[f64], damping: f64) -> SparseSymMatrix {
        let mut values = vec![0.0; self.plan.pattern.nnz()];
        for (&p, &v) in self.q_pos.iter().zip(prior.q.values()) {
            values[p] += v;
        }
        for (i, pos) in self.plan.row_pos.iter().enumerate() {
            let vals = &prior.row_values[i];
            let m = vals.len();
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            for a in 0..m {
                let wa = wi * vals[a];
                for b in 0..m {
                    values[pos[a * m + b]] += wa * vals[b];
                }
            }
        }
        let _ = model;
        if damping > 0.0 {
            for &d in &self.plan.diag_pos {
                values[d] *= 1.0 + damping;
            }
        }
        let mut mat = self.plan.pattern.clone();
        mat.values_mut().copy_from_slice(&values);
        SparseSymMatrix::from_symmetric_unchecked(mat).with_symbolic(self.plan.symbolic.clone())
    }
}

#[derive(Debug, Clone)]
pub struct LaplaceFit {
    /// Negative log marginal likelihood.
    pub value: f64,
    pub mode: Vec<f64>,
    pub hessian: SparseSymMatrix,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub prior: LatentPrior,
}

/// Negative joint log-density split into its data and prior parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointNll {
    pub value: f64,
    pub data: f64,
    pub prior: f64,
    /// Set when a data term was not finite and the barrier value was used.
    pub barrier: bool,
}

pub fn joint_nll(model: &Model, params: &Params, u: &[f64]) -> Result<JointNll> {
    let prior = build_prior(model, params)?;
    if u.len() != prior.dim() {
        return Err(Error::Dimension(format!("{} random effects expected, got {}", prior.dim(), u.len())));
    }
    let inner = Inner::new(model, &prior, params);
    let mut data = inner.data_nll(&inner.eta(u));
    let barrier = !data.is_finite();
    if barrier {
        data = BARRIER;
    }
    let n = prior.dim() as f64;
    let prior_nll = 0.5 * n * LN_2PI - 0.5 * prior.logdet + 0.5 * prior.quadratic(u);
    Ok(JointNll {
        value: data + prior_nll,
        data,
        prior: prior_nll,
        barrier,
    })
}

/// Linear predictor of every training row at `(params, u)`.
pub fn training_eta(model: &Model, params: &Params, prior: &LatentPrior, u: &[f64]) -> Vec<f64> {
    Inner::new(model, prior, params).eta(u)
}

pub fn laplace_marginal(model: &Model, params: &Params, warm: Option<&[f64]>) -> Result<LaplaceFit> {
    let prior = build_prior(model, params)?;
    let n = prior.dim();
    let inner = Inner::new(model, &prior, params);
    if n == 0 {
        let value = inner.data_nll(&inner.base_eta);
        if !value.is_finite() {
            return Err(Error::Numerical("data likelihood is not finite".into()));
        }
        return Ok(LaplaceFit {
            value,
            mode: Vec::new(),
            hessian: SparseSymMatrix::identity(0),
            iterations: 0,
            converged: true,
            grad_norm: 0.0,
            prior,
        });
    }
    let assembler = Assembler::new(model, &prior)?;
    let mut u = match warm {
        Some(w) if w.len() == n && w.iter().all(|x| x.is_finite()) => w.to_vec(),
        _ => vec![0.0; n],
    };
    let mut ev = inner.eval(&u);
    if !ev.f.is_finite() {
        u = vec![0.0; n];
        ev = inner.eval(&u);
    }
    let mut iterations = 0;
    let mut converged = false;
    'newton: while iterations < INNER_MAX_ITER {
        if inf_norm(&ev.grad) < INNER_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let mut accepted = None;
        'damping: for level in std::iter::once(None).chain((0..=6).map(Some)) {
            let damping = level.map_or(0.0, |k| 10f64.powi(k));
            let h = assembler.hessian(model, &prior, &ev.w, damping);
            let Ok(chol) = h.cholesky() else { continue };
            let step: Vec<f64> = chol.solve(&ev.grad).into_iter().map(|v| -v).collect();
            let slope: f64 = step.iter().zip(&ev.grad).map(|(a, b)| a * b).sum();
            // Newton decrement at roundoff level: with a very stiff prior the
            // gradient cannot get below the absolute tolerance
            // near the mode the predicted decrease falls below the rounding
            // noise of the objective (stiff priors), so the line search can
            // no longer judge the step; Newton's local rate makes it safe
            if level.is_none() && -slope <= DECREMENT_TOL {
                let trial: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + b).collect();
                let next = inner.eval(&trial);
                if next.f.is_finite() && next.f <= ev.f + DECREMENT_TOL {
                    u = trial;
                    ev = next;
                    converged = true;
                    break 'newton;
                }
            }
            let slack = 1e-12 * ev.f.abs().max(1.0);
            let mut t = 1.0;
            for _ in 0..30 {
                let trial: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + t * b).collect();
                let f_trial = inner.value(&trial);
                if f_trial.is_finite() && (f_trial <= ev.f + 1e-4 * t * slope || f_trial <= ev.f + slack && t == 1.0) {
                    accepted = Some(trial);
                    break 'damping;
                }
                t *= 0.5;
            }
        }
        match accepted {
            Some(next) => {
                u = next;
                ev = inner.eval(&u);
            }
            None => break,
        }
    }
    let grad_norm = inf_norm(&ev.grad);
    if !converged && grad_norm < INNER_TOL {
        converged = true;
    }
    let hessian = assembler.hessian(model, &prior, &ev.w, 0.0);
    let logdet_h = match hessian.cholesky() {
        Ok(ch) => ch.logdet(),
        Err(_) => return Err(Error::Numerical("inner Hessian is not positive definite at the mode".into())),
    };
    if !ev.f.is_finite() {
        return Err(Error::Numerical("joint likelihood is not finite at the mode".into()));
    }
    let value = ev.f - 0.5 * prior.logdet + 0.5 * logdet_h;
    Ok(LaplaceFit {
        value,
        mode: u,
        hessian,
        iterations,
        converged,
        grad_norm,
        prior,
    })
}
