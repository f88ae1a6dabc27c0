//! Quasi-Newton minimization with finite-difference derivatives.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// A scalar function of the unconstrained parameters.
///
/// `value` must not depend on which points were evaluated before, except
/// through `accept`, which the optimizer calls once per accepted iterate.
pub trait Objective: Sync {
    fn value(&self, x: &[f64]) -> Result<f64>;

    fn accept(&self, _x: &[f64]) {}
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync> Objective for F {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self(x)
    }
}

fn eval<O: Objective + ?Sized>(f: &O, x: &[f64]) -> f64 {
    match f.value(x) {
        Ok(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    }
}

pub fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central differences, one coordinate per task.
pub fn fd_gradient<O: Objective + ?Sized>(f: &O, x: &[f64], rel: f64) -> Result<Vec<f64>> {
    let grad: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let h = fd_step(x[i], rel);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (eval(f, &xp) - eval(f, &xm)) / (2.0 * h)
        })
        .collect();
    if grad.iter().all(|g| g.is_finite()) {
        Ok(grad)
    } else {
        Err(Error::Numerical("objective not finite near the current point".into()))
    }
}

/// Five-point stencil, exact for quintic polynomials.
pub fn richardson_gradient<O: Objective + ?Sized>(f: &O, x: &[f64], rel: f64) -> Result<Vec<f64>> {
    let grad: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let h = fd_step(x[i], rel);
            let at = |k: f64| {
                let mut xs = x.to_vec();
                xs[i] += k * h;
                eval(f, &xs)
            };
            (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h)
        })
        .collect();
    if grad.iter().all(|g| g.is_finite()) {
        Ok(grad)
    } else {
        Err(Error::Numerical("objective not finite near the current point".into()))
    }
}

/// Largest relative disagreement between two gradients, relative to the
/// larger of the component magnitude and `floor`.
pub fn gradient_disagreement(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Second differences of the values; symmetric by construction.
pub fn fd_hessian<O: Objective + ?Sized>(f: &O, x: &[f64], rel: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let f0 = eval(f, x);
    let h: Vec<f64> = x.iter().map(|&v| fd_step(v, rel)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let shifted = |moves: &[(usize, f64)]| {
        let mut xs = x.to_vec();
        for &(k, s) in moves {
            xs[k] += s * h[k];
        }
        eval(f, &xs)
    };
    let entries: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if i == j {
                (shifted(&[(i, 1.0)]) - 2.0 * f0 + shifted(&[(i, -1.0)])) / (h[i] * h[i])
            } else {
                (shifted(&[(i, 1.0), (j, 1.0)]) - shifted(&[(i, 1.0), (j, -1.0)]) - shifted(&[(i, -1.0), (j, 1.0)])
                    + shifted(&[(i, -1.0), (j, -1.0)]))
                    / (4.0 * h[i] * h[j])
            }
        })
        .collect();
    let mut hess = DMatrix::zeros(n, n);
    for (&(i, j), &v) in pairs.iter().zip(&entries) {
        hess[(i, j)] = v;
        hess[(j, i)] = v;
    }
    if hess.iter().all(|v| v.is_finite()) {
        Ok(hess)
    } else {
        Err(Error::Numerical("outer Hessian has non-finite entries".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub fd_rel_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-3,
            max_iter: 500,
            fd_rel_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

/// Iterations over which the objective must fall by a relative
/// `STALL_REL_DECREASE`; below that the gradient is noise-limited.
const STALL_WINDOW: usize = 10;
const STALL_REL_DECREASE: f64 = 1e-9;

pub fn minimize_bfgs<O: Objective + ?Sized>(f: &O, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult> {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = eval(f, x.as_slice());
    if !fx.is_finite() {
        return Err(Error::Numerical("objective is not finite at the starting values".into()));
    }
    f.accept(x.as_slice());
    if n == 0 {
        return Ok(BfgsResult {
            x: Vec::new(),
            value: fx,
            grad: Vec::new(),
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
            message: "no free parameters".into(),
        });
    }
    let mut g = DVector::from_vec(fd_gradient(f, x.as_slice(), opts.fd_rel_step)?);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut message = String::from("maximum iterations reached");
    let mut converged = false;
    let mut history = vec![fx];
    while iterations < opts.max_iter {
        if g.amax() < opts.grad_tol {
            converged = true;
            message = "gradient tolerance reached".into();
            break;
        }
        iterations += 1;
        let mut dir = -(&hinv * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        // cap the first trial so a steepest-descent step stays local
        let mut t = if fresh { (1.0 / dir.amax()).min(1.0) } else { 1.0 };
        let mut next = None;
        for _ in 0..40 {
            let trial = &x + t * &dir;
            let ft = eval(f, trial.as_slice());
            if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
                next = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_)) = next else {
            if fresh {
                message = "line search failed".into();
                break;
            }
            hinv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        f.accept(xn.as_slice());
        let gn = DVector::from_vec(fd_gradient(f, xn.as_slice(), opts.fd_rel_step)?);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if fresh {
                hinv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (rho * rho * yhy + rho) * &s * s.transpose() - rho * (&hy * s.transpose() + &s * hy.transpose());
            fresh = false;
        }
        x = xn;
        fx = fn_;
        g = gn;
        history.push(fx);
        if history.len() > STALL_WINDOW {
            let old = history[history.len() - 1 - STALL_WINDOW];
            if old - fx < STALL_REL_DECREASE * fx.abs().max(1.0) && g.amax() >= opts.grad_tol {
                message = "no progress in objective".into();
                break;
            }
        }
    }
    let grad_norm = g.amax();
    Ok(BfgsResult {
        x: x.as_slice().to_vec(),
        value: fx,
        grad: g.as_slice().to_vec(),
        grad_norm,
        iterations,
        converged,
        message,
    })
}
