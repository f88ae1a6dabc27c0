mod common;

use approx::assert_relative_eq;
use common::{gauss_hermite, log_sum_exp, nums, strs, table};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stgm::fit::{fit, integrate_output, predict, residuals, simulate, FitOptions, ResidualKind, RowDesign};
use stgm::laplace::{build_prior, joint_nll, laplace_marginal};
use stgm::model::{Model, ModelConfig};
use stgm::optim::BfgsOptions;
use stgm::spatial::{ArealGraph, Mesh, SpatialDomain};
use statrs::function::factorial::ln_factorial;

fn tight() -> FitOptions {
    FitOptions {
        bfgs: BfgsOptions {
            grad_tol: 1e-7,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn intercept_only_gaussian_closed_form() {
    let y = [2.1, 3.4, 1.9, 5.0, 4.2, 3.3, 2.8];
    let data = table(vec![("y", nums(&y))]);
    let config = ModelConfig {
        formula: "y ~ 1".into(),
        ..Default::default()
    };
    let m = Model::new(&config, SpatialDomain::SingleSite, &data).unwrap();
    let f = fit(&m, &tight()).unwrap();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var_mle = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(f.convergence.converged);
    assert_relative_eq!(f.estimate("alpha:(Intercept)").unwrap().0, mean, epsilon = 1e-6);
    assert_relative_eq!(f.estimate("dispersion:y").unwrap().0.powi(2), var_mle, epsilon = 1e-6);
    // SE of the mean is σ/√n at the MLE
    assert_relative_eq!(f.estimate("alpha:(Intercept)").unwrap().1, (var_mle / n).sqrt(), epsilon = 1e-4);
    assert_relative_eq!(f.aic, -2.0 * f.log_lik + 4.0, epsilon = 1e-12);
}

#[test]
fn poisson_density_is_exact() {
    let data = table(vec![("y", nums(&[2.0]))]);
    let config = ModelConfig {
        formula: "y ~ 1".into(),
        default_family: Some("poisson".into()),
        ..Default::default()
    };
    let m = Model::new(&config, SpatialDomain::SingleSite, &data).unwrap();
    let mut p = m.params(&m.layout.expand(&m.layout.start_unconstrained().unwrap()));
    p.alpha = vec![0.0];
    let j = joint_nll(&m, &p, &[]).unwrap();
    assert_relative_eq!(j.value, 1.0 + 2f64.ln(), epsilon = 1e-12);
    assert!(!j.barrier);
}

#[test]
fn poisson_single_effect_matches_quadrature() {
    let y = [1012.0, 987.0, 1045.0, 1003.0, 961.0];
    let data = table(vec![("y", nums(&y))]);
    let config = ModelConfig {
        formula: "y ~ 1".into(),
        sem: Some(String::new()),
        default_family: Some("poisson".into()),
        ..Default::default()
    };
    let m = Model::new(&config, SpatialDomain::SingleSite, &data).unwrap();
    let (alpha, sd) = (6.8, 0.3);
    let mut p = m.params(&m.layout.expand(&m.layout.start_unconstrained().unwrap()));
    p.alpha = vec![alpha];
    p.sem = vec![sd];
    let lap = laplace_marginal(&m, &p, None).unwrap();

    let logg = |u: f64| -> f64 {
        let eta = alpha + u;
        let ll: f64 = y.iter().map(|&yi| yi * eta - eta.exp() - ln_factorial(yi as u64)).sum();
        ll - 0.5 * (u / sd).powi(2) - 0.5 * (2.0 * std::f64::consts::PI * sd * sd).ln()
    };
    let mut u = 0.0;
    let mut curv = 0.0;
    for _ in 0..100 {
        let mu = (alpha + u).exp();
        let grad = y.iter().sum::<f64>() - 5.0 * mu - u / (sd * sd);
        curv = 5.0 * mu + 1.0 / (sd * sd);
        u += grad / curv;
    }
    let s = curv.powf(-0.5);
    let (x, w) = gauss_hermite(25);
    let terms: Vec<f64> = x
        .iter()
        .zip(&w)
        .map(|(&xk, &wk)| wk.ln() + xk * xk + logg(u + std::f64::consts::SQRT_2 * s * xk))
        .collect();
    let log_marginal = (std::f64::consts::SQRT_2 * s).ln() + log_sum_exp(&terms);
    assert!((lap.value + log_marginal).abs() < 1e-4, "{} vs {}", lap.value, -log_marginal);
}

#[test]
fn ar1_matches_conditional_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rho = 0.6;
    let mut x = vec![0.0; 200];
    for t in 0..200 {
        let e: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
        x[t] = if t == 0 { e } else { rho * x[t - 1] + e };
    }
    let times: Vec<i64> = (0..200).collect();
    let data = table(vec![("y", nums(&x)), ("t", strs(&times))]);
    let config = ModelConfig {
        formula: "y ~ 0".into(),
        dsem: Some("y -> y, 1, rho\n".into()),
        time_column: Some("t".into()),
        fixed: [("dispersion:y".to_string(), 1e-3)].into_iter().collect(),
        ..Default::default()
    };
    let m = Model::new(&config, SpatialDomain::SingleSite, &data).unwrap();
    let f = fit(&m, &FitOptions::default()).unwrap();
    let num: f64 = (1..200).map(|t| x[t] * x[t - 1]).sum();
    let den: f64 = (1..200).map(|t| x[t - 1] * x[t - 1]).sum();
    let cls = num / den;
    let (est, se) = f.estimate("dsem:rho").unwrap();
    assert!(f.convergence.converged, "{:?}", f.convergence);
    assert!((est - cls).abs() < 3.0 * se, "rho {est} ± {se}, CLS {cls}");
    assert!(se > 0.0 && se < 0.2);
}

fn mesh_poisson_model() -> (Model, stgm::data::DataTable) {
    let mesh = Mesh::grid(4, 4, (0.0, 1.0), (0.0, 1.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40;
    let lon: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
    let lat: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
    let var: Vec<&str> = (0..n).map(|i| if i % 2 == 0 { "X" } else { "Y" }).collect();
    let y: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64).collect();
    let data = table(vec![("y", nums(&y)), ("v", strs(&var)), ("lon", nums(&lon)), ("lat", nums(&lat))]);
    let config = ModelConfig {
        formula: "y ~ 0 + factor(v)".into(),
        sem: Some("X -> Y, b\n".into()),
        default_family: Some("poisson".into()),
        variables: strs(&["X", "Y"]),
        variable_column: Some("v".into()),
        space_columns: strs(&["lon", "lat"]),
        ..Default::default()
    };
    (Model::new(&config, SpatialDomain::Mesh(mesh), &data).unwrap(), data)
}

#[test]
fn predictions_reproduce_fit_and_sum_components() {
    let (m, data) = mesh_poisson_model();
    let f = fit(&m, &FitOptions::default()).unwrap();
    let preds = predict(&m, &f, &data).unwrap();
    let mu = stgm::fit::fitted_mean(&m, &f);
    for (p, mu) in preds.iter().zip(&mu) {
        let p = p.as_ref().unwrap();
        assert_relative_eq!(p.response, *mu, max_relative = 1e-12);
        assert_relative_eq!(p.components.link(), p.link, epsilon = 1e-12);
        assert_relative_eq!(p.response, p.link.exp(), max_relative = 1e-12);
        assert_eq!(p.components.epsilon, 0.0);
    }
    let r = residuals(&m, &f, ResidualKind::Response);
    for i in 0..m.n_rows() {
        assert_relative_eq!(r[i], m.y[i] - mu[i], epsilon = 1e-12);
    }
    let dev = residuals(&m, &f, ResidualKind::Deviance);
    assert!(dev.iter().zip(&r).all(|(d, r)| d.signum() == r.signum() || *r == 0.0));

    // a point off the mesh fails on its own row only
    let grid = table(vec![
        ("v", strs(&["X", "Y"])),
        ("lon", nums(&[0.5, 3.0])),
        ("lat", nums(&[0.5, 0.5])),
    ]);
    let out = predict(&m, &f, &grid).unwrap();
    assert!(out[0].is_ok());
    assert!(matches!(out[1], Err(stgm::error::Error::OutsideMesh { sample: 1, .. })));

    // one-cell integration is a prediction
    let cell = grid.select_rows(&[0]);
    let rows = RowDesign::new(&m, &cell).unwrap();
    let idx = integrate_output(&m, &f, &rows, &[1.0]).unwrap();
    assert_relative_eq!(idx.estimate, out[0].as_ref().unwrap().response, max_relative = 1e-12);
    assert!(idx.se > 0.0);
    assert!(!idx.bias_corrected);
}

#[test]
fn fixed_fit_has_zero_index_se() {
    let data = table(vec![("y", nums(&[1.0, 2.0, 3.0]))]);
    let config = ModelConfig {
        formula: "y ~ 1".into(),
        fixed: [("alpha:(Intercept)".to_string(), 2.0), ("dispersion:y".to_string(), 1.0)]
            .into_iter()
            .collect(),
        ..Default::default()
    };
    let m = Model::new(&config, SpatialDomain::SingleSite, &data).unwrap();
    let f = fit(&m, &FitOptions::default()).unwrap();
    assert_eq!(f.k, 0);
    let rows = RowDesign::new(&m, &data).unwrap();
    let idx = integrate_output(&m, &f, &rows, &[0.2, 0.3, 0.5]).unwrap();
    assert_relative_eq!(idx.estimate, 2.0, epsilon = 1e-12);
    assert_eq!(idx.se, 0.0);
}

/// Small Gaussian SAR model; the index SE is recomputed with dense
/// posterior algebra and finite differences of the dense posterior mean.
#[test]
fn index_se_matches_dense_oracle() {
    let y = [0.4, -0.3, 1.2, 0.8, -0.5, 0.1];
    let node = ["0", "1", "2", "3", "1", "2"];
    let data = table(vec![("y", nums(&y)), ("node", strs(&node))]);
    let config = ModelConfig {
        formula: "y ~ 1".into(),
        sem: Some(String::new()),
        space_columns: strs(&["node"]),
        ..Default::default()
    };
    let graph = ArealGraph::new(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
    let m = Model::new(&config, SpatialDomain::Areal(graph), &data).unwrap();
    let f = fit(&m, &FitOptions::default()).unwrap();
    let grid = table(vec![("node", strs(&["0", "1", "2", "3"]))]);
    let w = [0.1, 0.2, 0.3, 0.4];
    let rows = RowDesign::new(&m, &grid).unwrap();
    let idx = integrate_output(&m, &f, &rows, &w).unwrap();

    let n = m.n_rows();
    let a = DMatrix::from_fn(n, 4, |i, s| if node[i].parse::<usize>().unwrap() == s { 1.0 } else { 0.0 });
    let yv = DVector::from_column_slice(&y);
    let wv = DVector::from_column_slice(&w);
    let dense = |phi: &[f64]| -> (f64, DMatrix<f64>) {
        let p = m.params_from_phi(phi);
        let q = build_prior(&m, &p).unwrap().q.to_dense();
        let s2 = p.dispersion[0].powi(2);
        let h = &q + a.transpose() * &a / s2;
        let r = &yv - DVector::from_element(n, p.alpha[0]);
        let mode = h.clone().cholesky().unwrap().solve(&(a.transpose() * r / s2));
        (p.alpha[0] * w.iter().sum::<f64>() + wv.dot(&mode), h)
    };
    let (est, h) = dense(&f.phi);
    assert_relative_eq!(est, idx.estimate, epsilon = 1e-8);
    let k = f.phi.len();
    let mut g = DVector::zeros(k);
    for j in 0..k {
        let step = 1e-5 * f.phi[j].abs().max(1.0);
        let mut up = f.phi.clone();
        let mut dn = f.phi.clone();
        up[j] += step;
        dn[j] -= step;
        g[j] = (dense(&up).0 - dense(&dn).0) / (2.0 * step);
    }
    let cov = f.cov_phi.as_ref().unwrap();
    let var = (g.transpose() * cov * &g)[(0, 0)] + (wv.transpose() * h.try_inverse().unwrap() * &wv)[(0, 0)];
    assert_relative_eq!(idx.se, var.sqrt(), epsilon = 1e-6);
}

#[test]
fn identity_link_index_is_weighted_mean() {
    let (m, _) = {
        let data = table(vec![("y", nums(&[1.0, 2.5, 0.5, 4.0])), ("x", nums(&[0.0, 1.0, 2.0, 3.0]))]);
        let config = ModelConfig {
            formula: "y ~ x".into(),
            ..Default::default()
        };
        (Model::new(&config, SpatialDomain::SingleSite, &data).unwrap(), ())
    };
    let f = fit(&m, &FitOptions::default()).unwrap();
    let grid = table(vec![("x", nums(&[0.5, 1.5, 2.5]))]);
    let rows = RowDesign::new(&m, &grid).unwrap();
    let idx = integrate_output(&m, &f, &rows, &[1.0 / 3.0; 3]).unwrap();
    let preds = predict(&m, &f, &grid).unwrap();
    let mean: f64 = preds.iter().map(|p| p.as_ref().unwrap().response).sum::<f64>() / 3.0;
    assert_relative_eq!(idx.estimate, mean, epsilon = 1e-12);
}

#[test]
fn row_permutation_leaves_marginal_unchanged() {
    let (m, data) = mesh_poisson_model();
    let mut order: Vec<usize> = (0..data.n_rows()).collect();
    order.reverse();
    order.swap(3, 17);
    let permuted = data.select_rows(&order);
    let m2 = Model::new(&m.config, m.domain.clone(), &permuted).unwrap();
    let phi = m.layout.start_unconstrained().unwrap();
    let a = laplace_marginal(&m, &m.params_from_phi(&phi), None).unwrap().value;
    let b = laplace_marginal(&m2, &m2.params_from_phi(&phi), None).unwrap().value;
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
}

#[test]
fn null_parameter_adds_two_to_aic() {
    let y = [1.0, 3.0, 2.0, 2.0, 4.0, 0.5];
    let x = [-1.0, -1.0, 0.0, 0.0, 1.0, 1.0];
    // centred residual pattern orthogonal to x gives an exact zero slope
    let y: Vec<f64> = y.iter().zip(&x).map(|(yi, xi)| yi - 0.25 * xi).collect();
    let xy: f64 = y.iter().zip(&x).map(|(a, b)| a * b).sum();
    let y: Vec<f64> = y.iter().zip(&x).map(|(yi, xi)| yi - xy / 4.0 * xi).collect();
    let data = table(vec![("y", nums(&y)), ("x", nums(&x))]);
    let small = Model::new(
        &ModelConfig {
            formula: "y ~ 1".into(),
            ..Default::default()
        },
        SpatialDomain::SingleSite,
        &data,
    )
    .unwrap();
    let big = Model::new(
        &ModelConfig {
            formula: "y ~ x".into(),
            ..Default::default()
        },
        SpatialDomain::SingleSite,
        &data,
    )
    .unwrap();
    let a = fit(&small, &tight()).unwrap();
    let b = fit(&big, &tight()).unwrap();
    assert!(b.estimate("alpha:x").unwrap().0.abs() < 1e-6);
    assert!((a.log_lik - b.log_lik).abs() < 1e-8);
    assert_relative_eq!(b.aic - a.aic, 2.0, epsilon = 1e-8);
}

#[test]
fn zero_variance_truth_is_deterministic() {
    let data = table(vec![("y", nums(&[0.0; 5])), ("x", nums(&[0.0, 1.0, 2.0, 3.0, 4.0]))]);
    let config = ModelConfig {
        formula: "y ~ x".into(),
        sem: Some(String::new()),
        ..Default::default()
    };
    let m = Model::new(&config, SpatialDomain::SingleSite, &data).unwrap();
    let mut p = m.params(&m.layout.expand(&m.layout.start_unconstrained().unwrap()));
    p.alpha = vec![0.5, 2.0];
    p.sem = vec![0.0];
    p.dispersion = vec![0.0];
    let rows = RowDesign::new(&m, &data).unwrap();
    let sim = simulate(&m, &p, &rows, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for (i, y) in sim.y.iter().enumerate() {
        assert_eq!(*y, 0.5 + 2.0 * i as f64);
    }
}

#[test]
fn poisson_simulation_mean() {
    let n = 4000;
    let data = table(vec![("y", nums(&vec![0.0; n]))]);
    let config = ModelConfig {
        formula: "y ~ 1".into(),
        default_family: Some("poisson".into()),
        ..Default::default()
    };
    let m = Model::new(&config, SpatialDomain::SingleSite, &data).unwrap();
    let mut p = m.params(&m.layout.expand(&m.layout.start_unconstrained().unwrap()));
    p.alpha = vec![0.0];
    let rows = RowDesign::new(&m, &data).unwrap();
    let sim = simulate(&m, &p, &rows, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let mean = sim.y.iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 3.0 * (1.0 / n as f64).sqrt(), "{mean}");
}
