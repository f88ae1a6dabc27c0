//! Batch front end: a JSON run configuration wired to fitting, simulation,
//! prediction and integration, with CSV/JSON outputs.
//!
//! Exit codes: 0 success, 1 configuration or data fault, 2 fit did not
//! converge (outputs still written), 3 every grid row failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{format_number, DataTable};
use crate::error::{Error, Result};
use crate::fit::{fit, fit_from_state, integrate_output, predict, simulate, FitOptions, FitResult, RowDesign};
use crate::model::{Model, ModelConfig};
use crate::optim::BfgsOptions;
use crate::spatial::{ArealGraph, Mesh, SiteLocation, SpatialDomain, StreamNetwork};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAULT: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_ALL_ROWS_FAILED: i32 = 3;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    pub standard_errors: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let b = BfgsOptions::default();
        Self {
            grad_tol: b.grad_tol,
            max_iter: b.max_iter,
            fd_step: b.fd_rel_step,
            standard_errors: true,
        }
    }
}

/// Regular triangulated lattice used instead of a mesh file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub nx: usize,
    pub ny: usize,
    pub x: [f64; 2],
    pub y: [f64; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialConfig {
    /// `mesh`, `areal` or `stream`.
    pub kind: String,
    pub path: Option<PathBuf>,
    pub lattice: Option<LatticeConfig>,
}

/// Paths are relative to the configuration file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub formula: String,
    pub sem: Option<PathBuf>,
    pub dsem: Option<PathBuf>,
    pub spatial: Option<SpatialConfig>,
    pub variables: Vec<String>,
    pub times: Vec<i64>,
    pub family: BTreeMap<String, String>,
    pub default_family: Option<String>,
    pub variable_column: Option<String>,
    pub time_column: Option<String>,
    pub space_columns: Vec<String>,
    pub fixed: BTreeMap<String, f64>,
    pub start: BTreeMap<String, f64>,
    pub bounded: Vec<String>,
    pub optimizer: OptimizerConfig,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// `name,value` rows of true parameter values for `simulate`.
    pub truth: Option<PathBuf>,
    /// Sampling rows for `simulate`; generated when absent.
    pub design: Option<PathBuf>,
    pub n_samples: usize,
    pub grid: Option<PathBuf>,
    pub weight_column: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        for p in [
            &mut config.data,
            &mut config.sem,
            &mut config.dsem,
            &mut config.out,
            &mut config.truth,
            &mut config.design,
            &mut config.grid,
        ] {
            resolve(p);
        }
        if let Some(s) = &mut config.spatial {
            resolve(&mut s.path);
        }
        Ok(config)
    }

    fn read_text(path: &Option<PathBuf>) -> Result<Option<String>> {
        path.as_ref()
            .map(|p| fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display()))))
            .transpose()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            formula: self.formula.clone(),
            sem: Self::read_text(&self.sem)?,
            dsem: Self::read_text(&self.dsem)?,
            variables: self.variables.clone(),
            times: self.times.clone(),
            family: self.family.clone(),
            default_family: self.default_family.clone(),
            variable_column: self.variable_column.clone(),
            time_column: self.time_column.clone(),
            space_columns: self.space_columns.clone(),
            fixed: self.fixed.clone(),
            start: self.start.clone(),
            bounded: self.bounded.clone(),
        })
    }

    pub fn domain(&self) -> Result<SpatialDomain> {
        let Some(sp) = &self.spatial else {
            return Ok(SpatialDomain::SingleSite);
        };
        let reader = || -> Result<BufReader<File>> {
            let p = sp
                .path
                .as_ref()
                .ok_or_else(|| Error::Domain(format!("spatial kind '{}' needs a path", sp.kind)))?;
            let f = File::open(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            Ok(BufReader::new(f))
        };
        match sp.kind.as_str() {
            "mesh" => match (&sp.lattice, &sp.path) {
                (Some(l), None) => Ok(SpatialDomain::Mesh(Mesh::grid(l.nx, l.ny, (l.x[0], l.x[1]), (l.y[0], l.y[1]))?)),
                (None, Some(_)) => Ok(SpatialDomain::Mesh(Mesh::read(reader()?)?)),
                _ => Err(Error::Domain("mesh needs exactly one of path and lattice".into())),
            },
            "areal" => Ok(SpatialDomain::Areal(ArealGraph::read(reader()?)?)),
            "stream" => Ok(SpatialDomain::Stream(StreamNetwork::read(reader()?)?)),
            other => Err(Error::Domain(format!("unknown spatial kind '{other}'"))),
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            bfgs: BfgsOptions {
                grad_tol: self.optimizer.grad_tol,
                max_iter: self.optimizer.max_iter,
                fd_rel_step: self.optimizer.fd_step,
            },
            compute_se: self.optimizer.standard_errors,
            ..Default::default()
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stgm", version, about = "Spatio-temporal generalized linear mixed models with path-diagram interactions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate parameters and write estimates, paths, fit summary and random effects.
    Fit(Common),
    /// Draw a data set from true parameter values.
    Simulate(Common),
    /// Predict at grid rows from a previous fit.
    Predict(Common),
    /// Area-weighted index over grid rows from a previous fit.
    Integrate(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_FAULT,
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            EXIT_FAULT
        }
    }
}

/// `error: <kind>: <message>` on one line.
pub fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::Notation(_) => "notation",
        Error::Dimension(_) => "dimension",
        Error::NotSymmetric(_) => "not_symmetric",
        Error::NotPositiveDefinite { .. } => "not_positive_definite",
        Error::Singular(_) => "singular",
        Error::RankDeficient(_) => "rank_deficient",
        Error::Domain(_) => "domain",
        Error::OutsideMesh { .. } => "outside_mesh",
        Error::Formula(_) => "formula",
        Error::Data(_) => "data",
        Error::Parameter(_) => "parameter",
        Error::Parse(_) => "parse",
        Error::Numerical(_) => "numerical",
        Error::Io(_) => "io",
    };
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: {kind}: {msg}")
}

struct Run {
    config: RunConfig,
    out: PathBuf,
    seed: u64,
}

fn dispatch(cli: Cli) -> Result<i32> {
    let (Command::Fit(c) | Command::Simulate(c) | Command::Predict(c) | Command::Integrate(c)) = &cli.command;
    if let Some(n) = c.threads {
        // a pool may already exist when called in-process; keep it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let config = RunConfig::load(&c.config)?;
    let out = c.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    let seed = c.seed.unwrap_or(config.seed);
    let run = Run { config, out, seed };
    fs::create_dir_all(&run.out).map_err(|e| Error::Io(format!("{}: {e}", run.out.display())))?;
    match cli.command {
        Command::Fit(_) => run.fit(),
        Command::Simulate(_) => run.simulate(),
        Command::Predict(_) => run.predict(),
        Command::Integrate(_) => run.integrate(),
    }
}

fn write_table(path: &Path, table: &DataTable) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    table.write_csv(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    let mut f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    writeln!(f, "{text}")?;
    Ok(())
}

fn columns(cols: Vec<(&str, Vec<String>)>) -> Result<DataTable> {
    DataTable::from_columns(cols.into_iter().map(|(n, v)| (n.to_string(), v)).collect())
}

#[derive(Debug, Serialize)]
struct Dims {
    rows: usize,
    variables: usize,
    times: usize,
    sites: usize,
    random_effects: usize,
    fixed_effects: usize,
}

#[derive(Debug, Serialize)]
struct FitSummary {
    version: &'static str,
    #[serde(rename = "logLik")]
    log_lik: f64,
    #[serde(rename = "AIC")]
    aic: f64,
    k: usize,
    converged: bool,
    grad_norm: f64,
    iterations: usize,
    message: String,
    inner_converged: bool,
    hessian_positive_definite: Option<bool>,
    dims: Dims,
    families: BTreeMap<String, String>,
    warnings: Vec<String>,
}

/// What `predict` and `integrate` need to rebuild a fit.
#[derive(Debug, Serialize, Deserialize)]
struct FitState {
    version: String,
    names: Vec<String>,
    phi: Vec<f64>,
    cov_phi: Option<Vec<Vec<f64>>>,
}

const STATE_FILE: &str = "fit_state.json";

impl Run {
    fn build_model(&self, data: &DataTable) -> Result<Model> {
        let model = Model::new(&self.config.model_config()?, self.config.domain()?, data)?;
        for w in &model.warnings {
            eprintln!("warning: {w}");
        }
        Ok(model)
    }

    fn training_data(&self) -> Result<DataTable> {
        let path = self
            .config
            .data
            .as_ref()
            .ok_or_else(|| Error::Data("configuration has no data file".into()))?;
        DataTable::read_csv(path)
    }

    fn fit(&self) -> Result<i32> {
        let data = self.training_data()?;
        let model = self.build_model(&data)?;
        let result = fit(&model, &self.config.fit_options())?;
        self.write_fit(&model, &result)?;
        Ok(if result.convergence.converged {
            EXIT_OK
        } else {
            eprintln!("warning: fit did not converge: {}", result.convergence.message);
            EXIT_NOT_CONVERGED
        })
    }

    fn write_fit(&self, model: &Model, result: &FitResult) -> Result<()> {
        let est: Vec<usize> = (0..result.names.len()).filter(|&i| result.estimated[i]).collect();
        let pick = |f: &dyn Fn(usize) -> String| est.iter().map(|&i| f(i)).collect::<Vec<_>>();
        write_table(
            &self.out.join("estimates.csv"),
            &columns(vec![
                ("name", pick(&|i| result.names[i].clone())),
                ("estimate", pick(&|i| format_number(result.estimates[i]))),
                ("se", pick(&|i| format_number(result.se[i]))),
                ("transform", pick(&|i| result.transforms[i].name().to_string())),
            ])?,
        )?;

        let mut path_cols: [Vec<String>; 8] = Default::default();
        for (prefix, ram) in [("sem", &model.sem), ("dsem", &model.dsem)] {
            let Some(ram) = ram else { continue };
            for (k, term) in ram.terms.iter().enumerate() {
                let (name, est, se) = match term.label() {
                    Some(label) => {
                        let name = format!("{prefix}:{label}");
                        let i = result.names.iter().position(|n| n == &name).expect("layout has every label");
                        let se = if result.estimated[i] { result.se[i] } else { f64::NAN };
                        (name, result.estimates[i], se)
                    }
                    None => (String::new(), ram.term_value(k, &[]), f64::NAN),
                };
                let row = [
                    prefix.to_string(),
                    term.from.clone(),
                    term.to.clone(),
                    term.heads.arrow().to_string(),
                    term.lag.to_string(),
                    name,
                    format_number(est),
                    format_number(se),
                ];
                for (c, v) in path_cols.iter_mut().zip(row) {
                    c.push(v);
                }
            }
        }
        let [m, from, to, arrow, lag, param, est, se] = path_cols;
        write_table(
            &self.out.join("paths.csv"),
            &columns(vec![
                ("model", m),
                ("from", from),
                ("to", to),
                ("arrow", arrow),
                ("lag", lag),
                ("parameter", param),
                ("estimate", est),
                ("se", se),
            ])?,
        )?;

        write_table(&self.out.join("random_effects.csv"), &random_effects_table(model, result)?)?;

        let summary = FitSummary {
            version: VERSION,
            log_lik: result.log_lik,
            aic: result.aic,
            k: result.k,
            converged: result.convergence.converged,
            grad_norm: result.convergence.grad_norm,
            iterations: result.convergence.iterations,
            message: result.convergence.message.clone(),
            inner_converged: result.convergence.inner_converged,
            hessian_positive_definite: result.convergence.hessian_pd,
            dims: Dims {
                rows: model.n_rows(),
                variables: model.n_vars(),
                times: model.n_times(),
                sites: model.latent.n_sites,
                random_effects: model.latent.dim(),
                fixed_effects: model.x.ncols(),
            },
            families: model
                .variables
                .iter()
                .zip(&model.families)
                .map(|(v, f)| (v.clone(), f.to_string()))
                .collect(),
            warnings: model.warnings.clone(),
        };
        write_json(&self.out.join("fit.json"), &summary)?;

        let state = FitState {
            version: VERSION.to_string(),
            names: model.layout.free_entries().map(|e| e.name.clone()).collect(),
            phi: result.phi.clone(),
            cov_phi: result
                .cov_phi
                .as_ref()
                .map(|c| (0..c.nrows()).map(|r| c.row(r).iter().copied().collect()).collect()),
        };
        write_json(&self.out.join(STATE_FILE), &state)
    }

    fn load_fit(&self, model: &Model) -> Result<FitResult> {
        let path = self.out.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e} (run fit first)", path.display())))?;
        let state: FitState = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let names: Vec<String> = model.layout.free_entries().map(|e| e.name.clone()).collect();
        if names != state.names {
            return Err(Error::Parameter("saved fit does not match the configured model".into()));
        }
        let k = state.phi.len();
        let cov = match state.cov_phi {
            Some(rows) => {
                if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                    return Err(Error::Parse("saved covariance has the wrong shape".into()));
                }
                Some(DMatrix::from_fn(k, k, |r, c| rows[r][c]))
            }
            None => None,
        };
        fit_from_state(model, state.phi, cov)
    }

    /// Grid rows, replicated over variables and times the grid leaves out.
    fn grid(&self, model: &Model) -> Result<DataTable> {
        let path = self
            .config
            .grid
            .as_ref()
            .ok_or_else(|| Error::Data("configuration has no grid file".into()))?;
        let mut grid = DataTable::read_csv(path)?;
        if let Some(col) = &self.config.variable_column {
            if !grid.has_column(col) {
                grid = replicate(&grid, col, &model.variables)?;
            }
        }
        if let Some(col) = &self.config.time_column {
            if !grid.has_column(col) {
                let times: Vec<String> = model.times.iter().map(|t| t.to_string()).collect();
                grid = replicate(&grid, col, &times)?;
            }
        }
        Ok(grid)
    }

    fn predict(&self) -> Result<i32> {
        let data = self.training_data()?;
        let model = self.build_model(&data)?;
        let result = self.load_fit(&model)?;
        let grid = self.grid(&model)?;
        let preds = predict(&model, &result, &grid)?;
        let mut table = grid.clone();
        let na = || "NA".to_string();
        let get = |f: &dyn Fn(&crate::fit::Prediction) -> f64| -> Vec<String> {
            preds
                .iter()
                .map(|p| p.as_ref().map_or_else(|_| na(), |p| format_number(f(p))))
                .collect()
        };
        let new_cols: Vec<(&str, Vec<String>)> = vec![
            ("link", get(&|p| p.link)),
            ("response", get(&|p| p.response)),
            ("fixed", get(&|p| p.components.fixed)),
            ("smooth", get(&|p| p.components.smooth)),
            ("omega", get(&|p| p.components.omega)),
            ("epsilon", get(&|p| p.components.epsilon)),
            ("offset", get(&|p| p.components.offset)),
            (
                "error",
                preds
                    .iter()
                    .map(|p| p.as_ref().err().map_or_else(String::new, error_line))
                    .collect(),
            ),
        ];
        for (name, values) in new_cols {
            table.push_column(name, values)?;
        }
        write_table(&self.out.join("predictions.csv"), &table)?;
        let failed = preds.iter().filter(|p| p.is_err()).count();
        Ok(if !preds.is_empty() && failed == preds.len() {
            EXIT_ALL_ROWS_FAILED
        } else {
            EXIT_OK
        })
    }

    fn integrate(&self) -> Result<i32> {
        let data = self.training_data()?;
        let model = self.build_model(&data)?;
        let result = self.load_fit(&model)?;
        let grid = self.grid(&model)?;
        let n = grid.n_rows();
        let weights = match &self.config.weight_column {
            Some(col) => grid.numeric(col)?,
            None => vec![1.0; n],
        };
        let usable: Vec<bool> = match RowDesign::new(&model, &grid) {
            Ok(_) => vec![true; n],
            Err(Error::OutsideMesh { .. }) => (0..n)
                .map(|i| RowDesign::new(&model, &grid.select_rows(&[i])).is_ok())
                .collect(),
            Err(e) => return Err(e),
        };
        if n > 0 && usable.iter().all(|u| !u) {
            return Ok(EXIT_ALL_ROWS_FAILED);
        }
        let skipped = usable.iter().filter(|u| !**u).count();
        if skipped > 0 {
            eprintln!("warning: {skipped} grid rows outside the domain were left out");
        }
        let kept: Vec<usize> = (0..n).filter(|&i| usable[i]).collect();
        let rows = RowDesign::new(&model, &grid.select_rows(&kept))?;
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for j in 0..rows.n_rows() {
            groups.entry((rows.var_idx[j], rows.time_idx[j])).or_default().push(j);
        }
        let mut cols: [Vec<String>; 6] = Default::default();
        for ((v, t), members) in groups {
            let sub = RowDesign::new(&model, &grid.select_rows(&members.iter().map(|&j| kept[j]).collect::<Vec<_>>()))?;
            let w: Vec<f64> = members.iter().map(|&j| weights[kept[j]]).collect();
            let idx = integrate_output(&model, &result, &sub, &w)?;
            let row = [
                model.variables[v].clone(),
                model.times[t].to_string(),
                format_number(idx.estimate),
                format_number(idx.se),
                members.len().to_string(),
                idx.bias_corrected.to_string(),
            ];
            for (c, val) in cols.iter_mut().zip(row) {
                c.push(val);
            }
        }
        let [var, time, est, se, cells, bias] = cols;
        write_table(
            &self.out.join("index.csv"),
            &columns(vec![
                ("variable", var),
                ("time", time),
                ("estimate", est),
                ("se", se),
                ("cells", cells),
                ("bias_corrected", bias),
            ])?,
        )?;
        Ok(EXIT_OK)
    }

    fn simulate(&self) -> Result<i32> {
        let mut design_rng = ChaCha8Rng::seed_from_u64(self.seed);
        design_rng.set_stream(1);
        let mut sim_rng = ChaCha8Rng::seed_from_u64(self.seed);
        sim_rng.set_stream(2);

        let domain = self.config.domain()?;
        let design = match &self.config.design {
            Some(p) => DataTable::read_csv(p)?,
            None => self.generate_design(&domain, &mut design_rng)?,
        };
        let formula = crate::design::parse_formula(&self.config.formula)?;
        let response = formula
            .response
            .ok_or_else(|| Error::Formula("formula needs a response on the left of '~'".into()))?;
        let base = without_column(&design, &response)?;
        let mut placeholder = base.clone();
        placeholder.push_column(&response, vec!["1".into(); base.n_rows()])?;
        let model = self.build_model(&placeholder)?;

        let mut values: Vec<f64> = model.layout.entries.iter().map(|e| e.fixed.unwrap_or(e.start)).collect();
        if let Some(path) = &self.config.truth {
            let truth = DataTable::read_csv(path)?;
            let names = truth.labels("name")?;
            let vals = truth.numeric("value")?;
            for (name, v) in names.iter().zip(vals) {
                let i = model
                    .layout
                    .index_of(name)
                    .ok_or_else(|| Error::Parameter(format!("unknown parameter '{name}' in truth file")))?;
                values[i] = v;
            }
        }
        let params = model.params(&values);
        let rows = RowDesign::new(&model, &placeholder)?;
        let sim = simulate(&model, &params, &rows, &mut sim_rng)?;
        let mut out = base;
        out.push_column(&response, sim.y.iter().map(|&y| format_number(y)).collect())?;
        write_table(&self.out.join("data.csv"), &out)?;
        Ok(EXIT_OK)
    }

    /// Uniform sampling rows: variable and time uniform over the declared
    /// lists, location uniform over the domain.
    fn generate_design(&self, domain: &SpatialDomain, rng: &mut ChaCha8Rng) -> Result<DataTable> {
        let c = &self.config;
        let n = c.n_samples;
        if n == 0 {
            return Err(Error::Data("simulate needs a design file or n_samples > 0".into()));
        }
        let mut cols: Vec<(&str, Vec<String>)> = Vec::new();
        if let Some(col) = &c.variable_column {
            if c.variables.is_empty() {
                return Err(Error::Data("generated designs need the variables list".into()));
            }
            cols.push((col, (0..n).map(|_| c.variables[rng.random_range(0..c.variables.len())].clone()).collect()));
        }
        if let Some(col) = &c.time_column {
            if c.times.is_empty() {
                return Err(Error::Data("generated designs need the times list".into()));
            }
            cols.push((col, (0..n).map(|_| c.times[rng.random_range(0..c.times.len())].to_string()).collect()));
        }
        match domain {
            SpatialDomain::SingleSite => {}
            SpatialDomain::Mesh(mesh) => {
                let [xc, yc] = &c.space_columns[..] else {
                    return Err(Error::Data("mesh domains need two space_columns".into()));
                };
                let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for v in mesh.vertices() {
                    for d in 0..2 {
                        lo[d] = lo[d].min(v[d]);
                        hi[d] = hi[d].max(v[d]);
                    }
                }
                let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
                while xs.len() < n {
                    let x = rng.random_range(lo[0]..=hi[0]);
                    let y = rng.random_range(lo[1]..=hi[1]);
                    if domain.project_one(0, SiteLocation::Point(x, y)).is_ok() {
                        xs.push(format_number(x));
                        ys.push(format_number(y));
                    }
                }
                cols.push((xc, xs));
                cols.push((yc, ys));
            }
            _ => {
                let [nc] = &c.space_columns[..] else {
                    return Err(Error::Data("graph domains need one space column (node id)".into()));
                };
                let s = domain.n_nodes();
                cols.push((nc, (0..n).map(|_| rng.random_range(0..s).to_string()).collect()));
            }
        }
        if cols.is_empty() {
            cols.push(("row", (0..n).map(|i| i.to_string()).collect()));
        }
        columns(cols)
    }
}

fn replicate(table: &DataTable, col: &str, values: &[String]) -> Result<DataTable> {
    let n = table.n_rows();
    let rows: Vec<usize> = (0..values.len()).flat_map(|_| 0..n).collect();
    let mut out = table.select_rows(&rows);
    out.push_column(col, values.iter().flat_map(|v| std::iter::repeat_n(v.clone(), n)).collect())?;
    Ok(out)
}

fn without_column(table: &DataTable, drop: &str) -> Result<DataTable> {
    let mut cols = Vec::new();
    for name in table.names() {
        if name != drop {
            cols.push((name.clone(), table.text(name)?.to_vec()));
        }
    }
    DataTable::from_columns(cols)
}

/// Table of random-effect modes on the field scale: projected structures are
/// mapped back through their projection.
fn random_effects_table(model: &Model, result: &FitResult) -> Result<DataTable> {
    let u = result.mode();
    let s = model.latent.n_sites;
    let c = model.n_vars();
    let prior = &result.laplace.prior;
    let mut cols: [Vec<String>; 5] = Default::default();
    let mut push = |row: [String; 5]| {
        for (col, v) in cols.iter_mut().zip(row) {
            col.push(v);
        }
    };
    let blocks = [
        ("omega", model.sem.is_some(), model.latent.omega.start, 1, &prior.omega_m),
        ("epsilon", model.dsem.is_some(), model.latent.epsilon.start, model.n_times(), &prior.eps_m),
    ];
    for (name, present, start, n_times, proj) in blocks {
        if !present {
            continue;
        }
        let n_inner = c * n_times;
        for k in 0..n_inner {
            for site in 0..s {
                let value = match proj {
                    Some(m) => (0..m.ncols()).map(|j| m[(k, j)] * u[start + j * s + site]).sum(),
                    None => u[start + k * s + site],
                };
                let time = if name == "omega" { String::new() } else { model.times[k / c].to_string() };
                push([name.to_string(), model.variables[k % c].clone(), time, site.to_string(), format_number(value)]);
            }
        }
    }
    for sm in &model.smooths {
        for j in 0..sm.b_range.len() {
            let value = u[model.latent.smooth.start + sm.b_range.start + j];
            push(["smooth".into(), sm.name.clone(), String::new(), j.to_string(), format_number(value)]);
        }
    }
    let [block, variable, time, site, value] = cols;
    columns(vec![
        ("block", block),
        ("variable", variable),
        ("time", time),
        ("index", site),
        ("value", value),
    ])
}
