//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use msof_core::basis::make_basis;
use msof_core::model::{bootstrap_intervals, fit, FittedModel};
use msof_core::selection::{cross_validate, CvGrid};
use msof_core::simgen::{brownian_demo, fig1_curves, Fig1Case};
use msof_core::{KRule, PenaltyConfig, PenaltyMode, SimScenario};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::bench::{csv_row, run_cell, BenchCell, CSV_HEADER};
use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::io::{self, emit, json_doc, Meta};

#[derive(Debug, Parser)]
#[command(
    name = "msof",
    version,
    about = "Multivariate-response scalar-on-function regression"
)]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Tune by cross-validation and fit the selected model.
    Cv(CvArgs),
    /// Fit with given tuning parameters.
    Fit(FitArgs),
    /// Predict responses for new curves.
    Predict(PredictArgs),
    /// Percentile bootstrap prediction intervals.
    Bootstrap(BootstrapArgs),
    /// Population-level demonstrations.
    Demo(DemoArgs),
    /// Replicated simulation benchmark.
    Bench(BenchArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Cv(_) => "cv",
            Command::Fit(_) => "fit",
            Command::Predict(_) => "predict",
            Command::Bootstrap(_) => "bootstrap",
            Command::Demo(_) => "demo",
            Command::Bench(_) => "bench",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Smooth,
    Sparse,
}

impl From<Mode> for PenaltyMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Smooth => PenaltyMode::Smooth,
            Mode::Sparse => PenaltyMode::SmoothSparse,
        }
    }
}

fn sim_id(s: &str) -> Result<u8, String> {
    match s.parse::<u8>() {
        Ok(v @ 1..=4) => Ok(v),
        _ => Err(format!("unknown scenario {s:?}; expected 1, 2, 3 or 4")),
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario 1–4.
    #[arg(long, value_parser = sim_id)]
    pub sim: Option<u8>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cross-predictor correlation (scenario 3).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Moving-sum window (scenario 4).
    #[arg(long)]
    pub lag: Option<usize>,
    /// Grid size.
    #[arg(long)]
    pub t: Option<usize>,
    /// Sample set: 0 for training; other values give independent samples
    /// from the same coefficient functions.
    #[arg(long)]
    pub set: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BasisArgs {
    /// B-spline dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// B-spline degree.
    #[arg(long)]
    pub degree: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    /// Directory with curves.csv, grid.csv and responses.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub basis: BasisArgs,
    /// Output directory for model.json and cv.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Number of components.
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub basis: BasisArgs,
    /// Model file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory with curves.csv and grid.csv of the new samples.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Prediction CSV (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    /// Training data directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fitted model supplying the basis, tuning parameters and K.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Re-tune by cross-validation on every resample instead of reusing
    /// the model's K.
    #[arg(long)]
    pub retune: bool,
    /// Directory with curves.csv and grid.csv of the prediction points.
    #[arg(long)]
    pub new: Option<PathBuf>,
    /// Number of resamples.
    #[arg(long)]
    pub b: Option<usize>,
    /// Coverage level.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseArg {
    Ar,
    Cs,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// 1: response-covariance example; 2: Brownian-motion comparison.
    #[arg(long)]
    pub figure: Option<u8>,
    #[arg(long, value_enum)]
    pub case: Option<CaseArg>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Response dimension of figure 1.
    #[arg(long)]
    pub m: Option<usize>,
    /// Grid size of figure 2.
    #[arg(long)]
    pub t: Option<usize>,
    /// Largest K of figure 2.
    #[arg(long)]
    pub kmax: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_parser = sim_id)]
    pub sim: Option<u8>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub lag: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Penalties to compare (default: smooth, plus sparse when p > 1).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Option<Vec<Mode>>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Full grid: 100 replicates over every noise level and response
    /// dimension.
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs the command, and returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("msof: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = Config::load(cli.config.as_deref(), cli.command.name())?;
    let threads = cfg.pick_opt(cli.threads, "threads")?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Simulate(a) => simulate(a, &cfg),
        Command::Cv(a) => cv(a, &cfg),
        Command::Fit(a) => fit_cmd(a, &cfg),
        Command::Predict(a) => predict(a, &cfg),
        Command::Bootstrap(a) => bootstrap(a, &cfg),
        Command::Demo(a) => demo(a, &cfg),
        Command::Bench(a) => bench(a, &cfg),
    })
}

fn out_dir(cfg: &Config, flag: &Option<PathBuf>) -> CliResult<PathBuf> {
    cfg.pick(flag.clone(), "out", PathBuf::from("."))
}

fn simulate(a: &SimulateArgs, cfg: &Config) -> CliResult<()> {
    let sim: u8 = cfg.require(a.sim, "sim")?;
    sim_id(&sim.to_string()).map_err(CliError::Usage)?;
    let sc = SimScenario {
        id: sim,
        n: cfg.pick(a.n, "n", 100)?,
        m: cfg.pick(a.m, "m", 1)?,
        sigma: cfg.pick(a.sigma, "sigma", 0.1)?,
        t: cfg.pick(a.t, "t", 64)?,
        rho: cfg.pick(a.rho, "rho", 0.2)?,
        lag: cfg.pick(a.lag, "lag", 2)?,
        seed: cfg.pick(a.seed, "seed", 0)?,
    };
    sc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let set = cfg.pick(a.set, "set", 0)?;
    let dir = out_dir(cfg, &a.out)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        scenario: &'a SimScenario,
        set: u64,
    }
    let meta = Meta::new("simulate", Some(sc.seed), &Resolved { scenario: &sc, set });
    let ds = sc.model()?.sample(sc.n, sc.sigma, set)?;
    emit(
        Some(&dir.join(io::CURVES_FILE)),
        &io::curves_csv(&meta, ds.curves()),
    )?;
    emit(
        Some(&dir.join(io::GRID_FILE)),
        &io::grid_csv(&meta, ds.grid()),
    )?;
    emit(
        Some(&dir.join(io::RESPONSES_FILE)),
        &io::matrix_csv(&meta, "y", ds.responses()),
    )?;
    let truth = ds.truth().expect("simulated data carry the truth");
    emit(
        Some(&dir.join(io::TRUTH_FILE)),
        &io::truth_json(&meta, truth)?,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct BasisChoice {
    dim: usize,
    degree: usize,
}

fn basis_choice(a: &BasisArgs, cfg: &Config) -> CliResult<BasisChoice> {
    Ok(BasisChoice {
        dim: cfg.pick(a.dim, "dim", 30)?,
        degree: cfg.pick(a.degree, "degree", 3)?,
    })
}

fn require_path(cfg: &Config, flag: &Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
    cfg.require(flag.clone(), key)
}

pub const MODEL_FILE: &str = "model.json";
pub const CV_FILE: &str = "cv.json";

fn cv(a: &CvArgs, cfg: &Config) -> CliResult<()> {
    let data = require_path(cfg, &a.data, "data")?;
    let mode: Mode = cfg.require(a.mode, "mode")?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let bc = basis_choice(&a.basis, cfg)?;
    let dir = out_dir(cfg, &a.out)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        data: &'a Path,
        mode: Mode,
        basis: &'a BasisChoice,
        grid: CvGrid,
    }
    let grid = CvGrid::for_mode(mode.into());
    let ds = io::read_dataset(&data)?;
    let basis = make_basis(bc.dim, bc.degree).map_err(|e| CliError::Usage(e.to_string()))?;
    let result = cross_validate(&ds, &basis, &grid, seed)?;
    for w in &result.warnings {
        eprintln!("msof: warning: {w}");
    }
    let model = fit(&ds, &basis, &result.best.config(), result.best.k)?;
    let meta = Meta::new(
        "cv",
        Some(seed),
        &Resolved {
            data: &data,
            mode,
            basis: &bc,
            grid,
        },
    );
    emit(Some(&dir.join(CV_FILE)), &json_doc(&meta, "cv", &result)?)?;
    emit(
        Some(&dir.join(MODEL_FILE)),
        &json_doc(&meta, "model", &model)?,
    )?;
    Ok(())
}

fn fit_cmd(a: &FitArgs, cfg: &Config) -> CliResult<()> {
    let data = require_path(cfg, &a.data, "data")?;
    let mode: Mode = cfg.pick(a.mode, "mode", Mode::Smooth)?;
    let tau: f64 = cfg.require(a.tau, "tau")?;
    let eta: f64 = cfg.require(a.eta, "eta")?;
    let lambda: f64 = match mode {
        Mode::Smooth => cfg.pick(a.lambda, "lambda", 0.0)?,
        Mode::Sparse => cfg.require(a.lambda, "lambda")?,
    };
    let k: usize = cfg.require(a.k, "k")?;
    let bc = basis_choice(&a.basis, cfg)?;
    let out = cfg.pick(a.out.clone(), "out", PathBuf::from(MODEL_FILE))?;
    let config = match mode {
        Mode::Smooth if lambda != 0.0 => {
            return Err(CliError::Usage(
                "--lambda applies to --mode sparse only".into(),
            ))
        }
        Mode::Smooth => PenaltyConfig::smooth(tau, eta),
        Mode::Sparse => PenaltyConfig::sparse(tau, lambda, eta),
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        data: &'a Path,
        penalty: PenaltyConfig,
        k: usize,
        basis: &'a BasisChoice,
    }
    let ds = io::read_dataset(&data)?;
    let basis = make_basis(bc.dim, bc.degree).map_err(|e| CliError::Usage(e.to_string()))?;
    let model = fit(&ds, &basis, &config, k)?;
    let meta = Meta::new(
        "fit",
        None,
        &Resolved {
            data: &data,
            penalty: config,
            k,
            basis: &bc,
        },
    );
    emit(Some(&out), &json_doc(&meta, "model", &model)?)
}

fn load_model(path: &Path) -> CliResult<FittedModel> {
    io::read_json_doc(path, "model")
}

fn read_new_curves(dir: &Path) -> CliResult<msof_core::design::CurveArray> {
    let paths = io::DataPaths::in_dir(dir);
    let grid = io::read_grid(&paths.grid)?;
    io::read_curves(&paths.curves, &grid)
}

fn predict(a: &PredictArgs, cfg: &Config) -> CliResult<()> {
    let model_path = require_path(cfg, &a.model, "model")?;
    let data = require_path(cfg, &a.data, "data")?;
    let out = cfg.pick_opt(a.out.clone(), "out")?;
    let model = load_model(&model_path)?;
    let curves = read_new_curves(&data)?;
    let pred = model.predict(&curves)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        model: &'a Path,
        data: &'a Path,
    }
    let meta = Meta::new(
        "predict",
        None,
        &Resolved {
            model: &model_path,
            data: &data,
        },
    );
    emit(out.as_deref(), &io::matrix_csv(&meta, "y", &pred))
}

fn bootstrap(a: &BootstrapArgs, cfg: &Config) -> CliResult<()> {
    let data = require_path(cfg, &a.data, "data")?;
    let model_path = require_path(cfg, &a.model, "model")?;
    let new = require_path(cfg, &a.new, "new")?;
    let retune = a.retune || cfg.get::<bool>("retune")?.unwrap_or(false);
    let b = cfg.pick(a.b, "b", 200)?;
    let level = cfg.pick(a.level, "level", 0.95)?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let out = cfg.pick_opt(a.out.clone(), "out")?;
    if b < 2 || !(0.0..1.0).contains(&level) {
        return Err(CliError::Usage(
            "need --b >= 2 and --level in [0, 1)".into(),
        ));
    }
    let model = load_model(&model_path)?;
    let ds = io::read_dataset(&data)?;
    let xnew = read_new_curves(&new)?;
    let rule = if retune {
        KRule::CrossValidated {
            grid: model.config.mode,
            seed,
        }
    } else {
        KRule::Fixed(model.k())
    };
    let iv = bootstrap_intervals(
        &ds,
        &model.basis,
        &model.config,
        &rule,
        &xnew,
        b,
        level,
        seed,
    )?;
    if iv.redraws > 0 {
        eprintln!(
            "msof: warning: {} degenerate resamples were redrawn",
            iv.redraws
        );
    }

    #[derive(Serialize)]
    struct Resolved<'a> {
        data: &'a Path,
        model: &'a Path,
        new: &'a Path,
        retune: bool,
        b: usize,
        level: f64,
    }
    let meta = Meta::new(
        "bootstrap",
        Some(seed),
        &Resolved {
            data: &data,
            model: &model_path,
            new: &new,
            retune,
            b,
            level,
        },
    );
    emit(out.as_deref(), &intervals_csv(&meta, &iv.lower, &iv.upper))
}

/// Long form `sample_id,response,lower,upper`.
fn intervals_csv(meta: &Meta, lower: &DMatrix<f64>, upper: &DMatrix<f64>) -> String {
    let mut s = meta.comment_lines();
    s.push_str("sample_id,response,lower,upper\n");
    for i in 0..lower.nrows() {
        for r in 0..lower.ncols() {
            s.push_str(&format!(
                "{i},{},{},{}\n",
                r + 1,
                lower[(i, r)],
                upper[(i, r)]
            ));
        }
    }
    s
}

fn demo(a: &DemoArgs, cfg: &Config) -> CliResult<()> {
    let figure: u8 = cfg.require(a.figure, "figure")?;
    let out = cfg.pick_opt(a.out.clone(), "out")?;
    match figure {
        1 => {
            let case: CaseArg = cfg.pick(a.case, "case", CaseArg::Cs)?;
            let rho = cfg.pick(a.rho, "rho", 0.5)?;
            let m = cfg.pick(a.m, "m", 20)?;
            let fc = match case {
                CaseArg::Ar => Fig1Case::Ar,
                CaseArg::Cs => Fig1Case::Cs,
            };
            let curve = fig1_curves(m, fc, rho).map_err(|e| CliError::Usage(e.to_string()))?;

            #[derive(Serialize)]
            struct Resolved {
                figure: u8,
                case: CaseArg,
                rho: f64,
                m: usize,
            }
            let meta = Meta::new(
                "demo",
                None,
                &Resolved {
                    figure,
                    case,
                    rho,
                    m,
                },
            );
            let mut s = meta.comment_lines();
            s.push_str("k,relative_error\n");
            for (k, v) in curve.iter().enumerate() {
                s.push_str(&format!("{k},{v}\n"));
            }
            emit(out.as_deref(), &s)
        }
        2 => {
            let t = cfg.pick(a.t, "t", 64)?;
            let kmax = cfg.pick(a.kmax, "kmax", 5)?;
            let errs = brownian_demo(t, kmax).map_err(|e| CliError::Usage(e.to_string()))?;

            #[derive(Serialize)]
            struct Resolved {
                figure: u8,
                t: usize,
                kmax: usize,
            }
            let meta = Meta::new("demo", None, &Resolved { figure, t, kmax });
            let mut s = meta.comment_lines();
            s.push_str("k,optimal,fpca,fpls\n");
            for k in 0..kmax {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    k + 1,
                    errs.optimal[k],
                    errs.fpca[k],
                    errs.fpls[k]
                ));
            }
            emit(out.as_deref(), &s)
        }
        other => Err(CliError::Usage(format!(
            "unknown figure {other}; expected 1 or 2"
        ))),
    }
}

fn bench(a: &BenchArgs, cfg: &Config) -> CliResult<()> {
    let sim: u8 = cfg.require(a.sim, "sim")?;
    sim_id(&sim.to_string()).map_err(CliError::Usage)?;
    let full = a.full || cfg.get::<bool>("full")?.unwrap_or(false);
    let base = BenchCell {
        sim,
        n: cfg.pick(a.n, "n", 100)?,
        n_test: cfg.pick(a.n_test, "n_test", 500)?,
        m: cfg.pick(a.m, "m", 1)?,
        sigma: cfg.pick(a.sigma, "sigma", 0.1)?,
        rho: cfg.pick(a.rho, "rho", 0.2)?,
        lag: cfg.pick(a.lag, "lag", 2)?,
        reps: cfg.pick(a.reps, "reps", if full { 100 } else { 20 })?,
        seed: cfg.pick(a.seed, "seed", 0)?,
        dim: cfg.pick(a.dim, "dim", 30)?,
    };
    if base.reps == 0 || base.n_test == 0 {
        return Err(CliError::Usage(
            "--reps and --n-test must be positive".into(),
        ));
    }
    let default_methods = if base.p() > 1 {
        vec![Mode::Smooth, Mode::Sparse]
    } else {
        vec![Mode::Smooth]
    };
    let methods: Vec<Mode> = cfg.pick(a.methods.clone(), "methods", default_methods)?;
    let out = cfg.pick_opt(a.out.clone(), "out")?;

    let cells: Vec<BenchCell> = if full {
        let mut v = Vec::new();
        for sigma in [0.01, 0.1, 1.0] {
            for m in [1, 5, 10] {
                v.push(BenchCell {
                    sigma,
                    m,
                    ..base.clone()
                });
            }
        }
        v
    } else {
        vec![base.clone()]
    };

    #[derive(Serialize)]
    struct Resolved<'a> {
        cells: &'a [BenchCell],
        methods: &'a [Mode],
        full: bool,
    }
    let meta = Meta::new(
        "bench",
        Some(base.seed),
        &Resolved {
            cells: &cells,
            methods: &methods,
            full,
        },
    );
    let mut s = meta.comment_lines();
    s.push_str(CSV_HEADER);
    s.push('\n');
    for cell in &cells {
        for &mode in &methods {
            let summary = run_cell(cell, mode.into())?;
            s.push_str(&csv_row(cell, &summary));
            s.push('\n');
        }
    }
    emit(out.as_deref(), &s)
}
