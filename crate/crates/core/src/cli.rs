//! The `epiident` command line: argument grammar, run manifests and the
//! CSV/JSON/SVG files each subcommand leaves in its `--out` directory.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when a computation fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::coverage::{
    coverage_table, sigma_min_search, CoverageConfig, CoverageMethod, TruthLayer, DEFAULT_J, DEFAULT_LEVEL, DEFAULT_M,
    DEFAULT_REFERENCE_RUNS, HIGHLIGHT_BAND,
};
use crate::ctmc::{
    filter_extinct, gillespie_run, run_ensemble, write_ensemble_csv, write_events_csv, EnsembleManifest,
};
use crate::distfit::{
    ad_calibration, ad_rejection_rates, aic_win_table, fit_bank, write_ad_csv, write_fits_csv, Family, Stratification,
};
use crate::error::{Error, Result};
use crate::identify::{identifiability_verdict, mc_identifiability_with};
use crate::residuals::{
    ensemble_acf, ensemble_residuals, super_poisson_share, variance_mean, white_noise_band, write_scatter_csv,
    write_var_mean_csv, AcfCurve, VarMeanRow, DEFAULT_MAX_LAG,
};
use crate::rng::{RngSeed, DEFAULT_MASTER_SEED, GENERATOR};
use crate::scenarios::{self, grid_scenario, standard_grid, ListFormat, Scenario, DEFAULT_INITIAL_INFECTIOUS};
use crate::sir::{integrate_sir, EpidemicParameters, Trajectory, DEFAULT_HORIZON};
use crate::stats::spearman;
use crate::studies::{
    control_demo, histogram, project_control, register_at_peak, write_histogram_csv, ControlScenario,
};
use crate::svg::{Plot, PALETTE};
use crate::synth::{
    build_residual_bank, gaussian_dataset, warp_samples, warp_statistics, write_warp_table_csv, NoiseSpec, DEFAULT_BINS,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, Parser)]
#[command(
    name = "epiident",
    version,
    about = "Monte Carlo identifiability of the SIR model under different synthetic-noise models"
)]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Master seed every random stream is derived from.
    #[arg(long, global = true, default_value_t = DEFAULT_MASTER_SEED)]
    seed: u64,

    /// Results directory; nothing is written outside it.
    #[arg(long, global = true, default_value = "epiident-out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// The 16 (alpha, beta) combinations.
    Scenarios {
        #[command(subcommand)]
        action: ScenariosAction,
    },
    /// CTMC ensemble with its deterministic reference curve.
    Simulate(SimulateArgs),
    /// Residual scatter, autocorrelation and variance-mean diagnostics.
    Residuals(ResidualsArgs),
    /// Parametric fits and Anderson-Darling tests on binned residuals.
    Distfit(DistfitArgs),
    /// Coverage of KDE confidence regions, scenario by method.
    Coverage(CoverageArgs),
    /// Spread of (alpha, beta) estimates under one noise model.
    Identify(IdentifyArgs),
    /// Amplitude and time-shift statistics of CTMC runs.
    Warp(WarpArgs),
    /// Control-projection and peak-registration studies.
    Study {
        #[command(subcommand)]
        study: StudyCommand,
    },
    /// Summarize every results directory under a folder into report.md.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum ScenariosAction {
    /// Print the grid; with --format toml the output is a scenario file.
    List {
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Population; beta is rescaled to keep R0.
        #[arg(long, default_value_t = 1000)]
        n: u64,
        #[arg(long, default_value_t = DEFAULT_INITIAL_INFECTIOUS)]
        i0: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
    Toml,
}

/// A single (alpha, beta, N) setting.
#[derive(Debug, Args)]
struct PointArgs {
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0004)]
    beta: f64,
    #[arg(long, default_value_t = 1000)]
    n: u64,
    /// Initial infectious count.
    #[arg(long, default_value_t = DEFAULT_INITIAL_INFECTIOUS)]
    i0: u64,
    /// Last observation day.
    #[arg(long, default_value_t = DEFAULT_HORIZON as u32)]
    horizon: u32,
}

impl PointArgs {
    fn scenario(&self) -> Result<Scenario> {
        let params = EpidemicParameters::new(self.alpha, self.beta, self.n)?;
        let label = format!("a{}_b{}_n{}", self.alpha, self.beta, self.n);
        Scenario::new(label, params, self.i0, self.horizon)
    }
}

/// A set of scenarios.
#[derive(Debug, Args)]
struct SetArgs {
    /// `all`, a scenario TOML file, or a comma list of grid indices (1-16),
    /// labels, or `alpha:beta` pairs quoted at N = 1000.
    #[arg(long, default_value = "all")]
    scenarios: String,
    /// Population for grid scenarios; beta is rescaled to keep R0.
    #[arg(long, default_value_t = 1000)]
    n: u64,
    /// Initial infectious count for grid scenarios.
    #[arg(long, default_value_t = DEFAULT_INITIAL_INFECTIOUS)]
    i0: u64,
}

impl SetArgs {
    fn resolve(&self) -> Result<Vec<Scenario>> {
        let spec = self.scenarios.trim();
        if spec.ends_with(".toml") {
            let text = fs::read_to_string(spec)?;
            return scenarios::from_toml(&text);
        }
        let grid: Vec<Scenario> = standard_grid(self.n)?
            .into_iter()
            .map(|s| s.with_initial_infectious(self.i0))
            .collect::<Result<_>>()?;
        if spec == "all" {
            return Ok(grid);
        }
        let mut out: Vec<Scenario> = Vec::new();
        for token in spec.split(',').map(str::trim) {
            let sc = if let Ok(k) = token.parse::<usize>() {
                grid.get(k.wrapping_sub(1))
                    .cloned()
                    .ok_or_else(|| Error::Usage(format!("scenario index `{token}` is outside 1-16")))?
            } else if let Some((a, b)) = token.split_once(':') {
                let parse = |v: &str| v.parse::<f64>().map_err(|_| Error::Usage(format!("bad scenario `{token}`")));
                grid_scenario(parse(a)?, parse(b)?, self.n)?.with_initial_infectious(self.i0)?
            } else {
                grid.iter()
                    .find(|s| s.label == token)
                    .cloned()
                    .ok_or_else(|| Error::Usage(format!("unknown scenario `{token}`")))?
            };
            if out.iter().any(|s| s.label == sc.label) {
                return Err(Error::Usage(format!("scenario `{token}` listed twice")));
            }
            out.push(sc);
        }
        Ok(out)
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    point: PointArgs,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    /// Also write the full event log of every run to events/.
    #[arg(long)]
    events: bool,
    /// Drop runs with fewer than 10 infections in total.
    #[arg(long)]
    drop_extinct: bool,
}

#[derive(Debug, Args)]
struct ResidualsArgs {
    #[command(flatten)]
    point: PointArgs,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LAG)]
    max_lag: usize,
    /// Noise level of the Gaussian comparison ensemble.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long)]
    drop_extinct: bool,
}

#[derive(Debug, Args)]
struct DistfitArgs {
    #[command(flatten)]
    set: SetArgs,
    /// CTMC runs per scenario.
    #[arg(long, default_value_t = DEFAULT_REFERENCE_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Null replicates for the Anderson-Darling calibration (0 skips it).
    #[arg(long, default_value_t = 0)]
    calibrate: usize,
    /// Sample size of each calibration replicate.
    #[arg(long, default_value_t = 1000)]
    calibrate_n: usize,
}

#[derive(Debug, Args)]
struct CoverageArgs {
    #[command(flatten)]
    set: SetArgs,
    /// Comma list of ctmc, gaussian:SIGMA, empirical, hybrid.
    #[arg(long, default_value = "ctmc,gaussian:0.1,gaussian:0.2,empirical,hybrid")]
    methods: String,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: f64,
    /// Outer trials per cell.
    #[arg(long, default_value_t = DEFAULT_J)]
    j: usize,
    /// Inner datasets per trial.
    #[arg(long, default_value_t = DEFAULT_M)]
    m: usize,
    /// Source of the outer realizations.
    #[arg(long, value_enum, default_value_t = Truth::Ctmc)]
    truth: Truth,
    /// CTMC runs behind the empirical bank and warp distribution.
    #[arg(long, default_value_t = DEFAULT_REFERENCE_RUNS)]
    reference_runs: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Instead of the table, search the smallest Gaussian sigma reaching
    /// this coverage in each scenario.
    #[arg(long, value_name = "TARGET")]
    sigma_min: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Truth {
    Ctmc,
    Method,
}

#[derive(Debug, Args)]
struct IdentifyArgs {
    #[command(flatten)]
    point: PointArgs,
    #[arg(long, default_value = "ctmc")]
    method: String,
    /// Datasets to fit.
    #[arg(long, default_value_t = 1000)]
    m: usize,
    /// Leave CTMC datasets that never took off unfitted.
    #[arg(long)]
    drop_extinct: bool,
}

#[derive(Debug, Args)]
struct WarpArgs {
    #[command(flatten)]
    set: SetArgs,
    /// Comma list of populations; beta is rescaled to keep R0.
    #[arg(long, default_value = "1000")]
    populations: String,
    #[arg(long, default_value_t = 1000)]
    runs: usize,
}

#[derive(Debug, Subcommand)]
enum StudyCommand {
    /// Near-equivalent fits to early incidence and their control projections.
    Control(ControlArgs),
    /// Peak registration of a CTMC ensemble against the ODE.
    Register(RegisterArgs),
}

#[derive(Debug, Args)]
struct ControlArgs {
    #[arg(long, default_value_t = DEFAULT_INITIAL_INFECTIOUS)]
    i0: u64,
    /// Fraction of transmission removed by the intervention.
    #[arg(long, default_value_t = crate::studies::DEFAULT_REDUCTION)]
    reduction: f64,
    #[arg(long, default_value_t = crate::studies::DEFAULT_INTERVENTION_DAY)]
    intervention_day: f64,
    /// Histogram bins for final cumulative incidence.
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0004)]
    beta: f64,
    #[arg(long, default_value_t = 1000)]
    n: u64,
    #[arg(long, default_value_t = DEFAULT_INITIAL_INFECTIOUS)]
    i0: u64,
    #[arg(long, default_value_t = 200)]
    runs: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Folder holding result directories (default: the --out directory).
    input: Option<PathBuf>,
}

/// Why a command stopped.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Compute(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Compute(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Compute(e.into())
    }
}

/// Input validation: any error becomes a usage error.
fn check<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Usage(m) => Failure::Usage(m),
        other => Failure::Usage(other.to_string()),
    })
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Self-describing record of one run, written when the run starts and
/// rewritten when it ends.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub subcommand: String,
    pub master_seed: u64,
    pub tool_version: String,
    pub prng: String,
    pub threads: usize,
    pub parameters: BTreeMap<String, Value>,
    pub scenario_hashes: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub exclusions: BTreeMap<String, usize>,
    pub outputs: Vec<String>,
    pub error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct Ctx {
    argv: Vec<String>,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn master(&self) -> RngSeed {
        RngSeed::from_master(self.seed)
    }

    fn open(&self, subcommand: &str, parameters: Value, scenarios: &[Scenario]) -> Result<Outdir> {
        fs::create_dir_all(&self.out)?;
        let parameters = match parameters {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        let manifest = RunManifest {
            command_line: self.argv.clone(),
            subcommand: subcommand.into(),
            master_seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            prng: GENERATOR.into(),
            threads: rayon::current_num_threads(),
            parameters,
            scenario_hashes: scenarios.iter().map(|s| (s.label.clone(), s.content_hash())).collect(),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            exclusions: BTreeMap::new(),
            outputs: Vec::new(),
            error: None,
        };
        let od = Outdir {
            root: self.out.clone(),
            manifest,
            done: false,
        };
        od.save()?;
        Ok(od)
    }
}

/// The results directory of one command. If dropped before `finish`, the
/// manifest is rewritten with status `failed`.
struct Outdir {
    root: PathBuf,
    manifest: RunManifest,
    done: bool,
}

impl Outdir {
    fn save(&self) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.root.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    fn plot(&mut self, name: &str, plot: &Plot) -> Result<()> {
        self.write(name, |w| plot.write_to(w))
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn exclude(&mut self, key: impl Into<String>, count: usize) {
        self.manifest.exclusions.insert(key.into(), count);
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.status = "complete".into();
        self.manifest.finished_unix = Some(now());
        self.done = true;
        self.save()
    }
}

impl Drop for Outdir {
    fn drop(&mut self) {
        if !self.done {
            self.manifest.status = "failed".into();
            self.manifest.finished_unix = Some(now());
            let _ = self.save();
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let ctx = Ctx {
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        seed: cli.seed,
        out: cli.out.clone(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: usage: --threads must be at least 1");
            return 1;
        }
        pool = pool.num_threads(n);
    }
    let outcome = match pool.build() {
        Ok(pool) => pool.install(|| run(&ctx, cli.command)),
        Err(e) => Err(Failure::Compute(Error::InvalidInput(e.to_string()))),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: usage: {m}");
            1
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(ctx: &Ctx, command: Command) -> Result<(), Failure> {
    match command {
        Command::Scenarios { action } => scenarios_cmd(action),
        Command::Simulate(a) => simulate_cmd(ctx, a),
        Command::Residuals(a) => residuals_cmd(ctx, a),
        Command::Distfit(a) => distfit_cmd(ctx, a),
        Command::Coverage(a) => coverage_cmd(ctx, a),
        Command::Identify(a) => identify_cmd(ctx, a),
        Command::Warp(a) => warp_cmd(ctx, a),
        Command::Study { study } => match study {
            StudyCommand::Control(a) => control_cmd(ctx, a),
            StudyCommand::Register(a) => register_cmd(ctx, a),
        },
        Command::Report(a) => report_cmd(ctx, a),
    }
}

fn scenarios_cmd(action: ScenariosAction) -> Result<(), Failure> {
    let ScenariosAction::List { format, n, i0 } = action;
    let grid: Vec<Scenario> = check(
        standard_grid(n).and_then(|g| g.into_iter().map(|s| s.with_initial_infectious(i0)).collect()),
    )?;
    let text = match format {
        Format::Table => scenarios::render(&grid, ListFormat::Table),
        Format::Csv => scenarios::render(&grid, ListFormat::Csv),
        Format::Json => scenarios::render(&grid, ListFormat::Json),
        Format::Toml => scenarios::to_toml(&grid),
    };
    print!("{text}");
    Ok(())
}

fn simulate_cmd(ctx: &Ctx, a: SimulateArgs) -> Result<(), Failure> {
    let sc = check(a.point.scenario())?;
    if a.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let init = check(sc.count_initial())?;
    let seed = ctx.master();
    let mut od = ctx.open(
        "simulate",
        json!({"alpha": a.point.alpha, "beta": a.point.beta, "n": a.point.n, "i0": a.point.i0,
               "horizon": a.point.horizon, "runs": a.runs, "events": a.events, "drop_extinct": a.drop_extinct}),
        std::slice::from_ref(&sc),
    )?;
    let ode = integrate_sir(&sc.params, &sc.initial, &sc.grid)?;
    let all = run_ensemble(&sc.params, &init, &sc.grid, a.runs, seed)?;
    let ens = filter_extinct(all, a.drop_extinct);
    od.exclude("extinct_dropped", a.runs - ens.len());
    od.write("ensemble.csv", |w| write_ensemble_csv(&ens, w))?;
    od.json("ensemble.json", &EnsembleManifest::new(sc.params, init, &sc.grid, seed, ens.len()))?;
    od.write("ode.csv", |w| ode.trajectory.write_csv(w))?;
    if a.events {
        for j in 0..a.runs {
            let log = gillespie_run(&sc.params, &init, sc.grid.t_end, seed.offset(j as u64))?;
            od.write(&format!("events/run_{j:05}.csv"), |w| write_events_csv(&log, w))?;
        }
    }
    od.plot("ensemble.svg", &fan_plot("CTMC runs and ODE", &ens, &ode.trajectory))?;
    od.finish()?;
    Ok(())
}

fn fan_plot(title: &str, runs: &[Trajectory], ode: &Trajectory) -> Plot {
    let mut p = Plot::new(title, "day", "infectious").y_from_zero();
    for r in runs.iter().take(100) {
        p.line(xy(r.times(), &r.prevalence), PALETTE[5], 0.8, 0.35);
    }
    p.line(xy(ode.times(), &ode.prevalence), PALETTE[0], 2.0, 1.0);
    p
}

fn xy(x: &[f64], y: &[f64]) -> Vec<[f64; 2]> {
    x.iter().zip(y).map(|(&a, &b)| [a, b]).collect()
}

fn write_acf_rows(w: &mut impl Write, source: &str, c: &AcfCurve) -> Result<()> {
    for k in 0..c.lags.len() {
        writeln!(w, "{source},{},{},{},{}", c.lags[k], c.mean[k], c.lower[k], c.upper[k])?;
    }
    Ok(())
}

fn residuals_cmd(ctx: &Ctx, a: ResidualsArgs) -> Result<(), Failure> {
    let sc = check(a.point.scenario())?;
    let noise = check(NoiseSpec::new(a.sigma))?;
    if a.runs < 2 {
        return Err(usage("--runs must be at least 2"));
    }
    let init = check(sc.count_initial())?;
    let seed = ctx.master();
    let mut od = ctx.open(
        "residuals",
        json!({"alpha": a.point.alpha, "beta": a.point.beta, "n": a.point.n, "i0": a.point.i0,
               "horizon": a.point.horizon, "runs": a.runs, "max_lag": a.max_lag, "sigma": a.sigma,
               "drop_extinct": a.drop_extinct, "acf_centering": "per-run mean"}),
        std::slice::from_ref(&sc),
    )?;
    let ode = integrate_sir(&sc.params, &sc.initial, &sc.grid)?.trajectory;
    let all = run_ensemble(&sc.params, &init, &sc.grid, a.runs, seed.derive(&[0]))?;
    let ens = filter_extinct(all, a.drop_extinct);
    od.exclude("extinct_dropped", a.runs - ens.len());
    let ctmc = ensemble_residuals(&ens, &ode)?;
    let gauss_data = (0..a.runs)
        .map(|k| gaussian_dataset(&ode, noise, seed.derive(&[1, k as u64])))
        .collect::<Result<Vec<_>>>()?;
    let gauss = ensemble_residuals(&gauss_data, &ode)?;

    let ctmc_series: Vec<&[f64]> = ctmc.iter().map(|s| s.residuals.as_slice()).collect();
    let gauss_series: Vec<&[f64]> = gauss.iter().map(|s| s.residuals.as_slice()).collect();
    let acf_ctmc = ensemble_acf(&ctmc_series, a.max_lag)?;
    let acf_gauss = ensemble_acf(&gauss_series, a.max_lag)?;
    od.exclude("acf_undefined_ctmc", acf_ctmc.runs_skipped);
    od.exclude("acf_undefined_gaussian", acf_gauss.runs_skipped);
    let rows = variance_mean(&ens, &ode)?;

    od.write("residual_scatter.csv", |w| write_scatter_csv(&ctmc, w))?;
    od.write("acf.csv", |w| {
        writeln!(w, "source,lag,mean,lower,upper")?;
        write_acf_rows(w, "ctmc", &acf_ctmc)?;
        write_acf_rows(w, &format!("gaussian:{}", a.sigma), &acf_gauss)
    })?;
    od.write("var_mean.csv", |w| write_var_mean_csv(&rows, w))?;

    let length = gauss.first().map_or(0, |s| s.len());
    let band = white_noise_band(length);
    let outside = acf_gauss.mean[1..].iter().filter(|v| v.abs() > band).count();
    od.json(
        "summary.json",
        &json!({
            "super_poisson_pre_peak_share": super_poisson_share(&rows),
            "ctmc_acf_lag1": acf_ctmc.mean.get(1),
            "gaussian_acf_lag1": acf_gauss.mean.get(1),
            "white_noise_band": band,
            "series_length": length,
            "gaussian_lags_outside_band": outside,
            "runs": ens.len(),
        }),
    )?;

    let mut scatter = Plot::new("Scaled residuals", "day", "(CTMC - ODE) / ODE");
    for s in ctmc.iter().take(100) {
        let (pre, post): (Vec<usize>, Vec<usize>) =
            (0..s.len()).partition(|&k| s.phases[k] == crate::residuals::Phase::Pre);
        scatter.points(pre.iter().map(|&k| [s.times[k], s.residuals[k]]), PALETTE[0], 1.2, 0.3);
        scatter.points(post.iter().map(|&k| [s.times[k], s.residuals[k]]), PALETTE[1], 1.2, 0.3);
    }
    od.plot("residual_scatter.svg", &scatter)?;

    let mut acf_plot = Plot::new("Mean autocorrelation", "lag (days)", "ACF");
    for (c, col) in [(&acf_ctmc, PALETTE[0]), (&acf_gauss, PALETTE[3])] {
        let lags: Vec<f64> = c.lags.iter().map(|&k| k as f64).collect();
        acf_plot.line(xy(&lags, &c.mean), col, 2.0, 1.0);
        acf_plot.line(xy(&lags, &c.lower), col, 1.0, 0.5);
        acf_plot.line(xy(&lags, &c.upper), col, 1.0, 0.5);
    }
    let span = [0.0, a.max_lag as f64];
    acf_plot.line(span.map(|x| [x, band]), PALETTE[5], 1.0, 0.8);
    acf_plot.line(span.map(|x| [x, -band]), PALETTE[5], 1.0, 0.8);
    od.plot("acf.svg", &acf_plot)?;

    let mut vm = Plot::new("Variance against mean", "mean infectious", "variance");
    let (pre, post): (Vec<&VarMeanRow>, Vec<&VarMeanRow>) =
        rows.iter().partition(|r| r.phase == crate::residuals::Phase::Pre);
    vm.points(pre.iter().map(|r| [r.mean, r.variance]), PALETTE[0], 2.0, 0.7);
    vm.points(post.iter().map(|r| [r.mean, r.variance]), PALETTE[1], 2.0, 0.7);
    let top = rows.iter().map(|r| r.mean).fold(0.0, f64::max);
    vm.line([[0.0, 0.0], [top, top]], PALETTE[5], 1.0, 1.0);
    od.plot("var_mean.svg", &vm)?;
    od.finish()?;
    Ok(())
}

fn distfit_cmd(ctx: &Ctx, a: DistfitArgs) -> Result<(), Failure> {
    let scs = check(a.set.resolve())?;
    if a.runs < 2 || a.bins == 0 {
        return Err(usage("--runs must be at least 2 and --bins at least 1"));
    }
    if a.calibrate > 0 && a.calibrate_n < crate::distfit::MIN_AD_SAMPLES {
        return Err(usage(format!("--calibrate-n must be at least {}", crate::distfit::MIN_AD_SAMPLES)));
    }
    let seed = ctx.master();
    let mut od = ctx.open(
        "distfit",
        json!({"scenarios": a.set.scenarios, "n": a.set.n, "i0": a.set.i0, "runs": a.runs, "bins": a.bins,
               "calibrate": a.calibrate, "calibrate_n": a.calibrate_n}),
        &scs,
    )?;
    let mut fits = Vec::new();
    for (si, sc) in scs.iter().enumerate() {
        let ode = integrate_sir(&sc.params, &sc.initial, &sc.grid)?.trajectory;
        let init = sc.count_initial()?;
        let ens = run_ensemble(&sc.params, &init, &sc.grid, a.runs, seed.derive(&[si as u64]))?;
        let bank = build_residual_bank(&ens, &ode, a.bins, &sc.label, sc.params)?;
        od.exclude(format!("{}/merged_strata", sc.label), bank.merged.len());
        let mut f = fit_bank(&bank)?;
        f.sort_by(|x, y| (x.bin, x.phase.to_string()).cmp(&(y.bin, y.phase.to_string())));
        let unfitted = f.iter().filter(|s| s.ranking.is_none()).count();
        od.exclude(format!("{}/unfitted_strata", sc.label), unfitted);
        fits.extend(f);
    }
    od.write("fits.csv", |w| write_fits_csv(&fits, w))?;
    od.write("ad_strata.csv", |w| {
        writeln!(w, "scenario,r0,bin,phase,n,nudged,a2,a2_star")?;
        for s in &fits {
            if let Some(ad) = &s.ad {
                writeln!(
                    w,
                    "{},{:.2},{},{},{},{},{},{}",
                    s.scenario, s.r0, s.bin, s.phase, s.n, s.nudged, ad.a2, ad.a2_star
                )?;
            }
        }
        Ok(())
    })?;
    // One file for all three stratifications; their cell names do not overlap.
    let overall = aic_win_table(&fits, Stratification::Overall);
    let tables = [
        overall.clone(),
        aic_win_table(&fits, Stratification::ByR0Band),
        aic_win_table(&fits, Stratification::ByPhase),
    ];
    od.write("aic_wins.csv", |w| {
        for (k, t) in tables.iter().enumerate() {
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            let text = String::from_utf8(buf).expect("ascii csv");
            let body = if k == 0 { &text[..] } else { text.split_once('\n').map_or("", |x| x.1) };
            w.write_all(body.as_bytes())?;
        }
        Ok(())
    })?;
    let rates = ad_rejection_rates(&fits);
    od.write("ad_rejections.csv", |w| write_ad_csv(&rates, w))?;
    if a.calibrate > 0 {
        let rows = ad_calibration(a.calibrate_n, a.calibrate, seed.derive(&[u64::MAX]))?;
        od.write("ad_calibration.csv", |w| {
            writeln!(w, "level,critical,rejection_rate")?;
            for r in &rows {
                writeln!(w, "{},{},{}", r.level, r.critical, r.rejection_rate)?;
            }
            Ok(())
        })?;
    }
    let names: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
    let mut bars = Plot::new("AIC win share (overall)", format!("family: {}", names.join(", ")), "share");
    bars.bars(
        Family::ALL
            .iter()
            .enumerate()
            .map(|(k, &f)| (k as f64, k as f64 + 0.8, overall.share("overall", f))),
        PALETTE[0],
    );
    od.plot("aic_wins.svg", &bars)?;
    od.finish()?;
    Ok(())
}

fn parse_methods(list: &str) -> Result<Vec<CoverageMethod>> {
    let methods: Vec<CoverageMethod> = list.split(',').map(str::parse).collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::Usage("no methods given".into()));
    }
    Ok(methods)
}

fn coverage_cmd(ctx: &Ctx, a: CoverageArgs) -> Result<(), Failure> {
    let scs = check(a.set.resolve())?;
    let methods = check(parse_methods(&a.methods))?;
    let mut template = CoverageConfig::new(methods[0], ctx.master());
    template.j_outer = a.j;
    template.m_inner = a.m;
    template.level = a.level;
    template.truth = match a.truth {
        Truth::Ctmc => TruthLayer::Ctmc,
        Truth::Method => TruthLayer::Method,
    };
    template.reference_runs = a.reference_runs;
    template.bins = a.bins;
    for &m in &methods {
        check(CoverageConfig { method: m, ..template.clone() }.validate())?;
    }
    if let Some(t) = a.sigma_min {
        if !(0.0..1.0).contains(&t) {
            return Err(usage(format!("--sigma-min target must be in [0, 1), got {t}")));
        }
    }
    let mut od = ctx.open(
        "coverage",
        json!({"scenarios": a.set.scenarios, "n": a.set.n, "i0": a.set.i0, "methods": a.methods,
               "level": a.level, "j": a.j, "m": a.m, "truth": format!("{:?}", a.truth).to_lowercase(),
               "reference_runs": a.reference_runs, "bins": a.bins, "sigma_min": a.sigma_min}),
        &scs,
    )?;

    if let Some(target) = a.sigma_min {
        let mut results = Vec::new();
        for (si, sc) in scs.iter().enumerate() {
            let cfg = CoverageConfig {
                seed: crate::coverage::cell_seed(template.seed, si),
                ..template.clone()
            };
            results.push((sc, sigma_min_search(sc, target, &cfg)?));
        }
        od.write("sigma_min.csv", |w| {
            writeln!(w, "label,alpha,beta,r0,sigma_min,saturated,monotonicity_violations")?;
            for (sc, r) in &results {
                writeln!(
                    w,
                    "{},{},{},{:.2},{},{},{}",
                    sc.label,
                    sc.params.alpha,
                    sc.params.beta,
                    sc.r0(),
                    r.sigma_min,
                    r.saturated,
                    r.monotonicity_violations
                )?;
            }
            Ok(())
        })?;
        od.write("sigma_curve.csv", |w| {
            writeln!(w, "label,step,sigma,coverage")?;
            for (sc, r) in &results {
                for (k, (s, c)) in r.curve.iter().enumerate() {
                    writeln!(w, "{},{k},{s},{c}", sc.label)?;
                }
            }
            Ok(())
        })?;
        let r0: Vec<f64> = results.iter().map(|(s, _)| s.r0()).collect();
        let sm: Vec<f64> = results.iter().map(|(_, r)| r.sigma_min).collect();
        od.json(
            "summary.json",
            &json!({"target": target, "spearman_r0_sigma_min": spearman(&r0, &sm).ok()}),
        )?;
        let mut p = Plot::new("Coverage against Gaussian sigma", "sigma", "coverage");
        for (k, (_, r)) in results.iter().enumerate() {
            let mut c = r.curve.clone();
            c.sort_by(|x, y| x.0.total_cmp(&y.0));
            p.line(c.iter().map(|&(s, v)| [s, v]), PALETTE[k % PALETTE.len()], 1.5, 1.0);
            p.points(c.iter().map(|&(s, v)| [s, v]), PALETTE[k % PALETTE.len()], 2.5, 1.0);
        }
        p.line([[0.0, target], [crate::coverage::SIGMA_UPPER, target]], PALETTE[5], 1.0, 0.8);
        od.plot("sigma_curve.svg", &p)?;
        od.finish()?;
        return Ok(());
    }

    let table = coverage_table(&scs, &methods, &template)?;
    for (row, sc) in table.cells.iter().zip(&scs) {
        for (cell, m) in row.iter().zip(&methods) {
            if let Some(r) = cell {
                od.exclude(format!("{}/{m}/trials", sc.label), r.excluded);
                od.exclude(format!("{}/{m}/inner_fits", sc.label), r.inner_failures);
            }
        }
    }
    od.write("coverage_table.csv", |w| table.write_csv(w))?;
    od.write("coverage_cells.csv", |w| table.write_cells_csv(w))?;
    if !table.errors.is_empty() {
        od.json("errors.json", &table.errors)?;
    }
    let mut p = Plot::new("Coverage by scenario", "R0", "coverage");
    for k in 0..methods.len() {
        let pts: Vec<[f64; 2]> = table
            .column(k)
            .iter()
            .zip(&scs)
            .filter_map(|(c, s)| c.map(|v| [s.r0(), v]))
            .collect();
        p.points(pts, PALETTE[k % PALETTE.len()], 3.0, 0.9);
    }
    let r0_max = scs.iter().map(Scenario::r0).fold(0.0, f64::max);
    p.line([[0.0, a.level], [r0_max, a.level]], PALETTE[5], 1.0, 0.8);
    od.plot("coverage.svg", &p)?;
    od.finish()?;
    Ok(())
}

fn identify_cmd(ctx: &Ctx, a: IdentifyArgs) -> Result<(), Failure> {
    let sc = check(a.point.scenario())?;
    let method: CoverageMethod = check(a.method.parse())?;
    if a.m < crate::identify::MIN_CLOUD {
        return Err(usage(format!("--m must be at least {}", crate::identify::MIN_CLOUD)));
    }
    let mut od = ctx.open(
        "identify",
        json!({"alpha": a.point.alpha, "beta": a.point.beta, "n": a.point.n, "i0": a.point.i0,
               "horizon": a.point.horizon, "method": method.to_string(), "m": a.m,
               "drop_extinct": a.drop_extinct}),
        std::slice::from_ref(&sc),
    )?;
    let run = mc_identifiability_with(&sc, method, a.m, ctx.master(), a.drop_extinct)?;
    od.exclude("failed_fits", run.summary.excluded - run.dropped_extinct);
    od.exclude("dropped_extinct", run.dropped_extinct);
    od.write("estimates.csv", |w| run.write_estimates_csv(w))?;
    let verdict = match method {
        CoverageMethod::Gaussian(s) => Some(identifiability_verdict(&run.summary, NoiseSpec::new(s)?)?),
        _ => None,
    };
    od.json("summary.json", &json!({"spread": run.summary, "identifiable": verdict}))?;
    let mut p = Plot::new(format!("Estimates, {method}"), "alpha", "beta");
    p.points(run.cloud().into_iter().map(|(x, y)| [x, y]), PALETTE[0], 1.5, 0.4);
    if let Some(e) = &run.summary.ellipse {
        let mut b = e.boundary(120);
        b.push(b[0]);
        p.line(b, PALETTE[1], 1.5, 1.0);
    }
    p.points([[sc.params.alpha, sc.params.beta]], "black", 4.0, 1.0);
    od.plot("scatter.svg", &p)?;
    od.finish()?;
    Ok(())
}

fn warp_cmd(ctx: &Ctx, a: WarpArgs) -> Result<(), Failure> {
    let scs = check(a.set.resolve())?;
    let pops: Vec<u64> = a
        .populations
        .split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| usage(format!("bad population `{p}`"))))
        .collect::<Result<_, _>>()?;
    if pops.iter().any(|&n| n < 2) || a.runs == 0 {
        return Err(usage("populations must be at least 2 and --runs at least 1"));
    }
    let mut od = ctx.open(
        "warp",
        json!({"scenarios": a.set.scenarios, "i0": a.set.i0, "populations": a.populations, "runs": a.runs}),
        &scs,
    )?;
    let seed = ctx.master();
    let cells = warp_statistics(&scs, &pops, a.runs, seed)?;
    for c in &cells {
        od.exclude(format!("{}/n{}/no_takeoff", c.label, c.population), c.runs - c.taken_off);
    }
    od.write("warp_table.csv", |w| write_warp_table_csv(&cells, w))?;
    // Raw pairs of the first population, for the amplitude/shift scatter.
    let mut pairs = Vec::new();
    for (si, sc) in scs.iter().enumerate() {
        let p0 = sc.params.rescaled_to(pops[0])?;
        let i0 = (sc.initial.infectious.round() as u64).min(pops[0] - 1);
        let cell = Scenario::new(sc.label.clone(), p0, i0, sc.grid.t_end as u32)?;
        let (w, _) = warp_samples(&cell, a.runs, seed.derive(&[si as u64, 0]))?;
        pairs.push((sc.label.clone(), w));
    }
    od.write("warp_samples.csv", |w| {
        writeln!(w, "label,run,amplitude,shift")?;
        for (label, ws) in &pairs {
            for (k, s) in ws.iter().enumerate() {
                writeln!(w, "{label},{k},{},{}", s.amplitude, s.shift)?;
            }
        }
        Ok(())
    })?;
    let mut rho = BTreeMap::new();
    let mut p = Plot::new("Time-shift spread against R0", "R0", "sd of time shift (days)");
    for (k, &n) in pops.iter().enumerate() {
        let sel: Vec<(f64, f64)> = cells
            .iter()
            .filter(|c| c.population == n)
            .filter_map(|c| c.sd_dt.map(|s| (c.r0, s)))
            .collect();
        let (x, y): (Vec<f64>, Vec<f64>) = sel.iter().copied().unzip();
        rho.insert(n.to_string(), spearman(&x, &y).ok());
        p.points(sel.iter().map(|&(r, s)| [r, s]), PALETTE[k % PALETTE.len()], 3.0, 0.9);
    }
    od.json("summary.json", &json!({"spearman_r0_sd_shift": rho}))?;
    od.plot("warp_sd_shift.svg", &p)?;
    let mut s = Plot::new("Amplitude and time shift", "time shift (days)", "amplitude");
    for (k, (_, ws)) in pairs.iter().enumerate() {
        s.points(ws.iter().map(|w| [w.shift, w.amplitude]), PALETTE[k % PALETTE.len()], 1.2, 0.4);
    }
    od.plot("warp_samples.svg", &s)?;
    od.finish()?;
    Ok(())
}

fn control_cmd(ctx: &Ctx, a: ControlArgs) -> Result<(), Failure> {
    if a.bins == 0 {
        return Err(usage("--bins must be at least 1"));
    }
    if a.i0 == 0 || a.i0 >= 1000 {
        return Err(usage("--i0 must be in 1..1000"));
    }
    let probe = ControlScenario {
        reduction: a.reduction,
        intervention_day: a.intervention_day,
        ..ControlScenario::new(check(EpidemicParameters::new(0.1, 0.0004, 1000))?)
    };
    check(probe.validate())?;
    let mut od = ctx.open(
        "study control",
        json!({"i0": a.i0, "reduction": a.reduction, "intervention_day": a.intervention_day, "bins": a.bins,
               "truth_alpha": crate::studies::DEFAULT_DEMO_RATES.0, "truth_beta": crate::studies::DEFAULT_DEMO_RATES.1,
               "window_days": crate::studies::DEFAULT_WINDOW_DAYS, "noise": crate::studies::DEFAULT_DEMO_NOISE,
               "band": crate::studies::DEFAULT_BAND, "cloud_size": crate::studies::DEFAULT_CLOUD_SIZE}),
        &[],
    )?;
    let mut demo = control_demo(a.i0, ctx.master())?;
    if demo.scenario.reduction != a.reduction || demo.scenario.intervention_day != a.intervention_day {
        demo.scenario.reduction = a.reduction;
        demo.scenario.intervention_day = a.intervention_day;
        demo.projection = project_control(&demo.cloud.pairs(), &demo.scenario, &demo.initial)?;
    }
    od.exclude("failed_starts", demo.cloud.failed_starts);
    od.exclude("failed_projections", demo.projection.excluded);
    od.write("cloud.csv", |w| {
        writeln!(w, "rank,alpha,beta,sse")?;
        for (k, e) in demo.cloud.fits.iter().enumerate() {
            writeln!(w, "{k},{},{},{}", e.alpha_hat, e.beta_hat, e.sse)?;
        }
        Ok(())
    })?;
    od.write("fit_fan.csv", |w| demo.write_fit_fan_csv(w))?;
    od.write("projection_fan.csv", |w| demo.projection.write_fan_csv(w))?;
    let bins = histogram(&demo.projection.finals, a.bins)?;
    od.write("final_size_histogram.csv", |w| write_histogram_csv(&bins, w))?;
    od.json(
        "summary.json",
        &json!({"fits": demo.cloud.fits.len(), "best_sse": demo.cloud.best_sse,
                "spread_ratio": demo.projection.spread_ratio(), "warnings": demo.cloud.warnings}),
    )?;

    let mut fit = Plot::new("Near-equivalent fits to early incidence", "day", "cumulative incidence").y_from_zero();
    for (x, y) in demo.cloud.pairs() {
        let p = EpidemicParameters::new(x, y, demo.truth.population)?;
        let sol = integrate_sir(&p, &demo.initial, &demo.window)?;
        let cum = sol.trajectory.cumulative_incidence().unwrap_or_default();
        fit.line(xy(demo.window.times(), &cum), PALETTE[5], 0.8, 0.4);
    }
    fit.points(xy(demo.window.times(), &demo.data), "black", 2.5, 1.0);
    od.plot("fit_fan.svg", &fit)?;
    let mut proj = Plot::new("Projections under control", "day", "infectious").y_from_zero();
    for r in &demo.projection.runs {
        proj.line(xy(&r.times, &r.prevalence), PALETTE[0], 0.8, 0.35);
    }
    od.plot("projection_fan.svg", &proj)?;
    let mut h = Plot::new("Final cumulative incidence", "final size", "fits");
    h.bars(bins.iter().map(|b| (b.lower, b.upper, b.count as f64)), PALETTE[0]);
    od.plot("final_size_histogram.svg", &h)?;
    let mut c = Plot::new("Fitted (alpha, beta)", "alpha", "beta");
    c.points(demo.cloud.pairs().into_iter().map(|(x, y)| [x, y]), PALETTE[0], 2.0, 0.6);
    c.points([[demo.truth.alpha, demo.truth.beta]], "black", 4.0, 1.0);
    od.plot("cloud.svg", &c)?;
    od.finish()?;
    Ok(())
}

fn register_cmd(ctx: &Ctx, a: RegisterArgs) -> Result<(), Failure> {
    let params = check(EpidemicParameters::new(a.alpha, a.beta, a.n))?;
    let sc = check(Scenario::new(
        format!("a{}_b{}_n{}", a.alpha, a.beta, a.n),
        params,
        a.i0,
        DEFAULT_HORIZON as u32,
    ))?;
    if a.runs < crate::studies::MIN_REGISTRATION_RUNS {
        return Err(usage(format!("--runs must be at least {}", crate::studies::MIN_REGISTRATION_RUNS)));
    }
    let mut od = ctx.open(
        "study register",
        json!({"alpha": a.alpha, "beta": a.beta, "n": a.n, "i0": a.i0, "runs": a.runs}),
        std::slice::from_ref(&sc),
    )?;
    let ode = integrate_sir(&sc.params, &sc.initial, &sc.grid)?.trajectory;
    let ens = run_ensemble(&sc.params, &sc.count_initial()?, &sc.grid, a.runs, ctx.master())?;
    let reg = register_at_peak(&ens, &ode)?;
    od.exclude("no_takeoff", reg.skipped);
    od.write("ensemble.csv", |w| write_ensemble_csv(&ens, w))?;
    od.write("aligned.csv", |w| reg.write_aligned_csv(w))?;
    od.write("means.csv", |w| reg.write_means_csv(&ode, w))?;
    let (rel_reg, rel_raw) = reg.relative_rmse();
    od.json(
        "summary.json",
        &json!({"rmse_registered": reg.rmse_registered, "rmse_unaligned": reg.rmse_unaligned,
                "relative_rmse_registered": rel_reg, "relative_rmse_unaligned": rel_raw,
                "ode_peak": reg.ode_peak, "window": [reg.window.0, reg.window.1], "skipped": reg.skipped}),
    )?;
    od.plot("ensemble.svg", &fan_plot("CTMC runs", &ens, &ode))?;
    od.plot("aligned.svg", &fan_plot("Runs aligned at the peak", &reg.aligned, &ode))?;
    let mut m = Plot::new("Means against the ODE", "day", "infectious").y_from_zero();
    m.line(xy(ode.times(), &ode.prevalence), "black", 2.0, 1.0);
    m.line(xy(ode.times(), &reg.registered_mean.prevalence), PALETTE[0], 1.5, 1.0);
    m.line(xy(ode.times(), &reg.unaligned_mean.prevalence), PALETTE[1], 1.5, 1.0);
    od.plot("means.svg", &m)?;
    od.finish()?;
    Ok(())
}

/// Result directory found by the report: its manifest and location.
struct Found {
    dir: PathBuf,
    manifest: Value,
}

fn find_results(root: &Path) -> Vec<Found> {
    let mut dirs = vec![root.to_path_buf()];
    if let Ok(rd) = fs::read_dir(root) {
        let mut subs: Vec<PathBuf> = rd.flatten().map(|e| e.path()).filter(|p| p.is_dir()).collect();
        subs.sort();
        dirs.extend(subs);
    }
    dirs.into_iter()
        .filter_map(|dir| {
            let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
            let manifest = serde_json::from_str(&text).ok()?;
            Some(Found { dir, manifest })
        })
        .collect()
}

fn read_csv(path: &Path) -> Option<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    let header = lines.next()?.split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    Some((header, rows))
}

fn md_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out.push('\n');
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

fn json_num(v: &Value, path: &[&str]) -> String {
    let mut cur = v;
    for k in path {
        let next = match k.parse::<usize>() {
            Ok(i) => cur.get(i),
            Err(_) => cur.get(k),
        };
        match next {
            Some(x) => cur = x,
            None => return "missing".into(),
        }
    }
    if let Some(k) = cur.as_u64() {
        return k.to_string();
    }
    match cur.as_f64() {
        Some(x) => format!("{x:.4}"),
        None if cur.is_null() => "n/a".into(),
        None => cur.to_string(),
    }
}

/// Renders `report.md` from every results directory in `root` and its
/// immediate subdirectories. Sections without results say so.
pub fn render_report(root: &Path) -> String {
    let found = find_results(root);
    let of = |name: &str| -> Vec<&Found> {
        found.iter().filter(|f| f.manifest["subcommand"] == name).collect()
    };
    let mut s = String::from("# epiident report\n\n");
    s.push_str(&format!("Results folder: `{}`\n\n", root.display()));

    s.push_str("## Coverage\n\n");
    let cov = of("coverage");
    let mut any = false;
    for f in &cov {
        let level = f.manifest["parameters"]["level"].as_f64().unwrap_or(DEFAULT_LEVEL);
        let table_path = f.dir.join("coverage_table.csv");
        if let Some((header, rows)) = read_csv(&table_path) {
            any = true;
            s.push_str(&format!(
                "`{}` (J = {}, M = {}, level {level}). Bold cells lie within {HIGHLIGHT_BAND} of the level.\n\n",
                rel(root, &f.dir),
                f.manifest["parameters"]["j"],
                f.manifest["parameters"]["m"]
            ));
            let rows: Vec<Vec<String>> = rows
                .into_iter()
                .map(|r| {
                    r.into_iter()
                        .enumerate()
                        .map(|(k, c)| match (k >= 3, c.parse::<f64>()) {
                            (true, Ok(v)) if (v - level).abs() <= HIGHLIGHT_BAND + 1e-12 => format!("**{c}**"),
                            (true, _) if c.is_empty() => "missing".into(),
                            _ => c,
                        })
                        .collect()
                })
                .collect();
            md_table(&mut s, &header, &rows);
        }
        if let Some((_, rows)) = read_csv(&f.dir.join("sigma_min.csv")) {
            any = true;
            s.push_str(&format!("`{}` smallest Gaussian sigma:\n\n", rel(root, &f.dir)));
            let header: Vec<String> = ["label", "alpha", "beta", "R0", "sigma_min", "saturated", "violations"]
                .map(String::from)
                .to_vec();
            md_table(&mut s, &header, &rows);
        }
        if !table_path.exists() && !f.dir.join("sigma_min.csv").exists() {
            any = true;
            s.push_str(&format!("`{}`: coverage outputs missing.\n\n", rel(root, &f.dir)));
        }
    }
    if !any {
        s.push_str("No results.\n\n");
    }

    s.push_str("## Estimate spread\n\n");
    let ids = of("identify");
    if ids.is_empty() {
        s.push_str("No results.\n\n");
    } else {
        let header: Vec<String> = ["run", "method", "alpha", "beta", "used", "CV alpha %", "CV beta %", "ARE alpha %", "ARE beta %"]
            .map(String::from)
            .to_vec();
        let rows: Vec<Vec<String>> = ids
            .iter()
            .map(|f| {
                let v: Value = fs::read_to_string(f.dir.join("summary.json"))
                    .ok()
                    .and_then(|t| serde_json::from_str(&t).ok())
                    .unwrap_or(Value::Null);
                let p = &f.manifest["parameters"];
                vec![
                    rel(root, &f.dir),
                    p["method"].as_str().unwrap_or("?").to_string(),
                    p["alpha"].to_string(),
                    p["beta"].to_string(),
                    json_num(&v, &["spread", "used"]),
                    json_num(&v, &["spread", "cv", "0"]),
                    json_num(&v, &["spread", "cv", "1"]),
                    json_num(&v, &["spread", "are", "0"]),
                    json_num(&v, &["spread", "are", "1"]),
                ]
            })
            .collect();
        md_table(&mut s, &header, &rows);
    }

    s.push_str("## Residual structure\n\n");
    summaries(
        &mut s,
        root,
        &of("residuals"),
        &[
            ("super-Poisson pre-peak share", &["super_poisson_pre_peak_share"]),
            ("CTMC ACF lag 1", &["ctmc_acf_lag1"]),
            ("Gaussian ACF lag 1", &["gaussian_acf_lag1"]),
            ("white-noise band", &["white_noise_band"]),
            ("Gaussian lags outside band", &["gaussian_lags_outside_band"]),
        ],
    );

    s.push_str("## Residual distributions\n\n");
    let dfs = of("distfit");
    if dfs.is_empty() {
        s.push_str("No results.\n\n");
    }
    for f in dfs {
        s.push_str(&format!("`{}`\n\n", rel(root, &f.dir)));
        for file in ["aic_wins.csv", "ad_rejections.csv", "ad_calibration.csv"] {
            if let Some((h, r)) = read_csv(&f.dir.join(file)) {
                s.push_str(&format!("{file}:\n\n"));
                md_table(&mut s, &h, &r);
            }
        }
    }

    s.push_str("## Warps\n\n");
    let ws = of("warp");
    if ws.is_empty() {
        s.push_str("No results.\n\n");
    }
    for f in ws {
        match read_csv(&f.dir.join("warp_table.csv")) {
            Some((h, r)) => {
                s.push_str(&format!("`{}`\n\n", rel(root, &f.dir)));
                md_table(&mut s, &h, &r);
            }
            None => s.push_str(&format!("`{}`: warp_table.csv missing.\n\n", rel(root, &f.dir))),
        }
    }

    s.push_str("## Control projections\n\n");
    summaries(
        &mut s,
        root,
        &of("study control"),
        &[("fits", &["fits"]), ("best SSE", &["best_sse"]), ("final-size max/min", &["spread_ratio"])],
    );
    s.push_str("## Peak registration\n\n");
    summaries(
        &mut s,
        root,
        &of("study register"),
        &[
            ("registered RMSE / peak", &["relative_rmse_registered"]),
            ("unaligned RMSE / peak", &["relative_rmse_unaligned"]),
            ("skipped runs", &["skipped"]),
        ],
    );
    s.push_str("## Simulations\n\n");
    let sims = of("simulate");
    if sims.is_empty() {
        s.push_str("No results.\n\n");
    }
    for f in sims {
        let p = &f.manifest["parameters"];
        s.push_str(&format!(
            "- `{}`: alpha {}, beta {}, N {}, {} runs\n",
            rel(root, &f.dir),
            p["alpha"],
            p["beta"],
            p["n"],
            p["runs"]
        ));
    }
    s.push('\n');

    s.push_str("## Figures\n\n");
    let mut figs = Vec::new();
    for f in &found {
        if let Ok(rd) = fs::read_dir(&f.dir) {
            let mut v: Vec<PathBuf> = rd
                .flatten()
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "svg"))
                .collect();
            v.sort();
            figs.extend(v);
        }
    }
    if figs.is_empty() {
        s.push_str("No results.\n");
    }
    for p in figs {
        let r = rel(root, &p);
        s.push_str(&format!("- [{r}]({r})\n"));
    }
    s
}

fn summaries(s: &mut String, root: &Path, dirs: &[&Found], keys: &[(&str, &[&str])]) {
    if dirs.is_empty() {
        s.push_str("No results.\n\n");
        return;
    }
    for f in dirs {
        let v: Option<Value> = fs::read_to_string(f.dir.join("summary.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        s.push_str(&format!("`{}`\n\n", rel(root, &f.dir)));
        match v {
            Some(v) => {
                for (name, path) in keys {
                    s.push_str(&format!("- {name}: {}\n", json_num(&v, path)));
                }
                s.push('\n');
            }
            None => s.push_str("- summary.json missing\n\n"),
        }
    }
}

fn report_cmd(ctx: &Ctx, a: ReportArgs) -> Result<(), Failure> {
    let input = a.input.unwrap_or_else(|| ctx.out.clone());
    if !input.is_dir() {
        return Err(usage(format!("`{}` is not a directory", input.display())));
    }
    let text = render_report(&input);
    fs::create_dir_all(&ctx.out)?;
    fs::write(ctx.out.join(REPORT_FILE), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        std::iter::once("epiident").chain(s.split_whitespace()).map(String::from).collect()
    }

    #[test]
    fn usage_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().display().to_string();
        assert_eq!(dispatch(args(&format!("coverage --j 0 --out {out}"))), 1);
        assert_eq!(dispatch(args("simulate --no-such-flag")), 1);
        assert_eq!(dispatch(args("identify --method gaussian:-1")), 1);
        assert_eq!(dispatch(args("coverage --scenarios 17")), 1);
        assert_eq!(dispatch(args("--threads 0 scenarios list")), 1);
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn scenario_selection() {
        let set = |s: &str| SetArgs {
            scenarios: s.into(),
            n: 1000,
            i0: 5,
        };
        assert_eq!(set("all").resolve().unwrap().len(), 16);
        let picked = set("1,0.14:0.002").resolve().unwrap();
        assert_eq!(picked.len(), 2);
        assert!((picked[1].r0() - 14.2857).abs() < 1e-3);
        assert!(set("0.15:0.002").resolve().is_err());
        assert!(set("1,1").resolve().is_err());
    }

    #[test]
    fn manifest_is_written_and_completed() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sim");
        let code = dispatch(args(&format!(
            "simulate --runs 3 --alpha 0.3 --beta 0.004 --n 100 --seed 7 --out {}",
            out.display()
        )));
        assert_eq!(code, 0);
        let m: Value = serde_json::from_str(&fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(m["status"], "complete");
        assert_eq!(m["master_seed"], 7);
        let text = fs::read_to_string(out.join(MANIFEST_FILE)).unwrap();
        let pos = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("command_line") < pos("subcommand") && pos("status") < pos("outputs"));
        assert!(out.join("ensemble.csv").exists() && out.join("ensemble.svg").exists());
    }

    #[test]
    fn empty_report_says_no_results() {
        let dir = tempfile::tempdir().unwrap();
        let r = render_report(dir.path());
        assert!(r.contains("## Coverage\n\nNo results."));
        assert!(r.contains("## Figures\n\nNo results."));
    }

    #[test]
    fn report_highlights_cells_near_the_level() {
        let dir = tempfile::tempdir().unwrap();
        let cov = dir.path().join("cov");
        fs::create_dir_all(&cov).unwrap();
        fs::write(
            cov.join(MANIFEST_FILE),
            r#"{"subcommand":"coverage","parameters":{"level":0.68,"j":30,"m":300}}"#,
        )
        .unwrap();
        fs::write(cov.join("coverage_table.csv"), "alpha,beta,r0,ctmc,gaussian:0.1\n0.33,0.0004,1.21,0.77,0.00\n").unwrap();
        let r = render_report(dir.path());
        assert!(r.contains("| 0.33 | 0.0004 | 1.21 | **0.77** | 0.00 |"), "{r}");
    }
}
