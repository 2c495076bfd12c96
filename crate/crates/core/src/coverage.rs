//! Coverage of KDE confidence regions.
//!
//! For each of `J` outer trials a dataset is drawn at the true parameters
//! (a CTMC realization unless `truth = Method`) and fitted. From the fitted
//! pair, `M` datasets are generated with the method under test and fitted
//! again; a highest-density region at the requested level is built from
//! those `M` estimates and checked for the true pair.
//!
//! Random streams: the outer dataset of trial `j` uses `seed.derive([0, j])`
//! and inner dataset `m` uses `seed.derive([1, kind, j, m])`, where `kind`
//! identifies the method family (not σ). Cells sharing a seed therefore see
//! the same outer realizations, and Gaussian cells at different σ reuse the
//! same standard-normal draws.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::{run_ensemble, simulate_daily, CountState};
use crate::error::{Error, Result};
use crate::estimate::{best_fit_batch, Estimate, FitConfig};
use crate::kde::ProductKde2;
use crate::rng::RngSeed;
use crate::scenarios::Scenario;
use crate::sir::{integrate_sir, peak_of, EpidemicParameters, OdeSolution};
use crate::synth::{
    build_residual_bank, empirical_values, gaussian_values, hybrid_values, warp_samples, NoiseSpec,
    ResidualBank, WarpDistribution, DEFAULT_BINS,
};

pub const DEFAULT_J: usize = 30;
pub const DEFAULT_M: usize = 300;
pub const DEFAULT_LEVEL: f64 = 0.68;
/// CTMC runs used to build the residual bank and the warp distribution.
pub const DEFAULT_REFERENCE_RUNS: usize = 1000;
/// Largest tolerated fraction of excluded outer trials.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.2;
/// Fewest inner estimates from which a region is built.
pub const MIN_REGION_POINTS: usize = 50;
/// Distance from nominal within which a table cell is highlighted.
pub const HIGHLIGHT_BAND: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CoverageMethod {
    Ctmc,
    Gaussian(f64),
    Empirical,
    Hybrid,
}

impl CoverageMethod {
    pub(crate) fn kind(&self) -> u64 {
        match self {
            CoverageMethod::Ctmc => 0,
            CoverageMethod::Gaussian(_) => 1,
            CoverageMethod::Empirical => 2,
            CoverageMethod::Hybrid => 3,
        }
    }
}

impl fmt::Display for CoverageMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoverageMethod::Ctmc => f.write_str("ctmc"),
            CoverageMethod::Gaussian(s) => write!(f, "gaussian:{s}"),
            CoverageMethod::Empirical => f.write_str("empirical"),
            CoverageMethod::Hybrid => f.write_str("hybrid"),
        }
    }
}

impl FromStr for CoverageMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ctmc" => Ok(Self::Ctmc),
            "empirical" => Ok(Self::Empirical),
            "hybrid" => Ok(Self::Hybrid),
            other => {
                let sigma = other
                    .strip_prefix("gaussian:")
                    .ok_or_else(|| Error::Usage(format!("unknown method `{other}`")))?;
                let sigma: f64 = sigma
                    .parse()
                    .map_err(|_| Error::Usage(format!("bad sigma in `{other}`")))?;
                NoiseSpec::new(sigma).map_err(|e| Error::Usage(e.to_string()))?;
                Ok(Self::Gaussian(sigma))
            }
        }
    }
}

/// Where the outer datasets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthLayer {
    Ctmc,
    Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub j_outer: usize,
    pub m_inner: usize,
    pub level: f64,
    pub method: CoverageMethod,
    pub truth: TruthLayer,
    pub seed: RngSeed,
    pub reference_runs: usize,
    pub bins: usize,
}

impl CoverageConfig {
    pub fn new(method: CoverageMethod, seed: RngSeed) -> Self {
        Self {
            j_outer: DEFAULT_J,
            m_inner: DEFAULT_M,
            level: DEFAULT_LEVEL,
            method,
            truth: TruthLayer::Ctmc,
            seed,
            reference_runs: DEFAULT_REFERENCE_RUNS,
            bins: DEFAULT_BINS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.j_outer < 2 {
            return Err(Error::InvalidInput(format!("J must be >= 2, got {}", self.j_outer)));
        }
        if self.m_inner < MIN_REGION_POINTS {
            return Err(Error::InvalidInput(format!(
                "M must be >= {MIN_REGION_POINTS}, got {}",
                self.m_inner
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidInput(format!("level must be in (0, 1), got {}", self.level)));
        }
        if let CoverageMethod::Gaussian(s) = self.method {
            NoiseSpec::new(s)?;
        }
        if self.reference_runs < 10 || self.bins == 0 {
            return Err(Error::InvalidInput("reference runs >= 10 and bins >= 1 required".into()));
        }
        Ok(())
    }
}

/// Highest-density region of a KDE fitted to an estimate cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRegion {
    pub kde: ProductKde2,
    pub threshold: f64,
    pub level: f64,
}

impl ConfidenceRegion {
    pub fn contains(&self, point: (f64, f64)) -> bool {
        self.kde.density(&[point.0, point.1]) >= self.threshold
    }

    pub fn bandwidths(&self) -> [f64; 2] {
        self.kde.bandwidth_original()
    }
}

/// Region holding the top `level` fraction of the sample points by density:
/// the threshold is the `(1 - level)` quantile of the densities at the
/// samples themselves.
pub fn kde_region(estimates: &[(f64, f64)], level: f64) -> Result<ConfidenceRegion> {
    if estimates.len() < MIN_REGION_POINTS {
        return Err(Error::SampleTooSmall {
            n: estimates.len(),
            min: MIN_REGION_POINTS,
        });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must be in (0, 1), got {level}")));
    }
    let pts: Vec<[f64; 2]> = estimates.iter().map(|&(a, b)| [a, b]).collect();
    let kde = ProductKde2::fit(&pts)?;
    let mut d = kde.sample_densities();
    d.sort_by(f64::total_cmp);
    let k = (((1.0 - level) * d.len() as f64).floor() as usize).min(d.len() - 1);
    Ok(ConfidenceRegion {
        threshold: d[k],
        kde,
        level,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub method: CoverageMethod,
    pub coverage: f64,
    pub j_outer: usize,
    pub m_inner: usize,
    pub level: f64,
    /// Membership of the truth for each trial that was not excluded.
    pub members: Vec<bool>,
    /// Trials excluded because a fit failed or too few inner fits succeeded.
    pub excluded: usize,
    /// Inner fits that failed across all retained trials.
    pub inner_failures: usize,
}

/// Method-specific material built once per scenario.
pub(crate) enum Generator {
    Ctmc,
    Gaussian(NoiseSpec),
    Empirical(ResidualBank),
    Hybrid(WarpDistribution),
}

fn prepare(scenario: &Scenario, config: &CoverageConfig) -> Result<Generator> {
    prepare_generator(
        scenario,
        config.method,
        config.seed.derive(&[2, config.method.kind()]),
        config.reference_runs,
        config.bins,
    )
}

/// Builds the residual bank or warp distribution a method needs from CTMC
/// runs at the scenario's own parameters.
pub(crate) fn prepare_generator(
    scenario: &Scenario,
    method: CoverageMethod,
    ref_seed: RngSeed,
    reference_runs: usize,
    bins: usize,
) -> Result<Generator> {
    Ok(match method {
        CoverageMethod::Ctmc => Generator::Ctmc,
        CoverageMethod::Gaussian(s) => Generator::Gaussian(NoiseSpec::new(s)?),
        CoverageMethod::Empirical => {
            let ode = integrate_sir(&scenario.params, &scenario.initial, &scenario.grid)?;
            let init = scenario.count_initial()?;
            let ens = run_ensemble(&scenario.params, &init, &scenario.grid, reference_runs, ref_seed)?;
            Generator::Empirical(build_residual_bank(
                &ens,
                &ode.trajectory,
                bins,
                &scenario.label,
                scenario.params,
            )?)
        }
        CoverageMethod::Hybrid => {
            let (w, _) = warp_samples(scenario, reference_runs, ref_seed)?;
            Generator::Hybrid(WarpDistribution::fit(w)?)
        }
    })
}

impl Generator {
    /// `count` datasets at `params`; dataset `m` uses `seed_of(m)`.
    pub(crate) fn datasets(
        &self,
        scenario: &Scenario,
        params: &EpidemicParameters,
        count: usize,
        seed_of: impl Fn(usize) -> RngSeed,
    ) -> Result<Vec<Vec<f64>>> {
        let grid = &scenario.grid;
        match self {
            Generator::Ctmc => {
                let init = CountState::from_state(&scenario.initial)?;
                (0..count)
                    .map(|m| simulate_daily(params, &init, grid, seed_of(m)).map(|t| t.prevalence))
                    .collect()
            }
            other => {
                let ode: OdeSolution = integrate_sir(params, &scenario.initial, grid)?;
                let clean = &ode.trajectory.prevalence;
                let peak = match peak_of(&ode.trajectory) {
                    Ok((t, _)) => t,
                    Err(_) => grid.t_start,
                };
                Ok((0..count)
                    .map(|m| {
                        let mut rng = seed_of(m).rng();
                        let mut out = Vec::with_capacity(clean.len());
                        match other {
                            Generator::Gaussian(n) => gaussian_values(clean, *n, &mut rng, &mut out),
                            Generator::Empirical(bank) => {
                                empirical_values(grid.times(), clean, peak, bank, &mut rng, &mut out)
                            }
                            Generator::Hybrid(w) => hybrid_values(&ode, w.sample(&mut rng), &mut out),
                            Generator::Ctmc => unreachable!(),
                        }
                        out
                    })
                    .collect())
            }
        }
    }
}

pub(crate) fn fit_all(data: &[Vec<f64>], scenario: &Scenario, config: &FitConfig) -> Vec<Result<Estimate>> {
    let refs: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
    best_fit_batch(&refs, &scenario.grid, config)
}

/// Outcome of one outer trial.
#[derive(Debug, Clone)]
pub struct Trial {
    pub fitted: Option<Estimate>,
    pub estimates: Vec<(f64, f64)>,
    pub inner_failures: usize,
    pub member: Option<bool>,
}

fn run_trial(
    scenario: &Scenario,
    config: &CoverageConfig,
    generator: &Generator,
    fit: &FitConfig,
    j: usize,
) -> Result<Trial> {
    let truth = scenario.params;
    let outer_seed = config.seed.derive(&[0, j as u64]);
    let outer = match config.truth {
        TruthLayer::Ctmc => Generator::Ctmc.datasets(scenario, &truth, 1, |_| outer_seed)?,
        TruthLayer::Method => generator.datasets(scenario, &truth, 1, |_| outer_seed)?,
    };
    let fitted = match fit_all(&outer, scenario, fit).pop().unwrap() {
        Ok(e) => e,
        Err(Error::FitFailure(_)) => {
            return Ok(Trial {
                fitted: None,
                estimates: Vec::new(),
                inner_failures: 0,
                member: None,
            })
        }
        Err(e) => return Err(e),
    };
    let p_hat = EpidemicParameters::new(fitted.alpha_hat, fitted.beta_hat, truth.population)?;
    let kind = config.method.kind();
    let inner = generator.datasets(scenario, &p_hat, config.m_inner, |m| {
        config.seed.derive(&[1, kind, j as u64, m as u64])
    })?;
    let mut estimates = Vec::with_capacity(config.m_inner);
    let mut failures = 0;
    for r in fit_all(&inner, scenario, &fit.recentred(&p_hat)) {
        match r {
            Ok(e) => estimates.push(e.pair()),
            Err(Error::FitFailure(_)) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    let member = if estimates.len() >= MIN_REGION_POINTS {
        Some(kde_region(&estimates, config.level)?.contains((truth.alpha, truth.beta)))
    } else {
        None
    };
    Ok(Trial {
        fitted: Some(fitted),
        estimates,
        inner_failures: failures,
        member,
    })
}

/// Runs the full protocol for one scenario and method.
pub fn run_coverage(scenario: &Scenario, config: &CoverageConfig) -> Result<CoverageReport> {
    config.validate()?;
    let generator = prepare(scenario, config)?;
    let fit = FitConfig::around(&scenario.params, scenario.initial);
    let trials: Vec<Trial> = (0..config.j_outer)
        .into_par_iter()
        .map(|j| run_trial(scenario, config, &generator, &fit, j))
        .collect::<Result<_>>()?;
    let members: Vec<bool> = trials.iter().filter_map(|t| t.member).collect();
    let excluded = config.j_outer - members.len();
    if excluded as f64 > MAX_EXCLUDED_FRACTION * config.j_outer as f64 {
        return Err(Error::TooManyExclusions {
            excluded,
            total: config.j_outer,
        });
    }
    let coverage = members.iter().filter(|&&b| b).count() as f64 / members.len() as f64;
    Ok(CoverageReport {
        scenario: scenario.label.clone(),
        method: config.method,
        coverage,
        j_outer: config.j_outer,
        m_inner: config.m_inner,
        level: config.level,
        members,
        excluded,
        inner_failures: trials.iter().map(|t| t.inner_failures).sum(),
    })
}

/// Scenario × method grid of coverage results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageTable {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<CoverageMethod>,
    /// Row-major cells; `None` where the cell failed.
    pub cells: Vec<Vec<Option<CoverageReport>>>,
    pub errors: Vec<String>,
    pub level: f64,
}

impl CoverageTable {
    pub fn cell(&self, scenario: usize, method: usize) -> Option<&CoverageReport> {
        self.cells[scenario][method].as_ref()
    }

    pub fn column(&self, method: usize) -> Vec<Option<f64>> {
        self.cells.iter().map(|row| row[method].as_ref().map(|r| r.coverage)).collect()
    }

    pub fn highlighted(&self, coverage: f64) -> bool {
        (coverage - self.level).abs() <= HIGHLIGHT_BAND + 1e-12
    }

    /// Wide layout: one row per scenario, one column per method.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "alpha,beta,r0")?;
        for m in &self.methods {
            write!(w, ",{m}")?;
        }
        writeln!(w)?;
        for (row, sc) in self.cells.iter().zip(&self.scenarios) {
            write!(w, "{},{},{:.2}", sc.params.alpha, sc.params.beta, sc.r0())?;
            for c in row {
                match c {
                    Some(r) => write!(w, ",{:.2}", r.coverage)?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Long layout with bookkeeping: `label,method,coverage,used,excluded,highlight`.
    pub fn write_cells_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "label,method,coverage,used,excluded,inner_failures,highlight")?;
        for (row, sc) in self.cells.iter().zip(&self.scenarios) {
            for (c, m) in row.iter().zip(&self.methods) {
                match c {
                    Some(r) => writeln!(
                        w,
                        "{},{},{},{},{},{},{}",
                        sc.label,
                        m,
                        r.coverage,
                        r.members.len(),
                        r.excluded,
                        r.inner_failures,
                        self.highlighted(r.coverage)
                    )?,
                    None => writeln!(w, "{},{},,,,,", sc.label, m)?,
                }
            }
        }
        Ok(())
    }
}

/// Seed of the cell for scenario `index`: every method of a scenario shares
/// the outer realizations.
pub fn cell_seed(master: RngSeed, scenario_index: usize) -> RngSeed {
    master.derive(&[scenario_index as u64])
}

/// Every scenario × method cell. `template` supplies J, M, level, truth layer
/// and the master seed; its method is ignored.
pub fn coverage_table(
    scenarios: &[Scenario],
    methods: &[CoverageMethod],
    template: &CoverageConfig,
) -> Result<CoverageTable> {
    let mut cells = Vec::with_capacity(scenarios.len());
    let mut errors = Vec::new();
    for (si, sc) in scenarios.iter().enumerate() {
        let mut row = Vec::with_capacity(methods.len());
        for &m in methods {
            let cfg = CoverageConfig {
                method: m,
                seed: cell_seed(template.seed, si),
                ..template.clone()
            };
            cfg.validate()?;
            match run_coverage(sc, &cfg) {
                Ok(r) => row.push(Some(r)),
                Err(e) => {
                    errors.push(format!("{} / {m}: {e}", sc.label));
                    row.push(None);
                }
            }
        }
        cells.push(row);
    }
    Ok(CoverageTable {
        scenarios: scenarios.to_vec(),
        methods: methods.to_vec(),
        cells,
        errors,
        level: template.level,
    })
}

pub const SIGMA_LOWER: f64 = 0.01;
pub const SIGMA_UPPER: f64 = 2.0;
pub const SIGMA_BRACKET: f64 = 0.05;
pub const SIGMA_TARGET_BAND: f64 = 0.03;
pub const SIGMA_SCAN_STEP: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaMinResult {
    pub sigma_min: f64,
    /// The target was not reached even at the upper bound.
    pub saturated: bool,
    /// (σ, coverage) in evaluation order.
    pub curve: Vec<(f64, f64)>,
    /// Pairs of evaluated σ values where coverage fell by more than 0.05.
    pub monotonicity_violations: usize,
}

/// Smallest Gaussian σ reaching `target` coverage. σ is stepped up from
/// the lower bound by [`SIGMA_SCAN_STEP`] until coverage enters the target
/// band, then the last bracket is bisected. Coverage is not monotone over
/// the whole range: past σ ≈ 1 the clamp at zero biases the data upward and
/// coverage falls again, so the upper bound alone says nothing.
pub fn sigma_min_search(scenario: &Scenario, target: f64, template: &CoverageConfig) -> Result<SigmaMinResult> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidInput(format!("target must be in [0, 1), got {target}")));
    }
    let mut curve = Vec::new();
    let eval = |sigma: f64, curve: &mut Vec<(f64, f64)>| -> Result<f64> {
        let cfg = CoverageConfig {
            method: CoverageMethod::Gaussian(sigma),
            ..template.clone()
        };
        let c = run_coverage(scenario, &cfg)?.coverage;
        curve.push((sigma, c));
        Ok(c)
    };
    let finish = |sigma_min: f64, saturated: bool, curve: Vec<(f64, f64)>| {
        let mut sorted = curve.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let monotonicity_violations = sorted.windows(2).filter(|w| w[1].1 < w[0].1 - 0.05).count();
        SigmaMinResult {
            sigma_min,
            saturated,
            curve,
            monotonicity_violations,
        }
    };
    if target <= 0.0 {
        return Ok(finish(SIGMA_LOWER, false, curve));
    }
    let reached = |c: f64| c >= target - SIGMA_TARGET_BAND;
    let mut lo = SIGMA_LOWER;
    if reached(eval(lo, &mut curve)?) {
        return Ok(finish(lo, false, curve));
    }
    let mut hi = lo;
    loop {
        if hi >= SIGMA_UPPER {
            return Ok(finish(SIGMA_UPPER, true, curve));
        }
        hi = (hi + SIGMA_SCAN_STEP).min(SIGMA_UPPER);
        if reached(eval(hi, &mut curve)?) {
            break;
        }
        lo = hi;
    }
    while hi - lo >= SIGMA_BRACKET {
        let mid = 0.5 * (lo + hi);
        if reached(eval(mid, &mut curve)?) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(finish(hi, false, curve))
}
