//! Two small demonstrations built from the core pieces.
//!
//! * Control projections: many parameter pairs fit early cumulative
//!   incidence about equally well, yet disagree wildly once transmission is
//!   cut part-way through the outbreak.
//! * Peak registration: aligning stochastic runs at their peaks removes the
//!   phase variation that flattens their plain pointwise mean.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::took_off;
use crate::error::{Error, Result};
use crate::estimate::{fit_each_start, fit_series, Estimate, FitConfig, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE};
use crate::rng::RngSeed;
use crate::sir::{
    integrate_sir, EpidemicParameters, Observable, StateVector, TimeGrid, Trajectory, TrajectoryKind,
    DEFAULT_STEP,
};
use crate::stats::mean_var;
use crate::synth::smoothed_peak;

pub const DEFAULT_REDUCTION: f64 = 0.60;
pub const DEFAULT_INTERVENTION_DAY: f64 = 7.0;
pub const DEFAULT_CONTROL_HORIZON: f64 = 150.0;
/// Fits whose SSE is within this factor of the best count as equivalent.
pub const DEFAULT_BAND: f64 = 1.1;
pub const DEFAULT_CLOUD_SIZE: usize = 100;
/// Days of cumulative incidence seen by the demo fit.
pub const DEFAULT_WINDOW_DAYS: u32 = 15;
/// Relative noise on the demo's cumulative incidence.
pub const DEFAULT_DEMO_NOISE: f64 = 0.2;
/// Demo truth: R₀ = 2.4, so the 60% cut lands the controlled R₀ just
/// below one and small parameter differences decide the outcome.
pub const DEFAULT_DEMO_RATES: (f64, f64) = (0.1, 0.00024);
pub const MIN_REGISTRATION_RUNS: usize = 10;
const PILOT_STARTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceFitConfig {
    pub count: usize,
    /// Random starts; each start is fitted independently.
    pub starts: usize,
    pub band: f64,
    /// Range of α for the log-uniform starts.
    pub alpha_range: (f64, f64),
    /// Range of β·N for the log-uniform starts.
    pub beta_n_range: (f64, f64),
    /// Each fit stops once its simplex spread is below this fraction of
    /// the best SSE, so fits come to rest at different points of a flat
    /// valley instead of all converging on the single minimum.
    pub stop_fraction: f64,
    pub population: u64,
    pub initial: StateVector,
}

impl IncidenceFitConfig {
    pub fn new(count: usize, population: u64, initial: StateVector) -> Self {
        Self {
            count,
            starts: 4 * count.max(10),
            band: DEFAULT_BAND,
            alpha_range: (0.02, 1.0),
            beta_n_range: (0.05, 2.0),
            stop_fraction: DEFAULT_BAND - 1.0,
            population,
            initial,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 || self.starts < self.count {
            return Err(Error::InvalidInput("need count >= 1 and starts >= count".into()));
        }
        if !(self.stop_fraction > 0.0) {
            return Err(Error::InvalidInput("stop fraction must be > 0".into()));
        }
        if !(self.band >= 1.0) {
            return Err(Error::InvalidInput(format!("band must be >= 1, got {}", self.band)));
        }
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !ok(self.alpha_range) || !ok(self.beta_n_range) {
            return Err(Error::InvalidInput("start ranges must be positive and ordered".into()));
        }
        self.initial.check_population(self.population)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceCloud {
    /// Retained fits, best first.
    pub fits: Vec<Estimate>,
    pub best_sse: f64,
    pub failed_starts: usize,
    pub warnings: Vec<String>,
}

impl IncidenceCloud {
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.fits.iter().map(Estimate::pair).collect()
    }
}

/// Fits (α, β) to cumulative incidence `N - S(t)` from random log-space
/// starts and keeps up to `count` fits whose SSE is within `band` times
/// the best.
pub fn fit_cloud_to_incidence(
    incidence: &[f64],
    grid: &TimeGrid,
    config: &IncidenceFitConfig,
    seed: RngSeed,
) -> Result<IncidenceCloud> {
    config.validate()?;
    let mut rng = seed.rng();
    let n = config.population as f64;
    let log_uniform = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| -> f64 {
        (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
    };
    let starts: Vec<(f64, f64)> = (0..config.starts)
        .map(|_| {
            let a = log_uniform(&mut rng, config.alpha_range);
            let bn = log_uniform(&mut rng, config.beta_n_range);
            (a, bn / n)
        })
        .collect();
    // A fully converged pilot from the first few starts fixes the best SSE.
    let mut fit = FitConfig {
        initial_guesses: starts[..PILOT_STARTS.min(starts.len())].to_vec(),
        max_iterations: DEFAULT_MAX_ITERATIONS,
        tolerance: DEFAULT_TOLERANCE,
        population: config.population,
        initial: config.initial,
        step: DEFAULT_STEP,
    };
    let pilot = fit_series(incidence, grid, &fit, Observable::CumulativeIncidence)?;
    fit.initial_guesses = starts;
    fit.tolerance = (config.stop_fraction * pilot.sse).max(DEFAULT_TOLERANCE);
    let all = fit_each_start(incidence, grid, &fit, Observable::CumulativeIncidence)?;
    let failed_starts = all.iter().filter(|f| f.is_none()).count();
    let mut fits: Vec<Estimate> = std::iter::once(pilot).chain(all.into_iter().flatten()).collect();
    fits.sort_by(|a, b| a.sse.total_cmp(&b.sse));
    let best_sse = fits[0].sse;
    fits.retain(|f| f.sse <= config.band * best_sse);
    let mut warnings = Vec::new();
    if fits.len() < config.count {
        warnings.push(format!(
            "only {} of {} requested fits lie within {}x of the best SSE",
            fits.len(),
            config.count,
            config.band
        ));
    }
    fits.truncate(config.count);
    Ok(IncidenceCloud {
        fits,
        best_sse,
        failed_starts,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlScenario {
    pub base: EpidemicParameters,
    /// Fraction of β removed from the intervention day on.
    pub reduction: f64,
    pub intervention_day: f64,
    pub horizon: f64,
}

impl ControlScenario {
    pub fn new(base: EpidemicParameters) -> Self {
        Self {
            base,
            reduction: DEFAULT_REDUCTION,
            intervention_day: DEFAULT_INTERVENTION_DAY,
            horizon: DEFAULT_CONTROL_HORIZON,
        }
    }

    /// `reduction` may be 0 (no control) or 1 (transmission stops) so that
    /// the limiting cases can be computed.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reduction) {
            return Err(Error::InvalidInput(format!("reduction must be in [0, 1], got {}", self.reduction)));
        }
        if !(self.intervention_day > 0.0 && self.intervention_day < self.horizon) {
            return Err(Error::InvalidInput("intervention day must lie inside (0, horizon)".into()));
        }
        let whole = |x: f64| (x - x.round()).abs() < 1e-9;
        if !whole(self.intervention_day) || !whole(self.horizon) {
            return Err(Error::InvalidInput("intervention day and horizon must be whole days".into()));
        }
        Ok(())
    }
}

/// Daily prevalence and cumulative incidence of one controlled projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlledRun {
    pub alpha: f64,
    pub beta: f64,
    pub times: Vec<f64>,
    pub prevalence: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl ControlledRun {
    pub fn final_incidence(&self) -> f64 {
        *self.cumulative.last().expect("non-empty run")
    }
}

fn daily(from: f64, to: f64) -> Result<TimeGrid> {
    let days = (to - from).round() as usize;
    TimeGrid::new(from, to, (0..=days).map(|k| from + k as f64).collect())
}

/// Integrates one pair with β cut by `reduction` from the intervention day.
pub fn controlled_run(pair: (f64, f64), scenario: &ControlScenario, initial: &StateVector) -> Result<ControlledRun> {
    scenario.validate()?;
    let n = scenario.base.population;
    let before = EpidemicParameters::new(pair.0, pair.1, n)?;
    let after = EpidemicParameters::new_allow_zero_beta(pair.0, pair.1 * (1.0 - scenario.reduction), n)?;
    let first = integrate_sir(&before, initial, &daily(0.0, scenario.intervention_day)?)?;
    let mid = *first.states.last().expect("grid is non-empty");
    let second = integrate_sir(&after, &mid, &daily(scenario.intervention_day, scenario.horizon)?)?;
    let total = initial.total();
    let states = first.states.iter().chain(&second.states[1..]);
    let times = first.trajectory.times().iter().chain(&second.trajectory.times()[1..]);
    let mut run = ControlledRun {
        alpha: pair.0,
        beta: pair.1,
        times: Vec::new(),
        prevalence: Vec::new(),
        cumulative: Vec::new(),
    };
    for (t, s) in times.zip(states) {
        run.times.push(*t);
        run.prevalence.push(s.infectious);
        run.cumulative.push(total - s.susceptible);
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProjection {
    pub runs: Vec<ControlledRun>,
    /// Final cumulative incidence of each successful run.
    pub finals: Vec<f64>,
    pub excluded: usize,
}

impl ControlProjection {
    /// Largest over smallest final cumulative incidence.
    pub fn spread_ratio(&self) -> Option<f64> {
        let max = self.finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.finals.iter().copied().fold(f64::INFINITY, f64::min);
        (min > 0.0 && max.is_finite()).then(|| max / min)
    }

    /// `t,run,alpha,beta,prevalence,cumulative` rows.
    pub fn write_fan_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,run,alpha,beta,prevalence,cumulative")?;
        for (k, r) in self.runs.iter().enumerate() {
            for j in 0..r.times.len() {
                writeln!(w, "{},{k},{},{},{},{}", r.times[j], r.alpha, r.beta, r.prevalence[j], r.cumulative[j])?;
            }
        }
        Ok(())
    }
}

/// Controlled projections for every pair of a cloud. Pairs whose
/// integration fails are counted and left out.
pub fn project_control(cloud: &[(f64, f64)], scenario: &ControlScenario, initial: &StateVector) -> Result<ControlProjection> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cloud is empty".into()));
    }
    scenario.validate()?;
    let results: Vec<Result<ControlledRun>> = cloud.par_iter().map(|&p| controlled_run(p, scenario, initial)).collect();
    let mut out = ControlProjection {
        runs: Vec::new(),
        finals: Vec::new(),
        excluded: 0,
    };
    for r in results {
        match r {
            Ok(run) => {
                out.finals.push(run.final_incidence());
                out.runs.push(run);
            }
            Err(Error::IntegrationFailure { .. }) | Err(Error::InvalidInput(_)) => out.excluded += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width histogram over the sample range; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if values.is_empty() || bins == 0 {
        return Err(Error::InvalidInput("histogram needs values and bins >= 1".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|k| HistogramBin {
            lower: lo + k as f64 * width,
            upper: lo + (k + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        out[k].count += 1;
    }
    Ok(out)
}

pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], mut w: W) -> Result<()> {
    writeln!(w, "lower,upper,count")?;
    for b in bins {
        writeln!(w, "{},{},{}", b.lower, b.upper, b.count)?;
    }
    Ok(())
}

/// The demo's observed series: early cumulative incidence of the ODE at
/// `params` with multiplicative Gaussian noise of relative size `sigma`.
pub fn noisy_incidence(
    params: &EpidemicParameters,
    initial: &StateVector,
    window_days: u32,
    sigma: f64,
    seed: RngSeed,
) -> Result<(TimeGrid, Vec<f64>)> {
    let grid = TimeGrid::daily(window_days);
    let sol = integrate_sir(params, initial, &grid)?;
    let clean = sol.trajectory.cumulative_incidence().expect("ODE keeps S");
    let mut noisy = Vec::with_capacity(clean.len());
    crate::synth::gaussian_values(&clean, crate::synth::NoiseSpec::new(sigma)?, &mut seed.rng(), &mut noisy);
    Ok((grid, noisy))
}

/// Everything behind the control demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDemo {
    pub truth: EpidemicParameters,
    pub initial: StateVector,
    pub window: TimeGrid,
    pub data: Vec<f64>,
    pub cloud: IncidenceCloud,
    pub scenario: ControlScenario,
    pub projection: ControlProjection,
}

impl ControlDemo {
    /// `t,run,alpha,beta,cumulative` of each cloud member's uncontrolled
    /// fit over the data window, plus `run = -1` rows holding the data.
    pub fn write_fit_fan_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,run,alpha,beta,cumulative")?;
        for (t, y) in self.window.times().iter().zip(&self.data) {
            writeln!(w, "{t},-1,,,{y}")?;
        }
        for (k, (a, b)) in self.cloud.pairs().into_iter().enumerate() {
            let p = EpidemicParameters::new(a, b, self.truth.population)?;
            let sol = integrate_sir(&p, &self.initial, &self.window)?;
            let cum = sol.trajectory.cumulative_incidence().expect("ODE keeps S");
            for (t, y) in self.window.times().iter().zip(cum) {
                writeln!(w, "{t},{k},{a},{b},{y}")?;
            }
        }
        Ok(())
    }
}

/// Runs the control demonstration with its documented defaults: noisy
/// early cumulative incidence at [`DEFAULT_DEMO_RATES`], a cloud of
/// near-equivalent fits, and their controlled projections.
pub fn control_demo(initial_infectious: u64, seed: RngSeed) -> Result<ControlDemo> {
    let truth = EpidemicParameters::new(DEFAULT_DEMO_RATES.0, DEFAULT_DEMO_RATES.1, 1000)?;
    let initial = StateVector::seeded(truth.population, initial_infectious)?;
    let (window, data) = noisy_incidence(&truth, &initial, DEFAULT_WINDOW_DAYS, DEFAULT_DEMO_NOISE, seed.derive(&[0]))?;
    let config = IncidenceFitConfig::new(DEFAULT_CLOUD_SIZE, truth.population, initial);
    let cloud = fit_cloud_to_incidence(&data, &window, &config, seed.derive(&[1]))?;
    let scenario = ControlScenario::new(truth);
    let projection = project_control(&cloud.pairs(), &scenario, &initial)?;
    Ok(ControlDemo {
        truth,
        initial,
        window,
        data,
        cloud,
        scenario,
        projection,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub aligned: Vec<Trajectory>,
    /// Shift added to each run's time axis, `t_peak(ODE) - t_peak(run)`.
    pub shifts: Vec<f64>,
    pub registered_mean: Trajectory,
    pub unaligned_mean: Trajectory,
    pub ode_peak: f64,
    /// Times at which every aligned run is interpolated, not extended.
    pub window: (f64, f64),
    pub rmse_registered: f64,
    pub rmse_unaligned: f64,
    pub skipped: usize,
}

impl RegistrationResult {
    pub fn relative_rmse(&self) -> (f64, f64) {
        (self.rmse_registered / self.ode_peak, self.rmse_unaligned / self.ode_peak)
    }

    /// `t,ode,registered_mean,unaligned_mean`.
    pub fn write_means_csv<W: Write>(&self, ode: &Trajectory, mut w: W) -> Result<()> {
        writeln!(w, "t,ode,registered_mean,unaligned_mean")?;
        for (k, t) in ode.times().iter().enumerate() {
            writeln!(
                w,
                "{t},{},{},{}",
                ode.prevalence[k], self.registered_mean.prevalence[k], self.unaligned_mean.prevalence[k]
            )?;
        }
        Ok(())
    }

    /// `run,shift,t,prevalence` for the aligned runs.
    pub fn write_aligned_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "run,shift,t,prevalence")?;
        for (r, (traj, shift)) in self.aligned.iter().zip(&self.shifts).enumerate() {
            for (t, v) in traj.times().iter().zip(&traj.prevalence) {
                writeln!(w, "{r},{shift},{t},{v}")?;
            }
        }
        Ok(())
    }
}

/// Linear interpolation, holding the end values outside the sampled range.
fn interp_clamped(times: &[f64], values: &[f64], t: f64) -> f64 {
    let last = times.len() - 1;
    if t <= times[0] {
        return values[0];
    }
    if t >= times[last] {
        return values[last];
    }
    let k = times.partition_point(|&x| x <= t) - 1;
    let w = (t - times[k]) / (times[k + 1] - times[k]);
    values[k] + w * (values[k + 1] - values[k])
}

fn pointwise_mean(runs: &[&Trajectory], grid: &TimeGrid) -> Result<Trajectory> {
    let mut column = Vec::with_capacity(runs.len());
    let mean = (0..grid.len())
        .map(|k| {
            column.clear();
            column.extend(runs.iter().map(|r| r.prevalence[k]));
            mean_var(&column).0
        })
        .collect();
    Trajectory::new(grid.clone(), mean, TrajectoryKind::Synthetic)
}

fn rmse_on(a: &Trajectory, b: &Trajectory, window: (f64, f64)) -> f64 {
    let (sum, count) = a
        .times()
        .iter()
        .zip(a.prevalence.iter().zip(&b.prevalence))
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .fold((0.0, 0usize), |(s, c), (_, (x, y))| (s + (x - y) * (x - y), c + 1));
    (sum / count as f64).sqrt()
}

/// Aligns each run that took off so its smoothed peak sits at the ODE's
/// smoothed peak time, then compares aligned and plain means to the ODE.
pub fn register_at_peak(ensemble: &[Trajectory], ode: &Trajectory) -> Result<RegistrationResult> {
    let runs: Vec<&Trajectory> = ensemble.iter().filter(|r| took_off(r)).collect();
    let skipped = ensemble.len() - runs.len();
    if runs.len() < MIN_REGISTRATION_RUNS {
        return Err(Error::SampleTooSmall {
            n: runs.len(),
            min: MIN_REGISTRATION_RUNS,
        });
    }
    if runs.iter().any(|r| r.times() != ode.times()) {
        return Err(Error::InvalidInput("runs and ODE must share a grid".into()));
    }
    let (t_ode, ode_peak) = smoothed_peak(ode)?;
    let times = ode.times();
    let mut shifts = Vec::with_capacity(runs.len());
    let mut aligned = Vec::with_capacity(runs.len());
    for r in &runs {
        let shift = t_ode - smoothed_peak(r)?.0;
        let values = times.iter().map(|&t| interp_clamped(times, &r.prevalence, t - shift)).collect();
        aligned.push(Trajectory::new(ode.grid.clone(), values, TrajectoryKind::Synthetic)?);
        shifts.push(shift);
    }
    let max_shift = shifts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_shift = shifts.iter().copied().fold(f64::INFINITY, f64::min);
    let window = (times[0] + max_shift.max(0.0), times[times.len() - 1] + min_shift.min(0.0));
    if window.0 > window.1 {
        return Err(Error::InvalidInput("aligned runs share no common window".into()));
    }
    let aligned_refs: Vec<&Trajectory> = aligned.iter().collect();
    let registered_mean = pointwise_mean(&aligned_refs, &ode.grid)?;
    let unaligned_mean = pointwise_mean(&runs, &ode.grid)?;
    Ok(RegistrationResult {
        rmse_registered: rmse_on(&registered_mean, ode, window),
        rmse_unaligned: rmse_on(&unaligned_mean, ode, window),
        aligned,
        shifts,
        registered_mean,
        unaligned_mean,
        ode_peak,
        window,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::run_ensemble;
    use crate::scenarios::Scenario;

    fn init() -> StateVector {
        StateVector::seeded(1000, 5).unwrap()
    }

    fn cv(x: &[f64]) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64;
        100.0 * v.sqrt() / m
    }

    #[test]
    fn full_window_cloud_collapses_on_truth() {
        let p = EpidemicParameters::new(0.1, 0.0004, 1000).unwrap();
        let grid = TimeGrid::daily(150);
        let data = integrate_sir(&p, &init(), &grid).unwrap().trajectory.cumulative_incidence().unwrap();
        let mut cfg = IncidenceFitConfig::new(10, 1000, init());
        cfg.starts = 40;
        let cloud = fit_cloud_to_incidence(&data, &grid, &cfg, RngSeed::new(3, 0)).unwrap();
        for f in &cloud.fits {
            assert!((f.alpha_hat / 0.1 - 1.0).abs() < 0.01 && (f.beta_hat / 0.0004 - 1.0).abs() < 0.01);
        }
        if cloud.fits.len() > 1 {
            let betas: Vec<f64> = cloud.fits.iter().map(|f| f.beta_hat).collect();
            assert!(cv(&betas) < 2.0);
        }
        cfg.count = 1;
        let one = fit_cloud_to_incidence(&data, &grid, &cfg, RngSeed::new(3, 0)).unwrap();
        assert_eq!(one.fits.len(), 1);
        assert_eq!(one.fits[0], cloud.fits[0]);
    }

    #[test]
    fn early_window_cloud_spreads_along_the_growth_ridge() {
        let p = EpidemicParameters::new(0.1, 0.0004, 1000).unwrap();
        let (grid, data) = noisy_incidence(&p, &init(), DEFAULT_WINDOW_DAYS, 0.2, RngSeed::new(5, 0)).unwrap();
        let cfg = IncidenceFitConfig::new(DEFAULT_CLOUD_SIZE, 1000, init());
        let cloud = fit_cloud_to_incidence(&data, &grid, &cfg, RngSeed::new(5, 1)).unwrap();
        assert!(cloud.fits.len() >= 10);
        let alphas: Vec<f64> = cloud.fits.iter().map(|f| f.alpha_hat).collect();
        assert!(cv(&alphas) > 10.0, "cv {}", cv(&alphas));
        // Along the ridge the early growth rate βN - α barely moves.
        let growth: Vec<f64> = cloud.fits.iter().map(|f| f.beta_hat * 1000.0 - f.alpha_hat).collect();
        assert!(cv(&growth) < cv(&alphas) / 3.0);
    }

    #[test]
    fn control_limits_and_monotonicity() {
        let p = EpidemicParameters::new(0.1, 0.0004, 1000).unwrap();
        let mut sc = ControlScenario::new(p);
        let uncontrolled = integrate_sir(&p, &init(), &daily(0.0, 150.0).unwrap()).unwrap();
        let s_end = uncontrolled.states.last().unwrap().susceptible;
        sc.reduction = 0.0;
        let r0 = controlled_run((0.1, 0.0004), &sc, &init()).unwrap();
        assert!((r0.final_incidence() - (1000.0 - s_end)).abs() < 1e-9);

        sc.reduction = 1.0;
        let r1 = controlled_run((0.1, 0.0004), &sc, &init()).unwrap();
        assert_eq!(r1.final_incidence(), r1.cumulative[7]);

        let mut last = f64::INFINITY;
        for r in [0.0, 0.3, 0.6, 1.0] {
            sc.reduction = r;
            let f = controlled_run((0.1, 0.0004), &sc, &init()).unwrap().final_incidence();
            assert!(f <= last);
            last = f;
        }
        assert!(r0.cumulative.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(histogram(&[5.0; 3], 4).unwrap()[0].count, 3);
    }

    #[test]
    fn registering_ode_copies() {
        let p = EpidemicParameters::new(0.2, 0.0004, 1000).unwrap();
        let ode = integrate_sir(&p, &init(), &TimeGrid::daily(150)).unwrap().trajectory;
        let copies = vec![ode.clone(); 12];
        let r = register_at_peak(&copies, &ode).unwrap();
        assert_eq!(r.registered_mean.prevalence, ode.prevalence);
        assert_eq!(r.rmse_registered, 0.0);

        let shifted: Vec<Trajectory> = (0..12)
            .map(|k| {
                let s = k as f64 - 5.0 - (k / 11) as f64;
                let v = ode.times().iter().map(|&t| interp_clamped(ode.times(), &ode.prevalence, t - s)).collect();
                Trajectory::new(ode.grid.clone(), v, TrajectoryKind::Synthetic).unwrap()
            })
            .collect();
        let r = register_at_peak(&shifted, &ode).unwrap();
        for (k, t) in ode.times().iter().enumerate() {
            if *t >= r.window.0 && *t <= r.window.1 {
                let (a, b) = (r.registered_mean.prevalence[k], ode.prevalence[k]);
                assert!((a - b).abs() <= 1e-3 * b.max(1e-9), "t={t}: {a} vs {b}");
            }
        }
        for (a, s) in r.aligned.iter().zip(&shifted) {
            let pa = a.prevalence.iter().copied().fold(0.0, f64::max);
            let ps = s.prevalence.iter().copied().fold(0.0, f64::max);
            assert_eq!(pa, ps);
        }
    }

    #[test]
    fn registration_beats_plain_mean() {
        let sc = Scenario::from_rates(0.2, 0.0004, 1000).unwrap().with_initial_infectious(5).unwrap();
        let ens = run_ensemble(&sc.params, &sc.count_initial().unwrap(), &sc.grid, 200, RngSeed::new(11, 0)).unwrap();
        let ode = integrate_sir(&sc.params, &sc.initial, &sc.grid).unwrap().trajectory;
        let r = register_at_peak(&ens, &ode).unwrap();
        let (reg, plain) = r.relative_rmse();
        assert!(reg < 0.05 && reg < plain, "{reg} {plain}");
    }
}
