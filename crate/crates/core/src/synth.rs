//! Synthetic data generators.
//!
//! * Gaussian: `y = I·(1 + ε)`, `ε ~ N(0, σ²)`, clamped at zero.
//! * Empirical: `ε` resampled from a [`ResidualBank`] stratum chosen by the
//!   ODE prevalence bin and the epidemic phase.
//! * Hybrid: `y(t) = a·I(t + Δt)` with `(a, Δt)` drawn from a
//!   [`WarpDistribution`] fitted to CTMC runs.
//!
//! Warp sign convention: `Δt = t_peak(ODE) - t_peak(run)`, so the warped ODE
//! peaks where the stochastic run peaked.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::{run_ensemble, CountState, TAKEOFF_THRESHOLD};
use crate::error::{Error, Result};
use crate::kde::ProductKde2;
use crate::residuals::{phase_of, Phase, MIN_ODE_PREVALENCE};
use crate::rng::RngSeed;
use crate::scenarios::Scenario;
use crate::sir::{integrate_sir, peak_of, EpidemicParameters, OdeSolution, Trajectory, TrajectoryKind};
use crate::stats::mean_var;

pub const DEFAULT_BINS: usize = 10;
/// Window of the centred moving average applied before locating peaks.
pub const SMOOTHING_WINDOW: usize = 3;
pub const MIN_WARP_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }
}

/// Multiplicative Gaussian noise on each value, clamped at zero.
pub fn gaussian_values<R: Rng + ?Sized>(clean: &[f64], noise: NoiseSpec, rng: &mut R, out: &mut Vec<f64>) {
    out.clear();
    if noise.sigma == 0.0 {
        out.extend_from_slice(clean);
        return;
    }
    let dist = Normal::new(0.0, noise.sigma).expect("sigma validated");
    out.extend(clean.iter().map(|&i| (i * (1.0 + dist.sample(rng))).max(0.0)));
}

pub fn gaussian_dataset(ode: &Trajectory, noise: NoiseSpec, seed: RngSeed) -> Result<Trajectory> {
    NoiseSpec::new(noise.sigma)?;
    let mut out = Vec::with_capacity(ode.len());
    gaussian_values(&ode.prevalence, noise, &mut seed.rng(), &mut out);
    Trajectory::new(ode.grid.clone(), out, TrajectoryKind::Synthetic)
}

/// Scaled residuals stratified by (ODE prevalence bin, phase).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBank {
    /// `bins + 1` increasing edges; values below the first or above the last
    /// edge fall into the end bins.
    pub bin_edges: Vec<f64>,
    pub strata: BTreeMap<(usize, Phase), Vec<f64>>,
    pub scenario: String,
    pub params: EpidemicParameters,
    /// Strata that were empty and hold a copy of a neighbour's residuals.
    pub merged: Vec<(usize, Phase)>,
    pub warnings: Vec<String>,
}

impl ResidualBank {
    pub fn bins(&self) -> usize {
        self.bin_edges.len() - 1
    }

    pub fn bin_of(&self, prevalence: f64) -> usize {
        let inner = &self.bin_edges[1..self.bin_edges.len() - 1];
        inner.partition_point(|&e| e <= prevalence)
    }

    pub fn stratum(&self, bin: usize, phase: Phase) -> &[f64] {
        &self.strata[&(bin, phase)]
    }

    /// Single-residual bank, mainly for tests and examples.
    pub fn constant(residual: f64, params: EpidemicParameters) -> Self {
        let strata = [Phase::Pre, Phase::Post]
            .into_iter()
            .map(|p| ((0, p), vec![residual]))
            .collect();
        Self {
            bin_edges: vec![0.0, params.population as f64],
            strata,
            scenario: "constant".into(),
            params,
            merged: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// `bin_index,phase,residual` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_index,phase,residual")?;
        for ((bin, phase), values) in &self.strata {
            for v in values {
                writeln!(w, "{bin},{phase},{v}")?;
            }
        }
        Ok(())
    }

    /// JSON sidecar: edges, scenario and warnings (residuals live in the CSV).
    pub fn sidecar_json(&self) -> Result<String> {
        let side = BankSidecar {
            bin_edges: self.bin_edges.clone(),
            scenario: self.scenario.clone(),
            params: self.params,
            merged: self.merged.clone(),
            warnings: self.warnings.clone(),
        };
        Ok(serde_json::to_string_pretty(&side)?)
    }

    pub fn read<R: BufRead>(csv: R, sidecar: &str) -> Result<Self> {
        let side: BankSidecar = serde_json::from_str(sidecar)?;
        let mut strata: BTreeMap<(usize, Phase), Vec<f64>> = BTreeMap::new();
        for (k, line) in csv.lines().enumerate() {
            let line = line?;
            if k == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Parse(format!("bank line {}: expected 3 fields", k + 1)));
            }
            let bin = f[0].parse().map_err(|_| Error::Parse(format!("bad bin `{}`", f[0])))?;
            let phase = f[1].parse()?;
            let v: f64 = f[2].parse().map_err(|_| Error::Parse(format!("bad residual `{}`", f[2])))?;
            strata.entry((bin, phase)).or_default().push(v);
        }
        let bank = Self {
            bin_edges: side.bin_edges,
            strata,
            scenario: side.scenario,
            params: side.params,
            merged: side.merged,
            warnings: side.warnings,
        };
        bank.check()?;
        Ok(bank)
    }

    fn check(&self) -> Result<()> {
        if self.bin_edges.len() < 2 || self.bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvariantViolation("bin edges must be strictly increasing".into()));
        }
        for bin in 0..self.bins() {
            for phase in [Phase::Pre, Phase::Post] {
                match self.strata.get(&(bin, phase)) {
                    Some(v) if !v.is_empty() => {}
                    _ => {
                        return Err(Error::InvariantViolation(format!(
                            "stratum ({bin}, {phase}) is empty"
                        )))
                    }
                }
            }
        }
        if self.strata.values().flatten().any(|&r| !(r >= -1.0)) {
            return Err(Error::InvariantViolation("residual below -1".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct BankSidecar {
    bin_edges: Vec<f64>,
    scenario: String,
    params: EpidemicParameters,
    merged: Vec<(usize, Phase)>,
    warnings: Vec<String>,
}

/// Builds the residual bank from an ensemble and its ODE on a shared grid.
///
/// Bins are equal-mass: edges are quantiles of the ODE prevalence values
/// that pass the `I >= 1` cut. Empty strata borrow the residuals of the
/// nearest non-empty bin of the same phase (or of the other phase if a
/// phase has none at all), with a warning.
pub fn build_residual_bank(
    ensemble: &[Trajectory],
    ode: &Trajectory,
    bins: usize,
    scenario: &str,
    params: EpidemicParameters,
) -> Result<ResidualBank> {
    if bins == 0 {
        return Err(Error::InvalidInput("bins must be >= 1".into()));
    }
    if ensemble.is_empty() {
        return Err(Error::InvalidInput("empty ensemble".into()));
    }
    if ensemble.iter().any(|r| r.times() != ode.times()) {
        return Err(Error::InvalidInput("ensemble and ODE grids differ".into()));
    }
    let (peak, _) = peak_of(ode)?;
    let keep: Vec<usize> = (0..ode.len())
        .filter(|&k| ode.prevalence[k] >= MIN_ODE_PREVALENCE)
        .collect();
    if keep.is_empty() {
        return Err(Error::DegenerateSample("ODE prevalence never reaches 1".into()));
    }
    let mut vals: Vec<f64> = keep.iter().map(|&k| ode.prevalence[k]).collect();
    vals.sort_by(f64::total_cmp);
    let mut edges = vec![vals[0]];
    for b in 1..bins {
        let e = crate::stats::quantile_sorted(&vals, b as f64 / bins as f64);
        if e > *edges.last().unwrap() {
            edges.push(e);
        }
    }
    let top = *vals.last().unwrap();
    if top > *edges.last().unwrap() {
        edges.push(top);
    } else {
        edges.push(edges.last().unwrap() + 1.0);
    }
    let mut bank = ResidualBank {
        bin_edges: edges,
        strata: BTreeMap::new(),
        scenario: scenario.to_string(),
        params,
        merged: Vec::new(),
        warnings: Vec::new(),
    };
    if bank.bins() < bins {
        bank.warnings
            .push(format!("{} equal-mass bins requested, {} distinct", bins, bank.bins()));
    }
    let cells: Vec<(usize, Phase)> = keep
        .iter()
        .map(|&k| (bank.bin_of(ode.prevalence[k]), phase_of(ode.times()[k], peak)))
        .collect();
    for run in ensemble {
        for (&k, cell) in keep.iter().zip(&cells) {
            let i = ode.prevalence[k];
            bank.strata
                .entry(*cell)
                .or_default()
                .push((run.prevalence[k] - i) / i);
        }
    }
    fill_empty(&mut bank);
    bank.check()?;
    Ok(bank)
}

fn fill_empty(bank: &mut ResidualBank) {
    let nb = bank.bins();
    for phase in [Phase::Pre, Phase::Post] {
        let other = if phase == Phase::Pre { Phase::Post } else { Phase::Pre };
        for bin in 0..nb {
            if bank.strata.contains_key(&(bin, phase)) {
                continue;
            }
            let nearest = |p: Phase| {
                (0..nb)
                    .filter(|&b| bank.strata.contains_key(&(b, p)))
                    .min_by_key(|&b| (b.abs_diff(bin), b))
            };
            let (src, src_phase) = match nearest(phase) {
                Some(b) => (b, phase),
                None => (nearest(other).expect("at least one stratum"), other),
            };
            let copy = bank.strata[&(src, src_phase)].clone();
            bank.warnings.push(format!(
                "stratum ({bin}, {phase}) empty; merged with ({src}, {src_phase})"
            ));
            bank.strata.insert((bin, phase), copy);
            bank.merged.push((bin, phase));
        }
    }
}

/// Resampled multiplicative residuals applied to `clean`; the phase is taken
/// relative to `peak_time` of the curve being perturbed.
pub fn empirical_values<R: Rng + ?Sized>(
    times: &[f64],
    clean: &[f64],
    peak_time: f64,
    bank: &ResidualBank,
    rng: &mut R,
    out: &mut Vec<f64>,
) {
    out.clear();
    out.extend(times.iter().zip(clean).map(|(&t, &i)| {
        if i < MIN_ODE_PREVALENCE {
            return i;
        }
        let s = bank.stratum(bank.bin_of(i), phase_of(t, peak_time));
        let eps = s[rng.random_range(0..s.len())];
        (i * (1.0 + eps)).max(0.0)
    }));
}

pub fn empirical_dataset(ode: &Trajectory, bank: &ResidualBank, seed: RngSeed) -> Result<Trajectory> {
    let (peak, _) = peak_of(ode)?;
    let mut out = Vec::with_capacity(ode.len());
    empirical_values(ode.times(), &ode.prevalence, peak, bank, &mut seed.rng(), &mut out);
    Trajectory::new(ode.grid.clone(), out, TrajectoryKind::Synthetic)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpSample {
    pub amplitude: f64,
    pub shift: f64,
}

/// Centred moving average; the end points average what is available.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    (0..x.len())
        .map(|k| {
            let lo = k.saturating_sub(h);
            let hi = (k + h).min(x.len() - 1);
            x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

pub(crate) fn smoothed_peak(traj: &Trajectory) -> Result<(f64, f64)> {
    let s = Trajectory::new(
        traj.grid.clone(),
        moving_average(&traj.prevalence, SMOOTHING_WINDOW),
        traj.kind,
    )?;
    peak_of(&s)
}

/// Smoothed peak with its time refined off the grid by the vertex of the
/// parabola through the maximum and its two neighbours. Peaks of fast
/// epidemics move by fractions of a day, which grid maxima cannot show.
fn refined_smoothed_peak(traj: &Trajectory) -> Result<(f64, f64)> {
    let s = moving_average(&traj.prevalence, SMOOTHING_WINDOW);
    let (t, h) = smoothed_peak(traj)?;
    let times = traj.times();
    let k = times.iter().position(|&x| x == t).unwrap_or(0);
    if k == 0 || k + 1 >= times.len() {
        return Ok((t, h));
    }
    let (l, c, r) = (s[k - 1], s[k], s[k + 1]);
    let curvature = l - 2.0 * c + r;
    if curvature >= 0.0 {
        return Ok((t, h));
    }
    let step = if l >= r { t - times[k - 1] } else { times[k + 1] - t };
    let offset = (0.5 * (l - r) / curvature).clamp(-0.5, 0.5);
    Ok((t + offset * step, h))
}

/// Amplitude and shift mapping the ODE peak onto the run's smoothed peak.
/// Both curves get the same smoothing, so a run equal to the ODE gives
/// exactly `(1, 0)`.
pub fn extract_warp(ctmc: &Trajectory, ode: &Trajectory) -> Result<WarpSample> {
    if ctmc.times() != ode.times() {
        return Err(Error::InvalidInput("run and ODE grids differ".into()));
    }
    if let Some(f) = ctmc.final_size() {
        if f < TAKEOFF_THRESHOLD {
            return Err(Error::NoTakeoff {
                final_size: f,
                threshold: TAKEOFF_THRESHOLD,
            });
        }
    }
    let (tc, hc) = refined_smoothed_peak(ctmc)?;
    let (to, ho) = refined_smoothed_peak(ode)?;
    Ok(WarpSample {
        amplitude: hc / ho,
        shift: to - tc,
    })
}

/// Joint KDE over (a, Δt).
#[derive(Debug, Clone, PartialEq)]
pub struct WarpDistribution {
    pub samples: Vec<WarpSample>,
    pub kde: ProductKde2,
}

#[derive(Serialize, Deserialize)]
struct WarpSidecar {
    count: usize,
    mean: [f64; 2],
    scale: [f64; 2],
    bandwidth: [f64; 2],
    warnings: Vec<String>,
}

impl WarpDistribution {
    pub fn fit(samples: Vec<WarpSample>) -> Result<Self> {
        if samples.len() < MIN_WARP_SAMPLES {
            return Err(Error::SampleTooSmall {
                n: samples.len(),
                min: MIN_WARP_SAMPLES,
            });
        }
        if samples.iter().any(|s| !(s.amplitude > 0.0)) {
            return Err(Error::InvalidInput("warp amplitudes must be > 0".into()));
        }
        let pts: Vec<[f64; 2]> = samples.iter().map(|s| [s.amplitude, s.shift]).collect();
        let kde = ProductKde2::fit(&pts)?;
        Ok(Self { samples, kde })
    }

    /// One draw; non-positive amplitudes are rejected and redrawn.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> WarpSample {
        loop {
            let [a, dt] = self.kde.sample(rng);
            if a > 0.0 {
                return WarpSample { amplitude: a, shift: dt };
            }
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "a,dt")?;
        for s in &self.samples {
            writeln!(w, "{},{}", s.amplitude, s.shift)?;
        }
        Ok(())
    }

    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&WarpSidecar {
            count: self.samples.len(),
            mean: self.kde.mean,
            scale: self.kde.scale,
            bandwidth: self.kde.bandwidth,
            warnings: self.kde.warnings.clone(),
        })?)
    }

    /// Reads the `a,dt` CSV and refits; the sidecar is checked against it.
    pub fn read<R: BufRead>(csv: R, sidecar: Option<&str>) -> Result<Self> {
        let mut samples = Vec::new();
        for (k, line) in csv.lines().enumerate() {
            let line = line?;
            if k == 0 || line.trim().is_empty() {
                continue;
            }
            let (a, dt) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("warp line {}: expected `a,dt`", k + 1)))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("warp line {}: bad number `{s}`", k + 1)))
            };
            samples.push(WarpSample {
                amplitude: parse(a)?,
                shift: parse(dt)?,
            });
        }
        let dist = Self::fit(samples)?;
        if let Some(text) = sidecar {
            let side: WarpSidecar = serde_json::from_str(text)?;
            if side.count != dist.samples.len() || side.bandwidth != dist.kde.bandwidth {
                return Err(Error::Parse("warp sidecar does not match the samples".into()));
            }
        }
        Ok(dist)
    }
}

/// `a·I(t + Δt)` on the observation grid, interpolating the dense output.
pub fn hybrid_values(ode: &OdeSolution, warp: WarpSample, out: &mut Vec<f64>) {
    out.clear();
    out.extend(
        ode.trajectory
            .times()
            .iter()
            .map(|&t| warp.amplitude * ode.prevalence_at(t + warp.shift)),
    );
}

pub fn hybrid_dataset(ode: &OdeSolution, warp: &WarpDistribution, seed: RngSeed) -> Result<Trajectory> {
    let w = warp.sample(&mut seed.rng());
    let mut out = Vec::with_capacity(ode.trajectory.len());
    hybrid_values(ode, w, &mut out);
    Trajectory::new(ode.trajectory.grid.clone(), out, TrajectoryKind::Synthetic)
}

/// Warp pairs from `runs` CTMC realizations; non-takeoff runs are skipped.
pub fn warp_samples(scenario: &Scenario, runs: usize, seed: RngSeed) -> Result<(Vec<WarpSample>, usize)> {
    let ode = integrate_sir(&scenario.params, &scenario.initial, &scenario.grid)?;
    let init = CountState::from_state(&scenario.initial)?;
    let ens = run_ensemble(&scenario.params, &init, &scenario.grid, runs, seed)?;
    let mut out = Vec::with_capacity(runs);
    let mut skipped = 0;
    for run in &ens {
        match extract_warp(run, &ode.trajectory) {
            Ok(w) => out.push(w),
            Err(Error::NoTakeoff { .. }) | Err(Error::NoPeak) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpCell {
    pub label: String,
    pub r0: f64,
    pub population: u64,
    pub runs: usize,
    pub taken_off: usize,
    /// Moments of (a, Δt); `None` when fewer than 10 runs took off.
    pub mean_a: Option<f64>,
    pub sd_a: Option<f64>,
    pub mean_dt: Option<f64>,
    pub sd_dt: Option<f64>,
}

/// Per (scenario, population) moments of the extracted warp pairs. Rates
/// are rescaled so R₀ is preserved at each population.
pub fn warp_statistics(
    scenarios: &[Scenario],
    populations: &[u64],
    runs: usize,
    seed: RngSeed,
) -> Result<Vec<WarpCell>> {
    let mut jobs = Vec::new();
    for (si, sc) in scenarios.iter().enumerate() {
        for (pi, &n) in populations.iter().enumerate() {
            let params = sc.params.rescaled_to(n)?;
            let i0 = (sc.initial.infectious.round() as u64).min(n - 1);
            let cell = Scenario::new(sc.label.clone(), params, i0, sc.grid.t_end as u32)?;
            jobs.push((cell, seed.derive(&[si as u64, pi as u64])));
        }
    }
    jobs.par_iter()
        .map(|(sc, s)| {
            let (w, _) = warp_samples(sc, runs, *s)?;
            let ok = w.len() >= MIN_WARP_SAMPLES;
            let a: Vec<f64> = w.iter().map(|x| x.amplitude).collect();
            let dt: Vec<f64> = w.iter().map(|x| x.shift).collect();
            let (ma, va) = mean_var(&a);
            let (md, vd) = mean_var(&dt);
            Ok(WarpCell {
                label: sc.label.clone(),
                r0: sc.r0(),
                population: sc.params.population,
                runs,
                taken_off: w.len(),
                mean_a: ok.then_some(ma),
                sd_a: ok.then_some(va.sqrt()),
                mean_dt: ok.then_some(md),
                sd_dt: ok.then_some(vd.sqrt()),
            })
        })
        .collect()
}

pub fn write_warp_table_csv<W: Write>(cells: &[WarpCell], mut w: W) -> Result<()> {
    writeln!(w, "label,r0,population,runs,taken_off,mean_a,sd_a,mean_dt,sd_dt")?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in cells {
        writeln!(
            w,
            "{},{:.2},{},{},{},{},{},{},{}",
            c.label,
            c.r0,
            c.population,
            c.runs,
            c.taken_off,
            f(c.mean_a),
            f(c.sd_a),
            f(c.mean_dt),
            f(c.sd_dt)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sir::{StateVector, TimeGrid};

    fn scenario() -> Scenario {
        Scenario::from_rates(0.1, 0.0004, 1000).unwrap()
    }

    fn ode() -> OdeSolution {
        let s = scenario();
        integrate_sir(&s.params, &s.initial, &s.grid).unwrap()
    }

    #[test]
    fn gaussian_zero_sigma_is_identity_and_clamps() {
        let o = ode().trajectory;
        let d = gaussian_dataset(&o, NoiseSpec::new(0.0).unwrap(), RngSeed::new(1, 1)).unwrap();
        assert_eq!(d.prevalence, o.prevalence);
        assert_eq!(d.kind, TrajectoryKind::Synthetic);
        let mut rng = RngSeed::new(1, 2).rng();
        let mut out = Vec::new();
        for _ in 0..1000 {
            gaussian_values(&[1.0; 10], NoiseSpec { sigma: 2.0 }, &mut rng, &mut out);
            assert!(out.iter().all(|&v| v >= 0.0));
        }
        assert!(NoiseSpec::new(-0.1).is_err());
    }

    #[test]
    fn bank_from_ode_copies_is_zero() {
        let s = scenario();
        let o = ode().trajectory;
        let bank = build_residual_bank(&vec![o.clone(); 3], &o, DEFAULT_BINS, &s.label, s.params).unwrap();
        assert_eq!(bank.bins(), DEFAULT_BINS);
        assert!(bank.strata.values().flatten().all(|&r| r == 0.0));
        let d = empirical_dataset(&o, &bank, RngSeed::new(4, 4)).unwrap();
        assert_eq!(d.prevalence, o.prevalence);
    }

    #[test]
    fn constant_bank_scales_by_one_and_a_half() {
        let s = scenario();
        let o = ode().trajectory;
        let bank = ResidualBank::constant(0.5, s.params);
        let d = empirical_dataset(&o, &bank, RngSeed::new(4, 5)).unwrap();
        for (y, i) in d.prevalence.iter().zip(&o.prevalence) {
            if *i >= 1.0 {
                assert_eq!(*y, 1.5 * i);
            } else {
                assert_eq!(y, i);
            }
        }
    }

    #[test]
    fn empty_strata_are_merged_with_warning() {
        // Peak at t = 1 means the only pre-peak point is t = 0.
        let g = TimeGrid::daily(5);
        let o = Trajectory::new(g.clone(), vec![2.0, 9.0, 7.0, 5.0, 3.0, 1.5], TrajectoryKind::Ode).unwrap();
        let run = Trajectory::new(g, vec![0.0, 9.0, 7.0, 5.0, 3.0, 3.0], TrajectoryKind::Ctmc).unwrap();
        let bank = build_residual_bank(&[run], &o, 3, "x", scenario().params).unwrap();
        assert!(!bank.warnings.is_empty());
        for b in 0..bank.bins() {
            assert!(!bank.stratum(b, Phase::Pre).is_empty());
        }
        assert_eq!(bank.stratum(2, Phase::Pre), &[-1.0]);
    }

    #[test]
    fn bank_round_trip() {
        let s = scenario();
        let o = ode().trajectory;
        let init = s.count_initial().unwrap();
        let ens = run_ensemble(&s.params, &init, &s.grid, 20, RngSeed::new(5, 0)).unwrap();
        let bank = build_residual_bank(&ens, &o, DEFAULT_BINS, &s.label, s.params).unwrap();
        let mut csv = Vec::new();
        bank.write_csv(&mut csv).unwrap();
        let back = ResidualBank::read(&csv[..], &bank.sidecar_json().unwrap()).unwrap();
        assert_eq!(back, bank);
    }

    #[test]
    fn warp_identity_and_construction() {
        let o = ode();
        let t = &o.trajectory;
        let w = extract_warp(t, t).unwrap();
        assert_eq!((w.amplitude, w.shift), (1.0, 0.0));
        // Run = 2·ODE delayed by 3 days.
        let run: Vec<f64> = t.times().iter().map(|&x| 2.0 * o.prevalence_at(x - 3.0)).collect();
        let run = Trajectory::new(t.grid.clone(), run, TrajectoryKind::Synthetic).unwrap();
        let w = extract_warp(&run, t).unwrap();
        assert!((w.amplitude - 2.0).abs() < 1e-12);
        assert!((w.shift + 3.0).abs() < 1e-9);
        // Sub-day delays are resolved, not rounded to the grid.
        let run: Vec<f64> = t.times().iter().map(|&x| o.prevalence_at(x - 0.4)).collect();
        let run = Trajectory::new(t.grid.clone(), run, TrajectoryKind::Synthetic).unwrap();
        let w = extract_warp(&run, t).unwrap();
        assert!((w.shift + 0.4).abs() < 0.1, "{}", w.shift);
    }

    #[test]
    fn extinct_run_is_rejected() {
        let s = scenario();
        let init = CountState::seeded(1000, 1).unwrap();
        let p = EpidemicParameters::new_allow_zero_beta(0.1, 0.0, 1000).unwrap();
        let run = crate::ctmc::simulate_daily(&p, &init, &s.grid, RngSeed::new(1, 0)).unwrap();
        assert!(matches!(
            extract_warp(&run, &ode().trajectory),
            Err(Error::NoTakeoff { .. })
        ));
    }

    #[test]
    fn hybrid_identity_doubling_and_clamp() {
        let o = ode();
        let mut out = Vec::new();
        hybrid_values(&o, WarpSample { amplitude: 1.0, shift: 0.0 }, &mut out);
        assert_eq!(out, o.trajectory.prevalence);
        hybrid_values(&o, WarpSample { amplitude: 2.0, shift: 0.0 }, &mut out);
        for (y, i) in out.iter().zip(&o.trajectory.prevalence) {
            assert_eq!(*y, 2.0 * i);
        }
        hybrid_values(&o, WarpSample { amplitude: 1.0, shift: -10.0 }, &mut out);
        let i0 = o.trajectory.prevalence[0];
        assert!(out[..10].iter().all(|&v| v == i0));
    }

    #[test]
    fn half_day_shift_matches_dense_solution() {
        let o = ode();
        let mut out = Vec::new();
        hybrid_values(&o, WarpSample { amplitude: 1.0, shift: 0.5 }, &mut out);
        let s = scenario();
        let g = TimeGrid::new(0.0, 150.5, (0..150).map(|k| k as f64 + 0.5).collect()).unwrap();
        let fine = integrate_sir(&s.params, &StateVector::seeded(1000, s.initial.infectious as u64).unwrap(), &g).unwrap();
        for (y, want) in out.iter().zip(&fine.trajectory.prevalence) {
            assert!((y - want).abs() <= 1e-3 * want.abs().max(1e-9));
        }
    }

    #[test]
    fn warp_distribution_round_trip_and_sampling() {
        let samples: Vec<WarpSample> = (0..40)
            .map(|k| WarpSample { amplitude: 1.0 + 0.01 * k as f64, shift: -0.1 * k as f64 })
            .collect();
        let d = WarpDistribution::fit(samples).unwrap();
        let mut csv = Vec::new();
        d.write_csv(&mut csv).unwrap();
        let back = WarpDistribution::read(&csv[..], Some(&d.sidecar_json().unwrap())).unwrap();
        assert_eq!(back, d);
        let mut rng = RngSeed::new(9, 9).rng();
        assert!((0..1000).all(|_| d.sample(&mut rng).amplitude > 0.0));
        assert!(WarpDistribution::fit(d.samples[..9].to_vec()).is_err());
    }

    #[test]
    fn moving_average_ends() {
        assert_eq!(moving_average(&[3.0, 6.0, 9.0, 0.0], 3), vec![4.5, 6.0, 5.0, 4.5]);
    }
}
