//! Exact stochastic SIR simulation (Gillespie direct method).
//!
//! Events are infection (S-1, I+1) at rate βSI and recovery (I-1, R+1) at
//! rate αI. Each step draws an exponential waiting time from the total rate
//! and then one uniform `u`; the event is an infection iff
//! `u < βSI / (βSI + αI)`.

use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngSeed, GENERATOR};
use crate::sir::{EpidemicParameters, StateVector, TimeGrid, Trajectory, TrajectoryKind};

/// Runs whose final size is below this many infections count as
/// extinct-before-takeoff.
pub const TAKEOFF_THRESHOLD: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountState {
    pub susceptible: u64,
    pub infectious: u64,
    pub recovered: u64,
}

impl CountState {
    pub fn new(susceptible: u64, infectious: u64, recovered: u64) -> Self {
        Self {
            susceptible,
            infectious,
            recovered,
        }
    }

    pub fn seeded(population: u64, initial_infectious: u64) -> Result<Self> {
        if initial_infectious > population {
            return Err(Error::InvalidInput(format!(
                "initial infectious {initial_infectious} exceeds population {population}"
            )));
        }
        Ok(Self::new(population - initial_infectious, initial_infectious, 0))
    }

    /// Integer state matching a real-valued one; fails on fractional counts.
    pub fn from_state(state: &StateVector) -> Result<Self> {
        let conv = |v: f64| -> Result<u64> {
            if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
                Ok(v as u64)
            } else {
                Err(Error::InvalidInput(format!(
                    "stochastic simulation needs integer counts, got {v}"
                )))
            }
        };
        Ok(Self::new(
            conv(state.susceptible)?,
            conv(state.infectious)?,
            conv(state.recovered)?,
        ))
    }

    pub fn total(&self) -> u64 {
        self.susceptible + self.infectious + self.recovered
    }
}

impl From<CountState> for StateVector {
    fn from(c: CountState) -> Self {
        StateVector {
            susceptible: c.susceptible as f64,
            infectious: c.infectious as f64,
            recovered: c.recovered as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Infection,
    Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub event: EventKind,
    /// State immediately after the event.
    pub state: CountState,
}

fn check(params: &EpidemicParameters, initial: &CountState) -> Result<()> {
    EpidemicParameters::new_allow_zero_beta(params.alpha, params.beta, params.population)?;
    if initial.total() != params.population {
        return Err(Error::InvalidInput(format!(
            "initial state {initial:?} does not sum to population {}",
            params.population
        )));
    }
    Ok(())
}

/// Drives the chain until extinction of infectives or `t_end`, reporting
/// every event to `on_event`.
fn drive<R: Rng>(
    params: &EpidemicParameters,
    initial: CountState,
    t_end: f64,
    rng: &mut R,
    mut on_event: impl FnMut(f64, EventKind, CountState),
) -> CountState {
    let mut x = initial;
    let mut t = 0.0;
    while x.infectious > 0 {
        let i = x.infectious as f64;
        let infection = params.beta * x.susceptible as f64 * i;
        let recovery = params.alpha * i;
        let total = infection + recovery;
        if total <= 0.0 {
            break;
        }
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / total;
        if t >= t_end {
            break;
        }
        let v: f64 = rng.random();
        let kind = if v < infection / total {
            x.susceptible -= 1;
            x.infectious += 1;
            EventKind::Infection
        } else {
            x.infectious -= 1;
            x.recovered += 1;
            EventKind::Recovery
        };
        on_event(t, kind, x);
    }
    x
}

/// Full event log of one realization on `[0, t_end)`.
///
/// An initial state with no infectives yields an empty log.
pub fn gillespie_run(
    params: &EpidemicParameters,
    initial: &CountState,
    t_end: f64,
    seed: RngSeed,
) -> Result<Vec<EventRecord>> {
    check(params, initial)?;
    let mut events = Vec::new();
    drive(params, *initial, t_end, &mut seed.rng(), |time, event, state| {
        events.push(EventRecord { time, event, state })
    });
    Ok(events)
}

/// Right-continuous piecewise-constant sampling of an event log: the value
/// at `t` is the state after the last event with time `<= t`.
pub fn sample_daily(events: &[EventRecord], initial: &CountState, grid: &TimeGrid) -> Trajectory {
    let mut sampler = GridSampler::new(grid, *initial);
    for e in events {
        sampler.event(e.time, e.state);
    }
    sampler.finish(grid)
}

struct GridSampler<'a> {
    times: &'a [f64],
    next: usize,
    current: CountState,
    s: Vec<f64>,
    i: Vec<f64>,
    r: Vec<f64>,
}

impl<'a> GridSampler<'a> {
    fn new(grid: &'a TimeGrid, initial: CountState) -> Self {
        let n = grid.len();
        Self {
            times: grid.times(),
            next: 0,
            current: initial,
            s: Vec::with_capacity(n),
            i: Vec::with_capacity(n),
            r: Vec::with_capacity(n),
        }
    }

    fn record_until(&mut self, time: f64) {
        while self.next < self.times.len() && self.times[self.next] < time {
            self.s.push(self.current.susceptible as f64);
            self.i.push(self.current.infectious as f64);
            self.r.push(self.current.recovered as f64);
            self.next += 1;
        }
    }

    fn event(&mut self, time: f64, after: CountState) {
        self.record_until(time);
        self.current = after;
    }

    fn finish(mut self, grid: &TimeGrid) -> Trajectory {
        self.record_until(f64::INFINITY);
        Trajectory {
            grid: grid.clone(),
            prevalence: self.i,
            susceptible: Some(self.s),
            recovered: Some(self.r),
            kind: TrajectoryKind::Ctmc,
        }
    }
}

/// One realization sampled straight onto the grid without keeping the log.
///
/// Draw-for-draw identical to `sample_daily(gillespie_run(..))` with
/// `t_end = grid.t_end`.
pub fn simulate_daily(
    params: &EpidemicParameters,
    initial: &CountState,
    grid: &TimeGrid,
    seed: RngSeed,
) -> Result<Trajectory> {
    check(params, initial)?;
    let mut sampler = GridSampler::new(grid, *initial);
    drive(params, *initial, grid.t_end, &mut seed.rng(), |t, _, x| {
        sampler.event(t, x)
    });
    Ok(sampler.finish(grid))
}

/// `count` independent realizations; run `j` uses stream `seed.stream + j`.
///
/// The output is independent of the rayon pool size.
pub fn run_ensemble(
    params: &EpidemicParameters,
    initial: &CountState,
    grid: &TimeGrid,
    count: usize,
    seed: RngSeed,
) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(Error::InvalidInput("ensemble count must be >= 1".into()));
    }
    check(params, initial)?;
    (0..count)
        .into_par_iter()
        .map(|j| simulate_daily(params, initial, grid, seed.offset(j as u64)))
        .collect()
}

/// True when the run infected at least [`TAKEOFF_THRESHOLD`] people in total.
/// Runs without compartment information are assumed to have taken off.
pub fn took_off(traj: &Trajectory) -> bool {
    traj.final_size().is_none_or(|f| f >= TAKEOFF_THRESHOLD)
}

/// Keeps all runs, or only those that took off when `drop_extinct` is set.
pub fn filter_extinct(ensemble: Vec<Trajectory>, drop_extinct: bool) -> Vec<Trajectory> {
    if drop_extinct {
        ensemble.into_iter().filter(took_off).collect()
    } else {
        ensemble
    }
}

/// Sidecar describing a persisted ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub params: EpidemicParameters,
    pub initial: CountState,
    pub t_end: f64,
    pub seed: RngSeed,
    pub generator: String,
    pub count: usize,
}

impl EnsembleManifest {
    pub fn new(
        params: EpidemicParameters,
        initial: CountState,
        grid: &TimeGrid,
        seed: RngSeed,
        count: usize,
    ) -> Self {
        Self {
            params,
            initial,
            t_end: grid.t_end,
            seed,
            generator: GENERATOR.to_string(),
            count,
        }
    }
}

/// `run_id,t,I` long-format CSV.
pub fn write_ensemble_csv<W: Write>(ensemble: &[Trajectory], mut w: W) -> Result<()> {
    writeln!(w, "run_id,t,I")?;
    for (j, traj) in ensemble.iter().enumerate() {
        for (t, i) in traj.times().iter().zip(&traj.prevalence) {
            writeln!(w, "{j},{t:.6},{i}")?;
        }
    }
    Ok(())
}

pub fn read_ensemble_csv<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty ensemble file".into()))??;
    if header.trim() != "run_id,t,I" {
        return Err(Error::Parse(format!("unexpected header `{header}`")));
    }
    let mut runs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut field = || {
            parts
                .next()
                .ok_or_else(|| Error::Parse(format!("short row `{line}`")))
        };
        let id: usize = field()?
            .parse()
            .map_err(|e| Error::Parse(format!("run_id: {e}")))?;
        let t: f64 = field()?.parse().map_err(|e| Error::Parse(format!("t: {e}")))?;
        let i: f64 = field()?.parse().map_err(|e| Error::Parse(format!("I: {e}")))?;
        if id > runs.len() {
            return Err(Error::Parse(format!("run ids must be contiguous, saw {id}")));
        }
        if id == runs.len() {
            runs.push((vec![], vec![]));
        }
        runs[id].0.push(t);
        runs[id].1.push(i);
    }
    runs.into_iter()
        .map(|(t, i)| {
            let start = t[0];
            let end = *t.last().unwrap();
            let grid = TimeGrid::new(start, end.max(start + 1.0), t)?;
            Trajectory::new(grid, i, TrajectoryKind::Ctmc)
        })
        .collect()
}

pub fn write_events_csv<W: Write>(events: &[EventRecord], mut w: W) -> Result<()> {
    writeln!(w, "time,event,S,I,R")?;
    for e in events {
        let kind = match e.event {
            EventKind::Infection => "infection",
            EventKind::Recovery => "recovery",
        };
        writeln!(
            w,
            "{},{kind},{},{},{}",
            e.time, e.state.susceptible, e.state.infectious, e.state.recovered
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> EpidemicParameters {
        EpidemicParameters::new(0.1, 0.0004, 1000).unwrap()
    }

    #[test]
    fn no_infectives_means_no_events() {
        let init = CountState::seeded(1000, 0).unwrap();
        let ev = gillespie_run(&params(), &init, 100.0, RngSeed::new(1, 0)).unwrap();
        assert!(ev.is_empty());
        let traj = sample_daily(&ev, &init, &TimeGrid::daily(10));
        assert!(traj.prevalence.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_beta_is_a_pure_death_process() {
        let p = EpidemicParameters::new_allow_zero_beta(0.1, 0.0, 1000).unwrap();
        let init = CountState::seeded(1000, 7).unwrap();
        let ev = gillespie_run(&p, &init, 1e9, RngSeed::new(3, 4)).unwrap();
        assert_eq!(ev.len(), 7);
        assert!(ev.iter().all(|e| e.event == EventKind::Recovery));
    }

    #[test]
    fn events_conserve_population_and_are_ordered() {
        let init = CountState::seeded(1000, 5).unwrap();
        let ev = gillespie_run(&params(), &init, 150.0, RngSeed::new(11, 2)).unwrap();
        let mut prev = init;
        let mut t = 0.0;
        for e in &ev {
            assert!(e.time > t);
            t = e.time;
            assert_eq!(e.state.total(), 1000);
            assert!(e.state.susceptible <= prev.susceptible);
            assert!(e.state.recovered >= prev.recovered);
            prev = e.state;
        }
    }

    #[test]
    fn single_recovery_sampling() {
        let init = CountState::seeded(10, 1).unwrap();
        let ev = vec![EventRecord {
            time: 0.5,
            event: EventKind::Recovery,
            state: CountState::new(9, 0, 1),
        }];
        let traj = sample_daily(&ev, &init, &TimeGrid::daily(3));
        assert_eq!(traj.prevalence, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn event_exactly_on_grid_time_is_included() {
        let init = CountState::seeded(10, 1).unwrap();
        let ev = vec![EventRecord {
            time: 1.0,
            event: EventKind::Infection,
            state: CountState::new(8, 2, 0),
        }];
        let traj = sample_daily(&ev, &init, &TimeGrid::daily(2));
        assert_eq!(traj.prevalence, vec![1.0, 2.0, 2.0]);
    }

    #[test]
    fn streaming_matches_logged_run() {
        let init = CountState::seeded(1000, 1).unwrap();
        let grid = TimeGrid::default();
        for stream in 0..20 {
            let seed = RngSeed::new(99, stream);
            let ev = gillespie_run(&params(), &init, grid.t_end, seed).unwrap();
            let a = sample_daily(&ev, &init, &grid);
            let b = simulate_daily(&params(), &init, &grid, seed).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ensemble_csv_round_trip() {
        let init = CountState::seeded(1000, 2).unwrap();
        let grid = TimeGrid::daily(30);
        let ens = run_ensemble(&params(), &init, &grid, 4, RngSeed::new(5, 0)).unwrap();
        let mut buf = Vec::new();
        write_ensemble_csv(&ens, &mut buf).unwrap();
        let back = read_ensemble_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in ens.iter().zip(&back) {
            assert_eq!(a.prevalence, b.prevalence);
            assert_eq!(a.times(), b.times());
        }
    }

    #[test]
    fn rejects_inconsistent_initial_state() {
        let bad = CountState::new(10, 1, 0);
        assert!(gillespie_run(&params(), &bad, 10.0, RngSeed::default()).is_err());
    }
}
