//! Deterministic SIR model.
//!
//! dS/dt = -β S I, dI/dt = β S I - α I, dR/dt = α I, integrated with a
//! fixed-step classical Runge-Kutta scheme so that every run is
//! bit-reproducible. The observed quantity everywhere in the crate is the
//! prevalence I(t).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default RK4 step in days.
pub const DEFAULT_STEP: f64 = 0.05;
/// Default observation horizon in days.
pub const DEFAULT_HORIZON: f64 = 150.0;
/// Round-off tolerance below zero that is silently clamped after a step.
const NEGATIVE_CLAMP: f64 = -1e-12;
/// Compartments smaller than this are set to zero after each step. Without
/// it a dying epidemic decays into subnormal floats, which are very slow.
const UNDERFLOW_FLUSH: f64 = 1e-200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpidemicParameters {
    /// Recovery rate, 1/day.
    pub alpha: f64,
    /// Transmission rate, 1/(person day).
    pub beta: f64,
    pub population: u64,
}

impl EpidemicParameters {
    pub fn new(alpha: f64, beta: f64, population: u64) -> Result<Self> {
        let p = Self {
            alpha,
            beta,
            population,
        };
        p.validate()?;
        Ok(p)
    }

    /// Like [`new`](Self::new) but also admits `beta == 0`, which the
    /// stochastic simulator and the control projections need.
    pub fn new_allow_zero_beta(alpha: f64, beta: f64, population: u64) -> Result<Self> {
        let p = Self {
            alpha,
            beta,
            population,
        };
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be > 0, got {alpha}")));
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::InvalidInput(format!("beta must be >= 0, got {beta}")));
        }
        if population < 2 {
            return Err(Error::InvalidInput("population must be at least 2".into()));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidInput(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        Self::new_allow_zero_beta(self.alpha, self.beta, self.population).map(|_| ())
    }

    pub fn r0(&self) -> f64 {
        basic_reproduction_number(self)
    }

    pub fn n(&self) -> f64 {
        self.population as f64
    }

    /// Same α and R₀ in a population of a different size.
    pub fn rescaled_to(&self, population: u64) -> Result<Self> {
        Self::new(
            self.alpha,
            self.beta * self.n() / population as f64,
            population,
        )
    }
}

/// R₀ = βN/α.
pub fn basic_reproduction_number(params: &EpidemicParameters) -> f64 {
    params.beta * params.n() / params.alpha
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub susceptible: f64,
    pub infectious: f64,
    pub recovered: f64,
}

impl StateVector {
    pub fn new(susceptible: f64, infectious: f64, recovered: f64) -> Result<Self> {
        let s = Self {
            susceptible,
            infectious,
            recovered,
        };
        for v in [susceptible, infectious, recovered] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "state components must be finite and >= 0, got {s:?}"
                )));
            }
        }
        Ok(s)
    }

    /// `I₀` infectious, the rest susceptible, nobody recovered.
    pub fn seeded(population: u64, initial_infectious: u64) -> Result<Self> {
        if initial_infectious > population {
            return Err(Error::InvalidInput(format!(
                "initial infectious {initial_infectious} exceeds population {population}"
            )));
        }
        Self::new(
            (population - initial_infectious) as f64,
            initial_infectious as f64,
            0.0,
        )
    }

    pub fn total(&self) -> f64 {
        self.susceptible + self.infectious + self.recovered
    }

    pub fn check_population(&self, population: u64) -> Result<()> {
        let n = population as f64;
        if ((self.total() - n) / n).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "state {self:?} does not sum to population {population}"
            )));
        }
        Ok(())
    }
}

/// Observation times in days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, times: Vec<f64>) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite() && t_start < t_end) {
            return Err(Error::InvalidInput(format!(
                "time grid needs t_start < t_end, got [{t_start}, {t_end}]"
            )));
        }
        if times.is_empty() {
            return Err(Error::InvalidInput("time grid has no observation times".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput(
                "observation times must be strictly increasing".into(),
            ));
        }
        if times[0] < t_start || *times.last().unwrap() > t_end {
            return Err(Error::InvalidInput(
                "observation times must lie within [t_start, t_end]".into(),
            ));
        }
        Ok(Self {
            t_start,
            t_end,
            times,
        })
    }

    /// Integer days `0, 1, …, days`.
    pub fn daily(days: u32) -> Self {
        assert!(days >= 1, "daily grid needs at least one day");
        Self {
            t_start: 0.0,
            t_end: days as f64,
            times: (0..=days).map(f64::from).collect(),
        }
    }

    /// Observation times up to `t_end`, same start.
    pub fn truncated(&self, t_end: f64) -> Result<Self> {
        let times: Vec<f64> = self.times.iter().copied().filter(|&t| t <= t_end).collect();
        Self::new(self.t_start, t_end, times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self::daily(DEFAULT_HORIZON as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Ode,
    Ctmc,
    Synthetic,
}

/// A prevalence series on an observation grid.
///
/// `susceptible`/`recovered` are carried when the producer knows them (ODE
/// and CTMC runs); synthetic datasets only have prevalence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub prevalence: Vec<f64>,
    pub susceptible: Option<Vec<f64>>,
    pub recovered: Option<Vec<f64>>,
    pub kind: TrajectoryKind,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, prevalence: Vec<f64>, kind: TrajectoryKind) -> Result<Self> {
        if prevalence.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "{} prevalence values for {} grid points",
                prevalence.len(),
                grid.len()
            )));
        }
        if let Some(bad) = prevalence.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "prevalence must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Self {
            grid,
            prevalence,
            susceptible: None,
            recovered: None,
            kind,
        })
    }

    pub fn times(&self) -> &[f64] {
        self.grid.times()
    }

    pub fn len(&self) -> usize {
        self.prevalence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prevalence.is_empty()
    }

    /// Total ever infected `N - S(t_end)`, when S is known.
    pub fn final_size(&self) -> Option<f64> {
        let s = self.susceptible.as_ref()?;
        let r = self.recovered.as_ref()?;
        let n = s[0] + self.prevalence[0] + r[0];
        Some(n - s.last()?)
    }

    /// Cumulative incidence N - S(t) at every grid point, when S is known.
    pub fn cumulative_incidence(&self) -> Option<Vec<f64>> {
        let s = self.susceptible.as_ref()?;
        let r = self.recovered.as_ref()?;
        let n = s[0] + self.prevalence[0] + r[0];
        Some(s.iter().map(|v| n - v).collect())
    }

    /// Writes `t,I` (plus `S,R` when present); times with 6 decimals.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let full = self.susceptible.is_some() && self.recovered.is_some();
        if full {
            writeln!(w, "t,I,S,R")?;
        } else {
            writeln!(w, "t,I")?;
        }
        for (k, (t, i)) in self.times().iter().zip(&self.prevalence).enumerate() {
            if let (true, Some(s), Some(r)) = (full, &self.susceptible, &self.recovered) {
                writeln!(w, "{t:.6},{i},{},{}", s[k], r[k])?;
            } else {
                writeln!(w, "{t:.6},{i}")?;
            }
        }
        Ok(())
    }

    /// Reads the format produced by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: BufRead>(r: R, kind: TrajectoryKind) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let full = match cols.as_slice() {
            ["t", "I"] => false,
            ["t", "I", "S", "R"] => true,
            _ => return Err(Error::Parse(format!("unexpected header `{header}`"))),
        };
        let (mut t, mut i, mut s, mut rr) = (vec![], vec![], vec![], vec![]);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{x}: {e}"))))
                .collect::<Result<_>>()?;
            if f.len() != cols.len() {
                return Err(Error::Parse(format!("row `{line}` has wrong arity")));
            }
            t.push(f[0]);
            i.push(f[1]);
            if full {
                s.push(f[2]);
                rr.push(f[3]);
            }
        }
        let start = *t.first().ok_or_else(|| Error::Parse("no rows".into()))?;
        let end = *t.last().unwrap();
        let end = if end > start { end } else { start + 1.0 };
        let mut traj = Self::new(TimeGrid::new(start, end, t)?, i, kind)?;
        if full {
            traj.susceptible = Some(s);
            traj.recovered = Some(rr);
        }
        Ok(traj)
    }
}

/// ODE solution: the observed trajectory plus the step-level dense output.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub params: EpidemicParameters,
    pub trajectory: Trajectory,
    /// Full state at each observation time.
    pub states: Vec<StateVector>,
    pub step: f64,
    dense_start: f64,
    dense: Vec<StateVector>,
}

impl OdeSolution {
    /// Times of the dense output, `t_start + k·step`.
    pub fn dense_times(&self) -> Vec<f64> {
        (0..self.dense.len())
            .map(|k| self.dense_start + k as f64 * self.step)
            .collect()
    }

    pub fn dense_states(&self) -> &[StateVector] {
        &self.dense
    }

    pub fn dense_prevalence(&self) -> Vec<f64> {
        self.dense.iter().map(|s| s.infectious).collect()
    }

    /// Prevalence at an arbitrary time by linear interpolation of the dense
    /// output; times outside the integration span take the endpoint value.
    pub fn prevalence_at(&self, t: f64) -> f64 {
        let x = (t - self.dense_start) / self.step;
        if x <= 0.0 {
            return self.dense[0].infectious;
        }
        let last = self.dense.len() - 1;
        if x >= last as f64 {
            return self.dense[last].infectious;
        }
        let k = x.floor() as usize;
        let w = x - k as f64;
        self.dense[k].infectious * (1.0 - w) + self.dense[k + 1].infectious * w
    }

    pub fn peak_time_dense(&self) -> f64 {
        let (k, _) = self
            .dense
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, s)| {
                if s.infectious > acc.1 {
                    (k, s.infectious)
                } else {
                    acc
                }
            });
        self.dense_start + k as f64 * self.step
    }
}

#[inline(always)]
fn flush(v: f64) -> f64 {
    if v.abs() < UNDERFLOW_FLUSH {
        0.0
    } else {
        v
    }
}

#[inline(always)]
fn derivative(alpha: f64, beta: f64, s: f64, i: f64) -> (f64, f64, f64) {
    let inf = beta * s * i;
    let rec = alpha * i;
    (-inf, inf - rec, rec)
}

/// Core fixed-step RK4 loop; `visit(k, state)` is called for k = 0..=n_steps.
#[inline]
fn rk4_run(
    alpha: f64,
    beta: f64,
    initial: StateVector,
    t_start: f64,
    h: f64,
    n_steps: usize,
    mut visit: impl FnMut(usize, &StateVector),
) -> Result<()> {
    let (mut s, mut i, mut r) = (initial.susceptible, initial.infectious, initial.recovered);
    visit(
        0,
        &StateVector {
            susceptible: s,
            infectious: i,
            recovered: r,
        },
    );
    let h2 = 0.5 * h;
    let h6 = h / 6.0;
    for k in 1..=n_steps {
        let (a1, b1, c1) = derivative(alpha, beta, s, i);
        let (a2, b2, c2) = derivative(alpha, beta, s + h2 * a1, i + h2 * b1);
        let (a3, b3, c3) = derivative(alpha, beta, s + h2 * a2, i + h2 * b2);
        let (a4, b4, c4) = derivative(alpha, beta, s + h * a3, i + h * b3);
        s += h6 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        i += h6 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        r += h6 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
        s = flush(s);
        i = flush(i);
        for v in [&mut s, &mut i, &mut r] {
            if !v.is_finite() {
                return Err(Error::IntegrationFailure {
                    time: t_start + k as f64 * h,
                    reason: "non-finite state".into(),
                });
            }
            if *v < 0.0 {
                if *v > NEGATIVE_CLAMP {
                    *v = 0.0;
                } else {
                    return Err(Error::IntegrationFailure {
                        time: t_start + k as f64 * h,
                        reason: format!("negative state component {v}"),
                    });
                }
            }
        }
        visit(
            k,
            &StateVector {
                susceptible: s,
                infectious: i,
                recovered: r,
            },
        );
    }
    Ok(())
}

/// Step indices of the observation times; each must sit on the step lattice.
fn observation_steps(grid: &TimeGrid, h: f64) -> Result<(usize, Vec<usize>)> {
    let lattice = |t: f64| -> Result<usize> {
        let x = (t - grid.t_start) / h;
        let k = x.round();
        if (x - k).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "time {t} is not a multiple of the integrator step {h} from t_start"
            )));
        }
        Ok(k as usize)
    };
    let n_steps = lattice(grid.t_end)?;
    let obs = grid.times().iter().map(|&t| lattice(t)).collect::<Result<Vec<_>>>()?;
    Ok((n_steps, obs))
}

fn check_inputs(params: &EpidemicParameters, initial: &StateVector, h: f64) -> Result<()> {
    EpidemicParameters::new_allow_zero_beta(params.alpha, params.beta, params.population)?;
    StateVector::new(initial.susceptible, initial.infectious, initial.recovered)?;
    initial.check_population(params.population)?;
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidInput(format!("step must be > 0, got {h}")));
    }
    Ok(())
}

/// Integrates the SIR system with the default step.
pub fn integrate_sir(
    params: &EpidemicParameters,
    initial: &StateVector,
    grid: &TimeGrid,
) -> Result<OdeSolution> {
    integrate_sir_with_step(params, initial, grid, DEFAULT_STEP)
}

pub fn integrate_sir_with_step(
    params: &EpidemicParameters,
    initial: &StateVector,
    grid: &TimeGrid,
    step: f64,
) -> Result<OdeSolution> {
    check_inputs(params, initial, step)?;
    let (n_steps, obs) = observation_steps(grid, step)?;
    let mut dense = Vec::with_capacity(n_steps + 1);
    rk4_run(
        params.alpha,
        params.beta,
        *initial,
        grid.t_start,
        step,
        n_steps,
        |_, st| dense.push(*st),
    )?;
    let states: Vec<StateVector> = obs.iter().map(|&k| dense[k]).collect();
    let mut trajectory = Trajectory::new(
        grid.clone(),
        states.iter().map(|s| s.infectious).collect(),
        TrajectoryKind::Ode,
    )?;
    trajectory.susceptible = Some(states.iter().map(|s| s.susceptible).collect());
    trajectory.recovered = Some(states.iter().map(|s| s.recovered).collect());
    Ok(OdeSolution {
        params: *params,
        trajectory,
        states,
        step,
        dense_start: grid.t_start,
        dense,
    })
}

/// Observation-grid prevalence only, without storing dense output.
///
/// Numerically identical to [`integrate_sir_with_step`]; this is the hot
/// path of every least-squares fit.
pub fn prevalence_on_grid(
    params: &EpidemicParameters,
    initial: &StateVector,
    grid: &TimeGrid,
    step: f64,
    out: &mut Vec<f64>,
) -> Result<()> {
    observable_on_grid(params, initial, grid, step, out, |s| s.infectious)
}

/// Cumulative incidence `N - S(t)` on the observation grid.
pub fn cumulative_incidence_on_grid(
    params: &EpidemicParameters,
    initial: &StateVector,
    grid: &TimeGrid,
    step: f64,
    out: &mut Vec<f64>,
) -> Result<()> {
    let n = initial.total();
    observable_on_grid(params, initial, grid, step, out, |s| n - s.susceptible)
}

fn observable_on_grid(
    params: &EpidemicParameters,
    initial: &StateVector,
    grid: &TimeGrid,
    step: f64,
    out: &mut Vec<f64>,
    observe: impl Fn(&StateVector) -> f64,
) -> Result<()> {
    check_inputs(params, initial, step)?;
    let (n_steps, obs) = observation_steps(grid, step)?;
    out.clear();
    let mut next = 0;
    rk4_run(
        params.alpha,
        params.beta,
        *initial,
        grid.t_start,
        step,
        n_steps,
        |k, st| {
            while next < obs.len() && obs[next] == k {
                out.push(observe(st));
                next += 1;
            }
        },
    )
}

/// Maximum number of parameter sets integrated together by
/// [`prevalence_batch`].
pub const MAX_LANES: usize = 8;

/// Integrates up to [`MAX_LANES`] parameter sets in lockstep and writes each
/// lane's observation-grid prevalence into `out[lane]`.
///
/// Every lane performs exactly the floating-point operations of
/// [`prevalence_on_grid`], so results are bit-identical; the lanes only
/// share the loop so independent dependency chains overlap. A lane whose
/// integration fails gets `ok[lane] = false` and an unspecified series.
pub fn prevalence_batch(
    rates: &[(f64, f64)],
    initial: &StateVector,
    grid: &TimeGrid,
    step: f64,
    out: &mut [Vec<f64>],
    ok: &mut [bool],
) -> Result<()> {
    observable_batch(rates, initial, grid, step, Observable::Prevalence, out, ok)
}

/// Model output compared against data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// I(t).
    Prevalence,
    /// N - S(t), everyone ever infected.
    CumulativeIncidence,
}

/// Batched integration emitting either observable; see [`prevalence_batch`].
pub fn observable_batch(
    rates: &[(f64, f64)],
    initial: &StateVector,
    grid: &TimeGrid,
    step: f64,
    observable: Observable,
    out: &mut [Vec<f64>],
    ok: &mut [bool],
) -> Result<()> {
    let k = rates.len();
    assert!(k <= MAX_LANES && out.len() >= k && ok.len() >= k);
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidInput(format!("step must be > 0, got {step}")));
    }
    let (n_steps, obs) = observation_steps(grid, step)?;
    let job = BatchJob {
        rates,
        initial,
        step,
        n_steps,
        obs: &obs,
        observable,
    };
    match k {
        0 => {}
        1 => job.run::<1>(out, ok),
        2 => job.run::<2>(out, ok),
        3 | 4 => job.run::<4>(out, ok),
        _ => job.run::<8>(out, ok),
    }
    Ok(())
}

struct BatchJob<'a> {
    rates: &'a [(f64, f64)],
    initial: &'a StateVector,
    step: f64,
    n_steps: usize,
    obs: &'a [usize],
    observable: Observable,
}

impl BatchJob<'_> {
    fn run<const L: usize>(&self, out: &mut [Vec<f64>], ok: &mut [bool]) {
        let k = self.rates.len();
        let mut alpha = [1.0; L];
        let mut beta = [0.0; L];
        let mut s = [0.0; L];
        let mut i = [0.0; L];
        let mut r = [0.0; L];
        for l in 0..k {
            (alpha[l], beta[l]) = self.rates[l];
            ok[l] = alpha[l].is_finite() && alpha[l] > 0.0 && beta[l].is_finite() && beta[l] >= 0.0;
            s[l] = self.initial.susceptible;
            i[l] = self.initial.infectious;
            r[l] = self.initial.recovered;
            out[l].clear();
        }
        let n = self.initial.total();
        let obs = self.obs;
        let mut next = 0;
        let mut emit = |kstep: usize, s: &[f64; L], i: &[f64; L], out: &mut [Vec<f64>]| {
            while next < obs.len() && obs[next] == kstep {
                for l in 0..k {
                    out[l].push(match self.observable {
                        Observable::Prevalence => i[l],
                        Observable::CumulativeIncidence => n - s[l],
                    });
                }
                next += 1;
            }
        };
        emit(0, &s, &i, out);
        let h = self.step;
        let h2 = 0.5 * h;
        let h6 = h / 6.0;
        for kstep in 1..=self.n_steps {
            let mut bad = false;
            for l in 0..L {
                let (a, b) = (alpha[l], beta[l]);
                let (a1, b1, c1) = derivative(a, b, s[l], i[l]);
                let (a2, b2, c2) = derivative(a, b, s[l] + h2 * a1, i[l] + h2 * b1);
                let (a3, b3, c3) = derivative(a, b, s[l] + h2 * a2, i[l] + h2 * b2);
                let (a4, b4, c4) = derivative(a, b, s[l] + h * a3, i[l] + h * b3);
                s[l] += h6 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
                i[l] += h6 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
                r[l] += h6 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
                s[l] = flush(s[l]);
                i[l] = flush(i[l]);
                bad |= !(s[l] >= 0.0 && i[l] >= 0.0 && r[l] >= 0.0 && (s[l] + i[l] + r[l]).is_finite());
            }
            if bad {
                for l in 0..k {
                    for v in [&mut s[l], &mut i[l], &mut r[l]] {
                        if !v.is_finite() || *v <= NEGATIVE_CLAMP {
                            ok[l] = false;
                        }
                        if !v.is_finite() || *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            emit(kstep, &s, &i, out);
        }
    }
}

/// Integrates until prevalence drops below `threshold` persons and
/// returns the final state and the time reached.
pub fn integrate_to_quiescence(
    params: &EpidemicParameters,
    initial: &StateVector,
    threshold: f64,
    max_days: f64,
) -> Result<(f64, StateVector)> {
    let mut state = *initial;
    let mut t = 0.0;
    let chunk = DEFAULT_HORIZON;
    loop {
        let grid = TimeGrid::new(0.0, chunk, vec![chunk])?;
        let sol = integrate_sir(params, &state, &grid)?;
        state = *sol.states.last().unwrap();
        t += chunk;
        if state.infectious < threshold || t >= max_days {
            return Ok((t, state));
        }
    }
}

/// Peak time and height; ties resolve to the earliest time.
pub fn peak_of(traj: &Trajectory) -> Result<(f64, f64)> {
    if traj.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    let mut best = 0;
    for (k, &v) in traj.prevalence.iter().enumerate() {
        if v > traj.prevalence[best] {
            best = k;
        }
    }
    let height = traj.prevalence[best];
    if height <= 0.0 {
        return Err(Error::NoPeak);
    }
    Ok((traj.times()[best], height))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> EpidemicParameters {
        EpidemicParameters::new(0.1, 0.0004, 1000).unwrap()
    }

    #[test]
    fn r0_matches_table_rows() {
        let low = EpidemicParameters::new(0.33, 0.0004, 1000).unwrap();
        let high = EpidemicParameters::new(0.14, 0.0020, 1000).unwrap();
        assert_eq!(format!("{:.2}", low.r0()), "1.21");
        assert_eq!(format!("{:.2}", high.r0()), "14.29");
        for a in [0.01, 0.3, 2.0] {
            let p = EpidemicParameters::new(a, a / 500.0, 500).unwrap();
            assert!((p.r0() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(EpidemicParameters::new(0.0, 0.1, 10).is_err());
        assert!(EpidemicParameters::new(0.1, -0.1, 10).is_err());
        assert!(EpidemicParameters::new(0.1, 0.1, 1).is_err());
        assert!(EpidemicParameters::new_allow_zero_beta(0.1, 0.0, 10).is_ok());
    }

    #[test]
    fn disease_free_equilibrium() {
        let init = StateVector::seeded(1000, 0).unwrap();
        let sol = integrate_sir(&params(), &init, &TimeGrid::daily(100)).unwrap();
        assert!(sol.trajectory.prevalence.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conservation_and_monotonicity() {
        let p = params();
        let init = StateVector::seeded(1000, 1).unwrap();
        let sol = integrate_sir(&p, &init, &TimeGrid::default()).unwrap();
        let n = p.n();
        for s in sol.dense_states() {
            assert!(((s.total() - n) / n).abs() < 1e-9);
        }
        for w in sol.states.windows(2) {
            assert!(w[1].susceptible <= w[0].susceptible);
            assert!(w[1].recovered >= w[0].recovered);
        }
    }

    #[test]
    fn fast_path_matches_dense_integration() {
        let p = params();
        let init = StateVector::seeded(1000, 3).unwrap();
        let grid = TimeGrid::default();
        let sol = integrate_sir(&p, &init, &grid).unwrap();
        let mut fast = Vec::new();
        prevalence_on_grid(&p, &init, &grid, DEFAULT_STEP, &mut fast).unwrap();
        assert_eq!(fast, sol.trajectory.prevalence);
    }

    #[test]
    fn off_lattice_grid_is_rejected() {
        let grid = TimeGrid::new(0.0, 10.0, vec![0.0, 1.03, 10.0]).unwrap();
        let init = StateVector::seeded(1000, 1).unwrap();
        assert!(integrate_sir(&params(), &init, &grid).is_err());
    }

    #[test]
    fn blow_up_reports_time() {
        let p = EpidemicParameters::new(0.1, 5.0, 1000).unwrap();
        let init = StateVector::seeded(1000, 1).unwrap();
        match integrate_sir(&p, &init, &TimeGrid::daily(10)) {
            Err(Error::IntegrationFailure { time, .. }) => assert!(time > 0.0),
            other => panic!("expected integration failure, got {other:?}"),
        }
    }

    #[test]
    fn peak_rules() {
        let grid = TimeGrid::daily(4);
        let dec = Trajectory::new(grid.clone(), vec![5.0, 4.0, 3.0, 2.0, 1.0], TrajectoryKind::Ode)
            .unwrap();
        assert_eq!(peak_of(&dec).unwrap(), (0.0, 5.0));
        let flat = Trajectory::new(grid.clone(), vec![2.0; 5], TrajectoryKind::Ode).unwrap();
        assert_eq!(peak_of(&flat).unwrap(), (0.0, 2.0));
        let zero = Trajectory::new(grid, vec![0.0; 5], TrajectoryKind::Ode).unwrap();
        assert!(matches!(peak_of(&zero), Err(Error::NoPeak)));
    }

    #[test]
    fn csv_round_trip() {
        let init = StateVector::seeded(1000, 1).unwrap();
        let sol = integrate_sir(&params(), &init, &TimeGrid::daily(20)).unwrap();
        let mut buf = Vec::new();
        sol.trajectory.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"t,I,S,R\n0.000000,1,999,0\n"));
        let back = Trajectory::read_csv(&buf[..], TrajectoryKind::Ode).unwrap();
        assert_eq!(back, sol.trajectory);
    }

    #[test]
    fn dense_interpolation_clamps_outside_span() {
        let init = StateVector::seeded(1000, 1).unwrap();
        let sol = integrate_sir(&params(), &init, &TimeGrid::daily(20)).unwrap();
        assert_eq!(sol.prevalence_at(-5.0), 1.0);
        assert_eq!(sol.prevalence_at(99.0), *sol.trajectory.prevalence.last().unwrap());
        let mid = sol.prevalence_at(10.025);
        let d = sol.dense_prevalence();
        assert!((mid - 0.5 * (d[200] + d[201])).abs() < 1e-12);
    }
}
