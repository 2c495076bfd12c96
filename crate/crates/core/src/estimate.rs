//! Least-squares fitting of (α, β) to a prevalence series.
//!
//! The objective is the plain sum of squared prevalence residuals. It is
//! minimized with Nelder-Mead over (ln α, ln β) from each configured start,
//! and the best start wins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sir::{
    observable_batch, prevalence_on_grid, EpidemicParameters, Observable, StateVector, TimeGrid,
    Trajectory, DEFAULT_STEP, MAX_LANES,
};

pub const DEFAULT_MAX_ITERATIONS: usize = 2000;
/// Absolute bound on the simplex objective spread, persons².
pub const DEFAULT_TOLERANCE: f64 = 1e-10;
/// Simplex width in log-parameter units below which iteration stops.
pub const DEFAULT_X_TOLERANCE: f64 = 1e-8;
/// Initial simplex offset in each log coordinate (±10%).
const SIMPLEX_OFFSET: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Starting (α, β) pairs.
    pub initial_guesses: Vec<(f64, f64)>,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub population: u64,
    pub initial: StateVector,
    pub step: f64,
}

impl FitConfig {
    /// The default three starts: nominal, 0.5× and 2× both rates.
    pub fn around(nominal: &EpidemicParameters, initial: StateVector) -> Self {
        let (a, b) = (nominal.alpha, nominal.beta);
        Self {
            initial_guesses: vec![(a, b), (0.5 * a, 0.5 * b), (2.0 * a, 2.0 * b)],
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            population: nominal.population,
            initial,
            step: DEFAULT_STEP,
        }
    }

    /// Same settings with the starts re-centred on another nominal pair.
    pub fn recentred(&self, nominal: &EpidemicParameters) -> Self {
        let (a, b) = (nominal.alpha, nominal.beta);
        Self {
            initial_guesses: vec![(a, b), (0.5 * a, 0.5 * b), (2.0 * a, 2.0 * b)],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_guesses.is_empty() {
            return Err(Error::InvalidInput("fit needs at least one initial guess".into()));
        }
        if let Some(g) = self
            .initial_guesses
            .iter()
            .find(|(a, b)| !(a.is_finite() && *a > 0.0 && b.is_finite() && *b > 0.0))
        {
            return Err(Error::InvalidInput(format!("initial guess {g:?} is not positive")));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidInput("tolerance must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be >= 1".into()));
        }
        self.initial.check_population(self.population)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub sse: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl Estimate {
    pub fn pair(&self) -> (f64, f64) {
        (self.alpha_hat, self.beta_hat)
    }
}

/// Σₜ (I_model(t) - y(t))² on the data's grid.
pub fn sse_objective(
    params: &EpidemicParameters,
    initial: &StateVector,
    data: &Trajectory,
) -> Result<f64> {
    let mut model = Vec::with_capacity(data.len());
    prevalence_on_grid(params, initial, &data.grid, DEFAULT_STEP, &mut model)?;
    Ok(sum_sq_diff(&model, &data.prevalence))
}

fn sum_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fits (α, β) to a prevalence series.
pub fn best_fit(data: &Trajectory, config: &FitConfig) -> Result<Estimate> {
    fit_series(&data.prevalence, &data.grid, config, Observable::Prevalence)
}

/// Fits many series sharing one grid and configuration.
///
/// Every Nelder-Mead instance (one per dataset and start) advances in
/// lockstep and their pending points are packed into full lanes of the
/// batched integrator. Each estimate is bit-identical to fitting its
/// dataset alone with [`best_fit`].
pub fn best_fit_batch(data: &[&[f64]], grid: &TimeGrid, config: &FitConfig) -> Vec<Result<Estimate>> {
    fit_many(data, grid, config, Observable::Prevalence)
}

pub(crate) fn fit_series(
    data: &[f64],
    grid: &TimeGrid,
    config: &FitConfig,
    observable: Observable,
) -> Result<Estimate> {
    fit_many(&[data], grid, config, observable).pop().expect("one result per dataset")
}

pub(crate) fn fit_many(
    data: &[&[f64]],
    grid: &TimeGrid,
    config: &FitConfig,
    observable: Observable,
) -> Vec<Result<Estimate>> {
    let runs = match run_starts(data, grid, config, observable) {
        Ok(r) => r,
        Err(msg) => return data.iter().map(|_| Err(Error::InvalidInput(msg.clone()))).collect(),
    };
    runs.chunks(config.initial_guesses.len())
        .zip(data)
        .map(|(group, series)| {
            if series.len() != grid.len() {
                return Err(Error::InvalidInput("data and grid lengths differ".into()));
            }
            group
                .iter()
                .filter_map(estimate_of)
                .fold(None, |best: Option<Estimate>, est| match best {
                    Some(b) if b.sse <= est.sse => Some(b),
                    _ => Some(est),
                })
                .ok_or_else(|| Error::FitFailure("no start produced a finite objective".into()))
        })
        .collect()
}

/// One estimate per initial guess (not just the best) for a single series.
/// Starts whose objective never became finite are `None`.
pub(crate) fn fit_each_start(
    data: &[f64],
    grid: &TimeGrid,
    config: &FitConfig,
    observable: Observable,
) -> Result<Vec<Option<Estimate>>> {
    if data.len() != grid.len() {
        return Err(Error::InvalidInput("data and grid lengths differ".into()));
    }
    let runs = run_starts(&[data], grid, config, observable).map_err(Error::InvalidInput)?;
    Ok(runs.iter().map(estimate_of).collect())
}

fn estimate_of(nm: &NelderMead<2>) -> Option<Estimate> {
    let res = nm.result();
    res.value.is_finite().then(|| Estimate {
        alpha_hat: res.point[0].exp(),
        beta_hat: res.point[1].exp(),
        sse: res.value,
        converged: res.converged,
        iterations: res.iterations,
    })
}

/// Runs every (series, start) Nelder-Mead instance to completion.
fn run_starts(
    data: &[&[f64]],
    grid: &TimeGrid,
    config: &FitConfig,
    observable: Observable,
) -> std::result::Result<Vec<NelderMead<2>>, String> {
    config.validate().map_err(|e| e.to_string())?;
    let starts = config.initial_guesses.len();
    let mut runs: Vec<NelderMead<2>> = Vec::with_capacity(data.len() * starts);
    for series in data {
        for &(a, b) in &config.initial_guesses {
            let mut nm = NelderMead::new(
                [a.ln(), b.ln()],
                SIMPLEX_OFFSET,
                config.max_iterations,
                config.tolerance,
                DEFAULT_X_TOLERANCE,
            );
            if series.len() != grid.len() {
                nm.finish();
            }
            runs.push(nm);
        }
    }
    let mut buf: Vec<Vec<f64>> = (0..MAX_LANES).map(|_| Vec::with_capacity(grid.len())).collect();
    let mut ok = [false; MAX_LANES];
    let mut points: Vec<(usize, [f64; 2])> = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); runs.len()];
    let mut rates: Vec<(f64, f64)> = Vec::with_capacity(MAX_LANES);
    loop {
        points.clear();
        for (r, nm) in runs.iter().enumerate() {
            if !nm.is_done() {
                points.extend(nm.pending().iter().map(|x| (r, *x)));
            }
        }
        if points.is_empty() {
            break;
        }
        for v in values.iter_mut() {
            v.clear();
        }
        for chunk in points.chunks(MAX_LANES) {
            rates.clear();
            rates.extend(chunk.iter().map(|(_, x)| (x[0].exp(), x[1].exp())));
            observable_batch(&rates, &config.initial, grid, config.step, observable, &mut buf, &mut ok)
                .map_err(|e| e.to_string())?;
            for (l, (r, _)) in chunk.iter().enumerate() {
                let (a, b) = rates[l];
                let valid = ok[l] && a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0;
                let v = if valid {
                    sum_sq_diff(&buf[l], data[*r / starts])
                } else {
                    f64::INFINITY
                };
                values[*r].push(if v.is_finite() { v } else { f64::INFINITY });
            }
        }
        for (r, nm) in runs.iter_mut().enumerate() {
            if !nm.is_done() {
                nm.tell(&values[r]);
            }
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadResult<const D: usize> {
    pub point: [f64; D],
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Init,
    Reflect,
    Expand,
    Contract { outside: bool },
    Shrink,
    Done,
}

/// Ask/tell Nelder-Mead with reflection 1, expansion 2, contraction 0.5
/// and shrink 0.5.
///
/// The initial simplex is `x0` plus `offset` along each axis. Iteration
/// stops when the spread of objective values over the simplex falls below
/// `tolerance`, when every vertex lies within `x_tolerance` of the best one
/// in each coordinate, or at `max_iterations`.
#[derive(Debug, Clone)]
pub struct NelderMead<const D: usize> {
    simplex: Vec<([f64; D], f64)>,
    pending: Vec<[f64; D]>,
    phase: Phase,
    centroid: [f64; D],
    reflected: ([f64; D], f64),
    iterations: usize,
    max_iterations: usize,
    tolerance: f64,
    x_tolerance: f64,
    converged: bool,
}

impl<const D: usize> NelderMead<D> {
    pub fn new(x0: [f64; D], offset: f64, max_iterations: usize, tolerance: f64, x_tolerance: f64) -> Self {
        let mut pending = vec![x0];
        for d in 0..D {
            let mut x = x0;
            x[d] += offset;
            pending.push(x);
        }
        Self {
            simplex: Vec::with_capacity(D + 1),
            pending,
            phase: Phase::Init,
            centroid: [0.0; D],
            reflected: ([0.0; D], f64::INFINITY),
            iterations: 0,
            max_iterations,
            tolerance,
            x_tolerance,
            converged: false,
        }
    }

    /// Points whose objective values the next [`tell`](Self::tell) expects.
    pub fn pending(&self) -> &[[f64; D]] {
        &self.pending
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn result(&self) -> NelderMeadResult<D> {
        let (point, value) = self
            .simplex
            .first()
            .copied()
            .unwrap_or_else(|| (self.pending[0], f64::INFINITY));
        NelderMeadResult {
            point,
            value,
            iterations: self.iterations,
            converged: self.converged,
        }
    }

    fn lerp(c: &[f64; D], x: &[f64; D], t: f64) -> [f64; D] {
        let mut out = [0.0; D];
        for k in 0..D {
            out[k] = c[k] + t * (x[k] - c[k]);
        }
        out
    }

    /// Supplies objective values for [`pending`](Self::pending), in order.
    pub fn tell(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.pending.len(), "one value per pending point");
        let fx = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
        match self.phase {
            Phase::Init => {
                self.simplex = self.pending.iter().copied().zip(values.iter().map(|&v| fx(v))).collect();
            }
            Phase::Reflect => {
                let fr = fx(values[0]);
                self.reflected = (self.pending[0], fr);
                if fr < self.simplex[0].1 {
                    let worst = self.simplex[D].0;
                    self.pending = vec![Self::lerp(&self.centroid, &worst, -2.0)];
                    self.phase = Phase::Expand;
                    return;
                } else if fr < self.simplex[D - 1].1 {
                    self.simplex[D] = self.reflected;
                } else {
                    let outside = fr < self.simplex[D].1;
                    let target = if outside { self.reflected.0 } else { self.simplex[D].0 };
                    self.pending = vec![Self::lerp(&self.centroid, &target, 0.5)];
                    self.phase = Phase::Contract { outside };
                    return;
                }
            }
            Phase::Expand => {
                let fe = fx(values[0]);
                self.simplex[D] = if fe < self.reflected.1 {
                    (self.pending[0], fe)
                } else {
                    self.reflected
                };
            }
            Phase::Contract { outside } => {
                let fc = fx(values[0]);
                let accept = if outside {
                    fc <= self.reflected.1
                } else {
                    fc < self.simplex[D].1
                };
                if accept {
                    self.simplex[D] = (self.pending[0], fc);
                } else {
                    let best = self.simplex[0].0;
                    self.pending = self.simplex[1..]
                        .iter()
                        .map(|(x, _)| Self::lerp(&best, x, 0.5))
                        .collect();
                    self.phase = Phase::Shrink;
                    return;
                }
            }
            Phase::Shrink => {
                for (k, (x, v)) in self.pending.iter().zip(values).enumerate() {
                    self.simplex[k + 1] = (*x, fx(*v));
                }
            }
            Phase::Done => return,
        }
        self.begin_iteration();
    }

    fn begin_iteration(&mut self) {
        self.simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = self.simplex[0];
        let spread = self.simplex[D].1 - best.1;
        let tight = self.simplex[1..].iter().all(|(x, _)| {
            x.iter().zip(&best.0).all(|(a, b)| (a - b).abs() < self.x_tolerance)
        });
        if best.1.is_finite() && (spread < self.tolerance || tight) {
            self.converged = true;
            self.finish();
            return;
        }
        if self.iterations >= self.max_iterations {
            self.finish();
            return;
        }
        self.iterations += 1;
        let mut centroid = [0.0; D];
        for (x, _) in &self.simplex[..D] {
            for k in 0..D {
                centroid[k] += x[k] / D as f64;
            }
        }
        self.centroid = centroid;
        let worst = self.simplex[D].0;
        self.pending = vec![Self::lerp(&centroid, &worst, -1.0)];
        self.phase = Phase::Reflect;
    }

    pub(crate) fn finish(&mut self) {
        self.pending.clear();
        self.phase = Phase::Done;
    }
}

/// Sequential driver for [`NelderMead`].
pub fn nelder_mead<const D: usize>(
    mut f: impl FnMut(&[f64; D]) -> f64,
    x0: [f64; D],
    offset: f64,
    max_iterations: usize,
    tolerance: f64,
    x_tolerance: f64,
) -> NelderMeadResult<D> {
    let mut nm = NelderMead::new(x0, offset, max_iterations, tolerance, x_tolerance);
    while !nm.is_done() {
        let values: Vec<f64> = nm.pending().iter().map(&mut f).collect();
        nm.tell(&values);
    }
    nm.result()
}
