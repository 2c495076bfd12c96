//! Residual-structure diagnostics.
//!
//! Scaled residuals are `(I_run(t) - I_ode(t)) / I_ode(t)`, taken only where
//! `I_ode(t) >= 1` person. The autocorrelation estimator is the usual biased
//! one: centred on the run's own mean, lag-k sums divided by n, normalized
//! by the lag-0 sum, so every value lies in [-1, 1].

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sir::{peak_of, Trajectory};
use crate::stats::{mean_var, quantile_sorted};

/// Smallest ODE prevalence (persons) at which a residual is formed.
pub const MIN_ODE_PREVALENCE: f64 = 1.0;

pub const DEFAULT_MAX_LAG: usize = 30;

/// Position relative to the ODE peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Post,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pre => "pre",
            Phase::Post => "post",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Phase::Pre),
            "post" => Ok(Phase::Post),
            _ => Err(Error::Parse(format!("unknown phase `{s}`"))),
        }
    }
}

/// `Pre` strictly before the peak; the peak itself counts as `Post`.
pub fn phase_of(t: f64, peak_time: f64) -> Phase {
    if t < peak_time {
        Phase::Pre
    } else {
        Phase::Post
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    pub run_id: usize,
    pub times: Vec<f64>,
    /// ODE prevalence at each retained time.
    pub ode: Vec<f64>,
    pub residuals: Vec<f64>,
    pub phases: Vec<Phase>,
}

impl ResidualSeries {
    /// Residuals of `run` against `ode` on their shared grid.
    pub fn new(run: &Trajectory, ode: &Trajectory, run_id: usize) -> Result<Self> {
        if run.times() != ode.times() {
            return Err(Error::InvalidInput("run and ODE grids differ".into()));
        }
        let (peak, _) = peak_of(ode)?;
        let mut s = Self {
            run_id,
            times: Vec::new(),
            ode: Vec::new(),
            residuals: Vec::new(),
            phases: Vec::new(),
        };
        for ((&t, &i), &y) in ode.times().iter().zip(&ode.prevalence).zip(&run.prevalence) {
            if i >= MIN_ODE_PREVALENCE {
                s.times.push(t);
                s.ode.push(i);
                s.residuals.push((y - i) / i);
                s.phases.push(phase_of(t, peak));
            }
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

/// Residual series for every member of an ensemble.
pub fn ensemble_residuals(ensemble: &[Trajectory], ode: &Trajectory) -> Result<Vec<ResidualSeries>> {
    ensemble
        .par_iter()
        .enumerate()
        .map(|(j, run)| ResidualSeries::new(run, ode, j))
        .collect()
}

/// Sample autocorrelation at lags 0..=max_lag.
pub fn acf(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if n <= max_lag + 1 {
        return Err(Error::SampleTooSmall { n, min: max_lag + 2 });
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = x.iter().map(|v| v - m).collect();
    let c0: f64 = d.iter().map(|v| v * v).sum();
    if !(c0 > 0.0) || d.iter().all(|&v| v == d[0]) {
        return Err(Error::UndefinedAcf);
    }
    let mut out = Vec::with_capacity(max_lag + 1);
    out.push(1.0);
    for k in 1..=max_lag {
        let ck: f64 = d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum();
        out.push(ck / c0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfCurve {
    pub lags: Vec<usize>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub runs_used: usize,
    pub runs_skipped: usize,
}

impl AcfCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "lag,mean,lower,upper")?;
        for k in 0..self.lags.len() {
            writeln!(w, "{},{},{},{}", self.lags[k], self.mean[k], self.lower[k], self.upper[k])?;
        }
        Ok(())
    }
}

/// Pointwise mean ACF with 2.5/97.5 percentile band. Runs whose ACF is
/// undefined (constant or too short) are skipped and counted.
pub fn ensemble_acf<S: AsRef<[f64]> + Sync>(series: &[S], max_lag: usize) -> Result<AcfCurve> {
    let curves: Vec<Option<Vec<f64>>> = series.par_iter().map(|s| acf(s.as_ref(), max_lag).ok()).collect();
    let ok: Vec<&Vec<f64>> = curves.iter().flatten().collect();
    let skipped = curves.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::UndefinedAcf);
    }
    let mut curve = AcfCurve {
        lags: (0..=max_lag).collect(),
        mean: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        runs_used: ok.len(),
        runs_skipped: skipped,
    };
    for k in 0..=max_lag {
        let mut col: Vec<f64> = ok.iter().map(|c| c[k]).collect();
        let m = mean_var(&col).0;
        col.sort_by(f64::total_cmp);
        curve.mean.push(m);
        curve.lower.push(quantile_sorted(&col, 0.025).min(m));
        curve.upper.push(quantile_sorted(&col, 0.975).max(m));
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarMeanRow {
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
    pub phase: Phase,
}

/// Cross-run mean and sample variance of raw prevalence at each grid time.
pub fn variance_mean(ensemble: &[Trajectory], ode: &Trajectory) -> Result<Vec<VarMeanRow>> {
    if ensemble.len() < 2 {
        return Err(Error::SampleTooSmall { n: ensemble.len(), min: 2 });
    }
    if ensemble.iter().any(|r| r.times() != ode.times()) {
        return Err(Error::InvalidInput("ensemble and ODE grids differ".into()));
    }
    let (peak, _) = peak_of(ode)?;
    let mut col = vec![0.0; ensemble.len()];
    Ok(ode
        .times()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            for (c, run) in col.iter_mut().zip(ensemble) {
                *c = run.prevalence[k];
            }
            let (mean, variance) = mean_var(&col);
            VarMeanRow {
                t,
                mean,
                variance,
                phase: phase_of(t, peak),
            }
        })
        .collect())
}

/// Half-width of the approximate 95% band of a white-noise sample ACF of
/// length `n`.
pub fn white_noise_band(n: usize) -> f64 {
    1.96 / (n as f64).sqrt()
}

/// Share of pre-peak rows with mean at least 1 whose variance exceeds the
/// mean; `None` when there are no such rows.
pub fn super_poisson_share(rows: &[VarMeanRow]) -> Option<f64> {
    let pre: Vec<&VarMeanRow> = rows.iter().filter(|r| r.phase == Phase::Pre && r.mean >= 1.0).collect();
    if pre.is_empty() {
        return None;
    }
    Some(pre.iter().filter(|r| r.variance > r.mean).count() as f64 / pre.len() as f64)
}

pub fn write_var_mean_csv<W: Write>(rows: &[VarMeanRow], mut w: W) -> Result<()> {
    writeln!(w, "t,mean,variance,phase")?;
    for r in rows {
        writeln!(w, "{:.6},{},{},{}", r.t, r.mean, r.variance, r.phase)?;
    }
    Ok(())
}

/// Tidy scatter table: `t,I_ode,residual,phase,run`.
pub fn write_scatter_csv<W: Write>(series: &[ResidualSeries], mut w: W) -> Result<()> {
    writeln!(w, "t,I_ode,residual,phase,run")?;
    for s in series {
        for k in 0..s.len() {
            writeln!(
                w,
                "{:.6},{},{},{},{}",
                s.times[k], s.ode[k], s.residuals[k], s.phases[k], s.run_id
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;
    use crate::sir::{TimeGrid, TrajectoryKind};
    use rand_distr::{Distribution, StandardNormal};

    fn traj(v: Vec<f64>) -> Trajectory {
        Trajectory::new(TimeGrid::daily(v.len() as u32 - 1), v, TrajectoryKind::Ctmc).unwrap()
    }

    #[test]
    fn phase_tie_goes_post() {
        assert_eq!(phase_of(9.0, 10.0), Phase::Pre);
        assert_eq!(phase_of(10.0, 10.0), Phase::Post);
        assert_eq!(phase_of(11.0, 10.0), Phase::Post);
    }

    #[test]
    fn acf_basics() {
        let x: Vec<f64> = (0..50).map(|k| ((k * 7) % 11) as f64).collect();
        let a = acf(&x, 10).unwrap();
        assert_eq!(a[0], 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let scaled: Vec<f64> = x.iter().map(|v| 3.5 * v).collect();
        for (p, (q, r)) in a.iter().zip(acf(&neg, 10).unwrap().iter().zip(acf(&scaled, 10).unwrap())) {
            assert!((p - q).abs() < 1e-12 && (p - r).abs() < 1e-12);
        }
        assert!(matches!(acf(&[2.0; 40], 5), Err(Error::UndefinedAcf)));
        assert!(acf(&x[..11], 10).is_err());
    }

    #[test]
    fn alternating_series_lag_one() {
        let n = 1000;
        let x: Vec<f64> = (0..n).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let a = acf(&x, 2).unwrap();
        assert!((a[1] + 1.0).abs() <= 1.0 / n as f64 + 1e-12);
        assert!((a[2] - 1.0).abs() <= 2.0 / n as f64 + 1e-12);
    }

    #[test]
    fn white_noise_is_inside_band() {
        let mut rng = RngSeed::new(3, 0).rng();
        let x: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = acf(&x, 30).unwrap();
        let out = a[1..].iter().filter(|v| v.abs() >= 0.02).count();
        assert!(out <= 2, "{out} lags outside the band");
    }

    #[test]
    fn identical_runs_have_zero_band() {
        let s: Vec<Vec<f64>> = (0..5).map(|_| (0..40).map(|k| (k as f64).sin()).collect()).collect();
        let c = ensemble_acf(&s, 10).unwrap();
        for k in 0..=10 {
            assert_eq!(c.lower[k], c.upper[k]);
        }
        let mut bad = s.clone();
        bad.push(vec![1.0; 40]);
        assert_eq!(ensemble_acf(&bad, 10).unwrap().runs_skipped, 1);
        assert!(ensemble_acf(&[vec![1.0; 40]], 10).is_err());
    }

    #[test]
    fn residual_floor_and_window() {
        let ode = traj(vec![0.5, 2.0, 4.0, 3.0, 1.0, 0.2]);
        let run = traj(vec![1.0, 0.0, 4.0, 6.0, 1.0, 0.0]);
        let s = ResidualSeries::new(&run, &ode, 7).unwrap();
        assert_eq!(s.times, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.residuals, vec![-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(s.phases, vec![Phase::Pre, Phase::Post, Phase::Post, Phase::Post]);
        let copy = ResidualSeries::new(&ode, &ode, 0).unwrap();
        assert!(copy.residuals.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn replicated_ensemble_has_zero_variance() {
        let ode = traj(vec![0.3, 1.7, 2.9, 1.1]);
        let rows = variance_mean(&vec![ode.clone(); 4], &ode).unwrap();
        assert!(rows.iter().all(|r| r.variance == 0.0));
        assert_eq!(rows[2].mean, 2.9);
    }

    #[test]
    fn super_poisson_share_counts_only_pre_peak_rows_with_cases() {
        let row = |mean, variance, phase| VarMeanRow { t: 0.0, mean, variance, phase };
        let rows = [
            row(5.0, 9.0, Phase::Pre),
            row(5.0, 4.0, Phase::Pre),
            row(0.5, 9.0, Phase::Pre),
            row(5.0, 1.0, Phase::Post),
        ];
        assert_eq!(super_poisson_share(&rows), Some(0.5));
        assert_eq!(super_poisson_share(&rows[2..]), None);
        assert!((white_noise_band(100) - 0.196).abs() < 1e-12);
    }
}
