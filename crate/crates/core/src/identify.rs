//! Monte Carlo practical identifiability: fit many synthetic datasets drawn
//! at the true parameters and summarize the spread of the estimates.

use std::io::Write;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::coverage::{fit_all, prepare_generator, CoverageMethod, DEFAULT_REFERENCE_RUNS};
use crate::ctmc::{simulate_daily, took_off, CountState};
use crate::error::{Error, Result};
use crate::estimate::{Estimate, FitConfig};
use crate::rng::RngSeed;
use crate::scenarios::Scenario;
use crate::stats::mean_var;
use crate::synth::{NoiseSpec, DEFAULT_BINS};

pub const MIN_CLOUD: usize = 50;
pub const ELLIPSE_LEVEL: f64 = 0.95;

/// Confidence ellipse from a sample mean and covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    pub level: f64,
    /// Squared Mahalanobis radius, the chi-square(2) quantile at `level`.
    pub radius2: f64,
    /// Semi-axis lengths, major first.
    pub semi_axes: [f64; 2],
    /// Angle of the major axis from the first coordinate axis, radians.
    pub angle: f64,
}

impl Ellipse {
    pub fn mahalanobis2(&self, p: [f64; 2]) -> f64 {
        let [[a, b], [_, d]] = self.covariance;
        let det = a * d - b * b;
        let (x, y) = (p[0] - self.center[0], p[1] - self.center[1]);
        (d * x * x - 2.0 * b * x * y + a * y * y) / det
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.mahalanobis2(p) <= self.radius2
    }

    /// `n` boundary points, for plotting.
    pub fn boundary(&self, n: usize) -> Vec<[f64; 2]> {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        (0..=n)
            .map(|k| {
                let th = std::f64::consts::TAU * k as f64 / n as f64;
                let (u, v) = (self.semi_axes[0] * th.cos(), self.semi_axes[1] * th.sin());
                [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v]
            })
            .collect()
    }
}

/// Normal-theory ellipse at `level`; the chi-square(2) quantile has the
/// closed form `-2 ln(1 - level)`.
pub fn spread_ellipse(estimates: &[(f64, f64)], level: f64) -> Result<Ellipse> {
    if estimates.len() < 10 {
        return Err(Error::SampleTooSmall {
            n: estimates.len(),
            min: 10,
        });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must be in (0, 1), got {level}")));
    }
    let n = estimates.len() as f64;
    let ma = estimates.iter().map(|e| e.0).sum::<f64>() / n;
    let mb = estimates.iter().map(|e| e.1).sum::<f64>() / n;
    let (mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0);
    for &(a, b) in estimates {
        saa += (a - ma) * (a - ma);
        sab += (a - ma) * (b - mb);
        sbb += (b - mb) * (b - mb);
    }
    let (saa, sab, sbb) = (saa / (n - 1.0), sab / (n - 1.0), sbb / (n - 1.0));
    let det = saa * sbb - sab * sab;
    if !(saa > 0.0 && sbb > 0.0) || det <= 1e-10 * saa * sbb {
        return Err(Error::DegenerateEllipse);
    }
    let radius2 = -2.0 * (1.0 - level).ln();
    let tr = saa + sbb;
    let disc = ((saa - sbb) * (saa - sbb) / 4.0 + sab * sab).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    let angle = 0.5 * (2.0 * sab).atan2(saa - sbb);
    Ok(Ellipse {
        center: [ma, mb],
        covariance: [[saa, sab], [sab, sbb]],
        level,
        radius2,
        semi_axes: [(l1 * radius2).sqrt(), (l2 * radius2).sqrt()],
        angle,
    })
}

/// Average relative estimation error in percent:
/// `100/M · Σ |p_true - p_m| / p_true`.
pub fn are(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::SampleTooSmall { n: 0, min: 1 });
    }
    if truth == 0.0 {
        return Err(Error::UndefinedAre);
    }
    let s: f64 = estimates.iter().map(|p| (truth - p).abs() / truth.abs()).sum();
    Ok(100.0 * s / estimates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadSummary {
    pub method: CoverageMethod,
    pub truth: [f64; 2],
    pub used: usize,
    pub excluded: usize,
    pub mean: [f64; 2],
    pub sd: [f64; 2],
    /// Coefficient of variation, percent.
    pub cv: [f64; 2],
    /// Average relative estimation error, percent.
    pub are: [f64; 2],
    pub ellipse: Option<Ellipse>,
}

impl SpreadSummary {
    pub fn from_cloud(method: CoverageMethod, truth: (f64, f64), cloud: &[(f64, f64)], excluded: usize) -> Result<Self> {
        let a: Vec<f64> = cloud.iter().map(|e| e.0).collect();
        let b: Vec<f64> = cloud.iter().map(|e| e.1).collect();
        let (ma, va) = mean_var(&a);
        let (mb, vb) = mean_var(&b);
        let (sa, sb) = (va.sqrt(), vb.sqrt());
        Ok(Self {
            method,
            truth: [truth.0, truth.1],
            used: cloud.len(),
            excluded,
            mean: [ma, mb],
            sd: [sa, sb],
            cv: [100.0 * sa / ma, 100.0 * sb / mb],
            are: [are(&a, truth.0)?, are(&b, truth.1)?],
            ellipse: spread_ellipse(cloud, ELLIPSE_LEVEL).ok(),
        })
    }
}

/// Verdict per parameter: identifiable when ARE < 100·σ. Only defined for
/// the Gaussian method.
pub fn identifiability_verdict(summary: &SpreadSummary, noise: NoiseSpec) -> Result<[bool; 2]> {
    match summary.method {
        CoverageMethod::Gaussian(_) => {
            let t = 100.0 * noise.sigma;
            Ok([summary.are[0] < t, summary.are[1] < t])
        }
        m => Err(Error::RuleInapplicable(format!(
            "the ARE threshold is defined for Gaussian noise only, not `{m}`"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityRun {
    pub summary: SpreadSummary,
    /// One entry per dataset; `None` where the fit failed or the dataset
    /// was dropped as an extinct outbreak.
    pub fits: Vec<Option<Estimate>>,
    pub dropped_extinct: usize,
}

impl IdentifiabilityRun {
    pub fn cloud(&self) -> Vec<(f64, f64)> {
        self.fits.iter().flatten().map(Estimate::pair).collect()
    }

    /// `dataset_id,alpha_hat,beta_hat,sse,converged,iters`.
    pub fn write_estimates_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "dataset_id,alpha_hat,beta_hat,sse,converged,iters")?;
        for (k, f) in self.fits.iter().enumerate() {
            match f {
                Some(e) => writeln!(
                    w,
                    "{k},{},{},{},{},{}",
                    e.alpha_hat, e.beta_hat, e.sse, e.converged, e.iterations
                )?,
                None => writeln!(w, "{k},,,,false,")?,
            }
        }
        Ok(())
    }
}

/// Fits `m` datasets generated by `method` at the scenario's parameters.
/// Dataset `k` uses stream `seed.derive([1, kind, k])`. Extinct CTMC runs
/// are kept and fitted.
pub fn mc_identifiability(
    scenario: &Scenario,
    method: CoverageMethod,
    m: usize,
    seed: RngSeed,
) -> Result<IdentifiabilityRun> {
    mc_identifiability_with(scenario, method, m, seed, false)
}

/// As [`mc_identifiability`]; with `drop_extinct`, CTMC datasets whose
/// outbreak never took off are left unfitted and counted. One such run fits
/// to an arbitrary point far off the ridge and can dominate every spread
/// statistic. Other methods are unaffected.
pub fn mc_identifiability_with(
    scenario: &Scenario,
    method: CoverageMethod,
    m: usize,
    seed: RngSeed,
    drop_extinct: bool,
) -> Result<IdentifiabilityRun> {
    if m < MIN_CLOUD {
        return Err(Error::SampleTooSmall { n: m, min: MIN_CLOUD });
    }
    let kind = method.kind();
    let generator = prepare_generator(
        scenario,
        method,
        seed.derive(&[2, kind]),
        DEFAULT_REFERENCE_RUNS,
        DEFAULT_BINS,
    )?;
    let truth = scenario.params;
    let stream = |k: usize| seed.derive(&[1, kind, k as u64]);
    let (data, kept): (Vec<Vec<f64>>, Vec<bool>) = if drop_extinct && method == CoverageMethod::Ctmc {
        let init = CountState::from_state(&scenario.initial)?;
        let runs = (0..m)
            .into_par_iter()
            .map(|k| simulate_daily(&truth, &init, &scenario.grid, stream(k)))
            .collect::<Result<Vec<_>>>()?;
        runs.into_iter().map(|r| (took_off(&r), r)).map(|(t, r)| (r.prevalence, t)).unzip()
    } else {
        (generator.datasets(scenario, &truth, m, stream)?, vec![true; m])
    };
    let fitted: Vec<Vec<f64>> = data.into_iter().zip(&kept).filter(|(_, &k)| k).map(|(d, _)| d).collect();
    let config = FitConfig::around(&truth, scenario.initial);
    let mut results = fit_all(&fitted, scenario, &config).into_iter();
    let mut fits = Vec::with_capacity(m);
    for &k in &kept {
        if !k {
            fits.push(None);
            continue;
        }
        match results.next().unwrap() {
            Ok(e) => fits.push(Some(e)),
            Err(Error::FitFailure(_)) => fits.push(None),
            Err(e) => return Err(e),
        }
    }
    let dropped_extinct = kept.iter().filter(|&&k| !k).count();
    let cloud: Vec<(f64, f64)> = fits.iter().flatten().map(Estimate::pair).collect();
    if cloud.is_empty() {
        return Err(Error::FitFailure("every dataset failed to fit".into()));
    }
    let summary = SpreadSummary::from_cloud(method, (truth.alpha, truth.beta), &cloud, m - cloud.len())?;
    Ok(IdentifiabilityRun {
        summary,
        fits,
        dropped_extinct,
    })
}
