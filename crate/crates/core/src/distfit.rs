//! Maximum-likelihood fits of five families to shifted residuals, AIC
//! ranking, and the Anderson-Darling test of log-normality.
//!
//! Residuals are shifted by +1 before fitting so every family with positive
//! support applies; a residual of exactly -1 becomes 1e-9.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::residuals::Phase;
use crate::rng::RngSeed;
use crate::synth::ResidualBank;

pub const MIN_FIT_SAMPLES: usize = 20;
pub const MIN_AD_SAMPLES: usize = 8;
pub const ZERO_NUDGE: f64 = 1e-9;
/// |shape| above which a skew-normal fit is reported as its normal limit.
pub const SKEW_SHAPE_LIMIT: f64 = 50.0;
const AIC_TIE: f64 = 1e-9;

/// Stephens' critical values for A*² with both normal parameters estimated.
pub const AD_CRITICAL: [(f64, f64); 4] = [(0.10, 0.631), (0.05, 0.752), (0.025, 0.873), (0.01, 1.035)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gamma,
    Lognormal,
    Normal,
    SkewNormal,
    Weibull,
}

impl Family {
    /// In name order, which is also the final tie-break order.
    pub const ALL: [Family; 5] = [
        Family::Gamma,
        Family::Lognormal,
        Family::Normal,
        Family::SkewNormal,
        Family::Weibull,
    ];

    pub fn parameter_count(self) -> usize {
        match self {
            Family::SkewNormal => 3,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gamma => "gamma",
            Family::Lognormal => "lognormal",
            Family::Normal => "normal",
            Family::SkewNormal => "skewnormal",
            Family::Weibull => "weibull",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown family `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: Family,
    /// normal (μ, σ); lognormal (μ, σ) of the log; gamma (shape, scale);
    /// weibull (shape, scale); skewnormal (ξ, ω, α).
    pub params: Vec<f64>,
    pub loglik: f64,
    pub k: usize,
    pub aic: f64,
    /// Set when a divergent skew-normal shape was replaced by its normal limit.
    pub normal_equivalent: bool,
}

impl FitResult {
    fn new(family: Family, params: Vec<f64>, loglik: f64) -> Self {
        let k = family.parameter_count();
        Self {
            family,
            params,
            loglik,
            k,
            aic: 2.0 * k as f64 - 2.0 * loglik,
            normal_equivalent: false,
        }
    }
}

/// `residual + 1`, with exact zeros nudged to [`ZERO_NUDGE`]. Returns the
/// shifted values and the number of nudges.
pub fn shift_residuals(residuals: &[f64]) -> Result<(Vec<f64>, usize)> {
    let mut nudged = 0;
    let out = residuals
        .iter()
        .map(|&r| {
            if !(r >= -1.0) {
                return Err(Error::InvariantViolation(format!("residual {r} is below -1")));
            }
            let v = r + 1.0;
            if v == 0.0 {
                nudged += 1;
                Ok(ZERO_NUDGE)
            } else {
                Ok(v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, nudged))
}

fn check_samples(family: Family, x: &[f64]) -> Result<()> {
    if x.len() < MIN_FIT_SAMPLES {
        return Err(Error::SampleTooSmall {
            n: x.len(),
            min: MIN_FIT_SAMPLES,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("samples must be finite".into()));
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(Error::DegenerateSample("all samples are identical".into()));
    }
    let positive = !matches!(family, Family::Normal | Family::SkewNormal);
    if positive && x.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidInput(format!("{family} needs positive samples")));
    }
    Ok(())
}

fn mean_and_mle_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn normal_loglik_at_mle(n: f64, sd: f64) -> f64 {
    -0.5 * n * ((std::f64::consts::TAU * sd * sd).ln() + 1.0)
}

/// Maximum-likelihood fit of one family.
pub fn fit_family(family: Family, samples: &[f64]) -> Result<FitResult> {
    check_samples(family, samples)?;
    let n = samples.len() as f64;
    match family {
        Family::Normal => {
            let (m, s) = mean_and_mle_sd(samples);
            Ok(FitResult::new(family, vec![m, s], normal_loglik_at_mle(n, s)))
        }
        Family::Lognormal => {
            let logs: Vec<f64> = samples.iter().map(|v| v.ln()).collect();
            let (m, s) = mean_and_mle_sd(&logs);
            if !(s > 0.0) {
                return Err(Error::DegenerateSample("log-samples have no spread".into()));
            }
            let ll = normal_loglik_at_mle(n, s) - logs.iter().sum::<f64>();
            Ok(FitResult::new(family, vec![m, s], ll))
        }
        Family::Gamma => fit_gamma(samples),
        Family::Weibull => fit_weibull(samples),
        Family::SkewNormal => fit_skew_normal(samples),
    }
}

/// ψ'(x) by upward recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0 + x2 / x * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

fn fit_gamma(x: &[f64]) -> Result<FitResult> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let mean_log = x.iter().map(|v| v.ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_log;
    if !(s > 0.0) {
        return Err(Error::DegenerateSample("gamma shape equation has no root".into()));
    }
    // Newton on ln k - ψ(k) = s in ln k, from the Minka starting point.
    let mut k = (3.0 - s + ((s - 3.0) * (s - 3.0) + 24.0 * s).sqrt()) / (12.0 * s);
    let mut converged = false;
    for _ in 0..100 {
        let f = k.ln() - digamma(k) - s;
        let df = 1.0 / k - trigamma(k);
        let step = f / (df * k);
        let next = k * (-step).exp();
        if !next.is_finite() || next <= 0.0 {
            break;
        }
        let done = (next / k - 1.0).abs() < 1e-12;
        k = next;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::FitFailure(format!("gamma shape Newton did not converge (s = {s})")));
    }
    let theta = mean / k;
    let ll = (k - 1.0) * mean_log * n - n * mean / theta - n * ln_gamma(k) - n * k * theta.ln();
    Ok(FitResult::new(Family::Gamma, vec![k, theta], ll))
}

fn fit_weibull(x: &[f64]) -> Result<FitResult> {
    let n = x.len() as f64;
    let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / n;
    let max_log = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Profile score in the shape c: increasing, root is the MLE.
    let score = |c: f64| -> (f64, f64) {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &l in &logs {
            let w = (c * (l - max_log)).exp();
            s0 += w;
            s1 += w * l;
            s2 += w * l * l;
        }
        let a = s1 / s0;
        let g = a - 1.0 / c - mean_log;
        let dg = s2 / s0 - a * a + 1.0 / (c * c);
        (g, dg)
    };
    let sd_log = (logs.iter().map(|l| (l - mean_log).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd_log > 0.0) {
        return Err(Error::DegenerateSample("log-samples have no spread".into()));
    }
    let mut c = 1.2 / sd_log;
    let (mut lo, mut hi) = (c, c);
    while score(lo).0 > 0.0 {
        lo /= 2.0;
        if lo < 1e-300 {
            return Err(Error::FitFailure("weibull shape bracket failed".into()));
        }
    }
    while score(hi).0 < 0.0 {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::FitFailure("weibull shape bracket failed".into()));
        }
    }
    let mut converged = false;
    for _ in 0..200 {
        let (g, dg) = score(c);
        if g < 0.0 {
            lo = c;
        } else {
            hi = c;
        }
        let mut next = c - g / dg;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - c).abs() <= 1e-13 * c || (hi - lo) <= 1e-14 * hi {
            c = next;
            converged = true;
            break;
        }
        c = next;
    }
    if !converged {
        return Err(Error::FitFailure("weibull shape iteration did not converge".into()));
    }
    let s0: f64 = logs.iter().map(|&l| (c * (l - max_log)).exp()).sum();
    // λ^c = mean of x^c, kept in logs.
    let ln_lambda = max_log + (s0 / n).ln() / c;
    let ll = n * c.ln() - n * c * ln_lambda + (c - 1.0) * mean_log * n - n;
    Ok(FitResult::new(Family::Weibull, vec![c, ln_lambda.exp()], ll))
}

/// ln Φ(x), accurate far into the lower tail.
pub fn ln_norm_cdf(x: f64) -> f64 {
    if x > -20.0 {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * std::f64::consts::TAU.ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

/// φ(x)/Φ(x).
fn mills(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * std::f64::consts::TAU.ln() - ln_norm_cdf(x)).exp()
}

/// Negative mean log-likelihood and gradient in (ξ, ln ω, α).
fn skew_objective(x: &[f64], p: &[f64; 3]) -> (f64, [f64; 3]) {
    let (xi, eta, alpha) = (p[0], p[1], p[2]);
    let omega = eta.exp();
    let n = x.len() as f64;
    let (mut ll, mut g0, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0);
    for &v in x {
        let z = (v - xi) / omega;
        let u = alpha * z;
        let m = mills(u);
        ll += -0.5 * z * z + ln_norm_cdf(u);
        g0 += z - alpha * m;
        g1 += z * z - 1.0 - u * m;
        g2 += z * m;
    }
    let ll = ll / n + std::f64::consts::LN_2 - eta - 0.5 * std::f64::consts::TAU.ln();
    let grad = [g0 / (omega * n), g1 / n, g2 / n];
    (-ll, [-grad[0], -grad[1], -grad[2]])
}

struct BfgsOutcome {
    x: [f64; 3],
    f: f64,
    converged: bool,
}

fn bfgs(x0: [f64; 3], f: impl Fn(&[f64; 3]) -> (f64, [f64; 3])) -> BfgsOutcome {
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut h = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..500 {
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !fx.is_finite() {
            return BfgsOutcome { x, f: fx, converged: false };
        }
        if gn < 1e-9 {
            return BfgsOutcome { x, f: fx, converged: true };
        }
        let mut d = [0.0; 3];
        for i in 0..3 {
            d[i] = -(0..3).map(|j| h[i][j] * g[j]).sum::<f64>();
        }
        let mut slope: f64 = (0..3).map(|i| d[i] * g[i]).sum();
        if slope >= 0.0 {
            h = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            d = [-g[0], -g[1], -g[2]];
            slope = -gn * gn;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = [x[0] + t * d[0], x[1] + t * d[1], x[2] + t * d[2]];
            let (fn_, gn_) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fn_, gn_));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            // No descent possible at machine precision: stationary.
            return BfgsOutcome { x, f: fx, converged: gn < 1e-5 };
        };
        let s = [xn[0] - x[0], xn[1] - x[1], xn[2] - x[2]];
        let y = [gnew[0] - g[0], gnew[1] - g[1], gnew[2] - g[2]];
        let sy: f64 = (0..3).map(|i| s[i] * y[i]).sum();
        let df = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        if df.abs() <= 1e-15 * fx.abs().max(1.0) && s.iter().all(|v| v.abs() < 1e-12) {
            return BfgsOutcome { x, f: fx, converged: true };
        }
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let mut hy = [0.0; 3];
            for i in 0..3 {
                hy[i] = (0..3).map(|j| h[i][j] * y[j]).sum();
            }
            let yhy: f64 = (0..3).map(|i| y[i] * hy[i]).sum();
            for i in 0..3 {
                for j in 0..3 {
                    h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
    }
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    BfgsOutcome { x, f: fx, converged: gn < 1e-6 }
}

/// Method-of-moments start for a given shape.
fn skew_start(mean: f64, sd: f64, alpha: f64) -> [f64; 3] {
    let delta = alpha / (1.0 + alpha * alpha).sqrt();
    let b = (2.0 / std::f64::consts::PI).sqrt();
    let omega = sd / (1.0 - b * b * delta * delta).sqrt();
    [mean - omega * delta * b, omega.ln(), alpha]
}

fn fit_skew_normal(x: &[f64]) -> Result<FitResult> {
    let n = x.len() as f64;
    let (mean, sd) = mean_and_mle_sd(x);
    let mut best: Option<BfgsOutcome> = None;
    for a0 in [0.0, 2.0, -2.0, 5.0, -5.0] {
        let out = bfgs(skew_start(mean, sd, a0), |p| skew_objective(x, p));
        if out.converged && out.f.is_finite() && best.as_ref().is_none_or(|b| out.f < b.f) {
            best = Some(out);
        }
    }
    let best = best.ok_or_else(|| Error::FitFailure("skew-normal: no start converged".into()))?;
    let [xi, eta, alpha] = best.x;
    if alpha.abs() > SKEW_SHAPE_LIMIT {
        let mut r = FitResult::new(Family::SkewNormal, vec![mean, sd, 0.0], normal_loglik_at_mle(n, sd));
        r.normal_equivalent = true;
        return Ok(r);
    }
    Ok(FitResult::new(Family::SkewNormal, vec![xi, eta.exp(), alpha], -best.f * n))
}

/// Fits ordered best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicRanking {
    pub fits: Vec<FitResult>,
    pub failures: Vec<(Family, String)>,
}

impl AicRanking {
    pub fn winner(&self) -> &FitResult {
        &self.fits[0]
    }
}

fn aic_order(a: &FitResult, b: &FitResult) -> Ordering {
    if (a.aic - b.aic).abs() < AIC_TIE {
        a.k.cmp(&b.k).then(a.family.cmp(&b.family))
    } else {
        a.aic.total_cmp(&b.aic)
    }
}

/// Orders fits by AIC; near-ties (ΔAIC < 1e-9) go to fewer parameters,
/// then family name.
pub fn rank_fits(mut fits: Vec<FitResult>) -> Vec<FitResult> {
    fits.sort_by(|a, b| a.aic.total_cmp(&b.aic));
    fits.sort_by(aic_order);
    fits
}

/// Fits every family and ranks them; failing families are recorded.
pub fn aic_rank(samples: &[f64]) -> Result<AicRanking> {
    aic_rank_families(samples, &Family::ALL)
}

pub fn aic_rank_families(samples: &[f64], families: &[Family]) -> Result<AicRanking> {
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for &f in families {
        match fit_family(f, samples) {
            Ok(r) => fits.push(r),
            Err(e) => failures.push((f, e.to_string())),
        }
    }
    if fits.is_empty() {
        return Err(Error::FitFailure(format!("every family failed: {failures:?}")));
    }
    Ok(AicRanking {
        fits: rank_fits(fits),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdResult {
    pub n: usize,
    pub a2: f64,
    pub a2_star: f64,
    /// (level, rejected) for each tabulated level.
    pub rejections: Vec<(f64, bool)>,
}

impl AdResult {
    pub fn rejected_at(&self, level: f64) -> Option<bool> {
        self.rejections
            .iter()
            .find(|(l, _)| (l - level).abs() < 1e-12)
            .map(|&(_, r)| r)
    }
}

/// A² of `y` against a normal with the sample mean and standard deviation.
pub fn anderson_darling_normal(y: &[f64]) -> Result<AdResult> {
    let n = y.len();
    if n < MIN_AD_SAMPLES {
        return Err(Error::SampleTooSmall { n, min: MIN_AD_SAMPLES });
    }
    let nf = n as f64;
    let m = y.iter().sum::<f64>() / nf;
    let s = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (nf - 1.0)).sqrt();
    if !(s > 0.0) {
        return Err(Error::DegenerateSample("no spread".into()));
    }
    let mut z: Vec<f64> = y.iter().map(|v| (v - m) / s).collect();
    z.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    for i in 0..n {
        let w = (2 * i + 1) as f64;
        sum += w * (ln_norm_cdf(z[i]) + ln_norm_cdf(-z[n - 1 - i]));
    }
    let a2 = -nf - sum / nf;
    let a2_star = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    Ok(AdResult {
        n,
        a2,
        a2_star,
        rejections: AD_CRITICAL.iter().map(|&(l, c)| (l, a2_star > c)).collect(),
    })
}

/// A-D test of log-normality for shifted (positive) residuals.
pub fn anderson_darling_lognormal(shifted: &[f64]) -> Result<AdResult> {
    if shifted.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidInput("shifted residuals must be > 0".into()));
    }
    let logs: Vec<f64> = shifted.iter().map(|v| v.ln()).collect();
    anderson_darling_normal(&logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub level: f64,
    pub critical: f64,
    pub rejection_rate: f64,
}

/// Null rejection rates of the tabulated critical values over `replicates`
/// normal samples of size `n`.
pub fn ad_calibration(n: usize, replicates: usize, seed: RngSeed) -> Result<Vec<CalibrationRow>> {
    let counts: Vec<[usize; 4]> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed.offset(r as u64).rng();
            let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let ad = anderson_darling_normal(&y)?;
            let mut c = [0; 4];
            for (k, (_, rej)) in ad.rejections.iter().enumerate() {
                c[k] = *rej as usize;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    Ok(AD_CRITICAL
        .iter()
        .enumerate()
        .map(|(k, &(level, critical))| CalibrationRow {
            level,
            critical,
            rejection_rate: counts.iter().map(|c| c[k]).sum::<usize>() as f64 / replicates as f64,
        })
        .collect())
}

pub const R0_BAND_LOW: f64 = 4.0;
pub const R0_BAND_HIGH: f64 = 8.0;

pub fn r0_band(r0: f64) -> &'static str {
    if r0 < R0_BAND_LOW {
        "low"
    } else if r0 < R0_BAND_HIGH {
        "mid"
    } else {
        "high"
    }
}

/// Ranking and A-D result for one (scenario, bin, phase) stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumFit {
    pub scenario: String,
    pub r0: f64,
    pub bin: usize,
    pub phase: Phase,
    pub n: usize,
    pub nudged: usize,
    pub ranking: Option<AicRanking>,
    pub ad: Option<AdResult>,
}

/// Fits every original (non-merged) stratum of a bank.
pub fn fit_bank(bank: &ResidualBank) -> Result<Vec<StratumFit>> {
    let r0 = bank.params.r0();
    let keys: Vec<(usize, Phase)> = bank
        .strata
        .keys()
        .filter(|k| !bank.merged.contains(k))
        .copied()
        .collect();
    keys.par_iter()
        .map(|&(bin, phase)| {
            let (x, nudged) = shift_residuals(bank.stratum(bin, phase))?;
            Ok(StratumFit {
                scenario: bank.scenario.clone(),
                r0,
                bin,
                phase,
                n: x.len(),
                nudged,
                ranking: aic_rank(&x).ok(),
                ad: anderson_darling_lognormal(&x).ok(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratification {
    Overall,
    ByR0Band,
    ByPhase,
}

/// Win counts per stratum cell and family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinTable {
    pub stratification: Stratification,
    pub wins: BTreeMap<String, BTreeMap<Family, usize>>,
}

impl WinTable {
    pub fn total(&self, cell: &str) -> usize {
        self.wins.get(cell).map(|m| m.values().sum()).unwrap_or(0)
    }

    pub fn share(&self, cell: &str, family: Family) -> f64 {
        let t = self.total(cell);
        if t == 0 {
            return 0.0;
        }
        self.wins[cell].get(&family).copied().unwrap_or(0) as f64 / t as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "stratum,family,wins,share")?;
        for (cell, m) in &self.wins {
            for f in Family::ALL {
                writeln!(
                    w,
                    "{cell},{f},{},{}",
                    m.get(&f).copied().unwrap_or(0),
                    self.share(cell, f)
                )?;
            }
        }
        Ok(())
    }
}

/// Proportion of stratum fits won by each family within each cell.
pub fn aic_win_table(fits: &[StratumFit], stratification: Stratification) -> WinTable {
    let mut wins: BTreeMap<String, BTreeMap<Family, usize>> = BTreeMap::new();
    for f in fits {
        let Some(r) = &f.ranking else { continue };
        let cell = match stratification {
            Stratification::Overall => "overall".to_string(),
            Stratification::ByR0Band => r0_band(f.r0).to_string(),
            Stratification::ByPhase => f.phase.to_string(),
        };
        let row = wins.entry(cell).or_default();
        for fam in Family::ALL {
            row.entry(fam).or_insert(0);
        }
        *row.get_mut(&r.winner().family).unwrap() += 1;
    }
    WinTable { stratification, wins }
}

/// `scenario,bin,phase,family,p1,p2,p3,loglik,aic`.
pub fn write_fits_csv<W: Write>(fits: &[StratumFit], mut w: W) -> Result<()> {
    writeln!(w, "scenario,bin,phase,family,p1,p2,p3,loglik,aic")?;
    for s in fits {
        let Some(r) = &s.ranking else { continue };
        let mut rows = r.fits.clone();
        rows.sort_by_key(|f| f.family);
        for f in rows {
            let p = |k: usize| f.params.get(k).map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                s.scenario, s.bin, s.phase, f.family, p(0), p(1), p(2), f.loglik, f.aic
            )?;
        }
    }
    Ok(())
}

/// Pooled rejection rate per level, overall and by phase: `level,phase,rate`.
pub fn ad_rejection_rates(fits: &[StratumFit]) -> Vec<(f64, String, f64)> {
    let mut out = Vec::new();
    for &(level, _) in &AD_CRITICAL {
        for phase in [None, Some(Phase::Pre), Some(Phase::Post)] {
            let sel: Vec<bool> = fits
                .iter()
                .filter(|f| phase.is_none_or(|p| f.phase == p))
                .filter_map(|f| f.ad.as_ref().and_then(|a| a.rejected_at(level)))
                .collect();
            if sel.is_empty() {
                continue;
            }
            let rate = sel.iter().filter(|&&r| r).count() as f64 / sel.len() as f64;
            let label = phase.map(|p| p.to_string()).unwrap_or_else(|| "all".into());
            out.push((level, label, rate));
        }
    }
    out
}

pub fn write_ad_csv<W: Write>(rates: &[(f64, String, f64)], mut w: W) -> Result<()> {
    writeln!(w, "level,phase,rate")?;
    for (l, p, r) in rates {
        writeln!(w, "{l},{p},{r}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Gamma, LogNormal, Normal};

    fn draws<D: Distribution<f64>>(d: D, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngSeed::new(seed, 0).rng();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn shift_rules() {
        let (v, k) = shift_residuals(&[-1.0, 0.0, 0.25]).unwrap();
        assert_eq!(v, vec![1e-9, 1.0, 1.25]);
        assert_eq!(k, 1);
        assert!(shift_residuals(&[-1.5]).is_err());
    }

    #[test]
    fn normal_closed_form() {
        let x: Vec<f64> = (0..20).map(|k| [1.0, 2.0, 3.0, 4.0, 5.0][k % 5]).collect();
        let r = fit_family(Family::Normal, &x).unwrap();
        assert!((r.params[0] - 3.0).abs() < 1e-12);
        assert!((r.params[1] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.aic, 2.0 * 2.0 - 2.0 * r.loglik);
        assert!(matches!(fit_family(Family::Normal, &[1.0; 30]), Err(Error::DegenerateSample(_))));
        assert!(fit_family(Family::Normal, &x[..19]).is_err());
    }

    #[test]
    fn trigamma_values() {
        // ψ'(1) = π²/6, ψ'(1/2) = π²/2.
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((trigamma(1.0) - pi2 / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - pi2 / 2.0).abs() < 1e-11);
    }

    /// Direct log-likelihoods, independent of the fitting code.
    fn gamma_ll(x: &[f64], k: f64, th: f64) -> f64 {
        x.iter().map(|&v| (k - 1.0) * v.ln() - v / th - ln_gamma(k) - k * th.ln()).sum()
    }
    fn weibull_ll(x: &[f64], c: f64, l: f64) -> f64 {
        x.iter().map(|&v| c.ln() - l.ln() + (c - 1.0) * (v / l).ln() - (v / l).powf(c)).sum()
    }

    #[test]
    fn gamma_and_weibull_are_maxima() {
        let x = draws(Gamma::new(2.5, 0.7).unwrap(), 2000, 1);
        let g = fit_family(Family::Gamma, &x).unwrap();
        assert!((g.loglik - gamma_ll(&x, g.params[0], g.params[1])).abs() < 1e-7 * g.loglik.abs());
        for (dk, dt) in [(1.01, 1.0), (0.99, 1.0), (1.0, 1.01), (1.0, 0.99)] {
            assert!(gamma_ll(&x, g.params[0] * dk, g.params[1] * dt) < g.loglik);
        }
        let w = fit_family(Family::Weibull, &x).unwrap();
        assert!((w.loglik - weibull_ll(&x, w.params[0], w.params[1])).abs() < 1e-7 * w.loglik.abs());
        for (dc, dl) in [(1.01, 1.0), (0.99, 1.0), (1.0, 1.01), (1.0, 0.99)] {
            assert!(weibull_ll(&x, w.params[0] * dc, w.params[1] * dl) < w.loglik);
        }
    }

    #[test]
    fn lognormal_location() {
        let x = draws(LogNormal::new(0.0, 1.0).unwrap(), 10_000, 2);
        let r = fit_family(Family::Lognormal, &x).unwrap();
        assert!(r.params[0].abs() < 3.0 / 100.0);
    }

    #[test]
    fn skew_normal_nests_normal() {
        let x = draws(Normal::new(1.0, 0.3).unwrap(), 10_000, 3);
        let n = fit_family(Family::Normal, &x).unwrap();
        let s = fit_family(Family::SkewNormal, &x).unwrap();
        assert!(s.loglik >= n.loglik - 1e-6);
        assert_eq!(s.k, 3);
    }

    #[test]
    fn skew_normal_recovers_shape() {
        // Skew-normal draws via the |Z0| construction.
        let mut rng = RngSeed::new(4, 0).rng();
        let (xi, om, al) = (2.0, 1.5, 4.0);
        let d = al / (1.0f64 + al * al).sqrt();
        let x: Vec<f64> = (0..5000)
            .map(|_| {
                let z0: f64 = StandardNormal.sample(&mut rng);
                let z1: f64 = StandardNormal.sample(&mut rng);
                xi + om * (d * z0.abs() + (1.0 - d * d).sqrt() * z1)
            })
            .collect();
        let s = fit_family(Family::SkewNormal, &x).unwrap();
        assert!((s.params[2] - al).abs() < 1.0, "{:?}", s.params);
        assert!(!s.normal_equivalent);
    }

    #[test]
    fn tie_break_is_deterministic() {
        let x = draws(Normal::new(1.0, 0.1).unwrap(), 100, 5);
        let a = fit_family(Family::Normal, &x).unwrap();
        let mut b = a.clone();
        b.family = Family::Gamma;
        let mut c = a.clone();
        c.family = Family::SkewNormal;
        c.k = 3;
        let order: Vec<Family> = rank_fits(vec![c.clone(), a.clone(), b.clone()]).iter().map(|f| f.family).collect();
        assert_eq!(order, vec![Family::Gamma, Family::Normal, Family::SkewNormal]);
        let again: Vec<Family> = rank_fits(vec![b, c, a]).iter().map(|f| f.family).collect();
        assert_eq!(order, again);
    }

    #[test]
    fn forced_single_family_wins_everything() {
        let x = draws(Gamma::new(3.0, 1.0).unwrap(), 200, 6);
        let r = aic_rank_families(&x, &[Family::Weibull]).unwrap();
        let fit = StratumFit {
            scenario: "s".into(),
            r0: 2.0,
            bin: 0,
            phase: Phase::Pre,
            n: 200,
            nudged: 0,
            ranking: Some(r),
            ad: None,
        };
        let t = aic_win_table(&[fit], Stratification::Overall);
        assert_eq!(t.share("overall", Family::Weibull), 1.0);
    }

    #[test]
    fn ad_is_affine_invariant_and_rejects_gamma() {
        let y = draws(Normal::new(0.0, 1.0).unwrap(), 500, 7);
        let a = anderson_darling_normal(&y).unwrap();
        let z: Vec<f64> = y.iter().map(|v| 3.0 * v - 7.0).collect();
        let b = anderson_darling_normal(&z).unwrap();
        assert!((a.a2 - b.a2).abs() < 1e-9);
        assert!((a.a2_star - a.a2 * (1.0 + 0.75 / 500.0 + 2.25 / 250_000.0)).abs() < 1e-15);
        let g = draws(Gamma::new(0.5, 1.0).unwrap(), 1000, 8);
        assert_eq!(anderson_darling_lognormal(&g).unwrap().rejected_at(0.05), Some(true));
        assert!(anderson_darling_normal(&y[..7]).is_err());
    }

    #[test]
    fn ln_norm_cdf_tails() {
        assert!((ln_norm_cdf(0.0) - 0.5f64.ln()).abs() < 1e-15);
        // Continuity across the switch to the asymptotic form.
        let (a, b) = (ln_norm_cdf(-20.0 + 1e-9), ln_norm_cdf(-20.0 - 1e-9));
        assert!((a - b).abs() < 1e-6);
        assert!(ln_norm_cdf(-100.0).is_finite());
    }
}
