//! Small descriptive statistics shared by the analysis modules.

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Mean and sample variance (divisor n - 1), computed on data shifted by the
/// first value so that a constant sample gives exactly zero variance.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let x0 = x[0];
    let (mut s, mut ss) = (0.0, 0.0);
    for &v in x {
        let d = v - x0;
        s += d;
        ss += d * d;
    }
    let m = x0 + s / n as f64;
    if n < 2 {
        return (m, f64::NAN);
    }
    let var = ((ss - s * s / n as f64) / (n - 1) as f64).max(0.0);
    (m, var)
}

/// Sample standard deviation (divisor n - 1).
pub fn sd(x: &[f64]) -> f64 {
    mean_var(x).1.sqrt()
}

/// Coefficient of variation in percent.
pub fn cv_percent(x: &[f64]) -> f64 {
    let (m, v) = mean_var(x);
    100.0 * v.sqrt() / m
}

/// Quantile of sorted data with linear interpolation between order
/// statistics (h = (n - 1)p).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && x[idx[e + 1]] == x[idx[k]] {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            r[i] = avg;
        }
        k = e + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput("spearman needs two equal samples of size >= 2".into()));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

/// Kolmogorov survival function Q(λ) = 2 Σ (-1)^(k-1) exp(-2 k² λ²).
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        s += if k as u32 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test: (D, asymptotic p-value).
pub fn ks_one_sample(x: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let s = sorted(x);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (k, &v) in s.iter().enumerate() {
        let f = cdf(v);
        d = d.max((k as f64 + 1.0) / n - f).max(f - k as f64 / n);
    }
    let en = n.sqrt();
    (d, kolmogorov_sf((en + 0.12 + 0.11 / en) * d))
}

/// Two-sample Kolmogorov-Smirnov test: (D, asymptotic p-value).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (sa, sb) = (sorted(a), sorted(b));
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < na && j < nb {
        let v = sa[i].min(sb[j]);
        while i < na && sa[i] <= v {
            i += 1;
        }
        while j < nb && sb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let en = ((na * nb) as f64 / (na + nb) as f64).sqrt();
    (d, kolmogorov_sf((en + 0.12 + 0.11 / en) * d))
}
