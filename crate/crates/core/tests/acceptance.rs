//! Acceptance suite. Runs every criterion at its stated scale and tolerance
//! and prints one PASS/FAIL line per criterion; exits non-zero on any FAIL.
//!
//! Oracles here are written independently of the library code they check
//! (root finding, closed-form moments, variance counts, KS distance).

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use epiident::coverage::{coverage_table, sigma_min_search, CoverageConfig, CoverageMethod};
use epiident::ctmc::{gillespie_run, run_ensemble, CountState, EventKind};
use epiident::distfit::{anderson_darling_lognormal, fit_bank, Family, StratumFit};
use epiident::identify::mc_identifiability_with;
use epiident::residuals::{ensemble_acf, ensemble_residuals};
use epiident::rng::RngSeed;
use epiident::scenarios::{grid_scenario, standard_grid, Scenario};
use epiident::sir::{integrate_sir, integrate_to_quiescence};
use epiident::studies::{control_demo, register_at_peak};
use epiident::synth::{build_residual_bank, gaussian_dataset, NoiseSpec, DEFAULT_BINS};
use rand_distr::{Distribution, StandardNormal};

type Outcome = (bool, String);

fn seed() -> RngSeed {
    RngSeed::default()
}

/// Final susceptible count from log(S/S0) = (β/α)(S − S0 − I0) by bisection
/// on (0, S0).
fn final_size_root(alpha: f64, beta: f64, s0: f64, i0: f64) -> f64 {
    let g = |s: f64| (s / s0).ln() - beta / alpha * (s - s0 - i0);
    let (mut lo, mut hi) = (1e-300, s0 * (1.0 - 1e-12));
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn c1_ode() -> Outcome {
    let mut worst_cons: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    for sc in standard_grid(1000).unwrap() {
        let p = sc.params;
        let n = p.n();
        let sol = integrate_sir(&p, &sc.initial, &sc.grid).unwrap();
        for s in &sol.states {
            worst_cons = worst_cons.max(((s.susceptible + s.infectious + s.recovered) - n).abs() / n);
        }
        let (_, end) = integrate_to_quiescence(&p, &sc.initial, 1e-10, 20_000.0).unwrap();
        let (s0, i0) = (sc.initial.susceptible, sc.initial.infectious);
        let root = final_size_root(p.alpha, p.beta, s0, i0);
        worst_rel = worst_rel.max((end.susceptible - root).abs() / s0);
        let lhs = (end.susceptible / s0).ln();
        let rhs = p.beta / p.alpha * (end.susceptible + end.infectious - s0 - i0);
        worst_res = worst_res.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    (
        worst_cons < 1e-9 && worst_res < 1e-6 && worst_rel < 1e-6,
        format!(
            "conservation {worst_cons:.1e}, relative final-size residual {worst_res:.1e}, |S_inf - root|/S0 {worst_rel:.1e}"
        ),
    )
}

/// Asymptotic Kolmogorov p-value, P(K > λ).
fn kolmogorov_p(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let s: f64 = (1..=200)
        .map(|k| {
            let k = k as f64;
            (if k as i64 % 2 == 1 { 2.0 } else { -2.0 }) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    s.clamp(0.0, 1.0)
}

fn c2_gillespie() -> Outcome {
    let (alpha, beta, n, i0) = (0.1, 0.0004, 1000u64, 10u64);
    let sc = Scenario::new("g", epiident::sir::EpidemicParameters::new(alpha, beta, n).unwrap(), i0, 150).unwrap();
    let init = CountState::new(n - i0, i0, 0);
    let runs = 10_000;
    let s = seed().derive(&[2]);
    let mut first_wait = Vec::with_capacity(runs);
    let mut first_inf = 0usize;
    let mut gaps = Vec::new();
    for j in 0..runs {
        let log = gillespie_run(&sc.params, &init, 30.0, s.offset(j as u64)).unwrap();
        first_wait.push(log[0].time);
        first_inf += (log[0].event == EventKind::Infection) as usize;
        if gaps.len() < 10_000 {
            let mut prev_t = 0.0;
            let mut prev = init;
            for e in &log {
                let rate = beta * prev.susceptible as f64 * prev.infectious as f64 + alpha * prev.infectious as f64;
                gaps.push((e.time - prev_t) * rate);
                prev_t = e.time;
                prev = e.state;
                if gaps.len() == 10_000 {
                    break;
                }
            }
        }
    }
    let a1 = beta * (n - i0) as f64 * i0 as f64;
    let a2 = alpha * i0 as f64;
    let mean_true = 1.0 / (a1 + a2);
    let mean = first_wait.iter().sum::<f64>() / runs as f64;
    let se_mean = mean_true / (runs as f64).sqrt();
    let p = a1 / (a1 + a2);
    let phat = first_inf as f64 / runs as f64;
    let se_p = (p * (1.0 - p) / runs as f64).sqrt();

    gaps.sort_by(f64::total_cmp);
    let m = gaps.len() as f64;
    let d = gaps
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let f = 1.0 - (-g).exp();
            ((k as f64 + 1.0) / m - f).max(f - k as f64 / m)
        })
        .fold(0.0, f64::max);
    let pval = kolmogorov_p(m.sqrt() * d);
    let ok = (mean - mean_true).abs() < 3.0 * se_mean && (phat - p).abs() < 3.0 * se_p && pval > 0.01;
    (
        ok,
        format!(
            "first wait {mean:.5} vs {mean_true:.5} ({:.2} SE); infection share {phat:.4} vs {p:.4} ({:.2} SE); KS p {pval:.3} over {} gaps",
            (mean - mean_true) / se_mean,
            (phat - p) / se_p,
            gaps.len()
        ),
    )
}

fn c3_residuals() -> Outcome {
    let sc = grid_scenario(0.2, 0.0004, 1000).unwrap();
    let ode = integrate_sir(&sc.params, &sc.initial, &sc.grid).unwrap().trajectory;
    let ens = run_ensemble(&sc.params, &sc.count_initial().unwrap(), &sc.grid, 1000, seed().derive(&[3])).unwrap();
    // Peak of the ODE and per-time moments, computed here directly.
    let peak_idx = (0..ode.len()).fold(0, |b, k| if ode.prevalence[k] > ode.prevalence[b] { k } else { b });
    let (mut pre, mut sup) = (0usize, 0usize);
    for k in 0..peak_idx {
        let col: Vec<f64> = ens.iter().map(|r| r.prevalence[k]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
        if mean >= 1.0 {
            pre += 1;
            sup += (var > mean) as usize;
        }
    }
    let share = sup as f64 / pre as f64;

    let ctmc = ensemble_residuals(&ens, &ode).unwrap();
    let series: Vec<&[f64]> = ctmc.iter().map(|s| s.residuals.as_slice()).collect();
    let acf_ctmc = ensemble_acf(&series, 30).unwrap();
    let noise = NoiseSpec::new(0.1).unwrap();
    let gdata: Vec<_> = (0..1000)
        .map(|k| gaussian_dataset(&ode, noise, seed().derive(&[3, 1, k])).unwrap())
        .collect();
    let g = ensemble_residuals(&gdata, &ode).unwrap();
    let gseries: Vec<&[f64]> = g.iter().map(|s| s.residuals.as_slice()).collect();
    let acf_g = ensemble_acf(&gseries, 30).unwrap();
    let len = gseries[0].len();
    let band = 1.96 / (len as f64).sqrt();
    let worst = acf_g.mean[1..=30].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (
        share > 0.8 && acf_ctmc.mean[1] > 0.5 && worst < band,
        format!(
            "super-Poisson share {share:.3} of {pre} pre-peak points; CTMC acf[1] {:.3}; Gaussian max |acf| {worst:.4} vs band {band:.4}",
            acf_ctmc.mean[1]
        ),
    )
}

fn c4_distfit() -> Outcome {
    // (a) null calibration on true log-normal samples
    let mut rejected = 0usize;
    let reps = 1000;
    for r in 0..reps {
        let mut rng = seed().derive(&[4, r]).rng();
        let x: Vec<f64> = (0..1000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (0.3 * z - 0.1).exp()
            })
            .collect();
        let ad = anderson_darling_lognormal(&x).unwrap();
        rejected += ad.rejected_at(0.05).unwrap() as usize;
    }
    let null_rate = rejected as f64 / reps as f64;

    // (b), (c) CTMC residual strata over the 16 scenarios
    let scs = standard_grid(1000).unwrap();
    let mut by_scenario: Vec<Vec<StratumFit>> = Vec::new();
    for (si, sc) in scs.iter().enumerate() {
        let ode = integrate_sir(&sc.params, &sc.initial, &sc.grid).unwrap().trajectory;
        let ens = run_ensemble(&sc.params, &sc.count_initial().unwrap(), &sc.grid, 1000, seed().derive(&[4, 1, si as u64]))
            .unwrap();
        let bank = build_residual_bank(&ens, &ode, DEFAULT_BINS, &sc.label, sc.params).unwrap();
        by_scenario.push(fit_bank(&bank).unwrap());
    }
    let pooled: Vec<&StratumFit> = by_scenario.iter().step_by(2).flatten().collect();
    let decided: Vec<bool> = pooled
        .iter()
        .filter_map(|f| f.ad.as_ref().and_then(|a| a.rejected_at(0.05)))
        .collect();
    let reject_rate = decided.iter().filter(|&&r| r).count() as f64 / decided.len() as f64;

    let mut wins: BTreeMap<Family, usize> = Family::ALL.iter().map(|&f| (f, 0)).collect();
    let mut fits = 0;
    for f in by_scenario.iter().flatten() {
        if let Some(r) = &f.ranking {
            *wins.get_mut(&r.winner().family).unwrap() += 1;
            fits += 1;
        }
    }
    let top = wins.iter().max_by_key(|(_, &c)| c).map(|(f, _)| *f).unwrap();
    let ln = wins[&Family::Lognormal];
    let nm = wins[&Family::Normal];
    let lognormal_top = wins.iter().all(|(f, &c)| *f == Family::Lognormal || c < ln);
    let normal_last = wins.iter().all(|(f, &c)| *f == Family::Normal || c > nm);
    let shares: Vec<String> = wins.iter().map(|(f, c)| format!("{f} {c}")).collect();
    (
        (null_rate - 0.05).abs() <= 0.02 && reject_rate > 0.85 && fits >= 200 && lognormal_top && normal_last,
        format!(
            "null rejection {null_rate:.3}; pooled rejection {reject_rate:.3} over {} strata; AIC wins over {fits} fits [{}], top {top}",
            decided.len(),
            shares.join(", ")
        ),
    )
}

const ANCHORS: [(f64, f64); 4] = [(0.33, 0.0004), (0.10, 0.0004), (0.10, 0.0008), (0.14, 0.0020)];

fn c5_coverage() -> Outcome {
    let scs: Vec<Scenario> = ANCHORS.iter().map(|&(a, b)| grid_scenario(a, b, 1000).unwrap()).collect();
    let methods = [
        CoverageMethod::Ctmc,
        CoverageMethod::Gaussian(0.1),
        CoverageMethod::Empirical,
        CoverageMethod::Hybrid,
    ];
    let template = CoverageConfig::new(CoverageMethod::Ctmc, seed());
    assert_eq!((template.j_outer, template.m_inner, template.level), (30, 300, 0.68));
    let table = coverage_table(&scs, &methods, &template).unwrap();
    let col = |k: usize| -> Vec<f64> { table.column(k).iter().map(|c| c.unwrap_or(f64::NAN)).collect() };
    let (ctmc, g01, emp, hyb) = (col(0), col(1), col(2), col(3));
    let ctmc_reference = [0.77, 0.67, 0.63, 0.64];
    let g01_reference = [0.00, 0.04, 0.16, 0.26];
    let hyb_reference = [0.79, 0.75, 0.71, 0.66];
    let mut failures = Vec::new();
    for i in 0..4 {
        if !((ctmc[i] - ctmc_reference[i]).abs() <= 0.12) {
            failures.push(format!("ctmc[{i}]"));
        }
        if !(g01[i] <= g01_reference[i] + 0.08) {
            failures.push(format!("gaussian:0.1[{i}]"));
        }
        if !(emp[i] <= 0.10) {
            failures.push(format!("empirical[{i}]"));
        }
        if !((hyb[i] - hyb_reference[i]).abs() <= 0.12) {
            failures.push(format!("hybrid[{i}]"));
        }
        if !((hyb[i] - ctmc[i]).abs() <= 0.12) {
            failures.push(format!("hybrid-ctmc[{i}]"));
        }
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    (
        failures.is_empty(),
        format!(
            "ctmc [{}] gaussian:0.1 [{}] empirical [{}] hybrid [{}]{}",
            fmt(&ctmc),
            fmt(&g01),
            fmt(&emp),
            fmt(&hyb),
            if failures.is_empty() { String::new() } else { format!("; out of tolerance: {}", failures.join(", ")) }
        ),
    )
}

/// Anchors for the σ_min trend, in increasing R₀.
const SIGMA_ANCHORS: [(f64, f64); 3] = [(0.14, 0.0004), (0.10, 0.0008), (0.14, 0.0020)];

fn c6_sigma_min() -> Outcome {
    let mut template = CoverageConfig::new(CoverageMethod::Gaussian(0.1), seed().derive(&[6]));
    template.j_outer = 20;
    template.m_inner = 150;
    let mut r0 = Vec::new();
    let mut sm = Vec::new();
    for &(a, b) in &SIGMA_ANCHORS {
        let sc = grid_scenario(a, b, 1000).unwrap();
        let r = sigma_min_search(&sc, 0.68, &template).unwrap();
        r0.push(sc.r0());
        sm.push(r.sigma_min);
    }
    let rho = epiident::stats::spearman(&r0, &sm).unwrap();
    (
        sm[0] >= 0.5 && rho < 0.0,
        format!(
            "sigma_min {:?} at R0 {:?}; Spearman {rho:.2}",
            sm.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            r0.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

fn cv(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    100.0 * v.sqrt() / m
}

fn c7_spread() -> Outcome {
    let sc = grid_scenario(0.1, 0.0004, 1000).unwrap();
    // Outbreaks that never take off are left out: their fits land anywhere
    // in the search box and a single one swamps the CV.
    let mut dropped = 0;
    let mut run = |m: CoverageMethod| {
        let r = mc_identifiability_with(&sc, m, 1000, seed().derive(&[7]), true).unwrap();
        dropped += r.dropped_extinct;
        let cloud = r.cloud();
        let a: Vec<f64> = cloud.iter().map(|p| p.0).collect();
        let b: Vec<f64> = cloud.iter().map(|p| p.1).collect();
        (cv(&a), cv(&b))
    };
    let ctmc = run(CoverageMethod::Ctmc);
    let g2 = run(CoverageMethod::Gaussian(0.2));
    let g1 = run(CoverageMethod::Gaussian(0.1));
    let hyb = run(CoverageMethod::Hybrid);
    let ok = ctmc.1 > g2.1
        && g2.1 > g1.1
        && (ctmc.0 - 4.77).abs() <= 1.5
        && (ctmc.1 - 9.64).abs() <= 1.5
        && (hyb.0 - 6.46).abs() <= 2.0
        && (hyb.1 - 11.19).abs() <= 2.0;
    (
        ok,
        format!(
            "CV% (alpha, beta): ctmc ({:.2}, {:.2}) gaussian:0.2 ({:.2}, {:.2}) gaussian:0.1 ({:.2}, {:.2}) hybrid ({:.2}, {:.2}); {dropped} extinct CTMC runs left out",
            ctmc.0, ctmc.1, g2.0, g2.1, g1.0, g1.1, hyb.0, hyb.1
        ),
    )
}

fn c8_appendix() -> Outcome {
    let sc = grid_scenario(0.2, 0.0004, 1000).unwrap();
    let ode = integrate_sir(&sc.params, &sc.initial, &sc.grid).unwrap().trajectory;
    let ens = run_ensemble(&sc.params, &sc.count_initial().unwrap(), &sc.grid, 200, seed().derive(&[8])).unwrap();
    let reg = register_at_peak(&ens, &ode).unwrap();
    let peak = ode.prevalence.iter().copied().fold(0.0, f64::max);
    // RMSE recomputed over the reported window.
    let rmse = |m: &[f64]| {
        let idx: Vec<usize> = (0..ode.len())
            .filter(|&k| ode.times()[k] >= reg.window.0 && ode.times()[k] <= reg.window.1)
            .collect();
        (idx.iter().map(|&k| (m[k] - ode.prevalence[k]).powi(2)).sum::<f64>() / idx.len() as f64).sqrt()
    };
    let r_reg = rmse(&reg.registered_mean.prevalence) / peak;
    let r_raw = rmse(&reg.unaligned_mean.prevalence) / peak;

    let demo = control_demo(5, seed()).unwrap();
    let finals = &demo.projection.finals;
    let hi = finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = finals.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = hi / lo;
    (
        r_reg < 0.05 && r_reg < r_raw && ratio >= 2.0,
        format!(
            "registered RMSE/peak {r_reg:.4}, unaligned {r_raw:.4}; control fan max/min {ratio:.2} over {} fits",
            finals.len()
        ),
    )
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.extension().is_some_and(|x| x == "csv") {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

fn c9_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_epiident");
    let tmp = tempfile::tempdir().unwrap();
    let commands: [&[&str]; 6] = [
        &["simulate", "--runs", "50"],
        &["residuals", "--alpha", "0.2", "--runs", "100"],
        &["identify", "--method", "gaussian:0.1", "--m", "200", "--seed", "42"],
        &["coverage", "--scenarios", "0.14:0.002", "--methods", "ctmc,hybrid", "--j", "3", "--m", "60", "--reference-runs", "200"],
        &["study", "control"],
        &["study", "register"],
    ];
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for (k, cmd) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for threads in ["1", "3"] {
            let out = tmp.path().join(format!("c{k}_t{threads}"));
            let status = Command::new(bin)
                .args(*cmd)
                .args(["--threads", threads, "--out"])
                .arg(&out)
                .status()
                .unwrap();
            assert!(status.success(), "{cmd:?} failed");
            outputs.push(csv_files(&out));
        }
        assert!(!outputs[0].is_empty(), "{cmd:?} wrote no CSV");
        for (name, bytes) in &outputs[0] {
            compared += 1;
            if outputs[1].get(name) != Some(bytes) {
                mismatched.push(format!("{}:{name}", cmd.join(" ")));
            }
        }
    }
    (
        mismatched.is_empty(),
        format!("{compared} CSV files compared between --threads 1 and 3; mismatches: {mismatched:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("ODE correctness", c1_ode),
        ("Gillespie correctness", c2_gillespie),
        ("residual structure", c3_residuals),
        ("distribution fitting", c4_distfit),
        ("coverage table", c5_coverage),
        ("sigma_min", c6_sigma_min),
        ("identifiability spread", c7_spread),
        ("appendix reproductions", c8_appendix),
        ("determinism", c9_determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += !ok as usize;
        println!(
            "{} criterion {id} ({name}): {detail} [{:.0}s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
