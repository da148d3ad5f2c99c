//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary (`harness = false`).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use rd_toolkit::bandwidth::{ce_factor, oracle_mse_bandwidth, plugin_mse, select_mse_bandwidth};
use rd_toolkit::continuity::{estimate, fuzzy_estimate, normalize_and_pool, rbc_inference, sharp_estimate, EstimandKind, EstimatorConfig};
use rd_toolkit::locrand::{fisher_pvalue, select_window, AssignmentModel, FisherConfig, Window};
use rd_toolkit::lpoly::KernelKind;
use rd_toolkit::sample::{ColumnMap, RdSample};
use rd_toolkit::sim::{
    mde, power, presets, replication_seed, simulate_coverage, simulate_sample, CovariateSpec, CoverageConfig, IntervalMethod,
    MeanFunction,
};
use rd_toolkit::stats::choose_exact;
use rd_toolkit::validation::{
    binomial_counts, binomial_test, covariate_balance_continuity, default_placebo_grid, density_test, placebo_cutoffs,
    ContinuityConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn coverage_repair() -> Outcome {
    let dgp = presets::curved();
    let conv = simulate_coverage(
        &dgp,
        &CoverageConfig { method: IntervalMethod::Conventional, ..CoverageConfig::default() },
        1000,
        2000,
        42,
    )
    .map_err(|e| e.to_string())?;
    let rbc = simulate_coverage(&dgp, &CoverageConfig::default(), 1000, 2000, 42).map_err(|e| e.to_string())?;
    check(
        (0.70..=0.90).contains(&conv.coverage) && rbc.coverage >= 0.92,
        format!(
            "curved DGP n=1000 2000 reps: conventional {:.4} (need [0.70, 0.90]), RBC {:.4} (need >= 0.92)",
            conv.coverage, rbc.coverage
        ),
    )
}

fn exactness() -> Outcome {
    let n = 400;
    let x: Vec<f64> = (0..n).map(|i| -1.0 + (2 * i + 1) as f64 / n as f64).collect();
    let step: Vec<f64> = x.iter().map(|&v| f64::from(u8::from(v >= 0.0))).collect();
    let line: Vec<f64> = x.iter().map(|&v| 3.0 * v).collect();
    let vee: Vec<f64> = x.iter().map(|&v| v.abs()).collect();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut auto_cases = 0;
    for kernel in KernelKind::ALL {
        for p in [1usize, 2] {
            for h in [0.15, 0.4, 1.0] {
                let cfg = EstimatorConfig::new(p, kernel, h);
                for (y, kind, truth) in [
                    (&step, EstimandKind::Sharp, 1.0),
                    (&line, EstimandKind::Sharp, 0.0),
                    (&vee, EstimandKind::Kink, 2.0),
                ] {
                    let s = RdSample::new(x.clone(), y.clone(), 0.0).unwrap();
                    let est = estimate(&s, kind, &cfg).map_err(|e| format!("{kind:?} p={p} {kernel:?}: {e}"))?;
                    worst = worst.max((est.tau_hat - truth).abs());
                    cases += 1;
                    // data-driven bandwidth, when the selector has residual variation to work with
                    if h == 1.0 {
                        if let Ok(sel) = select_mse_bandwidth(&s, p, kernel) {
                            let auto = EstimatorConfig::new(p, kernel, sel.h_mse.min(1.0));
                            let est = estimate(&s, kind, &auto).map_err(|e| format!("{kind:?} auto h: {e}"))?;
                            worst = worst.max((est.tau_hat - truth).abs());
                            auto_cases += 1;
                        }
                    }
                }
            }
        }
    }
    check(worst < 1e-9, format!("{cases} fixed-h and {auto_cases} plug-in-h noiseless fits, largest error {worst:.2e} (need < 1e-9)"))
}

/// Every window of the fixture files small enough to enumerate.
fn fixture_windows() -> Vec<(String, RdSample, Window)> {
    let mut out = Vec::new();
    for (file, outcomes) in [("locrand_small.csv", vec!["outcome", "z"]), ("step.csv", vec!["age", "outcome"])] {
        for outcome in outcomes {
            let s = RdSample::from_csv(fixture(file), &ColumnMap::new("score", outcome), 0.0, b',').unwrap();
            let mut reach: Vec<f64> = s.score().iter().map(|v| v.abs()).collect();
            reach.sort_by(f64::total_cmp);
            reach.dedup();
            for w in reach {
                let win = Window::symmetric(&s, w).unwrap();
                if win.n_plus == 0 || win.n_minus == 0 {
                    continue;
                }
                match choose_exact(win.n_w as u64, win.n_plus as u64) {
                    Some(c) if c <= 100_000 => out.push((format!("{file}:{outcome}:w={w}"), s.clone(), win)),
                    _ => {}
                }
            }
        }
    }
    out
}

fn fisher_equivalence() -> Outcome {
    let windows = fixture_windows();
    let exhaustive = FisherConfig::default();
    let mut worst: f64 = 0.0;
    let mut worst_label = String::new();
    for (i, (label, s, w)) in windows.iter().enumerate() {
        let exact = fisher_pvalue(s, w, &AssignmentModel::FixedMargins, &exhaustive).unwrap();
        if !exact.exact {
            return Err(format!("{label}: expected exhaustive enumeration"));
        }
        let mc_cfg = FisherConfig { max_exhaustive: 0, draws: 9999, seed: i as u64, ..FisherConfig::default() };
        let mc = fisher_pvalue(s, w, &AssignmentModel::FixedMargins, &mc_cfg).unwrap();
        let gap = (mc.p_value - exact.p_value).abs();
        if gap > worst {
            worst = gap;
            worst_label = label.clone();
        }
    }
    let three = RdSample::new(vec![-0.2, -0.1, 0.1], vec![0.0, 1.0, 2.0], 0.0).unwrap();
    let r = fisher_pvalue(
        &three,
        &Window::symmetric(&three, 1.0).unwrap(),
        &AssignmentModel::FixedMargins,
        &exhaustive,
    )
    .unwrap();
    let hand = r.exact && r.draws == 3 && r.extreme == 2 && r.p_value == 2.0 / 3.0;
    check(
        worst <= 0.02 && hand && !windows.is_empty(),
        format!(
            "{} fixture windows, largest |MC - exact| {worst:.4} at {worst_label} (need <= 0.02); 3-unit example p = {} ({}/{})",
            windows.len(),
            r.p_value,
            r.extreme,
            r.draws
        ),
    )
}

fn exact_binomial_p(n: u64, k: u64, prob: &BigRational) -> f64 {
    let q = BigRational::one() - prob;
    let mut coef = BigInt::one();
    let mut pmf = Vec::with_capacity(n as usize + 1);
    for j in 0..=n {
        if j > 0 {
            coef = coef * BigInt::from(n - j + 1) / BigInt::from(j);
        }
        let mut v = BigRational::from_integer(coef.clone());
        for _ in 0..j {
            v *= prob;
        }
        for _ in 0..(n - j) {
            v *= &q;
        }
        pmf.push(v);
    }
    let lower = pmf[..=k as usize].iter().fold(BigRational::zero(), |a, b| a + b);
    let upper = pmf[k as usize..].iter().fold(BigRational::zero(), |a, b| a + b);
    let tail = if lower < upper { lower } else { upper };
    let p = tail * BigRational::from_integer(BigInt::from(2));
    if p > BigRational::one() {
        1.0
    } else {
        p.to_f64().unwrap()
    }
}

fn binomial_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (num, den) in [(1i64, 2i64), (1, 4), (3, 5)] {
        let prob = BigRational::new(BigInt::from(num), BigInt::from(den));
        for n in 1..=60u64 {
            for k in 0..=n {
                let ours = binomial_counts(k, n, num as f64 / den as f64).unwrap().p_value;
                worst = worst.max((ours - exact_binomial_p(n, k, &prob)).abs());
                count += 1;
            }
        }
    }
    let p0 = binomial_counts(0, 10, 0.5).unwrap().p_value;
    check(
        worst <= 1e-12 && (p0 - 0.0019531).abs() <= 1e-7,
        format!("{count} (k, n, prob) cases, largest error {worst:.2e} (need <= 1e-12); k=0 n=10 -> {p0:.7}"),
    )
}

fn bandwidth_sanity() -> Outcome {
    let dgp = presets::curved();
    let grid: Vec<f64> = (1..=50).map(|k| 0.02 * k as f64).collect();
    let oracle = oracle_mse_bandwidth(&dgp, 1000, 1, KernelKind::Triangular, &grid, 500, 7).map_err(|e| e.to_string())?;
    let plug = plugin_mse(&dgp, 1000, 1, KernelKind::Triangular, 500, 7).map_err(|e| e.to_string())?;
    let min_mse = oracle.mse[oracle.best_index];
    let ratio = plug.mse / min_mse;
    // h_CE / h_MSE on data, for several n and p
    let mut ce_ok = true;
    for (n, p) in [(500usize, 1usize), (2000, 1), (2000, 2), (3000, 0)] {
        let s = simulate_sample(&presets::linear(), n, 3).unwrap();
        let sel = select_mse_bandwidth(&s, p, KernelKind::Triangular).unwrap();
        let expected = (n as f64).powf(-(p as f64) / ((3 + p) as f64 * (3 + 2 * p) as f64));
        ce_ok &= (sel.h_ce / sel.h_mse - expected).abs() <= 1e-12 * expected && ce_factor(n, p) == expected;
    }
    check(
        ratio <= 1.25 && ce_ok,
        format!(
            "plug-in MSE {:.3e} (mean h {:.3}) vs oracle min {:.3e} at h {:.2}: ratio {:.3} (need <= 1.25); h_CE/h_MSE formula {}",
            plug.mse,
            plug.mean_bandwidth,
            min_mse,
            oracle.best_h,
            ratio,
            if ce_ok { "exact" } else { "MISMATCH" }
        ),
    )
}

fn window_selector() -> Outcome {
    let dgp = presets::piecewise_balance();
    let candidates: Vec<f64> = (1..=16).map(|k| 0.125 * k as f64).collect();
    let reps = 500;
    let mut hits = 0;
    let mut flagged = 0;
    for r in 0..reps {
        let s = simulate_sample(&dgp, 400, replication_seed(11, r)).unwrap();
        let cfg = FisherConfig { seed: r as u64, ..FisherConfig::default() };
        let sel = select_window(&s, &["z".to_string()], &candidates, 0.15, &cfg).map_err(|e| e.to_string())?;
        if sel.no_balanced_window {
            flagged += 1;
        } else if (0.25..=1.0).contains(&sel.half_width) {
            hits += 1;
        }
    }
    let rate = hits as f64 / reps as f64;
    check(
        rate >= 0.80,
        format!("selected half-width in [0.25, 1.0] in {rate:.3} of {reps} replications (need >= 0.80); {flagged} flagged unbalanced"),
    )
}

fn identities() -> Outcome {
    let mut worst_fuzzy: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    let mut worst_affine: f64 = 0.0;
    let mut worst_pool: f64 = 0.0;
    for seed in 0..20u64 {
        let s = simulate_sample(&presets::curved(), 600, seed).unwrap();
        let x = s.score().to_vec();
        let y = s.outcome().to_vec();
        let d: Vec<f64> = x.iter().map(|&v| f64::from(u8::from(v >= 0.0))).collect();
        for kernel in KernelKind::ALL {
            let cfg = EstimatorConfig::new(1, kernel, 0.3 + 0.03 * seed as f64);
            let sharp = sharp_estimate(&s, &cfg).unwrap();
            let fuzzy = fuzzy_estimate(&s.clone().with_received(d.clone()).unwrap(), &cfg).unwrap();
            worst_fuzzy = worst_fuzzy.max((fuzzy.tau_hat - sharp.tau_hat).abs());

            let shift = 17.25 * (seed as f64 - 9.5);
            let moved = RdSample::new(x.iter().map(|v| v + shift).collect(), y.clone(), shift).unwrap();
            for kind in [EstimandKind::Sharp, EstimandKind::Kink] {
                let a = estimate(&s, kind, &cfg).unwrap().tau_hat;
                let b = estimate(&moved, kind, &cfg).unwrap().tau_hat;
                worst_shift = worst_shift.max((a - b).abs() / (1.0 + a.abs()));
            }

            let (a, b) = (-2.5, 4.0);
            let t = sharp_estimate(&s.with_outcome(y.iter().map(|v| a * v + b).collect()).unwrap(), &cfg).unwrap();
            worst_affine = worst_affine.max((t.tau_hat - a * sharp.tau_hat).abs() / (1.0 + sharp.tau_hat.abs()));
            worst_affine = worst_affine
                .max((t.se_conventional - a.abs() * sharp.se_conventional).abs() / sharp.se_conventional);

            let pooled = normalize_and_pool(&s.clone().with_unit_cutoffs(vec![0.0; x.len()]).unwrap(), EstimandKind::Sharp, &cfg)
                .unwrap();
            worst_pool = worst_pool.max((pooled.pooled.tau_hat - sharp.tau_hat).abs());
            let rbc = rbc_inference(&s, EstimandKind::Sharp, &cfg).unwrap();
            worst_pool = worst_pool.max((rbc.base.tau_hat - sharp.tau_hat).abs());
        }
    }
    check(
        worst_fuzzy <= 1e-12 && worst_shift <= 1e-9 && worst_affine <= 1e-9 && worst_pool <= 1e-12,
        format!(
            "fuzzy(D=T) - sharp {worst_fuzzy:.1e}; translation {worst_shift:.1e}; affine {worst_affine:.1e}; single-cutoff pool - sharp {worst_pool:.1e}"
        ),
    )
}

fn validation_sizes() -> Outcome {
    let reps = 1000;
    let mut dgp = presets::linear();
    dgp.covariates = vec![CovariateSpec {
        name: "z".into(),
        mean: MeanFunction::Constant { value: 0.0 },
        noise_sd: 1.0,
    }];
    let cfg = ContinuityConfig::default();
    let mut balance = 0;
    let mut density = 0;
    let (mut placebo, mut placebo_total) = (0, 0);
    let mut binomial = 0;
    for r in 0..reps {
        let s = simulate_sample(&dgp, 1000, replication_seed(21, r)).unwrap();
        balance += usize::from(covariate_balance_continuity(&s, "z", &cfg).unwrap().p_value < 0.05);
        let s = simulate_sample(&dgp, 10_000, replication_seed(22, r)).unwrap();
        density += usize::from(density_test(&s, 0.5, 20).unwrap().p_value < 0.05);
        let s = simulate_sample(&dgp, 1000, replication_seed(23, r)).unwrap();
        for rec in placebo_cutoffs(&s, &default_placebo_grid(&s, 0.0), &cfg).unwrap() {
            placebo_total += 1;
            placebo += usize::from(rec.p_value_rbc < 0.05);
        }
        let s = simulate_sample(&dgp, 1000, replication_seed(24, r)).unwrap();
        let w = Window::symmetric(&s, 0.1).unwrap();
        binomial += usize::from(binomial_test(&s, &w, 0.5).unwrap().p_value < 0.05);
    }
    let rate = |k: usize, n: usize| k as f64 / n as f64;
    let (b, d, p, m) = (rate(balance, reps), rate(density, reps), rate(placebo, placebo_total), rate(binomial, reps));
    let within = |v: f64| (0.02..=0.09).contains(&v);
    check(
        within(b) && within(d) && within(p) && m <= 0.05,
        format!("size at 5%: balance {b:.3}, density {d:.3}, placebo {p:.4} (need [0.02, 0.09]); binomial {m:.3} (need <= 0.05)"),
    )
}

fn run_cli(args: &[&str], threads: &str) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_rdtk"))
        .arg("--threads")
        .arg(threads)
        .args(args)
        .output()
        .expect("rdtk runs");
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn determinism() -> Outcome {
    let step = fixture("step.csv").to_string_lossy().into_owned();
    let small = fixture("locrand_small.csv").to_string_lossy().into_owned();
    let commands: Vec<Vec<&str>> = vec![
        vec!["estimate", "--input", &step, "--score", "score", "--outcome", "age", "--seed", "3"],
        vec!["locrand", "--input", &step, "--score", "score", "--outcome", "age", "--covariates", "age", "--draws", "999", "--seed", "4"],
        vec!["locrand", "--input", &small, "--score", "score", "--outcome", "outcome", "--covariates", "z", "--seed", "4"],
        vec!["validate", "--input", &step, "--score", "score", "--outcome", "outcome", "--covariates", "age", "--window", "0.2", "--draws", "999", "--seed", "5"],
        vec!["plot", "--input", &step, "--score", "score", "--outcome", "age", "--binning", "quantile"],
        vec!["power", "--input", &step, "--score", "score", "--outcome", "age", "--n0", "400", "--target-mde", "0.5", "--seed", "6"],
        vec!["simulate", "--dgp", "curved", "--n", "500", "--replications", "500", "--seed", "7", "--method", "both"],
    ];
    let mut mismatches = Vec::new();
    for cmd in &commands {
        let a = run_cli(cmd, "1");
        let b = run_cli(cmd, "1");
        let c = run_cli(cmd, "4");
        if a != b || a != c {
            mismatches.push(cmd[0]);
        }
    }
    check(
        mismatches.is_empty(),
        format!("{} seeded commands x (2 runs at 1 thread, 1 run at 4 threads): mismatches {mismatches:?}", commands.len()),
    )
}

fn mde_arithmetic() -> Outcome {
    let m = mde(1.0, 0.05, 0.8).map_err(|e| e.to_string())?;
    let p = power(m, 1.0, 0.05);
    check(
        (m - 2.801585).abs() <= 1e-5 && (p - 0.8).abs() <= 1e-9,
        format!("mde(1, 0.05, 0.80) = {m:.7}; power(mde) = {p:.12}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("coverage repair", coverage_repair),
        ("exactness", exactness),
        ("Fisher oracle equivalence", fisher_equivalence),
        ("binomial oracle", binomial_oracle),
        ("bandwidth sanity", bandwidth_sanity),
        ("window selector", window_selector),
        ("identities", identities),
        ("validation size", validation_sizes),
        ("determinism", determinism),
        ("MDE arithmetic", mde_arithmetic),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
