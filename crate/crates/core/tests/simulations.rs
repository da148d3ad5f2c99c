//! Monte Carlo checks of estimator behaviour on designs with known truth.

use rand::Rng;
use rand_distr::StandardNormal;

use rd_toolkit::bandwidth::{oracle_mse_bandwidth, select_mse_bandwidth};
use rd_toolkit::continuity::{
    fuzzy_estimate, kink_estimate, normalize_and_pool, rbc_inference, sharp_estimate, EstimandKind, EstimatorConfig,
};
use rd_toolkit::locrand::{
    default_tau_grid, diff_in_means, fisher_ci, fuzzy_locrand, neyman_ci, AssignmentModel, FisherConfig, Framework,
    Window,
};
use rd_toolkit::lpoly::KernelKind;
use rd_toolkit::sample::RdSample;
use rd_toolkit::sim::{
    presets, replication_seed, required_n, simulate_coverage, simulate_sample, BandwidthRule, Compliance, CoverageConfig,
    DgpSpec, IntervalMethod, MeanFunction, NoiseSd, ScoreDist, SeScaling,
};
use rd_toolkit::stats::substream_rng;
use rd_toolkit::validation::{
    bandwidth_sensitivity, covariate_balance_continuity, density_test, donut_hole, placebo_cutoffs, ContinuityConfig,
};
use rd_toolkit::RdError;

fn polynomial_dgp(mu0: Vec<f64>, mu1: Vec<f64>, sd: f64) -> DgpSpec {
    DgpSpec {
        mu0: MeanFunction::Polynomial { coefficients: mu0 },
        mu1: MeanFunction::Polynomial { coefficients: mu1 },
        noise_sd: NoiseSd::Constant { sd },
        score_dist: ScoreDist::Uniform { low: -1.0, high: 1.0 },
        compliance: Compliance::Perfect,
        cutoff: 0.0,
        covariates: Vec::new(),
    }
}

fn rate(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

#[test]
fn sharp_estimate_lands_within_three_se() {
    // different slopes, no curvature: the conventional se is the only thing tested
    let dgp = polynomial_dgp(vec![0.0, 0.8], vec![0.5, 1.2], 0.5);
    let reps = 2000;
    let mut hits = 0;
    for r in 0..reps {
        let s = simulate_sample(&dgp, 5000, replication_seed(3, r)).unwrap();
        let h = select_mse_bandwidth(&s, 1, KernelKind::Triangular).unwrap().h_mse;
        let e = sharp_estimate(&s, &EstimatorConfig::new(1, KernelKind::Triangular, h)).unwrap();
        if (e.tau_hat - 0.5).abs() <= 3.0 * e.se_conventional {
            hits += 1;
        }
    }
    assert!(rate(hits, reps) >= 0.99, "{}", rate(hits, reps));
}

#[test]
fn null_first_stage_triggers_weak_instrument_error() {
    let mut dgp = presets::linear();
    dgp.compliance = Compliance::TwoSided { q_below: 0.5, q_above: 0.5 };
    let cfg = EstimatorConfig::new(1, KernelKind::Triangular, 0.5);
    let reps = 300;
    let mut triggered = 0;
    let mut predicted = 0.0;
    for r in 0..reps {
        let s = simulate_sample(&dgp, 4000, replication_seed(5, r)).unwrap();
        let fs = sharp_estimate(&s.with_outcome(s.received().unwrap().to_vec()).unwrap(), &cfg).unwrap();
        let first_stage = fs.tau_hat;
        // chance that a centred normal with this se lands inside +/- 0.05
        predicted += 2.0 * rd_toolkit::stats::norm_cdf(0.05 / fs.se_conventional) - 1.0;
        match fuzzy_estimate(&s, &cfg) {
            Err(RdError::WeakFirstStage { .. }) => {
                triggered += 1;
                assert!(first_stage.abs() < 0.05);
            }
            Ok(e) => {
                assert!(first_stage.abs() >= 0.05);
                assert_eq!(e.first_stage, Some(first_stage));
            }
            Err(e) => panic!("unexpected {e}"),
        }
    }
    let predicted = predicted / reps as f64;
    let observed = rate(triggered, reps);
    assert!((observed - predicted).abs() < 0.08, "observed {observed} predicted {predicted}");
}

#[test]
fn kink_estimate_recovers_slope_change() {
    let dgp = polynomial_dgp(vec![0.2, -0.5], vec![0.2, 0.5], 0.3);
    let reps = 400;
    let mut hits = 0;
    for r in 0..reps {
        let s = simulate_sample(&dgp, 4000, replication_seed(13, r)).unwrap();
        let e = kink_estimate(&s, &EstimatorConfig::new(1, KernelKind::Triangular, 0.6)).unwrap();
        if (e.tau_hat - 1.0).abs() <= 3.0 * e.se_conventional {
            hits += 1;
        }
    }
    assert!(rate(hits, reps) >= 0.98, "{}", rate(hits, reps));
}

#[test]
fn pooled_effect_lies_between_cutoff_effects() {
    let mut rng = substream_rng(17, 0);
    let n = 4000;
    let (mut x, mut y, mut cut) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let (c, effect) = if i % 2 == 0 { (0.0, 1.0) } else { (10.0, 3.0) };
        let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let e: f64 = rng.sample(StandardNormal);
        x.push(c + u);
        y.push(0.5 * u + if u >= 0.0 { effect } else { 0.0 } + 0.3 * e);
        cut.push(c);
    }
    let s = RdSample::new(x, y, 0.0).unwrap().with_unit_cutoffs(cut).unwrap();
    let pooled = normalize_and_pool(&s, EstimandKind::Sharp, &EstimatorConfig::new(1, KernelKind::Triangular, 0.5)).unwrap();
    assert!(pooled.pooled.tau_hat > 1.0 && pooled.pooled.tau_hat < 3.0, "{}", pooled.pooled.tau_hat);
    assert!((pooled.pooled.tau_hat - 2.0).abs() < 0.2);
    let per: Vec<f64> = pooled.per_cutoff.iter().map(|c| c.estimate.as_ref().unwrap().tau_hat).collect();
    assert!((per[0] - 1.0).abs() < 0.15 && (per[1] - 3.0).abs() < 0.15, "{per:?}");
}

#[test]
fn curved_mse_curve_has_interior_minimum() {
    let grid: Vec<f64> = (1..=20).map(|k| 0.05 * k as f64).collect();
    let o = oracle_mse_bandwidth(&presets::curved(), 1000, 1, KernelKind::Triangular, &grid, 200, 21).unwrap();
    assert!(o.best_index > 0 && o.best_index + 1 < grid.len(), "{}", o.best_index);
    assert!(o.mse[0] > o.mse[o.best_index] && o.mse[grid.len() - 1] > o.mse[o.best_index]);
}

#[test]
fn bernoulli_half_matches_fixed_margins_on_balanced_windows() {
    for r in 0..200u64 {
        let mut rng = substream_rng(23, r);
        let half = rng.random_range(2..8);
        let x: Vec<f64> = (0..2 * half)
            .map(|i| if i < half { -rng.random::<f64>() - 0.01 } else { rng.random::<f64>() })
            .collect();
        let y: Vec<f64> = (0..2 * half).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let s = RdSample::new(x, y, 0.0).unwrap();
        let w = Window::symmetric(&s, 2.0).unwrap();
        for f in [Framework::Neyman, Framework::Superpop] {
            let fixed = diff_in_means(&s, &w, &AssignmentModel::FixedMargins, f).unwrap();
            let coin = diff_in_means(&s, &w, &AssignmentModel::Bernoulli { prob: 0.5 }, f).unwrap();
            assert!((fixed.tau_hat - coin.tau_hat).abs() < 1e-12);
        }
    }
}

#[test]
fn fuzzy_locrand_recovers_complier_effect() {
    let dgp = DgpSpec {
        mu0: MeanFunction::Constant { value: 0.0 },
        mu1: MeanFunction::Constant { value: 1.0 },
        noise_sd: NoiseSd::Constant { sd: 1.0 },
        score_dist: ScoreDist::Uniform { low: -1.0, high: 1.0 },
        compliance: Compliance::OneSided { q: 0.3 },
        cutoff: 0.0,
        covariates: Vec::new(),
    };
    let reps = 500;
    let est: Vec<f64> = (0..reps)
        .map(|r| {
            let s = simulate_sample(&dgp, 2000, replication_seed(29, r)).unwrap();
            let w = Window::symmetric(&s, 0.25).unwrap();
            fuzzy_locrand(&s, &w, &AssignmentModel::FixedMargins, Framework::Neyman).unwrap().tau_hat
        })
        .collect();
    let mean = est.iter().sum::<f64>() / reps as f64;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * sd / (reps as f64).sqrt(), "mean {mean} sd {sd}");
}

#[test]
fn one_sided_noncompliance_rate() {
    let mut dgp = presets::linear();
    dgp.compliance = Compliance::OneSided { q: 0.3 };
    let s = simulate_sample(&dgp, 10_000, 31).unwrap();
    let d = s.received().unwrap();
    let above: Vec<usize> = (0..s.len()).filter(|&i| s.score()[i] >= 0.0).collect();
    let declined = above.iter().filter(|&&i| d[i] == 0.0).count();
    assert!((rate(declined, above.len()) - 0.3).abs() < 0.02);
    assert!((0..s.len()).filter(|&i| s.score()[i] < 0.0).all(|i| d[i] == 0.0));
}

/// Window of `n_minus` control and `n_plus` treated units with outcomes
/// `y0 + tau` for the treated.
fn constant_effect_window(seed: u64, r: u64, n_minus: usize, n_plus: usize, tau: f64) -> RdSample {
    let mut rng = substream_rng(seed, r);
    let n = n_minus + n_plus;
    let x: Vec<f64> = (0..n).map(|i| if i < n_minus { -0.5 } else { 0.5 }).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            e + if i >= n_minus { tau } else { 0.0 }
        })
        .collect();
    RdSample::new(x, y, 0.0).unwrap()
}

#[test]
fn fisher_interval_covers_constant_effect() {
    let reps = 400;
    let config = FisherConfig::default();
    let mut hits = 0;
    for r in 0..reps {
        let s = constant_effect_window(37, r, 6, 6, 0.7);
        let w = Window::symmetric(&s, 1.0).unwrap();
        let grid = default_tau_grid(&s, &w).unwrap();
        let ci = fisher_ci(&s, &w, &AssignmentModel::FixedMargins, &grid, 0.05, &config).unwrap();
        if ci.interval.is_some_and(|i| i.lower <= 0.7 && 0.7 <= i.upper) {
            hits += 1;
        }
    }
    let cov = rate(hits, reps as usize);
    assert!((0.92..=0.99).contains(&cov), "{cov}");
}

#[test]
fn neyman_interval_is_conservative_under_heterogeneity() {
    // finite population of 80 units with heterogeneous effects
    let mut rng = substream_rng(41, 0);
    let n = 80;
    let y0: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let y1: Vec<f64> = y0.iter().map(|v| v + 1.0 + 0.8 * rng.sample::<f64, _>(StandardNormal)).collect();
    let ate = (0..n).map(|i| y1[i] - y0[i]).sum::<f64>() / n as f64;
    let reps = 2000;
    let mut hits = 0;
    for r in 0..reps {
        let mut rng = substream_rng(43, r);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let treated: Vec<bool> = {
            let mut t = vec![false; n];
            for &i in &idx[..n / 2] {
                t[i] = true;
            }
            t
        };
        let x: Vec<f64> = treated.iter().map(|&t| if t { 0.3 } else { -0.3 }).collect();
        let y: Vec<f64> = (0..n).map(|i| if treated[i] { y1[i] } else { y0[i] }).collect();
        let s = RdSample::new(x, y, 0.0).unwrap();
        let res = neyman_ci(&s, &Window::symmetric(&s, 1.0).unwrap(), Framework::Neyman, 0.05).unwrap();
        if res.ci.contains(ate) {
            hits += 1;
        }
    }
    assert!(rate(hits, reps as usize) >= 0.93, "{}", rate(hits, reps as usize));
}

#[test]
fn neyman_hand_example() {
    let s = RdSample::new(vec![-0.2, -0.1, 0.1, 0.2], vec![1.0, 3.0, 3.0, 5.0], 0.0).unwrap();
    let r = neyman_ci(&s, &Window::symmetric(&s, 1.0).unwrap(), Framework::Neyman, 0.05).unwrap();
    assert_eq!(r.estimate.tau_hat, 2.0);
    assert!((r.se - 2f64.sqrt()).abs() < 1e-12);
    assert!((r.ci.lower - (2.0 - 1.959963984540054 * 2f64.sqrt())).abs() < 1e-9);
}

#[test]
fn balance_test_size_and_power() {
    let mut dgp = presets::linear();
    dgp.covariates.push(rd_toolkit::sim::CovariateSpec {
        name: "noise".into(),
        mean: MeanFunction::Constant { value: 0.0 },
        noise_sd: 1.0,
    });
    let cfg = ContinuityConfig::default();
    let reps = 2000;
    let mut rejections = 0;
    for r in 0..reps {
        let s = simulate_sample(&dgp, 1000, replication_seed(47, r)).unwrap();
        if covariate_balance_continuity(&s, "noise", &cfg).unwrap().p_value < 0.05 {
            rejections += 1;
        }
    }
    let size = rate(rejections, reps);
    assert!((0.03..=0.07).contains(&size), "size {size}");

    let reps = 200;
    let mut rejections = 0;
    for r in 0..reps {
        let s = simulate_sample(&presets::linear(), 2000, replication_seed(53, r)).unwrap();
        let copy = s.outcome().to_vec();
        let s = s.with_covariate("copy", copy).unwrap();
        if covariate_balance_continuity(&s, "copy", &cfg).unwrap().p_value < 0.05 {
            rejections += 1;
        }
    }
    assert!(rate(rejections, reps) >= 0.9);
}

#[test]
fn density_test_detects_a_two_to_one_jump() {
    let reps = 200;
    let mut rejections = 0;
    for r in 0..reps {
        let mut rng = substream_rng(59, r as u64);
        let x: Vec<f64> = (0..10_000)
            .map(|_| {
                let u: f64 = rng.random();
                if rng.random::<f64>() < 1.0 / 3.0 {
                    -u
                } else {
                    u
                }
            })
            .collect();
        let s = RdSample::new(x, vec![0.0; 10_000], 0.0).unwrap();
        if density_test(&s, 0.5, 20).unwrap().p_value < 0.05 {
            rejections += 1;
        }
    }
    assert!(rate(rejections, reps) >= 0.9);
}

#[test]
fn true_cutoff_rejects_while_placebos_do_not() {
    let reps = 200;
    let cfg = ContinuityConfig::default();
    let (mut true_rej, mut placebo_rej, mut placebo_total) = (0, 0, 0);
    for r in 0..reps {
        let s = simulate_sample(&presets::linear(), 1000, replication_seed(61, r)).unwrap();
        let est = covariate_balance_continuity(&s.clone().with_covariate("y", s.outcome().to_vec()).unwrap(), "y", &cfg).unwrap();
        if est.p_value < 0.05 {
            true_rej += 1;
        }
        for rec in placebo_cutoffs(&s, &[-0.5, 0.5], &cfg).unwrap() {
            placebo_total += 1;
            if rec.p_value_rbc < 0.05 {
                placebo_rej += 1;
            }
        }
    }
    assert!(rate(true_rej, reps) >= 0.9);
    let size = rate(placebo_rej, placebo_total);
    assert!((0.02..=0.09).contains(&size), "{size}");
}

#[test]
fn donut_reduces_bias_from_sorting_near_cutoff() {
    let reps = 200;
    let cfg = EstimatorConfig::new(1, KernelKind::Triangular, 0.4);
    let (mut bias0, mut bias1) = (0.0, 0.0);
    for r in 0..reps {
        let s = simulate_sample(&presets::linear(), 2000, replication_seed(67, r)).unwrap();
        // units just above the cutoff sorted in with higher outcomes
        let y: Vec<f64> = s
            .score()
            .iter()
            .zip(s.outcome())
            .map(|(&x, &y)| if (0.0..0.05).contains(&x) { y + 1.0 } else { y })
            .collect();
        let s = s.with_outcome(y).unwrap();
        let d = donut_hole(&s, &[0.0, 0.1], EstimandKind::Sharp, &cfg).unwrap();
        bias0 += d[0].tau_hat - 1.0;
        bias1 += d[1].tau_hat - 1.0;
    }
    let (bias0, bias1) = (bias0 / reps as f64, bias1 / reps as f64);
    assert!(bias1.abs() < bias0.abs(), "{bias0} {bias1}");
}

#[test]
fn linear_design_is_stable_across_bandwidths() {
    let s = simulate_sample(&presets::linear(), 2000, 71).unwrap();
    let h = select_mse_bandwidth(&s, 1, KernelKind::Triangular).unwrap().h_mse;
    let hs: Vec<f64> = [0.5, 0.75, 1.0, 1.25, 1.5].iter().map(|f| f * h).collect();
    let recs = bandwidth_sensitivity(&s, &hs, h, EstimandKind::Sharp, &EstimatorConfig::new(1, KernelKind::Triangular, h)).unwrap();
    let pooled = (recs.iter().map(|r| r.se_conventional.powi(2)).sum::<f64>() / recs.len() as f64).sqrt();
    for a in &recs {
        for b in &recs {
            assert!((a.tau_hat - b.tau_hat).abs() < 2.0 * pooled);
        }
    }
}

#[test]
fn required_n_delivers_target_power() {
    let target = 0.3;
    let dgp = polynomial_dgp(vec![0.0, 1.0], vec![target, 1.0], 1.0);
    let h = 0.5;
    let cfg = EstimatorConfig::new(1, KernelKind::Triangular, h);
    let n0 = 500;
    let pilot = simulate_sample(&dgp, n0, 73).unwrap();
    let pilot_se = rbc_inference(&pilot, EstimandKind::Sharp, &cfg).unwrap().se_robust;
    let n = required_n(pilot_se, n0 as u64, target, 0.05, 0.8, SeScaling::FixedBandwidth).unwrap();
    let reps = 2000;
    let mut rejections = 0;
    for r in 0..reps {
        let s = simulate_sample(&dgp, n as usize, replication_seed(79, r)).unwrap();
        if rbc_inference(&s, EstimandKind::Sharp, &cfg).unwrap().p_value_robust < 0.05 {
            rejections += 1;
        }
    }
    let power = rate(rejections, reps);
    assert!((power - 0.8).abs() <= 0.05, "n {n} power {power}");
}

#[test]
fn linear_design_rbc_coverage_is_nominal() {
    let cfg = CoverageConfig::default();
    let s = simulate_coverage(&presets::linear(), &cfg, 1000, 2000, 83).unwrap();
    assert!((0.93..=0.97).contains(&s.coverage), "{}", s.coverage);
}

#[test]
fn noiseless_step_is_covered_by_every_configuration() {
    for method in [IntervalMethod::Conventional, IntervalMethod::Rbc] {
        for bandwidth in [BandwidthRule::Mse, BandwidthRule::Ce, BandwidthRule::Fixed { h: 0.3 }] {
            for kernel in KernelKind::ALL {
                let cfg = CoverageConfig { method, bandwidth, kernel, ..CoverageConfig::default() };
                let s = simulate_coverage(&presets::step(), &cfg, 200, 500, 89).unwrap();
                assert_eq!(s.coverage, 1.0, "{cfg:?}");
                assert!(s.mean_bias.abs() < 1e-9, "{cfg:?}");
            }
        }
    }
}
