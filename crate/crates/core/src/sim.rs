//! Simulation data-generating processes, power and sample-size calculations,
//! and the coverage simulation engine.
//!
//! Replication loops run in parallel; replication `r` draws its sample from
//! substream `r` of the master seed and results are aggregated in
//! replication order, so output does not depend on the number of workers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::select_bandwidth_centered;
use crate::bandwidth::SelectorOptions;
use crate::continuity::{estimate_centered, rbc_centered, EstimandKind, EstimatorConfig, Interval};
use crate::error::{RdError, Result};
use crate::lpoly::KernelKind;
use crate::sample::RdSample;
use crate::stats::{compensated_sum, norm_cdf, norm_quantile, substream_rng};

/// Conditional mean as a function of the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeanFunction {
    Constant { value: f64 },
    /// `sum_j coefficients[j] * (x - cutoff)^j`
    Polynomial { coefficients: Vec<f64> },
    /// `slope * sign(x - cutoff) * max(0, |x - cutoff| - half_width)`: flat
    /// inside the band, diverging across the cutoff outside it.
    DeadZone { half_width: f64, slope: f64 },
}

impl MeanFunction {
    pub fn eval(&self, x: f64, cutoff: f64) -> f64 {
        let u = x - cutoff;
        match self {
            MeanFunction::Constant { value } => *value,
            MeanFunction::Polynomial { coefficients } => coefficients.iter().rev().fold(0.0, |acc, c| acc * u + c),
            MeanFunction::DeadZone { half_width, slope } => slope * u.signum() * (u.abs() - half_width).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NoiseSd {
    Constant { sd: f64 },
    /// `intercept + slope * |x - cutoff|`
    Linear { intercept: f64, slope: f64 },
}

impl NoiseSd {
    pub fn eval(&self, x: f64, cutoff: f64) -> f64 {
        match self {
            NoiseSd::Constant { sd } => *sd,
            NoiseSd::Linear { intercept, slope } => intercept + slope * (x - cutoff).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScoreDist {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
    Discrete { support: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Compliance {
    Perfect,
    /// Units above the cutoff decline treatment with probability `q`;
    /// units below never receive it.
    OneSided { q: f64 },
    /// Below the cutoff units take treatment with probability `q_below`;
    /// above it they decline with probability `q_above`.
    TwoSided { q_below: f64, q_above: f64 },
}

/// Pre-determined covariate: unaffected by treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub mean: MeanFunction,
    pub noise_sd: f64,
}

/// Data-generating process. Potential outcomes are
/// `Y(t) = mu_t(X) + noise`; the observed outcome uses received treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub mu0: MeanFunction,
    pub mu1: MeanFunction,
    pub noise_sd: NoiseSd,
    pub score_dist: ScoreDist,
    pub compliance: Compliance,
    pub cutoff: f64,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
}

impl DgpSpec {
    /// `mu1(c) - mu0(c)`.
    pub fn tau_true(&self) -> f64 {
        self.mu1.eval(self.cutoff, self.cutoff) - self.mu0.eval(self.cutoff, self.cutoff)
    }

    /// Slope jump `mu1'(c) - mu0'(c)` for polynomial means.
    pub fn kink_true(&self) -> Option<f64> {
        let slope = |m: &MeanFunction| match m {
            MeanFunction::Constant { .. } => Some(0.0),
            MeanFunction::Polynomial { coefficients } => Some(coefficients.get(1).copied().unwrap_or(0.0)),
            MeanFunction::DeadZone { .. } => None,
        };
        Some(slope(&self.mu1)? - slope(&self.mu0)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RdError::BadSpec(m.to_string()));
        match &self.score_dist {
            ScoreDist::Uniform { low, high } if !(low < high) => return bad("uniform needs low < high"),
            ScoreDist::Normal { sd, .. } if !(*sd > 0.0) => return bad("normal score sd must be positive"),
            ScoreDist::Discrete { support, probs } => {
                if support.is_empty() || support.len() != probs.len() {
                    return bad("discrete support and probs must be non-empty and equally long");
                }
                let total: f64 = probs.iter().sum();
                if probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return bad("discrete probs must be non-negative and sum to 1");
                }
            }
            _ => {}
        }
        let prob_ok = |q: f64| (0.0..=1.0).contains(&q);
        match self.compliance {
            Compliance::OneSided { q } if !prob_ok(q) => return bad("compliance probability outside [0, 1]"),
            Compliance::TwoSided { q_below, q_above } if !prob_ok(q_below) || !prob_ok(q_above) => {
                return bad("compliance probability outside [0, 1]")
            }
            _ => {}
        }
        if let NoiseSd::Constant { sd } = self.noise_sd {
            if !(sd >= 0.0) {
                return bad("noise sd must be non-negative");
            }
        }
        if !self.cutoff.is_finite() {
            return bad("cutoff must be finite");
        }
        Ok(())
    }
}

/// Fixed benchmark designs used by tests, the acceptance suite and the CLI.
pub mod presets {
    use super::*;

    /// Side-wise quintic means with strong curvature near the cutoff and
    /// uniform scores on `[-1, 1]`; true jump 0.04.
    ///
    /// Level, slope and curvature at the cutoff follow the Lee-election
    /// quintics. Away from the cutoff each side's second derivative fades as
    /// `m''(0) * (1 - |x| / 0.8)^3`, which keeps the MSE-vs-bandwidth curve
    /// single-troughed over the score range.
    pub fn curved() -> DgpSpec {
        DgpSpec {
            mu0: MeanFunction::Polynomial {
                coefficients: vec![0.48, 1.27, 7.18, 8.975, 5.609375, 1.40234375],
            },
            mu1: MeanFunction::Polynomial {
                coefficients: vec![0.52, 0.84, -3.0, 3.75, -2.34375, 0.5859375],
            },
            noise_sd: NoiseSd::Constant { sd: 0.1295 },
            score_dist: ScoreDist::Uniform { low: -1.0, high: 1.0 },
            compliance: Compliance::Perfect,
            cutoff: 0.0,
            covariates: Vec::new(),
        }
    }

    /// Common slope on both sides, jump 1.
    pub fn linear() -> DgpSpec {
        DgpSpec {
            mu0: MeanFunction::Polynomial { coefficients: vec![0.0, 1.0] },
            mu1: MeanFunction::Polynomial { coefficients: vec![1.0, 1.0] },
            noise_sd: NoiseSd::Constant { sd: 0.5 },
            score_dist: ScoreDist::Uniform { low: -1.0, high: 1.0 },
            compliance: Compliance::Perfect,
            cutoff: 0.0,
            covariates: Vec::new(),
        }
    }

    /// Noiseless unit step.
    pub fn step() -> DgpSpec {
        DgpSpec {
            mu0: MeanFunction::Constant { value: 0.0 },
            mu1: MeanFunction::Constant { value: 1.0 },
            noise_sd: NoiseSd::Constant { sd: 0.0 },
            score_dist: ScoreDist::Uniform { low: -1.0, high: 1.0 },
            compliance: Compliance::Perfect,
            cutoff: 0.0,
            covariates: Vec::new(),
        }
    }

    /// Covariate balanced within half-width 0.5 of the cutoff and strongly
    /// imbalanced outside; scores uniform on `[-2, 2]`.
    pub fn piecewise_balance() -> DgpSpec {
        DgpSpec {
            mu0: MeanFunction::Constant { value: 0.0 },
            mu1: MeanFunction::Constant { value: 0.0 },
            noise_sd: NoiseSd::Constant { sd: 1.0 },
            score_dist: ScoreDist::Uniform { low: -2.0, high: 2.0 },
            compliance: Compliance::Perfect,
            cutoff: 0.0,
            covariates: vec![CovariateSpec {
                name: "z".into(),
                mean: MeanFunction::DeadZone { half_width: 0.5, slope: 4.0 },
                noise_sd: 1.0,
            }],
        }
    }

    pub fn by_name(name: &str) -> Option<DgpSpec> {
        match name {
            "curved" => Some(curved()),
            "linear" => Some(linear()),
            "step" => Some(step()),
            "piecewise_balance" => Some(piecewise_balance()),
            _ => None,
        }
    }

    pub const NAMES: [&str; 4] = ["curved", "linear", "step", "piecewise_balance"];
}

fn draw_score<R: Rng>(dist: &ScoreDist, rng: &mut R) -> f64 {
    match dist {
        ScoreDist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        ScoreDist::Normal { mean, sd } => {
            let z: f64 = StandardNormal.sample(rng);
            mean + sd * z
        }
        ScoreDist::Discrete { support, probs } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (v, p) in support.iter().zip(probs) {
                acc += p;
                if u < acc {
                    return *v;
                }
            }
            *support.last().expect("validated non-empty")
        }
    }
}

/// Draws `n` units. Deterministic given `seed`.
pub fn simulate_sample(dgp: &DgpSpec, n: usize, seed: u64) -> Result<RdSample> {
    dgp.validate()?;
    if n == 0 {
        return Err(RdError::BadSpec("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = dgp.cutoff;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut covs: Vec<Vec<f64>> = vec![Vec::with_capacity(n); dgp.covariates.len()];
    for _ in 0..n {
        let xi = draw_score(&dgp.score_dist, &mut rng);
        let assigned = xi >= c;
        let u: f64 = rng.random();
        let received = match dgp.compliance {
            Compliance::Perfect => assigned,
            Compliance::OneSided { q } => assigned && u >= q,
            Compliance::TwoSided { q_below, q_above } => {
                if assigned {
                    u >= q_above
                } else {
                    u < q_below
                }
            }
        };
        let e: f64 = StandardNormal.sample(&mut rng);
        let mu = if received { &dgp.mu1 } else { &dgp.mu0 };
        x.push(xi);
        y.push(mu.eval(xi, c) + dgp.noise_sd.eval(xi, c) * e);
        d.push(f64::from(u8::from(received)));
        for (k, cov) in dgp.covariates.iter().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            covs[k].push(cov.mean.eval(xi, c) + cov.noise_sd * e);
        }
    }
    let mut sample = RdSample::new(x, y, c)?.with_received(d)?;
    for (cov, values) in dgp.covariates.iter().zip(covs) {
        sample = sample.with_covariate(cov.name.clone(), values)?;
    }
    Ok(sample)
}

/// Seed for replication `r` of a simulation with master `seed`.
pub fn replication_seed(seed: u64, r: usize) -> u64 {
    substream_rng(seed, r as u64).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    pub se_used: f64,
    pub alpha: f64,
    pub target_power: f64,
    pub power_curve: Vec<(f64, f64)>,
    pub mde: f64,
    pub n_required: Option<u64>,
}

/// Power of the two-sided level-`alpha` normal test against effect `tau`.
pub fn power(tau: f64, se: f64, alpha: f64) -> f64 {
    let z = norm_quantile(1.0 - alpha / 2.0);
    let shift = tau.abs() / se;
    1.0 - norm_cdf(z - shift) + norm_cdf(-z - shift)
}

/// Power over `taus`, with the MDE at 80% power.
pub fn power_curve(se: f64, alpha: f64, taus: &[f64]) -> Result<PowerResult> {
    power_analysis(se, alpha, taus, 0.8)
}

pub fn power_analysis(se: f64, alpha: f64, taus: &[f64], target_power: f64) -> Result<PowerResult> {
    check_power_args(se, alpha, target_power)?;
    Ok(PowerResult {
        se_used: se,
        alpha,
        target_power,
        power_curve: taus.iter().map(|&t| (t, power(t, se, alpha))).collect(),
        mde: mde(se, alpha, target_power)?,
        n_required: None,
    })
}

fn check_power_args(se: f64, alpha: f64, target_power: f64) -> Result<()> {
    if !(se > 0.0 && se.is_finite()) {
        return Err(RdError::InvalidArgument(format!("se {se} must be positive")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RdError::InvalidArgument(format!("alpha {alpha} not in (0, 1)")));
    }
    if !(target_power > 0.0 && target_power < 1.0) {
        return Err(RdError::InvalidArgument(format!("power {target_power} not in (0, 1)")));
    }
    Ok(())
}

/// Textbook MDE `(z_{1-alpha/2} + z_{power}) * se`, which ignores the far
/// rejection tail and so overstates power by `Phi(-z_{1-alpha/2} - mde/se)`.
pub fn mde_closed_form(se: f64, alpha: f64, target_power: f64) -> Result<f64> {
    check_power_args(se, alpha, target_power)?;
    Ok((norm_quantile(1.0 - alpha / 2.0) + norm_quantile(target_power)) * se)
}

/// Minimum detectable effect: the `tau > 0` with `power(tau, se, alpha)`
/// equal to `target_power`, counting both rejection tails. Within a few
/// parts per million of [`mde_closed_form`] at conventional settings.
pub fn mde(se: f64, alpha: f64, target_power: f64) -> Result<f64> {
    check_power_args(se, alpha, target_power)?;
    Ok(standardized_mde(alpha, target_power)? * se)
}

/// MDE in standard-error units.
fn standardized_mde(alpha: f64, target_power: f64) -> Result<f64> {
    if target_power <= alpha {
        return Err(RdError::InvalidArgument(format!(
            "power {target_power} must exceed alpha {alpha}"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, norm_quantile(1.0 - alpha / 2.0) + norm_quantile(target_power).max(0.0) + 1.0);
    // power is strictly increasing in tau > 0
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if power(mid, 1.0, alpha) < target_power {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// How the standard error shrinks with sample size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SeScaling {
    /// `se(n) = se(n0) * sqrt(n0 / n)`: bandwidth held fixed.
    #[default]
    FixedBandwidth,
    /// `se(n) = se(n0) * (n0 / n)^((p+1)/(2p+3))`: MSE-optimal bandwidth
    /// shrinking with `n`.
    MseBandwidth { p: usize },
}

impl SeScaling {
    fn exponent(self) -> f64 {
        match self {
            SeScaling::FixedBandwidth => 0.5,
            SeScaling::MseBandwidth { p } => (p + 1) as f64 / (2 * p + 3) as f64,
        }
    }
}

/// Smallest `n` whose MDE is at most `target_mde`, extrapolating the pilot
/// standard error `pilot_se` observed at `n0`.
pub fn required_n(
    pilot_se: f64,
    n0: u64,
    target_mde: f64,
    alpha: f64,
    target_power: f64,
    scaling: SeScaling,
) -> Result<u64> {
    check_power_args(pilot_se, alpha, target_power)?;
    if n0 == 0 {
        return Err(RdError::InvalidArgument("pilot sample size must be positive".into()));
    }
    if !(target_mde > 0.0 && target_mde.is_finite()) {
        return Err(RdError::UnreachableTarget(format!("target MDE {target_mde} must be positive")));
    }
    let z = standardized_mde(alpha, target_power)?;
    let e = scaling.exponent();
    let mde_at = |n: u64| z * pilot_se * (n0 as f64 / n as f64).powf(e);
    let ratio = (z * pilot_se) / target_mde;
    let guess = (n0 as f64 * ratio.powf(1.0 / e)).ceil();
    if !guess.is_finite() || guess > 1e15 {
        return Err(RdError::UnreachableTarget(format!("required n {guess} is not representable")));
    }
    let mut n = (guess as u64).max(1);
    // rounding guard: step to the smallest n satisfying the target
    let tol = target_mde * 1e-12;
    while n > 1 && mde_at(n - 1) <= target_mde + tol {
        n -= 1;
    }
    while mde_at(n) > target_mde + tol {
        n += 1;
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    Conventional,
    #[default]
    Rbc,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BandwidthRule {
    #[default]
    Mse,
    Ce,
    Fixed { h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub method: IntervalMethod,
    pub p: usize,
    pub kernel: KernelKind,
    pub level: f64,
    pub bandwidth: BandwidthRule,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            method: IntervalMethod::Rbc,
            p: 1,
            kernel: KernelKind::Triangular,
            level: 0.95,
            bandwidth: BandwidthRule::Mse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub tau_true: f64,
    pub replications: usize,
    pub failures: usize,
    pub coverage: f64,
    pub avg_ci_length: f64,
    pub rejection_rate_at_zero: f64,
    pub mean_bias: f64,
    pub mean_bandwidth: f64,
}

struct Replicate {
    covered: bool,
    length: f64,
    rejects_zero: bool,
    error: f64,
    h: f64,
}

fn one_replication(dgp: &DgpSpec, cfg: &CoverageConfig, n: usize, seed: u64) -> Result<Replicate> {
    let sample = simulate_sample(dgp, n, seed)?;
    let centered = sample.centered_scores();
    let y = sample.outcome();
    let h = match cfg.bandwidth {
        BandwidthRule::Fixed { h } => h,
        rule => {
            let sel = select_bandwidth_centered(&centered, y, cfg.p, cfg.kernel, SelectorOptions::default())?;
            if rule == BandwidthRule::Ce {
                sel.h_ce
            } else {
                sel.h_mse
            }
        }
    };
    let est_cfg = EstimatorConfig::new(cfg.p, cfg.kernel, h).with_level(cfg.level);
    let (point, ci): (f64, Interval) = match cfg.method {
        IntervalMethod::Conventional => {
            let e = estimate_centered(&centered, y, None, EstimandKind::Sharp, &est_cfg)?;
            (e.tau_hat, e.ci_conventional)
        }
        IntervalMethod::Rbc => {
            let r = rbc_centered(&centered, y, None, EstimandKind::Sharp, &est_cfg)?;
            (r.bias_corrected, r.ci_rbc)
        }
    };
    let tau = dgp.tau_true();
    // a few ulps of slack so that zero-width intervals on noiseless data
    // still cover a truth they reproduce up to rounding
    let slack = 64.0 * f64::EPSILON * (1.0 + tau.abs() + point.abs());
    Ok(Replicate {
        covered: ci.lower - slack <= tau && tau <= ci.upper + slack,
        length: ci.length(),
        rejects_zero: !ci.contains(0.0),
        error: point - tau,
        h,
    })
}

/// Empirical coverage of sharp-RD intervals over seeded replications.
pub fn simulate_coverage(
    dgp: &DgpSpec,
    cfg: &CoverageConfig,
    n: usize,
    replications: usize,
    seed: u64,
) -> Result<CoverageSummary> {
    dgp.validate()?;
    if replications < 500 {
        return Err(RdError::InvalidArgument(format!(
            "coverage simulation needs at least 500 replications, got {replications}"
        )));
    }
    let reps: Vec<Option<Replicate>> = (0..replications)
        .into_par_iter()
        .map(|r| one_replication(dgp, cfg, n, replication_seed(seed, r)).ok())
        .collect();
    let ok: Vec<&Replicate> = reps.iter().flatten().collect();
    let failures = replications - ok.len();
    if failures * 20 > replications {
        return Err(RdError::TooManyFailures {
            failed: failures,
            total: replications,
        });
    }
    let m = ok.len() as f64;
    let frac = |f: &dyn Fn(&Replicate) -> bool| ok.iter().filter(|r| f(r)).count() as f64 / m;
    Ok(CoverageSummary {
        tau_true: dgp.tau_true(),
        replications,
        failures,
        coverage: frac(&|r| r.covered),
        avg_ci_length: compensated_sum(ok.iter().map(|r| r.length)) / m,
        rejection_rate_at_zero: frac(&|r| r.rejects_zero),
        mean_bias: compensated_sum(ok.iter().map(|r| r.error)) / m,
        mean_bandwidth: compensated_sum(ok.iter().map(|r| r.h)) / m,
    })
}
