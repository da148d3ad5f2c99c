//! Continuity-based estimation: sharp, fuzzy and kink local polynomial
//! estimators, robust bias-corrected inference, the discrete-score estimand
//! and multi-cutoff normalize-and-pool.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::lpoly::{factorial, fit_with_design, side_design, FitSpec, KernelKind, Side, MAX_ORDER};
use crate::sample::{mass_points_of, RdSample};
use crate::stats::{mean, two_sided_p, z_for_level};

/// Minimum absolute first stage accepted by the fuzzy ratio estimators.
pub const WEAK_FIRST_STAGE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandKind {
    #[default]
    Sharp,
    Fuzzy,
    Kink,
}

impl EstimandKind {
    /// Derivative order of the regression functions being differenced.
    pub fn derivative(self) -> usize {
        match self {
            EstimandKind::Kink => 1,
            _ => 0,
        }
    }
}

impl std::str::FromStr for EstimandKind {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sharp" => Ok(EstimandKind::Sharp),
            "fuzzy" => Ok(EstimandKind::Fuzzy),
            "kink" => Ok(EstimandKind::Kink),
            other => Err(RdError::InvalidArgument(format!("unknown estimand `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn centered(center: f64, half_width: f64) -> Self {
        Self {
            lower: center - half_width,
            upper: center + half_width,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Polynomial order, kernel, bandwidths and confidence level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub p: usize,
    pub kernel: KernelKind,
    pub h_below: f64,
    pub h_above: f64,
    pub level: f64,
}

impl EstimatorConfig {
    /// Common bandwidth on both sides, 95% level.
    pub fn new(p: usize, kernel: KernelKind, h: f64) -> Self {
        Self {
            p,
            kernel,
            h_below: h,
            h_above: h,
            level: 0.95,
        }
    }

    pub fn with_level(mut self, level: f64) -> Self {
        self.level = level;
        self
    }

    pub fn with_bandwidths(mut self, h_below: f64, h_above: f64) -> Self {
        self.h_below = h_below;
        self.h_above = h_above;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(RdError::InvalidArgument(format!("level {} not in (0, 1)", self.level)));
        }
        Ok(())
    }

    fn spec(&self, side: Side, p: usize) -> FitSpec {
        let h = match side {
            Side::Below => self.h_below,
            Side::Above => self.h_above,
        };
        FitSpec::new(p, self.kernel, h, side)
    }
}

/// Point estimate with conventional inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdEstimate {
    pub kind: EstimandKind,
    pub tau_hat: f64,
    pub se_conventional: f64,
    /// First-stage jump in treatment receipt (fuzzy only).
    pub first_stage: Option<f64>,
    /// Reduced-form jump in the outcome (fuzzy only).
    pub reduced_form: Option<f64>,
    pub p: usize,
    pub kernel: KernelKind,
    pub h_below: f64,
    pub h_above: f64,
    pub n_eff_below: usize,
    pub n_eff_above: usize,
    pub level: f64,
    pub ci_conventional: Interval,
    pub p_value_conventional: f64,
}

/// Robust bias-corrected inference layered on a conventional estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbcResult {
    pub base: RdEstimate,
    pub bias_estimate: f64,
    pub bias_corrected: f64,
    pub se_robust: f64,
    pub ci_rbc: Interval,
    pub p_value_robust: f64,
    pub inference_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteEstimate {
    pub tau_sds: f64,
    pub mean_at_c: f64,
    pub mean_at_below_neighbor: f64,
    /// Location of the adjacent mass point below the cutoff, in score units.
    pub below_neighbor: f64,
    pub n_at_c: usize,
    pub n_at_below_neighbor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffEstimate {
    pub cutoff: f64,
    pub n: usize,
    pub estimate: Option<RdEstimate>,
    /// Reason the cutoff-specific estimate could not be computed.
    pub insufficient: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub pooled: RdEstimate,
    pub per_cutoff: Vec<CutoffEstimate>,
}

struct SideParts {
    value_y: f64,
    var_y: f64,
    value_d: f64,
    var_d: f64,
    cov_yd: f64,
    n_eff: usize,
}

fn side_parts(centered: &[f64], y: &[f64], d: Option<&[f64]>, spec: &FitSpec, nu: usize) -> Result<SideParts> {
    if nu > spec.p {
        return Err(RdError::DerivativeOrderTooHigh { nu, p: spec.p });
    }
    let design = side_design(centered, spec)?;
    let fy = fit_with_design(&design, y, spec);
    let f2 = factorial(nu).powi(2);
    let mut parts = SideParts {
        value_y: factorial(nu) * fy.beta[nu],
        var_y: f2 * fy.cov[(nu, nu)].max(0.0),
        value_d: 0.0,
        var_d: 0.0,
        cov_yd: 0.0,
        n_eff: fy.n_eff,
    };
    if let Some(d) = d {
        let (_, res_y) = design.solve(y);
        let (beta_d, res_d) = design.solve(d);
        parts.value_d = factorial(nu) * beta_d[nu];
        parts.var_d = f2 * design.sandwich(&res_d, &res_d)[(nu, nu)].max(0.0);
        parts.cov_yd = f2 * design.sandwich(&res_y, &res_d)[(nu, nu)];
    }
    Ok(parts)
}

/// Estimator on raw slices; `centered` are scores minus the applicable cutoff.
pub fn estimate_centered(
    centered: &[f64],
    y: &[f64],
    d: Option<&[f64]>,
    kind: EstimandKind,
    cfg: &EstimatorConfig,
) -> Result<RdEstimate> {
    estimate_with_order(centered, y, d, kind, cfg, cfg.p)
}

fn estimate_with_order(
    centered: &[f64],
    y: &[f64],
    d: Option<&[f64]>,
    kind: EstimandKind,
    cfg: &EstimatorConfig,
    p: usize,
) -> Result<RdEstimate> {
    cfg.validate()?;
    let nu = kind.derivative();
    let d = match kind {
        EstimandKind::Fuzzy => Some(d.ok_or(RdError::MissingTreatmentColumn)?),
        _ => None,
    };
    let below = side_parts(centered, y, d, &cfg.spec(Side::Below, p), nu)?;
    let above = side_parts(centered, y, d, &cfg.spec(Side::Above, p), nu)?;

    let jump_y = above.value_y - below.value_y;
    let var_y = above.var_y + below.var_y;
    let (tau_hat, var, first_stage, reduced_form) = match kind {
        EstimandKind::Fuzzy => {
            let jump_d = above.value_d - below.value_d;
            if !(jump_d.abs() >= WEAK_FIRST_STAGE) {
                return Err(RdError::WeakFirstStage { first_stage: jump_d });
            }
            let tau = jump_y / jump_d;
            let var_d = above.var_d + below.var_d;
            let cov = above.cov_yd + below.cov_yd;
            let var = (var_y - 2.0 * tau * cov + tau * tau * var_d) / (jump_d * jump_d);
            (tau, var.max(0.0), Some(jump_d), Some(jump_y))
        }
        _ => (jump_y, var_y, None, None),
    };
    let se = var.sqrt();
    let z = z_for_level(cfg.level);
    Ok(RdEstimate {
        kind,
        tau_hat,
        se_conventional: se,
        first_stage,
        reduced_form,
        p,
        kernel: cfg.kernel,
        h_below: cfg.h_below,
        h_above: cfg.h_above,
        n_eff_below: below.n_eff,
        n_eff_above: above.n_eff,
        level: cfg.level,
        ci_conventional: Interval::centered(tau_hat, z * se),
        p_value_conventional: p_value(tau_hat, se),
    })
}

fn p_value(center: f64, se: f64) -> f64 {
    if se > 0.0 {
        two_sided_p(center / se)
    } else if center == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// RBC inference on raw slices.
pub fn rbc_centered(
    centered: &[f64],
    y: &[f64],
    d: Option<&[f64]>,
    kind: EstimandKind,
    cfg: &EstimatorConfig,
) -> Result<RbcResult> {
    let q = cfg.p + 1;
    if q > MAX_ORDER {
        return Err(RdError::InvalidArgument(format!(
            "bias correction needs order {q}, above the maximum {MAX_ORDER}"
        )));
    }
    let base = estimate_with_order(centered, y, d, kind, cfg, cfg.p)?;
    let corrected = estimate_with_order(centered, y, d, kind, cfg, q)?;
    let bias_estimate = base.tau_hat - corrected.tau_hat;
    let center = base.tau_hat - bias_estimate;
    let se_robust = corrected.se_conventional;
    let z = z_for_level(cfg.level);
    Ok(RbcResult {
        bias_estimate,
        bias_corrected: center,
        se_robust,
        ci_rbc: Interval::centered(center, z * se_robust),
        p_value_robust: p_value(center, se_robust),
        inference_order: q,
        base,
    })
}

/// Sharp RD: difference of intercepts of the two one-sided fits.
pub fn sharp_estimate(sample: &RdSample, cfg: &EstimatorConfig) -> Result<RdEstimate> {
    estimate_centered(&sample.centered_scores(), sample.outcome(), None, EstimandKind::Sharp, cfg)
}

/// Fuzzy RD: ratio of the outcome jump to the treatment-receipt jump.
pub fn fuzzy_estimate(sample: &RdSample, cfg: &EstimatorConfig) -> Result<RdEstimate> {
    let d = sample.received().ok_or(RdError::MissingTreatmentColumn)?;
    estimate_centered(&sample.centered_scores(), sample.outcome(), Some(d), EstimandKind::Fuzzy, cfg)
}

/// Kink RD: difference of first derivatives at the cutoff.
pub fn kink_estimate(sample: &RdSample, cfg: &EstimatorConfig) -> Result<RdEstimate> {
    estimate_centered(&sample.centered_scores(), sample.outcome(), None, EstimandKind::Kink, cfg)
}

pub fn estimate(sample: &RdSample, kind: EstimandKind, cfg: &EstimatorConfig) -> Result<RdEstimate> {
    match kind {
        EstimandKind::Sharp => sharp_estimate(sample, cfg),
        EstimandKind::Fuzzy => fuzzy_estimate(sample, cfg),
        EstimandKind::Kink => kink_estimate(sample, cfg),
    }
}

/// Robust bias-corrected inference: bias is estimated by refitting at order
/// `p + 1` with the same bandwidths, and the order `p + 1` standard error is
/// used for the interval.
pub fn rbc_inference(sample: &RdSample, kind: EstimandKind, cfg: &EstimatorConfig) -> Result<RbcResult> {
    let d = match kind {
        EstimandKind::Fuzzy => Some(sample.received().ok_or(RdError::MissingTreatmentColumn)?),
        _ => None,
    };
    rbc_centered(&sample.centered_scores(), sample.outcome(), d, kind, cfg)
}

/// Difference of raw outcome means at the cutoff mass point and at the
/// nearest mass point below it.
pub fn discrete_estimate(sample: &RdSample) -> Result<DiscreteEstimate> {
    let centered = sample.centered_scores();
    let census = mass_points_of(&centered, 0.0);
    let below = census.below_neighbor.ok_or(RdError::NoBelowNeighbor)?;
    let at_c: Vec<f64> = centered
        .iter()
        .zip(sample.outcome())
        .filter(|(x, _)| **x == 0.0)
        .map(|(_, y)| *y)
        .collect();
    if at_c.is_empty() {
        return Err(RdError::NoMassAtCutoff);
    }
    let at_below: Vec<f64> = centered
        .iter()
        .zip(sample.outcome())
        .filter(|(x, _)| **x == below)
        .map(|(_, y)| *y)
        .collect();
    let mean_at_c = mean(&at_c);
    let mean_at_below_neighbor = mean(&at_below);
    Ok(DiscreteEstimate {
        tau_sds: mean_at_c - mean_at_below_neighbor,
        mean_at_c,
        mean_at_below_neighbor,
        below_neighbor: below + sample.reference_cutoff(),
        n_at_c: at_c.len(),
        n_at_below_neighbor: at_below.len(),
    })
}

/// Pooled estimate on normalized scores `X_i - C_i` plus one estimate per
/// distinct cutoff.
pub fn normalize_and_pool(sample: &RdSample, kind: EstimandKind, cfg: &EstimatorConfig) -> Result<PooledEstimate> {
    let cutoffs = sample.unit_cutoffs().ok_or(RdError::MissingUnitCutoffs)?;
    let pooled = estimate(sample, kind, cfg)?;
    let mut distinct: Vec<f64> = cutoffs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let per_cutoff = distinct
        .par_iter()
        .map(|&c| {
            let rows: Vec<usize> = (0..cutoffs.len()).filter(|&i| cutoffs[i] == c).collect();
            let n = rows.len();
            let result = sample.subset(&rows).and_then(|s| estimate(&s, kind, cfg));
            match result {
                Ok(est) => CutoffEstimate {
                    cutoff: c,
                    n,
                    estimate: Some(est),
                    insufficient: None,
                },
                Err(e) => CutoffEstimate {
                    cutoff: c,
                    n,
                    estimate: None,
                    insufficient: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(PooledEstimate { pooled, per_cutoff })
}
