//! Plug-in MSE-optimal and CE-optimal bandwidths, plus a Monte Carlo
//! grid-search oracle.
//!
//! The plug-in rule is
//!
//! ```text
//! h_mse = C_K * ( sigma^2 / (f_c * D^2 * n) )^(1 / (2p + 3))
//! ```
//!
//! where `D` is the jump in the `(p+1)`-th Taylor coefficient across the
//! cutoff, `sigma^2` the residual variance near the cutoff and `f_c` the
//! score density at the cutoff. Pilots are global polynomial fits of order
//! `p + 2` on each side and a histogram density estimate. `C_K` comes from
//! the boundary bias and variance constants of the kernel, obtained by
//! numerically integrating its moment matrices.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuity::{estimate_centered, EstimandKind, EstimatorConfig};
use crate::error::{RdError, Result};
use crate::lpoly::{global_polyfit, kernel_weight, KernelKind, Side, MAX_ORDER};
use crate::sample::RdSample;
use crate::sim::{simulate_sample, DgpSpec};
use crate::stats::{compensated_sum, mean, quantile_sorted, sample_variance, substream_rng};
use rand::RngCore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub h_mse: f64,
    pub h_ce: f64,
    /// Side-specific MSE bandwidths; equal to `h_mse` unless side-specific
    /// selection was requested.
    pub h_below: f64,
    pub h_above: f64,
    pub p: usize,
    pub kernel: KernelKind,
    /// `(p+1)`-th Taylor coefficient of each side's pilot fit at the cutoff.
    pub pilot_curvature_below: f64,
    pub pilot_curvature_above: f64,
    pub pilot_variance: f64,
    pub pilot_variance_below: f64,
    pub pilot_variance_above: f64,
    pub density_at_cutoff: f64,
    pub density_bandwidth: f64,
    pub kernel_constant: f64,
    pub n_used: usize,
    /// Bias estimate vanished (or noise was zero); rule-of-thumb fallback used.
    pub degenerate_pilot: bool,
    /// The raw plug-in value exceeded the score range and was clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectorOptions {
    pub side_specific: bool,
}

/// Simpson's rule on `[0, 1]`.
fn integrate_unit(f: impl Fn(f64) -> f64) -> f64 {
    const N: usize = 4000;
    let h = 1.0 / N as f64;
    let mut acc = f(0.0) + f(1.0);
    for i in 1..N {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * h);
    }
    acc * h / 3.0
}

/// Boundary-point constants `(B_K, V_K)` of an order-`p` local polynomial
/// intercept: bias `h^(p+1) * B_K * m^(p+1)(c)/(p+1)!` and variance
/// `V_K * sigma^2 / (f n h)`.
pub fn boundary_constants(kernel: KernelKind, p: usize) -> (f64, f64) {
    let k = p + 1;
    let gamma = DMatrix::from_fn(k, k, |a, b| integrate_unit(|u| kernel_weight(u, kernel) * u.powi((a + b) as i32)));
    let psi = DMatrix::from_fn(k, k, |a, b| {
        integrate_unit(|u| kernel_weight(u, kernel).powi(2) * u.powi((a + b) as i32))
    });
    let lambda = DVector::from_fn(k, |a, _| integrate_unit(|u| kernel_weight(u, kernel) * u.powi((a + k) as i32)));
    let gamma_inv = gamma.try_inverse().expect("kernel moment matrix is positive definite");
    let e0 = DVector::from_fn(k, |a, _| if a == 0 { 1.0 } else { 0.0 });
    let row = gamma_inv.transpose() * &e0;
    let bias = row.dot(&lambda);
    let var = (row.transpose() * psi * &row)[(0, 0)];
    (bias, var)
}

/// `C_K` for the difference of two intercepts with a common bandwidth.
pub fn kernel_constant(kernel: KernelKind, p: usize) -> f64 {
    let (b, v) = boundary_constants(kernel, p);
    (v / ((p + 1) as f64 * b * b)).powf(1.0 / (2 * p + 3) as f64)
}

/// `C_K` for a single side's intercept.
fn one_side_constant(kernel: KernelKind, p: usize) -> f64 {
    let (b, v) = boundary_constants(kernel, p);
    (v / (2.0 * (p + 1) as f64 * b * b)).powf(1.0 / (2 * p + 3) as f64)
}

/// The plug-in formula with all pilot quantities supplied.
pub fn mse_bandwidth_formula(c_k: f64, sigma2: f64, density: f64, curvature: f64, n: usize, p: usize) -> f64 {
    c_k * (sigma2 / (density * curvature * curvature * n as f64)).powf(1.0 / (2 * p + 3) as f64)
}

/// `n^(-p / ((3 + p)(3 + 2p)))`.
pub fn ce_factor(n: usize, p: usize) -> f64 {
    let e = -(p as f64) / ((3 + p) as f64 * (3 + 2 * p) as f64);
    (n as f64).powf(e)
}

/// CE-optimal bandwidth from an MSE-optimal one.
pub fn select_ce_bandwidth(selection: &BandwidthSelection, n: usize, p: usize) -> f64 {
    selection.h_mse * ce_factor(n, p)
}

/// MSE-optimal bandwidth for the outcome of `sample`.
pub fn select_mse_bandwidth(sample: &RdSample, p: usize, kernel: KernelKind) -> Result<BandwidthSelection> {
    select_bandwidth_centered(&sample.centered_scores(), sample.outcome(), p, kernel, SelectorOptions::default())
}

/// Plug-in selector on raw slices; `centered` are scores minus cutoff.
pub fn select_bandwidth_centered(
    centered: &[f64],
    y: &[f64],
    p: usize,
    kernel: KernelKind,
    options: SelectorOptions,
) -> Result<BandwidthSelection> {
    if p > MAX_ORDER {
        return Err(RdError::InvalidArgument(format!("polynomial order {p} exceeds {MAX_ORDER}")));
    }
    let n = centered.len();
    if n < 10 * (p + 2) {
        return Err(RdError::TooFewObservations(format!(
            "bandwidth selection needs at least {} observations, got {n}",
            10 * (p + 2)
        )));
    }
    let pilot_order = p + 2;
    let split = |side: Side| -> (Vec<f64>, Vec<f64>) {
        centered
            .iter()
            .zip(y)
            .filter(|(x, _)| side.contains(**x))
            .map(|(x, y)| (*x, *y))
            .unzip()
    };
    let (xb, yb) = split(Side::Below);
    let (xa, ya) = split(Side::Above);
    for (side, xs) in [(Side::Below, &xb), (Side::Above, &xa)] {
        if xs.len() < pilot_order + 2 {
            return Err(RdError::TooFewObservations(format!(
                "{side} side has {} observations; pilot of order {pilot_order} needs {}",
                xs.len(),
                pilot_order + 2
            )));
        }
    }

    let mut sorted = centered.to_vec();
    sorted.sort_by(f64::total_cmp);
    let range = sorted[n - 1] - sorted[0];

    // histogram density at the cutoff, Silverman-type bin width
    let sd = sample_variance(centered).sqrt();
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.349) } else { sd };
    let b = (1.06 * spread * (n as f64).powf(-0.2)).min(range);
    let in_bin = centered.iter().filter(|x| x.abs() <= b).count();
    if in_bin == 0 || !(b > 0.0) {
        return Err(RdError::TooFewObservations("no observations near the cutoff for the density pilot".into()));
    }
    let density = in_bin as f64 / (2.0 * n as f64 * b);

    let (coef_b, res_b) = global_polyfit(&xb, &yb, pilot_order, Side::Below)?;
    let (coef_a, res_a) = global_polyfit(&xa, &ya, pilot_order, Side::Above)?;
    let curv_b = coef_b[p + 1];
    let curv_a = coef_a[p + 1];

    let near_sq = |xs: &[f64], res: &[f64]| -> Vec<f64> {
        let near: Vec<f64> = xs
            .iter()
            .zip(res)
            .filter(|(x, _)| x.abs() <= 2.0 * b)
            .map(|(_, r)| r * r)
            .collect();
        if near.len() > pilot_order {
            near
        } else {
            res.iter().map(|r| r * r).collect()
        }
    };
    let sq_b = near_sq(&xb, &res_b);
    let sq_a = near_sq(&xa, &res_a);
    let var_b = mean(&sq_b);
    let var_a = mean(&sq_a);
    let pooled: Vec<f64> = sq_b.iter().chain(&sq_a).copied().collect();
    let sigma2 = mean(&pooled);

    let c_k = kernel_constant(kernel, p);
    let curvature = curv_a - curv_b;
    let scale = range.powi(p as i32 + 1);
    // noiseless outcomes or curvature that is negligible next to the noise
    let y_scale = sample_variance(y).sqrt();
    let vanishing =
        |c: f64, s2: f64| !(s2.sqrt() > 1e-10 * y_scale) || !((c * scale).abs() > 1e-8 * s2.sqrt());
    let fallback = range / 4.0;

    let mut degenerate = vanishing(curvature, sigma2);
    let mut clamped = false;
    let h_mse = if degenerate {
        fallback
    } else {
        let raw = mse_bandwidth_formula(c_k, sigma2, density, curvature, n, p);
        if raw > range {
            clamped = true;
            range
        } else {
            raw
        }
    };
    let (h_below, h_above) = if options.side_specific {
        let c1 = one_side_constant(kernel, p);
        let side_h = |curv: f64, s2: f64, degenerate: &mut bool, clamped: &mut bool| {
            if vanishing(curv, s2) {
                *degenerate = true;
                fallback
            } else {
                let raw = mse_bandwidth_formula(c1, s2, density, curv, n, p);
                if raw > range {
                    *clamped = true;
                }
                raw.min(range)
            }
        };
        (
            side_h(curv_b, var_b, &mut degenerate, &mut clamped),
            side_h(curv_a, var_a, &mut degenerate, &mut clamped),
        )
    } else {
        (h_mse, h_mse)
    };

    Ok(BandwidthSelection {
        h_mse,
        h_ce: h_mse * ce_factor(n, p),
        h_below,
        h_above,
        p,
        kernel,
        pilot_curvature_below: curv_b,
        pilot_curvature_above: curv_a,
        pilot_variance: sigma2,
        pilot_variance_below: var_b,
        pilot_variance_above: var_a,
        density_at_cutoff: density,
        density_bandwidth: b,
        kernel_constant: c_k,
        n_used: n,
        degenerate_pilot: degenerate,
        clamped,
    })
}

/// Monte Carlo MSE curve over a bandwidth grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub grid: Vec<f64>,
    pub mse: Vec<f64>,
    /// Replications that produced an estimate, per grid point.
    pub used: Vec<usize>,
    pub skipped: Vec<usize>,
    pub best_h: f64,
    pub best_index: usize,
}

/// Grid-search oracle: the bandwidth with smallest Monte Carlo MSE of the
/// sharp estimator. All grid points share the same simulated samples.
#[allow(clippy::too_many_arguments)]
pub fn oracle_mse_bandwidth(
    dgp: &DgpSpec,
    n: usize,
    p: usize,
    kernel: KernelKind,
    grid: &[f64],
    replications: usize,
    seed: u64,
) -> Result<OracleResult> {
    if grid.is_empty() {
        return Err(RdError::InvalidArgument("bandwidth grid is empty".into()));
    }
    if replications < 100 {
        return Err(RdError::InvalidArgument("oracle needs at least 100 replications".into()));
    }
    let tau = dgp.tau_true();
    let errors: Vec<Vec<Option<f64>>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let sample_seed = substream_rng(seed, r as u64).next_u64();
            let sample = simulate_sample(dgp, n, sample_seed)?;
            let centered = sample.centered_scores();
            Ok(grid
                .iter()
                .map(|&h| {
                    estimate_centered(
                        &centered,
                        sample.outcome(),
                        None,
                        EstimandKind::Sharp,
                        &EstimatorConfig::new(p, kernel, h),
                    )
                    .ok()
                    .map(|e| (e.tau_hat - tau).powi(2))
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut mse = Vec::with_capacity(grid.len());
    let mut used = Vec::with_capacity(grid.len());
    let mut skipped = Vec::with_capacity(grid.len());
    for g in 0..grid.len() {
        let ok: Vec<f64> = errors.iter().filter_map(|row| row[g]).collect();
        used.push(ok.len());
        skipped.push(replications - ok.len());
        mse.push(if ok.is_empty() {
            f64::INFINITY
        } else {
            compensated_sum(ok.iter().copied()) / ok.len() as f64
        });
    }
    let best_index = (0..grid.len())
        .min_by(|&a, &b| mse[a].total_cmp(&mse[b]))
        .expect("grid is non-empty");
    Ok(OracleResult {
        grid: grid.to_vec(),
        best_h: grid[best_index],
        best_index,
        mse,
        used,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginMseResult {
    /// Mean squared error of the estimate when each sample picks its own bandwidth.
    pub mse: f64,
    pub mean_bandwidth: f64,
    pub used: usize,
    pub failures: usize,
}

/// Monte Carlo MSE of the sharp estimate at the data-driven MSE bandwidth.
/// Uses the same per-replication samples as [`oracle_mse_bandwidth`] with
/// the same seed, so the two are directly comparable.
pub fn plugin_mse(dgp: &DgpSpec, n: usize, p: usize, kernel: KernelKind, replications: usize, seed: u64) -> Result<PluginMseResult> {
    if replications < 100 {
        return Err(RdError::InvalidArgument("plug-in MSE needs at least 100 replications".into()));
    }
    let tau = dgp.tau_true();
    let draws: Vec<Option<(f64, f64)>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let sample_seed = substream_rng(seed, r as u64).next_u64();
            let sample = simulate_sample(dgp, n, sample_seed)?;
            let centered = sample.centered_scores();
            let fit = select_bandwidth_centered(&centered, sample.outcome(), p, kernel, SelectorOptions::default())
                .and_then(|sel| {
                    let cfg = EstimatorConfig::new(p, kernel, sel.h_mse);
                    estimate_centered(&centered, sample.outcome(), None, EstimandKind::Sharp, &cfg)
                        .map(|e| ((e.tau_hat - tau).powi(2), sel.h_mse))
                });
            Ok(fit.ok())
        })
        .collect::<Result<_>>()?;
    let ok: Vec<(f64, f64)> = draws.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(RdError::TooManyFailures {
            failed: replications,
            total: replications,
        });
    }
    Ok(PluginMseResult {
        mse: compensated_sum(ok.iter().map(|v| v.0)) / ok.len() as f64,
        mean_bandwidth: compensated_sum(ok.iter().map(|v| v.1)) / ok.len() as f64,
        used: ok.len(),
        failures: replications - ok.len(),
    })
}
