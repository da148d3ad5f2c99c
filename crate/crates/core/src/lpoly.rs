//! Kernel-weighted polynomial least squares on one side of the cutoff.
//!
//! Regressors are powers of the centered score `(X - c)`, so the intercept
//! is the fitted value at the cutoff. Internally the powers are taken of
//! `(X - c) / h` for conditioning and coefficients are rescaled afterwards.
//! The covariance is an HC1 sandwich with the kernel weights as regression
//! weights.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::sample::RdSample;

/// Largest supported polynomial order.
pub const MAX_ORDER: usize = 4;

/// Reciprocal condition number below which a design counts as singular.
pub const RCOND_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Triangular,
    Uniform,
    Epanechnikov,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Triangular => "triangular",
            KernelKind::Uniform => "uniform",
            KernelKind::Epanechnikov => "epanechnikov",
        }
    }

    pub const ALL: [KernelKind; 3] = [KernelKind::Triangular, KernelKind::Uniform, KernelKind::Epanechnikov];
}

impl std::str::FromStr for KernelKind {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "triangular" | "tri" => Ok(KernelKind::Triangular),
            "uniform" | "uni" => Ok(KernelKind::Uniform),
            "epanechnikov" | "epa" => Ok(KernelKind::Epanechnikov),
            other => Err(RdError::InvalidArgument(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Kernel weight; every kernel is supported on `[-1, 1]`.
pub fn kernel_weight(u: f64, kind: KernelKind) -> f64 {
    let a = u.abs();
    if a > 1.0 {
        return 0.0;
    }
    match kind {
        KernelKind::Triangular => 1.0 - a,
        KernelKind::Uniform => 0.5,
        KernelKind::Epanechnikov => 0.75 * (1.0 - u * u),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Below,
    Above,
}

impl Side {
    /// Whether a centered score belongs to this side. Zero belongs above.
    pub fn contains(self, centered: f64) -> bool {
        match self {
            Side::Below => centered < 0.0,
            Side::Above => centered >= 0.0,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Below => "below",
            Side::Above => "above",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub p: usize,
    pub kernel: KernelKind,
    pub h: f64,
    pub side: Side,
}

impl FitSpec {
    pub fn new(p: usize, kernel: KernelKind, h: f64, side: Side) -> Self {
        Self { p, kernel, h, side }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.p > MAX_ORDER {
            return Err(RdError::InvalidArgument(format!(
                "polynomial order {} exceeds {MAX_ORDER}",
                self.p
            )));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(RdError::InvalidArgument(format!("bandwidth {} must be positive", self.h)));
        }
        Ok(())
    }
}

/// One-sided local polynomial fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    /// Coefficients on `(X - c)^j`, `j = 0..=p`.
    pub beta: Vec<f64>,
    /// Robust covariance of `beta`.
    pub cov: DMatrix<f64>,
    pub n_eff: usize,
    /// Condition number of the weighted, bandwidth-scaled design.
    pub condition: f64,
    pub side: Side,
    pub p: usize,
    pub h: f64,
}

impl LocalFit {
    /// `nu!`-scaled coefficient and standard error: the `nu`-th derivative
    /// of the fitted regression function at the cutoff.
    pub fn predict_at_cutoff(&self, nu: usize) -> Result<(f64, f64)> {
        predict_at_cutoff(self, nu)
    }
}

pub fn predict_at_cutoff(fit: &LocalFit, nu: usize) -> Result<(f64, f64)> {
    if nu > fit.p {
        return Err(RdError::DerivativeOrderTooHigh { nu, p: fit.p });
    }
    let fact = factorial(nu);
    Ok((fact * fit.beta[nu], fact * fit.cov[(nu, nu)].max(0.0).sqrt()))
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// A weighted polynomial design, factored once and reused for any number of
/// response vectors (outcome, treatment receipt, covariates).
#[derive(Debug, Clone)]
pub(crate) struct WeightedDesign {
    /// Positions of the used observations in the caller's arrays.
    pub rows: Vec<usize>,
    pub weights: Vec<f64>,
    /// Unweighted basis `((x/scale)^j)`, one row per used observation.
    basis: DMatrix<f64>,
    q: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    scale: f64,
    pub p: usize,
    pub condition: f64,
}

impl WeightedDesign {
    /// `x` are centered scores of the selected rows; `weights` strictly positive.
    pub fn new(rows: Vec<usize>, x: &[f64], weights: Vec<f64>, p: usize, scale: f64, side: Side) -> Result<Self> {
        let n = rows.len();
        let k = p + 1;
        if n == 0 {
            return Err(RdError::EmptySide(side));
        }
        if n < k {
            return Err(RdError::RankDeficient { side, n_eff: n, p });
        }
        let basis = DMatrix::from_fn(n, k, |i, j| (x[i] / scale).powi(j as i32));
        let mut weighted = basis.clone();
        for (i, w) in weights.iter().enumerate() {
            let sw = w.sqrt();
            weighted.row_mut(i).scale_mut(sw);
        }
        let qr = weighted.qr();
        let r = qr.r();
        let q = qr.q();
        let sv = r.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
        if !(rcond >= RCOND_THRESHOLD) {
            return Err(RdError::RankDeficient { side, n_eff: n, p });
        }
        let r_inv = r
            .clone()
            .solve_upper_triangular(&DMatrix::identity(k, k))
            .ok_or(RdError::RankDeficient { side, n_eff: n, p })?;
        Ok(Self {
            rows,
            weights,
            basis,
            q,
            r_inv,
            scale,
            p,
            condition: 1.0 / rcond,
        })
    }

    pub fn n_eff(&self) -> usize {
        self.rows.len()
    }

    /// Scaled-basis coefficients and residuals for response `y` (indexed
    /// like the caller's full arrays).
    fn solve_scaled(&self, y: &[f64]) -> (DVector<f64>, Vec<f64>) {
        let n = self.rows.len();
        let wy = DVector::from_fn(n, |i, _| self.weights[i].sqrt() * y[self.rows[i]]);
        let qty = self.q.transpose() * wy;
        let gamma = &self.r_inv * qty;
        let fitted = &self.basis * &gamma;
        let resid = (0..n).map(|i| y[self.rows[i]] - fitted[i]).collect();
        (gamma, resid)
    }

    fn unscale(&self) -> DVector<f64> {
        DVector::from_fn(self.p + 1, |j, _| self.scale.powi(-(j as i32)))
    }

    /// Coefficients on `x^j` and residuals.
    pub fn solve(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (gamma, resid) = self.solve_scaled(y);
        let d = self.unscale();
        ((0..=self.p).map(|j| gamma[j] * d[j]).collect(), resid)
    }

    /// HC1 sandwich cross-covariance between the coefficient vectors of two
    /// responses sharing this design, given their residuals.
    pub fn sandwich(&self, resid_a: &[f64], resid_b: &[f64]) -> DMatrix<f64> {
        let k = self.p + 1;
        let n = self.rows.len();
        let mut meat = DMatrix::zeros(k, k);
        for i in 0..n {
            let w2 = self.weights[i] * self.weights[i] * resid_a[i] * resid_b[i];
            if w2 == 0.0 {
                continue;
            }
            let row = self.basis.row(i);
            for a in 0..k {
                for b in 0..k {
                    meat[(a, b)] += w2 * row[a] * row[b];
                }
            }
        }
        let bread = &self.r_inv * self.r_inv.transpose();
        let dof = if n > k { n as f64 / (n - k) as f64 } else { 1.0 };
        let mut v = &bread * meat * &bread * dof;
        let d = self.unscale();
        for a in 0..k {
            for b in 0..k {
                v[(a, b)] *= d[a] * d[b];
            }
        }
        // symmetrize rounding noise
        (&v + v.transpose()) * 0.5
    }
}

/// Builds the kernel-weighted design for one side of the cutoff.
pub(crate) fn side_design(centered: &[f64], spec: &FitSpec) -> Result<WeightedDesign> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut xs = Vec::new();
    let mut weights = Vec::new();
    for (i, &x) in centered.iter().enumerate() {
        if !spec.side.contains(x) {
            continue;
        }
        let w = kernel_weight(x / spec.h, spec.kernel);
        if w > 0.0 {
            rows.push(i);
            xs.push(x);
            weights.push(w);
        }
    }
    WeightedDesign::new(rows, &xs, weights, spec.p, spec.h, spec.side)
}

pub(crate) fn fit_with_design(design: &WeightedDesign, y: &[f64], spec: &FitSpec) -> LocalFit {
    let (beta, resid) = design.solve(y);
    let cov = design.sandwich(&resid, &resid);
    LocalFit {
        beta,
        cov,
        n_eff: design.n_eff(),
        condition: design.condition,
        side: spec.side,
        p: spec.p,
        h: spec.h,
    }
}

/// Fit on raw slices: `centered` are scores minus cutoff.
pub fn fit_side(centered: &[f64], y: &[f64], spec: &FitSpec) -> Result<LocalFit> {
    let design = side_design(centered, spec)?;
    Ok(fit_with_design(&design, y, spec))
}

/// Local polynomial fit of the outcome on one side of the cutoff.
pub fn fit_one_side(sample: &RdSample, spec: &FitSpec) -> Result<LocalFit> {
    fit_side(&sample.centered_scores(), sample.outcome(), spec)
}

/// Unweighted global polynomial fit of `y` on `x` (already centered).
/// Returns coefficients on `x^j` and residuals.
pub(crate) fn global_polyfit(x: &[f64], y: &[f64], order: usize, side: Side) -> Result<(Vec<f64>, Vec<f64>)> {
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let rows: Vec<usize> = (0..x.len()).collect();
    let design = WeightedDesign::new(rows, x, vec![1.0; x.len()], order, scale, side)?;
    Ok(design.solve(y))
}
