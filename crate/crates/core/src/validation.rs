//! Falsification and validation battery: covariate balance, manipulation
//! checks, placebo cutoffs, donut-hole and bandwidth sensitivity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{select_bandwidth_centered, SelectorOptions};
use crate::continuity::{rbc_centered, EstimandKind, EstimatorConfig, Interval, RbcResult};
use crate::error::{RdError, Result};
use crate::locrand::{covariate_fisher_pvalue, FisherConfig, Window};
use crate::lpoly::{KernelKind, Side};
use crate::sample::RdSample;
use crate::stats::{binom_cdf, binom_sf, quantile_sorted, two_sided_p};

/// Local polynomial settings; `h: None` selects the MSE-optimal bandwidth
/// on whatever data the test runs on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuityConfig {
    pub p: usize,
    pub kernel: KernelKind,
    pub level: f64,
    pub h: Option<f64>,
}

impl Default for ContinuityConfig {
    fn default() -> Self {
        Self {
            p: 1,
            kernel: KernelKind::Triangular,
            level: 0.95,
            h: None,
        }
    }
}

impl ContinuityConfig {
    fn resolve(&self, centered: &[f64], y: &[f64]) -> Result<EstimatorConfig> {
        let h = match self.h {
            Some(h) => h,
            None => select_bandwidth_centered(centered, y, self.p, self.kernel, SelectorOptions::default())?.h_mse,
        };
        Ok(EstimatorConfig::new(self.p, self.kernel, h).with_level(self.level))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMethod {
    Continuity,
    Locrand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRecord {
    pub covariate: String,
    pub method: BalanceMethod,
    /// RBC jump (continuity) or difference in means (locrand).
    pub estimate: f64,
    pub p_value: f64,
    pub n_used: usize,
    /// Bandwidth used by the continuity test.
    pub h: Option<f64>,
}

fn covariate_rows(sample: &RdSample, name: &str) -> Result<Vec<usize>> {
    let z = sample.covariate(name).ok_or_else(|| RdError::MissingCovariate(name.to_string()))?;
    let rows: Vec<usize> = (0..z.len()).filter(|&i| z[i].is_finite()).collect();
    let varies = rows.iter().any(|&i| z[i] != z[rows[0]]);
    if rows.is_empty() || !varies {
        return Err(RdError::NoVariation(name.to_string()));
    }
    Ok(rows)
}

/// Tests for a jump in a predetermined covariate at the cutoff.
pub fn covariate_balance_continuity(sample: &RdSample, name: &str, config: &ContinuityConfig) -> Result<BalanceRecord> {
    let rows = covariate_rows(sample, name)?;
    let z = sample.covariate(name).expect("checked above");
    let all = sample.centered_scores();
    let centered: Vec<f64> = rows.iter().map(|&i| all[i]).collect();
    let y: Vec<f64> = rows.iter().map(|&i| z[i]).collect();
    let cfg = config.resolve(&centered, &y)?;
    let rbc = rbc_centered(&centered, &y, None, EstimandKind::Sharp, &cfg)?;
    Ok(BalanceRecord {
        covariate: name.to_string(),
        method: BalanceMethod::Continuity,
        estimate: rbc.bias_corrected,
        p_value: rbc.p_value_robust,
        n_used: rbc.base.n_eff_below + rbc.base.n_eff_above,
        h: Some(cfg.h_below),
    })
}

/// Fisher permutation test of the covariate's difference in means inside a window.
pub fn covariate_balance_locrand(sample: &RdSample, name: &str, window: &Window, fisher: &FisherConfig) -> Result<BalanceRecord> {
    let rows = covariate_rows(sample, name)?;
    let sub = sample.subset(&rows)?;
    let window = Window::new(&sub, window.w_left(), window.w_right())?;
    let p_value = covariate_fisher_pvalue(&sub, name, &window, fisher)?.ok_or(RdError::EmptyGroup)?;
    let z = sub.covariate(name).expect("checked above");
    let centered = sub.centered_scores();
    let side_mean = |above: bool| {
        let v: Vec<f64> = (0..z.len())
            .filter(|&i| centered[i] >= -window.w_left() && centered[i] <= window.w_right() && (centered[i] >= 0.0) == above)
            .map(|i| z[i])
            .collect();
        crate::stats::mean(&v)
    };
    Ok(BalanceRecord {
        covariate: name.to_string(),
        method: BalanceMethod::Locrand,
        estimate: side_mean(true) - side_mean(false),
        p_value,
        n_used: window.n_w,
        h: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinomialRecord {
    /// Units at or above the cutoff inside the window.
    pub k: u64,
    pub n: u64,
    pub prob: f64,
    pub p_value: f64,
}

/// Exact two-sided binomial test of the treated share inside a window,
/// doubling the smaller tail.
pub fn binomial_test(sample: &RdSample, window: &Window, prob: f64) -> Result<BinomialRecord> {
    let window = Window::new(sample, window.w_left(), window.w_right())?;
    binomial_counts(window.n_plus as u64, window.n_w as u64, prob)
}

pub fn binomial_counts(k: u64, n: u64, prob: f64) -> Result<BinomialRecord> {
    if n == 0 {
        return Err(RdError::TooFewObservations("binomial test needs at least one unit in the window".into()));
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(RdError::InvalidArgument(format!("probability {prob} not in [0, 1]")));
    }
    if k > n {
        return Err(RdError::InvalidArgument(format!("k = {k} exceeds n = {n}")));
    }
    let tail = binom_cdf(n, k, prob).min(binom_sf(n, k, prob));
    Ok(BinomialRecord {
        k,
        n,
        prob,
        p_value: (2.0 * tail).min(1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRecord {
    pub h: f64,
    pub bins_per_side: usize,
    pub n_below: usize,
    pub n_above: usize,
    pub f_below: f64,
    pub f_above: f64,
    pub se: f64,
    pub statistic: f64,
    pub p_value: f64,
}

/// Intercept at the cutoff and its OLS variance for a straight-line fit of
/// bin heights on bin midpoints.
fn line_intercept(mid: &[f64], height: &[f64]) -> (f64, f64) {
    let j = mid.len() as f64;
    let mx = mid.iter().sum::<f64>() / j;
    let my = height.iter().sum::<f64>() / j;
    let sxx: f64 = mid.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = mid.iter().zip(height).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = mid.iter().zip(height).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let s2 = rss / (j - 2.0);
    (intercept, s2 * (1.0 / j + mx * mx / sxx))
}

/// Continuity test for the score density: binned heights on each side are
/// fit by straight lines and the two boundary intercepts compared.
pub fn density_test(sample: &RdSample, h: f64, bins_per_side: usize) -> Result<DensityRecord> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(RdError::InvalidArgument(format!("density bandwidth {h} must be positive")));
    }
    if bins_per_side < 3 {
        return Err(RdError::InvalidArgument("density test needs at least 3 bins per side".into()));
    }
    let centered = sample.centered_scores();
    let n = centered.len() as f64;
    let width = h / bins_per_side as f64;
    let mut below = vec![0usize; bins_per_side];
    let mut above = vec![0usize; bins_per_side];
    for &x in &centered {
        if (-h..0.0).contains(&x) {
            let b = (((-x) / width).ceil() as usize).clamp(1, bins_per_side) - 1;
            below[b] += 1;
        } else if (0.0..=h).contains(&x) {
            let b = ((x / width).floor() as usize).min(bins_per_side - 1);
            above[b] += 1;
        }
    }
    let n_below: usize = below.iter().sum();
    let n_above: usize = above.iter().sum();
    if n_below == 0 {
        return Err(RdError::EmptySide(Side::Below));
    }
    if n_above == 0 {
        return Err(RdError::EmptySide(Side::Above));
    }
    if n_below + n_above < 2 * bins_per_side {
        return Err(RdError::TooFewObservations(format!(
            "density test needs at least {} observations within the bandwidth",
            2 * bins_per_side
        )));
    }
    let heights = |counts: &[usize]| counts.iter().map(|&c| c as f64 / (n * width)).collect::<Vec<_>>();
    // bin b on the below side spans [-(b+1)w, -bw)
    let mid_below: Vec<f64> = (0..bins_per_side).map(|b| -(b as f64 + 0.5) * width).collect();
    let mid_above: Vec<f64> = (0..bins_per_side).map(|b| (b as f64 + 0.5) * width).collect();
    let (f_below, v_below) = line_intercept(&mid_below, &heights(&below));
    let (f_above, v_above) = line_intercept(&mid_above, &heights(&above));
    let se = (v_below + v_above).sqrt();
    let diff = f_above - f_below;
    let statistic = if se > 0.0 { diff / se } else { 0.0 };
    Ok(DensityRecord {
        h,
        bins_per_side,
        n_below,
        n_above,
        f_below,
        f_above,
        se,
        statistic,
        p_value: if se > 0.0 { two_sided_p(statistic) } else if diff == 0.0 { 1.0 } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboRecord {
    pub cutoff: f64,
    pub side_used: Side,
    pub n_used: usize,
    pub min_score_used: f64,
    pub max_score_used: f64,
    pub h: f64,
    pub tau_hat: f64,
    pub p_value_rbc: f64,
}

/// Side-specific score quantiles {0.25, 0.45, 0.55, 0.75}, dropping any
/// value within `exclusion` of the cutoff.
pub fn default_placebo_grid(sample: &RdSample, exclusion: f64) -> Vec<f64> {
    let c = sample.cutoff();
    let mut grid = Vec::new();
    for below in [true, false] {
        let mut side: Vec<f64> = sample.score().iter().copied().filter(|&x| (x < c) == below).collect();
        if side.is_empty() {
            continue;
        }
        side.sort_by(f64::total_cmp);
        for q in [0.25, 0.45, 0.55, 0.75] {
            let v = quantile_sorted(&side, q);
            if (v - c).abs() > exclusion && !grid.contains(&v) {
                grid.push(v);
            }
        }
    }
    grid
}

/// Re-estimates at artificial cutoffs using only units on the same side of
/// the true cutoff as the artificial one.
pub fn placebo_cutoffs(sample: &RdSample, grid: &[f64], config: &ContinuityConfig) -> Result<Vec<PlaceboRecord>> {
    if sample.unit_cutoffs().is_some() {
        return Err(RdError::InvalidArgument("placebo cutoffs need a single cutoff; normalize the sample first".into()));
    }
    let c = sample.cutoff();
    if let Some(&bad) = grid.iter().find(|&&g| g == c) {
        return Err(RdError::GridContainsTrueCutoff(bad));
    }
    grid.par_iter()
        .map(|&placebo| {
            let side = if placebo > c { Side::Above } else { Side::Below };
            let rows: Vec<usize> = (0..sample.len())
                .filter(|&i| match side {
                    Side::Above => sample.score()[i] >= c,
                    Side::Below => sample.score()[i] < c,
                })
                .collect();
            let insufficient = |_| RdError::InsufficientSideData(placebo);
            let x: Vec<f64> = rows.iter().map(|&i| sample.score()[i]).collect();
            let centered: Vec<f64> = x.iter().map(|v| v - placebo).collect();
            let y: Vec<f64> = rows.iter().map(|&i| sample.outcome()[i]).collect();
            let cfg = config.resolve(&centered, &y).map_err(insufficient)?;
            let rbc = rbc_centered(&centered, &y, None, EstimandKind::Sharp, &cfg).map_err(insufficient)?;
            Ok(PlaceboRecord {
                cutoff: placebo,
                side_used: side,
                n_used: rows.len(),
                min_score_used: x.iter().copied().fold(f64::INFINITY, f64::min),
                max_score_used: x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                h: cfg.h_below,
                tau_hat: rbc.base.tau_hat,
                p_value_rbc: rbc.p_value_robust,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonutRecord {
    pub radius: f64,
    pub n_dropped: usize,
    pub tau_hat: f64,
    pub ci_rbc: Interval,
    pub p_value_rbc: f64,
}

fn rbc_on(sample: &RdSample, rows: Option<&[usize]>, kind: EstimandKind, cfg: &EstimatorConfig) -> Result<RbcResult> {
    let centered = sample.centered_scores();
    let d = match kind {
        EstimandKind::Fuzzy => Some(sample.received().ok_or(RdError::MissingTreatmentColumn)?),
        _ => None,
    };
    match rows {
        None => rbc_centered(&centered, sample.outcome(), d, kind, cfg),
        Some(rows) => {
            let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let dd = d.map(pick);
            rbc_centered(&pick(&centered), &pick(sample.outcome()), dd.as_deref(), kind, cfg)
        }
    }
}

/// Re-estimates after dropping units with `|X - c| < r`, keeping the
/// baseline bandwidths.
pub fn donut_hole(sample: &RdSample, radii: &[f64], kind: EstimandKind, cfg: &EstimatorConfig) -> Result<Vec<DonutRecord>> {
    if radii.iter().any(|r| !(*r >= 0.0)) || radii.windows(2).any(|w| w[1] < w[0]) {
        return Err(RdError::InvalidArgument("donut radii must be non-negative and ascending".into()));
    }
    let centered = sample.centered_scores();
    radii
        .par_iter()
        .map(|&r| {
            let rows: Vec<usize> = (0..centered.len()).filter(|&i| centered[i].abs() >= r).collect();
            let n_dropped = centered.len() - rows.len();
            let rbc = if n_dropped == 0 {
                rbc_on(sample, None, kind, cfg)
            } else {
                rbc_on(sample, Some(&rows), kind, cfg)
            }
            .map_err(|_| RdError::InsufficientData(r))?;
            Ok(DonutRecord {
                radius: r,
                n_dropped,
                tau_hat: rbc.base.tau_hat,
                ci_rbc: rbc.ci_rbc,
                p_value_rbc: rbc.p_value_robust,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub h: f64,
    pub baseline: bool,
    pub n_eff: usize,
    pub tau_hat: f64,
    pub se_conventional: f64,
    pub ci_rbc: Interval,
    pub p_value_rbc: f64,
}

/// RBC estimates over a list of common bandwidths.
pub fn bandwidth_sensitivity(
    sample: &RdSample,
    bandwidths: &[f64],
    baseline_h: f64,
    kind: EstimandKind,
    cfg: &EstimatorConfig,
) -> Result<Vec<SensitivityRecord>> {
    if bandwidths.is_empty() {
        return Err(RdError::InvalidArgument("bandwidth list is empty".into()));
    }
    if let Some(h) = bandwidths.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
        return Err(RdError::InvalidArgument(format!("bandwidth {h} must be positive")));
    }
    bandwidths
        .par_iter()
        .map(|&h| {
            let c = EstimatorConfig::new(cfg.p, cfg.kernel, h).with_level(cfg.level);
            let rbc = rbc_on(sample, None, kind, &c)?;
            Ok(SensitivityRecord {
                h,
                baseline: h == baseline_h,
                n_eff: rbc.base.n_eff_below + rbc.base.n_eff_above,
                tau_hat: rbc.base.tau_hat,
                se_conventional: rbc.base.se_conventional,
                ci_rbc: rbc.ci_rbc,
                p_value_rbc: rbc.p_value_robust,
            })
        })
        .collect()
}

/// Settings for the full battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub kind: EstimandKind,
    pub continuity: ContinuityConfig,
    pub covariates: Vec<String>,
    /// Local randomization window half-width for the locrand balance tests
    /// and the binomial test; both are skipped when absent.
    pub window: Option<f64>,
    pub fisher: FisherConfig,
    pub binomial_prob: f64,
    pub density_bins: usize,
    /// Density test bandwidth; defaults to the baseline bandwidth.
    pub density_h: Option<f64>,
    pub placebo_grid: Option<Vec<f64>>,
    pub donut_radii: Vec<f64>,
    /// Sensitivity bandwidths as multiples of the baseline bandwidth.
    pub sensitivity_factors: Vec<f64>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            kind: EstimandKind::Sharp,
            continuity: ContinuityConfig::default(),
            covariates: Vec::new(),
            window: None,
            fisher: FisherConfig::default(),
            binomial_prob: 0.5,
            density_bins: 20,
            density_h: None,
            placebo_grid: None,
            donut_radii: Vec::new(),
            sensitivity_factors: vec![0.5, 0.75, 1.0, 1.25, 1.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceEntry {
    pub covariate: String,
    pub continuity: Option<BalanceRecord>,
    pub locrand: Option<BalanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub baseline_h: f64,
    pub balance: Vec<BalanceEntry>,
    pub binomial: Option<BinomialRecord>,
    pub density: Option<DensityRecord>,
    pub placebo_cutoffs: Vec<PlaceboRecord>,
    pub donut: Vec<DonutRecord>,
    pub sensitivity: Vec<SensitivityRecord>,
    /// Tests that were skipped or failed, with the reason.
    pub notes: Vec<String>,
}

fn noted<T>(notes: &mut Vec<String>, label: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{label}: {} ({e})", e.code()));
            None
        }
    }
}

/// Runs every configured test. Individual failures are recorded in
/// `notes`; only a failure to fix the baseline bandwidth is fatal.
pub fn run_validation(sample: &RdSample, config: &ValidationConfig) -> Result<ValidationReport> {
    let centered = sample.centered_scores();
    let base_cfg = config.continuity.resolve(&centered, sample.outcome())?;
    let baseline_h = base_cfg.h_below;
    let window = config.window.map(|w| Window::symmetric(sample, w)).transpose()?;

    let (balance, ((binomial, density), (placebo, (donut, sensitivity)))) = rayon::join(
        || {
            config
                .covariates
                .par_iter()
                .map(|name| {
                    let cont = covariate_balance_continuity(sample, name, &config.continuity);
                    let loc = window
                        .as_ref()
                        .map(|w| covariate_balance_locrand(sample, name, w, &config.fisher));
                    (name.clone(), cont, loc)
                })
                .collect::<Vec<_>>()
        },
        || {
            rayon::join(
                || {
                    rayon::join(
                        || window.as_ref().map(|w| binomial_test(sample, w, config.binomial_prob)),
                        || density_test(sample, config.density_h.unwrap_or(baseline_h), config.density_bins),
                    )
                },
                || {
                    rayon::join(
                        || {
                            let grid = config
                                .placebo_grid
                                .clone()
                                .unwrap_or_else(|| default_placebo_grid(sample, baseline_h));
                            placebo_cutoffs(sample, &grid, &config.continuity)
                        },
                        || {
                            rayon::join(
                                || donut_hole(sample, &config.donut_radii, config.kind, &base_cfg),
                                || {
                                    let hs: Vec<f64> =
                                        config.sensitivity_factors.iter().map(|f| f * baseline_h).collect();
                                    if hs.is_empty() {
                                        Ok(Vec::new())
                                    } else {
                                        bandwidth_sensitivity(sample, &hs, baseline_h, config.kind, &base_cfg)
                                    }
                                },
                            )
                        },
                    )
                },
            )
        },
    );

    let mut notes = Vec::new();
    let balance = balance
        .into_iter()
        .map(|(name, cont, loc)| BalanceEntry {
            continuity: noted(&mut notes, &format!("balance/continuity/{name}"), cont),
            locrand: loc.and_then(|r| noted(&mut notes, &format!("balance/locrand/{name}"), r)),
            covariate: name,
        })
        .collect();
    if window.is_none() {
        notes.push("binomial and locrand balance skipped: no window supplied".into());
    }
    let binomial = binomial.and_then(|r| noted(&mut notes, "binomial", r));
    let density = noted(&mut notes, "density", density);
    let placebo_cutoffs = noted(&mut notes, "placebo", placebo).unwrap_or_default();
    let donut = noted(&mut notes, "donut", donut).unwrap_or_default();
    let sensitivity = noted(&mut notes, "sensitivity", sensitivity).unwrap_or_default();
    Ok(ValidationReport {
        baseline_h,
        balance,
        binomial,
        density,
        placebo_cutoffs,
        donut,
        sensitivity,
        notes,
    })
}

impl ValidationReport {
    /// Wide table with one row per test.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["test", "label", "estimate", "p_value", "lower", "upper", "n"])?;
        let num = |v: f64| v.to_string();
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        let mut row = |test: &str, label: String, est: Option<f64>, p: Option<f64>, ci: Option<Interval>, n: usize| {
            w.write_record([
                test.to_string(),
                label,
                opt(est),
                opt(p),
                opt(ci.map(|c| c.lower)),
                opt(ci.map(|c| c.upper)),
                n.to_string(),
            ])
        };
        for b in &self.balance {
            for r in b.continuity.iter().chain(&b.locrand) {
                let test = match r.method {
                    BalanceMethod::Continuity => "balance_continuity",
                    BalanceMethod::Locrand => "balance_locrand",
                };
                row(test, r.covariate.clone(), Some(r.estimate), Some(r.p_value), None, r.n_used)?;
            }
        }
        if let Some(b) = &self.binomial {
            row("binomial", format!("k={}", b.k), Some(b.k as f64 / b.n as f64), Some(b.p_value), None, b.n as usize)?;
        }
        if let Some(d) = &self.density {
            row("density", format!("h={}", d.h), Some(d.f_above - d.f_below), Some(d.p_value), None, d.n_below + d.n_above)?;
        }
        for p in &self.placebo_cutoffs {
            row("placebo", format!("cutoff={}", p.cutoff), Some(p.tau_hat), Some(p.p_value_rbc), None, p.n_used)?;
        }
        for d in &self.donut {
            row("donut", format!("radius={}", d.radius), Some(d.tau_hat), Some(d.p_value_rbc), Some(d.ci_rbc), d.n_dropped)?;
        }
        for s in &self.sensitivity {
            row("sensitivity", format!("h={}", s.h), Some(s.tau_hat), Some(s.p_value_rbc), Some(s.ci_rbc), s.n_eff)?;
        }
        let bytes = w.into_inner().map_err(|e| RdError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
