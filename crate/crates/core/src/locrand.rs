//! Local randomization inference inside a window around the cutoff.
//!
//! Units in the window are treated as if randomly assigned, either by a
//! fixed-margins design (every assignment with `N+` treated units equally
//! likely, probability `1 / C(N, N+)`) or by independent coin flips.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuity::Interval;
use crate::error::{RdError, Result};
use crate::sample::RdSample;
use crate::stats::{choose_exact, compensated_sum, mean, sample_variance, substream_rng, two_sided_p, z_for_level};

/// Draws per Monte Carlo batch; each batch has its own RNG substream.
const BATCH: usize = 1000;

/// Neighborhood `[c - w_left, c + w_right]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub cutoff: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_w: usize,
    pub n_plus: usize,
    pub n_minus: usize,
}

impl Window {
    pub fn symmetric(sample: &RdSample, half_width: f64) -> Result<Self> {
        Self::new(sample, half_width, half_width)
    }

    pub fn new(sample: &RdSample, w_left: f64, w_right: f64) -> Result<Self> {
        if !(w_left >= 0.0 && w_right >= 0.0) {
            return Err(RdError::InvalidArgument("window half-widths must be non-negative".into()));
        }
        let c = sample.reference_cutoff();
        let mut w = Window {
            cutoff: c,
            lower: c - w_left,
            upper: c + w_right,
            n_w: 0,
            n_plus: 0,
            n_minus: 0,
        };
        for x in sample.centered_scores() {
            if w.contains_centered(x) {
                w.n_w += 1;
                if x >= 0.0 {
                    w.n_plus += 1;
                } else {
                    w.n_minus += 1;
                }
            }
        }
        Ok(w)
    }

    pub fn w_left(&self) -> f64 {
        self.cutoff - self.lower
    }

    pub fn w_right(&self) -> f64 {
        self.upper - self.cutoff
    }

    fn contains_centered(&self, x: f64) -> bool {
        -self.w_left() <= x && x <= self.w_right()
    }

    /// Rows of `sample` inside the window, with their assignment.
    pub(crate) fn members(&self, sample: &RdSample) -> (Vec<usize>, Vec<bool>) {
        sample
            .centered_scores()
            .into_iter()
            .enumerate()
            .filter(|(_, x)| self.contains_centered(*x))
            .map(|(i, x)| (i, x >= 0.0))
            .unzip()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AssignmentModel {
    #[default]
    FixedMargins,
    Bernoulli { prob: f64 },
}

impl AssignmentModel {
    /// `P[T_i = 1]` for units in the window.
    pub fn treatment_probability(&self, window: &Window) -> f64 {
        match self {
            AssignmentModel::FixedMargins => window.n_plus as f64 / window.n_w as f64,
            AssignmentModel::Bernoulli { prob } => *prob,
        }
    }

    fn validate(&self) -> Result<()> {
        if let AssignmentModel::Bernoulli { prob } = self {
            if !(*prob > 0.0 && *prob < 1.0) {
                return Err(RdError::InvalidArgument(format!("Bernoulli probability {prob} not in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Fisher,
    #[default]
    Neyman,
    Superpop,
}

impl std::str::FromStr for Framework {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fisher" => Ok(Framework::Fisher),
            "neyman" => Ok(Framework::Neyman),
            "superpop" | "super-population" => Ok(Framework::Superpop),
            other => Err(RdError::InvalidArgument(format!("unknown framework `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocRandEstimate {
    pub tau_hat: f64,
    pub ybar_plus: f64,
    pub ybar_minus: f64,
    pub dbar_plus: Option<f64>,
    pub dbar_minus: Option<f64>,
    pub framework: Framework,
    pub model: AssignmentModel,
    pub window: Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatistic {
    #[default]
    DiffMeans,
    /// Difference in means over its unpooled standard error.
    Studentized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherConfig {
    pub statistic: TestStatistic,
    /// Enumerate every assignment when there are at most this many.
    pub max_exhaustive: u64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            statistic: TestStatistic::DiffMeans,
            max_exhaustive: 200_000,
            draws: 9999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    pub p_value: f64,
    /// True when every assignment was enumerated.
    pub exact: bool,
    /// Assignments evaluated (all of them when exact).
    pub draws: u64,
    /// Assignments at least as extreme as the observed one.
    pub extreme: u64,
    pub statistic_observed: f64,
    pub ci: Option<Interval>,
}

/// Weighted side means for one response.
fn weighted_means(values: &[f64], treated: &[bool], model: &AssignmentModel, framework: Framework, window: &Window) -> (f64, f64) {
    let n = values.len() as f64;
    let prob = model.treatment_probability(window);
    let n_plus = window.n_plus as f64;
    let n_minus = window.n_minus as f64;
    let weight = |t: bool| match framework {
        Framework::Superpop => {
            if t {
                prob * n / n_plus
            } else {
                (1.0 - prob) * n / n_minus
            }
        }
        _ => 1.0,
    };
    let plus = compensated_sum(values.iter().zip(treated).filter(|(_, t)| **t).map(|(v, _)| weight(true) / prob * v));
    let minus = compensated_sum(
        values
            .iter()
            .zip(treated)
            .filter(|(_, t)| !**t)
            .map(|(v, _)| weight(false) / (1.0 - prob) * v),
    );
    (plus / n, minus / n)
}

fn window_data(sample: &RdSample, window: &Window) -> Result<(Vec<usize>, Vec<bool>)> {
    let (rows, treated) = window.members(sample);
    let n_plus = treated.iter().filter(|t| **t).count();
    if n_plus == 0 || n_plus == rows.len() {
        return Err(RdError::EmptyGroup);
    }
    Ok((rows, treated))
}

fn refresh(window: &Window, sample: &RdSample) -> Result<Window> {
    Window::new(sample, window.w_left(), window.w_right())
}

/// Difference in (framework-weighted) means inside the window.
pub fn diff_in_means(sample: &RdSample, window: &Window, model: &AssignmentModel, framework: Framework) -> Result<LocRandEstimate> {
    model.validate()?;
    let window = refresh(window, sample)?;
    let (rows, treated) = window_data(sample, &window)?;
    let y: Vec<f64> = rows.iter().map(|&i| sample.outcome()[i]).collect();
    let (ybar_plus, ybar_minus) = weighted_means(&y, &treated, model, framework, &window);
    Ok(LocRandEstimate {
        tau_hat: ybar_plus - ybar_minus,
        ybar_plus,
        ybar_minus,
        dbar_plus: None,
        dbar_minus: None,
        framework,
        model: *model,
        window,
    })
}

/// Ratio of the outcome and treatment-receipt differences in means.
pub fn fuzzy_locrand(sample: &RdSample, window: &Window, model: &AssignmentModel, framework: Framework) -> Result<LocRandEstimate> {
    let d_all = sample.received().ok_or(RdError::MissingTreatmentColumn)?;
    let mut est = diff_in_means(sample, window, model, framework)?;
    let (rows, treated) = window_data(sample, &est.window)?;
    let d: Vec<f64> = rows.iter().map(|&i| d_all[i]).collect();
    let (dbar_plus, dbar_minus) = weighted_means(&d, &treated, model, framework, &est.window);
    let first_stage = dbar_plus - dbar_minus;
    if !(first_stage.abs() >= crate::continuity::WEAK_FIRST_STAGE) {
        return Err(RdError::WeakFirstStage { first_stage });
    }
    est.tau_hat = (est.ybar_plus - est.ybar_minus) / first_stage;
    est.dbar_plus = Some(dbar_plus);
    est.dbar_minus = Some(dbar_minus);
    Ok(est)
}

/// Precomputed moments of the window's outcomes so that any assignment's
/// statistic needs only the treated-group sums.
struct StatContext {
    total: f64,
    total_sq: f64,
    n: usize,
    kind: TestStatistic,
}

impl StatContext {
    fn new(y: &[f64], kind: TestStatistic) -> Self {
        Self {
            total: compensated_sum(y.iter().copied()),
            total_sq: compensated_sum(y.iter().map(|v| v * v)),
            n: y.len(),
            kind,
        }
    }

    fn statistic(&self, sum_t: f64, sumsq_t: f64, n_t: usize) -> f64 {
        let n_c = self.n - n_t;
        let mean_t = sum_t / n_t as f64;
        let mean_c = (self.total - sum_t) / n_c as f64;
        let diff = mean_t - mean_c;
        match self.kind {
            TestStatistic::DiffMeans => diff,
            TestStatistic::Studentized => {
                let var = |s: f64, ss: f64, k: usize| {
                    if k < 2 {
                        0.0
                    } else {
                        ((ss - s * s / k as f64) / (k - 1) as f64).max(0.0)
                    }
                };
                let se = (var(sum_t, sumsq_t, n_t) / n_t as f64
                    + var(self.total - sum_t, self.total_sq - sumsq_t, n_c) / n_c as f64)
                    .sqrt();
                if se > 0.0 {
                    diff / se
                } else if diff == 0.0 {
                    0.0
                } else {
                    diff.signum() * f64::INFINITY
                }
            }
        }
    }

    fn of_assignment(&self, y: &[f64], treated: impl Iterator<Item = usize>) -> f64 {
        let mut s = 0.0;
        let mut ss = 0.0;
        let mut k = 0;
        for i in treated {
            s += y[i];
            ss += y[i] * y[i];
            k += 1;
        }
        self.statistic(s, ss, k)
    }
}

/// Calls `f` on every `k`-subset of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        if idx[i] == i + n - k {
            return;
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Fisherian randomization p-value of the sharp null of no effect.
pub fn fisher_pvalue(sample: &RdSample, window: &Window, model: &AssignmentModel, config: &FisherConfig) -> Result<FisherResult> {
    model.validate()?;
    let window = refresh(window, sample)?;
    let (rows, treated) = window_data(sample, &window)?;
    let y: Vec<f64> = rows.iter().map(|&i| sample.outcome()[i]).collect();
    fisher_on_values(&y, &treated, model, config)
}

pub(crate) fn fisher_on_values(y: &[f64], treated: &[bool], model: &AssignmentModel, config: &FisherConfig) -> Result<FisherResult> {
    let n = y.len();
    let n_t = treated.iter().filter(|t| **t).count();
    if n_t == 0 || n_t == n {
        return Err(RdError::EmptyGroup);
    }
    let ctx = StatContext::new(y, config.statistic);
    let observed = ctx.of_assignment(y, (0..n).filter(|&i| treated[i]));
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let magnitude = lo.abs().max(hi.abs());
    let scale = match config.statistic {
        TestStatistic::DiffMeans => hi - lo,
        TestStatistic::Studentized => 1.0,
    };
    // ties with the observed statistic count as extreme
    let threshold = if observed.is_finite() {
        observed.abs() - (1e-9 * (observed.abs() + scale) + 1e-12 * magnitude)
    } else {
        f64::INFINITY
    };
    let extreme = |s: f64| s.abs() >= threshold;

    match model {
        AssignmentModel::FixedMargins => {
            let total = choose_exact(n as u64, n_t as u64);
            if let Some(total) = total.filter(|t| *t <= config.max_exhaustive as u128) {
                let mut count: u64 = 0;
                for_each_combination(n, n_t, |c| {
                    if extreme(ctx.of_assignment(y, c.iter().copied())) {
                        count += 1;
                    }
                });
                return Ok(FisherResult {
                    p_value: count as f64 / total as f64,
                    exact: true,
                    draws: total as u64,
                    extreme: count,
                    statistic_observed: observed,
                    ci: None,
                });
            }
            let count = monte_carlo(config, |rng| {
                let picked = sample_indices(rng, n, n_t);
                extreme(ctx.of_assignment(y, picked.into_iter()))
            });
            Ok(mc_result(count, config.draws, observed))
        }
        AssignmentModel::Bernoulli { prob } => {
            let prob = *prob;
            if n < 63 && (1u64 << n) <= config.max_exhaustive {
                let mut num = 0.0;
                let mut den = 0.0;
                let mut count = 0u64;
                for mask in 0u64..(1u64 << n) {
                    let k = mask.count_ones() as usize;
                    if k == 0 || k == n {
                        continue;
                    }
                    let w = prob.powi(k as i32) * (1.0 - prob).powi((n - k) as i32);
                    den += w;
                    if extreme(ctx.of_assignment(y, (0..n).filter(|i| mask >> i & 1 == 1))) {
                        num += w;
                        count += 1;
                    }
                }
                return Ok(FisherResult {
                    p_value: (num / den).min(1.0),
                    exact: true,
                    draws: (1u64 << n) - 2,
                    extreme: count,
                    statistic_observed: observed,
                    ci: None,
                });
            }
            let count = monte_carlo(config, |rng| loop {
                let t: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < prob).collect();
                if !t.is_empty() && t.len() < n {
                    break extreme(ctx.of_assignment(y, t.into_iter()));
                }
            });
            Ok(mc_result(count, config.draws, observed))
        }
    }
}

fn monte_carlo<F>(config: &FisherConfig, is_extreme: F) -> u64
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> bool + Sync,
{
    let batches = config.draws.div_ceil(BATCH);
    (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream_rng(config.seed, b as u64);
            let size = BATCH.min(config.draws - b * BATCH);
            (0..size).filter(|_| is_extreme(&mut rng)).count() as u64
        })
        .sum()
}

fn mc_result(count: u64, draws: usize, observed: f64) -> FisherResult {
    FisherResult {
        p_value: (count + 1) as f64 / (draws + 1) as f64,
        exact: false,
        draws: draws as u64,
        extreme: count,
        statistic_observed: observed,
        ci: None,
    }
}

/// Confidence set from inverting Fisher tests of constant-effect nulls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherCi {
    pub interval: Option<Interval>,
    pub grid: Vec<f64>,
    pub p_values: Vec<f64>,
    pub alpha: f64,
    /// Accepted grid points do not form a contiguous run.
    pub non_convex: bool,
    /// No grid point was accepted.
    pub empty: bool,
}

/// 201-point grid spanning `tau_hat +/- 5` Neyman standard errors.
pub fn default_tau_grid(sample: &RdSample, window: &Window) -> Result<Vec<f64>> {
    let ney = neyman_ci(sample, window, Framework::Neyman, 0.05)?;
    let center = ney.estimate.tau_hat;
    let se = if ney.se > 0.0 { ney.se } else { 1e-8_f64.max(center.abs() * 1e-8) };
    Ok((0..201).map(|i| center - 5.0 * se + 10.0 * se * i as f64 / 200.0).collect())
}

pub fn fisher_ci(
    sample: &RdSample,
    window: &Window,
    model: &AssignmentModel,
    grid: &[f64],
    alpha: f64,
    config: &FisherConfig,
) -> Result<FisherCi> {
    model.validate()?;
    let window = refresh(window, sample)?;
    let (rows, treated) = window_data(sample, &window)?;
    let y: Vec<f64> = rows.iter().map(|&i| sample.outcome()[i]).collect();
    let p_values = grid
        .par_iter()
        .map(|&tau0| {
            let adjusted: Vec<f64> = y
                .iter()
                .zip(&treated)
                .map(|(v, t)| if *t { v - tau0 } else { *v })
                .collect();
            fisher_on_values(&adjusted, &treated, model, config).map(|r| r.p_value)
        })
        .collect::<Result<Vec<f64>>>()?;
    let accepted: Vec<usize> = (0..grid.len()).filter(|&i| p_values[i] >= alpha).collect();
    let (interval, non_convex) = match (accepted.first(), accepted.last()) {
        (Some(&a), Some(&b)) => (
            Some(Interval {
                lower: grid[a],
                upper: grid[b],
            }),
            b - a + 1 != accepted.len(),
        ),
        _ => (None, false),
    };
    Ok(FisherCi {
        empty: interval.is_none(),
        interval,
        grid: grid.to_vec(),
        p_values,
        alpha,
        non_convex,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeymanResult {
    pub estimate: LocRandEstimate,
    pub se: f64,
    pub ci: Interval,
    pub p_value: f64,
    pub var_plus: f64,
    pub var_minus: f64,
    /// At least one group has zero sample variance.
    pub degenerate_variance: bool,
}

/// Normal-approximation interval with the conservative Neyman variance.
pub fn neyman_ci(sample: &RdSample, window: &Window, framework: Framework, alpha: f64) -> Result<NeymanResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RdError::InvalidArgument(format!("alpha {alpha} not in (0, 1)")));
    }
    let framework = match framework {
        Framework::Fisher => Framework::Neyman,
        f => f,
    };
    let estimate = diff_in_means(sample, window, &AssignmentModel::FixedMargins, framework)?;
    let (rows, treated) = estimate.window.members(sample);
    let group = |want: bool| -> Vec<f64> {
        rows.iter()
            .zip(&treated)
            .filter(|(_, t)| **t == want)
            .map(|(&i, _)| sample.outcome()[i])
            .collect()
    };
    let (yp, ym) = (group(true), group(false));
    if yp.len() < 2 || ym.len() < 2 {
        return Err(RdError::TooFewObservations("Neyman variance needs two units per group".into()));
    }
    let var_plus = sample_variance(&yp);
    let var_minus = sample_variance(&ym);
    let se = (var_plus / yp.len() as f64 + var_minus / ym.len() as f64).sqrt();
    let z = z_for_level(1.0 - alpha);
    let tau = estimate.tau_hat;
    Ok(NeymanResult {
        ci: Interval::centered(tau, z * se),
        p_value: if se > 0.0 {
            two_sided_p(tau / se)
        } else if tau == 0.0 {
            1.0
        } else {
            0.0
        },
        se,
        var_plus,
        var_minus,
        degenerate_variance: var_plus == 0.0 || var_minus == 0.0,
        estimate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePValue {
    pub covariate: String,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTraceEntry {
    pub half_width: f64,
    pub n_minus: usize,
    pub n_plus: usize,
    /// Fewer than two units on a side: not tested.
    pub skipped: bool,
    pub p_values: Vec<CovariatePValue>,
    pub min_p: Option<f64>,
    pub balanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSelection {
    pub window: Window,
    pub half_width: f64,
    pub alpha: f64,
    /// No candidate passed; the smallest feasible candidate is returned.
    pub no_balanced_window: bool,
    pub trace: Vec<WindowTraceEntry>,
}

/// Balance p-value of one covariate inside a window, with listwise deletion
/// of missing values. `None` when a group has no non-missing values.
fn covariate_balance_p(
    sample: &RdSample,
    name: &str,
    window: &Window,
    model: &AssignmentModel,
    config: &FisherConfig,
) -> Result<Option<f64>> {
    let z = sample.covariate(name).ok_or_else(|| RdError::MissingCovariate(name.to_string()))?;
    let (rows, treated) = window.members(sample);
    let (vals, t): (Vec<f64>, Vec<bool>) = rows
        .iter()
        .zip(&treated)
        .filter(|(&i, _)| z[i].is_finite())
        .map(|(&i, &t)| (z[i], t))
        .unzip();
    let n_t = t.iter().filter(|v| **v).count();
    if n_t == 0 || n_t == t.len() {
        return Ok(None);
    }
    Ok(Some(fisher_on_values(&vals, &t, model, config)?.p_value))
}

/// Largest candidate half-width whose window, and every smaller candidate
/// window, passes covariate balance at level `alpha`.
pub fn select_window(
    sample: &RdSample,
    covariates: &[String],
    candidates: &[f64],
    alpha: f64,
    config: &FisherConfig,
) -> Result<WindowSelection> {
    if covariates.is_empty() {
        return Err(RdError::NoCovariates);
    }
    if candidates.is_empty() {
        return Err(RdError::InvalidArgument("no candidate windows".into()));
    }
    if candidates.windows(2).any(|w| !(w[0] < w[1])) || !(candidates[0] > 0.0) {
        return Err(RdError::InvalidArgument("candidate half-widths must be positive and strictly ascending".into()));
    }
    for c in covariates {
        if sample.covariate(c).is_none() {
            return Err(RdError::MissingCovariate(c.clone()));
        }
    }
    let model = AssignmentModel::FixedMargins;
    let trace: Vec<WindowTraceEntry> = candidates
        .par_iter()
        .map(|&w| {
            let window = Window::symmetric(sample, w)?;
            let skipped = window.n_plus < 2 || window.n_minus < 2;
            let mut p_values = Vec::with_capacity(covariates.len());
            if !skipped {
                for c in covariates {
                    p_values.push(CovariatePValue {
                        covariate: c.clone(),
                        p_value: covariate_balance_p(sample, c, &window, &model, config)?,
                    });
                }
            }
            let min_p = p_values.iter().filter_map(|p| p.p_value).reduce(f64::min);
            Ok(WindowTraceEntry {
                half_width: w,
                n_minus: window.n_minus,
                n_plus: window.n_plus,
                skipped,
                balanced: !skipped && min_p.is_none_or(|p| p >= alpha),
                p_values,
                min_p,
            })
        })
        .collect::<Result<_>>()?;

    let feasible: Vec<usize> = (0..trace.len()).filter(|&i| !trace[i].skipped).collect();
    let first = *feasible.first().ok_or(RdError::NoFeasibleWindow)?;
    let mut chosen = None;
    for &i in &feasible {
        if trace[i].balanced {
            chosen = Some(i);
        } else {
            break;
        }
    }
    let (index, no_balanced_window) = match chosen {
        Some(i) => (i, false),
        None => (first, true),
    };
    let half_width = candidates[index];
    Ok(WindowSelection {
        window: Window::symmetric(sample, half_width)?,
        half_width,
        alpha,
        no_balanced_window,
        trace,
    })
}

/// Fisher balance p-value for a covariate inside a window.
pub fn covariate_fisher_pvalue(
    sample: &RdSample,
    name: &str,
    window: &Window,
    config: &FisherConfig,
) -> Result<Option<f64>> {
    covariate_balance_p(sample, name, window, &AssignmentModel::FixedMargins, config)
}

/// Plain mean of the outcome for units inside the window on one side.
pub fn side_mean(sample: &RdSample, window: &Window, treated_side: bool) -> Option<f64> {
    let (rows, treated) = window.members(sample);
    let vals: Vec<f64> = rows
        .iter()
        .zip(&treated)
        .filter(|(_, t)| **t == treated_side)
        .map(|(&i, _)| sample.outcome()[i])
        .collect();
    (!vals.is_empty()).then(|| mean(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RdSample {
        // treated {3, 5}, control {1, 3}
        RdSample::new(vec![-0.2, -0.1, 0.1, 0.2], vec![1.0, 3.0, 3.0, 5.0], 0.0).unwrap()
    }

    #[test]
    fn window_counts() {
        let s = small();
        let w = Window::symmetric(&s, 0.15).unwrap();
        assert_eq!((w.n_w, w.n_plus, w.n_minus), (2, 1, 1));
        assert_eq!((w.lower, w.upper), (-0.15, 0.15));
        let w = Window::new(&s, 0.05, 0.3).unwrap();
        assert_eq!((w.n_w, w.n_plus, w.n_minus), (2, 2, 0));
    }

    #[test]
    fn diff_in_means_small_example() {
        let s = small();
        let w = Window::symmetric(&s, 1.0).unwrap();
        let e = diff_in_means(&s, &w, &AssignmentModel::FixedMargins, Framework::Neyman).unwrap();
        assert_eq!(e.ybar_plus, 4.0);
        assert_eq!(e.ybar_minus, 2.0);
        assert_eq!(e.tau_hat, 2.0);
        let sp = diff_in_means(&s, &w, &AssignmentModel::Bernoulli { prob: 0.3 }, Framework::Superpop).unwrap();
        assert!((sp.tau_hat - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_outcomes_have_zero_effect() {
        let s = RdSample::new(vec![-0.2, -0.1, 0.1, 0.2, 0.3], vec![4.0; 5], 0.0).unwrap();
        let w = Window::symmetric(&s, 1.0).unwrap();
        let e = diff_in_means(&s, &w, &AssignmentModel::FixedMargins, Framework::Neyman).unwrap();
        assert_eq!(e.tau_hat, 0.0);
        let f = fisher_pvalue(&s, &w, &AssignmentModel::FixedMargins, &FisherConfig::default()).unwrap();
        assert_eq!(f.p_value, 1.0);
    }

    #[test]
    fn empty_group() {
        let s = RdSample::new(vec![0.1, 0.2], vec![1.0, 2.0], 0.0).unwrap();
        let w = Window::symmetric(&s, 1.0).unwrap();
        assert_eq!(
            diff_in_means(&s, &w, &AssignmentModel::FixedMargins, Framework::Neyman).unwrap_err(),
            RdError::EmptyGroup
        );
    }

    #[test]
    fn three_unit_enumeration() {
        // treated {2}, control {0, 1}
        let s = RdSample::new(vec![-0.2, -0.1, 0.1], vec![0.0, 1.0, 2.0], 0.0).unwrap();
        let w = Window::symmetric(&s, 1.0).unwrap();
        let f = fisher_pvalue(&s, &w, &AssignmentModel::FixedMargins, &FisherConfig::default()).unwrap();
        assert!(f.exact);
        assert_eq!(f.draws, 3);
        assert_eq!(f.extreme, 2);
        assert_eq!(f.p_value, 2.0 / 3.0);
        assert_eq!(f.statistic_observed, 1.5);
    }

    #[test]
    fn combinations_enumerated() {
        let mut seen = Vec::new();
        for_each_combination(5, 2, |c| seen.push(c.to_vec()));
        assert_eq!(seen.len(), 10);
        assert_eq!(seen[0], vec![0, 1]);
        assert_eq!(seen[9], vec![3, 4]);
        let mut count = 0;
        for_each_combination(4, 4, |_| count += 1);
        assert_eq!(count, 1);
    }

    #[test]
    fn monte_carlo_is_seeded() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 20.0 - 1.0).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + ((i * 7) % 5) as f64).collect();
        let s = RdSample::new(x, y, 0.0).unwrap();
        let w = Window::symmetric(&s, 1.0).unwrap();
        let cfg = FisherConfig {
            max_exhaustive: 10,
            draws: 2500,
            seed: 9,
            ..Default::default()
        };
        let a = fisher_pvalue(&s, &w, &AssignmentModel::FixedMargins, &cfg).unwrap();
        let b = fisher_pvalue(&s, &w, &AssignmentModel::FixedMargins, &cfg).unwrap();
        assert!(!a.exact);
        assert_eq!(a, b);
        assert_eq!(a.p_value, (a.extreme + 1) as f64 / 2501.0);
    }

    #[test]
    fn neyman_small_example() {
        let s = small();
        let w = Window::symmetric(&s, 1.0).unwrap();
        let r = neyman_ci(&s, &w, Framework::Neyman, 0.05).unwrap();
        assert_eq!(r.estimate.tau_hat, 2.0);
        assert!((r.se - 2f64.sqrt()).abs() < 1e-12);
        assert!((r.ci.upper - (2.0 + 1.959963984540054 * 2f64.sqrt())).abs() < 1e-9);
        assert!(!r.degenerate_variance);
    }

    #[test]
    fn neyman_degenerate_variance() {
        let s = RdSample::new(vec![-0.2, -0.1, 0.1, 0.2], vec![1.0, 1.0, 3.0, 3.0], 0.0).unwrap();
        let w = Window::symmetric(&s, 1.0).unwrap();
        let r = neyman_ci(&s, &w, Framework::Superpop, 0.05).unwrap();
        assert!(r.degenerate_variance);
        assert_eq!(r.ci.length(), 0.0);
    }

    #[test]
    fn fuzzy_locrand_ratio() {
        // outcome difference 1.0, receipt difference 0.5
        let x = vec![-0.4, -0.3, -0.2, -0.1, 0.1, 0.2, 0.3, 0.4];
        let y = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let d = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let s = RdSample::new(x, y, 0.0).unwrap().with_received(d).unwrap();
        let w = Window::symmetric(&s, 1.0).unwrap();
        let e = fuzzy_locrand(&s, &w, &AssignmentModel::FixedMargins, Framework::Neyman).unwrap();
        assert_eq!(e.dbar_plus.unwrap() - e.dbar_minus.unwrap(), 0.5);
        assert_eq!(e.tau_hat, 2.0);
    }

    #[test]
    fn fisher_ci_noiseless_shift() {
        let x: Vec<f64> = vec![-0.5, -0.4, -0.3, -0.2, -0.1, 0.1, 0.2, 0.3, 0.4, 0.5];
        let t = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let y: Vec<f64> = t.iter().map(|t| 2.0 + 1.5 * t).collect();
        let s = RdSample::new(x, y, 0.0).unwrap();
        let w = Window::symmetric(&s, 1.0).unwrap();
        let cfg = FisherConfig::default();
        let ci = fisher_ci(&s, &w, &AssignmentModel::FixedMargins, &[1.5], 0.05, &cfg).unwrap();
        assert_eq!(ci.p_values, vec![1.0]);
        assert_eq!(ci.interval.unwrap().lower, 1.5);
        let far = fisher_ci(&s, &w, &AssignmentModel::FixedMargins, &[40.0, 50.0], 0.05, &cfg).unwrap();
        assert!(far.empty);
    }

    #[test]
    fn window_selection_constant_covariate() {
        let x: Vec<f64> = (0..60).map(|i| (i as f64 + 0.5) / 20.0 - 1.5).collect();
        let s = RdSample::new(x.clone(), x.clone(), 0.0)
            .unwrap()
            .with_covariate("z", vec![3.0; 60])
            .unwrap();
        let sel = select_window(&s, &["z".to_string()], &[0.5, 1.0, 1.5], 0.15, &FisherConfig::default()).unwrap();
        assert_eq!(sel.half_width, 1.5);
        assert!(sel.trace.iter().all(|t| t.min_p == Some(1.0)));
        assert!(!sel.no_balanced_window);
    }

    #[test]
    fn window_selection_errors() {
        let s = small().with_covariate("z", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cfg = FisherConfig::default();
        assert_eq!(select_window(&s, &[], &[1.0], 0.15, &cfg).unwrap_err(), RdError::NoCovariates);
        assert_eq!(
            select_window(&s, &["z".into()], &[0.05], 0.15, &cfg).unwrap_err(),
            RdError::NoFeasibleWindow
        );
        let sel = select_window(&s, &["z".into()], &[0.05, 1.0], 0.15, &cfg).unwrap();
        assert!(sel.trace[0].skipped);
        assert_eq!(sel.half_width, 1.0);
    }
}
