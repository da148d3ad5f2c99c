//! RD plot data: binned outcome means and side-wise global polynomial fits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::lpoly::{global_polyfit, Side, MAX_ORDER};
use crate::sample::RdSample;
use crate::stats::compensated_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    #[default]
    EvenlySpaced,
    Quantile,
}

impl std::str::FromStr for Binning {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "even" | "evenly_spaced" | "es" => Ok(Binning::EvenlySpaced),
            "quantile" | "qs" => Ok(Binning::Quantile),
            other => Err(RdError::InvalidArgument(format!("unknown binning `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    /// `None` for an empty bin.
    pub mean_outcome: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotMeta {
    pub binning: Binning,
    pub poly_order: usize,
    pub bins_below: usize,
    pub bins_above: usize,
    pub n_below: usize,
    pub n_above: usize,
    pub coefficients_below: Vec<f64>,
    pub coefficients_above: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdPlotData {
    pub cutoff: f64,
    pub bins_below: Vec<Bin>,
    pub bins_above: Vec<Bin>,
    pub curve_below: Vec<(f64, f64)>,
    pub curve_above: Vec<(f64, f64)>,
    pub meta: PlotMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotOptions {
    pub binning: Binning,
    /// Bins below and above; `None` uses `max(10, round(sqrt(n_side) / 2))`.
    pub bins: Option<(usize, usize)>,
    pub poly_order: usize,
    pub grid_points: usize,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            binning: Binning::EvenlySpaced,
            bins: None,
            poly_order: 4,
            grid_points: 200,
        }
    }
}

pub fn default_bin_count(n_side: usize) -> usize {
    ((n_side as f64).sqrt() / 2.0).round().max(10.0) as usize
}

/// One side's observations sorted by (score, outcome) so that results do
/// not depend on row order.
fn side_points(sample: &RdSample, side: Side) -> Vec<(f64, f64)> {
    let c = sample.cutoff();
    let mut pts: Vec<(f64, f64)> = sample
        .score()
        .iter()
        .zip(sample.outcome())
        .filter(|(x, _)| side.contains(**x - c))
        .map(|(x, y)| (*x, *y))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts
}

fn make_bin(lower: f64, upper: f64, ys: &[f64]) -> Bin {
    Bin {
        lower,
        upper,
        midpoint: 0.5 * (lower + upper),
        mean_outcome: (!ys.is_empty()).then(|| compensated_sum(ys.iter().copied()) / ys.len() as f64),
        count: ys.len(),
    }
}

/// Bin `j` of `j_bins` covering `[lo, hi]`; points must be sorted.
fn even_bins(pts: &[(f64, f64)], lo: f64, hi: f64, j_bins: usize, side: Side) -> Vec<Bin> {
    let width = (hi - lo) / j_bins as f64;
    let mut groups = vec![Vec::new(); j_bins];
    for &(x, y) in pts {
        let j = if width > 0.0 {
            match side {
                // below side bins are half-open on the right: [a, b)
                Side::Below => ((x - lo) / width).floor() as usize,
                // above side bins are half-open on the left except the first
                Side::Above => (((x - lo) / width).ceil() as usize).max(1) - 1,
            }
        } else {
            0
        };
        groups[j.min(j_bins - 1)].push(y);
    }
    groups
        .iter()
        .enumerate()
        .map(|(j, ys)| {
            let lower = lo + width * j as f64;
            let upper = if j + 1 == j_bins { hi } else { lo + width * (j + 1) as f64 };
            make_bin(lower, upper, ys)
        })
        .collect()
}

/// Quantile bins: bin `j` ends at the score of rank `ceil((j+1) n / J)`;
/// units tied with an edge stay in the lower bin.
fn quantile_bins(pts: &[(f64, f64)], lo: f64, hi: f64, j_bins: usize) -> Vec<Bin> {
    let n = pts.len();
    let edges: Vec<f64> = (1..j_bins).map(|j| pts[(j * n).div_ceil(j_bins) - 1].0).collect();
    let mut groups = vec![Vec::new(); j_bins];
    for &(x, y) in pts {
        let j = edges.partition_point(|e| *e < x);
        groups[j].push(y);
    }
    groups
        .iter()
        .enumerate()
        .map(|(j, ys)| {
            let lower = if j == 0 { lo } else { edges[j - 1] };
            let upper = if j + 1 == j_bins { hi } else { edges[j] };
            make_bin(lower, upper, ys)
        })
        .collect()
}

fn eval_poly(coef: &[f64], u: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, b| acc * u + b)
}

pub fn build_rdplot(sample: &RdSample, options: &PlotOptions) -> Result<RdPlotData> {
    if sample.unit_cutoffs().is_some() {
        return Err(RdError::InvalidArgument("RD plots need a single cutoff; normalize the sample first".into()));
    }
    if options.poly_order > MAX_ORDER {
        return Err(RdError::InvalidArgument(format!(
            "polynomial order {} above the maximum {MAX_ORDER}",
            options.poly_order
        )));
    }
    if options.grid_points < 2 {
        return Err(RdError::InvalidArgument("curve grid needs at least 2 points".into()));
    }
    let c = sample.cutoff();
    let below = side_points(sample, Side::Below);
    let above = side_points(sample, Side::Above);
    for (side, pts) in [(Side::Below, &below), (Side::Above, &above)] {
        if pts.len() < options.poly_order + 1 {
            return Err(RdError::TooFewObservations(format!(
                "{side} side has {} observations, the order-{} fit needs {}",
                pts.len(),
                options.poly_order,
                options.poly_order + 1
            )));
        }
    }
    let (j_below, j_above) = options
        .bins
        .unwrap_or((default_bin_count(below.len()), default_bin_count(above.len())));
    if j_below == 0 || j_above == 0 {
        return Err(RdError::InvalidArgument("bin counts must be positive".into()));
    }
    let lo = below[0].0;
    let hi = above[above.len() - 1].0;
    let (bins_below, bins_above) = match options.binning {
        Binning::EvenlySpaced => (
            even_bins(&below, lo, c, j_below, Side::Below),
            even_bins(&above, c, hi, j_above, Side::Above),
        ),
        Binning::Quantile => (quantile_bins(&below, lo, c, j_below), quantile_bins(&above, c, hi, j_above)),
    };

    let fit = |pts: &[(f64, f64)], side: Side| {
        let u: Vec<f64> = pts.iter().map(|p| p.0 - c).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
        global_polyfit(&u, &y, options.poly_order, side).map(|(coef, _)| coef)
    };
    let coef_below = fit(&below, Side::Below)?;
    let coef_above = fit(&above, Side::Above)?;
    let m = options.grid_points;
    let curve = |a: f64, b: f64, coef: &[f64]| -> Vec<(f64, f64)> {
        (0..m)
            .map(|i| {
                let x = a + (b - a) * i as f64 / (m - 1) as f64;
                (x, eval_poly(coef, x - c))
            })
            .collect()
    };
    let curve_below = curve(lo, below[below.len() - 1].0, &coef_below);
    let curve_above = curve(c, hi, &coef_above);

    Ok(RdPlotData {
        cutoff: c,
        bins_below,
        bins_above,
        curve_below,
        curve_above,
        meta: PlotMeta {
            binning: options.binning,
            poly_order: options.poly_order,
            bins_below: j_below,
            bins_above: j_above,
            n_below: below.len(),
            n_above: above.len(),
            coefficients_below: coef_below,
            coefficients_above: coef_above,
        },
    })
}

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 600.0;
const MARGIN: f64 = 60.0;

impl RdPlotData {
    /// Minimal static rendering: bin means as points, fits as polylines and
    /// the cutoff as a vertical rule.
    pub fn to_svg(&self) -> String {
        let bins = self.bins_below.iter().chain(&self.bins_above);
        let curves = self.curve_below.iter().chain(&self.curve_above);
        let xs = bins.clone().map(|b| b.midpoint).chain(curves.clone().map(|p| p.0));
        let ys = bins.filter_map(|b| b.mean_outcome).chain(curves.map(|p| p.1));
        let (x0, x1) = bounds(xs.chain([self.cutoff]));
        let (y0, y1) = bounds(ys);
        let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            WIDTH - 2.0 * MARGIN,
            HEIGHT - 2.0 * MARGIN
        );
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{MARGIN}" x2="{0:.2}" y2="{1}" stroke="gray" stroke-dasharray="6,4"/>"#,
            px(self.cutoff),
            HEIGHT - MARGIN
        );
        for curve in [&self.curve_below, &self.curve_above] {
            let pts: Vec<String> = curve.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="firebrick" stroke-width="2"/>"#,
                pts.join(" ")
            );
        }
        for b in self.bins_below.iter().chain(&self.bins_above) {
            if let Some(m) = b.mean_outcome {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"/>"#,
                    px(b.midpoint),
                    py(m)
                );
            }
        }
        for (v, anchor_x, anchor_y) in [(x0, MARGIN, HEIGHT - MARGIN + 20.0), (x1, WIDTH - MARGIN, HEIGHT - MARGIN + 20.0)] {
            let _ = writeln!(s, r#"<text x="{anchor_x}" y="{anchor_y}" font-size="12" text-anchor="middle">{v:.3}</text>"#);
        }
        for (v, y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN)] {
            let _ = writeln!(s, r#"<text x="{}" y="{y}" font-size="12" text-anchor="end">{v:.3}</text>"#, MARGIN - 6.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}
