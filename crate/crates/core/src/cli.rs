//! `rdtk` command-line front end.
//!
//! Every command writes one JSON document that embeds the toolkit version,
//! the resolved configuration, a SHA-256 digest of the input file and the
//! seed, so a run can be reproduced from its own report.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandwidth::{select_bandwidth_centered, BandwidthSelection, SelectorOptions};
use crate::continuity::{
    discrete_estimate, estimate, normalize_and_pool, rbc_inference, DiscreteEstimate, EstimandKind, EstimatorConfig,
    PooledEstimate, RbcResult, RdEstimate,
};
use crate::error::{RdError, Result};
use crate::locrand::{
    default_tau_grid, diff_in_means, fisher_ci, fisher_pvalue, fuzzy_locrand, neyman_ci, select_window, AssignmentModel,
    FisherCi, FisherConfig, FisherResult, Framework, LocRandEstimate, NeymanResult, TestStatistic, Window,
    WindowSelection,
};
use crate::lpoly::KernelKind;
use crate::rdplot::{build_rdplot, Binning, PlotOptions, RdPlotData};
use crate::sample::{ColumnMap, RdSample};
use crate::sim::{
    power_analysis, presets, required_n, simulate_coverage, BandwidthRule, CoverageConfig, CoverageSummary, DgpSpec,
    IntervalMethod, PowerResult, SeScaling,
};
use crate::validation::{binomial_test, run_validation, BinomialRecord, ContinuityConfig, ValidationConfig, ValidationReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_ESTIMATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rdtk", version, about = "Regression discontinuity analysis toolkit")]
pub struct Cli {
    /// Maximum worker threads.
    #[arg(long, global = true, env = "RD_TOOLKIT_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Local polynomial estimate with conventional and robust bias-corrected inference.
    Estimate(EstimateArgs),
    /// Local randomization analysis inside a window around the cutoff.
    Locrand(LocrandArgs),
    /// Falsification and validation battery.
    Validate(ValidateArgs),
    /// RD plot data and optional SVG rendering.
    Plot(PlotArgs),
    /// Power, minimum detectable effect and sample size.
    Power(PowerArgs),
    /// Monte Carlo coverage of RD confidence intervals.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub score: String,
    #[arg(long)]
    pub outcome: String,
    /// Treatment receipt column (0/1).
    #[arg(long)]
    pub treatment: Option<String>,
    /// Predetermined covariates, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub cutoff: f64,
    /// Column with a per-unit cutoff (multi-cutoff designs).
    #[arg(long)]
    pub cutoff_column: Option<String>,
    /// Field delimiter; `tab` for tab-separated files.
    #[arg(long, default_value = ",")]
    pub delimiter: String,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Report path; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// `auto` or a positive number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AutoOr {
    Auto,
    Value(f64),
}

impl FromStr for AutoOr {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(AutoOr::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(AutoOr::Value(v)),
            _ => Err(format!("expected `auto` or a positive number, got `{s}`")),
        }
    }
}

impl AutoOr {
    fn value(self) -> Option<f64> {
        match self {
            AutoOr::Auto => None,
            AutoOr::Value(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Sharp,
    Fuzzy,
    Kink,
}

impl From<KindArg> for EstimandKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Sharp => EstimandKind::Sharp,
            KindArg::Fuzzy => EstimandKind::Fuzzy,
            KindArg::Kink => EstimandKind::Kink,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KernelArg {
    Triangular,
    Uniform,
    Epanechnikov,
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Triangular => KernelKind::Triangular,
            KernelArg::Uniform => KernelKind::Uniform,
            KernelArg::Epanechnikov => KernelKind::Epanechnikov,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct LocalPolyArgs {
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    #[arg(long, value_enum, default_value = "triangular")]
    pub kernel: KernelArg,
    /// Bandwidth or `auto` for the MSE-optimal plug-in.
    #[arg(long, default_value = "auto")]
    pub h: AutoOr,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub poly: LocalPolyArgs,
    #[arg(long, value_enum, default_value = "sharp")]
    pub kind: KindArg,
    /// Select separate bandwidths below and above the cutoff (auto only).
    #[arg(long)]
    pub side_specific: bool,
    /// Also report the discrete-score estimand (adjacent mass points).
    #[arg(long)]
    pub discrete: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq)]
pub enum ModelArg {
    Fixed,
    Bernoulli,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FrameworkArg {
    Fisher,
    Neyman,
    Superpop,
}

impl From<FrameworkArg> for Framework {
    fn from(f: FrameworkArg) -> Self {
        match f {
            FrameworkArg::Fisher => Framework::Fisher,
            FrameworkArg::Neyman => Framework::Neyman,
            FrameworkArg::Superpop => Framework::Superpop,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatisticArg {
    DiffMeans,
    Studentized,
}

#[derive(Debug, Clone, Args)]
pub struct FisherArgs {
    #[arg(long, value_enum, default_value = "diff-means")]
    pub statistic: StatisticArg,
    #[arg(long, default_value_t = 9999)]
    pub draws: usize,
    #[arg(long, default_value_t = 200_000)]
    pub max_exhaustive: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl FisherArgs {
    fn config(&self) -> FisherConfig {
        FisherConfig {
            statistic: match self.statistic {
                StatisticArg::DiffMeans => TestStatistic::DiffMeans,
                StatisticArg::Studentized => TestStatistic::Studentized,
            },
            max_exhaustive: self.max_exhaustive,
            draws: self.draws,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct LocrandArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Symmetric half-width or `auto` for covariate-balance selection.
    #[arg(long, default_value = "auto")]
    pub window: AutoOr,
    /// Asymmetric window: half-width below the cutoff (overrides --window).
    #[arg(long, requires = "window_right")]
    pub window_left: Option<f64>,
    #[arg(long, requires = "window_left")]
    pub window_right: Option<f64>,
    /// Candidate half-widths for `--window auto`, comma separated, ascending.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Vec<f64>,
    /// Balance level for window selection.
    #[arg(long, default_value_t = 0.15)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "fixed")]
    pub model: ModelArg,
    /// Treatment probability under the Bernoulli model.
    #[arg(long, default_value_t = 0.5)]
    pub prob: f64,
    #[arg(long, value_enum, default_value = "neyman")]
    pub framework: FrameworkArg,
    /// Ratio estimate using the treatment-receipt column.
    #[arg(long)]
    pub fuzzy: bool,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[command(flatten)]
    pub fisher: FisherArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub poly: LocalPolyArgs,
    #[arg(long, value_enum, default_value = "sharp")]
    pub kind: KindArg,
    /// Window half-width for the binomial and local-randomization balance tests.
    #[arg(long)]
    pub window: Option<f64>,
    /// Artificial cutoffs, comma separated; side quantiles when omitted.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub placebo: Option<Vec<f64>>,
    /// Donut radii, comma separated, ascending.
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1")]
    pub donut: Vec<f64>,
    /// Sensitivity bandwidths as multiples of the baseline bandwidth.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75,1,1.25,1.5")]
    pub sensitivity: Vec<f64>,
    #[arg(long)]
    pub density_h: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub density_bins: usize,
    #[arg(long, default_value_t = 0.5)]
    pub binomial_prob: f64,
    #[command(flatten)]
    pub fisher: FisherArgs,
    /// Also write the one-row-per-test CSV table here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BinningArg {
    Even,
    Quantile,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "even")]
    pub binning: BinningArg,
    #[arg(long, requires = "bins_above")]
    pub bins_below: Option<usize>,
    #[arg(long, requires = "bins_below")]
    pub bins_above: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    #[arg(long, default_value_t = 200)]
    pub grid_points: usize,
    /// Write an SVG rendering here.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScalingArg {
    Fixed,
    Mse,
}

#[derive(Debug, Clone, Args)]
pub struct PowerArgs {
    /// Standard error of the estimate; estimated from --input when omitted.
    #[arg(long)]
    pub se: Option<f64>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    pub score: Option<String>,
    #[arg(long, requires = "input")]
    pub outcome: Option<String>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub cutoff: f64,
    #[arg(long, default_value = ",")]
    pub delimiter: String,
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    #[arg(long, value_enum, default_value = "triangular")]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    pub power: f64,
    /// Effects at which to evaluate power, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub tau: Vec<f64>,
    /// Target MDE for the sample-size calculation.
    #[arg(long)]
    pub target_mde: Option<f64>,
    /// Pilot sample size behind --se (defaults to the input row count).
    #[arg(long)]
    pub n0: Option<u64>,
    #[arg(long, value_enum, default_value = "fixed")]
    pub scaling: ScalingArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq)]
pub enum MethodArg {
    Conventional,
    Rbc,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Built-in design: curved, linear, step or piecewise_balance.
    #[arg(long, default_value = "curved", conflicts_with = "dgp_file")]
    pub dgp: String,
    /// JSON file holding a design specification.
    #[arg(long)]
    pub dgp_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 2000)]
    pub replications: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "both")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    #[arg(long, value_enum, default_value = "triangular")]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// `mse`, `ce` or a fixed positive bandwidth.
    #[arg(long, default_value = "mse")]
    pub bandwidth: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub schema: String,
    pub toolkit_version: String,
    pub seed: u64,
    pub input: Option<InputDigest>,
}

impl ReportHeader {
    fn new(kind: &str, seed: u64, input: Option<InputDigest>) -> Self {
        Self {
            schema: format!("rd-toolkit/{kind}/v1"),
            toolkit_version: VERSION.to_string(),
            seed,
            input,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSettings {
    pub columns: ColumnMap,
    pub cutoff: f64,
    pub kind: EstimandKind,
    pub p: usize,
    pub kernel: KernelKind,
    pub h_below: f64,
    pub h_above: f64,
    pub bandwidth_auto: bool,
    pub side_specific: bool,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub header: ReportHeader,
    pub config: EstimateSettings,
    pub bandwidth: Option<BandwidthSelection>,
    pub estimate: RdEstimate,
    pub rbc: RbcResult,
    pub pooled: Option<PooledEstimate>,
    pub discrete: Option<DiscreteEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocrandSettings {
    pub columns: ColumnMap,
    pub cutoff: f64,
    pub window_auto: bool,
    pub w_left: f64,
    pub w_right: f64,
    pub candidates: Vec<f64>,
    pub alpha: f64,
    pub model: AssignmentModel,
    pub framework: Framework,
    pub fuzzy: bool,
    pub level: f64,
    pub fisher: FisherConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocrandReport {
    pub header: ReportHeader,
    pub config: LocrandSettings,
    pub selection: Option<WindowSelection>,
    pub window: Window,
    pub estimate: LocRandEstimate,
    pub fisher: FisherResult,
    pub fisher_ci: FisherCi,
    pub neyman: NeymanResult,
    pub binomial: BinomialRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateReport {
    pub header: ReportHeader,
    pub config: ValidationConfig,
    pub columns: ColumnMap,
    pub cutoff: f64,
    pub report: ValidationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotReport {
    pub header: ReportHeader,
    pub columns: ColumnMap,
    pub options: PlotOptions,
    pub plot: RdPlotData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSettings {
    pub se_source: String,
    pub pilot: Option<RbcResult>,
    pub alpha: f64,
    pub power: f64,
    pub n0: Option<u64>,
    pub target_mde: Option<f64>,
    pub scaling: SeScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub header: ReportHeader,
    pub config: PowerSettings,
    pub result: PowerResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub header: ReportHeader,
    pub dgp_name: Option<String>,
    pub dgp: DgpSpec,
    pub n: usize,
    pub replications: usize,
    pub configs: Vec<CoverageConfig>,
    pub summaries: Vec<CoverageSummary>,
    pub failures: usize,
}

enum CliError {
    Usage(String),
    Run(RdError),
}

impl From<RdError> for CliError {
    fn from(e: RdError) -> Self {
        CliError::Run(e)
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Reports go to `out` unless an output path is given.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return EXIT_OK;
            }
            return emit_error(err, "Usage", e.render().to_string(), EXIT_USAGE);
        }
    };
    let mut buffer = Vec::new();
    let result = match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be positive".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command, &mut buffer)),
            Err(e) => Err(CliError::Run(RdError::InvalidArgument(e.to_string()))),
        },
        None => dispatch(&cli.command, &mut buffer),
    };
    if out.write_all(&buffer).and_then(|_| out.flush()).is_err() {
        return emit_error(err, "Io", "could not write report".into(), EXIT_DATA);
    }
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => emit_error(err, "Usage", msg, EXIT_USAGE),
        Err(CliError::Run(e)) => {
            let code = if e.is_data_error() { EXIT_DATA } else { EXIT_ESTIMATION };
            emit_error(err, e.code(), e.to_string(), code)
        }
    }
}

fn emit_error(err: &mut dyn Write, code: &str, message: String, exit_code: i32) -> i32 {
    let report = ErrorReport {
        error: code,
        message: message.trim_end().to_string(),
        exit_code,
    };
    let _ = writeln!(err, "{}", serde_json::to_string(&report).expect("error report serializes"));
    exit_code
}

fn dispatch(command: &Command, out: &mut Vec<u8>) -> std::result::Result<(), CliError> {
    match command {
        Command::Estimate(a) => cmd_estimate(a, out),
        Command::Locrand(a) => cmd_locrand(a, out),
        Command::Validate(a) => cmd_validate(a, out),
        Command::Plot(a) => cmd_plot(a, out),
        Command::Power(a) => cmd_power(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
    }
}

fn parse_delimiter(s: &str) -> std::result::Result<u8, CliError> {
    match s {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        s if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        _ => Err(CliError::Usage(format!("delimiter must be a single ASCII character, got `{s}`"))),
    }
}

fn read_input(path: &PathBuf) -> Result<(Vec<u8>, String)> {
    let bytes = std::fs::read(path).map_err(|e| RdError::Io(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let hex = digest.iter().map(|b| format!("{b:02x}")).collect::<String>();
    Ok((bytes, hex))
}

fn load(input: &InputArgs) -> std::result::Result<(RdSample, ColumnMap, InputDigest), CliError> {
    let columns = ColumnMap {
        score: input.score.clone(),
        outcome: input.outcome.clone(),
        treatment: input.treatment.clone(),
        covariates: input.covariates.clone(),
        cutoff_column: input.cutoff_column.clone(),
    };
    if !input.cutoff.is_finite() {
        return Err(RdError::InvalidArgument("cutoff must be finite".into()).into());
    }
    let delimiter = parse_delimiter(&input.delimiter)?;
    let (bytes, sha256) = read_input(&input.input)?;
    let sample = RdSample::from_csv_bytes(&bytes, &columns, input.cutoff, delimiter)?;
    let digest = InputDigest {
        path: input.input.display().to_string(),
        sha256,
        rows: sample.len(),
    };
    Ok((sample, columns, digest))
}

fn write_json<T: Serialize>(value: &T, path: Option<&PathBuf>, out: &mut dyn Write) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| RdError::Io(e.to_string()))?;
    text.push('\n');
    write_text(&text, path, out)
}

fn write_text(text: &str, path: Option<&PathBuf>, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| RdError::Io(format!("{}: {e}", p.display()))),
        None => out.write_all(text.as_bytes()).map_err(RdError::from),
    }
}

fn check_level(level: f64) -> std::result::Result<(), CliError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("level {level} not in (0, 1)")))
    }
}

fn cmd_estimate(a: &EstimateArgs, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    check_level(a.poly.level)?;
    let (sample, columns, digest) = load(&a.input)?;
    let kind: EstimandKind = a.kind.into();
    let kernel: KernelKind = a.poly.kernel.into();
    let (bandwidth, h_below, h_above) = match a.poly.h {
        AutoOr::Value(h) => (None, h, h),
        AutoOr::Auto => {
            let sel = select_bandwidth_centered(
                &sample.centered_scores(),
                sample.outcome(),
                a.poly.p,
                kernel,
                SelectorOptions {
                    side_specific: a.side_specific,
                },
            )?;
            let (hb, ha) = if a.side_specific { (sel.h_below, sel.h_above) } else { (sel.h_mse, sel.h_mse) };
            (Some(sel), hb, ha)
        }
    };
    let cfg = EstimatorConfig::new(a.poly.p, kernel, h_below)
        .with_bandwidths(h_below, h_above)
        .with_level(a.poly.level);
    let est = estimate(&sample, kind, &cfg)?;
    let rbc = rbc_inference(&sample, kind, &cfg)?;
    let pooled = match sample.unit_cutoffs() {
        Some(_) => Some(normalize_and_pool(&sample, kind, &cfg)?),
        None => None,
    };
    let discrete = if a.discrete { Some(discrete_estimate(&sample)?) } else { None };
    let report = EstimateReport {
        header: ReportHeader::new("estimate", a.seed, Some(digest)),
        config: EstimateSettings {
            columns,
            cutoff: a.input.cutoff,
            kind,
            p: a.poly.p,
            kernel,
            h_below,
            h_above,
            bandwidth_auto: a.poly.h == AutoOr::Auto,
            side_specific: a.side_specific,
            level: a.poly.level,
        },
        bandwidth,
        estimate: est,
        rbc,
        pooled,
        discrete,
    };
    Ok(write_json(&report, a.output.output.as_ref(), out)?)
}

/// Twenty half-widths evenly spaced up to half the shorter side's reach.
fn default_candidates(sample: &RdSample) -> Vec<f64> {
    let centered = sample.centered_scores();
    let below = centered.iter().filter(|x| **x < 0.0).fold(0.0f64, |m, x| m.max(-x));
    let above = centered.iter().filter(|x| **x >= 0.0).fold(0.0f64, |m, x| m.max(*x));
    let reach = below.min(above);
    if reach <= 0.0 {
        return Vec::new();
    }
    (1..=20).map(|k| reach * k as f64 / 40.0).collect()
}

fn cmd_locrand(a: &LocrandArgs, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    check_level(a.level)?;
    let (sample, columns, digest) = load(&a.input)?;
    let fisher = a.fisher.config();
    let model = match a.model {
        ModelArg::Fixed => AssignmentModel::FixedMargins,
        ModelArg::Bernoulli => AssignmentModel::Bernoulli { prob: a.prob },
    };
    let mut candidates = Vec::new();
    let (selection, window) = match (a.window_left.zip(a.window_right), a.window) {
        (Some((l, r)), _) => (None, Window::new(&sample, l, r)?),
        (None, AutoOr::Value(w)) => (None, Window::symmetric(&sample, w)?),
        (None, AutoOr::Auto) => {
            if columns.covariates.is_empty() {
                return Err(RdError::NoCovariates.into());
            }
            candidates = if a.candidates.is_empty() { default_candidates(&sample) } else { a.candidates.clone() };
            let sel = select_window(&sample, &columns.covariates, &candidates, a.alpha, &fisher)?;
            let w = sel.window;
            (Some(sel), w)
        }
    };
    let framework: Framework = a.framework.into();
    let est = if a.fuzzy {
        fuzzy_locrand(&sample, &window, &model, framework)?
    } else {
        diff_in_means(&sample, &window, &model, framework)?
    };
    let alpha_ci = 1.0 - a.level;
    let grid = default_tau_grid(&sample, &window)?;
    let ci = fisher_ci(&sample, &window, &model, &grid, alpha_ci, &fisher)?;
    let mut fisher_result = fisher_pvalue(&sample, &window, &model, &fisher)?;
    fisher_result.ci = ci.interval;
    let neyman = neyman_ci(&sample, &window, framework, alpha_ci)?;
    let binomial = binomial_test(&sample, &window, 0.5)?;
    let report = LocrandReport {
        header: ReportHeader::new("locrand", a.fisher.seed, Some(digest)),
        config: LocrandSettings {
            columns,
            cutoff: a.input.cutoff,
            window_auto: selection.is_some(),
            w_left: window.w_left(),
            w_right: window.w_right(),
            candidates,
            alpha: a.alpha,
            model,
            framework,
            fuzzy: a.fuzzy,
            level: a.level,
            fisher,
        },
        selection,
        window,
        estimate: est,
        fisher: fisher_result,
        fisher_ci: ci,
        neyman,
        binomial,
    };
    Ok(write_json(&report, a.output.output.as_ref(), out)?)
}

fn cmd_validate(a: &ValidateArgs, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    check_level(a.poly.level)?;
    let (sample, columns, digest) = load(&a.input)?;
    if let Some(grid) = &a.placebo {
        if let Some(&bad) = grid.iter().find(|&&g| g == sample.cutoff()) {
            return Err(RdError::GridContainsTrueCutoff(bad).into());
        }
    }
    let mut config = ValidationConfig {
        kind: a.kind.into(),
        continuity: ContinuityConfig {
            p: a.poly.p,
            kernel: a.poly.kernel.into(),
            level: a.poly.level,
            h: a.poly.h.value(),
        },
        covariates: columns.covariates.clone(),
        window: a.window,
        fisher: a.fisher.config(),
        binomial_prob: a.binomial_prob,
        density_bins: a.density_bins,
        density_h: a.density_h,
        placebo_grid: a.placebo.clone(),
        donut_radii: a.donut.clone(),
        sensitivity_factors: a.sensitivity.clone(),
    };
    let report = run_validation(&sample, &config)?;
    // echo the resolved bandwidth so the run can be replayed
    config.continuity.h = Some(report.baseline_h);
    if let Some(path) = &a.csv {
        write_text(&report.to_csv()?, Some(path), out)?;
    }
    let doc = ValidateReport {
        header: ReportHeader::new("validate", a.fisher.seed, Some(digest)),
        config,
        columns,
        cutoff: a.input.cutoff,
        report,
    };
    Ok(write_json(&doc, a.output.output.as_ref(), out)?)
}

fn cmd_plot(a: &PlotArgs, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    let (sample, columns, digest) = load(&a.input)?;
    let options = PlotOptions {
        binning: match a.binning {
            BinningArg::Even => Binning::EvenlySpaced,
            BinningArg::Quantile => Binning::Quantile,
        },
        bins: a.bins_below.zip(a.bins_above),
        poly_order: a.order,
        grid_points: a.grid_points,
    };
    let plot = build_rdplot(&sample, &options)?;
    if let Some(path) = &a.svg {
        write_text(&plot.to_svg(), Some(path), out)?;
    }
    let report = PlotReport {
        header: ReportHeader::new("plot", 0, Some(digest)),
        columns,
        options,
        plot,
    };
    Ok(write_json(&report, a.output.output.as_ref(), out)?)
}

fn cmd_power(a: &PowerArgs, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    let kernel: KernelKind = a.kernel.into();
    let (se, pilot, digest, rows) = match (a.se, &a.input) {
        (Some(se), _) => (se, None, None, None),
        (None, Some(path)) => {
            let (score, outcome) = match (&a.score, &a.outcome) {
                (Some(s), Some(o)) => (s.clone(), o.clone()),
                _ => return Err(CliError::Usage("--input needs --score and --outcome".into())),
            };
            let input = InputArgs {
                input: path.clone(),
                score,
                outcome,
                treatment: None,
                covariates: Vec::new(),
                cutoff: a.cutoff,
                cutoff_column: None,
                delimiter: a.delimiter.clone(),
            };
            let (sample, _, digest) = load(&input)?;
            let sel = select_bandwidth_centered(
                &sample.centered_scores(),
                sample.outcome(),
                a.p,
                kernel,
                SelectorOptions::default(),
            )?;
            let cfg = EstimatorConfig::new(a.p, kernel, sel.h_mse);
            let rbc = rbc_inference(&sample, EstimandKind::Sharp, &cfg)?;
            let n = sample.len() as u64;
            (rbc.se_robust, Some(rbc), Some(digest), Some(n))
        }
        (None, None) => return Err(CliError::Usage("power needs --se or --input".into())),
    };
    let scaling = match a.scaling {
        ScalingArg::Fixed => SeScaling::FixedBandwidth,
        ScalingArg::Mse => SeScaling::MseBandwidth { p: a.p },
    };
    let mut result = power_analysis(se, a.alpha, &a.tau, a.power)?;
    let n0 = a.n0.or(rows);
    if let Some(target) = a.target_mde {
        let n0 = n0.ok_or_else(|| CliError::Usage("--target-mde needs --n0 or --input".into()))?;
        result.n_required = Some(required_n(se, n0, target, a.alpha, a.power, scaling)?);
    }
    let report = PowerReport {
        header: ReportHeader::new("power", a.seed, digest),
        config: PowerSettings {
            se_source: if pilot.is_some() { "pilot_rbc".into() } else { "user".into() },
            pilot,
            alpha: a.alpha,
            power: a.power,
            n0,
            target_mde: a.target_mde,
            scaling,
        },
        result,
    };
    Ok(write_json(&report, a.output.output.as_ref(), out)?)
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    check_level(a.level)?;
    let (dgp_name, dgp) = match &a.dgp_file {
        Some(path) => {
            let (bytes, _) = read_input(path)?;
            let dgp: DgpSpec = serde_json::from_slice(&bytes).map_err(|e| RdError::BadSpec(e.to_string()))?;
            (None, dgp)
        }
        None => {
            let dgp = presets::by_name(&a.dgp).ok_or_else(|| {
                CliError::Usage(format!("unknown design `{}`; choose from {}", a.dgp, presets::NAMES.join(", ")))
            })?;
            (Some(a.dgp.clone()), dgp)
        }
    };
    let bandwidth = match a.bandwidth.as_str() {
        "mse" => BandwidthRule::Mse,
        "ce" => BandwidthRule::Ce,
        other => match other.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => BandwidthRule::Fixed { h },
            _ => return Err(CliError::Usage(format!("--bandwidth expects mse, ce or a positive number, got `{other}`"))),
        },
    };
    let methods: &[IntervalMethod] = match a.method {
        MethodArg::Conventional => &[IntervalMethod::Conventional],
        MethodArg::Rbc => &[IntervalMethod::Rbc],
        MethodArg::Both => &[IntervalMethod::Conventional, IntervalMethod::Rbc],
    };
    let configs: Vec<CoverageConfig> = methods
        .iter()
        .map(|&method| CoverageConfig {
            method,
            p: a.p,
            kernel: a.kernel.into(),
            level: a.level,
            bandwidth,
        })
        .collect();
    let summaries = configs
        .iter()
        .map(|cfg| simulate_coverage(&dgp, cfg, a.n, a.replications, a.seed))
        .collect::<Result<Vec<_>>>()?;
    let record = SimulationRecord {
        header: ReportHeader::new("simulate", a.seed, None),
        dgp_name,
        dgp,
        n: a.n,
        replications: a.replications,
        failures: summaries.iter().map(|s| s.failures).sum(),
        configs,
        summaries,
    };
    Ok(write_json(&record, a.output.output.as_ref(), out)?)
}

/// Entry point for the binary.
pub fn main_exit_code() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
