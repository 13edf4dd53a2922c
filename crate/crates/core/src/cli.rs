//! Command-line front end: TOML experiment configuration, dispatch, and the
//! `manifest.json` / `results.csv` pair written for every run.
//!
//! The configuration schema is documented in the repository README. Every
//! number written to `results.csv` is a function of the configuration and
//! the master seed only; the worker count changes the thread pool, not the
//! per-path random streams.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::experiments::{
    additivity_fit, exponent_fit, single_interval_probability, support_theorem_run, total_smallball_probability,
    g_reduction_check, verify_scaling_reduction, RunSettings, SmallBallEstimate,
};
use crate::field::Field;
use crate::gaussian::{design, estimate_tail_constants, grid_event_probability, Constants, GridScheme, TailSettings};
use crate::girsanov::{lower_bound_drift, restoring_drift, weight_check, Pinning, TiltSpec};
use crate::heat_kernel::{self, kernel_fourier_adaptive, kernel_image_adaptive, KernelPoint};
use crate::solver::{DriftSpec, Model, SigmaSpec, TargetPath};
use crate::white_noise::{path_seed, Grid};

/// Version of the column layout of `results.csv`, recorded in the manifest.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "smallball", version, about = "Small-ball experiments for the stochastic heat equation on a circle")]
pub struct Cli {
    #[command(subcommand)]
    pub experiment: Experiment,
    /// TOML experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads; overrides the configuration.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Output directory for manifest.json and results.csv.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    /// Heat-kernel identities and energy-integral exponents.
    KernelCheck,
    /// Probability of staying in the ball over one interval.
    SingleInterval,
    /// Ball probability over several intervals.
    TotalSmallball,
    /// Direct run on [0, J] against the rescaled unit-circle run.
    ScalingCheck,
    /// Tube probability around a target, directly and via the centred problem.
    SupportRun,
    /// Covariance diagnostics of the grid-point noise values.
    GaussianAnalysis,
    /// Tail constants of the noise supremum.
    TailFit,
    /// Moments of the change-of-measure weight for several tilts.
    GirsanovCheck,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::KernelCheck,
        Experiment::SingleInterval,
        Experiment::TotalSmallball,
        Experiment::ScalingCheck,
        Experiment::SupportRun,
        Experiment::GaussianAnalysis,
        Experiment::TailFit,
        Experiment::GirsanovCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::KernelCheck => "kernel-check",
            Experiment::SingleInterval => "single-interval",
            Experiment::TotalSmallball => "total-smallball",
            Experiment::ScalingCheck => "scaling-check",
            Experiment::SupportRun => "support-run",
            Experiment::GaussianAnalysis => "gaussian-analysis",
            Experiment::TailFit => "tail-fit",
            Experiment::GirsanovCheck => "girsanov-check",
        }
    }

    /// Accepts both `single-interval` and `single_interval`.
    pub fn from_name(name: &str) -> Option<Self> {
        let n = name.replace('_', "-");
        Self::ALL.into_iter().find(|e| e.name() == n)
    }

    fn needs_eps(self) -> bool {
        !matches!(self, Experiment::KernelCheck | Experiment::GirsanovCheck)
    }

    fn needs_paths(self) -> bool {
        self != Experiment::KernelCheck
    }

    fn needs_horizon(self) -> bool {
        matches!(
            self,
            Experiment::ScalingCheck | Experiment::SupportRun | Experiment::GirsanovCheck
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    #[default]
    Tilted,
    Plain,
    Both,
}

impl MethodChoice {
    fn tilts(self) -> &'static [bool] {
        match self {
            MethodChoice::Tilted => &[true],
            MethodChoice::Plain => &[false],
            MethodChoice::Both => &[false, true],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SigmaConfig {
    #[default]
    Identity,
    Scalar {
        value: f64,
    },
    Diagonal {
        values: Vec<f64>,
    },
    StateDependent {
        c1: f64,
        c2: f64,
        lipschitz: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftConfig {
    #[default]
    Zero,
    Constant {
        value: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    #[default]
    Zero,
    Sinusoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartKind {
    /// `u₀ = h(0, ·)`.
    #[default]
    Target,
    Zero,
}

/// Target `h(t, x) = A·sin(2πkx/J)·cos(ωt)` in the first component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    #[serde(default)]
    pub kind: TargetKind,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_mode")]
    pub mode: usize,
    #[serde(default)]
    pub frequency: f64,
    #[serde(default)]
    pub start: StartKind,
    /// Paths driven by shared noise for the pathwise identity check.
    #[serde(default = "default_coupled")]
    pub coupled_paths: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            kind: TargetKind::Zero,
            amplitude: 0.0,
            mode: default_mode(),
            frequency: 0.0,
            start: StartKind::Target,
            coupled_paths: default_coupled(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub points_per_block: usize,
    pub max_cell: f64,
    pub steps_per_interval: usize,
    /// Tilt spreads; unset means the default for the experiment's event.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub running_spread: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminal_spread: Option<f64>,
    /// Cells and steps for the fixed-grid runs (scaling, support, Girsanov).
    pub n_x: usize,
    pub n_t: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        let r = RunSettings::default();
        Self {
            points_per_block: r.points_per_block,
            max_cell: r.max_cell,
            steps_per_interval: r.steps_per_interval,
            running_spread: None,
            terminal_spread: None,
            n_x: 64,
            n_t: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsConfig {
    /// Radii over which `C₈, C₉, C₁₀` are estimated.
    pub eps: Vec<f64>,
    pub k1: f64,
    pub k2: f64,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        Self {
            eps: vec![0.1, 0.2, 0.3],
            k1: 0.5,
            k2: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailConfig {
    pub alpha: Vec<f64>,
    pub cells_per_eps2: usize,
    pub steps: usize,
    pub min_count: usize,
    pub lambda_points: usize,
}

impl Default for TailConfig {
    fn default() -> Self {
        let t = TailSettings::default();
        Self {
            alpha: vec![0.25, 1.0, 4.0],
            cells_per_eps2: t.cells_per_eps2,
            steps: t.steps,
            min_count: t.min_count,
            lambda_points: t.lambda_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GirsanovConfig {
    /// Constant control used as the first tilt.
    pub constant: f64,
    /// Gain and clamp radius of the restoring tilt.
    pub gain: f64,
    pub radius: f64,
    /// Amplitude of the starting profile steered to zero by the third tilt.
    pub start_amplitude: f64,
}

impl Default for GirsanovConfig {
    fn default() -> Self {
        Self {
            constant: 0.5,
            gain: 20.0,
            radius: 0.5,
            start_amplitude: 0.3,
        }
    }
}

/// Parsed experiment configuration. All fields except `eps`, `n_paths` and
/// `horizon` have defaults; which of those three are required depends on the
/// experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Interval counts for `total-smallball`.
    #[serde(default = "default_intervals")]
    pub intervals: Vec<usize>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_c0")]
    pub c0: f64,
    /// Lower bound for `θ`; defaults to the designed value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default)]
    pub method: MethodChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub sigma: SigmaConfig,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub target: TargetConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub constants: ConstantsConfig,
    #[serde(default)]
    pub tail: TailConfig,
    #[serde(default)]
    pub girsanov: GirsanovConfig,
}

fn default_length() -> f64 {
    1.0
}
fn default_dim() -> usize {
    1
}
fn default_workers() -> usize {
    1
}
fn default_c0() -> f64 {
    0.5
}
fn default_mode() -> usize {
    1
}
fn default_coupled() -> usize {
    20
}
fn default_intervals() -> Vec<usize> {
    vec![1, 2, 4]
}

/// Configuration text together with its origin, for error messages.
struct Source<'a> {
    name: &'a str,
    text: &'a str,
}

impl Source<'_> {
    /// 1-based line of `key = …` inside `[section]` (or at top level).
    fn line_of(&self, section: Option<&str>, key: &str) -> Option<usize> {
        let mut current: Option<String> = None;
        for (i, raw) in self.text.lines().enumerate() {
            let line = raw.trim();
            if let Some(h) = line.strip_prefix('[') {
                let name = h.trim_end_matches(']').trim().to_string();
                if section == Some(name.as_str()) && key.is_empty() {
                    return Some(i + 1);
                }
                current = Some(name);
                continue;
            }
            if current.as_deref() != section {
                continue;
            }
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
        None
    }

    fn error(&self, section: Option<&str>, key: &str, msg: impl std::fmt::Display) -> Error {
        let line = self
            .line_of(section, key)
            .or_else(|| section.and_then(|s| self.line_of(Some(s), "")))
            .or_else(|| self.line_of(None, "experiment"))
            .unwrap_or(1);
        let field = match section {
            Some(s) if !key.is_empty() => format!("{s}.{key}"),
            Some(s) => s.to_string(),
            None => key.to_string(),
        };
        Error::Config(format!("{}:{line}: field `{field}`: {msg}", self.name))
    }
}

impl ExperimentConfig {
    /// Parse and validate configuration text for `experiment`.
    pub fn parse(text: &str, origin: &str, experiment: Experiment) -> Result<Self> {
        let src = Source { name: origin, text };
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(1);
            Error::Config(format!("{origin}:{line}: {}", e.message().trim()))
        })?;
        cfg.validate(&src, experiment)?;
        Ok(cfg)
    }

    pub fn load(path: &Path, experiment: Experiment) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string(), experiment)
    }

    fn validate(&self, src: &Source, experiment: Experiment) -> Result<()> {
        if let Some(name) = &self.experiment {
            match Experiment::from_name(name) {
                None => return Err(src.error(None, "experiment", format!("unknown experiment `{name}`"))),
                Some(e) if e != experiment => {
                    return Err(src.error(
                        None,
                        "experiment",
                        format!("config is for `{}` but `{}` was requested", e.name(), experiment.name()),
                    ))
                }
                _ => {}
            }
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(src.error(None, "length", "circle length must be positive"));
        }
        if self.dim == 0 {
            return Err(src.error(None, "dim", "dimension must be at least 1"));
        }
        if self.workers == 0 {
            return Err(src.error(None, "workers", "need at least one worker"));
        }
        if !(self.c0 > 0.0) {
            return Err(src.error(None, "c0", "must be positive"));
        }
        if let Some(t) = self.theta {
            if !(t > 0.0) {
                return Err(src.error(None, "theta", "must be positive"));
            }
        }
        if experiment.needs_eps() && self.eps.is_empty() {
            return Err(src.error(None, "eps", format!("missing required field `eps` for {}", experiment.name())));
        }
        if self.eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(src.error(None, "eps", "radii must be positive"));
        }
        match self.n_paths {
            None if experiment.needs_paths() => {
                return Err(src.error(None, "n_paths", format!("missing required field `n_paths` for {}", experiment.name())))
            }
            Some(n) if n < 2 => return Err(src.error(None, "n_paths", "need at least two paths")),
            _ => {}
        }
        match self.horizon {
            None if experiment.needs_horizon() => {
                return Err(src.error(None, "horizon", format!("missing required field `horizon` for {}", experiment.name())))
            }
            Some(t) if !(t > 0.0 && t.is_finite()) => return Err(src.error(None, "horizon", "must be positive")),
            _ => {}
        }
        if experiment == Experiment::TotalSmallball && (self.intervals.is_empty() || self.intervals.contains(&0)) {
            return Err(src.error(None, "intervals", "need one or more positive interval counts"));
        }
        let g = &self.grid;
        if g.points_per_block == 0 || g.steps_per_interval == 0 || g.n_x < 2 || g.n_t == 0 {
            return Err(src.error(Some("grid"), "", "refinement counts must be positive (n_x >= 2)"));
        }
        let spreads = [g.running_spread, g.terminal_spread];
        if !(g.max_cell > 0.0) || spreads.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err(src.error(Some("grid"), "", "cell bound and tilt spreads must be positive"));
        }
        if self.constants.eps.is_empty() || self.constants.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(src.error(Some("constants"), "eps", "need one or more positive radii"));
        }
        if !(self.constants.k1 > 0.0 && self.constants.k2 > 0.0) {
            return Err(src.error(Some("constants"), "", "k1 and k2 must be positive"));
        }
        if experiment == Experiment::TailFit && (self.tail.alpha.is_empty() || self.tail.alpha.iter().any(|a| !(*a > 0.0))) {
            return Err(src.error(Some("tail"), "alpha", "need one or more positive values"));
        }

        // Hypotheses on the coefficients.
        let sigma = self.sigma().map_err(|e| src.error(Some("sigma"), "", e))?;
        let horizon = self.horizon.unwrap_or(1.0);
        sigma
            .spot_check(256, horizon, self.length, 2.0, self.seed)
            .map_err(|e| src.error(Some("sigma"), "", e))?;
        self.drift().map_err(|e| src.error(Some("drift"), "", e))?;
        if self.target.kind == TargetKind::Sinusoid && !(self.target.amplitude.is_finite() && self.target.frequency.is_finite()) {
            return Err(src.error(Some("target"), "", "amplitude and frequency must be finite"));
        }
        if experiment == Experiment::SupportRun {
            let gap = self.start_gap();
            for &e in &self.eps {
                if !(gap < e / 2.0) {
                    return Err(src.error(
                        Some("target"),
                        "start",
                        format!("sup |u0 - h(0)| = {gap} is not below eps/2 = {}", e / 2.0),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn sigma(&self) -> Result<SigmaSpec> {
        match &self.sigma {
            SigmaConfig::Identity => SigmaSpec::identity(self.dim),
            SigmaConfig::Scalar { value } => SigmaSpec::scalar(*value, self.dim),
            SigmaConfig::Diagonal { values } => {
                if values.len() != self.dim {
                    return Err(Error::Dimension(format!("{} entries for dimension {}", values.len(), self.dim)));
                }
                SigmaSpec::diagonal(values.clone())
            }
            SigmaConfig::StateDependent { c1, c2, lipschitz } => SigmaSpec::state_dependent(self.dim, *c1, *c2, *lipschitz),
        }
    }

    pub fn drift(&self) -> Result<DriftSpec> {
        match &self.drift {
            DriftConfig::Zero => Ok(DriftSpec::zero(self.dim)),
            DriftConfig::Constant { value } => {
                if value.len() != self.dim {
                    return Err(Error::Dimension(format!("{} entries for dimension {}", value.len(), self.dim)));
                }
                if value.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation("drift must be finite".into()));
                }
                Ok(DriftSpec::constant(value.clone()))
            }
        }
    }

    /// Tube target on `grid` with its declared derivative bound.
    pub fn target(&self, grid: Grid) -> TargetPath {
        let t = &self.target;
        match t.kind {
            TargetKind::Zero => TargetPath::zero(grid, self.dim),
            TargetKind::Sinusoid => {
                let k = 2.0 * std::f64::consts::PI * t.mode as f64 / self.length;
                let (a, w) = (t.amplitude, t.frequency);
                let bound = a.abs() * 1f64.max(w.abs()).max(k).max(k * k);
                TargetPath::from_fn(grid, self.dim, bound, move |s, x, out| {
                    out.fill(0.0);
                    out[0] = a * (k * x).sin() * (w * s).cos();
                })
            }
        }
    }

    fn start_gap(&self) -> f64 {
        match (self.target.start, self.target.kind) {
            (StartKind::Target, _) | (_, TargetKind::Zero) => 0.0,
            (StartKind::Zero, TargetKind::Sinusoid) => self.target.amplitude.abs(),
        }
    }

    /// Run settings; `base` supplies the tilt spreads left unset.
    pub fn run_settings(&self, base: RunSettings) -> RunSettings {
        RunSettings {
            points_per_block: self.grid.points_per_block,
            max_cell: self.grid.max_cell,
            steps_per_interval: self.grid.steps_per_interval,
            running_spread: self.grid.running_spread.unwrap_or(base.running_spread),
            terminal_spread: self.grid.terminal_spread.unwrap_or(base.terminal_spread),
            seed: self.seed,
        }
    }

    fn paths(&self) -> usize {
        self.n_paths.unwrap_or(2)
    }
}

/// Rows and summary produced by one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    pub summary: Value,
}

impl Table {
    fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
            summary: Value::Null,
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(&self.columns).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

/// Shortest round-trip form, scientific for very small or large magnitudes.
fn num(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn int(x: usize) -> String {
    x.to_string()
}

/// Everything a run produces before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub table: Table,
    pub manifest: Value,
}

/// Run `experiment` under `cfg` on the current thread pool.
pub fn execute(experiment: Experiment, cfg: &ExperimentConfig) -> Result<RunOutput> {
    let sigma = cfg.sigma()?;
    let mut constants = design_constants(cfg, &sigma, cfg.constants.k1, cfg.constants.k2);
    let table = match experiment {
        Experiment::KernelCheck => kernel_check(cfg)?,
        Experiment::SingleInterval => single_interval(cfg, &sigma, &constants)?,
        Experiment::TotalSmallball => total_smallball(cfg, &sigma, &constants)?,
        Experiment::ScalingCheck => scaling_check(cfg, &sigma)?,
        Experiment::SupportRun => support_run(cfg, &sigma)?,
        Experiment::GaussianAnalysis => gaussian_analysis(cfg, &sigma)?,
        Experiment::TailFit => {
            let (t, k1, k2) = tail_fit(cfg, &sigma)?;
            constants = design_constants(cfg, &sigma, k1, k2);
            t
        }
        Experiment::GirsanovCheck => girsanov_check(cfg, &sigma)?,
    };
    let (constants_value, constants_error) = match &constants {
        Ok(c) => (serde_json::to_value(c).map_err(|e| Error::Io(e.to_string()))?, Value::Null),
        Err(e) => (Value::Null, Value::String(e.to_string())),
    };
    let manifest = json!({
        "tool": "smallball",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": experiment.name(),
        "seed": cfg.seed,
        "workers": cfg.workers,
        "config": cfg,
        "constants": constants_value,
        "constants_error": constants_error,
        "csv": {
            "file": "results.csv",
            "schema_version": CSV_SCHEMA_VERSION,
            "columns": table.columns,
            "rows": table.rows.len(),
        },
        "summary": table.summary,
    });
    Ok(RunOutput { table, manifest })
}

/// Write `manifest.json` and `results.csv` into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&out.manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    fs::write(dir.join("results.csv"), out.table.to_csv()?)?;
    Ok(())
}

/// Parse arguments, load configuration, run, and write outputs.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, cli.experiment)?,
        None => ExperimentConfig::parse("", "<defaults>", cli.experiment)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        cfg.workers = w;
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from(format!("smallball-{}", cli.experiment.name())));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let out = pool.install(|| execute(cli.experiment, &cfg))?;
    write_outputs(&dir, &out)?;
    Ok(dir)
}

fn design_constants(cfg: &ExperimentConfig, sigma: &SigmaSpec, k1: f64, k2: f64) -> Result<Constants> {
    design(&cfg.constants.eps, cfg.c0, k1, k2, sigma.c2, cfg.length).map(|d| d.constants)
}

fn scheme_for(cfg: &ExperimentConfig, eps: f64, constants: &Result<Constants>) -> Result<GridScheme> {
    let theta = match (cfg.theta, constants) {
        (Some(t), _) => t,
        (None, Ok(c)) => c.theta,
        (None, Err(e)) => {
            return Err(Error::Config(format!(
                "theta is not set and the constants could not be designed: {e}"
            )))
        }
    };
    GridScheme::new(eps, cfg.c0, theta, cfg.length)
}

const ESTIMATE_COLUMNS: [&str; 8] = ["p_hat", "stderr", "n_effective", "n_paths", "hits", "neg_log_p", "neg_log_se", "warning"];

fn estimate_cells(e: &SmallBallEstimate) -> Vec<String> {
    let (nl, nls) = e.neg_log().unwrap_or((f64::INFINITY, f64::NAN));
    vec![
        num(e.p_hat),
        num(e.stderr),
        num(e.n_effective),
        int(e.n_paths),
        int(e.hits),
        num(nl),
        num(nls),
        e.warning.clone().unwrap_or_default(),
    ]
}

fn columns(lead: &[&'static str], tail: &[&'static str]) -> Vec<&'static str> {
    lead.iter().chain(tail).copied().collect()
}

fn fit_json(fit: Result<crate::stats::LineFit>) -> Value {
    match fit {
        Ok(f) => json!({
            "slope": f.slope,
            "slope_se": f.slope_se,
            "intercept": f.intercept,
            "r_squared": f.r_squared,
            "points": f.n,
        }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn kernel_check(cfg: &ExperimentConfig) -> Result<Table> {
    let mut t = Table::new(&["check", "t", "x", "length", "value", "reference", "abs_error", "stderr"]);
    let j = cfg.length;
    let nodes = 4096;
    let mut worst = serde_json::Map::new();
    let mut track = |name: &str, err: f64| {
        let e = worst.entry(name.to_string()).or_insert(json!(0.0));
        if err > e.as_f64().unwrap_or(0.0) {
            *e = json!(err);
        }
    };
    for i in 0..11 {
        let time = 10f64.powf(-4.0 + 5.0 * i as f64 / 10.0) * j * j;
        for &frac in &[0.0, 0.13, 0.37, 0.5] {
            let p = KernelPoint::new(time, frac * j, j);
            let a = kernel_image_adaptive(p)?;
            let b = kernel_fourier_adaptive(p)?;
            track("image_fourier", (a - b).abs());
            t.push(vec!["image_fourier".into(), num(time), num(frac * j), num(j), num(a), num(b), num((a - b).abs()), num(0.0)]);
        }
    }
    for &time in &[1e-4, 1e-2, 1.0, 10.0] {
        let time = time * j * j;
        let m = heat_kernel::total_mass(time, j, nodes)?;
        track("mass", (m - 1.0).abs());
        t.push(vec!["mass".into(), num(time), num(0.0), num(j), num(m), num(1.0), num((m - 1.0).abs()), num(0.0)]);
    }
    for &(s, u, frac) in &[(1e-3, 2e-3, 0.0), (0.01, 0.02, 0.3), (0.1, 0.05, 0.45), (0.5, 1.0, 0.2)] {
        let (s, u, x) = (s * j * j, u * j * j, frac * j);
        let d = heat_kernel::composition_defect(s, u, x, j, nodes)?;
        let g = heat_kernel::evaluate(KernelPoint::new(s + u, x, j))?;
        track("composition", d);
        t.push(vec!["composition".into(), num(s + u), num(x), num(j), num(g + d), num(g), num(d), num(0.0)]);
    }
    for &big in &[2.0, 3.0] {
        for &(time, frac) in &[(0.1, 0.3), (0.01, 0.05), (1.0, 0.7), (0.003, 0.9)] {
            let x = frac * big;
            let lhs = heat_kernel::evaluate(KernelPoint::new(time / (big * big), x / big, 1.0))?;
            let rhs = big * heat_kernel::evaluate(KernelPoint::new(time, x, big))?;
            track("scaling", (lhs - rhs).abs());
            t.push(vec!["scaling".into(), num(time), num(x), num(big), num(lhs), num(rhs), num((lhs - rhs).abs()), num(0.0)]);
        }
    }
    let fits = heat_kernel::energy_exponents(9)?;
    for (name, fit, target) in [("space_exponent", &fits[0], 1.0), ("increment_exponent", &fits[1], 0.5), ("difference_exponent", &fits[2], 0.5)] {
        track(name, (fit.slope - target).abs());
        t.push(vec![name.into(), num(f64::NAN), num(f64::NAN), num(1.0), num(fit.slope), num(target), num((fit.slope - target).abs()), num(fit.slope_se)]);
    }
    t.summary = json!({ "max_abs_error": worst, "c_g": heat_kernel::c_g() });
    Ok(t)
}

fn single_interval(cfg: &ExperimentConfig, sigma: &SigmaSpec, constants: &Result<Constants>) -> Result<Table> {
    let mut t = Table::new(&[]);
    t.columns = columns(&["eps", "p_hat", "stderr", "n_effective", "method"], &["n_paths", "hits", "neg_log_p", "neg_log_se", "t1", "theta", "length", "warning"]);
    let settings = cfg.run_settings(RunSettings::default());
    let mut by_method: Vec<(bool, Vec<SmallBallEstimate>)> = cfg.method.tilts().iter().map(|&m| (m, Vec::new())).collect();
    for &eps in &cfg.eps {
        let scheme = scheme_for(cfg, eps, constants)?;
        for (tilted, list) in by_method.iter_mut() {
            let est = single_interval_probability(&scheme, sigma, None, cfg.paths(), *tilted, &settings)?;
            let c = estimate_cells(&est);
            t.push(vec![
                num(eps),
                c[0].clone(),
                c[1].clone(),
                c[2].clone(),
                est.method.to_string(),
                c[3].clone(),
                c[4].clone(),
                c[5].clone(),
                c[6].clone(),
                num(scheme.t1()),
                num(scheme.theta),
                num(scheme.length),
                c[7].clone(),
            ]);
            list.push(est);
        }
    }
    let mut fits = serde_json::Map::new();
    for (tilted, list) in &by_method {
        if list.len() >= 2 {
            let name = if *tilted { "tilted" } else { "plain" };
            fits.insert(name.into(), fit_json(exponent_fit(list)));
        }
    }
    t.summary = json!({ "exponent_fit": fits });
    Ok(t)
}

fn total_smallball(cfg: &ExperimentConfig, sigma: &SigmaSpec, constants: &Result<Constants>) -> Result<Table> {
    let mut t = Table::new(&[]);
    t.columns = columns(&["eps", "intervals", "horizon", "event", "method"], &ESTIMATE_COLUMNS);
    let settings = cfg.run_settings(RunSettings::for_ball());
    let mut fits = Vec::new();
    for &eps in &cfg.eps {
        let scheme = scheme_for(cfg, eps, constants)?;
        for &tilted in cfg.method.tilts() {
            let mut balls = Vec::new();
            for &k in &cfg.intervals {
                let horizon = k as f64 * scheme.t1();
                let est = total_smallball_probability(&scheme, horizon, sigma, cfg.paths(), tilted, &settings)?;
                for (event, e) in [("ball", &est.ball), ("grid", &est.grid)] {
                    let mut row = vec![num(eps), int(k), num(horizon), event.into(), e.method.to_string()];
                    row.extend(estimate_cells(e));
                    t.push(row);
                }
                balls.push(est.ball);
            }
            if balls.len() >= 2 {
                fits.push(json!({
                    "eps": eps,
                    "method": if tilted { "tilted" } else { "plain" },
                    "fit": fit_json(additivity_fit(&balls)),
                }));
            }
        }
    }
    t.summary = json!({ "additivity_fit": fits });
    Ok(t)
}

fn scaling_check(cfg: &ExperimentConfig, sigma: &SigmaSpec) -> Result<Table> {
    let mut t = Table::new(&[]);
    t.columns = columns(&["eps", "route", "radius", "horizon", "length"], &ESTIMATE_COLUMNS);
    t.columns.push("agree");
    let horizon = cfg.horizon.unwrap_or(1.0);
    let mut kernel = 0f64;
    for (i, &eps) in cfg.eps.iter().enumerate() {
        let r = verify_scaling_reduction(
            cfg.length,
            eps,
            horizon,
            sigma,
            cfg.grid.n_x,
            cfg.grid.n_t,
            cfg.paths(),
            path_seed(cfg.seed, i as u64),
        )?;
        kernel = kernel.max(r.kernel_max_rel_error);
        let unit_h = horizon / (cfg.length * cfg.length);
        for (route, e, radius, h, j) in [
            ("direct", &r.direct, eps, horizon, cfg.length),
            ("unit", &r.unit, eps / cfg.length.sqrt(), unit_h, 1.0),
        ] {
            let mut row = vec![num(eps), route.into(), num(radius), num(h), num(j)];
            row.extend(estimate_cells(e));
            row.push(r.agree.to_string());
            t.push(row);
        }
    }
    t.summary = json!({ "kernel_max_rel_error": kernel });
    Ok(t)
}

fn support_run(cfg: &ExperimentConfig, sigma: &SigmaSpec) -> Result<Table> {
    let mut t = Table::new(&[]);
    t.columns = columns(&["eps", "route"], &ESTIMATE_COLUMNS);
    t.columns.extend(["agree", "identity_error", "events_match"]);
    let grid = Grid::new(cfg.length, cfg.horizon.unwrap_or(1.0), cfg.grid.n_x, cfg.grid.n_t)?;
    let h = cfg.target(grid);
    h.validate()?;
    let drift = cfg.drift()?;
    let u0 = match cfg.target.start {
        StartKind::Target => h.snapshots[0].clone(),
        StartKind::Zero => Field::zeros(grid.circle(), cfg.dim),
    };
    let mut worst = 0f64;
    for (i, &eps) in cfg.eps.iter().enumerate() {
        let r = support_theorem_run(
            &u0,
            &h,
            eps,
            sigma,
            &drift,
            cfg.paths(),
            cfg.target.coupled_paths,
            path_seed(cfg.seed, i as u64),
        )?;
        worst = worst.max(r.identity_error);
        for (route, e) in [("direct", &r.direct), ("reduced", &r.reduced)] {
            let mut row = vec![num(eps), route.into()];
            row.extend(estimate_cells(e));
            row.extend([r.agree.to_string(), num(r.identity_error), r.events_match.to_string()]);
            t.push(row);
        }
    }
    t.summary = json!({ "max_identity_error": worst, "target_bound": h.bound });
    Ok(t)
}

fn gaussian_analysis(cfg: &ExperimentConfig, sigma: &SigmaSpec) -> Result<Table> {
    let mut t = Table::new(&[
        "eps",
        "theta",
        "points",
        "beta_l1_max",
        "variance_ratio_min",
        "variance_ratio_max",
        "c11",
        "eta",
        "eta_power",
        "p_hat",
        "stderr",
        "s_inv_norm11",
        "condition",
    ]);
    let d = design(&cfg.eps, cfg.c0, cfg.constants.k1, cfg.constants.k2, sigma.c2, cfg.length)?;
    let mut rows = Vec::new();
    for (i, (model, s)) in d.models.iter().zip(&d.summaries).enumerate() {
        let (p, se) = grid_event_probability(model, cfg.paths(), path_seed(cfg.seed, i as u64))?;
        let power = s.eta.powi(s.points as i32);
        t.push(vec![
            num(s.eps),
            num(s.theta),
            int(s.points),
            num(s.beta_l1_max),
            num(s.variance_ratio_min),
            num(s.variance_ratio_max),
            num(s.c11),
            num(s.eta),
            num(power),
            num(p),
            num(se),
            num(s.s_inv_norm11),
            num(s.condition),
        ]);
        rows.push(json!({
            "eps": s.eps,
            "beta_ok": s.beta_l1_max <= 0.5,
            "grid_bound_ok": p - 1.96 * se <= power,
            "s_inv_ok": s.s_inv_norm11 <= 2.0 / (d.constants.c8 * s.eps * s.eps),
        }));
    }
    t.summary = json!({ "design": d.constants, "checks": rows });
    Ok(t)
}

fn tail_fit(cfg: &ExperimentConfig, sigma: &SigmaSpec) -> Result<(Table, f64, f64)> {
    let mut t = Table::new(&["alpha", "k1", "k2", "slope", "stderr", "intercept", "r_squared", "n_paths", "tail_points"]);
    let settings = TailSettings {
        cells_per_eps2: cfg.tail.cells_per_eps2,
        steps: cfg.tail.steps,
        sigma_scale: sigma.c2,
        min_count: cfg.tail.min_count,
        lambda_points: cfg.tail.lambda_points,
    };
    if !sigma.is_state_free() || sigma.c1 != sigma.c2 {
        return Err(Error::Config("tail-fit needs a scalar noise coefficient".into()));
    }
    let mut fits = Vec::new();
    for (i, &alpha) in cfg.tail.alpha.iter().enumerate() {
        let f = estimate_tail_constants(alpha, &cfg.eps, cfg.paths(), path_seed(cfg.seed, i as u64), &settings)?;
        t.push(vec![
            num(alpha),
            num(f.k1),
            num(f.k2),
            num(f.slope),
            num(f.slope_se),
            num(f.intercept),
            num(f.r_squared),
            int(f.n_paths),
            int(f.points.len()),
        ]);
        fits.push(f);
    }
    // Constants from the fit closest to α = 1.
    let best = fits
        .iter()
        .min_by(|a, b| a.alpha.ln().abs().total_cmp(&b.alpha.ln().abs()))
        .ok_or_else(|| Error::InsufficientData("no tail fits".into()))?;
    let (k1, k2) = (best.k1, best.k2);
    let scaled: Vec<f64> = fits.iter().map(|f| -f.slope * f.alpha.sqrt()).collect();
    let mean = crate::stats::mean(&scaled);
    let spread = scaled.iter().map(|s| (s / mean - 1.0).abs()).fold(0.0, f64::max);
    t.summary = json!({
        "k1": k1,
        "k2": k2,
        "slope_times_sqrt_alpha": scaled,
        "max_relative_spread": spread,
        "min_r_squared": fits.iter().map(|f| f.r_squared).fold(1.0, f64::min),
    });
    Ok((t, k1, k2))
}

fn girsanov_check(cfg: &ExperimentConfig, sigma: &SigmaSpec) -> Result<Table> {
    let mut t = Table::new(&[
        "tilt",
        "bound",
        "mean_weight",
        "stderr",
        "mean_square",
        "mean_square_se",
        "exp_bound",
        "z2_max",
        "z2_bound",
        "mean_ok",
        "second_moment_ok",
        "n_paths",
    ]);
    let horizon = cfg.horizon.unwrap_or(1.0);
    let grid = Grid::new(cfg.length, horizon, cfg.grid.n_x, cfg.grid.n_t)?;
    let d = cfg.dim;
    let g = &cfg.girsanov;
    let k = 2.0 * std::f64::consts::PI / cfg.length;
    let a = g.start_amplitude;
    let u0 = Field::from_fn(grid.circle(), d, |x, out| out.fill(a * (k * x).sin()));
    let centred = Model::centred(grid, sigma.clone())?;
    let started = Model::new(grid, u0.clone(), sigma.clone(), DriftSpec::zero(d))?;
    let scale = (sigma.c1 * sigma.c2).sqrt();
    let pin = Pinning::for_targets(&grid, horizon, scale, 0.5 * g.radius, 0.5 * g.radius, 4.0 * scale * g.radius)?;
    let tilts: Vec<(&str, &Model, TiltSpec)> = vec![
        ("constant", &centred, TiltSpec::Drift(DriftSpec::constant(vec![g.constant; d]))),
        ("restoring", &centred, TiltSpec::Drift(restoring_drift(sigma, g.gain, g.radius)?)),
        ("lower_bound", &started, TiltSpec::Drift(lower_bound_drift(&u0, horizon, sigma, &grid)?)),
        ("pinning", &centred, TiltSpec::Pinning(pin)),
    ];
    let mut ok = true;
    for (i, (name, model, tilt)) in tilts.iter().enumerate() {
        let w = weight_check(model, tilt, cfg.paths(), path_seed(cfg.seed, i as u64))?;
        let sm = &w.second_moment;
        ok &= w.mean_ok && sm.upper_ok && w.z2_max <= w.z2_bound * (1.0 + 1e-12);
        t.push(vec![
            name.to_string(),
            num(w.bound),
            num(w.mean_weight),
            num(w.stderr),
            num(sm.mean_square),
            num(sm.stderr),
            num(sm.upper),
            num(w.z2_max),
            num(w.z2_bound),
            w.mean_ok.to_string(),
            sm.upper_ok.to_string(),
            int(w.n_paths),
        ]);
    }
    let drift = cfg.drift()?;
    let reduction = match cfg.eps.first() {
        Some(&eps) if !drift.is_zero() => {
            let r = g_reduction_check(&drift, sigma, eps, grid, cfg.paths(), path_seed(cfg.seed, 100))?;
            serde_json::to_value(&r).map_err(|e| Error::Io(e.to_string()))?
        }
        _ => Value::Null,
    };
    t.summary = json!({ "all_ok": ok, "drift_reduction": reduction });
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(Experiment::from_name(e.name()), Some(e));
        }
        assert_eq!(Experiment::from_name("single_interval"), Some(Experiment::SingleInterval));
    }

    #[test]
    fn missing_field_is_named_with_line() {
        let text = "experiment = \"single-interval\"\neps = [0.3]\n";
        let err = ExperimentConfig::parse(text, "cfg.toml", Experiment::SingleInterval).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_paths") && msg.contains("cfg.toml:1:"), "{msg}");
    }

    #[test]
    fn bad_value_points_at_its_line() {
        let text = "eps = [0.3]\nn_paths = 10\n\n[sigma]\nkind = \"scalar\"\nvalue = -1.0\n";
        let msg = ExperimentConfig::parse(text, "c", Experiment::SingleInterval).unwrap_err().to_string();
        assert!(msg.contains("c:4:") && msg.contains("sigma"), "{msg}");
        let text = "eps = [0.3]\nn_paths = 1\n";
        let msg = ExperimentConfig::parse(text, "c", Experiment::SingleInterval).unwrap_err().to_string();
        assert!(msg.contains("c:2:"), "{msg}");
    }

    #[test]
    fn type_errors_carry_lines() {
        let text = "eps = [0.3]\nn_paths = \"many\"\n";
        let msg = ExperimentConfig::parse(text, "c", Experiment::SingleInterval).unwrap_err().to_string();
        assert!(msg.contains("c:2:"), "{msg}");
        let text = "eps = [0.3]\nn_paths = 4\nbogus = 1\n";
        let msg = ExperimentConfig::parse(text, "c", Experiment::SingleInterval).unwrap_err().to_string();
        assert!(msg.contains("c:3:") && msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn support_start_must_be_near_target() {
        let text = "eps = [0.4]\nn_paths = 4\nhorizon = 0.01\n[target]\nkind = \"sinusoid\"\namplitude = 0.3\nstart = \"zero\"\n";
        let msg = ExperimentConfig::parse(text, "c", Experiment::SupportRun).unwrap_err().to_string();
        assert!(msg.contains("c:7:") && msg.contains("eps/2"), "{msg}");
    }

    #[test]
    fn defaults_parse_for_kernel_check() {
        let cfg = ExperimentConfig::parse("", "d", Experiment::KernelCheck).unwrap();
        assert_eq!(cfg.length, 1.0);
        assert_eq!(cfg.intervals, vec![1, 2, 4]);
    }
}
