//! TOML run configuration, `key=value` overrides and validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::initial::InitialData;
use crate::integrator::SolverOptions;
use crate::ldp::{ActionOptions, Event, EventSpec, GridSearchOptions, Observable};
use crate::model::{Equation, ModelParams, NoiseModel};
use crate::skeleton::{solve_skeleton, Control};
use crate::spectral::{ComplexField, Grid};
use crate::trajectory::Record;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub n: usize,
    /// `L`; the torus is `[−L, L)^d`.
    pub half_width: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            dim: 1,
            n: 256,
            half_width: 10.0 * std::f64::consts::PI,
        }
    }
}

/// Piecewise-constant control, mode-major, on `segments` equal pieces of
/// `[0, T]`. Empty coefficient lists mean the zero control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub segments: usize,
    pub rho1: Vec<f64>,
    pub rho2: Vec<f64>,
    /// JSON file holding a serialized control; overrides the lists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            segments: 1,
            rho1: Vec::new(),
            rho2: Vec::new(),
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationConfig {
    pub radius: f64,
    /// Levels `M` at which stopping times are reported.
    pub levels: Vec<f64>,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        TruncationConfig {
            radius: 10.0,
            levels: vec![2.0, 3.0, 5.0, 10.0],
        }
    }
}

/// Where a ball-exit event is centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallCenter {
    /// `u₀`.
    Initial,
    /// Terminal state of the zero-control skeleton.
    #[default]
    Unforced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventConfig {
    BallExit {
        radius: f64,
        #[serde(default)]
        center: BallCenter,
    },
    Target {
        target: InitialData,
        tolerance: f64,
    },
    Threshold {
        observable: Observable,
        level: f64,
        #[serde(default = "yes")]
        above: bool,
    },
}

fn yes() -> bool {
    true
}

impl Default for EventConfig {
    fn default() -> Self {
        EventConfig::BallExit {
            radius: 0.5,
            center: BallCenter::Unforced,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Also run the brute-force grid search after `rate`.
    pub enabled: bool,
    pub segments: usize,
    pub points: usize,
    pub range: f64,
    pub levels: usize,
    pub dt: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        let g = GridSearchOptions::default();
        OracleConfig {
            enabled: false,
            segments: g.segments,
            points: g.points,
            range: g.range,
            levels: g.levels,
            dt: g.dt,
        }
    }
}

impl OracleConfig {
    pub fn options(&self) -> GridSearchOptions {
        GridSearchOptions {
            segments: self.segments,
            points: self.points,
            range: self.range,
            levels: self.levels,
            dt: self.dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub n_paths: u64,
    /// Rate to compare against; enables the bounds report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_star: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            epsilons: vec![0.1, 0.05, 0.02],
            n_paths: 1000,
            i_star: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Write a binary field dump next to the trajectory CSV.
    pub fields: bool,
    pub field_stride: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            fields: false,
            field_stride: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    Strichartz,
    ItoGap,
    Order,
    Yosida,
    Continuity,
    WeakConvergence,
    Picard,
    MassBalance,
    Conservation,
}

impl Diagnostic {
    pub const ALL: [Diagnostic; 9] = [
        Diagnostic::Strichartz,
        Diagnostic::ItoGap,
        Diagnostic::Order,
        Diagnostic::Yosida,
        Diagnostic::Continuity,
        Diagnostic::WeakConvergence,
        Diagnostic::Picard,
        Diagnostic::MassBalance,
        Diagnostic::Conservation,
    ];
}

/// Parameters and pass/fail thresholds of the diagnostics suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub suite: Vec<Diagnostic>,
    pub strichartz_samples: usize,
    pub strichartz_grids: Vec<usize>,
    /// Recorded bound on the survey ratio.
    pub strichartz_bound: f64,
    pub strichartz_refinement_tol: f64,
    pub gap_dts: Vec<f64>,
    pub gap_paths: u64,
    pub gap_slope_tol: f64,
    pub gap_ablation_factor: f64,
    pub order_skeleton_dts: Vec<f64>,
    pub order_stochastic_dts: Vec<f64>,
    pub order_paths: u64,
    pub skeleton_order: [f64; 2],
    pub stochastic_order: [f64; 2],
    pub yosida_mus: Vec<f64>,
    pub yosida_max: f64,
    pub continuity_ns: Vec<u32>,
    pub weak_epsilons: Vec<f64>,
    pub weak_deltas: Vec<f64>,
    pub weak_paths: u64,
    /// `ρ` has this value on every mode; `ρ^ε = ρ + √ε·perturbation`.
    pub weak_rho: f64,
    pub weak_perturbation: f64,
    pub picard_pairs: usize,
    pub contraction_target: f64,
    pub picard_ratio_max: f64,
    pub mass_paths: u64,
    pub mass_windows: usize,
    pub mass_tolerance: f64,
    pub conservation_paths: u64,
    pub conservation_tolerance: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            suite: Diagnostic::ALL.to_vec(),
            strichartz_samples: 100,
            strichartz_grids: vec![128, 256],
            strichartz_bound: 10.0,
            strichartz_refinement_tol: 0.1,
            gap_dts: vec![4e-3, 2e-3, 1e-3, 5e-4],
            gap_paths: 16,
            gap_slope_tol: 0.25,
            gap_ablation_factor: 10.0,
            order_skeleton_dts: vec![1e-2, 5e-3, 2.5e-3, 1.25e-3],
            order_stochastic_dts: vec![4e-3, 2e-3, 1e-3, 5e-4],
            order_paths: 20,
            skeleton_order: [1.7, 2.3],
            stochastic_order: [0.4, 0.7],
            yosida_mus: vec![10.0, 100.0, 1000.0, 10000.0],
            yosida_max: 1e-3,
            continuity_ns: vec![1, 2, 4, 8, 16],
            weak_epsilons: vec![0.2, 0.1, 0.05],
            weak_deltas: vec![0.1],
            weak_paths: 1000,
            weak_rho: 0.5,
            weak_perturbation: 1.0,
            picard_pairs: 20,
            contraction_target: 0.5,
            picard_ratio_max: 0.6,
            mass_paths: 10_000,
            mass_windows: 10,
            mass_tolerance: 0.05,
            conservation_paths: 100,
            conservation_tolerance: 1e-10,
        }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub model: ModelParams,
    pub noise: NoiseModel,
    pub initial: InitialData,
    pub solver: SolverOptions,
    pub control: ControlConfig,
    pub truncation: TruncationConfig,
    pub event: EventConfig,
    pub rate: ActionOptions,
    pub oracle: OracleConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
    pub diagnostics: DiagnosticsConfig,
}

/// Re-labels a validation error with the config key it came from.
fn at(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::InvalidParameter { name, reason } => {
            let full = if key.ends_with(name) { key.to_string() } else { format!("{key}.{name}") };
            Error::config(full, reason)
        }
        Error::Config { .. } => e,
        other => Error::config(key, other.to_string()),
    }
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    // toml reports unknown or mistyped fields with the key in backticks
    let key = msg
        .split('`')
        .nth(1)
        .filter(|k| !k.is_empty() && !k.contains(' '))
        .unwrap_or("<config>")
        .to_string();
    Error::config(key, msg.trim().replace('\n', " "))
}

/// Splits `a.b.c=value` and parses `value` as a TOML value, falling back to
/// a bare string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|p| p.trim().is_empty()) {
        return Err(Error::config(spec, "empty key segment"));
    }
    let path = key.split('.').map(|p| p.trim().to_string()).collect();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, seg) in parents.iter().enumerate() {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path[..=i].join("."), "is not a table"))?;
    }
    // switching the variant of a tagged table drops the old variant's fields
    if last == "kind" && cur.get("kind") != Some(&value) {
        cur.clear();
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`. A table whose `kind` differs from
/// the base replaces it wholesale.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if t.get("kind").is_none_or(|kind| b.get("kind") == Some(kind)) => {
                merge(b, t)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Layers `path` over the defaults, applies `overrides` in order and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = path
            .map(|p| fs::read_to_string(p).map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display()))))
            .transpose()?;
        RunConfig::layered(text.as_deref(), overrides)
    }

    /// [`RunConfig::load`] with the config file given as text.
    pub fn layered(text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(text) = text {
            merge(&mut table, text.parse().map_err(toml_error)?);
        }
        for spec in overrides {
            let (path, value) = parse_override(spec)?;
            apply_override(&mut table, &path, value)?;
        }
        let cfg: RunConfig = table.try_into().map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// First 12 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", "must be at most 2^63 − 1"));
        }
        let grid = self.grid()?;
        self.model.validate(grid.dim()).map_err(at("model"))?;
        self.noise.validate().map_err(at("noise"))?;
        self.initial.validate().map_err(at("initial"))?;
        self.solver.n_steps().map_err(at("solver"))?;
        let (m1, m2) = (self.noise.m1(), self.noise.m2());
        let c = &self.control;
        if c.segments == 0 {
            return Err(Error::config("control.segments", "must be ≥ 1"));
        }
        if c.file.is_none() && !(c.rho1.is_empty() && c.rho2.is_empty()) {
            for (key, list, m) in [("control.rho1", &c.rho1, m1), ("control.rho2", &c.rho2, m2)] {
                if list.len() != m * c.segments {
                    return Err(Error::config(
                        key,
                        format!("expected {} values ({m} modes × {} segments), got {}", m * c.segments, c.segments, list.len()),
                    ));
                }
            }
        }
        if !(self.truncation.radius > 0.0) {
            return Err(Error::config("truncation.radius", "must be positive"));
        }
        match &self.event {
            EventConfig::BallExit { radius: v, .. } | EventConfig::Target { tolerance: v, .. } => {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(Error::config("event", format!("radius/tolerance must be ≥ 0, got {v}")));
                }
            }
            EventConfig::Threshold { level, .. } => {
                if !level.is_finite() {
                    return Err(Error::config("event.level", "must be finite"));
                }
            }
        }
        let s = &self.sweep;
        if s.epsilons.is_empty() || s.epsilons.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(Error::config("sweep.epsilons", "need a non-empty list of values in (0, 1]"));
        }
        if s.epsilons.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("sweep.epsilons", "must be in descending order"));
        }
        if s.n_paths == 0 {
            return Err(Error::config("sweep.n_paths", "must be ≥ 1"));
        }
        if self.rate.segments == 0 || !(self.rate.dt > 0.0) {
            return Err(Error::config("rate", "segments must be ≥ 1 and dt positive"));
        }
        if self.output.field_stride == 0 {
            return Err(Error::config("output.field_stride", "must be ≥ 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.dim, self.grid.n, self.grid.half_width).map_err(at("grid"))
    }

    pub fn equation(&self) -> Result<Equation> {
        Equation::new(self.grid()?, self.model, self.noise.clone()).map_err(at("model"))
    }

    pub fn initial_field(&self) -> Result<ComplexField> {
        self.initial.build(self.grid()?).map_err(at("initial"))
    }

    pub fn control(&self) -> Result<Control> {
        let c = &self.control;
        let horizon = self.solver.horizon;
        if let Some(file) = &c.file {
            let text = fs::read_to_string(file)
                .map_err(|e| Error::config("control.file", format!("cannot read {}: {e}", file.display())))?;
            let ctrl: Control =
                serde_json::from_str(&text).map_err(|e| Error::config("control.file", e.to_string()))?;
            return Ok(ctrl);
        }
        if c.rho1.is_empty() && c.rho2.is_empty() {
            return Control::none(horizon).map_err(at("control"));
        }
        Control::new(self.noise.m1(), self.noise.m2(), c.segments, horizon, c.rho1.clone(), c.rho2.clone())
            .map_err(at("control"))
    }

    /// The configured event at the solver horizon.
    pub fn event_spec(&self, eq: &Equation, u0: &ComplexField) -> Result<EventSpec> {
        let horizon = self.solver.horizon;
        let event = match &self.event {
            EventConfig::BallExit { radius, center } => {
                let center = match center {
                    BallCenter::Initial => u0.clone(),
                    BallCenter::Unforced => {
                        let opts = self.solver.with_record(Record::Endpoints);
                        solve_skeleton(eq, u0, &Control::none(horizon)?, &opts)?.terminal().clone()
                    }
                };
                Event::BallExit { center, radius: *radius }
            }
            EventConfig::Target { target, tolerance } => Event::Target {
                target: target.build(*eq.grid()).map_err(at("event.target"))?,
                tolerance: *tolerance,
            },
            EventConfig::Threshold { observable, level, above } => Event::Threshold {
                observable: observable.clone(),
                level: *level,
                above: *above,
            },
        };
        EventSpec::new(event, horizon).map_err(at("event"))
    }
}
