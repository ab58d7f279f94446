use std::path::{Path, PathBuf};

use reswidth_core::model::{AbsorberSpec, FdOrder, GridModel, ModeSpace, Potentials};
use reswidth_core::pipeline::{ChannelTolerances, ScanSpec, Setup, parameter_value};
use reswidth_core::spectral::ResonanceSearch;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{message}")]
    Schema { path: String, message: String },
    #[error("bad override `{0}`: expected key=value")]
    OverrideSyntax(String),
    #[error("override path `{path}` does not exist")]
    OverridePath { path: String },
    #[error("{message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    /// Key path the error refers to, if any.
    pub fn key_path(&self) -> Option<&str> {
        match self {
            Self::Schema { path, .. } | Self::Invalid { path, .. } | Self::OverridePath { path } => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Spectrum,
    Widths,
    Propagate,
    Purity,
    Scan,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub length: f64,
    pub spacing: f64,
    pub fd_order: FdOrder,
    pub potentials: Potentials,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbsorberRun {
    pub label: String,
    pub spec: AbsorberSpec,
    /// Scan used to identify the resonance and by the `scan` stage; must bracket
    /// the value in `spec`.
    pub scan: ScanSpec,
    /// Per-run replacements for `tolerances.sum_residual` and `tolerances.scan_drift`.
    #[serde(default)]
    pub sum_residual: Option<f64>,
    #[serde(default)]
    pub scan_drift: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// `|Γ − ΣΓ_p| ≤ sum_residual·Γ`
    pub sum_residual: f64,
    pub scan_drift: f64,
    /// Channels below `drift_floor·Γ` are left out of drift and cross checks.
    pub drift_floor: f64,
    pub cross_total: f64,
    pub cross_partial: f64,
    pub trace: f64,
    pub positivity: f64,
    pub decay_law: f64,
    pub rates: f64,
    pub purity: f64,
    pub channels: ChannelTolerances,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            sum_residual: 1e-6,
            scan_drift: 1e-4,
            drift_floor: 1e-3,
            cross_total: 1e-2,
            cross_partial: 2e-2,
            trace: 1e-8,
            positivity: 1e-8,
            decay_law: 1e-8,
            rates: 1e-6,
            purity: 1e-6,
            channels: ChannelTolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagatorKind {
    Exponential,
    Rk4,
    Adaptive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    /// Label of the absorber run to propagate; the first run if absent.
    #[serde(default)]
    pub absorber: Option<String>,
    pub method: PropagatorKind,
    /// Step (maximal step for the exponential integrator) in units of `ħ/Γ`.
    pub step: f64,
    /// Local error tolerance of the adaptive integrator.
    #[serde(default = "default_adaptive_tol")]
    pub tol: f64,
    /// Final time in units of `ħ/Γ`.
    pub horizon: f64,
    pub samples: usize,
}

fn default_adaptive_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    #[serde(default = "yes")]
    pub pretty: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub particles: usize,
    /// One-particle orbitals to project on; the raw grid if absent.
    #[serde(default)]
    pub orbitals: Option<usize>,
    pub absorbers: Vec<AbsorberRun>,
    #[serde(default)]
    pub search: ResonanceSearch,
    pub run: Vec<Stage>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub propagation: Option<PropagationConfig>,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn grid_model(&self) -> Result<GridModel, ConfigError> {
        let m = &self.model;
        GridModel::half_line(m.length, m.spacing, m.fd_order, m.potentials)
            .map_err(|e| ConfigError::Invalid { path: "model".into(), message: e.to_string() })
    }

    pub fn setup(&self, model: &GridModel, run: &AbsorberRun) -> Setup {
        Setup {
            model: model.clone(),
            absorber: run.spec,
            orbitals: self.orbitals,
            particles: self.particles,
            channel_tol: self.tolerances.channels,
        }
    }

    pub fn propagation_run(&self) -> Option<&AbsorberRun> {
        let label = self.propagation.as_ref()?.absorber.as_deref();
        match label {
            Some(l) => self.absorbers.iter().find(|a| a.label == l),
            None => self.absorbers.first(),
        }
    }

    /// Checks that need the model but no diagonalization.
    pub fn validate(&self) -> Result<GridModel, ConfigError> {
        let invalid = |path: &str, message: String| ConfigError::Invalid { path: path.into(), message };
        let model = self.grid_model()?;
        if self.run.is_empty() {
            return Err(invalid("run", "no stages requested".into()));
        }
        let modes = self.orbitals.unwrap_or(model.num_points());
        if let Some(k) = self.orbitals
            && (k == 0 || k > model.num_points())
        {
            return Err(invalid("orbitals", format!("{k} orbitals for {} grid points", model.num_points())));
        }
        if self.particles == 0 || self.particles > modes {
            return Err(invalid("particles", format!("{} particles in {modes} modes", self.particles)));
        }
        if self.absorbers.is_empty() {
            return Err(invalid("absorbers", "at least one absorber run is required".into()));
        }
        // identification at the production value needs neighbours on both sides
        let solves = self.run.iter().any(|s| matches!(s, Stage::Widths | Stage::Propagate | Stage::Purity));
        for (i, a) in self.absorbers.iter().enumerate() {
            if self.absorbers[..i].iter().any(|b| b.label == a.label) {
                return Err(invalid(&format!("absorbers[{i}].label"), format!("duplicate label `{}`", a.label)));
            }
            ModeSpace::grid(&model, &a.spec).map_err(|e| invalid(&format!("absorbers[{i}].spec"), e.to_string()))?;
            let v = parameter_value(&a.spec, a.scan.parameter)
                .map_err(|e| invalid(&format!("absorbers[{i}].scan.parameter"), e.to_string()))?;
            if a.scan.values.len() < 3 {
                return Err(invalid(&format!("absorbers[{i}].scan.values"), "a scan needs at least 3 values".into()));
            }
            let lo = a.scan.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = a.scan.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if solves && !(lo < v && v < hi) {
                return Err(invalid(
                    &format!("absorbers[{i}].scan.values"),
                    format!("scan [{lo}, {hi}] does not bracket the production value {v}"),
                ));
            }
        }
        let needs_dynamics = self.run.iter().any(|s| matches!(s, Stage::Propagate | Stage::Purity));
        match &self.propagation {
            None if needs_dynamics => return Err(invalid("propagation", "required by the requested stages".into())),
            Some(p) => {
                if self.propagation_run().is_none() {
                    return Err(invalid("propagation.absorber", format!("no absorber run labelled {:?}", p.absorber)));
                }
                if !(p.step > 0.0 && p.horizon > 0.0 && p.tol > 0.0) || p.samples < 2 {
                    return Err(invalid("propagation", "step, horizon and tol must be positive, samples ≥ 2".into()));
                }
            }
            None => {}
        }
        Ok(model)
    }
}

/// Parse `text`, apply `key=value` overrides, and deserialize with key paths in
/// errors.
pub fn parse(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut value: Value =
        serde_json::from_str(text).map_err(|e| ConfigError::Schema { path: String::new(), message: e.to_string() })?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_path_to_error::deserialize(value)
        .map_err(|e| ConfigError::Schema { path: e.path().to_string(), message: e.inner().to_string() })
}

pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
    parse(&text, overrides)
}

/// `a.b.0.c=value`; the value is read as JSON and falls back to a string. New
/// keys (and objects on the way) may be created; the schema check rejects unknown
/// ones.
pub fn apply_override(root: &mut Value, item: &str) -> Result<(), ConfigError> {
    let (key, raw) = item.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(item.into()))?;
    if key.is_empty() {
        return Err(ConfigError::OverrideSyntax(item.into()));
    }
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let missing = || ConfigError::OverridePath { path: key.into() };
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| missing())?;
                items.get_mut(idx).ok_or_else(missing)?
            }
            Value::Object(map) => {
                let fresh = if last { Value::Null } else { Value::Object(Default::default()) };
                map.entry(seg.to_string()).or_insert(fresh)
            }
            _ => return Err(missing()),
        };
    }
    *node = new;
    Ok(())
}
