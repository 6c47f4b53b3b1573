//! TOML run configuration with one section per module and dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentParams;
use crate::error::{Error, Result};
use crate::execution::{PotentialFieldConfig, RecoveryConfig};
use crate::gate::{GateParams, HysteresisConfig, SurrogateWeights};
use crate::metrics::ObjectiveParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub width: usize,
    pub height: usize,
    pub robots: usize,
    /// Per-cell probability of a static obstacle before connectivity repair.
    pub static_density: f64,
    pub dynamic_obstacles: usize,
    pub speed_ratio: f64,
    pub sensing_radius: usize,
    /// Defaults to `8 * (width + height)`.
    pub horizon: Option<usize>,
    /// Regeneration attempts when the free component is too small.
    pub max_retries: u32,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            width: 40,
            height: 40,
            robots: 4,
            static_density: 0.3,
            dynamic_obstacles: 32,
            speed_ratio: 0.5,
            sensing_radius: 3,
            horizon: None,
            max_retries: 32,
        }
    }
}

impl ScenarioParams {
    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(8 * (self.width + self.height))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    /// History window length in steps.
    pub window: usize,
    /// Steps between online updates.
    pub update_interval: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Minimum surrogate magnitude for an update.
    pub margin: f64,
    /// Warm parameter file; the bundled one is used when unset.
    pub warm_file: Option<PathBuf>,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { window: 8, update_interval: 4, learning_rate: 0.05, l2: 1e-3, margin: 0.5, warm_file: None }
    }
}

impl GateConfig {
    pub fn cold_params(&self) -> GateParams {
        GateParams::cold(self.learning_rate, self.l2, self.margin)
    }

    pub fn warm_params(&self) -> Result<GateParams> {
        let base = self.cold_params();
        match &self.warm_file {
            Some(path) => GateParams::load(path, &base),
            None => GateParams::from_file_str(super::BUNDLED_WARM_GATE, &base),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    /// End the episode as a failure on any robot-obstacle contact.
    pub strict_collisions: bool,
    /// Shell command of an external reactive policy; the built-in
    /// potential-field policy is used when unset.
    pub policy_command: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixParams {
    pub variants: Vec<String>,
    pub seeds: u64,
    pub first_seed: u64,
    /// Dynamic-obstacle counts to sweep; empty uses the scenario value.
    pub dynamic_obstacles: Vec<usize>,
    /// Team sizes to sweep; empty uses the scenario value.
    pub robots: Vec<usize>,
}

impl Default for MatrixParams {
    fn default() -> Self {
        MatrixParams {
            variants: vec!["Base".into(), "CA".into(), "CP".into(), "Full".into()],
            seeds: 10,
            first_seed: 0,
            dynamic_obstacles: Vec::new(),
            robots: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioParams,
    pub assignment: AssignmentParams,
    pub gate: GateConfig,
    pub hysteresis: HysteresisConfig,
    pub surrogate: SurrogateWeights,
    pub recovery: RecoveryConfig,
    pub execution: ExecutionConfig,
    pub policy: PotentialFieldConfig,
    pub objective: ObjectiveParams,
    pub matrix: MatrixParams,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        if s.width == 0 || s.height == 0 {
            return Err(Error::Config("map dimensions must be positive".into()));
        }
        if s.robots == 0 {
            return Err(Error::Config("at least one robot is required".into()));
        }
        if !(0.0..1.0).contains(&s.static_density) {
            return Err(Error::Config(format!("static_density must lie in [0, 1), got {}", s.static_density)));
        }
        if !(s.speed_ratio > 0.0 && s.speed_ratio < 1.0) {
            return Err(Error::Config(format!("speed_ratio must lie in (0, 1), got {}", s.speed_ratio)));
        }
        if s.sensing_radius == 0 {
            return Err(Error::Config("sensing_radius must be at least 1".into()));
        }
        if self.gate.window == 0 || self.gate.update_interval == 0 {
            return Err(Error::Config("gate window and update interval must be at least 1".into()));
        }
        let g = &self.gate;
        if ![g.learning_rate, g.l2, g.margin].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Config("gate learning_rate, l2 and margin must be finite and non-negative".into()));
        }
        self.assignment.validate()?;
        self.hysteresis.validate()?;
        self.surrogate.validate()?;
        self.objective.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads an optional file, then applies `section.key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Sets `section.key=value` in `table`. The value is read as a TOML literal
/// when possible and as a bare string otherwise. A leading `--` is ignored.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let spec = spec.trim_start_matches("--");
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override {spec:?} lacks '='")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} must be section.key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cursor = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cursor.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{k:?} is not a section")))?;
    }
    cursor.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
