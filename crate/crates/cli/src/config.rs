use std::path::{Path, PathBuf};

use drgate::data::ColumnRoles;
use drgate::{McSpec, PipelineConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const RUN_SCHEMA: &str = include_str!("../schema/run.schema.json");
pub const SIMULATION_SCHEMA: &str = include_str!("../schema/simulation.schema.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub columns: ColumnRoles,
}

/// Configuration of `estimate-gate` and `estimate-ate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// GATE evaluation points in original moderator units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<Vec<Vec<f64>>>,
    /// Points per moderator axis of the default query grid.
    #[serde(default = "default_query_points")]
    pub query_points: usize,
    /// Smoothing moderator sets for the smoothed ATE; defaults to the
    /// configured moderators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moderator_sets: Option<Vec<Vec<String>>>,
}

fn default_seed() -> u64 {
    1
}

fn default_query_points() -> usize {
    20
}

impl RunConfig {
    /// Every smoothing moderator set, the configured moderators first.
    pub fn moderator_sets(&self) -> Vec<Vec<String>> {
        self.moderator_sets.clone().unwrap_or_else(|| vec![self.data.columns.moderators.clone()])
    }

    /// Column roles with every moderator of every set loaded as a column.
    pub fn load_roles(&self) -> ColumnRoles {
        let mut roles = self.data.columns.clone();
        for set in self.moderator_sets() {
            for m in set {
                if !roles.moderators.contains(&m) {
                    roles.moderators.push(m);
                }
            }
        }
        roles
    }
}

fn check_schema(value: &Value, schema: &str, path: &Path) -> Result<(), CliError> {
    let schema: Value = serde_json::from_str(schema).expect("bundled schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    let errors: Vec<String> = validator
        .iter_errors(value)
        .map(|e| {
            let at = e.instance_path().to_string();
            if at.is_empty() { e.to_string() } else { format!("{at}: {e}") }
        })
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Schema { path: path.to_path_buf(), errors })
    }
}

/// Reads a JSON file, checks it against `schema` and deserializes it.
pub fn load<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{} is not valid JSON: {e}", path.display())))?;
    check_schema(&value, schema, path)?;
    serde_json::from_value(value).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn load_run(path: &Path) -> Result<RunConfig, CliError> {
    load(path, RUN_SCHEMA)
}

pub fn load_simulation(path: &Path) -> Result<McSpec, CliError> {
    load(path, SIMULATION_SCHEMA)
}
