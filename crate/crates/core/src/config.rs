//! Experiment configuration: JSON schema, defaults and validation.
//!
//! Unknown keys are rejected everywhere; missing keys take their defaults, so
//! `{}` is the full default experiment.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::env::CellConfig;
use crate::federation::Weighting;

/// An invariant violation at a field path such as `cells[0].chunk_prb`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Nests the path below `prefix`.
    pub fn within(self, prefix: &str) -> Self {
        Self {
            path: format!("{prefix}.{}", self.path),
            ..self
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl std::error::Error for FieldError {}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unknown key at {path}: {message}")]
    UnknownKey { path: String, message: String },
    #[error("schema error at {path} (line {line}): {message}")]
    Schema { path: String, line: usize, message: String },
    #[error("invalid configuration at {0}")]
    Invalid(#[from] FieldError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub enabled: bool,
    /// Env steps between rounds.
    pub period_steps: u64,
    pub weighting: Weighting,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            period_steps: 2000,
            weighting: Weighting::SampleCount,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub cells: Vec<CellConfig>,
    pub agent: AgentConfig,
    pub federation: FederationConfig,
    /// Env steps of training per cell.
    pub train_steps: u64,
    /// Greedy evaluation episodes, each one cell horizon long.
    pub eval_episodes: u32,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cells: default_cells(3),
            agent: AgentConfig::default(),
            federation: FederationConfig::default(),
            train_steps: 60_000,
            eval_episodes: 5,
            seed: 0,
        }
    }
}

/// `n` statistically different cells: cell `k` shifts every profile's phase
/// by `k * period / 3` and scales its mean by `1 + 0.2 k`.
pub fn default_cells(n: usize) -> Vec<CellConfig> {
    (0..n)
        .map(|k| {
            let mut cell = CellConfig {
                cell_id: k as u16,
                ..CellConfig::default()
            };
            for profile in &mut cell.slices {
                profile.phase_steps += k as u32 * profile.period_steps / 3;
                profile.mean_prb *= 1.0 + 0.2 * k as f64;
            }
            cell
        })
        .collect()
}

impl ExperimentConfig {
    /// Defaults with a single unshifted cell.
    pub fn single_cell() -> Self {
        Self {
            cells: default_cells(1),
            ..Self::default()
        }
    }

    /// Fills defaulted sub-structures that depend on sibling fields.
    pub fn normalized(mut self) -> Self {
        self.cells = self.cells.into_iter().map(CellConfig::normalized).collect();
        self
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.cells.is_empty() {
            return Err(FieldError::new("cells", "at least one cell is required"));
        }
        for (i, cell) in self.cells.iter().enumerate() {
            cell.validate().map_err(|e| e.within(&format!("cells[{i}]")))?;
            if self.cells[..i].iter().any(|c| c.cell_id == cell.cell_id) {
                return Err(FieldError::new(
                    format!("cells[{i}].cell_id"),
                    format!("duplicate cell id {}", cell.cell_id),
                ));
            }
        }
        self.agent.validate().map_err(|e| e.within("agent"))?;
        if self.federation.period_steps == 0 {
            return Err(FieldError::new("federation.period_steps", "must be at least 1"));
        }
        if self.federation.enabled {
            let first = &self.cells[0];
            for (i, cell) in self.cells.iter().enumerate().skip(1) {
                if cell.num_slices != first.num_slices {
                    return Err(FieldError::new(
                        format!("cells[{i}].num_slices"),
                        "federation needs equal slice counts across cells",
                    ));
                }
                if cell.num_actions() != first.num_actions() {
                    return Err(FieldError::new(
                        format!("cells[{i}].chunk_prb"),
                        "federation needs equal action counts (capacity / chunk) across cells",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Pretty JSON; re-parses to an equal config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses, normalizes and validates a JSON document.
pub fn parse_config(document: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(document);
    let parsed: Result<ExperimentConfig, _> = serde_path_to_error::deserialize(&mut de);
    let config = match parsed {
        Ok(config) => {
            de.end().map_err(|e| ConfigError::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
            config
        }
        Err(err) => {
            let path = err.path().to_string();
            let inner = err.into_inner();
            let message = inner.to_string();
            return Err(if inner.is_syntax() || inner.is_eof() {
                ConfigError::Syntax {
                    line: inner.line(),
                    column: inner.column(),
                    message,
                }
            } else if message.starts_with("unknown field") {
                ConfigError::UnknownKey { path, message }
            } else {
                ConfigError::Schema {
                    path,
                    line: inner.line(),
                    message,
                }
            });
        }
    };
    let config = config.normalized();
    config.validate()?;
    Ok(config)
}
