//! Scenario files.
//!
//! A scenario is a TOML document with a `[slice]` table, one
//! `[[expectations]]` entry per expectation, an optional `[sweep]` table and
//! optional `[[schedule]]` entries of run-time intent patches:
//!
//! ```toml
//! name = "demo"
//! horizon = 20
//! seeds = [0, 1, 2, 3, 4]
//!
//! [slice]
//! profile = "scarce"
//!
//! [[expectations]]
//! id = "cv-qoe"
//! service = "cv"
//! kpi = "qoe"
//! target = 3.0
//! direction = "at_least"
//! form = "log"
//! priority = 1.0
//!
//! [[schedule]]
//! step = 5
//! changes = [{ id = "cv-qoe", priority = 10.0 }]
//! ```

use std::path::Path;

use imf_core::experiments::{Scenario, ScheduledPatch, SweepSpec, DEFAULT_SWEEP};
use imf_core::netsim::SliceConfig;
use imf_core::supervisor::InitialState;
use imf_core::utility::{
    DeviationMode, Direction, Expectation, ExpectationId, ExpectationPatch, IntentPatch, IntentSet, KpiKind, KpiRange,
    Service, UtilityError, UtilityForm,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BUILTIN: [(&str, &str); 7] = [
    ("scenario1", include_str!("../scenarios/scenario1.toml")),
    ("scenario2", include_str!("../scenarios/scenario2.toml")),
    ("exp1-log", include_str!("../scenarios/exp1-log.toml")),
    ("exp2-quadratic", include_str!("../scenarios/exp2-quadratic.toml")),
    ("exp3-mixed", include_str!("../scenarios/exp3-mixed.toml")),
    ("exp4-linear-ablation", include_str!("../scenarios/exp4-linear-ablation.toml")),
    ("exp5-table2", include_str!("../scenarios/exp5-table2.toml")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown scenario `{0}` (not a built-in name or an existing file)")]
    Unknown(String),
    #[error("unknown slice profile `{0}`")]
    UnknownProfile(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub deviation: DeviationMode,
    pub slice: SliceSection,
    pub expectations: Vec<ExpectationEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<ScheduleEntry>,
}

fn default_horizon() -> usize {
    20
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSection {
    pub profile: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectationEntry {
    pub id: String,
    pub service: Service,
    pub kpi: KpiKind,
    pub target: f64,
    pub direction: Direction,
    #[serde(default = "default_form")]
    pub form: UtilityForm,
    #[serde(default = "default_priority")]
    pub priority: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<KpiRange>,
}

fn default_form() -> UtilityForm {
    UtilityForm::Linear
}

fn default_priority() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub expectations: Vec<String>,
    #[serde(default = "default_values")]
    pub values: Vec<f64>,
    #[serde(default = "default_priority")]
    pub fixed_priority: f64,
}

fn default_values() -> Vec<f64> {
    DEFAULT_SWEEP.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub step: usize,
    pub changes: Vec<ExpectationPatch>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn into_scenario(self) -> Result<Scenario, ScenarioError> {
        if SliceConfig::profile(&self.slice.profile).is_none() {
            return Err(ScenarioError::UnknownProfile(self.slice.profile));
        }
        if self.horizon == 0 {
            return Err(ScenarioError::Invalid("horizon must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(ScenarioError::Invalid("seed list is empty".into()));
        }
        let exps = self
            .expectations
            .into_iter()
            .map(|e| {
                let mut x = Expectation::new(e.id, e.service, e.kpi, e.target, e.direction)
                    .with_form(e.form)
                    .with_priority(e.priority);
                if let Some(r) = e.range {
                    x = x.with_range(r.min, r.max);
                }
                x
            })
            .collect();
        let intents = IntentSet::with_mode(exps, self.deviation)?;

        let sweep = match self.sweep {
            Some(s) => {
                for id in &s.expectations {
                    if intents.get(&ExpectationId::new(id.as_str())).is_none() {
                        return Err(UtilityError::UnknownExpectation(ExpectationId::new(id.as_str())).into());
                    }
                }
                if let Some(v) = s.values.iter().find(|v| !(**v > 0.0)) {
                    return Err(ScenarioError::Invalid(format!("sweep value {v} must be > 0")));
                }
                if !(s.fixed_priority > 0.0) {
                    return Err(ScenarioError::Invalid("fixed_priority must be > 0".into()));
                }
                Some(SweepSpec {
                    expectations: s.expectations.into_iter().map(ExpectationId::new).collect(),
                    values: s.values,
                    fixed_priority: s.fixed_priority,
                })
            }
            None => None,
        };

        let schedule: Vec<ScheduledPatch> = self
            .schedule
            .into_iter()
            .map(|s| ScheduledPatch { step: s.step, patch: IntentPatch { changes: s.changes } })
            .collect();
        if let Some(s) = schedule.iter().find(|s| s.step >= self.horizon) {
            return Err(ScenarioError::Invalid(format!("schedule step {} is beyond horizon {}", s.step, self.horizon)));
        }

        let scenario = Scenario {
            name: self.name,
            profile: self.slice.profile,
            intents,
            schedule,
            horizon: self.horizon,
            seeds: self.seeds,
            initial: self.initial,
            sweep,
        };
        scenario.resolved_schedule().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(scenario)
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    ScenarioFile::parse(text)?.into_scenario()
}

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Resolves a built-in scenario name or a path to a scenario file, returning
/// the scenario with the exact source text.
pub fn load_scenario(name_or_path: &str) -> Result<(Scenario, String), ScenarioError> {
    let text = match builtin(name_or_path) {
        Some(t) => t.to_string(),
        None => {
            let path = Path::new(name_or_path);
            if !path.is_file() {
                return Err(ScenarioError::Unknown(name_or_path.into()));
            }
            std::fs::read_to_string(path)
                .map_err(|source| ScenarioError::Io { path: name_or_path.into(), source })?
        }
    };
    Ok((parse_scenario(&text)?, text))
}

/// The intents a supervisor for `scenario` is trained on: the same
/// expectations, all linear with unit priority. Forms and priorities of the
/// scenario itself only apply at evaluation.
pub fn training_intents(scenario: &Scenario) -> Result<IntentSet, ScenarioError> {
    let mut set = scenario.intents.with_all_forms(UtilityForm::Linear);
    let ids: Vec<ExpectationId> = set.iter().map(|e| e.id.clone()).collect();
    for id in &ids {
        set.set_priority(id, 1.0)?;
    }
    Ok(set)
}
