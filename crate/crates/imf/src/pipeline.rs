//! Training lower systems and supervisors for a scenario.

use std::thread;

use imf_core::agents::{train_lower, AgentSpec, LowerSystems, LowerTrainConfig};
use imf_core::experiments::Scenario;
use imf_core::netsim::SliceConfig;
use imf_core::supervisor::{train_supervisor, SupervisorModel, TrainConfig, TrainLog};
use serde::{Deserialize, Serialize};

use crate::scenario::training_intents;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Proposed,
    Baseline,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Proposed => "proposed",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "proposed" => Some(ModelKind::Proposed),
            "baseline" => Some(ModelKind::Baseline),
            _ => None,
        }
    }

    pub fn init(self, agents: Vec<AgentSpec>, seed: u64) -> SupervisorModel {
        match self {
            ModelKind::Proposed => SupervisorModel::proposed(agents, seed),
            ModelKind::Baseline => SupervisorModel::baseline(agents, seed),
        }
    }
}

pub fn profile_config(profile: &str) -> Result<SliceConfig, Error> {
    SliceConfig::profile(profile).ok_or_else(|| Error::Invalid(format!("unknown slice profile `{profile}`")))
}

/// Every standard agent of the profile, trained independently.
pub fn train_lower_for(profile: &str, train: LowerTrainConfig, seed: u64) -> Result<LowerSystems, Error> {
    let cfg = profile_config(profile)?;
    Ok(train_lower(&cfg, AgentSpec::standard(&cfg), train, seed)?)
}

/// The agents a scenario's supervisor commands, taken from `all`.
pub fn scenario_lower(scenario: &Scenario, all: &LowerSystems) -> Result<LowerSystems, Error> {
    let lower = all.for_intents(&scenario.intents);
    if lower.is_empty() {
        return Err(Error::Invalid(format!("no lower agent serves any expectation of `{}`", scenario.name)));
    }
    Ok(lower)
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub kind: ModelKind,
    pub model: SupervisorModel,
    pub log: TrainLog,
}

/// Trains one supervisor per requested kind on the scenario's training
/// intents. Kinds train on separate threads; each run is seeded on its own,
/// so the result does not depend on scheduling.
pub fn train_supervisors(
    scenario: &Scenario,
    lower: &LowerSystems,
    config: TrainConfig,
    kinds: &[ModelKind],
) -> Result<Vec<Trained>, Error> {
    let slice = scenario.slice_config()?;
    let intents = training_intents(scenario)?;
    thread::scope(|s| {
        let handles: Vec<_> = kinds
            .iter()
            .map(|&kind| {
                let (slice, intents) = (&slice, &intents);
                s.spawn(move || -> Result<Trained, Error> {
                    let mut model = kind.init(lower.specs.clone(), config.seed);
                    let log = train_supervisor(&config, slice, intents, lower, &mut model)?;
                    Ok(Trained { kind, model, log })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    })
}
