//! Scenarios, the IAE metric, priority sweeps and model comparisons.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::LowerSystems;
use crate::netsim::SliceConfig;
use crate::supervisor::{self, EpisodeOptions, EpisodeTrace, InitialState, SupervisorError, SupervisorModel};
use crate::utility::{Expectation, ExpectationId, IntentPatch, IntentSet, UtilityError};

pub const DEFAULT_SWEEP: [f64; 6] = [1.0, 2.0, 4.0, 6.0, 8.0, 10.0];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("IAE needs a non-zero target; use the range-normalized variant for zero-target KPIs")]
    ZeroTarget,
    #[error("series has {got} samples, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("series is empty")]
    Empty,
    #[error("unknown slice profile `{0}`")]
    UnknownProfile(String),
    #[error("sweep value {0} must be > 0")]
    BadSweepValue(f64),
    #[error(transparent)]
    Supervisor(#[from] SupervisorError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

/// `(1/n) Σ |x_k - T| / T`.
pub fn iae(series: &[f64], target: f64, n: usize) -> Result<f64, ExperimentError> {
    if n == 0 || series.is_empty() {
        return Err(ExperimentError::Empty);
    }
    if series.len() != n {
        return Err(ExperimentError::LengthMismatch { got: series.len(), expected: n });
    }
    if target == 0.0 {
        return Err(ExperimentError::ZeroTarget);
    }
    Ok(series.iter().map(|x| libm::fabs(x - target) / libm::fabs(target)).sum::<f64>() / n as f64)
}

/// `(1/n) Σ |x_k - T| / width`, for targets where the relative form is undefined.
pub fn iae_range_normalized(series: &[f64], target: f64, width: f64) -> Result<f64, ExperimentError> {
    if series.is_empty() {
        return Err(ExperimentError::Empty);
    }
    Ok(series.iter().map(|x| libm::fabs(x - target) / width).sum::<f64>() / series.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IaeKind {
    /// Deviation relative to the target.
    Relative,
    /// Deviation relative to the KPI range width (zero targets).
    RangeNormalized,
}

impl IaeKind {
    pub fn label(self) -> &'static str {
        match self {
            IaeKind::Relative => "iae",
            IaeKind::RangeNormalized => "iae_range",
        }
    }
}

/// IAE of one expectation, choosing the variant its target allows.
pub fn expectation_iae(e: &Expectation, series: &[f64]) -> Result<(f64, IaeKind), ExperimentError> {
    if e.target == 0.0 {
        Ok((iae_range_normalized(series, e.target, e.range.width())?, IaeKind::RangeNormalized))
    } else {
        Ok((iae(series, e.target, series.len())?, IaeKind::Relative))
    }
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side has no variance or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            out[*k] = avg;
        }
        i = j + 1;
    }
    out
}

/// 1-based index of the first sample that meets the expectation.
pub fn first_step_in_band(e: &Expectation, series: &[f64]) -> Option<usize> {
    series.iter().position(|x| e.is_met(*x)).map(|k| k + 1)
}

/// Median of the available values; `None` counts as later than any step.
pub fn median_step(steps: &[Option<usize>]) -> Option<f64> {
    let mut v: Vec<f64> = steps.iter().map(|s| s.map_or(f64::INFINITY, |k| k as f64)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    let med = if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 };
    med.is_finite().then_some(med)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledPatch {
    pub step: usize,
    pub patch: IntentPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Expectations swept one at a time.
    pub expectations: Vec<ExpectationId>,
    pub values: Vec<f64>,
    /// Priority of every expectation not being swept.
    pub fixed_priority: f64,
}

impl SweepSpec {
    pub fn new(expectations: Vec<ExpectationId>) -> Self {
        Self { expectations, values: DEFAULT_SWEEP.to_vec(), fixed_priority: 1.0 }
    }

    /// Intent sets of one swept expectation, one per sweep value.
    pub fn points(&self, base: &IntentSet, swept: &ExpectationId) -> Result<Vec<(f64, IntentSet)>, ExperimentError> {
        if base.get(swept).is_none() {
            return Err(UtilityError::UnknownExpectation(swept.clone()).into());
        }
        let mut out = Vec::with_capacity(self.values.len());
        for &p in &self.values {
            if !(p > 0.0) {
                return Err(ExperimentError::BadSweepValue(p));
            }
            let mut set = base.clone();
            for e in base.iter() {
                set.set_priority(&e.id, if &e.id == swept { p } else { self.fixed_priority })?;
            }
            out.push((p, set));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub profile: String,
    pub intents: IntentSet,
    pub schedule: Vec<ScheduledPatch>,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub initial: InitialState,
    pub sweep: Option<SweepSpec>,
}

impl Scenario {
    pub fn new(name: impl Into<String>, profile: impl Into<String>, intents: IntentSet) -> Self {
        Self {
            name: name.into(),
            profile: profile.into(),
            intents,
            schedule: Vec::new(),
            horizon: 20,
            seeds: (0..5).collect(),
            initial: InitialState::Random,
            sweep: None,
        }
    }

    pub fn slice_config(&self) -> Result<SliceConfig, ExperimentError> {
        SliceConfig::profile(&self.profile).ok_or_else(|| ExperimentError::UnknownProfile(self.profile.clone()))
    }

    /// Cumulative intent sets for the run-time schedule.
    pub fn resolved_schedule(&self) -> Result<Vec<(usize, IntentSet)>, ExperimentError> {
        let mut sorted = self.schedule.clone();
        sorted.sort_by_key(|s| s.step);
        let mut current = self.intents.clone();
        let mut out = Vec::with_capacity(sorted.len());
        for s in sorted {
            current = s.patch.apply(&current)?;
            out.push((s.step, current.clone()));
        }
        Ok(out)
    }

    pub fn with_intents(&self, intents: IntentSet) -> Self {
        Self { intents, ..self.clone() }
    }
}

/// A trained supervisor with the lower systems it commands.
#[derive(Debug, Clone, Copy)]
pub struct ModelRef<'a> {
    pub label: &'a str,
    pub model: &'a SupervisorModel,
    pub lower: &'a LowerSystems,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaeEntry {
    pub expectation: ExpectationId,
    pub kind: IaeKind,
    pub mean: f64,
    pub per_seed: Vec<f64>,
    /// First in-band step (1-based) per seed.
    pub first_in_band: Vec<Option<usize>>,
    /// Whether the last sample is in band, per seed.
    pub in_band_at_end: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub scenario: String,
    pub model: String,
    pub seeds: Vec<u64>,
    pub entries: Vec<IaeEntry>,
    pub traces: Vec<EpisodeTrace>,
}

impl ModelReport {
    pub fn entry(&self, id: &str) -> Option<&IaeEntry> {
        self.entries.iter().find(|e| e.expectation.as_str() == id)
    }

    /// Seeds on which every listed expectation ends in band.
    pub fn seeds_all_in_band(&self, ids: &[&str]) -> usize {
        (0..self.seeds.len())
            .filter(|&s| ids.iter().all(|id| self.entry(id).is_some_and(|e| e.in_band_at_end[s])))
            .count()
    }
}

/// Evaluation rollouts of one model, one per scenario seed.
pub fn evaluate(scenario: &Scenario, slice: &SliceConfig, m: ModelRef<'_>) -> Result<ModelReport, ExperimentError> {
    let schedule = scenario.resolved_schedule()?;
    let mut traces = Vec::with_capacity(scenario.seeds.len());
    for &seed in &scenario.seeds {
        let opts = EpisodeOptions { horizon: scenario.horizon, seed, initial: scenario.initial };
        traces.push(supervisor::run_episode(m.model, m.lower, slice, &scenario.intents, &schedule, opts)?);
    }
    let mut entries = Vec::with_capacity(scenario.intents.len());
    for e in scenario.intents.iter() {
        let mut per_seed = Vec::with_capacity(traces.len());
        let mut first = Vec::with_capacity(traces.len());
        let mut at_end = Vec::with_capacity(traces.len());
        let mut kind = IaeKind::Relative;
        for t in &traces {
            // the expectation in force at each step decides the band
            let series = t.series(e.service, e.kpi);
            let (v, k) = expectation_iae(e, &series)?;
            kind = k;
            per_seed.push(v);
            first.push(first_step_in_band(e, &series));
            at_end.push(series.last().is_some_and(|x| e.is_met(*x)));
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        entries.push(IaeEntry { expectation: e.id.clone(), kind, mean, per_seed, first_in_band: first, in_band_at_end: at_end });
    }
    Ok(ModelReport {
        scenario: scenario.name.clone(),
        model: m.label.into(),
        seeds: scenario.seeds.clone(),
        entries,
        traces,
    })
}

/// [`evaluate`] for every model on the scenario's own profile.
pub fn run_scenario(scenario: &Scenario, models: &[ModelRef<'_>]) -> Result<Vec<ModelReport>, ExperimentError> {
    let slice = scenario.slice_config()?;
    models.iter().map(|m| evaluate(scenario, &slice, *m)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario: String,
    pub model: String,
    pub swept: ExpectationId,
    pub priority: f64,
    pub expectation: ExpectationId,
    pub kind: IaeKind,
    pub iae: f64,
    pub seed_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `(P, IAE of the swept expectation)` for one model and swept id.
    pub fn curve(&self, model: &str, swept: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.model == model && r.swept.as_str() == swept && r.expectation == r.swept)
            .map(|r| (r.priority, r.iae))
            .collect()
    }

    /// Spearman ρ between the swept priority and its own IAE.
    pub fn trend(&self, model: &str, swept: &str) -> Option<f64> {
        let c = self.curve(model, swept);
        let (p, v): (Vec<f64>, Vec<f64>) = c.into_iter().unzip();
        spearman(&p, &v)
    }

    pub fn iae_at(&self, model: &str, swept: &str, expectation: &str, priority: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.model == model && r.swept.as_str() == swept && r.expectation.as_str() == expectation && r.priority == priority
            })
            .map(|r| r.iae)
    }
}

/// Every sweep point of one swept expectation, for every model. Priorities
/// change at evaluation time only; the models are untouched.
pub fn priority_sweep(
    scenario: &Scenario,
    spec: &SweepSpec,
    swept: &ExpectationId,
    models: &[ModelRef<'_>],
) -> Result<SweepTable, ExperimentError> {
    let slice = scenario.slice_config()?;
    let mut table = SweepTable::default();
    for (p, set) in spec.points(&scenario.intents, swept)? {
        let point = scenario.with_intents(set);
        for m in models {
            let report = evaluate(&point, &slice, *m)?;
            for e in &report.entries {
                table.rows.push(SweepRow {
                    scenario: scenario.name.clone(),
                    model: m.label.into(),
                    swept: swept.clone(),
                    priority: p,
                    expectation: e.expectation.clone(),
                    kind: e.kind,
                    iae: e.mean,
                    seed_count: report.seeds.len(),
                });
            }
        }
    }
    Ok(table)
}

/// [`priority_sweep`] over every expectation named by the scenario's sweep.
pub fn scenario_sweeps(scenario: &Scenario, models: &[ModelRef<'_>]) -> Result<SweepTable, ExperimentError> {
    let spec = scenario.sweep.clone().unwrap_or_else(|| SweepSpec::new(scenario.intents.iter().map(|e| e.id.clone()).collect()));
    let mut all = SweepTable::default();
    for id in &spec.expectations {
        all.rows.extend(priority_sweep(scenario, &spec, id, models)?.rows);
    }
    Ok(all)
}
