//! Intent expectations, utility forms and the scalarized global objective.
//!
//! Utility forms are evaluated as non-negative costs; [`global_utility`] is
//! the only place that negates them, so `Z <= 0` with `Z == 0` meaning every
//! expectation is met.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp for the logarithmic form. Deviations at or below it cost nothing.
pub const LOG_EPSILON: f64 = 1e-3;

/// Smallest KPI range width accepted for feature normalization.
pub const MIN_RANGE_WIDTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UtilityError {
    #[error("no KPI value for expectation `{0}`")]
    MissingKpi(ExpectationId),
    #[error("expectation `{0}` has a degenerate KPI range (width {1})")]
    DegenerateRange(ExpectationId, f64),
    #[error("expectation `{id}`: target {target} outside range [{min}, {max}]")]
    TargetOutOfRange { id: ExpectationId, target: f64, min: f64, max: f64 },
    #[error("expectation `{0}`: priority must be > 0, got {1}")]
    NonPositivePriority(ExpectationId, f64),
    #[error("duplicate expectation id `{0}`")]
    DuplicateId(ExpectationId),
    #[error("unknown expectation `{0}`")]
    UnknownExpectation(ExpectationId),
    #[error("intent set has no expectations")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Service {
    Cv,
    Urllc,
    Miot,
}

impl Service {
    pub const ALL: [Service; 3] = [Service::Cv, Service::Urllc, Service::Miot];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Service::Cv => "cv",
            Service::Urllc => "urllc",
            Service::Miot => "miot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KpiKind {
    Qoe,
    PacketLoss,
    Latency,
    #[serde(alias = "power")]
    PowerConsumption,
}

impl KpiKind {
    pub const ALL: [KpiKind; 4] =
        [KpiKind::Qoe, KpiKind::PacketLoss, KpiKind::Latency, KpiKind::PowerConsumption];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            KpiKind::Qoe => "qoe",
            KpiKind::PacketLoss => "packet_loss",
            KpiKind::Latency => "latency",
            KpiKind::PowerConsumption => "power_consumption",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtLeast,
    AtMost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityForm {
    Linear,
    #[serde(rename = "log", alias = "logarithmic")]
    Logarithmic,
    Quadratic,
}

impl UtilityForm {
    pub const ALL: [UtilityForm; 3] =
        [UtilityForm::Linear, UtilityForm::Logarithmic, UtilityForm::Quadratic];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            UtilityForm::Linear => "linear",
            UtilityForm::Logarithmic => "log",
            UtilityForm::Quadratic => "quadratic",
        }
    }
}

/// How a KPI reading is turned into a deviation from its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviationMode {
    /// Only the unmet side of the target counts.
    #[default]
    Shortfall,
    /// `|x - T|`, overshoot included.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpectationId(pub String);

impl ExpectationId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ExpectationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ExpectationId {
    fn from(s: &str) -> Self {
        Self(s.into())
    }
}

/// Attainable KPI interval, in KPI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct KpiRange {
    pub min: f64,
    pub max: f64,
}

impl KpiRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    /// Position of `x` in the range, clamped to [0, 1].
    pub fn normalize(&self, x: f64) -> f64 {
        if self.width() <= 0.0 {
            return 0.0;
        }
        ((x - self.min) / self.width()).clamp(0.0, 1.0)
    }

    /// Default range for a KPI kind in this slice model.
    pub fn default_for(kpi: KpiKind) -> Self {
        match kpi {
            KpiKind::Qoe => Self::new(1.0, 5.0),
            KpiKind::PacketLoss => Self::new(0.0, 100.0),
            KpiKind::Latency => Self::new(0.0, 250.0),
            KpiKind::PowerConsumption => Self::new(0.0, 1.0),
        }
    }
}

impl From<[f64; 2]> for KpiRange {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<KpiRange> for [f64; 2] {
    fn from(r: KpiRange) -> Self {
        [r.min, r.max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub id: ExpectationId,
    pub service: Service,
    pub kpi: KpiKind,
    pub target: f64,
    pub direction: Direction,
    pub range: KpiRange,
    pub form: UtilityForm,
    pub priority: f64,
}

impl Expectation {
    /// Linear, priority-1 expectation over the default range of `kpi`.
    pub fn new(
        id: impl Into<String>,
        service: Service,
        kpi: KpiKind,
        target: f64,
        direction: Direction,
    ) -> Self {
        Self {
            id: ExpectationId::new(id),
            service,
            kpi,
            target,
            direction,
            range: KpiRange::default_for(kpi),
            form: UtilityForm::Linear,
            priority: 1.0,
        }
    }

    pub fn with_form(mut self, form: UtilityForm) -> Self {
        self.form = form;
        self
    }

    pub fn with_priority(mut self, priority: f64) -> Self {
        self.priority = priority;
        self
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.range = KpiRange::new(min, max);
        self
    }

    pub fn validate(&self) -> Result<(), UtilityError> {
        let width = self.range.width();
        if !(width > MIN_RANGE_WIDTH) {
            return Err(UtilityError::DegenerateRange(self.id.clone(), width));
        }
        if !(self.target >= self.range.min && self.target <= self.range.max) {
            return Err(UtilityError::TargetOutOfRange {
                id: self.id.clone(),
                target: self.target,
                min: self.range.min,
                max: self.range.max,
            });
        }
        if !(self.priority > 0.0) || !self.priority.is_finite() {
            return Err(UtilityError::NonPositivePriority(self.id.clone(), self.priority));
        }
        Ok(())
    }

    /// Whether `x` satisfies the expectation's inequality.
    pub fn is_met(&self, x: f64) -> bool {
        match self.direction {
            Direction::AtLeast => x >= self.target,
            Direction::AtMost => x <= self.target,
        }
    }
}

/// Ordered set of expectations; the `n` terms of the global objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSet {
    expectations: Vec<Expectation>,
    #[serde(default)]
    deviation_mode: DeviationMode,
}

impl IntentSet {
    pub fn new(expectations: Vec<Expectation>) -> Result<Self, UtilityError> {
        Self::with_mode(expectations, DeviationMode::default())
    }

    pub fn with_mode(
        expectations: Vec<Expectation>,
        deviation_mode: DeviationMode,
    ) -> Result<Self, UtilityError> {
        if expectations.is_empty() {
            return Err(UtilityError::Empty);
        }
        for (i, e) in expectations.iter().enumerate() {
            e.validate()?;
            if expectations[..i].iter().any(|o| o.id == e.id) {
                return Err(UtilityError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self { expectations, deviation_mode })
    }

    pub fn expectations(&self) -> &[Expectation] {
        &self.expectations
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Expectation> {
        self.expectations.iter()
    }

    pub fn len(&self) -> usize {
        self.expectations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expectations.is_empty()
    }

    pub fn deviation_mode(&self) -> DeviationMode {
        self.deviation_mode
    }

    pub fn set_deviation_mode(&mut self, mode: DeviationMode) {
        self.deviation_mode = mode;
    }

    pub fn get(&self, id: &ExpectationId) -> Option<&Expectation> {
        self.expectations.iter().find(|e| &e.id == id)
    }

    pub fn find(&self, service: Service, kpi: KpiKind) -> Option<&Expectation> {
        self.expectations.iter().find(|e| e.service == service && e.kpi == kpi)
    }

    pub fn set_priority(&mut self, id: &ExpectationId, priority: f64) -> Result<(), UtilityError> {
        if !(priority > 0.0) || !priority.is_finite() {
            return Err(UtilityError::NonPositivePriority(id.clone(), priority));
        }
        let e = self.get_mut(id)?;
        e.priority = priority;
        Ok(())
    }

    pub fn set_form(&mut self, id: &ExpectationId, form: UtilityForm) -> Result<(), UtilityError> {
        self.get_mut(id)?.form = form;
        Ok(())
    }

    /// Same expectations with every form replaced.
    pub fn with_all_forms(&self, form: UtilityForm) -> Self {
        let mut out = self.clone();
        for e in &mut out.expectations {
            e.form = form;
        }
        out
    }

    fn get_mut(&mut self, id: &ExpectationId) -> Result<&mut Expectation, UtilityError> {
        self.expectations
            .iter_mut()
            .find(|e| &e.id == id)
            .ok_or_else(|| UtilityError::UnknownExpectation(id.clone()))
    }
}

/// Current KPI reading `x_i` per expectation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KpiSnapshot {
    pub values: BTreeMap<ExpectationId, f64>,
}

impl KpiSnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ExpectationId, value: f64) {
        self.values.insert(id, value);
    }

    pub fn with(mut self, id: impl Into<String>, value: f64) -> Self {
        self.insert(ExpectationId::new(id), value);
        self
    }

    pub fn get(&self, id: &ExpectationId) -> Option<f64> {
        self.values.get(id).copied()
    }

    fn require(&self, id: &ExpectationId) -> Result<f64, UtilityError> {
        self.get(id).ok_or_else(|| UtilityError::MissingKpi(id.clone()))
    }
}

/// Range-normalized, priority-weighted utility features in intent order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub features: Vec<(ExpectationId, f64)>,
}

impl FeatureVector {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.features.iter().map(|(_, y)| *y)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Deviation of `kpi_value` from the expectation's target, in KPI units.
pub fn deviation(expectation: &Expectation, kpi_value: f64, mode: DeviationMode) -> f64 {
    let t = expectation.target;
    match mode {
        DeviationMode::Absolute => libm::fabs(kpi_value - t),
        DeviationMode::Shortfall => match expectation.direction {
            Direction::AtLeast => (t - kpi_value).max(0.0),
            Direction::AtMost => (kpi_value - t).max(0.0),
        },
    }
}

/// Penalty magnitude of a deviation under a utility form.
///
/// Linear `P*d`, quadratic `P*d^2`, logarithmic `P*ln(max(d, eps)/eps)`.
/// The log offset only shifts by a constant, so cost differences between two
/// deviations above `eps` match the plain `ln` form.
pub fn eval_form(form: UtilityForm, dev: f64, priority: f64) -> f64 {
    let dev = dev.max(0.0);
    let base = match form {
        UtilityForm::Linear => dev,
        UtilityForm::Quadratic => dev * dev,
        UtilityForm::Logarithmic => libm::log(dev.max(LOG_EPSILON) / LOG_EPSILON),
    };
    priority * base
}

/// Scalarized global objective `Z = -sum_i cost_i`, always `<= 0`.
pub fn global_utility(intents: &IntentSet, snapshot: &KpiSnapshot) -> Result<f64, UtilityError> {
    let mode = intents.deviation_mode();
    let mut total = 0.0;
    for e in intents.iter() {
        let x = snapshot.require(&e.id)?;
        total += eval_form(e.form, deviation(e, x, mode), e.priority);
    }
    Ok(-total)
}

/// Per-step reward of the supervisor; identical to [`global_utility`].
pub fn step_reward(intents: &IntentSet, snapshot: &KpiSnapshot) -> Result<f64, UtilityError> {
    global_utility(intents, snapshot)
}

/// Engineered DUN inputs: `y_i = P_i * f(dev_i) / f(range width_i)`.
pub fn feature_vector(intents: &IntentSet, snapshot: &KpiSnapshot) -> Result<FeatureVector, UtilityError> {
    let mode = intents.deviation_mode();
    let mut features = Vec::with_capacity(intents.len());
    for e in intents.iter() {
        let x = snapshot.require(&e.id)?;
        let width = e.range.width();
        if !(width > MIN_RANGE_WIDTH) {
            return Err(UtilityError::DegenerateRange(e.id.clone(), width));
        }
        let denom = eval_form(e.form, width, 1.0);
        if !(denom > 0.0) {
            return Err(UtilityError::DegenerateRange(e.id.clone(), width));
        }
        let y = e.priority * eval_form(e.form, deviation(e, x, mode), 1.0) / denom;
        features.push((e.id.clone(), y));
    }
    Ok(FeatureVector { features })
}

/// Changes to one expectation; absent fields stay as they are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationPatch {
    pub id: ExpectationId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub form: Option<UtilityForm>,
}

/// A batch of expectation changes applied all-or-nothing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentPatch {
    pub changes: Vec<ExpectationPatch>,
}

impl IntentPatch {
    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }

    /// Checks every change against `intents` without applying anything.
    pub fn validate(&self, intents: &IntentSet) -> Result<(), UtilityError> {
        self.apply(intents).map(|_| ())
    }

    /// A new intent set with every change applied, or the first error.
    pub fn apply(&self, intents: &IntentSet) -> Result<IntentSet, UtilityError> {
        let mut out = intents.clone();
        for c in &self.changes {
            if let Some(p) = c.priority {
                out.set_priority(&c.id, p)?;
            }
            if let Some(f) = c.form {
                out.set_form(&c.id, f)?;
            }
            if c.priority.is_none() && c.form.is_none() && out.get(&c.id).is_none() {
                return Err(UtilityError::UnknownExpectation(c.id.clone()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn qoe() -> Expectation {
        Expectation::new("cv-qoe", Service::Cv, KpiKind::Qoe, 3.0, Direction::AtLeast)
    }

    fn pl() -> Expectation {
        Expectation::new("urllc-pl", Service::Urllc, KpiKind::PacketLoss, 2.0, Direction::AtMost)
    }

    #[test]
    fn deviation_examples() {
        assert_eq!(deviation(&qoe(), 3.0, DeviationMode::Shortfall), 0.0);
        assert_eq!(deviation(&qoe(), 4.0, DeviationMode::Shortfall), 0.0);
        assert_eq!(deviation(&qoe(), 4.0, DeviationMode::Absolute), 1.0);
        assert_eq!(deviation(&pl(), 7.0, DeviationMode::Shortfall), 5.0);
        assert_eq!(deviation(&pl(), 7.0, DeviationMode::Absolute), 5.0);
    }

    #[test]
    fn form_deltas_for_seven_to_five() {
        let delta = |f| eval_form(f, 7.0, 1.0) - eval_form(f, 5.0, 1.0);
        assert!((delta(UtilityForm::Linear) - 2.0).abs() < 1e-12);
        assert!((delta(UtilityForm::Logarithmic) - 0.336_472_236_621_212_9).abs() < 1e-12);
        assert!((delta(UtilityForm::Quadratic) - 24.0).abs() < 1e-12);
    }

    #[test]
    fn zero_deviation_costs_nothing() {
        for f in UtilityForm::ALL {
            assert_eq!(eval_form(f, 0.0, 7.5), 0.0);
            assert!(eval_form(f, LOG_EPSILON, 1.0) <= LOG_EPSILON);
        }
    }

    #[test]
    fn global_utility_examples() {
        let set = IntentSet::new(vec![qoe(), pl()]).unwrap();
        let on_target = KpiSnapshot::new().with("cv-qoe", 3.0).with("urllc-pl", 2.0);
        assert_eq!(global_utility(&set, &on_target).unwrap(), 0.0);

        let single = IntentSet::new(vec![pl()]).unwrap();
        let s = KpiSnapshot::new().with("urllc-pl", 7.0);
        assert_eq!(global_utility(&single, &s).unwrap(), -5.0);
        assert_eq!(step_reward(&single, &s).unwrap(), -5.0);

        let mixed = IntentSet::new(vec![
            qoe().with_range(0.0, 10.0),
            pl().with_form(UtilityForm::Quadratic).with_priority(3.0),
        ])
        .unwrap();
        let s = KpiSnapshot::new().with("cv-qoe", 1.0).with("urllc-pl", 4.0);
        assert_eq!(global_utility(&mixed, &s).unwrap(), -14.0);
    }

    #[test]
    fn missing_kpi_names_expectation() {
        let set = IntentSet::new(vec![qoe(), pl()]).unwrap();
        let s = KpiSnapshot::new().with("cv-qoe", 3.0);
        assert_eq!(
            global_utility(&set, &s),
            Err(UtilityError::MissingKpi(ExpectationId::new("urllc-pl")))
        );
    }

    #[test]
    fn feature_examples() {
        let set = IntentSet::new(vec![qoe()]).unwrap();
        let fv = feature_vector(&set, &KpiSnapshot::new().with("cv-qoe", 2.0)).unwrap();
        assert!((fv.features[0].1 - 0.25).abs() < 1e-12);

        let miot = Expectation::new("miot-pl", Service::Miot, KpiKind::PacketLoss, 2.0, Direction::AtMost)
            .with_form(UtilityForm::Quadratic)
            .with_priority(5.0);
        let set = IntentSet::new(vec![miot]).unwrap();
        let fv = feature_vector(&set, &KpiSnapshot::new().with("miot-pl", 12.0)).unwrap();
        assert!((fv.features[0].1 - 0.05).abs() < 1e-12);

        for f in UtilityForm::ALL {
            let set = IntentSet::new(vec![qoe().with_form(f).with_priority(4.0)]).unwrap();
            let fv = feature_vector(&set, &KpiSnapshot::new().with("cv-qoe", 3.5)).unwrap();
            assert_eq!(fv.features[0].1, 0.0);
        }
    }

    #[test]
    fn invalid_expectations_rejected() {
        assert!(matches!(
            IntentSet::new(vec![qoe().with_range(2.0, 2.0)]),
            Err(UtilityError::DegenerateRange(..))
        ));
        assert!(matches!(
            IntentSet::new(vec![qoe().with_priority(0.0)]),
            Err(UtilityError::NonPositivePriority(..))
        ));
        assert!(matches!(
            IntentSet::new(vec![qoe(), qoe()]),
            Err(UtilityError::DuplicateId(..))
        ));
        assert!(matches!(
            IntentSet::new(vec![qoe().with_range(4.0, 5.0)]),
            Err(UtilityError::TargetOutOfRange { .. })
        ));
        assert_eq!(IntentSet::new(vec![]), Err(UtilityError::Empty));
    }

    #[test]
    fn runtime_mutation_changes_next_evaluation() {
        let mut set = IntentSet::new(vec![qoe(), pl()]).unwrap();
        let s = KpiSnapshot::new().with("cv-qoe", 2.0).with("urllc-pl", 4.0);
        let before = global_utility(&set, &s).unwrap();
        set.set_priority(&"urllc-pl".into(), 10.0).unwrap();
        set.set_form(&"cv-qoe".into(), UtilityForm::Quadratic).unwrap();
        let after = global_utility(&set, &s).unwrap();
        assert_eq!(before, -3.0);
        assert_eq!(after, -21.0);
        assert!(set.set_priority(&"nope".into(), 1.0).is_err());
        assert!(set.set_priority(&"cv-qoe".into(), -1.0).is_err());
    }

    #[test]
    fn patches_apply_atomically() {
        let set = IntentSet::new(vec![qoe(), pl()]).unwrap();
        let good = IntentPatch {
            changes: vec![ExpectationPatch { id: "urllc-pl".into(), priority: Some(5.0), form: Some(UtilityForm::Quadratic) }],
        };
        let out = good.apply(&set).unwrap();
        assert_eq!(out.get(&"urllc-pl".into()).unwrap().priority, 5.0);
        assert_eq!(out.get(&"urllc-pl".into()).unwrap().form, UtilityForm::Quadratic);
        assert_eq!(IntentPatch::default().apply(&set).unwrap(), set);

        let half_bad = IntentPatch {
            changes: vec![
                ExpectationPatch { id: "cv-qoe".into(), priority: Some(2.0), form: None },
                ExpectationPatch { id: "cv-qoe".into(), priority: Some(-1.0), form: None },
            ],
        };
        assert!(half_bad.apply(&set).is_err());
        let unknown = IntentPatch { changes: vec![ExpectationPatch { id: "nope".into(), priority: None, form: None }] };
        assert!(matches!(unknown.apply(&set), Err(UtilityError::UnknownExpectation(_))));
    }
}
