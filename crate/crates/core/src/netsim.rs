//! Deterministic fluid-flow model of one shared slice carrying CV, URLLC and
//! mIoT traffic.
//!
//! One call to [`step`] is one control interval. Airlink capacity is handed
//! out by strict packet priority; services on the same priority level split
//! what is left in proportion to their offered load, each capped by its MBR.
//! Latency comes from UE placement over sites plus a per-pod compute term,
//! and mIoT power from how many mIoT UEs each site serves.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SimRng;
use crate::utility::{IntentSet, KpiKind, KpiSnapshot, Service, UtilityError};

const PLACEMENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid slice config: {0}")]
    InvalidConfig(String),
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("priority level {level} out of range (levels: {levels})")]
    PriorityOutOfRange { level: u8, levels: u8 },
    #[error("MBR index {index} out of range ({len} levels)")]
    MbrIndexOutOfRange { index: usize, len: usize },
    #[error("move fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("state does not match config: {0}")]
    StateMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceLoad {
    pub ue_count: u32,
    /// Mbps per UE.
    pub per_ue_demand: f64,
}

impl ServiceLoad {
    pub fn offered(&self) -> f64 {
        f64::from(self.ue_count) * self.per_ue_demand
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceLoads {
    pub cv: ServiceLoad,
    pub urllc: ServiceLoad,
    pub miot: ServiceLoad,
}

impl ServiceLoads {
    pub fn get(&self, s: Service) -> &ServiceLoad {
        match s {
            Service::Cv => &self.cv,
            Service::Urllc => &self.urllc,
            Service::Miot => &self.miot,
        }
    }

    pub fn get_mut(&mut self, s: Service) -> &mut ServiceLoad {
        match s {
            Service::Cv => &mut self.cv,
            Service::Urllc => &mut self.urllc,
            Service::Miot => &mut self.miot,
        }
    }

    pub fn offered(&self) -> [f64; 3] {
        Service::ALL.map(|s| self.get(s).offered())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Central,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub kind: SiteKind,
    /// ms
    pub propagation_latency: f64,
    /// Power units drawn per mIoT UE served here.
    pub per_ue_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoscaleLevel {
    Small,
    Medium,
    Large,
    VeryLarge,
}

impl AutoscaleLevel {
    pub const ALL: [AutoscaleLevel; 4] =
        [AutoscaleLevel::Small, AutoscaleLevel::Medium, AutoscaleLevel::Large, AutoscaleLevel::VeryLarge];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Pod ceiling for each auto-scale limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoscalePods {
    pub small: u32,
    pub medium: u32,
    pub large: u32,
    pub very_large: u32,
}

impl AutoscalePods {
    pub fn pods(&self, level: AutoscaleLevel) -> u32 {
        match level {
            AutoscaleLevel::Small => self.small,
            AutoscaleLevel::Medium => self.medium,
            AutoscaleLevel::Large => self.large,
            AutoscaleLevel::VeryLarge => self.very_large,
        }
    }
}

impl Default for AutoscalePods {
    fn default() -> Self {
        Self { small: 2, medium: 4, large: 8, very_large: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    /// Mbps shared by all services.
    pub airlink_capacity: f64,
    pub loads: ServiceLoads,
    pub sites: Vec<Site>,
    pub autoscale_pods: AutoscalePods,
    /// ms of compute latency with a single pod; divided by the pod count.
    pub compute_latency_base: f64,
    pub priority_levels: u8,
    /// Mbps caps, strictly increasing.
    pub mbr_levels: Vec<f64>,
    /// Power normalization denominator.
    pub max_power: f64,
    /// UE mass fraction moved by one move-UE-context action.
    pub move_step: f64,
}

pub const AMPLE_CAPACITY: f64 = 20.0;
pub const SCARCE_CAPACITY: f64 = 10.0;

impl SliceConfig {
    /// The "paper-desk" baseline profile at 20 Mbps.
    pub fn paper_desk() -> Self {
        let sites = vec![
            Site { id: "central".into(), kind: SiteKind::Central, propagation_latency: 100.0, per_ue_power: 50.0 },
            Site { id: "edge1".into(), kind: SiteKind::Edge, propagation_latency: 30.0, per_ue_power: 60.0 },
            Site { id: "edge2".into(), kind: SiteKind::Edge, propagation_latency: 40.0, per_ue_power: 70.0 },
        ];
        let loads = ServiceLoads {
            cv: ServiceLoad { ue_count: 4, per_ue_demand: 2.0 },
            urllc: ServiceLoad { ue_count: 3, per_ue_demand: 1.0 },
            miot: ServiceLoad { ue_count: 40, per_ue_demand: 0.1 },
        };
        let max_power = f64::from(loads.miot.ue_count) * 70.0;
        Self {
            airlink_capacity: AMPLE_CAPACITY,
            loads,
            sites,
            autoscale_pods: AutoscalePods::default(),
            compute_latency_base: 160.0,
            priority_levels: 4,
            mbr_levels: vec![2.0, 4.0, 6.0, 8.0, 12.0],
            max_power,
            move_step: 0.1,
        }
    }

    /// Named profiles: `ample`/`paper-desk` (20 Mbps) and `scarce` (10 Mbps).
    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "ample" | "paper-desk" | "paper-desk-ample" => Some(Self::paper_desk()),
            "scarce" | "paper-desk-scarce" => Some(Self::paper_desk().with_capacity(SCARCE_CAPACITY)),
            _ => None,
        }
    }

    pub fn with_capacity(mut self, mbps: f64) -> Self {
        self.airlink_capacity = mbps;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if !(self.airlink_capacity > 0.0) || !self.airlink_capacity.is_finite() {
            return bad("airlink_capacity must be > 0");
        }
        for s in Service::ALL {
            let l = self.loads.get(s);
            if l.ue_count < 1 {
                return bad("every service needs ue_count >= 1");
            }
            if !(l.per_ue_demand >= 0.0) || !l.per_ue_demand.is_finite() {
                return bad("per_ue_demand must be finite and >= 0");
            }
        }
        if self.sites.is_empty() {
            return bad("at least one site is required");
        }
        if !self.sites.iter().any(|s| s.kind == SiteKind::Central) {
            return bad("a central site is required");
        }
        for (i, s) in self.sites.iter().enumerate() {
            if self.sites[..i].iter().any(|o| o.id == s.id) {
                return bad("site ids must be unique");
            }
            if !(s.propagation_latency >= 0.0) || !(s.per_ue_power >= 0.0) {
                return bad("site latency and power must be >= 0");
            }
        }
        let p = &self.autoscale_pods;
        if !(p.small >= 1 && p.small < p.medium && p.medium < p.large && p.large < p.very_large) {
            return bad("autoscale pods must be strictly increasing and >= 1");
        }
        if p.large != 8 {
            return bad("autoscale level `large` must map to 8 pods");
        }
        if self.priority_levels < 1 {
            return bad("priority_levels must be >= 1");
        }
        if self.mbr_levels.is_empty() {
            return bad("mbr_levels must not be empty");
        }
        if self.mbr_levels.iter().any(|m| !(*m > 0.0)) || self.mbr_levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("mbr_levels must be positive and strictly increasing");
        }
        if !(self.compute_latency_base >= 0.0) {
            return bad("compute_latency_base must be >= 0");
        }
        if !(self.max_power > 0.0) {
            return bad("max_power must be > 0");
        }
        if !(self.move_step > 0.0 && self.move_step <= 1.0) {
            return bad("move_step must be in (0, 1]");
        }
        Ok(())
    }

    pub fn site_index(&self, id: &str) -> Result<usize, SimError> {
        self.sites
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| SimError::UnknownSite(id.into()))
    }

    pub fn central_index(&self) -> usize {
        self.sites.iter().position(|s| s.kind == SiteKind::Central).unwrap_or(0)
    }

    pub fn mid_mbr_index(&self) -> usize {
        self.mbr_levels.len() / 2
    }
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self::paper_desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceState {
    /// Packet priority level per service (higher is served first).
    pub priority: [u8; 3],
    pub mbr_index: [usize; 3],
    /// Per service, fraction of its UEs served from each site.
    pub placement: [Vec<f64>; 3],
    /// Per site, auto-scale limit of each service.
    pub autoscale: Vec<[AutoscaleLevel; 3]>,
    pub step_counter: u64,
}

impl SliceState {
    pub fn placement_of(&self, s: Service) -> &[f64] {
        &self.placement[s.index()]
    }

    fn check(&self, config: &SliceConfig) -> Result<(), SimError> {
        let n = config.sites.len();
        if self.autoscale.len() != n || self.placement.iter().any(|p| p.len() != n) {
            return Err(SimError::StateMismatch("site count differs".into()));
        }
        for &lvl in &self.priority {
            if lvl >= config.priority_levels {
                return Err(SimError::PriorityOutOfRange { level: lvl, levels: config.priority_levels });
            }
        }
        for &idx in &self.mbr_index {
            if idx >= config.mbr_levels.len() {
                return Err(SimError::MbrIndexOutOfRange { index: idx, len: config.mbr_levels.len() });
            }
        }
        Ok(())
    }
}

/// Shifts `fraction` of a service's total UE mass between two sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeMove {
    pub service: Service,
    pub from: String,
    pub to: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoscaleSet {
    pub service: Service,
    pub site: String,
    pub level: AutoscaleLevel,
}

/// Knob changes for one control interval; empty fields leave knobs alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInputs {
    pub priority: Vec<(Service, u8)>,
    pub mbr: Vec<(Service, usize)>,
    pub moves: Vec<UeMove>,
    pub autoscale: Vec<AutoscaleSet>,
}

impl ControlInputs {
    pub fn is_empty(&self) -> bool {
        self.priority.is_empty() && self.mbr.is_empty() && self.moves.is_empty() && self.autoscale.is_empty()
    }

    pub fn extend(&mut self, other: ControlInputs) {
        self.priority.extend(other.priority);
        self.mbr.extend(other.mbr);
        self.moves.extend(other.moves);
        self.autoscale.extend(other.autoscale);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KpiVector {
    /// [1, 5]
    pub qoe_cv: f64,
    /// percent
    pub pl_urllc: f64,
    /// percent
    pub pl_miot: f64,
    /// ms
    pub latency_urllc: f64,
    /// ms
    pub latency_miot: f64,
    /// [0, 1]
    pub power_miot_normalized: f64,
}

impl KpiVector {
    pub fn value(&self, service: Service, kpi: KpiKind) -> Option<f64> {
        match (service, kpi) {
            (Service::Cv, KpiKind::Qoe) => Some(self.qoe_cv),
            (Service::Urllc, KpiKind::PacketLoss) => Some(self.pl_urllc),
            (Service::Miot, KpiKind::PacketLoss) => Some(self.pl_miot),
            (Service::Urllc, KpiKind::Latency) => Some(self.latency_urllc),
            (Service::Miot, KpiKind::Latency) => Some(self.latency_miot),
            (Service::Miot, KpiKind::PowerConsumption) => Some(self.power_miot_normalized),
            _ => None,
        }
    }

    /// Readings for every expectation of an intent set.
    pub fn snapshot(&self, intents: &IntentSet) -> Result<KpiSnapshot, UtilityError> {
        let mut snap = KpiSnapshot::new();
        for e in intents.iter() {
            let v = self
                .value(e.service, e.kpi)
                .ok_or_else(|| UtilityError::MissingKpi(e.id.clone()))?;
            snap.insert(e.id.clone(), v);
        }
        Ok(snap)
    }
}

/// Initial state: equal mid priorities, middle MBR, every UE at the central
/// site, every auto-scale limit at `small`. The seed is accepted for API
/// symmetry; the initial condition does not depend on it.
pub fn reset(config: &SliceConfig, _seed: u64) -> Result<SliceState, SimError> {
    config.validate()?;
    let n = config.sites.len();
    let central = config.central_index();
    let mut at_central = vec![0.0; n];
    at_central[central] = 1.0;
    let mid = (config.priority_levels - 1) / 2;
    let mbr = config.mid_mbr_index();
    Ok(SliceState {
        priority: [mid; 3],
        mbr_index: [mbr; 3],
        placement: [at_central.clone(), at_central.clone(), at_central],
        autoscale: vec![[AutoscaleLevel::Small; 3]; n],
        step_counter: 0,
    })
}

/// Returns a copy of `state` with the requested knobs changed.
pub fn apply(state: &SliceState, config: &SliceConfig, controls: &ControlInputs) -> Result<SliceState, SimError> {
    let mut next = state.clone();
    for &(s, level) in &controls.priority {
        if level >= config.priority_levels {
            return Err(SimError::PriorityOutOfRange { level, levels: config.priority_levels });
        }
        next.priority[s.index()] = level;
    }
    for &(s, index) in &controls.mbr {
        if index >= config.mbr_levels.len() {
            return Err(SimError::MbrIndexOutOfRange { index, len: config.mbr_levels.len() });
        }
        next.mbr_index[s.index()] = index;
    }
    for mv in &controls.moves {
        if !(mv.fraction > 0.0 && mv.fraction <= 1.0) {
            return Err(SimError::InvalidFraction(mv.fraction));
        }
        let from = config.site_index(&mv.from)?;
        let to = config.site_index(&mv.to)?;
        let place = &mut next.placement[mv.service.index()];
        let moved = mv.fraction.min(place[from]);
        place[from] -= moved;
        place[to] += moved;
        if place[from] < PLACEMENT_TOL {
            place[from] = 0.0;
        }
    }
    for a in &controls.autoscale {
        let site = config.site_index(&a.site)?;
        next.autoscale[site][a.service.index()] = a.level;
    }
    Ok(next)
}

/// Throughput (Mbps) delivered to each service under strict-priority sharing.
pub fn allocate(state: &SliceState, config: &SliceConfig) -> [f64; 3] {
    let offered = config.loads.offered();
    let caps = Service::ALL.map(|s| config.mbr_levels[state.mbr_index[s.index()]]);
    let mut throughput = [0.0; 3];
    let mut remaining = config.airlink_capacity;

    let mut levels: Vec<u8> = state.priority.to_vec();
    levels.sort_unstable_by(|a, b| b.cmp(a));
    levels.dedup();
    for level in levels {
        let group: Vec<usize> = (0..3).filter(|&i| state.priority[i] == level).collect();
        share_group(&group, &offered, &caps, &mut remaining, &mut throughput);
    }
    throughput
}

// Proportional-to-offered-load split of `remaining` among one priority group,
// with each member capped at min(offered, mbr) and the excess redistributed.
fn share_group(group: &[usize], offered: &[f64; 3], caps: &[f64; 3], remaining: &mut f64, out: &mut [f64; 3]) {
    let demand = |i: usize| offered[i].min(caps[i]).max(0.0);
    let total_demand: f64 = group.iter().map(|&i| demand(i)).sum();
    if total_demand <= *remaining {
        for &i in group {
            out[i] = demand(i);
        }
        *remaining -= total_demand;
        return;
    }
    let mut active: Vec<usize> = group.iter().copied().filter(|&i| demand(i) > 0.0).collect();
    let mut budget = *remaining;
    loop {
        let weight: f64 = active.iter().map(|&i| offered[i]).sum();
        if active.is_empty() || weight <= 0.0 {
            break;
        }
        let saturated: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| budget * offered[i] / weight >= demand(i))
            .collect();
        if saturated.is_empty() {
            for &i in &active {
                out[i] = budget * offered[i] / weight;
            }
            budget = 0.0;
            break;
        }
        for &i in &saturated {
            out[i] = demand(i);
            budget -= demand(i);
        }
        active.retain(|i| !saturated.contains(i));
    }
    *remaining = budget.max(0.0);
}

/// KPI block of a state, without advancing time.
pub fn kpis(state: &SliceState, config: &SliceConfig) -> KpiVector {
    let offered = config.loads.offered();
    let thr = allocate(state, config);
    let delivered = |i: usize| if offered[i] > 0.0 { (thr[i] / offered[i]).clamp(0.0, 1.0) } else { 1.0 };
    let pl = |i: usize| 100.0 * (1.0 - delivered(i));

    let latency = |s: Service| -> f64 {
        let place = &state.placement[s.index()];
        let mass: f64 = place.iter().sum();
        if mass <= 0.0 {
            return 0.0;
        }
        config
            .sites
            .iter()
            .enumerate()
            .map(|(k, site)| {
                let pods = f64::from(config.autoscale_pods.pods(state.autoscale[k][s.index()]));
                place[k] * (site.propagation_latency + config.compute_latency_base / pods)
            })
            .sum::<f64>()
            / mass
    };

    let miot_ues = f64::from(config.loads.miot.ue_count);
    let power: f64 = config
        .sites
        .iter()
        .zip(&state.placement[Service::Miot.index()])
        .map(|(site, frac)| miot_ues * frac * site.per_ue_power)
        .sum();

    KpiVector {
        qoe_cv: 1.0 + 4.0 * delivered(Service::Cv.index()),
        pl_urllc: pl(Service::Urllc.index()),
        pl_miot: pl(Service::Miot.index()),
        latency_urllc: latency(Service::Urllc),
        latency_miot: latency(Service::Miot),
        power_miot_normalized: (power / config.max_power).clamp(0.0, 1.0),
    }
}

/// Advances one control interval and reports the resulting KPIs.
pub fn step(state: &SliceState, config: &SliceConfig) -> Result<(SliceState, KpiVector), SimError> {
    state.check(config)?;
    let out = kpis(state, config);
    let mut next = state.clone();
    next.step_counter += 1;
    Ok((next, out))
}

/// A valid state with every knob drawn uniformly; placement mass is moved in
/// `move_step` increments so it stays on the grid the agents act on.
pub fn random_state(config: &SliceConfig, rng: &mut SimRng) -> SliceState {
    let n = config.sites.len();
    let steps = libm::round(1.0 / config.move_step).max(1.0) as usize;
    let mut placement: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for place in placement.iter_mut() {
        for _ in 0..steps {
            place[rng.gen_range(0..n)] += 1.0 / steps as f64;
        }
    }
    SliceState {
        priority: [0; 3].map(|_| rng.gen_range(0..config.priority_levels)),
        mbr_index: [0; 3].map(|_| rng.gen_range(0..config.mbr_levels.len())),
        placement,
        autoscale: (0..n)
            .map(|_| [0; 3].map(|_| AutoscaleLevel::ALL[rng.gen_range(0..4)]))
            .collect(),
        step_counter: 0,
    }
}
