//! Lower-level, goal-conditioned agent systems.
//!
//! Each agent turns one knob family of the slice (packet priority, MBR cap,
//! UE placement, auto-scale limit) and is conditioned on a sub-goal for one
//! KPI. Policies are tabular Q-functions trained once and then frozen.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::netsim::{self, AutoscaleLevel, AutoscaleSet, ControlInputs, KpiVector, SimError, SliceConfig, SliceState, UeMove};
use crate::rng::{self, SimRng};
use crate::utility::{Expectation, IntentSet, KpiKind, KpiRange, Service};

pub const KPI_BUCKETS: usize = 16;
pub const GOAL_LEVELS: usize = 8;
/// Largest action arity in the roster; used to normalize Γ.
pub const MAX_ARITY: usize = 25;
pub const CAPABILITY_LEN: usize = 4 + 3 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Priority,
    Mbr,
    MoveUeContext,
    AutoScale,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [SystemKind::Priority, SystemKind::Mbr, SystemKind::MoveUeContext, SystemKind::AutoScale];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    pub system: SystemKind,
    pub service: Service,
    /// KPI the agent is rewarded on.
    pub kpi: KpiKind,
    pub arity: usize,
}

impl AgentSpec {
    /// One-hot system kind, one-hot service, arity / [`MAX_ARITY`].
    pub fn capability_vector(&self) -> Vec<f64> {
        let mut v = vec![0.0; CAPABILITY_LEN];
        v[self.system.index()] = 1.0;
        v[4 + self.service.index()] = 1.0;
        v[7] = self.arity as f64 / MAX_ARITY as f64;
        v
    }

    pub fn range(&self) -> KpiRange {
        KpiRange::default_for(self.kpi)
    }

    /// Every agent of the four systems for a slice configuration.
    pub fn standard(config: &SliceConfig) -> Vec<AgentSpec> {
        let n = config.sites.len();
        let mut out = Vec::new();
        let own_kpi = |s: Service| if s == Service::Cv { KpiKind::Qoe } else { KpiKind::PacketLoss };
        for (system, prefix) in [(SystemKind::Priority, "priority"), (SystemKind::Mbr, "mbr")] {
            for s in Service::ALL {
                out.push(AgentSpec { id: alloc::format!("{prefix}-{}", s.name()), system, service: s, kpi: own_kpi(s), arity: 3 });
            }
        }
        let move_arity = 1 + 2 * n.saturating_sub(1);
        out.push(AgentSpec {
            id: "move-urllc".into(),
            system: SystemKind::MoveUeContext,
            service: Service::Urllc,
            kpi: KpiKind::Latency,
            arity: move_arity,
        });
        out.push(AgentSpec {
            id: "move-miot".into(),
            system: SystemKind::MoveUeContext,
            service: Service::Miot,
            kpi: KpiKind::PowerConsumption,
            arity: move_arity,
        });
        out.push(AgentSpec {
            id: "autoscale".into(),
            system: SystemKind::AutoScale,
            service: Service::Miot,
            kpi: KpiKind::Latency,
            arity: 1 + AUTOSCALE_SERVICES.len() * n * AutoscaleLevel::ALL.len(),
        });
        out
    }

    /// The agents whose KPI is the subject of some expectation in `intents`.
    pub fn roster(config: &SliceConfig, intents: &IntentSet) -> Vec<AgentSpec> {
        Self::standard(config).into_iter().filter(|a| intents.find(a.service, a.kpi).is_some()).collect()
    }

    pub fn expectation<'a>(&self, intents: &'a IntentSet) -> Option<&'a Expectation> {
        intents.find(self.service, self.kpi)
    }

    pub fn knob_count(&self, config: &SliceConfig) -> usize {
        match self.system {
            SystemKind::Priority => usize::from(config.priority_levels),
            SystemKind::Mbr => config.mbr_levels.len(),
            SystemKind::MoveUeContext => move_grid(config) + 1,
            SystemKind::AutoScale => AutoscaleLevel::ALL.len(),
        }
    }
}

const AUTOSCALE_SERVICES: [Service; 2] = [Service::Urllc, Service::Miot];

fn move_grid(config: &SliceConfig) -> usize {
    libm::round(1.0 / config.move_step).max(1.0) as usize
}

/// A sub-goal: a target value for the KPI of one expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubGoal {
    pub expectation: crate::utility::ExpectationId,
    pub level: usize,
    pub goal_value: f64,
}

impl SubGoal {
    pub fn new(expectation: &Expectation, level: usize) -> Self {
        let level = level.min(GOAL_LEVELS - 1);
        Self { expectation: expectation.id.clone(), level, goal_value: goal_grid_value(expectation.range, level) }
    }
}

pub fn goal_grid_value(range: KpiRange, level: usize) -> f64 {
    range.min + range.width() * level as f64 / (GOAL_LEVELS - 1) as f64
}

/// Nearest grid level for a goal value on `range`.
pub fn goal_level(range: KpiRange, value: f64) -> usize {
    let t = range.normalize(value) * (GOAL_LEVELS - 1) as f64;
    (libm::round(t).max(0.0) as usize).min(GOAL_LEVELS - 1)
}

pub fn kpi_bucket(range: KpiRange, value: f64) -> usize {
    let t = range.normalize(value) * KPI_BUCKETS as f64;
    (libm::floor(t).max(0.0) as usize).min(KPI_BUCKETS - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub kpi_value: f64,
    pub bucket: usize,
    pub knob: usize,
    pub step: u64,
}

impl Observation {
    pub fn kpi_norm(&self, range: KpiRange) -> f64 {
        range.normalize(self.kpi_value)
    }
}

/// One agent's (s, a, g, r, s') tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub goal: SubGoal,
    pub reward: f64,
    pub next_obs: Observation,
}

pub fn observe(state: &SliceState, config: &SliceConfig, spec: &AgentSpec, kpis: &KpiVector) -> Observation {
    let kpi_value = kpis.value(spec.service, spec.kpi).unwrap_or(0.0);
    Observation { kpi_value, bucket: kpi_bucket(spec.range(), kpi_value), knob: knob(state, config, spec), step: state.step_counter }
}

fn knob(state: &SliceState, config: &SliceConfig, spec: &AgentSpec) -> usize {
    let s = spec.service.index();
    match spec.system {
        SystemKind::Priority => usize::from(state.priority[s]),
        SystemKind::Mbr => state.mbr_index[s],
        SystemKind::MoveUeContext => {
            let g = move_grid(config);
            let central = state.placement[s][config.central_index()];
            (libm::round(central * g as f64).max(0.0) as usize).min(g)
        }
        SystemKind::AutoScale => {
            let place = &state.placement[s];
            let mut site = 0;
            for (k, f) in place.iter().enumerate() {
                if *f > place[site] {
                    site = k;
                }
            }
            state.autoscale[site][s].index()
        }
    }
}

/// `-|kpi - goal| / width`, in `[-1, 0]` for values inside the range.
pub fn goal_reward(kpi_value: f64, goal_value: f64, range: KpiRange) -> f64 {
    -libm::fabs(kpi_value - goal_value) / range.width()
}

/// Knob changes for one agent action. Action 0 always holds.
pub fn action_controls(spec: &AgentSpec, state: &SliceState, config: &SliceConfig, action: usize) -> ControlInputs {
    let mut c = ControlInputs::default();
    if action == 0 || action >= spec.arity {
        return c;
    }
    let s = spec.service.index();
    match spec.system {
        SystemKind::Priority => {
            let cur = state.priority[s];
            let top = config.priority_levels - 1;
            let next = if action == 1 { cur.saturating_sub(1) } else { (cur + 1).min(top) };
            c.priority.push((spec.service, next));
        }
        SystemKind::Mbr => {
            let cur = state.mbr_index[s];
            let top = config.mbr_levels.len() - 1;
            let next = if action == 1 { cur.saturating_sub(1) } else { (cur + 1).min(top) };
            c.mbr.push((spec.service, next));
        }
        SystemKind::MoveUeContext => {
            let central = config.central_index();
            let edges: Vec<usize> = (0..config.sites.len()).filter(|&k| k != central).collect();
            let k = action - 1;
            let (from, to) = if k < edges.len() { (central, edges[k]) } else { (edges[k - edges.len()], central) };
            c.moves.push(UeMove {
                service: spec.service,
                from: config.sites[from].id.clone(),
                to: config.sites[to].id.clone(),
                fraction: config.move_step,
            });
        }
        SystemKind::AutoScale => {
            let k = action - 1;
            let levels = AutoscaleLevel::ALL.len();
            let per_service = config.sites.len() * levels;
            let service = AUTOSCALE_SERVICES[k / per_service];
            let site = (k % per_service) / levels;
            c.autoscale.push(AutoscaleSet {
                service,
                site: config.sites[site].id.clone(),
                level: AutoscaleLevel::ALL[k % levels],
            });
        }
    }
    c
}

/// Tabular action values over (KPI bucket, knob, goal level, action).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    pub knobs: usize,
    pub actions: usize,
    pub q: Vec<f64>,
}

impl AgentPolicy {
    pub fn new(knobs: usize, actions: usize) -> Self {
        Self { knobs, actions, q: vec![0.0; KPI_BUCKETS * knobs * GOAL_LEVELS * actions] }
    }

    fn base(&self, bucket: usize, knob: usize, goal: usize) -> usize {
        let knob = knob.min(self.knobs - 1);
        ((bucket * self.knobs + knob) * GOAL_LEVELS + goal) * self.actions
    }

    pub fn values(&self, bucket: usize, knob: usize, goal: usize) -> &[f64] {
        let b = self.base(bucket, knob, goal);
        &self.q[b..b + self.actions]
    }

    /// Highest-valued action; ties go to the lowest index.
    pub fn greedy(&self, bucket: usize, knob: usize, goal: usize) -> usize {
        let row = self.values(bucket, knob, goal);
        let mut best = 0;
        for (a, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|v| v.is_finite())
    }
}

/// Greedy action with probability `1 - eps`, else uniform. No random draw is
/// made when `eps` is zero.
pub fn act(policy: &AgentPolicy, obs: &Observation, goal_level: usize, eps: f64, rng: &mut SimRng) -> usize {
    if eps > 0.0 && rng.gen::<f64>() < eps {
        return rng.gen_range(0..policy.actions);
    }
    policy.greedy(obs.bucket, obs.knob, goal_level)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerTrainConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
}

impl Default for LowerTrainConfig {
    fn default() -> Self {
        Self { episodes: 3000, horizon: 20, learning_rate: 0.1, gamma: 0.9, eps_start: 1.0, eps_end: 0.05 }
    }
}

impl LowerTrainConfig {
    pub fn epsilon(&self, episode: usize) -> f64 {
        if self.episodes <= 1 {
            return self.eps_end;
        }
        let t = episode as f64 / (self.episodes - 1) as f64;
        self.eps_start + (self.eps_end - self.eps_start) * t
    }
}

/// The frozen lower layer: agent specs with their trained tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerSystems {
    pub specs: Vec<AgentSpec>,
    pub policies: Vec<AgentPolicy>,
    pub train: LowerTrainConfig,
    pub seed: u64,
}

/// Knob actions chosen by every agent in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAction {
    pub observations: Vec<Observation>,
    pub actions: Vec<usize>,
    pub controls: ControlInputs,
}

impl LowerSystems {
    pub fn untrained(config: &SliceConfig, specs: Vec<AgentSpec>) -> Self {
        let policies = specs.iter().map(|s| AgentPolicy::new(s.knob_count(config), s.arity)).collect();
        Self { specs, policies, train: LowerTrainConfig { episodes: 0, ..Default::default() }, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.id == id)
    }

    /// The subset of agents named in `ids`, in the given order.
    pub fn select(&self, ids: &[&str]) -> Option<LowerSystems> {
        let mut specs = Vec::new();
        let mut policies = Vec::new();
        for id in ids {
            let i = self.index_of(id)?;
            specs.push(self.specs[i].clone());
            policies.push(self.policies[i].clone());
        }
        Some(LowerSystems { specs, policies, train: self.train, seed: self.seed })
    }

    /// Agents relevant to an intent set, keeping their trained tables.
    pub fn for_intents(&self, intents: &IntentSet) -> LowerSystems {
        let keep: Vec<&str> =
            self.specs.iter().filter(|s| s.expectation(intents).is_some()).map(|s| s.id.as_str()).collect();
        self.select(&keep).unwrap_or_else(|| unreachable!("ids come from self"))
    }

    /// Every agent picks an action for its goal level; moves are applied in
    /// agent order.
    pub fn act_all(
        &self,
        state: &SliceState,
        config: &SliceConfig,
        kpis: &KpiVector,
        goal_levels: &[usize],
        eps: f64,
        rng: &mut SimRng,
    ) -> JointAction {
        let mut observations = Vec::with_capacity(self.len());
        let mut actions = Vec::with_capacity(self.len());
        let mut controls = ControlInputs::default();
        for (k, (spec, policy)) in self.specs.iter().zip(&self.policies).enumerate() {
            let obs = observe(state, config, spec, kpis);
            let a = act(policy, &obs, goal_levels[k], eps, rng);
            controls.extend(action_controls(spec, state, config, a));
            observations.push(obs);
            actions.push(a);
        }
        JointAction { observations, actions, controls }
    }

    /// FNV-1a over every table value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.policies {
            for v in &p.q {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Independent goal-conditioned Q-learning for every agent in `specs`.
///
/// Each episode starts from a random knob setting; every agent draws its own
/// goal level uniformly and keeps it for the episode. All agents act each
/// step on a shared slice and learn from their own goal reward.
pub fn train_lower(
    config: &SliceConfig,
    specs: Vec<AgentSpec>,
    train: LowerTrainConfig,
    seed: u64,
) -> Result<LowerSystems, SimError> {
    config.validate()?;
    let mut sys = LowerSystems::untrained(config, specs);
    sys.train = train;
    sys.seed = seed;
    let mut rng = rng::derive(seed, 0x10e4);
    for ep in 0..train.episodes {
        let eps = train.epsilon(ep);
        let mut state = netsim::random_state(config, &mut rng);
        let goals: Vec<usize> = sys.specs.iter().map(|_| rng.gen_range(0..GOAL_LEVELS)).collect();
        let mut kpis = netsim::kpis(&state, config);
        for _ in 0..train.horizon {
            let joint = sys.act_all(&state, config, &kpis, &goals, eps, &mut rng);
            let applied = netsim::apply(&state, config, &joint.controls)?;
            let (next, next_kpis) = netsim::step(&applied, config)?;
            for (k, spec) in sys.specs.iter().enumerate() {
                let range = spec.range();
                let goal_value = goal_grid_value(range, goals[k]);
                let s2 = observe(&next, config, spec, &next_kpis);
                let r = goal_reward(s2.kpi_value, goal_value, range);
                let policy = &mut sys.policies[k];
                let best_next = policy.values(s2.bucket, s2.knob, goals[k]).iter().copied().fold(f64::MIN, f64::max);
                let s = &joint.observations[k];
                let idx = policy.base(s.bucket, s.knob, goals[k]) + joint.actions[k];
                let target = r + train.gamma * best_next;
                policy.q[idx] += train.learning_rate * (target - policy.q[idx]);
            }
            state = next;
            kpis = next_kpis;
        }
    }
    Ok(sys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::Direction;

    fn cfg() -> SliceConfig {
        SliceConfig::paper_desk()
    }

    fn spec(id: &str) -> AgentSpec {
        AgentSpec::standard(&cfg()).into_iter().find(|s| s.id == id).unwrap()
    }

    #[test]
    fn buckets_follow_floor_convention() {
        let r = KpiRange::new(1.0, 5.0);
        assert_eq!(kpi_bucket(r, 1.0), 0);
        assert_eq!(kpi_bucket(r, 5.0), 15);
        assert_eq!(kpi_bucket(r, 3.0), 8);
        assert_eq!(kpi_bucket(r, -3.0), 0);
    }

    #[test]
    fn goal_reward_examples() {
        let r = KpiRange::new(1.0, 5.0);
        assert_eq!(goal_reward(3.0, 3.0, r), 0.0);
        assert_eq!(goal_reward(1.0, 5.0, r), -1.0);
        assert!((goal_reward(2.0, 3.0, r) + 0.25).abs() < 1e-12);
    }

    #[test]
    fn goal_grid_spans_range() {
        let r = KpiRange::new(0.0, 250.0);
        assert_eq!(goal_grid_value(r, 0), 0.0);
        assert_eq!(goal_grid_value(r, 7), 250.0);
        for l in 0..GOAL_LEVELS {
            assert_eq!(goal_level(r, goal_grid_value(r, l)), l);
        }
    }

    #[test]
    fn capability_vectors_have_fixed_length_and_differ() {
        let all = AgentSpec::standard(&cfg());
        assert_eq!(all.len(), 9);
        for (i, a) in all.iter().enumerate() {
            assert_eq!(a.capability_vector().len(), CAPABILITY_LEN);
            for b in &all[i + 1..] {
                if a.system != b.system || a.service != b.service {
                    assert_ne!(a.capability_vector(), b.capability_vector());
                }
            }
        }
        assert_eq!(spec("autoscale").arity, 25);
        assert_eq!(spec("move-miot").arity, 5);
    }

    #[test]
    fn roster_follows_intents() {
        let intents = IntentSet::new(vec![
            Expectation::new("cv", Service::Cv, KpiKind::Qoe, 3.0, Direction::AtLeast),
            Expectation::new("ul", Service::Urllc, KpiKind::Latency, 150.0, Direction::AtMost),
        ])
        .unwrap();
        let ids: Vec<String> = AgentSpec::roster(&cfg(), &intents).into_iter().map(|s| s.id).collect();
        assert_eq!(ids, ["priority-cv", "mbr-cv", "move-urllc"]);
    }

    #[test]
    fn act_examples() {
        let mut r = rng::seeded(1);
        let obs = Observation { kpi_value: 0.0, bucket: 3, knob: 1, step: 0 };
        let single = AgentPolicy::new(4, 1);
        assert_eq!(act(&single, &obs, 2, 0.0, &mut r), 0);

        let mut p = AgentPolicy::new(4, 3);
        let b = p.base(3, 1, 2);
        p.q[b + 2] = 1.0;
        assert_eq!(act(&p, &obs, 2, 0.0, &mut r), 2);
        // ties resolve to the lowest index
        p.q[b + 1] = 1.0;
        assert_eq!(act(&p, &obs, 2, 0.0, &mut r), 1);

        let draw = |seed| {
            let mut r = rng::seeded(seed);
            (0..32).map(|_| act(&p, &obs, 2, 1.0, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn every_action_is_valid_for_netsim() {
        let c = cfg();
        let mut r = rng::seeded(4);
        for _ in 0..200 {
            let state = netsim::random_state(&c, &mut r);
            for spec in AgentSpec::standard(&c) {
                for a in 0..spec.arity {
                    let ctl = action_controls(&spec, &state, &c, a);
                    assert_eq!(ctl.is_empty(), a == 0, "{} action {a}", spec.id);
                    netsim::apply(&state, &c, &ctl).unwrap();
                }
            }
        }
    }

    #[test]
    fn zero_episodes_gives_uniform_tables() {
        let c = cfg();
        let t = LowerTrainConfig { episodes: 0, ..Default::default() };
        let sys = train_lower(&c, AgentSpec::standard(&c), t, 3).unwrap();
        let mut r = rng::seeded(0);
        for p in &sys.policies {
            assert!(p.q.iter().all(|v| *v == 0.0));
            let obs = Observation { kpi_value: 0.0, bucket: 5, knob: 0, step: 0 };
            assert_eq!(act(p, &obs, 4, 0.0, &mut r), 0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let c = cfg();
        let t = LowerTrainConfig { episodes: 40, ..Default::default() };
        let a = train_lower(&c, AgentSpec::standard(&c), t, 11).unwrap();
        let b = train_lower(&c, AgentSpec::standard(&c), t, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.policies.iter().all(AgentPolicy::is_finite));
        let other = train_lower(&c, AgentSpec::standard(&c), t, 12).unwrap();
        assert_ne!(a.checksum(), other.checksum());
    }
}
