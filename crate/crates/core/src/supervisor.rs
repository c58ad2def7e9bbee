//! Goal policy of the intent management function.
//!
//! Per step the supervisor embeds every lower agent (capability vector plus
//! its latest observation, action and goal), encodes the intents' targets,
//! and, when the DUN is enabled, turns the engineered utility features into a
//! context vector. A fusion block mixes the three; a two-layer GRU and one
//! softmax head per agent pick the next sub-goal levels. A critic on the
//! detached fused state supplies the one-step advantage for training.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{self, AgentSpec, LowerSystems, Observation, SubGoal, CAPABILITY_LEN, GOAL_LEVELS};
use crate::netsim::{self, KpiVector, SimError, SliceConfig, SliceState};
use crate::nn::{
    gradient_check, Activation, Adam, AdamConfig, DenseBlock, GradCheckReport, GruCell, NnError, ParamId, ParamStore,
    Tape, Var, DEFAULT_GRADCHECK_STEP, DEFAULT_GRADCHECK_TOLERANCE,
};
use crate::rng::{self, SimRng};
use crate::utility::{
    self, Direction, ExpectationId, FeatureVector, IntentSet, KpiKind, Service, UtilityError,
};

/// Per-agent numeric encoding of (s, a, g): KPI, knob, last action, last
/// goal, goal minus KPI; all normalized.
pub const SAG_FEATURES: usize = 5;
/// Feature, service, KPI kind and form of one expectation.
pub const DUN_INPUT: usize = 1 + 3 + 4 + 3;
/// Target, direction, service and KPI kind of one expectation.
pub const GOAL_ENCODING: usize = 2 + 3 + 4;

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error("agent roster mismatch: {0}")]
    AgentMismatch(String),
    #[error("mutation scheduled at step {step} but the horizon is {horizon}")]
    ScheduleBeyondHorizon { step: usize, horizon: usize },
    #[error("trace has {got} steps, expected {expected}")]
    IncompleteTrace { got: usize, expected: usize },
    #[error("non-finite {what} in episode {episode}")]
    NonFinite { episode: usize, what: &'static str },
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("episode already finished")]
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub encoder: usize,
    pub merger: usize,
    pub dun: usize,
    pub fusion: usize,
    pub gru: usize,
    pub critic: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { encoder: 64, merger: 64, dun: 32, fusion: 64, gru: 64, critic: 64 }
    }
}

/// Everything needed to rebuild a model's structure; parameters come from
/// a checkpoint or from the init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub dims: ModelDims,
    pub agents: Vec<AgentSpec>,
    pub dun_enabled: bool,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisorModel {
    pub meta: ModelMeta,
    pub store: ParamStore,
    encoder: DenseBlock,
    merger: DenseBlock,
    dun: DenseBlock,
    fusion: DenseBlock,
    gru: [GruCell; 2],
    heads: Vec<DenseBlock>,
    critic: DenseBlock,
}

impl SupervisorModel {
    pub fn new(meta: ModelMeta) -> Self {
        let d = meta.dims;
        let mut store = ParamStore::new();
        let mut r = rng::derive(meta.init_seed, 0x5e9);
        let tanh = Activation::Tanh;
        let encoder = DenseBlock::new(&mut store, "encoder", &[CAPABILITY_LEN, d.encoder, d.encoder], tanh, tanh, &mut r);
        let merger =
            DenseBlock::new(&mut store, "merger", &[d.encoder + SAG_FEATURES, d.merger, d.merger], tanh, tanh, &mut r);
        let dun = DenseBlock::new(&mut store, "dun", &[DUN_INPUT, d.dun, d.dun], tanh, tanh, &mut r);
        let fusion = DenseBlock::new(
            &mut store,
            "fusion",
            &[d.merger + GOAL_ENCODING + d.dun, d.fusion, d.fusion, d.fusion],
            tanh,
            tanh,
            &mut r,
        );
        let gru = [
            GruCell::new(&mut store, "actor.gru0", d.fusion, d.gru, &mut r),
            GruCell::new(&mut store, "actor.gru1", d.gru, d.gru, &mut r),
        ];
        let heads = meta
            .agents
            .iter()
            .map(|a| {
                let name = alloc::format!("actor.head.{}", a.id);
                DenseBlock::new(&mut store, &name, &[d.gru, GOAL_LEVELS], tanh, Activation::Identity, &mut r)
            })
            .collect();
        let critic = DenseBlock::new(
            &mut store,
            "critic",
            &[d.fusion + d.gru, d.critic, 1],
            tanh,
            Activation::Identity,
            &mut r,
        );
        Self { meta, store, encoder, merger, dun, fusion, gru, heads, critic }
    }

    pub fn proposed(agents: Vec<AgentSpec>, seed: u64) -> Self {
        Self::new(ModelMeta { dims: ModelDims::default(), agents, dun_enabled: true, init_seed: seed })
    }

    pub fn baseline(agents: Vec<AgentSpec>, seed: u64) -> Self {
        Self::new(ModelMeta { dims: ModelDims::default(), agents, dun_enabled: false, init_seed: seed })
    }

    pub fn agents(&self) -> &[AgentSpec] {
        &self.meta.agents
    }

    pub fn dun_enabled(&self) -> bool {
        self.meta.dun_enabled
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Parameters moved by the actor objective (everything but the critic).
    pub fn actor_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.encoder.param_ids());
        ids.extend(self.merger.param_ids());
        ids.extend(self.dun.param_ids());
        ids.extend(self.fusion.param_ids());
        for g in &self.gru {
            ids.extend(g.param_ids());
        }
        for h in &self.heads {
            ids.extend(h.param_ids());
        }
        ids
    }

    pub fn critic_params(&self) -> Vec<ParamId> {
        self.critic.param_ids()
    }

    /// Every block, for gradient checks: (name, parameter ids).
    pub fn blocks(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut heads = Vec::new();
        for h in &self.heads {
            heads.extend(h.param_ids());
        }
        vec![
            ("encoder", self.encoder.param_ids()),
            ("merger", self.merger.param_ids()),
            ("dun", self.dun.param_ids()),
            ("fusion", self.fusion.param_ids()),
            ("actor.gru", [self.gru[0].param_ids(), self.gru[1].param_ids()].concat()),
            ("actor.heads", heads),
            ("critic", self.critic.param_ids()),
        ]
    }

    fn check_lower(&self, lower: &LowerSystems) -> Result<(), SupervisorError> {
        let ids = |v: &[AgentSpec]| v.iter().map(|a| a.id.clone()).collect::<Vec<_>>();
        if ids(&lower.specs) != ids(&self.meta.agents) {
            return Err(SupervisorError::AgentMismatch(alloc::format!(
                "model has {:?}, lower systems have {:?}",
                ids(&self.meta.agents),
                ids(&lower.specs)
            )));
        }
        Ok(())
    }

    fn check_intents(&self, intents: &IntentSet) -> Result<(), SupervisorError> {
        for a in &self.meta.agents {
            if a.expectation(intents).is_none() {
                return Err(SupervisorError::AgentMismatch(alloc::format!(
                    "agent `{}` has no {} {} expectation",
                    a.id,
                    a.service.name(),
                    a.kpi.name()
                )));
            }
        }
        Ok(())
    }
}

fn one_hot(n: usize, i: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |k| if k == i { 1.0 } else { 0.0 })
}

/// DUN input rows, one per expectation, in intent order.
pub fn dun_inputs(intents: &IntentSet, fv: &FeatureVector) -> Result<Vec<Vec<f64>>, SupervisorError> {
    if fv.is_empty() {
        return Err(UtilityError::Empty.into());
    }
    let mut rows = Vec::with_capacity(fv.len());
    for (id, y) in &fv.features {
        let e = intents.get(id).ok_or_else(|| UtilityError::UnknownExpectation(id.clone()))?;
        let mut row = Vec::with_capacity(DUN_INPUT);
        row.push(*y);
        row.extend(one_hot(3, e.service.index()));
        row.extend(one_hot(4, e.kpi.index()));
        row.extend(one_hot(3, e.form.index()));
        rows.push(row);
    }
    Ok(rows)
}

/// Mean over expectations of (normalized target, direction sign, service
/// one-hot, KPI one-hot).
pub fn goal_encoding(intents: &IntentSet) -> Vec<f64> {
    let mut acc = vec![0.0; GOAL_ENCODING];
    for e in intents.iter() {
        let dir = match e.direction {
            Direction::AtLeast => 1.0,
            Direction::AtMost => -1.0,
        };
        let row: Vec<f64> = [e.range.normalize(e.target), dir]
            .into_iter()
            .chain(one_hot(3, e.service.index()))
            .chain(one_hot(4, e.kpi.index()))
            .collect();
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = intents.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Numeric (s, a, g) encoding for one agent.
pub fn sag_features(spec: &AgentSpec, config: &SliceConfig, obs: &Observation, action: usize, goal_level: usize) -> [f64; SAG_FEATURES] {
    let kpi = obs.kpi_norm(spec.range());
    let knob = obs.knob as f64 / (spec.knob_count(config).max(2) - 1) as f64;
    let a = action as f64 / (spec.arity.max(2) - 1) as f64;
    let g = goal_level as f64 / (GOAL_LEVELS - 1) as f64;
    [kpi, knob, a, g, g - kpi]
}

/// Encoder output for every agent's capability vector.
pub fn agent_codes(tape: &mut Tape<'_>, model: &SupervisorModel) -> Result<Vec<Var>, SupervisorError> {
    model
        .meta
        .agents
        .iter()
        .map(|a| {
            let g = tape.input(a.capability_vector());
            Ok(model.encoder.forward(tape, g)?)
        })
        .collect()
}

/// `merger(encoder(Γ) ⊕ sag)`.
pub fn embed_agent(tape: &mut Tape<'_>, model: &SupervisorModel, code: Var, sag: &[f64]) -> Result<Var, SupervisorError> {
    let s = tape.input(sag.to_vec());
    let x = tape.concat(&[code, s]);
    Ok(model.merger.forward(tape, x)?)
}

/// Mean-pooled DUN output, or zeros when the DUN is disabled.
pub fn utility_context(
    tape: &mut Tape<'_>,
    model: &SupervisorModel,
    intents: &IntentSet,
    fv: &FeatureVector,
) -> Result<Var, SupervisorError> {
    let rows = dun_inputs(intents, fv)?;
    context_from_rows(tape, model, &rows)
}

fn context_from_rows(tape: &mut Tape<'_>, model: &SupervisorModel, rows: &[Vec<f64>]) -> Result<Var, SupervisorError> {
    if !model.meta.dun_enabled {
        return Ok(tape.input(vec![0.0; model.meta.dims.dun]));
    }
    let mut outs = Vec::with_capacity(rows.len());
    for row in rows {
        let x = tape.input(row.clone());
        outs.push(model.dun.forward(tape, x)?);
    }
    Ok(tape.mean(&outs))
}

/// Fusion over (mean embedding ⊕ goal encoding ⊕ context).
pub fn fuse(
    tape: &mut Tape<'_>,
    model: &SupervisorModel,
    embeddings: &[Var],
    goals: &[f64],
    ctx: Var,
) -> Result<Var, SupervisorError> {
    if embeddings.len() != model.head_count() {
        return Err(NnError::ShapeMismatch { op: "fuse", expected: model.head_count(), got: embeddings.len() }.into());
    }
    let pooled = tape.mean(embeddings);
    let g = tape.input(goals.to_vec());
    let x = tape.concat(&[pooled, g, ctx]);
    Ok(model.fusion.forward(tape, x)?)
}

/// GRU advance and per-agent log-probabilities over goal levels.
pub fn actor_step(
    tape: &mut Tape<'_>,
    model: &SupervisorModel,
    fused: Var,
    hidden: [Var; 2],
) -> Result<(Vec<Var>, [Var; 2]), SupervisorError> {
    let h0 = model.gru[0].forward(tape, fused, hidden[0])?;
    let h1 = model.gru[1].forward(tape, h0, hidden[1])?;
    let mut logps = Vec::with_capacity(model.heads.len());
    for head in &model.heads {
        let logits = head.forward(tape, h1)?;
        logps.push(tape.log_softmax(logits));
    }
    Ok((logps, [h0, h1]))
}

/// `V(S_G)` from the detached (fused ⊕ top hidden) state.
pub fn critic_value(tape: &mut Tape<'_>, model: &SupervisorModel, fused: Var, top: Var) -> Result<Var, SupervisorError> {
    let x = tape.concat(&[fused, top]);
    let x = tape.detach(x);
    let v = model.critic.forward(tape, x)?;
    Ok(tape.index(v, 0))
}

/// Context vector for a feature vector, as plain values.
pub fn context_values(model: &SupervisorModel, intents: &IntentSet, fv: &FeatureVector) -> Result<Vec<f64>, SupervisorError> {
    let mut tape = Tape::new(&model.store);
    let v = utility_context(&mut tape, model, intents, fv)?;
    Ok(tape.value(v).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityContext {
    pub context: Vec<f64>,
}

/// Per-agent sub-goals with the head distributions they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalDecision {
    pub goals: Vec<SubGoal>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionMode {
    /// Sample each head from the given stream.
    Sample,
    /// Highest-probability level; ties go to the lowest level.
    Greedy,
}

fn pick(logp: &[f64], mode: DecisionMode, rng: &mut SimRng) -> usize {
    match mode {
        DecisionMode::Greedy => {
            let mut best = 0;
            for (i, v) in logp.iter().enumerate() {
                if *v > logp[best] {
                    best = i;
                }
            }
            best
        }
        DecisionMode::Sample => {
            let probs: Vec<f64> = logp.iter().map(|l| libm::exp(*l)).collect();
            rng::sample_categorical(rng, &probs)
        }
    }
}

/// How an episode's slice state is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// `netsim::reset`: mid priorities, mid MBR, everything central.
    Reset,
    /// Every knob drawn from the episode seed.
    #[default]
    Random,
}

pub fn initial_state(config: &SliceConfig, initial: InitialState, seed: u64) -> Result<SliceState, SimError> {
    match initial {
        InitialState::Reset => netsim::reset(config, seed),
        InitialState::Random => {
            config.validate()?;
            let mut r = rng::derive(seed, 0x1417);
            Ok(netsim::random_state(config, &mut r))
        }
    }
}

/// One row of an episode: decision at step `step` and what it led to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub decision: GoalDecision,
    pub agent_actions: Vec<usize>,
    /// KPIs after the step's controls took effect.
    pub kpis: KpiVector,
    /// Deviation and feature of each expectation on `kpis`.
    pub deviations: Vec<(ExpectationId, f64)>,
    pub features: FeatureVector,
    /// Global utility on `kpis` under the active intents.
    pub z: f64,
    pub value: f64,
    pub intents: IntentSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub horizon: usize,
    pub initial_kpis: KpiVector,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.z).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.value).collect()
    }

    /// KPI series of one (service, KPI) pair, one value per step.
    pub fn series(&self, service: Service, kpi: KpiKind) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.kpis.value(service, kpi)).collect()
    }
}

/// One-step advantage `r_t + γ V(S'_t) - V(S_t)`, with `V(S') = 0` after the
/// last step.
pub fn advantage(trace: &EpisodeTrace, gamma: f64) -> Result<Vec<f64>, SupervisorError> {
    if trace.steps.len() != trace.horizon || trace.horizon == 0 {
        return Err(SupervisorError::IncompleteTrace { got: trace.steps.len(), expected: trace.horizon });
    }
    Ok(advantages_from(&trace.rewards(), &trace.values(), gamma))
}

fn advantages_from(rewards: &[f64], values: &[f64], gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            let next = values.get(t + 1).copied().unwrap_or(0.0);
            rewards[t] + gamma * next - values[t]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOptions {
    pub horizon: usize,
    pub seed: u64,
    pub initial: InitialState,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self { horizon: 20, seed: 0, initial: InitialState::Random }
    }
}

/// A live, evaluation-mode episode that advances one step per call. Shared
/// by [`run_episode`] and the session gateway.
#[derive(Debug, Clone)]
pub struct Rollout {
    intents: IntentSet,
    state: SliceState,
    kpis: KpiVector,
    hidden: [Vec<f64>; 2],
    prev_actions: Vec<usize>,
    prev_goals: Vec<usize>,
    step: usize,
    horizon: usize,
    rng: SimRng,
    pub initial_kpis: KpiVector,
}

impl Rollout {
    pub fn new(
        model: &SupervisorModel,
        lower: &LowerSystems,
        config: &SliceConfig,
        intents: IntentSet,
        opts: EpisodeOptions,
    ) -> Result<Self, SupervisorError> {
        if opts.horizon == 0 {
            return Err(SupervisorError::InvalidConfig("horizon must be >= 1"));
        }
        model.check_lower(lower)?;
        model.check_intents(&intents)?;
        let state = initial_state(config, opts.initial, opts.seed)?;
        let kpis = netsim::kpis(&state, config);
        let prev_goals = initial_goal_levels(lower, &kpis);
        let g = model.meta.dims.gru;
        Ok(Self {
            intents,
            state,
            kpis,
            hidden: [vec![0.0; g], vec![0.0; g]],
            prev_actions: vec![0; lower.len()],
            prev_goals,
            step: 0,
            horizon: opts.horizon,
            rng: rng::derive(opts.seed, 0xe7a1),
            initial_kpis: kpis,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.horizon
    }

    pub fn intents(&self) -> &IntentSet {
        &self.intents
    }

    pub fn state(&self) -> &SliceState {
        &self.state
    }

    pub fn kpis(&self) -> &KpiVector {
        &self.kpis
    }

    /// Replaces the active intents; takes effect at the next [`Rollout::advance`].
    pub fn set_intents(&mut self, model: &SupervisorModel, intents: IntentSet) -> Result<(), SupervisorError> {
        model.check_intents(&intents)?;
        self.intents = intents;
        Ok(())
    }

    pub fn advance(
        &mut self,
        model: &SupervisorModel,
        lower: &LowerSystems,
        config: &SliceConfig,
    ) -> Result<StepRecord, SupervisorError> {
        if self.is_finished() {
            return Err(SupervisorError::Finished);
        }
        let mut tape = Tape::new(&model.store);
        let inputs = StepInputs::gather(model, config, &self.intents, &self.state, &self.kpis, &self.prev_actions, &self.prev_goals)?;
        let h = [tape.input(self.hidden[0].clone()), tape.input(self.hidden[1].clone())];
        let codes = agent_codes(&mut tape, model)?;
        let out = forward_step(&mut tape, model, &codes, &inputs, h)?;
        let mut levels = Vec::with_capacity(out.logps.len());
        let mut probs = Vec::with_capacity(out.logps.len());
        for lp in &out.logps {
            let v = tape.value(*lp);
            levels.push(pick(v, DecisionMode::Greedy, &mut self.rng));
            probs.push(v.iter().map(|l| libm::exp(*l)).collect());
        }
        let value = tape.scalar_value(out.value);
        self.hidden = [tape.value(out.hidden[0]).to_vec(), tape.value(out.hidden[1]).to_vec()];

        let (next, next_kpis, actions) = env_step(lower, config, &self.state, &self.kpis, &levels)?;
        let record = self.record(model, &levels, probs, actions.clone(), next_kpis, value)?;
        self.state = next;
        self.kpis = next_kpis;
        self.prev_actions = actions;
        self.prev_goals = levels;
        self.step += 1;
        Ok(record)
    }

    fn record(
        &self,
        model: &SupervisorModel,
        levels: &[usize],
        probs: Vec<Vec<f64>>,
        agent_actions: Vec<usize>,
        kpis: KpiVector,
        value: f64,
    ) -> Result<StepRecord, SupervisorError> {
        let goals = model
            .meta
            .agents
            .iter()
            .zip(levels)
            .map(|(a, l)| {
                let e = a.expectation(&self.intents).ok_or_else(|| SupervisorError::AgentMismatch(a.id.clone()))?;
                Ok(SubGoal::new(e, *l))
            })
            .collect::<Result<Vec<_>, SupervisorError>>()?;
        let snap = kpis.snapshot(&self.intents)?;
        let mode = self.intents.deviation_mode();
        let deviations = self
            .intents
            .iter()
            .map(|e| (e.id.clone(), utility::deviation(e, snap.get(&e.id).unwrap_or(0.0), mode)))
            .collect();
        Ok(StepRecord {
            step: self.step,
            decision: GoalDecision { goals, probs },
            agent_actions,
            kpis,
            deviations,
            features: utility::feature_vector(&self.intents, &snap)?,
            z: utility::global_utility(&self.intents, &snap)?,
            value,
            intents: self.intents.clone(),
        })
    }
}

fn initial_goal_levels(lower: &LowerSystems, kpis: &KpiVector) -> Vec<usize> {
    lower
        .specs
        .iter()
        .map(|s| agents::goal_level(s.range(), kpis.value(s.service, s.kpi).unwrap_or(0.0)))
        .collect()
}

/// Lower agents act greedily on their goals, then the slice advances.
fn env_step(
    lower: &LowerSystems,
    config: &SliceConfig,
    state: &SliceState,
    kpis: &KpiVector,
    levels: &[usize],
) -> Result<(SliceState, KpiVector, Vec<usize>), SupervisorError> {
    // greedy lower agents never draw from the stream
    let mut unused = rng::seeded(0);
    let joint = lower.act_all(state, config, kpis, levels, 0.0, &mut unused);
    let applied = netsim::apply(state, config, &joint.controls)?;
    let (next, next_kpis) = netsim::step(&applied, config)?;
    Ok((next, next_kpis, joint.actions))
}

/// Parameter-free inputs of one supervisor step.
struct StepInputs {
    sag: Vec<[f64; SAG_FEATURES]>,
    dun_rows: Vec<Vec<f64>>,
    goals: Vec<f64>,
}

impl StepInputs {
    fn gather(
        model: &SupervisorModel,
        config: &SliceConfig,
        intents: &IntentSet,
        state: &SliceState,
        kpis: &KpiVector,
        prev_actions: &[usize],
        prev_goals: &[usize],
    ) -> Result<Self, SupervisorError> {
        let sag = model
            .meta
            .agents
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                let obs = agents::observe(state, config, spec, kpis);
                sag_features(spec, config, &obs, prev_actions[k], prev_goals[k])
            })
            .collect();
        let snap = kpis.snapshot(intents)?;
        let fv = utility::feature_vector(intents, &snap)?;
        Ok(Self { sag, dun_rows: dun_inputs(intents, &fv)?, goals: goal_encoding(intents) })
    }
}

struct StepOutputs {
    logps: Vec<Var>,
    hidden: [Var; 2],
    value: Var,
}

fn forward_step(
    tape: &mut Tape<'_>,
    model: &SupervisorModel,
    codes: &[Var],
    inputs: &StepInputs,
    hidden: [Var; 2],
) -> Result<StepOutputs, SupervisorError> {
    let embeddings = codes
        .iter()
        .zip(&inputs.sag)
        .map(|(c, s)| embed_agent(tape, model, *c, s))
        .collect::<Result<Vec<_>, _>>()?;
    let ctx = context_from_rows(tape, model, &inputs.dun_rows)?;
    let fused = fuse(tape, model, &embeddings, &inputs.goals, ctx)?;
    let (logps, hidden) = actor_step(tape, model, fused, hidden)?;
    let value = critic_value(tape, model, fused, hidden[1])?;
    Ok(StepOutputs { logps, hidden, value })
}

/// Evaluation rollout with an optional mutation schedule. Each `(step, set)`
/// replaces the intents before that step's features are computed.
pub fn run_episode(
    model: &SupervisorModel,
    lower: &LowerSystems,
    config: &SliceConfig,
    intents: &IntentSet,
    schedule: &[(usize, IntentSet)],
    opts: EpisodeOptions,
) -> Result<EpisodeTrace, SupervisorError> {
    for (step, _) in schedule {
        if *step >= opts.horizon {
            return Err(SupervisorError::ScheduleBeyondHorizon { step: *step, horizon: opts.horizon });
        }
    }
    let mut rollout = Rollout::new(model, lower, config, intents.clone(), opts)?;
    let mut steps = Vec::with_capacity(opts.horizon);
    while !rollout.is_finished() {
        let t = rollout.step();
        for (at, set) in schedule {
            if *at == t {
                rollout.set_intents(model, set.clone())?;
            }
        }
        steps.push(rollout.advance(model, lower, config)?);
    }
    Ok(EpisodeTrace { horizon: opts.horizon, initial_kpis: rollout.initial_kpis, steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub episodes: usize,
    pub horizon: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_weight: f64,
    /// Multiplies the global utility before it is used as reward.
    pub reward_scale: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub initial: InitialState,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            episodes: 2000,
            horizon: 40,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            entropy_weight: 0.01,
            reward_scale: 0.01,
            grad_clip: Some(1.0),
            seed: 0,
            initial: InitialState::Random,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), SupervisorError> {
        if self.horizon == 0 {
            return Err(SupervisorError::InvalidConfig("horizon must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SupervisorError::InvalidConfig("gamma must be in (0, 1]"));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(SupervisorError::InvalidConfig("learning rates must be > 0"));
        }
        if !(self.reward_scale > 0.0) || !(self.entropy_weight >= 0.0) {
            return Err(SupervisorError::InvalidConfig("reward_scale must be > 0 and entropy_weight >= 0"));
        }
        Ok(())
    }

    /// Seed of the `episode`-th training episode.
    pub fn episode_seed(&self, episode: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (episode as u64).wrapping_add(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub episode: usize,
    /// Sum of unscaled global utility over the episode.
    pub episode_return: f64,
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mean episode return over `entries[from..to]`.
    pub fn mean_return(&self, from: usize, to: usize) -> f64 {
        let slice = &self.entries[from.min(self.len())..to.min(self.len())];
        if slice.is_empty() {
            return 0.0;
        }
        slice.iter().map(|e| e.episode_return).sum::<f64>() / slice.len() as f64
    }
}

/// Negated policy-gradient objective with entropy bonus, averaged over steps:
/// `-(1/T) Σ_t (Â_t log π(u_t) + β H_t)`. `picks[t]` is the summed
/// log-probability of the joint action at step `t`.
pub fn actor_loss(tape: &mut Tape<'_>, picks: &[Var], entropies: &[Var], advantages: &[f64], entropy_weight: f64) -> Var {
    let n = picks.len().max(1) as f64;
    let mut total = tape.scalar(0.0);
    for (t, p) in picks.iter().enumerate() {
        let term = tape.scale(*p, -advantages[t] / n);
        total = tape.add(total, term);
        if let Some(h) = entropies.get(t) {
            let bonus = tape.scale(*h, -entropy_weight / n);
            total = tape.add(total, bonus);
        }
    }
    total
}

fn entropy(tape: &mut Tape<'_>, logp: Var) -> Var {
    let p = tape.exp(logp);
    let plogp = tape.mul(p, logp);
    let s = tape.sum(plogp);
    tape.scale(s, -1.0)
}

/// Advantage actor-critic on the fixed training intents. Lower systems stay
/// frozen; the critic learns from its own detached input.
pub fn train_supervisor(
    config: &TrainConfig,
    slice: &SliceConfig,
    intents: &IntentSet,
    lower: &LowerSystems,
    model: &mut SupervisorModel,
) -> Result<TrainLog, SupervisorError> {
    train_supervisor_with(config, slice, intents, lower, model, |_| {})
}

/// [`train_supervisor`] with a callback after every episode.
pub fn train_supervisor_with<F: FnMut(&TrainLogEntry)>(
    config: &TrainConfig,
    slice: &SliceConfig,
    intents: &IntentSet,
    lower: &LowerSystems,
    model: &mut SupervisorModel,
    mut on_episode: F,
) -> Result<TrainLog, SupervisorError> {
    config.validate()?;
    slice.validate()?;
    model.check_lower(lower)?;
    model.check_intents(intents)?;
    let actor_ids = model.actor_params();
    let critic_ids = model.critic_params();
    let adam = |lr| AdamConfig { lr, clip_norm: config.grad_clip, ..AdamConfig::default() };
    let mut actor_opt = Adam::new(&model.store, actor_ids, adam(config.actor_lr));
    let mut critic_opt = Adam::new(&model.store, critic_ids, adam(config.critic_lr));
    let mut sampler = rng::derive(config.seed, 0xa2c);
    let mut log = TrainLog::default();
    let goals_enc = goal_encoding(intents);
    let g = model.meta.dims.gru;

    for ep in 0..config.episodes {
        let (grads, entry) = {
            let mut tape = Tape::new(&model.store);
            let mut state = initial_state(slice, config.initial, config.episode_seed(ep))?;
            let mut kpis = netsim::kpis(&state, slice);
            let mut prev_actions = vec![0; lower.len()];
            let mut prev_goals = initial_goal_levels(lower, &kpis);
            let codes = agent_codes(&mut tape, model)?;
            let mut hidden = [tape.input(vec![0.0; g]), tape.input(vec![0.0; g])];
            let mut picks = Vec::with_capacity(config.horizon);
            let mut entropies = Vec::with_capacity(config.horizon);
            let mut values = Vec::with_capacity(config.horizon);
            let mut rewards = Vec::with_capacity(config.horizon);
            let mut raw_return = 0.0;

            for _ in 0..config.horizon {
                let mut inputs =
                    StepInputs::gather(model, slice, intents, &state, &kpis, &prev_actions, &prev_goals)?;
                inputs.goals.clone_from(&goals_enc);
                let out = forward_step(&mut tape, model, &codes, &inputs, hidden)?;
                let mut levels = Vec::with_capacity(out.logps.len());
                let mut pick_sum = tape.scalar(0.0);
                let mut ent_sum = tape.scalar(0.0);
                for lp in &out.logps {
                    let level = pick(tape.value(*lp), DecisionMode::Sample, &mut sampler);
                    let chosen = tape.index(*lp, level);
                    pick_sum = tape.add(pick_sum, chosen);
                    let h = entropy(&mut tape, *lp);
                    ent_sum = tape.add(ent_sum, h);
                    levels.push(level);
                }
                let (next, next_kpis, actions) = env_step(lower, slice, &state, &kpis, &levels)?;
                let z = utility::global_utility(intents, &next_kpis.snapshot(intents)?)?;
                raw_return += z;
                rewards.push(z * config.reward_scale);
                picks.push(pick_sum);
                entropies.push(ent_sum);
                values.push(out.value);
                hidden = out.hidden;
                state = next;
                kpis = next_kpis;
                prev_actions = actions;
                prev_goals = levels;
            }

            let v: Vec<f64> = values.iter().map(|x| tape.scalar_value(*x)).collect();
            let adv = advantages_from(&rewards, &v, config.gamma);
            let a_loss = actor_loss(&mut tape, &picks, &entropies, &adv, config.entropy_weight);
            let n = config.horizon as f64;
            let mut c_loss = tape.scalar(0.0);
            for t in 0..config.horizon {
                let target = rewards[t] + config.gamma * v.get(t + 1).copied().unwrap_or(0.0);
                let y = tape.scalar(target);
                let d = tape.sub(values[t], y);
                let sq = tape.square(d);
                let term = tape.scale(sq, 0.5 / n);
                c_loss = tape.add(c_loss, term);
            }
            let total = tape.add(a_loss, c_loss);
            let loss_value = tape.scalar_value(total);
            if !loss_value.is_finite() {
                return Err(SupervisorError::NonFinite { episode: ep, what: "loss" });
            }
            let grads = tape.backward(total)?;
            if !grads.is_finite() {
                return Err(SupervisorError::NonFinite { episode: ep, what: "gradient" });
            }
            let ent_mean = entropies.iter().map(|h| tape.scalar_value(*h)).sum::<f64>() / n;
            let entry = TrainLogEntry {
                episode: ep,
                episode_return: raw_return,
                mean_reward: raw_return / n,
                actor_loss: tape.scalar_value(a_loss),
                critic_loss: tape.scalar_value(c_loss),
                entropy: ent_mean,
            };
            (grads, entry)
        };
        actor_opt.step(&mut model.store, &grads)?;
        critic_opt.step(&mut model.store, &grads)?;
        on_episode(&entry);
        log.entries.push(entry);
    }
    Ok(log)
}

/// Frozen pieces of one sampled training episode.
struct RecordedEpisode {
    inputs: Vec<StepInputs>,
    levels: Vec<Vec<usize>>,
    advantages: Vec<f64>,
    critic_targets: Vec<f64>,
}

fn record_episode(
    model: &SupervisorModel,
    slice: &SliceConfig,
    intents: &IntentSet,
    lower: &LowerSystems,
    config: &TrainConfig,
) -> Result<RecordedEpisode, SupervisorError> {
    let mut sampler = rng::derive(config.seed, 0x9c4e);
    let mut tape = Tape::new(&model.store);
    let mut state = initial_state(slice, config.initial, config.episode_seed(0))?;
    let mut kpis = netsim::kpis(&state, slice);
    let mut prev_actions = vec![0; lower.len()];
    let mut prev_goals = initial_goal_levels(lower, &kpis);
    let codes = agent_codes(&mut tape, model)?;
    let g = model.meta.dims.gru;
    let mut hidden = [tape.input(vec![0.0; g]), tape.input(vec![0.0; g])];
    let (mut inputs, mut levels, mut rewards, mut values) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..config.horizon {
        let step = StepInputs::gather(model, slice, intents, &state, &kpis, &prev_actions, &prev_goals)?;
        let out = forward_step(&mut tape, model, &codes, &step, hidden)?;
        let lv: Vec<usize> =
            out.logps.iter().map(|lp| pick(tape.value(*lp), DecisionMode::Sample, &mut sampler)).collect();
        let (next, next_kpis, actions) = env_step(lower, slice, &state, &kpis, &lv)?;
        rewards.push(utility::global_utility(intents, &next_kpis.snapshot(intents)?)? * config.reward_scale);
        values.push(tape.scalar_value(out.value));
        hidden = out.hidden;
        state = next;
        kpis = next_kpis;
        prev_actions = actions;
        prev_goals = lv.clone();
        inputs.push(step);
        levels.push(lv);
    }
    let advantages = advantages_from(&rewards, &values, config.gamma);
    let critic_targets =
        (0..rewards.len()).map(|t| rewards[t] + config.gamma * values.get(t + 1).copied().unwrap_or(0.0)).collect();
    Ok(RecordedEpisode { inputs, levels, advantages, critic_targets })
}

/// The training losses of a recorded episode as functions of the parameters.
fn replay_losses(
    tape: &mut Tape<'_>,
    model: &SupervisorModel,
    ep: &RecordedEpisode,
    entropy_weight: f64,
) -> Result<(Var, Var), SupervisorError> {
    let codes = agent_codes(tape, model)?;
    let g = model.meta.dims.gru;
    let mut hidden = [tape.input(vec![0.0; g]), tape.input(vec![0.0; g])];
    let (mut picks, mut entropies, mut values) = (Vec::new(), Vec::new(), Vec::new());
    for (step, lv) in ep.inputs.iter().zip(&ep.levels) {
        let out = forward_step(tape, model, &codes, step, hidden)?;
        let mut pick_sum = tape.scalar(0.0);
        let mut ent_sum = tape.scalar(0.0);
        for (lp, level) in out.logps.iter().zip(lv) {
            let chosen = tape.index(*lp, *level);
            pick_sum = tape.add(pick_sum, chosen);
            let h = entropy(tape, *lp);
            ent_sum = tape.add(ent_sum, h);
        }
        picks.push(pick_sum);
        entropies.push(ent_sum);
        values.push(out.value);
        hidden = out.hidden;
    }
    let a_loss = actor_loss(tape, &picks, &entropies, &ep.advantages, entropy_weight);
    let n = values.len() as f64;
    let mut c_loss = tape.scalar(0.0);
    for (v, target) in values.iter().zip(&ep.critic_targets) {
        let y = tape.scalar(*target);
        let d = tape.sub(*v, y);
        let sq = tape.square(d);
        let term = tape.scale(sq, 0.5 / n);
        c_loss = tape.add(c_loss, term);
    }
    Ok((a_loss, c_loss))
}

/// Finite-difference check of every block against the training losses of
/// one sampled episode, with the sampled goals, advantages and critic targets
/// held fixed. Actor-path blocks are checked on the actor loss, the critic on
/// its own loss (its input is detached from the rest of the network).
/// `max_per_param` samples that many entries of each tensor.
pub fn check_gradients(
    model: &SupervisorModel,
    slice: &SliceConfig,
    intents: &IntentSet,
    lower: &LowerSystems,
    config: &TrainConfig,
    max_per_param: Option<usize>,
) -> Result<Vec<(&'static str, GradCheckReport)>, SupervisorError> {
    config.validate()?;
    model.check_lower(lower)?;
    model.check_intents(intents)?;
    let ep = record_episode(model, slice, intents, lower, config)?;
    let mut out = Vec::new();
    for (name, ids) in model.blocks() {
        let critic = name == "critic";
        let report = gradient_check(
            &model.store,
            Some(&ids),
            |tape| {
                let (a, c) = replay_losses(tape, model, &ep, config.entropy_weight).map_err(|e| match e {
                    SupervisorError::Nn(n) => n,
                    _ => NnError::NonFinite("replayed loss"),
                })?;
                Ok(if critic { c } else { a })
            },
            DEFAULT_GRADCHECK_STEP,
            DEFAULT_GRADCHECK_TOLERANCE,
            max_per_param,
        )?;
        out.push((name, report));
    }
    Ok(out)
}

/// Finite-difference check of every block on its own: random inputs of the
/// block's width drawn from `seed`, and a random linear readout of its output
/// as the loss. The recurrent block is unrolled three steps through both GRU
/// layers; each head is read through its log-softmax.
pub fn isolated_gradient_checks(
    model: &SupervisorModel,
    seed: u64,
    max_per_param: Option<usize>,
) -> Result<Vec<(&'static str, GradCheckReport)>, SupervisorError> {
    let d = model.meta.dims;
    let mut r = rng::derive(seed, 0x61c);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng::normal(&mut r)).collect() };
    let readout = |tape: &mut Tape<'_>, y: Var, c: &[f64]| {
        let cv = tape.input(c.to_vec());
        let p = tape.mul(y, cv);
        tape.sum(p)
    };
    let check = |ids: Vec<ParamId>, loss: &dyn Fn(&mut Tape<'_>) -> Result<Var, NnError>| {
        gradient_check(&model.store, Some(&ids), loss, DEFAULT_GRADCHECK_STEP, DEFAULT_GRADCHECK_TOLERANCE, max_per_param)
    };
    let mut out = Vec::new();

    for (name, block, width, out_width) in [
        ("encoder", &model.encoder, CAPABILITY_LEN, d.encoder),
        ("merger", &model.merger, d.encoder + SAG_FEATURES, d.merger),
        ("dun", &model.dun, DUN_INPUT, d.dun),
        ("fusion", &model.fusion, d.merger + GOAL_ENCODING + d.dun, d.fusion),
        ("critic", &model.critic, d.fusion + d.gru, 1),
    ] {
        let (x, c) = (draw(width), draw(out_width));
        let report = check(block.param_ids(), &|t| {
            let xv = t.input(x.clone());
            let y = block.forward(t, xv)?;
            Ok(readout(t, y, &c))
        })?;
        out.push((name, report));
    }

    let xs: Vec<Vec<f64>> = (0..3).map(|_| draw(d.fusion)).collect();
    let c = draw(d.gru);
    let ids = [model.gru[0].param_ids(), model.gru[1].param_ids()].concat();
    let report = check(ids, &|t| {
        let mut h = [t.input(vec![0.0; d.gru]), t.input(vec![0.0; d.gru])];
        for x in &xs {
            let xv = t.input(x.clone());
            h[0] = model.gru[0].forward(t, xv, h[0])?;
            h[1] = model.gru[1].forward(t, h[0], h[1])?;
        }
        Ok(readout(t, h[1], &c))
    })?;
    out.push(("actor.gru", report));

    let x = draw(d.gru);
    let picks: Vec<usize> = (0..model.heads.len()).map(|k| (k * 3 + seed as usize) % GOAL_LEVELS).collect();
    let ids = model.heads.iter().flat_map(|h| h.param_ids()).collect();
    let report = check(ids, &|t| {
        let xv = t.input(x.clone());
        let mut total = t.scalar(0.0);
        for (h, p) in model.heads.iter().zip(&picks) {
            let logits = h.forward(t, xv)?;
            let lp = t.log_softmax(logits);
            let chosen = t.index(lp, *p);
            total = t.add(total, chosen);
        }
        Ok(total)
    })?;
    out.push(("actor.heads", report));
    Ok(out)
}

/// Goal decision for explicit inputs, evaluation mode.
pub fn decide_goals(
    model: &SupervisorModel,
    intents: &IntentSet,
    fused: &[f64],
    hidden: &[Vec<f64>; 2],
) -> Result<(GoalDecision, [Vec<f64>; 2]), SupervisorError> {
    let mut tape = Tape::new(&model.store);
    let f = tape.input(fused.to_vec());
    let h = [tape.input(hidden[0].clone()), tape.input(hidden[1].clone())];
    let (logps, h2) = actor_step(&mut tape, model, f, h)?;
    let mut unused = rng::seeded(0);
    let mut goals = Vec::with_capacity(logps.len());
    let mut probs = Vec::with_capacity(logps.len());
    for (a, lp) in model.meta.agents.iter().zip(&logps) {
        let v = tape.value(*lp);
        let level = pick(v, DecisionMode::Greedy, &mut unused);
        let e = a.expectation(intents).ok_or_else(|| SupervisorError::AgentMismatch(a.id.clone()))?;
        goals.push(SubGoal::new(e, level));
        probs.push(v.iter().map(|l| libm::exp(*l)).collect());
    }
    Ok((GoalDecision { goals, probs }, [tape.value(h2[0]).to_vec(), tape.value(h2[1]).to_vec()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use crate::utility::Expectation;

    fn small() -> ModelDims {
        ModelDims { encoder: 6, merger: 6, dun: 4, fusion: 6, gru: 5, critic: 4 }
    }

    fn intents() -> IntentSet {
        IntentSet::new(vec![
            Expectation::new("cv-qoe", Service::Cv, KpiKind::Qoe, 3.0, Direction::AtLeast),
            Expectation::new("urllc-pl", Service::Urllc, KpiKind::PacketLoss, 2.0, Direction::AtMost),
            Expectation::new("miot-pl", Service::Miot, KpiKind::PacketLoss, 4.0, Direction::AtMost),
        ])
        .unwrap()
    }

    fn setup(dun: bool) -> (SliceConfig, LowerSystems, SupervisorModel) {
        let cfg = SliceConfig::profile("scarce").unwrap();
        let specs = AgentSpec::roster(&cfg, &intents());
        let lower = LowerSystems::untrained(&cfg, specs.clone());
        let model = SupervisorModel::new(ModelMeta { dims: small(), agents: specs, dun_enabled: dun, init_seed: 0 });
        (cfg, lower, model)
    }

    fn zero_weights(model: &mut SupervisorModel, bias: f64) {
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let is_bias = model.store.name(id).ends_with("bias");
            let t = model.store.get_mut(id);
            let fill = if is_bias { bias } else { 0.0 };
            *t = Tensor::from_vec(&t.shape.clone(), vec![fill; t.len()]).unwrap();
        }
    }

    fn embed(model: &SupervisorModel, spec: &AgentSpec, sag: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new(&model.store);
        let g = tape.input(spec.capability_vector());
        let code = model.encoder.forward(&mut tape, g).unwrap();
        let e = embed_agent(&mut tape, model, code, sag).unwrap();
        tape.value(e).to_vec()
    }

    #[test]
    fn structure_matches_roster() {
        let (_, _, model) = setup(true);
        assert_eq!(model.head_count(), 6);
        let full = SupervisorModel::proposed(AgentSpec::standard(&SliceConfig::paper_desk()), 1);
        assert_eq!(full.head_count(), 9);
        let names: Vec<&str> = full.store.iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"actor.head.autoscale.0.weight"));
    }

    #[test]
    fn embedding_examples() {
        let (_, _, model) = setup(true);
        let specs = model.agents().to_vec();
        let sag = [0.2, 0.5, 0.0, 1.0, 0.8];
        assert_eq!(embed(&model, &specs[0], &sag), embed(&model, &specs[0], &sag));
        assert_ne!(embed(&model, &specs[0], &sag), embed(&model, &specs[1], &sag));

        let mut zero = model.clone();
        zero_weights(&mut zero, 0.3);
        let want = libm::tanh(0.3);
        for v in embed(&zero, &specs[2], &sag) {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn context_examples() {
        let (cfg, _, model) = setup(true);
        let set = intents();
        let kpis = netsim::kpis(&netsim::reset(&cfg, 0).unwrap(), &cfg);
        let fv = utility::feature_vector(&set, &kpis.snapshot(&set).unwrap()).unwrap();

        let (_, _, off) = setup(false);
        assert!(context_values(&off, &set, &fv).unwrap().iter().all(|v| *v == 0.0));

        let mut rev: Vec<Expectation> = set.expectations().to_vec();
        rev.reverse();
        let rev = IntentSet::new(rev).unwrap();
        let fv_rev = utility::feature_vector(&rev, &kpis.snapshot(&rev).unwrap()).unwrap();
        let a = context_values(&model, &set, &fv).unwrap();
        let b = context_values(&model, &rev, &fv_rev).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }

        let one = IntentSet::new(vec![set.expectations()[0].clone()]).unwrap();
        let fv_one = utility::feature_vector(&one, &kpis.snapshot(&one).unwrap()).unwrap();
        let mut zero = model.clone();
        zero_weights(&mut zero, -0.7);
        for v in context_values(&zero, &one, &fv_one).unwrap() {
            assert!((v - libm::tanh(-0.7)).abs() < 1e-15);
        }

        let mut bumped = set.clone();
        bumped.set_priority(&ExpectationId::new("cv-qoe"), 6.0).unwrap();
        let state = netsim::random_state(&cfg, &mut rng::seeded(2));
        let k = netsim::kpis(&state, &cfg);
        let fa = utility::feature_vector(&set, &k.snapshot(&set).unwrap()).unwrap();
        let fb = utility::feature_vector(&bumped, &k.snapshot(&bumped).unwrap()).unwrap();
        if fa != fb {
            assert_ne!(context_values(&model, &set, &fa).unwrap(), context_values(&model, &bumped, &fb).unwrap());
        }
    }

    #[test]
    fn fuse_examples() {
        let (_, _, model) = setup(true);
        let goals = goal_encoding(&intents());
        let run = |m: &SupervisorModel, ctx: Vec<f64>| {
            let mut tape = Tape::new(&m.store);
            let codes = agent_codes(&mut tape, m).unwrap();
            let embs: Vec<Var> =
                codes.iter().map(|c| embed_agent(&mut tape, m, *c, &[0.1, 0.2, 0.3, 0.4, 0.3]).unwrap()).collect();
            let c = tape.input(ctx);
            let f = fuse(&mut tape, m, &embs, &goals, c).unwrap();
            tape.value(f).to_vec()
        };
        let ctx = vec![0.1, -0.2, 0.3, 0.0];
        assert_eq!(run(&model, ctx.clone()), run(&model, ctx.clone()));
        assert_ne!(run(&model, ctx.clone()), run(&model, vec![0.0; 4]));
        let mut zero = model.clone();
        zero_weights(&mut zero, 0.5);
        for v in run(&zero, ctx) {
            assert!((v - libm::tanh(0.5)).abs() < 1e-15);
        }

        let mut tape = Tape::new(&model.store);
        let c = tape.input(vec![0.0; 4]);
        let one = tape.input(vec![0.0; 6]);
        assert!(fuse(&mut tape, &model, &[one], &goals, c).is_err());
    }

    #[test]
    fn decisions_are_normalized_and_greedy_is_deterministic() {
        let (_, _, model) = setup(true);
        let fused = vec![0.3, -0.1, 0.5, 0.0, 0.2, -0.4];
        let h = [vec![0.1; 5], vec![-0.2; 5]];
        let (d1, h1) = decide_goals(&model, &intents(), &fused, &h).unwrap();
        let (d2, h2) = decide_goals(&model, &intents(), &fused, &h).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(h1, h2);
        assert_eq!(d1.goals.len(), 6);
        for (p, g) in d1.probs.iter().zip(&d1.goals) {
            assert_eq!(p.len(), GOAL_LEVELS);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p[g.level] > 0.0);
        }
    }

    #[test]
    fn sampled_goals_are_reproducible() {
        let logp = crate::nn::tape::log_softmax(&[0.1, 0.4, -0.3, 0.0]);
        let draw = |seed| {
            let mut r = rng::seeded(seed);
            (0..40).map(|_| pick(&logp, DecisionMode::Sample, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_eq!(pick(&[0.0, 0.0, -1.0], DecisionMode::Greedy, &mut rng::seeded(0)), 0);
    }

    fn trace_of(rewards: &[f64], values: &[f64]) -> EpisodeTrace {
        let kpis = KpiVector::default();
        let steps = rewards
            .iter()
            .zip(values)
            .enumerate()
            .map(|(t, (r, v))| StepRecord {
                step: t,
                decision: GoalDecision { goals: vec![], probs: vec![] },
                agent_actions: vec![],
                kpis,
                deviations: vec![],
                features: FeatureVector { features: vec![] },
                z: *r,
                value: *v,
                intents: intents(),
            })
            .collect();
        EpisodeTrace { horizon: rewards.len(), initial_kpis: kpis, steps }
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(advantage(&trace_of(&[0.0; 4], &[0.0; 4]), 0.95).unwrap(), vec![0.0; 4]);
        let a = advantage(&trace_of(&[-5.0], &[-4.0]), 0.95).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-12);

        let (c, gamma, n) = (-2.0, 0.95, 12);
        let values: Vec<f64> = (0..n).map(|t| c * (1.0 - libm::pow(gamma, (n - t) as f64)) / (1.0 - gamma)).collect();
        for a in advantage(&trace_of(&vec![c; n], &values), gamma).unwrap() {
            assert!(a.abs() < 1e-12);
        }

        let mut short = trace_of(&[1.0, 2.0], &[0.0, 0.0]);
        short.horizon = 3;
        assert!(matches!(advantage(&short, 0.9), Err(SupervisorError::IncompleteTrace { .. })));
    }

    #[test]
    fn advantage_matches_direct_evaluation() {
        let r = [-1.0, -0.5, -3.0, 0.0];
        let v = [-2.0, -1.5, -0.25, 0.5];
        let a = advantage(&trace_of(&r, &v), 0.9).unwrap();
        assert_eq!(a[0], r[0] + 0.9 * v[1] - v[0]);
        assert_eq!(a[2], r[2] + 0.9 * v[3] - v[2]);
        assert_eq!(a[3], r[3] + 0.9 * 0.0 - v[3]);
    }

    #[test]
    fn training_smoke_and_baseline() {
        for dun in [true, false] {
            let (cfg, lower, mut model) = setup(dun);
            let tc = TrainConfig { episodes: 10, horizon: 6, ..TrainConfig::default() };
            let before = model.checksum();
            let log = train_supervisor(&tc, &cfg, &intents(), &lower, &mut model).unwrap();
            assert_eq!(log.len(), 10);
            assert_ne!(model.checksum(), before);
            assert!(log.entries.iter().all(|e| e.episode_return.is_finite() && e.entropy > 0.0));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (cfg, lower, mut model) = setup(true);
            let tc = TrainConfig { episodes: 4, horizon: 5, seed: 7, ..TrainConfig::default() };
            let log = train_supervisor(&tc, &cfg, &intents(), &lower, &mut model).unwrap();
            (model.checksum(), log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn episodes_leave_parameters_alone_and_repeat_exactly() {
        let (cfg, lower, model) = setup(true);
        let before = model.checksum();
        let opts = EpisodeOptions { seed: 3, ..EpisodeOptions::default() };
        let a = run_episode(&model, &lower, &cfg, &intents(), &[], opts).unwrap();
        let b = run_episode(&model, &lower, &cfg, &intents(), &[], opts).unwrap();
        assert_eq!(model.checksum(), before);
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 20);
    }

    #[test]
    fn schedule_equivalences() {
        let (cfg, lower, model) = setup(true);
        let opts = EpisodeOptions { seed: 1, ..EpisodeOptions::default() };
        let mut hi = intents();
        for id in ["cv-qoe", "urllc-pl", "miot-pl"] {
            hi.set_priority(&ExpectationId::new(id), 4.0).unwrap();
        }
        let direct = run_episode(&model, &lower, &cfg, &hi, &[], opts).unwrap();
        let scheduled = run_episode(&model, &lower, &cfg, &intents(), &[(0, hi.clone())], opts).unwrap();
        assert_eq!(direct, scheduled);

        let (_, _, base) = setup(false);
        let plain = run_episode(&base, &lower, &cfg, &intents(), &[], opts).unwrap();
        let mutated = run_episode(&base, &lower, &cfg, &intents(), &[(5, hi.clone())], opts).unwrap();
        for (p, m) in plain.steps.iter().zip(&mutated.steps) {
            assert_eq!(p.decision, m.decision);
            assert_eq!(p.kpis, m.kpis);
        }
        assert_eq!(mutated.steps[5].intents, hi);

        assert!(matches!(
            run_episode(&model, &lower, &cfg, &intents(), &[(20, hi)], opts),
            Err(SupervisorError::ScheduleBeyondHorizon { .. })
        ));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn policy_gradient_favours_the_better_arm() {
        let trials = 50;
        let updates = 30;
        let mut mean_p = vec![0.0; updates + 1];
        for trial in 0..trials {
            let mut store = ParamStore::new();
            let logits = store.add("logits", Tensor::zeros(&[2]));
            let mut opt = Adam::new(&store, vec![logits], AdamConfig { lr: 0.05, ..AdamConfig::default() });
            let mut r = rng::seeded(trial);
            for u in 0..=updates {
                let (grads, p_good) = {
                    let mut tape = Tape::new(&store);
                    let l = tape.param(logits);
                    let lp = tape.log_softmax(l);
                    let p_good = libm::exp(tape.value(lp)[1]);
                    let a = pick(tape.value(lp), DecisionMode::Sample, &mut r);
                    let reward = if a == 1 { 1.0 } else { 0.0 };
                    let chosen = tape.index(lp, a);
                    let loss = actor_loss(&mut tape, &[chosen], &[], &[reward], 0.0);
                    (tape.backward(loss).unwrap(), p_good)
                };
                mean_p[u] += p_good / trials as f64;
                opt.step(&mut store, &grads).unwrap();
            }
        }
        for w in mean_p.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{mean_p:?}");
        }
        assert!(mean_p[updates] > 0.8);
    }

    #[test]
    fn every_block_passes_gradient_check() {
        let (cfg, lower, model) = setup(true);
        let tc = TrainConfig { horizon: 3, seed: 4, ..TrainConfig::default() };
        let reports = check_gradients(&model, &cfg, &intents(), &lower, &tc, None).unwrap();
        assert_eq!(reports.len(), 7);
        for (name, r) in reports {
            assert!(r.passed, "{name}: {r:?}");
            assert!(r.checked > 0);
        }
    }

}
