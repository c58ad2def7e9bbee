use std::sync::OnceLock;

use imf_core::agents::{goal_grid_value, train_lower, AgentSpec, LowerSystems, LowerTrainConfig, GOAL_LEVELS};
use imf_core::netsim::{self, KpiVector, SliceConfig};
use imf_core::rng;
use imf_core::utility::{KpiKind, Service};

const SEEDS: u64 = 20;
const STEPS: usize = 20;

fn scarce() -> SliceConfig {
    SliceConfig::profile("scarce").unwrap()
}

fn trained() -> &'static LowerSystems {
    static CELL: OnceLock<LowerSystems> = OnceLock::new();
    CELL.get_or_init(|| {
        let c = scarce();
        train_lower(&c, AgentSpec::standard(&c), LowerTrainConfig::default(), 0).unwrap()
    })
}

fn kpi_of(k: &KpiVector, spec: &AgentSpec) -> f64 {
    k.value(spec.service, spec.kpi).unwrap()
}

// Only `agent` acts; it holds `level` for the whole rollout. Returns the final KPI.
fn rollout(sys: &LowerSystems, agent: &str, level: usize, seed: u64, eps: f64) -> f64 {
    let c = scarce();
    let one = sys.select(&[agent]).unwrap();
    let mut r = rng::seeded(seed);
    let mut state = netsim::random_state(&c, &mut r);
    let mut kpis = netsim::kpis(&state, &c);
    for _ in 0..STEPS {
        let joint = one.act_all(&state, &c, &kpis, &[level], eps, &mut r);
        let applied = netsim::apply(&state, &c, &joint.controls).unwrap();
        (state, kpis) = netsim::step(&applied, &c).unwrap();
    }
    kpi_of(&kpis, &one.specs[0])
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn priority_agents_follow_their_goal() {
    let sys = trained();
    for svc in Service::ALL {
        let id = format!("priority-{}", svc.name());
        let spec = &sys.specs[sys.index_of(&id).unwrap()];
        // QoE is better high, packet loss better low.
        let (ambitious, lax) = if spec.kpi == KpiKind::Qoe { (GOAL_LEVELS - 1, 0) } else { (0, GOAL_LEVELS - 1) };
        let goal = goal_grid_value(spec.range(), ambitious);
        let dist = |level| mean((0..SEEDS).map(|s| (rollout(sys, &id, level, s, 0.0) - goal).abs()));
        let (hit, miss) = (dist(ambitious), dist(lax));
        assert!(hit <= miss, "{id}: distance to goal {hit} with it, {miss} without");
    }
}

#[test]
fn trained_cv_priority_beats_random_actions() {
    let sys = trained();
    let top = GOAL_LEVELS - 1;
    let greedy = mean((0..SEEDS).map(|s| rollout(sys, "priority-cv", top, s, 0.0)));
    let random = mean((0..SEEDS).map(|s| rollout(sys, "priority-cv", top, s, 1.0)));
    assert!(greedy > random, "QoE greedy {greedy} vs random {random}");
}

#[test]
fn rollouts_leave_tables_unchanged() {
    let sys = trained();
    let before = sys.checksum();
    for s in 0..3 {
        rollout(sys, "move-miot", 0, s, 0.0);
    }
    assert_eq!(sys.checksum(), before);
    assert!(sys.policies.iter().all(|p| p.is_finite()));
}
