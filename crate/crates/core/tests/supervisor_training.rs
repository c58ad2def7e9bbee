use imf_core::agents::{train_lower, AgentSpec, LowerSystems, LowerTrainConfig};
use imf_core::netsim::SliceConfig;
use imf_core::supervisor::{
    check_gradients, isolated_gradient_checks, run_episode, train_supervisor, EpisodeOptions, InitialState,
    SupervisorModel, TrainConfig,
};
use imf_core::utility::{Direction, Expectation, IntentSet, KpiKind, Service};

fn intents() -> IntentSet {
    IntentSet::new(vec![
        Expectation::new("cv-qoe", Service::Cv, KpiKind::Qoe, 3.0, Direction::AtLeast),
        Expectation::new("urllc-pl", Service::Urllc, KpiKind::PacketLoss, 2.0, Direction::AtMost),
        Expectation::new("miot-pl", Service::Miot, KpiKind::PacketLoss, 4.0, Direction::AtMost),
    ])
    .unwrap()
}

fn mean_z(model: &SupervisorModel, lower: &LowerSystems, cfg: &SliceConfig, seeds: std::ops::Range<u64>) -> f64 {
    let n = seeds.end - seeds.start;
    let total: f64 = seeds
        .map(|seed| {
            let opts = EpisodeOptions { horizon: 20, seed, initial: InitialState::Random };
            let t = run_episode(model, lower, cfg, &intents(), &[], opts).unwrap();
            t.rewards().iter().sum::<f64>() / 20.0
        })
        .sum();
    total / n as f64
}

#[test]
fn every_block_passes_gradient_check_over_ten_seeds() {
    let cfg = SliceConfig::profile("scarce").unwrap();
    let specs = AgentSpec::roster(&cfg, &intents());
    let lower = LowerSystems::untrained(&cfg, specs.clone());
    for seed in 0..10 {
        for model in [SupervisorModel::proposed(specs.clone(), seed), SupervisorModel::baseline(specs.clone(), seed)] {
            let tc = TrainConfig { horizon: 3, seed, ..TrainConfig::default() };
            let mut reports = isolated_gradient_checks(&model, seed, Some(48)).unwrap();
            reports.extend(check_gradients(&model, &cfg, &intents(), &lower, &tc, Some(48)).unwrap());
            for (block, r) in reports {
                assert!(r.passed, "seed {seed} {block}: max rel error {:.3e}", r.max_rel_error);
            }
        }
    }
}

#[test]
fn training_improves_greedy_utility() {
    let cfg = SliceConfig::profile("ample").unwrap();
    let specs = AgentSpec::roster(&cfg, &intents());
    let lower = train_lower(&cfg, specs.clone(), LowerTrainConfig::default(), 0).unwrap();
    let untrained = SupervisorModel::proposed(specs, 0);
    let mut model = untrained.clone();
    let log = train_supervisor(&TrainConfig::default(), &cfg, &intents(), &lower, &mut model).unwrap();
    assert_eq!(log.len(), TrainConfig::default().episodes);
    assert!(log.entries.iter().all(|e| e.episode_return.is_finite() && e.actor_loss.is_finite()));
    let before = mean_z(&untrained, &lower, &cfg, 1000..1020);
    let after = mean_z(&model, &lower, &cfg, 1000..1020);
    assert!(after > before, "mean Z per step {before} -> {after}");
    assert!(log.mean_return(1800, 2000) > log.mean_return(0, 200));
}
