use imf_core::netsim::{self, AutoscaleLevel, ControlInputs, SliceConfig, SliceState, UeMove};
use imf_core::rng;
use imf_core::utility::Service;
use proptest::prelude::*;

const TOL: f64 = 1e-9;

fn config(capacity: f64, load_scale: [f64; 3]) -> SliceConfig {
    let mut c = SliceConfig::paper_desk().with_capacity(capacity);
    c.loads.cv.per_ue_demand *= load_scale[0];
    c.loads.urllc.per_ue_demand *= load_scale[1];
    c.loads.miot.per_ue_demand *= load_scale[2];
    c
}

fn case() -> impl Strategy<Value = (SliceConfig, SliceState)> {
    (1.0f64..30.0, [0.0f64..3.0, 0.0f64..3.0, 0.0f64..3.0], any::<u64>()).prop_map(|(cap, scale, seed)| {
        let c = config(cap, scale);
        let s = netsim::random_state(&c, &mut rng::seeded(seed));
        (c, s)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn throughput_never_exceeds_capacity((c, s) in case()) {
        let thr = netsim::allocate(&s, &c);
        prop_assert!(thr.iter().sum::<f64>() <= c.airlink_capacity + TOL);
        prop_assert!(thr.iter().all(|t| *t >= 0.0));
    }

    #[test]
    fn throughput_respects_mbr_and_demand((c, s) in case()) {
        let thr = netsim::allocate(&s, &c);
        let offered = c.loads.offered();
        for svc in Service::ALL {
            let i = svc.index();
            prop_assert!(thr[i] <= c.mbr_levels[s.mbr_index[i]] + TOL);
            prop_assert!(thr[i] <= offered[i] + TOL);
        }
    }

    #[test]
    fn top_priority_never_loses_throughput((c, mut s) in case(), svc in 0usize..3) {
        let top = c.priority_levels - 1;
        for (i, p) in s.priority.iter_mut().enumerate() {
            if i != svc {
                *p = (*p).min(top - 1);
            }
        }
        let before = netsim::allocate(&s, &c)[svc];
        s.priority[svc] = top;
        let after = netsim::allocate(&s, &c)[svc];
        prop_assert!(after >= before - TOL, "{before} -> {after}");
    }

    #[test]
    fn more_pods_never_raise_latency((c, s) in case(), site in 0usize..3, svc in prop::sample::select(vec![Service::Urllc, Service::Miot])) {
        let level = s.autoscale[site][svc.index()];
        let Some(up) = AutoscaleLevel::from_index(level.index() + 1) else { return Ok(()) };
        let mut scaled = s.clone();
        scaled.autoscale[site][svc.index()] = up;
        let lat = |st: &SliceState| {
            let k = netsim::kpis(st, &c);
            if svc == Service::Urllc { k.latency_urllc } else { k.latency_miot }
        };
        prop_assert!(lat(&scaled) <= lat(&s) + TOL);
    }

    #[test]
    fn moving_miot_to_the_edge_trades_power_for_latency(
        (c, mut s) in case(),
        edge in prop::sample::select(vec!["edge1", "edge2"]),
        level in 0usize..4,
        fraction in 0.05f64..1.0,
    ) {
        let m = Service::Miot.index();
        for site in s.autoscale.iter_mut() {
            site[m] = AutoscaleLevel::ALL[level];
        }
        let central = c.central_index();
        prop_assume!(s.placement[m][central] > 1e-6);
        let mv = ControlInputs {
            moves: vec![UeMove { service: Service::Miot, from: "central".into(), to: edge.into(), fraction }],
            ..ControlInputs::default()
        };
        let moved = netsim::apply(&s, &c, &mv).unwrap();
        let (before, after) = (netsim::kpis(&s, &c), netsim::kpis(&moved, &c));
        prop_assert!(after.latency_miot < before.latency_miot);
        prop_assert!(after.power_miot_normalized > before.power_miot_normalized);
    }

    #[test]
    fn step_is_a_pure_function((c, s) in case()) {
        let a = netsim::step(&s, &c).unwrap();
        let b = netsim::step(&s, &c).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn kpis_stay_in_their_ranges((c, s) in case()) {
        let k = netsim::kpis(&s, &c);
        prop_assert!((1.0..=5.0).contains(&k.qoe_cv));
        prop_assert!((0.0..=100.0).contains(&k.pl_urllc) && (0.0..=100.0).contains(&k.pl_miot));
        prop_assert!(k.latency_urllc > 0.0 && k.latency_miot > 0.0);
        prop_assert!((0.0..=1.0).contains(&k.power_miot_normalized));
    }
}

#[test]
fn cv_priority_couples_to_other_services_when_scarce() {
    let c = SliceConfig::profile("scarce").unwrap();
    let mut s = netsim::reset(&c, 0).unwrap();
    s.priority = [0, 1, 1];
    let low = netsim::kpis(&s, &c);
    s.priority[Service::Cv.index()] = c.priority_levels - 1;
    let high = netsim::kpis(&s, &c);
    assert!(high.qoe_cv > low.qoe_cv, "{} -> {}", low.qoe_cv, high.qoe_cv);
    assert!(high.pl_urllc >= low.pl_urllc && high.pl_miot >= low.pl_miot);
    assert!(high.pl_urllc > low.pl_urllc || high.pl_miot > low.pl_miot);
}
