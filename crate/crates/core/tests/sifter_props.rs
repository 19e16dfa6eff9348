mod common;

use proptest::prelude::*;
use trackersift::attribution::{EntityKey, Granularity};
use trackersift::pipeline::build_pool;
use trackersift::sifter::{parse_grid, sift, sweep, LabeledRequest, Verdict};
use trackersift::synth::{generate, parse_scenario, random_scenario};

use common::{check_monotonic, check_random_scenario, labeled};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_scenarios_hold_invariants(seed in any::<u64>()) {
        if let Err(e) = check_random_scenario(seed) {
            return Err(TestCaseError::fail(e));
        }
    }

    #[test]
    fn mixed_sets_grow_with_threshold(seed in any::<u64>()) {
        if let Err(e) = check_monotonic(seed) {
            return Err(TestCaseError::fail(e));
        }
    }

    #[test]
    fn scaling_counts_keeps_verdicts(seed in any::<u64>(), k in 2usize..5) {
        let g = generate(&random_scenario(seed, 60), seed).unwrap();
        let base = labeled(&g);
        let scaled: Vec<LabeledRequest> = base
            .iter()
            .flat_map(|r| {
                (0..k).map(move |i| {
                    let mut c = r.clone();
                    c.record.request_id = format!("{}#{i}", r.record.request_id);
                    c
                })
            })
            .collect();
        let a = sift(&base, 2.0, false);
        let b = sift(&scaled, 2.0, false);
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            prop_assert_eq!(la.entities.len(), lb.entities.len());
            for (ea, eb) in la.entities.iter().zip(&lb.entities) {
                prop_assert_eq!(&ea.key, &eb.key);
                prop_assert_eq!(ea.verdict, eb.verdict);
                prop_assert_eq!(ea.tracking_count * k as u64, eb.tracking_count);
            }
        }
    }

    #[test]
    fn input_order_does_not_change_entities(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let g = generate(&random_scenario(seed, 120), seed).unwrap();
        let base = labeled(&g);
        let mut shuffled = base.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = sift(&base, 2.0, false);
        let b = sift(&shuffled, 2.0, false);
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            prop_assert_eq!(&la.entities, &lb.entities);
        }
    }
}

#[test]
fn thread_count_does_not_change_result() {
    let g = generate(&random_scenario(11, 200), 11).unwrap();
    let requests = labeled(&g);
    let one = build_pool(1)
        .unwrap()
        .install(|| sift(&requests, 2.0, false));
    let many = build_pool(8)
        .unwrap()
        .install(|| sift(&requests, 2.0, false));
    assert_eq!(one, many);
}

#[test]
fn planted_mixed_domain_with_pure_hosts_stops_at_hostname() {
    let s =
        parse_scenario("domain m.sift\n host a.m.sift T=4 F=0\n host b.m.sift T=0 F=4\n").unwrap();
    let g = generate(&s, 0).unwrap();
    let r = sift(&labeled(&g), 2.0, false);
    assert_eq!(
        r.verdict_of(&EntityKey::Domain("m.sift".into())),
        Some(Verdict::Mixed)
    );
    assert_eq!(
        r.verdict_of(&EntityKey::Hostname("a.m.sift".into())),
        Some(Verdict::Tracking)
    );
    assert_eq!(
        r.verdict_of(&EntityKey::Hostname("b.m.sift".into())),
        Some(Verdict::Functional)
    );
    assert_eq!(r.level(Granularity::Script).entered, 0);
    assert!(r.residual.is_empty());
}

#[test]
fn single_point_sweep_matches_classification() {
    let g = generate(&random_scenario(5, 200), 5).unwrap();
    let requests = labeled(&g);
    let result = sift(&requests, 2.0, false);
    for level in Granularity::ALL {
        let points = sweep(
            &requests,
            &parse_grid("2.0:2.0:0.1").unwrap(),
            level,
            2.0,
            false,
        )
        .unwrap();
        let l = result.level(level);
        assert_eq!(points.len(), 1);
        assert_eq!(points[0].mixed_entities, l.entity_count(Verdict::Mixed));
        assert_eq!(points[0].total_entities, l.entities.len());
    }
}

#[test]
fn random_scenarios_reach_every_level() {
    let (mut method_level, mut residual, mut diverging) = (0, 0, 0);
    for seed in 0..100 {
        let g = generate(&random_scenario(seed, 200), seed).unwrap();
        method_level += usize::from(g.expected.level(Granularity::Method).entered > 0);
        residual += usize::from(!g.expected.residual.is_empty());
        diverging += usize::from(g.expected_divergence.iter().any(|d| !d.points.is_empty()));
    }
    assert!(method_level >= 20, "{method_level}");
    assert!(residual >= 10, "{residual}");
    assert!(diverging >= 5, "{diverging}");
}
