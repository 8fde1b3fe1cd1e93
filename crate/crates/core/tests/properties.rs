use proptest::prelude::*;
use said::datagen::{collect_dataset, normalizer_fit, CollectConfig, PolicyTag, Tier};
use said::envs::{augment, ActionHistory, DelayBuffer, DelayedEnv, Env, EnvId};
use said::stats::{mann_whitney_u, Alternative};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn buffer_emits_input_delayed(delay in 0usize..10, len in 1usize..40) {
        let s0 = vec![-1.0];
        let mut buf = DelayBuffer::new(delay, &s0);
        for t in 0..len {
            let out = buf.push(vec![t as f64]);
            let expect = if t + 1 > delay { (t - delay) as f64 } else { -1.0 };
            prop_assert_eq!(out, vec![expect]);
        }
    }

    #[test]
    fn compensation_recovers_true_state(delay in 0usize..9, seed in 0u64..1000, actions in prop::collection::vec(-1.5f64..1.5, 40)) {
        let env = Env::new(EnvId::PointMass2d);
        let mut denv = DelayedEnv::reset(env.clone(), delay, seed);
        let mut hist = ActionHistory::new(delay, 2);
        for a in actions.chunks(2) {
            if denv.done() {
                break;
            }
            denv.step(a).unwrap();
            hist.push(a);
            let est = env.compensate(denv.observation(), &hist.executed());
            for (x, y) in est.iter().zip(&denv.true_state().s) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn augmented_length(delay in 0usize..12, extra in 1usize..4) {
        let hist: Vec<Vec<f64>> = (0..delay + extra).map(|i| vec![1.0 / (i + 1) as f64, 0.0]).collect();
        let aug = augment(&[0.0; 4], &hist[..delay], delay).unwrap();
        prop_assert_eq!(aug.to_vec().len(), 4 + 2 * delay);
        prop_assert!(augment(&[0.0; 4], &hist, delay).is_err());
    }

    #[test]
    fn normalizer_roundtrip(seed in 0u64..200) {
        let eps = collect_dataset(&CollectConfig {
            env_id: EnvId::PointMass2d,
            horizon: 30,
            delay: 0,
            policy: PolicyTag::Random,
            tier: Tier::Replay,
            n_episodes: 3,
            seed,
        }).unwrap();
        let norm = normalizer_fit(&eps).unwrap();
        for s in eps.iter().flat_map(|e| &e.states) {
            let back = norm.denormalize_state(&norm.normalize_state(s));
            for (x, y) in back.iter().zip(s) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mwu_sides_are_complementary(a in prop::collection::vec(-5i32..5, 1..7), b in prop::collection::vec(-5i32..5, 1..7)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let ab = mann_whitney_u(&a, &b, Alternative::Greater).unwrap();
        let ba = mann_whitney_u(&b, &a, Alternative::Less).unwrap();
        prop_assert!((ab.u + mann_whitney_u(&b, &a, Alternative::Greater).unwrap().u - (a.len() * b.len()) as f64).abs() < 1e-12);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }
}
