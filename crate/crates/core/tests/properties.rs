use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use erl_core::approximator::NetworkSpec;
use erl_core::envsim::{Origin, Transition};
use erl_core::evostrat::{recombination_weights, PopulationState, Strategy as EsStrategy};
use erl_core::harness::derive_seed;
use erl_core::metrics::{smooth, t_half_width};
use erl_core::propcheck::{visitation, MdpInstance, PolicyTable};
use erl_core::replay::{origin_counts, target_share, DualReplayStore, ReplayStore};

fn transition(origin: Origin, tag: f64) -> Transition {
    Transition {
        state: vec![tag],
        action: vec![0.0],
        reward: 0.0,
        next_state: vec![tag],
        done: false,
        origin,
    }
}

fn shape() -> impl Strategy<Value = (usize, usize, Vec<usize>)> {
    (1usize..6, 1usize..4, prop::collection::vec(1usize..10, 0..3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_roundtrip((s, a, hidden) in shape(), seed in any::<u64>()) {
        let spec = NetworkSpec::actor(s, a, &hidden);
        let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        let layers = spec.unflatten(&params).unwrap();
        prop_assert_eq!(spec.flatten(&layers).unwrap(), params);
    }

    #[test]
    fn actor_output_is_bounded(
        (s, a, hidden) in shape(),
        seed in any::<u64>(),
        scale in 0.1f64..100.0,
    ) {
        let spec = NetworkSpec::actor(s, a, &hidden);
        let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        let input: Vec<f64> = (0..s).map(|i| scale * (i as f64 - 2.0)).collect();
        for y in spec.forward(&params, &input).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn replay_keeps_newest_in_order(capacity in 1usize..50, pushes in 0usize..200) {
        let mut store = ReplayStore::new(capacity, 1, 1).unwrap();
        for i in 0..pushes {
            store.push(transition(Origin::Target, i as f64)).unwrap();
        }
        prop_assert_eq!(store.len(), pushes.min(capacity));
        let seqs: Vec<u64> = store.entries().map(|e| e.seq).collect();
        let first = pushes.saturating_sub(capacity) as u64;
        prop_assert_eq!(seqs, (first..pushes as u64).collect::<Vec<_>>());
    }

    #[test]
    fn mixed_batches_have_exact_counts(m in 0.0f64..=1.0, batch in 1usize..300, seed in any::<u64>()) {
        let mut dual = DualReplayStore::new(100, 1, 1, m).unwrap();
        for i in 0..20 {
            dual.push(transition(Origin::Target, i as f64)).unwrap();
            dual.push(transition(Origin::Population(i % 3), i as f64)).unwrap();
        }
        let rows = dual.sample_mixed(batch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (target, population) = origin_counts(rows.iter().copied());
        prop_assert_eq!(target, target_share(m, batch));
        prop_assert_eq!(target + population, batch);
    }

    #[test]
    fn weights_are_normalized_and_decreasing(k in 1usize..200) {
        let w = recombination_weights(k).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[0] > p[1]));
        prop_assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn individuals_reconstruct_from_noise(
        mean in prop::collection::vec(-5.0f64..5.0, 1..20),
        sigma in 0.001f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut pop = PopulationState::new(mean.into(), sigma, 4, 2, EsStrategy::Normal).unwrap();
        let individuals = pop.sample_population(&mut ChaCha8Rng::seed_from_u64(seed));
        for (theta, eps) in individuals.iter().zip(pop.noises()) {
            prop_assert_eq!(&pop.individual(eps), theta);
        }
    }

    #[test]
    fn interval_brackets_the_mean(values in prop::collection::vec(-1e3f64..1e3, 2..30)) {
        let hw = t_half_width(&values, 0.68).unwrap();
        prop_assert!(hw >= 0.0 && hw.is_finite());
    }

    #[test]
    fn smoothing_keeps_length_and_range(
        series in prop::collection::vec(-1e3f64..1e3, 0..60),
        window in 1usize..12,
    ) {
        let out = smooth(&series, window);
        prop_assert_eq!(out.len(), series.len());
        let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for y in out {
            prop_assert!(y >= lo - 1e-9 && y <= hi + 1e-9);
        }
    }

    #[test]
    fn visitation_is_a_distribution(
        n in 1usize..8,
        m in 1usize..5,
        gamma in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = MdpInstance::random(&mut rng, n, m, gamma);
        let policy: PolicyTable = (0..n).map(|s| vec![(s % 3) as f64 / 2.0 - 0.5]).collect();
        let d = visitation(&mdp, &policy).unwrap();
        prop_assert!(d.iter().all(|&p| p >= -1e-12));
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn seed_streams_do_not_collide(run in any::<u64>(), iteration in 0u64..1000, index in 0u64..64) {
        let seeds: Vec<u64> = (1..=6).map(|stream| derive_seed(run, stream, iteration, index)).collect();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                prop_assert_ne!(seeds[i], seeds[j]);
            }
        }
        prop_assert_eq!(derive_seed(run, 2, iteration, index), seeds[1]);
    }
}
