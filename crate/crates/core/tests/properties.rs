use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chanfuse::analysis::{aggregate, trend_fit};
use chanfuse::data::{generate, Dataset, MotionClass, SynthMotionSpec};
use chanfuse::gating::{block_cost, cost_terms, gumbel_softmax_with_noise, BlockTrace, PolicyTrace};
use chanfuse::model::flops_matched_dist;
use chanfuse::train::{lr_at, TrainConfig};

fn trace_strategy() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
    (1usize..=5, 1usize..=6).prop_flat_map(|(t, c)| (Just(t), Just(c), prop::collection::vec(0u8..3, t * c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn block_cost_lies_between_zero_and_all_keep((t, c, d) in trace_strategy(), m_x in 1.0f64..1e6, m_y in 1.0f64..1e6) {
        let cost = block_cost(&d, t, c, m_x, m_y).unwrap();
        prop_assert!(cost >= 0.0);
        prop_assert!(cost <= t as f64 * (m_x + m_y) * (1.0 + 1e-12));
        let terms = cost_terms(&d, t, c).unwrap();
        prop_assert!(terms.upstream <= (t * c) as u64 && terms.downstream <= (t * c) as u64);
    }

    #[test]
    fn more_keeps_never_cost_less((t, c, mut d) in trace_strategy(), pick in any::<prop::sample::Index>()) {
        let before = block_cost(&d, t, c, 3.0, 5.0).unwrap();
        let i = pick.index(d.len());
        if d[i] == 2 {
            d[i] = 0;
            prop_assert!(block_cost(&d, t, c, 3.0, 5.0).unwrap() >= before);
        }
    }

    #[test]
    fn gumbel_hard_sample_is_the_argmax_of_perturbed_logits(
        q in prop::collection::vec(-5.0f64..5.0, 3),
        g in prop::collection::vec(-3.0f64..3.0, 3),
        tau in 0.05f64..10.0,
    ) {
        let s = gumbel_softmax_with_noise(&q, &g, tau).unwrap();
        let z: Vec<f64> = q.iter().zip(&g).map(|(a, b)| a + b).collect();
        let best = (0..3).max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a))).unwrap();
        prop_assert_eq!(s.hard[0].iter().sum::<f64>(), 1.0);
        prop_assert_eq!(s.hard[0][best], 1.0);
        prop_assert!((s.soft[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stats_fractions_are_distributions(
        clips in 1usize..4,
        blocks in prop::collection::vec((1usize..4, 1usize..5), 1..4),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 3;
        let trace = PolicyTrace {
            blocks: blocks
                .iter()
                .enumerate()
                .map(|(id, &(_, c))| {
                    let d = (0..clips * frames * c).map(|_| rng.random_range(0..3u8)).collect();
                    BlockTrace::new(id, clips, frames, c, d).unwrap()
                })
                .collect(),
        };
        let stats = aggregate([&trace]).unwrap();
        prop_assert!((stats.overall.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for b in &stats.per_block {
            prop_assert!((b.fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for j in 0..3 {
                prop_assert!(b.instance[j] <= b.fractions[j]);
            }
        }
    }

    #[test]
    fn trend_fit_recovers_planted_polynomials(coeffs in prop::collection::vec(-1.0f64..1.0, 4), n in 6usize..16) {
        let series: Vec<f64> = (0..n)
            .map(|i| coeffs.iter().rev().fold(0.0, |acc, c| acc * i as f64 + c))
            .collect();
        let fit = trend_fit(&series, 3).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&coeffs) {
            prop_assert!((a - b).abs() < 1e-8, "{:?} vs {:?}", fit.coefficients, coeffs);
        }
    }

    #[test]
    fn learning_rate_never_grows(epoch in 0usize..100, decays in prop::collection::btree_set(0usize..100, 0..4)) {
        let cfg = TrainConfig { lr_decay_epochs: decays.into_iter().collect(), ..TrainConfig::default() };
        prop_assert!(lr_at(epoch + 1, &cfg) <= lr_at(epoch, &cfg));
        prop_assert!(lr_at(epoch, &cfg) <= cfg.lr);
    }

    #[test]
    fn matched_random_dist_hits_its_target(target in 0.05f64..0.95, keep in 0.0f64..1.0, reuse in 0.0f64..1.0) {
        let skip = (1.0 - keep).max(0.0) * (1.0 - reuse);
        let r = (1.0 - keep) * reuse;
        let sum = keep + r + skip;
        let fractions = [keep / sum, r / sum, skip / sum];
        let blocks = [(100.0, 200.0), (50.0, 80.0)];
        let dist = flops_matched_dist(fractions, target, 8, &blocks).unwrap();
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let util = chanfuse::model::expected_random_util(&dist, 8, &blocks);
        prop_assert!((util - target).abs() < 1e-6, "util {} target {}", util, target);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn datasets_round_trip_through_bytes(n in 1usize..6, seed in any::<u64>(), frames in 1usize..4) {
        let spec = SynthMotionSpec {
            n_samples: n,
            frames,
            height: 10,
            width: 12,
            shape_size: 3.0,
            classes: vec![MotionClass::Grow, MotionClass::Shrink, MotionClass::RotateCcw],
            seed,
            ..SynthMotionSpec::default()
        };
        let ds = generate(&spec).unwrap();
        prop_assert_eq!(Dataset::from_bytes(&ds.to_bytes()).unwrap(), ds.clone());
        prop_assert_eq!(generate(&spec).unwrap(), ds);
    }
}
