mod common;

use std::sync::Arc;

use nalgebra::DMatrix;
use prefopt::datagen::{sample_tuples, PairMode, PreferenceTuple};
use prefopt::losses::{
    self, EvaluationMode, JensenShannonLink, LogLink, LogisticShape, LossKind, LossSpec, SquaredShape,
};
use prefopt::optim::clip_gradient;
use prefopt::oracle::{
    bt_preference, bt_policy_from_preferences, gauge_fix, preference_table, reward_from_policy,
    rlhf_closed_form, total_variation,
};
use prefopt::policy::{softmax, PolicyModel};
use prefopt::BanditInstance;
use proptest::prelude::*;

fn distribution(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|w| {
        let t: f64 = w.iter().sum();
        w.into_iter().map(|v| v / t).collect()
    })
}

fn distribution_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=6).prop_flat_map(|k| (distribution(k..=k), distribution(k..=k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn preferences_are_complementary(pi in distribution(2..=8), i in 0usize..8, j in 0usize..8) {
        let (i, j) = (i % pi.len(), j % pi.len());
        let a = bt_preference(&pi, i, j).unwrap();
        let b = bt_preference(&pi, j, i).unwrap();
        prop_assert_eq!(a + b, 1.0);
        prop_assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn bt_policy_round_trip(pi in distribution(2..=8)) {
        let back = bt_policy_from_preferences(&preference_table(&pi).unwrap()).unwrap();
        prop_assert!(total_variation(&back.policy, &pi) < 1e-12);
    }

    #[test]
    fn closed_form_inverts_to_gauge_fixed_reward(
        pi_ref in distribution(2..=6),
        raw in prop::collection::vec(-4.0f64..4.0, 6),
        lambda in 0.05f64..20.0,
    ) {
        let r: Vec<f64> = raw[..pi_ref.len()].to_vec();
        let pi = rlhf_closed_form(&pi_ref, &r, lambda).unwrap();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let back = reward_from_policy(&pi, &pi_ref, lambda).unwrap();
        for (a, b) in back.iter().zip(gauge_fix(&r)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!(back.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn total_variation_is_a_bounded_metric((p, q) in distribution_pair()) {
        let d = total_variation(&p, &q);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, total_variation(&q, &p));
        prop_assert_eq!(total_variation(&p, &p), 0.0);
    }

    #[test]
    fn softmax_normalizes(logits in prop::collection::vec(-50.0f64..50.0, 1..10)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn clipping_never_grows_and_keeps_direction(
        g in prop::collection::vec(-100.0f64..100.0, 6),
        max in 0.1f64..50.0,
    ) {
        let g = DMatrix::from_row_slice(2, 3, &g);
        let c = clip_gradient(&g, max).unwrap();
        prop_assert!(c.norm() <= g.norm() + 1e-12);
        prop_assert!(c.norm() <= max + 1e-9);
        if g.norm() > 0.0 {
            let cos = g.dot(&c) / (g.norm() * c.norm());
            prop_assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_finite_for_positive_policies(seed in 0u64..10_000, scale in 0.1f64..8.0) {
        let (inst, _) = common::random_case(seed);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let model = PolicyModel::new(common::random_theta(&mut rng, &inst, scale), &inst).unwrap();
        let data = sample_tuples(&inst, 20, PairMode::UniformPairs, seed).unwrap();
        for kind in common::ALL_KINDS {
            let spec = common::spec_for(&mut rng, kind);
            for mode in [EvaluationMode::Population(PairMode::RefProduct), EvaluationMode::sampled(data.tuples())] {
                let (v, g) = losses::loss_and_gradient(&spec, &model, &inst, &mode).unwrap();
                prop_assert!(v.is_finite(), "{} value {}", kind, v);
                prop_assert!(g.iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn qpo_argument_vanishes_at_reference(seed in 0u64..10_000) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let inst = BanditInstance::random(&mut rng, 1, 1, 6).unwrap();
        let model = PolicyModel::reference_init(&inst).unwrap();
        let data = sample_tuples(&inst, 30, PairMode::UniformPairs, seed).unwrap();
        for kind in [LossKind::Dpo, LossKind::Ipo, LossKind::FdpoJs, LossKind::QpoCustom] {
            let spec = common::spec_for(&mut rng, kind);
            let log_ref: Vec<f64> = inst.prompts()[0].pi_ref.iter().map(|p| p.ln()).collect();
            for t in data.tuples() {
                let exact = spec.qpo_argument_from_log_policy(&log_ref, &inst.prompts()[0].pi_ref, t.winner, t.loser).unwrap();
                prop_assert_eq!(exact, 0.0);
                // through theta the softmax round trip costs an ulp or so
                prop_assert!(spec.qpo_argument(&model, &inst, t).unwrap().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn presets_equal_their_shape_and_link_forms(seed in 0u64..10_000, lambda in 0.05f64..5.0) {
        let (inst, model) = common::random_case(seed);
        let data = sample_tuples(&inst, 25, PairMode::RefProduct, seed).unwrap();
        let forms: [(LossKind, LossSpec); 3] = [
            (LossKind::Dpo, LossSpec::qpo_custom(Arc::new(LogisticShape), Arc::new(LogLink), lambda).unwrap()),
            (LossKind::Ipo, LossSpec::qpo_custom(Arc::new(SquaredShape), Arc::new(LogLink), lambda).unwrap()),
            (LossKind::FdpoJs, LossSpec::qpo_custom(Arc::new(LogisticShape), Arc::new(JensenShannonLink), lambda).unwrap()),
        ];
        for (kind, custom) in forms {
            let preset = losses::make_loss_spec(kind, lambda).unwrap();
            for mode in [EvaluationMode::Population(PairMode::UniformPairs), EvaluationMode::sampled(data.tuples())] {
                let a = losses::evaluate_loss(&preset, &model, &inst, &mode).unwrap();
                let b = losses::evaluate_loss(&custom, &model, &inst, &mode).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{}: {} vs {}", kind, a, b);
            }
        }
    }

    #[test]
    fn jensen_shannon_loss_vanishes_as_losers_starve(
        (ref_a, ref_b) in (distribution(2..=2), distribution(2..=2)),
        lambda in 0.1f64..10.0,
    ) {
        prop_assume!(ref_a != ref_b);
        let spec = losses::make_loss_spec(LossKind::FdpoJs, lambda).unwrap();
        let t = [PreferenceTuple { prompt: 0, winner: 0, loser: 1 }];
        let mut finals = Vec::new();
        for r in [ref_a, ref_b] {
            let inst = BanditInstance::single(vec![0.5, 0.5], r).unwrap();
            let path: Vec<f64> = (0..50)
                .map(|i| {
                    let eps = 10f64.powf(-0.5 - 199.5 * i as f64 / 49.0);
                    let m = PolicyModel::new(DMatrix::from_row_slice(1, 2, &[0.0, eps.ln() - (1.0 - eps).ln()]), &inst).unwrap();
                    losses::evaluate_loss(&spec, &m, &inst, &EvaluationMode::sampled(&t)).unwrap()
                })
                .collect();
            for w in path.windows(2) {
                prop_assert!(w[1] <= w[0], "{:?}", path);
            }
            finals.push(*path.last().unwrap());
        }
        prop_assert!(finals.iter().all(|v| *v < 1e-6), "{:?}", finals);
    }
}
