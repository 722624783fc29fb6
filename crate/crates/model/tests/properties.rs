use alchemy_model::{lr_schedule, Checkpoint, ModelConfig, Scheduler, Transformer};
use proptest::prelude::*;

const PAD: u8 = 22;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        max_seq_len: 32,
        ..Default::default()
    }
}

fn scheduler() -> impl Strategy<Value = Scheduler> {
    prop_oneof![
        Just(Scheduler::None),
        (1e-6f64..1e-4).prop_map(|min_lr| Scheduler::Cosine { min_lr }),
        (1e-6f64..1e-4, 1u64..50).prop_map(|(min_lr, period)| Scheduler::CosineWithRestarts { min_lr, period }),
        (prop::collection::vec(1u64..200, 0..4), 0.1f64..0.9).prop_map(|(mut milestones, gamma)| {
            milestones.sort_unstable();
            milestones.dedup();
            Scheduler::MultiStep { milestones, gamma }
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn learning_rate_stays_in_range(s in scheduler(), step in 0u64..300, total in 1u64..300) {
        let base = 1e-3;
        let lr = lr_schedule(base, &s, step.min(total), total).unwrap();
        prop_assert!(lr.is_finite() && lr > 0.0 && lr <= base * (1.0 + 1e-12), "{lr}");
        if let Scheduler::Cosine { min_lr } | Scheduler::CosineWithRestarts { min_lr, .. } = s {
            prop_assert!(lr >= min_lr * (1.0 - 1e-12));
        }
    }

    #[test]
    fn predictions_ignore_left_padding(content in prop::collection::vec(0u8..22, 1..20), extra in 0usize..12, seed in 0u64..1000) {
        let m = Transformer::new(small(), seed).unwrap();
        let mut padded = vec![PAD; extra];
        padded.extend(&content);
        let a = m.final_logits(&content).unwrap();
        let b = m.final_logits(&padded).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..1000) {
        let m = Transformer::new(small(), seed).unwrap();
        let t = alchemy_model::Trainer::new(m, Default::default(), seed).unwrap();
        let ck = t.checkpoint("hash");
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.params, ck.params);
        prop_assert_eq!(back.header.epoch, ck.header.epoch);
        prop_assert_eq!(back.config_hash, ck.config_hash);
    }
}
