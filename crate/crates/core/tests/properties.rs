use std::collections::BTreeSet;

use alchemy_core::codec::{encode_episode, PAD};
use alchemy_core::metrics::{classify, factorize};
use alchemy_core::task::{build_episodes, split_chemistries, SupportMode, TaskSpec};
use alchemy_core::{decode_prediction, generate_chemistry, Vertex};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = TaskSpec> {
    prop_oneof![
        Just(TaskSpec::withheld_pair()),
        (2usize..=5).prop_map(TaskSpec::composition),
        (2usize..=5, prop_oneof![Just(SupportMode::Exhaustive), Just(SupportMode::NoBacktrack)]).prop_map(|(k, mode)| {
            TaskSpec {
                support_mode: mode,
                max_support: 48,
                ..TaskSpec::decomposition(k)
            }
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_chemistries_are_valid(seed in any::<u64>()) {
        let c = generate_chemistry(seed).unwrap();
        let report = c.validate();
        prop_assert!(report.passed, "{:?}", report.violations);
        prop_assert_eq!(c, generate_chemistry(seed).unwrap());
    }

    #[test]
    fn reachable_sets_have_parity_sizes(seed in any::<u64>(), v in 0u8..8, k in 1usize..=5) {
        let c = generate_chemistry(seed).unwrap();
        let r = c.reachable_set(Vertex::new(v).unwrap(), k).unwrap();
        prop_assert_eq!(r.len(), [3, 3, 4, 3, 4][k - 1]);
        prop_assert!(!r.contains(&Vertex::new(v).unwrap()));
    }

    #[test]
    fn episodes_check_and_encode(seed in any::<u64>(), spec in spec_strategy()) {
        let c = generate_chemistry(seed).unwrap();
        let eps = build_episodes(&c, 0, &spec, seed ^ 1).unwrap();
        prop_assert!(!eps.is_empty());
        for e in &eps {
            prop_assert!(e.check(&c).is_empty(), "{:?}", e.check(&c));
            let enc = encode_episode(e, 2048).unwrap();
            prop_assert_eq!(enc.tokens.len(), 2048);
            prop_assert!(enc.tokens[..2048 - enc.length].iter().all(|&t| t == PAD));
            prop_assert!(enc.tokens[2048 - enc.length..].iter().all(|&t| t != PAD));
            prop_assert_eq!(decode_prediction(enc.label as usize).unwrap(), e.target);
        }
    }

    #[test]
    fn event_flags_nest_for_any_prediction(seed in any::<u64>(), spec in spec_strategy(), preds in prop::collection::vec(0usize..108, 1..40)) {
        let c = generate_chemistry(seed).unwrap();
        let eps = build_episodes(&c, 0, &spec, seed).unwrap();
        let records: Vec<_> = preds
            .iter()
            .enumerate()
            .map(|(i, &p)| classify(&c, &eps[i % eps.len()], i, p).unwrap())
            .collect();
        prop_assert!(records.iter().all(|r| r.nesting_holds()));
        let m = factorize(&records).unwrap();
        prop_assert!(m.chain_rule_exact());
        let correct = records.iter().filter(|r| r.c).count() as u64;
        prop_assert_eq!(m.accuracy.num, correct);
    }

    #[test]
    fn splits_partition_the_pool(n in 2u32..300, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let pool: Vec<u32> = (0..n).collect();
        let s = split_chemistries(&pool, ratio, seed).unwrap();
        let train: BTreeSet<u32> = s.train_chemistries.iter().copied().collect();
        let val: BTreeSet<u32> = s.val_chemistries.iter().copied().collect();
        prop_assert!(train.is_disjoint(&val));
        prop_assert_eq!(train.len() + val.len(), n as usize);
        prop_assert!(!train.is_empty() && !val.is_empty());
    }
}
