mod common;

use arbor_core::orchestrator::{resolve_conflict, ConflictPolicy, ConflictRule, Winner};
use arbor_core::tools::{KbStore, Registry};
use arbor_core::tree::{Derivation, RuleTrace, SymbolicVerdict};
use arbor_core::types::ToolQuery;
use common::fuzz::fuzz_episodes;
use common::rng;
use proptest::prelude::*;
use rand::Rng;
use serde_json::{json, Value};

#[test]
fn a_thousand_fuzzed_episodes_keep_the_belief_laws() {
    let (ran, verdict) = fuzz_episodes(1, 1000);
    assert_eq!(verdict, Ok(()), "after {ran} episodes");
}

#[test]
fn kb_store_serves_ten_thousand_entries() {
    let mut r = rng(9);
    let entries: serde_json::Map<String, Value> = (0..10_000)
        .map(|i| {
            let v = match i % 4 {
                0 => json!(r.gen::<u32>()),
                1 => json!(format!("text {i}")),
                2 => json!({"nested": [i, null]}),
                _ => Value::Null,
            };
            (format!("key{i}"), v)
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kb.json");
    std::fs::write(&path, serde_json::to_string(&entries).unwrap()).unwrap();

    let registry = Registry::with_builtins(KbStore::load(&path).unwrap());
    // read the file back without going through the store
    let source: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for i in 0..1_000 {
        let key = format!("key{}", r.gen_range(0..10_500));
        let res = registry.invoke(&ToolQuery {
            tool_name: "kb".into(),
            arguments: json!({"key": key}),
            query_id: format!("q{i}"),
        });
        let payload = res.payload().unwrap();
        match source.get(&key) {
            Some(v) => assert_eq!(payload, &json!({"found": true, "value": v})),
            None => assert_eq!(payload, &json!({"found": false, "value": null})),
        }
    }
}

#[test]
fn conflict_resolution_is_total_on_the_grid() {
    let policies = [
        ConflictPolicy::default(),
        ConflictPolicy::new(vec![ConflictRule::AgreementPasses, ConflictRule::LlmFallback]).unwrap(),
        ConflictPolicy::new(vec![
            ConflictRule::LlmWinsIfTreeUndetermined,
            ConflictRule::TreeWinsIfConfidenceGe { theta: 0.3 },
            ConflictRule::TreeFallback,
        ])
        .unwrap(),
    ];
    for policy in &policies {
        for tree in ["A", "B"] {
            for llm in ["A", "B"] {
                for step in 0..=10 {
                    let v = SymbolicVerdict {
                        outcome: tree.into(),
                        confidence: step as f64 / 10.0,
                        derivation: Derivation::Tree(RuleTrace {
                            steps: vec![],
                            leaf_id: 0,
                        }),
                    };
                    let res = resolve_conflict(&v, llm, policy);
                    assert!(res.answer == tree || res.answer == llm);
                    if tree == llm {
                        assert_eq!(res.answer, tree);
                    }
                    if res.winner == Winner::Agreement {
                        assert_eq!(tree, llm);
                    }
                }
            }
        }
    }
}

#[test]
fn tree_at_point_six_falls_back_to_the_tree() {
    let v = SymbolicVerdict {
        outcome: "A".into(),
        confidence: 0.6,
        derivation: Derivation::Tree(RuleTrace {
            steps: vec![],
            leaf_id: 0,
        }),
    };
    let res = resolve_conflict(&v, "B", &ConflictPolicy::default());
    assert_eq!(res.answer, "A");
    assert_eq!(res.rule, "tree_fallback");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fuzzed_episode_batches_hold(seed in any::<u64>()) {
        let (_, verdict) = fuzz_episodes(seed, 10);
        prop_assert_eq!(verdict, Ok(()));
    }
}
