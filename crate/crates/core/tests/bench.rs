use arbor_core::bench::*;
use arbor_core::tools::calc_eval;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn bits(t: &TaskInstance, k: usize) -> Vec<bool> {
    (0..k).map(|i| t.input.fields[&format!("p{i}")].as_bool().unwrap()).collect()
}

// recomputed from the hash definition, not through the crate
fn coin(seed: u64, id: &str) -> f64 {
    let h = Sha256::digest(format!("{seed}:{id}"));
    u64::from_be_bytes(h[..8].try_into().unwrap()) as f64 / 2f64.powi(64)
}

/// Reads a word problem back into a number without touching the expression.
fn solve_word_problem(text: &str) -> f64 {
    let body = text.strip_prefix("A has ").unwrap().split(". How many").next().unwrap();
    let (start, rest) = body.split_once(" apples and ").unwrap();
    let mut v: f64 = start.parse().unwrap();
    for clause in rest.split(", then ") {
        let n: f64 = clause.rsplit(' ').find_map(|w| w.parse().ok()).unwrap();
        if clause.starts_with("gets") {
            v += n;
        } else if clause.starts_with("gives away") {
            v -= n;
        } else {
            assert!(clause.starts_with("multiplies"), "{clause}");
            v *= n;
        }
    }
    v
}

#[test]
fn error_injection_rate_sits_within_three_sigma() {
    let suite = gen_entailment_suite(1000, 3, 6, 11).unwrap();
    let wrong = suite.tasks.iter().filter(|t| injects_error(11, &t.id(), 0.3)).count() as f64;
    let sigma = (1000.0f64 * 0.3 * 0.7).sqrt();
    assert!((wrong - 300.0).abs() <= 3.0 * sigma, "{wrong} injected errors");
    for t in &suite.tasks {
        assert_eq!(error_draw(11, &t.id()), coin(11, &t.id()));
    }
}

#[test]
fn xor_suite_labels_follow_parity_and_cover_all_four_cells() {
    let suite = gen_entailment_suite_for(Concept::xor(0, 1), 200, 4, 5).unwrap();
    let mut cells = std::collections::BTreeSet::new();
    for t in &suite.tasks {
        let x = bits(t, 4);
        let want = if x[0] != x[1] { YES } else { NO };
        assert_eq!(t.ground_truth, want);
        assert!(suite.verify(t));
        cells.insert((x[0], x[1]));
    }
    assert_eq!(cells.len(), 4);
    let tree = oracle_tree(&suite).unwrap();
    assert_eq!(tree.depth(), 2);
}

#[test]
fn random_concepts_have_the_requested_depth_and_exact_oracles() {
    for seed in 0..20 {
        let suite = gen_entailment_suite(50, 3, 6, seed).unwrap();
        assert_eq!(suite.concept.depth(), 3);
        assert!(suite.tasks.iter().all(|t| suite.verify(t)));
        oracle_tree(&suite).unwrap();
    }
}

#[test]
fn arithmetic_truth_matches_the_word_problem() {
    let tasks = gen_arithmetic_suite(200, 3, (1, 20), 9).unwrap();
    for t in &tasks {
        let text = t.input.text.as_deref().unwrap();
        let want = solve_word_problem(text);
        assert_eq!(t.ground_truth, format_number(want), "{text}");
        assert_eq!(calc_eval(t.expression.as_deref().unwrap()).unwrap(), want);
    }
    assert!(gen_arithmetic_suite(1, 0, (1, 20), 0).is_err());
    assert!(gen_arithmetic_suite(1, 3, (5, 1), 0).is_err());
}

#[test]
fn small_ablation_matches_the_injected_errors() {
    let suite = gen_entailment_suite(120, 3, 6, 4).unwrap();
    let setup = AblationSetup::entailment(&suite, 0.3, 4).unwrap();
    let run = run_ablation(&setup, &Arm::ALL).unwrap();
    let injected = suite.tasks.iter().filter(|t| coin(4, &t.id()) < 0.3).count();
    let r = &run.report;
    assert_eq!(r.arm(Arm::LlmOnly).unwrap().correct, 120 - injected);
    assert_eq!(r.accuracy(Arm::Full), Some(1.0));
    assert!(r.accuracy(Arm::LlmPlusTrace).unwrap() >= r.accuracy(Arm::LlmOnly).unwrap());
    assert!(r.arms.iter().all(|m| m.episode_errors == 0));
    for a in &run.audit {
        let llm = &a.answers.iter().find(|(arm, _)| *arm == Arm::LlmOnly).unwrap().1;
        assert_eq!(llm.as_deref() != Some(a.truth.as_str()), a.injected_error, "{}", a.id);
    }
}

#[test]
fn arithmetic_ablation_recovers_with_the_calculator() {
    let tasks = gen_arithmetic_suite(40, 3, (1, 20), 2).unwrap();
    let setup = AblationSetup::arithmetic(tasks, 0.3, 2).unwrap();
    assert_eq!(setup.arms(), vec![Arm::LlmOnly, Arm::Full]);
    let run = run_ablation(&setup, &setup.arms()).unwrap();
    assert_eq!(run.report.accuracy(Arm::Full), Some(1.0));
    assert!(run.report.accuracy(Arm::LlmOnly).unwrap() < 1.0);
    assert!(run.report.arm(Arm::Full).unwrap().mean_tool_calls >= 1.0);
}

#[test]
fn bench_is_deterministic_and_pools_by_instance_count() {
    let spec = BenchSpec {
        seeds: vec![1, 2],
        n: 60,
        arithmetic_n: 10,
        ..BenchSpec::default()
    };
    let a = run_bench(&spec).unwrap();
    let b = run_bench(&spec).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let entail = &a.pooled[0];
    assert_eq!(entail.instance_count, 120);
    let correct: usize = a.per_seed[..2].iter().map(|r| r.arm(Arm::LlmOnly).unwrap().correct).sum();
    assert_eq!(entail.arm(Arm::LlmOnly).unwrap().correct, correct);
    let table = render_table(&a.pooled);
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().nth(3).unwrap().contains("llm_plus_trace"));
}

#[test]
fn task_files_round_trip() {
    let mut tasks = gen_entailment_suite(5, 2, 3, 0).unwrap().tasks;
    tasks.extend(gen_arithmetic_suite(5, 2, (1, 9), 0).unwrap());
    let text = tasks_to_jsonl(&tasks);
    assert_eq!(text.lines().count(), 10);
    assert_eq!(tasks_from_jsonl(&text).unwrap(), tasks);
    let v: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(v["family"], "entailment");
}

#[test]
fn wrong_answers_differ_from_the_truth() {
    for t in gen_entailment_suite(20, 2, 3, 1).unwrap().tasks {
        assert_ne!(wrong_answer(&t), t.ground_truth);
    }
    for t in gen_arithmetic_suite(20, 2, (1, 9), 1).unwrap() {
        let v: f64 = t.ground_truth.parse().unwrap();
        assert_eq!(wrong_answer(&t), format_number(v + 1.0));
    }
}
