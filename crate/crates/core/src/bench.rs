//! Synthetic benchmark suites and the three-arm ablation runner.
//!
//! Entailment tasks ask whether a boolean concept holds for an assignment;
//! the oracle tree is trained on the concept's full truth table, so it is
//! exact. Arithmetic tasks are chained word problems whose ground truth comes
//! from the calculator.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::{Backend, BackendConfig, Pattern, ScriptRule, ScriptedConfig};
use crate::orchestrator::{
    default_rules, run_episode_with, ConflictPolicy, ConflictRule, Condition, DispatchPolicy, DispatchRule, EpisodeEnv,
    EpisodeSettings, EpisodeTranscript, Step,
};
use crate::perception::RawRecord;
use crate::policy::{answers_match, CurriculumStage, PolicyError, StageTasks, TaskGenerator, TrainingEpisode};
use crate::tools::{calc_eval, KbStore, Registry};
use crate::tree::{train_cart, Dataset, DecisionTree, Model, TrainParams};
use crate::types::{FeatureDef, FeatureValue, LabelDef, Schema, StructuredInput};

pub const MAX_FEATURES: usize = 12;
pub const NO: &str = "no";
pub const YES: &str = "yes";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("invalid suite parameters: {0}")]
    InvalidParams(String),
    #[error("oracle tree is not exact on the training split (accuracy {0})")]
    InexactOracle(f64),
    #[error("{0}")]
    Setup(String),
}

impl BenchError {
    pub fn kind(&self) -> &'static str {
        match self {
            BenchError::InvalidParams(_) => "invalid_params",
            BenchError::InexactOracle(_) => "inexact_oracle",
            BenchError::Setup(_) => "setup_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Entailment,
    Arithmetic,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Entailment => "entailment",
            Family::Arithmetic => "arithmetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Difficulty {
    pub depth: Option<usize>,
    pub k: Option<usize>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub input: RawRecord,
    pub ground_truth: String,
    pub family: Family,
    pub difficulty: Difficulty,
    pub seed: u64,
    /// The generating expression, for arithmetic tasks.
    pub expression: Option<String>,
}

impl TaskInstance {
    pub fn id(&self) -> String {
        self.input.source_id()
    }
}

/// A boolean concept as a decision tree over boolean features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Concept {
    Leaf {
        value: bool,
    },
    Split {
        feature: usize,
        if_true: Box<Concept>,
        if_false: Box<Concept>,
    },
}

impl Concept {
    pub fn eval(&self, x: &[bool]) -> bool {
        match self {
            Concept::Leaf { value } => *value,
            Concept::Split {
                feature,
                if_true,
                if_false,
            } => {
                if x[*feature] {
                    if_true.eval(x)
                } else {
                    if_false.eval(x)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Concept::Leaf { .. } => 0,
            Concept::Split { if_true, if_false, .. } => 1 + if_true.depth().max(if_false.depth()),
        }
    }

    /// `x_a XOR x_b`.
    pub fn xor(a: usize, b: usize) -> Self {
        let leaf = |value| Box::new(Concept::Leaf { value });
        let inner = |flip: bool| {
            Box::new(Concept::Split {
                feature: b,
                if_true: leaf(!flip),
                if_false: leaf(flip),
            })
        };
        Concept::Split {
            feature: a,
            if_true: inner(true),
            if_false: inner(false),
        }
    }

    /// A full depth-`depth` tree; no feature repeats along a path.
    pub fn random(depth: usize, k: usize, rng: &mut impl Rng) -> Self {
        fn grow(depth: usize, free: &[usize], rng: &mut impl Rng) -> Concept {
            if depth == 0 || free.is_empty() {
                return Concept::Leaf { value: rng.gen() };
            }
            let feature = free[rng.gen_range(0..free.len())];
            let rest: Vec<usize> = free.iter().copied().filter(|&f| f != feature).collect();
            Concept::Split {
                feature,
                if_true: Box::new(grow(depth - 1, &rest, rng)),
                if_false: Box::new(grow(depth - 1, &rest, rng)),
            }
        }
        grow(depth, &(0..k).collect::<Vec<_>>(), rng)
    }
}

fn label(b: bool) -> &'static str {
    if b {
        YES
    } else {
        NO
    }
}

pub fn entailment_schema(k: usize) -> Schema {
    Schema::new(
        (0..k).map(|i| FeatureDef::boolean(format!("p{i}"))).collect(),
        LabelDef {
            name: "entailed".into(),
            vocabulary: vec![NO.into(), YES.into()],
        },
    )
    .expect("boolean features with distinct names form a valid schema")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentSuite {
    pub concept: Concept,
    pub k: usize,
    pub depth: usize,
    pub seed: u64,
    pub tasks: Vec<TaskInstance>,
}

impl EntailmentSuite {
    pub fn schema(&self) -> Schema {
        entailment_schema(self.k)
    }

    /// The clean training split: the concept's full truth table.
    pub fn training_dataset(&self) -> Dataset {
        let schema = self.schema();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for bits in 0..(1u32 << self.k) {
            let x: Vec<bool> = (0..self.k).map(|i| bits >> i & 1 == 1).collect();
            labels.push(label(self.concept.eval(&x)));
            rows.push(StructuredInput::new(
                x.iter().map(|&b| FeatureValue::Boolean(b)).collect(),
                format!("tt{bits}"),
            ));
        }
        Dataset::new(schema, rows, &labels).expect("truth table rows match the schema")
    }

    /// Ground truth recomputed from the concept.
    pub fn verify(&self, task: &TaskInstance) -> bool {
        let x: Option<Vec<bool>> = (0..self.k)
            .map(|i| task.input.fields.get(&format!("p{i}")).and_then(Value::as_bool))
            .collect();
        x.is_some_and(|x| label(self.concept.eval(&x)) == task.ground_truth)
    }
}

fn check_entailment(depth: usize, k: usize) -> Result<(), BenchError> {
    if depth > k || k > MAX_FEATURES || k == 0 {
        return Err(BenchError::InvalidParams(format!(
            "need depth ≤ k ≤ {MAX_FEATURES} and k ≥ 1, got depth {depth}, k {k}"
        )));
    }
    Ok(())
}

pub fn gen_entailment_suite(n: usize, depth: usize, k: usize, seed: u64) -> Result<EntailmentSuite, BenchError> {
    check_entailment(depth, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concept = Concept::random(depth, k, &mut rng);
    Ok(entailment_tasks(concept, n, depth, k, seed, &mut rng))
}

/// A suite over a given concept, e.g. [`Concept::xor`].
pub fn gen_entailment_suite_for(concept: Concept, n: usize, k: usize, seed: u64) -> Result<EntailmentSuite, BenchError> {
    let depth = concept.depth();
    check_entailment(depth, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(entailment_tasks(concept, n, depth, k, seed, &mut rng))
}

fn entailment_tasks(concept: Concept, n: usize, depth: usize, k: usize, seed: u64, rng: &mut ChaCha8Rng) -> EntailmentSuite {
    let tasks = (0..n)
        .map(|i| {
            let x: Vec<bool> = (0..k).map(|_| rng.gen()).collect();
            let fields = x.iter().enumerate().map(|(j, &b)| (format!("p{j}"), Value::Bool(b))).collect();
            TaskInstance {
                input: RawRecord::new(fields).with_id(format!("e{seed}-{i}")),
                ground_truth: label(concept.eval(&x)).into(),
                family: Family::Entailment,
                difficulty: Difficulty {
                    depth: Some(depth),
                    k: Some(k),
                    steps: None,
                },
                seed,
                expression: None,
            }
        })
        .collect();
    EntailmentSuite {
        concept,
        k,
        depth,
        seed,
        tasks,
    }
}

/// Trains the oracle on the truth table and checks it is exact.
pub fn oracle_tree(suite: &EntailmentSuite) -> Result<DecisionTree, BenchError> {
    let ds = suite.training_dataset();
    let tree = train_cart(&ds, &TrainParams::default().with_max_depth(suite.k.max(1)))
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    let correct = ds
        .rows()
        .iter()
        .zip(ds.labels())
        .filter(|(x, &l)| tree.predict_with_trace(x).is_ok_and(|v| v.outcome == ds.schema().labels()[l]))
        .count();
    let acc = correct as f64 / ds.len() as f64;
    if correct != ds.len() {
        return Err(BenchError::InexactOracle(acc));
    }
    Ok(tree)
}

/// Prints `v` without a trailing `.0` when it is integral.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

pub fn gen_arithmetic_suite(n: usize, steps: usize, range: (i64, i64), seed: u64) -> Result<Vec<TaskInstance>, BenchError> {
    if !(1..=6).contains(&steps) {
        return Err(BenchError::InvalidParams(format!("steps must lie in [1, 6], got {steps}")));
    }
    let (lo, hi) = range;
    if lo < 0 || hi < lo {
        return Err(BenchError::InvalidParams(format!("value range [{lo}, {hi}] must be nonnegative and ordered")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = rng.gen_range(lo..=hi);
        let mut expr = start.to_string();
        let mut text = format!("A has {start} apples");
        for s in 0..steps {
            let op = if s == 0 { 0 } else { rng.gen_range(0..3) };
            let (sym, clause, b) = match op {
                0 => {
                    let b = rng.gen_range(lo..=hi);
                    ("+", format!("gets {b} more"), b)
                }
                1 => {
                    let b = rng.gen_range(lo..=hi);
                    ("-", format!("gives away {b}"), b)
                }
                _ => {
                    let b = rng.gen_range(2..=5);
                    ("*", format!("multiplies the pile by {b}"), b)
                }
            };
            expr = if s == 0 { format!("{expr}{sym}{b}") } else { format!("({expr}){sym}{b}") };
            text.push_str(if s == 0 { " and " } else { ", then " });
            text.push_str(&clause);
        }
        text.push_str(". How many apples does A have?");
        let truth = calc_eval(&expr).map_err(|e| BenchError::Setup(format!("generator produced `{expr}`: {e}")))?;
        out.push(TaskInstance {
            input: RawRecord::new(Default::default()).with_id(format!("a{seed}-{i}")).with_text(text),
            ground_truth: format_number(truth),
            family: Family::Arithmetic,
            difficulty: Difficulty {
                depth: None,
                k: None,
                steps: Some(steps),
            },
            seed,
            expression: Some(expr),
        });
    }
    Ok(out)
}

/// Deterministic coin for instance `id`: `sha256("seed:id")` read as a
/// fraction of 2⁶⁴.
pub fn error_draw(seed: u64, id: &str) -> f64 {
    let h = Sha256::digest(format!("{seed}:{id}").as_bytes());
    let x = u64::from_be_bytes(h[..8].try_into().expect("digest has 32 bytes"));
    x as f64 / 18_446_744_073_709_551_616.0
}

/// Whether the scripted model answers `id` wrongly at error rate `epsilon`.
pub fn injects_error(seed: u64, id: &str, epsilon: f64) -> bool {
    error_draw(seed, id) < epsilon
}

/// The label the scripted model gives when it errs.
pub fn wrong_answer(task: &TaskInstance) -> String {
    match task.family {
        Family::Entailment => if task.ground_truth == YES { NO } else { YES }.into(),
        Family::Arithmetic => match task.ground_truth.parse::<f64>() {
            Ok(v) => format_number(v + 1.0),
            Err(_) => format!("{}1", task.ground_truth),
        },
    }
}

const DECOMPOSE_PREAMBLE: &str = "Break the problem into numbered steps";

/// A rule table answering each task correctly with probability 1−ε.
///
/// Arithmetic tasks also get a tool path: under the `decompose` template the
/// model asks the calculator for the generating expression, then repeats the
/// value it gets back.
pub fn scripted_llm_for_suite(tasks: &[TaskInstance], epsilon: f64, seed: u64) -> Result<BackendConfig, BenchError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(BenchError::InvalidParams(format!("error rate {epsilon} is outside [0, 1]")));
    }
    let mut rules = Vec::new();
    if tasks.iter().any(|t| t.family == Family::Arithmetic) {
        rules.push(ScriptRule {
            pattern: Pattern::Regex(r#"tool calculator \[q\d+\] ok \{"value":(-?[0-9.eE+-]+)\}"#.into()),
            response: "ANSWER: ${1} | RATIONALE: computed with the calculator".into(),
        });
        for t in tasks.iter().filter(|t| t.family == Family::Arithmetic) {
            let expr = t.expression.as_deref().unwrap_or_default();
            rules.push(ScriptRule {
                pattern: Pattern::Regex(format!(
                    "(?s)^{DECOMPOSE_PREAMBLE}.*?source: {}\n",
                    regex::escape(&t.id())
                )),
                response: format!(r#"TOOL: calculator | ARGS: {{"expr":"{expr}"}}"#),
            });
        }
    }
    for t in tasks {
        let id = t.id();
        let answer = if injects_error(seed, &id, epsilon) {
            wrong_answer(t)
        } else {
            t.ground_truth.clone()
        };
        rules.push(ScriptRule {
            pattern: Pattern::Substring(format!("source: {id}\n")),
            response: format!("ANSWER: {answer} | RATIONALE: scripted"),
        });
    }
    Ok(BackendConfig::Scripted(ScriptedConfig {
        rules,
        default: Some("ANSWER: unknown".into()),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    LlmOnly,
    LlmPlusTrace,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::LlmOnly, Arm::LlmPlusTrace, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::LlmOnly => "llm_only",
            Arm::LlmPlusTrace => "llm_plus_trace",
            Arm::Full => "full",
        }
    }
}

fn llm_rules(template: &str) -> Vec<DispatchRule> {
    let call = || Step::CallLlm {
        template_id: template.into(),
    };
    vec![
        DispatchRule::new(Condition::NoLlmResponse, call()),
        DispatchRule::new(Condition::LlmMalformedRetry, call()),
        DispatchRule::new(Condition::ToolPending, Step::CallTool),
        DispatchRule::new(Condition::LlmFollowUpDue, call()),
    ]
}

/// Dispatch policy and conflict rules for `arm`; nothing else differs.
pub fn arm_policy(arm: Arm, family: Family) -> (DispatchPolicy, ConflictPolicy) {
    let template = match family {
        Family::Entailment => "default",
        Family::Arithmetic => "decompose",
    };
    match arm {
        Arm::LlmOnly => {
            let mut rules = llm_rules("default");
            rules.push(DispatchRule::new(Condition::Always, Step::Finalize));
            (DispatchPolicy::RuleBased { rules }, ConflictPolicy::default())
        }
        Arm::LlmPlusTrace => {
            let mut rules = llm_rules("default");
            rules.push(DispatchRule::new(Condition::NoTreeVerdict, Step::CallTree));
            rules.push(DispatchRule::new(Condition::Disagreement, Step::ResolveConflict));
            rules.push(DispatchRule::new(Condition::Always, Step::Finalize));
            let conflict = ConflictPolicy::new(vec![
                ConflictRule::TreeWinsIfConfidenceGe { theta: 1.0 },
                ConflictRule::LlmFallback,
            ])
            .expect("ends with a total rule");
            (DispatchPolicy::RuleBased { rules }, conflict)
        }
        Arm::Full => {
            let rules = default_rules()
                .into_iter()
                .map(|mut r| {
                    if let Step::CallLlm { template_id } = &mut r.then {
                        *template_id = template.into();
                    }
                    r
                })
                .collect();
            (DispatchPolicy::RuleBased { rules }, ConflictPolicy::default())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub arm: Arm,
    pub accuracy: f64,
    pub correct: usize,
    pub mean_steps: f64,
    pub mean_tool_calls: f64,
    /// Mean number of belief events per episode.
    pub mean_trace_length: f64,
    /// Episodes that failed before producing a transcript.
    pub episode_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub family: Family,
    pub instance_count: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub arms: Vec<ArmMetrics>,
}

impl MetricsReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmMetrics> {
        self.arms.iter().find(|m| m.arm == arm)
    }

    pub fn accuracy(&self, arm: Arm) -> Option<f64> {
        self.arm(arm).map(|m| m.accuracy)
    }
}

/// Per-instance answers, in suite order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAudit {
    pub id: String,
    pub truth: String,
    pub injected_error: bool,
    pub answers: Vec<(Arm, Option<String>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub report: MetricsReport,
    pub audit: Vec<InstanceAudit>,
}

/// Everything the arms share.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub env: Arc<EpisodeEnv>,
    pub tasks: Vec<TaskInstance>,
    pub family: Family,
    pub epsilon: f64,
    pub seed: u64,
}

impl AblationSetup {
    pub fn entailment(suite: &EntailmentSuite, epsilon: f64, seed: u64) -> Result<Self, BenchError> {
        let tree = oracle_tree(suite)?;
        let env = EpisodeEnv::new(suite.schema(), Some(Arc::new(Model::Tree(tree))), Arc::new(Registry::with_builtins(KbStore::default())))
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        Ok(Self {
            env: Arc::new(env),
            tasks: suite.tasks.clone(),
            family: Family::Entailment,
            epsilon,
            seed,
        })
    }

    pub fn arithmetic(tasks: Vec<TaskInstance>, epsilon: f64, seed: u64) -> Result<Self, BenchError> {
        let schema = Schema::new(
            vec![],
            LabelDef {
                name: "value".into(),
                vocabulary: vec!["number".into()],
            },
        )
        .expect("empty feature list is valid");
        let env = EpisodeEnv::new(schema, None, Arc::new(Registry::with_builtins(KbStore::default())))
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        Ok(Self {
            env: Arc::new(env),
            tasks,
            family: Family::Arithmetic,
            epsilon,
            seed,
        })
    }

    /// Arms that make sense for the family: the trace-check arm needs a tree.
    pub fn arms(&self) -> Vec<Arm> {
        match self.family {
            Family::Entailment => Arm::ALL.to_vec(),
            Family::Arithmetic => vec![Arm::LlmOnly, Arm::Full],
        }
    }
}

/// Runs every arm on the same instances in the same order.
pub fn run_ablation(setup: &AblationSetup, arms: &[Arm]) -> Result<AblationRun, BenchError> {
    let backend = Backend::new(&scripted_llm_for_suite(&setup.tasks, setup.epsilon, setup.seed)?)
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    let mut per_arm: Vec<(Arm, Vec<Result<EpisodeTranscript, String>>)> = Vec::new();
    for &arm in arms {
        let (policy, conflict) = arm_policy(arm, setup.family);
        let settings = EpisodeSettings {
            policy,
            conflict,
            seed: setup.seed,
            ..EpisodeSettings::default()
        };
        let results: Vec<_> = setup
            .tasks
            .par_iter()
            .map(|t| run_episode_with(&t.input, &setup.env, &settings, &backend).map_err(|e| e.to_string()))
            .collect();
        per_arm.push((arm, results));
    }

    let n = setup.tasks.len();
    let mut metrics = Vec::new();
    for (arm, results) in &per_arm {
        let mut correct = 0;
        let mut errors = 0;
        let (mut steps, mut tools, mut events) = (0u64, 0u64, 0u64);
        for (t, r) in setup.tasks.iter().zip(results) {
            match r {
                Ok(tr) => {
                    if tr.answer.as_deref().is_some_and(|a| answers_match(a, &t.ground_truth)) {
                        correct += 1;
                    }
                    steps += tr.counters.steps as u64;
                    tools += tr.counters.tool_calls as u64;
                    events += tr.belief.len() as u64;
                }
                Err(_) => errors += 1,
            }
        }
        let mean = |x: u64| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        metrics.push(ArmMetrics {
            arm: *arm,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            correct,
            mean_steps: mean(steps),
            mean_tool_calls: mean(tools),
            mean_trace_length: mean(events),
            episode_errors: errors,
        });
    }

    let audit = setup
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| InstanceAudit {
            id: t.id(),
            truth: t.ground_truth.clone(),
            injected_error: injects_error(setup.seed, &t.id(), setup.epsilon),
            answers: per_arm
                .iter()
                .map(|(arm, rs)| (*arm, rs[i].as_ref().ok().and_then(|tr| tr.answer.clone())))
                .collect(),
        })
        .collect();
    Ok(AblationRun {
        report: MetricsReport {
            family: setup.family,
            instance_count: n,
            seed: setup.seed,
            epsilon: setup.epsilon,
            arms: metrics,
        },
        audit,
    })
}

/// Instance-weighted aggregate of several reports of one family.
pub fn pool_reports(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let first = reports.first()?;
    let total: usize = reports.iter().map(|r| r.instance_count).sum();
    let arms = first
        .arms
        .iter()
        .map(|a| {
            let pick = |f: &dyn Fn(&ArmMetrics) -> f64| {
                reports
                    .iter()
                    .filter_map(|r| r.arm(a.arm).map(|m| f(m) * r.instance_count as f64))
                    .sum::<f64>()
                    / total.max(1) as f64
            };
            let correct = reports.iter().filter_map(|r| r.arm(a.arm)).map(|m| m.correct).sum();
            ArmMetrics {
                arm: a.arm,
                accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
                correct,
                mean_steps: pick(&|m| m.mean_steps),
                mean_tool_calls: pick(&|m| m.mean_tool_calls),
                mean_trace_length: pick(&|m| m.mean_trace_length),
                episode_errors: reports.iter().filter_map(|r| r.arm(a.arm)).map(|m| m.episode_errors).sum(),
            }
        })
        .collect();
    Some(MetricsReport {
        family: first.family,
        instance_count: total,
        seed: first.seed,
        epsilon: first.epsilon,
        arms,
    })
}

/// Accuracy table: one row per configuration, one column per family.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from("| Configuration  |");
    let mut rule = String::from("|----------------|");
    for r in reports {
        let _ = write!(out, " {:>10} |", r.family.name());
        rule.push_str("-----------:|");
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for arm in Arm::ALL {
        let _ = write!(out, "| {:<14} |", arm.name());
        for r in reports {
            match r.accuracy(arm) {
                Some(a) => {
                    let _ = write!(out, " {:>9.1}% |", a * 100.0);
                }
                None => {
                    let _ = write!(out, " {:>10} |", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn tasks_to_jsonl(tasks: &[TaskInstance]) -> String {
    tasks
        .iter()
        .map(|t| serde_json::to_string(t).expect("tasks serialize") + "\n")
        .collect()
}

pub fn tasks_from_jsonl(text: &str) -> Result<Vec<TaskInstance>, BenchError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| BenchError::InvalidParams(e.to_string())))
        .collect()
}

/// What the `bench` command runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSpec {
    pub seeds: Vec<u64>,
    pub n: usize,
    pub depth: usize,
    pub k: usize,
    pub epsilon: f64,
    /// Arithmetic suite size; zero skips the arithmetic run.
    pub arithmetic_n: usize,
    pub arithmetic_steps: usize,
    pub arithmetic_range: (i64, i64),
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            n: 500,
            depth: 3,
            k: 6,
            epsilon: 0.3,
            arithmetic_n: 100,
            arithmetic_steps: 3,
            arithmetic_range: (1, 20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub per_seed: Vec<MetricsReport>,
    pub pooled: Vec<MetricsReport>,
}

/// Runs the entailment ablation per seed (and the arithmetic run, if asked),
/// then pools each family.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchOutput, BenchError> {
    let mut entail = Vec::new();
    let mut arith = Vec::new();
    for &seed in &spec.seeds {
        let suite = gen_entailment_suite(spec.n, spec.depth, spec.k, seed)?;
        let setup = AblationSetup::entailment(&suite, spec.epsilon, seed)?;
        entail.push(run_ablation(&setup, &setup.arms())?.report);
        if spec.arithmetic_n > 0 {
            let tasks = gen_arithmetic_suite(spec.arithmetic_n, spec.arithmetic_steps, spec.arithmetic_range, seed)?;
            let setup = AblationSetup::arithmetic(tasks, spec.epsilon, seed)?;
            arith.push(run_ablation(&setup, &setup.arms())?.report);
        }
    }
    let pooled = [pool_reports(&entail), pool_reports(&arith)].into_iter().flatten().collect();
    let mut per_seed = entail;
    per_seed.extend(arith);
    Ok(BenchOutput { per_seed, pooled })
}

/// Curriculum tasks for policy training: entailment episodes whose scripted
/// model errs at `epsilon` and, from stages with `tool_calls > 0`, looks up
/// the record in the knowledge base that many times before answering.
#[derive(Debug, Clone)]
pub struct EntailmentCurriculum {
    pub k: usize,
    pub epsilon: f64,
    pub pool: usize,
}

impl Default for EntailmentCurriculum {
    fn default() -> Self {
        Self {
            k: 6,
            epsilon: 0.3,
            pool: 64,
        }
    }
}

struct CurriculumTasks {
    suite: EntailmentSuite,
    env: Arc<EpisodeEnv>,
    backend: BackendConfig,
}

impl StageTasks for CurriculumTasks {
    fn sample(&self, seed: u64) -> TrainingEpisode {
        let i = (seed % self.suite.tasks.len() as u64) as usize;
        let task = &self.suite.tasks[i];
        TrainingEpisode {
            record: task.input.clone(),
            truth: task.ground_truth.clone(),
            env: Arc::clone(&self.env),
            settings: EpisodeSettings {
                backend: self.backend.clone(),
                ..EpisodeSettings::default()
            },
        }
    }
}

impl TaskGenerator for EntailmentCurriculum {
    fn stage(&self, stage: &CurriculumStage, seed: u64) -> Result<Box<dyn StageTasks>, PolicyError> {
        let err = |e: BenchError| PolicyError::InvalidConfig(e.to_string());
        let k = self.k.max(stage.depth);
        let suite = gen_entailment_suite(self.pool.max(1), stage.depth, k, seed).map_err(err)?;
        let setup = AblationSetup::entailment(&suite, self.epsilon, seed).map_err(err)?;
        let BackendConfig::Scripted(mut script) = scripted_llm_for_suite(&suite.tasks, self.epsilon, seed).map_err(err)? else {
            unreachable!("suite backends are scripted")
        };
        // With m lookups required: once result q{m} is in the prompt, answer;
        // before that, every prompt for the record asks for another lookup.
        let m = stage.tool_calls;
        let mut lookups = Vec::new();
        if m > 0 {
            for (t, answer) in suite.tasks.iter().zip(&script.rules) {
                let id = regex::escape(&t.id());
                lookups.push(ScriptRule {
                    pattern: Pattern::Regex(format!(r"(?s)source: {id}\n.*tool kb \[q{m}\]")),
                    response: answer.response.clone(),
                });
                lookups.push(ScriptRule {
                    pattern: Pattern::Substring(format!("source: {}\n", t.id())),
                    response: format!(r#"TOOL: kb | ARGS: {{"key":"{}"}}"#, t.id()),
                });
            }
        }
        lookups.append(&mut script.rules);
        script.rules = lookups;
        Ok(Box::new(CurriculumTasks {
            suite,
            env: setup.env,
            backend: BackendConfig::Scripted(script),
        }))
    }
}
