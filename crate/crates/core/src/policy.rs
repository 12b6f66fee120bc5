//! REINFORCE training for the learned dispatch policy.
//!
//! The policy is softmax-linear: `π(a|s) ∝ exp(W_a · s)` over the admissible
//! actions, so `∇_W log π(a|s)` has the closed form `(1[b=a] − π_b) s_j` and
//! no autodiff is needed.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::belief::BeliefState;
use crate::llm::{BackendConfig, ScriptedConfig};
use crate::orchestrator::{
    run_episode, Budget, Counters, DispatchPolicy, EpisodeEnv, EpisodeSettings, EpisodeTranscript, PolicyStep,
    TerminalStatus,
};
use crate::perception::RawRecord;
use crate::tools::Registry;
use crate::tree::{train_cart, Dataset, Model, TrainParams};
use crate::types::{FeatureDef, FeatureValue, LabelDef, Schema, StructuredInput};

pub const N_ACTIONS: usize = 4;
pub const N_FEATURES: usize = 7;
pub const FEATURE_SPEC: &str = "state-features/1";
pub const BASELINE_BETA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("policy weights must be finite")]
    NonFinite,
    #[error("feature spec `{0}` is not supported")]
    FeatureSpec(String),
    #[error("every action is masked")]
    DegenerateMask,
    #[error("policy gradient is not finite")]
    NonFiniteGradient,
    #[error("update batch is empty")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("episode failed: {0}")]
    Episode(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl PolicyError {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicyError::NonFinite => "non_finite",
            PolicyError::FeatureSpec(_) => "feature_spec",
            PolicyError::DegenerateMask => "degenerate_mask",
            PolicyError::NonFiniteGradient => "non_finite_gradient",
            PolicyError::EmptyBatch => "empty_batch",
            PolicyError::InvalidConfig(_) => "invalid_config",
            PolicyError::Episode(_) => "episode_error",
            PolicyError::Checkpoint(_) => "checkpoint_error",
        }
    }
}

pub type Weights = [[f64; N_FEATURES]; N_ACTIONS];

/// `W`: one row per action in the order call_tree, call_llm, call_tool,
/// finalize; one column per state feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Weights,
    pub feature_spec: String,
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            weights: [[0.0; N_FEATURES]; N_ACTIONS],
            feature_spec: FEATURE_SPEC.into(),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.feature_spec != FEATURE_SPEC {
            return Err(PolicyError::FeatureSpec(self.feature_spec.clone()));
        }
        if self.weights.iter().flatten().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(PolicyError::NonFinite)
        }
    }
}

/// `[has_tree_verdict, tree_confidence, has_llm_answer, agreement,
/// tool_calls_used/max, steps_used/max, bias]`.
pub fn featurize_state(c: &BeliefState, budget: &Budget) -> [f64; N_FEATURES] {
    let tree = c.latest_tree_verdict();
    let llm = c.latest_llm_answer().map(|(l, _)| l);
    let used = Counters::of_belief(c);
    let ratio = |n: u32, max: u32| if max == 0 { 0.0 } else { (n as f64 / max as f64).min(1.0) };
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    [
        flag(tree.is_some()),
        tree.map_or(0.0, |v| v.confidence),
        flag(llm.is_some()),
        flag(matches!((tree, llm), (Some(v), Some(l)) if v.outcome == l)),
        ratio(used.tool_calls, budget.max_tool_calls),
        ratio(used.steps, budget.max_steps),
        1.0,
    ]
}

pub fn scores(params: &PolicyParams, s: &[f64; N_FEATURES]) -> [f64; N_ACTIONS] {
    let mut out = [0.0; N_ACTIONS];
    for (a, row) in params.weights.iter().enumerate() {
        out[a] = row.iter().zip(s).map(|(w, x)| w * x).sum();
    }
    out
}

/// Masked softmax of `W·s`. Masked actions get probability exactly zero.
pub fn action_distribution(
    params: &PolicyParams,
    s: &[f64; N_FEATURES],
    mask: &[bool; N_ACTIONS],
) -> Result<[f64; N_ACTIONS], PolicyError> {
    let z = scores(params, s);
    let max = (0..N_ACTIONS)
        .filter(|&a| mask[a])
        .map(|a| z[a])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(PolicyError::DegenerateMask);
    }
    if !max.is_finite() {
        return Err(PolicyError::NonFinite);
    }
    let mut p = [0.0; N_ACTIONS];
    for a in 0..N_ACTIONS {
        if mask[a] {
            p[a] = (z[a] - max).exp();
        }
    }
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    Ok(p)
}

/// `∇_W log π(a|s)`. Rows of masked actions are zero.
pub fn grad_log_prob(
    params: &PolicyParams,
    s: &[f64; N_FEATURES],
    mask: &[bool; N_ACTIONS],
    a: usize,
) -> Result<Weights, PolicyError> {
    let p = action_distribution(params, s, mask)?;
    let mut g = [[0.0; N_FEATURES]; N_ACTIONS];
    for b in (0..N_ACTIONS).filter(|&b| mask[b]) {
        let coef = if b == a { 1.0 } else { 0.0 } - p[b];
        for j in 0..N_FEATURES {
            g[b][j] = coef * s[j];
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub correct_bonus: f64,
    pub lambda_step: f64,
    pub mu_tool: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            correct_bonus: 1.0,
            lambda_step: 0.01,
            mu_tool: 0.05,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.lambda_step >= 0.0 && self.mu_tool >= 0.0 && self.correct_bonus.is_finite() {
            Ok(())
        } else {
            Err(PolicyError::InvalidConfig("reward penalties must be nonnegative".into()))
        }
    }
}

/// Label equality, with numeric answers compared to 1e-9 relative.
pub fn answers_match(answer: &str, truth: &str) -> bool {
    if answer == truth {
        return true;
    }
    match (answer.trim().parse::<f64>(), truth.trim().parse::<f64>()) {
        (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a - b).abs() <= 1e-9 * b.abs().max(1.0),
        _ => false,
    }
}

/// `R = bonus · 1[answer = truth] − λ·steps − μ·tool_calls`. Only answered
/// episodes can earn the bonus.
pub fn episode_return(t: &EpisodeTranscript, spec: &RewardSpec, truth: &str) -> f64 {
    let correct = t.terminal_status == TerminalStatus::Answered && t.answer.as_deref().is_some_and(|a| answers_match(a, truth));
    let bonus = if correct { spec.correct_bonus } else { 0.0 };
    bonus - spec.lambda_step * t.counters.steps as f64 - spec.mu_tool * t.counters.tool_calls as f64
}

/// Exponential moving average of returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub beta: f64,
}

impl Default for Baseline {
    fn default() -> Self {
        Self {
            value: 0.0,
            beta: BASELINE_BETA,
        }
    }
}

/// One REINFORCE step: `W += lr · Σ_episodes Σ_steps ∇log π(a_t|s_t) · (R − b)`,
/// then `b ← (1−β)·b + β·mean(R)`.
pub fn reinforce_update(
    params: &PolicyParams,
    batch: &[(&[PolicyStep], f64)],
    learning_rate: f64,
    baseline: &mut Baseline,
) -> Result<PolicyParams, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut total = [[0.0; N_FEATURES]; N_ACTIONS];
    for (steps, ret) in batch {
        let advantage = ret - baseline.value;
        for step in steps.iter() {
            let g = grad_log_prob(params, &step.features, &step.mask, step.action)?;
            for a in 0..N_ACTIONS {
                for j in 0..N_FEATURES {
                    total[a][j] += g[a][j] * advantage;
                }
            }
        }
    }
    if !total.iter().flatten().all(|v| v.is_finite()) {
        return Err(PolicyError::NonFiniteGradient);
    }
    let mut next = params.clone();
    for a in 0..N_ACTIONS {
        for j in 0..N_FEATURES {
            next.weights[a][j] += learning_rate * total[a][j];
        }
    }
    next.validate().map_err(|_| PolicyError::NonFiniteGradient)?;
    let mean = batch.iter().map(|(_, r)| r).sum::<f64>() / batch.len() as f64;
    baseline.value = (1.0 - baseline.beta) * baseline.value + baseline.beta * mean;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub index: usize,
    /// Depth of the generating concept.
    pub depth: usize,
    /// Tool calls a task needs before it can be answered.
    #[serde(default)]
    pub tool_calls: usize,
    pub episodes: usize,
}

pub fn validate_stages(stages: &[CurriculumStage]) -> Result<(), PolicyError> {
    for w in stages.windows(2) {
        if w[1].depth < w[0].depth || w[1].tool_calls < w[0].tool_calls {
            return Err(PolicyError::InvalidConfig(format!(
                "stage {} is easier than stage {}",
                w[1].index, w[0].index
            )));
        }
    }
    Ok(())
}

/// One sampled training episode and its ground truth.
#[derive(Debug, Clone)]
pub struct TrainingEpisode {
    pub record: RawRecord,
    pub truth: String,
    pub env: Arc<EpisodeEnv>,
    pub settings: EpisodeSettings,
}

/// Tasks for one curriculum stage. Sampling must be a pure function of `seed`.
pub trait StageTasks: Send + Sync {
    fn sample(&self, seed: u64) -> TrainingEpisode;
}

pub trait TaskGenerator {
    fn stage(&self, stage: &CurriculumStage, seed: u64) -> Result<Box<dyn StageTasks>, PolicyError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub reward: RewardSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 1,
            reward: RewardSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: usize,
    /// Episodes completed in this stage after the batch.
    pub episode: usize,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub params: PolicyParams,
    pub curve: Vec<CurvePoint>,
    pub baseline: Baseline,
}

/// Runs the curriculum in order. Within a batch, episodes run in parallel with
/// their own seeds, so results do not depend on scheduling.
pub fn train_policy(
    generator: &dyn TaskGenerator,
    stages: &[CurriculumStage],
    config: &TrainConfig,
) -> Result<TrainingOutcome, PolicyError> {
    config.reward.validate()?;
    validate_stages(stages)?;
    if config.batch_size == 0 || !(config.learning_rate >= 0.0) {
        return Err(PolicyError::InvalidConfig("batch_size ≥ 1 and learning_rate ≥ 0 required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = PolicyParams::zeros();
    let mut baseline = Baseline::default();
    let mut curve = Vec::new();

    for stage in stages {
        let tasks = generator.stage(stage, rng.gen())?;
        let mut done = 0;
        while done < stage.episodes {
            let n = config.batch_size.min(stage.episodes - done);
            let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
            let runs: Vec<(EpisodeTranscript, f64)> = seeds
                .par_iter()
                .map(|&seed| {
                    let task = tasks.sample(seed);
                    let settings = EpisodeSettings {
                        policy: DispatchPolicy::Learned { params: params.clone() },
                        explore: true,
                        seed,
                        ..task.settings
                    };
                    let t = run_episode(&task.record, &task.env, &settings).map_err(|e| PolicyError::Episode(e.to_string()))?;
                    let r = episode_return(&t, &config.reward, &task.truth);
                    Ok((t, r))
                })
                .collect::<Result<_, PolicyError>>()?;
            let batch: Vec<(&[PolicyStep], f64)> = runs.iter().map(|(t, r)| (t.policy_steps.as_slice(), *r)).collect();
            params = reinforce_update(&params, &batch, config.learning_rate, &mut baseline)?;
            done += n;
            curve.push(CurvePoint {
                stage: stage.index,
                episode: done,
                mean_return: batch.iter().map(|(_, r)| r).sum::<f64>() / n as f64,
            });
        }
    }
    Ok(TrainingOutcome { params, curve, baseline })
}

/// The policy file: weights plus how they were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub metadata: Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoints serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        c.params.validate()?;
        Ok(c)
    }
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in curve {
        w.serialize(p).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

/// Probability of `call_tree` on a fresh belief under `params`.
pub fn fresh_state_distribution(params: &PolicyParams, mask: &[bool; N_ACTIONS]) -> Result<[f64; N_ACTIONS], PolicyError> {
    let mut s = [0.0; N_FEATURES];
    s[N_FEATURES - 1] = 1.0;
    action_distribution(params, &s, mask)
}

/// A routing micro-task: the tree always knows the answer, the language model
/// never does, and every episode finalizes after its first module call.
#[derive(Debug, Clone)]
pub struct RoutingBandit {
    env: Arc<EpisodeEnv>,
}

const BANDIT_WRONG: &str = "none";

impl RoutingBandit {
    pub fn new() -> Self {
        let schema = Schema::new(
            vec![FeatureDef::numeric("x")],
            LabelDef {
                name: "y".into(),
                vocabulary: vec!["low".into(), "high".into()],
            },
        )
        .expect("fixed schema is valid");
        let rows: Vec<StructuredInput> = (0..2)
            .map(|i| StructuredInput::new(vec![FeatureValue::Numeric(i as f64)], format!("t{i}")))
            .collect();
        let ds = Dataset::new(schema.clone(), rows, &["low", "high"]).expect("fixed dataset is valid");
        let tree = train_cart(&ds, &TrainParams::default()).expect("two separable rows train");
        let env = EpisodeEnv::new(schema, Some(Arc::new(Model::Tree(tree))), Arc::new(Registry::new()))
            .expect("schema matches");
        Self { env: Arc::new(env) }
    }
}

impl Default for RoutingBandit {
    fn default() -> Self {
        Self::new()
    }
}

impl StageTasks for RoutingBandit {
    fn sample(&self, seed: u64) -> TrainingEpisode {
        let x: f64 = ChaCha8Rng::seed_from_u64(seed).gen_range(0.0..1.0);
        let truth = if x <= 0.5 { "low" } else { "high" };
        let record = RawRecord::new([("x".to_string(), Value::from(x))].into()).with_id(format!("b{seed}"));
        TrainingEpisode {
            record,
            truth: truth.into(),
            env: Arc::clone(&self.env),
            settings: EpisodeSettings {
                backend: BackendConfig::Scripted(ScriptedConfig {
                    rules: vec![],
                    default: Some(format!("ANSWER: {BANDIT_WRONG} | RATIONALE: guess")),
                }),
                auto_finalize: true,
                ..EpisodeSettings::default()
            },
        }
    }
}

impl TaskGenerator for RoutingBandit {
    fn stage(&self, _stage: &CurriculumStage, _seed: u64) -> Result<Box<dyn StageTasks>, PolicyError> {
        Ok(Box::new(self.clone()))
    }
}
