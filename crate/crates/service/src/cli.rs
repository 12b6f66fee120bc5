//! The `arbor` command line. Exit status: 0 on success, 1 on a domain error,
//! 2 on a usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use arbor_core::bench::{render_table, run_bench, BenchSpec, EntailmentCurriculum};
use arbor_core::orchestrator::{export_trace, EpisodeSettings, TraceFormat};
use arbor_core::perception::record_from_json;
use arbor_core::policy::{
    curve_csv, fresh_state_distribution, train_policy, Checkpoint, CurriculumStage, RoutingBandit, TaskGenerator,
    TrainConfig,
};
use arbor_core::tree::{deserialize_model, serialize_model, ForestParams, Model};
use arbor_core::types::canonical_json;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::config::ServiceConfig;
use crate::error::OpError;
use crate::ops::{self, TrainRequest};

#[derive(Debug, Parser)]
#[command(name = "arbor", version, about = "Decision-tree oracles with an orchestrated language-model agent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyTask {
    /// Tree always right, language model always wrong.
    Bandit,
    /// Synthetic entailment with scripted errors and knowledge-base lookups.
    Entailment,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a tree or forest and write the model file.
    Train {
        /// A training request JSON (the `/v1/train` body).
        #[arg(long, conflicts_with_all = ["schema", "data"])]
        request: Option<PathBuf>,
        #[arg(long, requires = "data")]
        schema: Option<PathBuf>,
        /// Labeled rows: .csv, .jsonl or .json.
        #[arg(long, requires = "schema")]
        data: Option<PathBuf>,
        /// Training parameters JSON.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Train a forest of this many trees.
        #[arg(long)]
        trees: Option<usize>,
        /// Features drawn per node in a forest (default: all).
        #[arg(long, requires = "trees")]
        subsample: Option<usize>,
        /// Overrides the tree and forest seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one episode and print the answer with its trace.
    Query {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        record: PathBuf,
        /// Episode settings JSON, applied over the defaults.
        #[arg(long)]
        settings: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        format: OutputFormat,
        /// Also write the transcript JSON here.
        #[arg(long)]
        transcript_out: Option<PathBuf>,
    },
    /// Re-evaluate a record under feature modifications.
    Whatif {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        record: PathBuf,
        /// `feature=value`; repeatable.
        #[arg(long = "set", value_parser = parse_set)]
        set: Vec<(String, Value)>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        format: OutputFormat,
    },
    /// Run the three-arm ablation and write report files.
    Bench {
        /// First suite seed.
        #[arg(long)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// A suite spec JSON; flags override its fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Arithmetic instances per seed; 0 skips the arithmetic run.
        #[arg(long)]
        arithmetic_n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the routing policy with REINFORCE over a curriculum.
    TrainPolicy {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PolicyTask::Bandit)]
        task: PolicyTask,
        /// Curriculum JSON: a list of stages.
        #[arg(long)]
        curriculum: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
        /// Learning curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
    },
}

fn parse_set(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("`{s}` is not of the form feature=value"))?;
    if k.trim().is_empty() {
        return Err(format!("`{s}` names no feature"));
    }
    Ok((k.trim().into(), serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.into()))))
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error[{}]: {}", e.kind, e.message);
            1
        }
    }
}

fn read(path: &Path) -> Result<String, OpError> {
    std::fs::read_to_string(path).map_err(|e| OpError::io(&path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), OpError> {
    std::fs::write(path, bytes).map_err(|e| OpError::io(&path.display().to_string(), e))
}

fn json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, OpError> {
    serde_json::from_str(&read(path)?)
        .map_err(|e| OpError::bad_request("malformed_input", format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model, OpError> {
    let bytes = std::fs::read(path).map_err(|e| OpError::io(&path.display().to_string(), e))?;
    Ok(deserialize_model(&bytes)?)
}

fn io_out(e: std::io::Error) -> OpError {
    OpError::io("stdout", e)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), OpError> {
    match command {
        Command::Train {
            request,
            schema,
            data,
            params,
            trees,
            subsample,
            seed,
            out: dest,
        } => {
            let mut req: TrainRequest = match (request, schema, data) {
                (Some(r), _, _) => json_file(&r)?,
                (None, Some(s), Some(d)) => TrainRequest {
                    schema: json_file(&s)?,
                    rows: None,
                    path: Some(d.display().to_string()),
                    params: Default::default(),
                    forest: None,
                    imputation: None,
                },
                _ => return Err(OpError::bad_request("usage", "give --request, or --schema with --data")),
            };
            if let Some(p) = params {
                req.params = json_file(&p)?;
            }
            if let Some(n) = trees {
                let k = subsample.unwrap_or(req.schema.len());
                req.forest = Some(ForestParams::new(n, k, 0));
            }
            if let Some(s) = seed {
                req.params.rng_seed = s;
                if let Some(f) = &mut req.forest {
                    f.master_seed = s;
                }
            }
            let records = ops::request_records(&req)?;
            let (model, summary) = ops::train_model(&req, &records)?;
            write_file(&dest, &serialize_model(&model))?;
            writeln!(out, "{}", serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(io_out)
        }
        Command::Query {
            model,
            record,
            settings,
            seed,
            format,
            transcript_out,
        } => {
            let model = Arc::new(load_model(&model)?);
            let record = record_from_json(&read(&record)?)?;
            let overrides: Value = match settings {
                Some(p) => json_file(&p)?,
                None => json!({}),
            };
            let mut settings = ops::merge_settings(&EpisodeSettings::default(), &overrides)?;
            settings.seed = seed;
            let outcome = ops::run_query(model, &record, &settings)?;
            let t = &outcome.transcript;
            if let Some(p) = transcript_out {
                write_file(&p, &export_trace(t, TraceFormat::Json))?;
            }
            match format {
                OutputFormat::Json => {
                    out.write_all(&export_trace(t, TraceFormat::Json)).map_err(io_out)?;
                    writeln!(out).map_err(io_out)?;
                }
                OutputFormat::Text => {
                    writeln!(out, "answer: {}", t.answer.as_deref().unwrap_or("-")).map_err(io_out)?;
                    writeln!(out, "status: {}", t.terminal_status).map_err(io_out)?;
                    if let Some(v) = &outcome.verdict {
                        writeln!(out, "verdict: {} (confidence {:.2})", v.verdict.outcome, v.verdict.confidence)
                            .map_err(io_out)?;
                        writeln!(out, "{}", v.verbalization).map_err(io_out)?;
                    }
                    out.write_all(&export_trace(t, TraceFormat::Text)).map_err(io_out)?;
                }
            }
            if let Some((kind, message)) = ops::backend_failure(t) {
                return Err(OpError::new(crate::error::Class::BadGateway, kind, message));
            }
            Ok(())
        }
        Command::Whatif {
            model,
            record,
            set,
            format,
        } => {
            let model = load_model(&model)?;
            let x = ops::normalize_for(&model, &record_from_json(&read(&record)?)?)?;
            let view = ops::run_whatif(&model, &x, &set.into_iter().collect())?;
            match format {
                OutputFormat::Json => writeln!(out, "{}", canonical_json(&view)).map_err(io_out),
                OutputFormat::Text => {
                    let v = &view;
                    writeln!(
                        out,
                        "before: {} (confidence {:.2})\nafter: {} (confidence {:.2})",
                        v.result.before.outcome, v.result.before.confidence, v.result.after.outcome, v.result.after.confidence
                    )
                    .map_err(io_out)?;
                    match v.divergence_index {
                        Some(i) => writeln!(out, "paths diverge at step {i}"),
                        None => writeln!(out, "paths are identical"),
                    }
                    .map_err(io_out)?;
                    writeln!(out, "{}", v.after.verbalization).map_err(io_out)
                }
            }
        }
        Command::Bench {
            seed,
            seeds,
            spec,
            n,
            depth,
            k,
            epsilon,
            arithmetic_n,
            out: dir,
        } => {
            let mut spec: BenchSpec = match spec {
                Some(p) => json_file(&p)?,
                None => BenchSpec::default(),
            };
            let count = seeds.unwrap_or(spec.seeds.len().max(1));
            spec.seeds = (0..count as u64).map(|i| seed.wrapping_add(i)).collect();
            spec.n = n.unwrap_or(spec.n);
            spec.depth = depth.unwrap_or(spec.depth);
            spec.k = k.unwrap_or(spec.k);
            spec.epsilon = epsilon.unwrap_or(spec.epsilon);
            spec.arithmetic_n = arithmetic_n.unwrap_or(spec.arithmetic_n);
            let report = run_bench(&spec)?;
            std::fs::create_dir_all(&dir).map_err(|e| OpError::io(&dir.display().to_string(), e))?;
            let metrics = serde_json::to_string_pretty(&json!({"spec": spec, "report": report})).expect("reports serialize");
            write_file(&dir.join("metrics.json"), metrics.as_bytes())?;
            let table = render_table(&report.pooled);
            write_file(&dir.join("table.md"), table.as_bytes())?;
            write!(out, "{table}").map_err(io_out)
        }
        Command::TrainPolicy {
            seed,
            task,
            curriculum,
            lr,
            batch,
            out: dest,
            curve,
        } => {
            let stages: Vec<CurriculumStage> = match curriculum {
                Some(p) => json_file(&p)?,
                None => default_curriculum(task),
            };
            let generator: Box<dyn TaskGenerator> = match task {
                PolicyTask::Bandit => Box::new(RoutingBandit::new()),
                PolicyTask::Entailment => Box::new(EntailmentCurriculum::default()),
            };
            let config = TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                seed,
                ..TrainConfig::default()
            };
            let outcome = train_policy(generator.as_ref(), &stages, &config)?;
            let fresh = fresh_state_distribution(&outcome.params, &[true, true, false, true])?;
            let checkpoint = Checkpoint {
                params: outcome.params.clone(),
                metadata: json!({
                    "task": format!("{task:?}").to_lowercase(),
                    "seed": seed,
                    "config": config,
                    "stages": stages,
                    "baseline": outcome.baseline.value,
                    "fresh_state_distribution": fresh,
                }),
            };
            write_file(&dest, checkpoint.to_json().as_bytes())?;
            if let Some(p) = curve {
                write_file(&p, curve_csv(&outcome.curve).as_bytes())?;
            }
            writeln!(
                out,
                "P(call_tree | fresh) = {:.4}, P(call_llm | fresh) = {:.4}, P(finalize | fresh) = {:.4}",
                fresh[0], fresh[1], fresh[3]
            )
            .map_err(io_out)
        }
        Command::Serve { config, bind } => {
            let mut cfg = match config {
                Some(p) => ServiceConfig::load(&p)?,
                None => ServiceConfig::default(),
            };
            if let Some(b) = bind {
                cfg.bind = b;
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| OpError::io("runtime", e))?;
            rt.block_on(crate::http::serve(cfg))
        }
    }
}

fn default_curriculum(task: PolicyTask) -> Vec<CurriculumStage> {
    let stage = |index, depth, tool_calls, episodes| CurriculumStage {
        index,
        depth,
        tool_calls,
        episodes,
    };
    match task {
        PolicyTask::Bandit => vec![stage(0, 1, 0, 500)],
        PolicyTask::Entailment => vec![stage(0, 1, 0, 200), stage(1, 2, 1, 200), stage(2, 3, 2, 200)],
    }
}
