use clap::{Args, Parser, Subcommand, ValueEnum};
use grounding_core::benchmark::{
    generate_episodes, predicate_samples, read_episodes, run_benchmark, write_episodes, BenchConfig, ParserKind,
    TaskConfig,
};
use grounding_core::estimator::{train_with_log, EstimatorConfig, EstimatorModel, FittedEstimator, PredicateTable};
use grounding_core::field::GridSpec;
use grounding_core::grounding::{ground, Estimator, Mode};
use grounding_core::parser::{parse_grammar, parse_llm, LlmClient, LlmClientConfig, ReplayTransport};
use grounding_core::scene::{SceneGraph, DEFAULT_NEAR_FACTOR};
use grounding_core::{Error, Result};
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "grounder", version, about = "Ground composite spatial instructions to target locations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ground one instruction in a scene and print the result as JSON.
    Ground(GroundArgs),
    /// Run the synthetic benchmark and write its report.
    Bench(BenchArgs),
    /// Train the learned estimator on an episode file.
    Train(TrainArgs),
    /// Fit the per-predicate table from an episode file.
    Fit(FitArgs),
    /// Write synthetic episodes as JSON lines.
    Generate(GenerateArgs),
    /// Serve the session HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fitted,
    Learned,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fitted => Mode::Fitted,
            ModeArg::Learned => Mode::Learned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ParserArg {
    Grammar,
    Llm,
    /// Benchmark only: use the generator's own parse.
    Oracle,
}

#[derive(Debug, Clone, Args)]
pub struct EstimatorArgs {
    #[arg(long, value_enum, default_value = "fitted")]
    pub mode: ModeArg,
    /// Trained model file, required for learned mode.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Predicate table for fitted mode; the built-in table otherwise.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct LlmArgs {
    /// Answer LLM requests from a recorded transcript instead of LLM_ENDPOINT.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    #[arg(long, default_value = "parser")]
    pub llm_model: String,
}

#[derive(Debug, Args)]
pub struct GroundArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub instruction: String,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[arg(long, value_enum, default_value = "grammar")]
    pub parser: ParserArg,
    #[command(flatten)]
    pub llm: LlmArgs,
    #[arg(long, default_value_t = 128)]
    pub grid: usize,
    /// Accepted for symmetry with the other commands; grounding draws no randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 300)]
    pub episodes: usize,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "grammar")]
    pub parser: ParserArg,
    #[command(flatten)]
    pub llm: LlmArgs,
    #[arg(long, default_value_t = 128)]
    pub grid: usize,
    /// Add mean wall time per episode to the report (makes it run-dependent).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Episodes as JSON lines (see `generate`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Print the loss of every epoch to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Episodes as JSON lines (see `generate`).
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Trained model enabling learned-mode expressions.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Append-only session journal, replayed on startup.
    #[arg(long)]
    pub journal: Option<PathBuf>,
    /// Heatmap resolution of session fields.
    #[arg(long, default_value_t = grounding_core::session::DEFAULT_RESOLUTION)]
    pub resolution: usize,
    #[command(flatten)]
    pub llm: LlmArgs,
    /// Fall back to the LLM parser when the grammar rejects an expression.
    #[arg(long)]
    pub llm_fallback: bool,
}

/// Reads a file, naming it in the error.
pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

pub fn load_table(path: Option<&Path>) -> Result<PredicateTable> {
    match path {
        Some(p) => PredicateTable::from_json_str(&read_file(p)?),
        None => Ok(PredicateTable::canonical()),
    }
}

pub fn load_estimator(args: &EstimatorArgs) -> Result<Estimator> {
    match args.mode {
        ModeArg::Fitted => Ok(Estimator::Fitted(FittedEstimator::new(load_table(args.table.as_deref())?))),
        ModeArg::Learned => {
            let path = args.model.as_ref().ok_or_else(|| Error::Config("learned mode needs --model".into()))?;
            Ok(Estimator::Learned(Box::new(EstimatorModel::from_json_str(&read_file(path)?)?)))
        }
    }
}

pub fn llm_client(args: &LlmArgs) -> Result<LlmClient> {
    match &args.replay {
        Some(path) => {
            let cfg = LlmClientConfig::new("replay", &args.llm_model);
            Ok(LlmClient::replay(cfg, ReplayTransport::load(path)?))
        }
        None => {
            let cfg = LlmClientConfig::from_env(&args.llm_model)
                .ok_or_else(|| Error::Config("the llm parser needs LLM_ENDPOINT or --replay".into()))?;
            LlmClient::http(cfg)
        }
    }
}

/// Runs one command and returns what goes to standard output.
pub fn run(command: Command) -> Result<String> {
    match command {
        Command::Ground(a) => ground_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Serve(a) => {
            crate::server::serve_blocking(a)?;
            Ok(String::new())
        }
    }
}

fn ground_cmd(a: GroundArgs) -> Result<String> {
    let scene = SceneGraph::from_json_str(&read_file(&a.scene)?, DEFAULT_NEAR_FACTOR)?;
    let estimator = load_estimator(&a.estimator)?;
    let parsed = match a.parser {
        ParserArg::Grammar => parse_grammar(&a.instruction)?,
        ParserArg::Llm => parse_llm(&a.instruction, &llm_client(&a.llm)?)?,
        ParserArg::Oracle => return Err(Error::Config("the oracle parser only exists for bench".into())),
    };
    let grid = match &estimator {
        Estimator::Learned(m) => m.config.workspace.grid(a.grid),
        Estimator::Fitted(_) => GridSpec::unit(a.grid),
    };
    grid.validate()?;
    let g = ground(&scene, &parsed, &estimator, &grid)?;
    Ok(serde_json::to_string(&g)?)
}

fn bench_cmd(a: BenchArgs) -> Result<String> {
    let estimator = load_estimator(&a.estimator)?;
    let parser = match a.parser {
        ParserArg::Grammar => ParserKind::Grammar,
        ParserArg::Llm => ParserKind::Llm,
        ParserArg::Oracle => ParserKind::Oracle,
    };
    let llm = if parser == ParserKind::Llm { Some(llm_client(&a.llm)?) } else { None };
    let cfg = BenchConfig {
        episodes: a.episodes,
        mode: a.estimator.mode.into(),
        parser,
        grid: a.grid,
        task: TaskConfig::test(a.seed),
    };
    let mut total = std::time::Duration::ZERO;
    let mut tick = |_: usize, d: std::time::Duration| total += d;
    let timing: Option<&mut dyn FnMut(usize, std::time::Duration)> = if a.timing { Some(&mut tick) } else { None };
    let mut report = run_benchmark(&cfg, &estimator, llm.as_ref(), timing)?;
    if a.timing {
        report.mean_wall_ms = Some(total.as_secs_f64() * 1e3 / report.episodes.max(1) as f64);
    }
    std::fs::write(&a.out, report.to_json_string())?;
    Ok(serde_json::to_string(&json!({
        "episodes": report.episodes,
        "mean_score": report.mean_score,
        "success_rate": report.success_rate,
        "by_relation_count": report.by_relation_count,
        "mean_wall_ms": report.mean_wall_ms,
        "out": a.out,
    }))?)
}

fn train_cmd(a: TrainArgs) -> Result<String> {
    let episodes = read_episodes(&a.data).map_err(|e| with_path(e, &a.data))?;
    let data = episodes.iter().map(|e| e.to_training_sample()).collect::<Result<Vec<_>>>()?;
    let mut cfg = EstimatorConfig { epochs: a.epochs, lambda: a.lambda, seed: a.seed, ..Default::default() };
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    let verbose = a.verbose;
    let (model, log) = train_with_log(&data, &cfg, |s| {
        if verbose {
            eprintln!("epoch {:>3}  loss {:.6}", s.epoch + 1, s.mean_loss);
        }
    })?;
    model.save(&a.out)?;
    Ok(serde_json::to_string(&json!({
        "samples": data.len(),
        "epochs": cfg.epochs,
        "initial_loss": log.initial_loss,
        "final_loss": log.final_loss,
        "out": a.out,
    }))?)
}

fn fit_cmd(a: FitArgs) -> Result<String> {
    let episodes = read_episodes(&a.samples).map_err(|e| with_path(e, &a.samples))?;
    let samples = predicate_samples(&episodes)?;
    let table = PredicateTable::fit(&samples)?;
    std::fs::write(&a.out, table.to_json_string())?;
    let counts: serde_json::Map<_, _> = samples.iter().map(|(k, v)| (k.clone(), json!(v.len()))).collect();
    Ok(serde_json::to_string(&json!({ "samples": counts, "out": a.out }))?)
}

fn generate_cmd(a: GenerateArgs) -> Result<String> {
    let cfg = match a.split {
        SplitArg::Train => TaskConfig::train(a.seed),
        SplitArg::Test => TaskConfig::test(a.seed),
    };
    let episodes = generate_episodes(&cfg, a.count)?;
    write_episodes(&a.out, &episodes)?;
    Ok(serde_json::to_string(&json!({ "episodes": episodes.len(), "out": a.out }))?)
}
