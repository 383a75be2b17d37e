use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use praise_core::checkpoint::Checkpoint;
use praise_core::config::{ProviderMode, RunConfig};
use praise_core::data::SplitName;
use praise_core::orchestrator;
use praise_core::planner::Preset;
use praise_core::synthetic::{self, SyntheticConfig};

#[derive(Parser)]
#[command(
    name = "praise",
    version,
    about = "Strategy-based user satisfaction estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the strategy search and write a checkpoint directory.
    Train(TrainArgs),
    /// Label utterances with a trained checkpoint.
    Infer(InferArgs),
    /// Show the strategies most relevant to one utterance.
    Explain(ExplainArgs),
    /// Per-strategy relevance distributions and metrics on a labeled split.
    Report(SplitArgs),
    /// Metrics of a checkpoint on a labeled split.
    Eval(SplitArgs),
    /// Write a synthetic corpus, mock provider scripts and a config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Run offline from `completions.json` (and optional `embedder.json`) in this directory.
    #[arg(long)]
    mock_providers: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    k_top: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    exploration_seed: Option<u64>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Use the mock embedder scripted in this directory.
    #[arg(long)]
    mock_providers: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Utterance to label; may be repeated.
    #[arg(long)]
    text: Vec<String>,
    /// File with one utterance per line (`-` for stdin).
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 3)]
    top_n: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, default_value = "test")]
    split: SplitName,
    /// Corpus to split; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    conversations: usize,
    #[arg(long, default_value_t = 256)]
    dim: usize,
}

fn out(line: &str) -> Result<()> {
    writeln!(std::io::stdout().lock(), "{line}")?;
    Ok(())
}

fn use_mock(config: &mut RunConfig, dir: &Path) {
    config.providers.mode = ProviderMode::Mock;
    config.providers.mock_dir = Some(dir.to_owned());
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(c) = args.corpus {
        config.corpus = c;
    }
    if let Some(p) = args.preset {
        config.preset = p;
    }
    if let Some(dir) = &args.mock_providers {
        use_mock(&mut config, dir);
    }
    if let Some(n) = args.max_iterations {
        config.max_iterations = n;
    }
    if let Some(n) = args.patience {
        config.early_stop_patience = n;
    }
    if let Some(n) = args.k_top {
        config.k_top = n;
    }
    if let Some(e) = args.epsilon {
        config.epsilon = e;
    }
    if let Some(s) = args.split_seed {
        config.split_seed = s;
    }
    if let Some(s) = args.exploration_seed {
        config.exploration_seed = s;
    }
    if config.corpus.as_os_str().is_empty() {
        bail!("no corpus given (use --corpus or set `corpus` in the config)");
    }
    config.rebase(&std::env::current_dir()?);
    config.validate()?;
    let gateway = config.training_gateway()?;
    let ckpt = orchestrator::train(&config, &gateway, Some(&args.out))?;
    let best = ckpt
        .history
        .best_iteration()
        .map(|r| (r.iteration, r.validation_macro_f1));
    let stats = gateway.stats();
    out(&serde_json::json!({
        "checkpoint": args.out,
        "iterations": ckpt.history.iterations.len().saturating_sub(1),
        "best_iteration": best.map(|b| b.0),
        "validation_macro_f1": best.map(|b| b.1),
        "effective_strategies": ckpt.memory.effective.len(),
        "completion_calls": stats.completion_calls,
        "embedded_texts": stats.embedded_texts,
    })
    .to_string())
}

fn open(args: &CheckpointArgs) -> Result<(Checkpoint, praise_core::gateway::Gateway)> {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mut config = ckpt.config.clone();
    if let Some(dir) = &args.mock_providers {
        use_mock(&mut config, dir);
    }
    let gateway = config.embedding_gateway()?;
    Ok((ckpt, gateway))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let reader: Box<dyn BufRead> = if path == Path::new("-") {
        Box::new(std::io::stdin().lock())
    } else {
        Box::new(std::io::BufReader::new(
            std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
        ))
    };
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

fn infer(args: InferArgs) -> Result<()> {
    let mut texts = args.text;
    if let Some(path) = &args.input {
        texts.extend(read_lines(path)?);
    }
    let (ckpt, gateway) = open(&args.ckpt)?;
    let preds = orchestrator::infer(&ckpt, &gateway, &texts)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (text, p) in texts.iter().zip(preds) {
        writeln!(
            out,
            "{}",
            serde_json::json!({ "utterance": text, "label": p.label, "probabilities": p.probabilities })
        )?;
    }
    Ok(())
}

fn explain(args: ExplainArgs) -> Result<()> {
    let (ckpt, gateway) = open(&args.ckpt)?;
    let ex = orchestrator::explain(&ckpt, &gateway, &args.text, args.top_n)?;
    out(&serde_json::to_string_pretty(&ex)?)
}

fn emit(output: Option<&Path>, json: String) -> Result<()> {
    match output {
        Some(path) => {
            std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
        }
        None => out(&json),
    }
}

fn split_utterances(
    args: &SplitArgs,
    ckpt: &Checkpoint,
) -> Result<Vec<praise_core::data::LabeledUtterance>> {
    let mut config = ckpt.config.clone();
    if let Some(c) = &args.corpus {
        config.corpus = c.clone();
    }
    let split = orchestrator::load_split(&config)?;
    Ok(split.part(args.split).to_vec())
}

fn report(args: SplitArgs) -> Result<()> {
    let (ckpt, gateway) = open(&args.ckpt)?;
    let utterances = split_utterances(&args, &ckpt)?;
    let rep = orchestrator::report(&ckpt, &gateway, &utterances)?;
    emit(args.output.as_deref(), serde_json::to_string_pretty(&rep)?)
}

fn eval(args: SplitArgs) -> Result<()> {
    let (ckpt, gateway) = open(&args.ckpt)?;
    let utterances = split_utterances(&args, &ckpt)?;
    let r = orchestrator::evaluate(&ckpt, &gateway, &utterances)?;
    emit(args.output.as_deref(), serde_json::to_string_pretty(&r)?)
}

fn synth(args: SynthArgs) -> Result<()> {
    let fixture = synthetic::build(&SyntheticConfig {
        seed: args.seed,
        conversations: args.conversations,
        dim: args.dim,
        ..SyntheticConfig::default()
    });
    let config = fixture.write(&args.out)?;
    out(&serde_json::json!({
        "corpus": config.corpus,
        "mock_providers": config.providers.mock_dir,
        "config": args.out.join("config.toml"),
        "utterances": fixture.utterance_count(),
    })
    .to_string())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Explain(a) => explain(a),
        Command::Report(a) => report(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
    };
    if let Err(e) = result {
        let broken_pipe = e
            .downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe);
        if broken_pipe {
            return;
        }
        log::debug!("{e:?}");
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
