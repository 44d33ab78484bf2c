use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod report;

use config::{parse_assignment, RunConfig, CONFIG_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] patrep::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(patrep::Error::Config(_)) => 2,
            CliError::Missing(_) => 3,
            CliError::Core(patrep::Error::Numeric(_)) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "patrep", version, about = "Patient representations from bag-of-words clinical notes")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Config file of `key = value` lines under `[section]` headers.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Global seed; module seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding every artifact of a run.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Override any config key, e.g. `--set glove.dim=32`.
    #[arg(long = "set", global = true, value_parser = parse_assignment)]
    _set: Vec<(String, String)>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort and its planted relations.
    Generate,
    /// Build the vocabulary, observation eras and the patient split.
    Preprocess,
    /// Train GloVe on the training patients' observation notes.
    TrainGlove,
    /// Train the supervised sequence model.
    TrainRnn,
    /// Train the flat single-note model.
    TrainFlat,
    /// Fit a baseline model on the training patients.
    FitBaseline {
        #[arg(long, value_parser = ["tfidf", "lsa", "lda"])]
        kind: String,
    },
    /// Write patient vectors for one method.
    Represent {
        /// ea, tfidf, lsa, lda, rnn or wd
        #[arg(long)]
        method: String,
        /// Embedding for `ea`: glove, flat, rnn or a file path.
        #[arg(long, default_value = "glove")]
        embedding: String,
        /// Representations concatenated by `wd`.
        #[arg(long, value_delimiter = ',', default_value = "rnn,tfidf")]
        parts: Vec<String>,
    },
    /// Learning curves of stored representations.
    EvalCurves {
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Analogy-based relatedness of an embedding.
    EvalIntrinsic {
        #[arg(long, default_value = "glove")]
        embedding: String,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Note-level kNN evaluation.
    EvalNotes {
        /// ea (with --embedding) or tfidf
        #[arg(long, default_value = "ea")]
        method: String,
        #[arg(long, default_value = "glove")]
        embedding: String,
    },
    /// Render result tables and a learning-curve plot.
    Report,
}

fn command_overrides(cmd: &Command) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if let Command::EvalCurves { tasks, sizes, repeats, workers, .. } = cmd {
        if let Some(t) = tasks {
            out.push(("curves.tasks".to_string(), t.join(",")));
        }
        if let Some(s) = sizes {
            out.push(("curves.sizes".to_string(), s.iter().map(usize::to_string).collect::<Vec<_>>().join(",")));
        }
        if let Some(r) = repeats {
            out.push(("curves.repeats".to_string(), r.to_string()));
        }
        if let Some(w) = workers {
            out.push(("curves.workers".to_string(), w.to_string()));
        }
    }
    if let Command::EvalIntrinsic { top_k: Some(k), .. } = cmd {
        out.push(("intrinsic.top_k".to_string(), k.to_string()));
    }
    out
}

/// Every `--set` in command-line order. Clap keeps only one level's
/// occurrences of a global argument, so the raw arguments are rescanned.
fn all_assignments(args: &[String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        let value = match a.strip_prefix("--set") {
            Some("") => it.next().map(String::as_str),
            Some(rest) => rest.strip_prefix('='),
            None => None,
        };
        if let Some(kv) = value.and_then(|v| parse_assignment(v).ok()) {
            out.push(kv);
        }
    }
    out
}

fn run(cli: Cli, set: Vec<(String, String)>) -> Result<(), CliError> {
    let mut overrides = Vec::new();
    if let Some(seed) = cli.global.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    if let Some(dir) = &cli.global.workdir {
        overrides.push(("workdir".to_string(), dir.display().to_string()));
    }
    overrides.extend(set);
    overrides.extend(command_overrides(&cli.command));
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &overrides)?;
    println!("# resolved configuration\n{}", cfg.render());

    let ctx = commands::Context::new(cfg)?;
    match cli.command {
        Command::Generate => ctx.generate(),
        Command::Preprocess => ctx.preprocess(),
        Command::TrainGlove => ctx.train_glove(),
        Command::TrainRnn => ctx.train_rnn(),
        Command::TrainFlat => ctx.train_flat(),
        Command::FitBaseline { kind } => ctx.fit_baseline(&kind),
        Command::Represent { method, embedding, parts } => ctx.represent(&method, &embedding, &parts),
        Command::EvalCurves { methods, .. } => ctx.eval_curves(&methods),
        Command::EvalIntrinsic { embedding, .. } => ctx.eval_intrinsic(&embedding),
        Command::EvalNotes { method, embedding } => ctx.eval_notes(&method, &embedding),
        Command::Report => ctx.report(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, all_assignments(&args)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
