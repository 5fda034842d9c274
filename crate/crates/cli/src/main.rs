mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unipact_core::CoreError;

#[derive(Parser, Debug)]
#[command(name = "unipact", version, about = "Synthetic ECG + EHR prognostic QA: data, training, evaluation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Config file (`[section]` headers, `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config entry, `section.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; takes precedence over UNIPACT_SEED and the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for scoring and gradient computation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the vocabulary of a cohort.
    BuildVocab {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `<data>/vocab.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage.
    Train(commands::TrainArgs),
    /// Score the test split and write a report.
    Eval(commands::EvalArgs),
    /// Same as `eval --ablate PLAN`.
    Ablate {
        #[arg(long)]
        plan: String,
        #[command(flatten)]
        eval: commands::EvalArgs,
    },
    /// Answer one question for one patient.
    Predict(commands::PredictArgs),
    /// Print a stored report.
    Report {
        /// A run directory or a `report.json` file.
        path: PathBuf,
    },
}

/// Errors as printed on stderr: `error: <kind>: <message>`.
#[derive(Debug)]
pub enum CliError {
    Core(CoreError),
    Usage(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::Usage(m) => m.clone(),
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.global.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let g = &cli.global;
    match cli.command {
        Command::GenData { out } => commands::gen_data(g, &out),
        Command::BuildVocab { data, out } => commands::build_vocab(g, &data, out.as_deref()),
        Command::Train(a) => commands::train(g, &a),
        Command::Eval(a) => commands::eval(g, &a),
        Command::Ablate { plan, mut eval } => {
            eval.ablate = Some(plan);
            commands::eval(g, &eval)
        }
        Command::Predict(a) => commands::predict(g, &a),
        Command::Report { path } => commands::report(&path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", single_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), single_line(&e.message()));
            ExitCode::FAILURE
        }
    }
}
