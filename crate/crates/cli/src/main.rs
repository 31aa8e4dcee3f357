mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use babylm_core::Error;

/// Pretraining, finetuning and analysis for small masked language models.
#[derive(Parser, Debug)]
#[command(name = "babylm-lab", version, about, arg_required_else_help = true)]
struct Cli {
    /// Worker threads (falls back to BABYLM_LAB_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Built-in profile: roberta, elc or mlsm.
    #[arg(long)]
    profile: Option<String>,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a tokenizer preset on a corpus.
    TrainTokenizer {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8000)]
        vocab_size: usize,
        /// Append this many [MASK-n] tokens (WordPiece presets only).
        #[arg(long)]
        mask_tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain with one of the three objectives.
    Pretrain {
        #[arg(long)]
        objective: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Existing tokenizer (default: train one, or the teacher's for mlsm).
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Teacher checkpoint (mlsm).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Semantic dictionary (mlsm).
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Continue from the state saved in --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimisation steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Learn a semantic dictionary over teacher hidden states.
    BuildDictionary {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a checkpoint on a downstream task across seeds.
    Finetune {
        #[arg(long)]
        task: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Directory with train.conll/test.conll (pos, ner) or train.tsv/test.tsv (ntc).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted labels against gold labels (one label per line).
    Evaluate {
        #[arg(long)]
        metric: String,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export layer-contribution weights of a layer-weighted checkpoint.
    AnalyzeLayers {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Top-k latent categories for target words and their overlaps.
    AnalyzeSemantics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        dict: PathBuf,
        /// TSV of `word<TAB>sentence<TAB>group`.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check of all three training losses.
    GradCheck {
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 24)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Usage problems exit with 1, everything else with 2.
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("BABYLM_LAB_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("BABYLM_LAB_THREADS must be a number, got `{v}`")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::TrainTokenizer { preset, corpus, vocab_size, mask_tokens, out } => {
            commands::train_tokenizer(&preset, &corpus, vocab_size, mask_tokens, &out)
        }
        Command::Pretrain { objective, config, corpus, out, tokenizer, teacher, dict, resume, max_steps } => {
            commands::pretrain(commands::PretrainArgs {
                objective,
                config,
                corpus,
                out,
                tokenizer,
                teacher,
                dict,
                resume,
                max_steps,
            })
        }
        Command::BuildDictionary { teacher, tokenizer, corpus, config, out } => {
            commands::build_dictionary(&teacher, tokenizer.as_deref(), &corpus, &config, &out)
        }
        Command::Finetune { task, checkpoint, tokenizer, data, seeds, epochs, lr, batch_size, out } => {
            commands::finetune(commands::FinetuneArgs {
                task,
                checkpoint,
                tokenizer,
                data,
                seeds,
                epochs,
                lr,
                batch_size,
                out,
            })
        }
        Command::Evaluate { metric, gold, pred, out } => commands::evaluate(&metric, &gold, &pred, out.as_deref()),
        Command::AnalyzeLayers { checkpoint, csv, svg } => commands::analyze_layers(&checkpoint, &csv, svg.as_deref()),
        Command::AnalyzeSemantics { checkpoint, tokenizer, dict, targets, top, out } => {
            commands::analyze_semantics(&checkpoint, tokenizer.as_deref(), &dict, &targets, top, &out)
        }
        Command::GradCheck { eps, coords, seed } => commands::grad_check(eps, coords, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
