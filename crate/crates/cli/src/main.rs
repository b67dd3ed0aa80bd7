//! `meshquery` command-line entry point.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{AnalyzeInputs, Ctx};
use crate::config::{EmbedderKind, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "meshquery",
    version,
    about = "Next-query suggestion from search sessions"
)]
struct Cli {
    /// Directory that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment an event log into sessions, filter, hold out and split.
    Ingest {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Existing vocabulary; trained on the sessions when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        min_query_freq: Option<usize>,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        gap_seconds: Option<u64>,
    },
    /// Byte-pair tokenizer utilities.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Write the four behavioral hypotheses of each session as JSON lines.
    Hypotheses {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on an ingested corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<meshquery::model::Mode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate ranked suggestions with beam search.
    Suggest {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Also write the 4 x T mesh attention table of every session.
        #[arg(long)]
        export_attention: Option<PathBuf>,
    },
    /// Most-popular-suggestion baseline.
    #[command(subcommand)]
    Mps(MpsCmd),
    /// Score suggestions against held-out queries.
    Evaluate {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        suggestions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model whose embeddings drive BertF1.
        #[arg(long, requires = "vocab")]
        model: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        embedder: Option<EmbedderKind>,
    },
    /// Breakdowns over per-method evaluation reports.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic event log with planted rules.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Every query clicked; small-corpus memorization runs.
        #[arg(long)]
        overfit: bool,
    },
}

#[derive(Debug, Subcommand)]
enum TokenizerCmd {
    /// Learn merges from a text file with one item per line.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the ids of a text.
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        text: String,
    },
}

#[derive(Debug, Subcommand)]
enum MpsCmd {
    /// Count adjacent query pairs in the training sessions.
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Suggest {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Directory of per-method subdirectories holding sessions.tsv.
    #[arg(long)]
    reports: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evaluated sessions, for click and attention breakdowns.
    #[arg(long)]
    sessions: Option<PathBuf>,
    #[arg(long, requires_all = ["vocab", "sessions"])]
    model: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, requires_all = ["suggestions", "sessions"])]
    pool: Option<PathBuf>,
    #[arg(long)]
    suggestions: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<String>,
}

fn parse_mode(s: &str) -> Result<meshquery::model::Mode, String> {
    match s {
        "mesh" => Ok(meshquery::model::Mode::Mesh),
        "vanilla" => Ok(meshquery::model::Mode::Vanilla),
        _ => Err(format!("unknown mode {s:?} (expected mesh or vanilla)")),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = RunConfig::load(
        cli.config
            .as_deref()
            .map(|p| cli.workdir.join(p))
            .as_deref(),
    )?;
    apply_overrides(&mut config, &cli.command);
    let ctx = Ctx {
        workdir: cli.workdir,
        config,
    };
    match &cli.command {
        Command::Ingest {
            events, out, vocab, ..
        } => commands::ingest(&ctx, events, out, vocab.as_deref()),
        Command::Tokenizer(TokenizerCmd::Train {
            corpus,
            vocab_size,
            out,
        }) => commands::tokenizer_train(&ctx, corpus, *vocab_size, out),
        Command::Tokenizer(TokenizerCmd::Encode { vocab, text }) => {
            println!("{}", commands::tokenizer_encode(&ctx, vocab, text)?);
            Ok(())
        }
        Command::Hypotheses { sessions, out } => commands::hypotheses(&ctx, sessions, out),
        Command::Train {
            corpus,
            out,
            resume,
            ..
        } => commands::train(&ctx, corpus, out, resume.as_deref()),
        Command::Suggest {
            model,
            vocab,
            sessions,
            out,
            export_attention,
            ..
        } => commands::suggest(
            &ctx,
            model,
            vocab,
            sessions,
            out,
            export_attention.as_deref(),
        ),
        Command::Mps(MpsCmd::Build { corpus, out }) => commands::mps_build(&ctx, corpus, out),
        Command::Mps(MpsCmd::Suggest {
            pool,
            sessions,
            out,
            ..
        }) => commands::mps_suggest(&ctx, pool, sessions, out),
        Command::Evaluate {
            sessions,
            suggestions,
            out,
            model,
            vocab,
            ..
        } => commands::evaluate_cmd(
            &ctx,
            sessions,
            suggestions,
            out,
            model.as_deref(),
            vocab.as_deref(),
        ),
        Command::Analyze(a) => commands::analyze(
            &ctx,
            &AnalyzeInputs {
                reports: &a.reports,
                out: &a.out,
                sessions: a.sessions.as_deref(),
                model: a.model.as_deref(),
                vocab: a.vocab.as_deref(),
                pool: a.pool.as_deref(),
                suggestions: a.suggestions.as_deref(),
            },
        ),
        Command::Synth { out, overfit, .. } => commands::synth(&ctx, out, *overfit),
    }
}

fn apply_overrides(c: &mut RunConfig, cmd: &Command) {
    fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    match cmd {
        Command::Ingest {
            vocab_size,
            min_query_freq,
            max_tokens,
            gap_seconds,
            ..
        } => {
            set(&mut c.ingest.vocab_size, vocab_size);
            set(&mut c.ingest.min_query_freq, min_query_freq);
            set(&mut c.ingest.max_tokens, max_tokens);
            set(&mut c.ingest.gap_seconds, gap_seconds);
        }
        Command::Train {
            mode, steps, seed, ..
        } => {
            set(&mut c.model.mode, mode);
            set(&mut c.train.seed, seed);
            if steps.is_some() {
                c.train.max_steps = *steps;
            }
        }
        Command::Suggest {
            k, width, max_len, ..
        } => {
            set(&mut c.suggest.k, k);
            set(&mut c.suggest.width, width);
            set(&mut c.suggest.max_len, max_len);
        }
        Command::Mps(MpsCmd::Suggest { k, .. }) => set(&mut c.suggest.k, k),
        Command::Evaluate { ks, embedder, .. } => {
            set(&mut c.evaluate.ks, ks);
            set(&mut c.evaluate.embedder, embedder);
        }
        Command::Analyze(a) => set(&mut c.analyze.baseline, &a.baseline),
        Command::Synth { sessions, seed, .. } => {
            set(&mut c.synth.sessions, sessions);
            set(&mut c.synth.seed, seed);
        }
        _ => {}
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
