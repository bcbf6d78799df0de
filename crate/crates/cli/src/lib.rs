//! `propenc` command-line pipeline: synth → align → pair → split → train →
//! encode → index → search → truth → eval.
//!
//! Everything the binary does is reachable in-process through [`run`].

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use propenc::ErrorKind;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] propenc::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            2 => "data",
            _ => "numeric",
        }
    }

    /// Machine-readable form written to stderr.
    pub fn diagnostic(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        })
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(propenc::Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(propenc::Error::Json(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "propenc", version, about = "Proposition-level sentence encoder pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArg {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    A,
    B,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Prop,
    Sentence,
    Doc,
}

impl From<LevelArg> for propenc::index::Level {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Prop => Self::Proposition,
            LevelArg::Sentence => Self::Sentence,
            LevelArg::Doc => Self::Document,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    Lexical,
    Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved configuration as TOML.
    Config {
        /// Also write it to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Generate the synthetic sentence-pair corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Attach token masks to proposition texts.
    Align {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Label bidirectionally entailing proposition pairs.
    Pair(PairArgs),
    /// Split records into train/val/test files.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train an encoder; writes the best checkpoint and a loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Embed propositions with a trained checkpoint.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        side: SideArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Build a proposition index from an embeddings file.
    Index {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Rank index entries for stored query embeddings or an ad-hoc sentence.
    Search(SearchArgs),
    /// Ground-truth file from labeled pairs.
    Truth {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Compute retrieval and similarity metrics.
    Eval(EvalArgs),
    /// Run align → pair → split → train → encode → index → search → eval.
    Pipeline {
        /// Raw records; a synthetic corpus is generated when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        work_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub oracle: Option<OracleArg>,
    /// Program and arguments of an external oracle, whitespace-separated.
    #[arg(long)]
    pub oracle_cmd: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Drop records without any positive pair.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub require_positive: bool,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Embeddings file whose records are used as queries.
    #[arg(long, conflicts_with_all = ["sentence", "mask"])]
    pub queries: Option<PathBuf>,
    #[arg(long, requires_all = ["sentence", "mask"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub sentence: Option<String>,
    /// Token mask as a 0/1 string, e.g. `0111000`.
    #[arg(long, requires = "checkpoint")]
    pub mask: Option<String>,
    #[arg(short = 'k', long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value = "prop")]
    pub level: LevelArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Conditional-similarity instances (JSONL); needs `--checkpoint`.
    #[arg(long, requires = "checkpoint")]
    pub csts: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Query embeddings from a generated segmentation; enables fuzzy matching.
    #[arg(long, requires = "gold_queries")]
    pub generated_queries: Option<PathBuf>,
    /// Query embeddings of the gold propositions the truth file refers to.
    #[arg(long)]
    pub gold_queries: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub theta: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

/// Runs a parsed command and returns its JSON summary.
pub fn run(cli: Cli) -> CliResult<serde_json::Value> {
    commands::dispatch(cli.command)
}

/// Parses `args` (including the program name) and runs; the binary's body.
pub fn run_args<I, T>(args: I) -> CliResult<serde_json::Value>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli)
}
