//! `gem`: build vocabularies, train, embed, evaluate, reconstruct and
//! inspect attention masks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gem_core::Pooling;

#[derive(Debug, Parser)]
#[command(name = "gem", version, about = "Bottleneck-token embeddings for a miniature transformer")]
pub struct Cli {
    /// Seed for every random choice; falls back to GEM_SEED, then 42.
    #[arg(long, global = true, env = "GEM_SEED")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = gem_core::corpus::DEFAULT_VOCAB_CAP)]
        cap: usize,
    },
    /// Train (or resume) a model.
    Train(TrainArgs),
    /// Embed every document of a file into JSONL.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_enum, default_value_t = PoolingArg::Mean)]
        pooling: PoolingArg,
        /// Mean-pool a plain causal pass instead of using special tokens.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a checkpoint on one suite.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        noise_rate: f64,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_enum, default_value_t = PoolingArg::Mean)]
        pooling: PoolingArg,
        #[arg(long)]
        baseline: bool,
    },
    /// Compress a text into its special tokens and decode it back.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
    /// Print the attention mask for a prefix/special/suffix layout.
    MaskDump {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
    },
    /// Write a synthetic training corpus and a disjoint held-out file.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        distinct: usize,
        #[arg(long, default_value_t = 32_000)]
        rows: usize,
        #[arg(long, default_value_t = 200)]
        held: usize,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// JSON file with generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON file mirroring the training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// CSV log path; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub init_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub p_raw: Option<f64>,
    #[arg(long = "k")]
    pub k_specials: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub lr_ntp: Option<f64>,
    #[arg(long)]
    pub lr_cl: Option<f64>,
    #[arg(long)]
    pub switch_step: Option<usize>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub dropout_rate_prefix: Option<f64>,
    #[arg(long)]
    pub reconstruct_share: Option<f64>,
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    #[arg(long)]
    pub symmetric: bool,
    #[arg(long)]
    pub vocab_cap: Option<usize>,
    /// Extra checkpoint after this many completed steps (repeatable).
    #[arg(long = "snapshot-step")]
    pub snapshot_steps: Vec<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Mean,
    Concat,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::Concat => Pooling::Concat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Retrieval,
    Sts,
    Ppl,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
