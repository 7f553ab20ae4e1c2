//! `melt`: corpus preparation, message-level pre-training, stance
//! fine-tuning and evaluation.
//!
//! Exit codes: 0 success, 2 bad input or configuration, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "melt", version, about = "Message-level transformer for user-level stance detection")]
struct Cli {
    /// TOML configuration; flags and MELT_* variables take precedence.
    #[arg(long, global = true, env = "MELT_CONFIG")]
    config: Option<PathBuf>,

    /// Seed for pre-training and fine-tuning.
    #[arg(long, global = true, env = "MELT_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Chunk a corpus into fixed-length message sequences.
    Prep(PrepArgs),
    /// Masked message-vector reconstruction pre-training.
    Pretrain(PretrainArgs),
    /// Stance fine-tuning, per target or pooled.
    Finetune(FinetuneArgs),
    /// Score a predictions CSV against gold stance labels.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct PrepArgs {
    /// Corpus JSONL (`user_id`, `message_id`, `timestamp`, `text`).
    #[arg(long, env = "MELT_INPUT")]
    input: PathBuf,
    #[arg(long, env = "MELT_OUT")]
    out: PathBuf,
    /// Slots per chunk.
    #[arg(long, env = "MELT_MAX_SEQ")]
    max_seq: Option<usize>,
    #[arg(long, env = "MELT_DEV_USERS")]
    dev_users: Option<usize>,
    #[arg(long, env = "MELT_DEV_MESSAGES")]
    dev_messages: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Encoder layers (2 and 6 are the usual variants).
    #[arg(long, env = "MELT_LAYERS")]
    layers: Option<usize>,
    #[arg(long, env = "MELT_D_MODEL")]
    d_model: Option<usize>,
    #[arg(long, env = "MELT_FF_DIM")]
    ff_dim: Option<usize>,
    #[arg(long, env = "MELT_HEADS")]
    heads: Option<usize>,
    #[arg(long, env = "MELT_MODEL_DROPOUT")]
    model_dropout: Option<f64>,
    #[arg(long, env = "MELT_INIT_STD")]
    init_std: Option<f64>,
    /// Drop the learned position embeddings.
    #[arg(long, env = "MELT_NO_POSITIONS")]
    no_positions: bool,
}

#[derive(Args, Debug, Default)]
struct WordArgs {
    /// `hash` or `precomputed:<path>`.
    #[arg(long, env = "MELT_WORD")]
    word: Option<String>,
    #[arg(long, env = "MELT_BUCKETS")]
    buckets: Option<usize>,
    #[arg(long, env = "MELT_WORD_SEED")]
    word_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Directory written by `prep`.
    #[arg(long, env = "MELT_DATA")]
    data: PathBuf,
    #[arg(long, env = "MELT_OUT")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    word: WordArgs,
    #[arg(long, env = "MELT_LR")]
    lr: Option<f64>,
    #[arg(long, env = "MELT_WEIGHT_DECAY")]
    weight_decay: Option<f64>,
    #[arg(long, env = "MELT_WARMUP")]
    warmup: Option<u64>,
    #[arg(long, env = "MELT_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "MELT_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "MELT_CLIP_NORM")]
    clip_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Melt,
    Word,
    WordHistory,
    Mfc,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Pre-trained checkpoint; not read with --rand-init.
    #[arg(long, env = "MELT_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Start from a randomly initialized encoder.
    #[arg(long, env = "MELT_RAND_INIT")]
    rand_init: bool,
    #[arg(long, value_enum, env = "MELT_ARCH")]
    arch: Option<ArchArg>,
    /// Stance JSONL used for training.
    #[arg(long, env = "MELT_TRAIN")]
    train: PathBuf,
    /// Stance JSONL used for early stopping.
    #[arg(long, env = "MELT_DEV")]
    dev: PathBuf,
    /// Stance JSONL to predict; defaults to the dev file.
    #[arg(long, env = "MELT_TEST")]
    test: Option<PathBuf>,
    /// Corpus JSONL holding the authors' earlier messages.
    #[arg(long, env = "MELT_HISTORY")]
    history: Option<PathBuf>,
    #[arg(long, env = "MELT_OUT")]
    out: PathBuf,
    #[arg(long, env = "MELT_FREEZE_WORD", conflicts_with = "unfreeze_word")]
    freeze_word: bool,
    #[arg(long, env = "MELT_UNFREEZE_WORD")]
    unfreeze_word: bool,
    /// Sequence length including the target message.
    #[arg(long, env = "MELT_HISTORY_LEN")]
    history_len: Option<usize>,
    /// Repeat the run for each history length and write sweep.csv.
    #[arg(long, value_delimiter = ',', env = "MELT_HISTORY_SWEEP", conflicts_with = "history_len")]
    history_sweep: Option<Vec<usize>>,
    /// One run on all targets instead of one run per target.
    #[arg(long, env = "MELT_POOLED")]
    pooled: bool,
    /// Concurrent per-target runs; output order does not depend on it.
    #[arg(long, default_value_t = 1, env = "MELT_JOBS")]
    jobs: usize,
    #[arg(long, env = "MELT_FT_LR")]
    lr: Option<f64>,
    #[arg(long, env = "MELT_FT_WEIGHT_DECAY")]
    weight_decay: Option<f64>,
    #[arg(long, env = "MELT_FT_DROPOUT")]
    dropout: Option<f64>,
    #[arg(long, env = "MELT_FT_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "MELT_MAX_EPOCHS")]
    max_epochs: Option<usize>,
    #[arg(long, env = "MELT_PATIENCE")]
    patience: Option<usize>,
    /// Grid over learning rates; the lowest dev loss wins.
    #[arg(long, value_delimiter = ',', env = "MELT_LR_GRID")]
    lr_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', env = "MELT_WD_GRID")]
    wd_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', env = "MELT_DROPOUT_GRID")]
    dropout_grid: Option<Vec<f64>>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    word: WordArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// CSV written by `finetune`.
    #[arg(long, env = "MELT_PREDICTIONS")]
    predictions: PathBuf,
    /// Stance JSONL with the gold labels.
    #[arg(long, env = "MELT_GOLD")]
    gold: PathBuf,
    /// Add the all-examples-pooled aggregate row.
    #[arg(long, env = "MELT_POOLED")]
    pooled: bool,
    /// Also write the table as CSV.
    #[arg(long, env = "MELT_OUT")]
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ModelArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.model.n_layers, self.layers);
        set(&mut c.model.d_model, self.d_model);
        set(&mut c.model.ff_dim, self.ff_dim);
        set(&mut c.model.n_heads, self.heads);
        set(&mut c.model.dropout, self.model_dropout);
        set(&mut c.model.init_std, self.init_std);
        if self.no_positions {
            c.model.positions = false;
        }
    }
}

impl WordArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.word.encoder, self.word.clone());
        set(&mut c.word.buckets, self.buckets);
        set(&mut c.word.seed, self.word_seed);
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut c = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        c.pretrain.seed = s;
        c.finetune.seed = s;
    }
    match &cli.command {
        Command::Prep(a) => {
            set(&mut c.model.max_seq, a.max_seq);
            if a.dev_users.is_some() {
                c.prep.dev_users = a.dev_users;
            }
            set(&mut c.prep.dev_messages, a.dev_messages);
        }
        Command::Pretrain(a) => {
            a.model.apply(&mut c);
            a.word.apply(&mut c);
            let p = &mut c.pretrain;
            set(&mut p.base_lr, a.lr);
            set(&mut p.weight_decay, a.weight_decay);
            set(&mut p.warmup_steps, a.warmup);
            set(&mut p.epochs, a.epochs);
            set(&mut p.batch_size, a.batch_size);
            if a.clip_norm.is_some() {
                p.clip_norm = a.clip_norm;
            }
        }
        Command::Finetune(a) => {
            a.model.apply(&mut c);
            a.word.apply(&mut c);
            let f = &mut c.finetune;
            set(&mut f.lr, a.lr);
            set(&mut f.weight_decay, a.weight_decay);
            set(&mut f.dropout, a.dropout);
            set(&mut f.batch_size, a.batch_size);
            set(&mut f.max_epochs, a.max_epochs);
            set(&mut f.patience, a.patience);
            set(&mut f.history_len, a.history_len);
            if a.unfreeze_word {
                f.unfreeze_word = true;
            }
            if a.freeze_word {
                f.unfreeze_word = false;
            }
        }
        Command::Evaluate(_) => {}
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::Prep(a) => commands::prep(&cfg, &a.input, &a.out),
        Command::Pretrain(a) => commands::pretrain(&cfg, &a.data, &a.out),
        Command::Finetune(a) => {
            let arch = match a.arch {
                Some(ArchArg::Melt) | None => commands::Arch::Melt,
                Some(ArchArg::Word) => commands::Arch::Word,
                Some(ArchArg::WordHistory) => commands::Arch::WordHistory,
                Some(ArchArg::Mfc) => commands::Arch::Mfc,
            };
            if arch == commands::Arch::Melt && a.checkpoint.is_none() && !a.rand_init {
                anyhow::bail!(melt::MeltError::Config("--checkpoint is required unless --rand-init is given".into()));
            }
            commands::finetune(
                &cfg,
                &commands::FinetunePlan {
                    arch,
                    checkpoint: if a.rand_init { None } else { a.checkpoint },
                    word_override: a.word.word.is_some(),
                    train: a.train,
                    dev: a.dev,
                    test: a.test,
                    history: a.history,
                    out: a.out,
                    sweep: a.history_sweep,
                    pooled: a.pooled,
                    jobs: a.jobs.max(1),
                    lr_grid: a.lr_grid,
                    wd_grid: a.wd_grid,
                    dropout_grid: a.dropout_grid,
                },
            )
        }
        Command::Evaluate(a) => commands::evaluate(&a.predictions, &a.gold, a.pooled, a.out.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<melt::MeltError>())
        .any(melt::MeltError::is_numeric);
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
