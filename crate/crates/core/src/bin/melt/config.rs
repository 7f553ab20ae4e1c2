use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use melt::model::MeltConfig;
use melt::pretrain::PretrainConfig;
use melt::stance::FinetuneConfig;
use melt::word::{WordLevel, DEFAULT_BUCKETS, DEFAULT_TOKEN_SEQ_LEN};
use serde::{Deserialize, Serialize};

/// Everything a command needs besides its file paths. Loaded from an
/// optional TOML file, then overridden by `MELT_*` variables and flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub prep: PrepConfig,
    pub word: WordConfig,
    pub model: MeltConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    /// Users (in id order) whose last `dev_messages` messages are held out.
    /// Unset means one user in ten, at least one.
    pub dev_users: Option<usize>,
    pub dev_messages: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            dev_users: None,
            dev_messages: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WordConfig {
    /// `hash`, or `precomputed:<path>` for a TSV of message vectors.
    pub encoder: String,
    pub buckets: usize,
    pub seed: u64,
    pub token_seq_len: usize,
}

impl Default for WordConfig {
    fn default() -> Self {
        Self {
            encoder: "hash".into(),
            buckets: DEFAULT_BUCKETS,
            seed: 0,
            token_seq_len: DEFAULT_TOKEN_SEQ_LEN,
        }
    }
}

impl WordConfig {
    /// Builds the word level. Hash tables take the model width.
    pub fn build(&self, d_model: usize) -> Result<WordLevel> {
        if self.encoder == "hash" {
            let enc = melt::word::HashEmbeddingEncoder::new(self.buckets, d_model, self.seed)
                .with_token_seq_len(self.token_seq_len);
            return Ok(WordLevel::Hash(enc));
        }
        match self.encoder.strip_prefix("precomputed:") {
            Some(path) => Ok(WordLevel::precomputed(Path::new(path), None)?),
            None => bail!("unknown word encoder `{}` (expected hash or precomputed:<path>)", self.encoder),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| melt::MeltError::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    /// Prints the resolved configuration and stores it next to the outputs.
    pub fn echo(&self, out: &Path) -> Result<()> {
        let text = self.to_toml();
        println!("# resolved configuration\n{text}");
        let path = out.join("config.toml");
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(())
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> melt::MeltError {
    melt::MeltError::Io {
        path: PathBuf::from(path),
        source: e,
    }
}
