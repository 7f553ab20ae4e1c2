//! Word level: tokenization, frozen token encoders, and mean pooling of
//! token vectors into one vector per message.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::RawMessage;
use crate::error::{MeltError, Result};
use crate::graph::{Graph, Var};
use crate::params::{gaussian, ParamGroup, ParamKey, ParamSet};
use crate::tensor::{mean_of_rows, Scalar, Tensor};

pub const DEFAULT_TOKEN_SEQ_LEN: usize = 50;
pub const DEFAULT_BUCKETS: usize = 65_536;
pub const EMPTY_TOKEN: &str = "<empty>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub truncated: bool,
}

/// Lowercases, splits on whitespace, and splits ASCII punctuation into
/// tokens of its own. At most `max_len` tokens are kept.
pub fn tokenize(text: &str, max_len: usize) -> TokenSequence {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars().flat_map(char::to_lowercase) {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            tokens.push(cur);
        }
    }
    if tokens.is_empty() {
        return TokenSequence {
            tokens: vec![EMPTY_TOKEN.to_string()],
            truncated: false,
        };
    }
    let truncated = tokens.len() > max_len;
    tokens.truncate(max_len.max(1));
    TokenSequence { tokens, truncated }
}

/// 64-bit FNV-1a over the UTF-8 bytes.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub trait WordEncoder<T: Scalar> {
    fn dim(&self) -> usize;

    /// One vector per token.
    fn encode_tokens(&self, toks: &TokenSequence) -> Vec<Vec<T>>;
}

/// Elementwise mean of token vectors.
pub fn pool_message<T: Scalar>(vectors: &[Vec<T>]) -> Result<Vec<T>> {
    let Some(first) = vectors.first() else {
        return Err(MeltError::Empty("pool_message"));
    };
    mean_of_rows(vectors.iter().map(Vec::as_slice), first.len()).ok_or(MeltError::Empty("pool_message"))
}

/// Hashed token embeddings: `table[fnv1a64(token) mod buckets]`.
#[derive(Clone, Debug)]
pub struct HashEmbeddingEncoder<T> {
    buckets: usize,
    dim: usize,
    seed: u64,
    token_seq_len: usize,
    table: ParamSet<T>,
}

impl<T: Scalar> HashEmbeddingEncoder<T> {
    /// Table entries are `N(0, 1)/√dim`, drawn from a ChaCha8 stream seeded
    /// with `seed`. The table starts frozen.
    pub fn new(buckets: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = ParamSet::new(ParamGroup::Word);
        table.add(
            "word.embeddings",
            gaussian(&mut rng, &[buckets, dim], 1.0 / (dim as f64).sqrt()),
        );
        table.set_trainable(false);
        Self {
            buckets,
            dim,
            seed,
            token_seq_len: DEFAULT_TOKEN_SEQ_LEN,
            table,
        }
    }

    pub fn with_token_seq_len(mut self, n: usize) -> Self {
        self.token_seq_len = n;
        self
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token) % self.buckets as u64) as usize
    }

    pub fn bucket_ids(&self, toks: &TokenSequence) -> Vec<usize> {
        toks.tokens.iter().map(|t| self.bucket(t)).collect()
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table.params()[0].value
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.table
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.table
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        tokenize(text, self.token_seq_len)
    }
}

impl<T: Scalar> WordEncoder<T> for HashEmbeddingEncoder<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_tokens(&self, toks: &TokenSequence) -> Vec<Vec<T>> {
        let table = self.table();
        self.bucket_ids(toks)
            .into_iter()
            .map(|b| table.row_slice(b).to_vec())
            .collect()
    }
}

/// Externally computed message vectors keyed by `message_id`, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedVectorStore {
    dim: usize,
    ids: Vec<String>,
    vectors: HashMap<String, Vec<f32>>,
}

impl PrecomputedVectorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f32>) -> Result<()> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(MeltError::Shape {
                op: "precomputed vector",
                lhs: vec![self.dim],
                rhs: vec![v.len()],
            });
        }
        if self.vectors.insert(id.clone(), v).is_some() {
            return Err(MeltError::DuplicateMessage(id));
        }
        self.ids.push(id);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    /// Ids from `wanted` that have no vector.
    pub fn missing<'a>(&self, wanted: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        wanted
            .into_iter()
            .filter(|id| !self.vectors.contains_key(*id))
            .map(str::to_string)
            .collect()
    }

    /// Writes `#dim=<d>` then `id<TAB>hex(le f32 bytes)` per vector.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| MeltError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| MeltError::io(path, e);
        writeln!(w, "#dim={}", self.dim).map_err(io)?;
        for id in &self.ids {
            let bytes: Vec<u8> = self.vectors[id].iter().flat_map(|x| x.to_le_bytes()).collect();
            writeln!(w, "{id}\t{}", hex::encode(bytes)).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Loads a vector file; `expected_dim` is checked against the header.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| MeltError::io(path, e))?;
        let parse = |line: usize, msg: String| MeltError::Parse {
            path: PathBuf::from(path),
            line,
            msg,
        };
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| parse(1, "missing #dim header".into()))?
            .map_err(|e| MeltError::io(path, e))?;
        let dim: usize = header
            .trim()
            .strip_prefix("#dim=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| parse(1, format!("bad header `{header}`")))?;
        if let Some(want) = expected_dim {
            if want != dim {
                return Err(MeltError::Dimension {
                    path: path.into(),
                    line: 1,
                    expected: want,
                    found: dim,
                });
            }
        }
        let mut store = Self::new(dim);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| MeltError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, hexdata) = line
                .split_once('\t')
                .ok_or_else(|| parse(lineno, "expected `id<TAB>hex`".into()))?;
            let bytes = hex::decode(hexdata.trim()).map_err(|e| parse(lineno, e.to_string()))?;
            if bytes.len() % 4 != 0 {
                return Err(parse(lineno, "hex payload is not whole f32 values".into()));
            }
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if v.len() != dim {
                return Err(MeltError::Dimension {
                    path: path.into(),
                    line: lineno,
                    expected: dim,
                    found: v.len(),
                });
            }
            if store.vectors.contains_key(id) {
                return Err(parse(lineno, format!("duplicate id `{id}`")));
            }
            store.insert(id, v)?;
        }
        Ok(store)
    }
}

/// How to rebuild the word level; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WordSpec {
    Hash {
        buckets: usize,
        dim: usize,
        seed: u64,
        token_seq_len: usize,
    },
    Precomputed {
        path: PathBuf,
        dim: usize,
    },
}

/// The word level used by the pipeline. Frozen by default; unfreezing makes
/// the hash table (or, for precomputed vectors, a `d×d` adapter initialized to
/// the identity) trainable.
#[derive(Clone, Debug)]
pub enum WordLevel {
    Hash(HashEmbeddingEncoder<f32>),
    Precomputed {
        store: PrecomputedVectorStore,
        path: PathBuf,
        adapter: ParamSet<f32>,
    },
}

/// Graph handles for a bound word level.
#[derive(Clone, Copy, Debug)]
pub struct BoundWord {
    table_or_adapter: Var,
}

impl WordLevel {
    pub fn hash(buckets: usize, dim: usize, seed: u64) -> Self {
        WordLevel::Hash(HashEmbeddingEncoder::new(buckets, dim, seed))
    }

    pub fn precomputed(path: &Path, dim: Option<usize>) -> Result<Self> {
        let store = PrecomputedVectorStore::load(path, dim)?;
        let mut adapter = ParamSet::new(ParamGroup::Word);
        adapter.add("word.adapter", Tensor::identity(store.dim()));
        adapter.set_trainable(false);
        Ok(WordLevel::Precomputed {
            store,
            path: path.to_path_buf(),
            adapter,
        })
    }

    pub fn from_spec(spec: &WordSpec) -> Result<Self> {
        match spec {
            WordSpec::Hash {
                buckets,
                dim,
                seed,
                token_seq_len,
            } => Ok(WordLevel::Hash(
                HashEmbeddingEncoder::new(*buckets, *dim, *seed).with_token_seq_len(*token_seq_len),
            )),
            WordSpec::Precomputed { path, dim } => Self::precomputed(path, Some(*dim)),
        }
    }

    pub fn spec(&self) -> WordSpec {
        match self {
            WordLevel::Hash(e) => WordSpec::Hash {
                buckets: e.buckets,
                dim: e.dim,
                seed: e.seed,
                token_seq_len: e.token_seq_len,
            },
            WordLevel::Precomputed { store, path, .. } => WordSpec::Precomputed {
                path: path.clone(),
                dim: store.dim(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            WordLevel::Hash(e) => e.dim,
            WordLevel::Precomputed { store, .. } => store.dim(),
        }
    }

    pub fn params(&self) -> &ParamSet<f32> {
        match self {
            WordLevel::Hash(e) => &e.table,
            WordLevel::Precomputed { adapter, .. } => adapter,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        match self {
            WordLevel::Hash(e) => &mut e.table,
            WordLevel::Precomputed { adapter, .. } => adapter,
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params_mut().set_trainable(!frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.params().params().iter().all(|p| !p.trainable)
    }

    /// The pooled message vector (mean of token vectors). Both the
    /// reconstruction label and the model input use this value.
    pub fn message_vector(&self, msg: &RawMessage) -> Result<Vec<f32>> {
        match self {
            WordLevel::Hash(e) => pool_message(&e.encode_tokens(&e.tokenize(&msg.text))),
            WordLevel::Precomputed { store, adapter, .. } => {
                let v = store
                    .get(&msg.message_id)
                    .ok_or_else(|| MeltError::UnknownMessage(msg.message_id.clone()))?;
                let a = &adapter.params()[0].value;
                Ok(Tensor::row(v.to_vec()).matmul(a)?.into_data())
            }
        }
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, f32>) -> BoundWord {
        let p = &self.params().params()[0];
        let key = ParamKey {
            group: ParamGroup::Word,
            index: 0,
        };
        BoundWord {
            table_or_adapter: g.param(key, &p.value, p.trainable),
        }
    }

    /// Message vector as a `1×d` graph node, differentiable w.r.t. the word
    /// parameters. Forward value equals [`WordLevel::message_vector`].
    pub fn message_var(&self, g: &mut Graph<'_, f32>, bound: BoundWord, msg: &RawMessage) -> Result<Var> {
        match self {
            WordLevel::Hash(e) => {
                let ids = e.bucket_ids(&e.tokenize(&msg.text));
                let rows = g.gather_rows(bound.table_or_adapter, &ids)?;
                Ok(g.mean_rows(rows))
            }
            WordLevel::Precomputed { store, .. } => {
                let v = store
                    .get(&msg.message_id)
                    .ok_or_else(|| MeltError::UnknownMessage(msg.message_id.clone()))?;
                let c = g.constant(Tensor::row(v.to_vec()));
                g.matmul(c, bound.table_or_adapter)
            }
        }
    }
}
