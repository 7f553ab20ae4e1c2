//! Message ingestion, per-user chunking, masking plans, and fine-tuning
//! sequence assembly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeltError, Result};

pub const MAX_HISTORY: usize = 40;
pub const DEFAULT_BATCH_SIZE: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMessage {
    pub user_id: String,
    pub message_id: String,
    pub timestamp: i64,
    pub text: String,
}

/// All messages, grouped by user (users in id order) and sorted by
/// `(timestamp, message_id)` within a user.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    messages: Vec<RawMessage>,
    users: Vec<(String, std::ops::Range<usize>)>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_messages(mut messages: Vec<RawMessage>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(messages.len());
        for m in &messages {
            if !seen.insert(m.message_id.as_str()) {
                return Err(MeltError::DuplicateMessage(m.message_id.clone()));
            }
        }
        messages.sort_by(|a, b| {
            (&a.user_id, a.timestamp, &a.message_id).cmp(&(&b.user_id, b.timestamp, &b.message_id))
        });
        let mut users: Vec<(String, std::ops::Range<usize>)> = Vec::new();
        for (i, m) in messages.iter().enumerate() {
            match users.last_mut() {
                Some((u, r)) if *u == m.user_id => r.end = i + 1,
                _ => users.push((m.user_id.clone(), i..i + 1)),
            }
        }
        let by_id = messages
            .iter()
            .enumerate()
            .map(|(i, m)| (m.message_id.clone(), i))
            .collect();
        Ok(Self {
            messages,
            users,
            by_id,
        })
    }

    pub fn messages(&self) -> &[RawMessage] {
        &self.messages
    }

    pub fn message(&self, idx: usize) -> &RawMessage {
        &self.messages[idx]
    }

    pub fn index_of(&self, message_id: &str) -> Option<usize> {
        self.by_id.get(message_id).copied()
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    /// `(user_id, message indices in temporal order)` per user.
    pub fn users(&self) -> impl Iterator<Item = (&str, Vec<usize>)> + '_ {
        self.users.iter().map(|(u, r)| (u.as_str(), r.clone().collect()))
    }

    pub fn user_messages(&self, user_id: &str) -> &[RawMessage] {
        match self.users.binary_search_by(|(u, _)| u.as_str().cmp(user_id)) {
            Ok(i) => &self.messages[self.users[i].1.clone()],
            Err(_) => &[],
        }
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| MeltError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MeltError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| MeltError::Parse {
            path: PathBuf::from(path),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| MeltError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| MeltError::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| MeltError::io(path, e))?;
    }
    w.flush().map_err(|e| MeltError::io(path, e))
}

/// Reads a corpus JSONL file (`user_id`, `message_id`, `timestamp`, `text`).
pub fn ingest_jsonl(path: &Path) -> Result<Corpus> {
    Corpus::from_messages(read_jsonl(path)?)
}

/// One slot of a sequence chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Real(usize),
    Pad,
}

/// A fixed-length window of one user's messages. Real slots hold corpus
/// indices in temporal order; PAD slots only ever form a trailing block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceChunk {
    pub user_id: String,
    pub origin: usize,
    pub len: usize,
    pub real: Vec<usize>,
}

impl SequenceChunk {
    pub fn slot(&self, i: usize) -> Slot {
        match self.real.get(i) {
            Some(&m) => Slot::Real(m),
            None => Slot::Pad,
        }
    }

    pub fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        (0..self.len).map(|i| self.slot(i))
    }

    pub fn pad_count(&self) -> usize {
        self.len - self.real.len()
    }

    /// True for real slots, false for PAD.
    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.len).map(|i| i < self.real.len()).collect()
    }
}

/// Splits a temporally sorted history into chunks of exactly `max_len`
/// slots. A short final chunk is backfilled with the last messages of the
/// previous chunk; a user with fewer than `max_len` messages gets one
/// PAD-extended chunk.
pub fn build_chunks(user_id: &str, history: &[usize], max_len: usize) -> Vec<SequenceChunk> {
    let n = history.len();
    if n == 0 || max_len == 0 {
        return Vec::new();
    }
    let chunk = |origin: usize, real: &[usize]| SequenceChunk {
        user_id: user_id.to_string(),
        origin,
        len: max_len,
        real: real.to_vec(),
    };
    if n < max_len {
        return vec![chunk(0, history)];
    }
    let count = n.div_ceil(max_len);
    (0..count)
        .map(|i| {
            let start = if i + 1 == count { n - max_len } else { i * max_len };
            chunk(i, &history[start..start + max_len])
        })
        .collect()
}

/// Chunks every user of `corpus`, in user-id order.
pub fn chunk_corpus(corpus: &Corpus, max_len: usize) -> Vec<SequenceChunk> {
    corpus
        .users()
        .flat_map(|(u, idx)| build_chunks(u, &idx, max_len))
        .collect()
}

/// Order-stable batches; the last one may be short.
pub fn batch_chunks<C>(chunks: &[C], batch_size: usize) -> Vec<&[C]> {
    chunks.chunks(batch_size.max(1)).collect()
}

/// Per-slot masking decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotAction {
    Keep,
    MaskToken,
    UnchangedPredict,
    /// Input replaced by the vector of another real message (corpus index).
    RandomReplace(usize),
}

impl SlotAction {
    pub fn is_selected(self) -> bool {
        self != SlotAction::Keep
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub select_prob: f64,
    pub mask_prob: f64,
    pub unchanged_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_prob: 0.8,
            unchanged_prob: 0.1,
        }
    }
}

/// Masking decisions for one chunk. Every selected slot's reconstruction
/// target is the pooled vector of the original message in that slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub actions: Vec<SlotAction>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn all_keep(len: usize) -> Self {
        Self {
            actions: vec![SlotAction::Keep; len],
            seed: 0,
        }
    }

    pub fn selected_slots(&self) -> Vec<usize> {
        self.actions
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_selected())
            .map(|(i, _)| i)
            .collect()
    }

    /// `(slot, corpus index of the original message)` for each selected slot.
    pub fn targets(&self, chunk: &SequenceChunk) -> Vec<(usize, usize)> {
        self.selected_slots()
            .into_iter()
            .filter_map(|s| match chunk.slot(s) {
                Slot::Real(m) => Some((s, m)),
                Slot::Pad => None,
            })
            .collect()
    }

    pub fn check_aligned(&self, chunk: &SequenceChunk) -> Result<()> {
        if self.actions.len() != chunk.len {
            return Err(MeltError::PlanMismatch(format!(
                "plan has {} slots, chunk has {}",
                self.actions.len(),
                chunk.len
            )));
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.is_selected() && chunk.slot(i) == Slot::Pad {
                return Err(MeltError::PlanMismatch(format!("PAD slot {i} is selected")));
            }
        }
        Ok(())
    }
}

/// Seeded random stream used for masking; plans record its seed.
pub struct MaskRng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl MaskRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Distinct real messages present in a batch, sorted; the pool for random
/// replacement.
pub fn replacement_pool(batch: &[SequenceChunk]) -> Vec<usize> {
    let mut pool: Vec<usize> = batch.iter().flat_map(|c| c.real.iter().copied()).collect();
    pool.sort_unstable();
    pool.dedup();
    pool
}

/// Independently selects each real slot with `select_prob`; a selected slot
/// becomes MASK (`mask_prob`), stays unchanged (`unchanged_prob`), or takes
/// the vector of a uniformly drawn *different* message from `pool`.
/// If the pool has no other message the slot is masked instead.
pub fn apply_masking(
    chunk: &SequenceChunk,
    rng: &mut MaskRng,
    pool: &[usize],
    cfg: &MaskingConfig,
) -> Result<MaskPlan> {
    if chunk.real.is_empty() {
        return Err(MeltError::Empty("chunk has no real slots"));
    }
    let mut actions = vec![SlotAction::Keep; chunk.len];
    for (slot, &own) in chunk.real.iter().enumerate() {
        if rng.rng.random::<f64>() >= cfg.select_prob {
            continue;
        }
        let r = rng.rng.random::<f64>();
        actions[slot] = if r < cfg.mask_prob {
            SlotAction::MaskToken
        } else if r < cfg.mask_prob + cfg.unchanged_prob {
            SlotAction::UnchangedPredict
        } else {
            let own_pos = pool.binary_search(&own).ok();
            let others = pool.len() - usize::from(own_pos.is_some());
            if others == 0 {
                SlotAction::MaskToken
            } else {
                let mut j = rng.rng.random_range(0..others);
                if let Some(p) = own_pos {
                    if j >= p {
                        j += 1;
                    }
                }
                SlotAction::RandomReplace(pool[j])
            }
        };
    }
    Ok(MaskPlan {
        actions,
        seed: rng.seed,
    })
}

/// Plans for a batch drawn from one stream seeded with `seed`.
pub fn mask_batch(batch: &[SequenceChunk], seed: u64, cfg: &MaskingConfig) -> Result<Vec<MaskPlan>> {
    let mut rng = MaskRng::new(seed);
    let pool = replacement_pool(batch);
    batch.iter().map(|c| apply_masking(c, &mut rng, &pool, cfg)).collect()
}

/// Plans for consecutive batches of `batch_size`, continuing one stream.
pub fn mask_chunks(
    chunks: &[SequenceChunk],
    batch_size: usize,
    seed: u64,
    cfg: &MaskingConfig,
) -> Result<Vec<MaskPlan>> {
    let mut rng = MaskRng::new(seed);
    let mut out = Vec::with_capacity(chunks.len());
    for batch in batch_chunks(chunks, batch_size) {
        let pool = replacement_pool(batch);
        for c in batch {
            out.push(apply_masking(c, &mut rng, &pool, cfg)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Against = 0,
    None = 1,
    Favor = 2,
}

impl Stance {
    pub const ALL: [Stance; 3] = [Stance::Against, Stance::None, Stance::Favor];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Stance {
        Self::ALL[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stance::Against => "against",
            Stance::None => "none",
            Stance::Favor => "favor",
        }
    }
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stance {
    type Err = MeltError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "against" => Ok(Stance::Against),
            "none" => Ok(Stance::None),
            "favor" => Ok(Stance::Favor),
            _ => Err(MeltError::UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StanceTarget {
    Abortion,
    Atheism,
    Climate,
    Clinton,
    Feminism,
}

impl StanceTarget {
    pub const ALL: [StanceTarget; 5] = [
        StanceTarget::Abortion,
        StanceTarget::Atheism,
        StanceTarget::Climate,
        StanceTarget::Clinton,
        StanceTarget::Feminism,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StanceTarget::Abortion => "abortion",
            StanceTarget::Atheism => "atheism",
            StanceTarget::Climate => "climate",
            StanceTarget::Clinton => "clinton",
            StanceTarget::Feminism => "feminism",
        }
    }
}

impl fmt::Display for StanceTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StanceTarget {
    type Err = MeltError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| MeltError::UnknownTarget(s.to_string()))
    }
}

/// One line of a stance JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StanceRecord {
    pub user_id: String,
    pub message_id: String,
    pub timestamp: i64,
    pub text: String,
    pub stance_target: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StanceExample {
    pub target: RawMessage,
    pub label: Stance,
    pub stance_target: StanceTarget,
    /// Earlier messages of the same author, oldest first.
    pub history: Vec<RawMessage>,
}

impl StanceExample {
    pub fn id(&self) -> &str {
        &self.target.message_id
    }

    /// Most recent `n` history messages, oldest first.
    pub fn recent_history(&self, n: usize) -> &[RawMessage] {
        &self.history[self.history.len().saturating_sub(n)..]
    }
}

/// Reads a stance JSONL file and attaches history from `history` (messages of
/// the same user strictly earlier than the target, excluding the target).
pub fn load_stance(path: &Path, history: Option<&Corpus>) -> Result<Vec<StanceExample>> {
    let records: Vec<StanceRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.message_id.clone()) {
            return Err(MeltError::DuplicateMessage(r.message_id));
        }
        let stance_target: StanceTarget = r.stance_target.parse()?;
        let label: Stance = r.label.parse()?;
        let target = RawMessage {
            user_id: r.user_id,
            message_id: r.message_id,
            timestamp: r.timestamp,
            text: r.text,
        };
        let hist = history
            .map(|c| history_before(c, &target, usize::MAX))
            .unwrap_or_default();
        out.push(StanceExample {
            target,
            label,
            stance_target,
            history: hist,
        });
    }
    Ok(out)
}

/// Up to `max` most recent messages of the target's author strictly before it.
pub fn history_before(corpus: &Corpus, target: &RawMessage, max: usize) -> Vec<RawMessage> {
    let msgs: Vec<RawMessage> = corpus
        .user_messages(&target.user_id)
        .iter()
        .filter(|m| m.timestamp < target.timestamp && m.message_id != target.message_id)
        .cloned()
        .collect();
    msgs[msgs.len().saturating_sub(max)..].to_vec()
}

/// A fine-tuning sequence: up to `len − 1` most recent history messages, then
/// the target message, then PAD.
#[derive(Clone, Debug)]
pub struct FinetuneSequence<'a> {
    pub messages: Vec<&'a RawMessage>,
    pub len: usize,
    pub target_slot: usize,
}

impl FinetuneSequence<'_> {
    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.len).map(|i| i < self.messages.len()).collect()
    }
}

pub fn build_finetune_sequence(ex: &StanceExample, max_len: usize) -> FinetuneSequence<'_> {
    let max_len = max_len.max(1);
    let mut messages: Vec<&RawMessage> = ex.recent_history(max_len - 1).iter().collect();
    messages.push(&ex.target);
    FinetuneSequence {
        target_slot: messages.len() - 1,
        messages,
        len: max_len,
    }
}

/// Corpus users split into train and held-out dev sequences: for the first
/// `dev_users` users (id order) the last `dev_messages` messages are set
/// aside as that user's dev sequence.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ChunkSplit {
    pub train: Vec<SequenceChunk>,
    pub dev: Vec<SequenceChunk>,
}

pub fn split_and_chunk(corpus: &Corpus, max_len: usize, dev_users: usize, dev_messages: usize) -> ChunkSplit {
    let mut split = ChunkSplit::default();
    for (u, (user, idx)) in corpus.users().enumerate() {
        let hold = if u < dev_users {
            dev_messages.min(idx.len().saturating_sub(1))
        } else {
            0
        };
        let cut = idx.len() - hold;
        split.train.extend(build_chunks(user, &idx[..cut], max_len));
        if hold > 0 {
            split.dev.extend(build_chunks(user, &idx[cut..], max_len));
        }
    }
    split
}

/// Summary counts written by `prep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkStats {
    pub users: usize,
    pub messages: usize,
    pub chunks: usize,
    pub dev_chunks: usize,
    pub pad_slots: usize,
}

impl ChunkStats {
    pub fn of(corpus: &Corpus, split: &ChunkSplit) -> Self {
        Self {
            users: corpus.user_count(),
            messages: corpus.len(),
            chunks: split.train.len(),
            dev_chunks: split.dev.len(),
            pad_slots: split.train.iter().chain(&split.dev).map(SequenceChunk::pad_count).sum(),
        }
    }
}

/// Groups any items by stance target, preserving order within a group.
pub fn group_by_target<T, F: Fn(&T) -> StanceTarget>(items: Vec<T>, key: F) -> BTreeMap<StanceTarget, Vec<T>> {
    let mut out: BTreeMap<StanceTarget, Vec<T>> = BTreeMap::new();
    for it in items {
        out.entry(key(&it)).or_default().push(it);
    }
    out
}
