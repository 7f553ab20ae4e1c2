//! Stance fine-tuning: the classification head, the fine-tuning loop with
//! early stopping, prediction, and the baselines (MFC, word vector, word
//! vector plus history mean).

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_finetune_sequence, Stance, StanceExample, StanceTarget, MAX_HISTORY};
use crate::error::{MeltError, Result};
use crate::graph::{Graph, Var};
use crate::model::{BoundMelt, MeltModel, Mode, SlotInput};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{gaussian, Grads, ParamGroup, ParamSet};
use crate::tensor::Tensor;
use crate::word::{BoundWord, WordLevel};

pub const HEAD_HIDDEN: [usize; 2] = [768, 384];
const HEAD_INIT_STD: f64 = 0.02;

/// `input → hidden[0] → sigmoid → hidden[1] → 3 logits`, with dropout on
/// the input vector during training.
#[derive(Clone, Debug)]
pub struct StanceHead {
    input_dim: usize,
    hidden: [usize; 2],
    params: ParamSet<f32>,
}

#[derive(Clone, Copy, Debug)]
struct BoundHead {
    w: [Var; 3],
    b: [Var; 3],
}

impl StanceHead {
    pub fn new<R: Rng>(input_dim: usize, hidden: [usize; 2], rng: &mut R) -> Self {
        let dims = [input_dim, hidden[0], hidden[1], Stance::ALL.len()];
        let mut params = ParamSet::new(ParamGroup::Head);
        for (i, name) in ["head.l1", "head.l2", "head.out"].iter().enumerate() {
            params.add(format!("{name}.weight"), gaussian(rng, &[dims[i], dims[i + 1]], HEAD_INIT_STD));
            params.add(format!("{name}.bias"), Tensor::zeros(&[1, dims[i + 1]]));
        }
        Self {
            input_dim,
            hidden,
            params,
        }
    }

    /// Rebuilds a head from stored parameters.
    pub fn from_params(params: ParamSet<f32>) -> Result<Self> {
        let shapes: Vec<Vec<usize>> = params.manifest().into_iter().map(|(_, s)| s).collect();
        if params.group() != ParamGroup::Head || shapes.len() != 6 {
            return Err(MeltError::CheckpointManifest("stance head needs six parameters".into()));
        }
        let (d0, d1, d2) = (shapes[0][0], shapes[0][1], shapes[2][1]);
        let fresh = Self::new(d0, [d1, d2], &mut ChaCha8Rng::seed_from_u64(0));
        if fresh.params.manifest() != params.manifest() {
            return Err(MeltError::CheckpointManifest("stance head layout mismatch".into()));
        }
        Ok(Self {
            input_dim: d0,
            hidden: [d1, d2],
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> [usize; 2] {
        self.hidden
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn bind<'p>(&'p self, g: &mut Graph<'p, f32>) -> BoundHead {
        let mut b = |i: usize| {
            let p = &self.params.params()[i];
            g.param(self.params.key(i), &p.value, p.trainable)
        };
        BoundHead {
            w: [b(0), b(2), b(4)],
            b: [b(1), b(3), b(5)],
        }
    }

    fn forward(&self, g: &mut Graph<'_, f32>, h: &BoundHead, x: Var) -> Result<Var> {
        let l1 = g.matmul(x, h.w[0])?;
        let l1 = g.add_row(l1, h.b[0])?;
        let l1 = g.sigmoid(l1);
        let l2 = g.matmul(l1, h.w[1])?;
        let l2 = g.add_row(l2, h.b[1])?;
        let out = g.matmul(l2, h.w[2])?;
        g.add_row(out, h.b[2])
    }
}

/// What the head sees for each example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Top-layer MeLT output at the target slot.
    Melt,
    /// The target's message vector alone.
    Word,
    /// `[target vector ; mean of recent history vectors]`, zero when there
    /// is no history.
    WordHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub unfreeze_word: bool,
    pub max_epochs: usize,
    pub patience: usize,
    /// Sequence length for MeLT (history plus target) and the number of
    /// recent messages averaged by the history baseline.
    pub history_len: usize,
    pub head_hidden: [usize; 2],
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            dropout: 0.0,
            batch_size: 10,
            unfreeze_word: false,
            max_epochs: 30,
            patience: 5,
            history_len: MAX_HISTORY,
            head_hidden: HEAD_HIDDEN,
            seed: 1337,
        }
    }
}

impl FinetuneConfig {
    pub const LR_RANGE: (f64, f64) = (6e-6, 3e-3);
    pub const WEIGHT_DECAY_RANGE: (f64, f64) = (1e-4, 1.0);
    pub const MAX_DROPOUT: f64 = 0.05;

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = Self::LR_RANGE;
        if !(lo..=hi).contains(&self.lr) {
            return Err(MeltError::Config(format!("fine-tuning lr {} outside [{lo}, {hi}]", self.lr)));
        }
        let (lo, hi) = Self::WEIGHT_DECAY_RANGE;
        if !(lo..=hi).contains(&self.weight_decay) {
            return Err(MeltError::Config(format!(
                "fine-tuning weight_decay {} outside [{lo}, {hi}]",
                self.weight_decay
            )));
        }
        if !(0.0..=Self::MAX_DROPOUT).contains(&self.dropout) {
            return Err(MeltError::Config(format!(
                "fine-tuning dropout {} outside [0, {}]",
                self.dropout,
                Self::MAX_DROPOUT
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.history_len == 0 || self.head_hidden.contains(&0) {
            return Err(MeltError::Config(
                "batch_size, max_epochs, history_len and head widths must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// A classifier over stance examples: optional MeLT encoder, word level,
/// and head.
#[derive(Clone, Debug)]
pub struct StanceModel {
    pub arch: Architecture,
    pub melt: Option<MeltModel<f32>>,
    pub word: WordLevel,
    pub head: StanceHead,
    pub history_len: usize,
}

struct Bound {
    melt: Option<BoundMelt>,
    word: BoundWord,
    head: BoundHead,
}

impl StanceModel {
    /// MeLT encoder plus a fresh head. The encoder width must equal the word
    /// vector width.
    pub fn melt(melt: MeltModel<f32>, word: WordLevel, cfg: &FinetuneConfig) -> Result<Self> {
        let d = melt.config().d_model;
        if d != word.dim() {
            return Err(MeltError::Shape {
                op: "stance model",
                lhs: vec![d],
                rhs: vec![word.dim()],
            });
        }
        if cfg.history_len > melt.config().max_seq {
            return Err(MeltError::Config(format!(
                "history_len {} exceeds the model's {} slots",
                cfg.history_len,
                melt.config().max_seq
            )));
        }
        let head = StanceHead::new(d, cfg.head_hidden, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        Ok(Self {
            arch: Architecture::Melt,
            melt: Some(melt),
            word,
            head,
            history_len: cfg.history_len,
        })
    }

    /// Word-vector baseline (`Word`) or its history-augmented variant.
    pub fn baseline(arch: Architecture, word: WordLevel, cfg: &FinetuneConfig) -> Result<Self> {
        let input = match arch {
            Architecture::Word => word.dim(),
            Architecture::WordHistory => 2 * word.dim(),
            Architecture::Melt => return Err(MeltError::Config("MeLT needs an encoder".into())),
        };
        let head = StanceHead::new(input, cfg.head_hidden, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        Ok(Self {
            arch,
            melt: None,
            word,
            head,
            history_len: cfg.history_len,
        })
    }

    fn bind<'p>(&'p self, g: &mut Graph<'p, f32>) -> Bound {
        Bound {
            melt: self.melt.as_ref().map(|m| m.bind(g)),
            word: self.word.bind(g),
            head: self.head.bind(g),
        }
    }

    /// `1×input` feature row for one example.
    fn features<R: Rng>(
        &self,
        g: &mut Graph<'_, f32>,
        b: &Bound,
        ex: &StanceExample,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        match self.arch {
            Architecture::Word => self.word.message_var(g, b.word, &ex.target),
            Architecture::WordHistory => {
                let t = self.word.message_var(g, b.word, &ex.target)?;
                let hist = ex.recent_history(self.history_len);
                let h = if hist.is_empty() {
                    g.constant(Tensor::zeros(&[1, self.word.dim()]))
                } else {
                    let rows = hist
                        .iter()
                        .map(|m| self.word.message_var(g, b.word, m))
                        .collect::<Result<Vec<_>>>()?;
                    let stacked = g.concat_rows(&rows)?;
                    g.mean_rows(stacked)
                };
                g.concat_cols(&[t, h])
            }
            Architecture::Melt => {
                let melt = self.melt.as_ref().expect("MeLT architecture has an encoder");
                let bm = b.melt.as_ref().expect("bound encoder");
                let seq = build_finetune_sequence(ex, self.history_len);
                let mut slots = Vec::with_capacity(seq.len);
                for m in &seq.messages {
                    slots.push(SlotInput::Message(self.word.message_var(g, b.word, m)?));
                }
                slots.resize(seq.len, SlotInput::Pad);
                let x = melt.embed(g, bm, &slots)?;
                let mode = match rng {
                    Some(r) => Mode::Train(r),
                    None => Mode::Eval,
                };
                let out = melt.encode(g, bm, x, &seq.attention_mask(), mode)?;
                g.gather_rows(out.hidden, &[seq.target_slot])
            }
        }
    }

    /// `B×3` logits for a batch.
    fn logits(
        &self,
        g: &mut Graph<'_, f32>,
        b: &Bound,
        batch: &[&StanceExample],
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(MeltError::Empty("stance batch"));
        }
        let rows = batch
            .iter()
            .map(|ex| self.features(g, b, ex, rng.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        let mut x = g.concat_rows(&rows)?;
        if let Some(r) = rng {
            x = g.dropout(x, dropout, r)?;
        }
        self.head.forward(g, &b.head, x)
    }

    fn batch_gradients(
        &self,
        batch: &[&StanceExample],
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Grads<f32>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let logits = self.logits(&mut g, &b, batch, dropout, Some(rng))?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label.index()).collect();
        let loss = g.cross_entropy(logits, &labels)?;
        let value = f64::from(g.scalar(loss));
        Ok((value, g.backward(loss)?.into_params()))
    }

    fn step(&mut self, opt: &mut AdamW<f32>, grads: &Grads<f32>, lr: f64) -> Result<()> {
        let mut sets: Vec<&mut ParamSet<f32>> = vec![self.head.params_mut(), self.word.params_mut()];
        if let Some(m) = self.melt.as_mut() {
            sets.push(m.params_mut());
        }
        opt.step(&mut sets, grads, lr)
    }

    /// Eval-mode logits, one row of three per example.
    pub fn predict_logits(&self, examples: &[StanceExample], batch_size: usize) -> Result<Vec<[f32; 3]>> {
        let mut out = Vec::with_capacity(examples.len());
        for batch in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&StanceExample> = batch.iter().collect();
            let mut g = Graph::new();
            let b = self.bind(&mut g);
            let logits = self.logits(&mut g, &b, &refs, 0.0, None)?;
            let v = g.value(logits);
            out.extend((0..v.rows()).map(|r| {
                let s = v.row_slice(r);
                [s[0], s[1], s[2]]
            }));
        }
        Ok(out)
    }

    /// Mean eval-mode cross-entropy.
    pub fn mean_loss(&self, examples: &[StanceExample], batch_size: usize) -> Result<f64> {
        if examples.is_empty() {
            return Err(MeltError::Empty("stance examples"));
        }
        let logits = self.predict_logits(examples, batch_size)?;
        let total: f64 = logits
            .iter()
            .zip(examples)
            .map(|(l, ex)| {
                let p = probabilities(l);
                -p[ex.label.index()].max(f64::MIN_POSITIVE).ln()
            })
            .sum();
        Ok(total / examples.len() as f64)
    }

    pub fn predict(&self, examples: &[StanceExample]) -> Result<Vec<Prediction>> {
        let logits = self.predict_logits(examples, 64)?;
        Ok(examples
            .iter()
            .zip(logits)
            .map(|(ex, l)| Prediction {
                example_id: ex.id().to_string(),
                target: ex.stance_target,
                gold: ex.label,
                pred: argmax(&l),
                probs: probabilities(&l),
            })
            .collect())
    }
}

/// Softmax in 64-bit.
pub fn probabilities(logits: &[f32; 3]) -> [f64; 3] {
    let x = logits.map(f64::from);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = x.map(|v| (v - max).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Index of the largest logit; ties go to the lower class index.
pub fn argmax(logits: &[f32; 3]) -> Stance {
    let mut best = 0;
    for i in 1..3 {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    Stance::from_index(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub target: StanceTarget,
    pub gold: Stance,
    pub pred: Stance,
    /// Against, none, favor.
    pub probs: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    example_id: String,
    target: String,
    gold: String,
    pred: String,
    p_against: f64,
    p_none: f64,
    p_favor: f64,
}

pub fn write_predictions<W: Write>(w: W, preds: &[Prediction]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| MeltError::Config(format!("writing predictions: {e}"));
    for p in preds {
        out.serialize(PredictionRow {
            example_id: p.example_id.clone(),
            target: p.target.as_str().into(),
            gold: p.gold.as_str().into(),
            pred: p.pred.as_str().into(),
            p_against: p.probs[0],
            p_none: p.probs[1],
            p_favor: p.probs[2],
        })
        .map_err(err)?;
    }
    out.flush().map_err(|e| MeltError::Config(format!("writing predictions: {e}")))?;
    Ok(())
}

pub fn read_predictions<R: Read>(r: R, path: &std::path::Path) -> Result<Vec<Prediction>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let parse_err = |msg: String| MeltError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg,
        };
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        out.push(Prediction {
            target: row.target.parse()?,
            gold: row.gold.parse()?,
            pred: row.pred.parse()?,
            example_id: row.example_id,
            probs: [row.p_against, row.p_none, row.p_favor],
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

pub struct FinetuneOutcome {
    /// Snapshot from the epoch with the lowest dev loss.
    pub model: StanceModel,
    pub epochs: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
}

/// Trains every message-level and head parameter (and the word level iff
/// `cfg.unfreeze_word`) with cross-entropy. Stops after `patience` epochs
/// without a strictly lower dev loss and returns the best snapshot.
pub fn finetune(
    mut model: StanceModel,
    train: &[StanceExample],
    dev: &[StanceExample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(MeltError::Empty("training examples"));
    }
    if dev.is_empty() {
        return Err(MeltError::Empty("dev examples"));
    }
    model.word.set_frozen(!cfg.unfreeze_word);
    if let Some(m) = model.melt.as_mut() {
        m.params_mut().set_trainable(true);
    }
    model.history_len = cfg.history_len;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<&StanceExample> = train.iter().collect();
    let mut epochs = Vec::new();
    let mut best = (0usize, model.mean_loss(dev, cfg.batch_size)?, model.clone());
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = model.batch_gradients(batch, cfg.dropout, &mut rng)?;
            if !loss.is_finite() {
                return Err(MeltError::NonFinite {
                    step: opt.steps() as usize + 1,
                });
            }
            model.step(&mut opt, &grads, cfg.lr)?;
            sum += loss * batch.len() as f64;
            n += batch.len();
        }
        let dev_loss = model.mean_loss(dev, cfg.batch_size)?;
        epochs.push(FinetuneEpoch {
            epoch,
            train_loss: sum / n as f64,
            dev_loss,
        });
        if dev_loss < best.1 {
            best = (epoch, dev_loss, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_dev_loss, model) = best;
    Ok(FinetuneOutcome {
        model,
        epochs,
        best_epoch,
        best_dev_loss,
    })
}

/// Constant predictor of the most frequent training label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MfcBaseline(pub Stance);

impl MfcBaseline {
    /// Ties go to the lower class index.
    pub fn fit(labels: &[Stance]) -> Result<Self> {
        if labels.is_empty() {
            return Err(MeltError::Empty("labels"));
        }
        let mut counts = [0usize; 3];
        labels.iter().for_each(|l| counts[l.index()] += 1);
        let mut best = 0;
        for i in 1..3 {
            if counts[i] > counts[best] {
                best = i;
            }
        }
        Ok(Self(Stance::from_index(best)))
    }

    pub fn predict(&self, examples: &[StanceExample]) -> Vec<Prediction> {
        let mut probs = [0.0; 3];
        probs[self.0.index()] = 1.0;
        examples
            .iter()
            .map(|ex| Prediction {
                example_id: ex.id().to_string(),
                target: ex.stance_target,
                gold: ex.label,
                pred: self.0,
                probs,
            })
            .collect()
    }
}

/// Every combination of the given values on top of `base`.
pub fn grid(base: &FinetuneConfig, lrs: &[f64], weight_decays: &[f64], dropouts: &[f64]) -> Vec<FinetuneConfig> {
    let mut out = Vec::new();
    for &lr in lrs {
        for &weight_decay in weight_decays {
            for &dropout in dropouts {
                out.push(FinetuneConfig {
                    lr,
                    weight_decay,
                    dropout,
                    ..base.clone()
                });
            }
        }
    }
    out
}

/// Runs `fit` for each configuration and keeps the one with the lowest dev
/// loss; the earliest wins ties.
pub fn grid_search<F>(configs: &[FinetuneConfig], mut fit: F) -> Result<(FinetuneConfig, FinetuneOutcome)>
where
    F: FnMut(&FinetuneConfig) -> Result<FinetuneOutcome>,
{
    let mut best: Option<(FinetuneConfig, FinetuneOutcome)> = None;
    for c in configs {
        let out = fit(c)?;
        if best.as_ref().is_none_or(|(_, b)| out.best_dev_loss < b.best_dev_loss) {
            best = Some((c.clone(), out));
        }
    }
    best.ok_or(MeltError::Empty("grid"))
}
