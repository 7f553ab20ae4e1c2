//! Masked-document pre-training: the loss over selected slots, the warm-up
//! training loop, fixed-plan dev evaluation, and the two trivial predictors
//! the trained encoder is compared against.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{batch_chunks, mask_chunks, Corpus, MaskPlan, MaskingConfig, SequenceChunk, Slot, SlotAction};
use crate::error::{MeltError, Result};
use crate::graph::{Graph, Var};
use crate::model::{plan_inputs, BoundMelt, MeltModel, Mode};
use crate::optim::{clip_grad_norm, warmup_lr, AdamW, AdamWConfig};
use crate::params::Grads;
use crate::tensor::{mean_of_rows, Tensor};
use crate::word::WordLevel;

const DEV_MASK_SALT: u64 = 0xD3F0_0000_0000_0000;
const DROPOUT_SALT: u64 = 0x0D50_0000_0000_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm bound; off by default.
    pub clip_norm: Option<f64>,
    pub masking: MaskingConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 4e-3,
            weight_decay: 0.1,
            warmup_steps: 2000,
            epochs: 5,
            batch_size: 100,
            seed: 1337,
            clip_norm: None,
            masking: MaskingConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr.is_nan() || self.base_lr <= 0.0 || self.weight_decay < 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(MeltError::Config(
                "pretraining needs base_lr > 0, weight_decay ≥ 0, epochs ≥ 1, batch_size ≥ 1".into(),
            ));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(MeltError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Seed of the masking stream for 1-based `epoch`.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed ^ epoch as u64
    }

    /// Seed of the dev masking plans, fixed for the whole run.
    pub fn dev_seed(&self) -> u64 {
        self.seed ^ DEV_MASK_SALT
    }

    fn dropout_seed(&self, epoch: usize) -> u64 {
        self.seed ^ DROPOUT_SALT ^ epoch as u64
    }
}

/// Pooled vector of every corpus message, row `i` for corpus index `i`.
pub fn message_vectors(corpus: &Corpus, word: &WordLevel) -> Result<Tensor<f32>> {
    let rows = corpus
        .messages()
        .iter()
        .map(|m| word.message_vector(m))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(MeltError::Empty("corpus"));
    }
    Tensor::from_rows(&rows)
}

/// Mean squared error over the stacked rows of all prediction blocks.
/// Every selected slot contributes one `1×d` row, so this is the mean of the
/// per-slot MSEs. `None` when there are no selected slots.
pub fn masked_loss(g: &mut Graph<'_, f32>, predictions: &[Var], targets: &[Var]) -> Result<Option<Var>> {
    if predictions.len() != targets.len() {
        return Err(MeltError::PlanMismatch(format!(
            "{} prediction blocks for {} target blocks",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(None);
    }
    let p = g.concat_rows(predictions)?;
    let t = g.concat_rows(targets)?;
    g.mse(p, t).map(Some)
}

fn row(g: &mut Graph<'_, f32>, vectors: &Tensor<f32>, m: usize) -> Var {
    g.constant(Tensor::row(vectors.row_slice(m).to_vec()))
}

/// Reconstruction predictions and targets for one chunk, or `None` when the
/// plan selects nothing.
fn chunk_forward(
    g: &mut Graph<'_, f32>,
    model: &MeltModel<f32>,
    b: &BoundMelt,
    vectors: &Tensor<f32>,
    chunk: &SequenceChunk,
    plan: &MaskPlan,
    mode: Mode<'_, ChaCha8Rng>,
) -> Result<Option<(Var, Var)>> {
    let targets = plan.targets(chunk);
    if targets.is_empty() {
        plan.check_aligned(chunk)?;
        return Ok(None);
    }
    let originals: Vec<Var> = chunk.real.iter().map(|&m| row(g, vectors, m)).collect();
    let inputs = plan_inputs(chunk, plan, &originals, |m| Ok(row(g, vectors, m)))?;
    let x = model.embed(g, b, &inputs)?;
    let out = model.encode(g, b, x, &chunk.attention_mask(), mode)?;
    let slots: Vec<usize> = targets.iter().map(|(s, _)| *s).collect();
    let pred = model.reconstruct(g, b, out.hidden, &slots)?.expect("nonempty slots");
    let rows: Vec<Var> = targets.iter().map(|(s, _)| originals[*s]).collect();
    let target = g.concat_rows(&rows)?;
    Ok(Some((pred, target)))
}

/// Loss and parameter gradients of one training batch.
pub fn batch_gradients(
    model: &MeltModel<f32>,
    vectors: &Tensor<f32>,
    chunks: &[SequenceChunk],
    plans: &[MaskPlan],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<(f64, Grads<f32>)>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let mut rng = dropout_rng;
    let (mut preds, mut targets) = (Vec::new(), Vec::new());
    for (chunk, plan) in chunks.iter().zip(plans) {
        let mode = match rng.as_deref_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        if let Some((p, t)) = chunk_forward(&mut g, model, &b, vectors, chunk, plan, mode)? {
            preds.push(p);
            targets.push(t);
        }
    }
    let Some(loss) = masked_loss(&mut g, &preds, &targets)? else {
        return Ok(None);
    };
    let value = f64::from(g.scalar(loss));
    let grads = g.backward(loss)?.into_params();
    Ok(Some((value, grads)))
}

/// Mean masked MSE over all selected dev slots, in eval mode.
pub fn evaluate_dev(
    model: &MeltModel<f32>,
    vectors: &Tensor<f32>,
    dev: &[SequenceChunk],
    plans: &[MaskPlan],
) -> Result<f64> {
    if dev.is_empty() {
        return Err(MeltError::Empty("dev set"));
    }
    if dev.len() != plans.len() {
        return Err(MeltError::PlanMismatch(format!(
            "{} dev plans for {} dev chunks",
            plans.len(),
            dev.len()
        )));
    }
    let (mut sse, mut count) = (0.0f64, 0usize);
    for (chunk, plan) in dev.iter().zip(plans) {
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        if let Some((p, t)) = chunk_forward(&mut g, model, &b, vectors, chunk, plan, Mode::Eval)? {
            for (x, y) in g.value(p).data().iter().zip(g.value(t).data()) {
                let e = f64::from(*x) - f64::from(*y);
                sse += e * e;
            }
            count += g.value(p).len();
        }
    }
    if count == 0 {
        return Err(MeltError::Empty("dev plans select no slots"));
    }
    Ok(sse / count as f64)
}

/// Dev MSE of the two non-learned predictors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineMse {
    /// Every selected slot predicted as the mean vector of all training messages.
    pub global_mean: f64,
    /// Every selected slot predicted as the mean of the chunk's unselected
    /// real slots (the global mean when the plan selects every real slot).
    pub chunk_mean: f64,
}

pub fn reconstruction_baselines(
    vectors: &Tensor<f32>,
    train: &[SequenceChunk],
    dev: &[SequenceChunk],
    plans: &[MaskPlan],
) -> Result<BaselineMse> {
    let d = vectors.cols();
    let mut seen: Vec<usize> = train.iter().flat_map(|c| c.real.iter().copied()).collect();
    seen.sort_unstable();
    seen.dedup();
    let to64 = |v: &[f32]| v.iter().map(|x| f64::from(*x)).collect::<Vec<f64>>();
    let train_rows: Vec<Vec<f64>> = seen.iter().map(|&m| to64(vectors.row_slice(m))).collect();
    let global = mean_of_rows(train_rows.iter().map(Vec::as_slice), d).ok_or(MeltError::Empty("training chunks"))?;

    let (mut g_sse, mut c_sse, mut count) = (0.0, 0.0, 0usize);
    for (chunk, plan) in dev.iter().zip(plans) {
        plan.check_aligned(chunk)?;
        let kept: Vec<Vec<f64>> = chunk
            .real
            .iter()
            .zip(&plan.actions)
            .filter(|(_, a)| **a == SlotAction::Keep)
            .map(|(&m, _)| to64(vectors.row_slice(m)))
            .collect();
        let local = mean_of_rows(kept.iter().map(Vec::as_slice), d).unwrap_or_else(|| global.clone());
        for (slot, _) in plan.targets(chunk) {
            let Slot::Real(m) = chunk.slot(slot) else { continue };
            for (j, &x) in vectors.row_slice(m).iter().enumerate() {
                let x = f64::from(x);
                g_sse += (x - global[j]).powi(2);
                c_sse += (x - local[j]).powi(2);
            }
            count += d;
        }
    }
    if count == 0 {
        return Err(MeltError::Empty("dev plans select no slots"));
    }
    Ok(BaselineMse {
        global_mean: g_sse / count as f64,
        chunk_mean: c_sse / count as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dev_mse: f64,
}

pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest dev MSE.
    pub model: MeltModel<f32>,
    /// Optimizer state at the end of the best epoch.
    pub optimizer: AdamW<f32>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_mse: f64,
}

/// Index of the smallest value; the earliest wins ties.
pub fn best_epoch(dev_mse: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in dev_mse.iter().enumerate() {
        if best.is_none_or(|b| v < dev_mse[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains `model` on `train` chunks, evaluating `dev` after every epoch.
///
/// Word vectors are precomputed once, so no gradient can reach the word
/// level. Step numbers start at 1 and the learning rate of step `s` is
/// `warmup_lr(s)`. A batch whose plans select no slot is skipped without an
/// optimizer update.
pub fn train(
    mut model: MeltModel<f32>,
    vectors: &Tensor<f32>,
    train: &[SequenceChunk],
    dev: &[SequenceChunk],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(MeltError::Empty("training chunks"));
    }
    let dev_plans = mask_chunks(dev, cfg.batch_size, cfg.dev_seed(), &cfg.masking)?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, MeltModel<f32>, AdamW<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<SequenceChunk> = train.to_vec();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.epoch_seed(epoch));
        order.shuffle(&mut shuffle_rng);
        let plans = mask_chunks(&order, cfg.batch_size, cfg.epoch_seed(epoch), &cfg.masking)?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.dropout_seed(epoch));
        let mut offset = 0;
        for batch in batch_chunks(&order, cfg.batch_size) {
            let batch_plans = &plans[offset..offset + batch.len()];
            offset += batch.len();
            let step = opt.steps() + 1;
            let Some((loss, mut grads)) = batch_gradients(&model, vectors, batch, batch_plans, Some(&mut dropout_rng))?
            else {
                continue;
            };
            if !loss.is_finite() || grads.values().any(|t| !t.is_finite()) {
                return Err(MeltError::NonFinite { step: step as usize });
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            let lr = warmup_lr(step, cfg.base_lr, cfg.warmup_steps);
            opt.step(&mut [model.params_mut()], &grads, lr)?;
            let rec = StepRecord { step, lr, loss };
            on_step(&rec);
            steps.push(rec);
        }
        let dev_mse = evaluate_dev(&model, vectors, dev, &dev_plans)?;
        if !dev_mse.is_finite() {
            return Err(MeltError::NonFinite {
                step: opt.steps() as usize,
            });
        }
        epochs.push(EpochRecord { epoch, dev_mse });
        if best.as_ref().is_none_or(|(_, b, _, _)| dev_mse < *b) {
            best = Some((epoch, dev_mse, model.clone(), opt.clone()));
        }
    }
    let (best_epoch, best_dev_mse, model, optimizer) = best.expect("at least one epoch");
    Ok(PretrainOutcome {
        model,
        optimizer,
        steps,
        epochs,
        best_epoch,
        best_dev_mse,
    })
}

/// Writes `step,lr,loss` rows.
pub fn write_step_csv<W: std::io::Write>(w: W, steps: &[StepRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for s in steps {
        out.serialize(s)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `epoch,dev_mse` rows.
pub fn write_epoch_csv<W: std::io::Write>(w: W, epochs: &[EpochRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for e in epochs {
        out.serialize(e)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_loss_is_mean_of_slot_mses() {
        let mut g = Graph::<f32>::new();
        let p1 = g.constant(Tensor::row(vec![1.0, 1.0]));
        let p2 = g.constant(Tensor::row(vec![3.0, -1.0]));
        let t = g.constant(Tensor::row(vec![0.0, 0.0]));
        // per-slot MSE 1.0 and 5.0
        let loss = masked_loss(&mut g, &[p1, p2], &[t, t]).unwrap().unwrap();
        assert_eq!(g.scalar(loss), 3.0);
        let swapped = masked_loss(&mut g, &[p2, p1], &[t, t]).unwrap().unwrap();
        assert_eq!(g.scalar(swapped), 3.0);
        assert!(masked_loss(&mut g, &[], &[]).unwrap().is_none());
        assert!(masked_loss(&mut g, &[p1], &[]).is_err());
    }

    #[test]
    fn best_epoch_prefers_earliest_minimum() {
        assert_eq!(best_epoch(&[3.0, 1.0, 2.0, 1.0]), Some(1));
        assert_eq!(best_epoch(&[]), None);
        assert_eq!(best_epoch(&[0.5]), Some(0));
    }

    #[test]
    fn seeds_are_distinct() {
        let c = PretrainConfig::default();
        assert_eq!(c.epoch_seed(3), 1337 ^ 3);
        assert_ne!(c.dev_seed(), c.epoch_seed(1));
        assert!(PretrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(PretrainConfig { clip_norm: Some(0.0), ..c }.validate().is_err());
    }
}
