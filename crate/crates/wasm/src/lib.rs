//! Browser bindings: chunk and mask a synthetic history, draw the warm-up
//! schedule, and score stance predictions.

use melt::corpus::{build_chunks, mask_chunks, MaskingConfig, Slot, SlotAction, Stance};
use melt::metrics::confusion;
use melt::optim::warmup_lr;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct ChunkView {
    origin: usize,
    /// One code per slot: `k` keep, `m` MASK, `u` unchanged, `r` replaced, `_` PAD.
    slots: Vec<(Option<usize>, char)>,
}

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Chunks a history of `n` messages (numbered from 1) into windows of
/// `max_len` and masks them with `seed`. Returns JSON.
#[wasm_bindgen]
pub fn chunk_plan(n: usize, max_len: usize, seed: u64, select_prob: f64) -> Result<String, JsError> {
    if max_len == 0 || max_len > 512 || n > 10_000 {
        return Err(err("need 1 ≤ max_len ≤ 512 and n ≤ 10000"));
    }
    let history: Vec<usize> = (1..=n).collect();
    let chunks = build_chunks("demo", &history, max_len);
    let cfg = MaskingConfig {
        select_prob: select_prob.clamp(0.0, 1.0),
        ..MaskingConfig::default()
    };
    let plans = mask_chunks(&chunks, chunks.len().max(1), seed, &cfg).map_err(err)?;
    let view: Vec<ChunkView> = chunks
        .iter()
        .zip(&plans)
        .map(|(c, p)| ChunkView {
            origin: c.origin,
            slots: c
                .slots()
                .zip(&p.actions)
                .map(|(s, a)| {
                    let msg = match s {
                        Slot::Real(m) => Some(m),
                        Slot::Pad => None,
                    };
                    let code = match (s, a) {
                        (Slot::Pad, _) => '_',
                        (_, SlotAction::Keep) => 'k',
                        (_, SlotAction::MaskToken) => 'm',
                        (_, SlotAction::UnchangedPredict) => 'u',
                        (_, SlotAction::RandomReplace(_)) => 'r',
                    };
                    (msg, code)
                })
                .collect(),
        })
        .collect();
    serde_json::to_string(&view).map_err(err)
}

/// Learning rate for steps `1..=steps`.
#[wasm_bindgen]
pub fn warmup_schedule(base_lr: f64, warmup_steps: u64, steps: u64) -> Vec<f64> {
    (1..=steps.min(100_000)).map(|s| warmup_lr(s, base_lr, warmup_steps)).collect()
}

fn labels(s: &str) -> Result<Vec<Stance>, JsError> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| match t.to_ascii_lowercase().as_str() {
            "a" => Ok(Stance::Against),
            "n" => Ok(Stance::None),
            "f" => Ok(Stance::Favor),
            other => other.parse::<Stance>().map_err(err),
        })
        .collect()
}

/// Weighted and SemEval scores for two label lists (`against`/`a`,
/// `none`/`n`, `favor`/`f`, comma or space separated). Returns JSON.
#[wasm_bindgen]
pub fn score(gold: &str, predicted: &str) -> Result<String, JsError> {
    let cm = confusion(&labels(gold)?, &labels(predicted)?).map_err(err)?;
    serde_json::to_string(&cm.report()).map_err(err)
}
