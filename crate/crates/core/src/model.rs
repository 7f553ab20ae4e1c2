//! The message-level transformer encoder and its reconstruction head.
//!
//! Layer layout per encoder block (post-norm):
//!
//! ```text
//! a = Attn(x)                       Q/K/V/O: d×d weights + d biases each
//! h = LayerNorm1(x + Dropout(a))    gain + bias, d each
//! f = W2·Dropout(GELU(W1·h + b1)) + b2      W1: d×ff, W2: ff×d
//! y = LayerNorm2(h + Dropout(f))
//! ```
//!
//! Parameter count for `n` layers:
//! `n·(4(d²+d) + 2·d·ff + ff + d + 4d) + (d² + d) + max_seq·d + 2d`,
//! the last three terms being the reconstruction head, the learned position
//! table, and the MASK/PAD vectors. At d=768, ff=2048, max_seq=40 this is
//! 11,650,816 for two layers and 33,706,752 for six.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeltError, Result};
use crate::graph::{Graph, Var};
use crate::params::{gaussian, ParamGroup, ParamKey, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeltConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_seq: usize,
    /// Add learned absolute position embeddings to the message inputs.
    pub positions: bool,
    /// Standard deviation of the normal initialisation of every weight,
    /// embedding and special vector.
    pub init_std: f64,
}

impl Default for MeltConfig {
    fn default() -> Self {
        Self::full_scale(2)
    }
}

impl MeltConfig {
    pub fn full_scale(n_layers: usize) -> Self {
        Self {
            n_layers,
            d_model: 768,
            ff_dim: 2048,
            n_heads: 8,
            dropout: 0.1,
            max_seq: 40,
            positions: true,
            init_std: INIT_STD,
        }
    }

    /// The full-scale per-projection gain `INIT_STD·√768` carried over to
    /// width `d_model`.
    pub fn width_matched_init_std(d_model: usize) -> f64 {
        INIT_STD * (768.0 / d_model as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [self.n_layers, self.d_model, self.ff_dim, self.n_heads, self.max_seq];
        if extents.contains(&0) {
            return Err(MeltError::Config("model extents must be ≥ 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(MeltError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(MeltError::Config(format!("init_std {} must be positive", self.init_std)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MeltError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count of the layout above.
    pub fn parameter_count(&self) -> usize {
        let (d, ff) = (self.d_model, self.ff_dim);
        let attn = 4 * (d * d + d);
        let feed = d * ff + ff + ff * d + d;
        let norms = 4 * d;
        let pos = if self.positions { self.max_seq * d } else { 0 };
        self.n_layers * (attn + feed + norms) + (d * d + d) + pos + 2 * d
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerKeys {
    wq: ParamKey,
    bq: ParamKey,
    wk: ParamKey,
    bk: ParamKey,
    wv: ParamKey,
    bv: ParamKey,
    wo: ParamKey,
    bo: ParamKey,
    ln1_g: ParamKey,
    ln1_b: ParamKey,
    w1: ParamKey,
    b1: ParamKey,
    w2: ParamKey,
    b2: ParamKey,
    ln2_g: ParamKey,
    ln2_b: ParamKey,
}

#[derive(Clone, Debug)]
struct Keys {
    pos: Option<ParamKey>,
    mask: ParamKey,
    pad: ParamKey,
    layers: Vec<LayerKeys>,
    head_w: ParamKey,
    head_b: ParamKey,
}

#[derive(Clone, Debug)]
pub struct MeltModel<T> {
    config: MeltConfig,
    params: ParamSet<T>,
    keys: Keys,
}

#[derive(Clone, Copy, Debug)]
struct BoundLayer {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_g: Var,
    ln1_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2_g: Var,
    ln2_b: Var,
}

/// Graph handles for every model parameter.
#[derive(Clone, Debug)]
pub struct BoundMelt {
    pos: Option<Var>,
    mask: Var,
    pad: Var,
    layers: Vec<BoundLayer>,
    head_w: Var,
    head_b: Var,
}

/// What goes into one input slot before position embeddings are added.
#[derive(Clone, Copy, Debug)]
pub enum SlotInput {
    /// A `1×d` message vector node.
    Message(Var),
    Mask,
    Pad,
}

/// Top-layer output plus per-layer, per-head attention probabilities.
pub struct EncoderOutput {
    pub hidden: Var,
    pub attention: Vec<Vec<Var>>,
}

/// Forward-pass mode; dropout is active only in training.
pub enum Mode<'r, R> {
    Train(&'r mut R),
    Eval,
}

impl<T: Scalar> MeltModel<T> {
    /// Gaussian(0, init_std) weights and embeddings, zero biases, unit norm gains.
    pub fn new<R: Rng>(config: MeltConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, ff) = (config.d_model, config.ff_dim);
        let mut p = ParamSet::new(ParamGroup::Melt);
        let pos = config
            .positions
            .then(|| p.add("pos_embedding", gaussian(rng, &[config.max_seq, d], config.init_std)));
        let mask = p.add("mask_vector", gaussian(rng, &[1, d], config.init_std));
        let pad = p.add("pad_vector", gaussian(rng, &[1, d], config.init_std));
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut w = |name: &str, shape: &[usize]| p.add(format!("layer{i}.{name}"), gaussian(rng, shape, config.init_std));
            let wq = w("attn.q.weight", &[d, d]);
            let wk = w("attn.k.weight", &[d, d]);
            let wv = w("attn.v.weight", &[d, d]);
            let wo = w("attn.o.weight", &[d, d]);
            let w1 = w("ff1.weight", &[d, ff]);
            let w2 = w("ff2.weight", &[ff, d]);
            let mut z = |name: &str, n: usize| p.add(format!("layer{i}.{name}"), Tensor::zeros(&[1, n]));
            let bq = z("attn.q.bias", d);
            let bk = z("attn.k.bias", d);
            let bv = z("attn.v.bias", d);
            let bo = z("attn.o.bias", d);
            let b1 = z("ff1.bias", ff);
            let b2 = z("ff2.bias", d);
            let ln1_b = z("ln1.beta", d);
            let ln2_b = z("ln2.beta", d);
            let ln1_g = p.add(format!("layer{i}.ln1.gamma"), Tensor::full(&[1, d], T::one()));
            let ln2_g = p.add(format!("layer{i}.ln2.gamma"), Tensor::full(&[1, d], T::one()));
            layers.push(LayerKeys {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_g,
                ln1_b,
                w1,
                b1,
                w2,
                b2,
                ln2_g,
                ln2_b,
            });
        }
        let head_w = p.add("head.weight", gaussian(rng, &[d, d], config.init_std));
        let head_b = p.add("head.bias", Tensor::zeros(&[1, d]));
        Ok(Self {
            config,
            params: p,
            keys: Keys {
                pos,
                mask,
                pad,
                layers,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &MeltConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.manifest() != self.params.manifest() {
            return Err(MeltError::CheckpointManifest(
                "parameter names or shapes differ from the model layout".into(),
            ));
        }
        for (dst, src) in self.params.params_mut().iter_mut().zip(other.params()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MeltModel<U> {
        MeltModel {
            config: self.config.clone(),
            params: self.params.cast(),
            keys: self.keys.clone(),
        }
    }

    pub fn head_weight_mut(&mut self) -> &mut Tensor<T> {
        self.params.get_mut(self.keys.head_w)
    }

    pub fn head_bias_mut(&mut self) -> &mut Tensor<T> {
        self.params.get_mut(self.keys.head_b)
    }

    pub fn mask_vector(&self) -> &Tensor<T> {
        self.params.get(self.keys.mask)
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> BoundMelt {
        let mut b = |k: ParamKey| {
            let p = &self.params.params()[k.index];
            g.param(k, &p.value, p.trainable)
        };
        let pos = self.keys.pos.map(&mut b);
        let mask = b(self.keys.mask);
        let pad = b(self.keys.pad);
        let layers = self
            .keys
            .layers
            .iter()
            .map(|l| BoundLayer {
                wq: b(l.wq),
                bq: b(l.bq),
                wk: b(l.wk),
                bk: b(l.bk),
                wv: b(l.wv),
                bv: b(l.bv),
                wo: b(l.wo),
                bo: b(l.bo),
                ln1_g: b(l.ln1_g),
                ln1_b: b(l.ln1_b),
                w1: b(l.w1),
                b1: b(l.b1),
                w2: b(l.w2),
                b2: b(l.b2),
                ln2_g: b(l.ln2_g),
                ln2_b: b(l.ln2_b),
            })
            .collect();
        let head_w = b(self.keys.head_w);
        let head_b = b(self.keys.head_b);
        BoundMelt {
            pos,
            mask,
            pad,
            layers,
            head_w,
            head_b,
        }
    }

    /// Stacks slot inputs into an `L×d` matrix and adds position embeddings.
    pub fn embed(&self, g: &mut Graph<'_, T>, b: &BoundMelt, slots: &[SlotInput]) -> Result<Var> {
        if slots.is_empty() || slots.len() > self.config.max_seq {
            return Err(MeltError::Shape {
                op: "embed",
                lhs: vec![self.config.max_seq],
                rhs: vec![slots.len()],
            });
        }
        let rows: Vec<Var> = slots
            .iter()
            .map(|s| match s {
                SlotInput::Message(v) => *v,
                SlotInput::Mask => b.mask,
                SlotInput::Pad => b.pad,
            })
            .collect();
        let x = g.concat_rows(&rows)?;
        if g.value(x).cols() != self.config.d_model {
            return Err(MeltError::Shape {
                op: "embed",
                lhs: vec![self.config.d_model],
                rhs: g.value(x).shape().to_vec(),
            });
        }
        match b.pos {
            Some(pos) => {
                let idx: Vec<usize> = (0..slots.len()).collect();
                let p = g.gather_rows(pos, &idx)?;
                g.add(x, p)
            }
            None => Ok(x),
        }
    }

    /// Runs every encoder layer over `x` (L×d). `allow[j]` is false for PAD
    /// slots, which are excluded as attention keys.
    pub fn encode<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        b: &BoundMelt,
        x: Var,
        allow: &[bool],
        mut mode: Mode<'_, R>,
    ) -> Result<EncoderOutput> {
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let p = self.config.dropout;
        let eps = T::c(LAYER_NORM_EPS);
        let mut drop = |g: &mut Graph<'_, T>, v: Var| -> Result<Var> {
            match &mut mode {
                Mode::Train(rng) => g.dropout(v, p, *rng),
                Mode::Eval => Ok(v),
            }
        };

        let mut x = x;
        let mut attention = Vec::with_capacity(b.layers.len());
        for l in &b.layers {
            let q = g.matmul(x, l.wq)?;
            let q = g.add_row(q, l.bq)?;
            let k = g.matmul(x, l.wk)?;
            let k = g.add_row(k, l.bk)?;
            let v = g.matmul(x, l.wv)?;
            let v = g.add_row(v, l.bv)?;
            let mut heads = Vec::with_capacity(h);
            let mut probs = Vec::with_capacity(h);
            for i in 0..h {
                let qh = g.slice_cols(q, i * dh, dh)?;
                let kh = g.slice_cols(k, i * dh, dh)?;
                let vh = g.slice_cols(v, i * dh, dh)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, scale);
                let a = g.softmax_rows(s, Some(allow))?;
                probs.push(a);
                heads.push(g.matmul(a, vh)?);
            }
            attention.push(probs);
            let ctx = if h == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let o = g.matmul(ctx, l.wo)?;
            let o = g.add_row(o, l.bo)?;
            let o = drop(g, o)?;
            let r = g.add(x, o)?;
            let x1 = g.layer_norm(r, l.ln1_g, l.ln1_b, eps)?;

            let f = g.matmul(x1, l.w1)?;
            let f = g.add_row(f, l.b1)?;
            let f = g.gelu(f);
            let f = drop(g, f)?;
            let f = g.matmul(f, l.w2)?;
            let f = g.add_row(f, l.b2)?;
            let f = drop(g, f)?;
            let r = g.add(x1, f)?;
            x = g.layer_norm(r, l.ln2_g, l.ln2_b, eps)?;
        }
        Ok(EncoderOutput { hidden: x, attention })
    }

    /// Applies the dense reconstruction head to the given rows of `hidden`.
    pub fn reconstruct(&self, g: &mut Graph<'_, T>, b: &BoundMelt, hidden: Var, slots: &[usize]) -> Result<Option<Var>> {
        if slots.is_empty() {
            return Ok(None);
        }
        let rows = g.gather_rows(hidden, slots)?;
        let y = g.matmul(rows, b.head_w)?;
        Ok(Some(g.add_row(y, b.head_b)?))
    }
}

/// Slot inputs for a chunk under a mask plan. `vectors[i]` is the node for
/// the original message in slot `i` (real slots only); `replacement(m)`
/// yields the node for corpus message `m`.
pub fn plan_inputs(
    chunk: &crate::corpus::SequenceChunk,
    plan: &crate::corpus::MaskPlan,
    vectors: &[Var],
    mut replacement: impl FnMut(usize) -> Result<Var>,
) -> Result<Vec<SlotInput>> {
    use crate::corpus::{Slot, SlotAction};
    plan.check_aligned(chunk)?;
    if vectors.len() != chunk.real.len() {
        return Err(MeltError::PlanMismatch(format!(
            "{} vectors for {} real slots",
            vectors.len(),
            chunk.real.len()
        )));
    }
    chunk
        .slots()
        .zip(&plan.actions)
        .enumerate()
        .map(|(i, (slot, action))| {
            Ok(match (slot, action) {
                (Slot::Pad, _) => SlotInput::Pad,
                (Slot::Real(_), SlotAction::Keep | SlotAction::UnchangedPredict) => SlotInput::Message(vectors[i]),
                (Slot::Real(_), SlotAction::MaskToken) => SlotInput::Mask,
                (Slot::Real(_), SlotAction::RandomReplace(m)) => SlotInput::Message(replacement(*m)?),
            })
        })
        .collect()
}
