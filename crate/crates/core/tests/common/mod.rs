//! Oracles and fixtures shared by the integration tests. Everything here is
//! written independently of the library code it checks.
#![allow(dead_code)]

use melt::corpus::{
    build_chunks, split_and_chunk, Corpus, MaskPlan, SequenceChunk, Slot, SlotAction, Stance, StanceExample,
};
use melt::gradcheck::{check, relative_error};
use melt::graph::{Graph, Var};
use melt::model::{plan_inputs, MeltConfig, MeltModel, Mode};
use melt::pretrain::{message_vectors, train, PretrainConfig, PretrainOutcome};
use melt::synth::{theme_corpus, StanceSynth, ThemeConfig};
use melt::tensor::Tensor;
use melt::word::WordLevel;
use melt::Result;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

// ---------------------------------------------------------------- gradients

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every
/// element contributes a distinct coefficient.
pub fn weighted_sum(g: &mut Graph<'_, f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

pub type OpFn = Box<dyn for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], f: OpFn) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f,
    }
}

/// One case per differentiable graph operation.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 1)
        })),
        case("matmul_nt", &[&[3, 4], &[5, 4]], Box::new(|g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            weighted_sum(g, y, 2)
        })),
        case("transpose", &[&[3, 2]], Box::new(|g, v| {
            let y = g.transpose(v[0]);
            weighted_sum(g, y, 3)
        })),
        case("add", &[&[2, 3], &[2, 3]], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 4)
        })),
        case("sub", &[&[2, 3], &[2, 3]], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, 5)
        })),
        case("mul", &[&[2, 3], &[2, 3]], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 6)
        })),
        case("scale", &[&[2, 3]], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            weighted_sum(g, y, 7)
        })),
        case("add_row", &[&[3, 4], &[1, 4]], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted_sum(g, y, 8)
        })),
        case("gelu", &[&[3, 5]], Box::new(|g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, 9)
        })),
        case("sigmoid", &[&[3, 5]], Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, 10)
        })),
        case("softmax rows", &[&[3, 4]], Box::new(|g, v| {
            let y = g.softmax(v[0], 1)?;
            weighted_sum(g, y, 11)
        })),
        case("softmax cols", &[&[3, 4]], Box::new(|g, v| {
            let y = g.softmax(v[0], 0)?;
            weighted_sum(g, y, 12)
        })),
        case("masked softmax", &[&[3, 4]], Box::new(|g, v| {
            let y = g.softmax_rows(v[0], Some(&[true, false, true, true]))?;
            weighted_sum(g, y, 13)
        })),
        case("layer_norm", &[&[3, 5], &[1, 5], &[1, 5]], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 14)
        })),
        case("slice_cols", &[&[3, 6]], Box::new(|g, v| {
            let y = g.slice_cols(v[0], 2, 3)?;
            weighted_sum(g, y, 15)
        })),
        case("concat_cols", &[&[3, 2], &[3, 4]], Box::new(|g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            weighted_sum(g, y, 16)
        })),
        case("concat_rows", &[&[1, 3], &[2, 3]], Box::new(|g, v| {
            let y = g.concat_rows(&[v[0], v[1], v[0]])?;
            weighted_sum(g, y, 17)
        })),
        case("gather_rows", &[&[5, 3]], Box::new(|g, v| {
            let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
            weighted_sum(g, y, 18)
        })),
        case("mean_rows", &[&[4, 3]], Box::new(|g, v| {
            let y = g.mean_rows(v[0]);
            weighted_sum(g, y, 19)
        })),
        case("mse", &[&[3, 4], &[3, 4]], Box::new(|g, v| g.mse(v[0], v[1]))),
        case("cross_entropy", &[&[4, 3]], Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))),
        case("sum", &[&[2, 2]], Box::new(|g, v| Ok(g.sum(v[0])))),
    ]
}

/// Worst relative error of one case over five random input draws.
pub fn op_error(c: &OpCase) -> f64 {
    (0..5u64)
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let inputs: Vec<_> = c.shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            check(&inputs, FD_STEP, |g, v| (c.f)(g, v)).unwrap().max_relative_error()
        })
        .fold(0.0, f64::max)
}

/// One layer, two heads, width 8, four slots.
pub fn tiny_config() -> MeltConfig {
    MeltConfig {
        n_layers: 1,
        d_model: 8,
        ff_dim: 16,
        n_heads: 2,
        dropout: 0.0,
        max_seq: 4,
        positions: true,
        init_std: melt::model::INIT_STD,
    }
}

/// Masked-reconstruction loss of a 4-slot chunk holding MASK, random
/// replacement, unchanged-predict and one PAD.
pub fn tiny_masked_loss(model: &MeltModel<f64>, vectors: &[Vec<f64>]) -> (f64, melt::params::Grads<f64>) {
    let chunk = SequenceChunk {
        user_id: "u".into(),
        origin: 0,
        len: 4,
        real: vec![0, 1, 2],
    };
    let plan = MaskPlan {
        actions: vec![
            SlotAction::MaskToken,
            SlotAction::RandomReplace(3),
            SlotAction::UnchangedPredict,
            SlotAction::Keep,
        ],
        seed: 0,
    };
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let vars: Vec<Var> = vectors.iter().map(|v| g.constant(Tensor::row(v.clone()))).collect();
    let inputs = plan_inputs(&chunk, &plan, &vars[..3], |m| Ok(vars[m])).unwrap();
    let x = model.embed(&mut g, &b, &inputs).unwrap();
    let out = model
        .encode::<ChaCha8Rng>(&mut g, &b, x, &chunk.attention_mask(), Mode::Eval)
        .unwrap();
    let targets: Vec<usize> = plan.targets(&chunk).iter().map(|(s, _)| *s).collect();
    let pred = model.reconstruct(&mut g, &b, out.hidden, &targets).unwrap().unwrap();
    let rows: Vec<Var> = plan.targets(&chunk).iter().map(|(_, m)| vars[*m]).collect();
    let tgt = g.concat_rows(&rows).unwrap();
    let loss = g.mse(pred, tgt).unwrap();
    let value = g.scalar(loss);
    let grads = g.backward(loss).unwrap().into_params();
    (value, grads)
}

pub struct ParamGradCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub relative_error: f64,
}

impl ParamGradCheck {
    /// `pad_vector` only feeds a masked-out key, and a key bias shifts every
    /// score of a query row equally, so both gradients vanish.
    pub fn expected_zero(&self) -> bool {
        self.name == "pad_vector" || self.name.ends_with("attn.k.bias")
    }

    pub fn ok(&self) -> bool {
        if self.expected_zero() {
            self.analytic_norm < 1e-9 && self.numeric_norm < 1e-6
        } else {
            self.analytic_norm > 0.0 && self.relative_error < GRAD_TOL
        }
    }
}

/// Central differences for every parameter of the tiny model, with weights
/// perturbed away from init so every path carries signal.
pub fn full_loss_grad_checks() -> Vec<ParamGradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut model = MeltModel::<f32>::new(tiny_config(), &mut rng).unwrap().cast::<f64>();
    for p in model.params_mut().params_mut() {
        for x in p.value.data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    let vectors: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let (_, grads) = tiny_masked_loss(&model, &vectors);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = Vec::new();
    for i in 0..model.params().len() {
        let key = model.params().key(i);
        let name = model.params().params()[i].name.clone();
        let n = model.params().params()[i].value.len();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().params()[i].value.data()[j];
            model.params_mut().params_mut()[i].value.data_mut()[j] = orig + FD_STEP;
            let plus = tiny_masked_loss(&model, &vectors).0;
            model.params_mut().params_mut()[i].value.data_mut()[j] = orig - FD_STEP;
            let minus = tiny_masked_loss(&model, &vectors).0;
            model.params_mut().params_mut()[i].value.data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let analytic = grads[&key].data();
        out.push(ParamGradCheck {
            name,
            analytic_norm: norm(analytic),
            numeric_norm: norm(&numeric),
            relative_error: relative_error(analytic, &numeric),
        });
    }
    out
}

// ----------------------------------------------------------------- chunking

/// Literal chunking rule: consecutive windows of `l`; a user shorter than
/// `l` gets one window padded at the end; a short final window is
/// prefixed with the last messages of the window before it until it holds
/// `l` messages.
pub fn brute_force_chunks(history: &[usize], l: usize) -> Vec<Vec<Option<usize>>> {
    let n = history.len();
    if n == 0 {
        return vec![];
    }
    if n < l {
        let mut c: Vec<Option<usize>> = history.iter().map(|&m| Some(m)).collect();
        while c.len() < l {
            c.push(None);
        }
        return vec![c];
    }
    let mut windows: Vec<Vec<usize>> = Vec::new();
    let mut i = 0;
    while i < n {
        windows.push(history[i..(i + l).min(n)].to_vec());
        i += l;
    }
    let k = windows.len();
    let missing = l - windows[k - 1].len();
    if missing > 0 {
        let prev = windows[k - 2].clone();
        let mut last = prev[l - missing..].to_vec();
        last.extend(&windows[k - 1]);
        windows[k - 1] = last;
    }
    windows
        .into_iter()
        .map(|w| w.into_iter().map(Some).collect())
        .collect()
}

pub fn chunk_slots(c: &SequenceChunk) -> Vec<Option<usize>> {
    c.slots()
        .map(|s| match s {
            Slot::Real(m) => Some(m),
            Slot::Pad => None,
        })
        .collect()
}

/// Library chunking of a user with history `0..n` equals the brute force.
pub fn chunking_agrees(n: usize, l: usize) -> bool {
    let history: Vec<usize> = (0..n).collect();
    let lib: Vec<_> = build_chunks("u", &history, l).iter().map(chunk_slots).collect();
    lib == brute_force_chunks(&history, l)
}

// ------------------------------------------------------------------ metrics

pub type Q = Ratio<i64>;

pub struct OracleMetrics {
    pub per_class_f1: [Q; 3],
    pub weighted_p: Q,
    pub weighted_r: Q,
    pub weighted_f1: Q,
    pub semeval_f1: Q,
}

/// Counts tp/fp/fn by scanning the pairs once per class, then
/// F1 = 2PR/(P+R) with 0 for an undefined ratio.
pub fn oracle_metrics(gold: &[Stance], pred: &[Stance]) -> OracleMetrics {
    let classes = [Stance::Against, Stance::None, Stance::Favor];
    let n = gold.len() as i64;
    let zero = Q::from_integer(0);
    let div = |a: i64, b: i64| if b == 0 { zero } else { Q::new(a, b) };
    let mut f1s = [zero; 3];
    let (mut wp, mut wr, mut wf) = (zero, zero, zero);
    for (k, c) in classes.iter().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0i64, 0i64, 0i64);
        for (g, p) in gold.iter().zip(pred) {
            match (g == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let p = div(tp, tp + fp);
        let r = div(tp, tp + fn_);
        let f = if p + r == zero { zero } else { Q::from_integer(2) * p * r / (p + r) };
        f1s[k] = f;
        let w = Q::new(tp + fn_, n);
        wp += w * p;
        wr += w * r;
        wf += w * f;
    }
    OracleMetrics {
        per_class_f1: f1s,
        weighted_p: wp,
        weighted_r: wr,
        weighted_f1: wf,
        semeval_f1: (f1s[0] + f1s[2]) / 2,
    }
}

pub fn big_eq(a: &num_rational::BigRational, b: Q) -> bool {
    *a == num_rational::BigRational::new((*b.numer()).into(), (*b.denom()).into())
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Stance> {
    (0..n).map(|_| Stance::from_index(rng.random_range(0..3))).collect()
}

// ------------------------------------------------------------ small models

/// Width-32 two-layer encoder used by the desk-scale experiments.
pub fn small_config(max_seq: usize) -> MeltConfig {
    MeltConfig {
        n_layers: 2,
        d_model: 32,
        ff_dim: 64,
        n_heads: 4,
        dropout: 0.1,
        max_seq,
        positions: true,
        init_std: melt::model::INIT_STD,
    }
}

pub fn small_word() -> WordLevel {
    WordLevel::hash(4096, 32, 5)
}

pub struct ThemeRun {
    pub vectors: Tensor<f32>,
    pub train: Vec<SequenceChunk>,
    pub dev: Vec<SequenceChunk>,
}

pub fn theme_run(cfg: &ThemeConfig, dev_users: usize, dev_messages: usize) -> ThemeRun {
    let corpus = Corpus::from_messages(theme_corpus(cfg)).unwrap();
    let vectors = message_vectors(&corpus, &small_word()).unwrap();
    let split = split_and_chunk(&corpus, 40, dev_users, dev_messages);
    ThemeRun {
        vectors,
        train: split.train,
        dev: split.dev,
    }
}

pub fn pretrain_small(run: &ThemeRun, cfg: &PretrainConfig, seed: u64) -> PretrainOutcome {
    let model = MeltModel::new(small_config(40), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    train(model, &run.vectors, &run.train, &run.dev, cfg, |_| {}).unwrap()
}

/// Top-layer encoder output for a chunk with nothing masked.
pub fn forward_hidden(model: &MeltModel<f32>, vectors: &Tensor<f32>, chunk: &SequenceChunk) -> Vec<f32> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let vars: Vec<Var> = chunk
        .real
        .iter()
        .map(|&m| g.constant(Tensor::row(vectors.row_slice(m).to_vec())))
        .collect();
    let plan = MaskPlan::all_keep(chunk.len);
    let inputs = plan_inputs(chunk, &plan, &vars, |_| unreachable!()).unwrap();
    let x = model.embed(&mut g, &b, &inputs).unwrap();
    let out = model
        .encode::<ChaCha8Rng>(&mut g, &b, x, &chunk.attention_mask(), Mode::Eval)
        .unwrap();
    g.value(out.hidden).data().to_vec()
}

// ------------------------------------------------------------------- stance

pub struct StanceSplit {
    pub train: Vec<StanceExample>,
    pub dev: Vec<StanceExample>,
    pub test: Vec<StanceExample>,
}

/// Consecutive split in record order, `train_frac` then half of the rest.
pub fn split_stance(s: &StanceSynth, train_frac: f64) -> StanceSplit {
    let ex = s.examples().unwrap();
    let n = ex.len();
    let a = (n as f64 * train_frac).round() as usize;
    let b = a + (n - a) / 2;
    StanceSplit {
        train: ex[..a].to_vec(),
        dev: ex[a..b].to_vec(),
        test: ex[b..].to_vec(),
    }
}
