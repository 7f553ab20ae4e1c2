use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use melt::checkpoint::{Checkpoint, CheckpointMeta};
use melt::corpus::{
    group_by_target, ingest_jsonl, load_stance, read_jsonl, split_and_chunk, write_jsonl, ChunkStats, Corpus,
    SequenceChunk, StanceExample,
};
use melt::metrics::per_target_report;
use melt::model::MeltModel;
use melt::params::ParamSet;
use melt::pretrain::{message_vectors, reconstruction_baselines, train, StepRecord};
use melt::stance::{
    finetune as run_finetune, grid, grid_search, read_predictions, write_predictions, Architecture, FinetuneConfig,
    FinetuneOutcome, MfcBaseline, Prediction, StanceModel,
};
use melt::word::WordLevel;
use melt::MeltError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{io_err, RunConfig};

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> MeltError + '_ {
    move |e| MeltError::Config(format!("{}: {e}", path.display()))
}

pub fn prep(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let corpus = ingest_jsonl(input)?;
    if corpus.is_empty() {
        return Err(MeltError::Empty("corpus").into());
    }
    create_dir(out)?;
    cfg.echo(out)?;
    let dev_users = cfg.prep.dev_users.unwrap_or((corpus.user_count() / 10).max(1));
    let split = split_and_chunk(&corpus, cfg.model.max_seq, dev_users, cfg.prep.dev_messages);
    write_jsonl(&out.join("messages.jsonl"), corpus.messages())?;
    write_jsonl(&out.join("chunks.jsonl"), &split.train)?;
    write_jsonl(&out.join("dev_chunks.jsonl"), &split.dev)?;
    let stats = ChunkStats::of(&corpus, &split);
    write_json(
        &out.join("stats.json"),
        &json!({
            "users": stats.users,
            "messages": stats.messages,
            "chunks": stats.chunks,
            "dev_chunks": stats.dev_chunks,
            "total_chunks": stats.chunks + stats.dev_chunks,
            "pad_slots": stats.pad_slots,
            "max_seq": cfg.model.max_seq,
            "dev_users": dev_users,
        }),
    )?;
    println!(
        "{} users, {} messages -> {} train chunks, {} dev chunks, {} PAD slots",
        stats.users, stats.messages, stats.chunks, stats.dev_chunks, stats.pad_slots
    );
    Ok(())
}

fn check_chunks(chunks: &[SequenceChunk], corpus: &Corpus, max_seq: usize, path: &Path) -> Result<()> {
    for c in chunks {
        if c.len != max_seq || c.real.len() > c.len {
            return Err(MeltError::Config(format!(
                "{}: chunk of {} slots does not fit model.max_seq = {max_seq}",
                path.display(),
                c.len
            ))
            .into());
        }
        if let Some(&bad) = c.real.iter().find(|&&m| m >= corpus.len() || corpus.message(m).user_id != c.user_id) {
            return Err(MeltError::Config(format!(
                "{}: message index {bad} does not belong to user `{}`",
                path.display(),
                c.user_id
            ))
            .into());
        }
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let corpus = ingest_jsonl(&data.join("messages.jsonl"))?;
    let train_path = data.join("chunks.jsonl");
    let dev_path = data.join("dev_chunks.jsonl");
    let train_chunks: Vec<SequenceChunk> = read_jsonl(&train_path)?;
    let dev_chunks: Vec<SequenceChunk> = read_jsonl(&dev_path)?;
    check_chunks(&train_chunks, &corpus, cfg.model.max_seq, &train_path)?;
    check_chunks(&dev_chunks, &corpus, cfg.model.max_seq, &dev_path)?;
    if dev_chunks.is_empty() {
        return Err(MeltError::Empty("dev chunks (rerun prep with --dev-users ≥ 1)").into());
    }
    let word = cfg.word.build(cfg.model.d_model)?;
    if word.dim() != cfg.model.d_model {
        return Err(MeltError::Shape {
            op: "word vectors vs model width",
            lhs: vec![word.dim()],
            rhs: vec![cfg.model.d_model],
        }
        .into());
    }
    create_dir(out)?;
    cfg.echo(out)?;
    let vectors = message_vectors(&corpus, &word)?;
    let model = MeltModel::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.pretrain.seed))?;
    println!(
        "pre-training {} parameters on {} chunks ({} dev)",
        model.config().parameter_count(),
        train_chunks.len(),
        dev_chunks.len()
    );

    let steps_path = out.join("steps.csv");
    let mut steps = csv::Writer::from_writer(create(&steps_path)?);
    let mut write_err = None;
    let mut last: Option<StepRecord> = None;
    let result = train(model, &vectors, &train_chunks, &dev_chunks, &cfg.pretrain, |rec| {
        last = Some(*rec);
        if write_err.is_none() {
            write_err = steps.serialize(rec).and_then(|_| Ok(steps.flush()?)).err();
        }
    });
    if let Some(e) = write_err {
        return Err(csv_err(&steps_path)(e).into());
    }
    let outcome = result.with_context(|| match &last {
        Some(r) => format!("pre-training stopped; last finite step {} (lr {:.3e}, loss {:.6e})", r.step, r.lr, r.loss),
        None => "pre-training stopped before the first update".to_string(),
    })?;

    let epochs_path = out.join("epochs.csv");
    melt::pretrain::write_epoch_csv(create(&epochs_path)?, &outcome.epochs).map_err(csv_err(&epochs_path))?;
    for e in &outcome.epochs {
        println!("epoch {}: dev MSE {:.6e}", e.epoch, e.dev_mse);
    }
    let dev_plans = melt::corpus::mask_chunks(
        &dev_chunks,
        cfg.pretrain.batch_size,
        cfg.pretrain.dev_seed(),
        &cfg.pretrain.masking,
    )?;
    let base = reconstruction_baselines(&vectors, &train_chunks, &dev_chunks, &dev_plans)?;
    println!(
        "best epoch {}: dev MSE {:.6e} (global mean {:.6e}, chunk mean {:.6e})",
        outcome.best_epoch, outcome.best_dev_mse, base.global_mean, base.chunk_mean
    );
    let mut extra = BTreeMap::new();
    extra.insert("global_mean_mse".into(), json!(base.global_mean));
    extra.insert("chunk_mean_mse".into(), json!(base.chunk_mean));
    let ck = Checkpoint {
        config: cfg.model.clone(),
        word: word.spec(),
        meta: CheckpointMeta {
            dev_mse: Some(outcome.best_dev_mse),
            epoch: outcome.best_epoch,
            seed: cfg.pretrain.seed,
            extra,
        },
        sets: vec![outcome.model.params().clone()],
        optimizer: Some(outcome.optimizer),
    };
    ck.save(&out.join("checkpoint.melt"))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Melt,
    Word,
    WordHistory,
    Mfc,
}

impl Arch {
    fn name(self) -> &'static str {
        match self {
            Arch::Melt => "melt",
            Arch::Word => "word",
            Arch::WordHistory => "word_history",
            Arch::Mfc => "mfc",
        }
    }
}

pub struct FinetunePlan {
    pub arch: Arch,
    pub checkpoint: Option<PathBuf>,
    pub word_override: bool,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub out: PathBuf,
    pub sweep: Option<Vec<usize>>,
    pub pooled: bool,
    pub jobs: usize,
    pub lr_grid: Option<Vec<f64>>,
    pub wd_grid: Option<Vec<f64>>,
    pub dropout_grid: Option<Vec<f64>>,
}

/// Examples of one training run: a single target, or everything pooled.
struct Group {
    name: String,
    train: Vec<StanceExample>,
    dev: Vec<StanceExample>,
    test: Vec<StanceExample>,
}

fn groups(
    train: Vec<StanceExample>,
    dev: Vec<StanceExample>,
    test: Vec<StanceExample>,
    pooled: bool,
) -> Result<Vec<Group>> {
    if pooled {
        return Ok(vec![Group {
            name: "all".into(),
            train,
            dev,
            test,
        }]);
    }
    let mut dev = group_by_target(dev, |e| e.stance_target);
    let mut test = group_by_target(test, |e| e.stance_target);
    let mut out = Vec::new();
    for (t, tr) in group_by_target(train, |e| e.stance_target) {
        let d = dev.remove(&t).unwrap_or_default();
        if d.is_empty() {
            return Err(MeltError::Config(format!("no dev examples for target {t}")).into());
        }
        out.push(Group {
            name: t.as_str().into(),
            train: tr,
            dev: d,
            test: test.remove(&t).unwrap_or_default(),
        });
    }
    if let Some(t) = test.keys().next() {
        return Err(MeltError::Config(format!("target {t} has test examples but no training examples")).into());
    }
    Ok(out)
}

/// The starting point shared by every run.
struct Start {
    arch: Arch,
    melt: Option<MeltModel<f32>>,
    word: WordLevel,
}

struct RunResult {
    predictions: Vec<Prediction>,
    epochs: Vec<(usize, f64, f64)>,
    outcome: Option<(FinetuneConfig, FinetuneOutcome)>,
}

impl Start {
    fn model(&self, cfg: &FinetuneConfig) -> melt::Result<StanceModel> {
        Ok(match self.arch {
            Arch::Melt => StanceModel::melt(
                self.melt.clone().expect("encoder for the MeLT architecture"),
                self.word.clone(),
                cfg,
            )?,
            Arch::Word => StanceModel::baseline(Architecture::Word, self.word.clone(), cfg)?,
            Arch::WordHistory => StanceModel::baseline(Architecture::WordHistory, self.word.clone(), cfg)?,
            Arch::Mfc => unreachable!("the majority baseline has no model"),
        })
    }

    fn run(&self, g: &Group, configs: &[FinetuneConfig]) -> Result<RunResult> {
        if g.train.is_empty() {
            return Err(MeltError::Empty("training examples").into());
        }
        if self.arch == Arch::Mfc {
            let labels: Vec<_> = g.train.iter().map(|e| e.label).collect();
            return Ok(RunResult {
                predictions: MfcBaseline::fit(&labels)?.predict(&g.test),
                epochs: Vec::new(),
                outcome: None,
            });
        }
        let (cfg, outcome) = grid_search(configs, |c| run_finetune(self.model(c)?, &g.train, &g.dev, c))?;
        let predictions = outcome.model.predict(&g.test)?;
        Ok(RunResult {
            predictions,
            epochs: outcome.epochs.iter().map(|e| (e.epoch, e.train_loss, e.dev_loss)).collect(),
            outcome: Some((cfg, outcome)),
        })
    }
}

/// Runs every group on up to `jobs` threads; results keep group order.
fn run_groups(start: &Start, groups: &[Group], configs: &[FinetuneConfig], jobs: usize) -> Result<Vec<RunResult>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunResult>>>> = groups.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(groups.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(g) = groups.get(i) else { break };
                eprintln!("fine-tuning {} ({} train, {} dev)", g.name, g.train.len(), g.dev.len());
                let r = start.run(g, configs);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every group ran"))
        .collect()
}

fn snapshot(start: &Start, cfg: &RunConfig, name: &str, tuned: &(FinetuneConfig, FinetuneOutcome)) -> Checkpoint {
    let (fc, out) = tuned;
    let m = &out.model;
    let mut sets: Vec<ParamSet<f32>> = Vec::new();
    if let Some(melt) = &m.melt {
        sets.push(melt.params().clone());
    }
    if fc.unfreeze_word {
        sets.push(m.word.params().clone());
    }
    sets.push(m.head.params().clone());
    let mut extra = BTreeMap::new();
    extra.insert("target".into(), json!(name));
    extra.insert("arch".into(), json!(start.arch.name()));
    extra.insert("best_dev_loss".into(), json!(out.best_dev_loss));
    extra.insert("finetune".into(), serde_json::to_value(fc).expect("config serializes"));
    Checkpoint {
        config: m.melt.as_ref().map_or_else(|| cfg.model.clone(), |x| x.config().clone()),
        word: m.word.spec(),
        meta: CheckpointMeta {
            dev_mse: None,
            epoch: out.best_epoch,
            seed: fc.seed,
            extra,
        },
        sets,
        optimizer: None,
    }
}

pub fn finetune(cfg: &RunConfig, plan: &FinetunePlan) -> Result<()> {
    let mut cfg = cfg.clone();
    let start = match (plan.arch, &plan.checkpoint) {
        (arch, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            cfg.model = ck.config.clone();
            let word = if plan.word_override {
                cfg.word.build(cfg.model.d_model)?
            } else {
                WordLevel::from_spec(&ck.word)?
            };
            Start {
                arch,
                melt: (arch == Arch::Melt).then(|| ck.melt_model()).transpose()?,
                word,
            }
        }
        (arch, None) => Start {
            arch,
            melt: (arch == Arch::Melt)
                .then(|| MeltModel::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.finetune.seed)))
                .transpose()?,
            word: cfg.word.build(cfg.model.d_model)?,
        },
    };
    if let Some(m) = &start.melt {
        if m.config().d_model != start.word.dim() {
            return Err(MeltError::Shape {
                op: "checkpoint width vs word vectors",
                lhs: vec![m.config().d_model],
                rhs: vec![start.word.dim()],
            }
            .into());
        }
    }

    let history = plan.history.as_deref().map(ingest_jsonl).transpose()?;
    let load = |p: &Path| load_stance(p, history.as_ref());
    let train = load(&plan.train)?;
    let dev = load(&plan.dev)?;
    let test = match &plan.test {
        Some(p) => load(p)?,
        None => dev.clone(),
    };
    let groups = groups(train, dev, test, plan.pooled)?;

    let lens = plan.sweep.clone().unwrap_or_else(|| vec![cfg.finetune.history_len]);
    for &n in &lens {
        FinetuneConfig {
            history_len: n,
            ..cfg.finetune.clone()
        }
        .validate()?;
        if let Some(m) = &start.melt {
            if n > m.config().max_seq {
                return Err(MeltError::Config(format!(
                    "history length {n} exceeds the model's {} slots",
                    m.config().max_seq
                ))
                .into());
            }
        }
    }
    create_dir(&plan.out)?;
    cfg.echo(&plan.out)?;

    let mut sweep_rows = Vec::new();
    for &n in &lens {
        let base = FinetuneConfig {
            history_len: n,
            ..cfg.finetune.clone()
        };
        let configs = grid(
            &base,
            plan.lr_grid.as_deref().unwrap_or(&[base.lr]),
            plan.wd_grid.as_deref().unwrap_or(&[base.weight_decay]),
            plan.dropout_grid.as_deref().unwrap_or(&[base.dropout]),
        );
        for c in &configs {
            c.validate()?;
        }
        let results = run_groups(&start, &groups, &configs, plan.jobs)?;
        let preds: Vec<Prediction> = results.iter().flat_map(|r| r.predictions.iter().cloned()).collect();
        let suffix = if plan.sweep.is_some() { format!("-h{n}") } else { String::new() };

        let pred_path = plan.out.join(format!("predictions{suffix}.csv"));
        write_predictions(create(&pred_path)?, &preds)?;
        let ep_path = plan.out.join(format!("finetune_epochs{suffix}.csv"));
        let mut ep = csv::Writer::from_writer(create(&ep_path)?);
        ep.write_record(["group", "epoch", "train_loss", "dev_loss"]).map_err(csv_err(&ep_path))?;
        for (g, r) in groups.iter().zip(&results) {
            for (e, tl, dl) in &r.epochs {
                ep.serialize((&g.name, e, tl, dl)).map_err(csv_err(&ep_path))?;
            }
        }
        ep.flush().map_err(|e| io_err(&ep_path, e))?;

        if preds.is_empty() {
            println!("history length {n}: no examples to score");
            continue;
        }
        let table = per_target_report(&preds)?;
        println!("history length {n}\n{}", table.to_text(true));
        std::fs::write(plan.out.join(format!("metrics{suffix}.csv")), table.to_csv(true))
            .map_err(|e| io_err(&plan.out, e))?;
        sweep_rows.push((n, table.pooled.weighted.f1, table.pooled.semeval_f1));

        if plan.sweep.is_none() {
            for (g, r) in groups.iter().zip(&results) {
                if let Some(tuned) = &r.outcome {
                    snapshot(&start, &cfg, &g.name, tuned).save(&plan.out.join(format!("tuned-{}.melt", g.name)))?;
                }
            }
        }
    }
    if plan.sweep.is_some() {
        let path = plan.out.join("sweep.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["history_len", "weighted_f1", "semeval_f1"]).map_err(csv_err(&path))?;
        for row in &sweep_rows {
            w.serialize(row).map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

pub fn evaluate(predictions: &Path, gold: &Path, pooled: bool, out: Option<&Path>) -> Result<()> {
    let file = File::open(predictions).map_err(|e| io_err(predictions, e))?;
    let preds = read_predictions(file, predictions)?;
    let gold = load_stance(gold, None)?;
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.example_id.as_str(), p)).collect();
    let missing: Vec<String> = gold
        .iter()
        .filter(|g| !by_id.contains_key(g.id()))
        .map(|g| g.id().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(MeltError::MissingIds(missing).into());
    }
    let gold_ids: std::collections::HashSet<&str> = gold.iter().map(|g| g.id()).collect();
    if let Some(extra) = preds.iter().find(|p| !gold_ids.contains(p.example_id.as_str())) {
        return Err(MeltError::UnknownMessage(extra.example_id.clone()).into());
    }
    let aligned: Vec<Prediction> = gold
        .iter()
        .map(|g| Prediction {
            target: g.stance_target,
            gold: g.label,
            ..by_id[g.id()].clone()
        })
        .collect();
    let table = per_target_report(&aligned)?;
    print!("{}", table.to_text(pooled));
    if let Some(path) = out {
        std::fs::write(path, table.to_csv(pooled)).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
