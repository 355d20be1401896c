//! Optimizer, chunked epochs, sharded gradient evaluation and the training
//! loop with early stopping.
//!
//! A batch is split into a fixed number of row shards. Each shard runs on
//! its own tape (in parallel) and the shard gradients are summed in shard
//! order, so results do not depend on the thread count.

mod adam;

pub use adam::{clip_global_norm, Adam, ADAM_EPS, BETA1, BETA2};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ChannelStats, Dataset, Label, Targets};
use crate::encoder::{Forward, ParamStore, SandModel, TaskKind};
use crate::error::{Error, Result};
use crate::heads::{task_loss_sum, MultiTaskWeights};
use crate::kv::{exact, KvMap};
use crate::metrics::{bucket_means, report, MetricsReport, Predictions};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_CHUNK_SIZE: usize = 20_000;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed for one component, e.g. `stream_seed(seed, "init")`.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a of the name, folded into the seed.
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    mix(seed ^ mix(h))
}

fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub chunk_size: usize,
    /// Chunks visited per epoch; `None` visits them all.
    pub chunks_per_epoch: Option<usize>,
    /// Epochs without improvement before stopping; 0 never stops early.
    pub patience: usize,
    /// Validation metric to select on; the task's headline metric if unset.
    pub eval_metric: Option<String>,
    /// Seeds shuffling and dropout.
    pub seed: u64,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Row shards per batch, each differentiated on its own tape.
    pub shards: usize,
    pub eval_batch: usize,
    /// Fit per-channel statistics on the training split and store them in
    /// the model.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            epochs: 20,
            chunk_size: DEFAULT_CHUNK_SIZE,
            chunks_per_epoch: None,
            patience: 5,
            eval_metric: None,
            seed: 0,
            clip_norm: Some(5.0),
            shards: 4,
            eval_batch: 256,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.chunk_size < self.batch_size {
            return fail(format!(
                "chunk_size={} must be at least batch_size={}",
                self.chunk_size, self.batch_size
            ));
        }
        if self.chunks_per_epoch == Some(0) {
            return fail("chunks_per_epoch must be >= 1".into());
        }
        if self.epochs == 0 || self.shards == 0 || self.eval_batch == 0 {
            return fail("epochs, shards and eval_batch must be >= 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn is_known_key(key: &str) -> bool {
        matches!(
            key,
            "lr" | "batch_size"
                | "epochs"
                | "chunk_size"
                | "chunks_per_epoch"
                | "patience"
                | "eval_metric"
                | "seed"
                | "clip_norm"
                | "shards"
                | "eval_batch"
                | "standardize"
        )
    }

    /// Reads the keys it knows and ignores the rest; `chunks_per_epoch = 0`
    /// means all chunks and `clip_norm = 0` disables clipping.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let chunks: usize = kv.parse_or("chunks_per_epoch", 0)?;
        let clip: f64 = kv.parse_or("clip_norm", d.clip_norm.unwrap_or(0.0))?;
        let cfg = TrainConfig {
            lr: kv.parse_or("lr", d.lr)?,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            epochs: kv.parse_or("epochs", d.epochs)?,
            chunk_size: kv.parse_or("chunk_size", d.chunk_size)?,
            chunks_per_epoch: (chunks > 0).then_some(chunks),
            patience: kv.parse_or("patience", d.patience)?,
            eval_metric: kv.get("eval_metric").filter(|s| !s.is_empty()).map(str::to_string),
            seed: kv.parse_or("seed", d.seed)?,
            clip_norm: (clip > 0.0).then_some(clip),
            shards: kv.parse_or("shards", d.shards)?,
            eval_batch: kv.parse_or("eval_batch", d.eval_batch)?,
            standardize: kv.parse_or("standardize", d.standardize)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("lr", exact(self.lr));
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("chunk_size", self.chunk_size);
        kv.set("chunks_per_epoch", self.chunks_per_epoch.unwrap_or(0));
        kv.set("patience", self.patience);
        kv.set("eval_metric", self.eval_metric.as_deref().unwrap_or(""));
        kv.set("seed", self.seed);
        kv.set("clip_norm", exact(self.clip_norm.unwrap_or(0.0)));
        kv.set("shards", self.shards);
        kv.set("eval_batch", self.eval_batch);
        kv.set("standardize", self.standardize);
        kv
    }
}

/// Seeded shuffle of `0..n` cut into consecutive chunks of `chunk_size`
/// (the last may be shorter).
pub fn chunked_iterate(n: usize, chunk_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(chunk_size > 0, "chunk_size must be positive");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(chunk_size).map(<[usize]>::to_vec).collect()
}

/// The chunks visited in `epoch`: a fresh partition, with `count` chunks
/// drawn from it without replacement.
pub fn epoch_chunks(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let seed = derive(stream_seed(cfg.seed, "shuffle"), &[epoch as u64]);
    let mut chunks = chunked_iterate(n, cfg.chunk_size, seed);
    chunks.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed)));
    if let Some(k) = cfg.chunks_per_epoch {
        chunks.truncate(k);
    }
    chunks
}

/// One batch of shared inputs with targets for several heads.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiBatch {
    pub x: Tensor,
    pub lengths: Vec<usize>,
    /// One entry per task, in task order.
    pub targets: Vec<Targets>,
}

impl MultiBatch {
    /// `datasets` must hold the same inputs with different labels.
    pub fn gather(datasets: &[&Dataset], indices: &[usize]) -> Result<Self> {
        let first = datasets
            .first()
            .ok_or_else(|| Error::EmptyBatch("no tasks".into()))?
            .batch(indices)?;
        let mut targets = vec![first.targets];
        for ds in &datasets[1..] {
            targets.push(ds.batch(indices)?.targets);
        }
        Ok(MultiBatch {
            x: first.x,
            lengths: first.lengths,
            targets,
        })
    }

    fn rows(&self, r0: usize, r1: usize) -> Result<MultiBatch> {
        let (t, r) = (self.x.shape()[1], self.x.shape()[2]);
        let x = Tensor::new(vec![r1 - r0, t, r], self.x.data()[r0 * t * r..r1 * t * r].to_vec())?;
        let targets = self
            .targets
            .iter()
            .map(|tg| match tg {
                Targets::Class(y) => Targets::Class(y[r0..r1].to_vec()),
                Targets::Multi { k, values } => Targets::Multi {
                    k: *k,
                    values: values[r0 * k..r1 * k].to_vec(),
                },
                Targets::Steps { values, mask } => Targets::Steps {
                    values: values[r0 * t..r1 * t].to_vec(),
                    mask: mask[r0 * t..r1 * t].to_vec(),
                },
            })
            .collect();
        Ok(MultiBatch {
            x,
            lengths: self.lengths[r0..r1].to_vec(),
            targets,
        })
    }
}

/// Number of loss terms a task's targets average over.
fn target_count(t: &Targets) -> f64 {
    match t {
        Targets::Class(y) => y.len() as f64,
        Targets::Multi { values, .. } => values.len() as f64,
        Targets::Steps { mask, .. } => mask.iter().filter(|&&m| m != 0.0).count() as f64,
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Weighted objective `Σ w_i ℓ_i`.
    pub loss: f64,
    /// Unweighted mean loss per task.
    pub task_losses: Vec<f64>,
    /// Indexed like the model's parameter store.
    pub grads: Vec<Option<Tensor>>,
}

fn add_into(acc: &mut Option<Tensor>, g: Option<Tensor>) {
    match (acc.as_mut(), g) {
        (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        (None, Some(g)) => *acc = Some(g),
        (_, None) => {}
    }
}

/// Loss and parameter gradients of `Σ_i weights[i] · mean loss of head
/// heads[i]` over the batch. Dropout is on when `dropout_seed` is set.
pub fn compute_gradients(
    model: &SandModel,
    heads: &[usize],
    weights: &[f64],
    batch: &MultiBatch,
    shards: usize,
    dropout_seed: Option<u64>,
) -> Result<Gradients> {
    if heads.len() != weights.len() || heads.len() != batch.targets.len() {
        return Err(Error::Shape("heads, weights and targets must align".into()));
    }
    let totals: Vec<f64> = batch.targets.iter().map(target_count).collect();
    let b = batch.lengths.len();
    let shards = shards.clamp(1, b.max(1));
    let bounds: Vec<(usize, usize)> = (0..shards).map(|s| (s * b / shards, (s + 1) * b / shards)).collect();

    // Per shard: task losses and parameter gradients.
    type Shard = (Vec<f64>, Vec<Option<Tensor>>);
    let results: Vec<Result<Shard>> = bounds
        .par_iter()
        .enumerate()
        .map(|(s, &(r0, r1))| {
            let part = batch.rows(r0, r1)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut rng = dropout_seed.map(|seed| ChaCha8Rng::seed_from_u64(derive(seed, &[s as u64])));
            let mut fwd = match rng.as_mut() {
                Some(rng) => Forward::train(rng),
                None => Forward::eval(),
            };
            let enc = model.encode(&mut tape, &bound, &part.x, &mut fwd)?;
            let mut sums = vec![0.0; heads.len()];
            let mut total = None;
            for (i, (&head, targets)) in heads.iter().zip(&part.targets).enumerate() {
                if target_count(targets) == 0.0 || totals[i] == 0.0 {
                    continue;
                }
                let kind = model.heads()[head].spec.kind;
                let out = model.head_forward(head, &mut tape, &bound, enc.output, &part.lengths)?;
                let (sum, _) = task_loss_sum(&mut tape, kind, out, targets)?;
                sums[i] = tape.value(sum).item();
                let term = tape.scale(sum, weights[i] / totals[i]);
                total = Some(match total {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let Some(total) = total else {
                return Ok((sums, vec![None; bound.vars().len()]));
            };
            tape.backward(total)?;
            let grads = bound.vars().iter().map(|&v| tape.grad(v).cloned()).collect();
            Ok((sums, grads))
        })
        .collect();

    let mut sums = vec![0.0; heads.len()];
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params().len()];
    for r in results {
        let (s, g) = r?;
        for (acc, v) in sums.iter_mut().zip(s) {
            *acc += v;
        }
        for (acc, g) in grads.iter_mut().zip(g) {
            add_into(acc, g);
        }
    }
    let task_losses: Vec<f64> = sums
        .iter()
        .zip(&totals)
        .map(|(s, n)| if *n > 0.0 { s / n } else { 0.0 })
        .collect();
    let loss = task_losses.iter().zip(weights).map(|(l, w)| l * w).sum();
    for (g, p) in grads.iter_mut().zip(model.params().iter()) {
        if !p.trainable {
            *g = None;
        }
    }
    Ok(Gradients { loss, task_losses, grads })
}

/// Model outputs for head `head` over an already standardized dataset.
pub fn predictions(model: &SandModel, head: usize, ds: &Dataset, batch: usize) -> Result<Predictions> {
    let kind = model
        .heads()
        .get(head)
        .ok_or_else(|| Error::Config(format!("no head {head}")))?
        .spec
        .kind;
    if kind != ds.task {
        return Err(Error::Label(format!("head expects {kind}, dataset holds {}", ds.task)));
    }
    if ds.is_empty() {
        return Err(Error::EmptyBatch("evaluation set is empty".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let outputs: Vec<Result<Tensor>> = idx
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let b = ds.batch(chunk)?;
            model.predict_prepared(head, &b.x, &b.lengths)
        })
        .collect();

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut classes = Vec::new();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (chunk, out) in idx.chunks(batch.max(1)).zip(outputs) {
        let out = out?;
        let t = if kind.is_per_step() { out.shape()[1] } else { 0 };
        for (row, &i) in chunk.iter().enumerate() {
            let s = &ds.samples[i];
            match (&s.label, kind) {
                (Label::Class(c), TaskKind::Binary) => {
                    scores.push(out.at(&[row, 1]));
                    labels.push(*c == 1);
                }
                (Label::Class(c), TaskKind::Multiclass(n)) => {
                    scores.extend_from_slice(&out.data()[row * n..(row + 1) * n]);
                    classes.push(*c);
                }
                (Label::Multi(v), TaskKind::Multilabel(k)) => {
                    scores.extend_from_slice(&out.data()[row * k..(row + 1) * k]);
                    labels.extend(v.iter().map(|&b| b == 1));
                }
                (Label::Steps(v), TaskKind::StepBinary | TaskKind::StepRegression) => {
                    for step in 0..s.len {
                        if s.step_mask.as_ref().is_some_and(|m| !m[step]) {
                            continue;
                        }
                        if kind == TaskKind::StepBinary {
                            scores.push(out.data()[(row * t + step) * 2 + 1]);
                            labels.push(v[step] == 1.0);
                        } else {
                            pred.push(out.data()[row * t + step]);
                            truth.push(v[step]);
                        }
                    }
                }
                _ => return Err(Error::Label(format!("sample `{}` does not fit a {kind} head", s.id))),
            }
        }
    }
    Ok(match kind {
        TaskKind::Binary | TaskKind::StepBinary => Predictions::Binary { scores, labels },
        TaskKind::Multilabel(k) => Predictions::Multilabel { k, scores, labels },
        TaskKind::Multiclass(n) => {
            let values: Option<Vec<f64>> = ds.samples.iter().map(|s| s.value).collect();
            Predictions::Multiclass {
                classes: n,
                probs: scores,
                labels: classes,
                values,
                bucket_values: model.heads()[head].bucket_values.clone(),
            }
        }
        TaskKind::StepRegression => Predictions::Regression { pred, truth },
    })
}

/// Metrics for head `head` on a standardized dataset.
pub fn evaluate_prepared(model: &SandModel, head: usize, ds: &Dataset, batch: usize) -> Result<MetricsReport> {
    report(model.heads()[head].spec.kind, &predictions(model, head, ds, batch)?)
}

/// Metrics for head `head` on raw data, standardized with the model's
/// stored statistics.
pub fn evaluate(model: &SandModel, head: usize, ds: &Dataset, batch: usize) -> Result<MetricsReport> {
    match &model.input_stats {
        Some(stats) => evaluate_prepared(model, head, &stats.apply(ds)?, batch),
        None => evaluate_prepared(model, head, ds, batch),
    }
}

/// Training and validation data for one head. All tasks of a run share
/// their inputs and differ only in labels.
#[derive(Clone, Copy, Debug)]
pub struct TaskData<'a> {
    pub head: usize,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub task_losses: Vec<f64>,
    pub val: Vec<MetricsReport>,
    /// Selection score, higher is better.
    pub objective: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub task_names: Vec<String>,
    /// The full λ set the run was configured with.
    pub lambda: MultiTaskWeights,
    /// Weight applied to each task's loss.
    pub weights: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Why training was cut short by a non-finite loss or gradient. The
    /// model then holds the best parameters seen before.
    pub diverged: Option<String>,
}

impl TrainOutcome {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.history.iter().find(|r| r.epoch == e))
    }

    /// CSV, one row per epoch. Two leading `#` lines record the λ set and
    /// the weight each task's loss took. Columns: `epoch,train_loss`, then `loss.<task>` per task, then
    /// `val.<task>.<metric>` for every reported metric, then
    /// `objective,improved`.
    pub fn history_csv(&self) -> String {
        let l = self.lambda.as_array();
        let mut out = format!("# lambda = ({}, {}, {}, {})\n# weights:", l[0], l[1], l[2], l[3]);
        for (name, w) in self.task_names.iter().zip(&self.weights) {
            let _ = write!(out, " {name}={}", exact(*w));
        }
        out.push('\n');
        out.push_str("epoch,train_loss");
        for name in &self.task_names {
            let _ = write!(out, ",loss.{name}");
        }
        if let Some(first) = self.history.first() {
            for (name, r) in self.task_names.iter().zip(&first.val) {
                for (metric, _) in &r.values {
                    let _ = write!(out, ",val.{name}.{metric}");
                }
            }
        }
        out.push_str(",objective,improved\n");
        for rec in &self.history {
            let _ = write!(out, "{},{}", rec.epoch, exact(rec.train_loss));
            for l in &rec.task_losses {
                let _ = write!(out, ",{}", exact(*l));
            }
            for r in &rec.val {
                for (_, v) in &r.values {
                    let _ = write!(out, ",{}", exact(*v));
                }
            }
            let _ = writeln!(out, ",{},{}", exact(rec.objective), rec.improved as u8);
        }
        out
    }
}

fn selection_score(reports: &[MetricsReport], metric: Option<&str>) -> f64 {
    let mut total = 0.0;
    for r in reports {
        let (default, higher) = MetricsReport::headline_name(r.task);
        let name = metric.unwrap_or(default);
        let higher = if metric.is_some() { !matches!(name, "mse" | "mape") } else { higher };
        let v = r.get(name).unwrap_or(f64::NAN);
        total += if higher { v } else { -v };
    }
    let s = total / reports.len() as f64;
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

fn check_tasks(model: &SandModel, tasks: &[TaskData]) -> Result<()> {
    let first = tasks.first().ok_or_else(|| Error::Config("no tasks to train".into()))?;
    for (i, t) in tasks.iter().enumerate() {
        let head = model
            .heads()
            .get(t.head)
            .ok_or_else(|| Error::Config(format!("model has no head {}", t.head)))?;
        if tasks[..i].iter().any(|o| o.head == t.head) {
            return Err(Error::Config(format!("head `{}` given twice", head.spec.name)));
        }
        for ds in [t.train, t.val] {
            if ds.task != head.spec.kind {
                return Err(Error::Label(format!(
                    "head `{}` is {} but its data is {}",
                    head.spec.name, head.spec.kind, ds.task
                )));
            }
            if ds.input_dim != model.config().input_dim {
                return Err(Error::dim("train", &[ds.input_dim], &[model.config().input_dim]));
            }
            ds.validate()?;
        }
        for (a, b) in [(first.train, t.train), (first.val, t.val)] {
            let same = a.len() == b.len()
                && a.samples.iter().zip(&b.samples).all(|(x, y)| x.id == y.id && x.len == y.len);
            if !same {
                return Err(Error::Shape("tasks must share the same samples in the same order".into()));
            }
        }
    }
    if first.train.is_empty() {
        return Err(Error::EmptyBatch("training set is empty".into()));
    }
    Ok(())
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// validation epoch.
///
/// With one task its loss is used as is; with several, each head's loss is
/// weighted by `weights.for_kind` of its kind.
pub fn train(
    model: &mut SandModel,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    weights: &MultiTaskWeights,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    check_tasks(model, tasks)?;
    let heads: Vec<usize> = tasks.iter().map(|t| t.head).collect();
    let w: Vec<f64> = if tasks.len() == 1 {
        vec![1.0]
    } else {
        heads.iter().map(|&h| weights.for_kind(model.heads()[h].spec.kind)).collect()
    };

    let (train_sets, val_sets): (Vec<Dataset>, Vec<Dataset>) = if cfg.standardize {
        let stats = ChannelStats::fit(tasks[0].train);
        let prepared = tasks
            .iter()
            .map(|t| Ok((stats.apply(t.train)?, stats.apply(t.val)?)))
            .collect::<Result<Vec<_>>>()?;
        model.input_stats = Some(stats);
        prepared.into_iter().unzip()
    } else {
        let prepared = match &model.input_stats {
            Some(stats) => tasks
                .iter()
                .map(|t| Ok((stats.apply(t.train)?, stats.apply(t.val)?)))
                .collect::<Result<Vec<_>>>()?,
            None => tasks.iter().map(|t| (t.train.clone(), t.val.clone())).collect(),
        };
        prepared.into_iter().unzip()
    };

    for (t, ds) in tasks.iter().zip(&train_sets) {
        if let TaskKind::Multiclass(c) = ds.task {
            let values: Option<Vec<f64>> = ds.samples.iter().map(|s| s.value).collect();
            if let Some(values) = values {
                let labels: Vec<usize> = ds
                    .samples
                    .iter()
                    .map(|s| match s.label {
                        Label::Class(c) => c,
                        _ => 0,
                    })
                    .collect();
                model.heads_mut()[t.head].bucket_values = Some(bucket_means(&labels, &values, c));
            }
        }
    }

    let train_refs: Vec<&Dataset> = train_sets.iter().collect();
    let mut adam = Adam::new(cfg.lr, model.params());
    let mut best_params: ParamStore = model.params().clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut outcome = TrainOutcome {
        task_names: heads.iter().map(|&h| model.heads()[h].spec.name.clone()).collect(),
        lambda: *weights,
        weights: w.clone(),
        history: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        diverged: None,
    };
    let dropout_root = stream_seed(cfg.seed, "dropout");
    let mut stale = 0;
    let mut step = 0u64;

    'epochs: for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut task_sums, mut seen) = (0.0, vec![0.0; heads.len()], 0usize);
        for chunk in epoch_chunks(train_refs[0].len(), cfg, epoch) {
            for idx in chunk.chunks(cfg.batch_size) {
                step += 1;
                let batch = MultiBatch::gather(&train_refs, idx)?;
                let g = compute_gradients(model, &heads, &w, &batch, cfg.shards, Some(derive(dropout_root, &[step])));
                let mut g = match g {
                    Ok(g) if g.loss.is_finite() => g,
                    Ok(g) => {
                        outcome.diverged = Some(format!("loss became {} at epoch {epoch}, step {step}", g.loss));
                        break 'epochs;
                    }
                    Err(e @ Error::NonFiniteGradient { .. }) => {
                        outcome.diverged = Some(format!("{e} at epoch {epoch}, step {step}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                if let Some(c) = cfg.clip_norm {
                    clip_global_norm(&mut g.grads, c);
                }
                match adam.step(model.params_mut(), &g.grads) {
                    Ok(()) => {}
                    Err(e @ Error::NonFiniteGradient { .. }) => {
                        outcome.diverged = Some(format!("{e} at epoch {epoch}, step {step}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
                let n = idx.len();
                loss_sum += g.loss * n as f64;
                for (acc, l) in task_sums.iter_mut().zip(&g.task_losses) {
                    *acc += l * n as f64;
                }
                seen += n;
            }
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let val: Vec<MetricsReport> = if val_sets[0].is_empty() {
            Vec::new()
        } else {
            heads
                .iter()
                .zip(&val_sets)
                .map(|(&h, ds)| evaluate_prepared(model, h, ds, cfg.eval_batch))
                .collect::<Result<_>>()?
        };
        let objective = if val.is_empty() {
            -train_loss
        } else {
            selection_score(&val, cfg.eval_metric.as_deref())
        };
        let improved = objective > best_score || outcome.best_epoch.is_none();
        if improved {
            best_score = objective;
            best_params = model.params().clone();
            outcome.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        outcome.history.push(EpochRecord {
            epoch,
            train_loss,
            task_losses: task_sums.iter().map(|s| s / seen.max(1) as f64).collect(),
            val,
            objective,
            improved,
        });
        if cfg.patience > 0 && stale >= cfg.patience {
            outcome.stopped_early = true;
            break;
        }
    }
    *model.params_mut() = best_params;
    Ok(outcome)
}
