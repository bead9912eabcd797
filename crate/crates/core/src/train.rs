//! Losses, AdamW, learning-rate schedule, MLM masking, the supervised
//! training loop, task-adaptive pre-training and checkpoint selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabeledItem, LabeledSet, Subtask};
use crate::error::{Error, Result};
use crate::eval::f1_rows;
use crate::inference::decode;
use crate::model::{forward_classify, MaskedSeq, Model, TrainMode};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};
use crate::textprep::{encode, prepare_article_text, Abbreviations, TokenSeq, Vocab, CLS, MASK, PAD, RESERVED, SEP};
use crate::util::{stable_hash, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Only double precision is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub adam: AdamWConfig,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Decision threshold for multilabel tasks.
    pub threshold: f64,
    /// Weight the loss by inverse class frequency.
    #[serde(default)]
    pub class_weighting: bool,
}

/// Learning-rate multiplier applied by [`TrainConfig::desk_scaled`].
pub const DESK_LR_SCALE: f64 = 30.0;

pub const DESK_TAPT_BATCH: usize = 16;

impl TrainConfig {
    /// Genre, full fine-tuning.
    pub fn st1_full() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            peak_lr: 1e-5,
            warmup_ratio: 0.0,
            adam: AdamWConfig::default(),
            seed: 0,
            precision: Precision::Double,
            threshold: 0.5,
            class_weighting: false,
        }
    }

    /// Genre, adapters.
    pub fn st1_adapter() -> Self {
        TrainConfig {
            epochs: 20,
            peak_lr: 1e-4,
            ..Self::st1_full()
        }
    }

    /// Framing, monolingual full fine-tuning.
    pub fn st2_mono() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            peak_lr: 3e-5,
            warmup_ratio: 0.1,
            adam: AdamWConfig::default(),
            seed: 0,
            precision: Precision::Double,
            threshold: 0.5,
            class_weighting: false,
        }
    }

    /// Framing, multilingual adapters on a TAPT base.
    pub fn st2_multi_tapt_adapter() -> Self {
        TrainConfig {
            peak_lr: 1e-4,
            ..Self::st2_mono()
        }
    }

    /// Persuasion, English-only model.
    pub fn st3_mono_en() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            peak_lr: 5e-5,
            warmup_ratio: 0.2,
            adam: AdamWConfig {
                weight_decay: 0.1,
                ..AdamWConfig::default()
            },
            seed: 0,
            precision: Precision::Double,
            threshold: 0.4,
            class_weighting: false,
        }
    }

    /// Persuasion, all languages combined.
    pub fn st3_multi() -> Self {
        TrainConfig {
            batch_size: 16,
            ..Self::st3_mono_en()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "st1_full" => Ok(Self::st1_full()),
            "st1_adapter" => Ok(Self::st1_adapter()),
            "st2_mono" => Ok(Self::st2_mono()),
            "st2_multi_tapt_adapter" => Ok(Self::st2_multi_tapt_adapter()),
            "st3_mono_en" => Ok(Self::st3_mono_en()),
            "st3_multi" => Ok(Self::st3_multi()),
            other => Err(Error::Config(format!("unknown training preset {other:?}"))),
        }
    }

    /// The same schedule with the learning rate raised for a randomly
    /// initialised desk-size encoder.
    pub fn desk_scaled(&self) -> Self {
        TrainConfig {
            peak_lr: self.peak_lr * DESK_LR_SCALE,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak learning rate {} must be positive", self.peak_lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        lr_at(self.peak_lr, self.warmup_ratio, step, total_steps)
    }
}

pub fn warmup_steps(warmup_ratio: f64, total_steps: usize) -> usize {
    (warmup_ratio * total_steps as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Linear warm-up from 0 to `peak` over the first `ceil(ratio * total)`
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_at(peak: f64, warmup_ratio: f64, step: usize, total_steps: usize) -> f64 {
    let w = warmup_steps(warmup_ratio, total_steps);
    if step < w {
        peak * step as f64 / w as f64
    } else if total_steps <= w {
        peak
    } else {
        peak * (total_steps.saturating_sub(step)) as f64 / (total_steps - w) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update of every trainable parameter that has a gradient.
/// Weight decay is decoupled and applies only to parameters flagged for it.
pub fn adamw_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamWState, cfg: &AdamWConfig, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    state.m.resize(store.len(), None);
    state.v.resize(store.len(), None);
    for (idx, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = store.by_index_mut(idx);
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let m = state.m[idx].get_or_insert_with(|| vec![0.0; n]);
        let v = state.v[idx].get_or_insert_with(|| vec![0.0; n]);
        let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w -= decay * *w;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Sums per-example gradients in arrival order.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    grads: Vec<Option<Tensor>>,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: Vec<Option<Tensor>>) {
        if self.grads.len() < grads.len() {
            self.grads.resize(grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (_, None) => {}
                (None, Some(g)) => *slot = Some(g),
                (Some(acc), Some(g)) => acc.add_assign(&g),
            }
        }
    }

    pub fn take(&mut self) -> Vec<Option<Tensor>> {
        std::mem::take(&mut self.grads)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    Multi(Vec<bool>),
}

impl Target {
    pub fn from_label(label: &Label) -> Target {
        match label {
            Label::Genre(g) => Target::Class(g.index()),
            Label::Multi(v) => Target::Multi(v.clone()),
        }
    }

    pub fn to_row(&self, n_classes: usize) -> Vec<bool> {
        match self {
            Target::Class(c) => (0..n_classes).map(|i| i == *c).collect(),
            Target::Multi(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub key: String,
    pub language: String,
    pub seq: TokenSeq,
    pub target: Target,
}

/// Model input text for an item: head+tail truncated articles (title kept),
/// or the paragraph for paragraph-level items.
pub fn item_text(item: &LabeledItem, vocab: &Vocab, max_len: usize) -> String {
    match item.key.paragraph {
        Some(_) => item.text(),
        None => prepare_article_text(&item.article, max_len, vocab, &Abbreviations::for_language(item.language())),
    }
}

pub fn encode_examples(set: &LabeledSet, vocab: &Vocab, max_len: usize) -> Vec<Example> {
    set.items
        .iter()
        .map(|item| Example {
            key: item.key.to_string(),
            language: item.language().to_string(),
            seq: encode(&item_text(item, vocab, max_len), vocab, max_len),
            target: Target::from_label(&item.label),
        })
        .collect()
}

/// Normaliser for one batch: `1 / Σ w_y` for genre, `1 / (B·C)` for
/// multilabel tasks.
pub fn loss_scale(task: Subtask, targets: &[&Target], class_weights: Option<&[f64]>) -> f64 {
    if task.is_multilabel() {
        let c = task.class_count();
        1.0 / (targets.len() * c).max(1) as f64
    } else {
        let total: f64 = targets
            .iter()
            .map(|t| match t {
                Target::Class(y) => class_weights.map_or(1.0, |w| w[*y]),
                Target::Multi(_) => 1.0,
            })
            .sum();
        if total > 0.0 {
            1.0 / total
        } else {
            0.0
        }
    }
}

fn check_target(task: Subtask, target: &Target, n_classes: usize) -> Result<()> {
    match (task.is_multilabel(), target) {
        (false, Target::Class(y)) if *y < n_classes => Ok(()),
        (true, Target::Multi(v)) if v.len() == n_classes => Ok(()),
        _ => Err(Error::Contract(format!("target {target:?} does not fit a {task} head of {n_classes} classes"))),
    }
}

/// Adds the loss of one example (already scaled) to the graph.
pub fn example_loss(g: &mut Graph<'_>, logits: NodeId, target: &Target, class_weights: Option<&[f64]>, scale: f64) -> Result<NodeId> {
    match target {
        Target::Class(y) => g.cross_entropy(logits, &[*y], class_weights, scale),
        Target::Multi(v) => {
            let t: Vec<f64> = v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            g.bce_with_logits(logits, &t, class_weights, scale)
        }
    }
}

/// Batch loss: class-weighted cross-entropy normalised by the summed target
/// weights for genre; class-weighted binary cross-entropy averaged over
/// items and classes for multilabel tasks.
pub fn compute_loss(logits: &Tensor, targets: &[Target], task: Subtask, class_weights: Option<&[f64]>) -> Result<f64> {
    let c = task.class_count();
    if logits.shape() != [targets.len(), c] {
        return Err(Error::Contract(format!(
            "logits of shape {:?} for {} targets of {c} classes",
            logits.shape(),
            targets.len()
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::Contract(format!("{} class weights for {c} classes", w.len())));
        }
    }
    for t in targets {
        check_target(task, t, c)?;
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let z = g.input(logits.clone());
    let refs: Vec<&Target> = targets.iter().collect();
    let scale = loss_scale(task, &refs, class_weights);
    let loss = if task.is_multilabel() {
        let flat: Vec<f64> = targets
            .iter()
            .flat_map(|t| t.to_row(c))
            .map(|b| if b { 1.0 } else { 0.0 })
            .collect();
        g.bce_with_logits(z, &flat, class_weights, scale)?
    } else {
        let ys: Vec<usize> = targets
            .iter()
            .map(|t| match t {
                Target::Class(y) => *y,
                Target::Multi(_) => unreachable!("checked above"),
            })
            .collect();
        g.cross_entropy(z, &ys, class_weights, scale)?
    };
    Ok(g.value(loss).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_overall: Option<f64>,
    pub val_by_language: BTreeMap<String, f64>,
    /// Optimizer steps taken so far.
    pub step: usize,
}

/// Per-epoch metrics and snapshots of the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSeries {
    pub records: Vec<EpochRecord>,
    snapshots: Vec<Vec<(usize, Tensor)>>,
}

impl CheckpointSeries {
    /// Metrics only, without snapshots; `restore` fails on the result.
    pub fn from_records(records: Vec<EpochRecord>) -> Self {
        CheckpointSeries {
            records,
            snapshots: Vec::new(),
        }
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.epoch).collect()
    }

    pub fn record(&self, epoch: usize) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    /// Loads the snapshot taken after `epoch` into `model`.
    pub fn restore(&self, model: &mut Model, epoch: usize) -> Result<()> {
        let pos = self
            .records
            .iter()
            .position(|r| r.epoch == epoch)
            .filter(|&p| p < self.snapshots.len())
            .ok_or_else(|| Error::Contract(format!("no snapshot for epoch {epoch}")))?;
        for (idx, t) in &self.snapshots[pos] {
            model.params.by_index_mut(*idx).value = t.clone();
        }
        Ok(())
    }

    /// `epoch<TAB>language<TAB>f1_macro<TAB>train_loss`, one row per
    /// language plus an `all` row; `NA` when there was no validation.
    pub fn metrics_tsv(&self) -> String {
        let mut out = String::from("epoch\tlanguage\tf1_macro\ttrain_loss\n");
        for r in &self.records {
            for (lang, f1) in &r.val_by_language {
                let _ = writeln!(out, "{}\t{lang}\t{f1}\t{}", r.epoch, r.train_loss);
            }
            match r.val_overall {
                Some(f1) => {
                    let _ = writeln!(out, "{}\tall\t{f1}\t{}", r.epoch, r.train_loss);
                }
                None => {
                    let _ = writeln!(out, "{}\tall\tNA\t{}", r.epoch, r.train_loss);
                }
            }
        }
        out
    }
}

pub struct TrainJob<'a> {
    pub task: Subtask,
    pub train: &'a [Example],
    /// `None` trains without validation; only training loss is recorded.
    pub validation: Option<&'a [Example]>,
    pub class_weights: Option<&'a [f64]>,
}

/// Macro F1 per language and over the pooled set.
pub fn validate_model(model: &Model, task: Subtask, examples: &[Example], threshold: f64) -> Result<(f64, BTreeMap<String, f64>)> {
    let c = task.class_count();
    let names = task.registry().names().to_vec();
    let seqs: Vec<TokenSeq> = examples.iter().map(|e| e.seq.clone()).collect();
    let logits = forward_classify(model, task, &seqs)?;
    let pred: Vec<Vec<bool>> = (0..examples.len()).map(|r| decode(task, logits.row(r), threshold).0).collect();
    let gold: Vec<Vec<bool>> = examples.iter().map(|e| e.target.to_row(c)).collect();
    let overall = f1_rows(&pred, &gold, &names)?.macro_avg.f1;
    let mut groups: BTreeMap<&str, (Vec<Vec<bool>>, Vec<Vec<bool>>)> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        let g = groups.entry(e.language.as_str()).or_default();
        g.0.push(pred[i].clone());
        g.1.push(gold[i].clone());
    }
    let mut by_lang = BTreeMap::new();
    for (lang, (p, g)) in groups {
        by_lang.insert(lang.to_string(), f1_rows(&p, &g, &names)?.macro_avg.f1);
    }
    Ok((overall, by_lang))
}

fn snapshot_trainable(store: &ParamStore) -> Vec<(usize, Tensor)> {
    (0..store.len())
        .filter(|&i| store.by_index(i).trainable)
        .map(|i| (i, store.by_index(i).value.clone()))
        .collect()
}

/// Fixed-epoch training with seeded shuffling and dropout; a snapshot and
/// metrics are recorded after every epoch.
pub fn train_model(model: &mut Model, job: &TrainJob<'_>, cfg: &TrainConfig) -> Result<CheckpointSeries> {
    cfg.validate()?;
    if job.train.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let task = job.task;
    let c = task.class_count();
    if model.head(task).is_none() {
        return Err(Error::Contract(format!("model has no {task} head")));
    }
    if let Some(w) = job.class_weights {
        if w.len() != c {
            return Err(Error::Contract(format!("{} class weights for {c} classes", w.len())));
        }
    }
    for e in job.train {
        check_target(task, &e.target, c)?;
    }
    let n = job.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut state = AdamWState::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut rng = stream_rng(cfg.seed, &format!("shuffle/{epoch}"));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let targets: Vec<&Target> = batch.iter().map(|&i| &job.train[i].target).collect();
            let scale = loss_scale(task, &targets, job.class_weights);
            let mut acc = GradAccumulator::new();
            let mut batch_loss = 0.0;
            for (j, &i) in batch.iter().enumerate() {
                let ex = &job.train[i];
                let mut drop_rng = stream_rng(cfg.seed, &format!("dropout/{epoch}/{step}/{j}"));
                let mut g = Graph::new(&model.params);
                let h = model.encode(&mut g, ex.seq.active(), Some(&mut drop_rng))?;
                let logits = model.classify(&mut g, task, h, Some(&mut drop_rng))?;
                let loss = example_loss(&mut g, logits, &ex.target, job.class_weights, scale)?;
                batch_loss += g.value(loss).item();
                acc.add(g.backward(loss)?.into_param_grads());
            }
            if !batch_loss.is_finite() || !acc.all_finite() {
                return Err(Error::Divergent {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            let lr = cfg.lr_at(step, total_steps);
            adamw_step(&mut model.params, &acc.take(), &mut state, &cfg.adam, lr);
            loss_sum += batch_loss;
            step += 1;
        }
        let train_loss = loss_sum / steps_per_epoch as f64;
        let (val_overall, val_by_language) = match job.validation {
            Some(v) if !v.is_empty() => {
                let (o, l) = validate_model(model, task, v, cfg.threshold)?;
                (Some(o), l)
            }
            _ => (None, BTreeMap::new()),
        };
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.5}{}",
            cfg.epochs,
            val_overall.map(|f| format!(", validation F1 macro {f:.4}")).unwrap_or_default()
        );
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_overall,
            val_by_language,
            step,
        });
        snapshots.push(snapshot_trainable(&model.params));
    }
    Ok(CheckpointSeries { records, snapshots })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    /// Fraction of maskable positions selected.
    pub rate: f64,
    /// Of the selected: share replaced by `[MASK]`.
    pub mask_share: f64,
    /// Of the selected: share replaced by a random token; the rest stay.
    pub random_share: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            rate: 0.15,
            mask_share: 0.8,
            random_share: 0.1,
        }
    }
}

fn maskable(id: u32) -> bool {
    !matches!(id, PAD | CLS | SEP | MASK)
}

/// Selects `max(1, round(rate·n))` of the `n` maskable positions (none when
/// the rate is 0) and corrupts them: `[MASK]`, a random non-special token,
/// or unchanged.
pub fn mask_tokens(seq: &TokenSeq, policy: &MaskPolicy, vocab_size: usize, seed: u64) -> MaskedSeq {
    let mut rng = stream_rng(seed, "mask");
    let candidates: Vec<usize> = (0..seq.len).filter(|&i| maskable(seq.ids[i])).collect();
    let n = candidates.len();
    let k = if policy.rate <= 0.0 || n == 0 {
        0
    } else {
        ((policy.rate * n as f64).round() as usize).clamp(1, n)
    };
    let mut chosen: Vec<usize> = sample(&mut rng, n, k).into_iter().map(|i| candidates[i]).collect();
    chosen.sort_unstable();
    let mut out = seq.clone();
    let mut targets = Vec::with_capacity(k);
    for &pos in &chosen {
        targets.push(seq.ids[pos]);
        let u: f64 = rng.gen();
        if u < policy.mask_share {
            out.ids[pos] = MASK;
        } else if u < policy.mask_share + policy.random_share {
            out.ids[pos] = rng.gen_range(RESERVED as u32..vocab_size as u32);
        }
    }
    MaskedSeq {
        seq: out,
        positions: chosen,
        targets,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaptConfig {
    pub epochs: usize,
    pub effective_batch: usize,
    /// Examples per accumulation step; must divide `effective_batch`.
    pub micro_batch: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub adam: AdamWConfig,
    pub mask: MaskPolicy,
    pub seed: u64,
}

impl Default for TaptConfig {
    fn default() -> Self {
        TaptConfig {
            epochs: 60,
            effective_batch: 128,
            micro_batch: 16,
            peak_lr: 1e-4,
            warmup_ratio: 0.06,
            adam: AdamWConfig {
                beta1: 0.9,
                beta2: 0.98,
                eps: 1e-6,
                weight_decay: 0.01,
            },
            mask: MaskPolicy::default(),
            seed: 0,
        }
    }
}

impl TaptConfig {
    /// Desk learning rate, and batches of at most [`DESK_TAPT_BATCH`] so a
    /// corpus of a few hundred articles still gets several steps per epoch.
    pub fn desk_scaled(&self) -> Self {
        let effective_batch = self.effective_batch.min(DESK_TAPT_BATCH);
        TaptConfig {
            peak_lr: self.peak_lr * DESK_LR_SCALE,
            effective_batch,
            micro_batch: self.micro_batch.min(effective_batch),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) || !(self.peak_lr > 0.0) {
            return Err(Error::Config("TAPT needs warmup ratio in [0, 1) and a positive learning rate".into()));
        }
        if self.effective_batch == 0 || self.micro_batch == 0 || self.effective_batch % self.micro_batch != 0 {
            return Err(Error::Config(format!(
                "micro batch {} must divide effective batch {}",
                self.micro_batch, self.effective_batch
            )));
        }
        if !(0.0..=1.0).contains(&self.mask.rate) {
            return Err(Error::Config(format!("mask rate {} outside [0, 1]", self.mask.rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaptReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn mask_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    stable_hash(&format!("{seed}/{epoch}/{index}"))
}

/// Masked-language-model training of every encoder parameter. Gradients of
/// `effective_batch / micro_batch` micro-batches are accumulated before
/// each optimizer step; the loss is the mean over all masked positions of
/// the effective batch.
pub fn tapt(model: &mut Model, corpus: &[TokenSeq], cfg: &TaptConfig) -> Result<TaptReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Validation("empty TAPT corpus".into()));
    }
    model.set_mode(TrainMode::Full);
    let v = model.config.vocab_size;
    let n = corpus.len();
    let steps_per_epoch = n.div_ceil(cfg.effective_batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut state = AdamWState::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = stream_rng(cfg.seed, &format!("tapt-shuffle/{epoch}"));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.effective_batch) {
            let masked: Vec<MaskedSeq> = batch
                .iter()
                .map(|&i| mask_tokens(&corpus[i], &cfg.mask, v, mask_seed(cfg.seed, epoch, i)))
                .collect();
            let total_masked: usize = masked.iter().map(|m| m.positions.len()).sum();
            let mut acc = GradAccumulator::new();
            let mut batch_loss = 0.0;
            if total_masked > 0 {
                let scale = 1.0 / total_masked as f64;
                for (mb, micro) in masked.chunks(cfg.micro_batch).enumerate() {
                    for (j, m) in micro.iter().enumerate() {
                        if m.positions.is_empty() {
                            continue;
                        }
                        let j = mb * cfg.micro_batch + j;
                        let mut drop_rng = stream_rng(cfg.seed, &format!("tapt-dropout/{epoch}/{step}/{j}"));
                        let mut g = Graph::new(&model.params);
                        let h = model.encode(&mut g, m.seq.active(), Some(&mut drop_rng))?;
                        let logits = model.mlm_logits(&mut g, h, &m.positions)?;
                        let ys: Vec<usize> = m.targets.iter().map(|&t| t as usize).collect();
                        let loss = g.cross_entropy(logits, &ys, None, scale)?;
                        batch_loss += g.value(loss).item();
                        acc.add(g.backward(loss)?.into_param_grads());
                    }
                }
            }
            if !batch_loss.is_finite() || !acc.all_finite() {
                return Err(Error::Divergent {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            let lr = lr_at(cfg.peak_lr, cfg.warmup_ratio, step, total_steps);
            adamw_step(&mut model.params, &acc.take(), &mut state, &cfg.adam, lr);
            loss_sum += batch_loss;
            step += 1;
        }
        let loss = loss_sum / steps_per_epoch as f64;
        log::info!("TAPT epoch {epoch}/{}: masked-token loss {loss:.5}", cfg.epochs);
        epoch_losses.push(loss);
    }
    Ok(TaptReport { epoch_losses, steps: step })
}

/// Evaluation-mode mean cross-entropy over masked positions, with masks
/// drawn from `seed` so repeated calls score the same positions.
pub fn mlm_eval_loss(model: &Model, corpus: &[TokenSeq], policy: &MaskPolicy, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, seq) in corpus.iter().enumerate() {
        let m = mask_tokens(seq, policy, model.config.vocab_size, mask_seed(seed, 0, i));
        if m.positions.is_empty() {
            continue;
        }
        let mut g = Graph::new(&model.params);
        let h = model.encode(&mut g, m.seq.active(), None)?;
        let logits = model.mlm_logits(&mut g, h, &m.positions)?;
        let ys: Vec<usize> = m.targets.iter().map(|&t| t as usize).collect();
        let loss = g.cross_entropy(logits, &ys, None, 1.0)?;
        total += g.value(loss).item();
        count += ys.len();
    }
    if count == 0 {
        return Err(Error::Validation("no maskable tokens in the evaluation corpus".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    PerLanguage,
    OverallBest,
    MinTrainLoss,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_language" => Ok(SelectionStrategy::PerLanguage),
            "overall_best" => Ok(SelectionStrategy::OverallBest),
            "min_train_loss" => Ok(SelectionStrategy::MinTrainLoss),
            other => Err(Error::Validation(format!("unknown selection strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    PerLanguage(BTreeMap<String, usize>),
    Single(usize),
}

/// Earliest epoch attaining the best `score` (higher is better).
fn argbest(records: &[EpochRecord], score: impl Fn(&EpochRecord) -> Option<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for r in records {
        let s = score(r)?;
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((r.epoch, s));
        }
    }
    best.map(|(e, _)| e)
}

pub fn select_checkpoint(series: &CheckpointSeries, strategy: SelectionStrategy) -> Result<Selection> {
    let records = &series.records;
    if records.is_empty() {
        return Err(Error::Contract("empty checkpoint series".into()));
    }
    let missing = |what: &str| Error::Contract(format!("series lacks {what} needed for selection"));
    match strategy {
        SelectionStrategy::OverallBest => argbest(records, |r| r.val_overall)
            .map(Selection::Single)
            .ok_or_else(|| missing("validation F1")),
        SelectionStrategy::MinTrainLoss => argbest(records, |r| Some(-r.train_loss))
            .map(Selection::Single)
            .ok_or_else(|| missing("training loss")),
        SelectionStrategy::PerLanguage => {
            let languages = &records[0].val_by_language;
            if languages.is_empty() {
                return Err(missing("per-language validation F1"));
            }
            let mut out = BTreeMap::new();
            for lang in languages.keys() {
                let e = argbest(records, |r| r.val_by_language.get(lang).copied())
                    .ok_or_else(|| missing(&format!("validation F1 for {lang} at every epoch")))?;
                out.insert(lang.clone(), e);
            }
            Ok(Selection::PerLanguage(out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Subtask;

    fn record(epoch: usize, loss: f64, by: &[(&str, f64)]) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: loss,
            val_overall: if by.is_empty() { None } else { Some(by.iter().map(|x| x.1).sum::<f64>() / by.len() as f64) },
            val_by_language: by.iter().map(|(l, f)| (l.to_string(), *f)).collect(),
            step: epoch,
        }
    }

    fn series(records: Vec<EpochRecord>) -> CheckpointSeries {
        let n = records.len();
        CheckpointSeries {
            records,
            snapshots: vec![Vec::new(); n],
        }
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(lr_at(1.0, 0.1, 10, 100), 1.0);
        assert_eq!(lr_at(1.0, 0.1, 5, 100), 0.5);
        assert_eq!(lr_at(1.0, 0.1, 100, 100), 0.0);
        assert_eq!(lr_at(1.0, 0.1, 0, 100), 0.0);
        assert_eq!(lr_at(2.0, 0.0, 0, 10), 2.0);
        assert!((lr_at(1.0, 0.1, 55, 100) - 0.5).abs() < 1e-15);
        let peaks = (0..=100).filter(|&s| lr_at(1.0, 0.1, s, 100) == 1.0).count();
        assert_eq!(peaks, 1);
    }

    #[test]
    fn adamw_scalar_against_hand_steps() {
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        };
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.5), true);
        let mut state = AdamWState::new();
        let gs = [0.3, -0.2, 0.05];
        let lr = 1e-2;
        // hand-stepped reference
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let t = t as i32 + 1;
            w -= lr * 0.01 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.98 * v + 0.02 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.98f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-6);
            adamw_step(&mut store, &[Some(Tensor::scalar(g))], &mut state, &cfg, lr);
            assert!((store.value("w").unwrap().item() - w).abs() < 1e-12);
        }

        // first step from zero moments: −lr·g/(|g| + eps)
        let mut s2 = ParamStore::new();
        s2.insert("b", Tensor::scalar(1.0), false);
        let mut st = AdamWState::new();
        adamw_step(&mut s2, &[Some(Tensor::scalar(-4.0))], &mut st, &cfg, 0.1);
        let expected = 1.0 + 0.1 * 4.0 / (4.0 + 1e-6);
        assert!((s2.value("b").unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_gradient_and_bias_exclusion() {
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 3.0), false);
        let before = store.clone();
        let mut state = AdamWState::new();
        adamw_step(&mut store, &[Some(Tensor::zeros(&[2]))], &mut state, &cfg, 0.1);
        assert_eq!(store, before);

        let mut decayed = ParamStore::new();
        decayed.insert("w", Tensor::full(&[2], 3.0), true);
        adamw_step(&mut decayed, &[Some(Tensor::zeros(&[2]))], &mut AdamWState::new(), &cfg, 0.1);
        for &w in decayed.value("w").unwrap().data() {
            assert!((w - 2.85).abs() < 1e-15);
        }
    }

    #[test]
    fn losses() {
        let z = Tensor::from_vec(&[1, 14], vec![0.0; 14]).unwrap();
        let mut row = vec![false; 14];
        row[0] = true;
        let l = compute_loss(&z, &[Target::Multi(row.clone())], Subtask::Framing, None).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let logits = Tensor::from_vec(&[2, 3], vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3]).unwrap();
        let t = [Target::Class(2), Target::Class(0)];
        let plain = compute_loss(&logits, &t, Subtask::Genre, None).unwrap();
        let uniform = compute_loss(&logits, &t, Subtask::Genre, Some(&[2.0, 2.0, 2.0])).unwrap();
        assert!((plain - uniform).abs() < 1e-15);

        let wrong = Tensor::zeros(&[2, 4]);
        assert!(matches!(compute_loss(&wrong, &t, Subtask::Genre, None), Err(Error::Contract(_))));
    }

    #[test]
    fn masking_rules() {
        let seq = TokenSeq {
            ids: vec![CLS, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, SEP, PAD, PAD],
            len: 12,
        };
        let none = mask_tokens(&seq, &MaskPolicy { rate: 0.0, ..MaskPolicy::default() }, 50, 1);
        assert!(none.positions.is_empty());
        assert_eq!(none.seq, seq);

        let policy = MaskPolicy { rate: 1.0, ..MaskPolicy::default() };
        let all = mask_tokens(&seq, &policy, 50, 42);
        assert_eq!(all.positions, (1..=10).collect::<Vec<_>>());
        assert_eq!(all.targets, (10..20).collect::<Vec<u32>>());

        // Replay the seeded draws independently.
        let mut rng = stream_rng(42, "mask");
        let _ = sample(&mut rng, 10, 10);
        let mut expected = seq.ids.clone();
        for pos in 1..=10 {
            let u: f64 = rng.gen();
            if u < 0.8 {
                expected[pos] = MASK;
            } else if u < 0.9 {
                expected[pos] = rng.gen_range(RESERVED as u32..50);
            }
        }
        assert_eq!(all.seq.ids, expected);
        for (i, &id) in all.seq.ids.iter().enumerate() {
            if [0, 11, 12, 13].contains(&i) {
                assert_eq!(id, seq.ids[i]);
            }
        }
    }

    #[test]
    fn selection_strategies() {
        let mut recs = Vec::new();
        for e in 1..=20 {
            let pl = if e == 4 { 0.9 } else { 0.5 };
            let ru = e as f64 / 20.0 * 0.8;
            recs.push(record(e, 1.0 / e as f64, &[("pl", pl), ("ru", ru)]));
        }
        let s = series(recs);
        let sel = select_checkpoint(&s, SelectionStrategy::PerLanguage).unwrap();
        assert_eq!(
            sel,
            Selection::PerLanguage([("pl".to_string(), 4), ("ru".to_string(), 20)].into_iter().collect())
        );
        assert_eq!(select_checkpoint(&s, SelectionStrategy::MinTrainLoss).unwrap(), Selection::Single(20));

        let flat = series((1..=5).map(|e| record(e, 0.3, &[("en", 0.7)])).collect());
        assert_eq!(select_checkpoint(&flat, SelectionStrategy::OverallBest).unwrap(), Selection::Single(1));
        assert_eq!(select_checkpoint(&flat, SelectionStrategy::MinTrainLoss).unwrap(), Selection::Single(1));

        let noval = series((1..=3).map(|e| record(e, 0.3, &[])).collect());
        assert!(matches!(select_checkpoint(&noval, SelectionStrategy::OverallBest), Err(Error::Contract(_))));
    }

    #[test]
    fn presets() {
        let p = TrainConfig::st3_mono_en();
        assert_eq!((p.epochs, p.batch_size, p.peak_lr, p.warmup_ratio, p.threshold), (20, 32, 5e-5, 0.2, 0.4));
        assert_eq!(p.adam.weight_decay, 0.1);
        assert_eq!(TrainConfig::st3_multi().batch_size, 16);
        assert_eq!(TrainConfig::st1_full().adam.eps, 1e-8);
        assert_eq!((TrainConfig::st2_mono().peak_lr, TrainConfig::st2_multi_tapt_adapter().peak_lr), (3e-5, 1e-4));
        let t = TaptConfig::default();
        assert_eq!((t.epochs, t.effective_batch, t.peak_lr, t.warmup_ratio), (60, 128, 1e-4, 0.06));
        assert_eq!((t.adam.beta2, t.adam.eps, t.adam.weight_decay), (0.98, 1e-6, 0.01));
        let d = t.desk_scaled();
        assert_eq!((d.effective_batch, d.micro_batch, d.peak_lr), (16, 16, 1e-4 * DESK_LR_SCALE));
        assert!(TrainConfig { warmup_ratio: 1.0, ..TrainConfig::st1_full() }.validate().is_err());
    }
}
