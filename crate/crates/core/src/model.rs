//! Micro transformer encoder with bottleneck adapters and task heads.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Subtask;
use crate::error::{Error, Result};
use crate::tensor::{read_snapshot, snapshot_manifest, write_snapshot, Activation, Graph, NodeId, ParamStore, Tensor};
use crate::textprep::{TokenSeq, RESERVED};
use crate::util::stream_rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Feed-forward nonlinearity.
    #[serde(default)]
    pub activation: Activation,
    /// Score masked positions against the token embedding table.
    #[serde(default = "default_true")]
    pub tie_mlm_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 128,
            dropout: 0.1,
            activation: Activation::Gelu,
            tie_mlm_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.d_model == 0 || c.n_layers == 0 || c.n_heads == 0 || c.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if c.d_model % c.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads = {} does not divide d_model = {}",
                c.n_heads, c.d_model
            )));
        }
        if c.max_len < 2 {
            return Err(Error::Config(format!("max_len = {} leaves no room for [CLS] and [SEP]", c.max_len)));
        }
        if c.vocab_size <= RESERVED {
            return Err(Error::Config(format!("vocab_size = {} must exceed the reserved ids", c.vocab_size)));
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(Error::Config(format!("dropout = {} outside [0, 1)", c.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    None,
    Houlsby,
    Pfeiffer,
}

impl Placement {
    /// Sublayers that receive an adapter.
    pub fn sites(self) -> &'static [&'static str] {
        match self {
            Placement::None => &[],
            Placement::Houlsby => &["attn", "ffn"],
            Placement::Pfeiffer => &["ffn"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub placement: Placement,
    pub reduction_factor: usize,
    pub nonlinearity: Activation,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            placement: Placement::None,
            reduction_factor: 8,
            nonlinearity: Activation::Gelu,
        }
    }
}

impl AdapterConfig {
    pub fn houlsby(reduction_factor: usize) -> Self {
        AdapterConfig {
            placement: Placement::Houlsby,
            reduction_factor,
            ..Self::default()
        }
    }

    pub fn pfeiffer(reduction_factor: usize) -> Self {
        AdapterConfig {
            placement: Placement::Pfeiffer,
            reduction_factor,
            ..Self::default()
        }
    }

    /// Bottleneck width `d_model / reduction_factor`.
    pub fn bottleneck(&self, d_model: usize) -> Result<usize> {
        let r = self.reduction_factor;
        if r == 0 || d_model % r != 0 {
            return Err(Error::Config(format!(
                "reduction factor {r} does not divide d_model = {d_model}"
            )));
        }
        Ok(d_model / r)
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.nonlinearity == Activation::Tanh {
            return Err(Error::Config("adapter nonlinearity must be relu or gelu".into()));
        }
        if self.placement != Placement::None {
            self.bottleneck(d_model)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub task: Subtask,
}

impl HeadConfig {
    pub fn new(task: Subtask) -> Self {
        HeadConfig { task }
    }

    pub fn n_classes(&self) -> usize {
        self.task.class_count()
    }

    fn prefix(&self) -> String {
        format!("head.{}", self.task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Full,
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub adapter: AdapterConfig,
    pub heads: Vec<HeadConfig>,
    pub mode: TrainMode,
    pub params: ParamStore,
}

fn init_normal(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let mut rng = stream_rng(seed, &format!("init/{name}"));
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
}

fn add_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, seed: u64) {
    let w = format!("{prefix}.weight");
    store.insert(&w, init_normal(&[fan_in, fan_out], seed, &w), true);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]), false);
}

fn add_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[d], 1.0), false);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]), false);
}

fn is_layer_norm(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta")
}

fn is_adapter(name: &str) -> bool {
    name.contains(".adapter.")
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// Token and learned position embeddings followed by post-norm layers of
/// self-attention and feed-forward blocks, with an MLM output bias.
pub fn build_encoder(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let (v, d) = (config.vocab_size, config.d_model);
    let mut p = ParamStore::new();
    p.insert("emb.token", init_normal(&[v, d], seed, "emb.token"), true);
    p.insert("emb.position", init_normal(&[config.max_len, d], seed, "emb.position"), true);
    add_layer_norm(&mut p, "emb.ln", d);
    for l in 0..config.n_layers {
        // No key bias: it shifts every score of a query row equally, so
        // softmax cancels it and its gradient is identically zero.
        for proj in ["q", "k", "v", "o"] {
            let prefix = format!("layer{l}.attn.{proj}");
            if proj == "k" {
                let w = format!("{prefix}.weight");
                p.insert(&w, init_normal(&[d, d], seed, &w), true);
            } else {
                add_linear(&mut p, &prefix, d, d, seed);
            }
        }
        add_layer_norm(&mut p, &format!("layer{l}.attn.ln"), d);
        add_linear(&mut p, &format!("layer{l}.ffn.in"), d, config.d_ff, seed);
        add_linear(&mut p, &format!("layer{l}.ffn.out"), config.d_ff, d, seed);
        add_layer_norm(&mut p, &format!("layer{l}.ffn.ln"), d);
    }
    if !config.tie_mlm_embeddings {
        p.insert("mlm.decoder", init_normal(&[v, d], seed, "mlm.decoder"), true);
    }
    p.insert("mlm.bias", Tensor::zeros(&[v]), false);
    Ok(Model {
        config: *config,
        adapter: AdapterConfig::default(),
        heads: Vec::new(),
        mode: TrainMode::Full,
        params: p,
    })
}

/// Adds bottleneck adapters (zero-initialised up-projection, so the model
/// function is unchanged) and switches the model to adapter mode.
pub fn insert_adapters(mut model: Model, adapter: AdapterConfig, seed: u64) -> Result<Model> {
    adapter.validate(model.config.d_model)?;
    if model.adapter.placement != Placement::None {
        return Err(Error::Config("model already has adapters".into()));
    }
    let d = model.config.d_model;
    if adapter.placement != Placement::None {
        let b = adapter.bottleneck(d)?;
        for l in 0..model.config.n_layers {
            for site in adapter.placement.sites() {
                let prefix = format!("layer{l}.adapter.{site}");
                add_linear(&mut model.params, &format!("{prefix}.down"), d, b, seed);
                model.params.insert(format!("{prefix}.up.weight"), Tensor::zeros(&[b, d]), true);
                model.params.insert(format!("{prefix}.up.bias"), Tensor::zeros(&[d]), false);
            }
        }
    }
    model.adapter = adapter;
    model.set_mode(TrainMode::Adapter);
    Ok(model)
}

/// Names of trainable parameters in store order.
pub fn trainable_parameters(model: &Model) -> Vec<String> {
    model
        .params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect()
}

/// Keep-mask for inverted dropout.
fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

impl Model {
    pub fn set_mode(&mut self, mode: TrainMode) {
        self.mode = mode;
        match mode {
            TrainMode::Full => self.params.set_trainable(|_| true),
            TrainMode::Adapter => self
                .params
                .set_trainable(|n| is_adapter(n) || is_head(n) || is_layer_norm(n)),
        }
    }

    pub fn head(&self, task: Subtask) -> Option<&HeadConfig> {
        self.heads.iter().find(|h| h.task == task)
    }

    /// Adds a pooler + classifier head; a no-op if the task already has one.
    pub fn add_head(&mut self, head: HeadConfig, seed: u64) {
        if self.head(head.task).is_some() {
            return;
        }
        let d = self.config.d_model;
        let prefix = head.prefix();
        add_linear(&mut self.params, &format!("{prefix}.dense"), d, d, seed);
        add_linear(&mut self.params, &format!("{prefix}.out"), d, head.n_classes(), seed);
        self.heads.push(head);
        self.set_mode(self.mode);
    }

    pub fn remove_heads(&mut self) {
        self.params.remove_prefix("head.");
        self.heads.clear();
    }

    fn check_len(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if ids.is_empty() {
            return Err(Error::Contract("empty sequence".into()));
        }
        Ok(())
    }

    fn maybe_dropout(&self, g: &mut Graph<'_>, x: NodeId, rng: &mut Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => {
                let mask = dropout_mask(r, g.value(x).numel(), self.config.dropout);
                g.dropout(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn adapter_block(&self, g: &mut Graph<'_>, h: NodeId, prefix: &str) -> Result<NodeId> {
        let down = g.linear(h, &format!("{prefix}.down.weight"), &format!("{prefix}.down.bias"))?;
        let act = g.activation(down, self.adapter.nonlinearity);
        let up = g.linear(act, &format!("{prefix}.up.weight"), &format!("{prefix}.up.bias"))?;
        g.add(h, up)
    }

    /// Encodes one active (un-padded) id sequence to hidden states `[T, d]`.
    /// Dropout is applied when an RNG is supplied.
    pub fn encode(&self, g: &mut Graph<'_>, ids: &[u32], mut rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        self.check_len(ids)?;
        let t = ids.len();
        let c = &self.config;
        g.set_scope("emb");
        let tok = g.param("emb.token")?;
        let tok = g.embedding(tok, ids)?;
        let pos = g.param("emb.position")?;
        let positions: Vec<u32> = (0..t as u32).collect();
        let pos = g.embedding(pos, &positions)?;
        let x = g.add(tok, pos)?;
        let (gm, bt) = (g.param("emb.ln.gamma")?, g.param("emb.ln.beta")?);
        let x = g.layer_norm(x, gm, bt, LAYER_NORM_EPS)?;
        let mut x = self.maybe_dropout(g, x, &mut rng)?;
        let sites = self.adapter.placement.sites();
        for l in 0..c.n_layers {
            g.set_scope(format!("layer{l}.attn"));
            let p = |s: &str| format!("layer{l}.attn.{s}");
            let q = g.linear(x, &p("q.weight"), &p("q.bias"))?;
            let kw = g.param(&p("k.weight"))?;
            let k = g.matmul(x, kw)?;
            let v = g.linear(x, &p("v.weight"), &p("v.bias"))?;
            let a = g.attention(q, k, v, c.n_heads)?;
            let a = g.linear(a, &p("o.weight"), &p("o.bias"))?;
            let mut a = self.maybe_dropout(g, a, &mut rng)?;
            if sites.contains(&"attn") {
                a = self.adapter_block(g, a, &format!("layer{l}.adapter.attn"))?;
            }
            let r = g.add(x, a)?;
            let (gm, bt) = (g.param(&p("ln.gamma"))?, g.param(&p("ln.beta"))?);
            x = g.layer_norm(r, gm, bt, LAYER_NORM_EPS)?;

            g.set_scope(format!("layer{l}.ffn"));
            let p = |s: &str| format!("layer{l}.ffn.{s}");
            let h = g.linear(x, &p("in.weight"), &p("in.bias"))?;
            let h = g.activation(h, c.activation);
            let h = g.linear(h, &p("out.weight"), &p("out.bias"))?;
            let mut h = self.maybe_dropout(g, h, &mut rng)?;
            if sites.contains(&"ffn") {
                h = self.adapter_block(g, h, &format!("layer{l}.adapter.ffn"))?;
            }
            let r = g.add(x, h)?;
            let (gm, bt) = (g.param(&p("ln.gamma"))?, g.param(&p("ln.beta"))?);
            x = g.layer_norm(r, gm, bt, LAYER_NORM_EPS)?;
        }
        g.set_scope("");
        Ok(x)
    }

    /// Pooled classifier logits `[1, C]` from encoder output.
    pub fn classify(&self, g: &mut Graph<'_>, task: Subtask, hidden: NodeId, mut rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        let head = self
            .head(task)
            .ok_or_else(|| Error::Contract(format!("model has no {task} head")))?;
        let prefix = head.prefix();
        g.set_scope(prefix.clone());
        let cls = g.select_rows(hidden, &[0])?;
        let h = g.linear(cls, &format!("{prefix}.dense.weight"), &format!("{prefix}.dense.bias"))?;
        let h = g.tanh(h);
        let h = self.maybe_dropout(g, h, &mut rng)?;
        let out = g.linear(h, &format!("{prefix}.out.weight"), &format!("{prefix}.out.bias"))?;
        g.set_scope("");
        Ok(out)
    }

    /// Vocabulary logits `[k, V]` at the given positions.
    pub fn mlm_logits(&self, g: &mut Graph<'_>, hidden: NodeId, positions: &[usize]) -> Result<NodeId> {
        g.set_scope("mlm");
        let h = g.select_rows(hidden, positions)?;
        let table = if self.config.tie_mlm_embeddings {
            g.param("emb.token")?
        } else {
            g.param("mlm.decoder")?
        };
        let logits = g.matmul_bt(h, table)?;
        let bias = g.param("mlm.bias")?;
        let out = g.add_bias(logits, bias)?;
        g.set_scope("");
        Ok(out)
    }
}

/// Evaluation-mode logits, one row per sequence.
pub fn forward_classify(model: &Model, task: Subtask, batch: &[TokenSeq]) -> Result<Tensor> {
    let head = model
        .head(task)
        .ok_or_else(|| Error::Contract(format!("model has no {task} head")))?;
    let c = head.n_classes();
    let mut out = Vec::with_capacity(batch.len() * c);
    for seq in batch {
        if seq.ids.len() > model.config.max_len {
            return Err(Error::Contract(format!(
                "sequence of {} positions exceeds max_len {}",
                seq.ids.len(),
                model.config.max_len
            )));
        }
        let mut g = Graph::new(&model.params);
        let h = model.encode(&mut g, seq.active(), None)?;
        let logits = model.classify(&mut g, task, h, None)?;
        out.extend_from_slice(g.value(logits).data());
    }
    Tensor::from_vec(&[batch.len(), c], out)
}

/// A sequence with its masked positions and the original ids there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSeq {
    pub seq: TokenSeq,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Evaluation-mode vocabulary logits at each item's masked positions
/// (`[k_i, V]` per item; items without masked positions yield `[0, V]`).
pub fn forward_mlm(model: &Model, batch: &[MaskedSeq]) -> Result<Vec<Tensor>> {
    let v = model.config.vocab_size;
    batch
        .iter()
        .map(|m| {
            if m.positions.is_empty() {
                return Ok(Tensor::zeros(&[0, v]));
            }
            let mut g = Graph::new(&model.params);
            let h = model.encode(&mut g, m.seq.active(), None)?;
            let l = model.mlm_logits(&mut g, h, &m.positions)?;
            Ok(g.value(l).clone())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub heads: Vec<HeadConfig>,
    pub mode: TrainMode,
    pub vocab_hash: String,
    pub step: usize,
}

const PARAMS_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "params.manifest";
const META_FILE: &str = "checkpoint.json";

/// Writes `params.bin`, `params.manifest` and `checkpoint.json` into `dir`.
pub fn save_checkpoint(model: &Model, dir: &Path, vocab_hash: &str, step: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_snapshot(&dir.join(PARAMS_FILE), &model.params)?;
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, snapshot_manifest(&model.params)).map_err(|e| Error::io(&manifest, e))?;
    let meta = CheckpointMeta {
        model: model.config,
        adapter: model.adapter,
        heads: model.heads.clone(),
        mode: model.mode,
        vocab_hash: vocab_hash.to_string(),
        step,
    };
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let params = read_snapshot(&dir.join(PARAMS_FILE))?;

    // Rebuild the expected layout and check names and shapes against it.
    let mut expected = build_encoder(&meta.model, 0)?;
    if meta.adapter.placement != Placement::None {
        expected = insert_adapters(expected, meta.adapter, 0)?;
    }
    for h in &meta.heads {
        expected.add_head(*h, 0);
    }
    if expected.params.len() != params.len() {
        return Err(Error::Compatibility(format!(
            "snapshot has {} tensors, configuration expects {}",
            params.len(),
            expected.params.len()
        )));
    }
    for p in expected.params.iter() {
        match params.get(&p.name) {
            Some(q) if q.value.shape() == p.value.shape() => {}
            Some(q) => {
                return Err(Error::Compatibility(format!(
                    "{}: shape {:?}, expected {:?}",
                    p.name,
                    q.value.shape(),
                    p.value.shape()
                )))
            }
            None => return Err(Error::Compatibility(format!("missing tensor {}", p.name))),
        }
    }
    let model = Model {
        config: meta.model,
        adapter: meta.adapter,
        heads: meta.heads.clone(),
        mode: meta.mode,
        params,
    };
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_len: 12,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn seq(ids: &[u32], max_len: usize) -> TokenSeq {
        let mut v = ids.to_vec();
        let len = v.len();
        v.resize(max_len, 0);
        TokenSeq { ids: v, len }
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig { n_heads: 5, ..ModelConfig::default() };
        assert!(matches!(build_encoder(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn desk_encoder_size_matches_closed_form() {
        let c = ModelConfig::default();
        let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
        // q, v, o with bias, k without; three layer norms; two ffn linears.
        let layer = 4 * d * d + 3 * d + 2 * 2 * d + (d * f + f) + (f * d + d);
        let expected = v * d + c.max_len * d + 2 * d + c.n_layers * layer + v;
        let model = build_encoder(&c, 0).unwrap();
        let total: usize = model.params.iter().map(|p| p.value.numel()).sum();
        assert_eq!(total, expected);
        assert_eq!(total, 238_160);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_encoder(&tiny(), 3).unwrap();
        let b = build_encoder(&tiny(), 3).unwrap();
        assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x.value.bit_eq(&y.value)));
        let c = build_encoder(&tiny(), 4).unwrap();
        assert!(!a.params.get("emb.token").unwrap().value.bit_eq(&c.params.get("emb.token").unwrap().value));
    }

    #[test]
    fn bottleneck_sizes() {
        assert_eq!(AdapterConfig::houlsby(8).bottleneck(768).unwrap(), 96);
        assert_eq!(AdapterConfig::houlsby(8).bottleneck(1024).unwrap(), 128);
        assert_eq!(AdapterConfig::houlsby(8).bottleneck(64).unwrap(), 8);
        assert!(AdapterConfig::houlsby(7).bottleneck(64).is_err());
    }

    #[test]
    fn zero_init_adapters_preserve_logits() {
        let mut base = build_encoder(&tiny(), 9).unwrap();
        base.add_head(HeadConfig::new(Subtask::Genre), 9);
        let batch = [seq(&[2, 7, 8, 9, 3], 12), seq(&[2, 11, 3], 12)];
        let before = forward_classify(&base, Subtask::Genre, &batch).unwrap();
        for cfg in [AdapterConfig::houlsby(4), AdapterConfig::pfeiffer(4)] {
            let m = insert_adapters(base.clone(), cfg, 5).unwrap();
            let after = forward_classify(&m, Subtask::Genre, &batch).unwrap();
            assert!(before.bit_eq(&after));
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut m = build_encoder(&tiny(), 2).unwrap();
        m.add_head(HeadConfig::new(Subtask::Framing), 2);
        let items: Vec<TokenSeq> = (0..8).map(|i| seq(&[2, 5 + i, 6 + i, 3], 12)).collect();
        let all = forward_classify(&m, Subtask::Framing, &items).unwrap();
        let one = forward_classify(&m, Subtask::Framing, &items[3..4]).unwrap();
        assert_eq!(all.shape(), &[8, 14]);
        assert_eq!(all.row(3), one.row(0));
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let mut m = build_encoder(&tiny(), 2).unwrap();
        m.add_head(HeadConfig::new(Subtask::Genre), 2);
        let long = TokenSeq { ids: vec![5; 13], len: 13 };
        assert!(matches!(forward_classify(&m, Subtask::Genre, &[long]), Err(Error::Contract(_))));
    }

    #[test]
    fn mlm_shapes() {
        let m = build_encoder(&tiny(), 2).unwrap();
        let batch = vec![
            MaskedSeq { seq: seq(&[2, 4, 9, 4, 3], 12), positions: vec![1, 3], targets: vec![7, 8] },
            MaskedSeq { seq: seq(&[2, 9, 3], 12), positions: vec![], targets: vec![] },
        ];
        let out = forward_mlm(&m, &batch).unwrap();
        assert_eq!(out[0].shape(), &[2, 40]);
        assert_eq!(out[1].shape(), &[0, 40]);
    }

    #[test]
    fn adapter_mode_freezes_base() {
        let mut m = build_encoder(&tiny(), 1).unwrap();
        m.add_head(HeadConfig::new(Subtask::Genre), 1);
        assert_eq!(trainable_parameters(&m).len(), m.params.len());
        let m = insert_adapters(m, AdapterConfig::houlsby(4), 1).unwrap();
        for name in trainable_parameters(&m) {
            assert!(
                name.contains(".adapter.") || name.starts_with("head.") || name.ends_with(".gamma") || name.ends_with(".beta"),
                "{name}"
            );
        }
        let adapters = m.params.iter().filter(|p| p.name.ends_with(".down.weight")).count();
        assert_eq!(adapters, 2 * 2);
        let p = insert_adapters(build_encoder(&tiny(), 1).unwrap(), AdapterConfig::pfeiffer(4), 1).unwrap();
        assert_eq!(p.params.iter().filter(|p| p.name.ends_with(".down.weight")).count(), 2);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = insert_adapters(build_encoder(&tiny(), 6).unwrap(), AdapterConfig::pfeiffer(4), 6).unwrap();
        m.add_head(HeadConfig::new(Subtask::Persuasion), 6);
        m.params.get_mut("layer1.adapter.ffn.up.weight").unwrap().value.data_mut()[3] = 0.25;
        save_checkpoint(&m, dir.path(), "abc", 17).unwrap();
        let (back, meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta.step, 17);
        assert_eq!(meta.vocab_hash, "abc");
        assert_eq!(back, m);
        let batch = [seq(&[2, 7, 8, 3], 12)];
        let a = forward_classify(&m, Subtask::Persuasion, &batch).unwrap();
        let b = forward_classify(&back, Subtask::Persuasion, &batch).unwrap();
        assert!(a.bit_eq(&b));
    }
}
