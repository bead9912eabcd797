use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{gemm, gemm_at_b, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    /// d/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

enum Value {
    Owned(Tensor),
    Param(usize),
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    AddBias { x: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Act { x: NodeId, kind: Activation },
    Softmax { x: NodeId },
    Embedding { table: NodeId, ids: Vec<u32> },
    Dropout { x: NodeId, mask: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<f64> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    Sum { x: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, row_weights: Vec<f64>, scale: f64, probs: Vec<f64> },
    Bce { logits: NodeId, targets: Vec<f64>, class_weights: Vec<f64>, scale: f64 },
}

struct Node {
    op: Op,
    value: Value,
    requires_grad: bool,
}

/// Eagerly evaluated computation graph over a borrowed parameter store.
///
/// Values are computed as nodes are added; `backward` walks the nodes in
/// reverse creation order, which is a topological order by construction.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
    scope: String,
}

/// Gradients of a scalar loss: one entry per trainable parameter reached,
/// plus gradients of input nodes created with `input_with_grad`.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    names: Vec<String>,
    nodes: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn by_index(&self, idx: usize) -> Option<&Tensor> {
        self.params.get(idx).and_then(Option::as_ref)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .and_then(|i| self.by_index(i))
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(&id.0)
    }

    /// Names of parameters with a gradient entry.
    pub fn names(&self) -> Vec<&str> {
        self.params
            .iter()
            .zip(&self.names)
            .filter(|(g, _)| g.is_some())
            .map(|(_, n)| n.as_str())
            .collect()
    }

    pub fn into_param_grads(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

fn add_into(dst: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = dst.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            scope: String::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Prefix used to name nodes in dimension errors.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => &self.store.by_index(*i).value,
        }
    }

    fn err(&self, op: &str, message: String) -> Error {
        let node = if self.scope.is_empty() {
            format!("{op}#{}", self.nodes.len())
        } else {
            format!("{}/{op}#{}", self.scope, self.nodes.len())
        };
        Error::dim(node, message)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        debug_assert!(
            !inputs.iter().all(|i| self.value(*i).all_finite()) || value.all_finite(),
            "non-finite output from finite inputs at {}",
            self.scope
        );
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if let Some(id) = self.param_nodes.get(&idx) {
            return Ok(*id);
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Value::Param(idx),
            requires_grad: self.store.by_index(idx).trainable,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(idx, id);
        Ok(id)
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Value::Owned(t),
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by `backward`.
    pub fn input_with_grad(&mut self, t: Tensor) -> NodeId {
        let id = self.input(t);
        self.nodes[id.0].requires_grad = true;
        id
    }

    fn matrix(&self, id: NodeId, op: &str) -> Result<(usize, usize)> {
        let t = self.value(id);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(self.err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (br, bc) = self.matrix(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(self.err(
                "matmul",
                format!("({m}x{k}) · ({br}x{bc}{}) inner dimensions differ", if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), (m, k), self.value(b).data(), (br, bc), trans_b, &mut out, false);
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, trans_b }, t, &[a, b]))
    }

    /// `a · b` for matrices.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for matrices.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "add_bias")?;
        if self.value(bias).numel() != n {
            return Err(self.err("add_bias", format!("bias of {} for {n} columns", self.value(bias).numel())));
        }
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(Op::AddBias { x, bias }, t, &[x, bias]))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: NodeId, weight: &str, bias: &str) -> Result<NodeId> {
        let w = self.param(weight)?;
        let b = self.param(bias)?;
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.err(
                "add",
                format!("shapes {:?} and {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), out)?;
        Ok(self.push(Op::Add { a, b }, t, &[a, b]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(self.err("layer_norm", format!("affine parameters must have {n} entries")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, t, &[x, gamma, beta]))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&z| kind.apply(z)).collect())
            .expect("same shape");
        self.push(Op::Act { x, kind }, out, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Gelu)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Tanh)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "softmax")?;
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(Op::Softmax { x }, t, &[x]))
    }

    /// Gathers rows of `table` for each id.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = self.matrix(table, "embedding")?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(self.err("embedding", format!("id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let t = Tensor::from_vec(&[ids.len(), d], out)?;
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, t, &[table]))
    }

    /// Multiplies by a precomputed (already rescaled) keep-mask.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(x).numel() {
            return Err(self.err("dropout", format!("mask of {} for {} values", mask.len(), self.value(x).numel())));
        }
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().zip(&mask).map(|(a, m)| a * m).collect())?;
        Ok(self.push(Op::Dropout { x, mask }, out, &[x]))
    }

    /// Multi-head scaled dot-product self-attention over one sequence;
    /// `q`, `k`, `v` are `[T, d]` with `d` split into `heads` slices.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (t, d) = self.matrix(q, "attention")?;
        if self.matrix(k, "attention")? != (t, d) || self.matrix(v, "attention")? != (t, d) {
            return Err(self.err("attention", "q, k and v must share one [T, d] shape".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(self.err("attention", format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut oh = vec![0.0; t * dh];
        for h in 0..heads {
            let qh = head_slice(self.value(q).data(), t, d, h, dh);
            let kh = head_slice(self.value(k).data(), t, d, h, dh);
            let vh = head_slice(self.value(v).data(), t, d, h, dh);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(&qh, (t, dh), &kh, (t, dh), true, p, false);
            for r in 0..t {
                let row = &mut p[r * t..(r + 1) * t];
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            gemm(p, (t, t), &vh, (t, dh), false, &mut oh, false);
            for r in 0..t {
                out[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
            }
        }
        let o = Tensor::from_vec(&[t, d], out)?;
        Ok(self.push(Op::Attention { q, k, v, heads, probs }, o, &[q, k, v]))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "select_rows")?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(self.err("select_rows", format!("row {r} of {m}")));
            }
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let t = Tensor::from_vec(&[rows.len(), n], out)?;
        Ok(self.push(Op::SelectRows { x, rows: rows.to_vec() }, t, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s), &[x])
    }

    /// `scale · Σ_i w(y_i) · (logsumexp(z_i) − z_{i,y_i})`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], class_weights: Option<&[f64]>, scale: f64) -> Result<NodeId> {
        let (m, n) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(self.err("cross_entropy", format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(w) = class_weights {
            if w.len() != n {
                return Err(self.err("cross_entropy", format!("{} class weights for {n} classes", w.len())));
            }
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= n) {
            return Err(self.err("cross_entropy", format!("target {bad} outside {n} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        let mut row_weights = Vec::with_capacity(m);
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &z[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let w = class_weights.map_or(1.0, |w| w[y]);
            row_weights.push(w);
            loss += w * (lse - row[y]);
            softmax_in_place(&mut probs[r * n..(r + 1) * n]);
        }
        let node = self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                row_weights,
                scale,
                probs,
            },
            Tensor::scalar(scale * loss),
            &[logits],
        );
        Ok(node)
    }

    /// `scale · Σ_{i,c} w_c · bce(z_ic, y_ic)` computed from logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64], class_weights: Option<&[f64]>, scale: f64) -> Result<NodeId> {
        let (m, n) = self.matrix(logits, "bce")?;
        if targets.len() != m * n {
            return Err(self.err("bce", format!("{} targets for {m}x{n} logits", targets.len())));
        }
        let weights = match class_weights {
            Some(w) if w.len() != n => {
                return Err(self.err("bce", format!("{} class weights for {n} classes", w.len())));
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let z = self.value(logits).data();
        let mut loss = 0.0;
        for (i, (&zi, &yi)) in z.iter().zip(targets).enumerate() {
            let l = zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
            loss += weights[i % n] * l;
        }
        Ok(self.push(
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                class_weights: weights,
                scale,
            },
            Tensor::scalar(scale * loss),
            &[logits],
        ))
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul { a, b, trans_b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.rows(), av.cols());
                    let n = g.cols();
                    if needs(a) {
                        // dA = dC · Bᵀ  (or dC · B when C = A · Bᵀ)
                        add_into(&mut grads[a.0], av.shape(), |da| {
                            gemm(g.data(), (m, n), bv.data(), (bv.rows(), bv.cols()), !*trans_b, da, true)
                        });
                    }
                    if needs(b) {
                        if *trans_b {
                            // dB = dCᵀ · A  -> [n, k]
                            add_into(&mut grads[b.0], bv.shape(), |db| gemm_at_b(g.data(), (m, n), av.data(), k, db));
                        } else {
                            add_into(&mut grads[b.0], bv.shape(), |db| gemm_at_b(av.data(), (m, k), g.data(), n, db));
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    let n = g.cols();
                    if needs(bias) {
                        add_into(&mut grads[bias.0], self.value(*bias).shape(), |db| {
                            for row in g.data().chunks(n) {
                                for (d, v) in db.iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                        });
                    }
                    if needs(x) {
                        add_into(&mut grads[x.0], g.shape(), |dx| add_slice(dx, g.data()));
                    }
                }
                Op::Add { a, b } => {
                    for id in [a, b] {
                        if needs(id) {
                            add_into(&mut grads[id.0], g.shape(), |d| add_slice(d, g.data()));
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let n = g.cols();
                    let gam = self.value(*gamma).data();
                    if needs(gamma) {
                        add_into(&mut grads[gamma.0], &[n], |dg| {
                            for (gr, hr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                                for c in 0..n {
                                    dg[c] += gr[c] * hr[c];
                                }
                            }
                        });
                    }
                    if needs(beta) {
                        add_into(&mut grads[beta.0], &[n], |db| {
                            for gr in g.data().chunks(n) {
                                add_slice(db, gr);
                            }
                        });
                    }
                    if needs(x) {
                        add_into(&mut grads[x.0], g.shape(), |dx| {
                            let nf = n as f64;
                            for (r, (gr, hr)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                                let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                                let s1: f64 = dxhat.iter().sum();
                                let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                                for c in 0..n {
                                    dx[r * n + c] += rstd[r] / nf * (nf * dxhat[c] - s1 - hr[c] * s2);
                                }
                            }
                        });
                    }
                }
                Op::Act { x, kind } => {
                    let xv = self.value(*x).data();
                    let yv = self.value(NodeId(idx)).data();
                    add_into(&mut grads[x.0], g.shape(), |dx| {
                        for i in 0..dx.len() {
                            dx[i] += g.data()[i] * kind.derivative(xv[i], yv[i]);
                        }
                    });
                }
                Op::Softmax { x } => {
                    let y = self.value(NodeId(idx)).data();
                    let n = g.cols();
                    add_into(&mut grads[x.0], g.shape(), |dx| {
                        for (r, (gr, yr)) in g.data().chunks(n).zip(y.chunks(n)).enumerate() {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for c in 0..n {
                                dx[r * n + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = g.cols();
                    add_into(&mut grads[table.0], self.value(*table).shape(), |dt| {
                        for (row, &id) in g.data().chunks(d).zip(ids) {
                            let id = id as usize;
                            add_slice(&mut dt[id * d..(id + 1) * d], row);
                        }
                    });
                }
                Op::Dropout { x, mask } => {
                    add_into(&mut grads[x.0], g.shape(), |dx| {
                        for i in 0..dx.len() {
                            dx[i] += g.data()[i] * mask[i];
                        }
                    });
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (t, d) = (g.rows(), g.cols());
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = vec![0.0; t * d];
                    let mut dk = vec![0.0; t * d];
                    let mut dv = vec![0.0; t * d];
                    let mut dp = vec![0.0; t * t];
                    for h in 0..*heads {
                        let qh = head_slice(self.value(*q).data(), t, d, h, dh);
                        let kh = head_slice(self.value(*k).data(), t, d, h, dh);
                        let vh = head_slice(self.value(*v).data(), t, d, h, dh);
                        let doh = head_slice(g.data(), t, d, h, dh);
                        let p = &probs[h * t * t..(h + 1) * t * t];
                        gemm(&doh, (t, dh), &vh, (t, dh), true, &mut dp, false);
                        let mut dvh = vec![0.0; t * dh];
                        gemm_at_b(p, (t, t), &doh, dh, &mut dvh);
                        for r in 0..t {
                            let pr = &p[r * t..(r + 1) * t];
                            let dr = &mut dp[r * t..(r + 1) * t];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for c in 0..t {
                                dr[c] = pr[c] * (dr[c] - dot) * scale;
                            }
                        }
                        let mut dqh = vec![0.0; t * dh];
                        gemm(&dp, (t, t), &kh, (t, dh), false, &mut dqh, false);
                        let mut dkh = vec![0.0; t * dh];
                        gemm_at_b(&dp, (t, t), &qh, dh, &mut dkh);
                        scatter_head(&mut dq, &dqh, t, d, h, dh);
                        scatter_head(&mut dk, &dkh, t, d, h, dh);
                        scatter_head(&mut dv, &dvh, t, d, h, dh);
                    }
                    for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
                        if needs(id) {
                            add_into(&mut grads[id.0], &[t, d], |dst| add_slice(dst, &buf));
                        }
                    }
                }
                Op::SelectRows { x, rows } => {
                    let n = g.cols();
                    add_into(&mut grads[x.0], self.value(*x).shape(), |dx| {
                        for (gr, &r) in g.data().chunks(n).zip(rows) {
                            add_slice(&mut dx[r * n..(r + 1) * n], gr);
                        }
                    });
                }
                Op::Sum { x } => {
                    let s = g.item();
                    add_into(&mut grads[x.0], self.value(*x).shape(), |dx| dx.iter_mut().for_each(|d| *d += s));
                }
                Op::CrossEntropy { logits, targets, row_weights, scale, probs } => {
                    let up = g.item() * scale;
                    let n = self.value(*logits).cols();
                    add_into(&mut grads[logits.0], self.value(*logits).shape(), |dz| {
                        for (r, &y) in targets.iter().enumerate() {
                            let w = row_weights[r] * up;
                            for c in 0..n {
                                let onehot = if c == y { 1.0 } else { 0.0 };
                                dz[r * n + c] += w * (probs[r * n + c] - onehot);
                            }
                        }
                    });
                }
                Op::Bce { logits, targets, class_weights, scale } => {
                    let up = g.item() * scale;
                    let z = self.value(*logits).data();
                    let n = class_weights.len();
                    add_into(&mut grads[logits.0], self.value(*logits).shape(), |dz| {
                        for i in 0..dz.len() {
                            dz[i] += up * class_weights[i % n] * (sigmoid(z[i]) - targets[i]);
                        }
                    });
                }
            }
        }

        let mut params: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        let mut nodes = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match node.value {
                Value::Param(p) => {
                    params[p] = Some(grads[idx].take().unwrap_or_else(|| Tensor::zeros(self.value(NodeId(idx)).shape())));
                }
                Value::Owned(_) => {
                    if let Some(g) = grads[idx].take() {
                        nodes.insert(idx, g);
                    }
                }
            }
        }
        Ok(Gradients {
            params,
            names: self.store.iter().map(|p| p.name.clone()).collect(),
            nodes,
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn head_slice(x: &[f64], t: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * dh);
    for r in 0..t {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], t: usize, d: usize, h: usize, dh: usize) {
    for r in 0..t {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}
