//! Parameter storage, layer primitives, and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Grads, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors. Registration order is the canonical
/// order for serialization and optimizer state.
#[derive(Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Little-endian binary blob: u64 count, then per tensor
    /// (u32 name_len, name bytes, u64 rows, u64 cols, f64 data...).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Load values into an already-constructed set; names and shapes must
    /// match the registration order exactly.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> crate::error::Result<()> {
        let mut cur = Cursor { b: bytes, pos: 0 };
        let count = cur.u64()? as usize;
        if count != self.entries.len() {
            return Err(crate::error::Error::shape(format!(
                "parameter blob holds {count} tensors, model has {}",
                self.entries.len()
            )));
        }
        for i in 0..count {
            let nlen = cur.u32()? as usize;
            let name = cur.str(nlen)?;
            let rows = cur.u64()? as usize;
            let cols = cur.u64()? as usize;
            let (ename, t) = &mut self.entries[i];
            if *ename != name || t.rows != rows || t.cols != cols {
                return Err(crate::error::Error::shape(format!(
                    "parameter {i} mismatch: blob {name} {rows}x{cols}, model {ename} {}x{}",
                    t.rows, t.cols
                )));
            }
            for v in t.data.iter_mut() {
                *v = cur.f64()?;
            }
        }
        Ok(())
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> crate::error::Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(crate::error::Error::invalid_input("truncated binary blob"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> crate::error::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> crate::error::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> crate::error::Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> crate::error::Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| crate::error::Error::invalid_input("invalid utf8 in blob"))
    }
}

/// One forward pass: a graph plus memoized bindings of parameters to
/// input nodes, so shared modules (the encoder runs on both context and
/// target) accumulate gradients into a single leaf.
pub struct Session<'a> {
    pub g: Graph,
    params: &'a ParamSet,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Session { g: Graph::new(), params, bound: vec![None; params.len()] }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.input(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Backprop from a scalar loss and collect per-parameter gradients
    /// (None for parameters not touched by this pass).
    pub fn grads(&mut self, loss: Var) -> Vec<Option<Tensor>> {
        let mut grads: Grads = self.g.backward(loss);
        let mut out = vec![None; self.params.len()];
        for (pi, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                out[pi] = grads.take(*v);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
        Activation::Tanh => g.tanh(x),
    }
}

/// Deterministic initializer over a dedicated rng stream.
pub struct Builder<'a> {
    pub ps: &'a mut ParamSet,
    pub rng: ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(ps: &'a mut ParamSet, rng: ChaCha8Rng) -> Self {
        Builder { ps, rng }
    }

    pub fn tensor_uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let data: Vec<f64> =
            (0..rows * cols).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.ps.register(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn tensor_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.ps.register(name, Tensor::full(rows, cols, v))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = self.tensor_uniform(&format!("{name}.w"), d_in, d_out, bound);
        let b = self.tensor_const(&format!("{name}.b"), 1, d_out, 0.0);
        Linear { w, b }
    }

    pub fn mlp(&mut self, name: &str, dims: &[usize], act: Activation) -> Mlp {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| self.linear(&format!("{name}.{i}"), dims[i], dims[i + 1]))
            .collect();
        Mlp { layers, act }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        let gamma = self.tensor_const(&format!("{name}.gamma"), 1, d, 1.0);
        let beta = self.tensor_const(&format!("{name}.beta"), 1, d, 0.0);
        LayerNorm { gamma, beta }
    }

    pub fn attention(&mut self, name: &str, dim: usize, heads: usize) -> SelfAttention {
        assert_eq!(dim % heads, 0, "model dim must divide head count");
        SelfAttention {
            wq: self.linear(&format!("{name}.wq"), dim, dim),
            wk: self.linear(&format!("{name}.wk"), dim, dim),
            wv: self.linear(&format!("{name}.wv"), dim, dim),
            wo: self.linear(&format!("{name}.wo"), dim, dim),
            heads,
        }
    }

    pub fn transformer_block(&mut self, name: &str, dim: usize, heads: usize, ff_mult: usize) -> TransformerBlock {
        TransformerBlock {
            ln1: self.layer_norm(&format!("{name}.ln1"), dim),
            attn: self.attention(&format!("{name}.attn"), dim, heads),
            ln2: self.layer_norm(&format!("{name}.ln2"), dim),
            ff1: self.linear(&format!("{name}.ff1"), dim, dim * ff_mult),
            ff2: self.linear(&format!("{name}.ff2"), dim * ff_mult, dim),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.w);
        let b = s.p(self.b);
        let y = s.g.matmul(x, w);
        s.g.add_b(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h);
            if i + 1 < self.layers.len() {
                h = activate(&mut s.g, h, self.act);
            }
        }
        h
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let gamma = s.p(self.gamma);
        let beta = s.p(self.beta);
        let n = s.g.layer_norm_rows(x, 1e-5);
        let y = s.g.mul_b(n, gamma);
        s.g.add_b(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let dim = s.g.val(x).cols;
        let dh = dim / self.heads;
        let q = self.wq.forward(s, x);
        let k = self.wk.forward(s, x);
        let v = self.wv.forward(s, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = s.g.slice_cols(q, from, to);
            let kh = s.g.slice_cols(k, from, to);
            let vh = s.g.slice_cols(v, from, to);
            let scores = s.g.matmul_nt(qh, kh);
            let scores = s.g.scale(scores, scale);
            let attn = s.g.softmax_rows(scores);
            head_outs.push(s.g.matmul(attn, vh));
        }
        let cat = s.g.concat_cols(&head_outs);
        self.wo.forward(s, cat)
    }
}

/// Pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x)).
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let n = self.ln1.forward(s, x);
        let a = self.attn.forward(s, n);
        let x = s.g.add(x, a);
        let n = self.ln2.forward(s, x);
        let f = self.ff1.forward(s, n);
        let f = s.g.gelu(f);
        let f = self.ff2.forward(s, f);
        s.g.add(x, f)
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(ps: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = ps.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        let v = ps.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Adam { lr, beta1, beta2, eps: 1e-8, step: 0, m, v }
    }

    pub fn apply(&mut self, ps: &mut ParamSet, grads: &[Option<Tensor>], clip: Option<f64>) {
        let mut scale = 1.0;
        if let Some(c) = clip {
            let norm_sq: f64 = grads.iter().flatten().map(|t| t.frob_norm_sq()).sum();
            let norm = norm_sq.sqrt();
            if norm > c {
                scale = c / norm;
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let p = ps.get_mut(ParamId(i));
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..p.data.len() {
                let gk = grad.data[k] * scale;
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        for t in self.m.iter().chain(self.v.iter()) {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> crate::error::Result<()> {
        let need: usize = 8 + 8 * (self.m.iter().map(|t| t.len()).sum::<usize>() * 2);
        if bytes.len() != need {
            return Err(crate::error::Error::shape(format!(
                "optimizer blob is {} bytes, expected {need}",
                bytes.len()
            )));
        }
        self.step = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let mut pos = 8;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in t.data.iter_mut() {
                *x = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
                pos += 8;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn param_roundtrip_is_bit_exact() {
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(7));
        b.linear("l0", 5, 3);
        b.layer_norm("ln", 4);
        let bytes = ps.to_bytes();
        let mut ps2 = ParamSet::new();
        let mut b2 = Builder::new(&mut ps2, ChaCha8Rng::seed_from_u64(99));
        b2.linear("l0", 5, 3);
        b2.layer_norm("ln", 4);
        ps2.load_bytes(&bytes).unwrap();
        for ((_, a), (_, c)) in ps.iter().zip(ps2.iter()) {
            assert_eq!(a.data, c.data);
        }
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(1));
        let lin = b.linear("shared", 2, 2);
        let mut s = Session::new(&ps);
        let x1 = s.g.constant(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let x2 = s.g.constant(Tensor::from_vec(1, 2, vec![-0.5, 3.0]));
        let y1 = lin.forward(&mut s, x1);
        let y2 = lin.forward(&mut s, x2);
        let y = s.g.add(y1, y2);
        let loss = s.g.sum_all(y);
        let grads = s.grads(loss);
        // dw = x1^T 1 + x2^T 1
        let gw = grads[lin.w.0].as_ref().unwrap();
        assert_eq!(gw.data, vec![0.5, 0.5, 5.0, 5.0]);
        let gb = grads[lin.b.0].as_ref().unwrap();
        assert_eq!(gb.data, vec![2.0, 2.0]);
    }

    #[test]
    fn attention_permutation_consistency() {
        // permuting identical tokens leaves rows identical
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(3));
        let attn = b.attention("a", 8, 2);
        let mut s = Session::new(&ps);
        let row: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let x = s.g.constant(Tensor::from_vec(2, 8, data));
        let y = attn.forward(&mut s, x);
        let t = s.g.val(y);
        for c in 0..8 {
            assert!((t.at(0, c) - t.at(1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_lr_keeps_params() {
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(11));
        let lin = b.linear("l", 3, 3);
        let before = ps.get(lin.w).clone();
        let mut opt = Adam::new(&ps, 0.0, 0.9, 0.999);
        let grads: Vec<Option<Tensor>> =
            ps.iter().map(|(_, t)| Some(Tensor::full(t.rows, t.cols, 1.0))).collect();
        opt.apply(&mut ps, &grads, Some(10.0));
        assert_eq!(ps.get(lin.w).data, before.data);
    }
}
