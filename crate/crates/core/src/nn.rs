//! Parameter storage and the transformer building blocks shared by the router
//! and the fusion model.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Hex SHA-256 over names, shapes and raw parameter bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub(crate) fn from_parts(names: Vec<String>, values: Vec<Tensor>) -> Self {
        Self { names, values }
    }
}

/// A tape plus lazily bound model parameters.
///
/// Parameters marked trainable become gradient-tracking leaves; the rest are
/// recorded as constants, so their subgraphs are skipped during backward.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'a> Graph<'a> {
    /// Every parameter is trainable.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_mask(store, vec![true; store.len()])
    }

    /// No parameter is trainable.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::with_mask(store, vec![false; store.len()])
    }

    pub fn with_mask(store: &'a ParamStore, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len());
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], trainable }
    }

    /// Records a parameter on the tape the first time it is requested.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable[id.0] { self.tape.leaf(value) } else { self.tape.constant(value) };
        self.bound[id.0] = Some(v);
        v
    }

    /// Binds a parameter to an existing node instead of its stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Parameters read so far by the forward pass.
    pub fn touched(&self) -> Vec<ParamId> {
        self.bound.iter().enumerate().filter(|(_, b)| b.is_some()).map(|(i, _)| ParamId(i)).collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient for each parameter, `None` for frozen or unused ones.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .zip(&self.trainable)
            .map(|(b, &t)| match b {
                Some(v) if t => Some(
                    self.tape
                        .grad(*v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(self.tape.value(*v).shape().to_vec())),
                ),
                _ => None,
            })
            .collect()
    }
}

fn init_weight(rng: &mut impl Rng, din: usize, dout: usize) -> Tensor {
    Tensor::randn([din, dout], 1.0 / (din as f64).sqrt(), rng)
}

/// `x · W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), init_weight(rng, din, dout));
        let b = store.add(format!("{name}.b"), Tensor::zeros([dout]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(x, w)?;
        g.tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full([dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.tape.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let a = g.tape.attention(q, k, v, self.heads, causal)?;
        self.o.forward(g, a)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, h, h, false)?;
        let x = g.tape.add(x, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.tape.add(x, f)
    }
}

/// Fixed sinusoidal position table `[len × dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = p as f64 * freq;
            data[p * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new([len, dim], data).expect("position table")
}

/// Adds sinusoidal positions to `x[N×D]`.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let (n, d) = g.value(x).dims2()?;
    let pe = g.constant(sinusoidal_positions(n, d));
    g.tape.add(x, pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    #[test]
    fn frozen_graph_produces_no_grads() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng(0));
        let mut g = Graph::frozen(&store);
        let x = g.constant(Tensor::full([4, 3], 1.0));
        let y = lin.forward(&mut g, x).unwrap();
        let s = g.tape.sum(y);
        g.backward(s).unwrap();
        assert!(g.param_grads().iter().all(Option::is_none));
    }

    #[test]
    fn touched_tracks_reads() {
        let mut store = ParamStore::new();
        let a = Linear::new(&mut store, "a", 2, 2, &mut rng(0));
        let _b = Linear::new(&mut store, "b", 2, 2, &mut rng(1));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros([1, 2]));
        a.forward(&mut g, x).unwrap();
        let names: Vec<_> = g.touched().into_iter().map(|id| store.name(id).to_string()).collect();
        assert_eq!(names, ["a.w", "a.b"]);
    }

    #[test]
    fn checksum_changes_with_any_bit() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::zeros([2]));
        let before = store.checksum();
        store.get_mut(id).data_mut()[1] = f64::from_bits(1);
        assert_ne!(before, store.checksum());
    }
}
