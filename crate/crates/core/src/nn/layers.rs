use std::rc::Rc;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = store.add_normal(rng, format!("{name}.weight"), in_dim, out_dim, std);
        let bias = store.add_zeros(format!("{name}.bias"), 1, out_dim);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add_const(format!("{name}.gain"), 1, dim, 1.0);
        let bias = store.add_zeros(format!("{name}.bias"), 1, dim);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value sources.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention result plus the per-head weight matrices (rows = queries, cols = keys).
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Which key positions each query row may look at.
#[derive(Debug, Clone)]
pub enum AttentionMask {
    None,
    /// query `i` sees keys `0..=i`
    Causal,
    /// per-key validity, shared by all query rows (padding)
    Keys(Rc<Vec<bool>>),
}

impl AttentionMask {
    fn expand(&self, rows: usize, cols: usize) -> Option<Rc<Vec<bool>>> {
        match self {
            AttentionMask::None => None,
            AttentionMask::Causal => {
                let mut m = vec![false; rows * cols];
                for i in 0..rows {
                    for j in 0..cols.min(i + 1) {
                        m[i * cols + j] = true;
                    }
                }
                Some(Rc::new(m))
            }
            AttentionMask::Keys(valid) => {
                assert_eq!(valid.len(), cols, "key mask length must equal number of keys");
                let mut m = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    m.extend_from_slice(valid);
                }
                Some(Rc::new(m))
            }
        }
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), kv_dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), kv_dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            heads,
            dim,
        }
    }

    /// `queries` attend to `keys_values`; keys and values are both projected from the same rows.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys_values: Var, mask: &AttentionMask) -> AttentionOutput {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, keys_values);
        let v = self.v.forward(g, keys_values);
        let rows = g.shape(queries).0;
        let cols = g.shape(keys_values).0;
        let expanded = mask.expand(rows, cols);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores, expanded.clone());
            weights.push(w);
            heads.push(g.matmul(w, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let output = self.out.forward(g, merged);
        AttentionOutput { output, weights }
    }
}

/// Pre-norm transformer encoder block: self-attention then feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize, ff: usize) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ff),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, &AttentionMask::None).output;
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::matrix::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_are_normalised_and_padding_gets_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", 8, 8, 2);
        let mut g = Graph::new(&store);
        let q = g.constant(Matrix::from_vec(3, 8, (0..24).map(|v| (v as f64 * 0.37).sin()).collect()));
        let kv = g.constant(Matrix::from_vec(4, 8, (0..32).map(|v| (v as f64 * 0.11).cos()).collect()));
        let mask = AttentionMask::Keys(Rc::new(vec![true, true, false, true]));
        let out = mha.forward(&mut g, q, kv, &mask);
        for w in out.weights {
            let m = g.value(w);
            for i in 0..m.rows {
                let s: f64 = m.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert_eq!(m.get(i, 2), 0.0);
            }
        }
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = AttentionMask::Causal.expand(3, 3).unwrap();
        assert_eq!(*m, vec![true, false, false, true, true, false, true, true, true]);
    }
}
