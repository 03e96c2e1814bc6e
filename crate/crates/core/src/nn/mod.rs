//! Small reverse-mode autodiff engine and transformer building blocks.

pub mod graph;
pub mod layers;
pub mod matrix;
pub mod optim;
pub mod params;

pub use graph::{sigmoid, Gradients, Graph, MaskLossTerms, Var};
pub use layers::{AttentionMask, AttentionOutput, EncoderBlock, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use matrix::Matrix;
pub use optim::AdamW;
pub use params::{ParamEntry, ParamId, ParamStore};

/// Central finite-difference gradient of `f` with respect to every scalar of the
/// listed parameters. `f` must rebuild its graph from `store` on each call.
pub fn finite_difference(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).len();
        let (r, c) = store.get(id).shape();
        let mut g = Matrix::zeros(r, c);
        for i in 0..n {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + h;
            let plus = f(store);
            store.get_mut(id).data[i] = orig - h;
            let minus = f(store);
            store.get_mut(id).data[i] = orig;
            g.data[i] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `||a - b|| / max(||a|| + ||b||, tiny)` over the concatenation of all tensors.
pub fn relative_error(analytic: &[Matrix], numeric: &[Matrix]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (a, b) in analytic.iter().zip(numeric) {
        for (x, y) in a.data.iter().zip(&b.data) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    diff.sqrt() / (na.sqrt() + nb.sqrt()).max(1e-300)
}

/// Gradients for `ids` as dense matrices (zeros where no gradient reached).
pub fn dense_grads(store: &ParamStore, grads: &Gradients, ids: &[ParamId]) -> Vec<Matrix> {
    ids.iter()
        .map(|&id| {
            grads.get(id).cloned().unwrap_or_else(|| {
                let (r, c) = store.get(id).shape();
                Matrix::zeros(r, c)
            })
        })
        .collect()
}
