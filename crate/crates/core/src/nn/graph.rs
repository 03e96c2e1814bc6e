//! Tape-based reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse index order is a valid topological order for
//! the backward sweep.

use std::collections::HashMap;
use std::rc::Rc;

use super::matrix::{gemm, Matrix};
use super::params::{ParamId, ParamStore};

/// Node handle. Only meaningful for the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    /// `a * b` or `a * b^T`.
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    AddRow { a: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    /// masked entries are exact zeros in the output, so they need no separate backward handling
    SoftmaxRows { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Gather { a: Var, ids: Rc<Vec<usize>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    GroupMean { a: Var, groups: Rc<Vec<Vec<usize>>> },
    MeanRows(Var),
    SumAll(Var),
    CrossEntropy { logits: Var, targets: Rc<Vec<usize>>, probs: Matrix, denom: f64 },
    SoftCrossEntropy { logits: Var, target: Matrix, probs: Matrix },
    CosineDistance { a: Var, b: Var, dot: f64, na: f64, nb: f64 },
    MaskLoss { logits: Var, terms: Rc<MaskLossTerms>, probs: Vec<f64> },
}

/// Constant data for the segment-aggregated binary cross-entropy + dice mask loss.
///
/// Every voxel of a segment shares one logit, so the voxel-level loss reduces
/// exactly to weighted per-segment terms.
#[derive(Debug, Clone)]
pub struct MaskLossTerms {
    /// voxels per segment
    pub sizes: Vec<f64>,
    /// ground-truth voxels per segment
    pub overlaps: Vec<f64>,
    pub num_voxels: f64,
    pub gt_size: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Squared-sum norm over the given parameters; absent gradients count as zero.
    pub fn norm_over(&self, ids: impl IntoIterator<Item = ParamId>) -> f64 {
        ids.into_iter()
            .filter_map(|id| self.get(id))
            .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new(), grad_enabled: true }
    }

    /// Graph whose parameters never require gradients (inference).
    pub fn inference(store: &'p ParamStore) -> Self {
        Self { grad_enabled: false, ..Self::new(store) }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` with no gradient path back to it (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let entry = self.store.entry(id);
        let needs = self.grad_enabled && !entry.frozen;
        let v = self.push(entry.value.clone(), Op::Param(id), needs);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul shape mismatch ({m}x{k}) * ({k2}x{n})");
        let mut out = Matrix::zeros(m, n);
        gemm(m, k, n, 1.0, &self.value(a).data, false, &self.value(b).data, false, 0.0, &mut out.data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, b_t: false }, ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t shape mismatch ({m}x{k}) * ({n}x{k2})^T");
        let mut out = Matrix::zeros(m, n);
        gemm(m, k, n, 1.0, &self.value(a).data, false, &self.value(b).data, true, 0.0, &mut out.data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, b_t: true }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut out = self.value(a).clone();
        let bias = self.value(row).data.clone();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow { a, row }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise softmax. Entries where `mask` is `false` get probability exactly 0;
    /// a fully masked row becomes all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Var {
        let va = self.value(a);
        let (r, c) = va.shape();
        if let Some(m) = &mask {
            assert_eq!(m.len(), r * c, "softmax mask shape mismatch");
        }
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let row = va.row(i);
            let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > mx {
                    mx = x;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let orow = out.row_mut(i);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (x - mx).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows { a }, ng)
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (r, c) = va.shape();
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = Matrix::zeros(r, c);
        let mut out = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = va.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat.set(i, j, xh);
                out.set(i, j, xh * g[j] + b[j]);
            }
        }
        let ng = self.ng(a) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { a, gain, bias, xhat, inv_std }, ng)
    }

    /// Rows of `a` picked by index (embedding lookup when `a` is a table).
    pub fn gather(&mut self, a: Var, ids: &[usize]) -> Var {
        let va = self.value(a);
        let c = va.cols;
        let mut out = Matrix::zeros(ids.len(), c);
        for (k, &i) in ids.iter().enumerate() {
            assert!(i < va.rows, "gather index {i} out of range for {} rows", va.rows);
            out.row_mut(k).copy_from_slice(va.row(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::Gather { a, ids: Rc::new(ids.to_vec()) }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, c, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(r, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, r, "concat_cols row mismatch");
            for i in 0..r {
                out.row_mut(i)[off..off + v.cols].copy_from_slice(v.row(i));
            }
            off += v.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols, "slice_cols out of range");
        let mut out = Matrix::zeros(va.rows, len);
        for i in 0..va.rows {
            out.row_mut(i).copy_from_slice(&va.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ids: Vec<usize> = (start..start + len).collect();
        self.gather(a, &ids)
    }

    /// Row `g` of the output is the mean of the rows of `a` listed in `groups[g]`.
    /// Empty groups produce zero rows.
    pub fn group_mean(&mut self, a: Var, groups: Rc<Vec<Vec<usize>>>) -> Var {
        let va = self.value(a);
        let c = va.cols;
        let mut out = Matrix::zeros(groups.len(), c);
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let inv = 1.0 / members.len() as f64;
            let orow = out.row_mut(g);
            for &m in members {
                for (o, x) in orow.iter_mut().zip(va.row(m)) {
                    *o += x;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::GroupMean { a, groups }, ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.rows > 0, "mean_rows of an empty matrix");
        let mut out = Matrix::zeros(1, va.cols);
        for i in 0..va.rows {
            for (o, x) in out.data.iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / va.rows as f64;
        for o in out.data.iter_mut() {
            *o *= inv;
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Matrix::scalar(s), Op::SumAll(a), ng)
    }

    /// `sum_i -log softmax(logits_i)[targets_i] / denom`, a `1 x 1` result.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], denom: f64) -> Var {
        let vl = self.value(logits);
        let (r, c) = vl.shape();
        assert_eq!(r, targets.len(), "cross_entropy: one target per logits row");
        let mut probs = Matrix::zeros(r, c);
        let mut loss = 0.0;
        for i in 0..r {
            let row = vl.row(i);
            let (mx, l) = log_normalizer(row);
            for j in 0..c {
                probs.set(i, j, ((row[j] - mx) - l).exp());
            }
            assert!(targets[i] < c, "target id {} out of range for {c} classes", targets[i]);
            loss -= (row[targets[i]] - mx) - l;
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(loss / denom),
            Op::CrossEntropy { logits, targets: Rc::new(targets.to_vec()), probs, denom },
            ng,
        )
    }

    /// `-sum target * log softmax(logits)` with a constant target distribution.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Matrix) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), target.shape(), "soft_cross_entropy shape mismatch");
        let (r, c) = vl.shape();
        let mut probs = Matrix::zeros(r, c);
        let mut loss = 0.0;
        for i in 0..r {
            let row = vl.row(i);
            let (mx, l) = log_normalizer(row);
            for j in 0..c {
                let logp = (row[j] - mx) - l;
                probs.set(i, j, logp.exp());
                loss -= target.get(i, j) * logp;
            }
        }
        let ng = self.ng(logits);
        self.push(Matrix::scalar(loss), Op::SoftCrossEntropy { logits, target, probs }, ng)
    }

    /// `1 - cos(a, b)` for two `1 x n` vectors; norms must be nonzero.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "cosine_distance shape mismatch");
        let dot: f64 = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).sum();
        let na = va.norm();
        let nb = vb.norm();
        let out = Matrix::scalar(1.0 - dot / (na * nb));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::CosineDistance { a, b, dot, na, nb }, ng)
    }

    /// Voxel-level BCE + dice for one query whose mask logits are given per segment (`1 x S`).
    pub fn mask_loss(&mut self, logits: Var, terms: Rc<MaskLossTerms>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), (1, terms.sizes.len()), "mask_loss expects one logit per segment");
        let probs: Vec<f64> = vl.data.iter().map(|&x| sigmoid(x)).collect();
        let mut bce = 0.0;
        let mut inter = 0.0;
        let mut psum = 0.0;
        for (s, &x) in vl.data.iter().enumerate() {
            let n = terms.sizes[s];
            let pos = terms.overlaps[s];
            // -y log p - (1-y) log(1-p) with log-sum-exp stable forms
            let sp_neg = softplus(-x); // -log p
            let sp_pos = softplus(x); // -log(1-p)
            bce += pos * sp_neg + (n - pos) * sp_pos;
            inter += probs[s] * pos;
            psum += probs[s] * n;
        }
        bce /= terms.num_voxels;
        let dice = 1.0 - (2.0 * inter + 1.0) / (psum + terms.gt_size + 1.0);
        let loss = terms.bce_weight * bce + terms.dice_weight * dice;
        let ng = self.ng(logits);
        self.push(Matrix::scalar(loss), Op::MaskLoss { logits, terms, probs }, ng)
    }

    /// Reverse sweep from a `1 x 1` node, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(node, &gout, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(
        &self,
        node: &Node,
        gout: &Matrix,
        grads: &mut [Option<Matrix>],
        params: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, g: Matrix| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match &mut params.grads[id.0] {
                Some(existing) => existing.add_assign(gout),
                slot @ None => *slot = Some(gout.clone()),
            },
            Op::MatMul { a, b, b_t } => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (m, k) = va.shape();
                let n = gout.cols;
                if nodes[a.0].needs_grad {
                    let mut ga = Matrix::zeros(m, k);
                    // dA = dC * op(B)^T
                    gemm(m, n, k, 1.0, &gout.data, false, &vb.data, !*b_t, 0.0, &mut ga.data);
                    acc(*a, ga);
                }
                if nodes[b.0].needs_grad {
                    if *b_t {
                        // C = A B^T, dB = dC^T A  (n x k)
                        let mut gb = Matrix::zeros(n, k);
                        gemm(n, m, k, 1.0, &gout.data, true, &va.data, false, 0.0, &mut gb.data);
                        acc(*b, gb);
                    } else {
                        // dB = A^T dC  (k x n)
                        let mut gb = Matrix::zeros(k, n);
                        gemm(k, m, n, 1.0, &va.data, true, &gout.data, false, 0.0, &mut gb.data);
                        acc(*b, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::AddRow { a, row } => {
                acc(*a, gout.clone());
                let mut gr = Matrix::zeros(1, gout.cols);
                for i in 0..gout.rows {
                    for (o, x) in gr.data.iter_mut().zip(gout.row(i)) {
                        *o += x;
                    }
                }
                acc(*row, gr);
            }
            Op::Mul(a, b) => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let ga = gout.data.iter().zip(&vb.data).map(|(g, y)| g * y).collect();
                let gb = gout.data.iter().zip(&va.data).map(|(g, x)| g * x).collect();
                acc(*a, Matrix::from_vec(va.rows, va.cols, ga));
                acc(*b, Matrix::from_vec(vb.rows, vb.cols, gb));
            }
            Op::Scale(a, s) => acc(*a, gout.scale(*s)),
            Op::Gelu(a) => {
                let va = &nodes[a.0].value;
                let data = va
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&x, &g)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                acc(*a, Matrix::from_vec(va.rows, va.cols, data));
            }
            Op::SoftmaxRows { a, .. } => {
                let p = &node.value;
                let mut ga = Matrix::zeros(p.rows, p.cols);
                for i in 0..p.rows {
                    let pr = p.row(i);
                    let gr = gout.row(i);
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = pr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let (r, c) = xhat.shape();
                let g = &nodes[gain.0].value.data;
                let mut ggain = Matrix::zeros(1, c);
                let mut gbias = Matrix::zeros(1, c);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let gr = gout.row(i);
                    let xr = xhat.row(i);
                    for j in 0..c {
                        ggain.data[j] += gr[j] * xr[j];
                        gbias.data[j] += gr[j];
                    }
                    // dxhat = g * gamma
                    let dxh: Vec<f64> = (0..c).map(|j| gr[j] * g[j]).collect();
                    let mean_dxh = dxh.iter().sum::<f64>() / c as f64;
                    let mean_dxh_xh = dxh.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                    let out = ga.row_mut(i);
                    for j in 0..c {
                        out[j] = inv_std[i] * (dxh[j] - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                acc(*a, ga);
                acc(*gain, ggain);
                acc(*bias, gbias);
            }
            Op::Gather { a, ids } => {
                let va = &nodes[a.0].value;
                let mut ga = Matrix::zeros(va.rows, va.cols);
                for (k, &i) in ids.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(gout.row(k)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let c = gout.cols;
                let mut off = 0;
                for &p in parts {
                    let r = nodes[p.0].value.rows;
                    let slice = gout.data[off * c..(off + r) * c].to_vec();
                    acc(p, Matrix::from_vec(r, c, slice));
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = nodes[p.0].value.shape();
                    let mut gp = Matrix::zeros(r, c);
                    for i in 0..r {
                        gp.row_mut(i).copy_from_slice(&gout.row(i)[off..off + c]);
                    }
                    acc(p, gp);
                    off += c;
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = nodes[a.0].value.shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + gout.cols].copy_from_slice(gout.row(i));
                }
                acc(*a, ga);
            }
            Op::GroupMean { a, groups } => {
                let (r, c) = nodes[a.0].value.shape();
                let mut ga = Matrix::zeros(r, c);
                for (g, members) in groups.iter().enumerate() {
                    if members.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / members.len() as f64;
                    for &m in members {
                        for (o, x) in ga.row_mut(m).iter_mut().zip(gout.row(g)) {
                            *o += x * inv;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::MeanRows(a) => {
                let (r, c) = nodes[a.0].value.shape();
                let inv = 1.0 / r as f64;
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(&gout.data) {
                        *o = x * inv;
                    }
                }
                acc(*a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = nodes[a.0].value.shape();
                acc(*a, Matrix::from_vec(r, c, vec![gout.item(); r * c]));
            }
            Op::CrossEntropy { logits, targets, probs, denom } => {
                let s = gout.item() / denom;
                let mut gl = probs.scale(s);
                for (i, &t) in targets.iter().enumerate() {
                    let v = gl.get(i, t) - s;
                    gl.set(i, t, v);
                }
                acc(*logits, gl);
            }
            Op::SoftCrossEntropy { logits, target, probs } => {
                let s = gout.item();
                let (r, c) = probs.shape();
                let mut gl = Matrix::zeros(r, c);
                for i in 0..r {
                    let tsum: f64 = target.row(i).iter().sum();
                    for j in 0..c {
                        gl.set(i, j, s * (probs.get(i, j) * tsum - target.get(i, j)));
                    }
                }
                acc(*logits, gl);
            }
            Op::CosineDistance { a, b, dot, na, nb } => {
                let s = gout.item();
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let cos = dot / (na * nb);
                // d(1 - cos)/da = -(b/(na nb) - cos a / na^2)
                let ga = va
                    .data
                    .iter()
                    .zip(&vb.data)
                    .map(|(x, y)| -s * (y / (na * nb) - cos * x / (na * na)))
                    .collect();
                let gb = va
                    .data
                    .iter()
                    .zip(&vb.data)
                    .map(|(x, y)| -s * (x / (na * nb) - cos * y / (nb * nb)))
                    .collect();
                acc(*a, Matrix::from_vec(va.rows, va.cols, ga));
                acc(*b, Matrix::from_vec(vb.rows, vb.cols, gb));
            }
            Op::MaskLoss { logits, terms, probs } => {
                let s = gout.item();
                let mut inter = 0.0;
                let mut psum = 0.0;
                for (k, &p) in probs.iter().enumerate() {
                    inter += p * terms.overlaps[k];
                    psum += p * terms.sizes[k];
                }
                let num = 2.0 * inter + 1.0;
                let den = psum + terms.gt_size + 1.0;
                let gl = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| {
                        let n = terms.sizes[k];
                        let pos = terms.overlaps[k];
                        let dbce = (n * p - pos) / terms.num_voxels;
                        // d dice / dp = -(2 pos den - num n) / den^2 ; dp/dx = p(1-p)
                        let ddice = -(2.0 * pos * den - num * n) / (den * den) * p * (1.0 - p);
                        s * (terms.bce_weight * dbce + terms.dice_weight * ddice)
                    })
                    .collect();
                acc(*logits, Matrix::from_vec(1, probs.len(), gl));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `(max, log1p(Σ_{i≠argmax} exp(x_i - max)))`; `log softmax(row)[j] = (x_j - max) - second`.
/// Kept split so saturated rows keep their small log-probabilities.
fn log_normalizer(row: &[f64]) -> (f64, f64) {
    let (arg, mx) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
    let rest: f64 = row.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, x)| (x - mx).exp()).sum();
    (mx, rest.ln_1p())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{dense_grads, finite_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exercises every differentiable op once in a single scalar function.
    fn composite(store: &ParamStore, ids: &[ParamId]) -> (f64, Gradients) {
        let mut g = Graph::new(store);
        let a = g.param(ids[0]); // 4x3
        let b = g.param(ids[1]); // 3x5
        let row = g.param(ids[2]); // 1x5
        let gain = g.param(ids[3]); // 1x5
        let bias = g.param(ids[4]); // 1x5
        let seg = g.param(ids[5]); // 1x3

        let ab = g.matmul(a, b);
        let ab = g.add_row(ab, row);
        let ln = g.layer_norm(ab, gain, bias, 1e-5);
        let ge = g.gelu(ln);
        let sc = g.matmul_t(ge, ge); // 4x4
        let mask = Rc::new((0..16).map(|i| i % 5 != 1).collect::<Vec<_>>());
        let sm = g.softmax_rows(sc, Some(mask));
        let mixed = g.matmul(sm, ge); // 4x5
        let prod = g.mul(mixed, ln);
        let sl = g.slice_cols(prod, 1, 3);
        let left = g.slice_cols(prod, 0, 2);
        let cat = g.concat_cols(&[left, sl]); // 4x5
        let picked = g.gather(cat, &[3, 0, 0]);
        let stacked = g.concat_rows(&[picked, cat]); // 7x5
        let gm = g.group_mean(stacked, Rc::new(vec![vec![0, 2], vec![], vec![1, 4, 6]]));
        let ce = g.cross_entropy(stacked, &[0, 1, 2, 3, 4, 0, 1], 7.0);
        let mr = g.mean_rows(gm);
        let soft = g.soft_cross_entropy(mr, Matrix::row_vector(&[0.1, 0.2, 0.3, 0.15, 0.25]));
        let r0 = g.slice_rows(stacked, 0, 1);
        let r1 = g.slice_rows(stacked, 5, 1);
        let cos = g.cosine_distance(r0, r1);
        let ml = g.mask_loss(
            seg,
            Rc::new(MaskLossTerms {
                sizes: vec![4.0, 2.0, 5.0],
                overlaps: vec![3.0, 0.0, 1.0],
                num_voxels: 12.0,
                gt_size: 4.0,
                bce_weight: 1.0,
                dice_weight: 1.0,
            }),
        );
        let s = g.sum_all(sm);
        let s = g.scale(s, 0.01);
        let l = g.add(ce, soft);
        let l = g.add(l, cos);
        let l = g.add(l, ml);
        let l = g.sub(l, s);
        (g.value(l).item(), g.backward(l))
    }

    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ids = vec![
            store.add_normal(&mut rng, "a", 4, 3, 0.7),
            store.add_normal(&mut rng, "b", 3, 5, 0.7),
            store.add_normal(&mut rng, "row", 1, 5, 0.3),
            store.add_normal(&mut rng, "gain", 1, 5, 1.0),
            store.add_normal(&mut rng, "bias", 1, 5, 0.3),
            store.add_normal(&mut rng, "seg", 1, 3, 1.0),
        ];
        let (_, grads) = composite(&store, &ids);
        let analytic = dense_grads(&store, &grads, &ids);
        let numeric = finite_difference(&mut store, &ids, 1e-5, |s| composite(s, &ids).0);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::row_vector(&[1.0, 2.0]));
        let mut g = Graph::new(&store);
        let v = g.param(p);
        let d = g.detach(v);
        let s = g.sum_all(d);
        let grads = g.backward(s);
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.softmax_rows(x, Some(Rc::new(vec![false, false, true, false])));
        assert_eq!(g.value(y).data, vec![0.0, 0.0, 1.0, 0.0]);
    }
}
