//! Semantic and textual consistency between the object and part captioners,
//! and the weighted training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, Graph, Linear, Matrix, ParamId, ParamStore, Var};

pub const COSINE_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub positional: bool,
    pub max_len: usize,
    pub num_semantic_classes: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { layers: 2, embed_dim: 16, ff_dim: 128, heads: 2, positional: true, max_len: 48, num_semantic_classes: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Obj,
    Part,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextDistance {
    Cosine,
    L2,
}

impl std::str::FromStr for TextDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "l2" => Ok(Self::L2),
            other => Err(Error::Config(format!("unknown textual distance {other:?}"))),
        }
    }
}

/// Small transformer encoder over a hidden-state sequence, mean-pooled to one `D_ff` vector.
#[derive(Debug, Clone)]
pub struct Projector {
    input: Linear,
    pos: Option<ParamId>,
    blocks: Vec<EncoderBlock>,
    output: Linear,
    max_len: usize,
}

impl Projector {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, cfg: &ProjectorConfig) -> Self {
        let e = cfg.embed_dim;
        Self {
            input: Linear::new(store, rng, &format!("{name}.input"), in_dim, e),
            pos: cfg.positional.then(|| store.add_normal(rng, format!("{name}.pos"), cfg.max_len, e, 0.02)),
            blocks: (0..cfg.layers)
                .map(|i| EncoderBlock::new(store, rng, &format!("{name}.block{i}"), e, cfg.heads, cfg.ff_dim))
                .collect(),
            output: Linear::new(store, rng, &format!("{name}.output"), e, cfg.ff_dim),
            max_len: cfg.max_len,
        }
    }

    pub fn forward(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let t = g.shape(hidden).0;
        if t == 0 {
            return Err(Error::EmptyInput("projector needs a nonempty hidden sequence".into()));
        }
        let mut x = self.input.forward(g, hidden);
        if let Some(pos) = self.pos {
            if t > self.max_len {
                return Err(Error::Shape(format!("sequence of {t} exceeds projector max_len {}", self.max_len)));
            }
            let table = g.param(pos);
            let p = g.slice_rows(table, 0, t);
            x = g.add(x, p);
        }
        for b in &self.blocks {
            x = b.forward(g, x);
        }
        let y = self.output.forward(g, x);
        Ok(g.mean_rows(y))
    }
}

/// The four branch projectors plus the two latent-class heads.
#[derive(Debug, Clone)]
pub struct ConsistencyHeads {
    pub cfg: ProjectorConfig,
    obj_sem: Projector,
    part_sem: Projector,
    obj_sem_head: Linear,
    part_sem_head: Linear,
    obj_text: Projector,
    part_text: Projector,
}

impl ConsistencyHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, hidden_dim: usize, cfg: &ProjectorConfig) -> Result<Self> {
        if cfg.heads == 0 || cfg.embed_dim % cfg.heads != 0 {
            return Err(Error::Config("projector embed dim must be divisible by heads".into()));
        }
        let n = cfg.num_semantic_classes;
        Ok(Self {
            cfg: cfg.clone(),
            obj_sem: Projector::new(store, rng, "cons.obj_sem", hidden_dim, cfg),
            part_sem: Projector::new(store, rng, "cons.part_sem", hidden_dim, cfg),
            obj_sem_head: Linear::new(store, rng, "cons.obj_sem.head", cfg.ff_dim, n),
            part_sem_head: Linear::new(store, rng, "cons.part_sem.head", cfg.ff_dim, n),
            obj_text: Projector::new(store, rng, "cons.obj_text", hidden_dim, cfg),
            part_text: Projector::new(store, rng, "cons.part_text", hidden_dim, cfg),
        })
    }

    /// `1 x N_sem` latent-class logits of a hidden sequence.
    pub fn semantic_logits(&self, g: &mut Graph, hidden: Var, branch: Branch) -> Result<Var> {
        let (proj, head) = match branch {
            Branch::Obj => (&self.obj_sem, &self.obj_sem_head),
            Branch::Part => (&self.part_sem, &self.part_sem_head),
        };
        let pooled = proj.forward(g, hidden)?;
        Ok(head.forward(g, pooled))
    }

    /// `1 x D_ff` pooled text embedding of a hidden sequence.
    pub fn textual_embedding(&self, g: &mut Graph, hidden: Var, branch: Branch) -> Result<Var> {
        match branch {
            Branch::Obj => self.obj_text.forward(g, hidden),
            Branch::Part => self.part_text.forward(g, hidden),
        }
    }
}

/// Row-wise softmax of a detached value: the constant target behind `SG(·)`.
pub fn stop_gradient_target(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}

/// `CE(a, SG(b)) = -Σ softmax(b) · log softmax(a)`; `b` only supplies a constant target.
pub fn stop_gradient_cross_entropy(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("logit shapes {:?} and {:?} differ", g.shape(a), g.shape(b))));
    }
    let target = stop_gradient_target(g.value(b));
    Ok(g.soft_cross_entropy(a, target))
}

/// `CE(sem_obj, SG(sem_part)) + CE(sem_part, SG(sem_obj))`.
pub fn semantic_consistency_loss(g: &mut Graph, sem_obj: Var, sem_part: Var) -> Result<Var> {
    let a = stop_gradient_cross_entropy(g, sem_obj, sem_part)?;
    let b = stop_gradient_cross_entropy(g, sem_part, sem_obj)?;
    Ok(g.add(a, b))
}

pub fn textual_consistency_loss(g: &mut Graph, h_obj: Var, h_part: Var, distance: TextDistance) -> Result<Var> {
    if g.shape(h_obj) != g.shape(h_part) {
        return Err(Error::Shape(format!("embedding shapes {:?} and {:?} differ", g.shape(h_obj), g.shape(h_part))));
    }
    match distance {
        TextDistance::Cosine => {
            let (na, nb) = (g.value(h_obj).norm(), g.value(h_part).norm());
            if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
                return Err(Error::Numeric(format!("cosine distance on near-zero vector (norms {na:e}, {nb:e})")));
            }
            Ok(g.cosine_distance(h_obj, h_part))
        }
        TextDistance::L2 => {
            let d = g.sub(h_obj, h_part);
            let sq = g.mul(d, d);
            Ok(g.sum_all(sq))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub caption: f64,
    pub semantic: f64,
    pub textual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { caption: 1.0, semantic: 0.1, textual: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub caption: f64,
    pub semantic: f64,
    pub textual: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `w₁·L_caption + w₂·L_semantic + w₃·L_textual`, evaluated left to right.
pub fn total_loss(caption: f64, semantic: f64, textual: f64, weights: LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("caption", caption), ("semantic", semantic), ("textual", textual)] {
        if !v.is_finite() {
            return Err(Error::TrainingAborted { reason: format!("{name} loss is {v}"), dump: None });
        }
    }
    let total = weights.caption * caption + weights.semantic * semantic + weights.textual * textual;
    Ok(LossBreakdown { caption, semantic, textual, total, weights })
}

/// Graph counterpart of [`total_loss`]; absent terms count as zero and add no nodes.
pub fn weighted_total(g: &mut Graph, caption: Var, semantic: Option<Var>, textual: Option<Var>, w: LossWeights) -> Var {
    let mut total = g.scale(caption, w.caption);
    for (term, weight) in [(semantic, w.semantic), (textual, w.textual)] {
        if let Some(t) = term {
            let s = g.scale(t, weight);
            total = g.add(total, s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{dense_grads, finite_difference, relative_error};
    use crate::rng;

    fn heads(positional: bool) -> (ParamStore, ConsistencyHeads) {
        let mut store = ParamStore::new();
        let cfg = ProjectorConfig { positional, ..Default::default() };
        let h = ConsistencyHeads::new(&mut store, &mut rng::stream(3, "t", 0), 8, &cfg).unwrap();
        (store, h)
    }

    fn seq(rows: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, "seq", 0);
        Matrix::from_vec(rows, 8, (0..rows * 8).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn output_shapes() {
        let (store, h) = heads(true);
        let mut g = Graph::inference(&store);
        let x = g.constant(seq(5, 1));
        let s = h.semantic_logits(&mut g, x, Branch::Obj).unwrap();
        assert_eq!(g.shape(s), (1, 64));
        let t = h.textual_embedding(&mut g, x, Branch::Part).unwrap();
        assert_eq!(g.shape(t), (1, 128));
        let empty = g.constant(Matrix::zeros(0, 8));
        assert!(h.semantic_logits(&mut g, empty, Branch::Obj).is_err());
    }

    #[test]
    fn pooling_without_positions_is_permutation_invariant() {
        let (store, h) = heads(false);
        let x = seq(4, 2);
        let perm = Matrix::from_rows(&[x.row(2).to_vec(), x.row(0).to_vec(), x.row(3).to_vec(), x.row(1).to_vec()]);
        let mut g = Graph::inference(&store);
        let a = g.constant(x);
        let b = g.constant(perm);
        let sa = h.semantic_logits(&mut g, a, Branch::Part).unwrap();
        let sb = h.semantic_logits(&mut g, b, Branch::Part).unwrap();
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
        let (store, h) = heads(true);
        let mut g = Graph::inference(&store);
        let a = g.constant(seq(4, 2));
        let b = g.constant(Matrix::from_rows(&[seq(4, 2).row(1).to_vec(), seq(4, 2).row(0).to_vec(), seq(4, 2).row(2).to_vec(), seq(4, 2).row(3).to_vec()]));
        let sa = h.semantic_logits(&mut g, a, Branch::Part).unwrap();
        let sb = h.semantic_logits(&mut g, b, Branch::Part).unwrap();
        assert!(g.value(sa).max_abs_diff(g.value(sb)) > 1e-9);
    }

    #[test]
    fn repeated_row_pools_like_single_row() {
        let (store, h) = heads(false);
        let row = seq(1, 3);
        let five = Matrix::from_rows(&vec![row.row(0).to_vec(); 5]);
        let mut g = Graph::inference(&store);
        let a = g.constant(row);
        let b = g.constant(five);
        let ta = h.textual_embedding(&mut g, a, Branch::Obj).unwrap();
        let tb = h.textual_embedding(&mut g, b, Branch::Obj).unwrap();
        assert!(g.value(ta).max_abs_diff(g.value(tb)) < 1e-12);
    }

    #[test]
    fn semantic_loss_values_and_symmetry() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Matrix::row_vector(&[10.0, -10.0]));
        let b = g.constant(Matrix::row_vector(&[10.0, -10.0]));
        let l = semantic_consistency_loss(&mut g, a, b).unwrap();
        let p2 = 1.0 / (1.0 + 20f64.exp());
        let entropy = -(1.0 - p2) * (-p2).ln_1p() - p2 * p2.ln();
        let v = g.value(l).item();
        assert!((v - 2.0 * entropy).abs() < 1e-9 * entropy, "{v} vs {}", 2.0 * entropy);
        // p₂ = e⁻²⁰/(1+e⁻²⁰) ≈ 2.06e-9 and H(p) ≈ p₂(1 − ln p₂)
        assert!((v - 8.6568e-8).abs() < 1e-11);

        let x = g.constant(seq(1, 5));
        let y = g.constant(seq(1, 6));
        let lxy = semantic_consistency_loss(&mut g, x, y).unwrap();
        let lyx = semantic_consistency_loss(&mut g, y, x).unwrap();
        assert_eq!(g.value(lxy).item().to_bits(), g.value(lyx).item().to_bits());
        let z = g.constant(Matrix::row_vector(&[1.0]));
        assert!(semantic_consistency_loss(&mut g, x, z).is_err());
    }

    #[test]
    fn textual_distances() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let e = |g: &mut Graph, v: &[f64]| g.constant(Matrix::row_vector(v));
        let a = e(&mut g, &[1.0, 0.0]);
        let b = e(&mut g, &[0.0, 2.0]);
        let c = e(&mut g, &[-3.0, 0.0]);
        let z = e(&mut g, &[0.0, 0.0]);
        let d = |g: &mut Graph, x, y, m| {
            let v = textual_consistency_loss(g, x, y, m).unwrap();
            g.value(v).item()
        };
        assert!(d(&mut g, a, a, TextDistance::Cosine).abs() < 1e-15);
        assert!((d(&mut g, a, b, TextDistance::Cosine) - 1.0).abs() < 1e-15);
        assert!((d(&mut g, a, c, TextDistance::Cosine) - 2.0).abs() < 1e-15);
        assert_eq!(d(&mut g, a, c, TextDistance::L2), 16.0);
        assert_eq!(d(&mut g, b, b, TextDistance::L2), 0.0);
        assert!(matches!(textual_consistency_loss(&mut g, a, z, TextDistance::Cosine), Err(Error::Numeric(_))));
    }

    #[test]
    fn weighted_total_is_exact() {
        let w = LossWeights::default();
        assert_eq!((w.caption, w.semantic, w.textual), (1.0, 0.1, 0.1));
        let b = total_loss(2.5, 0.7, 0.3, w).unwrap();
        assert_eq!(b.total, 1.0 * 2.5 + 0.1 * 0.7 + 0.1 * 0.3);
        let off = total_loss(2.5, 0.7, 0.3, LossWeights { caption: 1.0, semantic: 0.0, textual: 0.0 }).unwrap();
        assert_eq!(off.total, 2.5);
        let doubled = total_loss(0.0, 1.4, 0.0, w).unwrap().total;
        assert_eq!(doubled, 2.0 * total_loss(0.0, 0.7, 0.0, w).unwrap().total);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, w), Err(Error::TrainingAborted { .. })));

        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant(Matrix::scalar(2.5));
        let s = g.constant(Matrix::scalar(0.7));
        let t = g.constant(Matrix::scalar(0.3));
        let v = weighted_total(&mut g, c, Some(s), Some(t), w);
        assert_eq!(g.value(v).item(), b.total);
    }

    #[test]
    fn projector_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let cfg = ProjectorConfig { ff_dim: 12, max_len: 6, num_semantic_classes: 5, ..Default::default() };
        let h = ConsistencyHeads::new(&mut store, &mut rng::stream(3, "t", 0), 8, &cfg).unwrap();
        let x = seq(3, 9);
        let y = seq(4, 10);
        let ids: Vec<_> = store
            .ids()
            .filter(|&id| {
                let n = &store.entry(id).name;
                n.ends_with("input.weight") || n.ends_with("head.weight") || n.contains("block1.ffn.down") || n.ends_with(".pos")
            })
            .collect();
        assert!(ids.len() >= 8);
        let forward = |g: &mut Graph| {
            let a = g.constant(x.clone());
            let b = g.constant(y.clone());
            let so = h.semantic_logits(g, a, Branch::Obj).unwrap();
            let sp = h.semantic_logits(g, b, Branch::Part).unwrap();
            let to = h.textual_embedding(g, a, Branch::Obj).unwrap();
            let tp = h.textual_embedding(g, b, Branch::Part).unwrap();
            let lt = textual_consistency_loss(g, to, tp, TextDistance::Cosine).unwrap();
            (so, sp, lt)
        };
        let (analytic, t_obj, t_part) = {
            let mut g = Graph::new(&store);
            let (so, sp, lt) = forward(&mut g);
            let ls = semantic_consistency_loss(&mut g, so, sp).unwrap();
            let l = g.add(ls, lt);
            let targets = (stop_gradient_target(g.value(so)), stop_gradient_target(g.value(sp)));
            (dense_grads(&store, &g.backward(l), &ids), targets.0, targets.1)
        };
        // the stop-gradient targets stay at their base values while parameters are perturbed
        let numeric = finite_difference(&mut store, &ids, 1e-5, |s| {
            let mut g = Graph::new(s);
            let (so, sp, lt) = forward(&mut g);
            let a = g.soft_cross_entropy(so, t_part.clone());
            let b = g.soft_cross_entropy(sp, t_obj.clone());
            g.value(a).item() + g.value(b).item() + g.value(lt).item()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn stop_gradient_blocks_the_target_branch() {
        let (store, h) = heads(true);
        let mut g = Graph::new(&store);
        let a = g.constant(seq(3, 1));
        let b = g.constant(seq(5, 2));
        let so = h.semantic_logits(&mut g, a, Branch::Obj).unwrap();
        let sp = h.semantic_logits(&mut g, b, Branch::Part).unwrap();
        let term = stop_gradient_cross_entropy(&mut g, so, sp).unwrap();
        let grads = g.backward(term);
        assert_eq!(grads.norm_over(store.ids_with_prefix("cons.part_sem")), 0.0);
        assert!(grads.norm_over(store.ids_with_prefix("cons.obj_sem")) > 0.0);
    }
}
