use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{hungarian_match, mask_iou, mask_to_aabb, oversegment, voxelize_scene, SegmentTable, VoxelScene};
use crate::checkpoint::Archive;
use crate::corpus::{grammar, SyntheticScene};
use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::nn::{
    sigmoid, AttentionMask, FeedForward, Graph, LayerNorm, Linear, MaskLossTerms, Matrix, MultiHeadAttention, ParamId,
    ParamStore, Var,
};
use crate::rng;

pub const SEGMENTER_CHECKPOINT_KIND: &str = "segmenter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub refine_rounds: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub pe_frequencies: usize,
    pub num_classes: usize,
    pub voxel_size: f64,
    pub merge_threshold: f64,
    pub mask_threshold: f64,
    pub no_object_weight: f64,
    pub class_weight: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            num_queries: 100,
            dim: 128,
            refine_rounds: 2,
            heads: 4,
            ff_dim: 256,
            pe_frequencies: 4,
            num_classes: grammar::num_classes(),
            voxel_size: super::DEFAULT_VOXEL_SIZE,
            merge_threshold: super::DEFAULT_MERGE_THRESHOLD,
            mask_threshold: 0.5,
            no_object_weight: 0.1,
            class_weight: 1.0,
            bce_weight: 1.0,
            dice_weight: 1.0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config("segmenter needs queries > 0 and dim divisible by heads".into()));
        }
        if !(self.voxel_size > 0.0) || self.merge_threshold < 0.0 {
            return Err(Error::Config("voxel size must be positive and merge threshold non-negative".into()));
        }
        Ok(())
    }

    fn pe_dim(&self) -> usize {
        3 + 6 * self.pe_frequencies
    }
}

/// Ground-truth instance expressed on the voxel grid.
#[derive(Debug, Clone)]
pub struct GtInstance {
    /// index into the scene's object list
    pub object_index: usize,
    pub class_id: usize,
    pub mask: Vec<bool>,
    pub aabb: Aabb,
    terms: Rc<MaskLossTerms>,
}

/// A scene converted to everything the segmenter consumes, cached across epochs.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene_id: String,
    pub voxels: VoxelScene,
    pub segments: SegmentTable,
    pub members: Rc<Vec<Vec<usize>>>,
    pub gt: Vec<GtInstance>,
    inputs: Matrix,
    query_inputs: Matrix,
}

fn positional(p: [f64; 3], freqs: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&p);
    for k in 0..freqs {
        let w = (1u32 << k) as f64 * std::f64::consts::PI;
        for x in p {
            out.push((w * x).sin());
            out.push((w * x).cos());
        }
    }
}

/// Deterministic farthest-point sampling starting from voxel 0; cycles when `k` exceeds the voxel count.
fn farthest_points(points: &[[f64; 3]], k: usize) -> Vec<usize> {
    let n = points.len();
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut chosen = Vec::with_capacity(k);
    let mut dist = vec![f64::INFINITY; n];
    let mut cur = 0;
    for i in 0..k {
        if i >= n {
            chosen.push(chosen[i % n]);
            continue;
        }
        chosen.push(cur);
        let mut best = (0, -1.0);
        for (j, p) in points.iter().enumerate() {
            dist[j] = dist[j].min(d2(p, &points[cur]));
            if dist[j] > best.1 {
                best = (j, dist[j]);
            }
        }
        cur = best.0;
    }
    chosen
}

impl PreparedScene {
    /// Inputs only, without ground truth.
    pub fn from_voxels(scene_id: &str, voxels: VoxelScene, cfg: &SegmenterConfig) -> Self {
        let segments = oversegment(&voxels, cfg.merge_threshold);
        let members = Rc::new(segments.members());
        let centers: Vec<[f64; 3]> = (0..voxels.len()).map(|v| voxels.center(v)).collect();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in &centers {
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let mid = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let half = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(voxels.voxel_size, f64::max);
        let normalized: Vec<[f64; 3]> = centers.iter().map(|c| [0, 1, 2].map(|k| (c[k] - mid[k]) / half)).collect();

        let in_dim = cfg.pe_dim() + 3;
        let mut data = Vec::with_capacity(voxels.len() * in_dim);
        for (p, color) in normalized.iter().zip(&voxels.voxel_colors) {
            positional(*p, cfg.pe_frequencies, &mut data);
            data.extend(color.iter().map(|c| c - 0.5));
        }
        let inputs = Matrix::from_vec(voxels.len(), in_dim, data);
        let mut qdata = Vec::with_capacity(cfg.num_queries * cfg.pe_dim());
        for i in farthest_points(&normalized, cfg.num_queries) {
            positional(normalized[i], cfg.pe_frequencies, &mut qdata);
        }
        let query_inputs = Matrix::from_vec(cfg.num_queries, cfg.pe_dim(), qdata);
        Self { scene_id: scene_id.to_string(), voxels, segments, members, gt: Vec::new(), inputs, query_inputs }
    }

    pub fn new(scene: &SyntheticScene, cfg: &SegmenterConfig) -> Result<Self> {
        let voxels = voxelize_scene(scene, cfg.voxel_size)?;
        let labels = voxels.majority_labels(&scene.point_object_labels());
        let mut prepared = Self::from_voxels(&scene.id, voxels, cfg);
        for (k, object) in scene.objects.iter().enumerate() {
            let mask: Vec<bool> = labels.iter().map(|l| *l == Some(k as u32)).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let class_id = grammar::class_index(&object.class_label)
                .ok_or_else(|| Error::Spec(format!("unknown class {}", object.class_label)))?;
            prepared.push_gt(k, class_id, mask, cfg)?;
        }
        Ok(prepared)
    }

    pub fn push_gt(&mut self, object_index: usize, class_id: usize, mask: Vec<bool>, cfg: &SegmenterConfig) -> Result<()> {
        let aabb = mask_to_aabb(&mask, &self.voxels)?;
        let sizes: Vec<f64> = self.members.iter().map(|m| m.len() as f64).collect();
        let overlaps = self.members.iter().map(|m| m.iter().filter(|&&v| mask[v]).count() as f64).collect();
        let terms = MaskLossTerms {
            sizes,
            overlaps,
            num_voxels: self.voxels.len() as f64,
            gt_size: mask.iter().filter(|&&m| m).count() as f64,
            bce_weight: cfg.bce_weight,
            dice_weight: cfg.dice_weight,
        };
        self.gt.push(GtInstance { object_index, class_id, mask, aabb, terms: Rc::new(terms) });
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.voxels.len()
    }

    pub fn gt_masks(&self) -> Vec<&[bool]> {
        self.gt.iter().map(|g| g.mask.as_slice()).collect()
    }
}

#[derive(Debug, Clone)]
struct Round {
    ln_cross: LayerNorm,
    cross: MultiHeadAttention,
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Net {
    voxel_in: Linear,
    voxel_out: Linear,
    segment_ln: LayerNorm,
    query_pos: Linear,
    query_embed: ParamId,
    rounds: Vec<Round>,
    final_ln: LayerNorm,
    class_head: Linear,
    mask_head: Linear,
}

/// Graph handles of one segmenter forward pass.
pub struct SegmenterForward {
    pub features: Var,
    pub segment_features: Var,
    pub queries: Var,
    pub class_logits: Var,
    pub mask_logits: Var,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub refined_query: Vec<f64>,
    pub mask: Vec<bool>,
    pub class_logits: Vec<f64>,
    pub confidence: f64,
}

impl InstancePrediction {
    /// Most likely non-background class.
    pub fn class_id(&self) -> usize {
        let c = self.class_logits.len() - 1;
        (0..c).fold(0, |b, i| if self.class_logits[i] > self.class_logits[b] { i } else { b })
    }
}

#[derive(Debug, Clone)]
pub struct SceneEncoding {
    pub dense_features: Matrix,
    pub predictions: Vec<InstancePrediction>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmenterLoss {
    pub class: f64,
    pub mask: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    pub cfg: SegmenterConfig,
    pub store: ParamStore,
    net: Net,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `1 - IoU` between every prediction mask (rows) and ground-truth mask (columns).
pub fn iou_cost_matrix(preds: &[&[bool]], gts: &[&[bool]]) -> Matrix {
    let mut m = Matrix::zeros(preds.len(), gts.len());
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            m.set(i, j, 1.0 - mask_iou(p, g));
        }
    }
    m
}

impl Segmenter {
    pub fn new(cfg: SegmenterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "segmenter-init", 0);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let s = &mut store;
        let r = &mut rng;
        let voxel_in = Linear::new(s, r, "seg.voxel_in", cfg.pe_dim() + 3, d);
        let voxel_out = Linear::new(s, r, "seg.voxel_out", d, d);
        let segment_ln = LayerNorm::new(s, "seg.segment_ln", d);
        let query_pos = Linear::new(s, r, "seg.query_pos", cfg.pe_dim(), d);
        let query_embed = s.add_normal(r, "seg.query_embed", cfg.num_queries, d, 0.1);
        let rounds = (0..cfg.refine_rounds)
            .map(|i| {
                let n = format!("seg.round{i}");
                Round {
                    ln_cross: LayerNorm::new(s, &format!("{n}.ln_cross"), d),
                    cross: MultiHeadAttention::new(s, r, &format!("{n}.cross"), d, d, cfg.heads),
                    ln_self: LayerNorm::new(s, &format!("{n}.ln_self"), d),
                    self_attn: MultiHeadAttention::new(s, r, &format!("{n}.self"), d, d, cfg.heads),
                    ln_ffn: LayerNorm::new(s, &format!("{n}.ln_ffn"), d),
                    ffn: FeedForward::new(s, r, &format!("{n}.ffn"), d, cfg.ff_dim),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(s, "seg.final_ln", d);
        let class_head = Linear::new(s, r, "seg.class_head", d, cfg.num_classes + 1);
        let mask_head = Linear::new(s, r, "seg.mask_head", d, d);
        let net =
            Net { voxel_in, voxel_out, segment_ln, query_pos, query_embed, rounds, final_ln, class_head, mask_head };
        Ok(Self { cfg, store, net })
    }

    pub fn forward(&self, g: &mut Graph, scene: &PreparedScene) -> SegmenterForward {
        let n = &self.net;
        let x = g.constant(scene.inputs.clone());
        let h = n.voxel_in.forward(g, x);
        let h = g.gelu(h);
        let features = n.voxel_out.forward(g, h);
        let pooled = g.group_mean(features, scene.members.clone());
        let segment_features = n.segment_ln.forward(g, pooled);

        let qx = g.constant(scene.query_inputs.clone());
        let qp = n.query_pos.forward(g, qx);
        let qe = g.param(n.query_embed);
        let mut q = g.add(qp, qe);
        for round in &n.rounds {
            let h = round.ln_cross.forward(g, q);
            let a = round.cross.forward(g, h, segment_features, &AttentionMask::None).output;
            q = g.add(q, a);
            let h = round.ln_self.forward(g, q);
            let a = round.self_attn.forward(g, h, h, &AttentionMask::None).output;
            q = g.add(q, a);
            let h = round.ln_ffn.forward(g, q);
            let f = round.ffn.forward(g, h);
            q = g.add(q, f);
        }
        let queries = n.final_ln.forward(g, q);
        let class_logits = n.class_head.forward(g, queries);
        let me = n.mask_head.forward(g, queries);
        let scores = g.matmul_t(me, segment_features);
        let mask_logits = g.scale(scores, 1.0 / (self.cfg.dim as f64).sqrt());
        SegmenterForward { features, segment_features, queries, class_logits, mask_logits }
    }

    /// Set-prediction loss: Hungarian matching on soft mask IoU and class
    /// probability, then cross-entropy on classes and BCE + dice on matched masks.
    pub fn loss(&self, g: &mut Graph, scene: &PreparedScene) -> Result<(Var, SegmenterLoss)> {
        let fwd = self.forward(g, scene);
        let nq = self.cfg.num_queries;
        let no_object = self.cfg.num_classes;
        let class_probs: Vec<Vec<f64>> = (0..nq).map(|i| softmax(g.value(fwd.class_logits).row(i))).collect();
        let mask_probs: Vec<Vec<f64>> =
            (0..nq).map(|i| g.value(fwd.mask_logits).row(i).iter().map(|&x| sigmoid(x)).collect()).collect();

        let mut cost = Matrix::zeros(nq, scene.gt.len());
        for (j, gt) in scene.gt.iter().enumerate() {
            for (i, probs) in mask_probs.iter().enumerate() {
                let t = &gt.terms;
                let inter: f64 = probs.iter().zip(&t.overlaps).map(|(p, o)| p * o).sum();
                let psum: f64 = probs.iter().zip(&t.sizes).map(|(p, s)| p * s).sum();
                let soft_iou = inter / (psum + t.gt_size - inter).max(1e-12);
                cost.set(i, j, 1.0 - soft_iou - self.cfg.class_weight * class_probs[i][gt.class_id]);
            }
        }
        let assignment = hungarian_match(&cost)?;

        let mut matched = Vec::new();
        let mut targets = Vec::new();
        let mut is_matched = vec![false; nq];
        let mut mask_terms = Vec::new();
        for (j, pred) in assignment.pred_for_gt.iter().enumerate() {
            if let Some(p) = *pred {
                matched.push(p);
                targets.push(scene.gt[j].class_id);
                is_matched[p] = true;
                mask_terms.push((p, scene.gt[j].terms.clone()));
            }
        }
        let unmatched: Vec<usize> = (0..nq).filter(|&i| !is_matched[i]).collect();
        let w = self.cfg.no_object_weight;
        let denom = matched.len() as f64 + w * unmatched.len() as f64;
        let mut class_terms = Vec::new();
        if !matched.is_empty() {
            let rows = g.gather(fwd.class_logits, &matched);
            class_terms.push(g.cross_entropy(rows, &targets, denom));
        }
        if !unmatched.is_empty() {
            let rows = g.gather(fwd.class_logits, &unmatched);
            let ce = g.cross_entropy(rows, &vec![no_object; unmatched.len()], denom);
            class_terms.push(g.scale(ce, w));
        }
        let class_loss = sum_vars(g, &class_terms);
        let mut total = g.scale(class_loss, self.cfg.class_weight);
        let mut mask_value = 0.0;
        if !mask_terms.is_empty() {
            let inv = 1.0 / mask_terms.len() as f64;
            let terms: Vec<Var> = mask_terms
                .into_iter()
                .map(|(p, t)| {
                    let row = g.slice_rows(fwd.mask_logits, p, 1);
                    g.mask_loss(row, t)
                })
                .collect();
            let mask_loss = sum_vars(g, &terms);
            let mask_loss = g.scale(mask_loss, inv);
            mask_value = g.value(mask_loss).item();
            total = g.add(total, mask_loss);
        }
        let breakdown =
            SegmenterLoss { class: g.value(class_loss).item(), mask: mask_value, total: g.value(total).item() };
        Ok((total, breakdown))
    }

    pub fn predict_instances(&self, scene: &PreparedScene) -> SceneEncoding {
        let mut g = Graph::inference(&self.store);
        let fwd = self.forward(&mut g, scene);
        let logits = g.value(fwd.class_logits);
        let mask_logits = g.value(fwd.mask_logits);
        let queries = g.value(fwd.queries);
        let seg = &scene.segments.segment_of;
        let predictions = (0..self.cfg.num_queries)
            .map(|i| {
                let seg_probs: Vec<f64> = mask_logits.row(i).iter().map(|&x| sigmoid(x)).collect();
                let mask: Vec<bool> = seg.iter().map(|&s| seg_probs[s] > self.cfg.mask_threshold).collect();
                let (mut psum, mut count) = (0.0, 0usize);
                for (v, &m) in mask.iter().enumerate() {
                    if m {
                        psum += seg_probs[seg[v]];
                        count += 1;
                    }
                }
                let probs = softmax(logits.row(i));
                let best_class = probs[..self.cfg.num_classes].iter().cloned().fold(0.0, f64::max);
                let confidence = if count == 0 { 0.0 } else { best_class * psum / count as f64 };
                InstancePrediction {
                    refined_query: queries.row(i).to_vec(),
                    mask,
                    class_logits: logits.row(i).to_vec(),
                    confidence,
                }
            })
            .collect();
        SceneEncoding { dense_features: g.value(fwd.features).clone(), predictions }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(&self.cfg).expect("config serializes");
        let mut a = Archive::new(SEGMENTER_CHECKPOINT_KIND, meta);
        a.push_store("params", &self.store);
        a.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::read(path, SEGMENTER_CHECKPOINT_KIND)?;
        Self::from_archive(&a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let cfg: SegmenterConfig =
            serde_json::from_value(a.meta.clone()).map_err(|e| Error::Config(format!("segmenter config: {e}")))?;
        let mut model = Self::new(cfg, 0)?;
        a.restore_store("params", &mut model.store)?;
        Ok(model)
    }
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

/// JSON view of the predictions of one scene, most confident first.
pub fn dump_predictions(scene: &PreparedScene, encoding: &SceneEncoding) -> serde_json::Value {
    let mut order: Vec<usize> = (0..encoding.predictions.len()).collect();
    order.sort_by(|&a, &b| encoding.predictions[b].confidence.total_cmp(&encoding.predictions[a].confidence));
    let items: Vec<_> = order
        .into_iter()
        .filter_map(|i| {
            let p = &encoding.predictions[i];
            let aabb = mask_to_aabb(&p.mask, &scene.voxels).ok()?;
            Some(serde_json::json!({
                "query": i,
                "class": grammar::CLASSES.get(p.class_id()).map(|c| c.name),
                "confidence": p.confidence,
                "num_voxels": p.mask.iter().filter(|&&m| m).count(),
                "aabb": aabb,
            }))
        })
        .collect();
    serde_json::json!({ "scene_id": scene.scene_id, "instances": items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_scene, CorpusSpec};
    use crate::nn::AdamW;

    fn small_cfg() -> SegmenterConfig {
        SegmenterConfig { num_queries: 12, dim: 32, ff_dim: 64, ..Default::default() }
    }

    #[test]
    fn untrained_model_has_valid_shapes() {
        let scene = generate_scene(&CorpusSpec::default(), 0).unwrap();
        let cfg = SegmenterConfig::default();
        let prepared = PreparedScene::new(&scene, &cfg).unwrap();
        let model = Segmenter::new(cfg.clone(), 1).unwrap();
        let enc = model.predict_instances(&prepared);
        assert_eq!(enc.dense_features.shape(), (prepared.num_voxels(), 128));
        assert!(enc.dense_features.is_finite());
        assert_eq!(enc.predictions.len(), 100);
        for p in &enc.predictions {
            assert_eq!(p.mask.len(), prepared.num_voxels());
            assert_eq!(p.class_logits.len(), cfg.num_classes + 1);
            assert!(p.class_logits.iter().all(|x| x.is_finite()));
            assert!((0.0..=1.0).contains(&p.confidence));
        }
        let again = model.predict_instances(&prepared);
        assert_eq!(again.dense_features, enc.dense_features);
    }

    #[test]
    fn gt_masks_cover_every_object() {
        let scene = generate_scene(&CorpusSpec::default(), 3).unwrap();
        let prepared = PreparedScene::new(&scene, &SegmenterConfig::default()).unwrap();
        assert_eq!(prepared.gt.len(), scene.objects.len());
        for gt in &prepared.gt {
            // segments never straddle two objects in generated scenes
            for m in prepared.members.iter() {
                let inside = m.iter().filter(|&&v| gt.mask[v]).count();
                assert!(inside == 0 || inside == m.len());
            }
        }
    }

    #[test]
    fn loss_decreases_on_one_scene() {
        let scene = generate_scene(&CorpusSpec::default(), 1).unwrap();
        let cfg = small_cfg();
        let prepared = PreparedScene::new(&scene, &cfg).unwrap();
        let mut model = Segmenter::new(cfg, 2).unwrap();
        let mut opt = AdamW::new(&model.store, 0.005, 0.0, 60);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..60 {
            let (grads, l) = {
                let mut g = Graph::new(&model.store);
                let (loss, b) = model.loss(&mut g, &prepared).unwrap();
                (g.backward(loss), b)
            };
            first.get_or_insert(l.total);
            last = l.total;
            opt.step(&mut model.store, &grads);
        }
        assert!(last < 0.5 * first.unwrap(), "{first:?} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Segmenter::new(small_cfg(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        model.save(&path).unwrap();
        let back = Segmenter::load(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert!(back.store.bit_identical(&model.store));
    }

    #[test]
    fn farthest_points_cycle_when_short() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.2, 0.0, 0.0]];
        assert_eq!(farthest_points(&pts, 5), vec![0, 1, 2, 0, 1]);
    }
}
