//! Object- and part-level caption decoders conditioned on instance queries and
//! segment context, with hidden-state sharing between the two levels.

mod decoder;
mod tokenizer;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{decode_beam, decode_greedy, CaptionerConfig, ContextRef, Decoded, Decoder, DecoderPass};
pub use tokenizer::{build_tokenizer, Tokenizer, BOS, EOS, PAD, UNK};

use crate::error::{Error, Result};
use crate::nn::{AttentionMask, Graph, Linear, Matrix, ParamStore, Var};
use crate::segmentation::SegmentTable;

/// Which decoder's hidden states are appended to the other's context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareDirection {
    None,
    Part2obj,
    Obj2part,
}

impl std::str::FromStr for ShareDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "part2obj" => Ok(Self::Part2obj),
            "obj2part" => Ok(Self::Obj2part),
            other => Err(Error::Config(format!("unknown share direction {other:?}"))),
        }
    }
}

/// Mean dense feature of every segment that intersects the mask (restricted to the mask).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentContext {
    pub rows: Matrix,
    pub segment_ids: Vec<usize>,
    /// no segment intersects the mask
    pub degenerate: bool,
}

pub fn gather_segment_context(features: &Matrix, segments: &SegmentTable, mask: &[bool]) -> Result<SegmentContext> {
    if features.rows != segments.segment_of.len() || mask.len() != features.rows {
        return Err(Error::Shape(format!(
            "{} feature rows, {} segment labels, {} mask entries",
            features.rows,
            segments.segment_of.len(),
            mask.len()
        )));
    }
    let mut sums = vec![vec![0.0; features.cols]; segments.num_segments];
    let mut counts = vec![0usize; segments.num_segments];
    for (v, &s) in segments.segment_of.iter().enumerate() {
        if mask[v] {
            counts[s] += 1;
            for (a, x) in sums[s].iter_mut().zip(features.row(v)) {
                *a += x;
            }
        }
    }
    let segment_ids: Vec<usize> = (0..segments.num_segments).filter(|&s| counts[s] > 0).collect();
    let rows: Vec<Vec<f64>> = segment_ids
        .iter()
        .map(|&s| sums[s].iter().map(|x| x / counts[s] as f64).collect())
        .collect();
    let rows = if rows.is_empty() { Matrix::zeros(0, features.cols) } else { Matrix::from_rows(&rows) };
    Ok(SegmentContext { degenerate: segment_ids.is_empty(), rows, segment_ids })
}

/// Zero-pads every context to the batch's largest row count; masks mark real rows.
pub fn pad_context(batch: &[Matrix]) -> Result<(Vec<Matrix>, Vec<Vec<bool>>)> {
    let first = batch.first().ok_or_else(|| Error::EmptyInput("pad_context needs at least one context".into()))?;
    if batch.iter().any(|m| m.cols != first.cols) {
        return Err(Error::Shape("contexts differ in width".into()));
    }
    let longest = batch.iter().map(|m| m.rows).max().unwrap_or(0);
    let mut padded = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for m in batch {
        let mut data = m.data.clone();
        data.resize(longest * m.cols, 0.0);
        padded.push(Matrix::from_vec(longest, m.cols, data));
        masks.push((0..longest).map(|r| r < m.rows).collect());
    }
    Ok((padded, masks))
}

/// Mean token cross-entropy over non-PAD targets of every sequence at one level.
pub fn level_loss(g: &mut Graph, items: &[(Var, &[u32])]) -> Result<Option<Var>> {
    let total: usize = items.iter().map(|(_, t)| t.iter().filter(|&&x| x != PAD).count()).sum();
    if total == 0 {
        return Ok(None);
    }
    let mut acc: Option<Var> = None;
    for &(logits, targets) in items {
        let (rows, _) = g.shape(logits);
        if rows != targets.len() {
            return Err(Error::Shape(format!("{rows} logits rows for {} targets", targets.len())));
        }
        let keep: Vec<usize> = (0..rows).filter(|&i| targets[i] != PAD).collect();
        if keep.is_empty() {
            continue;
        }
        let kept_targets: Vec<usize> = keep.iter().map(|&i| targets[i] as usize).collect();
        let rows_var = if keep.len() == rows { logits } else { g.gather(logits, &keep) };
        let ce = g.cross_entropy(rows_var, &kept_targets, total as f64);
        acc = Some(match acc {
            Some(a) => g.add(a, ce),
            None => ce,
        });
    }
    Ok(acc)
}

/// `L_obj + L_part` for one object.
pub fn caption_loss(g: &mut Graph, obj_logits: Var, obj_gt: &[u32], part_logits: Var, part_gt: &[u32]) -> Result<Var> {
    let o = level_loss(g, &[(obj_logits, obj_gt)])?;
    let p = level_loss(g, &[(part_logits, part_gt)])?;
    match (o, p) {
        (Some(o), Some(p)) => Ok(g.add(o, p)),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => Err(Error::EmptyInput("no caption targets".into())),
    }
}

/// Per-level modules: caption-aware query map, segment-context projection and decoder.
#[derive(Debug, Clone)]
pub struct Level {
    pub query: Linear,
    pub context: Linear,
    pub decoder: Decoder,
}

/// Refined query and raw segment context of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceInputs {
    pub query: Matrix,
    pub context: Matrix,
}

/// Teacher-forced outputs of both levels for one instance.
pub struct PairPass {
    pub obj: DecoderPass,
    pub part: DecoderPass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionBundle {
    pub obj_tokens: Vec<u32>,
    pub part_tokens: Vec<u32>,
    pub h_obj: Matrix,
    pub h_part: Matrix,
}

/// Options that switch parts of the captioning computation on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionRouting {
    pub share: ShareDirection,
    pub context_features: bool,
}

#[derive(Debug, Clone)]
pub struct JointCaptioner {
    pub cfg: CaptionerConfig,
    pub obj: Level,
    pub part: Level,
    /// projects part hidden states into the object context
    pub part_to_obj: Linear,
    /// projects object hidden states into the part context
    pub obj_to_part: Linear,
}

impl JointCaptioner {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &CaptionerConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut level = |store: &mut ParamStore, name: &str| Level {
            query: Linear::new(store, rng, &format!("cap.{name}.query"), cfg.query_dim, d),
            context: Linear::new(store, rng, &format!("cap.{name}.context"), cfg.feature_dim, d),
            decoder: Decoder::new(store, rng, &format!("cap.{name}.decoder"), cfg),
        };
        let obj = level(store, "obj");
        let part = level(store, "part");
        let part_to_obj = Linear::new(store, rng, "cap.share.part_to_obj", d, d);
        let obj_to_part = Linear::new(store, rng, "cap.share.obj_to_part", d, d);
        Ok(Self { cfg: cfg.clone(), obj, part, part_to_obj, obj_to_part })
    }

    /// `Q_c = Φ_query(Q_r)`.
    pub fn project_query(&self, g: &mut Graph, level: &Level, refined_query: Var) -> Var {
        level.query.forward(g, refined_query)
    }

    fn base_context(&self, g: &mut Graph, level: &Level, raw: &Matrix, routing: CaptionRouting) -> Option<Var> {
        if !routing.context_features || raw.rows == 0 {
            return None;
        }
        let c = g.constant(raw.clone());
        Some(level.context.forward(g, c))
    }

    /// `[Φ_hidden(h); S]`, or `S` alone when there is nothing to share.
    pub fn share_context(&self, g: &mut Graph, map: &Linear, hidden: Var, context: Option<Var>) -> Var {
        let shared = map.forward(g, hidden);
        match context {
            Some(c) => g.concat_rows(&[shared, c]),
            None => shared,
        }
    }

    pub fn teacher_forced_pair(
        &self,
        g: &mut Graph,
        inputs: &InstanceInputs,
        obj_tokens: &[u32],
        part_tokens: &[u32],
        routing: CaptionRouting,
    ) -> Result<PairPass> {
        let rq = g.constant(inputs.query.clone());
        let q_obj = self.project_query(g, &self.obj, rq);
        let q_part = self.project_query(g, &self.part, rq);
        let s_obj = self.base_context(g, &self.obj, &inputs.context, routing);
        let s_part = self.base_context(g, &self.part, &inputs.context, routing);
        let none = AttentionMask::None;
        let ctx = |rows: Option<Var>| rows.map(|rows| ContextRef { rows, mask: &none });
        Ok(match routing.share {
            ShareDirection::None => {
                let part = self.part.decoder.teacher_forced(g, q_part, ctx(s_part), part_tokens)?;
                let obj = self.obj.decoder.teacher_forced(g, q_obj, ctx(s_obj), obj_tokens)?;
                PairPass { obj, part }
            }
            ShareDirection::Part2obj => {
                let part = self.part.decoder.teacher_forced(g, q_part, ctx(s_part), part_tokens)?;
                let c = self.share_context(g, &self.part_to_obj, part.hidden, s_obj);
                let obj = self.obj.decoder.teacher_forced(g, q_obj, ctx(Some(c)), obj_tokens)?;
                PairPass { obj, part }
            }
            ShareDirection::Obj2part => {
                let obj = self.obj.decoder.teacher_forced(g, q_obj, ctx(s_obj), obj_tokens)?;
                let c = self.share_context(g, &self.obj_to_part, obj.hidden, s_part);
                let part = self.part.decoder.teacher_forced(g, q_part, ctx(Some(c)), part_tokens)?;
                PairPass { obj, part }
            }
        })
    }

    /// Query and context rows of one level as plain values, for decoding.
    fn level_inputs(&self, store: &ParamStore, level: &Level, inputs: &InstanceInputs, routing: CaptionRouting) -> (Matrix, Option<Matrix>) {
        let mut g = Graph::inference(store);
        let rq = g.constant(inputs.query.clone());
        let q = self.project_query(&mut g, level, rq);
        let s = self.base_context(&mut g, level, &inputs.context, routing);
        (g.value(q).clone(), s.map(|s| g.value(s).clone()))
    }

    fn shared_rows(&self, store: &ParamStore, map: &Linear, hidden: &Matrix, context: Option<Matrix>) -> Matrix {
        let mut g = Graph::inference(store);
        let h = g.constant(hidden.clone());
        let c = context.map(|c| g.constant(c));
        let out = self.share_context(&mut g, map, h, c);
        g.value(out).clone()
    }

    /// Beam-decodes both levels; the sharing source level is decoded first and
    /// its decoded hidden states feed the other level's context.
    pub fn decode_pair(&self, store: &ParamStore, inputs: &InstanceInputs, routing: CaptionRouting, beams: usize) -> Result<CaptionBundle> {
        let max_len = self.cfg.max_len;
        let (q_obj, s_obj) = self.level_inputs(store, &self.obj, inputs, routing);
        let (q_part, s_part) = self.level_inputs(store, &self.part, inputs, routing);
        let with_mask = |m: Option<Matrix>| m.map(|m| (m, AttentionMask::None));
        let run = |level: &Level, q: &Matrix, ctx: Option<Matrix>| {
            decode_beam(&level.decoder, store, q, with_mask(ctx).as_ref(), beams, max_len)
        };
        let (obj, part) = match routing.share {
            ShareDirection::None => (run(&self.obj, &q_obj, s_obj)?, run(&self.part, &q_part, s_part)?),
            ShareDirection::Part2obj => {
                let part = run(&self.part, &q_part, s_part)?;
                let ctx = self.shared_rows(store, &self.part_to_obj, &part.hidden, s_obj);
                (run(&self.obj, &q_obj, Some(ctx))?, part)
            }
            ShareDirection::Obj2part => {
                let obj = run(&self.obj, &q_obj, s_obj)?;
                let ctx = self.shared_rows(store, &self.obj_to_part, &obj.hidden, s_part);
                let part = run(&self.part, &q_part, Some(ctx))?;
                (obj, part)
            }
        };
        Ok(CaptionBundle { obj_tokens: obj.tokens, part_tokens: part.tokens, h_obj: obj.hidden, h_part: part.hidden })
    }
}

/// Keys mask for a padded context.
pub fn padding_mask(valid: Vec<bool>) -> AttentionMask {
    AttentionMask::Keys(Rc::new(valid))
}
