//! Caption metrics and IoU-gated corpus averaging.

mod cider;
mod meteor;
mod rouge;

use serde::{Deserialize, Serialize};

pub use cider::{cider_r, length_penalty, repetition_penalty, CiderR};
pub use meteor::{align, count_chunks, meteor_from_counts, MeteorLite};
pub use rouge::{lcs_len, rouge_l, rouge_l_single};

use crate::error::{Error, Result};
use crate::geometry::Aabb;

pub const IOU_GATE: f64 = 0.5;
pub const DISPLAY_SCALE: f64 = 100.0;

/// Intersection over union of two boxes. Zero-volume boxes score 0 unless both are the same box.
pub fn aabb_iou(a: &Aabb, b: &Aabb) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::Shape(format!("invalid box {a:?} or {b:?}")));
    }
    let (va, vb) = (a.volume(), b.volume());
    if va == 0.0 || vb == 0.0 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    let inter = a.intersection_volume(b);
    Ok((inter / (va + vb - inter)).clamp(0.0, 1.0))
}

/// Lowercase, split on whitespace, strip surrounding ASCII punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionLevel {
    Object,
    Part,
}

impl std::fmt::Display for CaptionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Object => "object",
            Self::Part => "part",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedCaption {
    pub iou: f64,
    pub candidate: String,
}

/// One GT instance with its references and, if a prediction was matched to it, that caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtCaption {
    pub gt_instance_id: String,
    pub references: Vec<String>,
    pub matched: Option<MatchedCaption>,
}

/// Raw per-instance scores; unmatched instances carry IoU 0 and zero scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub gt_instance_id: String,
    pub iou: f64,
    pub candidate: String,
    pub references: Vec<String>,
    pub cider: f64,
    pub rouge: f64,
    pub meteor: f64,
    pub weight: f64,
}

/// Corpus scores multiplied by [`DISPLAY_SCALE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub level: CaptionLevel,
    pub cider: f64,
    pub rouge: f64,
    pub meteor: f64,
    pub num_gt: usize,
    pub num_gated: usize,
}

/// Scores every matched instance (CIDEr IDF over all GT references of the level), then averages
/// `weight · score` over all GT instances with `weight = [iou > threshold]`.
pub fn score_pairs(items: &[GtCaption], threshold: f64) -> Result<Vec<ScoredPair>> {
    if items.is_empty() {
        return Err(Error::EmptyInput("no GT instances to score".into()));
    }
    if let Some(bad) = items.iter().find(|g| g.references.is_empty()) {
        return Err(Error::EmptyInput(format!("GT instance {} has no reference caption", bad.gt_instance_id)));
    }
    let refs: Vec<Vec<Vec<String>>> = items.iter().map(|g| g.references.iter().map(|r| tokenize(r)).collect()).collect();
    let cider = CiderR::new(&refs);
    let meteor = MeteorLite::default();
    items
        .iter()
        .zip(&refs)
        .map(|(g, r)| {
            let (iou, candidate) = match &g.matched {
                Some(m) if !(0.0..=1.0).contains(&m.iou) => {
                    return Err(Error::Numeric(format!("IoU {} of {} outside [0, 1]", m.iou, g.gt_instance_id)))
                }
                Some(m) => (m.iou, m.candidate.clone()),
                None => (0.0, String::new()),
            };
            let c = tokenize(&candidate);
            let (ci, ro, me) = if g.matched.is_some() { (cider.score(&c, r), rouge_l(&c, r), meteor.score(&c, r)) } else { (0.0, 0.0, 0.0) };
            Ok(ScoredPair {
                gt_instance_id: g.gt_instance_id.clone(),
                iou,
                candidate,
                references: g.references.clone(),
                cider: ci,
                rouge: ro,
                meteor: me,
                weight: if iou > threshold { 1.0 } else { 0.0 },
            })
        })
        .collect()
}

pub fn report_from_pairs(pairs: &[ScoredPair], level: CaptionLevel) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no GT instances to score".into()));
    }
    let n = pairs.len() as f64;
    let mean = |f: fn(&ScoredPair) -> f64| pairs.iter().map(|p| p.weight * f(p)).sum::<f64>() / n * DISPLAY_SCALE;
    Ok(MetricReport {
        level,
        cider: mean(|p| p.cider),
        rouge: mean(|p| p.rouge),
        meteor: mean(|p| p.meteor),
        num_gt: pairs.len(),
        num_gated: pairs.iter().filter(|p| p.weight > 0.0).count(),
    })
}

pub fn gated_corpus_scores(items: &[GtCaption], level: CaptionLevel, threshold: f64) -> Result<MetricReport> {
    report_from_pairs(&score_pairs(items, threshold)?, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(lo: f64, hi: f64) -> Aabb {
        Aabb::new([lo; 3], [hi; 3])
    }

    fn item(id: &str, refs: &str, m: Option<(f64, &str)>) -> GtCaption {
        GtCaption {
            gt_instance_id: id.into(),
            references: vec![refs.into()],
            matched: m.map(|(iou, c)| MatchedCaption { iou, candidate: c.into() }),
        }
    }

    #[test]
    fn box_iou_examples() {
        assert_eq!(aabb_iou(&cube(0.0, 1.0), &cube(0.0, 1.0)).unwrap(), 1.0);
        assert_eq!(aabb_iou(&cube(0.0, 1.0), &cube(2.0, 3.0)).unwrap(), 0.0);
        assert!((aabb_iou(&cube(0.0, 2.0), &cube(1.0, 3.0)).unwrap() - 1.0 / 15.0).abs() < 1e-15);
        let flat = Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 0.0]);
        assert_eq!(aabb_iou(&flat, &flat).unwrap(), 1.0);
        assert_eq!(aabb_iou(&flat, &cube(0.0, 1.0)).unwrap(), 0.0);
        assert!(aabb_iou(&cube(1.0, 0.0), &cube(0.0, 1.0)).is_err());
    }

    #[test]
    fn tokenizer_normalizes() {
        assert_eq!(tokenize(" A red, wooden Chair. "), vec!["a", "red", "wooden", "chair"]);
    }

    #[test]
    fn gate_is_strict() {
        let items = vec![
            item("a", "a red chair", Some((0.4, "a red chair"))),
            item("b", "a blue lamp", Some((0.5, "a blue lamp"))),
            item("c", "a green sofa", Some((0.6, "a green sofa"))),
        ];
        let pairs = score_pairs(&items, IOU_GATE).unwrap();
        assert_eq!(pairs.iter().map(|p| p.weight).collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
        let r = report_from_pairs(&pairs, CaptionLevel::Object).unwrap();
        assert!((r.rouge - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.num_gated, 1);
    }

    #[test]
    fn unmatched_and_empty() {
        let items = vec![item("a", "a red chair", None), item("b", "a blue lamp", None)];
        let r = gated_corpus_scores(&items, CaptionLevel::Part, IOU_GATE).unwrap();
        assert_eq!((r.cider, r.rouge, r.meteor), (0.0, 0.0, 0.0));
        assert!(gated_corpus_scores(&[], CaptionLevel::Part, IOU_GATE).is_err());
        let all_in = vec![item("a", "a red chair", Some((0.9, "a red lamp"))), item("b", "a blue lamp", Some((0.8, "a blue lamp")))];
        let pairs = score_pairs(&all_in, IOU_GATE).unwrap();
        let r = report_from_pairs(&pairs, CaptionLevel::Part).unwrap();
        let ungated = pairs.iter().map(|p| p.meteor).sum::<f64>() / 2.0 * 100.0;
        assert!((r.meteor - ungated).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gated_scores_fall_with_threshold(ious in prop::collection::vec(0.0f64..=1.0, 1..12)) {
            let words = ["red chair", "blue lamp", "green sofa", "oak table"];
            let items: Vec<GtCaption> = ious.iter().enumerate()
                .map(|(i, &iou)| item(&i.to_string(), words[i % 4], Some((iou, words[(i + i / 4) % 4]))))
                .collect();
            let mut last: Option<MetricReport> = None;
            for thr in [0.25, 0.5, 0.75] {
                let r = gated_corpus_scores(&items, CaptionLevel::Object, thr).unwrap();
                prop_assert!((0.0..=1000.0).contains(&r.cider));
                prop_assert!((0.0..=100.0).contains(&r.rouge) && (0.0..=100.0).contains(&r.meteor));
                if let Some(p) = last {
                    prop_assert!(r.cider <= p.cider && r.rouge <= p.rouge && r.meteor <= p.meteor);
                }
                last = Some(r);
            }
        }

        #[test]
        fn box_iou_is_symmetric_and_bounded(a in prop::array::uniform6(-2.0f64..2.0), b in prop::array::uniform6(-2.0f64..2.0)) {
            let mk = |v: [f64; 6]| Aabb::new([v[0].min(v[3]), v[1].min(v[4]), v[2].min(v[5])], [v[0].max(v[3]), v[1].max(v[4]), v[2].max(v[5])]);
            let (x, y) = (mk(a), mk(b));
            let i = aabb_iou(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert_eq!(i, aabb_iou(&y, &x).unwrap());
        }
    }
}
