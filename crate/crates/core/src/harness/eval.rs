use serde::{Deserialize, Serialize};

use super::{CaptionModel, RunConfig};
use crate::captioning::{gather_segment_context, InstanceInputs};
use crate::corpus::SyntheticScene;
use crate::error::{Error, Result};
use crate::evalmetrics::{aabb_iou, report_from_pairs, score_pairs, CaptionLevel, GtCaption, MatchedCaption, MetricReport, ScoredPair};
use crate::geometry::Aabb;
use crate::nn::Matrix;
use crate::segmentation::{hungarian_match, iou_cost_matrix, mask_to_aabb, PreparedScene, Segmenter, SegmenterConfig};

/// Captions of the prediction matched to one GT object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: String,
    pub object_id: u32,
    #[serde(rename = "box")]
    pub aabb: Aabb,
    pub object_caption: String,
    pub part_caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub object: MetricReport,
    pub part: MetricReport,
    pub object_pairs: Vec<ScoredPair>,
    pub part_pairs: Vec<ScoredPair>,
    pub predictions: Vec<PredictionRecord>,
}

fn instance_id(scene: &SyntheticScene, object_index: usize) -> String {
    format!("{}/{}", scene.id, scene.objects[object_index].id)
}

fn reports(cfg_threshold: f64, obj: &[GtCaption], part: &[GtCaption]) -> Result<(MetricReport, MetricReport, Vec<ScoredPair>, Vec<ScoredPair>)> {
    let op = score_pairs(obj, cfg_threshold)?;
    let pp = score_pairs(part, cfg_threshold)?;
    Ok((report_from_pairs(&op, CaptionLevel::Object)?, report_from_pairs(&pp, CaptionLevel::Part)?, op, pp))
}

/// Hungarian-matches predictions to GT objects per scene, captions the matched predictions
/// and scores both levels with IoU gating. Captioned GT objects form the evaluation set;
/// gated-out matches are not decoded since their weight is zero.
pub fn evaluate(cfg: &RunConfig, seg: &Segmenter, model: &CaptionModel, scenes: &[SyntheticScene]) -> Result<EvalOutput> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("evaluation split has no scenes".into()));
    }
    let (mut obj, mut part, mut predictions) = (Vec::new(), Vec::new(), Vec::new());
    for scene in scenes {
        let prepared = PreparedScene::new(scene, &seg.cfg)?;
        if prepared.gt.is_empty() {
            continue;
        }
        let enc = seg.predict_instances(&prepared);
        let preds: Vec<&[bool]> = enc.predictions.iter().map(|p| p.mask.as_slice()).collect();
        let assignment = hungarian_match(&iou_cost_matrix(&preds, &prepared.gt_masks()))?;
        for (gt, pred) in prepared.gt.iter().zip(&assignment.pred_for_gt) {
            let Some(captions) = &scene.objects[gt.object_index].captions else { continue };
            let reference = captions.reference();
            let id = instance_id(scene, gt.object_index);
            let mut matched = (None, None);
            if let Some(p) = pred.map(|p| &enc.predictions[p]) {
                if let Ok(aabb) = mask_to_aabb(&p.mask, &prepared.voxels) {
                    let iou = aabb_iou(&aabb, &gt.aabb)?;
                    let (oc, pc) = if iou > cfg.iou_threshold {
                        let context = gather_segment_context(&enc.dense_features, &prepared.segments, &p.mask)?.rows;
                        let inputs = InstanceInputs { query: Matrix::row_vector(&p.refined_query), context };
                        let b = model.captioner.decode_pair(&model.store, &inputs, cfg.routing(), cfg.beams)?;
                        (model.tokenizer.decode(&b.obj_tokens), model.tokenizer.decode(&b.part_tokens))
                    } else {
                        (String::new(), String::new())
                    };
                    predictions.push(PredictionRecord {
                        scene_id: scene.id.clone(),
                        object_id: scene.objects[gt.object_index].id,
                        aabb,
                        object_caption: oc.clone(),
                        part_caption: pc.clone(),
                    });
                    matched = (Some(MatchedCaption { iou, candidate: oc }), Some(MatchedCaption { iou, candidate: pc }));
                }
            }
            obj.push(GtCaption { gt_instance_id: id.clone(), references: vec![reference.object_caption.clone()], matched: matched.0 });
            part.push(GtCaption { gt_instance_id: id, references: vec![reference.part_caption.clone()], matched: matched.1 });
        }
    }
    if obj.is_empty() {
        return Err(Error::EmptyInput("evaluation split has no captioned objects".into()));
    }
    let (object, part_report, object_pairs, part_pairs) = reports(cfg.iou_threshold, &obj, &part)?;
    Ok(EvalOutput { object, part: part_report, object_pairs, part_pairs, predictions })
}

/// Scores stored prediction records against the corpus: each record's box is compared with
/// the GT box of the object it names; GT objects without a record count as unmatched.
pub fn score_predictions(
    scenes: &[SyntheticScene],
    records: &[PredictionRecord],
    seg_cfg: &SegmenterConfig,
    threshold: f64,
) -> Result<(MetricReport, MetricReport)> {
    let (obj, part) = gt_items(scenes, seg_cfg, |scene, object_id, gt_box| {
        records.iter().find(|r| r.scene_id == scene.id && r.object_id == object_id).map(|r| {
            let iou = aabb_iou(&r.aabb, gt_box);
            iou.map(|iou| (iou, r.object_caption.clone(), r.part_caption.clone()))
        })
    })?;
    let (o, p, _, _) = reports(threshold, &obj, &part)?;
    Ok((o, p))
}

/// GT captions scored as their own predictions with GT boxes: the metric ceiling.
pub fn ceiling_reports(scenes: &[SyntheticScene], seg_cfg: &SegmenterConfig, threshold: f64) -> Result<(MetricReport, MetricReport)> {
    let (obj, part) = gt_items(scenes, seg_cfg, |scene, object_id, gt_box| {
        let o = scene.objects.iter().find(|o| o.id == object_id)?;
        let r = o.captions.as_ref()?.reference();
        Some(aabb_iou(gt_box, gt_box).map(|iou| (iou, r.object_caption.clone(), r.part_caption.clone())))
    })?;
    let (o, p, _, _) = reports(threshold, &obj, &part)?;
    Ok((o, p))
}

type Candidate = Option<Result<(f64, String, String)>>;

fn gt_items(
    scenes: &[SyntheticScene],
    seg_cfg: &SegmenterConfig,
    mut candidate: impl FnMut(&SyntheticScene, u32, &Aabb) -> Candidate,
) -> Result<(Vec<GtCaption>, Vec<GtCaption>)> {
    let (mut obj, mut part) = (Vec::new(), Vec::new());
    for scene in scenes {
        let prepared = PreparedScene::new(scene, seg_cfg)?;
        for gt in &prepared.gt {
            let object = &scene.objects[gt.object_index];
            let Some(captions) = &object.captions else { continue };
            let reference = captions.reference();
            let id = instance_id(scene, gt.object_index);
            let (mo, mp) = match candidate(scene, object.id, &gt.aabb).transpose()? {
                Some((iou, oc, pc)) => (Some(MatchedCaption { iou, candidate: oc }), Some(MatchedCaption { iou, candidate: pc })),
                None => (None, None),
            };
            obj.push(GtCaption { gt_instance_id: id.clone(), references: vec![reference.object_caption.clone()], matched: mo });
            part.push(GtCaption { gt_instance_id: id, references: vec![reference.part_caption.clone()], matched: mp });
        }
    }
    if obj.is_empty() {
        return Err(Error::EmptyInput("no captioned GT objects".into()));
    }
    Ok((obj, part))
}
