use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{select_split, write_csv, write_json, RunConfig, RunReport, Split};
use crate::captioning::{build_tokenizer, gather_segment_context, level_loss, InstanceInputs, JointCaptioner, Tokenizer};
use crate::checkpoint::Archive;
use crate::consistency::{semantic_consistency_loss, textual_consistency_loss, weighted_total, Branch, ConsistencyHeads};
use crate::corpus::SyntheticScene;
use crate::error::{Error, Result};
use crate::nn::{AdamW, Gradients, Graph, Matrix, ParamStore, Var};
use crate::rng;
use crate::segmentation::{hungarian_match, iou_cost_matrix, PreparedScene, Segmenter};

pub const CAPTIONER_CHECKPOINT_KIND: &str = "captioner";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegLogRow {
    pub step: u64,
    pub class: f64,
    pub mask: f64,
    pub total: f64,
    pub elapsed_secs: f64,
}

/// One caption-stage optimizer step; disabled terms are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    #[serde(rename = "L_caption")]
    pub caption: f64,
    #[serde(rename = "L_semantic")]
    pub semantic: Option<f64>,
    #[serde(rename = "L_textual")]
    pub textual: Option<f64>,
    pub total: f64,
}

fn epoch_batches(n: usize, batch: usize, seed: u64, purpose: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, purpose, epoch as u64));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn abort(cfg: &RunConfig, reason: String, details: serde_json::Value) -> Error {
    let path = cfg.out_dir.join("nan_dump.json");
    let dump = serde_json::json!({ "reason": reason, "config_hash": cfg.hash(), "details": details });
    let dump = write_json(&path, &dump).ok().map(|_| path);
    Error::TrainingAborted { reason, dump }
}

/// Stage one: the instance segmenter alone.
pub fn train_segmenter(cfg: &RunConfig, train: &[SyntheticScene]) -> Result<(Segmenter, Vec<SegLogRow>)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("no training scenes for the segmenter".into()));
    }
    let prepared = train.iter().map(|s| PreparedScene::new(s, &cfg.segmenter)).collect::<Result<Vec<_>>>()?;
    let mut model = Segmenter::new(cfg.segmenter.clone(), cfg.seed)?;
    let per_epoch = prepared.len().div_ceil(cfg.batch_size_scenes);
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay, (cfg.seg_epochs * per_epoch) as u64);
    opt.min_lr = cfg.min_lr;
    let mut log = Vec::new();
    let started = std::time::Instant::now();
    for epoch in 0..cfg.seg_epochs {
        for batch in epoch_batches(prepared.len(), cfg.batch_size_scenes, cfg.seed, "segmenter-shuffle", epoch) {
            let mut acc = Gradients::zeros_like(&model.store);
            let (mut class, mut mask, mut total) = (0.0, 0.0, 0.0);
            for &i in &batch {
                let mut g = Graph::new(&model.store);
                let (loss, parts) = model.loss(&mut g, &prepared[i])?;
                acc.accumulate(&g.backward(loss));
                class += parts.class;
                mask += parts.mask;
                total += parts.total;
            }
            let n = batch.len() as f64;
            acc.scale(1.0 / n);
            if !total.is_finite() || !acc.is_finite() {
                let scenes: Vec<&str> = batch.iter().map(|&i| prepared[i].scene_id.as_str()).collect();
                return Err(abort(cfg, format!("segmenter loss {total} at step {}", opt.step), serde_json::json!({ "scenes": scenes, "epoch": epoch })));
            }
            opt.step(&mut model.store, &acc);
            let elapsed_secs = started.elapsed().as_secs_f64();
            log.push(SegLogRow { step: opt.step, class: class / n, mask: mask / n, total: total / n, elapsed_secs });
        }
        if (epoch + 1) % 10 == 0 {
            log::info!("segmenter epoch {}/{}: loss {:.4}", epoch + 1, cfg.seg_epochs, log.last().map_or(f64::NAN, |r| r.total));
        }
    }
    Ok((model, log))
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmenterSidecar {
    hash: String,
    log: Vec<SegLogRow>,
}

/// Loads the stage-one segmenter from `out_dir` when one was trained under the same
/// settings; trains and stores it otherwise.
pub fn obtain_segmenter(cfg: &RunConfig, train: &[SyntheticScene]) -> Result<(Segmenter, Vec<SegLogRow>)> {
    let ckpt = cfg.out_dir.join("segmenter.ckpt");
    let sidecar = cfg.out_dir.join("segmenter.json");
    match load_segmenter(cfg) {
        Ok(found) => {
            log::info!("reusing segmenter at {}", ckpt.display());
            return Ok(found);
        }
        Err(Error::Missing { .. } | Error::Config(_)) => {}
        Err(e) => return Err(e),
    }
    let (model, log) = train_segmenter(cfg, train)?;
    model.save(&ckpt)?;
    write_json(&sidecar, &SegmenterSidecar { hash: cfg.segmenter_hash(), log: log.clone() })?;
    write_csv(&cfg.out_dir.join("segmenter_log.csv"), &log)?;
    Ok((model, log))
}

/// The stage-one segmenter stored in `out_dir`; it must match the configuration.
pub fn load_segmenter(cfg: &RunConfig) -> Result<(Segmenter, Vec<SegLogRow>)> {
    let ckpt = cfg.out_dir.join("segmenter.ckpt");
    let sidecar = cfg.out_dir.join("segmenter.json");
    if !ckpt.exists() {
        return Err(Error::Missing { what: "segmenter checkpoint", path: ckpt });
    }
    if !sidecar.exists() {
        return Err(Error::Missing { what: "segmenter record", path: sidecar });
    }
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let side: SegmenterSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&sidecar, e))?;
    if side.hash != cfg.segmenter_hash() {
        return Err(Error::Config(format!("{} was trained under different stage-one settings", ckpt.display())));
    }
    Ok((Segmenter::load(&ckpt)?, side.log))
}

/// Frozen-segmenter inputs of one GT object matched by Hungarian assignment, with its
/// tokenized caption variants.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSample {
    pub scene_id: String,
    pub object_index: usize,
    pub inputs: InstanceInputs,
    pub variants: Vec<(Vec<u32>, Vec<u32>)>,
}

/// Samples of one scene; objects without captions contribute nothing.
pub fn caption_samples(seg: &Segmenter, scene: &SyntheticScene, tokenizer: &Tokenizer) -> Result<Vec<CaptionSample>> {
    let prepared = PreparedScene::new(scene, &seg.cfg)?;
    if prepared.gt.is_empty() {
        return Ok(Vec::new());
    }
    let enc = seg.predict_instances(&prepared);
    let preds: Vec<&[bool]> = enc.predictions.iter().map(|p| p.mask.as_slice()).collect();
    let assignment = hungarian_match(&iou_cost_matrix(&preds, &prepared.gt_masks()))?;
    let mut out = Vec::new();
    for (gt, pred) in prepared.gt.iter().zip(&assignment.pred_for_gt) {
        let (Some(p), Some(captions)) = (pred, &scene.objects[gt.object_index].captions) else { continue };
        let p = &enc.predictions[*p];
        let context = gather_segment_context(&enc.dense_features, &prepared.segments, &p.mask)?.rows;
        let variants = captions
            .variants
            .iter()
            .map(|v| (tokenizer.encode_target(&v.object_caption), tokenizer.encode_target(&v.part_caption)))
            .collect();
        out.push(CaptionSample {
            scene_id: scene.id.clone(),
            object_index: gt.object_index,
            inputs: InstanceInputs { query: Matrix::row_vector(&p.refined_query), context },
            variants,
        });
    }
    Ok(out)
}

/// Runs the frozen segmenter once over every scene; stage two trains on these outputs.
pub fn prepare_stage_two(seg: &Segmenter, scenes: &[SyntheticScene], tokenizer: &Tokenizer) -> Result<Vec<Vec<CaptionSample>>> {
    scenes.iter().map(|s| caption_samples(seg, s, tokenizer)).collect()
}

/// Captioners, consistency heads and vocabulary sharing one parameter store.
#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub config: RunConfig,
    pub store: ParamStore,
    pub captioner: JointCaptioner,
    pub heads: ConsistencyHeads,
    pub tokenizer: Tokenizer,
}

impl CaptionModel {
    pub fn new(cfg: &RunConfig, tokenizer: Tokenizer) -> Result<Self> {
        let mut ccfg = cfg.captioner.clone();
        ccfg.vocab_size = tokenizer.vocab_size();
        let mut store = ParamStore::new();
        let mut rng = rng::stream(cfg.seed, "captioner-init", 0);
        let captioner = JointCaptioner::new(&mut store, &mut rng, &ccfg)?;
        let heads = ConsistencyHeads::new(&mut store, &mut rng, ccfg.embed_dim, &cfg.projector)?;
        Ok(Self { config: cfg.clone(), store, captioner, heads, tokenizer })
    }

    fn archive(&self, opt: &AdamW, epoch: usize, log: &[LogRow]) -> Archive {
        let meta = serde_json::json!({
            "config": self.config,
            "config_hash": self.config.hash(),
            "tokenizer": self.tokenizer.to_json(),
            "epoch": epoch,
            "optimizer_step": opt.step,
            "log": log,
        });
        let mut a = Archive::new(CAPTIONER_CHECKPOINT_KIND, meta);
        a.push_store("params", &self.store);
        a.push_optimizer("adamw", opt);
        a
    }
}

struct Resumed {
    model: CaptionModel,
    opt_step: u64,
    archive: Archive,
    epoch: usize,
    log: Vec<LogRow>,
}

fn read_checkpoint(path: &Path) -> Result<Resumed> {
    let a = Archive::read(path, CAPTIONER_CHECKPOINT_KIND)?;
    let bad = |what: &str| Error::Integrity { path: path.to_path_buf(), reason: format!("checkpoint metadata lacks {what}") };
    let cfg: RunConfig = serde_json::from_value(a.meta["config"].clone()).map_err(|_| bad("config"))?;
    let tok = Tokenizer::from_json(a.meta["tokenizer"].as_str().ok_or_else(|| bad("tokenizer"))?)
        .map_err(|reason| Error::Integrity { path: path.to_path_buf(), reason })?;
    let epoch = a.meta["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize;
    let opt_step = a.meta["optimizer_step"].as_u64().ok_or_else(|| bad("optimizer step"))?;
    let log: Vec<LogRow> = serde_json::from_value(a.meta["log"].clone()).map_err(|_| bad("log"))?;
    let mut model = CaptionModel::new(&cfg, tok)?;
    a.restore_store("params", &mut model.store)?;
    Ok(Resumed { model, opt_step, archive: a, epoch, log })
}

pub fn load_captioner(path: &Path) -> Result<CaptionModel> {
    Ok(read_checkpoint(path)?.model)
}

pub struct BatchTerms {
    pub caption: Var,
    pub semantic: Option<Var>,
    pub textual: Option<Var>,
    pub total: Var,
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Option<Var> {
    let (&first, rest) = vars.split_first()?;
    let mut acc = first;
    for &v in rest {
        acc = g.add(acc, v);
    }
    Some(g.scale(acc, 1.0 / vars.len() as f64))
}

/// Loss of one captioner batch: per-level token-mean caption CE summed over the two levels,
/// consistency terms averaged over objects, combined with the configured weights.
pub fn batch_loss(g: &mut Graph, model: &CaptionModel, items: &[(&InstanceInputs, &[u32], &[u32])]) -> Result<Option<BatchTerms>> {
    let cfg = &model.config;
    let (mut obj, mut part, mut sem, mut text) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &(inputs, ot, pt) in items {
        let pass = model.captioner.teacher_forced_pair(g, inputs, ot, pt, cfg.routing())?;
        obj.push((pass.obj.logits, ot));
        part.push((pass.part.logits, pt));
        if cfg.semantic_on {
            let so = model.heads.semantic_logits(g, pass.obj.hidden, Branch::Obj)?;
            let sp = model.heads.semantic_logits(g, pass.part.hidden, Branch::Part)?;
            sem.push(semantic_consistency_loss(g, so, sp)?);
        }
        if cfg.textual_on {
            let to = model.heads.textual_embedding(g, pass.obj.hidden, Branch::Obj)?;
            let tp = model.heads.textual_embedding(g, pass.part.hidden, Branch::Part)?;
            text.push(textual_consistency_loss(g, to, tp, cfg.text_distance)?);
        }
    }
    let caption = match (level_loss(g, &obj)?, level_loss(g, &part)?) {
        (Some(o), Some(p)) => g.add(o, p),
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return Ok(None),
    };
    let semantic = mean_of(g, &sem);
    let textual = mean_of(g, &text);
    let total = weighted_total(g, caption, semantic, textual, cfg.weights);
    Ok(Some(BatchTerms { caption, semantic, textual, total }))
}

/// Stage two: captioners and consistency heads on frozen segmenter outputs, one batch per
/// group of scenes. Resuming continues from the checkpoint's epoch; `stop_after_epoch`
/// ends early. The checkpoint is written to `out_dir/captioner.ckpt` either way.
pub fn train_captioner(
    cfg: &RunConfig,
    samples: &[Vec<CaptionSample>],
    tokenizer: &Tokenizer,
    resume: Option<&Path>,
    stop_after_epoch: Option<usize>,
) -> Result<(CaptionModel, Vec<LogRow>)> {
    if samples.iter().all(Vec::is_empty) {
        return Err(Error::EmptyInput("no captioned objects matched in the training scenes".into()));
    }
    let per_epoch = samples.len().div_ceil(cfg.batch_size_scenes);
    let total_steps = (cfg.cap_epochs * per_epoch) as u64;
    let (mut model, mut opt, start, mut log) = match resume {
        None => {
            let model = CaptionModel::new(cfg, tokenizer.clone())?;
            let opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay, total_steps);
            (model, opt, 0, Vec::new())
        }
        Some(path) => {
            let r = read_checkpoint(path)?;
            if r.model.config.hash() != cfg.hash() {
                return Err(Error::Config(format!("checkpoint {} was trained under a different configuration", path.display())));
            }
            let mut opt = AdamW::new(&r.model.store, cfg.lr, cfg.weight_decay, total_steps);
            r.archive.restore_optimizer("adamw", &mut opt)?;
            opt.step = r.opt_step;
            (r.model, opt, r.epoch, r.log)
        }
    };
    model.config = cfg.clone();
    opt.min_lr = cfg.min_lr;
    let end = stop_after_epoch.map_or(cfg.cap_epochs, |e| e.min(cfg.cap_epochs));
    for epoch in start..end {
        let mut pick = rng::stream(cfg.seed, "caption-variant", epoch as u64);
        for batch in epoch_batches(samples.len(), cfg.batch_size_scenes, cfg.seed, "caption-shuffle", epoch) {
            let mut items = Vec::new();
            for s in batch.iter().flat_map(|&i| &samples[i]) {
                let k = pick.gen_range(0..s.variants.len());
                let (o, p) = &s.variants[if cfg.sample_variants { k } else { 0 }];
                items.push((&s.inputs, o.as_slice(), p.as_slice()));
            }
            let (row, grads) = {
                let mut g = Graph::new(&model.store);
                let Some(terms) = batch_loss(&mut g, &model, &items)? else { continue };
                let v = |x: Option<Var>| x.map(|x| g.value(x).item());
                let row = LogRow {
                    step: opt.step + 1,
                    caption: g.value(terms.caption).item(),
                    semantic: v(terms.semantic),
                    textual: v(terms.textual),
                    total: g.value(terms.total).item(),
                };
                if !row.total.is_finite() {
                    let scenes: Vec<&str> = batch.iter().map(|&i| samples[i].first().map_or("", |s| s.scene_id.as_str())).collect();
                    return Err(abort(cfg, format!("caption loss {} at step {}", row.total, row.step), serde_json::json!({ "row": row, "scenes": scenes, "epoch": epoch })));
                }
                let grads = g.backward(terms.total);
                (row, grads)
            };
            if !grads.is_finite() {
                return Err(abort(cfg, format!("non-finite gradient at step {}", row.step), serde_json::json!({ "row": row, "epoch": epoch })));
            }
            opt.step(&mut model.store, &grads);
            log.push(row);
        }
        if (epoch + 1) % 10 == 0 {
            log::info!("caption epoch {}/{}: loss {:.4}", epoch + 1, cfg.cap_epochs, log.last().map_or(f64::NAN, |r| r.total));
        }
    }
    model.archive(&opt, end, &log).write(&cfg.out_dir.join("captioner.ckpt"))?;
    Ok((model, log))
}

/// Teacher-forced next-token accuracy on the reference caption variant of every sample.
pub fn teacher_forced_accuracy(model: &CaptionModel, samples: &[Vec<CaptionSample>]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples.iter().flatten() {
        let (o, p) = &s.variants[0];
        let mut g = Graph::inference(&model.store);
        let pass = model.captioner.teacher_forced_pair(&mut g, &s.inputs, o, p, model.config.routing())?;
        for (logits, target) in [(pass.obj.logits, o), (pass.part.logits, p)] {
            let m = g.value(logits);
            for (r, &t) in target.iter().enumerate() {
                let row = m.row(r);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                hit += (best == t as usize) as usize;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("no caption tokens to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Both stages on the training split, then evaluation on the validation split.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let corpus = cfg.load_corpus()?;
    let train = select_split(&corpus, Split::Train, cfg);
    let val = select_split(&corpus, Split::Val, cfg);
    let (seg, seg_log) = obtain_segmenter(cfg, &train)?;
    let tokenizer = build_tokenizer(&train)?;
    let samples = prepare_stage_two(&seg, &train, &tokenizer)?;
    let (model, log) = train_captioner(cfg, &samples, &tokenizer, None, None)?;
    write_csv(&cfg.out_dir.join("train_log.csv"), &log)?;
    let eval = super::evaluate(cfg, &seg, &model, &val)?;
    let report = RunReport {
        config_hash: cfg.hash(),
        segmenter_log: seg_log,
        caption_log: log,
        object: eval.object,
        part: eval.part,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(cfg.out_dir.join("config.toml"), e))?;
    report.write(&cfg.out_dir.join("report.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub scenes: usize,
    pub objects: usize,
    pub epochs: usize,
    pub accuracy: f64,
    pub wall_time_secs: f64,
}

/// Memorization check: every scene of the corpus is training data, each object is taught
/// only its reference caption variant, and accuracy is measured on those same captions.
pub fn overfit(cfg: &RunConfig) -> Result<OverfitReport> {
    let cfg = RunConfig { sample_variants: false, ..cfg.clone() };
    cfg.validate()?;
    let started = std::time::Instant::now();
    let corpus = cfg.load_corpus()?;
    let (seg, _) = obtain_segmenter(&cfg, &corpus)?;
    let tokenizer = build_tokenizer(&corpus)?;
    let samples = prepare_stage_two(&seg, &corpus, &tokenizer)?;
    let (model, _) = train_captioner(&cfg, &samples, &tokenizer, None, None)?;
    Ok(OverfitReport {
        scenes: corpus.len(),
        objects: samples.iter().map(Vec::len).sum(),
        epochs: cfg.cap_epochs,
        accuracy: teacher_forced_accuracy(&model, &samples)?,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
