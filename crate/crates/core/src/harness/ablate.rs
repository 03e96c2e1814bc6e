use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{obtain_segmenter, prepare_stage_two, train_captioner};
use super::{evaluate, select_split, write_csv, write_json, RunConfig, Split};
use crate::captioning::{build_tokenizer, ShareDirection};
use crate::error::{Error, Result};
use crate::evalmetrics::MetricReport;

/// One row of the comparison: which consistency terms, sharing direction and context are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub semantic: bool,
    pub textual: bool,
    pub share: ShareDirection,
    pub context_features: bool,
}

const fn variant(name: &'static str, semantic: bool, textual: bool, share: ShareDirection, context_features: bool) -> AblationVariant {
    AblationVariant { name, semantic, textual, share, context_features }
}

pub const ABLATION_VARIANTS: [AblationVariant; 7] = [
    variant("separate_models", false, false, ShareDirection::None, true),
    variant("semantic_consistency", true, false, ShareDirection::None, true),
    variant("textual_consistency", false, true, ShareDirection::None, true),
    variant("part2obj_sharing", false, false, ShareDirection::Part2obj, true),
    variant("full", true, true, ShareDirection::Part2obj, true),
    variant("obj2part_sharing", true, true, ShareDirection::Obj2part, true),
    variant("no_context_features", true, true, ShareDirection::Part2obj, false),
];

impl AblationVariant {
    pub fn by_name(name: &str) -> Option<Self> {
        ABLATION_VARIANTS.iter().copied().find(|v| v.name == name)
    }

    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            semantic_on: self.semantic,
            textual_on: self.textual,
            share: self.share,
            context_features_on: self.context_features,
            out_dir: base.out_dir.join("ablation").join(self.name).join(format!("seed{seed}")),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub object_cider: f64,
    pub part_cider: f64,
    pub object_rouge: f64,
    pub part_rouge: f64,
    pub object_meteor: f64,
    pub part_meteor: f64,
    pub wall_time_secs: f64,
}

impl AblationRow {
    fn new(config: &str, seed: u64, rec: &RunRecord) -> Self {
        let (object, part) = (&rec.object, &rec.part);
        Self {
            config: config.to_string(),
            seed,
            object_cider: object.cider,
            part_cider: part.cider,
            object_rouge: object.rouge,
            part_rouge: part.rouge,
            object_meteor: object.meteor,
            part_meteor: part.meteor,
            wall_time_secs: rec.wall_time_secs,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    config_hash: String,
    segmenter_hash: String,
    object: MetricReport,
    part: MetricReport,
    wall_time_secs: f64,
}

fn cached(path: &Path, config_hash: &str, segmenter_hash: &str) -> Option<RunRecord> {
    let rec: RunRecord = serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()?;
    (rec.config_hash == config_hash && rec.segmenter_hash == segmenter_hash).then_some(rec)
}

/// Trains one stage-one segmenter (under `base.seed`) and reuses it, frozen, for every
/// variant and caption seed; each run is evaluated on the test split. Finished runs are
/// recorded under `out_dir/ablation` and picked up again by later calls.
pub fn ablate(base: &RunConfig, seeds: &[u64], variants: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    base.validate()?;
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let corpus = base.load_corpus()?;
    let train = select_split(&corpus, Split::Train, base);
    let test = select_split(&corpus, Split::Test, base);
    let seg_hash = base.segmenter_hash();
    let mut stage_two = None;
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let cfg = v.apply(base, seed);
            let record_path = cfg.out_dir.join("result.json");
            let hash = cfg.hash();
            let rec = match cached(&record_path, &hash, &seg_hash) {
                Some(rec) => rec,
                None => {
                    if stage_two.is_none() {
                        let (seg, _) = obtain_segmenter(base, &train)?;
                        let tokenizer = build_tokenizer(&train)?;
                        let samples = prepare_stage_two(&seg, &train, &tokenizer)?;
                        stage_two = Some((seg, tokenizer, samples));
                    }
                    let (seg, tokenizer, samples) = stage_two.as_ref().expect("stage two inputs prepared above");
                    let started = std::time::Instant::now();
                    let (model, log) = train_captioner(&cfg, samples, tokenizer, None, None)?;
                    write_csv(&cfg.out_dir.join("train_log.csv"), &log)?;
                    let eval = evaluate(&cfg, seg, &model, &test)?;
                    log::info!("{} seed {seed}: part CIDEr {:.2} in {:.0?}", v.name, eval.part.cider, started.elapsed());
                    let rec = RunRecord { config_hash: hash, segmenter_hash: seg_hash.clone(), object: eval.object, part: eval.part, wall_time_secs: started.elapsed().as_secs_f64() };
                    write_json(&record_path, &rec)?;
                    rec
                }
            };
            rows.push(AblationRow::new(v.name, seed, &rec));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config: String,
    pub seeds: usize,
    pub object_cider: f64,
    pub part_cider: f64,
}

/// Per-configuration means over seeds, in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut out: Vec<AblationSummary> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|s| s.config == r.config) {
            Some(s) => {
                s.seeds += 1;
                s.object_cider += r.object_cider;
                s.part_cider += r.part_cider;
            }
            None => out.push(AblationSummary { config: r.config.clone(), seeds: 1, object_cider: r.object_cider, part_cider: r.part_cider }),
        }
    }
    for s in &mut out {
        s.object_cider /= s.seeds as f64;
        s.part_cider /= s.seeds as f64;
    }
    out
}

/// `runs.csv` with one row per (configuration, seed) and `summary.csv` with one per configuration.
pub fn write_ablation_csv(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    write_csv(&dir.join("runs.csv"), rows)?;
    write_csv(&dir.join("summary.csv"), &summarize(rows))
}
