//! Two-stage training, evaluation and the ablation runner.

mod ablate;
mod eval;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ablate::{ablate, summarize, write_ablation_csv, AblationRow, AblationSummary, AblationVariant, ABLATION_VARIANTS};
pub use eval::{ceiling_reports, evaluate, score_predictions, EvalOutput, PredictionRecord};
pub use train::{overfit, OverfitReport, 
    batch_loss, caption_samples, load_captioner, load_segmenter, obtain_segmenter, prepare_stage_two, run, teacher_forced_accuracy,
    train_captioner, train_segmenter, BatchTerms, CaptionModel, CaptionSample, LogRow, SegLogRow, CAPTIONER_CHECKPOINT_KIND,
};

use crate::captioning::{CaptionRouting, CaptionerConfig, ShareDirection};
use crate::consistency::{LossWeights, ProjectorConfig, TextDistance};
use crate::corpus::{generate_corpus, load_corpus, CorpusSpec, SyntheticScene};
use crate::error::{Error, Result};
use crate::evalmetrics::{MetricReport, IOU_GATE};
use crate::segmentation::SegmenterConfig;

/// Everything a run depends on; serialized with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// serialized corpus; generated from `corpus` when absent
    pub corpus_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub batch_size_scenes: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub seg_epochs: usize,
    pub cap_epochs: usize,
    pub semantic_on: bool,
    pub textual_on: bool,
    pub share: ShareDirection,
    pub context_features_on: bool,
    pub text_distance: TextDistance,
    pub sample_variants: bool,
    pub beams: usize,
    pub iou_threshold: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub weights: LossWeights,
    pub corpus: CorpusSpec,
    pub segmenter: SegmenterConfig,
    pub captioner: CaptionerConfig,
    pub projector: ProjectorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_dir: None,
            out_dir: PathBuf::from("runs/default"),
            batch_size_scenes: 6,
            lr: 0.005,
            min_lr: 0.0,
            weight_decay: 0.01,
            seg_epochs: 200,
            cap_epochs: 100,
            semantic_on: true,
            textual_on: true,
            share: ShareDirection::Part2obj,
            context_features_on: true,
            text_distance: TextDistance::Cosine,
            sample_variants: true,
            beams: 5,
            iou_threshold: IOU_GATE,
            train_fraction: 0.8,
            val_fraction: 0.1,
            weights: LossWeights::default(),
            corpus: CorpusSpec::default(),
            segmenter: SegmenterConfig::default(),
            captioner: CaptionerConfig::default(),
            projector: ProjectorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size_scenes == 0 {
            return Err(Error::Config("batch_size_scenes must be positive".into()));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates must satisfy 0 <= min_lr <= lr, lr > 0, weight_decay >= 0".into()));
        }
        if self.beams == 0 {
            return Err(Error::Config("beams must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.iou_threshold) {
            return Err(Error::Config("iou_threshold must lie in [0, 1)".into()));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v >= 0.0 && t + v <= 1.0) {
            return Err(Error::Config("split fractions must satisfy train > 0, val >= 0, train + val <= 1".into()));
        }
        if self.captioner.query_dim != self.segmenter.dim || self.captioner.feature_dim != self.segmenter.dim {
            return Err(Error::Config(format!(
                "captioner query/feature dims ({}, {}) must equal the segmenter dim {}",
                self.captioner.query_dim, self.captioner.feature_dim, self.segmenter.dim
            )));
        }
        self.segmenter.validate()?;
        self.corpus.validate()
    }

    pub fn routing(&self) -> CaptionRouting {
        CaptionRouting { share: self.share, context_features: self.context_features_on }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing { what: "config", path: path.to_path_buf() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Hash of every field except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        digest(&serde_json::to_string(&c).expect("run config serializes"))
    }

    /// Hash of the fields that determine the stage-one segmenter.
    pub fn segmenter_hash(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "corpus_dir": self.corpus_dir,
            "corpus": self.corpus,
            "segmenter": self.segmenter,
            "epochs": self.seg_epochs,
            "batch": self.batch_size_scenes,
            "lr": [self.lr, self.min_lr, self.weight_decay],
            "split": [self.train_fraction, self.val_fraction],
        });
        digest(&key.to_string())
    }

    pub fn load_corpus(&self) -> Result<Vec<SyntheticScene>> {
        match &self.corpus_dir {
            Some(dir) => load_corpus(dir),
            None => generate_corpus(&self.corpus),
        }
    }
}

fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Split membership from a hash of the scene id, so it never depends on corpus order.
pub fn split_of(scene_id: &str, train_fraction: f64, val_fraction: f64) -> Split {
    let d = Sha256::digest(scene_id.as_bytes());
    let u = u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes")) as f64 / (u64::MAX as f64 + 1.0);
    if u < train_fraction {
        Split::Train
    } else if u < train_fraction + val_fraction {
        Split::Val
    } else {
        Split::Test
    }
}

pub fn select_split(corpus: &[SyntheticScene], split: Split, cfg: &RunConfig) -> Vec<SyntheticScene> {
    corpus.iter().filter(|s| split_of(&s.id, cfg.train_fraction, cfg.val_fraction) == split).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub segmenter_log: Vec<SegLogRow>,
    pub caption_log: Vec<LogRow>,
    pub object: MetricReport,
    pub part: MetricReport,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_csv(path, rows)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
