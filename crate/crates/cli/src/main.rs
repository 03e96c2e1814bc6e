use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlcap::captioning::build_tokenizer;
use mlcap::corpus::{generate_corpus, load_corpus, serialize_corpus};
use mlcap::evalmetrics::MetricReport;
use mlcap::harness::{
    ablate, evaluate, load_captioner, load_segmenter, obtain_segmenter, overfit, prepare_stage_two, run, score_predictions, select_split,
    train_captioner, write_ablation_csv, AblationVariant, PredictionRecord, RunConfig, Split, ABLATION_VARIANTS,
};
use mlcap::segmentation::SegmenterConfig;
use mlcap::{Error, Result};

#[derive(Parser)]
#[command(name = "mlcap", version, about = "Joint object- and part-level captioning of synthetic 3D scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and serialize a synthetic corpus.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        num_scenes: Option<usize>,
    },
    /// Train (or reuse) the stage-one segmenter in the run directory.
    TrainSeg {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the captioners on the frozen segmenter.
    TrainCap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Evaluate a trained run on one split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Both stages followed by validation.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Memorization check on a small corpus: teacher-forced accuracy on the training captions.
    Overfit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the comparison table over seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
    /// Score stored predictions against a corpus.
    Score {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = mlcap::evalmetrics::IOU_GATE)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_reports(dir: &Path, object: &MetricReport, part: &MetricReport) -> Result<()> {
    let json = serde_json::to_string_pretty(&serde_json::json!({ "object": object, "part": part })).expect("reports serialize");
    write(&dir.join("metrics.json"), json)?;
    let mut csv = String::from("level,cider,rouge,meteor,num_gt,num_gated\n");
    for r in [object, part] {
        csv += &format!("{},{},{},{},{},{}\n", r.level, r.cider, r.rouge, r.meteor, r.num_gt, r.num_gated);
    }
    write(&dir.join("metrics.csv"), csv)
}

fn print_table(object: &MetricReport, part: &MetricReport) {
    println!("{:<8}{:>8}{:>8}{:>8}", "level", "CIDEr", "ROUGE", "METEOR");
    for r in [object, part] {
        println!("{:<8}{:>8.2}{:>8.2}{:>8.2}", r.level.to_string(), r.cider, r.rouge, r.meteor);
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, config, num_scenes } => {
            let mut spec = match config {
                Some(p) => RunConfig::load(&p)?.corpus,
                None => Default::default(),
            };
            if let Some(n) = num_scenes {
                spec.num_scenes = n;
            }
            let corpus = generate_corpus(&spec)?;
            serialize_corpus(&corpus, &out)?;
            println!("wrote {} scenes to {}", corpus.len(), out.display());
        }
        Command::TrainSeg { config } => {
            let cfg = RunConfig::load(&config)?;
            let train = select_split(&cfg.load_corpus()?, Split::Train, &cfg);
            let (_, log) = obtain_segmenter(&cfg, &train)?;
            if let (Some(a), Some(b)) = (log.first(), log.last()) {
                println!("segmenter loss {:.4} -> {:.4} over {} steps", a.total, b.total, log.len());
            }
        }
        Command::TrainCap { config, resume, stop_after_epoch } => {
            let cfg = RunConfig::load(&config)?;
            let (seg, _) = load_segmenter(&cfg)?;
            let train = select_split(&cfg.load_corpus()?, Split::Train, &cfg);
            let tokenizer = build_tokenizer(&train)?;
            let samples = prepare_stage_two(&seg, &train, &tokenizer)?;
            let (_, log) = train_captioner(&cfg, &samples, &tokenizer, resume.as_deref(), stop_after_epoch)?;
            mlcap::harness::write_log_csv(&cfg.out_dir.join("train_log.csv"), &log)?;
            if let (Some(a), Some(b)) = (log.first(), log.last()) {
                println!("caption loss {:.4} -> {:.4} over {} steps", a.total, b.total, log.len());
            }
        }
        Command::Eval { config, split, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let (seg, _) = load_segmenter(&cfg)?;
            let model = load_captioner(&checkpoint.unwrap_or_else(|| cfg.out_dir.join("captioner.ckpt")))?;
            let scenes = select_split(&cfg.load_corpus()?, split, &cfg);
            let out = evaluate(&cfg, &seg, &model, &scenes)?;
            write_reports(&cfg.out_dir, &out.object, &out.part)?;
            write(&cfg.out_dir.join("predictions.json"), serde_json::to_string_pretty(&out.predictions).expect("records serialize"))?;
            print_table(&out.object, &out.part);
        }
        Command::Run { config } => {
            let report = run(&RunConfig::load(&config)?)?;
            print_table(&report.object, &report.part);
            println!("config {} in {:.1}s", report.config_hash, report.wall_time_secs);
        }
        Command::Overfit { config } => {
            let report = overfit(&RunConfig::load(&config)?)?;
            println!(
                "{} scenes, {} objects, {} epochs: teacher-forced accuracy {:.4} in {:.1}s",
                report.scenes, report.objects, report.epochs, report.accuracy, report.wall_time_secs
            );
        }
        Command::Ablate { config, seeds, variants } => {
            let cfg = RunConfig::load(&config)?;
            let chosen: Vec<AblationVariant> = if variants.is_empty() {
                ABLATION_VARIANTS.to_vec()
            } else {
                variants
                    .iter()
                    .map(|n| AblationVariant::by_name(n).ok_or_else(|| Error::Config(format!("unknown ablation variant {n:?}"))))
                    .collect::<Result<_>>()?
            };
            let rows = ablate(&cfg, &seeds, &chosen)?;
            write_ablation_csv(&cfg.out_dir, &rows)?;
            println!("{:<22}{:>6}{:>12}{:>12}", "config", "seed", "obj CIDEr", "part CIDEr");
            for r in &rows {
                println!("{:<22}{:>6}{:>12.2}{:>12.2}", r.config, r.seed, r.object_cider, r.part_cider);
            }
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()),
        Command::Score { corpus, predictions, threshold, out } => {
            let scenes = load_corpus(&corpus)?;
            let text = std::fs::read_to_string(&predictions).map_err(|e| Error::io(&predictions, e))?;
            let records: Vec<PredictionRecord> = serde_json::from_str(&text).map_err(|e| Error::json(&predictions, e))?;
            let (o, p) = score_predictions(&scenes, &records, &SegmenterConfig::default(), threshold)?;
            write_reports(&out, &o, &p)?;
            print_table(&o, &p);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
