//! Command-line experiment runner.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_image, AugmentParams};
use crate::bank::CropBank;
use crate::config::{load_config, ExperimentConfig};
use crate::dataset::{load_dataset, manifest_entry, write_manifest, DatasetImage};
use crate::error::{Error, Result};
use crate::loss::weight_table;
use crate::relation::ClassRelationMatrix;
use crate::sim::{
    append_rows, default_confusion, run_convergence_experiment, run_train_sim, ExperimentRow,
    OracleDetector, TrainSimConfig,
};
use crate::teacher::{save_checkpoint, CheckpointMeta, TrainingSchedule};
use crate::types::Domain;

pub const RESULTS_CSV: &str = "results.csv";
pub const LOG_ENV: &str = "CAT_LOG_LEVEL";

#[derive(Debug, Parser)]
#[command(name = "classaware", version, about = "Class-aware teacher experiment runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: CommonOpts,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stream oracle detections into a relation matrix and log its error.
    IcrmConverge,
    /// Apply class-relation augmentation to a dataset.
    AugmentPreview,
    /// Burn-in plus mutual training on the synthetic classifier.
    TrainSim,
    /// Print the inter-class weight table for a saved relation matrix.
    WeightsDump,
}

#[derive(Debug, Args)]
pub struct CommonOpts {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub source_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub target_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Skip invalid boxes instead of failing.
    #[arg(long, global = true)]
    pub lenient: bool,
    /// Relation matrix JSON (weights-dump, augment-preview).
    #[arg(long, global = true)]
    pub icrm: Option<PathBuf>,
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.opts.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.opts.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::IcrmConverge => icrm_converge(&cfg, &cli.opts),
        Command::AugmentPreview => augment_preview(&cfg, &cli.opts),
        Command::TrainSim => train_sim(&cfg, &cli.opts),
        Command::WeightsDump => weights_dump(&cfg, &cli.opts),
    }
}

fn out_dir(opts: &CommonOpts) -> Result<PathBuf> {
    let dir = opts
        .out
        .clone()
        .ok_or_else(|| Error::param("out", "--out is required"))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn icrm_converge(cfg: &ExperimentConfig, opts: &CommonOpts) -> Result<()> {
    let out = out_dir(opts)?;
    let det = OracleDetector::new(default_confusion(cfg.num_classes), vec![1.0; cfg.num_classes])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let run = run_convergence_experiment(
        &det,
        cfg.convergence_batches,
        cfg.batch_size,
        cfg.icrm_momentum,
        &mut rng,
    )?;
    let rows: Vec<ExperimentRow> = run
        .history
        .iter()
        .map(|r| ExperimentRow {
            seed: cfg.seed,
            stage: "icrm-converge".into(),
            iteration: r.batch as u64 + 1,
            map: r.map,
            sigma: r.sigma,
            icrm_error: r.icrm_error,
        })
        .collect();
    append_rows(&out.join(RESULTS_CSV), &rows)?;
    run.matrix.save_json(&out.join("icrm.json"))?;
    println!("icrm-converge seed={} batches={} error={}", cfg.seed, rows.len(), run.error);
    Ok(())
}

pub fn train_sim_config(cfg: &ExperimentConfig) -> TrainSimConfig {
    TrainSimConfig {
        num_classes: cfg.num_classes,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        schedule: TrainingSchedule {
            burn_in_steps: cfg.burn_in_steps,
            total_steps: cfg.total_steps,
        },
        alpha: cfg.alpha,
        tau: cfg.tau,
        icrm_momentum: cfg.icrm_momentum,
        lambda_l: cfg.lambda_l,
        lambda_u: cfg.lambda_u,
        lambda_d: cfg.lambda_d,
        use_icl: cfg.use_icl,
        eval_every: cfg.eval_every,
        ..Default::default()
    }
}

fn train_sim(cfg: &ExperimentConfig, opts: &CommonOpts) -> Result<()> {
    let out = out_dir(opts)?;
    let outcome = run_train_sim(&train_sim_config(cfg), cfg.seed)?;
    let rows: Vec<ExperimentRow> = outcome
        .records
        .iter()
        .map(|r| ExperimentRow {
            seed: cfg.seed,
            stage: r.phase.as_str().into(),
            iteration: r.iteration,
            map: r.map,
            sigma: r.sigma,
            icrm_error: r.icrm_error,
        })
        .collect();
    append_rows(&out.join(RESULTS_CSV), &rows)?;
    outcome.source_icrm.save_json(&out.join("icrm_source.json"))?;
    outcome.target_icrm.save_json(&out.join("icrm_target.json"))?;
    let meta = CheckpointMeta {
        iteration: cfg.total_steps,
        alpha: cfg.alpha,
        tau: cfg.tau,
    };
    save_checkpoint(&out, "student", &outcome.student, &meta)?;
    if let Some(teacher) = &outcome.teacher {
        save_checkpoint(&out, "teacher", teacher, &meta)?;
    }
    println!(
        "train-sim seed={} map={} sigma={} minority_accuracy={}",
        cfg.seed, outcome.report.map, outcome.report.sigma, outcome.minority_accuracy
    );
    Ok(())
}

fn augment_preview(cfg: &ExperimentConfig, opts: &CommonOpts) -> Result<()> {
    let out = out_dir(opts)?;
    let strict = !opts.lenient;
    let load = |dir: &Option<PathBuf>| -> Result<Vec<DatasetImage>> {
        match dir {
            Some(d) => load_dataset(d, cfg.num_classes, strict),
            None => Ok(Vec::new()),
        }
    };
    if opts.source_dir.is_none() && opts.target_dir.is_none() {
        return Err(Error::param("source_dir", "need --source-dir and/or --target-dir"));
    }
    let source = load(&opts.source_dir)?;
    let target = load(&opts.target_dir)?;
    let icrm = match &opts.icrm {
        Some(path) => ClassRelationMatrix::load_json(path)?,
        None => ClassRelationMatrix::new(cfg.num_classes)?,
    };
    if icrm.num_classes() != cfg.num_classes {
        return Err(Error::Shape(format!(
            "relation matrix has {} classes, config has {}",
            icrm.num_classes(),
            cfg.num_classes
        )));
    }

    let mut source_bank = CropBank::new(Domain::Source, cfg.num_classes, cfg.bank_capacity)?;
    let mut target_bank = CropBank::new(Domain::Target, cfg.num_classes, cfg.bank_capacity)?;
    for d in &source {
        source_bank.ingest(&d.image, 0.0)?;
    }
    for d in &target {
        target_bank.ingest(&d.image, cfg.tau)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let beta_params = (cfg.beta_params[0], cfg.beta_params[1]);
    let sets = [
        (&source, &opts.source_dir, cfg.source_aug_ratio),
        (&target, &opts.target_dir, cfg.target_aug_ratio),
    ];
    let mut total_plans = 0;
    for (images, in_dir, ratio) in sets {
        let Some(in_dir) = in_dir else { continue };
        let params = AugmentParams { ratio, beta_params };
        let mut entries = Vec::with_capacity(images.len());
        let mut domain_dir: Option<PathBuf> = None;
        for d in images.iter() {
            let dir = out.join(d.image.domain.to_string());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (augmented, plans) =
                augment_image(&d.image, &icrm, &source_bank, &target_bank, &params, &mut rng)?;
            total_plans += plans.len();
            write_image(&in_dir.join(&d.entry.file), &dir.join(&d.entry.file), &augmented.pixels, plans.is_empty())?;
            entries.push(manifest_entry(&augmented, &d.entry.file));
            domain_dir = Some(dir);
        }
        if let Some(dir) = domain_dir {
            write_manifest(&dir, &entries)?;
        }
    }
    println!(
        "augment-preview seed={} images={} augmented_instances={total_plans}",
        cfg.seed,
        source.len() + target.len()
    );
    Ok(())
}

/// Unaugmented images are copied byte-for-byte.
fn write_image(src: &Path, dst: &Path, pixels: &image::RgbImage, unchanged: bool) -> Result<()> {
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if unchanged {
        fs::copy(src, dst).map_err(|e| Error::io(dst, e))?;
        Ok(())
    } else {
        pixels.save(dst).map_err(|e| Error::image(dst, e))
    }
}

fn weights_dump(cfg: &ExperimentConfig, opts: &CommonOpts) -> Result<()> {
    let path = opts
        .icrm
        .as_ref()
        .ok_or_else(|| Error::param("icrm", "--icrm is required"))?;
    let icrm = ClassRelationMatrix::load_json(path)?;
    let table = weight_table(&icrm, cfg.lambda_l)?;
    let mut text = String::from("gt,pred,raw,normalized,weight\n");
    for cell in &table {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            cell.gt_class, cell.pred_class, cell.raw, cell.normalized, cell.weight
        ));
    }
    if let Some(out) = &opts.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let file = out.join("weights.csv");
        fs::write(&file, &text).map_err(|e| Error::io(&file, e))?;
    }
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}
