//! Commands behind the command-line interface: dataset generation,
//! training, evaluation, throughput measurement and inspection.

mod bench;
mod config;
mod session;
mod train;

pub use bench::{run_bench, BenchReport, StageStats, BENCH_STAGES};
pub use config::{
    apply_override, AugmentationSetting, BenchConfig, DatasetConfig, EvalConfig, Paths, Precision, RunConfig,
    Thresholds, TrainConfig,
};
pub use session::{stream_rng, Frame, Session};
pub use train::{
    checkpoint_paths, read_log, save_checkpoint, CheckpointMeta, LogWriter, StepLog, TrainSettings, Trainer,
    LATEST_CHECKPOINT, TRAIN_LOG,
};

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, save_overlay, write_detections, FrameDetections, MetricsReport, OverlayStyle};
use crate::synth::{
    derive_labels, generate_dataset, generate_scene, load_sample, render_rig, sample_rng, DatasetManifest, Palette,
    RIG_FILE,
};
use crate::tensor::{Checkpoint, Scalar};
use crate::types::BevGridSpec;

pub const METRICS_FILE: &str = "metrics.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const BENCH_FILE: &str = "bench.json";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn configured_rig(cfg: &RunConfig) -> Result<CameraRig> {
    match &cfg.paths.rig {
        Some(p) => CameraRig::load(p),
        None => Ok(CameraRig::synthetic_default()),
    }
}

fn same_grid(a: &BevGridSpec, b: &BevGridSpec) -> bool {
    a.rows == b.rows && a.cols == b.cols && a.extent_x == b.extent_x && a.extent_y == b.extent_y
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<DatasetManifest> {
    let rig = configured_rig(cfg)?;
    let splits = [("train", cfg.dataset.train), ("val", cfg.dataset.val)];
    generate_dataset(&cfg.paths.dataset, &cfg.dataset.scene, &rig, &cfg.model.bev, &splits, cfg.seed)
}

/// Loads every frame of a split into memory, after checking that the
/// dataset is complete and labeled on the model's grid.
pub fn load_frames(cfg: &RunConfig, split: &str) -> Result<(CameraRig, Vec<Frame>)> {
    let root = &cfg.paths.dataset;
    let manifest = DatasetManifest::load(root)?;
    if !same_grid(&manifest.grid, &cfg.model.bev) {
        return Err(Error::Config(format!(
            "dataset grid {:?} differs from the model grid {:?}",
            manifest.grid, cfg.model.bev
        )));
    }
    let rig = CameraRig::load(root.join(RIG_FILE))?;
    let frames = manifest
        .ids(split)
        .par_iter()
        .map(|&id| {
            let s = load_sample(root, &rig, id)?;
            Ok(Frame {
                id,
                images: s.images,
                labels: s.record.labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rig, frames))
}

pub fn train_settings(cfg: &RunConfig) -> Result<TrainSettings> {
    Ok(TrainSettings {
        seed: cfg.seed,
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        schedule: cfg.train.schedule,
        adamw: cfg.train.adamw,
        weights: cfg.loss,
        focal: cfg.focal,
        augmentation: cfg.augmentation.resolve()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub precision: String,
    pub resumed_from: Option<u64>,
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg),
        Precision::F64 => train_typed::<f64>(cfg),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig) -> Result<TrainSummary> {
    let (rig, frames) = load_frames(cfg, &cfg.train.split)?;
    let session = Session::<T>::new(&cfg.model, rig, cfg.seed)?;
    let mut trainer = Trainer::new(session, train_settings(cfg)?, frames)?;
    let hash = cfg.hash();
    let dir = &cfg.paths.checkpoints;
    let latest = dir.join(LATEST_CHECKPOINT);
    let resumed_from = if latest.exists() {
        let ckpt = Checkpoint::load(&latest)?;
        trainer.resume(&ckpt)?;
        log::info!("resuming from step {}", trainer.step);
        Some(trainer.step)
    } else {
        save_checkpoint(dir, &trainer.checkpoint(&hash), 0)?;
        None
    };
    let log_path = cfg.paths.reports.join(TRAIN_LOG);
    let mut log = LogWriter::open(&log_path, trainer.step)?;
    let mut first = None;
    let mut last = None;
    while trainer.step < cfg.train.steps {
        let entry = trainer.train_step()?;
        log.write(&entry)?;
        first.get_or_insert(entry.loss);
        last = Some(entry.loss);
        if entry.step % 50 == 0 {
            log::info!("step {} lr {:.3e} loss {:.5}", entry.step, entry.lr, entry.loss);
        }
        if trainer.step % cfg.train.checkpoint_every == 0 || trainer.step == cfg.train.steps {
            save_checkpoint(dir, &trainer.checkpoint(&hash), trainer.step)?;
        }
    }
    let summary = TrainSummary {
        config_hash: hash,
        precision: T::DTYPE.into(),
        resumed_from,
        steps: trainer.step,
        first_loss: first,
        final_loss: last,
        checkpoint: latest,
    };
    write_json(&cfg.paths.reports.join(TRAIN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub checkpoint_step: Option<u64>,
    pub split: String,
    pub metrics: MetricsReport,
    pub thresholds: Thresholds,
    /// Unmet thresholds, empty when all pass.
    pub failures: Vec<String>,
}

impl EvalOutcome {
    /// Turns unmet thresholds into an acceptance error.
    pub fn check(&self) -> Result<()> {
        if self.failures.is_empty() {
            Ok(())
        } else {
            Err(Error::Acceptance(self.failures.join("; ")))
        }
    }
}

pub fn threshold_failures(m: &MetricsReport, t: &Thresholds) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(min) = t.min_f1 {
        if !(m.overall.f1 >= min) {
            out.push(format!("F1 {:.4} below {min}", m.overall.f1));
        }
    }
    if let Some(max) = t.max_distance_cm {
        match m.distance_error_cm {
            Some(d) if d <= max => {}
            Some(d) => out.push(format!("distance error {d:.2} cm above {max}")),
            None => out.push("distance error undefined (no matches)".into()),
        }
    }
    if let Some(min) = t.min_visibility_accuracy {
        match m.visibility_accuracy {
            Some(a) if a >= min => {}
            Some(a) => out.push(format!("visibility accuracy {a:.4} below {min}")),
            None => out.push("visibility accuracy undefined (no matched slots)".into()),
        }
    }
    out
}

fn resolve_checkpoint(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.checkpoints.join(LATEST_CHECKPOINT))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalOutcome> {
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, checkpoint),
        Precision::F64 => eval_typed::<f64>(cfg, checkpoint),
    }
}

fn eval_typed<T: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalOutcome> {
    let path = resolve_checkpoint(cfg, checkpoint);
    let (rig, frames) = load_frames(cfg, &cfg.eval.split)?;
    let mut session = Session::<T>::new(&cfg.model, rig, cfg.seed)?;
    let ckpt = session.load_params_from(&path)?;
    let step = CheckpointMeta::from_checkpoint(&ckpt).ok().map(|m| m.step);
    let preds = frames
        .par_iter()
        .map(|f| session.predict(f, &cfg.eval.decode))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = preds
        .iter()
        .zip(&frames)
        .map(|(p, f)| (p.clone(), f.labels.clone()))
        .collect();
    let metrics = evaluate(&pairs, &cfg.eval.matching);
    let reports = &cfg.paths.reports;
    fs::create_dir_all(reports).map_err(|e| Error::io(reports, e))?;
    let dump: Vec<FrameDetections> = preds
        .iter()
        .zip(&frames)
        .map(|(p, f)| FrameDetections {
            frame_id: f.id,
            detections: p.clone(),
        })
        .collect();
    write_detections(reports.join(DETECTIONS_FILE), &dump)?;
    for (p, f) in preds.iter().zip(&frames).take(cfg.eval.overlays) {
        let out = reports.join(format!("overlay_{:06}.png", f.id));
        save_overlay(out, &cfg.model.bev, &f.labels, p, &OverlayStyle::default())?;
    }
    let outcome = EvalOutcome {
        config_hash: cfg.hash(),
        checkpoint: path,
        checkpoint_step: step,
        split: cfg.eval.split.clone(),
        failures: threshold_failures(&metrics, &cfg.eval.thresholds),
        metrics,
        thresholds: cfg.eval.thresholds.clone(),
    };
    write_json(&reports.join(METRICS_FILE), &outcome)?;
    Ok(outcome)
}

/// Frame for the benchmark: the first dataset frame when a dataset exists,
/// otherwise one freshly rendered scene.
fn bench_frame(cfg: &RunConfig) -> Result<(CameraRig, Frame)> {
    if DatasetManifest::load(&cfg.paths.dataset).is_ok() {
        let (rig, mut frames) = load_frames(cfg, &cfg.eval.split)?;
        if !frames.is_empty() {
            return Ok((rig, frames.swap_remove(0)));
        }
    }
    let rig = configured_rig(cfg)?;
    let world = generate_scene(&cfg.dataset.scene, &mut sample_rng(cfg.seed, 0))?;
    let labels = derive_labels(&world, &rig, &cfg.model.bev);
    let images = render_rig(&world.in_vehicle_frame(), &rig, &Palette::default());
    Ok((rig, Frame { id: 0, images, labels }))
}

pub fn cmd_bench(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<BenchReport> {
    match cfg.precision {
        Precision::F32 => bench_typed::<f32>(cfg, checkpoint),
        Precision::F64 => bench_typed::<f64>(cfg, checkpoint),
    }
}

fn bench_typed<T: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<BenchReport> {
    let (rig, frame) = bench_frame(cfg)?;
    let mut session = Session::<T>::new(&cfg.model, rig, cfg.seed)?;
    let path = resolve_checkpoint(cfg, checkpoint);
    if checkpoint.is_some() || path.exists() {
        session.load_params_from(&path)?;
    }
    let mut report = run_bench(&session, &frame, &cfg.eval.decode, cfg.bench.warmup, cfg.bench.iterations)?;
    report.config_hash = cfg.hash();
    write_json(&cfg.paths.reports.join(BENCH_FILE), &report)?;
    Ok(report)
}

/// What `inspect` reports on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InspectTarget {
    Config,
    Schema,
    Dataset,
    Checkpoint,
    Model,
}

impl std::str::FromStr for InspectTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "config" => InspectTarget::Config,
            "schema" => InspectTarget::Schema,
            "dataset" => InspectTarget::Dataset,
            "checkpoint" => InspectTarget::Checkpoint,
            "model" => InspectTarget::Model,
            other => {
                return Err(Error::Config(format!(
                    "unknown inspect target '{other}' (expected config, schema, dataset, checkpoint or model)"
                )))
            }
        })
    }
}

pub fn cmd_inspect(cfg: &RunConfig, target: InspectTarget, checkpoint: Option<&Path>) -> Result<serde_json::Value> {
    use serde_json::json;
    Ok(match target {
        InspectTarget::Config => json!({ "config_hash": cfg.hash(), "config": cfg }),
        InspectTarget::Schema => RunConfig::schema(),
        InspectTarget::Dataset => {
            let m = DatasetManifest::load(&cfg.paths.dataset)?;
            json!({
                "root": cfg.paths.dataset,
                "hash": m.hash(),
                "seed": m.seed,
                "counts": m.counts,
                "parking": m.samples.iter().map(|s| s.parking).sum::<usize>(),
                "vehicles": m.samples.iter().map(|s| s.vehicles).sum::<usize>(),
            })
        }
        InspectTarget::Checkpoint => {
            let path = resolve_checkpoint(cfg, checkpoint);
            let c = Checkpoint::load(&path)?;
            let tensors: Vec<_> = c.names().map(|n| json!({ "name": n, "shape": c.shape(n) })).collect();
            json!({ "path": path, "meta": c.meta, "tensors": tensors })
        }
        InspectTarget::Model => {
            let session = Session::<f32>::new(&cfg.model, configured_rig(cfg)?, cfg.seed)?;
            let params: Vec<_> = session
                .store
                .iter()
                .map(|(_, p)| json!({ "name": p.name, "shape": p.value.shape() }))
                .collect();
            json!({ "weights": session.store.num_weights(), "parameters": params })
        }
    })
}
