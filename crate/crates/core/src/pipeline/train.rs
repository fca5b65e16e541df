use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::session::{stream_rng, Frame, Session};
use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::losses::{FocalConfig, LossReport, LossWeights};
use crate::network::ModelConfig;
use crate::tensor::{AdamW, AdamWConfig, Checkpoint, OneCycle, ParamId, Scalar, TensorError};

const PERMUTATION_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Everything that shapes the optimization trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: OneCycle,
    pub adamw: AdamWConfig,
    pub weights: LossWeights,
    pub focal: FocalConfig,
    pub augmentation: AugmentationConfig,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub terms: serde_json::Value,
    pub frames: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub steps: u64,
    pub precision: String,
    pub config_hash: String,
    pub model: ModelConfig,
}

impl CheckpointMeta {
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        serde_json::from_value(c.meta.clone()).map_err(|e| Error::json("checkpoint metadata", e))
    }
}

pub struct Trainer<T: Scalar> {
    pub session: Session<T>,
    pub opt: AdamW,
    pub settings: TrainSettings,
    pub frames: Vec<Frame>,
    /// Steps completed so far.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(session: Session<T>, settings: TrainSettings, frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() && settings.steps > 0 {
            return Err(Error::Dataset("no training frames".into()));
        }
        let opt = AdamW::new(settings.adamw, &session.store);
        Ok(Trainer {
            session,
            opt,
            settings,
            frames,
            step: 0,
        })
    }

    /// Frame indices of the batch at `step`: consecutive slices of per-epoch
    /// permutations, so the order depends only on the seed.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.frames.len();
        let b = self.settings.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for i in 0..b {
            let pos = step * b as u64 + i as u64;
            let epoch = pos / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut stream_rng(self.settings.seed, PERMUTATION_STREAM, epoch));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().unwrap().1[(pos % n as u64) as usize]);
        }
        out
    }

    /// Runs one optimizer step on the next batch. Per-frame gradients are
    /// reduced in batch order, so the result does not depend on the number
    /// of worker threads.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let s = &self.settings;
        let idx = self.batch_indices(step);
        let cams = self.session.rig.cameras.len();
        let channels = self.session.model.config.bev.channels;
        let results: Vec<(LossReport, Vec<Option<Vec<f64>>>)> = idx
            .par_iter()
            .enumerate()
            .map(|(i, &f)| {
                let mut rng = stream_rng(s.seed, AUGMENT_STREAM, step * s.batch_size as u64 + i as u64);
                let aug = s.augmentation.sample(&mut rng, cams, channels);
                self.session.sample_gradients(&self.frames[f], &aug, &s.weights, s.focal)
            })
            .collect::<Result<_>>()?;
        let inv = 1.0 / idx.len() as f64;
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.session.store.len()];
        let mut values = [0.0; 7];
        for (report, grads) in &results {
            for (k, t) in report.terms.iter().enumerate() {
                values[k] += t.value * inv;
            }
            for (a, g) in acc.iter_mut().zip(grads) {
                let Some(g) = g else { continue };
                let a = a.get_or_insert_with(|| vec![0.0; g.len()]);
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y * inv;
                }
            }
        }
        let report = LossReport::from_values(values, &s.weights)?;
        let grads: Vec<(ParamId, Vec<f64>)> = self
            .session
            .store
            .ids()
            .zip(acc)
            .filter_map(|(id, g)| g.map(|g| (id, g)))
            .collect();
        let lr = s.schedule.lr(step, s.steps);
        self.opt.step(&mut self.session.store, &grads, lr).map_err(|e| match e {
            TensorError::NonFiniteGradient(p) => Error::Numeric(format!("non-finite gradient for '{p}' at step {step}")),
            other => Error::Tensor(other),
        })?;
        self.step += 1;
        Ok(StepLog {
            step,
            lr,
            loss: report.total,
            terms: report.terms_json(),
            frames: idx.iter().map(|&i| self.frames[i].id).collect(),
        })
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        let meta = CheckpointMeta {
            step: self.step,
            steps: self.settings.steps,
            precision: T::DTYPE.to_string(),
            config_hash: config_hash.to_string(),
            model: self.session.model.config.clone(),
        };
        self.session
            .checkpoint(Some(&self.opt), serde_json::to_value(meta).expect("meta serializes"))
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let meta = CheckpointMeta::from_checkpoint(ckpt)?;
        if meta.model != self.session.model.config {
            return Err(Error::Checkpoint("checkpoint was trained with a different model configuration".into()));
        }
        if meta.precision != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint precision {} differs from configured {}",
                meta.precision,
                T::DTYPE
            )));
        }
        if meta.step > self.settings.steps {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at step {} beyond the configured {} steps",
                meta.step, self.settings.steps
            )));
        }
        self.session.load_params(ckpt)?;
        self.opt
            .load_state(&self.session.store, meta.step, |name| ckpt.get::<f64>(name).map(|t| t.data().to_vec()))?;
        self.step = meta.step;
        Ok(())
    }
}

/// Paths of the step and `latest` checkpoints.
pub fn checkpoint_paths(dir: &Path, step: u64) -> (PathBuf, PathBuf) {
    (dir.join(format!("step_{step:06}.ckpt")), dir.join(LATEST_CHECKPOINT))
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint, step: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (at, latest) = checkpoint_paths(dir, step);
    ckpt.save(&at)?;
    ckpt.save(&latest)
}

/// Appends log lines; on resume the log is first cut back to the resumed step.
pub struct LogWriter {
    file: fs::File,
}

impl LogWriter {
    pub fn open(path: &Path, resume_step: u64) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let kept = if resume_step > 0 && path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.lines()
                .filter(|l| {
                    serde_json::from_str::<StepLog>(l)
                        .map(|s| s.step < resume_step)
                        .unwrap_or(false)
                })
                .map(|l| format!("{l}\n"))
                .collect::<String>()
        } else {
            String::new()
        };
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LogWriter { file })
    }

    pub fn write(&mut self, log: &StepLog) -> Result<()> {
        let line = serde_json::to_string(log).expect("log serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io("training log", e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}
