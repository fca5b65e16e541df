use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::eval::MatchConfig;
use crate::heads::DecodeConfig;
use crate::losses::{FocalConfig, LossWeights};
use crate::network::ModelConfig;
use crate::synth::SceneSpec;
use crate::tensor::{AdamWConfig, OneCycle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    /// Camera rig JSON used by `generate`; the built-in synthetic rig when absent.
    pub rig: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: "runs/data".into(),
            checkpoints: "runs/checkpoints".into(),
            reports: "runs/reports".into(),
            rig: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub scene: SceneSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 256,
            val: 64,
            scene: SceneSpec::default(),
        }
    }
}

/// A named preset or a fully spelled-out augmentation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(untagged)]
pub enum AugmentationSetting {
    Preset(String),
    Custom(AugmentationConfig),
}

impl Default for AugmentationSetting {
    fn default() -> Self {
        AugmentationSetting::Preset("full".into())
    }
}

impl AugmentationSetting {
    pub fn resolve(&self) -> Result<AugmentationConfig> {
        let cfg = match self {
            AugmentationSetting::Preset(name) => AugmentationConfig::preset(name)?,
            AugmentationSetting::Custom(c) => c.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: OneCycle,
    pub adamw: AdamWConfig,
    /// Steps between checkpoints; the final step is always saved.
    pub checkpoint_every: u64,
    pub split: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_size: 8,
            schedule: OneCycle::default(),
            adamw: AdamWConfig::default(),
            checkpoint_every: 500,
            split: "train".into(),
        }
    }
}

/// Lower bounds (upper for the distance) checked by `eval`; unset entries are
/// not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub min_f1: Option<f64>,
    pub max_distance_cm: Option<f64>,
    pub min_visibility_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: String,
    pub decode: DecodeConfig,
    pub matching: MatchConfig,
    /// Number of frames rendered as overlay images.
    pub overlays: usize,
    pub thresholds: Thresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "val".into(),
            decode: DecodeConfig::default(),
            matching: MatchConfig::default(),
            overlays: 4,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 2,
            iterations: 10,
        }
    }
}

/// Everything a command needs. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub paths: Paths,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub loss: LossWeights,
    pub focal: FocalConfig,
    pub augmentation: AugmentationSetting,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            paths: Paths::default(),
            model: ModelConfig::desk(),
            dataset: DatasetConfig::default(),
            loss: LossWeights::default(),
            focal: FocalConfig::default(),
            augmentation: AugmentationSetting::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// JSON schema of the configuration file.
    pub fn schema() -> Value {
        serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
    }

    /// Parses JSON text, applies `key.path=value` overrides, then validates.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&text, overrides)?;
        if let Some(dir) = path.parent() {
            cfg.paths.resolve_against(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.loss.validate()?;
        self.dataset.scene.validate()?;
        self.augmentation.resolve()?;
        self.eval.matching.validate()?;
        if !(self.focal.gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal.alpha) {
            return err(format!("focal gamma must be >= 0 and alpha in [0, 1], got {:?}", self.focal));
        }
        if self.train.batch_size == 0 {
            return err("train.batch_size must be positive".into());
        }
        if self.train.checkpoint_every == 0 {
            return err("train.checkpoint_every must be positive".into());
        }
        let s = self.train.schedule;
        if [s.start, s.max, s.end].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return err(format!("train.schedule rates must be finite and non-negative, got {s:?}"));
        }
        let a = self.train.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0)
        {
            return err(format!("train.adamw out of range: {a:?}"));
        }
        let d = self.eval.decode;
        if !(0.0..=1.0).contains(&d.conf_threshold) || !(d.max_offset > 0.0) {
            return err(format!("eval.decode out of range: {d:?}"));
        }
        if d.max_offset != self.model.max_offset {
            return err(format!(
                "eval.decode.max_offset {} differs from model.max_offset {}",
                d.max_offset, self.model.max_offset
            ));
        }
        for split in [&self.train.split, &self.eval.split] {
            if split != "train" && split != "val" {
                return err(format!("unknown split '{split}' (expected train or val)"));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the resolved configuration.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(serde_json::to_vec(&v).expect("value serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Paths {
    fn resolve_against(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.checkpoints);
        fix(&mut self.reports);
        if let Some(r) = &mut self.rig {
            fix(r);
        }
    }
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON when it
/// parses, otherwise taken as a string; missing objects are created.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override '{spec}' has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => {
                return Err(Error::Config(format!(
                    "override '{spec}': '{}' is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}
