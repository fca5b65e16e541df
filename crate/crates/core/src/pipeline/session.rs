//! A model with its parameters bound to a camera rig: the unit that the
//! training, evaluation and benchmark commands drive.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_bev_augment, apply_image_augment, transform_labels, transform_seg_targets, SampledAugment};
use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::heads::{decode_detections, encode_detection, encode_segmentation, DecodeConfig};
use crate::losses::{compute_losses, total_loss, FocalConfig, LossReport, LossWeights};
use crate::network::{CameraEncodings, CameraView, Model, ModelConfig};
use crate::tensor::{AdamW, Checkpoint, Graph, ParamStore, Scalar, Tensor};
use crate::types::{Image, PolygonDetection, PolygonLabel};

/// One frame held in memory: native images in rig order and its labels.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: u64,
    pub images: Vec<Image>,
    pub labels: Vec<PolygonLabel>,
}

/// Deterministic generator for the `index`-th draw of a named stream.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

pub struct Session<T: Scalar> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub rig: CameraRig,
    encodings: Vec<CameraEncodings>,
}

impl<T: Scalar> Session<T> {
    pub fn new(config: &ModelConfig, rig: CameraRig, seed: u64) -> Result<Self> {
        let (model, store) = Model::new::<T>(config, seed)?;
        let encodings = rig.cameras.iter().map(|c| model.encodings(c)).collect::<Result<_>>()?;
        Ok(Session {
            model,
            store,
            rig,
            encodings,
        })
    }

    pub fn encodings(&self) -> &[CameraEncodings] {
        &self.encodings
    }

    pub fn inputs(&self, frame: &Frame) -> Vec<Tensor<T>> {
        frame.images.iter().map(|i| self.model.prepare_image(i)).collect()
    }

    /// Raw detection output `[rows, cols, 15]` of one frame, as `f64`.
    pub fn predict_raw(&self, frame: &Frame) -> Result<Vec<f64>> {
        let inputs = self.inputs(frame);
        let views = views(&inputs, &self.encodings);
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &self.store, &views)?;
        Ok(g.data(out.det).iter().map(|v| v.as_f64()).collect())
    }

    pub fn predict(&self, frame: &Frame, decode: &DecodeConfig) -> Result<Vec<PolygonDetection>> {
        Ok(decode_detections(&self.predict_raw(frame)?, &self.model.config.bev, decode))
    }

    /// Loss and parameter gradients of one augmented frame. Gradients are
    /// indexed by parameter id; untouched parameters get `None`.
    pub fn sample_gradients(
        &self,
        frame: &Frame,
        aug: &SampledAugment,
        weights: &LossWeights,
        focal: FocalConfig,
    ) -> Result<(LossReport, Vec<Option<Vec<f64>>>)> {
        let cfg = &self.model.config;
        let grid = cfg.bev;
        let mut inputs = Vec::with_capacity(frame.images.len());
        let mut encs = Vec::with_capacity(frame.images.len());
        for (k, img) in frame.images.iter().enumerate() {
            let cam = &aug.cameras[k];
            if cam.roll == 0.0 && cam.color.is_none() {
                inputs.push(self.model.prepare_image(img));
                encs.push(self.encodings[k].clone());
            } else {
                let (img, calib) = apply_image_augment(img, &self.rig.cameras[k], cam);
                inputs.push(self.model.prepare_image(&img));
                encs.push(if cam.roll == 0.0 {
                    self.encodings[k].clone()
                } else {
                    self.model.encodings(&calib)?
                });
            }
        }
        let labels = transform_labels(&frame.labels, &aug.bev, &grid);
        let det_t = encode_detection(&labels, &grid);
        let seg_t = transform_seg_targets(
            &encode_segmentation(&frame.labels, &grid, cfg.seg_scale()),
            &aug.bev,
            &grid,
            cfg.seg_scale(),
        );
        let views = views(&inputs, &encs);
        let mut g = Graph::new();
        let feats = self.model.backbone_forward(&mut g, &self.store, &views)?;
        let bev = self.model.bev_forward(&mut g, &self.store, &views, &feats)?;
        let bev = apply_bev_augment(&mut g, bev, &grid, aug)?;
        let (seg, det) = self.model.heads_forward(&mut g, &self.store, bev)?;
        let terms = compute_losses(&mut g, seg, det, &seg_t, &det_t, &grid, cfg.max_offset, focal)?;
        let (total, report) = total_loss(&mut g, &terms, weights)?;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite total loss {}", report.total)));
        }
        let grads = g.backward(total)?;
        let mut out = vec![None; self.store.len()];
        for (id, gr) in g.param_grads(&grads) {
            out[id.index()] = Some(gr.iter().map(|v| v.as_f64()).collect());
        }
        Ok((report, out))
    }

    /// Parameters, optimizer moments and metadata as one checkpoint.
    pub fn checkpoint(&self, opt: Option<&AdamW>, meta: serde_json::Value) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (_, p) in self.store.iter() {
            c.insert(format!("param/{}", p.name), &p.value);
        }
        if let Some(opt) = opt {
            for (name, t) in opt.state_tensors(&self.store) {
                c.insert(name, &t);
            }
        }
        c.meta = meta;
        c
    }

    /// Copies every parameter out of `ckpt`, refusing any name or shape
    /// mismatch and listing all of them.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut problems = Vec::new();
        let mut expected = BTreeMap::new();
        for (_, p) in self.store.iter() {
            expected.insert(format!("param/{}", p.name), p.value.shape().to_vec());
        }
        for (name, shape) in &expected {
            match ckpt.shape(name) {
                None => problems.push(format!("{} missing from checkpoint", &name[6..])),
                Some(s) if s != shape.as_slice() => {
                    problems.push(format!("{}: checkpoint {:?}, model {:?}", &name[6..], s, shape))
                }
                _ => {}
            }
        }
        for name in ckpt.names().filter(|n| n.starts_with("param/")) {
            if !expected.contains_key(name) {
                problems.push(format!("{} not in model", &name[6..]));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint does not match the model configuration ({} parameters): {}",
                problems.len(),
                problems.join("; ")
            )));
        }
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = format!("param/{}", self.store.get(id).name);
            self.store.get_mut(id).value = ckpt.get::<T>(&name).expect("presence checked above");
        }
        Ok(())
    }

    pub fn load_params_from(&mut self, path: &Path) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        self.load_params(&ckpt)?;
        Ok(ckpt)
    }
}

fn views<'a, T>(inputs: &'a [Tensor<T>], encs: &'a [CameraEncodings]) -> Vec<CameraView<'a, T>> {
    inputs
        .iter()
        .zip(encs)
        .map(|(image, encodings)| CameraView { image, encodings })
        .collect()
}
