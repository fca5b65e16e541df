//! The fisheye cross-view transformer: backbone stub, projection-encoded
//! keys, map-embedding queries and the two task heads.

pub mod attention;
pub mod backbone;
mod config;
pub mod layers;

pub use attention::{AttentionTrace, CameraLevelInput, CrossViewAttention, RayEmbedding};
pub use backbone::{Backbone, Endpoints};
pub use config::{AttentionConfig, Endpoint, EndpointConfig, ModelConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{build_projection_encoding, CameraCalibration, CameraName, InputGeometry, ProjectionEncoding};
use crate::error::Result;
use crate::heads::{DetectionHead, SegmentationHead};
use crate::tensor::{ParamStore, Scalar, Tensor, TensorResult, Var};
use crate::tensor::Graph;
use crate::types::Image;
use layers::Builder;

/// Projection encodings of one camera at both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraEncodings {
    pub name: CameraName,
    pub fine: ProjectionEncoding,
    pub coarse: ProjectionEncoding,
}

/// One camera's network input.
#[derive(Debug, Clone, Copy)]
pub struct CameraView<'a, T> {
    /// `[H, W, 3]` prepared image.
    pub image: &'a Tensor<T>,
    pub encodings: &'a CameraEncodings,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// `[rows, cols, D]`.
    pub bev: Var,
    /// `[8·rows, 8·cols, 4]` logits.
    pub seg: Var,
    /// `[rows, cols, 15]` raw detection output.
    pub det: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub attention: CrossViewAttention,
    pub seg_head: SegmentationHead,
    pub det_head: DetectionHead,
}

impl Model {
    /// Builds the model and its parameters; identical seeds give identical weights.
    pub fn new<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let backbone = Backbone::build(&mut b, config)?;
        let attention = CrossViewAttention::build(&mut b, config)?;
        let seg_head = SegmentationHead::build(&mut b, config)?;
        let det_head = DetectionHead::build(&mut b, config)?;
        Ok((
            Model {
                config: config.clone(),
                backbone,
                attention,
                seg_head,
                det_head,
            },
            store,
        ))
    }

    pub fn input_geometry(&self) -> InputGeometry {
        InputGeometry {
            input_size: self.config.input_size,
            crop_top: self.config.crop_top,
        }
    }

    pub fn encodings(&self, calib: &CameraCalibration) -> Result<CameraEncodings> {
        let geom = self.input_geometry();
        let enc = |stride: usize| {
            build_projection_encoding(
                calib,
                &geom,
                self.config.feature_shape(stride),
                (stride as f64, stride as f64),
            )
        };
        Ok(CameraEncodings {
            name: calib.name,
            fine: enc(self.config.endpoints.fine.stride)?,
            coarse: enc(self.config.endpoints.coarse.stride)?,
        })
    }

    /// Crops, resizes and normalizes a native image into a network input.
    pub fn prepare_image<T: Scalar>(&self, image: &Image) -> Tensor<T> {
        prepare_image(image, self.config.input_size, self.config.crop_top)
    }

    pub fn backbone_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        views: &[CameraView<'_, T>],
    ) -> TensorResult<Vec<Endpoints>> {
        views
            .iter()
            .map(|v| {
                let img = g.constant(v.image.clone());
                self.backbone.forward(g, s, img)
            })
            .collect()
    }

    pub fn bev_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        views: &[CameraView<'_, T>],
        features: &[Endpoints],
    ) -> TensorResult<Var> {
        let coarse: Vec<_> = views
            .iter()
            .zip(features)
            .map(|(v, f)| CameraLevelInput {
                features: f.coarse,
                encoding: &v.encodings.coarse,
            })
            .collect();
        let fine: Vec<_> = views
            .iter()
            .zip(features)
            .map(|(v, f)| CameraLevelInput {
                features: f.fine,
                encoding: &v.encodings.fine,
            })
            .collect();
        self.attention.forward(g, s, &coarse, &fine)
    }

    /// Segmentation logits and raw detection output from BEV features.
    pub fn heads_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        bev: Var,
    ) -> TensorResult<(Var, Var)> {
        let seg = self.seg_head.forward(g, s, bev)?;
        let det = self.det_head.forward(g, s, bev)?;
        Ok((seg, det))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        views: &[CameraView<'_, T>],
    ) -> TensorResult<ModelOutput> {
        let feats = self.backbone_forward(g, s, views)?;
        let bev = self.bev_forward(g, s, views, &feats)?;
        let (seg, det) = self.heads_forward(g, s, bev)?;
        Ok(ModelOutput { bev, seg, det })
    }
}

/// Top crop, bilinear resize to `size` (width, height), and mapping of
/// `[0, 1]` intensities to `[-1, 1]`; output is channel-last.
pub fn prepare_image<T: Scalar>(image: &Image, size: [usize; 2], crop_top: usize) -> Tensor<T> {
    let [ow, oh] = size;
    let (w, h) = (image.width, image.height - crop_top.min(image.height));
    let plane = image.width * image.height;
    let mut out = Vec::with_capacity(ow * oh * 3);
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    let direct = sx == 1.0 && sy == 1.0;
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..3 {
                let v = if direct {
                    image.data[c * plane + (y + crop_top) * image.width + x] as f64
                } else {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                    image.sample_bilinear(c, fx, fy + crop_top as f64)
                };
                out.push(T::from_f64(2.0 * v - 1.0));
            }
        }
    }
    Tensor::new(vec![oh, ow, 3], out).expect("sized by construction")
}
