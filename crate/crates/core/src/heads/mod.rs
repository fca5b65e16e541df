//! Segmentation decoder and Polygon-YOLO detection head on the shared BEV map.

mod decode;
mod targets;

pub use decode::{decode_detections, non_max_suppression, DecodeConfig};
pub use targets::{
    encode_detection, encode_segmentation, fit_to_extent, ideal_raw, CellTarget, DetectionTargets,
    SegTargets, CENTER_SIGMA_PX, MAX_OUTSIDE_FRACTION,
};

use rand::Rng;

use crate::network::layers::{Builder, Conv, Norm, ResBlock};
use crate::network::ModelConfig;
use crate::tensor::{Graph, ParamStore, Scalar, TensorResult, Var};

/// Channels of the segmentation output, in order.
pub const SEG_CHANNELS: [&str; 4] = ["seg_parking", "seg_vehicle", "center_parking", "center_vehicle"];

/// Layout of the 15 detection channels of one cell.
pub mod det_channel {
    /// Corner `k` offset: x at `2k`, y at `2k + 1`.
    pub const OFFSETS: usize = 0;
    pub const OBJECTNESS: usize = 8;
    /// Parking, vehicle.
    pub const CLASS: usize = 9;
    pub const VISIBILITY: usize = 11;
    pub const COUNT: usize = 15;
}

#[derive(Debug, Clone)]
pub struct SegmentationHead {
    input: Conv,
    stages: Vec<(Conv, Norm)>,
    out: Conv,
}

impl SegmentationHead {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig) -> TensorResult<Self> {
        let d = cfg.bev.channels;
        let ch = cfg.seg_channels;
        b.scope("seg", |b| {
            let input = b.conv("input", 1, d, ch[0], 1)?;
            let mut stages = Vec::with_capacity(3);
            let mut cin = ch[0];
            for (i, &c) in ch.iter().enumerate() {
                stages.push((b.conv(&format!("up{i}.conv"), 3, cin, c, 1)?, b.norm(&format!("up{i}.norm"), c)?));
                cin = c;
            }
            let out = b.conv_std("out", 1, cin, SEG_CHANNELS.len(), 1, 0.1 / (cin as f64).sqrt())?;
            // low initial foreground probability for the sparse maps
            b.store.get_mut(out.b).value.data_mut().iter_mut().for_each(|v| *v = T::from_f64(-2.0));
            Ok(SegmentationHead { input, stages, out })
        })
    }

    /// `[rows, cols, D]` → logits `[8·rows, 8·cols, 4]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, bev: Var) -> TensorResult<Var> {
        let mut x = self.input.forward(g, s, bev)?;
        for (conv, norm) in &self.stages {
            x = g.upsample2x(x)?;
            x = conv.forward(g, s, x)?;
            x = norm.forward(g, s, x)?;
            x = g.gelu(x);
        }
        self.out.forward(g, s, x)
    }
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    blocks: [ResBlock; 3],
    out: Conv,
}

impl DetectionHead {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig) -> TensorResult<Self> {
        let d = cfg.bev.channels;
        b.scope("det", |b| {
            let blocks = [b.res_block("block0", d)?, b.res_block("block1", d)?, b.res_block("block2", d)?];
            let out = b.conv_std("out", 1, d, det_channel::COUNT, 1, 0.1 / (d as f64).sqrt())?;
            b.store.get_mut(out.b).value.data_mut()[det_channel::OBJECTNESS] = T::from_f64(cfg.objectness_prior);
            Ok(DetectionHead { blocks, out })
        })
    }

    /// `[rows, cols, D]` → raw `[rows, cols, 15]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, bev: Var) -> TensorResult<Var> {
        let mut x = bev;
        for blk in &self.blocks {
            x = blk.forward(g, s, x)?;
        }
        self.out.forward(g, s, x)
    }
}
