use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BevGridSpec;

/// One backbone output: downscale factor and channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub stride: usize,
    pub channels: usize,
}

/// The two backbone endpoints attended by the BEV queries, finest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub fine: Endpoint,
    pub coarse: Endpoint,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            fine: Endpoint {
                stride: 8,
                channels: 24,
            },
            coarse: Endpoint {
                stride: 32,
                channels: 48,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_channels: usize,
    /// Hidden width of the ray-embedding and map-embedding MLPs.
    pub embed_hidden: usize,
    /// Hidden width multiplier of the post-attention MLP.
    pub mlp_ratio: usize,
}

impl AttentionConfig {
    pub fn channels(&self) -> usize {
        self.heads * self.head_channels
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 4,
            head_channels: 8,
            embed_hidden: 32,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Network input (width, height) after crop and resize.
    pub input_size: [usize; 2],
    /// Rows cropped from the top of the native image.
    pub crop_top: usize,
    pub endpoints: EndpointConfig,
    pub attention: AttentionConfig,
    pub bev: BevGridSpec,
    /// Channels of the three upsampling stages of the segmentation decoder.
    pub seg_channels: [usize; 3],
    /// Bound of the corner offsets from the responsible cell center, meters.
    pub max_offset: f64,
    /// Initial objectness bias (logit of the prior probability).
    pub objectness_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small CPU configuration used for desk-scale training.
    pub fn desk() -> Self {
        let attention = AttentionConfig::default();
        ModelConfig {
            input_size: [128, 104],
            crop_top: 5,
            endpoints: EndpointConfig::default(),
            attention,
            bev: BevGridSpec {
                channels: attention.channels(),
                ..BevGridSpec::default()
            },
            seg_channels: [16, 8, 4],
            max_offset: 6.0,
            objectness_prior: -3.0,
        }
    }

    /// Dimensions of the full-size architecture (640×528 input, 26 px top
    /// crop, 4 heads × 32 channels).
    pub fn paper() -> Self {
        let attention = AttentionConfig {
            heads: 4,
            head_channels: 32,
            embed_hidden: 128,
            mlp_ratio: 2,
        };
        ModelConfig {
            input_size: [640, 528],
            crop_top: 26,
            endpoints: EndpointConfig {
                fine: Endpoint {
                    stride: 8,
                    channels: 64,
                },
                coarse: Endpoint {
                    stride: 32,
                    channels: 160,
                },
            },
            attention,
            bev: BevGridSpec::default(),
            seg_channels: [64, 32, 16],
            max_offset: 6.0,
            objectness_prior: -3.0,
        }
    }

    /// Minimal configuration for gradient checks: 64×52 input, 8 BEV channels.
    pub fn tiny() -> Self {
        let attention = AttentionConfig {
            heads: 4,
            head_channels: 2,
            embed_hidden: 8,
            mlp_ratio: 1,
        };
        ModelConfig {
            input_size: [64, 52],
            crop_top: 2,
            endpoints: EndpointConfig {
                fine: Endpoint {
                    stride: 8,
                    channels: 6,
                },
                coarse: Endpoint {
                    stride: 32,
                    channels: 8,
                },
            },
            attention,
            bev: BevGridSpec {
                channels: attention.channels(),
                ..BevGridSpec::default()
            },
            seg_channels: [4, 4, 4],
            max_offset: 6.0,
            objectness_prior: -3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let [w, h] = self.input_size;
        let (fine, coarse) = (self.endpoints.fine, self.endpoints.coarse);
        for e in [fine, coarse] {
            if !e.stride.is_power_of_two() || e.stride < 2 || e.channels == 0 {
                return err(format!(
                    "endpoint stride {} must be a power of two >= 2 with nonzero channels",
                    e.stride
                ));
            }
        }
        if fine.stride >= coarse.stride {
            return err(format!(
                "fine endpoint stride {} must be smaller than coarse stride {}",
                fine.stride, coarse.stride
            ));
        }
        if w < coarse.stride || h < coarse.stride {
            return err(format!(
                "input {w}x{h} is smaller than the coarse endpoint stride {}",
                coarse.stride
            ));
        }
        if self.attention.heads == 0 || self.attention.head_channels == 0 {
            return err("attention needs at least one head and one channel per head".into());
        }
        if self.attention.channels() != self.bev.channels {
            return err(format!(
                "heads x head_channels = {} does not match BEV channels {}",
                self.attention.channels(),
                self.bev.channels
            ));
        }
        if self.bev.rows == 0 || self.bev.cols == 0 || self.bev.extent_x <= 0.0 || self.bev.extent_y <= 0.0 {
            return err("BEV grid must have positive size and extent".into());
        }
        if self.seg_channels.contains(&0) {
            return err("segmentation decoder channels must be nonzero".into());
        }
        if !(self.max_offset > 0.0) {
            return err("max_offset must be positive".into());
        }
        Ok(())
    }

    /// Number of stride-2 backbone stages.
    pub fn backbone_stages(&self) -> usize {
        self.endpoints.coarse.stride.trailing_zeros() as usize
    }

    /// Output channels of every backbone stage (stage `s` has stride `2^(s+1)`).
    pub fn stage_channels(&self) -> Vec<usize> {
        let (fine, coarse) = (self.endpoints.fine, self.endpoints.coarse);
        let nf = fine.stride.trailing_zeros() as usize;
        let nc = self.backbone_stages();
        (1..=nc)
            .map(|s| {
                if s <= nf {
                    (fine.channels >> (nf - s)).max(4)
                } else {
                    let t = (s - nf) as f64 / (nc - nf) as f64;
                    (fine.channels as f64 + t * (coarse.channels as f64 - fine.channels as f64)).round() as usize
                }
            })
            .collect()
    }

    /// Spatial (rows, cols) of a stage output of the given stride (floor per stage).
    pub fn feature_shape(&self, stride: usize) -> (usize, usize) {
        let [mut w, mut h] = self.input_size;
        let mut s = 1;
        while s < stride {
            w /= 2;
            h /= 2;
            s *= 2;
        }
        (h, w)
    }

    /// Segmentation map side relative to the BEV grid (three doublings).
    pub fn seg_scale(&self) -> usize {
        8
    }
}
