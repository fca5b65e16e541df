//! Convolutional stand-in for the image backbone: a stack of stride-2
//! patchify stages, each followed by a residual 3×3 convolution.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{Builder, Conv};
use crate::tensor::{Graph, ParamStore, Scalar, TensorResult, Var};

#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<(Conv, Conv)>,
    fine_stage: usize,
}

/// Per-camera backbone outputs.
#[derive(Debug, Clone, Copy)]
pub struct Endpoints {
    pub fine: Var,
    pub coarse: Var,
}

impl Backbone {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig) -> TensorResult<Self> {
        let channels = cfg.stage_channels();
        b.scope("backbone", |b| {
            let mut stages = Vec::with_capacity(channels.len());
            let mut cin = 3;
            for (s, &c) in channels.iter().enumerate() {
                let patch = b.conv_std(&format!("s{s}.patch"), 2, cin, c, 2, (2.0 / (4 * cin) as f64).sqrt())?;
                let res = b.conv_std(&format!("s{s}.res"), 3, c, c, 1, 0.5 / (9 * c) as f64)?;
                stages.push((patch, res));
                cin = c;
            }
            Ok(Backbone {
                stages,
                fine_stage: cfg.endpoints.fine.stride.trailing_zeros() as usize - 1,
            })
        })
    }

    /// `image`: `[H, W, 3]` network input.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, image: Var) -> TensorResult<Endpoints> {
        let mut x = image;
        let mut fine = None;
        for (i, (patch, res)) in self.stages.iter().enumerate() {
            let h = patch.forward(g, s, x)?;
            let h = g.gelu(h);
            let r = res.forward(g, s, h)?;
            let r = g.gelu(r);
            x = g.add(h, r)?;
            if i == self.fine_stage {
                fine = Some(x);
            }
        }
        Ok(Endpoints {
            fine: fine.expect("fine endpoint precedes the coarse one"),
            coarse: x,
        })
    }
}
