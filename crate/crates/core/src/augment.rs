//! Training-time augmentations: BEV flip/yaw and feature dropout applied to
//! the BEV map together with its targets, per-camera roll and photometric
//! jitter applied to the images.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::camera::CameraCalibration;
use crate::error::{Error, Result};
use crate::heads::{fit_to_extent, SegTargets};
use crate::polygon::transform_corners;
use crate::tensor::{sc, Graph, Scalar, TensorResult, Var};
use crate::types::{BevGridSpec, Image, PolygonLabel};

/// Top crop of the reference 640×528 input.
pub const REFERENCE_TOP_CROP: usize = 26;
pub const REFERENCE_HEIGHT: usize = 528;

/// Top crop scaled to an input of `height` rows.
pub fn scaled_top_crop(height: usize) -> usize {
    (REFERENCE_TOP_CROP as f64 * height as f64 / REFERENCE_HEIGHT as f64).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum YawMode {
    /// Uniform in `±max_yaw_deg`.
    Continuous,
    /// One of 90°, 180°, 270° with probability `p_yaw` each.
    RightAngles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub p_flip: f64,
    pub p_yaw: f64,
    pub max_yaw_deg: f64,
    pub yaw_mode: YawMode,
    /// Per-channel drop probability of the BEV features.
    pub p_feature_dropout: f64,
    pub p_roll: f64,
    pub max_roll_deg: f64,
    pub p_color: f64,
    /// Additive brightness range.
    pub brightness: f64,
    /// Multiplicative contrast range around mid-gray.
    pub contrast: f64,
    /// Per-channel gain range.
    pub channel_gain: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_std: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig::preset("full").unwrap()
    }
}

impl AugmentationConfig {
    pub const PRESETS: [&'static str; 4] = ["none", "full", "flip_yaw", "right_angles"];

    pub fn none() -> Self {
        AugmentationConfig {
            p_flip: 0.0,
            p_yaw: 0.0,
            max_yaw_deg: 22.5,
            yaw_mode: YawMode::Continuous,
            p_feature_dropout: 0.0,
            p_roll: 0.0,
            max_roll_deg: 10.0,
            p_color: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            channel_gain: 0.0,
            noise_std: 0.0,
        }
    }

    /// `none`; `full` (every augmentation of the ablation, continuous yaw);
    /// `flip_yaw` (BEV flip and yaw only); `right_angles` (flip, dropout and
    /// 90°/180°/270° rotations).
    pub fn preset(name: &str) -> Result<Self> {
        let none = Self::none();
        Ok(match name {
            "none" => none,
            "full" => AugmentationConfig {
                p_flip: 0.5,
                p_yaw: 0.9,
                p_feature_dropout: 0.5,
                p_roll: 0.9,
                p_color: 0.5,
                brightness: 0.1,
                contrast: 0.2,
                channel_gain: 0.1,
                noise_std: 0.02,
                ..none
            },
            "flip_yaw" => AugmentationConfig {
                p_flip: 0.5,
                p_yaw: 0.9,
                ..none
            },
            "right_angles" => AugmentationConfig {
                p_flip: 0.5,
                p_yaw: 0.2,
                yaw_mode: YawMode::RightAngles,
                p_feature_dropout: 0.5,
                ..none
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown augmentation preset '{other}' (expected one of {:?})",
                    Self::PRESETS
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_flip", self.p_flip),
            ("p_yaw", self.p_yaw),
            ("p_feature_dropout", self.p_feature_dropout),
            ("p_roll", self.p_roll),
            ("p_color", self.p_color),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augmentation.{name} must be in [0, 1], got {p}")));
            }
        }
        if self.p_feature_dropout >= 1.0 {
            return Err(Error::Config("augmentation.p_feature_dropout must be < 1".into()));
        }
        if self.yaw_mode == YawMode::RightAngles && self.p_yaw > 1.0 / 3.0 {
            return Err(Error::Config("augmentation.p_yaw must be <= 1/3 with right-angle yaw".into()));
        }
        if !(0.0..=180.0).contains(&self.max_yaw_deg) {
            return Err(Error::Config(format!("augmentation.max_yaw_deg must be in [0, 180], got {}", self.max_yaw_deg)));
        }
        if !(0.0..=45.0).contains(&self.max_roll_deg) {
            return Err(Error::Config(format!("augmentation.max_roll_deg must be in [0, 45], got {}", self.max_roll_deg)));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("channel_gain", self.channel_gain),
            ("noise_std", self.noise_std),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("augmentation.{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.p_flip == 0.0 && self.p_yaw == 0.0 && self.p_feature_dropout == 0.0 && self.p_roll == 0.0 && self.p_color == 0.0
    }

    /// Draws one transform for a sample with `cameras` images and `channels` BEV channels.
    pub fn sample(&self, rng: &mut impl Rng, cameras: usize, channels: usize) -> SampledAugment {
        let flip = self.p_flip > 0.0 && rng.gen::<f64>() < self.p_flip;
        let yaw = match self.yaw_mode {
            YawMode::Continuous => {
                if self.p_yaw > 0.0 && rng.gen::<f64>() < self.p_yaw {
                    rng.gen_range(-1.0..=1.0) * self.max_yaw_deg.to_radians()
                } else {
                    0.0
                }
            }
            YawMode::RightAngles => {
                if self.p_yaw > 0.0 {
                    let u = rng.gen::<f64>();
                    let k = (u / self.p_yaw).floor() as usize;
                    if k < 3 {
                        (k + 1) as f64 * std::f64::consts::FRAC_PI_2
                    } else {
                        0.0
                    }
                } else {
                    0.0
                }
            }
        };
        let channel_keep = (self.p_feature_dropout > 0.0)
            .then(|| (0..channels).map(|_| rng.gen::<f64>() >= self.p_feature_dropout).collect());
        let cameras = (0..cameras)
            .map(|_| {
                let roll = if self.p_roll > 0.0 && rng.gen::<f64>() < self.p_roll {
                    rng.gen_range(-1.0..=1.0) * self.max_roll_deg.to_radians()
                } else {
                    0.0
                };
                let color = (self.p_color > 0.0 && rng.gen::<f64>() < self.p_color).then(|| ColorJitter {
                    brightness: rng.gen_range(-1.0..=1.0) * self.brightness,
                    contrast: 1.0 + rng.gen_range(-1.0..=1.0) * self.contrast,
                    gain: std::array::from_fn(|_| 1.0 + rng.gen_range(-1.0..=1.0) * self.channel_gain),
                    noise_std: self.noise_std,
                    noise_seed: rng.gen(),
                });
                CameraAugment { roll, color }
            })
            .collect();
        SampledAugment {
            bev: BevTransform { flip, yaw },
            channel_keep,
            p_feature_dropout: self.p_feature_dropout,
            cameras,
        }
    }
}

/// Mirror `y → −y` (if `flip`) followed by a counterclockwise rotation by
/// `yaw` about the grid center.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BevTransform {
    pub flip: bool,
    pub yaw: f64,
}

impl BevTransform {
    pub fn identity() -> Self {
        BevTransform::default()
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.yaw == 0.0
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let y = if self.flip { -p[1] } else { p[1] };
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * y, s * p[0] + c * y]
    }

    pub fn inverse(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let q = [c * p[0] + s * p[1], -s * p[0] + c * p[1]];
        if self.flip {
            [q[0], -q[1]]
        } else {
            q
        }
    }

    /// Bilinear pull-back plan for a map at `scale`× grid resolution: for
    /// every output pixel its four source taps, and whether its source lies
    /// inside the grid (zero padding otherwise).
    pub fn resample_plan(&self, grid: &BevGridSpec, scale: usize) -> ResamplePlan {
        let (rows, cols) = (grid.rows * scale, grid.cols * scale);
        let mut taps = Vec::with_capacity(rows * cols);
        let mut valid = Vec::with_capacity(rows * cols);
        let mut nearest = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let src = self.inverse(grid.map_pixel_center(r, c, scale));
                let (fr, fc) = grid.to_map_coords(src, scale);
                // pixel-index coordinates, snapped so that exact permutations stay exact
                let snap = |v: f64| {
                    let r = v.round();
                    if (v - r).abs() < 1e-9 {
                        r
                    } else {
                        v
                    }
                };
                let (fr, fc) = (snap(fr - 0.5), snap(fc - 0.5));
                let inside = fr >= -0.5 && fc >= -0.5 && fr <= rows as f64 - 0.5 && fc <= cols as f64 - 0.5;
                valid.push(inside);
                nearest.push(inside.then(|| {
                    let nr = (fr.round().max(0.0) as usize).min(rows - 1);
                    let nc = (fc.round().max(0.0) as usize).min(cols - 1);
                    (nr * cols + nc) as u32
                }));
                let (r0, c0) = (fr.floor(), fc.floor());
                let (wr, wc) = (fr - r0, fc - c0);
                let mut t = [(0u32, 0.0f64); 4];
                let corners = [(r0, c0, (1.0 - wr) * (1.0 - wc)), (r0, c0 + 1.0, (1.0 - wr) * wc), (r0 + 1.0, c0, wr * (1.0 - wc)), (r0 + 1.0, c0 + 1.0, wr * wc)];
                for (k, &(rr, cc, w)) in corners.iter().enumerate() {
                    if rr >= 0.0 && cc >= 0.0 && rr < rows as f64 && cc < cols as f64 && w != 0.0 {
                        t[k] = ((rr as usize * cols + cc as usize) as u32, w);
                    }
                }
                taps.push(t);
            }
        }
        ResamplePlan { rows, cols, taps, valid, nearest }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplePlan {
    pub rows: usize,
    pub cols: usize,
    pub taps: Vec<[(u32, f64); 4]>,
    pub valid: Vec<bool>,
    pub nearest: Vec<Option<u32>>,
}

impl ResamplePlan {
    /// Bilinear resampling of a channel-last `[rows, cols, c]` buffer.
    pub fn bilinear(&self, src: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.taps.len() * c];
        for (o, tap) in self.taps.iter().enumerate() {
            for &(i, w) in tap {
                if w == 0.0 {
                    continue;
                }
                for k in 0..c {
                    out[o * c + k] += w * src[i as usize * c + k];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub gain: [f64; 3],
    pub noise_std: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CameraAugment {
    pub roll: f64,
    pub color: Option<ColorJitter>,
}

/// One sample's drawn augmentation, serializable for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledAugment {
    pub bev: BevTransform,
    /// Kept BEV channels; `None` when dropout is disabled.
    pub channel_keep: Option<Vec<bool>>,
    pub p_feature_dropout: f64,
    pub cameras: Vec<CameraAugment>,
}

impl SampledAugment {
    pub fn identity(cameras: usize) -> Self {
        SampledAugment {
            bev: BevTransform::identity(),
            channel_keep: None,
            p_feature_dropout: 0.0,
            cameras: vec![CameraAugment::default(); cameras],
        }
    }
}

/// Exact label transform followed by re-fitting to the extent.
pub fn transform_labels(labels: &[PolygonLabel], t: &BevTransform, grid: &BevGridSpec) -> Vec<PolygonLabel> {
    if t.is_identity() {
        return labels.to_vec();
    }
    let moved: Vec<PolygonLabel> = labels
        .iter()
        .map(|l| {
            let v = l.visibility;
            PolygonLabel {
                class: l.class,
                corners: transform_corners(&l.corners, t.yaw, t.flip, [0.0, 0.0]),
                visibility: if t.flip { [v[1], v[0], v[3], v[2]] } else { v },
            }
        })
        .collect();
    fit_to_extent(&moved, grid)
}

/// Resamples segmentation targets: nearest for the binary maps, bilinear for
/// the center heatmaps; pixels pulled from outside the grid become invalid.
pub fn transform_seg_targets(seg: &SegTargets, t: &BevTransform, grid: &BevGridSpec, scale: usize) -> SegTargets {
    if t.is_identity() {
        return seg.clone();
    }
    let plan = t.resample_plan(grid, scale);
    let smooth = plan.bilinear(&seg.maps, 4);
    let mut maps = vec![0.0; seg.maps.len()];
    let mut valid = vec![0.0; seg.valid.len()];
    for (o, near) in plan.nearest.iter().enumerate() {
        let Some(i) = near else { continue };
        let i = *i as usize;
        maps[o * 4] = seg.maps[i * 4];
        maps[o * 4 + 1] = seg.maps[i * 4 + 1];
        maps[o * 4 + 2] = smooth[o * 4 + 2];
        maps[o * 4 + 3] = smooth[o * 4 + 3];
        valid[o] = seg.valid[i];
    }
    SegTargets {
        rows: seg.rows,
        cols: seg.cols,
        maps,
        valid,
    }
}

/// Applies the BEV transform and channel dropout to a `[rows, cols, D]` map.
/// Returns `bev` itself when neither is active.
pub fn apply_bev_augment<T: Scalar>(
    g: &mut Graph<T>,
    bev: Var,
    grid: &BevGridSpec,
    aug: &SampledAugment,
) -> TensorResult<Var> {
    let mut x = bev;
    if !aug.bev.is_identity() {
        let plan = aug.bev.resample_plan(grid, 1);
        let taps = plan.taps.iter().map(|t| t.map(|(i, w)| (i, sc::<T>(w)))).collect();
        x = g.resample(x, (grid.rows, grid.cols), taps)?;
    }
    if let Some(keep) = &aug.channel_keep {
        let d = keep.len();
        let scale = sc::<T>(1.0 / (1.0 - aug.p_feature_dropout));
        let n = g.value(x).len();
        let mask = (0..n).map(|i| if keep[i % d] { scale } else { T::zero() }).collect();
        x = g.masked_scale(x, mask);
    }
    Ok(x)
}

/// Rolls an image about the principal point (azimuth `ψ → ψ + roll`) and
/// applies color jitter and noise; the returned calibration keeps every
/// pixel's vehicle-frame ray.
pub fn apply_image_augment(image: &Image, calib: &CameraCalibration, aug: &CameraAugment) -> (Image, CameraCalibration) {
    let mut out = image.clone();
    let mut calib = calib.clone();
    if aug.roll != 0.0 {
        let [u0, v0] = calib.intrinsics.principal_point();
        let (s, c) = aug.roll.sin_cos();
        let (w, h) = (image.width, image.height);
        for y in 0..h {
            for x in 0..w {
                let (du, dv) = (x as f64 + 0.5 - u0, y as f64 + 0.5 - v0);
                // source pixel: rotate back by −roll
                let su = u0 + c * du + s * dv - 0.5;
                let sv = v0 - s * du + c * dv - 0.5;
                let inside = su >= -0.5 && sv >= -0.5 && su <= w as f64 - 0.5 && sv <= h as f64 - 0.5;
                for ch in 0..Image::CHANNELS {
                    let v = if inside { image.sample_bilinear(ch, su, sv) as f32 } else { 0.0 };
                    out.set(ch, x, y, v);
                }
            }
        }
        calib = calib.rolled(aug.roll);
    }
    if let Some(j) = &aug.color {
        apply_color(&mut out, j);
    }
    (out, calib)
}

fn apply_color(image: &mut Image, j: &ColorJitter) {
    use rand::SeedableRng;
    let plane = image.width * image.height;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(j.noise_seed);
    let noise = (j.noise_std > 0.0).then(|| Normal::new(0.0, j.noise_std).unwrap());
    for ch in 0..Image::CHANNELS {
        for v in &mut image.data[ch * plane..(ch + 1) * plane] {
            let mut x = *v as f64;
            x = ((x - 0.5) * j.contrast + 0.5) * j.gain[ch] + j.brightness;
            if let Some(n) = &noise {
                x += n.sample(&mut rng);
            }
            *v = x.clamp(0.0, 1.0) as f32;
        }
    }
}
