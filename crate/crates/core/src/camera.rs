//! Polynomial fisheye camera model, rig extrinsics and projection encodings.
//!
//! The lens maps an incidence angle `α` (angle between a ray and the optical
//! axis) to a radial distance from the principal point with a quartic
//! polynomial without constant term. The model is purely radial: square
//! pixels and no tangential distortion.
//!
//! Camera frame: `x` along image `u` (right), `y` along image `v` (down),
//! `z` along the optical axis. Extrinsics map vehicle-frame points into the
//! camera frame, `p_cam = R · p_vehicle + t`.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("incidence angle {alpha} outside [0, {alpha_max}]")]
    AngleOutOfRange { alpha: f64, alpha_max: f64 },
    #[error("radius {radius} px outside [0, {max_radius}] px")]
    RadiusOutOfRange { radius: f64, max_radius: f64 },
    #[error("pixel ({u}, {v}) outside the image or the fisheye circle")]
    PixelOutOfRange { u: f64, v: f64 },
    #[error("ray has zero length")]
    ZeroRay,
    #[error("inverse lens polynomial did not converge for r_d = {radius} (residual {residual:e})")]
    NoConvergence { radius: f64, residual: f64 },
}

pub type CameraResult<T> = Result<T, CameraError>;

const INVERSE_TOLERANCE: f64 = 1e-12;
const INVERSE_MAX_ITERATIONS: usize = 60;
const MONOTONICITY_SAMPLES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraName {
    Front,
    Left,
    Rear,
    Right,
}

impl CameraName {
    pub const ALL: [CameraName; 4] = [
        CameraName::Front,
        CameraName::Left,
        CameraName::Rear,
        CameraName::Right,
    ];

    /// Stable identity index, independent of the order cameras are listed in.
    pub fn index(self) -> usize {
        match self {
            CameraName::Front => 0,
            CameraName::Left => 1,
            CameraName::Rear => 2,
            CameraName::Right => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CameraName::Front => "front",
            CameraName::Left => "left",
            CameraName::Rear => "rear",
            CameraName::Right => "right",
        }
    }
}

/// Lens polynomial, principal point, image size and field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    coeffs: [f64; 4],
    principal_point: [f64; 2],
    image_size: [usize; 2],
    alpha_max: f64,
    max_radius: f64,
}

impl CameraIntrinsics {
    /// Validates `c1 > 0`, `alpha_max ∈ (0, π]` and a strictly increasing
    /// radius over `[0, alpha_max]` (derivative sampled densely).
    pub fn new(
        coeffs: [f64; 4],
        principal_point: [f64; 2],
        image_size: [usize; 2],
        alpha_max: f64,
    ) -> CameraResult<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(CameraError::InvalidIntrinsics("non-finite coefficient".into()));
        }
        if coeffs[0] <= 0.0 {
            return Err(CameraError::InvalidIntrinsics(format!(
                "c1 must be positive, got {}",
                coeffs[0]
            )));
        }
        if !(alpha_max > 0.0 && alpha_max <= std::f64::consts::PI) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "alpha_max must lie in (0, pi], got {alpha_max}"
            )));
        }
        if image_size[0] == 0 || image_size[1] == 0 {
            return Err(CameraError::InvalidIntrinsics("empty image".into()));
        }
        if principal_point.iter().any(|p| !p.is_finite()) {
            return Err(CameraError::InvalidIntrinsics("non-finite principal point".into()));
        }
        for k in 0..=MONOTONICITY_SAMPLES {
            let a = alpha_max * k as f64 / MONOTONICITY_SAMPLES as f64;
            let d = poly_derivative(&coeffs, a);
            if d <= 0.0 {
                return Err(CameraError::InvalidIntrinsics(format!(
                    "lens polynomial not increasing at alpha={a:.6} (dr/dalpha={d:.6})"
                )));
            }
        }
        let max_radius = poly(&coeffs, alpha_max);
        Ok(CameraIntrinsics {
            coeffs,
            principal_point,
            image_size,
            alpha_max,
            max_radius,
        })
    }

    pub fn coeffs(&self) -> [f64; 4] {
        self.coeffs
    }

    pub fn principal_point(&self) -> [f64; 2] {
        self.principal_point
    }

    pub fn image_size(&self) -> [usize; 2] {
        self.image_size
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    /// Image radius of the fisheye circle, `r_d(alpha_max)`.
    pub fn max_radius(&self) -> f64 {
        self.max_radius
    }

    pub fn peft_forward(&self, alpha: f64) -> CameraResult<f64> {
        if !(0.0..=self.alpha_max).contains(&alpha) {
            return Err(CameraError::AngleOutOfRange {
                alpha,
                alpha_max: self.alpha_max,
            });
        }
        Ok(poly(&self.coeffs, alpha))
    }

    /// Root of `r_d(α) = radius` on `[0, alpha_max]`.
    ///
    /// Newton iteration seeded at `radius / c1`, falling back to bisection
    /// whenever a step leaves the current bracket.
    pub fn peft_inverse(&self, radius: f64) -> CameraResult<f64> {
        if !(0.0..=self.max_radius).contains(&radius) {
            return Err(CameraError::RadiusOutOfRange {
                radius,
                max_radius: self.max_radius,
            });
        }
        if radius == 0.0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0, self.alpha_max);
        let mut alpha = (radius / self.coeffs[0]).clamp(lo, hi);
        let mut residual = f64::INFINITY;
        for _ in 0..INVERSE_MAX_ITERATIONS {
            residual = poly(&self.coeffs, alpha) - radius;
            if residual.abs() <= INVERSE_TOLERANCE {
                return Ok(alpha);
            }
            if residual < 0.0 {
                lo = alpha;
            } else {
                hi = alpha;
            }
            let slope = poly_derivative(&self.coeffs, alpha);
            let newton = alpha - residual / slope;
            alpha = if slope > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * hi.max(1.0) {
                // bracket collapsed to adjacent floats; accept the better end
                let r_lo = (poly(&self.coeffs, lo) - radius).abs();
                let r_hi = (poly(&self.coeffs, hi) - radius).abs();
                let (best, res) = if r_lo <= r_hi { (lo, r_lo) } else { (hi, r_hi) };
                if res <= INVERSE_TOLERANCE * radius.max(1.0) {
                    return Ok(best);
                }
                residual = res;
                break;
            }
        }
        Err(CameraError::NoConvergence { radius, residual })
    }
}

fn poly(c: &[f64; 4], a: f64) -> f64 {
    a * (c[0] + a * (c[1] + a * (c[2] + a * c[3])))
}

fn poly_derivative(c: &[f64; 4], a: f64) -> f64 {
    c[0] + a * (2.0 * c[1] + a * (3.0 * c[2] + a * 4.0 * c[3]))
}

/// Rigid transform from the vehicle frame into the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraExtrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> CameraResult<Self> {
        let err = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-9) {
            return Err(CameraError::InvalidExtrinsics(format!(
                "rotation not orthonormal (max deviation {err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(CameraError::InvalidExtrinsics(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(CameraError::InvalidExtrinsics("non-finite translation".into()));
        }
        Ok(CameraExtrinsics {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        CameraExtrinsics {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera mounted at `position` (vehicle frame) looking along heading `yaw`
    /// (about `z`, 0 = forward), tilted down by `pitch_down` and rolled about
    /// the optical axis by `roll`.
    pub fn looking(position: Vector3<f64>, yaw: f64, pitch_down: f64, roll: f64) -> Self {
        let forward = Vector3::new(
            pitch_down.cos() * yaw.cos(),
            pitch_down.cos() * yaw.sin(),
            -pitch_down.sin(),
        );
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        let base = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = roll_matrix(roll) * base;
        CameraExtrinsics {
            rotation,
            translation: -(rotation * position),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in the vehicle frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Composes an additional rotation about the optical axis.
    pub fn rolled(&self, roll: f64) -> Self {
        let rz = roll_matrix(roll);
        CameraExtrinsics {
            rotation: rz * self.rotation,
            translation: rz * self.translation,
        }
    }
}

fn roll_matrix(roll: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), roll).matrix()
}

/// Intrinsics and extrinsics of one rig camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration {
    pub name: CameraName,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl CameraCalibration {
    /// Unit ray in the vehicle frame through a pixel.
    pub fn unproject_pixel(&self, pixel: [f64; 2]) -> CameraResult<Vector3<f64>> {
        let cam = self.unproject_camera_frame(pixel)?;
        Ok(self.extrinsics.rotation.transpose() * cam)
    }

    fn unproject_camera_frame(&self, pixel: [f64; 2]) -> CameraResult<Vector3<f64>> {
        let [w, h] = self.intrinsics.image_size;
        let [u, v] = pixel;
        let out = CameraError::PixelOutOfRange { u, v };
        if !(u >= 0.0 && v >= 0.0 && u <= w as f64 && v <= h as f64) {
            return Err(out);
        }
        let [u0, v0] = self.intrinsics.principal_point;
        let (du, dv) = (u - u0, v - v0);
        let radius = du.hypot(dv);
        if radius > self.intrinsics.max_radius {
            return Err(out);
        }
        let alpha = self.intrinsics.peft_inverse(radius)?;
        if radius == 0.0 {
            return Ok(Vector3::z());
        }
        let s = alpha.sin() / radius;
        Ok(Vector3::new(s * du, s * dv, alpha.cos()))
    }

    /// Pixel hit by a vehicle-frame ray direction; `None` beyond the field of view.
    ///
    /// The returned pixel may fall outside the image rectangle; use
    /// [`CameraCalibration::pixel_in_image`] to test that.
    pub fn project_ray(&self, ray: &Vector3<f64>) -> CameraResult<Option<[f64; 2]>> {
        let norm = ray.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(CameraError::ZeroRay);
        }
        let d = self.extrinsics.rotation * (ray / norm);
        let lateral = d.x.hypot(d.y);
        let alpha = lateral.atan2(d.z);
        if alpha > self.intrinsics.alpha_max {
            return Ok(None);
        }
        let [u0, v0] = self.intrinsics.principal_point;
        if lateral == 0.0 {
            return Ok(Some([u0, v0]));
        }
        let r = poly(&self.intrinsics.coeffs, alpha);
        Ok(Some([u0 + r * d.x / lateral, v0 + r * d.y / lateral]))
    }

    /// Projects a vehicle-frame point.
    pub fn project_point(&self, point: &Vector3<f64>) -> CameraResult<Option<[f64; 2]>> {
        self.project_ray(&(point - self.extrinsics.center()))
    }

    pub fn pixel_in_image(&self, pixel: [f64; 2]) -> bool {
        let [w, h] = self.intrinsics.image_size;
        pixel[0] >= 0.0 && pixel[1] >= 0.0 && pixel[0] <= w as f64 && pixel[1] <= h as f64
    }

    /// Whether a vehicle-frame point falls inside both the field of view and the image.
    pub fn sees_point(&self, point: &Vector3<f64>) -> bool {
        matches!(self.project_point(point), Ok(Some(px)) if self.pixel_in_image(px))
    }

    /// Same camera with the image rotated by `roll` about the principal point.
    ///
    /// A pixel at azimuth `ψ` moves to azimuth `ψ + roll`; the extrinsics are
    /// rolled by the same angle so every pixel keeps its vehicle-frame ray.
    pub fn rolled(&self, roll: f64) -> Self {
        CameraCalibration {
            name: self.name,
            intrinsics: self.intrinsics.clone(),
            extrinsics: self.extrinsics.rolled(roll),
        }
    }
}

/// Geometry of the network input relative to the native camera image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputGeometry {
    /// Network input size (width, height) after crop and resize.
    pub input_size: [usize; 2],
    /// Rows removed from the top of the native image before resizing.
    pub crop_top: usize,
}

impl InputGeometry {
    /// Native pixel corresponding to a continuous network-input coordinate.
    pub fn to_native(&self, intrinsics: &CameraIntrinsics, x: f64, y: f64) -> [f64; 2] {
        let [nw, nh] = intrinsics.image_size();
        let sx = nw as f64 / self.input_size[0] as f64;
        let sy = (nh - self.crop_top.min(nh)) as f64 / self.input_size[1] as f64;
        [x * sx, self.crop_top as f64 + y * sy]
    }
}

/// Vehicle-frame ray per feature-map cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionEncoding {
    pub camera: CameraName,
    pub rows: usize,
    pub cols: usize,
    /// Row-major unit directions; invalid cells hold the optical axis.
    pub rays: Vec<[f64; 3]>,
    /// False where the cell center lies outside the fisheye circle.
    pub valid: Vec<bool>,
}

/// Samples one ray per feature cell at the cell-center pixel of the cropped,
/// resized input. `pitch` is the cell size in input pixels (the endpoint stride).
pub fn build_projection_encoding(
    calib: &CameraCalibration,
    geometry: &InputGeometry,
    shape: (usize, usize),
    pitch: (f64, f64),
) -> CameraResult<ProjectionEncoding> {
    let (rows, cols) = shape;
    let [iw, ih] = geometry.input_size;
    if rows == 0 || cols == 0 {
        return Err(CameraError::InvalidIntrinsics("empty feature grid".into()));
    }
    if cols as f64 * pitch.0 > iw as f64 + 1e-9 || rows as f64 * pitch.1 > ih as f64 + 1e-9 {
        return Err(CameraError::InvalidIntrinsics(format!(
            "feature grid {rows}x{cols} with pitch {pitch:?} exceeds input {iw}x{ih}"
        )));
    }
    let axis = calib.extrinsics.rotation.transpose() * Vector3::z();
    let mut rays = Vec::with_capacity(rows * cols);
    let mut valid = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let x = (j as f64 + 0.5) * pitch.0;
            let y = (i as f64 + 0.5) * pitch.1;
            let px = geometry.to_native(&calib.intrinsics, x, y);
            match calib.unproject_pixel(px) {
                Ok(r) => {
                    rays.push([r.x, r.y, r.z]);
                    valid.push(true);
                }
                Err(CameraError::PixelOutOfRange { .. }) => {
                    rays.push([axis.x, axis.y, axis.z]);
                    valid.push(false);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(ProjectionEncoding {
        camera: calib.name,
        rows,
        cols,
        rays,
        valid,
    })
}

/// The four surround-view cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<CameraCalibration>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    cameras: Vec<CameraFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    name: CameraName,
    c: [f64; 4],
    principal_point: [f64; 2],
    image_size: [usize; 2],
    alpha_max: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraCalibration>) -> CameraResult<Self> {
        let mut seen = [false; 4];
        for cam in &cameras {
            let idx = cam.name.index();
            if seen[idx] {
                return Err(CameraError::InvalidRig(format!(
                    "camera '{}' listed twice",
                    cam.name.as_str()
                )));
            }
            seen[idx] = true;
        }
        Ok(CameraRig { cameras })
    }

    /// Synthetic four-camera rig: 190° quartic lenses at bumper and mirror
    /// positions of a 4.7 m car whose rear axle sits 1 m ahead of the rear bumper.
    pub fn synthetic_default() -> Self {
        let intrinsics = CameraIntrinsics::new(
            [38.0, 1.2, -1.0, 0.12],
            [64.0, 56.0],
            [128, 109],
            95f64.to_radians(),
        )
        .expect("default intrinsics are valid");
        let deg = f64::to_radians;
        let mk = |name, pos: [f64; 3], yaw: f64, pitch: f64| CameraCalibration {
            name,
            intrinsics: intrinsics.clone(),
            extrinsics: CameraExtrinsics::looking(Vector3::from(pos), deg(yaw), deg(pitch), 0.0),
        };
        CameraRig {
            cameras: vec![
                mk(CameraName::Front, [3.65, 0.0, 0.65], 0.0, 20.0),
                mk(CameraName::Left, [2.0, 0.95, 1.05], 90.0, 50.0),
                mk(CameraName::Rear, [-0.95, 0.0, 0.95], 180.0, 30.0),
                mk(CameraName::Right, [2.0, -0.95, 1.05], -90.0, 50.0),
            ],
        }
    }

    pub fn get(&self, name: CameraName) -> Option<&CameraCalibration> {
        self.cameras.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let cameras = self
            .cameras
            .iter()
            .map(|c| {
                let r = c.extrinsics.rotation;
                let t = c.extrinsics.translation;
                CameraFile {
                    name: c.name,
                    c: c.intrinsics.coeffs,
                    principal_point: c.intrinsics.principal_point,
                    image_size: c.intrinsics.image_size,
                    alpha_max: c.intrinsics.alpha_max,
                    rotation: [
                        r[(0, 0)],
                        r[(0, 1)],
                        r[(0, 2)],
                        r[(1, 0)],
                        r[(1, 1)],
                        r[(1, 2)],
                        r[(2, 0)],
                        r[(2, 1)],
                        r[(2, 2)],
                    ],
                    translation: [t.x, t.y, t.z],
                }
            })
            .collect();
        serde_json::to_value(RigFile { cameras }).expect("rig serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> crate::Result<Self> {
        let file: RigFile = serde_json::from_value(value.clone())
            .map_err(|e| crate::Error::json("calibration", e))?;
        let cameras = file
            .cameras
            .into_iter()
            .map(|c| {
                let intrinsics =
                    CameraIntrinsics::new(c.c, c.principal_point, c.image_size, c.alpha_max)?;
                let extrinsics = CameraExtrinsics::new(
                    Matrix3::from_row_slice(&c.rotation),
                    Vector3::from(c.translation),
                )?;
                Ok(CameraCalibration {
                    name: c.name,
                    intrinsics,
                    extrinsics,
                })
            })
            .collect::<CameraResult<Vec<_>>>()?;
        Ok(CameraRig::new(cameras)?)
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| crate::Error::json(path.display().to_string(), e))?;
        Self::from_json(&value)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_json()).expect("rig serializes");
        std::fs::write(path, text).map_err(|e| crate::Error::io(path, e))
    }
}
