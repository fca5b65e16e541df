use rayon::prelude::*;

use super::{VehicleBox, World};
use crate::camera::{CameraCalibration, CameraRig};
use crate::types::Image;

/// Flat colors of the renderer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub sky: [f64; 3],
    /// Brightness factors of the vehicle faces.
    pub side: f64,
    pub top: f64,
    /// Added to the front face, reads as headlights.
    pub front_glow: [f64; 3],
    /// Multiplies the rear face.
    pub rear_tint: [f64; 3],
    /// Subsamples per pixel along each axis.
    pub supersample: usize,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            sky: [0.55, 0.65, 0.85],
            side: 0.75,
            top: 1.0,
            front_glow: [0.35, 0.3, 0.1],
            rear_tint: [1.0, 0.35, 0.3],
            supersample: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Face {
    Front,
    Rear,
    Side,
    Top,
    Bottom,
}

/// Entry parameter and face of the first hit of `origin + t·dir` with the
/// box, for `t` in `(t_min, t_max)`.
pub(crate) fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &VehicleBox, t_min: f64, t_max: f64) -> Option<(f64, Face)> {
    let (s, c) = b.yaw.sin_cos();
    let (ox, oy) = (origin[0] - b.center[0], origin[1] - b.center[1]);
    let o = [c * ox + s * oy, -s * ox + c * oy, origin[2]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let lo = [-0.5 * b.length, -0.5 * b.width, 0.0];
    let hi = [0.5 * b.length, 0.5 * b.width, b.height];
    let (mut t0, mut t1) = (t_min, t_max);
    let mut face = None;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
        // entering through the low face when moving in +a
        let mut entry_low = true;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            entry_low = false;
        }
        if ta > t0 {
            t0 = ta;
            face = Some(match (a, entry_low) {
                (0, true) => Face::Rear,
                (0, false) => Face::Front,
                (1, _) => Face::Side,
                (_, true) => Face::Bottom,
                (_, false) => Face::Top,
            });
        }
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    // origin inside the box: report the exit as a side hit
    Some((t0, face.unwrap_or(Face::Side)))
}

fn shade_ray(world: &World, origin: [f64; 3], dir: [f64; 3], palette: &Palette) -> [f64; 3] {
    let mut best = f64::INFINITY;
    let mut hit = None;
    for (i, v) in world.vehicles.iter().enumerate() {
        if let Some((t, f)) = ray_box(origin, dir, v, 1e-9, best) {
            if t < best {
                best = t;
                hit = Some((i, f));
            }
        }
    }
    let t_ground = if dir[2] < 0.0 { -origin[2] / dir[2] } else { f64::INFINITY };
    if let Some((i, face)) = hit {
        if best <= t_ground {
            let v = &world.vehicles[i];
            return match face {
                Face::Front => std::array::from_fn(|k| v.color[k] * palette.side + palette.front_glow[k]),
                Face::Rear => std::array::from_fn(|k| v.color[k] * palette.side * palette.rear_tint[k]),
                Face::Side | Face::Bottom => v.color.map(|c| c * palette.side),
                Face::Top => {
                    // lighter hood over the front third
                    let p = [origin[0] + best * dir[0] - v.center[0], origin[1] + best * dir[1] - v.center[1]];
                    let lx = v.yaw.cos() * p[0] + v.yaw.sin() * p[1];
                    let k = if lx > v.length / 6.0 { 1.2 } else { palette.top };
                    v.color.map(|c| c * k)
                }
            };
        }
    }
    if t_ground.is_finite() {
        let p = [origin[0] + t_ground * dir[0], origin[1] + t_ground * dir[1]];
        let half = 0.5 * world.marking_width;
        let on_marking = world.markings.iter().any(|m| m.distance(p) <= half);
        let g = if on_marking { world.marking } else { world.ground };
        return [g, g, g * 1.04];
    }
    palette.sky
}

/// Renders one camera of a world given in the vehicle frame. Pixels whose
/// ray falls outside the lens circle stay black.
pub fn render_fisheye(world: &World, calib: &CameraCalibration, palette: &Palette) -> Image {
    let [w, h] = calib.intrinsics.image_size();
    let c = calib.extrinsics.center();
    let origin = [c.x, c.y, c.z];
    let n = palette.supersample.max(1);
    let rows: Vec<Vec<[f32; 3]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut acc = [0.0f64; 3];
                    for sy in 0..n {
                        for sx in 0..n {
                            let px = [x as f64 + (sx as f64 + 0.5) / n as f64, y as f64 + (sy as f64 + 0.5) / n as f64];
                            if let Ok(ray) = calib.unproject_pixel(px) {
                                let col = shade_ray(world, origin, [ray.x, ray.y, ray.z], palette);
                                for k in 0..3 {
                                    acc[k] += col[k];
                                }
                            }
                        }
                    }
                    let s = 1.0 / (n * n) as f64;
                    acc.map(|v| (v * s).clamp(0.0, 1.0) as f32)
                })
                .collect()
        })
        .collect();
    let mut img = Image::new(w, h);
    for (y, row) in rows.iter().enumerate() {
        for (x, px) in row.iter().enumerate() {
            for k in 0..3 {
                img.set(k, x, y, px[k]);
            }
        }
    }
    img
}

/// Renders every camera of the rig, in rig order.
pub fn render_rig(world: &World, rig: &CameraRig, palette: &Palette) -> Vec<Image> {
    rig.cameras.iter().map(|c| render_fisheye(world, c, palette)).collect()
}
