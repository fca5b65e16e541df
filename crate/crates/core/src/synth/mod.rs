//! Procedural parking scenes, a ray-cast fisheye renderer and on-disk
//! datasets standing in for a recorded, annotated fleet dataset.

mod dataset;
mod labels;
mod render;

pub use dataset::{
    generate_dataset, load_sample, sample_dir, DatasetManifest, ImageSidecar, LoadedSample, SampleRecord,
    MANIFEST_FILE, RIG_FILE,
};
pub use labels::{derive_labels, segment_hits_box, visible_from_rig};
pub use render::{render_fisheye, render_rig, Palette};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polygon::canonical_corners;
use crate::types::Point2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Perpendicular,
    Parallel,
    /// Each side of the aisle draws its own kind.
    Mixed,
}

/// Closed interval to sample uniformly from.
pub type Range = [f64; 2];

fn uniform(rng: &mut impl Rng, r: Range) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Scene distribution. Distances in meters, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub layout: LayoutKind,
    /// Perpendicular slot (width across the aisle direction, depth).
    pub perpendicular_slot: [Range; 2],
    /// Parallel slot (length along the aisle, depth).
    pub parallel_slot: [Range; 2],
    /// Slots per row, inclusive range.
    pub slots_per_row: [usize; 2],
    /// Probability that each side of the aisle has a row.
    pub row_probability: f64,
    /// Distance from the aisle center line to the entry lines.
    pub aisle_half_width: Range,
    pub occupancy: f64,
    /// Probability that a parked vehicle faces the aisle.
    pub reverse_parked: f64,
    pub vehicle_length: Range,
    pub vehicle_width: Range,
    pub vehicle_height: Range,
    /// Ego offset along the aisle.
    pub ego_x: Range,
    /// Ego lateral offset from the aisle center.
    pub ego_y: Range,
    pub ego_yaw_deg: Range,
    pub marking_width: f64,
    pub ground_intensity: Range,
    pub marking_intensity: Range,
    /// All geometry must fit inside this radius around the aisle center.
    pub world_radius: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            layout: LayoutKind::Perpendicular,
            perpendicular_slot: [[2.5, 2.8], [5.0, 5.5]],
            parallel_slot: [[5.8, 6.5], [2.3, 2.6]],
            slots_per_row: [4, 9],
            row_probability: 0.85,
            aisle_half_width: [3.0, 4.0],
            occupancy: 0.4,
            reverse_parked: 0.0,
            vehicle_length: [4.2, 4.8],
            vehicle_width: [1.75, 1.95],
            vehicle_height: [1.4, 1.7],
            ego_x: [-2.0, 2.0],
            ego_y: [-0.5, 0.5],
            ego_yaw_deg: [-5.0, 5.0],
            marking_width: 0.25,
            ground_intensity: [0.25, 0.4],
            marking_intensity: [0.85, 0.95],
            world_radius: 30.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("scene.{m}")));
        for (name, p) in [
            ("occupancy", self.occupancy),
            ("row_probability", self.row_probability),
            ("reverse_parked", self.reverse_parked),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        let ranges = [
            ("perpendicular_slot.width", self.perpendicular_slot[0]),
            ("perpendicular_slot.depth", self.perpendicular_slot[1]),
            ("parallel_slot.length", self.parallel_slot[0]),
            ("parallel_slot.depth", self.parallel_slot[1]),
            ("aisle_half_width", self.aisle_half_width),
            ("vehicle_length", self.vehicle_length),
            ("vehicle_width", self.vehicle_width),
            ("vehicle_height", self.vehicle_height),
            ("ground_intensity", self.ground_intensity),
            ("marking_intensity", self.marking_intensity),
        ];
        for (name, r) in ranges {
            if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return err(format!("{name} must be a positive, ordered range, got {r:?}"));
            }
        }
        for (name, r) in [("ego_x", self.ego_x), ("ego_y", self.ego_y), ("ego_yaw_deg", self.ego_yaw_deg)] {
            if !(r[1] >= r[0] && r[0].is_finite() && r[1].is_finite()) {
                return err(format!("{name} must be an ordered range, got {r:?}"));
            }
        }
        if self.slots_per_row[1] < self.slots_per_row[0] {
            return err(format!("slots_per_row must be ordered, got {:?}", self.slots_per_row));
        }
        if !(self.marking_width > 0.0 && self.world_radius > 0.0) {
            return err("marking_width and world_radius must be positive".into());
        }
        Ok(())
    }

    pub fn with_occupancy(&self, occupancy: f64) -> Self {
        SceneSpec {
            occupancy,
            ..self.clone()
        }
    }
}

/// Ground-plane marking stripe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point2,
    pub b: Point2,
}

impl Segment {
    pub fn distance(&self, p: Point2) -> f64 {
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 > 0.0 {
            (((p[0] - self.a[0]) * d[0] + (p[1] - self.a[1]) * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p[0] - self.a[0] - t * d[0]).hypot(p[1] - self.a[1] - t * d[1])
    }
}

/// Parked vehicle as an extruded box; local `+x` is its front.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleBox {
    pub center: Point2,
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Body intensity, `[0, 1]` RGB.
    pub color: [f64; 3],
}

impl VehicleBox {
    /// Footprint corners, front edge first, clockwise from above.
    pub fn footprint(&self) -> [Point2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        let at = |lx: f64, ly: f64| [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly];
        // front-left, front-right, rear-right, rear-left
        [at(hl, hw), at(hl, -hw), at(-hl, -hw), at(-hl, hw)]
    }
}

/// Parking slot rectangle; corners 0-1 are the entry line, clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub corners: [Point2; 4],
    /// Index into [`World::vehicles`] of the vehicle parked in it.
    pub vehicle: Option<usize>,
}

/// Pose of the ego rear axle in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl EgoPose {
    pub fn to_vehicle(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub slots: Vec<Slot>,
    pub vehicles: Vec<VehicleBox>,
    pub markings: Vec<Segment>,
    pub marking_width: f64,
    pub ego: EgoPose,
    pub ground: f64,
    pub marking: f64,
}

impl World {
    /// The same world seen from the rear axle: every element expressed in
    /// the vehicle frame and the ego pose reset to the origin.
    pub fn in_vehicle_frame(&self) -> World {
        let e = self.ego;
        let p = |q: Point2| e.to_vehicle(q);
        World {
            slots: self
                .slots
                .iter()
                .map(|s| Slot {
                    corners: s.corners.map(p),
                    vehicle: s.vehicle,
                })
                .collect(),
            vehicles: self
                .vehicles
                .iter()
                .map(|v| VehicleBox {
                    center: p(v.center),
                    yaw: v.yaw - e.yaw,
                    ..*v
                })
                .collect(),
            markings: self.markings.iter().map(|m| Segment { a: p(m.a), b: p(m.b) }).collect(),
            ego: EgoPose { x: 0.0, y: 0.0, yaw: 0.0 },
            ..self.clone()
        }
    }
}

/// Builds a slot rectangle with its entry line centered at `entry_mid`,
/// `inward` pointing from the entry line into the slot.
fn slot_corners(entry_mid: Point2, along: Point2, inward: Point2, width: f64, depth: f64) -> [Point2; 4] {
    let hw = 0.5 * width;
    let p = |a: f64, d: f64| [entry_mid[0] + a * along[0] + d * inward[0], entry_mid[1] + a * along[1] + d * inward[1]];
    let raw = [p(-hw, 0.0), p(hw, 0.0), p(hw, depth), p(-hw, depth)];
    canonical_corners(raw, (0, 1)).expect("entry is a rectangle edge")
}

/// Samples a world from `spec`; deterministic in `rng`.
pub fn generate_scene(spec: &SceneSpec, rng: &mut impl Rng) -> Result<World> {
    spec.validate()?;
    let aisle = uniform(rng, spec.aisle_half_width);
    let mut slots = Vec::new();
    let mut vehicles = Vec::new();
    let mut markings = Vec::new();
    let mut sides: Vec<f64> = [1.0, -1.0].into_iter().filter(|_| rng.gen::<f64>() < spec.row_probability).collect();
    if sides.is_empty() {
        sides.push(if rng.gen::<bool>() { 1.0 } else { -1.0 });
    }
    for side in sides {
        let kind = match spec.layout {
            LayoutKind::Mixed => {
                if rng.gen::<bool>() {
                    LayoutKind::Perpendicular
                } else {
                    LayoutKind::Parallel
                }
            }
            k => k,
        };
        let (pitch, depth) = match kind {
            LayoutKind::Parallel => (uniform(rng, spec.parallel_slot[0]), uniform(rng, spec.parallel_slot[1])),
            _ => (uniform(rng, spec.perpendicular_slot[0]), uniform(rng, spec.perpendicular_slot[1])),
        };
        let n = rng.gen_range(spec.slots_per_row[0]..=spec.slots_per_row[1]);
        let run = pitch * n as f64;
        let far = aisle + depth;
        if run * 0.5 > spec.world_radius || far > spec.world_radius {
            return Err(Error::Scene(format!(
                "row of {n} slots ({run:.1} m by {depth:.1} m) at {aisle:.1} m does not fit a {} m world",
                spec.world_radius
            )));
        }
        let slack = (spec.world_radius - 0.5 * run).min(0.5 * pitch);
        let start = -0.5 * run + rng.gen_range(-slack..=slack);
        let inward = [0.0, side];
        for i in 0..n {
            let mid = [start + (i as f64 + 0.5) * pitch, side * aisle];
            let corners = slot_corners(mid, [1.0, 0.0], inward, pitch, depth);
            // side lines and the back line; the entry stays open
            for k in 1..4 {
                markings.push(Segment {
                    a: corners[k],
                    b: corners[(k + 1) % 4],
                });
            }
            let occupied = rng.gen::<f64>() < spec.occupancy;
            let vehicle = occupied.then(|| {
                let (slot_len, slot_w) = match kind {
                    LayoutKind::Parallel => (pitch, depth),
                    _ => (depth, pitch),
                };
                let length = uniform(rng, spec.vehicle_length).min(slot_len - 0.3);
                let width = uniform(rng, spec.vehicle_width).min(slot_w - 0.3);
                let height = uniform(rng, spec.vehicle_height);
                let jitter_l = rng.gen_range(-0.1..=0.1) * (slot_len - length);
                let jitter_w = rng.gen_range(-0.1..=0.1) * (slot_w - width);
                let center_slot = [mid[0], side * (aisle + 0.5 * depth)];
                let reverse = rng.gen::<f64>() < spec.reverse_parked;
                let (center, yaw) = match kind {
                    LayoutKind::Parallel => {
                        let yaw = if reverse { std::f64::consts::PI } else { 0.0 };
                        ([center_slot[0] + jitter_l, center_slot[1] + jitter_w], yaw)
                    }
                    _ => {
                        // nose in: the front faces away from the aisle
                        let out = side * std::f64::consts::FRAC_PI_2;
                        let yaw = if reverse { -out } else { out };
                        ([center_slot[0] + jitter_w, center_slot[1] + jitter_l], yaw)
                    }
                };
                let yaw = yaw + rng.gen_range(-2f64..=2.0).to_radians();
                let shade = rng.gen_range(0.15..0.9);
                let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.85..1.0));
                vehicles.push(VehicleBox {
                    center,
                    yaw,
                    length,
                    width,
                    height,
                    color: tint.map(|t| t * shade),
                });
                vehicles.len() - 1
            });
            slots.push(Slot { corners, vehicle });
        }
    }
    let ego = EgoPose {
        x: uniform(rng, spec.ego_x),
        y: uniform(rng, spec.ego_y),
        yaw: uniform(rng, spec.ego_yaw_deg).to_radians(),
    };
    Ok(World {
        slots,
        vehicles,
        markings,
        marking_width: spec.marking_width,
        ego,
        ground: uniform(rng, spec.ground_intensity),
        marking: uniform(rng, spec.marking_intensity),
    })
}

/// Per-sample RNG stream derived from a dataset seed and the sample index.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
