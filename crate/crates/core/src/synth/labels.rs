use nalgebra::Vector3;

use super::render::ray_box;
use super::{VehicleBox, World};
use crate::camera::CameraRig;
use crate::heads::fit_to_extent;
use crate::types::{BevGridSpec, ObjectClass, PolygonLabel};

/// Whether the segment `a → b` passes through the box.
pub fn segment_hits_box(a: [f64; 3], b: [f64; 3], v: &VehicleBox) -> bool {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    ray_box(a, d, v, 0.0, 1.0).is_some()
}

/// A ground point counts as visible when at least one camera sees it
/// inside its image with no vehicle box on the line of sight.
pub fn visible_from_rig(p: [f64; 3], vehicles: &[VehicleBox], rig: &CameraRig) -> bool {
    let point = Vector3::new(p[0], p[1], p[2]);
    rig.cameras.iter().any(|cam| {
        if !cam.sees_point(&point) {
            return false;
        }
        let c = cam.extrinsics.center();
        let c = [c.x, c.y, c.z];
        !vehicles.iter().any(|v| segment_hits_box(p, c, v))
    })
}

/// Vehicle-frame labels of a world: vacant slots as parking slots with
/// per-corner visibility, parked vehicles by their footprint (front edge
/// first). Labels mostly outside the grid are dropped, the rest clamped.
pub fn derive_labels(world: &World, rig: &CameraRig, grid: &BevGridSpec) -> Vec<PolygonLabel> {
    let local = world.in_vehicle_frame();
    let mut labels = Vec::new();
    for slot in &local.slots {
        if slot.vehicle.is_some() {
            continue;
        }
        // lifted slightly so that grazing rays along the ground do not count as hits
        let visibility = slot.corners.map(|c| visible_from_rig([c[0], c[1], 0.02], &local.vehicles, rig));
        labels.push(PolygonLabel {
            class: ObjectClass::Parking,
            corners: slot.corners,
            visibility,
        });
    }
    for v in &local.vehicles {
        labels.push(PolygonLabel {
            class: ObjectClass::Vehicle,
            corners: v.footprint(),
            visibility: [true; 4],
        });
    }
    fit_to_extent(&labels, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, sample_rng, EgoPose, SceneSpec, Slot};

    fn world(slots: Vec<Slot>, vehicles: Vec<VehicleBox>) -> World {
        World {
            slots,
            vehicles,
            markings: vec![],
            marking_width: 0.15,
            ego: EgoPose { x: 0.0, y: 0.0, yaw: 0.0 },
            ground: 0.3,
            marking: 0.9,
        }
    }

    fn slot_at(x: f64, y: f64) -> Slot {
        Slot {
            corners: [[x + 1.25, y], [x - 1.25, y], [x - 1.25, y + 5.0], [x + 1.25, y + 5.0]],
            vehicle: None,
        }
    }

    #[test]
    fn unoccluded_slot_fully_visible() {
        let rig = CameraRig::synthetic_default();
        let labels = derive_labels(&world(vec![slot_at(2.0, 3.5)], vec![]), &rig, &BevGridSpec::default());
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].visibility, [true; 4]);
    }

    /// Brute force: sample points along every camera's line of sight and
    /// test them against the box interior.
    fn brute_visible(p: [f64; 3], vehicles: &[VehicleBox], rig: &CameraRig) -> bool {
        rig.cameras.iter().any(|cam| {
            if !cam.sees_point(&Vector3::new(p[0], p[1], p[2])) {
                return false;
            }
            let c = cam.extrinsics.center();
            !(0..=4000).any(|i| {
                let t = i as f64 / 4000.0;
                let q = [p[0] + t * (c.x - p[0]), p[1] + t * (c.y - p[1]), p[2] + t * (c.z - p[2])];
                vehicles.iter().any(|v| {
                    let (s, co) = v.yaw.sin_cos();
                    let (dx, dy) = (q[0] - v.center[0], q[1] - v.center[1]);
                    let (lx, ly) = (co * dx + s * dy, -s * dx + co * dy);
                    lx.abs() < 0.5 * v.length && ly.abs() < 0.5 * v.width && q[2] > 0.0 && q[2] < v.height
                })
            })
        })
    }

    #[test]
    fn corner_behind_vehicle_is_hidden() {
        let rig = CameraRig::synthetic_default();
        // a tall van between the left mirror camera and the far corners
        let van = VehicleBox {
            center: [2.0, 5.0],
            yaw: 0.0,
            length: 12.0,
            width: 2.0,
            height: 2.8,
            color: [0.5; 3],
        };
        let s = slot_at(2.0, 6.5);
        let labels = derive_labels(&world(vec![s], vec![van]), &rig, &BevGridSpec::default());
        let far = labels.iter().find(|l| l.class == ObjectClass::Parking).unwrap();
        for (k, c) in s.corners.iter().enumerate() {
            let expect = brute_visible([c[0], c[1], 0.02], &[van], &rig);
            assert_eq!(far.visibility[k], expect, "corner {k}");
        }
        assert!(far.visibility.iter().any(|v| !v));
    }

    #[test]
    fn visibility_matches_brute_force_on_random_scenes() {
        let rig = CameraRig::synthetic_default();
        let spec = SceneSpec::default().with_occupancy(0.6);
        let mut checked = 0;
        let mut hidden = 0;
        for seed in 0..4 {
            let w = generate_scene(&spec, &mut sample_rng(seed, 0)).unwrap().in_vehicle_frame();
            for s in w.slots.iter().filter(|s| s.vehicle.is_none()) {
                for c in &s.corners {
                    let p = [c[0], c[1], 0.02];
                    let fast = visible_from_rig(p, &w.vehicles, &rig);
                    assert_eq!(fast, brute_visible(p, &w.vehicles, &rig), "{p:?}");
                    checked += 1;
                    hidden += usize::from(!fast);
                }
            }
        }
        assert!(checked > 20);
        assert!(hidden > 0);
    }

    #[test]
    fn far_slot_dropped() {
        let rig = CameraRig::synthetic_default();
        // 2.5 m wide, only 0.5 m of it inside the grid
        let s = Slot {
            corners: [[13.75, 3.0], [11.25, 3.0], [11.25, 8.0], [13.75, 8.0]],
            vehicle: None,
        };
        let s = Slot {
            corners: s.corners.map(|p| [p[0] + 0.75, p[1]]),
            ..s
        };
        assert!(derive_labels(&world(vec![s], vec![]), &rig, &BevGridSpec::default()).is_empty());
    }
}
