//! Label encoding for the detection grid and the segmentation maps.

use super::det_channel as ch;
use crate::polygon::{area, clip_convex, contains_point, convex_hull};
use crate::types::{BevGridSpec, ObjectClass, PolygonLabel, Point2};

/// Objects with a larger fraction of their area outside the grid are dropped.
pub const MAX_OUTSIDE_FRACTION: f64 = 0.7;

/// Standard deviation of the center heatmap blobs, in map pixels.
pub const CENTER_SIGMA_PX: f64 = 2.0;

/// Drops labels mostly outside the grid and clamps the rest to its extent.
pub fn fit_to_extent(labels: &[PolygonLabel], grid: &BevGridSpec) -> Vec<PolygonLabel> {
    let extent = grid.extent_polygon();
    labels
        .iter()
        .filter_map(|l| {
            let hull = convex_hull(&l.corners);
            let total = area(&hull);
            if total <= 0.0 {
                return None;
            }
            let inside = area(&clip_convex(&hull, &extent));
            if 1.0 - inside / total > MAX_OUTSIDE_FRACTION {
                return None;
            }
            Some(PolygonLabel {
                corners: l.corners.map(|p| grid.clamp(p)),
                ..l.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellTarget {
    /// Index into the label list the targets were encoded from.
    pub label: usize,
    pub class: ObjectClass,
    pub corners: [Point2; 4],
    pub visibility: [bool; 4],
}

/// One optional target per grid cell, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Option<CellTarget>>,
}

impl DetectionTargets {
    pub fn positives(&self) -> impl Iterator<Item = (usize, &CellTarget)> {
        self.cells.iter().enumerate().filter_map(|(i, c)| c.as_ref().map(|c| (i, c)))
    }

    pub fn num_positives(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// Assigns every label to the cell containing its centroid. When two labels
/// share a cell the one with the larger area is kept (ties: lower index).
/// Labels are expected to be fitted to the extent already.
pub fn encode_detection(labels: &[PolygonLabel], grid: &BevGridSpec) -> DetectionTargets {
    let mut cells: Vec<Option<CellTarget>> = vec![None; grid.cells()];
    let mut best_area = vec![f64::NEG_INFINITY; grid.cells()];
    for (i, l) in labels.iter().enumerate() {
        let c = grid.clamp(l.centroid());
        let (r, col) = cell_index(grid, c);
        let idx = r * grid.cols + col;
        let a = area(&l.corners);
        if a > best_area[idx] {
            best_area[idx] = a;
            cells[idx] = Some(CellTarget {
                label: i,
                class: l.class,
                corners: l.corners,
                visibility: l.visibility,
            });
        }
    }
    DetectionTargets {
        rows: grid.rows,
        cols: grid.cols,
        cells,
    }
}

/// Cell of a point inside the closed extent (boundary points go to the edge cell).
fn cell_index(grid: &BevGridSpec, p: Point2) -> (usize, usize) {
    let r = ((grid.half_x() - p[0]) / grid.cell_size_x()).floor().clamp(0.0, (grid.rows - 1) as f64);
    let c = ((grid.half_y() - p[1]) / grid.cell_size_y()).floor().clamp(0.0, (grid.cols - 1) as f64);
    (r as usize, c as usize)
}

/// Raw head output that decodes exactly to `targets`: offsets through
/// `atanh`, every other logit saturated at `±saturation`.
pub fn ideal_raw(targets: &DetectionTargets, grid: &BevGridSpec, max_offset: f64, saturation: f64) -> Vec<f64> {
    let mut raw = vec![0.0; grid.cells() * ch::COUNT];
    for (idx, cell) in targets.cells.iter().enumerate() {
        let v = &mut raw[idx * ch::COUNT..(idx + 1) * ch::COUNT];
        let Some(t) = cell else {
            v[ch::OBJECTNESS] = -saturation;
            continue;
        };
        let center = grid.cell_center(idx / grid.cols, idx % grid.cols);
        for k in 0..4 {
            for a in 0..2 {
                let rel = ((t.corners[k][a] - center[a]) / max_offset).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
                v[ch::OFFSETS + 2 * k + a] = rel.atanh();
            }
        }
        v[ch::OBJECTNESS] = saturation;
        let cls = t.class.index();
        v[ch::CLASS + cls] = saturation;
        v[ch::CLASS + 1 - cls] = -saturation;
        for k in 0..4 {
            v[ch::VISIBILITY + k] = if t.visibility[k] { saturation } else { -saturation };
        }
    }
    raw
}

/// Segmentation and center-point targets at `scale`× grid resolution,
/// channel-last `[size_x, size_y, 4]`, plus a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTargets {
    pub rows: usize,
    pub cols: usize,
    pub maps: Vec<f64>,
    pub valid: Vec<f64>,
}

pub fn encode_segmentation(labels: &[PolygonLabel], grid: &BevGridSpec, scale: usize) -> SegTargets {
    let (rows, cols) = (grid.rows * scale, grid.cols * scale);
    let mut maps = vec![0.0; rows * cols * 4];
    let two_s2 = 2.0 * CENTER_SIGMA_PX * CENTER_SIGMA_PX;
    let reach = (CENTER_SIGMA_PX * 4.0).ceil() as isize;
    for l in labels {
        let cls = l.class.index();
        let hull = convex_hull(&l.corners);
        // pixel bounding box of the polygon
        let coords: Vec<(f64, f64)> = l.corners.iter().map(|&p| grid.to_map_coords(p, scale)).collect();
        let r0 = coords.iter().map(|c| c.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let r1 = (coords.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(rows);
        let c0 = coords.iter().map(|c| c.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let c1 = (coords.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(cols);
        if hull.len() >= 3 {
            for r in r0..r1 {
                for c in c0..c1 {
                    if contains_point(&hull, grid.map_pixel_center(r, c, scale), 0.0) {
                        maps[(r * cols + c) * 4 + cls] = 1.0;
                    }
                }
            }
        }
        let (cr, cc) = grid.to_map_coords(l.centroid(), scale);
        let (pr, pc) = (cr.floor() as isize, cc.floor() as isize);
        for r in (pr - reach).max(0)..(pr + reach + 1).min(rows as isize) {
            for c in (pc - reach).max(0)..(pc + reach + 1).min(cols as isize) {
                let dr = r as f64 + 0.5 - cr;
                let dc = c as f64 + 0.5 - cc;
                let v = (-(dr * dr + dc * dc) / two_s2).exp();
                let slot: &mut f64 = &mut maps[(r as usize * cols + c as usize) * 4 + 2 + cls];
                *slot = slot.max(v);
            }
        }
    }
    SegTargets {
        rows,
        cols,
        maps,
        valid: vec![1.0; rows * cols],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::decode::{decode_detections, DecodeConfig};

    fn slot(cx: f64, cy: f64) -> PolygonLabel {
        // entry line facing +y, clockwise from above
        PolygonLabel {
            class: ObjectClass::Parking,
            corners: [[cx - 1.25, cy + 2.5], [cx + 1.25, cy + 2.5], [cx + 1.25, cy - 2.5], [cx - 1.25, cy - 2.5]],
            visibility: [true, true, false, true],
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let g = BevGridSpec::default();
        let mut labels = vec![slot(3.2, 4.1), slot(-6.0, 7.7)];
        labels.push(PolygonLabel {
            class: ObjectClass::Vehicle,
            ..slot(-2.6, -8.3)
        });
        let t = encode_detection(&labels, &g);
        assert_eq!(t.num_positives(), 3);
        let raw = ideal_raw(&t, &g, 6.0, 30.0);
        let mut dets = decode_detections(&raw, &g, &DecodeConfig::default());
        assert_eq!(dets.len(), 3);
        dets.sort_by_key(|d| d.id);
        for d in &dets {
            let (_, cell) = t.positives().find(|(i, _)| *i == d.id).unwrap();
            let l = &labels[cell.label];
            assert_eq!(d.class, l.class);
            for k in 0..4 {
                for a in 0..2 {
                    assert!((d.corners[k][a] - l.corners[k][a]).abs() <= 1e-6);
                }
                assert_eq!(d.visibility[k] > 0.5, l.visibility[k]);
            }
        }
    }

    #[test]
    fn collision_keeps_larger_object() {
        let g = BevGridSpec::default();
        let small = PolygonLabel {
            corners: [[0.4, 0.6], [0.6, 0.6], [0.6, 0.4], [0.4, 0.4]],
            ..slot(0.0, 0.0)
        };
        let big = slot(0.5, 0.5);
        let t = encode_detection(&[small, big], &g);
        assert_eq!(t.num_positives(), 1);
        assert_eq!(t.positives().next().unwrap().1.label, 1);
    }

    #[test]
    fn mostly_outside_labels_dropped() {
        let g = BevGridSpec::default();
        // 2.5 m wide slot, 0.5 m inside the extent: 80% outside
        let l = PolygonLabel {
            corners: [[0.0, 14.5], [2.5, 14.5], [2.5, 12.0], [0.0, 12.0]],
            ..slot(0.0, 0.0)
        };
        assert!(fit_to_extent(&[l.clone()], &g).is_empty());
        // 40% outside: kept and clamped
        let m = PolygonLabel {
            corners: [[0.0, 13.5], [2.5, 13.5], [2.5, 11.0], [0.0, 11.0]],
            ..l
        };
        let f = fit_to_extent(&[m], &g);
        assert_eq!(f.len(), 1);
        assert!(f[0].corners.iter().all(|p| g.contains(*p)));
    }

    #[test]
    fn segmentation_maps_cover_polygon_area() {
        let g = BevGridSpec::default();
        let l = slot(2.0, -3.0);
        let s = encode_segmentation(&[l.clone()], &g, 8);
        let px_area = (g.cell_size_x() / 8.0) * (g.cell_size_y() / 8.0);
        let covered: f64 = s.maps.chunks_exact(4).map(|p| p[0]).sum::<f64>() * px_area;
        assert!((covered - 12.5).abs() < 0.2, "covered {covered}");
        assert!(s.maps.chunks_exact(4).all(|p| p[1] == 0.0 && p[3] == 0.0));
        // center peak sits at the centroid pixel
        let (cr, cc) = g.to_map_coords(l.centroid(), 8);
        let peak = s.maps[((cr as usize) * s.cols + cc as usize) * 4 + 2];
        assert!(peak > 0.9);
    }
}
