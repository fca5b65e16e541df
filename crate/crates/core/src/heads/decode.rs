use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::det_channel as ch;
use crate::polygon::giou_points;
use crate::types::{BevGridSpec, ObjectClass, PolygonDetection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub conf_threshold: f64,
    pub nms_giou_threshold: f64,
    pub max_offset: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            conf_threshold: 0.1,
            nms_giou_threshold: 0.3,
            max_offset: 6.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes the raw `[rows, cols, 15]` head output into thresholded,
/// suppressed detections. The detection id is the cell index.
pub fn decode_detections(raw: &[f64], grid: &BevGridSpec, cfg: &DecodeConfig) -> Vec<PolygonDetection> {
    assert_eq!(raw.len(), grid.cells() * ch::COUNT, "raw detection tensor size");
    let mut cands = Vec::new();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let id = r * grid.cols + c;
            let v = &raw[id * ch::COUNT..(id + 1) * ch::COUNT];
            let (l0, l1) = (v[ch::CLASS], v[ch::CLASS + 1]);
            let p_vehicle = sigmoid(l1 - l0);
            let (class, pc) = if p_vehicle > 0.5 {
                (ObjectClass::Vehicle, p_vehicle)
            } else {
                (ObjectClass::Parking, 1.0 - p_vehicle)
            };
            let confidence = sigmoid(v[ch::OBJECTNESS]) * pc;
            if confidence < cfg.conf_threshold {
                continue;
            }
            let center = grid.cell_center(r, c);
            let mut corners = [[0.0; 2]; 4];
            for (k, corner) in corners.iter_mut().enumerate() {
                let p = [
                    center[0] + cfg.max_offset * v[ch::OFFSETS + 2 * k].tanh(),
                    center[1] + cfg.max_offset * v[ch::OFFSETS + 2 * k + 1].tanh(),
                ];
                *corner = grid.clamp(p);
            }
            let mut visibility = [0.0; 4];
            for (k, vis) in visibility.iter_mut().enumerate() {
                *vis = sigmoid(v[ch::VISIBILITY + k]);
            }
            cands.push(PolygonDetection {
                class,
                confidence,
                corners,
                visibility,
                id,
            });
        }
    }
    non_max_suppression(cands, cfg.nms_giou_threshold)
}

/// Greedy per-class suppression by polygon GIoU. Candidates are visited by
/// descending confidence, ties broken by ascending id, so the result does not
/// depend on input order.
pub fn non_max_suppression(mut cands: Vec<PolygonDetection>, giou_threshold: f64) -> Vec<PolygonDetection> {
    cands.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id)));
    let mut keep: Vec<PolygonDetection> = Vec::new();
    for cand in cands {
        let suppressed = keep
            .iter()
            .any(|k| k.class == cand.class && giou_points(&k.corners, &cand.corners).giou > giou_threshold);
        if !suppressed {
            keep.push(cand);
        }
    }
    keep
}
