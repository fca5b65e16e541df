//! Detection matching and metrics: precision, recall, F1, heading-point
//! distance error and corner-visibility accuracy.

mod overlay;

pub use overlay::{render_overlay, save_overlay, OverlayStyle};

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polygon::iou;
use crate::types::{ObjectClass, PolygonDetection, PolygonLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    /// Require the predicted heading edge to sit on the labeled heading edge.
    pub check_orientation: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            conf_threshold: 0.1,
            iou_threshold: 0.5,
            check_orientation: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "match thresholds out of range: confidence {} (needs [0, 1]), IoU {} (needs (0, 1])",
                self.conf_threshold, self.iou_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub pred: usize,
    pub label: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatches {
    pub matches: Vec<Match>,
    /// Indices of confident predictions left unmatched.
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Whether the predicted heading edge lies on the labeled heading edge
/// rather than the opposite one.
pub fn orientation_ok(pred: &PolygonDetection, label: &PolygonLabel) -> bool {
    let h = pred.heading_midpoint();
    dist(h, label.heading_midpoint()) < dist(h, label.rear_midpoint())
}

/// Greedy one-to-one matching per class. Predictions above the confidence
/// threshold are visited by descending confidence (ties: ascending id); each
/// takes the unmatched label of its class with the highest IoU among those
/// passing the IoU and orientation tests.
pub fn match_frame(preds: &[PolygonDetection], labels: &[PolygonLabel], cfg: &MatchConfig) -> FrameMatches {
    let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].confidence >= cfg.conf_threshold).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(preds[a].id.cmp(&preds[b].id))
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; labels.len()];
    let mut out = FrameMatches::default();
    for p in order {
        let pred = &preds[p];
        let mut best: Option<(usize, f64)> = None;
        for (l, label) in labels.iter().enumerate() {
            if taken[l] || label.class != pred.class {
                continue;
            }
            let v = iou(&pred.corners, &label.corners);
            if v < cfg.iou_threshold || (cfg.check_orientation && !orientation_ok(pred, label)) {
                continue;
            }
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((l, v));
            }
        }
        match best {
            Some((l, v)) => {
                taken[l] = true;
                out.matches.push(Match { pred: p, label: l, iou: v });
            }
            None => out.false_positives.push(p),
        }
    }
    out.false_negatives = (0..labels.len()).filter(|&l| !taken[l]).collect();
    out
}

/// Mean distance of the two heading corners of a match, in meters.
pub fn heading_error(pred: &PolygonDetection, label: &PolygonLabel) -> f64 {
    0.5 * (dist(pred.corners[0], label.corners[0]) + dist(pred.corners[1], label.corners[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Counts> for ClassMetrics {
    fn from(counts: Counts) -> Self {
        ClassMetrics {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    /// Both classes pooled.
    pub overall: ClassMetrics,
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// Mean of the per-class F1 scores.
    pub macro_f1: f64,
    /// Mean heading-point error over true positives; absent without matches.
    pub distance_error_cm: Option<f64>,
    /// Corner-flag accuracy over matched parking slots; absent without any.
    pub visibility_accuracy: Option<f64>,
}

/// Per-frame partial sums, reduced in frame order.
#[derive(Debug, Clone, Default)]
struct FrameStats {
    counts: [Counts; 2],
    distance_sum: f64,
    matches: usize,
    flags_correct: usize,
    flags_total: usize,
}

fn frame_stats(preds: &[PolygonDetection], labels: &[PolygonLabel], cfg: &MatchConfig) -> FrameStats {
    let m = match_frame(preds, labels, cfg);
    let mut s = FrameStats::default();
    for mt in &m.matches {
        let (p, l) = (&preds[mt.pred], &labels[mt.label]);
        s.counts[l.class.index()].tp += 1;
        s.distance_sum += heading_error(p, l);
        s.matches += 1;
        if l.class == ObjectClass::Parking {
            for k in 0..4 {
                s.flags_correct += usize::from((p.visibility[k] > 0.5) == l.visibility[k]);
            }
            s.flags_total += 4;
        }
    }
    for &i in &m.false_positives {
        s.counts[preds[i].class.index()].fp += 1;
    }
    for &i in &m.false_negatives {
        s.counts[labels[i].class.index()].fn_ += 1;
    }
    s
}

/// Metrics over frames of (predictions, labels).
pub fn evaluate(frames: &[(Vec<PolygonDetection>, Vec<PolygonLabel>)], cfg: &MatchConfig) -> MetricsReport {
    let stats: Vec<FrameStats> = frames.par_iter().map(|(p, l)| frame_stats(p, l, cfg)).collect();
    let mut per = [Counts::default(); 2];
    let (mut dsum, mut nm, mut fc, mut ft) = (0.0, 0usize, 0usize, 0usize);
    for s in &stats {
        for c in 0..2 {
            per[c].add(&s.counts[c]);
        }
        dsum += s.distance_sum;
        nm += s.matches;
        fc += s.flags_correct;
        ft += s.flags_total;
    }
    let mut overall = Counts::default();
    overall.add(&per[0]);
    overall.add(&per[1]);
    let per_class: BTreeMap<String, ClassMetrics> = ObjectClass::ALL
        .iter()
        .map(|c| (c.as_str().to_string(), ClassMetrics::from(per[c.index()])))
        .collect();
    let macro_f1 = per.iter().map(|c| c.f1()).sum::<f64>() / 2.0;
    MetricsReport {
        frames: frames.len(),
        overall: overall.into(),
        per_class,
        macro_f1,
        distance_error_cm: (nm > 0).then(|| 100.0 * dsum / nm as f64),
        visibility_accuracy: (ft > 0).then(|| fc as f64 / ft as f64),
    }
}

/// One line of a detection dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDetections {
    pub frame_id: u64,
    pub detections: Vec<PolygonDetection>,
}

pub fn write_detections(path: impl AsRef<Path>, frames: &[FrameDetections]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for f in frames {
        serde_json::to_writer(&mut w, f).map_err(|e| Error::json("detection dump", e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<FrameDetections>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(format!("{} line {}", path.display(), n + 1), e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polygon::transform_corners;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn slot(cx: f64, cy: f64, class: ObjectClass) -> PolygonLabel {
        PolygonLabel {
            class,
            corners: [[cx - 1.25, cy + 2.5], [cx + 1.25, cy + 2.5], [cx + 1.25, cy - 2.5], [cx - 1.25, cy - 2.5]],
            visibility: [true, true, false, true],
        }
    }

    fn scene() -> Vec<PolygonLabel> {
        vec![
            slot(3.0, 4.0, ObjectClass::Parking),
            slot(6.0, 4.0, ObjectClass::Parking),
            slot(-4.0, -6.0, ObjectClass::Vehicle),
        ]
    }

    fn as_preds(labels: &[PolygonLabel]) -> Vec<PolygonDetection> {
        labels.iter().enumerate().map(|(i, l)| PolygonDetection::from_label(l, i)).collect()
    }

    #[test]
    fn perfect_predictions() {
        let l = scene();
        let r = evaluate(&[(as_preds(&l), l.clone())], &MatchConfig::default());
        assert_eq!(r.overall.f1, 1.0);
        assert_eq!(r.overall.precision, 1.0);
        assert_eq!(r.distance_error_cm, Some(0.0));
        assert_eq!(r.visibility_accuracy, Some(1.0));
        assert_eq!(r.per_class["vehicle"].counts.tp, 1);
    }

    #[test]
    fn no_predictions() {
        let r = evaluate(&[(vec![], scene())], &MatchConfig::default());
        assert_eq!(r.overall.recall, 0.0);
        assert_eq!(r.overall.precision, 0.0);
        assert_eq!(r.overall.f1, 0.0);
        assert_eq!(r.distance_error_cm, None);
        assert_eq!(r.visibility_accuracy, None);
    }

    #[test]
    fn swapped_heading_edge_is_false_positive() {
        let l = vec![slot(3.0, 4.0, ObjectClass::Parking)];
        let mut p = as_preds(&l);
        let c = p[0].corners;
        p[0].corners = [c[2], c[3], c[0], c[1]];
        let r = evaluate(&[(p.clone(), l.clone())], &MatchConfig::default());
        assert_eq!((r.overall.counts.tp, r.overall.counts.fp, r.overall.counts.fn_), (0, 1, 1));
        let lax = MatchConfig {
            check_orientation: false,
            ..MatchConfig::default()
        };
        assert_eq!(evaluate(&[(p, l)], &lax).overall.counts.tp, 1);
    }

    #[test]
    fn translation_gives_distance_error() {
        let l = vec![slot(3.0, 4.0, ObjectClass::Parking)];
        let mut p = as_preds(&l);
        p[0].corners = p[0].corners.map(|c| [c[0] + 0.2, c[1]]);
        let r = evaluate(&[(p, l)], &MatchConfig::default());
        assert!((r.distance_error_cm.unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn visibility_one_wrong_flag() {
        let l = vec![slot(3.0, 4.0, ObjectClass::Parking)];
        let mut p = as_preds(&l);
        p[0].visibility[2] = 0.9;
        let r = evaluate(&[(p, l)], &MatchConfig::default());
        assert_eq!(r.visibility_accuracy, Some(0.75));
    }

    #[test]
    fn random_visibility_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut frames = Vec::new();
        for _ in 0..500 {
            let mut l = slot(0.0, 0.0, ObjectClass::Parking);
            l.visibility = std::array::from_fn(|_| rng.gen());
            let mut p = as_preds(std::slice::from_ref(&l));
            p[0].visibility = std::array::from_fn(|_| rng.gen());
            frames.push((p, vec![l]));
        }
        let acc = evaluate(&frames, &MatchConfig::default()).visibility_accuracy.unwrap();
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn perturbed_distance_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut frames = Vec::new();
        let mut total = 0.0;
        let mut n = 0;
        for f in 0..20 {
            let labels: Vec<_> = (0..3).map(|i| slot(-8.0 + 6.0 * i as f64, f as f64 * 0.3 - 3.0, ObjectClass::Parking)).collect();
            let mut preds = as_preds(&labels);
            for (p, l) in preds.iter_mut().zip(&labels) {
                p.corners = p.corners.map(|c| [c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                // brute force: every corner pair separately
                let d0 = ((p.corners[0][0] - l.corners[0][0]).powi(2) + (p.corners[0][1] - l.corners[0][1]).powi(2)).sqrt();
                let d1 = ((p.corners[1][0] - l.corners[1][0]).powi(2) + (p.corners[1][1] - l.corners[1][1]).powi(2)).sqrt();
                total += (d0 + d1) / 2.0;
                n += 1;
            }
            frames.push((preds, labels));
        }
        let r = evaluate(&frames, &MatchConfig::default());
        assert_eq!(r.overall.counts.tp, n);
        assert!((r.distance_error_cm.unwrap() - 100.0 * total / n as f64).abs() < 1e-9);
    }

    #[test]
    fn greedy_prefers_confident_prediction() {
        let l = vec![slot(0.0, 0.0, ObjectClass::Parking)];
        let mut p = as_preds(&l);
        p.push(PolygonDetection {
            confidence: 0.5,
            id: 7,
            corners: p[0].corners.map(|c| [c[0] + 0.1, c[1]]),
            ..p[0].clone()
        });
        p[0].confidence = 0.4;
        let m = match_frame(&p, &l, &MatchConfig::default());
        assert_eq!(m.matches[0].pred, 1);
        assert_eq!(m.false_positives, vec![0]);
    }

    #[test]
    fn dump_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let frames = vec![
            FrameDetections { frame_id: 3, detections: as_preds(&scene()) },
            FrameDetections { frame_id: 4, detections: vec![] },
        ];
        let p = d.path().join("dets.jsonl");
        write_detections(&p, &frames).unwrap();
        assert_eq!(read_detections(&p).unwrap(), frames);
    }

    fn jitter(labels: &[PolygonLabel], seed: u64) -> Vec<PolygonDetection> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = as_preds(labels);
        for d in &mut p {
            d.corners = d.corners.map(|c| [c[0] + rng.gen_range(-0.4..0.4), c[1] + rng.gen_range(-0.4..0.4)]);
            d.confidence = rng.gen_range(0.05..1.0);
            d.visibility = std::array::from_fn(|_| rng.gen());
        }
        p
    }

    proptest! {
        #[test]
        fn rigid_transform_invariance(yaw in -3.1f64..3.1, tx in -5.0f64..5.0, ty in -5.0f64..5.0, flip: bool, seed in 0u64..1000) {
            let l = scene();
            let p = jitter(&l, seed);
            let a = evaluate(&[(p.clone(), l.clone())], &MatchConfig::default());
            let tl: Vec<_> = l.iter().map(|x| PolygonLabel { corners: transform_corners(&x.corners, yaw, flip, [tx, ty]), visibility: if flip { [x.visibility[1], x.visibility[0], x.visibility[3], x.visibility[2]] } else { x.visibility }, ..x.clone() }).collect();
            let tp: Vec<_> = p.iter().map(|x| PolygonDetection { corners: transform_corners(&x.corners, yaw, flip, [tx, ty]), visibility: if flip { [x.visibility[1], x.visibility[0], x.visibility[3], x.visibility[2]] } else { x.visibility }, ..x.clone() }).collect();
            let b = evaluate(&[(tp, tl)], &MatchConfig::default());
            prop_assert_eq!(a.overall.counts, b.overall.counts);
            prop_assert!((a.overall.f1 - b.overall.f1).abs() <= 1e-9);
            match (a.distance_error_cm, b.distance_error_cm) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-9),
                (x, y) => prop_assert_eq!(x, y),
            }
            prop_assert_eq!(a.visibility_accuracy, b.visibility_accuracy);
        }

        #[test]
        fn raising_threshold_never_raises_recall(seed in 0u64..1000, t0 in 0.0f64..1.0, dt in 0.0f64..0.5) {
            let l = scene();
            let p = jitter(&l, seed);
            let lo = MatchConfig { conf_threshold: t0, ..MatchConfig::default() };
            let hi = MatchConfig { conf_threshold: (t0 + dt).min(1.0), ..MatchConfig::default() };
            let a = evaluate(&[(p.clone(), l.clone())], &lo);
            let b = evaluate(&[(p, l)], &hi);
            prop_assert!(b.overall.recall <= a.overall.recall);
        }

        #[test]
        fn order_independent(seed in 0u64..1000) {
            let l = scene();
            let p = jitter(&l, seed);
            let mut rev = p.clone();
            rev.reverse();
            let a = evaluate(&[(p, l.clone())], &MatchConfig::default());
            let b = evaluate(&[(rev, l)], &MatchConfig::default());
            prop_assert_eq!(a, b);
        }
    }
}
