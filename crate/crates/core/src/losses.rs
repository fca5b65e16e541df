//! The seven-term multi-task objective.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{det_channel as ch, DetectionTargets, SegTargets};
use crate::polygon::giou_with_gradient;
use crate::tensor::{sc, Graph, Scalar, Tensor, TensorResult, Var};
use crate::types::{BevGridSpec, ObjectClass, Point2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    SegBinary,
    SegCenter,
    PolygonGiou,
    Objectness,
    Class,
    CornerDistance,
    CornerVisibility,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::SegBinary,
        LossTerm::SegCenter,
        LossTerm::PolygonGiou,
        LossTerm::Objectness,
        LossTerm::Class,
        LossTerm::CornerDistance,
        LossTerm::CornerVisibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::SegBinary => "seg_binary",
            LossTerm::SegCenter => "seg_center",
            LossTerm::PolygonGiou => "polygon_giou",
            LossTerm::Objectness => "objectness",
            LossTerm::Class => "class",
            LossTerm::CornerDistance => "corner_distance",
            LossTerm::CornerVisibility => "corner_visibility",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg_binary: f64,
    pub seg_center: f64,
    pub polygon_giou: f64,
    pub objectness: f64,
    pub class: f64,
    pub corner_distance: f64,
    pub corner_visibility: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg_binary: 1.0,
            seg_center: 1e-1,
            polygon_giou: 5e-2,
            objectness: 7.5e-1,
            class: 6.25e-3,
            corner_distance: 5e-2,
            corner_visibility: 3e-3,
        }
    }
}

impl LossWeights {
    pub fn get(&self, t: LossTerm) -> f64 {
        match t {
            LossTerm::SegBinary => self.seg_binary,
            LossTerm::SegCenter => self.seg_center,
            LossTerm::PolygonGiou => self.polygon_giou,
            LossTerm::Objectness => self.objectness,
            LossTerm::Class => self.class,
            LossTerm::CornerDistance => self.corner_distance,
            LossTerm::CornerVisibility => self.corner_visibility,
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        LossTerm::ALL.map(|t| self.get(t))
    }

    pub fn zero() -> Self {
        LossWeights {
            seg_binary: 0.0,
            seg_center: 0.0,
            polygon_giou: 0.0,
            objectness: 0.0,
            class: 0.0,
            corner_distance: 0.0,
            corner_visibility: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in LossTerm::ALL {
            let w = self.get(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {} must be finite and >= 0, got {w}", t.name())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub term: LossTerm,
    pub value: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<TermValue>,
    pub total: f64,
}

impl LossReport {
    /// Weighs unweighted term values (in [`LossTerm::ALL`] order). Rejects
    /// non-finite terms, naming the first offender.
    pub fn from_values(values: [f64; 7], weights: &LossWeights) -> Result<Self> {
        let mut terms = Vec::with_capacity(7);
        for (t, &v) in LossTerm::ALL.iter().zip(&values) {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss term {} is {v}", t.name())));
            }
            terms.push(TermValue {
                term: *t,
                value: v,
                weighted: weights.get(*t) * v,
            });
        }
        let total = compensated_sum(terms.iter().map(|t| t.weighted));
        Ok(LossReport { terms, total })
    }

    pub fn value(&self, t: LossTerm) -> f64 {
        self.terms.iter().find(|x| x.term == t).map_or(0.0, |x| x.value)
    }

    pub fn weighted(&self, t: LossTerm) -> f64 {
        self.terms.iter().find(|x| x.term == t).map_or(0.0, |x| x.weighted)
    }

    /// `{name: value}` map of the unweighted terms.
    pub fn terms_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.terms
                .iter()
                .map(|t| (t.term.name().to_string(), serde_json::json!(t.value)))
                .collect(),
        )
    }
}

/// Neumaier summation; exact enough that the sum is correctly rounded for
/// short lists of well-scaled values.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            comp += (s - t) + v;
        } else {
            comp += (v - t) + s;
        }
        s = t;
    }
    s + comp
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { gamma: 2.0, alpha: 0.25 }
    }
}

/// Graph nodes of the seven unweighted terms, in [`LossTerm::ALL`] order.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub vars: [Var; 7],
}

/// Sigmoid focal loss of the selected channels of a channel-last tensor:
/// mean over valid pixels per channel, summed over channels.
pub fn focal_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[f64],
    valid: &[f64],
    channels: &[usize],
    focal: FocalConfig,
) -> TensorResult<Var> {
    let c_all = *g.shape(logits).last().unwrap_or(&1);
    let pixels = valid.len();
    let n_valid: f64 = valid.iter().sum();
    let mut weights = vec![T::zero(); pixels * c_all];
    if n_valid > 0.0 {
        for (p, &v) in valid.iter().enumerate() {
            if v != 0.0 {
                for &c in channels {
                    weights[p * c_all + c] = sc(v / n_valid);
                }
            }
        }
    }
    let t = targets.iter().map(|&x| sc(x)).collect();
    g.sigmoid_focal(logits, t, weights, focal.gamma, focal.alpha)
}

/// Direct evaluation of the focal loss of a single logit.
pub fn focal_value(x: f64, t: f64, focal: FocalConfig) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    let ce = x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
    let pt = p * t + (1.0 - p) * (1.0 - t);
    let at = focal.alpha * t + (1.0 - focal.alpha) * (1.0 - t);
    at * (1.0 - pt).powf(focal.gamma) * ce
}

/// The five detection terms `[giou, objectness, class, corner_distance, visibility]`.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    det: Var,
    targets: &DetectionTargets,
    grid: &BevGridSpec,
    max_offset: f64,
) -> TensorResult<[Var; 5]> {
    let cells = grid.cells();
    let flat = g.reshape(det, &[cells, ch::COUNT])?;
    let positives: Vec<(usize, &crate::heads::CellTarget)> = targets.positives().collect();
    let np = positives.len();

    let obj = g.narrow(flat, 1, ch::OBJECTNESS, 1)?;
    let obj_t: Vec<T> = targets.cells.iter().map(|c| if c.is_some() { T::one() } else { T::zero() }).collect();
    let objectness = g.bce_with_logits(obj, obj_t, vec![sc(1.0 / cells as f64); cells])?;

    if np == 0 {
        let zero = g.constant(Tensor::scalar(T::zero()));
        return Ok([zero, objectness, zero, zero, zero]);
    }

    let rows: Vec<usize> = positives.iter().map(|(i, _)| *i).collect();
    let pos = g.index_select(flat, &rows)?;

    // class: both logits against the one-hot class
    let cls = g.narrow(pos, 1, ch::CLASS, 2)?;
    let mut cls_t = Vec::with_capacity(2 * np);
    for (_, t) in &positives {
        for c in ObjectClass::ALL {
            cls_t.push(if t.class == c { T::one() } else { T::zero() });
        }
    }
    let class = g.bce_with_logits(cls, cls_t, vec![sc(1.0 / (2 * np) as f64); 2 * np])?;

    // visibility: parking cells only
    let vis = g.narrow(pos, 1, ch::VISIBILITY, 4)?;
    let n_park = positives.iter().filter(|(_, t)| t.class == ObjectClass::Parking).count();
    let mut vis_t = Vec::with_capacity(4 * np);
    let mut vis_w = Vec::with_capacity(4 * np);
    for (_, t) in &positives {
        let park = t.class == ObjectClass::Parking;
        for k in 0..4 {
            vis_t.push(if t.visibility[k] { T::one() } else { T::zero() });
            vis_w.push(if park { sc(1.0 / (4 * n_park) as f64) } else { T::zero() });
        }
    }
    let visibility = g.bce_with_logits(vis, vis_t, vis_w)?;

    // predicted corners: cell center + max_offset · tanh(raw)
    let off = g.narrow(pos, 1, ch::OFFSETS, 8)?;
    let off = g.tanh(off);
    let off = g.scale(off, sc(max_offset));
    let mut centers = Vec::with_capacity(8 * np);
    let mut gt = Vec::with_capacity(8 * np);
    for (i, t) in &positives {
        let c = grid.cell_center(i / grid.cols, i % grid.cols);
        for k in 0..4 {
            centers.extend_from_slice(&c);
            gt.extend_from_slice(&t.corners[k]);
        }
    }
    let centers = g.constant(Tensor::from_f64(&[np, 8], &centers)?);
    let pred = g.add(off, centers)?;
    let gt_v = g.constant(Tensor::from_f64(&[np, 8], &gt)?);
    let diff = g.sub(pred, gt_v)?;
    let l1 = g.abs(diff);
    let l1 = g.sum(l1);
    let corner = g.scale(l1, sc(1.0 / (4 * np) as f64));

    // GIoU of the convexified prediction, differentiated outside the tape
    let pv = g.data(pred).to_vec();
    let mut total = 0.0;
    let mut jac = Vec::with_capacity(8 * np);
    for (p, (_, t)) in positives.iter().enumerate() {
        let corners: [Point2; 4] = std::array::from_fn(|k| [pv[p * 8 + 2 * k].as_f64(), pv[p * 8 + 2 * k + 1].as_f64()]);
        let (gv, grad) = giou_with_gradient(&corners, &t.corners);
        total += 1.0 - gv;
        for (j, d) in grad.iter().enumerate() {
            if *d != 0.0 {
                jac.push((0u32, (p * 8 + j) as u32, sc(-d / np as f64)));
            }
        }
    }
    let giou = g.linearized(pred, Tensor::scalar(sc(total / np as f64)), jac)?;

    Ok([giou, objectness, class, corner, visibility])
}

/// All seven unweighted terms for one sample.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses<T: Scalar>(
    g: &mut Graph<T>,
    seg: Var,
    det: Var,
    seg_t: &SegTargets,
    det_t: &DetectionTargets,
    grid: &BevGridSpec,
    max_offset: f64,
    focal: FocalConfig,
) -> TensorResult<LossTerms> {
    let seg_binary = focal_loss(g, seg, &seg_t.maps, &seg_t.valid, &[0, 1], focal)?;
    let seg_center = focal_loss(g, seg, &seg_t.maps, &seg_t.valid, &[2, 3], focal)?;
    let [giou, objectness, class, corner, visibility] = detection_loss(g, det, det_t, grid, max_offset)?;
    Ok(LossTerms {
        vars: [seg_binary, seg_center, giou, objectness, class, corner, visibility],
    })
}

/// Weighted total as a graph node plus the per-term report.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossReport)> {
    let values = terms.vars.map(|v| g.value(v).item().as_f64());
    let report = LossReport::from_values(values, weights)?;
    let mut total: Option<Var> = None;
    for (t, &v) in LossTerm::ALL.iter().zip(&terms.vars) {
        let w = weights.get(*t);
        if w == 0.0 {
            continue;
        }
        let wv = g.scale(v, sc(w));
        total = Some(match total {
            None => wv,
            Some(acc) => g.add(acc, wv)?,
        });
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())));
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{encode_detection, ideal_raw};
    use crate::types::PolygonLabel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_terms_total() {
        let r = LossReport::from_values([1.0; 7], &LossWeights::default()).unwrap();
        assert_eq!(r.total, 1.95925);
        let z = LossReport::from_values([3.0; 7], &LossWeights::zero()).unwrap();
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn nan_term_is_named() {
        let mut v = [1.0; 7];
        v[5] = f64::NAN;
        let e = LossReport::from_values(v, &LossWeights::default()).unwrap_err();
        assert!(e.to_string().contains("corner_distance"), "{e}");
    }

    #[test]
    fn doubling_a_weight_doubles_its_contribution() {
        let vals = [0.3, 0.7, 0.2, 0.9, 0.5, 1.4, 0.6];
        let w = LossWeights::default();
        let a = LossReport::from_values(vals, &w).unwrap();
        let w2 = LossWeights {
            objectness: 2.0 * w.objectness,
            ..w
        };
        let b = LossReport::from_values(vals, &w2).unwrap();
        for t in LossTerm::ALL {
            let f = if t == LossTerm::Objectness { 2.0 } else { 1.0 };
            assert_eq!(b.weighted(t), f * a.weighted(t));
        }
    }

    #[test]
    fn focal_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50;
        let x: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let valid: Vec<f64> = (0..n).map(|i| if i % 7 == 0 { 0.0 } else { 1.0 }).collect();
        let f = FocalConfig::default();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(vec![n, 4], x.clone()).unwrap());
        let l = focal_loss(&mut g, xv, &t, &valid, &[1, 3], f).unwrap();
        let nv: f64 = valid.iter().sum();
        let mut expect = 0.0;
        for c in [1, 3] {
            let mut s = 0.0;
            for p in 0..n {
                if valid[p] != 0.0 {
                    s += focal_value(x[p * 4 + c], t[p * 4 + c], f);
                }
            }
            expect += s / nv;
        }
        assert!((g.value(l).item() - expect).abs() <= 1e-9);
    }

    #[test]
    fn focal_special_cases() {
        let half = FocalConfig { gamma: 0.0, alpha: 0.5 };
        for (x, t) in [(0.3f64, 1.0f64), (-1.2, 0.0), (2.0, 0.4)] {
            let bce: f64 = x.max(0.0) - x * t + (1.0f64 + (-x.abs()).exp()).ln();
            assert!((focal_value(x, t, half) - 0.5 * bce).abs() < 1e-15);
        }
        assert!(focal_value(50.0, 1.0, FocalConfig::default()) < 1e-20);
    }

    fn toy_grid() -> BevGridSpec {
        BevGridSpec {
            rows: 1,
            cols: 5,
            extent_x: 1.0,
            extent_y: 5.0,
            channels: 8,
        }
    }

    fn toy_labels() -> Vec<PolygonLabel> {
        vec![
            PolygonLabel {
                class: ObjectClass::Parking,
                corners: [[0.4, 2.3], [0.45, 1.6], [-0.4, 1.55], [-0.35, 2.2]],
                visibility: [true, false, true, true],
            },
            PolygonLabel {
                class: ObjectClass::Vehicle,
                corners: [[0.3, -0.4], [0.35, -1.2], [-0.3, -1.25], [-0.4, -0.45]],
                visibility: [true; 4],
            },
        ]
    }

    #[test]
    fn perfect_prediction_has_tiny_losses() {
        let grid = toy_grid();
        let t = encode_detection(&toy_labels(), &grid);
        assert_eq!(t.num_positives(), 2);
        let raw = ideal_raw(&t, &grid, 6.0, 30.0);
        let mut g = Graph::<f64>::new();
        let det = g.constant(Tensor::new(vec![1, 5, 15], raw).unwrap());
        let terms = detection_loss(&mut g, det, &t, &grid, 6.0).unwrap();
        for v in terms {
            assert!(g.value(v).item() <= 1e-6, "{}", g.value(v).item());
        }
    }

    #[test]
    fn empty_labels_only_objectness() {
        let grid = toy_grid();
        let t = encode_detection(&[], &grid);
        let mut g = Graph::<f64>::new();
        let det = g.constant(Tensor::zeros(&[1, 5, 15]));
        let [giou, obj, class, corner, vis] = detection_loss(&mut g, det, &t, &grid, 6.0).unwrap();
        for v in [giou, class, corner, vis] {
            assert_eq!(g.value(v).item(), 0.0);
        }
        assert!((g.value(obj).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn detection_gradient_matches_finite_differences() {
        let grid = toy_grid();
        let t = encode_detection(&toy_labels(), &grid);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<f64> = (0..5 * 15).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let w = LossWeights::default();
        let eval = |raw: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::<f64>::new();
            let det = g.variable(Tensor::new(vec![1, 5, 15], raw.to_vec()).unwrap());
            let d = detection_loss(&mut g, det, &t, &grid, 6.0).unwrap();
            let weights = [w.polygon_giou, w.objectness, w.class, w.corner_distance, w.corner_visibility];
            let mut acc = None;
            for (v, wt) in d.iter().zip(weights) {
                let s = g.scale(*v, wt);
                acc = Some(match acc {
                    None => s,
                    Some(a) => g.add(a, s).unwrap(),
                });
            }
            let total = acc.unwrap();
            let grads = g.backward(total).unwrap();
            (g.value(total).item(), grads.get(det).unwrap().to_vec())
        };
        let (_, analytic) = eval(&raw);
        let eps = 1e-5;
        for i in 0..raw.len() {
            let mut p = raw.clone();
            p[i] += eps;
            let mut m = raw.clone();
            m[i] -= eps;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-3 || (a - fd).abs() < 1e-10, "param {i}: {a} vs {fd}");
        }
    }
}
