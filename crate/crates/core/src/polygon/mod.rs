//! Convex polygon area, clipping, hulls and (generalized) IoU.
//!
//! Geometry routines work on counterclockwise vertex lists. Labels use the
//! clockwise entry-line-first convention of [`crate::types`]; [`ConvexQuad`]
//! converts between the two.

mod dual;

pub use dual::{Dual, Real};

use crate::types::Point2;

/// Areas below this are treated as degenerate (m²).
pub const DEGENERATE_AREA: f64 = 1e-9;

pub type Pt<S> = [S; 2];

/// Four-vertex polygon stored counterclockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexQuad {
    vertices: [Point2; 4],
}

impl ConvexQuad {
    /// Accepts either winding and stores it counterclockwise.
    pub fn new(corners: [Point2; 4]) -> Self {
        let mut vertices = corners;
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        ConvexQuad { vertices }
    }

    pub fn vertices(&self) -> &[Point2; 4] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        area(&self.vertices)
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() < DEGENERATE_AREA
    }

    /// Whether the four vertices form a convex, non-self-intersecting quad.
    pub fn is_convex(&self) -> bool {
        let v = &self.vertices;
        (0..4).all(|i| {
            let (a, b, c) = (v[i], v[(i + 1) % 4], v[(i + 2) % 4]);
            cross(sub(b, a), sub(c, b)) >= -1e-12
        })
    }
}

#[inline]
fn sub<S: Real>(a: Pt<S>, b: Pt<S>) -> Pt<S> {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn cross<S: Real>(a: Pt<S>, b: Pt<S>) -> S {
    a[0] * b[1] - a[1] * b[0]
}

/// Shoelace area, positive for counterclockwise winding.
pub fn signed_area<S: Real>(pts: &[Pt<S>]) -> S {
    let n = pts.len();
    if n < 3 {
        return S::constant(0.0);
    }
    let mut acc = S::constant(0.0);
    for i in 0..n {
        let (p, q) = (pts[i], pts[(i + 1) % n]);
        acc = acc + (p[0] * q[1] - q[0] * p[1]);
    }
    acc * S::constant(0.5)
}

pub fn area<S: Real>(pts: &[Pt<S>]) -> S {
    signed_area(pts).abs()
}

/// Area-weighted centroid; vertex mean for degenerate input.
pub fn centroid(pts: &[Point2]) -> Point2 {
    let a = signed_area(pts);
    let n = pts.len();
    if a.abs() < DEGENERATE_AREA {
        let inv = 1.0 / n.max(1) as f64;
        return [
            pts.iter().map(|p| p[0]).sum::<f64>() * inv,
            pts.iter().map(|p| p[1]).sum::<f64>() * inv,
        ];
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (p, q) = (pts[i], pts[(i + 1) % n]);
        let w = p[0] * q[1] - q[0] * p[1];
        cx += (p[0] + q[0]) * w;
        cy += (p[1] + q[1]) * w;
    }
    [cx / (6.0 * a), cy / (6.0 * a)]
}

/// Counterclockwise convex hull (Andrew's monotone chain), collinear points dropped.
pub fn convex_hull<S: Real>(points: &[Pt<S>]) -> Vec<Pt<S>> {
    let mut pts: Vec<Pt<S>> = points.to_vec();
    pts.sort_by(|a, b| {
        a[0].val()
            .total_cmp(&b[0].val())
            .then(a[1].val().total_cmp(&b[1].val()))
    });
    pts.dedup_by(|a, b| a[0].val() == b[0].val() && a[1].val() == b[1].val());
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: Pt<S>, a: Pt<S>, b: Pt<S>| cross(sub(a, o), sub(b, o)).val();
    let mut hull: Vec<Pt<S>> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Clips `subject` against every edge of the convex counterclockwise `clip`
/// polygon (Sutherland-Hodgman). Either polygon may be empty.
pub fn clip_convex<S: Real>(subject: &[Pt<S>], clip: &[Pt<S>]) -> Vec<Pt<S>> {
    if clip.len() < 3 {
        return Vec::new();
    }
    let mut output: Vec<Pt<S>> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let edge = sub(clip[(i + 1) % clip.len()], a);
        let input = std::mem::take(&mut output);
        let side = |p: Pt<S>| cross(edge, sub(p, a));
        let mut prev = input[input.len() - 1];
        let mut prev_side = side(prev);
        for &cur in &input {
            let cur_side = side(cur);
            let cur_in = cur_side.val() >= 0.0;
            let prev_in = prev_side.val() >= 0.0;
            if cur_in != prev_in {
                let t = prev_side / (prev_side - cur_side);
                output.push([
                    prev[0] + (cur[0] - prev[0]) * t,
                    prev[1] + (cur[1] - prev[1]) * t,
                ]);
            }
            if cur_in {
                output.push(cur);
            }
            prev = cur;
            prev_side = cur_side;
        }
    }
    if output.len() < 3 {
        output.clear();
    }
    output
}

/// Intersection polygon of two convex quads (at most 8 vertices).
pub fn intersect(a: &ConvexQuad, b: &ConvexQuad) -> Vec<Point2> {
    clip_convex(&a.vertices, &b.vertices)
}

/// Generalized IoU together with its ingredients.
#[derive(Debug, Clone, Copy)]
pub struct Giou<S> {
    pub giou: S,
    pub iou: S,
    /// Both inputs degenerate; `giou` and `iou` are reported as 0.
    pub degenerate: bool,
}

/// Generalized IoU of two point sets, each convexified by its hull first.
///
/// `GIoU = IoU − (area(hull(a ∪ b)) − area(a ∪ b)) / area(hull(a ∪ b))`.
pub fn giou_points<S: Real>(a: &[Pt<S>], b: &[Pt<S>]) -> Giou<S> {
    let zero = S::constant(0.0);
    let ha = convex_hull(a);
    let hb = convex_hull(b);
    let area_a = area(&ha);
    let area_b = area(&hb);
    if area_a.val() < DEGENERATE_AREA && area_b.val() < DEGENERATE_AREA {
        return Giou {
            giou: zero,
            iou: zero,
            degenerate: true,
        };
    }
    let inter = if area_a.val() < DEGENERATE_AREA || area_b.val() < DEGENERATE_AREA {
        zero
    } else {
        area(&clip_convex(&ha, &hb))
    };
    let union = area_a + area_b - inter;
    let all: Vec<Pt<S>> = ha.iter().chain(hb.iter()).copied().collect();
    let enclosing = area(&convex_hull(&all));
    let iou = inter / union;
    Giou {
        giou: iou - (enclosing - union) / enclosing,
        iou,
        degenerate: false,
    }
}

pub fn giou(a: &ConvexQuad, b: &ConvexQuad) -> Giou<f64> {
    giou_points(&a.vertices, &b.vertices)
}

/// Plain IoU of two corner sets after convexification.
pub fn iou(a: &[Point2], b: &[Point2]) -> f64 {
    giou_points(a, b).iou
}

/// GIoU of predicted corners against a fixed target together with the
/// gradient of the value with respect to the 8 predicted coordinates
/// (`[x0, y0, x1, y1, ...]`).
pub fn giou_with_gradient(pred: &[Point2; 4], target: &[Point2; 4]) -> (f64, [f64; 8]) {
    let p: Vec<Pt<Dual<8>>> = pred
        .iter()
        .enumerate()
        .map(|(k, c)| [Dual::variable(c[0], 2 * k), Dual::variable(c[1], 2 * k + 1)])
        .collect();
    let t: Vec<Pt<Dual<8>>> = target
        .iter()
        .map(|c| [Dual::constant(c[0]), Dual::constant(c[1])])
        .collect();
    let g = giou_points(&p, &t);
    (g.giou.v, g.giou.d)
}

/// Point-in-convex-polygon test for a counterclockwise polygon (boundary inclusive).
pub fn contains_point(poly: &[Point2], p: Point2, tol: f64) -> bool {
    let n = poly.len();
    n >= 3
        && (0..n).all(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            cross(sub(b, a), sub(p, a)) >= -tol
        })
}

/// Mirror `y → −y` (optional), then rotate by `yaw` about the origin, then translate.
///
/// Operates on label corners in the clockwise entry-first convention: after a
/// mirror the order becomes `[1, 0, 3, 2]`, which keeps the entry line first
/// and restores clockwise winding.
pub fn transform_corners(
    corners: &[Point2; 4],
    yaw: f64,
    flip: bool,
    translation: Point2,
) -> [Point2; 4] {
    let (s, c) = yaw.sin_cos();
    let map = |p: Point2| {
        let y = if flip { -p[1] } else { p[1] };
        [c * p[0] - s * y + translation[0], s * p[0] + c * y + translation[1]]
    };
    let mut out = corners.map(map);
    if flip {
        out = [out[1], out[0], out[3], out[2]];
    }
    out
}

/// [`transform_corners`] for a counterclockwise [`ConvexQuad`]; winding is
/// re-canonicalized after a mirror.
pub fn transform(q: &ConvexQuad, yaw: f64, flip: bool, translation: Point2) -> ConvexQuad {
    let mut out = transform_corners(&q.vertices, yaw, flip, translation);
    if flip {
        out = [out[1], out[0], out[3], out[2]];
        out.reverse();
    }
    ConvexQuad { vertices: out }
}

/// Orders four corners clockwise with `entry` (two of the corner indices)
/// as corners 0-1. Returns `None` if `entry` is not an edge of the hull.
pub fn canonical_corners(corners: [Point2; 4], entry: (usize, usize)) -> Option<[Point2; 4]> {
    let order = clockwise_order(&corners);
    let pos = |idx: usize| order.iter().position(|&o| o == idx).unwrap();
    let (pa, pb) = (pos(entry.0), pos(entry.1));
    let start = if (pa + 1) % 4 == pb {
        pa
    } else if (pb + 1) % 4 == pa {
        pb
    } else {
        return None;
    };
    Some(std::array::from_fn(|k| corners[order[(start + k) % 4]]))
}

/// Clockwise index order around the centroid, starting from the corner with
/// the smallest polar angle (measured in `[0, 2π)` from `+x`).
pub fn clockwise_order(corners: &[Point2; 4]) -> [usize; 4] {
    let c = centroid(corners);
    let angle = |p: Point2| {
        let a = (p[1] - c[1]).atan2(p[0] - c[0]);
        if a < 0.0 {
            a + std::f64::consts::TAU
        } else {
            a
        }
    };
    let mut idx = [0usize, 1, 2, 3];
    idx.sort_by(|&a, &b| angle(corners[a]).total_cmp(&angle(corners[b])).then(a.cmp(&b)));
    // ascending angle is counterclockwise; reverse after the first element
    [idx[0], idx[3], idx[2], idx[1]]
}
