//! Domain types shared by every stage of the pipeline.
//!
//! Coordinates are expressed in the vehicle frame: origin at the rear-axle
//! center, `x` forward, `y` left, `z` up. Polygons are stored with the
//! entry line (parking) or heading edge (vehicle) as corners 0-1 and the
//! remaining corners following clockwise when viewed from above, which in
//! this right-handed frame means a negative shoelace area.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub type Point2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Parking,
    Vehicle,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 2] = [ObjectClass::Parking, ObjectClass::Vehicle];

    pub fn index(self) -> usize {
        match self {
            ObjectClass::Parking => 0,
            ObjectClass::Vehicle => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Parking => "parking",
            ObjectClass::Vehicle => "vehicle",
        }
    }
}

/// Ground-truth oriented quadrilateral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonLabel {
    pub class: ObjectClass,
    pub corners: [Point2; 4],
    /// Per-corner visibility; only meaningful for parking slots.
    pub visibility: [bool; 4],
}

impl PolygonLabel {
    pub fn centroid(&self) -> Point2 {
        crate::polygon::centroid(&self.corners)
    }

    /// Midpoint of the entry line / heading edge (corners 0-1).
    pub fn heading_midpoint(&self) -> Point2 {
        midpoint(self.corners[0], self.corners[1])
    }

    /// Midpoint of the opposite edge (corners 2-3).
    pub fn rear_midpoint(&self) -> Point2 {
        midpoint(self.corners[2], self.corners[3])
    }
}

/// A decoded detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonDetection {
    pub class: ObjectClass,
    pub confidence: f64,
    pub corners: [Point2; 4],
    pub visibility: [f64; 4],
    /// Frame-stable identifier (the emitting grid cell); used to break ties.
    #[serde(default)]
    pub id: usize,
}

impl PolygonDetection {
    pub fn heading_midpoint(&self) -> Point2 {
        midpoint(self.corners[0], self.corners[1])
    }

    /// Builds a detection that reproduces a label exactly, with full confidence.
    pub fn from_label(label: &PolygonLabel, id: usize) -> Self {
        PolygonDetection {
            class: label.class,
            confidence: 1.0,
            corners: label.corners,
            visibility: label.visibility.map(|v| if v { 1.0 } else { 0.0 }),
            id,
        }
    }
}

pub fn midpoint(a: Point2, b: Point2) -> Point2 {
    [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5]
}

/// Planar RGB image with `f32` intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Channel planes `R, G, B`, each row-major.
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; Self::CHANNELS * width * height],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel-index coordinates (pixel `(i, j)`
    /// sits at `x = i, y = j`), edge-clamped.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let p = |xx, yy| self.get(c, xx, yy) as f64;
        (p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx) * (1.0 - fy) + (p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx) * fy
    }
}

/// Metric extent and resolution of the BEV grid.
///
/// Row `i` runs from the front (`x = +extent_x/2`) towards the rear and column
/// `j` from the left (`y = +extent_y/2`) towards the right, so the grid reads
/// like a top-down image with the vehicle heading up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BevGridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Longitudinal extent in meters.
    pub extent_x: f64,
    /// Lateral extent in meters.
    pub extent_y: f64,
    pub channels: usize,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        BevGridSpec {
            rows: 25,
            cols: 25,
            extent_x: 25.0,
            extent_y: 25.0,
            channels: 128,
        }
    }
}

impl BevGridSpec {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_size_x(&self) -> f64 {
        self.extent_x / self.rows as f64
    }

    pub fn cell_size_y(&self) -> f64 {
        self.extent_y / self.cols as f64
    }

    pub fn half_x(&self) -> f64 {
        self.extent_x * 0.5
    }

    pub fn half_y(&self) -> f64 {
        self.extent_y * 0.5
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point2 {
        [
            self.half_x() - (row as f64 + 0.5) * self.cell_size_x(),
            self.half_y() - (col as f64 + 0.5) * self.cell_size_y(),
        ]
    }

    /// Cell containing a metric point, if inside the grid.
    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        let r = ((self.half_x() - p[0]) / self.cell_size_x()).floor();
        let c = ((self.half_y() - p[1]) / self.cell_size_y()).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn contains(&self, p: Point2) -> bool {
        p[0].abs() <= self.half_x() && p[1].abs() <= self.half_y()
    }

    pub fn clamp(&self, p: Point2) -> Point2 {
        [
            p[0].clamp(-self.half_x(), self.half_x()),
            p[1].clamp(-self.half_y(), self.half_y()),
        ]
    }

    /// Axis-aligned extent as a counterclockwise polygon.
    pub fn extent_polygon(&self) -> [Point2; 4] {
        let (hx, hy) = (self.half_x(), self.half_y());
        [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]]
    }

    /// Continuous (row, col) coordinate of a metric point at `scale`× grid resolution.
    pub fn to_map_coords(&self, p: Point2, scale: usize) -> (f64, f64) {
        let s = scale as f64;
        (
            (self.half_x() - p[0]) / self.cell_size_x() * s,
            (self.half_y() - p[1]) / self.cell_size_y() * s,
        )
    }

    /// Metric center of pixel (row, col) of a map at `scale`× grid resolution.
    pub fn map_pixel_center(&self, row: usize, col: usize, scale: usize) -> Point2 {
        let s = scale as f64;
        [
            self.half_x() - (row as f64 + 0.5) * self.cell_size_x() / s,
            self.half_y() - (col as f64 + 0.5) * self.cell_size_y() / s,
        ]
    }
}
