use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::types::{BevGridSpec, ObjectClass, Point2, PolygonDetection, PolygonLabel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayStyle {
    pub px_per_meter: f64,
    /// Ego footprint `[x_min, x_max, y_min, y_max]` in the vehicle frame.
    pub ego: [f64; 4],
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle {
            px_per_meter: 16.0,
            ego: [-1.0, 3.7, -0.95, 0.95],
        }
    }
}

const BACKGROUND: Rgb<u8> = Rgb([24, 24, 28]);
const GRID: Rgb<u8> = Rgb([48, 48, 56]);
const EGO: Rgb<u8> = Rgb([90, 140, 255]);
const GT: [Rgb<u8>; 2] = [Rgb([60, 200, 90]), Rgb([40, 150, 200])];
const PRED: [Rgb<u8>; 2] = [Rgb([255, 140, 40]), Rgb([230, 60, 200])];
const ENTRY: Rgb<u8> = Rgb([255, 255, 255]);

struct Canvas<'a> {
    img: &'a mut RgbImage,
    grid: &'a BevGridSpec,
    scale: f64,
}

impl Canvas<'_> {
    /// Vehicle frame to image: `+x` up, `+y` left.
    fn to_px(&self, p: Point2) -> (f64, f64) {
        ((self.grid.half_y() - p[1]) * self.scale, (self.grid.half_x() - p[0]) * self.scale)
    }

    fn dot(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, a: Point2, b: Point2, c: Rgb<u8>, width: i64) {
        let (x0, y0) = self.to_px(a);
        let (x1, y1) = self.to_px(b);
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = ((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64);
            for dy in -(width / 2)..=(width / 2) {
                for dx in -(width / 2)..=(width / 2) {
                    self.dot(x + dx, y + dy, c);
                }
            }
        }
    }

    fn polygon(&mut self, corners: &[Point2; 4], c: Rgb<u8>) {
        for k in 1..4 {
            self.line(corners[k], corners[(k + 1) % 4], c, 1);
        }
        // entry or heading edge drawn thick
        self.line(corners[0], corners[1], ENTRY, 3);
        self.line(corners[0], corners[1], c, 1);
    }
}

/// Top-down raster: grid lines every meter, the ego footprint, labels and
/// predictions, with entry and heading edges highlighted.
pub fn render_overlay(
    grid: &BevGridSpec,
    labels: &[PolygonLabel],
    preds: &[PolygonDetection],
    style: &OverlayStyle,
) -> RgbImage {
    let w = (grid.extent_y * style.px_per_meter).round() as u32;
    let h = (grid.extent_x * style.px_per_meter).round() as u32;
    let mut img = RgbImage::from_pixel(w.max(1), h.max(1), BACKGROUND);
    let mut cv = Canvas {
        img: &mut img,
        grid,
        scale: style.px_per_meter,
    };
    for r in 0..=grid.rows {
        let x = grid.half_x() - r as f64 * grid.cell_size_x();
        cv.line([x, grid.half_y()], [x, -grid.half_y()], GRID, 1);
    }
    for c in 0..=grid.cols {
        let y = grid.half_y() - c as f64 * grid.cell_size_y();
        cv.line([grid.half_x(), y], [-grid.half_x(), y], GRID, 1);
    }
    let [x0, x1, y0, y1] = style.ego;
    cv.polygon(&[[x1, y1], [x1, y0], [x0, y0], [x0, y1]], EGO);
    let col = |c: ObjectClass| c.index();
    for l in labels {
        cv.polygon(&l.corners, GT[col(l.class)]);
    }
    for p in preds {
        cv.polygon(&p.corners, PRED[col(p.class)]);
    }
    img
}

pub fn save_overlay(
    path: impl AsRef<Path>,
    grid: &BevGridSpec,
    labels: &[PolygonLabel],
    preds: &[PolygonDetection],
    style: &OverlayStyle,
) -> Result<()> {
    let path = path.as_ref();
    render_overlay(grid, labels, preds, style)
        .save(path)
        .map_err(Error::Image)
}
