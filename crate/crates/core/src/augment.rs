//! Training-time image and box augmentation.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BBox, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    pub scale: bool,
    pub rotation: bool,
    pub translation: bool,
    pub bbox_jitter: bool,
    /// Relative scale range, ±.
    pub scale_range: f64,
    pub rotation_degrees: f64,
    /// Shift as a fraction of image size, ±.
    pub translation_range: f64,
    /// Box jitter as a fraction of box size, ±.
    pub bbox_jitter_range: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            scale: true,
            rotation: true,
            translation: true,
            bbox_jitter: true,
            scale_range: 0.1,
            rotation_degrees: 15.0,
            translation_range: 0.05,
            bbox_jitter_range: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            horizontal_flip: false,
            scale: false,
            rotation: false,
            translation: false,
            bbox_jitter: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.horizontal_flip || self.scale || self.rotation || self.translation || self.bbox_jitter)
    }

    fn geometric(&self) -> bool {
        self.scale || self.rotation || self.translation
    }
}

fn symmetric<R: Rng>(rng: &mut R, range: f64) -> f64 {
    if range <= 0.0 {
        0.0
    } else {
        rng.random_range(-range..=range)
    }
}

/// Applies a random augmentation to an image and its face box.
pub fn augment<R: Rng>(image: &Image, bbox: &BBox, cfg: &AugmentConfig, rng: &mut R) -> (Image, BBox) {
    let mut image = image.clone();
    let mut bbox = *bbox;
    let (h, w) = (image.height(), image.width());

    if cfg.horizontal_flip && rng.random_bool(0.5) {
        image = image.flip_horizontal();
        bbox = bbox.mirror(w);
    }

    if cfg.geometric() {
        let scale = 1.0 + if cfg.scale { symmetric(rng, cfg.scale_range) } else { 0.0 };
        let angle = if cfg.rotation {
            symmetric(rng, cfg.rotation_degrees).to_radians()
        } else {
            0.0
        };
        let (tx, ty) = if cfg.translation {
            (
                symmetric(rng, cfg.translation_range) * w as f64,
                symmetric(rng, cfg.translation_range) * h as f64,
            )
        } else {
            (0.0, 0.0)
        };
        let transform = Similarity::new(scale, angle, tx, ty, w as f64 / 2.0, h as f64 / 2.0);
        image = transform.warp(&image);
        bbox = transform.map_box(&bbox);
    }

    if cfg.bbox_jitter {
        let [x0, y0, x1, y1] = bbox.0;
        let (bw, bh) = (x1 - x0, y1 - y0);
        let r = cfg.bbox_jitter_range;
        let jittered = BBox([
            x0 + symmetric(rng, r) * bw,
            y0 + symmetric(rng, r) * bh,
            x1 + symmetric(rng, r) * bw,
            y1 + symmetric(rng, r) * bh,
        ]);
        if jittered.is_well_formed() && jittered.intersects(w, h) {
            bbox = jittered;
        }
    }
    if !bbox.intersects(w, h) {
        bbox = BBox([0.0, 0.0, w as f64, h as f64]);
    }
    (image, bbox)
}

/// Scale and rotation about a centre followed by a translation.
struct Similarity {
    cos: f64,
    sin: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    cx: f64,
    cy: f64,
}

impl Similarity {
    fn new(scale: f64, angle: f64, tx: f64, ty: f64, cx: f64, cy: f64) -> Self {
        Self {
            cos: angle.cos(),
            sin: angle.sin(),
            scale,
            tx,
            ty,
            cx,
            cy,
        }
    }

    fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (
            self.cx + self.scale * (self.cos * dx - self.sin * dy) + self.tx,
            self.cy + self.scale * (self.sin * dx + self.cos * dy) + self.ty,
        )
    }

    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = ((x - self.tx - self.cx) / self.scale, (y - self.ty - self.cy) / self.scale);
        (
            self.cx + self.cos * dx + self.sin * dy,
            self.cy - self.sin * dx + self.cos * dy,
        )
    }

    /// Bilinear resampling; samples outside the source read as black.
    fn warp(&self, image: &Image) -> Image {
        let (h, w, _) = image.pixels.dim();
        let src = &image.pixels;
        let fetch = |y: isize, x: isize, c: usize| -> f32 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                src[[y as usize, x as usize, c]]
            }
        };
        let mut out = Array3::<f32>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.inverse(x as f64 + 0.5, y as f64 + 0.5);
                let (fx, fy) = (sx - 0.5, sy - 0.5);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = ((fx - x0) as f32, (fy - y0) as f32);
                let (x0, y0) = (x0 as isize, y0 as isize);
                for c in 0..3 {
                    let top = fetch(y0, x0, c) * (1.0 - ax) + fetch(y0, x0 + 1, c) * ax;
                    let bottom = fetch(y0 + 1, x0, c) * (1.0 - ax) + fetch(y0 + 1, x0 + 1, c) * ax;
                    out[[y, x, c]] = top * (1.0 - ay) + bottom * ay;
                }
            }
        }
        Image { pixels: out }
    }

    fn map_box(&self, bbox: &BBox) -> BBox {
        let [x0, y0, x1, y1] = bbox.0;
        let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].map(|(x, y)| self.forward(x, y));
        let xs = corners.map(|c| c.0);
        let ys = corners.map(|c| c.1);
        let min = |v: [f64; 4]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = |v: [f64; 4]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        BBox([min(xs), min(ys), max(xs), max(ys)])
    }
}
