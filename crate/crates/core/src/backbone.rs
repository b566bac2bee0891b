//! Frozen feature provider: low-level features, high-level features and
//! soft face-region masks at 1/8 of the input resolution.
//!
//! [`ToyBackbone`] stands in for a pretrained parsing network. Low-level
//! features project each 8×8 patch's mean colour; high-level features are
//! seeded random projections of the whole patch plus a row-stripe texture
//! response with a configurable gain, which synthetic datasets use to carry
//! an age signal. Masks are a per-pixel softmax over distances to seeded
//! class colours, so images painted with those colours parse into the
//! intended regions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{round_age, LabelCodecConfig};
use crate::error::{io_err, Error, Result};
use crate::nn::{normal, FeatureMap};

/// Stride between the input image and the feature grid.
pub const FEATURE_STRIDE: usize = 8;

/// Face-region classes, in mask channel order.
pub const DEFAULT_CLASS_NAMES: [&str; 11] = [
    "background",
    "skin",
    "left-eyebrow",
    "right-eyebrow",
    "left-eye",
    "right-eye",
    "nose",
    "upper-lip",
    "inner-mouth",
    "lower-lip",
    "hair",
];

pub fn default_class_names() -> Vec<String> {
    DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// `[x_min, y_min, x_max, y_max]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn is_well_formed(&self) -> bool {
        let [x0, y0, x1, y1] = self.0;
        self.0.iter().all(|v| v.is_finite()) && x0 < x1 && y0 < y1
    }

    pub fn intersects(&self, width: usize, height: usize) -> bool {
        let [x0, y0, x1, y1] = self.0;
        x1 > 0.0 && y1 > 0.0 && x0 < width as f64 && y0 < height as f64
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.is_well_formed() && self.intersects(width, height) {
            Ok(())
        } else {
            Err(Error::BadBbox {
                bbox: self.0,
                width,
                height,
            })
        }
    }

    /// Reflects x coordinates about the image width.
    pub fn mirror(&self, width: usize) -> Self {
        let [x0, y0, x1, y1] = self.0;
        let w = width as f64;
        BBox([w - x1, y0, w - x0, y1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_path: String,
    pub bbox: BBox,
    pub age: i64,
    pub subject_id: String,
}

impl DatasetRecord {
    pub fn validate(&self, codec: &LabelCodecConfig) -> Result<()> {
        if !self.bbox.is_well_formed() {
            return Err(Error::InvalidRecord(format!(
                "{}: malformed bbox {:?}",
                self.image_path, self.bbox.0
            )));
        }
        codec.check_age(self.age)?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawRecord {
    image_path: String,
    bbox: [f64; 4],
    age: f64,
    subject_id: String,
}

/// Reads a JSON Lines manifest. Relative image paths are resolved against
/// the manifest's directory; fractional ages are rounded.
pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let image_path = if Path::new(&raw.image_path).is_absolute() {
            raw.image_path
        } else {
            base.join(&raw.image_path).to_string_lossy().into_owned()
        };
        out.push(DatasetRecord {
            image_path,
            bbox: BBox(raw.bbox),
            age: round_age(raw.age),
            subject_id: raw.subject_id,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Decoded RGB image with channel values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    /// `(height, width, 3)`
    pub pixels: Array3<f32>,
}

impl Image {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::Shape {
                context: "image",
                expected: "3 channels".into(),
                actual: format!("{} channels", pixels.dim().2),
            });
        }
        Ok(Self { pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: "file not found".into(),
            });
        }
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let pixels = Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
            .expect("rgb buffer matches dimensions");
        Ok(Self { pixels })
    }

    /// Stores as 16-bit PNG so fine texture amplitudes survive quantization.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.pixels.dim();
        let raw: Vec<u16> = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w as u32, h as u32, raw)
            .expect("buffer matches dimensions");
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = self.pixels.clone();
        pixels.invert_axis(Axis(1));
        Self {
            pixels: pixels.as_standard_layout().into_owned(),
        }
    }
}

/// Outputs of the frozen backbone on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub low: FeatureMap,
    pub high: FeatureMap,
    pub masks: FeatureMap,
}

impl FeatureBundle {
    pub fn validate(&self) -> Result<()> {
        let spatial = |m: &FeatureMap| (m.height, m.width);
        if spatial(&self.low) != spatial(&self.high) || spatial(&self.low) != spatial(&self.masks) {
            return Err(Error::Shape {
                context: "feature bundle",
                expected: format!("{:?} everywhere", spatial(&self.low)),
                actual: format!("high {:?}, masks {:?}", spatial(&self.high), spatial(&self.masks)),
            });
        }
        let worst = max_mask_deviation(&self.masks);
        if worst > 1e-5 || self.masks.data.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidRecord(format!(
                "masks are not per-pixel distributions (max deviation {worst})"
            )));
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            low: self.low.flip_horizontal(),
            high: self.high.flip_horizontal(),
            masks: self.masks.flip_horizontal(),
        }
    }
}

/// `max |Σ_c M[p, c] − 1|` over pixels.
pub fn max_mask_deviation(masks: &FeatureMap) -> f64 {
    masks
        .data
        .sum_axis(Axis(1))
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Per-pixel class probabilities.
    #[default]
    Soft,
    /// One-hot argmax of the soft masks.
    Hard,
}

/// The feature-provider contract.
pub trait Backbone: Send + Sync {
    fn id(&self) -> String;
    fn class_names(&self) -> &[String];
    fn low_channels(&self) -> usize;
    fn high_channels(&self) -> usize;
    fn extract_features(&self, image: &Image, bbox: &BBox) -> Result<FeatureBundle>;

    fn num_classes(&self) -> usize {
        self.class_names().len()
    }

    fn extract_from_path(&self, path: &Path, bbox: &BBox) -> Result<FeatureBundle> {
        let image = Image::open(path)?;
        self.extract_features(&image, bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackboneConfig {
    pub seed: u64,
    pub low_channels: usize,
    pub high_channels: usize,
    pub class_names: Vec<String>,
    /// Sharpness of the colour-distance softmax producing the masks.
    pub mask_sharpness: f64,
    /// Weight of the row-stripe texture response in the features.
    pub signal_gain: f64,
    pub mask_mode: MaskMode,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            low_channels: 256,
            high_channels: 512,
            class_names: default_class_names(),
            mask_sharpness: 30.0,
            signal_gain: 16.0,
            mask_mode: MaskMode::Soft,
        }
    }
}

impl ToyBackboneConfig {
    /// Narrow channel widths for fast experiments.
    pub fn small(seed: u64) -> Self {
        Self {
            seed,
            low_channels: 16,
            high_channels: 44,
            ..Self::default()
        }
    }
}

const PATCH_LEN: usize = FEATURE_STRIDE * FEATURE_STRIDE * 3;

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    config: ToyBackboneConfig,
    /// Mean patch colour to low-level features, `(3, low)`.
    low_projection: Array2<f64>,
    /// `(PATCH_LEN, high)`
    projection: Array2<f64>,
    /// `(high)`
    signal_direction: Array1<f64>,
    /// Unit-norm class colours, `(C, 3)`.
    class_colors: Array2<f64>,
}

impl ToyBackbone {
    pub fn build(config: ToyBackboneConfig) -> Result<Self> {
        let c = config.class_names.len();
        if c < 1 || config.low_channels == 0 || config.high_channels == 0 {
            return Err(Error::Config(
                "toy backbone needs at least one class and non-zero channel widths".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let low_projection = normal(&mut rng, 3, config.low_channels, 1.0);
        let projection = normal(&mut rng, PATCH_LEN, config.high_channels, (3.0 / PATCH_LEN as f64).sqrt());
        let signal_direction = normal(&mut rng, 1, config.high_channels, 1.0).row(0).to_owned();
        let class_colors = spread_colors(c, &mut rng);
        Ok(Self {
            config,
            low_projection,
            projection,
            signal_direction,
            class_colors,
        })
    }

    /// Convenience wrapper with default widths.
    pub fn with_seed(seed: u64) -> Self {
        Self::build(ToyBackboneConfig {
            seed,
            ..ToyBackboneConfig::default()
        })
        .expect("default config is valid")
    }

    pub fn config(&self) -> &ToyBackboneConfig {
        &self.config
    }

    /// The colour a patch must have to parse as class `k`.
    pub fn class_color(&self, k: usize) -> [f64; 3] {
        let row = self.class_colors.row(k);
        [row[0], row[1], row[2]]
    }

    fn patch_matrix(image: &Image, h: usize, w: usize) -> Array2<f64> {
        let mut patches = Array2::zeros((h * w, PATCH_LEN));
        for i in 0..h {
            for j in 0..w {
                let mut row = patches.row_mut(i * w + j);
                let mut idx = 0;
                for y in 0..FEATURE_STRIDE {
                    for x in 0..FEATURE_STRIDE {
                        for ch in 0..3 {
                            row[idx] = image.pixels
                                [[i * FEATURE_STRIDE + y, j * FEATURE_STRIDE + x, ch]]
                                as f64;
                            idx += 1;
                        }
                    }
                }
            }
        }
        patches
    }
}

/// Deterministic unit colours in the positive octant, pushed apart by a few
/// rounds of repulsion from a seeded start.
fn spread_colors(count: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut colors = normal(rng, count, 3, 1.0).mapv(f64::abs);
    let normalize = |m: &mut Array2<f64>| {
        for mut r in m.rows_mut() {
            r.mapv_inplace(|v| v.max(0.02));
            let n = r.dot(&r).sqrt();
            r /= n;
        }
    };
    normalize(&mut colors);
    for _ in 0..200 {
        let snapshot = colors.clone();
        for a in 0..count {
            let mut push = Array1::<f64>::zeros(3);
            for b in 0..count {
                if a == b {
                    continue;
                }
                let d = &snapshot.row(a) - &snapshot.row(b);
                let n2 = d.dot(&d).max(1e-6);
                push += &(d / n2);
            }
            let mut row = colors.row_mut(a);
            row += &(push * 0.005);
        }
        normalize(&mut colors);
    }
    colors
}

/// Per-patch mean RGB, `(patches, 3)`.
fn mean_colors(patches: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((patches.nrows(), 3));
    for (p, patch) in patches.rows().into_iter().enumerate() {
        for (idx, v) in patch.iter().enumerate() {
            out[[p, idx % 3]] += v;
        }
    }
    out / (FEATURE_STRIDE * FEATURE_STRIDE) as f64
}

/// Mean over a patch of `gray · stripe(row)`, stripe = +1 on even rows and
/// −1 on odd rows. Zero for any horizontally uniform patch.
fn stripe_response(patch: ndarray::ArrayView1<'_, f64>) -> f64 {
    let mut acc = 0.0;
    let mut idx = 0;
    for y in 0..FEATURE_STRIDE {
        let sign = if y % 2 == 0 { 1.0 } else { -1.0 };
        for _ in 0..FEATURE_STRIDE {
            let gray = (patch[idx] + patch[idx + 1] + patch[idx + 2]) / 3.0;
            acc += sign * gray;
            idx += 3;
        }
    }
    acc / (FEATURE_STRIDE * FEATURE_STRIDE) as f64
}

impl Backbone for ToyBackbone {
    fn id(&self) -> String {
        format!("toy-v1:seed={}", self.config.seed)
    }

    fn class_names(&self) -> &[String] {
        &self.config.class_names
    }

    fn low_channels(&self) -> usize {
        self.config.low_channels
    }

    fn high_channels(&self) -> usize {
        self.config.high_channels
    }

    fn extract_features(&self, image: &Image, bbox: &BBox) -> Result<FeatureBundle> {
        let (height, width) = (image.height(), image.width());
        bbox.validate(width, height)?;
        let h = height / FEATURE_STRIDE;
        let w = width / FEATURE_STRIDE;
        if h == 0 || w == 0 {
            return Err(Error::Shape {
                context: "toy backbone input",
                expected: format!("at least {FEATURE_STRIDE}x{FEATURE_STRIDE} pixels"),
                actual: format!("{height}x{width}"),
            });
        }
        let patches = Self::patch_matrix(image, h, w);
        let mut high = patches.dot(&self.projection);
        for (p, mut row) in high.rows_mut().into_iter().enumerate() {
            let tau = stripe_response(patches.row(p)) * self.config.signal_gain;
            if tau != 0.0 {
                row.scaled_add(tau, &self.signal_direction);
            }
            row.mapv_inplace(f64::tanh);
        }
        let low = mean_colors(&patches).dot(&self.low_projection).mapv(f64::tanh);

        let c = self.num_classes();
        let mut masks = Array2::zeros((h * w, c));
        let beta = self.config.mask_sharpness;
        for p in 0..h * w {
            let patch = patches.row(p);
            let mut mean = [0.0f64; 3];
            for (idx, v) in patch.iter().enumerate() {
                mean[idx % 3] += v;
            }
            let n = (FEATURE_STRIDE * FEATURE_STRIDE) as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            let norm2: f64 = mean.iter().map(|m| m * m).sum();
            // -β(‖μ − c_k‖² − ‖c_k‖²) with unit c_k: exactly 0 for a black patch.
            let logits = Array1::from_iter((0..c).map(|k| {
                let col = self.class_colors.row(k);
                let dot: f64 = (0..3).map(|ch| mean[ch] * col[ch]).sum();
                beta * (2.0 * dot - norm2)
            }));
            let probs = crate::nn::softmax(&logits);
            match self.config.mask_mode {
                MaskMode::Soft => masks.row_mut(p).assign(&probs),
                MaskMode::Hard => {
                    let k = probs
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
                        .0;
                    masks[[p, k]] = 1.0;
                }
            }
        }
        Ok(FeatureBundle {
            low: FeatureMap::new(h, w, low)?,
            high: FeatureMap::new(h, w, high)?,
            masks: FeatureMap::new(h, w, masks)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_box(w: usize, h: usize) -> BBox {
        BBox([0.0, 0.0, w as f64, h as f64])
    }

    #[test]
    fn shapes_at_full_resolution() {
        let bb = ToyBackbone::with_seed(0);
        let img = Image::zeros(512, 512);
        let f = bb.extract_features(&img, &full_box(512, 512)).unwrap();
        assert_eq!(f.low.shape(), (64, 64, 256));
        assert_eq!(f.high.shape(), (64, 64, 512));
        assert_eq!(f.masks.shape(), (64, 64, 11));
        f.validate().unwrap();
    }

    #[test]
    fn black_image_gives_uniform_masks() {
        let bb = ToyBackbone::build(ToyBackboneConfig::small(3)).unwrap();
        let f = bb.extract_features(&Image::zeros(16, 24), &full_box(24, 16)).unwrap();
        assert!(f.masks.data.iter().all(|&v| v == 1.0 / 11.0));
    }

    #[test]
    fn painted_regions_parse_to_their_class() {
        let bb = ToyBackbone::build(ToyBackboneConfig::small(1)).unwrap();
        for k in 0..11 {
            let c = bb.class_color(k);
            let mut img = Image::zeros(8, 8);
            for ((_, _, ch), v) in img.pixels.indexed_iter_mut() {
                *v = (0.6 * c[ch]) as f32;
            }
            let f = bb.extract_features(&img, &full_box(8, 8)).unwrap();
            let row = f.masks.data.row(0);
            let best = (0..11).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, k, "class {k} parsed as {best}: {row}");
        }
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        let a = ToyBackbone::build(ToyBackboneConfig::small(0)).unwrap();
        let b = ToyBackbone::build(ToyBackboneConfig::small(0)).unwrap();
        let c = ToyBackbone::build(ToyBackboneConfig::small(1)).unwrap();
        assert_eq!(a.projection, b.projection);
        let mut img = Image::zeros(16, 16);
        img.pixels.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f32 / 7.0);
        let bbox = full_box(16, 16);
        let fa = a.extract_features(&img, &bbox).unwrap();
        assert_eq!(fa, a.extract_features(&img, &bbox).unwrap());
        assert_eq!(fa, b.extract_features(&img, &bbox).unwrap());
        assert_ne!(fa.high, c.extract_features(&img, &bbox).unwrap().high);
    }

    #[test]
    fn hard_masks_are_one_hot() {
        let bb = ToyBackbone::build(ToyBackboneConfig {
            mask_mode: MaskMode::Hard,
            ..ToyBackboneConfig::small(2)
        })
        .unwrap();
        let mut img = Image::zeros(16, 16);
        img.pixels.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 5) as f32 / 5.0);
        let f = bb.extract_features(&img, &full_box(16, 16)).unwrap();
        f.validate().unwrap();
        assert!(f.masks.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn rejects_bad_boxes_and_tiny_images() {
        let bb = ToyBackbone::build(ToyBackboneConfig::small(0)).unwrap();
        let img = Image::zeros(16, 16);
        assert!(matches!(
            bb.extract_features(&img, &BBox([20.0, 20.0, 30.0, 30.0])),
            Err(Error::BadBbox { .. })
        ));
        assert!(bb.extract_features(&img, &BBox([5.0, 5.0, 5.0, 9.0])).is_err());
        assert!(bb.extract_features(&Image::zeros(4, 4), &full_box(4, 4)).is_err());
    }

    #[test]
    fn missing_and_corrupt_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let bb = ToyBackbone::build(ToyBackboneConfig::small(0)).unwrap();
        let missing = dir.path().join("nope.png");
        let err = bb.extract_from_path(&missing, &full_box(8, 8)).unwrap_err();
        assert!(err.to_string().contains("nope.png"));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(matches!(
            bb.extract_from_path(&junk, &full_box(8, 8)),
            Err(Error::Image { .. })
        ));
    }

    #[test]
    fn png_round_trip_keeps_texture() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros(8, 16);
        img.pixels.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 11) as f32 / 11.0);
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = Image::open(&path).unwrap();
        assert_eq!(back.pixels.dim(), (8, 16, 3));
        for (a, b) in img.pixels.iter().zip(back.pixels.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn manifest_rounds_fractional_ages_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            "{\"image_path\":\"a.png\",\"bbox\":[0,0,8,8],\"age\":33.6,\"subject_id\":\"s1\"}\n",
        )
        .unwrap();
        let recs = read_manifest(&path).unwrap();
        assert_eq!(recs[0].age, 34);
        assert_eq!(std::path::PathBuf::from(&recs[0].image_path), dir.path().join("a.png"));

        std::fs::write(&path, "{\"image_path\":\"a.png\",\"bbox\":[0,0,8,8]}\n").unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mirrored_bbox_reflects_x() {
        let b = BBox([10.0, 5.0, 30.0, 25.0]).mirror(100);
        assert_eq!(b.0, [70.0, 5.0, 90.0, 25.0]);
    }
}
