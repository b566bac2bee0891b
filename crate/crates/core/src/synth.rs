//! Synthetic data with known ground truth.
//!
//! [`FaceGenerator`] paints a fixed face layout in the toy backbone's class
//! colours. Age is carried by a row-stripe texture whose amplitude grows
//! linearly with age, placed only in the eye regions; the nose carries the
//! same texture with a random, age-independent amplitude as a distractor.
//!
//! [`EmbeddingStoreGenerator`] builds per-subject face-embedding sets with a
//! planted main identity, an optional contaminating identity at a chosen
//! size ratio, and isolated outliers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{write_manifest, BBox, DatasetRecord, Image, ToyBackbone, FEATURE_STRIDE};
use crate::cleaning::FaceEmbeddingRecord;
use crate::codec::LabelCodecConfig;
use crate::error::{io_err, Result};
use crate::train::Sample;

/// Region layout on a 4×4 grid of layout cells.
const LAYOUT: [[&str; 4]; 4] = [
    ["background", "hair", "hair", "background"],
    ["left-eyebrow", "left-eye", "right-eye", "right-eyebrow"],
    ["skin", "nose", "nose", "skin"],
    ["upper-lip", "inner-mouth", "lower-lip", "skin"],
];

#[derive(Debug, Clone, PartialEq)]
pub struct FaceGeneratorConfig {
    /// Feature-grid cells per layout cell along each axis.
    pub cells_per_region: usize,
    pub min_age: i64,
    pub max_age: i64,
    /// Stripe amplitude at the maximum label age.
    pub max_amplitude: f64,
    pub base_brightness: f64,
    pub pixel_noise: f64,
    pub signal_regions: Vec<String>,
    pub distractor_regions: Vec<String>,
}

impl Default for FaceGeneratorConfig {
    fn default() -> Self {
        Self {
            cells_per_region: 1,
            min_age: 10,
            max_age: 80,
            max_amplitude: 0.3,
            base_brightness: 0.6,
            pixel_noise: 0.005,
            signal_regions: vec!["left-eye".into(), "right-eye".into()],
            distractor_regions: vec!["nose".into()],
        }
    }
}

pub struct FaceGenerator {
    colors: Vec<[f64; 3]>,
    class_names: Vec<String>,
    config: FaceGeneratorConfig,
}

impl FaceGenerator {
    pub fn new(backbone: &ToyBackbone, config: FaceGeneratorConfig) -> Self {
        let names = backbone.config().class_names.clone();
        Self {
            colors: (0..names.len()).map(|k| backbone.class_color(k)).collect(),
            class_names: names,
            config,
        }
    }

    pub fn image_size(&self) -> usize {
        4 * self.config.cells_per_region * FEATURE_STRIDE
    }

    fn class_index(&self, name: &str) -> usize {
        self.class_names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("layout class {name} missing from backbone classes"))
    }

    /// Renders one face of the given age.
    pub fn render<R: Rng>(&self, age: i64, max_label: usize, rng: &mut R) -> Image {
        let cfg = &self.config;
        let size = self.image_size();
        let region_px = cfg.cells_per_region * FEATURE_STRIDE;
        let signal = cfg.max_amplitude * age as f64 / max_label as f64;
        let distractor = rng.random_range(0.0..cfg.max_amplitude);
        let noise = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).expect("valid std");
        let mut pixels = Array3::<f32>::zeros((size, size, 3));
        for (ry, row) in LAYOUT.iter().enumerate() {
            for (rx, name) in row.iter().enumerate() {
                let color = self.colors[self.class_index(name)];
                let amplitude = if cfg.signal_regions.iter().any(|r| r == name) {
                    signal
                } else if cfg.distractor_regions.iter().any(|r| r == name) {
                    distractor
                } else {
                    0.0
                };
                for y in 0..region_px {
                    let stripe = if y % 2 == 0 { 1.0 } else { -1.0 };
                    let shade = cfg.base_brightness + amplitude * stripe;
                    for x in 0..region_px {
                        for c in 0..3 {
                            let n = if cfg.pixel_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                            let v = (color[c] * shade + n).clamp(0.0, 1.0);
                            pixels[[ry * region_px + y, rx * region_px + x, c]] = v as f32;
                        }
                    }
                }
            }
        }
        Image { pixels }
    }

    /// `count` samples with uniformly drawn ages, deterministic in `seed`.
    pub fn samples(&self, count: usize, seed: u64, codec: &LabelCodecConfig) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = self.image_size() as f64;
        let max_age = self.config.max_age.min(codec.max_age() as i64);
        (0..count)
            .map(|i| {
                let age = rng.random_range(self.config.min_age..=max_age);
                let image = self.render(age, codec.max_age(), &mut rng);
                Sample {
                    record: DatasetRecord {
                        image_path: format!("synthetic/{seed}/{i:05}.png"),
                        bbox: BBox([size * 0.125, size * 0.125, size * 0.875, size * 0.875]),
                        age,
                        subject_id: format!("synthetic-{}", i % 97),
                    },
                    image,
                }
            })
            .collect()
    }

    /// Writes samples as 16-bit PNGs plus a `manifest.jsonl` with relative paths.
    pub fn write_dataset(&self, dir: &Path, count: usize, seed: u64, codec: &LabelCodecConfig) -> Result<Vec<DatasetRecord>> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        let mut records = Vec::with_capacity(count);
        for (i, mut s) in self.samples(count, seed, codec).into_iter().enumerate() {
            let rel = format!("images/{i:05}.png");
            s.image.save_png(&dir.join(&rel))?;
            s.record.image_path = rel;
            records.push(s.record);
        }
        write_manifest(&dir.join("manifest.jsonl"), &records)?;
        Ok(records)
    }
}

/// Ground truth for one generated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSubject {
    pub subject_id: String,
    pub records: Vec<FaceEmbeddingRecord>,
    pub main_faces: Vec<String>,
    pub contaminant_faces: Vec<String>,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStoreGenerator {
    pub dim: usize,
    pub main_size: (usize, usize),
    /// Per-coordinate noise around an identity centre before normalization.
    pub spread: f64,
    pub outliers: usize,
    /// Probability that a contaminant face shares a photo with a main face.
    pub shared_photo_rate: f64,
}

impl Default for EmbeddingStoreGenerator {
    fn default() -> Self {
        Self {
            dim: 32,
            main_size: (10, 16),
            spread: 0.04,
            outliers: 2,
            shared_photo_rate: 0.3,
        }
    }
}

fn unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("valid std");
    let mut v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn around<R: Rng>(rng: &mut R, centre: &[f64], spread: f64) -> Vec<f64> {
    let n = Normal::new(0.0, spread).expect("valid std");
    let mut v: Vec<f64> = centre.iter().map(|c| c + n.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl EmbeddingStoreGenerator {
    /// One subject whose contaminating identity has
    /// `round(ratio · main_size)` faces (none when that is zero).
    pub fn subject(&self, subject_id: &str, ratio: f64, seed: u64) -> PlantedSubject {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let main_n = rng.random_range(self.main_size.0..=self.main_size.1);
        let cont_n = (ratio * main_n as f64).round() as usize;
        let main_c = unit(&mut rng, self.dim);
        let cont_c = unit(&mut rng, self.dim);
        let mut records = Vec::new();
        let mut main_faces = Vec::new();
        let mut contaminant_faces = Vec::new();
        let mut photo = 0usize;
        let bbox = [10.0, 10.0, 60.0, 60.0];
        for i in 0..main_n {
            let face_id = format!("{subject_id}/m{i:03}");
            records.push(FaceEmbeddingRecord {
                face_id: face_id.clone(),
                image_id: format!("{subject_id}/img{photo:04}"),
                subject_id: subject_id.to_string(),
                bbox,
                embedding: around(&mut rng, &main_c, self.spread),
            });
            main_faces.push(face_id);
            photo += 1;
        }
        // a photo holds at most one face per identity
        let mut group_photos: Vec<usize> = (0..main_n).collect();
        group_photos.shuffle(&mut rng);
        for i in 0..cont_n {
            let face_id = format!("{subject_id}/c{i:03}");
            let image_id = if !group_photos.is_empty() && rng.random_bool(self.shared_photo_rate) {
                format!("{subject_id}/img{:04}", group_photos.pop().expect("non-empty"))
            } else {
                photo += 1;
                format!("{subject_id}/img{:04}", photo - 1)
            };
            records.push(FaceEmbeddingRecord {
                face_id: face_id.clone(),
                image_id,
                subject_id: subject_id.to_string(),
                bbox: [70.0, 10.0, 120.0, 60.0],
                embedding: around(&mut rng, &cont_c, self.spread),
            });
            contaminant_faces.push(face_id);
        }
        for i in 0..self.outliers {
            records.push(FaceEmbeddingRecord {
                face_id: format!("{subject_id}/o{i:03}"),
                image_id: format!("{subject_id}/img{photo:04}"),
                subject_id: subject_id.to_string(),
                bbox,
                embedding: unit(&mut rng, self.dim),
            });
            photo += 1;
        }
        PlantedSubject {
            subject_id: subject_id.to_string(),
            records,
            main_faces,
            contaminant_faces,
            ratio,
        }
    }

    /// Subjects `subject-000 …` with the given contamination ratios.
    pub fn store(&self, ratios: &[f64], seed: u64) -> Vec<PlantedSubject> {
        ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| self.subject(&format!("subject-{i:03}"), r, seed.wrapping_mul(1000).wrapping_add(i as u64)))
            .collect()
    }

    /// Writes one `<subject>.jsonl` per subject into `dir`.
    pub fn write_store(subjects: &[PlantedSubject], dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut by_file: BTreeMap<&str, String> = BTreeMap::new();
        for s in subjects {
            let mut text = String::new();
            for r in &s.records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            by_file.insert(&s.subject_id, text);
        }
        for (id, text) in by_file {
            let path = dir.join(format!("{id}.jsonl"));
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Faces packed into few photos so cannot-link constraints bind often:
/// several identities, each photo holding up to `faces_per_photo` faces.
pub fn crowded_subject(subject_id: &str, seed: u64, dim: usize) -> Vec<FaceEmbeddingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identities: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, dim)).collect();
    let faces = rng.random_range(8..30);
    let photos = (faces / 3).max(2);
    (0..faces)
        .map(|i| {
            let who = rng.random_range(0..identities.len());
            FaceEmbeddingRecord {
                face_id: format!("{subject_id}/f{i:03}"),
                image_id: format!("{subject_id}/p{:03}", rng.random_range(0..photos)),
                subject_id: subject_id.to_string(),
                bbox: [0.0, 0.0, 10.0, 10.0],
                embedding: around(&mut rng, &identities[who], 0.05),
            }
        })
        .collect()
}
