//! WebAssembly bindings behind `www/index.html`.
//!
//! Each export has a plain Rust twin so the numbers can be tested natively.

use fpage_core::cleaning::{consensus_for_subject, CleaningConfig};
use fpage_core::schedule::lr_at;
use fpage_core::synth::EmbeddingStoreGenerator;
use fpage_core::{decode_expectation, encode_label, LabelCodecConfig, Result, TrainConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub fn label_distribution(age: i64, sigma: f64, num_classes: usize) -> Result<Vec<f64>> {
    let cfg = LabelCodecConfig::new(num_classes, sigma)?;
    Ok(encode_label(age, &cfg)?.into_inner())
}

/// Learning rate sampled `points_per_epoch` times per epoch over `epochs`.
pub fn lr_schedule(
    lr_start: f64,
    lr_peak: f64,
    warmup_epochs: usize,
    decay_gamma: f64,
    epochs: usize,
    points_per_epoch: usize,
) -> Result<Vec<f64>> {
    let cfg = TrainConfig {
        lr_start,
        lr_peak,
        warmup_epochs,
        decay_gamma,
        max_epochs: epochs.max(1),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let steps = epochs * points_per_epoch.max(1);
    Ok((0..=steps)
        .map(|i| lr_at(i as f64 / points_per_epoch.max(1) as f64, &cfg))
        .collect())
}

#[derive(Debug, Serialize)]
pub struct DemoPoint {
    pub face_id: String,
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    /// Cluster index in the winning run; `None` for noise.
    pub cluster: Option<usize>,
    pub kept: bool,
    /// `main`, `contaminant` or `outlier`.
    pub planted: &'static str,
}

#[derive(Debug, Serialize)]
pub struct DemoCleaning {
    pub largest_size: usize,
    pub second_size: usize,
    pub ratio: f64,
    pub ambiguous: bool,
    pub winning_run: usize,
    pub runs_summary: Vec<Vec<usize>>,
    pub points: Vec<DemoPoint>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = dot(&v, &v).sqrt();
    if n < 1e-9 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

fn centroid<'a>(vs: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    for v in vs {
        c.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    c
}

/// Plants one subject, runs the cleaning consensus on it and projects the
/// embeddings onto the plane through both identity centres.
pub fn cleaning_demo(
    ratio: f64,
    spread: f64,
    eps: f64,
    min_pts: usize,
    num_runs: usize,
    seed: u64,
) -> Result<DemoCleaning> {
    let gen = EmbeddingStoreGenerator {
        spread,
        ..EmbeddingStoreGenerator::default()
    };
    let subject = gen.subject("demo", ratio, seed);
    let cfg = CleaningConfig {
        eps,
        min_pts,
        num_runs,
        seed,
        ..CleaningConfig::default()
    };
    let consensus = consensus_for_subject(&subject.records, &cfg)?;

    let planted = |id: &str| {
        if subject.main_faces.iter().any(|f| f == id) {
            "main"
        } else if subject.contaminant_faces.iter().any(|f| f == id) {
            "contaminant"
        } else {
            "outlier"
        }
    };
    let dim = gen.dim;
    let of = |kind: &'static str| {
        subject
            .records
            .iter()
            .filter(move |r| planted(&r.face_id) == kind)
            .map(|r| &r.embedding)
    };
    let u1 = normalized(centroid(of("main"), dim)).unwrap_or_else(|| {
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        e
    });
    let orth = |v: Vec<f64>| {
        let d = dot(&v, &u1);
        normalized(v.iter().zip(&u1).map(|(a, b)| a - d * b).collect())
    };
    let u2 = orth(centroid(of("contaminant"), dim))
        .or_else(|| orth(centroid(of("outlier"), dim)))
        .or_else(|| (0..dim).find_map(|k| {
            let mut e = vec![0.0; dim];
            e[k] = 1.0;
            orth(e)
        }))
        .expect("some axis is independent of u1");

    let points = subject
        .records
        .iter()
        .map(|r| {
            let cluster = consensus
                .clusters
                .iter()
                .position(|c| c.len() > 1 && c.contains(&r.face_id));
            DemoPoint {
                face_id: r.face_id.clone(),
                image_id: r.image_id.clone(),
                x: dot(&r.embedding, &u1),
                y: dot(&r.embedding, &u2),
                cluster,
                kept: consensus.kept_faces.contains(&r.face_id),
                planted: planted(&r.face_id),
            }
        })
        .collect();
    Ok(DemoCleaning {
        largest_size: consensus.largest_size,
        second_size: consensus.second_size,
        ratio: consensus.ratio(),
        ambiguous: consensus.ambiguous,
        winning_run: consensus.winning_run,
        runs_summary: consensus.runs_summary,
        points,
    })
}

fn js(e: fpage_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = labelDistribution)]
pub fn label_distribution_js(age: i32, sigma: f64, num_classes: usize) -> std::result::Result<Vec<f64>, JsError> {
    label_distribution(age as i64, sigma, num_classes).map_err(js)
}

#[wasm_bindgen(js_name = decodeExpectation)]
pub fn decode_expectation_js(probs: &[f64]) -> std::result::Result<f64, JsError> {
    decode_expectation(probs).map_err(js)
}

#[wasm_bindgen(js_name = lrSchedule)]
pub fn lr_schedule_js(
    lr_start: f64,
    lr_peak: f64,
    warmup_epochs: usize,
    decay_gamma: f64,
    epochs: usize,
    points_per_epoch: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    lr_schedule(lr_start, lr_peak, warmup_epochs, decay_gamma, epochs, points_per_epoch).map_err(js)
}

/// JSON-encoded [`DemoCleaning`].
#[wasm_bindgen(js_name = cleaningDemo)]
pub fn cleaning_demo_js(
    ratio: f64,
    spread: f64,
    eps: f64,
    min_pts: usize,
    num_runs: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    let out = cleaning_demo(ratio, spread, eps, min_pts, num_runs, seed as u64).map_err(js)?;
    serde_json::to_string(&out).map_err(|e| JsError::new(&e.to_string()))
}
