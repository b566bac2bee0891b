//! Metrics (MAE, cumulative score), prediction files and paired t-tests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{io_err, Error, Result};

pub const DEFAULT_THRESHOLDS: [u32; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_path: String,
    pub true_age: i64,
    pub pred_age: f64,
    pub abs_err: f64,
}

impl PredictionRecord {
    pub fn new(image_path: impl Into<String>, true_age: i64, pred_age: f64) -> Self {
        Self {
            image_path: image_path.into(),
            true_age,
            pred_age,
            abs_err: (pred_age - true_age as f64).abs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pred_age.is_finite() || !self.abs_err.is_finite() {
            return Err(Error::NonFinite(format!("prediction for {}", self.image_path)));
        }
        let expected = (self.pred_age - self.true_age as f64).abs();
        if (expected - self.abs_err).abs() > 1e-9 {
            return Err(Error::InvalidRecord(format!(
                "{}: abs_err {} but |pred - true| = {expected}",
                self.image_path, self.abs_err
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae: f64,
    /// Threshold in years → percentage of records with error ≤ threshold.
    pub cs: BTreeMap<u32, f64>,
    pub per_image: Vec<PredictionRecord>,
}

/// Percentage of errors not greater than `threshold`.
pub fn cumulative_score(errors: &[f64], threshold: f64) -> f64 {
    let hits = errors.iter().filter(|&&e| e <= threshold).count();
    100.0 * hits as f64 / errors.len() as f64
}

pub fn evaluate(preds: &[PredictionRecord], thresholds: &[u32]) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    for p in preds {
        p.validate()?;
    }
    let errors: Vec<f64> = preds.iter().map(|p| p.abs_err).collect();
    let mae = errors.iter().sum::<f64>() / errors.len() as f64;
    let cs = thresholds
        .iter()
        .map(|&l| (l, cumulative_score(&errors, l as f64)))
        .collect();
    Ok(EvalReport {
        n: preds.len(),
        mae,
        cs,
        per_image: preds.to_vec(),
    })
}

impl EvalReport {
    /// CSV with header `threshold,cs`.
    pub fn cs_csv(&self) -> String {
        let mut out = String::from("threshold,cs\n");
        for (l, v) in &self.cs {
            out.push_str(&format!("{l},{v}\n"));
        }
        out
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub n: usize,
    pub mean_diff: f64,
    pub std_diff: f64,
    pub t: f64,
    pub p: f64,
    pub p_corrected: f64,
    pub alpha: f64,
    pub significant: bool,
}

/// Two-sided paired t-test on `a[i] - b[i]` with Bonferroni correction.
pub fn paired_t_test(errs_a: &[f64], errs_b: &[f64], num_comparisons: usize, alpha: f64) -> Result<TTestResult> {
    if errs_a.len() != errs_b.len() {
        return Err(Error::Shape {
            context: "paired t-test",
            expected: format!("{} values", errs_a.len()),
            actual: format!("{} values", errs_b.len()),
        });
    }
    let n = errs_a.len();
    if n < 2 {
        return Err(Error::Config(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    if num_comparisons == 0 {
        return Err(Error::Config("num_comparisons must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let d: Vec<f64> = errs_a.iter().zip(errs_b).map(|(a, b)| a - b).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("paired difference".into()));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let std = var.sqrt();
    let all_equal = d.iter().all(|&x| x == d[0]);
    let (t, p) = if all_equal || std == 0.0 {
        if d[0] == 0.0 {
            (0.0, 1.0)
        } else {
            return Err(Error::DegenerateVariance(d[0]));
        }
    } else {
        let t = nf.sqrt() * mean / std;
        let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::Config(e.to_string()))?;
        let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
        (t, p)
    };
    let p_corrected = (p * num_comparisons as f64).min(1.0);
    Ok(TTestResult {
        n,
        mean_diff: mean,
        std_diff: if all_equal { 0.0 } else { std },
        t,
        p,
        p_corrected,
        alpha,
        significant: p_corrected < alpha,
    })
}

/// Absolute errors of `b` aligned to the image order of `a`.
pub fn align_errors(a: &[PredictionRecord], b: &[PredictionRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let index: BTreeMap<&str, f64> = b.iter().map(|r| (r.image_path.as_str(), r.abs_err)).collect();
    if index.len() != b.len() || a.len() != b.len() {
        return Err(Error::InvalidRecord(
            "prediction files must cover the same images exactly once".into(),
        ));
    }
    let mut ea = Vec::with_capacity(a.len());
    let mut eb = Vec::with_capacity(a.len());
    for r in a {
        let other = index
            .get(r.image_path.as_str())
            .ok_or_else(|| Error::InvalidRecord(format!("{} missing from comparison file", r.image_path)))?;
        ea.push(r.abs_err);
        eb.push(*other);
    }
    Ok((ea, eb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fixture() -> Vec<PredictionRecord> {
        [0.0, 3.0, 6.0, 10.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &e)| PredictionRecord::new(format!("img{i}.png"), 30, 30.0 + e))
            .collect()
    }

    #[test]
    fn five_record_fixture() {
        let r = evaluate(&fixture(), &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.mae, 4.2);
        assert_eq!(r.cs[&5], 60.0);
        assert_eq!(r.cs[&10], 100.0);
    }

    #[test]
    fn exact_predictions() {
        let preds: Vec<_> = (0..4).map(|i| PredictionRecord::new(format!("{i}"), i, i as f64)).collect();
        let r = evaluate(&preds, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.mae, 0.0);
        assert!(r.cs.values().all(|&v| v == 100.0));
    }

    #[test]
    fn empty_list_is_rejected() {
        assert!(matches!(evaluate(&[], &DEFAULT_THRESHOLDS), Err(Error::Empty(_))));
    }

    #[test]
    fn symmetric_differences_give_zero_t() {
        let r = paired_t_test(&[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 1.0], 1, 0.05).unwrap();
        assert_eq!(r.t, 0.0);
        assert_abs_diff_eq!(r.p, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_variance_cases() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 4, 0.05).unwrap();
        assert_eq!((r.t, r.p, r.p_corrected), (0.0, 1.0, 1.0));
        assert!(matches!(
            paired_t_test(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0], 1, 0.05),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn mismatched_lengths_and_short_input() {
        assert!(paired_t_test(&[1.0, 2.0], &[1.0], 1, 0.05).is_err());
        assert!(paired_t_test(&[1.0], &[2.0], 1, 0.05).is_err());
    }

    #[test]
    fn csv_lists_thresholds() {
        let r = evaluate(&fixture(), &[5]).unwrap();
        assert_eq!(r.cs_csv(), "threshold,cs\n5,60\n");
    }
}
