//! Per-region statistics of the FPA attention weights over a dataset.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::model::ModelCheckpoint;
use crate::train::Sample;

pub fn decade_edges() -> Vec<i64> {
    (0..=10).map(|d| d * 10).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub label: String,
    pub n: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub class_names: Vec<String>,
    pub n: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Non-empty age groups keyed by label, e.g. `"20-30"`.
    pub group_breakdown: BTreeMap<String, GroupStats>,
}

/// Mean and population standard deviation per coordinate.
pub fn mean_std(vectors: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = vectors.len() as f64;
    let dim = vectors.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for v in vectors {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for v in vectors {
        var.iter_mut().zip(v.iter().zip(&mean)).for_each(|(s, (x, m))| *s += (x - m).powi(2));
    }
    (mean, var.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// Label of the half-open bin `[edges[i], edges[i+1])` containing `age`;
/// ages at or past the last edge fall in `">=last"`, below the first in `"<first"`.
pub fn age_group(age: i64, edges: &[i64]) -> String {
    match edges.iter().rposition(|&e| age >= e) {
        None => format!("<{}", edges[0]),
        Some(i) if i + 1 == edges.len() => format!(">={}", edges[i]),
        Some(i) => format!("{}-{}", edges[i], edges[i + 1]),
    }
}

/// Attention vectors for each sample, in input order.
pub fn attention_vectors(samples: &[Sample], checkpoint: &ModelCheckpoint, backbone: &dyn Backbone) -> Result<Vec<Vec<f64>>> {
    checkpoint.validate()?;
    checkpoint.check_backbone(backbone)?;
    samples
        .par_iter()
        .map(|s| {
            let bundle = backbone.extract_features(&s.image, &s.record.bbox)?;
            let pass = checkpoint.model.forward(&bundle)?;
            Ok(pass.attention().to_vec())
        })
        .collect()
}

pub fn probe(
    samples: &[Sample],
    checkpoint: &ModelCheckpoint,
    backbone: &dyn Backbone,
    age_group_edges: &[i64],
) -> Result<AttentionStats> {
    if samples.is_empty() {
        return Err(Error::Empty("probe manifest"));
    }
    if age_group_edges.is_empty() || age_group_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("age group edges must be non-empty and strictly increasing".into()));
    }
    let vectors = attention_vectors(samples, checkpoint, backbone)?;
    let (mean, std) = mean_std(&vectors);
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (s, v) in samples.iter().zip(&vectors) {
        groups
            .entry(age_group(s.record.age, age_group_edges))
            .or_default()
            .push(v.clone());
    }
    let group_breakdown = groups
        .into_iter()
        .map(|(label, vs)| {
            let (mean, std) = mean_std(&vs);
            (label.clone(), GroupStats { label, n: vs.len(), mean, std })
        })
        .collect();
    Ok(AttentionStats {
        class_names: checkpoint.class_names.clone(),
        n: samples.len(),
        mean,
        std,
        group_breakdown,
    })
}

impl AttentionStats {
    /// CSV: an overall block with header `class,mean,std`, then one block
    /// per age group headed `# group <label> (n=<count>)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,mean,std\n");
        let block = |out: &mut String, mean: &[f64], std: &[f64]| {
            for (k, name) in self.class_names.iter().enumerate() {
                out.push_str(&format!("{name},{},{}\n", mean[k], std[k]));
            }
        };
        block(&mut out, &self.mean, &self.std);
        for g in self.group_breakdown.values() {
            out.push_str(&format!("\n# group {} (n={})\nclass,mean,std\n", g.label, g.n));
            block(&mut out, &g.mean, &g.std);
        }
        out
    }

    pub fn mean_of(&self, class: &str) -> Option<f64> {
        self.class_names.iter().position(|c| c == class).map(|k| self.mean[k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_decade() {
        let e = decade_edges();
        assert_eq!(age_group(0, &e), "0-10");
        assert_eq!(age_group(19, &e), "10-20");
        assert_eq!(age_group(100, &e), ">=100");
        assert_eq!(age_group(-1, &e), "<0");
    }

    #[test]
    fn single_vector_has_zero_std() {
        let (m, s) = mean_std(&[vec![0.3, 0.7]]);
        assert_eq!(m, vec![0.3, 0.7]);
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[vec![1.0], vec![3.0]]);
        assert_eq!((m[0], s[0]), (2.0, 1.0));
    }
}
