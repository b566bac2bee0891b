//! Identity cleaning: cannot-link constrained DBSCAN over face embeddings,
//! repeated random-order runs and a largest-cluster consensus per subject.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::train::mix_seed;

pub const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceEmbeddingRecord {
    pub face_id: String,
    pub image_id: String,
    #[serde(default)]
    pub subject_id: String,
    pub bbox: [f64; 4],
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningConfig {
    /// Neighbourhood radius in cosine distance.
    pub eps: f64,
    /// Neighbourhood size, the point itself included, that makes a core point.
    pub min_pts: usize,
    pub num_runs: usize,
    pub ambiguity_ratio: f64,
    pub seed: u64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            eps: 0.35,
            min_pts: 3,
            num_runs: 20,
            ambiguity_ratio: 0.7,
            seed: 0,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 2.0) {
            return Err(Error::Config(format!("eps must lie in (0,2), got {}", self.eps)));
        }
        if self.min_pts < 2 {
            return Err(Error::Config(format!("min_pts must be at least 2, got {}", self.min_pts)));
        }
        if self.num_runs == 0 {
            return Err(Error::Config("num_runs must be at least 1".into()));
        }
        if !(self.ambiguity_ratio > 0.0 && self.ambiguity_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "ambiguity_ratio must lie in (0,1], got {}",
                self.ambiguity_ratio
            )));
        }
        Ok(())
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Checks unit norms, a shared dimension and unique face ids.
pub fn validate_records(records: &[FaceEmbeddingRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    let dim = records.first().map(|r| r.embedding.len()).unwrap_or(0);
    for r in records {
        if !seen.insert(r.face_id.as_str()) {
            return Err(Error::InvalidRecord(format!("duplicate face_id {}", r.face_id)));
        }
        if r.embedding.len() != dim || dim == 0 {
            return Err(Error::InvalidRecord(format!(
                "face {} has embedding length {}, expected {dim}",
                r.face_id,
                r.embedding.len()
            )));
        }
        let norm = r.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidRecord(format!("face {} embedding norm {norm} is not 1", r.face_id)));
        }
    }
    Ok(())
}

/// Cluster label per record, `None` for noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub num_clusters: usize,
}

impl ClusterAssignment {
    /// Record indices per cluster, in cluster-id order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    pub fn noise(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_none()).collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Label {
    Unvisited,
    Noise,
    Cluster(usize),
}

/// DBSCAN visiting points in `order`, where a point joins a cluster only
/// if no member already in it comes from the same image.
///
/// Neighbourhoods include the point itself and are listed in `order`.
/// A point blocked by the constraint stays unassigned and may later seed
/// or join another cluster.
pub fn constrained_dbscan(
    records: &[FaceEmbeddingRecord],
    order: &[usize],
    eps: f64,
    min_pts: usize,
) -> Result<ClusterAssignment> {
    validate_records(records)?;
    let n = records.len();
    let mut check = order.to_vec();
    check.sort_unstable();
    if check != (0..n).collect::<Vec<_>>() {
        return Err(Error::Config("order is not a permutation of the records".into()));
    }
    let neighbours = |p: usize| -> Vec<usize> {
        order
            .iter()
            .copied()
            .filter(|&q| cosine_distance(&records[p].embedding, &records[q].embedding) <= eps)
            .collect()
    };

    let mut labels = vec![Label::Unvisited; n];
    let mut images: Vec<HashSet<&str>> = Vec::new();
    for &p in order {
        if labels[p] != Label::Unvisited {
            continue;
        }
        let seeds = neighbours(p);
        if seeds.len() < min_pts {
            labels[p] = Label::Noise;
            continue;
        }
        let c = images.len();
        images.push(HashSet::from([records[p].image_id.as_str()]));
        labels[p] = Label::Cluster(c);
        let mut queue: Vec<usize> = seeds.into_iter().filter(|&q| q != p).collect();
        let mut head = 0;
        while head < queue.len() {
            let q = queue[head];
            head += 1;
            let blocked = images[c].contains(records[q].image_id.as_str());
            match labels[q] {
                Label::Noise => {
                    if !blocked {
                        labels[q] = Label::Cluster(c);
                        images[c].insert(&records[q].image_id);
                    }
                }
                Label::Unvisited => {
                    if blocked {
                        continue;
                    }
                    labels[q] = Label::Cluster(c);
                    images[c].insert(&records[q].image_id);
                    let nq = neighbours(q);
                    if nq.len() >= min_pts {
                        queue.extend(nq);
                    }
                }
                Label::Cluster(_) => {}
            }
        }
    }
    Ok(ClusterAssignment {
        labels: labels
            .into_iter()
            .map(|l| match l {
                Label::Cluster(c) => Some(c),
                _ => None,
            })
            .collect(),
        num_clusters: images.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "kept_faces")]
pub enum ReviewState {
    Unreviewed,
    Kept,
    Discarded,
    Edited(BTreeSet<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSummary {
    pub face_id: String,
    pub image_id: String,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConsensus {
    pub subject_id: String,
    pub kept_faces: BTreeSet<String>,
    pub largest_size: usize,
    pub second_size: usize,
    pub ambiguous: bool,
    /// Cluster sizes per run, noise counted as singletons, descending.
    pub runs_summary: Vec<Vec<usize>>,
    pub review_state: ReviewState,
    /// Index of the run the kept cluster came from.
    pub winning_run: usize,
    /// Clusters of the winning run as sorted face-id lists, largest first.
    pub clusters: Vec<Vec<String>>,
    /// Every face of the subject, sorted by face id.
    pub faces: Vec<FaceSummary>,
}

impl ClusterConsensus {
    pub fn ratio(&self) -> f64 {
        if self.largest_size == 0 {
            0.0
        } else {
            self.second_size as f64 / self.largest_size as f64
        }
    }

    pub fn face(&self, face_id: &str) -> Option<&FaceSummary> {
        self.faces
            .binary_search_by(|f| f.face_id.as_str().cmp(face_id))
            .ok()
            .map(|i| &self.faces[i])
    }
}

/// FNV-1a, used to derive a per-subject seed independent of store order.
pub fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// The shuffled processing order of run `run` for a subject.
pub fn run_order(subject_id: &str, n: usize, seed: u64, run: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a(subject_id), run as u64));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Clusters of one run as sorted face-id lists, noise as singletons,
/// ordered by size descending then members ascending.
fn run_groups(records: &[FaceEmbeddingRecord], assignment: &ClusterAssignment) -> Vec<Vec<String>> {
    let mut groups: Vec<Vec<String>> = assignment
        .clusters()
        .into_iter()
        .chain(assignment.noise().into_iter().map(|i| vec![i]))
        .map(|members| {
            let mut ids: Vec<String> = members.iter().map(|&i| records[i].face_id.clone()).collect();
            ids.sort();
            ids
        })
        .collect();
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    groups
}

pub fn consensus_for_subject(records: &[FaceEmbeddingRecord], cfg: &CleaningConfig) -> Result<ClusterConsensus> {
    cfg.validate()?;
    let first = records.first().ok_or(Error::Empty("subject without faces"))?;
    let subject_id = first.subject_id.clone();
    if let Some(r) = records.iter().find(|r| r.subject_id != subject_id) {
        return Err(Error::InvalidRecord(format!(
            "face {} belongs to subject {}, expected {subject_id}",
            r.face_id, r.subject_id
        )));
    }
    let mut runs = Vec::with_capacity(cfg.num_runs);
    for run in 0..cfg.num_runs {
        let order = run_order(&subject_id, records.len(), cfg.seed, run);
        let assignment = constrained_dbscan(records, &order, cfg.eps, cfg.min_pts)?;
        runs.push(run_groups(records, &assignment));
    }

    // Ties go to the earliest run; within a run groups are already ordered
    // by size then member set.
    let mut winner = 0;
    for (r, groups) in runs.iter().enumerate().skip(1) {
        if groups[0].len() > runs[winner][0].len() {
            winner = r;
        }
    }
    let clusters = runs[winner].clone();
    let largest_size = clusters[0].len();
    let second_size = clusters.get(1).map_or(0, Vec::len);
    let ambiguous = second_size as f64 > cfg.ambiguity_ratio * largest_size as f64;
    let mut faces: Vec<FaceSummary> = records
        .iter()
        .map(|r| FaceSummary {
            face_id: r.face_id.clone(),
            image_id: r.image_id.clone(),
            bbox: r.bbox,
        })
        .collect();
    faces.sort_by(|a, b| a.face_id.cmp(&b.face_id));
    Ok(ClusterConsensus {
        subject_id,
        kept_faces: clusters[0].iter().cloned().collect(),
        largest_size,
        second_size,
        ambiguous,
        runs_summary: runs.iter().map(|g| g.iter().map(Vec::len).collect()).collect(),
        review_state: if ambiguous {
            ReviewState::Unreviewed
        } else {
            ReviewState::Kept
        },
        winning_run: winner,
        clusters,
        faces,
    })
}

/// Reads a directory of per-subject JSON Lines files. A record without a
/// subject id takes the file stem. Subjects are returned sorted by id.
pub fn read_embedding_store(dir: &Path) -> Result<BTreeMap<String, Vec<FaceEmbeddingRecord>>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    let mut subjects: BTreeMap<String, Vec<FaceEmbeddingRecord>> = BTreeMap::new();
    for path in files {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut count = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: FaceEmbeddingRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if rec.subject_id.is_empty() {
                rec.subject_id = stem.clone();
            }
            subjects.entry(rec.subject_id.clone()).or_default().push(rec);
            count += 1;
        }
        if count == 0 {
            log::warn!("subject file {} has no faces; skipped", path.display());
        }
    }
    Ok(subjects)
}

/// Consensus for every subject, sorted by subject id.
pub fn clean_subjects(
    subjects: &BTreeMap<String, Vec<FaceEmbeddingRecord>>,
    cfg: &CleaningConfig,
) -> Result<Vec<ClusterConsensus>> {
    cfg.validate()?;
    subjects
        .par_iter()
        .filter(|(id, recs)| {
            if recs.is_empty() {
                log::warn!("subject {id} has no faces; skipped");
            }
            !recs.is_empty()
        })
        .map(|(_, recs)| consensus_for_subject(recs, cfg))
        .collect()
}

pub fn run_cleaning(store: &Path, cfg: &CleaningConfig) -> Result<Vec<ClusterConsensus>> {
    clean_subjects(&read_embedding_store(store)?, cfg)
}

pub fn write_consensus(path: &Path, consensus: &[ClusterConsensus]) -> Result<()> {
    let mut text = Vec::new();
    for c in consensus {
        serde_json::to_writer(&mut text, c)?;
        text.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&text).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

pub fn read_consensus(path: &Path) -> Result<Vec<ClusterConsensus>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes `consensus.jsonl` and `review_queue.jsonl` (ambiguous subjects only).
pub fn write_cleaning_outputs(dir: &Path, consensus: &[ClusterConsensus]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_consensus(&dir.join("consensus.jsonl"), consensus)?;
    let queue: Vec<ClusterConsensus> = consensus.iter().filter(|c| c.ambiguous).cloned().collect();
    write_consensus(&dir.join("review_queue.jsonl"), &queue)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, image: &str, e: Vec<f64>) -> FaceEmbeddingRecord {
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        FaceEmbeddingRecord {
            face_id: id.into(),
            image_id: image.into(),
            subject_id: "s".into(),
            bbox: [0.0, 0.0, 1.0, 1.0],
            embedding: e.into_iter().map(|x| x / n).collect(),
        }
    }

    fn two_groups() -> Vec<FaceEmbeddingRecord> {
        let mut v = Vec::new();
        for i in 0..5 {
            v.push(rec(&format!("a{i}"), &format!("ia{i}"), vec![1.0, 0.01 * i as f64, 0.0]));
            v.push(rec(&format!("b{i}"), &format!("ib{i}"), vec![0.1, 1.0, 0.01 * i as f64]));
        }
        v
    }

    #[test]
    fn two_planted_groups() {
        let recs = two_groups();
        let order: Vec<usize> = (0..recs.len()).collect();
        let a = constrained_dbscan(&recs, &order, 0.3, 3).unwrap();
        assert_eq!(a.num_clusters, 2);
        let clusters = a.clusters();
        for c in clusters {
            let first = recs[c[0]].face_id.chars().next();
            assert_eq!(c.len(), 5);
            assert!(c.iter().all(|&i| recs[i].face_id.chars().next() == first));
        }
    }

    #[test]
    fn shared_image_never_coclustered() {
        let recs = vec![rec("x", "img", vec![1.0, 0.0]), rec("y", "img", vec![1.0, 0.0])];
        for order in [[0, 1], [1, 0]] {
            let a = constrained_dbscan(&recs, &order, 0.3, 2).unwrap();
            assert!(a.labels[0].is_none() || a.labels[0] != a.labels[1]);
        }
    }

    #[test]
    fn far_points_are_noise() {
        let recs = vec![
            rec("x", "1", vec![1.0, 0.0, 0.0]),
            rec("y", "2", vec![0.0, 1.0, 0.0]),
            rec("z", "3", vec![0.0, 0.0, 1.0]),
        ];
        let a = constrained_dbscan(&recs, &[2, 0, 1], 0.3, 2).unwrap();
        assert_eq!(a.num_clusters, 0);
        assert_eq!(a.noise().len(), 3);
    }

    #[test]
    fn rejects_bad_input() {
        let mut recs = two_groups();
        recs[1].face_id = "a0".into();
        let order: Vec<usize> = (0..recs.len()).collect();
        assert!(constrained_dbscan(&recs, &order, 0.3, 3).is_err());
        let mut recs = two_groups();
        recs[0].embedding[0] = 2.0;
        assert!(constrained_dbscan(&recs, &order, 0.3, 3).is_err());
        assert!(constrained_dbscan(&two_groups(), &[0, 1], 0.3, 3).is_err());
    }

    #[test]
    fn single_face_is_kept_singleton() {
        let c = consensus_for_subject(&[rec("only", "1", vec![1.0])], &CleaningConfig::default()).unwrap();
        assert_eq!(c.kept_faces.len(), 1);
        assert_eq!((c.largest_size, c.second_size, c.ambiguous), (1, 0, false));
        assert_eq!(c.review_state, ReviewState::Kept);
    }

    #[test]
    fn ten_versus_eight_is_ambiguous() {
        let mut recs = Vec::new();
        for i in 0..10 {
            recs.push(rec(&format!("a{i:02}"), &format!("a{i}"), vec![1.0, 0.001 * i as f64, 0.0]));
        }
        for i in 0..8 {
            recs.push(rec(&format!("b{i:02}"), &format!("b{i}"), vec![0.0, 0.001 * i as f64, 1.0]));
        }
        let c = consensus_for_subject(&recs, &CleaningConfig::default()).unwrap();
        assert_eq!((c.largest_size, c.second_size), (10, 8));
        assert!(c.ambiguous);
        assert_eq!(c.review_state, ReviewState::Unreviewed);
        recs.truncate(13);
        let c = consensus_for_subject(&recs, &CleaningConfig::default()).unwrap();
        assert_eq!((c.largest_size, c.second_size, c.ambiguous), (10, 3, false));
    }
}
