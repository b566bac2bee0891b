//! Human review of ambiguous subjects: an append-only decision log over a
//! consensus file, queue views and the cleaned export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::cleaning::{read_consensus, ClusterConsensus, ReviewState};
use crate::error::{io_err, Error, Result};

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewAction {
    Keep,
    Discard,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub subject_id: String,
    pub action: ReviewAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_faces: Option<BTreeSet<String>>,
    pub reviewer: String,
    /// Stamped by the store when absent.
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

impl ReviewDecision {
    pub fn state(&self) -> ReviewState {
        match self.action {
            ReviewAction::Keep => ReviewState::Kept,
            ReviewAction::Discard => ReviewState::Discarded,
            ReviewAction::Edit => ReviewState::Edited(self.kept_faces.clone().unwrap_or_default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub subject_id: String,
    pub largest_size: usize,
    pub second_size: usize,
    pub ratio: f64,
    pub review_state: ReviewState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuePage {
    pub items: Vec<QueueItem>,
    pub total: usize,
    pub next_cursor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceView {
    pub face_id: String,
    pub image_id: String,
    pub bbox: [f64; 4],
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectView {
    pub subject_id: String,
    pub ambiguous: bool,
    pub largest_size: usize,
    pub second_size: usize,
    pub ratio: f64,
    pub review_state: ReviewState,
    pub kept_faces: BTreeSet<String>,
    pub clusters: Vec<Vec<String>>,
    pub runs_summary: Vec<Vec<usize>>,
    pub faces: Vec<FaceView>,
    pub history: Vec<ReviewDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub subject_id: String,
    pub face_id: String,
    pub image_id: String,
    pub bbox: [f64; 4],
}

/// URL path under which a face's source image is served.
pub fn thumbnail_url(image_id: &str) -> String {
    format!("/thumbs/{image_id}")
}

pub struct ReviewStore {
    consensus: BTreeMap<String, ClusterConsensus>,
    history: Vec<ReviewDecision>,
    latest: BTreeMap<String, usize>,
    log: Option<(PathBuf, File)>,
}

impl ReviewStore {
    /// In-memory store without a log.
    pub fn new(consensus: Vec<ClusterConsensus>) -> Self {
        Self {
            consensus: consensus.into_iter().map(|c| (c.subject_id.clone(), c)).collect(),
            history: Vec::new(),
            latest: BTreeMap::new(),
            log: None,
        }
    }

    /// Loads the consensus file and replays the decision log, creating it
    /// if missing. A torn final line left by a crash is ignored.
    pub fn open(consensus_path: &Path, decisions_path: &Path) -> Result<Self> {
        let mut store = Self::new(read_consensus(consensus_path)?);
        if decisions_path.exists() {
            let text = fs::read_to_string(decisions_path).map_err(io_err(decisions_path))?;
            let lines: Vec<&str> = text.split('\n').collect();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let torn_tail = i + 1 == lines.len();
                let parsed = serde_json::from_str::<ReviewDecision>(line)
                    .map_err(|e| e.to_string())
                    .and_then(|d| store.validate(&d).map(|_| d).map_err(|e| e.to_string()));
                match parsed {
                    Ok(d) => store.apply(d),
                    Err(_) if torn_tail => log::warn!("ignoring incomplete final line of {}", decisions_path.display()),
                    Err(message) => {
                        return Err(Error::Parse {
                            path: decisions_path.to_path_buf(),
                            line: i + 1,
                            message,
                        })
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(decisions_path)
            .map_err(io_err(decisions_path))?;
        store.log = Some((decisions_path.to_path_buf(), file));
        Ok(store)
    }

    fn apply(&mut self, d: ReviewDecision) {
        self.latest.insert(d.subject_id.clone(), self.history.len());
        self.history.push(d);
    }

    pub fn validate(&self, d: &ReviewDecision) -> Result<()> {
        let c = self
            .consensus
            .get(&d.subject_id)
            .ok_or_else(|| Error::UnknownSubject(d.subject_id.clone()))?;
        if d.reviewer.trim().is_empty() {
            return Err(Error::InvalidDecision("reviewer is required".into()));
        }
        match (d.action, &d.kept_faces) {
            (ReviewAction::Edit, None) => Err(Error::InvalidDecision("edit requires kept_faces".into())),
            (ReviewAction::Edit, Some(faces)) => {
                if faces.is_empty() {
                    return Err(Error::InvalidDecision(
                        "edit requires a non-empty kept_faces set; use discard to drop a subject".into(),
                    ));
                }
                let mut images = BTreeSet::new();
                for f in faces {
                    let face = c
                        .face(f)
                        .ok_or_else(|| Error::InvalidDecision(format!("face {f} is not a candidate of {}", c.subject_id)))?;
                    if !images.insert(face.image_id.as_str()) {
                        return Err(Error::InvalidDecision(format!(
                            "kept faces share image {}",
                            face.image_id
                        )));
                    }
                }
                Ok(())
            }
            (_, Some(_)) => Err(Error::InvalidDecision("kept_faces is only allowed with edit".into())),
            (_, None) => Ok(()),
        }
    }

    /// Validates, stamps, appends and syncs the decision, then applies it.
    pub fn decide(&mut self, mut d: ReviewDecision) -> Result<ReviewDecision> {
        self.validate(&d)?;
        if d.timestamp.is_none() {
            d.timestamp = Some(Utc::now());
        }
        if let Some((path, file)) = &mut self.log {
            let mut line = serde_json::to_vec(&d)?;
            line.push(b'\n');
            file.write_all(&line).map_err(io_err(path.as_path()))?;
            file.sync_data().map_err(io_err(path.as_path()))?;
        }
        self.apply(d.clone());
        Ok(d)
    }

    pub fn history(&self) -> &[ReviewDecision] {
        &self.history
    }

    pub fn decision(&self, subject_id: &str) -> Option<&ReviewDecision> {
        self.latest.get(subject_id).map(|&i| &self.history[i])
    }

    /// Latest decision per subject.
    pub fn decisions(&self) -> BTreeMap<String, ReviewDecision> {
        self.latest
            .iter()
            .map(|(s, &i)| (s.clone(), self.history[i].clone()))
            .collect()
    }

    pub fn review_state(&self, c: &ClusterConsensus) -> ReviewState {
        self.decision(&c.subject_id)
            .map(ReviewDecision::state)
            .unwrap_or_else(|| c.review_state.clone())
    }

    /// Ambiguous subjects awaiting a decision; with `include_decided`,
    /// every ambiguous subject together with its current state.
    pub fn queue(&self, cursor: usize, limit: usize, include_decided: bool) -> QueuePage {
        let limit = limit.clamp(1, MAX_PAGE_SIZE);
        let pending: Vec<&ClusterConsensus> = self
            .consensus
            .values()
            .filter(|c| c.ambiguous && (include_decided || self.decision(&c.subject_id).is_none()))
            .collect();
        let items = pending
            .iter()
            .skip(cursor)
            .take(limit)
            .map(|c| QueueItem {
                subject_id: c.subject_id.clone(),
                largest_size: c.largest_size,
                second_size: c.second_size,
                ratio: c.ratio(),
                review_state: self.review_state(c),
            })
            .collect();
        let next = cursor + limit;
        QueuePage {
            items,
            total: pending.len(),
            next_cursor: (next < pending.len()).then_some(next),
        }
    }

    pub fn subject(&self, subject_id: &str) -> Result<SubjectView> {
        let c = self
            .consensus
            .get(subject_id)
            .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
        Ok(SubjectView {
            subject_id: c.subject_id.clone(),
            ambiguous: c.ambiguous,
            largest_size: c.largest_size,
            second_size: c.second_size,
            ratio: c.ratio(),
            review_state: self.review_state(c),
            kept_faces: c.kept_faces.clone(),
            clusters: c.clusters.clone(),
            runs_summary: c.runs_summary.clone(),
            faces: c
                .faces
                .iter()
                .map(|f| FaceView {
                    face_id: f.face_id.clone(),
                    image_id: f.image_id.clone(),
                    bbox: f.bbox,
                    thumbnail: thumbnail_url(&f.image_id),
                })
                .collect(),
            history: self
                .history
                .iter()
                .filter(|d| d.subject_id == subject_id)
                .cloned()
                .collect(),
        })
    }

    /// Faces surviving cleaning and review for one subject.
    pub fn final_faces(&self, c: &ClusterConsensus) -> Option<BTreeSet<String>> {
        match self.review_state(c) {
            ReviewState::Unreviewed => None,
            ReviewState::Kept => Some(c.kept_faces.clone()),
            ReviewState::Discarded => None,
            ReviewState::Edited(faces) => Some(faces),
        }
    }

    pub fn export_records(&self) -> Vec<ExportRecord> {
        let mut out = Vec::new();
        for c in self.consensus.values() {
            let Some(faces) = self.final_faces(c) else { continue };
            for f in faces {
                let face = c.face(&f).expect("kept faces are candidates");
                out.push(ExportRecord {
                    subject_id: c.subject_id.clone(),
                    face_id: face.face_id.clone(),
                    image_id: face.image_id.clone(),
                    bbox: face.bbox,
                });
            }
        }
        out
    }

    /// The cleaned manifest as JSON Lines.
    pub fn export(&self) -> String {
        let mut text = String::new();
        for r in self.export_records() {
            text.push_str(&serde_json::to_string(&r).expect("export records serialize"));
            text.push('\n');
        }
        text
    }

    pub fn num_subjects(&self) -> usize {
        self.consensus.len()
    }
}
