//! Per-patch labels, case manifests, click annotations and the case-level train/val split.

use std::collections::{BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lunggrid::{GridSpec, PatchGrid, Rect};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("nodule(s) intersect no patch: {}", .0.join(", "))]
    UncoveredNodules(Vec<String>),
    #[error("annotation grid {annotation:?} does not match case grid {grid:?}")]
    GridMismatch {
        annotation: GridSpec,
        grid: GridSpec,
    },
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("duplicate case id {0:?} in manifest")]
    DuplicateCase(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> LabelError {
    LabelError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Axis-aligned nodule annotation in original-image coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoduleBox {
    pub id: String,
    #[serde(flatten)]
    pub rect: Rect,
}

impl NoduleBox {
    pub fn new(id: impl Into<String>, rect: Rect) -> Self {
        Self {
            id: id.into(),
            rect,
        }
    }
}

/// One boolean per patch in grid order; `true` is positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchLabelVector(pub Vec<bool>);

impl PatchLabelVector {
    pub fn negatives(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn count_positive(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// How nodule boxes become patch labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Only the patch with the largest intersection per nodule (lowest index on ties).
    #[default]
    Argmax,
    /// Every patch the nodule touches.
    AllIntersecting,
}

/// Turns nodule boxes into patch labels. Every nodule must touch at least one patch.
pub fn assign_patch_labels(
    grid: &PatchGrid,
    nodules: &[NoduleBox],
    mode: LabelMode,
) -> Result<PatchLabelVector, LabelError> {
    let rects: Vec<Rect> = grid.rects().copied().collect();
    let mut labels = PatchLabelVector::negatives(rects.len());
    let mut uncovered = Vec::new();
    for nodule in nodules {
        let areas = rects.iter().map(|r| r.intersection_area(&nodule.rect));
        match mode {
            LabelMode::Argmax => {
                // strict > keeps the lowest index among ties
                let best = areas
                    .enumerate()
                    .fold((None, 0u64), |(best, best_area), (i, a)| {
                        if a > best_area {
                            (Some(i), a)
                        } else {
                            (best, best_area)
                        }
                    })
                    .0;
                match best {
                    Some(i) => labels.0[i] = true,
                    None => uncovered.push(nodule.id.clone()),
                }
            }
            LabelMode::AllIntersecting => {
                let mut any = false;
                for (i, a) in areas.enumerate() {
                    if a > 0 {
                        labels.0[i] = true;
                        any = true;
                    }
                }
                if !any {
                    uncovered.push(nodule.id.clone());
                }
            }
        }
    }
    if uncovered.is_empty() {
        Ok(labels)
    } else {
        Err(LabelError::UncoveredNodules(uncovered))
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "nckuh-like")]
    NckuhLike,
    #[serde(rename = "vbd-like")]
    VbdLike,
    #[serde(rename = "mohw-like")]
    MohwLike,
    #[serde(rename = "synthetic")]
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

/// One radiograph in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    #[serde(rename = "mask", default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default)]
    pub nodules: Vec<NoduleBox>,
    #[serde(default)]
    pub difficult: bool,
    pub source: Source,
    #[serde(default)]
    pub split: Split,
}

impl CaseRecord {
    /// Resolves a manifest path against the manifest's directory.
    pub fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, LabelError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| LabelError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn check_unique(cases: &[CaseRecord]) -> Result<(), LabelError> {
    let mut seen = HashSet::new();
    for c in cases {
        if !seen.insert(c.case_id.as_str()) {
            return Err(LabelError::DuplicateCase(c.case_id.clone()));
        }
    }
    Ok(())
}

/// Reads a line-delimited manifest, rejecting duplicate case ids.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<CaseRecord>, LabelError> {
    let cases: Vec<CaseRecord> = read_jsonl(path.as_ref())?;
    check_unique(&cases)?;
    Ok(cases)
}

pub fn write_manifest(path: impl AsRef<Path>, cases: &[CaseRecord]) -> Result<(), LabelError> {
    check_unique(cases)?;
    let path = path.as_ref();
    let mut out = String::new();
    for c in cases {
        out.push_str(&serde_json::to_string(c).expect("case record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Split

/// Case-level random split: `round(n/4)` unassigned cases go to validation, the rest to
/// training. Cases that already carry a split keep it.
pub fn split_cases(mut cases: Vec<CaseRecord>, seed: u64) -> Result<Vec<CaseRecord>, LabelError> {
    if cases.is_empty() {
        return Err(LabelError::InvalidInput("no cases to split".into()));
    }
    let mut pool: Vec<usize> = (0..cases.len())
        .filter(|&i| cases[i].split == Split::Unassigned)
        .collect();
    let n_val = (pool.len() as f64 / 4.0).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    for (k, &i) in pool.iter().enumerate() {
        cases[i].split = if k < n_val { Split::Val } else { Split::Train };
    }
    Ok(cases)
}

// ---------------------------------------------------------------------------
// Annotations

/// Patch clicks for one case by one annotator, with client-reported timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub case_id: String,
    #[serde(rename = "grid")]
    pub grid_spec: GridSpec,
    pub positives: BTreeSet<usize>,
    pub annotator: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    /// `finished_at − started_at`; recomputed on load.
    #[serde(default)]
    pub duration_ms: i64,
    /// Server receive time, for audit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received_at: Option<DateTime<Utc>>,
}

impl AnnotationRecord {
    pub fn new(
        case_id: impl Into<String>,
        grid_spec: GridSpec,
        positives: impl IntoIterator<Item = usize>,
        annotator: impl Into<String>,
        started_at: DateTime<Utc>,
        finished_at: DateTime<Utc>,
    ) -> Result<Self, LabelError> {
        let rec = Self {
            case_id: case_id.into(),
            grid_spec,
            positives: positives.into_iter().collect(),
            annotator: annotator.into(),
            started_at,
            finished_at,
            duration_ms: (finished_at - started_at).num_milliseconds(),
            received_at: None,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Checks timing order and that every index falls inside the grid.
    pub fn validate(&self) -> Result<(), LabelError> {
        if self.finished_at < self.started_at {
            return Err(LabelError::InvalidAnnotation(format!(
                "finished_at {} precedes started_at {}",
                self.finished_at.to_rfc3339(),
                self.started_at.to_rfc3339()
            )));
        }
        let total = self.grid_spec.total_patches();
        if let Some(&bad) = self.positives.iter().find(|&&i| i >= total) {
            return Err(LabelError::InvalidAnnotation(format!(
                "patch index {bad} out of range for {total}-patch grid"
            )));
        }
        Ok(())
    }
}

/// Label vector true exactly at the annotated indices.
pub fn annotation_to_labels(
    a: &AnnotationRecord,
    grid: &PatchGrid,
) -> Result<PatchLabelVector, LabelError> {
    if a.grid_spec != grid.spec {
        return Err(LabelError::GridMismatch {
            annotation: a.grid_spec,
            grid: grid.spec,
        });
    }
    let mut labels = PatchLabelVector::negatives(grid.len());
    for &i in &a.positives {
        if i >= grid.len() {
            return Err(LabelError::InvalidAnnotation(format!(
                "patch index {i} out of range for {}-patch grid",
                grid.len()
            )));
        }
        labels.0[i] = true;
    }
    Ok(labels)
}

/// Append-only, line-delimited annotation log.
#[derive(Debug)]
pub struct AnnotationLog {
    path: PathBuf,
    file: File,
}

impl AnnotationLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validates and appends one record, flushing it to disk before returning.
    pub fn append(&mut self, rec: &AnnotationRecord) -> Result<(), LabelError> {
        rec.validate()?;
        let mut line = serde_json::to_string(rec).expect("annotation serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| io_err(&self.path, e))
    }

    /// Reads back every record in append order; a missing file is an empty log.
    pub fn replay(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, LabelError> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut recs: Vec<AnnotationRecord> = read_jsonl(path)?;
        for r in &mut recs {
            r.duration_ms = (r.finished_at - r.started_at).num_milliseconds();
            r.validate()?;
        }
        Ok(recs)
    }
}
