//! Case state behind the HTTP layer: manifest, cached grids, scores, annotations, worklist.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

use chrono::{DateTime, Utc};
use lungpatch_core::imaging::{encode_pgm, encode_png, load_image, Image};
use lungpatch_core::labels::{read_manifest, AnnotationLog, AnnotationRecord, CaseRecord};
use lungpatch_core::nnet::{load_checkpoint, Preprocess, TinyResNet};
use lungpatch_core::pipeline::{case_mask, grid_for_mask, patch_cam, score_patches};
use lungpatch_core::{ErrorClass, GridSpec, PatchGrid, Rect, SegConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown case {0:?}")]
    NotFound(String),
    #[error("case {case_id}: {source}")]
    Case {
        case_id: String,
        #[source]
        source: lungpatch_core::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("annotation grid {got:?} does not match served grid {served:?}")]
    GridMismatch { got: GridSpec, served: GridSpec },
    #[error("no model checkpoint loaded")]
    NotReady,
    #[error("storage: {0}")]
    Storage(String),
}

impl StoreError {
    fn case(case_id: &str, source: impl Into<lungpatch_core::Error>) -> Self {
        StoreError::Case {
            case_id: case_id.into(),
            source: source.into(),
        }
    }

    pub fn is_validation(&self) -> bool {
        match self {
            StoreError::Invalid(_) => true,
            StoreError::Case { source, .. } => source.class() == ErrorClass::Validation,
            _ => false,
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub manifest: PathBuf,
    pub annotation_log: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Line-delimited [`CaseScores`]; read at startup (last entry per case wins) and appended
    /// to by every prediction.
    pub scores: Option<PathBuf>,
    pub grid: GridSpec,
    pub seg: SegConfig,
}

impl ServiceConfig {
    pub fn new(manifest: impl Into<PathBuf>, annotation_log: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            annotation_log: annotation_log.into(),
            checkpoint: None,
            scores: None,
            grid: GridSpec::default(),
            seg: SegConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Unread,
    InProgress,
    Labeled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    /// Maximum patch probability.
    #[default]
    Risk,
    Mean,
    /// Patches above the model's decision threshold.
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorklistEntry {
    pub case_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assigned_to: Option<String>,
    pub difficult: bool,
}

/// Per-patch probabilities for one case, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    pub scores: Vec<f64>,
}

impl CaseScores {
    pub fn risk(&self) -> Option<f64> {
        self.scores.iter().copied().reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDetail {
    pub case_id: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub difficult: bool,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assigned_to: Option<String>,
    pub grid: GridSpec,
    /// Row-major, left lung first, in image coordinates.
    pub rects: Vec<Rect>,
    pub annotations: Vec<AnnotationRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cam: Option<Vec<String>>,
}

/// Body of an annotation submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationBody {
    pub positives: Vec<usize>,
    pub annotator: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    /// Grid the client was shown; rejected if it differs from the served one.
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

struct Model {
    net: TinyResNet,
    preprocess: Preprocess,
    threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Pgm,
}

fn read<T>(l: &RwLock<T>) -> RwLockReadGuard<'_, T> {
    l.read().unwrap_or_else(|e| e.into_inner())
}

fn write<T>(l: &RwLock<T>) -> RwLockWriteGuard<'_, T> {
    l.write().unwrap_or_else(|e| e.into_inner())
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn storage(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Storage(format!("{}: {e}", path.display()))
}

pub fn read_scores(path: &Path) -> Result<Vec<CaseScores>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| storage(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| storage(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| storage(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub struct Store {
    base: PathBuf,
    grid_spec: GridSpec,
    seg: SegConfig,
    cases: BTreeMap<String, CaseRecord>,
    progress: RwLock<HashMap<String, (Status, Option<String>)>>,
    grids: RwLock<HashMap<String, PatchGrid>>,
    annotations: RwLock<HashMap<String, Vec<AnnotationRecord>>>,
    log: Mutex<AnnotationLog>,
    scores: RwLock<HashMap<String, Vec<f64>>>,
    scores_log: Option<(PathBuf, Mutex<File>)>,
    model: Option<Model>,
}

impl Store {
    /// Loads the manifest, replays the annotation and score logs and loads the checkpoint.
    pub fn open(cfg: &ServiceConfig) -> Result<Self> {
        cfg.grid
            .validate()
            .map_err(|e| StoreError::Invalid(e.to_string()))?;
        let records = read_manifest(&cfg.manifest).map_err(|e| storage(&cfg.manifest, e))?;
        let base = cfg
            .manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let cases: BTreeMap<String, CaseRecord> = records
            .into_iter()
            .map(|c| (c.case_id.clone(), c))
            .collect();

        let mut annotations: HashMap<String, Vec<AnnotationRecord>> = HashMap::new();
        let mut progress = HashMap::new();
        for rec in AnnotationLog::replay(&cfg.annotation_log)
            .map_err(|e| storage(&cfg.annotation_log, e))?
        {
            progress.insert(
                rec.case_id.clone(),
                (Status::Labeled, Some(rec.annotator.clone())),
            );
            annotations
                .entry(rec.case_id.clone())
                .or_default()
                .push(rec);
        }
        let log = AnnotationLog::open(&cfg.annotation_log)
            .map_err(|e| storage(&cfg.annotation_log, e))?;

        let mut scores = HashMap::new();
        let scores_log = match &cfg.scores {
            Some(p) => {
                for s in read_scores(p)? {
                    scores.insert(s.case_id, s.scores);
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| storage(p, e))?;
                Some((p.clone(), Mutex::new(f)))
            }
            None => None,
        };

        let model = match &cfg.checkpoint {
            Some(p) => {
                let ckpt = load_checkpoint(p).map_err(|e| storage(p, e))?;
                Some(Model {
                    net: ckpt.network().map_err(|e| storage(p, e))?,
                    preprocess: ckpt.train_config.preprocess,
                    threshold: ckpt.train_config.threshold,
                })
            }
            None => None,
        };

        Ok(Self {
            base,
            grid_spec: cfg.grid,
            seg: cfg.seg,
            cases,
            progress: RwLock::new(progress),
            grids: RwLock::new(HashMap::new()),
            annotations: RwLock::new(annotations),
            log: Mutex::new(log),
            scores: RwLock::new(scores),
            scores_log,
            model,
        })
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.grid_spec
    }

    pub fn has_model(&self) -> bool {
        self.model.is_some()
    }

    pub fn case_ids(&self) -> impl Iterator<Item = &str> {
        self.cases.keys().map(String::as_str)
    }

    fn record(&self, id: &str) -> Result<&CaseRecord> {
        self.cases
            .get(id)
            .ok_or_else(|| StoreError::NotFound(id.into()))
    }

    pub fn image(&self, id: &str) -> Result<Image> {
        let rec = self.record(id)?;
        load_image(CaseRecord::resolve(&self.base, &rec.image_path))
            .map_err(|e| StoreError::case(id, e))
    }

    /// Grid for the case's stored mask, or for the baseline segmentation when it has none.
    pub fn grid(&self, id: &str) -> Result<PatchGrid> {
        if let Some(g) = read(&self.grids).get(id) {
            return Ok(g.clone());
        }
        let rec = self.record(id)?;
        let image = self.image(id)?;
        let grid = self.grid_for(rec, &image)?;
        write(&self.grids).insert(id.into(), grid.clone());
        Ok(grid)
    }

    fn grid_for(&self, rec: &CaseRecord, image: &Image) -> Result<PatchGrid> {
        let mask = case_mask(rec, &self.base, image, &self.seg)
            .map_err(|e| StoreError::case(&rec.case_id, e))?;
        grid_for_mask(&mask, self.grid_spec).map_err(|e| StoreError::case(&rec.case_id, e))
    }

    pub fn annotations(&self, id: &str) -> Result<Vec<AnnotationRecord>> {
        self.record(id)?;
        Ok(read(&self.annotations).get(id).cloned().unwrap_or_default())
    }

    pub fn scores(&self, id: &str) -> Option<Vec<f64>> {
        read(&self.scores).get(id).cloned()
    }

    /// Case detail. Opening a case with an annotator name moves it from unread to in progress.
    pub fn detail(&self, id: &str, annotator: Option<&str>) -> Result<CaseDetail> {
        let rec = self.record(id)?;
        let image = self.image(id)?;
        let grid = self.grid(id)?;
        if let Some(name) = annotator.filter(|n| !n.is_empty()) {
            write(&self.progress)
                .entry(id.into())
                .or_insert_with(|| (Status::InProgress, Some(name.into())));
        }
        let (status, assigned_to) = self.progress_of(id);
        Ok(CaseDetail {
            case_id: id.into(),
            image: format!("/cases/{id}/image"),
            width: image.width(),
            height: image.height(),
            difficult: rec.difficult,
            status,
            assigned_to,
            grid: grid.spec,
            rects: grid.rects().copied().collect(),
            annotations: self.annotations(id)?,
            scores: self.scores(id),
            cam: self.has_model().then(|| {
                (0..grid.len())
                    .map(|k| format!("/cases/{id}/cam/{k}"))
                    .collect()
            }),
        })
    }

    fn progress_of(&self, id: &str) -> (Status, Option<String>) {
        read(&self.progress)
            .get(id)
            .cloned()
            .unwrap_or((Status::Unread, None))
    }

    /// Validates, appends to the log and applies to the served state, in that order.
    pub fn annotate(&self, id: &str, body: AnnotationBody) -> Result<AnnotationRecord> {
        self.record(id)?;
        if let Some(got) = body.grid {
            if got != self.grid_spec {
                return Err(StoreError::GridMismatch {
                    got,
                    served: self.grid_spec,
                });
            }
        }
        if body.annotator.trim().is_empty() {
            return Err(StoreError::Invalid("annotator must not be empty".into()));
        }
        let mut rec = AnnotationRecord::new(
            id,
            self.grid_spec,
            body.positives,
            body.annotator,
            body.started_at,
            body.finished_at,
        )
        .map_err(|e| StoreError::Invalid(e.to_string()))?;
        rec.received_at = Some(Utc::now());

        // holding the log lock while updating memory keeps both in the same order
        let mut log = lock(&self.log);
        log.append(&rec)
            .map_err(|e| StoreError::Storage(e.to_string()))?;
        write(&self.annotations)
            .entry(id.into())
            .or_default()
            .push(rec.clone());
        let mut progress = write(&self.progress);
        let entry = progress.entry(id.into()).or_insert((Status::Unread, None));
        entry.0 = Status::Labeled;
        if entry.1.is_none() {
            entry.1 = Some(rec.annotator.clone());
        }
        Ok(rec)
    }

    /// Every manifest case; scored cases by `order` descending then id, unscored cases last.
    pub fn worklist(&self, order: Order) -> Vec<WorklistEntry> {
        let threshold = self.model.as_ref().map_or(0.9, |m| m.threshold);
        let scores = read(&self.scores);
        let mut entries: Vec<WorklistEntry> = self
            .cases
            .values()
            .map(|rec| {
                let s = scores.get(&rec.case_id).filter(|s| !s.is_empty());
                let (status, assigned_to) = self.progress_of(&rec.case_id);
                WorklistEntry {
                    case_id: rec.case_id.clone(),
                    risk: s.and_then(|s| s.iter().copied().reduce(f64::max)),
                    mean: s.map(|s| s.iter().sum::<f64>() / s.len() as f64),
                    count: s.map(|s| s.iter().filter(|&&p| p > threshold).count()),
                    status,
                    assigned_to,
                    difficult: rec.difficult,
                }
            })
            .collect();
        let key = |e: &WorklistEntry| match order {
            Order::Risk => e.risk,
            Order::Mean => e.mean,
            Order::Count => e.count.map(|c| c as f64),
        };
        entries.sort_by(|a, b| match (key(a), key(b)) {
            (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.case_id.cmp(&b.case_id)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.case_id.cmp(&b.case_id),
        });
        entries
    }

    /// Runs segment → grid → classify for the case and records the scores.
    pub fn predict(&self, id: &str) -> Result<CaseScores> {
        let model = self.model.as_ref().ok_or(StoreError::NotReady)?;
        let image = self.image(id)?;
        let grid = self.grid(id)?;
        let scores = score_patches(&model.net, &image, &grid, &model.preprocess)
            .map_err(|e| StoreError::case(id, e))?;
        let out = CaseScores {
            case_id: id.into(),
            scores,
        };
        if let Some((path, file)) = &self.scores_log {
            let mut line = serde_json::to_string(&out).expect("scores serialize");
            line.push('\n');
            lock(file)
                .write_all(line.as_bytes())
                .map_err(|e| storage(path, e))?;
        }
        write(&self.scores).insert(id.into(), out.scores.clone());
        Ok(out)
    }

    pub fn image_bytes(&self, id: &str, format: ImageFormat) -> Result<Vec<u8>> {
        let image = self.image(id)?;
        match format {
            ImageFormat::Pgm => Ok(encode_pgm(&image)),
            ImageFormat::Png => encode_png(&image).map_err(|e| StoreError::case(id, e)),
        }
    }

    /// Positive-class activation map of one patch as an 8-bit PNG.
    pub fn cam_png(&self, id: &str, patch: usize) -> Result<Vec<u8>> {
        let model = self.model.as_ref().ok_or(StoreError::NotReady)?;
        let image = self.image(id)?;
        let grid = self.grid(id)?;
        if patch >= grid.len() {
            return Err(StoreError::Invalid(format!(
                "patch {patch} out of range for {}-patch grid",
                grid.len()
            )));
        }
        let heat = patch_cam(&model.net, &image, &grid, patch, &model.preprocess)
            .map_err(|e| StoreError::case(id, e))?;
        encode_png(&heat.to_image()).map_err(|e| StoreError::case(id, e))
    }
}
