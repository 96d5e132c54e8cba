//! User-study sessions, annotation storage and the ranking/rating report.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{round_half_up, seed_from_digest, sha256};

pub const VIDEOS_PER_SET: usize = 4;
pub const RATING_MIN: u8 = 1;
pub const RATING_MAX: u8 = 5;
pub const UNNAMED_MODEL: &str = "(unnamed)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyVideo {
    pub model_id: String,
    pub video: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudySet {
    pub set_id: String,
    pub prompt: String,
    pub reference_image: PathBuf,
    pub videos: Vec<StudyVideo>,
}

impl StudySet {
    pub fn model_ids(&self) -> Vec<&str> {
        self.videos.iter().map(|v| v.model_id.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<&str> = self.model_ids().into_iter().collect();
        if self.videos.len() != VIDEOS_PER_SET || ids.len() != VIDEOS_PER_SET {
            return Err(StudyError::BadSet(format!(
                "set `{}` needs {VIDEOS_PER_SET} videos with distinct model ids",
                self.set_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratings {
    pub object_identity: u8,
    pub scene_identity: u8,
    pub overall_quality: u8,
}

impl Ratings {
    fn aspects(&self) -> [(&'static str, u8); 3] {
        [
            ("object_identity", self.object_identity),
            ("scene_identity", self.scene_identity),
            ("overall_quality", self.overall_quality),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub participant_id: String,
    pub set_id: String,
    pub ranks: BTreeMap<String, u8>,
    pub ratings: BTreeMap<String, Ratings>,
    pub display_order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    RankViolation,
    RatingOutOfRange,
    MissingRating,
    UnknownModel,
    BadDisplayOrder,
    MissingField,
    Malformed,
    UnknownSet,
    DuplicateSubmission,
}

/// One machine-readable reason a record was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyViolation {
    pub kind: ViolationKind,
    pub field: String,
    pub message: String,
}

impl StudyViolation {
    pub fn new(kind: ViolationKind, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind,
            field: field.into(),
            message: message.into(),
        }
    }
}

fn list(v: &[StudyViolation]) -> String {
    v.iter().map(|x| x.message.as_str()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("rank violation: {}", list(.0))]
    RankViolation(Vec<StudyViolation>),
    #[error("rating out of range: {}", list(.0))]
    RatingOutOfRange(Vec<StudyViolation>),
    #[error("invalid annotation: {}", list(.0))]
    InvalidRecord(Vec<StudyViolation>),
    #[error("participant `{participant}` already submitted set `{set}`")]
    DuplicateSubmission { participant: String, set: String },
    #[error("unknown study set `{0}`")]
    UnknownSet(String),
    #[error("no annotations to aggregate")]
    EmptyStudy,
    #[error("bad study set: {0}")]
    BadSet(String),
    #[error("annotation log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, StudyError>;

impl StudyError {
    /// Violations behind a rejected record; empty for other errors.
    pub fn violations(&self) -> &[StudyViolation] {
        match self {
            StudyError::RankViolation(v) | StudyError::RatingOutOfRange(v) | StudyError::InvalidRecord(v) => v,
            _ => &[],
        }
    }

    fn from_violations(v: Vec<StudyViolation>) -> Self {
        if v.iter().any(|x| x.kind == ViolationKind::RankViolation) {
            StudyError::RankViolation(v)
        } else if v.iter().any(|x| x.kind == ViolationKind::RatingOutOfRange) {
            StudyError::RatingOutOfRange(v)
        } else {
            StudyError::InvalidRecord(v)
        }
    }
}

/// Check every record invariant. With a set, model ids must also match it.
pub fn record_violations(rec: &AnnotationRecord, set: Option<&StudySet>) -> Vec<StudyViolation> {
    use ViolationKind::*;
    let mut out = Vec::new();
    if rec.participant_id.trim().is_empty() {
        out.push(StudyViolation::new(MissingField, "participant_id", "participant_id is empty"));
    }
    if rec.set_id.trim().is_empty() {
        out.push(StudyViolation::new(MissingField, "set_id", "set_id is empty"));
    }

    let models: BTreeSet<&str> = match set {
        Some(s) => s.model_ids().into_iter().collect(),
        None => rec.ranks.keys().map(String::as_str).collect(),
    };
    if let Some(s) = set {
        for m in rec.ranks.keys().chain(rec.ratings.keys()) {
            if !models.contains(m.as_str()) {
                out.push(StudyViolation::new(
                    UnknownModel,
                    format!("ranks.{m}"),
                    format!("model `{m}` is not part of set `{}`", s.set_id),
                ));
            }
        }
    }

    let mut ranks: Vec<u8> = rec.ranks.values().copied().collect();
    ranks.sort_unstable();
    let want: Vec<u8> = (1..=VIDEOS_PER_SET as u8).collect();
    if ranks != want || models.iter().any(|m| !rec.ranks.contains_key(*m)) {
        out.push(StudyViolation::new(
            RankViolation,
            "ranks",
            format!("ranks must assign each of the {VIDEOS_PER_SET} videos a unique rank 1..{VIDEOS_PER_SET}, got {ranks:?}"),
        ));
    }

    for m in &models {
        match rec.ratings.get(*m) {
            None => out.push(StudyViolation::new(
                MissingRating,
                format!("ratings.{m}"),
                format!("no ratings for model `{m}`"),
            )),
            Some(r) => {
                for (aspect, v) in r.aspects() {
                    if !(RATING_MIN..=RATING_MAX).contains(&v) {
                        out.push(StudyViolation::new(
                            RatingOutOfRange,
                            format!("ratings.{m}.{aspect}"),
                            format!("{aspect} for `{m}` is {v}, expected {RATING_MIN}..={RATING_MAX}"),
                        ));
                    }
                }
            }
        }
    }

    let mut order = rec.display_order.clone();
    order.sort_unstable();
    if order != (0..VIDEOS_PER_SET).collect::<Vec<_>>() {
        out.push(StudyViolation::new(
            BadDisplayOrder,
            "display_order",
            format!("display_order must be a permutation of 0..{VIDEOS_PER_SET}"),
        ));
    }
    out
}

pub fn validate_record(rec: &AnnotationRecord, set: Option<&StudySet>) -> Result<()> {
    let v = record_violations(rec, set);
    if v.is_empty() {
        Ok(())
    } else {
        Err(StudyError::from_violations(v))
    }
}

/// Display order for one participant and set: a seeded shuffle of
/// `0..4` keyed by all three inputs.
pub fn presentation_order(seed: u64, participant_id: &str, set_id: &str) -> Vec<usize> {
    let mut buf = seed.to_le_bytes().to_vec();
    for s in [participant_id, set_id] {
        buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from_digest(&sha256(&buf)));
    let mut order: Vec<usize> = (0..VIDEOS_PER_SET).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seed: u64,
    pub sets: Vec<StudySet>,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.sets {
            s.validate()?;
            if !seen.insert(s.set_id.as_str()) {
                return Err(StudyError::BadSet(format!("duplicate set id `{}`", s.set_id)));
            }
        }
        Ok(())
    }

    pub fn set(&self, set_id: &str) -> Option<&StudySet> {
        self.sets.iter().find(|s| s.set_id == set_id)
    }

    pub fn assign_presentation(&self, participant_id: &str, set_id: &str) -> Result<Vec<usize>> {
        self.set(set_id)
            .ok_or_else(|| StudyError::UnknownSet(set_id.to_owned()))?;
        Ok(presentation_order(self.seed, participant_id, set_id))
    }

    /// Model order used for reporting: first appearance across sets.
    pub fn model_order(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for v in self.sets.iter().flat_map(|s| &s.videos) {
            if !out.contains(&v.model_id) {
                out.push(v.model_id.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSet {
    #[serde(flatten)]
    pub set: StudySet,
    pub display_order: Vec<usize>,
    pub submitted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub participant_id: String,
    pub sets: Vec<SessionSet>,
    pub complete: bool,
}

struct Writer {
    file: File,
    keys: HashSet<(String, String)>,
}

/// Append-only JSONL annotation log with an in-memory snapshot.
///
/// Submissions serialize on the writer lock; readers clone an `Arc` of the
/// current record list and never block on disk I/O.
pub struct StudyStore {
    path: PathBuf,
    config: StudyConfig,
    writer: Mutex<Writer>,
    records: RwLock<Arc<Vec<AnnotationRecord>>>,
}

impl StudyStore {
    /// Open (or create) the log, re-validating every stored record.
    pub fn open(path: impl Into<PathBuf>, config: StudyConfig) -> Result<Self> {
        config.validate()?;
        let path = path.into();
        let io = |source| StudyError::Io {
            path: path.clone(),
            source,
        };
        let mut records = Vec::new();
        let mut keys = HashSet::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |message: String| StudyError::Corrupt { line: i + 1, message };
                let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                let set = config
                    .set(&rec.set_id)
                    .ok_or_else(|| corrupt(format!("unknown set `{}`", rec.set_id)))?;
                validate_record(&rec, Some(set)).map_err(|e| corrupt(e.to_string()))?;
                if !keys.insert((rec.participant_id.clone(), rec.set_id.clone())) {
                    return Err(corrupt("duplicate submission".into()));
                }
                records.push(rec);
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(Self {
            path,
            config,
            writer: Mutex::new(Writer { file, keys }),
            records: RwLock::new(Arc::new(records)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn snapshot(&self) -> Arc<Vec<AnnotationRecord>> {
        self.records.read().expect("records lock").clone()
    }

    /// Validate and durably append. Returns the 1-based record id.
    pub fn submit(&self, rec: AnnotationRecord) -> Result<u64> {
        let set = self
            .config
            .set(&rec.set_id)
            .ok_or_else(|| StudyError::UnknownSet(rec.set_id.clone()))?;
        validate_record(&rec, Some(set))?;
        let mut w = self.writer.lock().expect("writer lock");
        let key = (rec.participant_id.clone(), rec.set_id.clone());
        if w.keys.contains(&key) {
            return Err(StudyError::DuplicateSubmission {
                participant: key.0,
                set: key.1,
            });
        }
        let mut line = serde_json::to_string(&rec).expect("record serializes");
        line.push('\n');
        let io = |source| StudyError::Io {
            path: self.path.clone(),
            source,
        };
        w.file.write_all(line.as_bytes()).map_err(io)?;
        w.file.sync_data().map_err(io)?;
        w.keys.insert(key);
        let mut guard = self.records.write().expect("records lock");
        let mut next = Vec::clone(&guard);
        next.push(rec);
        let id = next.len() as u64;
        *guard = Arc::new(next);
        Ok(id)
    }

    pub fn session(&self, participant_id: &str) -> Session {
        let w = self.writer.lock().expect("writer lock");
        let sets: Vec<SessionSet> = self
            .config
            .sets
            .iter()
            .map(|s| SessionSet {
                set: s.clone(),
                display_order: presentation_order(self.config.seed, participant_id, &s.set_id),
                submitted: w.keys.contains(&(participant_id.to_owned(), s.set_id.clone())),
            })
            .collect();
        Session {
            participant_id: participant_id.to_owned(),
            complete: sets.iter().all(|s| s.submitted),
            sets,
        }
    }

    pub fn report(&self) -> Result<StudyReport> {
        aggregate(&self.snapshot(), &self.config.model_order())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub overall_quality: f64,
    pub object_identity: f64,
    pub scene_identity: f64,
    pub avg_rank: f64,
    pub pct_ranked_first: f64,
    /// Annotations that include this model.
    pub n: u64,
    pub rank_sum: u64,
    pub first_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub models: BTreeMap<String, ModelMetrics>,
    /// Preferred row order; models missing here render after, sorted.
    #[serde(default)]
    pub model_order: Vec<String>,
    pub n_annotations: u64,
    pub n_participants: u64,
}

#[derive(Default)]
struct Acc {
    n: u64,
    rank_sum: u64,
    first: u64,
    oq: u64,
    oi: u64,
    si: u64,
}

/// Per-model means and rank shares over all annotations. Order of the
/// input does not matter; `model_order` only affects rendering.
pub fn aggregate(records: &[AnnotationRecord], model_order: &[String]) -> Result<StudyReport> {
    if records.is_empty() {
        return Err(StudyError::EmptyStudy);
    }
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    let mut participants = BTreeSet::new();
    for rec in records {
        participants.insert(rec.participant_id.as_str());
        for (m, &rank) in &rec.ranks {
            let a = acc.entry(m.clone()).or_default();
            a.n += 1;
            a.rank_sum += rank as u64;
            a.first += (rank == 1) as u64;
            if let Some(r) = rec.ratings.get(m) {
                a.oq += r.overall_quality as u64;
                a.oi += r.object_identity as u64;
                a.si += r.scene_identity as u64;
            }
        }
    }
    let models = acc
        .into_iter()
        .map(|(m, a)| {
            let n = a.n as f64;
            (
                m,
                ModelMetrics {
                    overall_quality: a.oq as f64 / n,
                    object_identity: a.oi as f64 / n,
                    scene_identity: a.si as f64 / n,
                    avg_rank: a.rank_sum as f64 / n,
                    pct_ranked_first: 100.0 * a.first as f64 / n,
                    n: a.n,
                    rank_sum: a.rank_sum,
                    first_count: a.first,
                },
            )
        })
        .collect();
    Ok(StudyReport {
        models,
        model_order: model_order.to_vec(),
        n_annotations: records.len() as u64,
        n_participants: participants.len() as u64,
    })
}

impl StudyReport {
    /// Rows in render order.
    pub fn rows(&self) -> Vec<(&str, &ModelMetrics)> {
        let mut out: Vec<(&str, &ModelMetrics)> = Vec::new();
        for m in &self.model_order {
            if let Some((k, v)) = self.models.get_key_value(m) {
                if !out.iter().any(|(n, _)| *n == k) {
                    out.push((k, v));
                }
            }
        }
        for (k, v) in &self.models {
            if !self.model_order.contains(k) {
                out.push((k, v));
            }
        }
        out
    }
}

const COLUMNS: [&str; 5] = [
    "Overall Quality",
    "Object Identity",
    "Scene Identity",
    "Avg. Rank",
    "% Ranked 1st",
];

/// Fixed-width text table, two decimals for means and rank, one for the
/// first-place share.
pub fn render_report(report: &StudyReport) -> String {
    let rows: Vec<(String, [String; 5])> = report
        .rows()
        .into_iter()
        .map(|(name, m)| {
            let name = if name.trim().is_empty() { UNNAMED_MODEL } else { name };
            (
                name.to_owned(),
                [
                    format!("{:.2}", round_half_up(m.overall_quality, 2)),
                    format!("{:.2}", round_half_up(m.object_identity, 2)),
                    format!("{:.2}", round_half_up(m.scene_identity, 2)),
                    format!("{:.2}", round_half_up(m.avg_rank, 2)),
                    format!("{:.1}%", round_half_up(m.pct_ranked_first, 1)),
                ],
            )
        })
        .collect();
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max("Model".len());
    let widths: Vec<usize> = COLUMNS
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|(_, c)| c[i].len()).max().unwrap_or(0).max(h.len()))
        .collect();
    let total = name_w + widths.iter().map(|w| w + 3).sum::<usize>();

    let mut out = String::new();
    let mut line = format!("{:<name_w$}", "Model");
    for (h, w) in COLUMNS.iter().zip(&widths) {
        line.push_str(&format!(" | {h:>w$}"));
    }
    out.push_str(&line);
    out.push('\n');
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for (name, cells) in &rows {
        let pad = name_w - name.chars().count();
        let mut line = format!("{name}{}", " ".repeat(pad));
        for (c, w) in cells.iter().zip(&widths) {
            line.push_str(&format!(" | {c:>w$}"));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str(&format!(
        "{} annotations from {} participants\n",
        report.n_annotations, report.n_participants
    ));
    out
}

impl fmt::Display for StudyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_report(self))
    }
}
