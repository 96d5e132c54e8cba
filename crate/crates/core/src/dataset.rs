//! Curated training samples, the transition-phrase caption protocol, category
//! statistics and the trainer configuration.
//!
//! The manifest is JSON Lines with one [`TrainingSample`] per line. It is
//! append-only: ids are assigned monotonically and never reused.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{CANVAS_HEIGHT, CANVAS_WIDTH};
use crate::frames::{self, TRAIN_FRAMES};

/// Identifier prepended to every training caption and generation prompt.
pub const TRANSITION_PHRASE: &str = "ad23r2 the camera view suddenly changes.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CaptionError {
    #[error("caption is empty")]
    EmptyCaption,
    #[error("caption already carries the transition phrase")]
    AlreadyPrefixed,
    #[error("text does not start with the transition phrase and a non-empty remainder")]
    MissingPrefix,
}

/// A caption of the form `<phrase> <caption>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TransitionedCaption(String);

impl TransitionedCaption {
    /// Accept text that already carries exactly one well-formed prefix.
    pub fn parse(text: &str) -> std::result::Result<Self, CaptionError> {
        let rest = text
            .strip_prefix(TRANSITION_PHRASE)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or(CaptionError::MissingPrefix)?;
        if rest.trim().is_empty() {
            return Err(CaptionError::MissingPrefix);
        }
        Ok(Self(text.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The caption without the transition phrase.
    pub fn body(&self) -> &str {
        &self.0[TRANSITION_PHRASE.len() + 1..]
    }
}

impl TryFrom<String> for TransitionedCaption {
    type Error = CaptionError;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<TransitionedCaption> for String {
    fn from(c: TransitionedCaption) -> Self {
        c.0
    }
}

impl fmt::Display for TransitionedCaption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn has_transition_prefix(text: &str) -> bool {
    text.trim_start().starts_with(TRANSITION_PHRASE)
}

pub fn prefix_transition(caption: &str) -> std::result::Result<TransitionedCaption, CaptionError> {
    if caption.trim().is_empty() {
        return Err(CaptionError::EmptyCaption);
    }
    if has_transition_prefix(caption) {
        return Err(CaptionError::AlreadyPrefixed);
    }
    Ok(TransitionedCaption(format!("{TRANSITION_PHRASE} {caption}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    HumanObject,
    HumanHuman,
    ElementInsertion,
    RobotManipulation,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::HumanObject,
        Category::HumanHuman,
        Category::ElementInsertion,
        Category::RobotManipulation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::HumanObject => "human_object",
            Category::HumanHuman => "human_human",
            Category::ElementInsertion => "element_insertion",
            Category::RobotManipulation => "robot_manipulation",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

/// One manifest line. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub id: u64,
    pub composite_path: PathBuf,
    pub caption: String,
    pub category: Category,
    pub source_video: PathBuf,
    pub frame_count: usize,
    pub element_labels: Vec<String>,
}

/// A sample before it is stored; `id: None` asks the manifest to assign one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDraft {
    #[serde(default)]
    pub id: Option<u64>,
    pub composite_path: PathBuf,
    pub caption: String,
    pub category: Category,
    pub source_video: PathBuf,
    pub frame_count: usize,
    #[serde(default)]
    pub element_labels: Vec<String>,
}

impl SampleDraft {
    fn with_id(self, id: u64) -> TrainingSample {
        TrainingSample {
            id,
            composite_path: self.composite_path,
            caption: self.caption,
            category: self.category,
            source_video: self.source_video,
            frame_count: self.frame_count,
            element_labels: self.element_labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &'static str, message: impl Into<String>) {
        self.violations.push(Violation {
            field,
            message: message.into(),
        });
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field == field)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("validation failed: {0}")]
    ValidationFailed(ValidationReport),
    #[error("sample id {0} already exists")]
    DuplicateId(u64),
    #[error("id {id} would break monotonic ordering (next is {next})")]
    NonMonotonicId { id: u64, next: u64 },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    #[error("manifest line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Check every record invariant; relative paths resolve against `base_dir`.
pub fn validate_sample(
    composite_path: &Path,
    caption: &str,
    source_video: &Path,
    frame_count: usize,
    base_dir: &Path,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    if frame_count != TRAIN_FRAMES {
        report.push(
            "frame_count",
            format!("expected {TRAIN_FRAMES} frames, got {frame_count}"),
        );
    }
    match image::image_dimensions(resolve(base_dir, composite_path)) {
        Ok((w, h)) if (w, h) == (CANVAS_WIDTH, CANVAS_HEIGHT) => {}
        Ok((w, h)) => report.push(
            "composite_path",
            format!("composite is {w}x{h}, expected {CANVAS_WIDTH}x{CANVAS_HEIGHT}"),
        ),
        Err(e) => report.push("composite_path", format!("unreadable composite: {e}")),
    }
    if caption.trim().is_empty() {
        report.push("caption", "caption is empty");
    } else if has_transition_prefix(caption) {
        report.push("caption", "caption already starts with the transition phrase");
    }
    let video = resolve(base_dir, source_video);
    if video.is_dir() {
        match frames::probe(&video) {
            Ok((_, _, n)) if n == frame_count => {}
            Ok((_, _, n)) => report.push(
                "source_video",
                format!("source video has {n} frames, record says {frame_count}"),
            ),
            Err(e) => report.push("source_video", e.to_string()),
        }
    } else {
        report.push("source_video", format!("{} is not a frame directory", video.display()));
    }
    report
}

pub fn validate_draft(draft: &SampleDraft, base_dir: &Path) -> ValidationReport {
    validate_sample(
        &draft.composite_path,
        &draft.caption,
        &draft.source_video,
        draft.frame_count,
        base_dir,
    )
}

pub fn validate_record(sample: &TrainingSample, base_dir: &Path) -> ValidationReport {
    validate_sample(
        &sample.composite_path,
        &sample.caption,
        &sample.source_video,
        sample.frame_count,
        base_dir,
    )
}

/// JSONL manifest. Paths inside records are relative to the manifest's directory.
#[derive(Debug)]
pub struct Manifest {
    path: PathBuf,
    samples: Vec<TrainingSample>,
}

impl Manifest {
    /// Open `path`, creating an empty manifest if the file does not exist yet.
    pub fn open(path: &Path) -> Result<Self> {
        let io_err = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut samples = Vec::new();
        if path.exists() {
            let file = fs::File::open(path).map_err(io_err)?;
            let mut seen = HashSet::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let s: TrainingSample = serde_json::from_str(&line).map_err(|e| DatasetError::Corrupt {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                if !seen.insert(s.id) {
                    return Err(DatasetError::Corrupt {
                        line: i + 1,
                        message: format!("id {} repeats", s.id),
                    });
                }
                samples.push(s);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            samples,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn base_dir(&self) -> PathBuf {
        self.path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    pub fn next_id(&self) -> u64 {
        self.samples.iter().map(|s| s.id + 1).max().unwrap_or(1)
    }

    /// Validate, assign an id, and append one full line to the manifest file.
    pub fn add_sample(&mut self, draft: SampleDraft) -> Result<u64> {
        if let Some(id) = draft.id {
            if self.samples.iter().any(|s| s.id == id) {
                return Err(DatasetError::DuplicateId(id));
            }
            if id < self.next_id() {
                return Err(DatasetError::NonMonotonicId {
                    id,
                    next: self.next_id(),
                });
            }
        }
        let report = validate_draft(&draft, &self.base_dir());
        if !report.is_ok() {
            return Err(DatasetError::ValidationFailed(report));
        }
        let id = draft.id.unwrap_or_else(|| self.next_id());
        let sample = draft.with_id(id);
        let mut line = serde_json::to_string(&sample).expect("sample serializes");
        line.push('\n');
        let io_err = |source| DatasetError::Io {
            path: self.path.clone(),
            source,
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err)?;
        f.write_all(line.as_bytes()).map_err(io_err)?;
        f.sync_data().map_err(io_err)?;
        self.samples.push(sample);
        Ok(id)
    }

    /// Re-validate every stored sample; returns the failing ids with reports.
    pub fn validate_all(&self) -> Vec<(u64, ValidationReport)> {
        let base = self.base_dir();
        self.samples
            .iter()
            .map(|s| (s.id, validate_record(s, &base)))
            .filter(|(_, r)| !r.is_ok())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryStats {
    pub total: usize,
    pub counts: BTreeMap<Category, usize>,
    /// Percent per category, rounded half-up to one decimal.
    pub percent: BTreeMap<Category, f64>,
}

/// Percentages in tenths, rounded half-up, then nudged so they total exactly
/// 1000. Only entries whose rounding was closest to the other way move.
fn tenths(counts: &BTreeMap<Category, usize>, total: usize) -> Vec<(Category, i64)> {
    let t = total as i64;
    let mut rows: Vec<(Category, i64, i64)> = counts
        .iter()
        .map(|(c, n)| {
            let q = 1000 * *n as i64;
            let (base, rem) = (q / t, q % t);
            (*c, if 2 * rem >= t { base + 1 } else { base }, rem)
        })
        .collect();
    let mut excess: i64 = rows.iter().map(|r| r.1).sum::<i64>() - 1000;
    while excess != 0 {
        let pick = if excess > 0 {
            // rounded up with the smallest remainder
            rows.iter_mut()
                .filter(|r| r.2 != 0 && 2 * r.2 >= t)
                .min_by_key(|r| r.2)
        } else {
            rows.iter_mut().filter(|r| 2 * r.2 < t && r.2 != 0).max_by_key(|r| r.2)
        };
        match pick {
            Some(r) => {
                let step = if excess > 0 { -1 } else { 1 };
                r.1 += step;
                // an adjusted entry is no longer eligible
                r.2 = 0;
                excess += step;
            }
            None => break,
        }
    }
    rows.into_iter().map(|(c, v, _)| (c, v)).collect()
}

pub fn category_stats(samples: &[TrainingSample]) -> Result<CategoryStats> {
    if samples.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|c| (*c, 0)).collect();
    for s in samples {
        *counts.get_mut(&s.category).expect("all categories present") += 1;
    }
    let total = samples.len();
    let percent = tenths(&counts, total)
        .into_iter()
        .map(|(c, t)| (c, t as f64 / 10.0))
        .collect();
    Ok(CategoryStats {
        total,
        counts,
        percent,
    })
}

impl fmt::Display for CategoryStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in Category::ALL {
            writeln!(
                f,
                "{:<20} {:>4} {:>6.1}%",
                c.as_str(),
                self.counts[&c],
                self.percent[&c]
            )?;
        }
        write!(f, "{:<20} {:>4}", "total", self.total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub lora_rank: u32,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoisers {
    pub high_noise: LoraSpec,
    pub low_noise: LoraSpec,
}

/// Configuration handed to the external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lora_rank: u32,
    pub alpha: f64,
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: u32,
    pub resolution: Resolution,
    pub frames: u32,
    pub transition_phrase: String,
    pub denoisers: Denoisers,
}

/// Values that replace the defaults. `alpha` has no default and must be set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides {
    pub lora_rank: Option<u32>,
    pub alpha: Option<f64>,
    pub learning_rate: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<u32>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub frames: Option<u32>,
}

impl TrainOverrides {
    /// Apply one `key=value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| DatasetError::InvalidOverride(format!("{key}: cannot parse `{value}`")))
        }
        match key {
            "lora_rank" | "rank" => self.lora_rank = Some(num(key, value)?),
            "alpha" => self.alpha = Some(num(key, value)?),
            "learning_rate" | "lr" => self.learning_rate = Some(num(key, value)?),
            "adam_epsilon" | "eps" => self.adam_epsilon = Some(num(key, value)?),
            "weight_decay" | "wd" => self.weight_decay = Some(num(key, value)?),
            "batch_size" | "batch" => self.batch_size = Some(num(key, value)?),
            "width" => self.width = Some(num(key, value)?),
            "height" => self.height = Some(num(key, value)?),
            "frames" => self.frames = Some(num(key, value)?),
            other => return Err(DatasetError::InvalidOverride(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| DatasetError::InvalidOverride(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }
}

fn positive_f(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(DatasetError::InvalidOverride(format!("{name} must be positive, got {v}")))
    }
}

fn positive_u(name: &str, v: u32) -> Result<u32> {
    if v > 0 {
        Ok(v)
    } else {
        Err(DatasetError::InvalidOverride(format!("{name} must be positive, got 0")))
    }
}

/// Trainer config with the reference hyperparameters, after checking that
/// every stored sample still validates.
pub fn emit_train_config(manifest: &Manifest, overrides: &TrainOverrides) -> Result<TrainConfig> {
    if manifest.samples().is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    if let Some((id, report)) = manifest.validate_all().into_iter().next() {
        tracing::warn!(id, %report, "manifest sample no longer validates");
        return Err(DatasetError::ValidationFailed(report));
    }
    build_train_config(overrides)
}

pub fn build_train_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let alpha = positive_f(
        "alpha",
        o.alpha
            .ok_or_else(|| DatasetError::InvalidOverride("alpha is required (no default)".into()))?,
    )?;
    let lora_rank = positive_u("lora_rank", o.lora_rank.unwrap_or(128))?;
    let spec = LoraSpec { lora_rank, alpha };
    Ok(TrainConfig {
        lora_rank,
        alpha,
        learning_rate: positive_f("learning_rate", o.learning_rate.unwrap_or(1e-4))?,
        adam_epsilon: positive_f("adam_epsilon", o.adam_epsilon.unwrap_or(1e-10))?,
        weight_decay: positive_f("weight_decay", o.weight_decay.unwrap_or(3e-2))?,
        batch_size: positive_u("batch_size", o.batch_size.unwrap_or(4))?,
        resolution: Resolution {
            width: positive_u("width", o.width.unwrap_or(1344))?,
            height: positive_u("height", o.height.unwrap_or(768))?,
        },
        frames: positive_u("frames", o.frames.unwrap_or(TRAIN_FRAMES as u32))?,
        transition_phrase: TRANSITION_PHRASE.to_owned(),
        denoisers: Denoisers {
            high_noise: spec.clone(),
            low_noise: spec,
        },
    })
}

/// One line of the trainer's caption list: the stored caption with the
/// transition phrase applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrainingCaption {
    pub id: u64,
    pub composite_path: PathBuf,
    pub caption: TransitionedCaption,
}

pub fn emit_training_captions(manifest: &Manifest) -> Result<Vec<TrainingCaption>> {
    if manifest.samples().is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    manifest
        .samples()
        .iter()
        .map(|s| {
            let caption = prefix_transition(&s.caption).map_err(|e| {
                let mut report = ValidationReport::default();
                report.push("caption", format!("sample {}: {e}", s.id));
                DatasetError::ValidationFailed(report)
            })?;
            Ok(TrainingCaption {
                id: s.id,
                composite_path: s.composite_path.clone(),
                caption,
            })
        })
        .collect()
}

/// JSON Lines rendering of [`emit_training_captions`].
pub fn render_training_captions(captions: &[TrainingCaption]) -> String {
    captions
        .iter()
        .map(|c| serde_json::to_string(c).expect("caption serializes") + "\n")
        .collect()
}

/// Pretty JSON with a trailing newline; the exact bytes written to disk.
pub fn render_train_config(cfg: &TrainConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s
}
