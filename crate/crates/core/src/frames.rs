//! Frame sequences on disk and in memory.
//!
//! A video is a directory of `frame_%05d.png` files, zero-based and contiguous.
//! The two slicing operations the pipeline needs are the head crop used to
//! standardize training clips and the clean cut that drops the leading
//! transition frames from a generated video.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;
use thiserror::Error;

use crate::exec::Exec;

/// Training clips are standardized to this many frames.
pub const TRAIN_FRAMES: usize = 81;
/// Leading frames discarded after generation (Wan2.2's temporal compression).
pub const DEFAULT_FC: usize = 4;
/// Opaque metadata handed to the external encoder.
pub const DEFAULT_FPS: u32 = 16;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("no frame files in {0}")]
    NoFrames(PathBuf),
    #[error("frame {missing} is missing (found {found} frame files)")]
    MissingFrames { missing: usize, found: usize },
    #[error("frame {index} is {found:?}, expected {expected:?}")]
    DimensionMismatch {
        index: usize,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("sequence has {have} frames, {need} required")]
    TooShort { have: usize, need: usize },
    #[error("cannot cut {f_c} frames from a {frame_count}-frame sequence")]
    CutTooLarge { f_c: usize, frame_count: usize },
    #[error("invalid cut config: f_c {f_c} must be below target length {target_len}")]
    InvalidCutConfig { f_c: usize, target_len: usize },
    #[error("encoder command failed: {0}")]
    Encoder(String),
}

pub type Result<T> = std::result::Result<T, FrameError>;

/// Ordered frames of uniform size. Never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSequence {
    frames: Vec<RgbImage>,
}

impl FrameSequence {
    pub fn new(frames: Vec<RgbImage>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| FrameError::NoFrames(PathBuf::new()))?;
        let expected = first.dimensions();
        for (index, f) in frames.iter().enumerate() {
            if f.dimensions() != expected {
                return Err(FrameError::DimensionMismatch {
                    index,
                    expected,
                    found: f.dimensions(),
                });
            }
        }
        Ok(Self { frames })
    }

    pub fn width(&self) -> u32 {
        self.frames[0].width()
    }

    pub fn height(&self) -> u32 {
        self.frames[0].height()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> Option<&RgbImage> {
        self.frames.get(i)
    }

    pub fn into_frames(self) -> Vec<RgbImage> {
        self.frames
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutConfig {
    pub f_c: usize,
    pub target_len: usize,
}

impl Default for CutConfig {
    fn default() -> Self {
        Self {
            f_c: DEFAULT_FC,
            target_len: TRAIN_FRAMES,
        }
    }
}

impl CutConfig {
    pub fn new(f_c: usize, target_len: usize) -> Result<Self> {
        if f_c >= target_len {
            return Err(FrameError::InvalidCutConfig { f_c, target_len });
        }
        Ok(Self { f_c, target_len })
    }
}

/// Keep the first `n` frames.
pub fn crop_head(seq: &FrameSequence, n: usize) -> Result<FrameSequence> {
    if n == 0 || seq.frame_count() < n {
        return Err(FrameError::TooShort {
            have: seq.frame_count(),
            need: n.max(1),
        });
    }
    Ok(FrameSequence {
        frames: seq.frames[..n].to_vec(),
    })
}

/// Drop the first `f_c` frames.
pub fn clean_cut(seq: &FrameSequence, f_c: usize) -> Result<FrameSequence> {
    if f_c >= seq.frame_count() {
        return Err(FrameError::CutTooLarge {
            f_c,
            frame_count: seq.frame_count(),
        });
    }
    Ok(FrameSequence {
        frames: seq.frames[f_c..].to_vec(),
    })
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

fn parse_frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    if digits.len() != 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Sorted frame indices present in `dir`; errors on gaps.
fn frame_indices(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|source| FrameError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| FrameError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        if let Some(i) = entry.file_name().to_str().and_then(parse_frame_index) {
            indices.push(i);
        }
    }
    if indices.is_empty() {
        return Err(FrameError::NoFrames(dir.to_path_buf()));
    }
    indices.sort_unstable();
    for (expected, &i) in indices.iter().enumerate() {
        if i != expected {
            return Err(FrameError::MissingFrames {
                missing: expected,
                found: indices.len(),
            });
        }
    }
    Ok(indices.len())
}

/// Dimensions of frame 0 and the frame count, reading only PNG headers.
pub fn probe(dir: &Path) -> Result<(u32, u32, usize)> {
    let count = frame_indices(dir)?;
    let mut expected = None;
    for index in 0..count {
        let path = dir.join(frame_file_name(index));
        let dims = image::image_dimensions(&path).map_err(|source| FrameError::Image {
            path: path.clone(),
            source,
        })?;
        match expected {
            None => expected = Some(dims),
            Some(e) if e != dims => {
                return Err(FrameError::DimensionMismatch {
                    index,
                    expected: e,
                    found: dims,
                })
            }
            Some(_) => {}
        }
    }
    let (w, h) = expected.expect("count >= 1");
    Ok((w, h, count))
}

pub fn load(dir: &Path, exec: Exec) -> Result<FrameSequence> {
    let count = frame_indices(dir)?;
    let frames = exec
        .map_range(count, |i| {
            let path = dir.join(frame_file_name(i));
            image::open(&path)
                .map(|img| img.to_rgb8())
                .map_err(|source| FrameError::Image { path, source })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames)
}

/// Write `seq` into `dir`, replacing any frame files already there.
pub fn write(seq: &FrameSequence, dir: &Path, exec: Exec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| FrameError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in fs::read_dir(dir).map_err(|source| FrameError::Io {
        path: dir.to_path_buf(),
        source,
    })? {
        let entry = entry.map_err(|source| FrameError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        if entry.file_name().to_str().and_then(parse_frame_index).is_some() {
            fs::remove_file(entry.path()).map_err(|source| FrameError::Io {
                path: entry.path(),
                source,
            })?;
        }
    }
    exec.map_range(seq.frame_count(), |i| {
        let path = dir.join(frame_file_name(i));
        seq.frames[i]
            .save(&path)
            .map_err(|source| FrameError::Image { path, source })
    })
    .into_iter()
    .collect()
}

/// Expand `{fps}`, `{input_dir}` and `{output_path}` in an encoder template.
pub fn render_encoder_cmd(template: &str, fps: u32, input_dir: &Path, output_path: &Path) -> String {
    template
        .replace("{fps}", &fps.to_string())
        .replace("{input_dir}", &input_dir.display().to_string())
        .replace("{output_path}", &output_path.display().to_string())
}

/// Run an external muxer through `sh -c`.
pub fn run_encoder(template: &str, fps: u32, input_dir: &Path, output_path: &Path) -> Result<()> {
    let cmd = render_encoder_cmd(template, fps, input_dir, output_path);
    tracing::info!(%cmd, "running encoder");
    let status = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .status()
        .map_err(|e| FrameError::Encoder(e.to_string()))?;
    if !status.success() {
        return Err(FrameError::Encoder(format!("`{cmd}` exited with {status}")));
    }
    Ok(())
}
