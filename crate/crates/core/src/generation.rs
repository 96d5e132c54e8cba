//! Customized inference: composite + transition-prefixed prompt in, clean
//! video out.
//!
//! The generator returns `F` frames whose first `f_c` frames hold the composite
//! and the transition into the new scene. [`customize`] drops those frames.
//! The mock backend reproduces that structure deterministically: frame 0 is
//! the input, frames `1..f_c` dissolve away from it, and the remaining frames
//! are a seeded pan over a recolored scene.

use std::io::{Cursor, Read, Write};
use std::time::Duration;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{self, CanvasError};
use crate::dataset::{prefix_transition, CaptionError, TransitionedCaption};
use crate::exec::Exec;
use crate::frames::{self, FrameError, FrameSequence, DEFAULT_FC, TRAIN_FRAMES};
use crate::util::{decode_png, encode_png, seed_from_digest, sha256};

pub const DEFAULT_TIMEOUT_SECS: u64 = 600;

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error(transparent)]
    Frames(#[from] FrameError),
    #[error("generator endpoint error: {0}")]
    Endpoint(String),
    #[error("generator returned {got} frames, {expected} requested")]
    FrameCountMismatch { expected: usize, got: usize },
    #[error("frame {index} is {got:?}, backend resolution is {expected:?}")]
    ResolutionMismatch {
        index: usize,
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("invalid request: {0}")]
    BadRequest(String),
}

pub type Result<T> = std::result::Result<T, GenError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Mock,
    Http(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorBackend {
    pub name: String,
    pub endpoint: Endpoint,
    #[serde(default = "default_fc")]
    pub f_c: usize,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_fc() -> usize {
    DEFAULT_FC
}
fn default_width() -> u32 {
    canvas::CANVAS_WIDTH
}
fn default_height() -> u32 {
    canvas::CANVAS_HEIGHT
}
fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

impl GeneratorBackend {
    pub fn mock() -> Self {
        Self {
            name: "mock".into(),
            endpoint: Endpoint::Mock,
            f_c: DEFAULT_FC,
            width: canvas::CANVAS_WIDTH,
            height: canvas::CANVAS_HEIGHT,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }

    pub fn with_fc(mut self, f_c: usize) -> Self {
        self.f_c = f_c;
        self
    }

    pub fn resolution(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub first_frame: RgbImage,
    pub prompt: TransitionedCaption,
    pub frames_requested: usize,
    pub seed: u64,
}

/// Prefix the caption and fit the composite to the backend resolution.
pub fn prepare_request(
    composite: &RgbImage,
    caption: &str,
    backend: &GeneratorBackend,
    seed: u64,
    fill: [u8; 3],
) -> Result<GenerationRequest> {
    prepare_request_frames(composite, caption, backend, seed, fill, TRAIN_FRAMES)
}

pub fn prepare_request_frames(
    composite: &RgbImage,
    caption: &str,
    backend: &GeneratorBackend,
    seed: u64,
    fill: [u8; 3],
    frames_requested: usize,
) -> Result<GenerationRequest> {
    let prompt = prefix_transition(caption)?;
    if frames_requested <= backend.f_c {
        return Err(GenError::BadRequest(format!(
            "{frames_requested} frames requested but backend `{}` discards {}",
            backend.name, backend.f_c
        )));
    }
    let first_frame = canvas::fit_into(composite, backend.width, backend.height, fill, Exec::default())?;
    Ok(GenerationRequest {
        first_frame,
        prompt,
        frames_requested,
        seed,
    })
}

#[derive(Serialize)]
struct WireRequest<'a> {
    image: String,
    prompt: &'a str,
    num_frames: usize,
    seed: u64,
}

pub fn invoke_generator(req: &GenerationRequest, backend: &GeneratorBackend) -> Result<FrameSequence> {
    let frames = match &backend.endpoint {
        Endpoint::Mock => mock_generate(req, backend.f_c, Exec::default()),
        Endpoint::Http(url) => http_generate(req, url, Duration::from_secs(backend.timeout_secs))?,
    };
    if frames.len() != req.frames_requested {
        return Err(GenError::FrameCountMismatch {
            expected: req.frames_requested,
            got: frames.len(),
        });
    }
    let expected = backend.resolution();
    for (index, f) in frames.iter().enumerate() {
        if f.dimensions() != expected {
            return Err(GenError::ResolutionMismatch {
                index,
                expected,
                got: f.dimensions(),
            });
        }
    }
    Ok(FrameSequence::new(frames)?)
}

/// Raw generation plus its clean cut.
#[derive(Debug, Clone)]
pub struct Customized {
    pub raw: FrameSequence,
    pub clean: FrameSequence,
}

/// Generate and drop the first `backend.f_c + extra_cut` frames.
pub fn customize(
    composite: &RgbImage,
    caption: &str,
    backend: &GeneratorBackend,
    seed: u64,
    extra_cut: usize,
) -> Result<Customized> {
    let req = prepare_request(composite, caption, backend, seed, [255, 255, 255])?;
    let raw = invoke_generator(&req, backend)?;
    let clean = frames::clean_cut(&raw, backend.f_c + extra_cut)?;
    Ok(Customized { raw, clean })
}

fn mock_seed(req: &GenerationRequest) -> u64 {
    let mut buf = req.seed.to_le_bytes().to_vec();
    buf.extend_from_slice(&sha256(req.prompt.as_str().as_bytes()));
    seed_from_digest(&sha256(&buf))
}

/// Ensure `frame` differs from `first` in at least one byte.
fn differ_from(mut frame: RgbImage, first: &RgbImage) -> RgbImage {
    if &frame == first {
        let p = frame.get_pixel_mut(0, 0);
        p[0] ^= 1;
    }
    frame
}

fn dissolve(first: &RgbImage, t: f64) -> RgbImage {
    let mut out = first.clone();
    for p in out.pixels_mut() {
        for c in p.0.iter_mut() {
            let target = c.wrapping_add(128) as f64;
            *c = ((*c as f64) * (1.0 - t) + target * t + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

fn scene_frame(first: &RgbImage, step: u64, motion: (i64, i64), tint: [u8; 3]) -> RgbImage {
    let (w, h) = first.dimensions();
    let (dx, dy) = (motion.0 * step as i64, motion.1 * step as i64);
    RgbImage::from_fn(w, h, |x, y| {
        let sx = (x as i64 + dx).rem_euclid(w as i64) as u32;
        let sy = (y as i64 + dy).rem_euclid(h as i64) as u32;
        let Rgb([r, g, b]) = *first.get_pixel(sx, sy);
        Rgb([r.wrapping_add(tint[0]), g.wrapping_add(tint[1]), b.wrapping_add(tint[2])])
    })
}

/// Deterministic stand-in for a real image-to-video model.
pub fn mock_generate(req: &GenerationRequest, f_c: usize, exec: Exec) -> Vec<RgbImage> {
    let n = req.frames_requested;
    let first = &req.first_frame;
    let mut rng = ChaCha8Rng::seed_from_u64(mock_seed(req));
    let motion = (rng.random_range(-6i64..=6), rng.random_range(-3i64..=3));
    let tint = [rng.random_range(1u8..=255), rng.random_range(0u8..=255), rng.random_range(0u8..=255)];
    exec.map_range(n, |i| {
        if i == 0 {
            first.clone()
        } else if i < f_c {
            differ_from(dissolve(first, i as f64 / f_c as f64), first)
        } else {
            differ_from(scene_frame(first, (i - f_c + 1) as u64, motion, tint), first)
        }
    })
}

fn http_generate(req: &GenerationRequest, url: &str, timeout: Duration) -> Result<Vec<RgbImage>> {
    use base64::Engine;
    let body = WireRequest {
        image: base64::engine::general_purpose::STANDARD.encode(encode_png(&req.first_frame)),
        prompt: req.prompt.as_str(),
        num_frames: req.frames_requested,
        seed: req.seed,
    };
    let client = reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| GenError::Endpoint(e.to_string()))?;
    let resp = client
        .post(url)
        .json(&body)
        .send()
        .map_err(|e| GenError::Endpoint(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(GenError::Endpoint(format!("HTTP {}", resp.status())));
    }
    let content_type = resp
        .headers()
        .get(reqwest::header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_owned();
    let bytes = resp.bytes().map_err(|e| GenError::Endpoint(e.to_string()))?;
    decode_frames(&content_type, &bytes)
}

/// Decode a generator response body: a ZIP of PNGs or a multipart body whose
/// parts are PNGs.
pub fn decode_frames(content_type: &str, body: &[u8]) -> Result<Vec<RgbImage>> {
    let pngs = if content_type.starts_with("multipart/") {
        let boundary = content_type
            .split(';')
            .filter_map(|p| p.trim().strip_prefix("boundary="))
            .next()
            .map(|b| b.trim_matches('"').to_owned())
            .ok_or_else(|| GenError::Endpoint("multipart response without boundary".into()))?;
        split_multipart(body, &boundary)?
    } else {
        unzip_frames(body)?
    };
    pngs.iter()
        .enumerate()
        .map(|(i, p)| decode_png(p).map_err(|e| GenError::Endpoint(format!("frame {i}: {e}"))))
        .collect()
}

fn unzip_frames(body: &[u8]) -> Result<Vec<Vec<u8>>> {
    let mut archive =
        zip::ZipArchive::new(Cursor::new(body)).map_err(|e| GenError::Endpoint(format!("bad zip: {e}")))?;
    let mut names: Vec<String> = archive
        .file_names()
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .map(str::to_owned)
        .collect();
    names.sort();
    names
        .iter()
        .map(|n| {
            let mut f = archive
                .by_name(n)
                .map_err(|e| GenError::Endpoint(format!("zip entry {n}: {e}")))?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)
                .map_err(|e| GenError::Endpoint(format!("zip entry {n}: {e}")))?;
            Ok(buf)
        })
        .collect()
}

fn find(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    hay.get(from..)?
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + from)
}

fn split_multipart(body: &[u8], boundary: &str) -> Result<Vec<Vec<u8>>> {
    let delim = format!("--{boundary}").into_bytes();
    let mut parts = Vec::new();
    let mut pos = find(body, &delim, 0).ok_or_else(|| GenError::Endpoint("multipart boundary not found".into()))?;
    loop {
        pos += delim.len();
        if body[pos..].starts_with(b"--") {
            break;
        }
        let headers_end = find(body, b"\r\n\r\n", pos)
            .ok_or_else(|| GenError::Endpoint("multipart part without headers".into()))?;
        let next = find(body, &delim, headers_end)
            .ok_or_else(|| GenError::Endpoint("unterminated multipart body".into()))?;
        let mut end = next;
        if body[..end].ends_with(b"\r\n") {
            end -= 2;
        }
        parts.push(body[headers_end + 4..end].to_vec());
        pos = next;
    }
    Ok(parts)
}

/// ZIP of `frame_%05d.png` entries, the shape a generator endpoint returns.
pub fn encode_frames_zip(frames: &[RgbImage]) -> Vec<u8> {
    let mut w = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Stored);
    for (i, f) in frames.iter().enumerate() {
        w.start_file(frames::frame_file_name(i), opts).expect("zip entry");
        w.write_all(&encode_png(f)).expect("zip write");
    }
    w.finish().expect("zip finish").into_inner()
}

/// Multipart body with one PNG per part.
pub fn encode_frames_multipart(frames: &[RgbImage], boundary: &str) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        out.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        out.extend_from_slice(
            format!(
                "Content-Type: image/png\r\nContent-Disposition: attachment; filename=\"{}\"\r\n\r\n",
                frames::frame_file_name(i)
            )
            .as_bytes(),
        );
        out.extend_from_slice(&encode_png(f));
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn composite() -> RgbImage {
        RgbImage::from_fn(1280, 720, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]))
    }

    fn small_backend() -> GeneratorBackend {
        GeneratorBackend {
            width: 64,
            height: 36,
            ..GeneratorBackend::mock()
        }
    }

    #[test]
    fn request_prefixes_and_keeps_matching_resolution() {
        let c = composite();
        let req = prepare_request(&c, "Two friends launch a rocket.", &GeneratorBackend::mock(), 1, [255; 3]).unwrap();
        assert!(req.prompt.as_str().starts_with("ad23r2 the camera view suddenly changes. "));
        assert_eq!(req.first_frame, c);
        assert_eq!(req.frames_requested, 81);
    }

    #[test]
    fn request_rejects_prefixed_caption() {
        let err = prepare_request(
            &composite(),
            "ad23r2 the camera view suddenly changes. x",
            &GeneratorBackend::mock(),
            1,
            [255; 3],
        )
        .unwrap_err();
        assert!(matches!(err, GenError::Caption(CaptionError::AlreadyPrefixed)));
    }

    #[test]
    fn request_fits_wider_training_canvas() {
        let c = RgbImage::from_pixel(1344, 768, Rgb([0, 0, 0]));
        let req = prepare_request(&c, "x", &GeneratorBackend::mock(), 1, [255; 3]).unwrap();
        assert_eq!(req.first_frame.dimensions(), (1280, 720));
        // min(1280/1344, 720/768) = 0.9375: 1260x720 with 10 px of padding either side
        let scale = (1280.0f64 / 1344.0).min(720.0 / 768.0);
        assert_eq!(scale, 0.9375);
        assert_eq!(req.first_frame.get_pixel(9, 0), &Rgb([255, 255, 255]));
        assert_eq!(req.first_frame.get_pixel(10, 0), &Rgb([0, 0, 0]));
    }

    #[test]
    fn mock_structure() {
        let b = small_backend();
        let c = RgbImage::from_fn(64, 36, |x, y| Rgb([x as u8, y as u8, 9]));
        let req = prepare_request(&c, "A dog runs.", &b, 5, [255; 3]).unwrap();
        let seq = invoke_generator(&req, &b).unwrap();
        assert_eq!(seq.frame_count(), 81);
        assert_eq!(seq.frame(0).unwrap(), &c);
        assert!(seq.frames()[1..].iter().all(|f| f != &c));
        let again = invoke_generator(&req, &b).unwrap();
        assert_eq!(seq, again);
        let other = prepare_request(&c, "A dog runs.", &b, 6, [255; 3]).unwrap();
        assert_ne!(invoke_generator(&other, &b).unwrap(), seq);
    }

    #[test]
    fn customize_cuts_fc() {
        let b = small_backend();
        let c = RgbImage::from_pixel(64, 36, Rgb([127, 127, 127]));
        let out = customize(&c, "A dog runs.", &b, 3, 0).unwrap();
        assert_eq!(out.clean.frame_count(), 77);
        for i in 0..77 {
            assert_eq!(out.clean.frame(i), out.raw.frame(i + 4));
            assert_ne!(out.clean.frame(i).unwrap(), &c);
        }
        let none = customize(&c, "A dog runs.", &b.clone().with_fc(0), 3, 0).unwrap();
        assert_eq!(none.clean, none.raw);
        let extra = customize(&c, "A dog runs.", &b, 3, 2).unwrap();
        assert_eq!(extra.clean.frame_count(), 75);
    }

    #[test]
    fn too_few_frames_requested() {
        let b = small_backend();
        let c = RgbImage::new(64, 36);
        assert!(matches!(
            prepare_request_frames(&c, "x", &b, 0, [255; 3], 4),
            Err(GenError::BadRequest(_))
        ));
    }

    #[test]
    fn zip_and_multipart_decode() {
        let frames: Vec<RgbImage> = (0..3).map(|i| RgbImage::from_pixel(4, 3, Rgb([i, i, i]))).collect();
        let z = encode_frames_zip(&frames);
        assert_eq!(decode_frames("application/zip", &z).unwrap(), frames);
        let m = encode_frames_multipart(&frames, "xyz");
        assert_eq!(decode_frames("multipart/mixed; boundary=\"xyz\"", &m).unwrap(), frames);
        assert!(decode_frames("application/zip", b"garbage").is_err());
        assert!(decode_frames("multipart/mixed", &m).is_err());
    }

    #[test]
    fn backend_serde_defaults() {
        let b: GeneratorBackend = serde_json::from_str(r#"{"name":"wan","endpoint":{"http":"http://x"}}"#).unwrap();
        assert_eq!(b.f_c, 4);
        assert_eq!(b.resolution(), (1280, 720));
        assert_eq!(b.timeout_secs, 600);
        let m: GeneratorBackend = serde_json::from_str(r#"{"name":"m","endpoint":"mock","f_c":0}"#).unwrap();
        assert_eq!(m.endpoint, Endpoint::Mock);
        assert_eq!(m.f_c, 0);
    }
}
