//! Prompt templates and the vision-language model client contract.
//!
//! Four fixed templates drive curation: object extraction, object removal,
//! training caption generation and test prompt enhancement. Clients speak one
//! JSON-over-HTTP contract; provider differences live in [`AdapterConfig`]
//! profiles. [`MockVlm`] answers every template offline and deterministically.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{decode_png, encode_png, seed_from_digest, sha256};

pub const SLOT_OBJECTS: &str = "IDENTIFIED_OBJECTS";
pub const SLOT_PROMPT: &str = "PROMPT_TO_OPTIMIZE";
pub const MAX_CAPTION_CHARS: usize = 2048;
pub const DEFAULT_PARALLELISM: usize = 4;

const CAPTION_OPEN: &str = "<caption>";
const CAPTION_CLOSE: &str = "</caption>";

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("missing slot {{{0}}}")]
    MissingSlot(String),
    #[error("endpoint error after {attempts} attempt(s): {message}")]
    Endpoint { attempts: u32, message: String },
    #[error("response image {index} is {got:?}, input is {expected:?}")]
    ResolutionViolation {
        index: usize,
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("response has no <caption>…</caption> pair")]
    NoCaptionTag,
    #[error("caption is empty")]
    EmptyCaption,
    #[error("caption has {0} characters, limit is {MAX_CAPTION_CHARS}")]
    CaptionTooLong(usize),
    #[error("request needs at least one image")]
    MissingImage,
    #[error("undecodable image: {0}")]
    BadImage(String),
    #[error("adapter config: {0}")]
    Config(String),
}

impl VlmError {
    /// Only transport-level failures are worth another attempt.
    fn is_transient(&self) -> bool {
        matches!(self, VlmError::Endpoint { .. })
    }
}

pub type Result<T> = std::result::Result<T, VlmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ObjectExtraction,
    ObjectRemoval,
    TrainingCaption,
    TestPromptEnhancement,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::ObjectExtraction,
        TemplateId::ObjectRemoval,
        TemplateId::TrainingCaption,
        TemplateId::TestPromptEnhancement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ObjectExtraction => "object_extraction",
            TemplateId::ObjectRemoval => "object_removal",
            TemplateId::TrainingCaption => "training_caption",
            TemplateId::TestPromptEnhancement => "test_prompt_enhancement",
        }
    }

    pub fn body(self) -> &'static str {
        match self {
            TemplateId::ObjectExtraction => include_str!("../templates/object_extraction.txt"),
            TemplateId::ObjectRemoval => include_str!("../templates/object_removal.txt"),
            TemplateId::TrainingCaption => include_str!("../templates/training_caption.txt"),
            TemplateId::TestPromptEnhancement => include_str!("../templates/test_prompt_enhancement.txt"),
        }
    }

    pub fn required_slots(self) -> &'static [&'static str] {
        match self {
            TemplateId::ObjectExtraction | TemplateId::ObjectRemoval => &[SLOT_OBJECTS],
            TemplateId::TrainingCaption => &[],
            TemplateId::TestPromptEnhancement => &[SLOT_PROMPT],
        }
    }

    fn wants_images(self) -> bool {
        matches!(self, TemplateId::ObjectExtraction | TemplateId::ObjectRemoval)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = VlmError;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| VlmError::UnknownTemplate(s.to_owned()))
    }
}

/// Substitute every required slot; all must be present and non-blank.
pub fn build_prompt(id: TemplateId, slots: &BTreeMap<String, String>) -> Result<String> {
    let mut body = id.body().to_owned();
    for slot in id.required_slots() {
        let value = slots
            .get(*slot)
            .filter(|v| !v.trim().is_empty())
            .ok_or_else(|| VlmError::MissingSlot((*slot).to_owned()))?;
        body = body.replace(&format!("{{{slot}}}"), value);
    }
    for slot in [SLOT_OBJECTS, SLOT_PROMPT] {
        if body.contains(&format!("{{{slot}}}")) {
            return Err(VlmError::MissingSlot(slot.to_owned()));
        }
    }
    Ok(body)
}

/// Object list as it appears in a prompt: `"the man, cake"`.
pub fn join_objects(names: &[String]) -> String {
    names.join(", ")
}

pub fn wrap_caption(s: &str) -> String {
    format!("{CAPTION_OPEN}{s}{CAPTION_CLOSE}")
}

/// Text inside the first `<caption>…</caption>` pair, trimmed.
pub fn parse_caption(response: &str) -> Result<String> {
    let start = response.find(CAPTION_OPEN).ok_or(VlmError::NoCaptionTag)? + CAPTION_OPEN.len();
    let len = response[start..].find(CAPTION_CLOSE).ok_or(VlmError::NoCaptionTag)?;
    let caption = response[start..start + len].trim();
    if caption.is_empty() {
        return Err(VlmError::EmptyCaption);
    }
    let chars = caption.chars().count();
    if chars > MAX_CAPTION_CHARS {
        return Err(VlmError::CaptionTooLong(chars));
    }
    Ok(caption.to_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmRequest {
    pub id: u64,
    pub template: TemplateId,
    pub prompt: String,
    /// Base64-encoded PNGs, in order.
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_ref: Option<String>,
    pub want_images: bool,
    /// Element names the prompt refers to, for adapters that need them.
    #[serde(default)]
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    #[serde(default)]
    pub id: u64,
    pub text: String,
    #[serde(default)]
    pub images: Vec<String>,
}

pub trait VlmClient: Send + Sync {
    fn name(&self) -> &str;
    fn send(&self, req: &VlmRequest) -> Result<VlmResponse>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    /// Delay before attempt `n + 1`, doubling each time.
    pub fn backoff(&self, n: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << n.saturating_sub(1).min(16))
    }
}

pub fn send_with_retry(client: &dyn VlmClient, req: &VlmRequest, policy: RetryPolicy) -> Result<VlmResponse> {
    let attempts = policy.max_attempts.max(1);
    let mut last = None;
    for n in 1..=attempts {
        match client.send(req) {
            Ok(resp) => return Ok(resp),
            Err(e) if e.is_transient() => {
                tracing::warn!(client = client.name(), attempt = n, error = %e, "vlm request failed");
                last = Some(e);
                if n < attempts {
                    thread::sleep(policy.backoff(n));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let message = match last {
        Some(VlmError::Endpoint { message, .. }) => message,
        Some(other) => other.to_string(),
        None => "no attempt made".into(),
    };
    Err(VlmError::Endpoint { attempts, message })
}

/// Send many requests with at most `parallelism` in flight. Results come back
/// in request order; each response is checked against its request id.
pub fn send_batch(
    client: &dyn VlmClient,
    reqs: &[VlmRequest],
    policy: RetryPolicy,
    parallelism: usize,
) -> Vec<Result<VlmResponse>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<VlmResponse>>>> = reqs.iter().map(|_| Mutex::new(None)).collect();
    let workers = parallelism.max(1).min(reqs.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = reqs.get(i) else { break };
                let out = send_with_retry(client, req, policy).and_then(|resp| {
                    if resp.id != req.id {
                        Err(VlmError::Endpoint {
                            attempts: 1,
                            message: format!("response id {} for request {}", resp.id, req.id),
                        })
                    } else {
                        Ok(resp)
                    }
                });
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

pub fn encode_image(img: &RgbImage) -> String {
    B64.encode(encode_png(img))
}

pub fn decode_image(b64: &str) -> Result<RgbImage> {
    let bytes = B64.decode(b64.trim()).map_err(|e| VlmError::BadImage(e.to_string()))?;
    decode_png(&bytes).map_err(|e| VlmError::BadImage(e.to_string()))
}

/// Provider profile, e.g. `{"name": "gemini", "base_url": ..., "auth_env_var": ..., "model_id": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub name: String,
    pub base_url: String,
    pub auth_env_var: String,
    pub model_id: String,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    id: u64,
    model: &'a str,
    template: TemplateId,
    prompt: &'a str,
    images: &'a [String],
    want_images: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    video_ref: Option<&'a str>,
    objects: &'a [String],
}

/// JSON POST client: `{prompt, images[], want_images, ...}` -> `{text, images[]}`.
pub struct HttpVlm {
    config: AdapterConfig,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpVlm {
    pub fn new(config: AdapterConfig, timeout: Duration) -> Result<Self> {
        let api_key = std::env::var(&config.auth_env_var).ok();
        if api_key.is_none() {
            tracing::warn!(var = %config.auth_env_var, "API key variable not set; sending unauthenticated");
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| VlmError::Config(e.to_string()))?;
        Ok(Self { config, http, api_key })
    }
}

impl VlmClient for HttpVlm {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn send(&self, req: &VlmRequest) -> Result<VlmResponse> {
        let body = WireRequest {
            id: req.id,
            model: &self.config.model_id,
            template: req.template,
            prompt: &req.prompt,
            images: &req.images,
            want_images: req.want_images,
            video_ref: req.video_ref.as_deref(),
            objects: &req.objects,
        };
        let mut call = self.http.post(&self.config.base_url).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let endpoint = |message: String| VlmError::Endpoint { attempts: 1, message };
        let resp = call.send().map_err(|e| endpoint(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(endpoint(format!("HTTP {status}")));
        }
        let mut parsed: VlmResponse = resp.json().map_err(|e| endpoint(format!("bad response body: {e}")))?;
        if parsed.id == 0 {
            parsed.id = req.id;
        }
        Ok(parsed)
    }
}

/// Offline client. Output is a pure function of (template, input digests, seed).
#[derive(Debug, Clone)]
pub struct MockVlm {
    pub seed: u64,
}

impl MockVlm {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn digest(&self, req: &VlmRequest, salt: &str) -> [u8; 32] {
        let mut buf = Vec::new();
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(req.template.as_str().as_bytes());
        for img in &req.images {
            buf.extend_from_slice(&sha256(img.as_bytes()));
        }
        buf.extend_from_slice(salt.as_bytes());
        sha256(&buf)
    }

    /// A single saturated ellipse on white, sized to the input.
    fn element_raster(&self, w: u32, h: u32, digest: &[u8; 32]) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from_digest(digest));
        let color = Rgb([rng.random_range(0..200), rng.random_range(0..200), rng.random_range(0..200)]);
        let (wf, hf) = (w as f64, h as f64);
        let rx = (wf * rng.random_range(0.12..0.3)).max(1.0);
        let ry = (hf * rng.random_range(0.12..0.3)).max(1.0);
        let cx = rng.random_range(rx..(wf - rx).max(rx + 1.0));
        let cy = rng.random_range(ry..(hf - ry).max(ry + 1.0));
        let mut img = RgbImage::from_fn(w, h, |x, y| {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                color
            } else {
                Rgb([255, 255, 255])
            }
        });
        // Always leave at least one keyable pixel.
        img.put_pixel((cx as u32).min(w - 1), (cy as u32).min(h - 1), color);
        img
    }

    fn background_raster(&self, w: u32, h: u32, digest: &[u8; 32]) -> RgbImage {
        let base = [digest[0], digest[1], digest[2]];
        RgbImage::from_fn(w, h, |x, y| {
            let gx = (x as u64 * 97 / w.max(1) as u64) as u8;
            let gy = (y as u64 * 61 / h.max(1) as u64) as u8;
            Rgb([
                base[0] / 2 + gx,
                base[1] / 2 + gy,
                base[2] / 2 + (gx / 2).wrapping_add(gy / 2),
            ])
        })
    }

    fn mock_caption(&self, req: &VlmRequest) -> String {
        let subjects = if req.objects.is_empty() {
            "the pictured elements".to_owned()
        } else {
            join_objects(&req.objects)
        };
        let digest = self.digest(req, "caption");
        let verbs = ["interact", "move together", "come into play", "take center stage"];
        let verb = verbs[digest[0] as usize % verbs.len()];
        match req.template {
            TemplateId::TestPromptEnhancement => {
                let draft = req
                    .prompt
                    .rsplit_once("Prompt to Optimize\n")
                    .map(|(_, d)| d.trim())
                    .unwrap_or_default();
                format!(
                    "{CAPTION_OPEN}{draft} The video clearly shows {subjects}, which {verb} as the camera follows the action.{CAPTION_CLOSE}"
                )
            }
            _ => format!(
                "{CAPTION_OPEN}Film quality, rich details. The video shows {subjects}, which {verb} naturally within the scene while the camera holds steady.{CAPTION_CLOSE}"
            ),
        }
    }
}

impl VlmClient for MockVlm {
    fn name(&self) -> &str {
        "mock"
    }

    fn send(&self, req: &VlmRequest) -> Result<VlmResponse> {
        let first = || -> Result<RgbImage> { decode_image(req.images.first().ok_or(VlmError::MissingImage)?) };
        let (text, images) = match req.template {
            TemplateId::ObjectExtraction => {
                let (w, h) = first()?.dimensions();
                let images = req
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(i, name)| {
                        let d = self.digest(req, &format!("element:{i}:{name}"));
                        encode_image(&self.element_raster(w, h, &d))
                    })
                    .collect();
                (String::from("extracted"), images)
            }
            TemplateId::ObjectRemoval => {
                let (w, h) = first()?.dimensions();
                let d = self.digest(req, "background");
                (String::from("removed"), vec![encode_image(&self.background_raster(w, h, &d))])
            }
            TemplateId::TrainingCaption | TemplateId::TestPromptEnhancement => (self.mock_caption(req), vec![]),
        };
        Ok(VlmResponse { id: req.id, text, images })
    }
}

fn request(
    id: u64,
    template: TemplateId,
    prompt: String,
    images: Vec<String>,
    objects: &[String],
) -> VlmRequest {
    VlmRequest {
        id,
        template,
        prompt,
        images,
        video_ref: None,
        want_images: template.wants_images(),
        objects: objects.to_vec(),
    }
}

fn objects_slot(names: &[String]) -> BTreeMap<String, String> {
    BTreeMap::from([(SLOT_OBJECTS.to_owned(), join_objects(names))])
}

fn check_dims(images: &[RgbImage], expected: (u32, u32)) -> Result<()> {
    for (index, img) in images.iter().enumerate() {
        if img.dimensions() != expected {
            return Err(VlmError::ResolutionViolation {
                index,
                expected,
                got: img.dimensions(),
            });
        }
    }
    Ok(())
}

/// One full-resolution rendition per requested element.
pub fn extract_elements(
    image: &RgbImage,
    names: &[String],
    client: &dyn VlmClient,
    policy: RetryPolicy,
) -> Result<Vec<RgbImage>> {
    let prompt = build_prompt(TemplateId::ObjectExtraction, &objects_slot(names))?;
    let req = request(1, TemplateId::ObjectExtraction, prompt, vec![encode_image(image)], names);
    let resp = send_with_retry(client, &req, policy)?;
    if resp.images.len() != names.len() {
        return Err(VlmError::Endpoint {
            attempts: 1,
            message: format!(
                "partial result: {} image(s) for {} requested element(s)",
                resp.images.len(),
                names.len()
            ),
        });
    }
    let out = resp.images.iter().map(|b| decode_image(b)).collect::<Result<Vec<_>>>()?;
    check_dims(&out, image.dimensions())?;
    Ok(out)
}

/// The input with every named element removed.
pub fn remove_objects(
    image: &RgbImage,
    names: &[String],
    client: &dyn VlmClient,
    policy: RetryPolicy,
) -> Result<RgbImage> {
    let prompt = build_prompt(TemplateId::ObjectRemoval, &objects_slot(names))?;
    let req = request(1, TemplateId::ObjectRemoval, prompt, vec![encode_image(image)], names);
    let resp = send_with_retry(client, &req, policy)?;
    if resp.images.len() != 1 {
        return Err(VlmError::Endpoint {
            attempts: 1,
            message: format!("expected one background image, got {}", resp.images.len()),
        });
    }
    let bg = decode_image(&resp.images[0])?;
    check_dims(std::slice::from_ref(&bg), image.dimensions())?;
    Ok(bg)
}

/// Caption a training sample from its element cut-outs, background and video.
pub fn generate_caption(
    assets: &[RgbImage],
    labels: &[String],
    video_ref: Option<&str>,
    client: &dyn VlmClient,
    policy: RetryPolicy,
) -> Result<String> {
    if assets.is_empty() {
        return Err(VlmError::MissingImage);
    }
    let prompt = build_prompt(TemplateId::TrainingCaption, &BTreeMap::new())?;
    let mut req = request(
        1,
        TemplateId::TrainingCaption,
        prompt,
        assets.iter().map(encode_image).collect(),
        labels,
    );
    req.video_ref = video_ref.map(str::to_owned);
    parse_caption(&send_with_retry(client, &req, policy)?.text)
}

/// Enrich a draft test prompt using the reference images.
pub fn enhance_test_prompt(
    draft: &str,
    images: &[RgbImage],
    labels: &[String],
    client: &dyn VlmClient,
    policy: RetryPolicy,
) -> Result<String> {
    let slots = BTreeMap::from([(SLOT_PROMPT.to_owned(), draft.to_owned())]);
    let prompt = build_prompt(TemplateId::TestPromptEnhancement, &slots)?;
    let req = request(
        1,
        TemplateId::TestPromptEnhancement,
        prompt,
        images.iter().map(encode_image).collect(),
        labels,
    );
    parse_caption(&send_with_retry(client, &req, policy)?.text)
}
