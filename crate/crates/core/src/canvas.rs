//! Element layers and the subject-mixed first frame.
//!
//! Extracted elements become binary-alpha RGBA layers, are tight-cropped, and
//! are tiled down the left half of a 1280x720 canvas in equal-height cells. The
//! clean background plate is fitted into the right half. Placement rectangles
//! are real-valued so every placed box keeps its source aspect ratio; a pixel
//! belongs to a box when its center lies inside it.
//!
//! Resampling is bilinear on premultiplied alpha with half-pixel centers, and
//! every 8-bit result is rounded half-up, so renders are reproducible
//! bit-for-bit.

use std::path::Path;

use image::{Rgb, RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;

pub const CANVAS_WIDTH: u32 = 1280;
pub const CANVAS_HEIGHT: u32 = 720;
pub const DEFAULT_KEY_THRESHOLD: u8 = 250;
pub const DEFAULT_MAX_ELEMENTS: usize = 8;

#[derive(Debug, Error)]
pub enum CanvasError {
    #[error("raster is empty")]
    EmptyRaster,
    #[error("layer `{0}` has no opaque pixel")]
    AllTransparent(String),
    #[error("no elements to lay out")]
    EmptyElementList,
    #[error("{count} elements exceed the limit of {max}")]
    TooManyElements { count: usize, max: usize },
    #[error("background dimensions must be positive, got {0}x{1}")]
    BadBackground(u32, u32),
    #[error("plan has {boxes} element boxes for {elements} elements")]
    PlanMismatch { boxes: usize, elements: usize },
    #[error("invalid canvas spec: {0}")]
    BadSpec(String),
    #[error("image error at {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, CanvasError>;

/// Axis-aligned integer box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Real-valued placement rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Area of the intersection with `other`; zero for boxes that only touch.
    pub fn overlap_area(&self, other: &Rect) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    pub fn contains_rect(&self, other: &Rect, eps: f64) -> bool {
        other.x >= self.x - eps
            && other.y >= self.y - eps
            && other.right() <= self.right() + eps
            && other.bottom() <= self.bottom() + eps
    }

    /// Half-open pixel span `[first, last)` of pixel centers inside `[lo, lo+len)`.
    fn pixel_span(lo: f64, len: f64, limit: u32) -> (u32, u32) {
        let first = (lo - 0.5).ceil().max(0.0);
        let last = (lo + len - 0.5).ceil().max(0.0);
        (
            (first as u32).min(limit),
            (last as u32).min(limit),
        )
    }
}

/// Scale `src` by the largest factor that fits inside `region`, centered.
pub fn fit_rect(src_w: u32, src_h: u32, region: Rect) -> Rect {
    let (sw, sh) = (src_w as f64, src_h as f64);
    let (w, h) = if region.w / sw <= region.h / sh {
        (region.w, sh * region.w / sw)
    } else {
        (sw * region.h / sh, region.h)
    };
    Rect::new(
        region.x + (region.w - w) / 2.0,
        region.y + (region.h - h) / 2.0,
        w,
        h,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub width: u32,
    pub height: u32,
    /// Left region is `x < split_x`, right region is `x >= split_x`.
    pub split_x: u32,
    pub fill_color: [u8; 3],
    pub max_elements: usize,
}

impl Default for CanvasSpec {
    fn default() -> Self {
        Self {
            width: CANVAS_WIDTH,
            height: CANVAS_HEIGHT,
            split_x: CANVAS_WIDTH / 2,
            fill_color: [255, 255, 255],
            max_elements: DEFAULT_MAX_ELEMENTS,
        }
    }
}

impl CanvasSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(CanvasError::BadSpec("canvas must be non-empty".into()));
        }
        if self.split_x == 0 || self.split_x >= self.width {
            return Err(CanvasError::BadSpec(format!(
                "split {} must fall strictly inside width {}",
                self.split_x, self.width
            )));
        }
        if self.max_elements == 0 {
            return Err(CanvasError::BadSpec("max_elements must be positive".into()));
        }
        Ok(())
    }

    pub fn left_region(&self) -> Rect {
        Rect::new(0.0, 0.0, self.split_x as f64, self.height as f64)
    }

    pub fn right_region(&self) -> Rect {
        Rect::new(
            self.split_x as f64,
            0.0,
            (self.width - self.split_x) as f64,
            self.height as f64,
        )
    }
}

/// One extracted subject as a binary-alpha RGBA raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementLayer {
    pub label: String,
    pixels: RgbaImage,
    tight_bbox: BBox,
}

impl ElementLayer {
    pub fn new(label: impl Into<String>, pixels: RgbaImage) -> Result<Self> {
        let label = label.into();
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(CanvasError::EmptyRaster);
        }
        let tight_bbox = alpha_extent(&pixels).ok_or_else(|| CanvasError::AllTransparent(label.clone()))?;
        Ok(Self {
            label,
            pixels,
            tight_bbox,
        })
    }

    pub fn open(path: &Path, label: impl Into<String>) -> Result<Self> {
        let img = image::open(path).map_err(|source| CanvasError::Image {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(label, img.to_rgba8())
    }

    pub fn pixels(&self) -> &RgbaImage {
        &self.pixels
    }

    pub fn tight_bbox(&self) -> BBox {
        self.tight_bbox
    }
}

/// Minimal box containing every pixel with alpha > 0.
fn alpha_extent(img: &RgbaImage) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    let mut any = false;
    for (x, y, p) in img.enumerate_pixels() {
        if p[3] > 0 {
            any = true;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    any.then(|| BBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// Key out near-white pixels: all channels `>= threshold` become transparent.
pub fn chroma_key(raster: &RgbImage, threshold: u8, label: impl Into<String>) -> Result<ElementLayer> {
    if raster.width() == 0 || raster.height() == 0 {
        return Err(CanvasError::EmptyRaster);
    }
    let keyed = RgbaImage::from_fn(raster.width(), raster.height(), |x, y| {
        let [r, g, b] = raster.get_pixel(x, y).0;
        let a = if r >= threshold && g >= threshold && b >= threshold { 0 } else { 255 };
        image::Rgba([r, g, b, a])
    });
    ElementLayer::new(label, keyed)
}

/// Apply the key again to an existing layer; already transparent pixels stay so.
pub fn rekey(layer: &ElementLayer, threshold: u8) -> Result<ElementLayer> {
    let mut px = layer.pixels.clone();
    for p in px.pixels_mut() {
        if p[0] >= threshold && p[1] >= threshold && p[2] >= threshold {
            p[3] = 0;
        }
    }
    ElementLayer::new(layer.label.clone(), px)
}

pub fn tight_crop(layer: &ElementLayer) -> ElementLayer {
    let b = layer.tight_bbox;
    let pixels = image::imageops::crop_imm(&layer.pixels, b.x, b.y, b.w, b.h).to_image();
    ElementLayer {
        label: layer.label.clone(),
        pixels,
        tight_bbox: BBox { x: 0, y: 0, w: b.w, h: b.h },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPlan {
    pub element_boxes: Vec<Rect>,
    pub background_box: Rect,
}

pub fn solve_layout(
    elements: &[ElementLayer],
    background_dims: (u32, u32),
    spec: &CanvasSpec,
) -> Result<LayoutPlan> {
    spec.validate()?;
    let n = elements.len();
    if n == 0 {
        return Err(CanvasError::EmptyElementList);
    }
    if n > spec.max_elements {
        return Err(CanvasError::TooManyElements {
            count: n,
            max: spec.max_elements,
        });
    }
    let (bw, bh) = background_dims;
    if bw == 0 || bh == 0 {
        return Err(CanvasError::BadBackground(bw, bh));
    }
    let cell_h = (spec.height / n as u32) as f64;
    let cell_w = spec.split_x as f64;
    let element_boxes = elements
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let cell = Rect::new(0.0, i as f64 * cell_h, cell_w, cell_h);
            fit_rect(e.tight_bbox.w, e.tight_bbox.h, cell)
        })
        .collect();
    Ok(LayoutPlan {
        element_boxes,
        background_box: fit_rect(bw, bh, spec.right_region()),
    })
}

/// Geometry violations of `plan` against `spec` and the source sizes it was
/// solved for. Empty when every layout invariant holds.
pub fn layout_violations(
    plan: &LayoutPlan,
    element_dims: &[(u32, u32)],
    background_dims: (u32, u32),
    spec: &CanvasSpec,
) -> Vec<String> {
    const EPS: f64 = 1e-9;
    let mut out = Vec::new();
    let left = spec.left_region();
    let right = spec.right_region();
    if plan.element_boxes.len() != element_dims.len() {
        out.push(format!(
            "{} boxes for {} elements",
            plan.element_boxes.len(),
            element_dims.len()
        ));
    }
    let aspect_err = |r: &Rect, (w, h): (u32, u32)| ((r.w / r.h) / (w as f64 / h as f64) - 1.0).abs();
    for (i, (r, &dims)) in plan.element_boxes.iter().zip(element_dims).enumerate() {
        if !left.contains_rect(r, EPS) {
            out.push(format!("element box {i} leaves the left region: {r:?}"));
        }
        let e = aspect_err(r, dims);
        if e > 1e-6 {
            out.push(format!("element box {i} aspect error {e:e}"));
        }
        for (j, other) in plan.element_boxes.iter().enumerate().skip(i + 1) {
            if r.overlap_area(other) > EPS {
                out.push(format!("element boxes {i} and {j} overlap"));
            }
        }
    }
    if !right.contains_rect(&plan.background_box, EPS) {
        out.push(format!("background box leaves the right region: {:?}", plan.background_box));
    }
    let e = aspect_err(&plan.background_box, background_dims);
    if e > 1e-6 {
        out.push(format!("background aspect error {e:e}"));
    }
    out
}

/// Source raster for one placement: an RGBA view restricted to `region`.
struct Source<'a> {
    read: SourcePixels<'a>,
    dest: Rect,
    /// Source row span for `dest` on the canvas.
    region: BBox,
    x_first: u32,
    /// Per destination column: absolute source columns and weight.
    xs: Vec<(usize, usize, f64)>,
}

enum SourcePixels<'a> {
    Rgba(&'a RgbaImage),
    Rgb(&'a RgbImage),
}

#[inline]
fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Source coordinate for destination pixel index `p`, clamped and split into
/// neighbor indices and the interpolation weight.
#[inline]
fn sample_axis(p: u32, dest_lo: f64, dest_len: f64, src_len: u32) -> (u32, u32, f64) {
    let scale = src_len as f64 / dest_len;
    let u = ((p as f64 + 0.5 - dest_lo) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = u.floor();
    let i1 = (i0 + 1.0).min((src_len - 1) as f64);
    (i0 as u32, i1 as u32, u - i0)
}

impl<'a> Source<'a> {
    fn new(read: SourcePixels<'a>, region: BBox, dest: Rect, canvas_w: u32) -> Self {
        let (x_first, x_last) = Rect::pixel_span(dest.x, dest.w, canvas_w);
        let xs = (x_first..x_last)
            .map(|x| {
                let (x0, x1, fx) = sample_axis(x, dest.x, dest.w, region.w);
                ((region.x + x0) as usize, (region.x + x1) as usize, fx)
            })
            .collect();
        Self {
            read,
            dest,
            region,
            x_first,
            xs,
        }
    }

    /// Source-over blend of this placement into one canvas row.
    fn blend_row(&self, y: u32, row: &mut [u8], canvas_h: u32) {
        let (y_first, y_last) = Rect::pixel_span(self.dest.y, self.dest.h, canvas_h);
        if y < y_first || y >= y_last {
            return;
        }
        let (ry0, ry1, fy) = sample_axis(y, self.dest.y, self.dest.h, self.region.h);
        let (y0, y1) = ((self.region.y + ry0) as usize, (self.region.y + ry1) as usize);
        match self.read {
            SourcePixels::Rgba(img) => self.blend::<4>(img.as_raw(), img.width() as usize, y0, y1, fy, row),
            SourcePixels::Rgb(img) => self.blend::<3>(img.as_raw(), img.width() as usize, y0, y1, fy, row),
        }
    }

    #[inline(always)]
    fn blend<const N: usize>(&self, src: &[u8], width: usize, y0: usize, y1: usize, fy: f64, row: &mut [u8]) {
        let line0 = &src[y0 * width * N..(y0 + 1) * width * N];
        let line1 = &src[y1 * width * N..(y1 + 1) * width * N];
        let px = |line: &[u8], x: usize| -> [u8; 4] {
            let p = &line[x * N..x * N + N];
            [p[0], p[1], p[2], if N == 4 { p[N - 1] } else { 255 }]
        };
        let dst_row = &mut row[self.x_first as usize * 3..];
        for (&(x0, x1, fx), dst) in self.xs.iter().zip(dst_row.chunks_exact_mut(3)) {
            let p00 = px(line0, x0);
            let p10 = px(line0, x1);
            let p01 = px(line1, x0);
            let p11 = px(line1, x1);
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w10 = fx * (1.0 - fy);
            let w01 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            let a = w00 * p00[3] as f64 + w10 * p10[3] as f64 + w01 * p01[3] as f64 + w11 * p11[3] as f64;
            if a <= 0.0 {
                continue;
            }
            for c in 0..3 {
                let pc = w00 * (p00[c] as f64 * p00[3] as f64)
                    + w10 * (p10[c] as f64 * p10[3] as f64)
                    + w01 * (p01[c] as f64 * p01[3] as f64)
                    + w11 * (p11[c] as f64 * p11[3] as f64);
                dst[c] = round_half_up((pc + dst[c] as f64 * (255.0 - a)) / 255.0);
            }
        }
    }
}

fn blank(width: u32, height: u32, fill: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb(fill))
}

fn draw(canvas: &mut RgbImage, sources: &[Source<'_>], exec: Exec) {
    let (w, h) = canvas.dimensions();
    let stride = w as usize * 3;
    let buf: &mut [u8] = canvas.as_mut();
    exec.for_each_chunk_mut(buf, stride, |y, row| {
        for s in sources {
            s.blend_row(y as u32, row, h);
        }
    });
}

/// Render the composite: fill, background, then each element in list order.
pub fn render_composite(
    plan: &LayoutPlan,
    elements: &[ElementLayer],
    background: &RgbImage,
    spec: &CanvasSpec,
    exec: Exec,
) -> Result<RgbImage> {
    if plan.element_boxes.len() != elements.len() {
        return Err(CanvasError::PlanMismatch {
            boxes: plan.element_boxes.len(),
            elements: elements.len(),
        });
    }
    if background.width() == 0 || background.height() == 0 {
        return Err(CanvasError::BadBackground(background.width(), background.height()));
    }
    let mut sources = Vec::with_capacity(elements.len() + 1);
    sources.push(Source::new(
        SourcePixels::Rgb(background),
        BBox { x: 0, y: 0, w: background.width(), h: background.height() },
        plan.background_box,
        spec.width,
    ));
    for (e, r) in elements.iter().zip(&plan.element_boxes) {
        sources.push(Source::new(SourcePixels::Rgba(&e.pixels), e.tight_bbox, *r, spec.width));
    }
    let mut canvas = blank(spec.width, spec.height, spec.fill_color);
    draw(&mut canvas, &sources, exec);
    Ok(canvas)
}

/// Lay out and render in one step.
pub fn compose(
    elements: &[ElementLayer],
    background: &RgbImage,
    spec: &CanvasSpec,
    exec: Exec,
) -> Result<(LayoutPlan, RgbImage)> {
    let plan = solve_layout(elements, background.dimensions(), spec)?;
    let img = render_composite(&plan, elements, background, spec, exec)?;
    Ok((plan, img))
}

/// Aspect-preserving resize into `width`x`height`, padding with `fill`.
pub fn fit_into(raster: &RgbImage, width: u32, height: u32, fill: [u8; 3], exec: Exec) -> Result<RgbImage> {
    if raster.width() == 0 || raster.height() == 0 || width == 0 || height == 0 {
        return Err(CanvasError::EmptyRaster);
    }
    if raster.dimensions() == (width, height) {
        return Ok(raster.clone());
    }
    let dest = fit_rect(
        raster.width(),
        raster.height(),
        Rect::new(0.0, 0.0, width as f64, height as f64),
    );
    let source = Source::new(
        SourcePixels::Rgb(raster),
        BBox { x: 0, y: 0, w: raster.width(), h: raster.height() },
        dest,
        width,
    );
    let mut canvas = blank(width, height, fill);
    draw(&mut canvas, std::slice::from_ref(&source), exec);
    Ok(canvas)
}

/// One composite job for batch rendering.
pub struct ComposeJob {
    pub elements: Vec<ElementLayer>,
    pub background: RgbImage,
}

/// Compose many samples. Each sample renders sequentially; samples fan out.
pub fn compose_batch(jobs: &[ComposeJob], spec: &CanvasSpec, exec: Exec) -> Vec<Result<RgbImage>> {
    exec.map(jobs, |j| {
        compose(&j.elements, &j.background, spec, Exec::Sequential).map(|(_, img)| img)
    })
}
