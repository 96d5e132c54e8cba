use std::path::{Path, PathBuf};
use std::time::Duration;

use ffgo_core::canvas::{self, CanvasSpec, ElementLayer};
use ffgo_core::frames;
use ffgo_core::vlm::{self, HttpVlm, MockVlm, RetryPolicy, VlmClient};
use ffgo_core::Exec;
use image::RgbImage;
use serde::Serialize;

use super::{open_rgb, save_png, slug, write_file};
use crate::error::{CliError, Result};
use crate::{CurateCmd, Ctx, VlmArgs};

const DEFAULT_ADAPTER_TIMEOUT_SECS: u64 = 120;

fn client(ctx: &Ctx, args: &VlmArgs) -> Result<Box<dyn VlmClient>> {
    if args.mock {
        return Ok(Box::new(MockVlm::new(ctx.config.seed(args.seed))));
    }
    let Some(name) = &args.adapter else {
        return Err(CliError::validation("pass --adapter <name> or --mock"));
    };
    let cfg = ctx.config.adapter(name)?.clone();
    let timeout = Duration::from_secs(ctx.config.adapter_timeout_secs.unwrap_or(DEFAULT_ADAPTER_TIMEOUT_SECS));
    Ok(Box::new(HttpVlm::new(cfg, timeout)?))
}

fn retry(args: &VlmArgs) -> RetryPolicy {
    if args.mock {
        RetryPolicy::no_delay(1)
    } else {
        RetryPolicy::default()
    }
}

/// File stem without the `NN_` ordering prefix `extract` writes.
fn label_of(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match stem.split_once('_') {
        Some((n, rest)) if !n.is_empty() && !rest.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) => {
            rest.replace('_', " ")
        }
        _ => stem,
    }
}

/// Images with an alpha channel are used as-is; opaque ones are keyed.
pub fn load_element(path: &Path, threshold: u8) -> Result<ElementLayer> {
    let img = image::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let label = label_of(path);
    if img.color().has_alpha() {
        Ok(ElementLayer::new(label, img.to_rgba8())?)
    } else {
        Ok(canvas::chroma_key(&img.to_rgb8(), threshold, label)?)
    }
}

#[derive(Serialize)]
struct Written {
    outputs: Vec<PathBuf>,
}

pub fn run(ctx: &Ctx, cmd: CurateCmd) -> Result<()> {
    match cmd {
        CurateCmd::Crop { input, n, out } => {
            let seq = frames::load(&input, Exec::default())?;
            let cropped = frames::crop_head(&seq, n)?;
            frames::write(&cropped, &out, Exec::default())?;
            tracing::info!(frames = cropped.frame_count(), out = %out.display(), "cropped");
            ctx.report(
                &serde_json::json!({"frames": cropped.frame_count(), "out": out}),
                &format!("{} frames -> {}", cropped.frame_count(), out.display()),
            )
        }
        CurateCmd::Extract { image, names, out, vlm: v } => {
            let src = open_rgb(&image)?;
            let c = client(ctx, &v)?;
            let layers = vlm::extract_elements(&src, &names, c.as_ref(), retry(&v))?;
            let mut outputs = Vec::new();
            for (i, (img, name)) in layers.iter().zip(&names).enumerate() {
                let p = out.join(format!("{i:02}_{}.png", slug(name)));
                save_png(img, &p)?;
                outputs.push(p);
            }
            report_written(ctx, outputs)
        }
        CurateCmd::Remove { image, names, out, vlm: v } => {
            let src = open_rgb(&image)?;
            let c = client(ctx, &v)?;
            let bg = vlm::remove_objects(&src, &names, c.as_ref(), retry(&v))?;
            save_png(&bg, &out)?;
            report_written(ctx, vec![out])
        }
        CurateCmd::Key {
            input,
            threshold,
            tight,
            out,
        } => {
            let src = open_rgb(&input)?;
            let mut layer = canvas::chroma_key(&src, threshold, label_of(&input))?;
            if tight {
                layer = canvas::tight_crop(&layer);
            }
            save_png(layer.pixels(), &out)?;
            report_written(ctx, vec![out])
        }
        CurateCmd::Compose {
            elements,
            background,
            threshold,
            out,
            emit_plan,
        } => {
            let layers = elements
                .iter()
                .map(|p| load_element(p, threshold))
                .collect::<Result<Vec<_>>>()?;
            let bg = open_rgb(&background)?;
            let (plan, img) = canvas::compose(&layers, &bg, &CanvasSpec::default(), Exec::default())?;
            save_png(&img, &out)?;
            let mut outputs = vec![out];
            if let Some(p) = emit_plan {
                let mut text = serde_json::to_string_pretty(&plan)?;
                text.push('\n');
                write_file(&p, text.as_bytes())?;
                outputs.push(p);
            }
            report_written(ctx, outputs)
        }
        CurateCmd::Caption {
            elements,
            background,
            labels,
            video,
            draft,
            out,
            vlm: v,
        } => {
            let mut assets: Vec<RgbImage> = elements.iter().map(|p| open_rgb(p)).collect::<Result<_>>()?;
            if let Some(bg) = &background {
                assets.push(open_rgb(bg)?);
            }
            let c = client(ctx, &v)?;
            let labels = if labels.is_empty() {
                elements.iter().map(|p| label_of(p)).collect()
            } else {
                labels
            };
            let text = match &draft {
                Some(d) => vlm::enhance_test_prompt(d, &assets, &labels, c.as_ref(), retry(&v))?,
                None => vlm::generate_caption(&assets, &labels, video.as_deref(), c.as_ref(), retry(&v))?,
            };
            if let Some(p) = &out {
                write_file(p, format!("{text}\n").as_bytes())?;
            }
            ctx.report(&serde_json::json!({ "caption": text }), &text)
        }
    }
}

fn report_written(ctx: &Ctx, outputs: Vec<PathBuf>) -> Result<()> {
    let text = outputs
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join("\n");
    ctx.report(&Written { outputs }, &text)
}
