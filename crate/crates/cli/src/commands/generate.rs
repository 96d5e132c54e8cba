use ffgo_core::canvas;
use ffgo_core::frames::{self, FrameSequence};
use ffgo_core::generation::{self, GenerationRequest};
use ffgo_core::Exec;
use serde::Serialize;

use super::{open_rgb, read_text, write_file};
use crate::error::{CliError, Result};
use crate::{Ctx, CutArgs, GenerateArgs};

#[derive(Serialize)]
struct GenerateSummary<'a> {
    backend: &'a str,
    seed: u64,
    prompt: &'a str,
    raw_frames: usize,
    clean_frames: usize,
    cut: usize,
    out: &'a std::path::Path,
}

pub fn run(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let mut backend = ctx.config.backend(&a.backend)?;
    if let Some(fc) = a.fc {
        backend.f_c = fc;
    }
    let seed = ctx.config.seed(a.seed);
    let composite = open_rgb(&a.composite)?;
    let caption = read_text(&a.caption)?;
    let caption = caption.trim();
    let req: GenerationRequest =
        generation::prepare_request_frames(&composite, caption, &backend, seed, [255, 255, 255], a.frames)?;
    tracing::info!(backend = %backend.name, seed, frames = a.frames, "invoking generator");
    let raw = generation::invoke_generator(&req, &backend)?;
    let cut = backend.f_c + a.extra_cut;
    let mut clean = frames::clean_cut(&raw, cut)?;
    if let Some((w, h)) = a.resize {
        let exec = Exec::default();
        let resized = clean
            .frames()
            .iter()
            .map(|f| canvas::fit_into(f, w, h, [255, 255, 255], exec))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        clean = FrameSequence::new(resized)?;
    }

    frames::write(&clean, &a.out, Exec::default())?;
    if a.keep_raw {
        frames::write(&raw, &a.out.join("raw"), Exec::default())?;
    }
    write_file(&a.out.join("prompt.txt"), format!("{}\n", req.prompt.as_str()).as_bytes())?;
    if let Some(template) = &a.encoder_cmd {
        let video = a.out.with_extension("mp4");
        frames::run_encoder(template, a.fps, &a.out, &video)?;
    }

    let summary = GenerateSummary {
        backend: &backend.name,
        seed,
        prompt: req.prompt.as_str(),
        raw_frames: raw.frame_count(),
        clean_frames: clean.frame_count(),
        cut,
        out: &a.out,
    };
    ctx.report(
        &summary,
        &format!(
            "{} frames generated, {} kept after dropping {cut} -> {}",
            summary.raw_frames,
            summary.clean_frames,
            a.out.display()
        ),
    )
}

pub fn cut(ctx: &Ctx, a: CutArgs) -> Result<()> {
    if a.input == a.out {
        return Err(CliError::validation("--in and --out must differ"));
    }
    let seq = frames::load(&a.input, Exec::default())?;
    let clean = frames::clean_cut(&seq, a.fc)?;
    frames::write(&clean, &a.out, Exec::default())?;
    ctx.report(
        &serde_json::json!({"input_frames": seq.frame_count(), "output_frames": clean.frame_count(), "out": a.out}),
        &format!("{} -> {} frames in {}", seq.frame_count(), clean.frame_count(), a.out.display()),
    )
}
