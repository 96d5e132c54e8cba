use std::path::Path;

use ffgo_core::dataset::{self, Category, Manifest, SampleDraft, TrainOverrides};
use serde::Serialize;

use super::{ensure_parent, read_text, relative_to, write_file};
use crate::error::{CliError, Result};
use crate::{Ctx, DatasetCmd};

#[derive(Serialize)]
struct SampleProblems {
    id: u64,
    violations: Vec<dataset::Violation>,
}

pub fn run(ctx: &Ctx, cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Add {
            manifest,
            composite,
            caption,
            caption_file,
            category,
            source_video,
            frame_count,
            labels,
            id,
        } => {
            let caption = match (caption, caption_file) {
                (Some(c), _) => c,
                (None, Some(p)) => read_text(&p)?.trim().to_owned(),
                (None, None) => return Err(CliError::validation("pass --caption or --caption-file")),
            };
            let category: Category = category.parse().map_err(CliError::Validation)?;
            ensure_parent(&manifest)?;
            let mut m = Manifest::open(&manifest)?;
            // Stored paths resolve against the manifest's directory.
            let base = manifest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let draft = SampleDraft {
                id,
                composite_path: relative_to(&composite, base)?,
                caption,
                category,
                source_video: relative_to(&source_video, base)?,
                frame_count,
                element_labels: labels,
            };
            let id = match m.add_sample(draft) {
                Ok(id) => id,
                Err(dataset::DatasetError::ValidationFailed(report)) => {
                    if ctx.json {
                        ctx.report(&report, "")?;
                    }
                    return Err(CliError::Validation(format!("sample rejected: {report}")));
                }
                Err(e) => return Err(e.into()),
            };
            ctx.report(&serde_json::json!({ "id": id }), &format!("added sample {id}"))
        }
        DatasetCmd::Validate { manifest } => {
            let m = Manifest::open(&manifest)?;
            let problems: Vec<SampleProblems> = m
                .validate_all()
                .into_iter()
                .map(|(id, r)| SampleProblems {
                    id,
                    violations: r.violations,
                })
                .collect();
            let mut text = format!(
                "{} samples, {} with violations\n",
                m.samples().len(),
                problems.len()
            );
            for p in &problems {
                for v in &p.violations {
                    text.push_str(&format!("sample {}: {}: {}\n", p.id, v.field, v.message));
                }
            }
            ctx.report(
                &serde_json::json!({ "samples": m.samples().len(), "problems": problems }),
                &text,
            )?;
            if problems.is_empty() {
                Ok(())
            } else {
                Err(CliError::validation(format!("{} sample(s) failed validation", problems.len())))
            }
        }
        DatasetCmd::Stats { manifest } => {
            let m = Manifest::open(&manifest)?;
            let stats = dataset::category_stats(m.samples())?;
            ctx.report(&stats, &stats.to_string())
        }
        DatasetCmd::EmitConfig {
            manifest,
            overrides,
            out,
            captions_out,
        } => {
            let m = Manifest::open(&manifest)?;
            let mut o = TrainOverrides::default();
            for pair in &overrides {
                o.parse_pair(pair)?;
            }
            let cfg = dataset::emit_train_config(&m, &o)?;
            let text = dataset::render_train_config(&cfg);
            if let Some(p) = &captions_out {
                let captions = dataset::emit_training_captions(&m)?;
                write_file(p, dataset::render_training_captions(&captions).as_bytes())?;
            }
            match &out {
                Some(p) => {
                    write_file(p, text.as_bytes())?;
                    ctx.report(&cfg, &format!("wrote {}", p.display()))
                }
                None => ctx.report(&cfg, &text),
            }
        }
    }
}
