use std::path::Path;
use std::sync::Arc;

use ffgo_core::study::{self, StudyConfig, StudyStore};

use super::{read_text, write_file};
use crate::error::{CliError, Result};
use crate::server;
use crate::{Ctx, StudyCmd};

pub fn load_study(config: &Path) -> Result<StudyConfig> {
    let cfg: StudyConfig = serde_json::from_str(&read_text(config)?)
        .map_err(|e| CliError::Validation(format!("{}: {e}", config.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(ctx: &Ctx, cmd: StudyCmd) -> Result<()> {
    match cmd {
        StudyCmd::Serve {
            config,
            log,
            port,
            host,
            static_dir,
            media,
        } => {
            let cfg = load_study(&config)?;
            let media = media.or_else(|| config.parent().map(Path::to_path_buf));
            let store = Arc::new(StudyStore::open(&log, cfg)?);
            let addr = format!("{host}:{port}");
            eprintln!("study service listening on http://{addr}");
            server::serve_forever(&addr, server::router(store, media, static_dir))
        }
        StudyCmd::Report { config, log, out } => {
            let cfg = load_study(&config)?;
            let store = StudyStore::open(&log, cfg)?;
            let report = store.report()?;
            let table = study::render_report(&report);
            if let Some(p) = &out {
                let body = if ctx.json {
                    serde_json::to_string_pretty(&report)? + "\n"
                } else {
                    table.clone()
                };
                write_file(p, body.as_bytes())?;
            }
            ctx.report(&report, &table)
        }
    }
}
