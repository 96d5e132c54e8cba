//! `ffgo` command line: curation, dataset, LoRA kernel, generation and study
//! subcommands over `ffgo-core`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub mod commands;
pub mod config;
pub mod error;
pub mod server;

pub use config::CliConfig;
pub use error::{CliError, Result, EXIT_IO, EXIT_OK, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(name = "ffgo", version, about = "First-frame subject mixing toolkit")]
pub struct Cli {
    /// Workspace root holding ffgo.json.
    #[arg(long, global = true, default_value = ".")]
    pub workspace: PathBuf,
    /// Print machine-readable JSON instead of text reports.
    #[arg(long, global = true)]
    pub json: bool,
    /// Log level for stderr (error, warn, info, debug, trace).
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build training samples from source videos.
    #[command(subcommand)]
    Curate(CurateCmd),
    /// Manage the training manifest.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Low-rank adapter kernel utilities.
    #[command(subcommand)]
    Lora(LoraCmd),
    /// Generate a customized video from a composite and caption.
    Generate(GenerateArgs),
    /// Drop the first frames of a frame directory.
    Cut(CutArgs),
    /// Run or summarize the user study.
    #[command(subcommand)]
    Study(StudyCmd),
}

#[derive(Debug, Args)]
pub struct VlmArgs {
    /// Adapter profile name from ffgo.json.
    #[arg(long, conflicts_with = "mock")]
    pub adapter: Option<String>,
    /// Use the offline mock client.
    #[arg(long)]
    pub mock: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum CurateCmd {
    /// Keep the first N frames of a frame directory.
    Crop {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = ffgo_core::frames::TRAIN_FRAMES)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract each named element onto a white background.
    Extract {
        #[arg(long)]
        image: PathBuf,
        /// Element names, comma separated or repeated.
        #[arg(long = "names", value_delimiter = ',', required = true)]
        names: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        vlm: VlmArgs,
    },
    /// Remove the named elements, keeping the scene.
    Remove {
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "names", value_delimiter = ',', required = true)]
        names: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        vlm: VlmArgs,
    },
    /// Chroma-key a white-background cut-out into an RGBA layer.
    Key {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = ffgo_core::canvas::DEFAULT_KEY_THRESHOLD)]
        threshold: u8,
        /// Crop to the opaque extent.
        #[arg(long)]
        tight: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compose elements and background into a first-frame canvas.
    Compose {
        /// Element PNGs in column order. Images without alpha are keyed.
        #[arg(long = "element", required = true)]
        elements: Vec<PathBuf>,
        #[arg(long)]
        background: PathBuf,
        #[arg(long, default_value_t = ffgo_core::canvas::DEFAULT_KEY_THRESHOLD)]
        threshold: u8,
        #[arg(long)]
        out: PathBuf,
        /// Also write the layout plan as JSON.
        #[arg(long)]
        emit_plan: Option<PathBuf>,
    },
    /// Caption a sample, or enhance a test prompt with --draft.
    Caption {
        #[arg(long = "element")]
        elements: Vec<PathBuf>,
        #[arg(long)]
        background: Option<PathBuf>,
        #[arg(long = "labels", value_delimiter = ',')]
        labels: Vec<String>,
        /// Source video reference passed to the model.
        #[arg(long)]
        video: Option<String>,
        /// Draft test prompt to enhance instead of captioning.
        #[arg(long)]
        draft: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        vlm: VlmArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    /// Validate and append a sample.
    Add {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        composite: PathBuf,
        /// Caption text.
        #[arg(long, conflicts_with = "caption_file")]
        caption: Option<String>,
        #[arg(long)]
        caption_file: Option<PathBuf>,
        #[arg(long)]
        category: String,
        #[arg(long)]
        source_video: PathBuf,
        #[arg(long, default_value_t = ffgo_core::frames::TRAIN_FRAMES)]
        frame_count: usize,
        #[arg(long = "labels", value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long)]
        id: Option<u64>,
    },
    /// Re-validate every sample.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Category distribution.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Emit the trainer configuration.
    EmitConfig {
        #[arg(long)]
        manifest: PathBuf,
        /// Override as key=value; repeatable. `alpha` is required.
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write transition-prefixed training captions (JSON Lines).
        #[arg(long)]
        captions_out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum LoraCmd {
    /// Create an adapter with Gaussian A and zero B.
    Init {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        r: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// W' = W + alpha A B.
    Merge {
        #[arg(long)]
        weight: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// W = W' - alpha A B.
    Unmerge {
        #[arg(long)]
        weight: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences on random instances.
    CheckGrad {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 12)]
        max_dim: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parameter counts for a rank-r update of a d x k weight.
    Savings {
        #[arg(long)]
        d: u64,
        #[arg(long)]
        k: u64,
        #[arg(long)]
        r: u64,
    },
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub composite: PathBuf,
    /// File holding the caption (without the transition phrase).
    #[arg(long)]
    pub caption: PathBuf,
    /// Backend profile name, or `mock`.
    #[arg(long, default_value = "mock")]
    pub backend: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also save the uncut generation under <out>/raw.
    #[arg(long)]
    pub keep_raw: bool,
    /// Frames to drop beyond the backend's f_c.
    #[arg(long, default_value_t = 0)]
    pub extra_cut: usize,
    /// Override the backend's f_c.
    #[arg(long)]
    pub fc: Option<usize>,
    #[arg(long, default_value_t = ffgo_core::frames::TRAIN_FRAMES)]
    pub frames: usize,
    /// Resize clean frames to WxH (aspect fit, white padding).
    #[arg(long, value_parser = parse_dims)]
    pub resize: Option<(u32, u32)>,
    /// Muxer command with {fps}, {input_dir}, {output_path} tokens.
    #[arg(long)]
    pub encoder_cmd: Option<String>,
    #[arg(long, default_value_t = ffgo_core::frames::DEFAULT_FPS)]
    pub fps: u32,
}

#[derive(Debug, Args)]
pub struct CutArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = ffgo_core::frames::DEFAULT_FC)]
    pub fc: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum StudyCmd {
    /// Serve sessions, accept annotations and report over HTTP.
    Serve {
        /// Study definition: {"seed": N, "sets": [...]}.
        #[arg(long)]
        config: PathBuf,
        /// Append-only annotation log.
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory with the annotation UI build, served at /.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Directory served at /media (defaults to the config's directory).
        #[arg(long)]
        media: Option<PathBuf>,
    },
    /// Aggregate the annotation log into the results table.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_dims(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w: u32 = w.parse().map_err(|_| "bad width")?;
    let h: u32 = h.parse().map_err(|_| "bad height")?;
    if w == 0 || h == 0 {
        return Err("dimensions must be positive".into());
    }
    Ok((w, h))
}

/// Shared invocation context handed to every command.
pub struct Ctx {
    pub config: CliConfig,
    pub json: bool,
}

impl Ctx {
    /// Print a report: JSON in `--json` mode, otherwise the text rendering.
    pub fn report<T: Serialize>(&self, value: &T, text: &str) -> Result<()> {
        let mut out = std::io::stdout().lock();
        if self.json {
            serde_json::to_writer_pretty(&mut out, value)?;
            writeln!(out)?;
        } else {
            out.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(level).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .try_init();
}

/// Parse `argv` (program name first) and run. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            tracing::debug!(error = %e, "command failed");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let config = CliConfig::load(&cli.workspace)?;
    let level = cli
        .log_level
        .clone()
        .or_else(|| config.log_level.clone())
        .unwrap_or_else(|| "warn".into());
    init_logging(&level);
    let ctx = Ctx { config, json: cli.json };
    match cli.command {
        Command::Curate(c) => commands::curate::run(&ctx, c),
        Command::Dataset(c) => commands::dataset::run(&ctx, c),
        Command::Lora(c) => commands::lora::run(&ctx, c),
        Command::Generate(a) => commands::generate::run(&ctx, a),
        Command::Cut(a) => commands::generate::cut(&ctx, a),
        Command::Study(c) => commands::study::run(&ctx, c),
    }
}
