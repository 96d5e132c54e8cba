//! Workspace configuration read from `ffgo.json`.

use std::path::{Path, PathBuf};

use ffgo_core::generation::GeneratorBackend;
use ffgo_core::vlm::AdapterConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "ffgo.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    #[serde(skip)]
    pub workspace: PathBuf,
    pub adapters: Vec<AdapterConfig>,
    pub backends: Vec<GeneratorBackend>,
    pub seed: Option<u64>,
    pub log_level: Option<String>,
    /// Timeout for VLM adapter calls, seconds.
    pub adapter_timeout_secs: Option<u64>,
}

impl CliConfig {
    /// Load `ffgo.json` from `workspace`; a missing file yields defaults.
    pub fn load(workspace: &Path) -> Result<Self> {
        let meta = std::fs::metadata(workspace)
            .map_err(|e| CliError::Io(format!("workspace {}: {e}", workspace.display())))?;
        if !meta.is_dir() {
            return Err(CliError::Io(format!("workspace {} is not a directory", workspace.display())));
        }
        if meta.permissions().readonly() {
            return Err(CliError::Io(format!("workspace {} is not writable", workspace.display())));
        }
        let path = workspace.join(CONFIG_FILE);
        let mut cfg = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str::<CliConfig>(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => CliConfig::default(),
            Err(e) => return Err(CliError::Io(format!("{}: {e}", path.display()))),
        };
        cfg.workspace = workspace.to_path_buf();
        Ok(cfg)
    }

    pub fn adapter(&self, name: &str) -> Result<&AdapterConfig> {
        self.adapters
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CliError::validation(format!("no adapter named `{name}` in {CONFIG_FILE}")))
    }

    /// `mock` always resolves to the built-in mock backend.
    pub fn backend(&self, name: &str) -> Result<GeneratorBackend> {
        if let Some(b) = self.backends.iter().find(|b| b.name == name) {
            return Ok(b.clone());
        }
        if name == "mock" {
            return Ok(GeneratorBackend::mock());
        }
        Err(CliError::validation(format!("no backend named `{name}` in {CONFIG_FILE}")))
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }
}
