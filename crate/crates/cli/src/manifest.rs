use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use elo_forge::store::config::short_hash;
use elo_forge::store::RunConfig;
use serde::Serialize;

/// Everything needed to re-run a command.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_hash: Option<String>,
    pub config: Option<RunConfig>,
    pub seeds: Seeds,
    pub versions: Versions,
    pub threads: usize,
    pub outputs: Vec<(String, String)>,
}

#[derive(Debug, Default, Serialize)]
pub struct Seeds {
    pub run: Option<u64>,
    pub model_init: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub elo_forge: &'static str,
    pub checkpoint_format: u32,
}

/// `ELO_FORGE_THREADS`, default 1. Every kernel here is single-threaded, so
/// the value is validated and recorded only.
pub fn thread_cap() -> std::result::Result<usize, String> {
    match std::env::var("ELO_FORGE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("ELO_FORGE_THREADS must be a positive integer, got `{v}`")),
        },
    }
}

impl Manifest {
    pub fn new(command: &str, argv: &[String], config: Option<&RunConfig>) -> Self {
        Manifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            config_hash: config.map(RunConfig::hash),
            config: config.cloned(),
            seeds: Seeds {
                run: config.map(|c| c.seed),
                model_init: config.map(|c| c.model.seed),
            },
            versions: Versions {
                elo_forge: env!("CARGO_PKG_VERSION"),
                checkpoint_format: elo_forge::store::checkpoint::VERSION,
            },
            threads: thread_cap().unwrap_or(1),
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, role: &str, path: &Path) {
        self.outputs.push((role.to_string(), path.display().to_string()));
    }

    /// Deterministic run id from the command line and config.
    pub fn run_id(&self) -> String {
        let mut key = self.argv.join("\u{1f}");
        key.push_str(self.config_hash.as_deref().unwrap_or(""));
        short_hash(key.as_bytes())[..8].to_string()
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<PathBuf> {
        self.write(&dir.join("manifest.json"))
    }

    /// Writes `<file>.manifest.json` next to an output file.
    pub fn write_beside(&self, file: &Path) -> Result<PathBuf> {
        let mut name = file.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        self.write(&file.with_file_name(name))
    }

    fn write(&self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path.to_path_buf())
    }
}
