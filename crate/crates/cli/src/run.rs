//! Output directory layout, run manifests and small text-artifact helpers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Paths of every artifact under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn data(&self, index: usize, what: &str) -> PathBuf {
        self.path(format!("data/{index:04}_{what}.png"))
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.path("data/manifest.txt")
    }

    pub fn target(&self, index: usize, what: &str, ext: &str) -> PathBuf {
        self.path(format!("targets/{index:04}_{what}.{ext}"))
    }

    pub fn bins(&self) -> PathBuf {
        self.path("targets/bins.txt")
    }

    pub fn input_stats(&self) -> PathBuf {
        self.path("targets/input_stats.txt")
    }

    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.path(format!("models/{name}"))
    }

    pub fn inferred(&self, index: usize, what: &str, ext: &str) -> PathBuf {
        self.path(format!("infer/{index:04}_{what}.{ext}"))
    }

    pub fn run_manifest(&self, command: &str) -> PathBuf {
        self.path(format!("runs/{command}.manifest"))
    }

    pub fn timing(&self, command: &str) -> PathBuf {
        self.path(format!("timing/{command}.txt"))
    }
}

/// Fails with a dependency error unless `path` exists.
pub fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Dependency {
            missing: path.to_path_buf(),
            producer,
        })
    }
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Parses a `key = value` artifact file into ordered pairs.
pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::Artifact {
            path: path.to_path_buf(),
            message: format!("line {}: expected `key = value`", i + 1),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn kv_value<'a>(kv: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| CliError::Artifact {
            path: path.to_path_buf(),
            message: format!("missing `{key}`"),
        })
}

/// Bookkeeping for one command invocation.
pub struct Run<'a> {
    pub command: &'static str,
    pub config: &'a RunConfig,
    pub layout: Layout,
    pub threads: usize,
    started: Instant,
    artifacts: Vec<String>,
}

impl<'a> Run<'a> {
    pub fn start(command: &'static str, config: &'a RunConfig, out: PathBuf, threads: usize) -> Result<Self> {
        let layout = Layout::new(out);
        fs::create_dir_all(&layout.root).map_err(|e| CliError::io(&layout.root, e))?;
        let copy = layout.path("config.cfg");
        if let Ok(old) = fs::read_to_string(&copy) {
            if old != config.text {
                log::warn!("{} differs from the config of earlier commands; overwriting", copy.display());
            }
        }
        write_text(&copy, &config.text)?;
        Ok(Self {
            command,
            config,
            layout,
            threads,
            started: Instant::now(),
            artifacts: Vec::new(),
        })
    }

    /// Records an artifact path (relative to the output directory) in the manifest.
    pub fn produced(&mut self, rel: impl Into<String>) {
        self.artifacts.push(rel.into());
    }

    /// Writes the run manifest and, separately, the wall time. The manifest
    /// holds only reproducible fields so reruns compare byte for byte.
    pub fn finish(self, substreams: &[&str]) -> Result<()> {
        let c = self.config;
        let mut text = String::new();
        writeln!(text, "command = {}", self.command).unwrap();
        writeln!(text, "version = {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(text, "config_sha256 = {}", c.hash).unwrap();
        writeln!(text, "seed = {}", c.seed).unwrap();
        writeln!(text, "threads = {}", self.threads).unwrap();
        for name in substreams {
            writeln!(text, "substream.{name} = {}", c.substream(name)).unwrap();
        }
        for a in &self.artifacts {
            writeln!(text, "artifact = {a}").unwrap();
        }
        write_text(&self.layout.run_manifest(self.command), &text)?;
        let secs = self.started.elapsed().as_secs_f64();
        write_text(&self.layout.timing(self.command), &format!("wall_seconds = {secs:.3}\n"))?;
        log::info!("{} finished in {secs:.1} s", self.command);
        Ok(())
    }
}
