//! Run manifests and output plumbing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "catmerge";

/// Written beside every output: `<file>.manifest.json`, or
/// `run.manifest.json` inside an output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Digests every file a suite directory references.
    pub fn suite_inputs(&mut self, dir: &Path) -> Result<()> {
        let m = catmerge::synthbench::SuiteManifest::load(dir)
            .with_context(|| format!("reading suite {}", dir.display()))?;
        self.input(&dir.join(catmerge::synthbench::SUITE_MANIFEST))?;
        for f in m.files.all() {
            self.input(&dir.join(f))?;
        }
        Ok(())
    }

    pub fn output(&mut self, key: impl Into<String>, bytes: &[u8]) {
        self.outputs.insert(key.into(), sha256_hex(bytes));
    }

    pub fn finish(mut self, started: Instant, path: &Path) -> Result<()> {
        self.wall_time_s = started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self)? + "\n";
        write_atomic(path, text.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// `<path>.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes through a temporary file in the target directory so readers never
/// see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
