//! Per-command run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    /// Effective configuration after file and flag overrides.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub fingerprints: BTreeMap<String, String>,
    pub threads: usize,
    pub wall_clock_secs: f64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                artifact_version: env!("CARGO_PKG_VERSION").to_string(),
                config: Value::Null,
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                fingerprints: BTreeMap::new(),
                threads: 1,
                wall_clock_secs: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn config(&mut self, v: impl Serialize) -> &mut Self {
        self.manifest.config = serde_json::to_value(v).expect("config serializes");
        self
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.manifest.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(&mut self, p: &Path) -> &mut Self {
        self.manifest.inputs.push(p.display().to_string());
        self
    }

    pub fn output(&mut self, p: &Path) -> &mut Self {
        self.manifest.outputs.push(p.display().to_string());
        self
    }

    pub fn fingerprint(&mut self, name: &str, fp: String) -> &mut Self {
        self.manifest.fingerprints.insert(name.to_string(), fp);
        self
    }

    pub fn threads(&mut self, n: usize) -> &mut Self {
        self.manifest.threads = n;
        self
    }

    /// Stamps the elapsed time and writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> CliResult<RunManifest> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        capguide::io::write_json(path, &self.manifest)?;
        Ok(self.manifest)
    }
}

/// `dir/stem.suffix` next to `path`, e.g. `out/captions.jsonl` gives
/// `out/captions.manifest.json` for suffix `manifest.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}
