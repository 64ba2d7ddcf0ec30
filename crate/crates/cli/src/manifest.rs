//! Run manifests: every artifact-producing invocation records its
//! resolved configuration alongside the outputs. Identical inputs and
//! seed produce an identical manifest except for the duration field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

#[derive(Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub subcommand: &'static str,
    pub tool_version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

pub struct ManifestBuilder {
    subcommand: &'static str,
    seed: Option<u64>,
    config: BTreeMap<String, serde_json::Value>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &'static str) -> Self {
        ManifestBuilder {
            subcommand,
            seed: None,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn config<V: Serialize>(&mut self, key: &str, value: V) -> &mut Self {
        self.config.insert(
            key.to_string(),
            serde_json::to_value(value).expect("config values are plain JSON"),
        );
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Write `<out>.manifest.json` next to the primary output path.
    pub fn write(&self, out: &Path) -> anyhow::Result<PathBuf> {
        let manifest = RunManifest {
            version: "v1",
            subcommand: self.subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut name = out.as_os_str().to_os_string();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let mut text = serde_json::to_string(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(path)
    }
}
