//! Run-config files, flag merging, content hashing and run markers.
//!
//! Every command resolves its full configuration (file values overridden
//! by flags, defaults expanded), persists it as TOML next to its outputs,
//! and finishes by writing a completion marker carrying the config hash.
//! A failed run leaves a failure marker instead so partial outputs are
//! never mistaken for results.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ghclnet::backbone::BackboneConfig;
use ghclnet::cascade::CascadeThresholds;
use ghclnet::training::TrainConfig;

pub const COMPLETE_MARKER: &str = "run_complete.marker";
pub const FAILED_MARKER: &str = "run_failed.marker";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// On-disk run config. Any field may be omitted and supplied by flags.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub manifests: Option<Vec<PathBuf>>,
    pub expert: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub backbone: Option<BackboneConfig>,
    pub train: Option<TrainConfig>,
    pub thresholds: Option<CascadeThresholds>,
    pub protocol: Option<ProtocolConfig>,
}

/// Protocol section mirroring the evaluate flags.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub variant: Option<String>,
    pub sensor: Option<String>,
    pub train_sensor: Option<String>,
    pub test_sensor: Option<String>,
    pub sensors: Option<Vec<String>>,
    pub test_manifests: Option<Vec<String>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))
    }
}

/// Serializes the resolved config and returns `(toml, sha256-hex)`.
pub fn resolved_toml<T: Serialize>(resolved: &T) -> Result<(String, String)> {
    let text = toml::to_string_pretty(resolved).context("cannot serialize resolved config")?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok((text, format!("{:x}", hasher.finalize())))
}

/// Writes the resolved config into the run directory and clears stale
/// markers. Returns the config hash.
pub fn begin_run<T: Serialize>(out_dir: &Path, resolved: &T) -> Result<String> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output dir {}", out_dir.display()))?;
    let _ = fs::remove_file(out_dir.join(COMPLETE_MARKER));
    let _ = fs::remove_file(out_dir.join(FAILED_MARKER));
    let (text, hash) = resolved_toml(resolved)?;
    fs::write(out_dir.join(RESOLVED_CONFIG), text).context("cannot write resolved config")?;
    Ok(hash)
}

pub fn mark_complete(out_dir: &Path, config_hash: &str) -> Result<()> {
    fs::write(
        out_dir.join(COMPLETE_MARKER),
        format!("ok {config_hash}\n"),
    )
    .context("cannot write completion marker")
}

pub fn mark_failed(out_dir: &Path, error: &str) {
    let _ = fs::write(out_dir.join(FAILED_MARKER), format!("failed: {error}\n"));
}
