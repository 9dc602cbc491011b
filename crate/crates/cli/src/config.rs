//! Run configuration: one JSON file covering the network, preprocessing,
//! training schedule, synthetic-data generator, and dataset paths. Unknown
//! keys are rejected so typos fail fast instead of silently using defaults.

use segkit_core::lcn::LcnConfig;
use segkit_core::model::NetworkConfig;
use segkit_core::optim::TrainSchedule;
use segkit_core::synth::SynthConfig;
use segkit_core::{Result, SegError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: Option<NetworkConfig>,
    pub lcn: Option<LcnConfig>,
    pub schedule: Option<TrainSchedule>,
    pub synth: Option<SynthConfig>,
    pub data: Option<DataPaths>,
    /// Seed for network initialization and head attachment.
    pub seed: Option<u64>,
    /// Hidden width for the SM transfer variant.
    pub head_width: Option<usize>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub palette: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(RunConfig, String)> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            SegError::Config(format!("{}: {e}", path.display()))
        })?;
        if let Some(net) = &cfg.network {
            net.validate()?;
        }
        if let Some(synth) = &cfg.synth {
            synth.validate()?;
        }
        Ok((cfg, text))
    }

    pub fn require_network(&self) -> Result<&NetworkConfig> {
        self.network
            .as_ref()
            .ok_or_else(|| SegError::Config("config is missing the \"network\" section".into()))
    }

    pub fn require_schedule(&self) -> Result<&TrainSchedule> {
        self.schedule
            .as_ref()
            .ok_or_else(|| SegError::Config("config is missing the \"schedule\" section".into()))
    }

    pub fn require_synth(&self) -> Result<&SynthConfig> {
        self.synth
            .as_ref()
            .ok_or_else(|| SegError::Config("config is missing the \"synth\" section".into()))
    }

    pub fn require_train_manifest(&self) -> Result<&PathBuf> {
        self.data
            .as_ref()
            .and_then(|d| d.train_manifest.as_ref())
            .ok_or_else(|| SegError::Config("config is missing data.train_manifest".into()))
    }

    /// LCN section, or the single-group default over `channels` channels.
    pub fn lcn_or_default(&self, channels: usize) -> LcnConfig {
        self.lcn
            .clone()
            .unwrap_or_else(|| LcnConfig::single_group(channels))
    }
}

/// FNV-1a 64-bit content hash used in run manifests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
