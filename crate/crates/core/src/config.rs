//! Run configuration: one JSON document covering every knob in the pipeline.

use crate::losses::LossWeights;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backbones: BackboneConfig,
    pub mapper: MapperConfig,
    pub training: TrainingConfig,
    pub evaluation: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub identities: usize,
    pub seed: u64,
    pub resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 2000,
            identities: 20,
            seed: 1,
            resolution: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Generator depth L; output resolution is 4·2^(L/2 − 1).
    pub layers: usize,
    /// Width D of each per-layer style vector.
    pub style_dim: usize,
    /// Joint text/image embedding width d.
    pub embed_dim: usize,
    /// Identity embedding width.
    pub identity_dim: usize,
    pub seed: u64,
    pub generator_steps: usize,
    pub discriminator_steps: usize,
    pub inverter_steps: usize,
    pub embedder_steps: usize,
    pub identity_steps: usize,
    pub predictor_steps: usize,
    pub batch_size: usize,
    pub embedder_batch_size: usize,
    pub learning_rate: f64,
    /// When false, gate failures are recorded in the report instead of
    /// aborting the run (used by the tiny demo profile).
    pub enforce_gates: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 8,
            style_dim: 64,
            embed_dim: 64,
            identity_dim: 32,
            seed: 7,
            generator_steps: 1400,
            discriminator_steps: 400,
            inverter_steps: 2600,
            embedder_steps: 4200,
            identity_steps: 2400,
            predictor_steps: 2800,
            batch_size: 16,
            embedder_batch_size: 48,
            learning_rate: 2e-3,
            enforce_gates: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperConfig {
    /// Manipulation blend coefficient: w_s = alpha·w_t + w0.
    pub alpha: f64,
    /// Levels whose sub-networks are active; the rest emit exact zeros.
    pub enabled_levels: Vec<String>,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            alpha: 0.1,
            enabled_levels: vec!["coarse".into(), "medium".into(), "fine".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub generation_weights: LossWeights,
    pub manipulation_weights: LossWeights,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 1000,
            batch_size: 16,
            learning_rate: 5e-4,
            seed: 11,
            generation_weights: LossWeights::generation_defaults(),
            manipulation_weights: LossWeights::manipulation_defaults(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out images (or noise draws) scored per evaluation pass.
    pub samples: usize,
    pub distractors: usize,
    pub probes_per_layer: usize,
    /// Probe magnitude for the layer-wise attribute analysis.
    pub probe_delta: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 200,
            distractors: 99,
            probes_per_layer: 12,
            probe_delta: 1.0,
            seed: 23,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex digest of the canonical JSON form; stamped into every artifact a
    /// run produces so outputs can be traced back to their exact settings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_json().as_bytes());
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let text = cfg.to_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"data": {"n": 10, "mystery": 3}}"#;
        assert!(serde_json::from_str::<RunConfig>(text).is_err());
        let text = r#"{"frobnicator": {}}"#;
        assert!(serde_json::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn partial_documents_fill_in_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"data": {"n": 64}}"#).unwrap();
        assert_eq!(cfg.data.n, 64);
        assert_eq!(cfg.data.identities, DataConfig::default().identities);
        assert_eq!(cfg.training.steps, 1000);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.data.seed = 999;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
