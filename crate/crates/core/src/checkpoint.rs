//! Versioned safetensors checkpoints.
//!
//! Arrays are stored under `param/`, `buffer/` and `momentum/` prefixes; a
//! single `manifest` metadata entry holds JSON with the format version, the
//! model configuration and its digest, the stage plan, the step and the RNG
//! state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegmentationModel};
use crate::nn::device;
use crate::trainer::StagePlan;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_digest: String,
    model_config: ModelConfig,
    stage_plan: Option<StagePlan>,
    step: usize,
    rng: Option<ChaCha8Rng>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub stage_plan: Option<StagePlan>,
    pub step: usize,
    pub rng: Option<ChaCha8Rng>,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub momentum: BTreeMap<String, Tensor>,
}

/// Hex SHA-256 of the configuration's canonical JSON.
pub fn config_digest(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn snapshot(map: &BTreeMap<String, candle_core::Var>) -> Result<BTreeMap<String, Tensor>> {
    map.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
        .collect()
}

impl Checkpoint {
    pub fn capture(
        model: &SegmentationModel,
        stage_plan: Option<&StagePlan>,
        step: usize,
        rng: Option<&ChaCha8Rng>,
        momentum: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        Ok(Self {
            model_config: model.config.clone(),
            stage_plan: stage_plan.cloned(),
            step,
            rng: rng.cloned(),
            params: snapshot(model.store.params())?,
            buffers: snapshot(model.store.buffers())?,
            momentum: momentum
                .iter()
                .map(|(k, v)| Ok((k.clone(), v.copy()?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn stage(&self) -> Option<u8> {
        self.stage_plan.as_ref().map(|p| p.stage)
    }

    /// Build a model with these weights. With `expected`, a checkpoint whose
    /// configuration differs is rejected.
    pub fn build_model(&self, expected: Option<&ModelConfig>) -> Result<SegmentationModel> {
        if let Some(exp) = expected {
            if exp != &self.model_config {
                return Err(Error::config(format!(
                    "checkpoint model config (digest {}) does not match the requested one (digest {})",
                    config_digest(&self.model_config),
                    config_digest(exp)
                )));
            }
        }
        let model = SegmentationModel::new(&self.model_config, 0)?;
        let want = |n: usize, kind: &str| -> Result<()> {
            if n != 0 {
                return Err(Error::data(format!("checkpoint has {n} missing {kind}")));
            }
            Ok(())
        };
        want(
            model.store.params().keys().filter(|k| !self.params.contains_key(*k)).count(),
            "parameters",
        )?;
        want(
            model.store.buffers().keys().filter(|k| !self.buffers.contains_key(*k)).count(),
            "buffers",
        )?;
        for (name, t) in self.params.iter().chain(&self.buffers) {
            model.store.assign(name, t)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config_digest: config_digest(&self.model_config),
            model_config: self.model_config.clone(),
            stage_plan: self.stage_plan.clone(),
            step: self.step,
            rng: self.rng.clone(),
        };
        let json = serde_json::to_string(&manifest)
            .map_err(|e| Error::data(format!("manifest serialization: {e}")))?;
        let mut arrays: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, map) in [
            ("param", &self.params),
            ("buffer", &self.buffers),
            ("momentum", &self.momentum),
        ] {
            arrays.extend(map.iter().map(|(k, v)| (format!("{prefix}/{k}"), v)));
        }
        let meta = HashMap::from([(MANIFEST_KEY.to_string(), json)]);
        safetensors::serialize(arrays, Some(meta))
            .map_err(|e| Error::data(format!("checkpoint serialization: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: String| Error::data(format!("malformed checkpoint: {e}"));
        let (_, meta) =
            safetensors::SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(MANIFEST_KEY))
            .ok_or_else(|| bad("no manifest".into()))?;
        let manifest: Manifest = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.config_digest != config_digest(&manifest.model_config) {
            return Err(bad("config digest does not match its config".into()));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &device())?;
        let mut ckpt = Self {
            model_config: manifest.model_config,
            stage_plan: manifest.stage_plan,
            step: manifest.step,
            rng: manifest.rng,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            momentum: BTreeMap::new(),
        };
        for (key, t) in tensors {
            let (prefix, name) = key
                .split_once('/')
                .ok_or_else(|| bad(format!("unprefixed array `{key}`")))?;
            let map = match prefix {
                "param" => &mut ckpt.params,
                "buffer" => &mut ckpt.buffers,
                "momentum" => &mut ckpt.momentum,
                _ => return Err(bad(format!("unknown array prefix in `{key}`"))),
            };
            map.insert(name.to_string(), t);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let model = SegmentationModel::new(&ModelConfig::toy(3, Variant::Temporal), 4).unwrap();
        let mom = BTreeMap::from([(
            "head.cls.bias".to_string(),
            Tensor::new(&[0.25f64, -1.0, 3.5], &device()).unwrap(),
        )]);
        let rng = ChaCha8Rng::seed_from_u64(17);
        Checkpoint::capture(&model, Some(&StagePlan::stage1()), 12, Some(&rng), &mom).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let a = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.step, 12);
        assert_eq!(back.rng, sample().rng);
    }

    #[test]
    fn rejects_mismatched_config() {
        let ck = sample();
        let other = ModelConfig::toy(5, Variant::Temporal);
        assert!(matches!(ck.build_model(Some(&other)), Err(Error::Config(_))));
        assert!(ck.build_model(Some(&ck.model_config)).is_ok());
    }

    #[test]
    fn rejects_garbage_and_wrong_version() {
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Data(_))));
        let cfg = ModelConfig::toy(3, Variant::SingleFrame);
        let manifest = Manifest {
            format_version: 9,
            config_digest: config_digest(&cfg),
            model_config: cfg,
            stage_plan: None,
            step: 0,
            rng: None,
        };
        let meta = HashMap::from([(
            MANIFEST_KEY.to_string(),
            serde_json::to_string(&manifest).unwrap(),
        )]);
        let empty: Vec<(String, Tensor)> = Vec::new();
        let bytes = safetensors::serialize(empty, Some(meta)).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn digest_tracks_config() {
        let a = ModelConfig::toy(3, Variant::Temporal);
        let mut b = a.clone();
        b.fusion_channels = 64;
        assert_ne!(config_digest(&a), config_digest(&b));
        assert_eq!(config_digest(&a), config_digest(&a.clone()));
    }
}
