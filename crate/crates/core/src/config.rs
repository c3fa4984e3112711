//! The run configuration document, its digest, and seed derivation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cma::CmaConfig;
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::eval::Interpolation;
use crate::loss::LossConfig;
use crate::pipeline::TrainConfig;
use crate::synthdata::{NoiseModel, SceneSpec};
use crate::tinynet::{DecodeConfig, NetConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Child seed for `(seed, tag, index)`: the first eight bytes, read
/// little-endian, of SHA-256 over `seed` (u64 LE), the UTF-8 `tag`, a zero
/// byte and `index` (u64 LE).
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub noise: NoiseModel,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneSpec::default(),
            noise: NoiseModel::default(),
            train: 200,
            val: 100,
            test: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub interpolation: Interpolation,
    pub iou_threshold: f64,
    /// Minimum score of detections entering the false-positive counts of the
    /// experiment report; the default matches the decode score threshold.
    pub operating_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            interpolation: Interpolation::AllPoint,
            iou_threshold: 0.5,
            operating_score: 0.05,
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub cma: CmaConfig,
    pub ensemble: EnsembleConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            net: NetConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            cma: CmaConfig::default(),
            ensemble: EnsembleConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.data.scene.validate()?;
        self.data.noise.validate()?;
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return Err(Error::config("every split needs at least one image"));
        }
        self.net.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.cma.validate()?;
        self.ensemble.validate()?;
        let c = self.data.scene.num_classes;
        for (name, v) in [
            ("net.num_classes", self.net.num_classes),
            ("loss.num_classes", self.loss.num_classes),
            ("cma.num_classes", self.cma.num_classes),
        ] {
            if v != c {
                return Err(Error::config(format!(
                    "{name} = {v} differs from data.scene.num_classes = {c}"
                )));
            }
        }
        if self.net.image_size != self.data.scene.image_size {
            return Err(Error::config("net.image_size differs from data.scene.image_size"));
        }
        for (name, v) in [
            ("decode.score_threshold", self.decode.score_threshold),
            ("decode.nms_threshold", self.decode.nms_threshold),
            ("eval.iou_threshold", self.eval.iou_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.eval.operating_score) {
            return Err(Error::config("eval.operating_score must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(msg) => Error::Format {
                path: path.to_path_buf(),
                reason: msg,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, "scene", 3);
        assert_eq!(a, derive_seed(7, "scene", 3));
        assert_ne!(a, derive_seed(7, "scene", 4));
        assert_ne!(a, derive_seed(7, "noise", 3));
        assert_ne!(a, derive_seed(8, "scene", 3));
        // tag and index are separated, so "a" + 1 never collides with "a\x01"
        assert_ne!(derive_seed(0, "a", 1), derive_seed(0, "a\u{1}", 0));
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml_str("version = 1\nseed = 9\n[cma]\nm1 = 2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.cma.m1, 2);
        assert_eq!(cfg.cma.m2, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_toml_str("version = 1\nbogus = 3\n").is_err());
        assert!(RunConfig::from_toml_str("version = 2\n").is_err());
        assert!(RunConfig::from_toml_str("[data.noise]\ndrop_rate = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("[net]\nnum_classes = 2\n").is_err());
    }
}
