//! Learned modules of the semantic stream and their checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore};
use crate::decoder::{Decoder, DecoderDims};
use crate::encoder::Encoder;
use crate::rate::{FactorizedPrior, HyperSynthesis, RaCodec, RateError, RateSet, DEFAULT_RHO};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error("parameter {name:?} has shape {got:?}, model expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_channels: usize,
    /// Channel count after each encoder module; the last is the semantic
    /// channel count. The number of entries is the depth.
    pub widths: Vec<usize>,
    pub hyper_hidden: usize,
    pub rrdb_features: usize,
    pub rrdb_growth: usize,
    pub rrdb_blocks: usize,
    pub snr_embed_dim: usize,
    pub rates: Vec<usize>,
    pub rho: f64,
    pub power: f64,
}

impl Default for ModelConfig {
    /// Small configuration sized for 16x16 images on one core.
    fn default() -> Self {
        Self {
            image_channels: 3,
            widths: vec![16, 24, 32],
            hyper_hidden: 32,
            rrdb_features: 8,
            rrdb_growth: 8,
            rrdb_blocks: 3,
            snr_embed_dim: 32,
            rates: RateSet::default().values().to_vec(),
            rho: DEFAULT_RHO,
            power: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(1..=4).contains(&self.image_channels) {
            return bad("image_channels must be 1..=4");
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        if self.hyper_hidden == 0 || self.rrdb_features == 0 || self.rrdb_growth == 0 || self.snr_embed_dim == 0 {
            return bad("layer sizes must be positive");
        }
        if !(self.rho > 0.0) || !(self.power > 0.0) {
            return bad("rho and power must be positive");
        }
        RateSet::new(self.rates.clone())?;
        Ok(())
    }

    pub fn semantic_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Spatial down-sampling factor between the image and the semantic grid.
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub hyper: HyperSynthesis,
    pub prior: FactorizedPrior,
    pub ra: RaCodec,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cs = config.semantic_channels();
        let encoder = Encoder::new(&mut store, "enc", config.image_channels, &config.widths, &mut rng);
        let decoder = Decoder::new(
            &mut store,
            "dec",
            DecoderDims {
                image_channels: config.image_channels,
                widths: &config.widths,
                rrdb_features: config.rrdb_features,
                rrdb_growth: config.rrdb_growth,
                rrdb_blocks: config.rrdb_blocks,
                embed_dim: config.snr_embed_dim,
            },
            &mut rng,
        );
        let hyper = HyperSynthesis::new(&mut store, "hyper", cs, config.hyper_hidden, &mut rng);
        let prior = FactorizedPrior::new(&mut store, "prior", cs, &mut rng);
        let ra = RaCodec::new(&mut store, "ra", cs, RateSet::new(config.rates.clone())?, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            hyper,
            prior,
            ra,
        })
    }

    pub fn rate_set(&self) -> &RateSet {
        &self.ra.rates
    }

    /// Encoder, decoder and entropy models: trained in the first stage,
    /// frozen in the second.
    pub fn backbone_params(&self) -> Vec<ParamId> {
        [self.encoder.params(), self.decoder.params(), self.hyper.params(), self.prior.params()].concat()
    }

    /// Rate tokens and FC banks.
    pub fn ra_params(&self) -> Vec<ParamId> {
        self.ra.params()
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn save(&self, path: impl AsRef<Path>, stage: u8) -> Result<(), ModelError> {
        let path = path.as_ref();
        let ck = CheckpointRef {
            stage,
            config: &self.config,
            params: &self.store,
        };
        let text = serde_json::to_string(&ck).map_err(|e| ck_err(path, e))?;
        std::fs::write(path, text).map_err(|e| ck_err(path, e))
    }

    /// Rebuilds the model from the stored config and copies values by name.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u8), ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ck_err(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| ck_err(path, e))?;
        let mut model = Model::new(ck.config, 0)?;
        model.load_values(&ck.params)?;
        Ok((model, ck.stage))
    }

    pub fn load_values(&mut self, src: &ParamStore) -> Result<(), ModelError> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let sid = src.find(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let v = src.value(sid);
            if v.shape() != self.store.value(id).shape() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: self.store.value(id).shape().to_vec(),
                    got: v.shape().to_vec(),
                });
            }
            *self.store.value_mut(id) = v.clone();
        }
        Ok(())
    }
}

fn ck_err(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    stage: u8,
    config: &'a ModelConfig,
    params: &'a ParamStore,
}

#[derive(Deserialize)]
struct Checkpoint {
    stage: u8,
    config: ModelConfig,
    params: ParamStore,
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn default_config_builds() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        assert_eq!(m.config.stride(), 8);
        assert_eq!(m.rate_set().len(), 32);
        let back: HashSet<_> = m.backbone_params().into_iter().collect();
        let rate: HashSet<_> = m.ra_params().into_iter().collect();
        assert!(back.is_disjoint(&rate));
        assert_eq!(back.len() + rate.len(), m.store.len());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::default();
        c.widths.clear();
        assert!(matches!(Model::new(c, 0), Err(ModelError::Config(_))));
        let c = ModelConfig {
            rates: vec![8, 4],
            ..ModelConfig::default()
        };
        assert!(matches!(Model::new(c, 0), Err(ModelError::Rate(_))));
        let c = ModelConfig {
            rho: 0.0,
            ..ModelConfig::default()
        };
        assert!(Model::new(c, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = Model::new(ModelConfig::default(), 7).unwrap();
        m.save(&p, 2).unwrap();
        let (back, stage) = Model::load(&p).unwrap();
        assert_eq!(stage, 2);
        assert_eq!(back.store.checksum(&back.all_params()), m.store.checksum(&m.all_params()));
        assert_ne!(Model::new(ModelConfig::default(), 8).unwrap().store, m.store);
    }

    #[test]
    fn load_rejects_mismatched_params() {
        let mut m = Model::new(ModelConfig::default(), 1).unwrap();
        let small = Model::new(
            ModelConfig {
                widths: vec![4, 8],
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        assert!(m.load_values(&small.store).is_err());
        assert!(matches!(Model::load("/nonexistent.json"), Err(ModelError::Checkpoint { .. })));
    }
}
