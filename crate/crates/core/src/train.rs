//! Rate-distortion training in three stages.
//!
//! 1. Everything except the rate tokens and FC banks, with the semantic
//!    features sent at full dimension.
//! 2. Rate tokens and FC banks only; every other parameter stays bit-identical.
//! 3. All parameters, with polynomial learning-rate decay.
//!
//! Every batch draws one SNR from the configured set. The received image is
//! produced by the real image stream (codec, LDPC, QPSK, channel) at that SNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Var};
use crate::channel::{ChannelConfig, ChannelKind};
use crate::codec::{self, Quality};
use crate::data::{augment, Augment};
use crate::fec::{self, ParityCheckMatrix};
use crate::image::Image;
use crate::model::Model;
use crate::pipeline::{self, LinkOptions, PipelineError, SemanticInputs};
use crate::rate::QuantMode;
use crate::tensor::Tensor;

pub const POLY_POWER: f64 = 0.9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage {requested} needs a model finished with stage {expected}, found stage {found}")]
    StageOrder { requested: u8, expected: u8, found: u8 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyData,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        Self::Pipeline(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers for a subset of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: Adam,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(cfg: Adam, store: &ParamStore, ids: &[ParamId]) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.value(*id).shape());
        Self {
            cfg,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
        }
    }

    /// One bias-corrected update of `ids` (same order as at construction).
    pub fn update(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, id) in ids.iter().enumerate() {
            let Some(g) = &grads[id.index()] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let value = store.value_mut(*id);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                value.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// `lr0 (1 - t / total)^0.9`.
pub fn poly_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - (t.min(total) as f64 / total as f64)).powf(POLY_POWER)
}

/// Feature extractor for an optional perceptual term.
pub trait PerceptualHook {
    fn features(&self, g: &mut Graph, x: Var) -> Result<Var, AutodiffError>;
}

/// Mean squared error on the 0..255 scale between `[0, 1]` images.
pub fn mse_255(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var, AutodiffError> {
    let d = g.sub(x_hat, x)?;
    let d = g.mul_scalar(d, 255.0);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `MSE + lambda1 * bits`, plus `lambda2` times the feature MSE when a hook
/// is registered.
pub fn rd_loss(
    g: &mut Graph,
    x: Var,
    x_hat: Var,
    bits: Var,
    lambda1: f64,
    perceptual: Option<(&dyn PerceptualHook, f64)>,
) -> Result<Var, AutodiffError> {
    let d = mse_255(g, x, x_hat)?;
    let r = g.mul_scalar(bits, lambda1);
    let mut loss = g.add(d, r)?;
    if let Some((hook, lambda2)) = perceptual {
        let fx = hook.features(g, x)?;
        let fy = hook.features(g, x_hat)?;
        let diff = g.sub(fy, fx)?;
        let sq = g.square(diff);
        let p = g.mean(sq);
        let p = g.mul_scalar(p, lambda2);
        loss = g.add(loss, p)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub snr_db: Vec<f64>,
    pub quality: u32,
    pub code: String,
    pub channel: ChannelKind,
    pub augment: Augment,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            lambda1: 0.1,
            lambda2: 0.1,
            snr_db: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            quality: 50,
            code: "desk".into(),
            channel: ChannelKind::Awgn,
            augment: Augment {
                hflip: true,
                vflip: true,
                crop: None,
            },
            max_iter: fec::DEFAULT_MAX_ITER,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(1..=3).contains(&self.stage) {
            return bad("stage must be 1, 2 or 3");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.snr_db.is_empty() {
            return bad("snr_db must list at least one value");
        }
        Quality::new(self.quality).map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub snr_db: f64,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: u8,
    pub log: Vec<StepLog>,
    /// Checksum of the frozen parameters before and after stage 2.
    pub frozen_checksum: Option<(u64, u64)>,
}

impl TrainReport {
    /// `1 - mean(last w) / mean(first w)` of the batch loss.
    pub fn loss_reduction(&self, w: usize) -> f64 {
        let n = self.log.len();
        let w = w.min(n / 2).max(1);
        let mean = |s: &[StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
        1.0 - mean(&self.log[n - w..]) / mean(&self.log[..w])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,snr_db,lr,loss,mse,bits\n");
        for l in &self.log {
            s.push_str(&format!("{},{},{},{},{},{}\n", l.step, l.snr_db, l.lr, l.loss, l.mse, l.bits));
        }
        s
    }
}

/// Parameters updated by a stage.
pub fn trainable(model: &Model, stage: u8) -> Vec<ParamId> {
    match stage {
        1 => model.backbone_params(),
        2 => model.ra_params(),
        _ => model.all_params(),
    }
}

/// Runs one stage. `finished` is the last stage already applied to `model`
/// (0 for a fresh model); stages must run in order.
pub fn train_stage(
    model: &mut Model,
    finished: u8,
    images: &[Image],
    cfg: &TrainConfig,
    perceptual: Option<&dyn PerceptualHook>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if cfg.stage != finished + 1 {
        return Err(TrainError::StageOrder {
            requested: cfg.stage,
            expected: cfg.stage - 1,
            found: finished,
        });
    }
    if images.is_empty() {
        return Err(TrainError::EmptyData);
    }
    for img in images {
        pipeline::check_dims(model, img)?;
    }
    let code = fec::load_code(&cfg.code).map_err(PipelineError::from)?;
    let quality = Quality::new(cfg.quality).map_err(PipelineError::from)?;
    let ids = trainable(model, cfg.stage);
    let frozen: Vec<ParamId> = (cfg.stage == 2).then(|| model.backbone_params()).unwrap_or_default();
    let before = model.store.checksum(&frozen);
    let mut adam = AdamState::new(Adam::default(), &model.store, &ids);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let snr = cfg.snr_db[rng.random_range(0..cfg.snr_db.len())];
        let lr = if cfg.stage == 3 { poly_lr(cfg.lr, step, cfg.steps) } else { cfg.lr };
        let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
        let mut entry = StepLog {
            step,
            snr_db: snr,
            lr,
            ..StepLog::default()
        };
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let img = augment(&images[rng.random_range(0..images.len())], &cfg.augment, &mut rng);
            let sample = sample_loss(model, &img, snr, quality, &code, cfg, perceptual, &mut rng)?;
            entry.loss += sample.loss * scale;
            entry.mse += sample.mse * scale;
            entry.bits += sample.bits * scale;
            for (id, g) in sample.grads {
                let slot = &mut grads[id.index()];
                match slot {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b * scale),
                    None => *slot = Some(g.map(|v| v * scale)),
                }
            }
        }
        adam.update(&mut model.store, &ids, &grads, lr);
        log.push(entry);
    }
    let after = model.store.checksum(&frozen);
    Ok(TrainReport {
        stage: cfg.stage,
        log,
        frozen_checksum: (cfg.stage == 2).then_some((before, after)),
    })
}

struct SampleLoss {
    loss: f64,
    mse: f64,
    bits: f64,
    grads: Vec<(ParamId, Tensor)>,
}

#[allow(clippy::too_many_arguments)]
fn sample_loss(
    model: &Model,
    img: &Image,
    snr: f64,
    quality: Quality,
    code: &ParityCheckMatrix,
    cfg: &TrainConfig,
    perceptual: Option<&dyn PerceptualHook>,
    rng: &mut ChaCha8Rng,
) -> Result<SampleLoss, TrainError> {
    let seed: u64 = rng.random();
    let ch = ChannelConfig::new(cfg.channel, snr, seed);
    let conv = pipeline::conventional_transmit(img, quality, code, &ch, cfg.max_iter)?;
    let x_c = codec::round_trip(img, quality).map_err(PipelineError::from)?.1;
    let inputs = SemanticInputs::new(img, &x_c, &conv.received);
    let opts = LinkOptions {
        quant: QuantMode::Train,
        rate_adapt: cfg.stage >= 2,
        channel: ch.with_stream(1),
    };
    let mut g = Graph::with_params(&model.store);
    let out = pipeline::semantic_forward(&mut g, model, &inputs, &opts, rng)?;
    let x = g.constant(inputs.x.clone());
    let mse = mse_255(&mut g, x, out.x_hat)?;
    let loss = rd_loss(&mut g, x, out.x_hat, out.bits, cfg.lambda1, perceptual.map(|h| (h, cfg.lambda2)))?;
    let (lv, mv, bv) = (g.value(loss).item(), g.value(mse).item(), g.value(out.bits).item());
    g.backward(loss)?;
    Ok(SampleLoss {
        loss: lv,
        mse: mv,
        bits: bv,
        grads: g.into_param_grads(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_params_floor;
    use crate::data::procedural_corpus;
    use crate::model::ModelConfig;
    use crate::rate::RateSet;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            widths: vec![3, 4],
            hyper_hidden: 3,
            rrdb_features: 3,
            rrdb_growth: 2,
            rrdb_blocks: 1,
            snr_embed_dim: 4,
            rates: vec![2, 4, 6, 8],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 100), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100), 0.0);
        assert!((poly_lr(1.0, 50, 100) - 0.5f64.powf(0.9)).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for t in 0..=10 {
            let v = poly_lr(1.0, t, 10);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut st = AdamState::new(Adam::default(), &store, &[id]);
        let g = vec![Some(Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())];
        st.update(&mut store, &[id], &g, 0.1);
        let v = store.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 2, 2], 0.3));
        let zero = g.constant(Tensor::scalar(0.0));
        let l = rd_loss(&mut g, x, x, zero, 0.1, None).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let y = g.constant(Tensor::full(&[1, 3, 2, 2], 0.3 + 2.0 / 255.0));
        let bits = g.constant(Tensor::scalar(17.0));
        let l = rd_loss(&mut g, x, y, bits, 0.0, None).unwrap();
        assert!((g.value(l).item() - 4.0).abs() < 1e-9);
        let l = rd_loss(&mut g, x, y, bits, 0.5, None).unwrap();
        assert!((g.value(l).item() - 12.5).abs() < 1e-9);
    }

    struct Identity;

    impl PerceptualHook for Identity {
        fn features(&self, _g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
            Ok(x)
        }
    }

    #[test]
    fn perceptual_hook_adds_weighted_term() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1], 0.0));
        let y = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let zero = g.constant(Tensor::scalar(0.0));
        let l = rd_loss(&mut g, x, y, zero, 0.1, Some((&Identity, 2.0))).unwrap();
        assert!((g.value(l).item() - (65025.0 + 2.0)).abs() < 1e-9);
    }

    #[test]
    fn rd_loss_gradients_on_toy_model() {
        let model = Model::new(toy_config(), 3).unwrap();
        let imgs = procedural_corpus(2, 8, 1);
        let (_, x_c) = codec::round_trip(&imgs[0], Quality::new(30).unwrap()).unwrap();
        let inputs = SemanticInputs::new(&imgs[0], &x_c, &imgs[1]);
        for rate_adapt in [false, true] {
            let opts = LinkOptions {
                quant: QuantMode::Train,
                rate_adapt,
                channel: ChannelConfig::new(ChannelKind::Awgn, f64::INFINITY, 5),
            };
            let ids = model.all_params();
            // At |L| ~ 5e3 and step 1e-4 the central difference resolves about
            // 2e-16 * |L| / step ~ 1e-8, so gradients below 1e-3 are compared
            // with an absolute tolerance of 1e-7.
            let r = check_params_floor(&model.store, &ids, 1e-4, 3, 1e-3, |g| {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let out = pipeline::semantic_forward(g, &model, &inputs, &opts, &mut rng).map_err(|e| match e {
                    PipelineError::Graph(a) => a,
                    other => panic!("{other}"),
                })?;
                let x = g.constant(inputs.x.clone());
                rd_loss(g, x, out.x_hat, out.bits, 0.1, None)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "rate_adapt {rate_adapt}: {r:?}");
        }
    }

    #[test]
    fn stage_order_is_enforced() {
        let mut model = Model::new(toy_config(), 1).unwrap();
        let imgs = procedural_corpus(2, 8, 2);
        let cfg = TrainConfig {
            stage: 2,
            steps: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_stage(&mut model, 0, &imgs, &cfg, None),
            Err(TrainError::StageOrder { found: 0, .. })
        ));
        let cfg = TrainConfig {
            stage: 1,
            steps: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train_stage(&mut model, 0, &[], &cfg, None), Err(TrainError::EmptyData)));
        let bad = TrainConfig { lr: 0.0, ..cfg };
        assert!(matches!(train_stage(&mut model, 0, &imgs, &bad, None), Err(TrainError::Config(_))));
    }

    #[test]
    fn stage_two_freezes_everything_but_the_banks() {
        let mut model = Model::new(toy_config(), 4).unwrap();
        let imgs = procedural_corpus(4, 8, 3);
        let base = TrainConfig {
            steps: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train_stage(&mut model, 0, &imgs, &TrainConfig { stage: 1, ..base.clone() }, None).unwrap();
        let ra_before = model.store.checksum(&model.ra_params());
        let rep = train_stage(&mut model, 1, &imgs, &TrainConfig { stage: 2, ..base.clone() }, None).unwrap();
        let (a, b) = rep.frozen_checksum.unwrap();
        assert_eq!(a, b);
        assert_ne!(ra_before, model.store.checksum(&model.ra_params()));
        let rep = train_stage(&mut model, 2, &imgs, &TrainConfig { stage: 3, ..base }, None).unwrap();
        assert_eq!(rep.log.len(), 2);
        assert!(rep.log[1].lr < rep.log[0].lr);
        assert!(rep.to_csv().starts_with("step,snr_db,lr,loss,mse,bits\n"));
        assert_eq!(RateSet::new(model.config.rates.clone()).unwrap().len(), 4);
    }
}
