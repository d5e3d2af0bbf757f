//! Self-supervised pretraining loop.
//!
//! One loop drives all three objectives. Every epoch reshuffles the
//! patch order from its own seeded substream, every patch gets two
//! independently sampled augmentation plans keyed by dataset index, and
//! both views share the backbone and projector weights on one tape.
//! The classification head is untouched: pretraining optimizes only
//! backbone and projector parameters.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::schedule::LrSchedule;
use crate::nn::optim::Optimizer;
use crate::nn::{BnMode, Model, Tape};
use crate::rng;
use crate::signal::{apply_augmentations, sample_augmentation, AugmentationConfig, Patch};
use crate::ssl::{byol_step, nt_xent_node, vicreg_node, Predictor, VicregWeights};

use super::predict::patches_to_tensor;

/// Which self-supervised objective drives pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Vicreg,
    Simclr,
    Byol,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Vicreg => "vicreg",
            LossKind::Simclr => "simclr",
            LossKind::Byol => "byol",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer kind: "adam" or "novograd".
    pub optimizer: String,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    pub vicreg: VicregWeights,
    /// Softmax temperature for the contrastive objective.
    pub temperature: f64,
    /// Per-step target decay for the momentum objective.
    pub byol_ema_decay: f64,
    /// Hidden width of the momentum objective's predictor MLP.
    pub byol_predictor_hidden: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Vicreg,
            epochs: 200,
            batch_size: 64,
            optimizer: "adam".into(),
            weight_decay: 1e-6,
            schedule: LrSchedule::default(),
            seed: 0,
            augmentation: AugmentationConfig::default(),
            vicreg: VicregWeights::default(),
            temperature: crate::ssl::simclr::DEFAULT_TEMPERATURE,
            byol_ema_decay: 0.99,
            byol_predictor_hidden: 512,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 (variance and contrastive terms need pairs), got {}",
                self.batch_size
            )));
        }
        self.schedule.validate()?;
        self.augmentation.validate()?;
        self.vicreg.validate()?;
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be finite and positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.byol_ema_decay) {
            return Err(Error::Config(format!(
                "byol_ema_decay must be in [0, 1), got {}",
                self.byol_ema_decay
            )));
        }
        if self.byol_predictor_hidden == 0 {
            return Err(Error::Config(
                "byol_predictor_hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters the pretraining optimizer may move.
fn pretrain_trainable(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("projector.")
}

/// Build the two augmented views of one mini-batch. The augmentation
/// stream is keyed by epoch, view, and dataset index, so view pairs are
/// independent and reproducible regardless of batch boundaries.
fn augmented_views(
    patches: &[&Patch],
    batch_indices: &[usize],
    cfg: &PretrainConfig,
    epoch: usize,
) -> Result<(Vec<Patch>, Vec<Patch>)> {
    let mut views = [Vec::new(), Vec::new()];
    for (view, out) in views.iter_mut().enumerate() {
        let label = format!("aug:{epoch}:{view}");
        out.reserve(batch_indices.len());
        for &idx in batch_indices {
            let mut rand = rng::substream_indexed(cfg.seed, &label, idx as u64);
            let plan = sample_augmentation(&cfg.augmentation, &mut rand)?;
            out.push(apply_augmentations(patches[idx], &plan, &cfg.augmentation)?);
        }
    }
    let [a, b] = views;
    Ok((a, b))
}

/// Run self-supervised pretraining over unlabeled patches, mutating the
/// model in place. Returns the per-epoch mean loss curve; a non-finite
/// loss aborts with a diagnostic naming the epoch and batch.
pub fn pretrain(model: &mut Model, patches: &[&Patch], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if patches.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pretraining needs at least 2 patches, got {}",
            patches.len()
        )));
    }

    let mut optimizer = Optimizer::new(&cfg.optimizer, model.params(), cfg.weight_decay)?;
    // Auxiliary state for the momentum objective only.
    let mut byol_state = if cfg.loss == LossKind::Byol {
        let target = model.clone();
        let predictor = Predictor::new(
            model.arch().projector_out,
            cfg.byol_predictor_hidden,
            cfg.seed,
        )?;
        let predictor_opt = Optimizer::new(&cfg.optimizer, predictor.params(), cfg.weight_decay)?;
        Some((target, predictor, predictor_opt))
    } else {
        None
    };

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..patches.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng::substream_indexed(cfg.seed, "shuffle", epoch as u64);
        indices.shuffle(&mut shuffle_rng);
        let lr = cfg.schedule.lr_at_epoch(epoch);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (view_a, view_b) = augmented_views(patches, chunk, cfg, epoch)?;
            let tensor_a = patches_to_tensor(&view_a.iter().collect::<Vec<_>>())?;
            let tensor_b = patches_to_tensor(&view_b.iter().collect::<Vec<_>>())?;

            let loss = match (&cfg.loss, &mut byol_state) {
                (LossKind::Byol, Some((target, predictor, predictor_opt))) => byol_step(
                    model,
                    target,
                    predictor,
                    &mut optimizer,
                    predictor_opt,
                    &tensor_a,
                    &tensor_b,
                    lr,
                    cfg.byol_ema_decay,
                )?,
                _ => {
                    let mut tape = Tape::new();
                    let binding = model.bind(&mut tape, &pretrain_trainable);
                    let embed_a =
                        model.backbone_forward(&mut tape, &binding, &tensor_a, BnMode::Train)?;
                    let proj_a =
                        model.projector_forward(&mut tape, &binding, embed_a, BnMode::Train)?;
                    let embed_b =
                        model.backbone_forward(&mut tape, &binding, &tensor_b, BnMode::Train)?;
                    let proj_b =
                        model.projector_forward(&mut tape, &binding, embed_b, BnMode::Train)?;
                    let loss_node = match cfg.loss {
                        LossKind::Vicreg => {
                            vicreg_node(&mut tape, proj_a, proj_b, cfg.vicreg.clone())?
                        }
                        LossKind::Simclr => {
                            nt_xent_node(&mut tape, proj_a, proj_b, cfg.temperature)?
                        }
                        LossKind::Byol => unreachable!("matched above"),
                    };
                    let loss = tape.value(loss_node).scalar_value()?;
                    if !loss.is_finite() {
                        return Err(Error::Divergence(format!(
                            "{} loss became non-finite at epoch {epoch}, batch {batches}",
                            cfg.loss.name()
                        )));
                    }
                    tape.backward(loss_node)?;
                    let grads = model.grads(&tape, &binding);
                    optimizer.step(model.params_mut(), &grads, lr)?;
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "{} loss became non-finite at epoch {epoch}, batch {batches}",
                    cfg.loss.name()
                )));
            }
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::InvalidArgument(
                "no usable mini-batches (all chunks smaller than 2)".into(),
            ));
        }
        curve.push(loss_sum / batches as f64);
    }
    Ok(curve)
}
