//! Supervised finetuning on weak core labels.
//!
//! Three modes share one loop. Linear probing freezes the backbone and
//! projector entirely: patch embeddings are computed once in evaluation
//! mode and only the classification head trains on them, so backbone
//! bytes provably never change. The other two modes backpropagate
//! through the backbone as well; the projector stays out of the loss
//! path either way. Every epoch records training loss and validation
//! AUROC, and the returned model is the checkpoint from the best
//! validation epoch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss::{cross_entropy_node, softmax_rows};
use crate::nn::optim::Optimizer;
use crate::nn::schedule::LrSchedule;
use crate::nn::{BnMode, Model, Tape, Tensor};
use crate::rng;
use crate::signal::Patch;

use super::metrics::rank_auroc;
use super::predict::{embed_patches, patches_to_tensor, predict_patch_probabilities};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Head only, on embeddings cached from the frozen backbone.
    Linear,
    /// Backbone and head, starting from pretrained weights.
    Semisup,
    /// Backbone and head, starting from random initialization.
    Supervised,
}

impl FinetuneMode {
    pub fn name(&self) -> &'static str {
        match self {
            FinetuneMode::Linear => "linear",
            FinetuneMode::Semisup => "semisup",
            FinetuneMode::Supervised => "supervised",
        }
    }

    fn trains_backbone(&self) -> bool {
        !matches!(self, FinetuneMode::Linear)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer kind: "adam" or "novograd".
    pub optimizer: String,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Decision threshold carried into downstream core scoring.
    pub threshold: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Linear,
            epochs: 50,
            batch_size: 64,
            optimizer: "novograd".into(),
            weight_decay: 1e-6,
            schedule: LrSchedule {
                base_lr: 1e-3,
                warmup_epochs: 5,
                total_epochs: 50,
            },
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// One epoch of the finetuning record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub curve: Vec<EpochRecord>,
    /// Epoch whose checkpoint the model was restored to (first maximum
    /// of validation AUROC).
    pub best_epoch: usize,
}

fn check_labels(patches: usize, labels: &[u8], split: &str) -> Result<()> {
    if patches == 0 {
        return Err(Error::InvalidArgument(format!("{split} set is empty")));
    }
    if patches != labels.len() {
        return Err(Error::Shape(format!(
            "{split} set has {patches} patches but {} labels",
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument(format!(
            "{split} labels must be 0 or 1"
        )));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::InvalidArgument(format!(
            "{split} set must contain both classes"
        )));
    }
    Ok(())
}

fn auroc_from_probabilities(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    let positives: Vec<f64> = probabilities
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&p, _)| p)
        .collect();
    let negatives: Vec<f64> = probabilities
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&p, _)| p)
        .collect();
    rank_auroc(&positives, &negatives)
}

fn embeddings_to_tensor(rows: &[&Vec<f64>]) -> Result<Tensor> {
    let dim = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * dim);
    for row in rows {
        data.extend_from_slice(row);
    }
    Tensor::new(vec![rows.len(), dim], data)
}

/// Cancer probabilities from the head alone over cached embeddings.
fn head_probabilities(model: &mut Model, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let refs: Vec<&Vec<f64>> = embeddings.iter().collect();
    let tensor = embeddings_to_tensor(&refs)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, &|_| false);
    let embed = tape.leaf(tensor, false);
    let logits = model.head_forward(&mut tape, &binding, embed)?;
    let probs = softmax_rows(tape.value(logits))?;
    Ok((0..probs.shape()[0]).map(|i| probs.data()[i * 2 + 1]).collect())
}

/// Finetune the model on labeled train patches, tracking validation
/// AUROC per epoch, and restore the best-validation checkpoint before
/// returning.
pub fn finetune(
    model: &mut Model,
    train_patches: &[&Patch],
    train_labels: &[u8],
    val_patches: &[&Patch],
    val_labels: &[u8],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_labels(train_patches.len(), train_labels, "train")?;
    check_labels(val_patches.len(), val_labels, "validation")?;

    // Linear mode never touches the backbone, so both splits can be
    // embedded once, up front.
    let cached = if cfg.mode.trains_backbone() {
        None
    } else {
        Some((
            embed_patches(model, train_patches)?,
            embed_patches(model, val_patches)?,
        ))
    };

    let trainable: Box<dyn Fn(&str) -> bool> = if cfg.mode.trains_backbone() {
        Box::new(|name: &str| name.starts_with("backbone.") || name.starts_with("head."))
    } else {
        Box::new(|name: &str| name.starts_with("head."))
    };

    let mut optimizer = Optimizer::new(&cfg.optimizer, model.params(), cfg.weight_decay)?;
    let mut indices: Vec<usize> = (0..train_patches.len()).collect();
    let mut curve: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng::substream_indexed(cfg.seed, "shuffle", epoch as u64);
        indices.shuffle(&mut shuffle_rng);
        let lr = cfg.schedule.lr_at_epoch(epoch);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i] as usize).collect();
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, &trainable);
            let logits = if let Some((train_emb, _)) = &cached {
                let rows: Vec<&Vec<f64>> = chunk.iter().map(|&i| &train_emb[i]).collect();
                let embed = tape.leaf(embeddings_to_tensor(&rows)?, false);
                model.head_forward(&mut tape, &binding, embed)?
            } else {
                let patches: Vec<&Patch> = chunk.iter().map(|&i| train_patches[i]).collect();
                let batch = patches_to_tensor(&patches)?;
                let embed = model.backbone_forward(&mut tape, &binding, &batch, BnMode::Train)?;
                model.head_forward(&mut tape, &binding, embed)?
            };
            let loss_node = cross_entropy_node(&mut tape, logits, &labels)?;
            let loss = tape.value(loss_node).scalar_value()?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "cross entropy became non-finite at epoch {epoch}, batch {batches}"
                )));
            }
            tape.backward(loss_node)?;
            let grads = model.grads(&tape, &binding);
            optimizer.step(model.params_mut(), &grads, lr)?;
            loss_sum += loss;
            batches += 1;
        }

        let val_probs = if let Some((_, val_emb)) = &cached {
            head_probabilities(model, val_emb)?
        } else {
            predict_patch_probabilities(model, val_patches)?
        };
        let val_auroc = auroc_from_probabilities(&val_probs, val_labels)?;
        curve.push(EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            val_auroc,
        });
        // Strict improvement only, so the first maximum is kept.
        if best.as_ref().map_or(true, |(_, b, _)| val_auroc > *b) {
            best = Some((epoch, val_auroc, model.clone()));
        }
    }

    let (best_epoch, _, best_model) = best.expect("at least one epoch ran");
    *model = best_model;
    Ok(FinetuneOutcome { curve, best_epoch })
}
