//! Inference over patches and biopsy cores.
//!
//! Core-level scoring follows the weak-label protocol: every qualifying
//! needle patch is classified, and the core probability is the mean of
//! the hard patch classes, not of the soft probabilities. A core whose
//! extraction yields no qualifying patch becomes an explicit empty
//! outcome so callers can exclude it from metrics and log it.

use serde::{Deserialize, Serialize};

use crate::data::{extract_patches, BiopsyCore, ExtractConfig, PatchRecord, PatchRegion};
use crate::error::{Error, Result};
use crate::nn::loss::softmax_rows;
use crate::nn::{BnMode, Model, Tape, Tensor};
use crate::signal::Patch;

/// Batch size for forward passes during evaluation.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorePrediction {
    pub core_id: String,
    /// Softmax cancer probability per qualifying patch.
    pub patch_probabilities: Vec<f64>,
    /// Hard class per patch: 1 iff probability >= threshold.
    pub patch_classes: Vec<u8>,
    /// Mean of the hard patch classes.
    pub core_probability: f64,
    pub true_label: u8,
    pub involvement_percent: f64,
}

/// Result of scoring one core; cores without qualifying patches are
/// reported rather than silently dropped.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreOutcome {
    Scored(CorePrediction),
    Empty { core_id: String },
}

impl CoreOutcome {
    pub fn scored(self) -> Option<CorePrediction> {
        match self {
            CoreOutcome::Scored(pred) => Some(pred),
            CoreOutcome::Empty { .. } => None,
        }
    }
}

/// Fraction of patches predicted cancer, the model-side counterpart of
/// pathologist involvement. Equal to the core probability by
/// construction.
pub fn predicted_involvement(pred: &CorePrediction) -> Result<f64> {
    if pred.patch_classes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "core {} has no patches to derive involvement from",
            pred.core_id
        )));
    }
    Ok(pred.core_probability)
}

/// Stack patches into an `[n, 1, s, s]` tensor for the backbone.
pub fn patches_to_tensor(patches: &[&Patch]) -> Result<Tensor> {
    let first = patches
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty patch batch".into()))?;
    let s = first.height();
    if first.width() != s {
        return Err(Error::Shape(format!(
            "patches must be square, got {}x{}",
            first.height(),
            first.width()
        )));
    }
    let mut data = Vec::with_capacity(patches.len() * s * s);
    for patch in patches {
        if patch.height() != s || patch.width() != s {
            return Err(Error::Shape(format!(
                "patch batch mixes sizes: {}x{} next to {}x{}",
                patch.height(),
                patch.width(),
                s,
                s
            )));
        }
        data.extend_from_slice(patch.data());
    }
    Tensor::new(vec![patches.len(), 1, s, s], data)
}

fn forward_probabilities(model: &mut Model, batch: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, &|_| false);
    let embed = model.backbone_forward(&mut tape, &binding, batch, BnMode::Eval)?;
    let logits = model.head_forward(&mut tape, &binding, embed)?;
    let probs = softmax_rows(tape.value(logits))?;
    let n = probs.shape()[0];
    Ok((0..n).map(|i| probs.data()[i * 2 + 1]).collect())
}

/// Cancer probability for each patch, batched, with batch-norm in
/// running-statistics mode so results are independent of batch
/// composition.
pub fn predict_patch_probabilities(model: &mut Model, patches: &[&Patch]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(EVAL_BATCH) {
        let batch = patches_to_tensor(chunk)?;
        out.extend(forward_probabilities(model, &batch)?);
    }
    Ok(out)
}

fn prediction_from_probabilities(
    core_id: &str,
    probabilities: Vec<f64>,
    threshold: f64,
    true_label: u8,
    involvement_percent: f64,
) -> CorePrediction {
    let patch_classes: Vec<u8> = probabilities
        .iter()
        .map(|&p| u8::from(p >= threshold))
        .collect();
    let core_probability =
        patch_classes.iter().map(|&c| c as f64).sum::<f64>() / patch_classes.len() as f64;
    CorePrediction {
        core_id: core_id.to_string(),
        patch_probabilities: probabilities,
        patch_classes,
        core_probability,
        true_label,
        involvement_percent,
    }
}

/// Extract the needle-region patches of one core and score it.
pub fn predict_core(
    model: &mut Model,
    core: &BiopsyCore,
    extract: &ExtractConfig,
    threshold: f64,
) -> Result<CoreOutcome> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "decision threshold {threshold} outside [0, 1]"
        )));
    }
    let records = extract_patches(core, PatchRegion::Needle, extract)?;
    if records.is_empty() {
        return Ok(CoreOutcome::Empty {
            core_id: core.meta.core_id.clone(),
        });
    }
    let patches: Vec<&Patch> = records.iter().map(|r| &r.patch).collect();
    let probabilities = predict_patch_probabilities(model, &patches)?;
    Ok(CoreOutcome::Scored(prediction_from_probabilities(
        &core.meta.core_id,
        probabilities,
        threshold,
        core.meta.label,
        core.meta.involvement,
    )))
}

/// Score cores from already-extracted needle records, grouped by core
/// id in first-appearance order. Records must carry weak labels.
pub fn predict_record_cores(
    model: &mut Model,
    records: &[PatchRecord],
    involvement_of: &dyn Fn(&str) -> Option<f64>,
    threshold: f64,
) -> Result<Vec<CorePrediction>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "decision threshold {threshold} outside [0, 1]"
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::HashMap<String, Vec<&PatchRecord>> =
        std::collections::HashMap::new();
    for record in records {
        let entry = grouped.entry(record.core_id.clone()).or_default();
        if entry.is_empty() {
            order.push(record.core_id.clone());
        }
        entry.push(record);
    }
    let mut out = Vec::with_capacity(order.len());
    for core_id in order {
        let members = &grouped[&core_id];
        let label = members[0].weak_label.ok_or_else(|| {
            Error::InvalidArgument(format!("core {core_id} has unlabeled patches"))
        })?;
        let involvement = involvement_of(&core_id).ok_or_else(|| {
            Error::InvalidArgument(format!("no involvement known for core {core_id}"))
        })?;
        let patches: Vec<&Patch> = members.iter().map(|r| &r.patch).collect();
        let probabilities = predict_patch_probabilities(model, &patches)?;
        out.push(prediction_from_probabilities(
            &core_id,
            probabilities,
            threshold,
            label,
            involvement,
        ));
    }
    Ok(out)
}

/// Backbone embeddings for a set of patches, returned one row per
/// patch, batch-norm in running-statistics mode.
pub fn embed_patches(model: &mut Model, patches: &[&Patch]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(EVAL_BATCH) {
        let batch = patches_to_tensor(chunk)?;
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, &|_| false);
        let embed = model.backbone_forward(&mut tape, &binding, &batch, BnMode::Eval)?;
        let value = tape.value(embed);
        let dim = value.shape()[1];
        for i in 0..value.shape()[0] {
            out.push(value.data()[i * dim..(i + 1) * dim].to_vec());
        }
    }
    Ok(out)
}

/// Projector outputs for a set of patches, one row per patch,
/// batch-norm in running-statistics mode. This is the representation
/// the variance hinge regulates, so collapse is diagnosed here.
pub fn project_patches(model: &mut Model, patches: &[&Patch]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(EVAL_BATCH) {
        let batch = patches_to_tensor(chunk)?;
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, &|_| false);
        let embed = model.backbone_forward(&mut tape, &binding, &batch, BnMode::Eval)?;
        let proj = model.projector_forward(&mut tape, &binding, embed, BnMode::Eval)?;
        let value = tape.value(proj);
        let dim = value.shape()[1];
        for i in 0..value.shape()[0] {
            out.push(value.data()[i * dim..(i + 1) * dim].to_vec());
        }
    }
    Ok(out)
}

/// Per-dimension standard deviation of an embedding set (population
/// variant), the collapse diagnostic: healthy variance-regularized
/// training keeps these well away from zero.
pub fn embedding_column_stds(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidArgument("no embeddings".into()))?;
    let dim = first.len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Shape("embedding rows differ in length".into()));
    }
    let n = embeddings.len() as f64;
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        let mean = embeddings.iter().map(|e| e[j]).sum::<f64>() / n;
        let var = embeddings.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / n;
        out.push(var.sqrt());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom_core, CoreMeta};
    use crate::nn::ArchDescriptor;
    use crate::train::testutil::small_phantom_config;

    fn tiny_model(seed: u64) -> Model {
        Model::new(ArchDescriptor::tiny(), seed).unwrap()
    }

    fn tiny_extract() -> ExtractConfig {
        ExtractConfig {
            patch_mm: 5.0,
            stride_mm: 5.0,
            out_size: 32,
            ..ExtractConfig::default()
        }
    }

    #[test]
    fn core_probability_is_mean_of_classes() {
        let pred = prediction_from_probabilities("c", vec![0.9, 0.8, 0.2, 0.1], 0.5, 1, 70.0);
        assert_eq!(pred.patch_classes, vec![1, 1, 0, 0]);
        assert_eq!(pred.core_probability, 0.5);
        assert_eq!(predicted_involvement(&pred).unwrap(), 0.5);

        let pred = prediction_from_probabilities("c", vec![0.1; 4], 0.5, 0, 0.0);
        assert_eq!(pred.core_probability, 0.0);

        let probs: Vec<f64> = (0..10).map(|i| if i < 7 { 0.6 } else { 0.4 }).collect();
        let pred = prediction_from_probabilities("c", probs, 0.5, 1, 90.0);
        assert!((pred.core_probability - 0.7).abs() < 1e-12);
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let pred = prediction_from_probabilities("c", vec![0.5, 0.4999], 0.5, 1, 50.0);
        assert_eq!(pred.patch_classes, vec![1, 0]);
    }

    #[test]
    fn predict_core_scores_phantom_core() {
        let cfg = small_phantom_config();
        let core = generate_phantom_core("p0-c0", "p0", 1, &cfg, 5).unwrap();
        let mut model = tiny_model(9);
        let outcome = predict_core(&mut model, &core, &tiny_extract(), 0.5).unwrap();
        let pred = outcome.scored().expect("phantom core has needle patches");
        assert_eq!(pred.core_id, "p0-c0");
        assert_eq!(pred.true_label, 1);
        assert_eq!(pred.involvement_percent, 100.0);
        assert!(!pred.patch_probabilities.is_empty());
        assert!(pred
            .patch_probabilities
            .iter()
            .all(|p| (0.0..=1.0).contains(p)));
        assert!((0.0..=1.0).contains(&pred.core_probability));

        // Same patches through the grouped-record path give identical
        // probabilities: the eval path must not depend on grouping.
        let records = extract_patches(&core, PatchRegion::Needle, &tiny_extract()).unwrap();
        let meta = core.meta.clone();
        let via_records = predict_record_cores(
            &mut model,
            &records,
            &|id| (id == meta.core_id).then_some(meta.involvement),
            0.5,
        )
        .unwrap();
        assert_eq!(via_records.len(), 1);
        assert_eq!(via_records[0], pred);
    }

    #[test]
    fn oversized_window_yields_empty_outcome() {
        let cfg = small_phantom_config();
        let core = generate_phantom_core("p0-c0", "p0", 0, &cfg, 3).unwrap();
        let mut model = tiny_model(9);
        let extract = ExtractConfig {
            patch_mm: 500.0,
            stride_mm: 500.0,
            out_size: 32,
            ..ExtractConfig::default()
        };
        let outcome = predict_core(&mut model, &core, &extract, 0.5).unwrap();
        assert_eq!(
            outcome,
            CoreOutcome::Empty {
                core_id: "p0-c0".into()
            }
        );
    }

    #[test]
    fn batching_does_not_change_probabilities() {
        let cfg = small_phantom_config();
        let core = generate_phantom_core("p0-c0", "p0", 1, &cfg, 11).unwrap();
        let records = extract_patches(&core, PatchRegion::Prostate, &tiny_extract()).unwrap();
        assert!(records.len() > 3);
        let patches: Vec<&Patch> = records.iter().map(|r| &r.patch).collect();
        let mut model = tiny_model(4);
        let all = predict_patch_probabilities(&mut model, &patches).unwrap();
        let mut one_by_one = Vec::new();
        for p in &patches {
            one_by_one.extend(predict_patch_probabilities(&mut model, &[p]).unwrap());
        }
        for (a, b) in all.iter().zip(&one_by_one) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn embeddings_shape_and_stds() {
        let cfg = small_phantom_config();
        let core = generate_phantom_core("p0-c0", "p0", 0, &cfg, 2).unwrap();
        let records = extract_patches(&core, PatchRegion::Prostate, &tiny_extract()).unwrap();
        let patches: Vec<&Patch> = records.iter().map(|r| &r.patch).collect();
        let mut model = tiny_model(1);
        let embeddings = embed_patches(&mut model, &patches).unwrap();
        assert_eq!(embeddings.len(), patches.len());
        assert!(embeddings.iter().all(|e| e.len() == 32));
        let stds = embedding_column_stds(&embeddings).unwrap();
        assert_eq!(stds.len(), 32);
        assert!(stds.iter().all(|s| s.is_finite() && *s >= 0.0));

        // Constant embeddings have zero std in every column.
        let constant = vec![vec![1.0, -2.0]; 5];
        let stds = embedding_column_stds(&constant).unwrap();
        assert_eq!(stds, vec![0.0, 0.0]);
    }

    #[test]
    fn unlabeled_records_are_rejected() {
        let cfg = small_phantom_config();
        let core = generate_phantom_core("p0-c0", "p0", 0, &cfg, 2).unwrap();
        let records = extract_patches(&core, PatchRegion::Prostate, &tiny_extract()).unwrap();
        let mut model = tiny_model(1);
        let err = predict_record_cores(&mut model, &records, &|_| Some(0.0), 0.5);
        assert!(err.is_err());
    }

    #[test]
    fn meta_validation_still_guards_labels() {
        // Sanity that CoreMeta invariants hold for the values used here.
        let meta = CoreMeta {
            patient_id: "p".into(),
            core_id: "c".into(),
            label: 1,
            involvement: 55.0,
            gleason: Some(7),
        };
        assert!(meta.validate().is_ok());
    }
}
