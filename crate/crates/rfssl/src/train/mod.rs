//! Training pipelines and evaluation.
//!
//! The submodules cover the supervised end of the toolkit: metrics over
//! weak core labels, batched inference, self-supervised pretraining,
//! finetuning, heatmap rendering, and the multi-arm experiment driver.

pub mod experiment;
pub mod finetune;
pub mod heatmap;
pub mod metrics;
pub mod predict;
pub mod pretrain;

pub use metrics::{
    average_precision, balanced_accuracy, compute_core_metrics, compute_patch_metrics,
    involvement_filter, metrics_from_scores, rank_auroc, MetricLevel, MetricReport,
    DEFAULT_DECISION_THRESHOLD, DEFAULT_MIN_INVOLVEMENT,
};
pub use predict::{
    embed_patches, embedding_column_stds, patches_to_tensor, predict_core,
    predict_patch_probabilities, predict_record_cores, predicted_involvement, project_patches,
    CoreOutcome, CorePrediction, EVAL_BATCH,
};
pub use experiment::{
    run_experiment, AggregateMetrics, ArmConfig, ArmKind, ArmReport, ExperimentConfig,
    ExperimentReport, MeanStd, RepeatReport, REPORT_SCHEMA_VERSION,
};
pub use finetune::{finetune, EpochRecord, FinetuneConfig, FinetuneMode, FinetuneOutcome};
pub use heatmap::{render_heatmap, HeatmapConfig, Image, RenderedHeatmap};
pub use pretrain::{pretrain, LossKind, PretrainConfig};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::data::PhantomConfig;

    /// Desk-geometry phantom at reduced resolution: same millimetre
    /// extents and masks as the default, roughly 16x fewer pixels, so
    /// unit tests stay fast while patch geometry maps the same way.
    pub fn small_phantom_config() -> PhantomConfig {
        PhantomConfig {
            axial_samples: 128,
            lateral_lines: 48,
            ..PhantomConfig::default()
        }
    }
}
