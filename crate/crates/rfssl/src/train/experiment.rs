//! Multi-arm experiment driver: phantom corpus to metrics report.
//!
//! One run generates the corpus once, splits patients, extracts the
//! datasets, then trains and evaluates every configured arm over
//! several seeded repeats. Arms cover self-supervised pretraining with
//! linear probing, with semi-supervised finetuning, and the fully
//! supervised from-scratch baseline. All artifacts (report, curves,
//! scatter data, checkpoints, heatmaps) are deterministic functions of
//! the config, so a rerun into a fresh directory is byte-identical.
//!
//! A repeat that fails (for example through divergence) is recorded in
//! the report with its error message and the run continues; only
//! corpus-level failures abort the whole experiment.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as FmtWrite;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    balance_and_filter, extract_patches, generate_corpus, split_patients, BiopsyCore,
    ExtractConfig, PatchRegion, PhantomConfig, SplitConfig,
};
use crate::error::{Error, Result};
use crate::nn::checkpoint::save_checkpoint;
use crate::nn::{ArchDescriptor, Model};
use crate::rng;
use crate::signal::Patch;

use super::finetune::{finetune, FinetuneConfig, FinetuneMode};
use super::heatmap::{render_heatmap, HeatmapConfig};
use super::metrics::{compute_core_metrics, compute_patch_metrics, MetricReport};
use super::predict::{predict_core, CoreOutcome, CorePrediction};
use super::pretrain::{pretrain, LossKind, PretrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Training protocol of one arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    /// Pretrain, then train only the head on frozen features.
    SslLinear,
    /// Pretrain, then finetune backbone and head.
    SslSemisup,
    /// No pretraining; supervised training from random initialization.
    SlScratch,
}

impl ArmKind {
    pub fn pretrains(&self) -> bool {
        !matches!(self, ArmKind::SlScratch)
    }

    fn finetune_mode(&self) -> FinetuneMode {
        match self {
            ArmKind::SslLinear => FinetuneMode::Linear,
            ArmKind::SslSemisup => FinetuneMode::Semisup,
            ArmKind::SlScratch => FinetuneMode::Supervised,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            ArmKind::SslLinear => "ssl_linear",
            ArmKind::SslSemisup => "ssl_semisup",
            ArmKind::SlScratch => "sl_scratch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub kind: ArmKind,
    /// Pretraining objective; ignored by the from-scratch arm.
    #[serde(default = "default_arm_loss")]
    pub loss: LossKind,
}

fn default_arm_loss() -> LossKind {
    LossKind::Vicreg
}

impl ArmConfig {
    /// Directory and report name of the arm.
    pub fn name(&self) -> String {
        if self.kind.pretrains() {
            format!("{}_{}", self.kind.label(), self.loss.name())
        } else {
            self.kind.label().to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every repeat and stage derives a named substream.
    pub seed: u64,
    pub repeats: usize,
    pub arms: Vec<ArmConfig>,
    pub phantom: PhantomConfig,
    pub n_patients: usize,
    pub split: SplitConfig,
    /// Needle-region extraction, also used to score test cores.
    pub extract: ExtractConfig,
    /// Grid stride for the unlabeled prostate-region pool, in mm.
    pub prostate_stride_mm: f64,
    /// Involvement cutoff for training selection and metrics.
    pub min_involvement: f64,
    /// Class-balance the labeled training cores by subsampling.
    pub balance: bool,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub arch: ArchDescriptor,
    pub heatmap: HeatmapConfig,
    /// How many test cores get a heatmap (first repeat only).
    pub heatmap_cores: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 2,
            arms: vec![
                ArmConfig {
                    kind: ArmKind::SslLinear,
                    loss: LossKind::Vicreg,
                },
                ArmConfig {
                    kind: ArmKind::SlScratch,
                    loss: LossKind::Vicreg,
                },
            ],
            phantom: PhantomConfig::default(),
            n_patients: 6,
            split: SplitConfig::default(),
            extract: ExtractConfig {
                stride_mm: 2.5,
                out_size: 32,
                ..ExtractConfig::default()
            },
            prostate_stride_mm: 2.5,
            min_involvement: 40.0,
            balance: true,
            pretrain: PretrainConfig {
                epochs: 50,
                schedule: crate::nn::schedule::LrSchedule {
                    base_lr: 1e-3,
                    warmup_epochs: 5,
                    total_epochs: 50,
                },
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
            arch: ArchDescriptor::tiny(),
            heatmap: HeatmapConfig::default(),
            heatmap_cores: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("at least one arm is required".into()));
        }
        let mut names = BTreeSet::new();
        for arm in &self.arms {
            if !names.insert(arm.name()) {
                return Err(Error::Config(format!("duplicate arm {}", arm.name())));
            }
        }
        self.phantom.validate()?;
        if self.n_patients < 2 {
            return Err(Error::Config(
                "n_patients must be at least 2 for a patient-disjoint split".into(),
            ));
        }
        self.split.validate()?;
        self.extract.validate()?;
        if self.extract.out_size != self.arch.input_size {
            return Err(Error::Config(format!(
                "extract.out_size {} must equal arch.input_size {}",
                self.extract.out_size, self.arch.input_size
            )));
        }
        if !(self.prostate_stride_mm > 0.0) {
            return Err(Error::Config("prostate_stride_mm must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.min_involvement) {
            return Err(Error::Config(format!(
                "min_involvement must be in [0, 100], got {}",
                self.min_involvement
            )));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.arch.validate()?;
        Ok(())
    }
}

/// Mean and sample standard deviation over successful repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn over(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub successful_repeats: usize,
    pub core_auroc: MeanStd,
    pub core_avg_precision: MeanStd,
    pub core_balanced_accuracy: MeanStd,
    pub patch_auroc: MeanStd,
    pub patch_avg_precision: MeanStd,
    pub patch_balanced_accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub repeat: usize,
    /// Set when the repeat failed; all metric fields are then absent.
    pub error: Option<String>,
    pub core_metrics: Option<MetricReport>,
    pub patch_metrics: Option<MetricReport>,
    pub best_epoch: Option<usize>,
    pub final_pretrain_loss: Option<f64>,
    /// Test cores that produced no qualifying patches.
    pub empty_cores: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub kind: ArmKind,
    /// Present for pretraining arms only.
    pub loss: Option<LossKind>,
    pub repeats: Vec<RepeatReport>,
    /// Absent when every repeat failed.
    pub aggregate: Option<AggregateMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub seed: u64,
    pub repeats: usize,
    pub n_patients: usize,
    pub train_cores: usize,
    pub val_cores: usize,
    pub test_cores: usize,
    pub unlabeled_patches: usize,
    pub labeled_train_patches: usize,
    pub arms: Vec<ArmReport>,
}

/// Everything extracted once and shared by all arms.
struct Datasets {
    /// Unlabeled prostate patches from training patients.
    unlabeled: Vec<Patch>,
    train_patches: Vec<Patch>,
    train_labels: Vec<u8>,
    val_patches: Vec<Patch>,
    val_labels: Vec<u8>,
    /// Whole test cores in corpus order, scored per repeat.
    test_cores: Vec<BiopsyCore>,
    train_core_count: usize,
    val_core_count: usize,
}

fn build_datasets(cfg: &ExperimentConfig, cores: Vec<BiopsyCore>) -> Result<Datasets> {
    let metas: Vec<_> = cores.iter().map(|c| c.meta.clone()).collect();
    let split_seed = rng::substream(cfg.seed, "split").gen::<u64>();
    let manifest = split_patients(&metas, &cfg.split, split_seed)?;

    let train_metas: Vec<_> = metas
        .iter()
        .filter(|m| manifest.split_of(&m.patient_id) == Some("train"))
        .cloned()
        .collect();
    let subsample_seed = rng::substream(cfg.seed, "subsample").gen::<u64>();
    let kept_train: BTreeSet<String> =
        balance_and_filter(&train_metas, cfg.min_involvement, cfg.balance, subsample_seed)
            .into_iter()
            .collect();

    let prostate_extract = ExtractConfig {
        stride_mm: cfg.prostate_stride_mm,
        ..cfg.extract.clone()
    };

    let mut data = Datasets {
        unlabeled: Vec::new(),
        train_patches: Vec::new(),
        train_labels: Vec::new(),
        val_patches: Vec::new(),
        val_labels: Vec::new(),
        test_cores: Vec::new(),
        train_core_count: 0,
        val_core_count: 0,
    };
    for core in cores {
        match manifest.split_of(&core.meta.patient_id) {
            Some("train") => {
                data.train_core_count += 1;
                for record in extract_patches(&core, PatchRegion::Prostate, &prostate_extract)? {
                    data.unlabeled.push(record.patch);
                }
                if kept_train.contains(&core.meta.core_id) {
                    for record in extract_patches(&core, PatchRegion::Needle, &cfg.extract)? {
                        data.train_patches.push(record.patch);
                        data.train_labels.push(core.meta.label);
                    }
                }
            }
            Some("val") => {
                // Involvement filter, no balancing: keep benign cores
                // and cancer cores at or above the cutoff.
                if core.meta.label == 0 || core.meta.involvement >= cfg.min_involvement {
                    data.val_core_count += 1;
                    for record in extract_patches(&core, PatchRegion::Needle, &cfg.extract)? {
                        data.val_patches.push(record.patch);
                        data.val_labels.push(core.meta.label);
                    }
                }
            }
            Some("test") => data.test_cores.push(core),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "patient {} missing from the split manifest",
                    core.meta.patient_id
                )))
            }
        }
    }

    if data.unlabeled.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "only {} unlabeled patches extracted; corpus too small",
            data.unlabeled.len()
        )));
    }
    if data.test_cores.is_empty() {
        return Err(Error::InvalidArgument("no test cores in the split".into()));
    }
    Ok(data)
}

/// Artifacts and metrics of one successful repeat.
struct RepeatSuccess {
    core_metrics: MetricReport,
    patch_metrics: MetricReport,
    best_epoch: usize,
    final_pretrain_loss: Option<f64>,
    empty_cores: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn run_one_repeat(
    cfg: &ExperimentConfig,
    arm: &ArmConfig,
    repeat: usize,
    data: &Datasets,
    run_dir: &Path,
) -> Result<RepeatSuccess> {
    std::fs::create_dir_all(run_dir)?;
    let run_seed = rng::substream_indexed(cfg.seed, &format!("run:{}", arm.name()), repeat as u64)
        .gen::<u64>();
    let mut model = Model::new(cfg.arch.clone(), run_seed)?;

    let final_pretrain_loss = if arm.kind.pretrains() {
        let pre_cfg = PretrainConfig {
            loss: arm.loss,
            seed: rng::substream(run_seed, "pretrain").gen::<u64>(),
            ..cfg.pretrain.clone()
        };
        let refs: Vec<&Patch> = data.unlabeled.iter().collect();
        let curve = pretrain(&mut model, &refs, &pre_cfg)?;
        let mut csv = String::from("epoch,loss\n");
        for (epoch, loss) in curve.iter().enumerate() {
            writeln!(csv, "{epoch},{loss}").expect("string write");
        }
        write_text(&run_dir.join("pretrain_curve.csv"), &csv)?;
        curve.last().copied()
    } else {
        None
    };

    let fine_cfg = FinetuneConfig {
        mode: arm.kind.finetune_mode(),
        seed: rng::substream(run_seed, "finetune").gen::<u64>(),
        ..cfg.finetune.clone()
    };
    let train_refs: Vec<&Patch> = data.train_patches.iter().collect();
    let val_refs: Vec<&Patch> = data.val_patches.iter().collect();
    let outcome = finetune(
        &mut model,
        &train_refs,
        &data.train_labels,
        &val_refs,
        &data.val_labels,
        &fine_cfg,
    )?;
    let mut csv = String::from("epoch,loss,val_auroc\n");
    for record in &outcome.curve {
        writeln!(csv, "{},{},{}", record.epoch, record.loss, record.val_auroc)
            .expect("string write");
    }
    write_text(&run_dir.join("curve.csv"), &csv)?;

    // Score every test core; empty cores are excluded and listed.
    let threshold = cfg.finetune.threshold;
    let mut preds: Vec<CorePrediction> = Vec::new();
    let mut empty_cores = Vec::new();
    for core in &data.test_cores {
        match predict_core(&mut model, core, &cfg.extract, threshold)? {
            CoreOutcome::Scored(pred) => preds.push(pred),
            CoreOutcome::Empty { core_id } => empty_cores.push(core_id),
        }
    }
    let core_metrics = compute_core_metrics(&preds, cfg.min_involvement, threshold)?;
    let patch_metrics = compute_patch_metrics(&preds, cfg.min_involvement, threshold)?;

    // Involvement scatter: both columns as fractions in [0, 1].
    let mut scatter = String::from("core_id,true_involvement,predicted_involvement\n");
    for pred in &preds {
        writeln!(
            scatter,
            "{},{},{}",
            pred.core_id,
            pred.involvement_percent / 100.0,
            pred.core_probability
        )
        .expect("string write");
    }
    write_text(&run_dir.join("scatter.csv"), &scatter)?;

    let mut meta = BTreeMap::new();
    meta.insert("arm".to_string(), arm.name());
    meta.insert("repeat".to_string(), repeat.to_string());
    save_checkpoint(&run_dir.join("model.ckpt"), &model, None, &meta)?;

    if repeat == 0 {
        for core in data.test_cores.iter().take(cfg.heatmap_cores) {
            let rendered = render_heatmap(&mut model, core, &cfg.heatmap)?;
            rendered
                .image
                .write_p6(&run_dir.join(format!("heatmap_{}.ppm", core.meta.core_id)))?;
        }
    }

    Ok(RepeatSuccess {
        core_metrics,
        patch_metrics,
        best_epoch: outcome.best_epoch,
        final_pretrain_loss,
        empty_cores,
    })
}

fn aggregate(repeats: &[RepeatReport]) -> Option<AggregateMetrics> {
    let ok: Vec<&RepeatReport> = repeats.iter().filter(|r| r.error.is_none()).collect();
    if ok.is_empty() {
        return None;
    }
    let pull = |f: &dyn Fn(&MetricReport) -> f64, patch: bool| -> Vec<f64> {
        ok.iter()
            .map(|r| {
                let m = if patch {
                    r.patch_metrics.as_ref()
                } else {
                    r.core_metrics.as_ref()
                };
                f(m.expect("successful repeat has metrics"))
            })
            .collect()
    };
    Some(AggregateMetrics {
        successful_repeats: ok.len(),
        core_auroc: MeanStd::over(&pull(&|m| m.auroc, false)),
        core_avg_precision: MeanStd::over(&pull(&|m| m.avg_precision, false)),
        core_balanced_accuracy: MeanStd::over(&pull(&|m| m.balanced_accuracy, false)),
        patch_auroc: MeanStd::over(&pull(&|m| m.auroc, true)),
        patch_avg_precision: MeanStd::over(&pull(&|m| m.avg_precision, true)),
        patch_balanced_accuracy: MeanStd::over(&pull(&|m| m.balanced_accuracy, true)),
    })
}

/// Run the full experiment into `out_dir`, returning the report that
/// was also written to `out_dir/report.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let data_seed = rng::substream(cfg.seed, "data").gen::<u64>();
    let cores = generate_corpus(&cfg.phantom, cfg.n_patients, data_seed)?;
    let data = build_datasets(cfg, cores)?;

    let mut arms = Vec::with_capacity(cfg.arms.len());
    for arm in &cfg.arms {
        let mut repeats = Vec::with_capacity(cfg.repeats);
        for repeat in 0..cfg.repeats {
            let run_dir = out_dir.join(arm.name()).join(format!("seed{repeat}"));
            let report = match run_one_repeat(cfg, arm, repeat, &data, &run_dir) {
                Ok(success) => RepeatReport {
                    repeat,
                    error: None,
                    core_metrics: Some(success.core_metrics),
                    patch_metrics: Some(success.patch_metrics),
                    best_epoch: Some(success.best_epoch),
                    final_pretrain_loss: success.final_pretrain_loss,
                    empty_cores: success.empty_cores,
                },
                Err(err) => RepeatReport {
                    repeat,
                    error: Some(err.to_string()),
                    core_metrics: None,
                    patch_metrics: None,
                    best_epoch: None,
                    final_pretrain_loss: None,
                    empty_cores: Vec::new(),
                },
            };
            repeats.push(report);
        }
        let aggregate = aggregate(&repeats);
        arms.push(ArmReport {
            name: arm.name(),
            kind: arm.kind,
            loss: arm.kind.pretrains().then_some(arm.loss),
            repeats,
            aggregate,
        });
    }

    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.seed,
        repeats: cfg.repeats,
        n_patients: cfg.n_patients,
        train_cores: data.train_core_count,
        val_cores: data.val_core_count,
        test_cores: data.test_cores.len(),
        unlabeled_patches: data.unlabeled.len(),
        labeled_train_patches: data.train_patches.len(),
        arms,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| {
        Error::Format(format!("serializing experiment report: {e}"))
    })?;
    write_text(&out_dir.join("report.json"), &(json + "\n"))?;
    Ok(report)
}
