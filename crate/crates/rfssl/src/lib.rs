//! Self-supervised representation learning for RF ultrasound signals.
//!
//! This crate builds the full path from raw radio-frequency (RF) ultrasound
//! frames to core-wise prostate cancer detection metrics, with no labels
//! needed for the representation itself:
//!
//! * physics-aware augmentations that act on the analytic signal of each RF
//!   line (phase shift, envelope distortion) next to standard geometric ones,
//! * VICReg, SimCLR (NT-Xent) and BYOL pretraining objectives on a small
//!   residual CNN with a from-scratch reverse-mode tape,
//! * a weak-label data model (patients, biopsy cores, needle/prostate region
//!   masks, involvement) with patient-disjoint splits and core-level
//!   balancing,
//! * linear, semi-supervised and fully supervised finetuning with Adam or
//!   NovoGrad under a warmup + cosine schedule,
//! * core-wise evaluation (AUROC, average precision, balanced accuracy),
//!   involvement scatter data and B-mode heatmap rendering,
//! * a synthetic RF phantom generator so every stage runs end to end on a
//!   laptop with no proprietary data.
//!
//! The primary interface is the `examples/` directory of this crate; each
//! example is a small runnable program exercising one capability:
//!
//! | Example | Run | Shows |
//! |---|---|---|
//! | `analytic_signal` | `cargo run --release -p rfssl --example analytic_signal` | Envelope/phase/instantaneous frequency of an AM tone |
//! | `physics_augmentations` | `cargo run --release -p rfssl --example physics_augmentations` | Envelope- and phase-preservation of the RF augmentations |
//! | `phantom_dataset` | `cargo run --release -p rfssl --example phantom_dataset` | Phantom corpus generation, patch extraction, container round trip |
//! | `vicreg_terms` | `cargo run --release -p rfssl --example vicreg_terms` | Invariance/variance/covariance terms on constructed batches |
//! | `gradient_check` | `cargo run --release -p rfssl --example gradient_check` | Finite-difference validation of layer and loss gradients |
//! | `lr_schedule` | `cargo run --release -p rfssl --example lr_schedule` | Warmup + cosine annealing learning-rate curve |
//! | `pretrain_vicreg` | `cargo run --release -p rfssl --example pretrain_vicreg` | A short VICReg pretraining run with loss curve |
//! | `linear_probe` | `cargo run --release -p rfssl --example linear_probe` | Frozen-backbone linear evaluation against a random baseline |
//! | `heatmap_render` | `cargo run --release -p rfssl --example heatmap_render` | Cancer-probability heatmap over a B-mode background |
//! | `compare_ssl_losses` | `cargo run --release -p rfssl --example compare_ssl_losses` | VICReg vs SimCLR vs BYOL on a miniature protocol |
//!
//! A thin CLI (`cargo run --release -p rfssl -- <subcommand>`) exposes the
//! same capabilities as subcommands (`synth-gen`, `extract-patches`,
//! `pretrain`, `finetune`, `evaluate`, `heatmap`, `run-experiment`,
//! `gradcheck`) for scripted use; see the README.
//!
//! All randomness flows from one master seed through named substreams
//! ([`rng`]), so every artifact (reports, curves, heatmaps, checkpoints) is
//! byte-reproducible for a fixed seed.

pub mod cli;
pub mod data;
pub mod error;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};

/// Every finite-difference gradient check in one report: the layer
/// suite, the three self-supervised losses, and sampled whole-model
/// parameter checks.
pub fn full_gradient_check(seed: u64) -> Result<nn::gradcheck::GradCheckReport> {
    let mut entries = nn::gradcheck::check_layer_suite(seed)?;
    entries.extend(ssl::check_ssl_losses(seed)?);
    entries.extend(nn::gradcheck::check_model_parameters(seed)?);
    Ok(nn::gradcheck::GradCheckReport::from_entries(entries))
}
