//! Pretrain the tiny backbone with VICReg on phantom patches and show
//! that the variance hinge is what prevents representation collapse:
//! the same run with the variance weight zeroed collapses to
//! near-constant projections.
//!
//! Run with: cargo run --release --example pretrain_vicreg

use rand::Rng;
use rfssl::data::{extract_patches, generate_corpus, ExtractConfig, PatchRegion, PhantomConfig};
use rfssl::nn::schedule::LrSchedule;
use rfssl::nn::{ArchDescriptor, Model};
use rfssl::signal::Patch;
use rfssl::train::{embedding_column_stds, pretrain, project_patches, LossKind, PretrainConfig};

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn main() -> rfssl::Result<()> {
    let seed = 7;
    let phantom = PhantomConfig::default();
    let cores = generate_corpus(&phantom, 6, rfssl::rng::substream(seed, "data").gen::<u64>())?;

    let extract = ExtractConfig {
        stride_mm: 2.5,
        out_size: 32,
        ..ExtractConfig::default()
    };
    let mut patches: Vec<Patch> = Vec::new();
    for core in &cores {
        for record in extract_patches(core, PatchRegion::Prostate, &extract)? {
            patches.push(record.patch);
        }
    }
    println!("unlabeled prostate patches: {}", patches.len());
    let refs: Vec<&Patch> = patches.iter().collect();

    let mut cfg = PretrainConfig {
        loss: LossKind::Vicreg,
        epochs: 20,
        schedule: LrSchedule {
            base_lr: 1e-3,
            warmup_epochs: 2,
            total_epochs: 20,
        },
        seed,
        ..PretrainConfig::default()
    };
    let gamma = cfg.vicreg.gamma;

    // Healthy run: variance weight at its published value.
    let mut model = Model::new(ArchDescriptor::tiny(), seed)?;
    let curve = pretrain(&mut model, &refs, &cfg)?;
    println!(
        "vicreg mu={:>4}: loss {:.4} -> {:.4} over {} epochs",
        cfg.vicreg.mu,
        curve.first().unwrap(),
        curve.last().unwrap(),
        curve.len()
    );
    let stds = embedding_column_stds(&project_patches(&mut model, &refs)?)?;
    let healthy = mean(&stds);
    println!(
        "  mean projector-column std: {healthy:.4} (target >= {:.2})",
        0.5 * gamma
    );

    // Ablation: no variance term. The invariance term is free to pull
    // every projection to the same point.
    cfg.vicreg.mu = 0.0;
    let mut ablated = Model::new(ArchDescriptor::tiny(), seed)?;
    let curve = pretrain(&mut ablated, &refs, &cfg)?;
    println!(
        "vicreg mu={:>4}: loss {:.4} -> {:.4} over {} epochs",
        cfg.vicreg.mu,
        curve.first().unwrap(),
        curve.last().unwrap(),
        curve.len()
    );
    let stds = embedding_column_stds(&project_patches(&mut ablated, &refs)?)?;
    let collapsed = mean(&stds);
    println!(
        "  mean projector-column std: {collapsed:.4} (collapse means < {:.2})",
        0.1 * gamma
    );

    assert!(patches.len() >= 1000, "need at least 1000 patches");
    assert!(
        healthy >= 0.5 * gamma,
        "variance-regularized run should stay spread out (got {healthy:.4})"
    );
    assert!(
        collapsed < 0.1 * gamma,
        "ablated run should collapse (got {collapsed:.4})"
    );
    println!("collapse ablation behaves as expected");
    Ok(())
}
