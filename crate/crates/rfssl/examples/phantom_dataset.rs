//! Generate a small synthetic corpus, extract patches under the region
//! rules, and report what the dataset looks like.
//!
//! Run with: cargo run --release --example phantom_dataset

use rfssl::data::{
    envelope_summary_oracle, extract_patches, generate_corpus, load_core_set, store_core_set,
    ExtractConfig, PatchRegion, PhantomConfig, SplitConfig,
};

fn main() -> rfssl::Result<()> {
    let cfg = PhantomConfig::default();
    let n_patients = 6;
    let seed = 2024;
    println!(
        "generating {} patients x {} cores on a {}x{} grid ...",
        n_patients, cfg.cores_per_patient, cfg.axial_samples, cfg.lateral_lines
    );
    let cores = generate_corpus(&cfg, n_patients, seed)?;

    // Patch yield per core under the default window rules.
    let needle_cfg = ExtractConfig::default();
    let mut unlabeled_cfg = ExtractConfig::default();
    unlabeled_cfg.stride_mm = 2.5;
    let mut needle_counts = Vec::new();
    let mut prostate_counts = Vec::new();
    for core in &cores {
        let needle = extract_patches(core, PatchRegion::Needle, &needle_cfg)?;
        let prostate = extract_patches(core, PatchRegion::Prostate, &unlabeled_cfg)?;
        needle_counts.push(needle.len());
        prostate_counts.push(prostate.len());
        for rec in needle.iter().chain(prostate.iter()) {
            let in_range = rec.patch.data().iter().all(|&v| (0.0..=1.0).contains(&v));
            assert!(in_range, "normalized patch outside [0, 1]");
        }
    }
    println!(
        "needle patches/core at {} mm stride: {:?}",
        needle_cfg.stride_mm, needle_counts
    );
    println!(
        "prostate patches/core at {} mm stride: {:?}",
        unlabeled_cfg.stride_mm, prostate_counts
    );

    // Denser needle grid, as used when building labeled training sets.
    let mut dense_needle = ExtractConfig::default();
    dense_needle.stride_mm = 2.5;
    let dense: Vec<usize> = cores
        .iter()
        .map(|c| extract_patches(c, PatchRegion::Needle, &dense_needle).map(|v| v.len()))
        .collect::<rfssl::Result<_>>()?;
    println!("needle patches/core at 2.5 mm stride: {dense:?}");

    // Learnability check on raw envelope statistics.
    let auroc = envelope_summary_oracle(&cores, 5.0, needle_cfg.needle_overlap_min)?;
    println!("two-feature envelope oracle AUROC: {auroc:.4}");

    // Round-trip through the on-disk container.
    let dir = std::env::temp_dir().join("rfssl-phantom-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("cores.bin");
    store_core_set(&path, &cores)?;
    let loaded = load_core_set(&path)?;
    assert_eq!(loaded.len(), cores.len());
    println!(
        "stored and reloaded {} cores ({} bytes)",
        loaded.len(),
        std::fs::metadata(&path)?.len()
    );

    // A patient-disjoint split of the same corpus.
    let metas: Vec<_> = cores.iter().map(|c| c.meta.clone()).collect();
    let split = rfssl::data::split_patients(&metas, &SplitConfig::default(), seed)?;
    println!(
        "split: {} train / {} val / {} test patients",
        split.train_patients.len(),
        split.val_patients.len(),
        split.test_patients.len()
    );
    Ok(())
}
