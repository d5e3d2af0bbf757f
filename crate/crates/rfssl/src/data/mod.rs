//! Weak-label data model and pipeline: RF frames with region masks, biopsy
//! cores, patch extraction, patient-disjoint splits, core-level balancing,
//! the synthetic phantom generator, and versioned on-disk containers.

pub mod container;
pub mod extract;
pub mod frame;
pub mod phantom;
pub mod split;
pub mod store;

pub use extract::{extract_patches, ExtractConfig};
pub use frame::{
    mm_to_samples, BiopsyCore, CoreMeta, FrameGeometry, PatchRecord, PatchRegion, RegionMask,
    RfFrame, SplitManifest,
};
pub use phantom::{
    envelope_summary_oracle, generate_corpus, generate_phantom_core, generate_phantom_frame,
    AmplitudeLaw, PhantomConfig,
};
pub use split::{balance_and_filter, split_patients, SplitConfig};
pub use store::{load_core_set, load_patch_set, store_core_set, store_patch_set, PatchDataset};
