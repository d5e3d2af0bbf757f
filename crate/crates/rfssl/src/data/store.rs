//! Dataset serialization: biopsy-core sets and patch sets as versioned
//! binary containers.
//!
//! Pixel blocks are little-endian `f32` and masks are bit-packed, both
//! in the payload; everything else rides in the JSON header. Round trips
//! are bit-exact for pixels (patches are quantized through `f32` at
//! extraction time) and exact for metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::container::{
    expect_version, f32s_to_le_bytes, le_bytes_to_f32s, read_container, write_container,
    ContainerKind,
};
use crate::data::frame::{
    BiopsyCore, CoreMeta, FrameGeometry, PatchRecord, PatchRegion, RegionMask, RfFrame,
};
use crate::error::{Error, Result};
use crate::signal::Patch;

pub const CORE_SET_VERSION: u16 = 1;
pub const PATCH_SET_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CoreEntry {
    meta: CoreMeta,
    axial_count: usize,
    lateral_count: usize,
    geometry: FrameGeometry,
}

#[derive(Serialize, Deserialize)]
struct CoreSetHeader {
    cores: Vec<CoreEntry>,
}

/// Write a set of biopsy cores to one container file.
pub fn store_core_set(path: &Path, cores: &[BiopsyCore]) -> Result<()> {
    let mut header = CoreSetHeader { cores: Vec::new() };
    let mut payload = Vec::new();
    for core in cores {
        header.cores.push(CoreEntry {
            meta: core.meta.clone(),
            axial_count: core.frame.axial_count(),
            lateral_count: core.frame.lateral_count(),
            geometry: core.frame.geometry,
        });
        payload.extend_from_slice(&f32s_to_le_bytes(core.frame.samples()));
        payload.extend_from_slice(&core.prostate_mask.pack_bits());
        payload.extend_from_slice(&core.needle_mask.pack_bits());
    }
    write_container(path, ContainerKind::CoreSet, CORE_SET_VERSION, &header, &payload)
}

/// Read a core set written by [`store_core_set`].
pub fn load_core_set(path: &Path) -> Result<Vec<BiopsyCore>> {
    let container = read_container(path)?;
    expect_version(&container, ContainerKind::CoreSet, CORE_SET_VERSION)?;
    let header: CoreSetHeader = container.header()?;
    let payload = &container.payload;
    let mut cores = Vec::with_capacity(header.cores.len());
    let mut cursor = 0usize;
    for entry in header.cores {
        let n = entry.axial_count * entry.lateral_count;
        let frame_bytes = n * 4;
        let mask_bytes = n.div_ceil(8);
        let total = frame_bytes + 2 * mask_bytes;
        if cursor + total > payload.len() {
            return Err(Error::Format(format!(
                "core payload truncated for {}",
                entry.meta.core_id
            )));
        }
        let samples = le_bytes_to_f32s(&payload[cursor..cursor + frame_bytes])?;
        cursor += frame_bytes;
        let prostate = RegionMask::unpack_bits(
            entry.axial_count,
            entry.lateral_count,
            &payload[cursor..cursor + mask_bytes],
        )?;
        cursor += mask_bytes;
        let needle = RegionMask::unpack_bits(
            entry.axial_count,
            entry.lateral_count,
            &payload[cursor..cursor + mask_bytes],
        )?;
        cursor += mask_bytes;
        let frame = RfFrame::new(entry.axial_count, entry.lateral_count, entry.geometry, samples)?;
        cores.push(BiopsyCore::new(entry.meta, frame, prostate, needle)?);
    }
    if cursor != payload.len() {
        return Err(Error::Format(format!(
            "core payload has {} trailing bytes",
            payload.len() - cursor
        )));
    }
    Ok(cores)
}

/// A set of extracted patches plus the per-core metadata needed for
/// core-wise evaluation of patch predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub records: Vec<PatchRecord>,
    pub cores: Vec<CoreMeta>,
}

impl PatchDataset {
    pub fn new(records: Vec<PatchRecord>, cores: Vec<CoreMeta>) -> Self {
        Self { records, cores }
    }

    pub fn core_meta(&self, core_id: &str) -> Option<&CoreMeta> {
        self.cores.iter().find(|c| c.core_id == core_id)
    }
}

#[derive(Serialize, Deserialize)]
struct RecordEntry {
    core_id: String,
    patient_id: String,
    region: PatchRegion,
    weak_label: Option<u8>,
    axial_origin_mm: f64,
    lateral_origin_mm: f64,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct PatchSetHeader {
    records: Vec<RecordEntry>,
    cores: Vec<CoreMeta>,
}

/// Write a patch dataset to one container file.
pub fn store_patch_set(path: &Path, dataset: &PatchDataset) -> Result<()> {
    let mut header = PatchSetHeader {
        records: Vec::new(),
        cores: dataset.cores.clone(),
    };
    let mut payload = Vec::new();
    for rec in &dataset.records {
        header.records.push(RecordEntry {
            core_id: rec.core_id.clone(),
            patient_id: rec.patient_id.clone(),
            region: rec.region,
            weak_label: rec.weak_label,
            axial_origin_mm: rec.axial_origin_mm,
            lateral_origin_mm: rec.lateral_origin_mm,
            height: rec.patch.height(),
            width: rec.patch.width(),
        });
        let as_f32: Vec<f32> = rec.patch.data().iter().map(|&v| v as f32).collect();
        payload.extend_from_slice(&f32s_to_le_bytes(&as_f32));
    }
    write_container(path, ContainerKind::PatchSet, PATCH_SET_VERSION, &header, &payload)
}

/// Read a patch dataset written by [`store_patch_set`].
pub fn load_patch_set(path: &Path) -> Result<PatchDataset> {
    let container = read_container(path)?;
    expect_version(&container, ContainerKind::PatchSet, PATCH_SET_VERSION)?;
    let header: PatchSetHeader = container.header()?;
    let payload = &container.payload;
    let mut records = Vec::with_capacity(header.records.len());
    let mut cursor = 0usize;
    for entry in header.records {
        let n = entry.height * entry.width;
        let bytes = n * 4;
        if cursor + bytes > payload.len() {
            return Err(Error::Format(format!(
                "patch payload truncated for {}",
                entry.core_id
            )));
        }
        let pixels = le_bytes_to_f32s(&payload[cursor..cursor + bytes])?;
        cursor += bytes;
        let data: Vec<f64> = pixels.iter().map(|&v| v as f64).collect();
        records.push(PatchRecord {
            core_id: entry.core_id,
            patient_id: entry.patient_id,
            region: entry.region,
            weak_label: entry.weak_label,
            axial_origin_mm: entry.axial_origin_mm,
            lateral_origin_mm: entry.lateral_origin_mm,
            patch: Patch::new(entry.height, entry.width, data)?,
        });
    }
    if cursor != payload.len() {
        return Err(Error::Format(format!(
            "patch payload has {} trailing bytes",
            payload.len() - cursor
        )));
    }
    Ok(PatchDataset {
        records,
        cores: header.cores,
    })
}
