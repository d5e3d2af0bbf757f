//! Core data types: RF frames, region masks, biopsy cores, patch records
//! and split manifests.
//!
//! A frame is a 2D array of RF samples, rows axial and columns lateral, so
//! one RF line is one column. Physical extent travels with the frame;
//! every geometric rule (patch size, stride, origins) is stated in mm and
//! converted per frame, which keeps the same code exact on the canonical
//! probe geometry and on small synthetic frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Patch;

/// Canonical probe geometry: 10016 axial samples over 28 mm depth, 512
/// lateral lines over a 46 mm sweep.
pub const CANONICAL_AXIAL_COUNT: usize = 10016;
pub const CANONICAL_LATERAL_COUNT: usize = 512;
pub const CANONICAL_AXIAL_EXTENT_MM: f64 = 28.0;
pub const CANONICAL_LATERAL_EXTENT_MM: f64 = 46.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub axial_extent_mm: f64,
    pub lateral_extent_mm: f64,
}

impl FrameGeometry {
    pub fn canonical() -> Self {
        Self {
            axial_extent_mm: CANONICAL_AXIAL_EXTENT_MM,
            lateral_extent_mm: CANONICAL_LATERAL_EXTENT_MM,
        }
    }
}

/// One RF frame; samples stored as `f32` row-major `[axial][lateral]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfFrame {
    axial_count: usize,
    lateral_count: usize,
    pub geometry: FrameGeometry,
    samples: Vec<f32>,
}

impl RfFrame {
    pub fn new(
        axial_count: usize,
        lateral_count: usize,
        geometry: FrameGeometry,
        samples: Vec<f32>,
    ) -> Result<Self> {
        if axial_count == 0 || lateral_count == 0 {
            return Err(Error::InvalidArgument("frame dimensions must be positive".into()));
        }
        if geometry.axial_extent_mm <= 0.0 || geometry.lateral_extent_mm <= 0.0 {
            return Err(Error::InvalidArgument("frame extents must be positive".into()));
        }
        if samples.len() != axial_count * lateral_count {
            return Err(Error::Shape(format!(
                "frame sample count {} != {axial_count}x{lateral_count}",
                samples.len()
            )));
        }
        Ok(Self {
            axial_count,
            lateral_count,
            geometry,
            samples,
        })
    }

    pub fn zeros(axial_count: usize, lateral_count: usize, geometry: FrameGeometry) -> Result<Self> {
        Self::new(axial_count, lateral_count, geometry, vec![0.0; axial_count * lateral_count])
    }

    pub fn axial_count(&self) -> usize {
        self.axial_count
    }

    pub fn lateral_count(&self) -> usize {
        self.lateral_count
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.samples
    }

    #[inline]
    pub fn get(&self, axial: usize, lateral: usize) -> f32 {
        self.samples[axial * self.lateral_count + lateral]
    }

    #[inline]
    pub fn set(&mut self, axial: usize, lateral: usize, value: f32) {
        self.samples[axial * self.lateral_count + lateral] = value;
    }

    /// One RF line (fixed lateral index) as `f64`.
    pub fn line(&self, lateral: usize) -> Vec<f64> {
        (0..self.axial_count).map(|a| self.get(a, lateral) as f64).collect()
    }

    /// Crop a window into a working `Patch` (f64).
    pub fn crop(&self, axial0: usize, lateral0: usize, axial_len: usize, lateral_len: usize) -> Result<Patch> {
        if axial0 + axial_len > self.axial_count || lateral0 + lateral_len > self.lateral_count {
            return Err(Error::InvalidArgument(format!(
                "crop [{axial0}+{axial_len}, {lateral0}+{lateral_len}] exceeds frame {}x{}",
                self.axial_count, self.lateral_count
            )));
        }
        let mut data = Vec::with_capacity(axial_len * lateral_len);
        for a in axial0..axial0 + axial_len {
            for l in lateral0..lateral0 + lateral_len {
                data.push(self.get(a, l) as f64);
            }
        }
        Patch::new(axial_len, lateral_len, data)
    }
}

/// Convert a physical window size to sample counts on a given frame:
/// `(lateral_lines, axial_samples)`, each rounded to the nearest integer.
pub fn mm_to_samples(frame: &RfFrame, lateral_mm: f64, axial_mm: f64) -> (usize, usize) {
    let lines = (lateral_mm * frame.lateral_count as f64 / frame.geometry.lateral_extent_mm).round() as usize;
    let samples = (axial_mm * frame.axial_count as f64 / frame.geometry.axial_extent_mm).round() as usize;
    (lines, samples)
}

/// Boolean region mask with the same grid as its frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    axial_count: usize,
    lateral_count: usize,
    cells: Vec<u8>,
}

impl RegionMask {
    pub fn new_empty(axial_count: usize, lateral_count: usize) -> Self {
        Self {
            axial_count,
            lateral_count,
            cells: vec![0; axial_count * lateral_count],
        }
    }

    pub fn from_cells(axial_count: usize, lateral_count: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != axial_count * lateral_count {
            return Err(Error::Shape(format!(
                "mask cell count {} != {axial_count}x{lateral_count}",
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::InvalidArgument("mask cells must be 0 or 1".into()));
        }
        Ok(Self {
            axial_count,
            lateral_count,
            cells,
        })
    }

    pub fn full(axial_count: usize, lateral_count: usize) -> Self {
        Self {
            axial_count,
            lateral_count,
            cells: vec![1; axial_count * lateral_count],
        }
    }

    pub fn axial_count(&self) -> usize {
        self.axial_count
    }

    pub fn lateral_count(&self) -> usize {
        self.lateral_count
    }

    #[inline]
    pub fn get(&self, axial: usize, lateral: usize) -> bool {
        self.cells[axial * self.lateral_count + lateral] != 0
    }

    #[inline]
    pub fn set(&mut self, axial: usize, lateral: usize, value: bool) {
        self.cells[axial * self.lateral_count + lateral] = value as u8;
    }

    pub fn count_true(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }

    /// Number of true cells inside a window.
    pub fn count_in_window(&self, axial0: usize, lateral0: usize, axial_len: usize, lateral_len: usize) -> usize {
        let mut n = 0usize;
        for a in axial0..axial0 + axial_len {
            let row = &self.cells[a * self.lateral_count..(a + 1) * self.lateral_count];
            for &c in &row[lateral0..lateral0 + lateral_len] {
                n += c as usize;
            }
        }
        n
    }

    /// Pack to LSB-first bit bytes (row-major) for storage.
    pub fn pack_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.cells.len().div_ceil(8)];
        for (i, &c) in self.cells.iter().enumerate() {
            if c != 0 {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack_bits(axial_count: usize, lateral_count: usize, bytes: &[u8]) -> Result<Self> {
        let n = axial_count * lateral_count;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Format(format!(
                "mask byte count {} does not match {axial_count}x{lateral_count}",
                bytes.len()
            )));
        }
        let cells = (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
        Self::from_cells(axial_count, lateral_count, cells)
    }
}

/// Per-core metadata carried alongside frames and patch datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreMeta {
    pub core_id: String,
    pub patient_id: String,
    /// 0 benign, 1 cancer.
    pub label: u8,
    /// Percent of core tissue involved by cancer, in [0, 100].
    pub involvement: f64,
    pub gleason: Option<u8>,
}

impl CoreMeta {
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidArgument(format!("core label {} not in {{0,1}}", self.label)));
        }
        if !(0.0..=100.0).contains(&self.involvement) {
            return Err(Error::InvalidArgument(format!(
                "involvement {} outside [0, 100]",
                self.involvement
            )));
        }
        if self.label == 0 && self.involvement != 0.0 {
            return Err(Error::InvalidArgument(
                "benign core must have zero involvement".into(),
            ));
        }
        Ok(())
    }
}

/// One biopsy core: frame, region masks, and pathology metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct BiopsyCore {
    pub meta: CoreMeta,
    pub frame: RfFrame,
    pub prostate_mask: RegionMask,
    pub needle_mask: RegionMask,
}

impl BiopsyCore {
    pub fn new(
        meta: CoreMeta,
        frame: RfFrame,
        prostate_mask: RegionMask,
        needle_mask: RegionMask,
    ) -> Result<Self> {
        meta.validate()?;
        for (name, m) in [("prostate", &prostate_mask), ("needle", &needle_mask)] {
            if m.axial_count() != frame.axial_count() || m.lateral_count() != frame.lateral_count() {
                return Err(Error::Shape(format!(
                    "{name} mask {}x{} does not match frame {}x{}",
                    m.axial_count(),
                    m.lateral_count(),
                    frame.axial_count(),
                    frame.lateral_count()
                )));
            }
        }
        Ok(Self {
            meta,
            frame,
            prostate_mask,
            needle_mask,
        })
    }
}

/// Which extraction rule produced a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchRegion {
    /// Needle-trace window: carries the core's weak label.
    Needle,
    /// Prostate-interior window: unlabeled, used for pretraining.
    Prostate,
}

/// One extracted, normalized patch with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub core_id: String,
    pub patient_id: String,
    pub region: PatchRegion,
    /// Core label for needle-region patches, `None` for prostate-region.
    pub weak_label: Option<u8>,
    pub axial_origin_mm: f64,
    pub lateral_origin_mm: f64,
    pub patch: Patch,
}

/// Patient-disjoint split, stored as patient id lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
    pub test_patients: Vec<String>,
}

impl SplitManifest {
    pub fn validate_disjoint(&self) -> Result<()> {
        use std::collections::HashSet;
        let mut seen: HashSet<&String> = HashSet::new();
        for p in self
            .train_patients
            .iter()
            .chain(&self.val_patients)
            .chain(&self.test_patients)
        {
            if !seen.insert(p) {
                return Err(Error::InvalidArgument(format!(
                    "patient {p} appears in more than one split"
                )));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, patient_id: &str) -> Option<&'static str> {
        if self.train_patients.iter().any(|p| p == patient_id) {
            Some("train")
        } else if self.val_patients.iter().any(|p| p == patient_id) {
            Some("val")
        } else if self.test_patients.iter().any(|p| p == patient_id) {
            Some("test")
        } else {
            None
        }
    }
}
