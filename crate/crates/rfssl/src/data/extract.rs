//! Sliding-window patch extraction.
//!
//! Windows live on a grid anchored at the frame origin with a physical
//! stride; only windows fully inside the frame are considered. A window is
//! kept when its overlap with the relevant masks clears the thresholds
//! (inclusive, so a window at exactly the minimum overlap is kept):
//!
//! * needle region: needle overlap >= `needle_overlap_min` and prostate
//!   overlap >= `prostate_overlap_min`; the patch carries the core's label,
//! * prostate region: prostate overlap >= `prostate_overlap_min`; the
//!   patch is unlabeled.
//!
//! Each kept window is cropped, resized to `out_size` x `out_size`
//! (corner-aligned bilinear), instance-normalized, and quantized through
//! `f32` so stored datasets round-trip bit for bit.

use serde::{Deserialize, Serialize};

use crate::data::frame::{mm_to_samples, BiopsyCore, PatchRecord, PatchRegion};
use crate::error::{Error, Result};
use crate::signal::{instance_normalize, resize_bilinear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Square window side in mm.
    pub patch_mm: f64,
    /// Grid stride in mm (1 mm for heatmaps, patch-sized by default).
    pub stride_mm: f64,
    /// Minimum fraction of window pixels inside the needle mask
    /// (needle-region extraction only).
    pub needle_overlap_min: f64,
    /// Minimum fraction of window pixels inside the prostate mask.
    pub prostate_overlap_min: f64,
    /// Output resolution after resize (canonical 256; small configs use 32).
    pub out_size: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            patch_mm: 5.0,
            stride_mm: 5.0,
            needle_overlap_min: 0.66,
            prostate_overlap_min: 0.9,
            out_size: 256,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.patch_mm > 0.0) || !(self.stride_mm > 0.0) {
            return Err(Error::InvalidArgument(
                "patch_mm and stride_mm must be positive".into(),
            ));
        }
        for (name, v) in [
            ("needle_overlap_min", self.needle_overlap_min),
            ("prostate_overlap_min", self.prostate_overlap_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.out_size < 4 {
            return Err(Error::InvalidArgument(
                "out_size must be at least 4 (column signal ops need 4 samples)".into(),
            ));
        }
        Ok(())
    }
}

/// Extract all qualifying patches of one region kind from a core.
///
/// A window larger than the frame yields an empty result, not an error.
pub fn extract_patches(core: &BiopsyCore, region: PatchRegion, config: &ExtractConfig) -> Result<Vec<PatchRecord>> {
    config.validate()?;
    let frame = &core.frame;
    let (patch_lines, patch_samples) = mm_to_samples(frame, config.patch_mm, config.patch_mm);
    let (stride_lines, stride_samples) = mm_to_samples(frame, config.stride_mm, config.stride_mm);
    let stride_lines = stride_lines.max(1);
    let stride_samples = stride_samples.max(1);
    if patch_lines == 0 || patch_samples == 0 {
        return Err(Error::InvalidArgument(format!(
            "patch_mm {} maps to an empty window on this frame",
            config.patch_mm
        )));
    }
    if patch_samples > frame.axial_count() || patch_lines > frame.lateral_count() {
        return Ok(Vec::new());
    }

    let window_px = (patch_lines * patch_samples) as f64;
    let mm_per_sample = frame.geometry.axial_extent_mm / frame.axial_count() as f64;
    let mm_per_line = frame.geometry.lateral_extent_mm / frame.lateral_count() as f64;

    let mut records = Vec::new();
    let mut axial0 = 0usize;
    while axial0 + patch_samples <= frame.axial_count() {
        let mut lateral0 = 0usize;
        while lateral0 + patch_lines <= frame.lateral_count() {
            let prostate_frac = core
                .prostate_mask
                .count_in_window(axial0, lateral0, patch_samples, patch_lines) as f64
                / window_px;
            let keep = match region {
                PatchRegion::Needle => {
                    let needle_frac = core
                        .needle_mask
                        .count_in_window(axial0, lateral0, patch_samples, patch_lines)
                        as f64
                        / window_px;
                    needle_frac >= config.needle_overlap_min
                        && prostate_frac >= config.prostate_overlap_min
                }
                PatchRegion::Prostate => prostate_frac >= config.prostate_overlap_min,
            };
            if keep {
                let raw = frame.crop(axial0, lateral0, patch_samples, patch_lines)?;
                let resized = resize_bilinear(&raw, config.out_size, config.out_size)?;
                let (mut normalized, _degenerate) = instance_normalize(&resized);
                normalized.quantize_f32();
                records.push(PatchRecord {
                    core_id: core.meta.core_id.clone(),
                    patient_id: core.meta.patient_id.clone(),
                    region,
                    weak_label: match region {
                        PatchRegion::Needle => Some(core.meta.label),
                        PatchRegion::Prostate => None,
                    },
                    axial_origin_mm: axial0 as f64 * mm_per_sample,
                    lateral_origin_mm: lateral0 as f64 * mm_per_line,
                    patch: normalized,
                });
            }
            lateral0 += stride_lines;
        }
        axial0 += stride_samples;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::frame::{CoreMeta, FrameGeometry, RegionMask, RfFrame};
    use rand::Rng;

    fn test_core(axial: usize, lateral: usize, geometry: FrameGeometry, label: u8) -> BiopsyCore {
        let mut rng = crate::rng::substream(7, "extract-test");
        let samples: Vec<f32> = (0..axial * lateral).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let frame = RfFrame::new(axial, lateral, geometry, samples).unwrap();
        BiopsyCore::new(
            CoreMeta {
                core_id: "core-1".into(),
                patient_id: "pat-1".into(),
                label,
                involvement: if label == 1 { 80.0 } else { 0.0 },
                gleason: None,
            },
            frame,
            RegionMask::full(axial, lateral),
            RegionMask::full(axial, lateral),
        )
        .unwrap()
    }

    #[test]
    fn full_masks_give_the_whole_grid() {
        // Canonical extents on a reduced grid: a 5 mm patch at 5 mm stride
        // tiles 9 lateral x 5 axial positions inside 46 mm x 28 mm.
        let geometry = FrameGeometry::canonical();
        let core = test_core(1000, 460, geometry, 1);
        let cfg = ExtractConfig {
            out_size: 32,
            ..ExtractConfig::default()
        };
        let recs = extract_patches(&core, PatchRegion::Needle, &cfg).unwrap();
        assert_eq!(recs.len(), 45, "expected a 9x5 grid of windows");
        assert!(recs.iter().all(|r| r.weak_label == Some(1)));
        assert!(recs.iter().all(|r| r.region == PatchRegion::Needle));
        // Origins sit on the sample-grid stride, which matches the mm
        // stride up to the rounding of mm_to_samples (half a sample).
        let mm_per_sample = 28.0 / 1000.0;
        let mm_per_line = 46.0 / 460.0;
        for r in &recs {
            let lat_steps = r.lateral_origin_mm / 5.0;
            let ax_steps = r.axial_origin_mm / 5.0;
            assert!((lat_steps - lat_steps.round()).abs() * 5.0 <= mm_per_line / 2.0 + 1e-9);
            assert!((ax_steps - ax_steps.round()).abs() * 5.0 <= 5.0 * mm_per_sample + 1e-9);
        }
    }

    #[test]
    fn needle_overlap_boundary_is_inclusive() {
        // 10x10-per-window geometry; build a needle mask covering exactly
        // 66 of the 100 window pixels for the single window at the origin.
        let geometry = FrameGeometry {
            axial_extent_mm: 10.0,
            lateral_extent_mm: 10.0,
        };
        let axial = 10usize;
        let lateral = 10usize;
        let mut rng = crate::rng::substream(8, "boundary");
        let samples: Vec<f32> = (0..axial * lateral).map(|_| rng.gen::<f32>()).collect();
        let frame = RfFrame::new(axial, lateral, geometry, samples).unwrap();
        let mut needle = RegionMask::new_empty(axial, lateral);
        let mut placed = 0;
        'outer: for a in 0..axial {
            for l in 0..lateral {
                needle.set(a, l, true);
                placed += 1;
                if placed == 66 {
                    break 'outer;
                }
            }
        }
        let core = BiopsyCore::new(
            CoreMeta {
                core_id: "c".into(),
                patient_id: "p".into(),
                label: 1,
                involvement: 100.0,
                gleason: None,
            },
            frame,
            RegionMask::full(axial, lateral),
            needle,
        )
        .unwrap();
        let mut cfg = ExtractConfig {
            patch_mm: 10.0,
            stride_mm: 10.0,
            needle_overlap_min: 0.66,
            prostate_overlap_min: 0.9,
            out_size: 16,
        };
        let kept = extract_patches(&core, PatchRegion::Needle, &cfg).unwrap();
        assert_eq!(kept.len(), 1, "window at exactly 66% needle overlap must be kept");
        cfg.needle_overlap_min = 0.67;
        let dropped = extract_patches(&core, PatchRegion::Needle, &cfg).unwrap();
        assert!(dropped.is_empty(), "window at 66% must be dropped at a 67% threshold");
    }

    #[test]
    fn prostate_region_patches_are_unlabeled() {
        let geometry = FrameGeometry::canonical();
        let core = test_core(600, 300, geometry, 1);
        let cfg = ExtractConfig {
            out_size: 16,
            ..ExtractConfig::default()
        };
        let recs = extract_patches(&core, PatchRegion::Prostate, &cfg).unwrap();
        assert!(!recs.is_empty());
        assert!(recs.iter().all(|r| r.weak_label.is_none()));
    }

    #[test]
    fn benign_core_patches_carry_weak_label_zero() {
        let geometry = FrameGeometry::canonical();
        let core = test_core(600, 300, geometry, 0);
        let cfg = ExtractConfig {
            out_size: 16,
            ..ExtractConfig::default()
        };
        let recs = extract_patches(&core, PatchRegion::Needle, &cfg).unwrap();
        assert!(!recs.is_empty());
        assert!(recs.iter().all(|r| r.weak_label == Some(0)));
    }

    #[test]
    fn oversized_patch_yields_empty_result() {
        let geometry = FrameGeometry {
            axial_extent_mm: 4.0,
            lateral_extent_mm: 4.0,
        };
        let core = test_core(40, 40, geometry, 1);
        let cfg = ExtractConfig {
            patch_mm: 5.0,
            stride_mm: 5.0,
            out_size: 16,
            ..ExtractConfig::default()
        };
        assert!(extract_patches(&core, PatchRegion::Needle, &cfg).unwrap().is_empty());
    }

    #[test]
    fn patches_are_normalized_and_f32_exact() {
        let geometry = FrameGeometry::canonical();
        let core = test_core(600, 300, geometry, 1);
        let cfg = ExtractConfig {
            out_size: 16,
            ..ExtractConfig::default()
        };
        let recs = extract_patches(&core, PatchRegion::Needle, &cfg).unwrap();
        for r in &recs {
            for &v in r.patch.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(v, v as f32 as f64, "pixel must be exactly representable in f32");
            }
        }
    }

    #[test]
    fn content_shifted_by_one_stride_reproduces_interior_patches() {
        // Shift frame and masks axially by exactly one stride: every window
        // that stays inside must produce the same pixels, offset by one
        // stride in origin.
        let geometry = FrameGeometry {
            axial_extent_mm: 20.0,
            lateral_extent_mm: 10.0,
        };
        let axial = 200usize;
        let lateral = 100usize;
        let mut rng = crate::rng::substream(9, "shift");
        let base: Vec<f32> = (0..axial * lateral).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let frame = RfFrame::new(axial, lateral, geometry, base.clone()).unwrap();

        let cfg = ExtractConfig {
            patch_mm: 5.0,
            stride_mm: 5.0,
            out_size: 16,
            ..ExtractConfig::default()
        };
        let (_, stride_samples) = mm_to_samples(&frame, cfg.stride_mm, cfg.stride_mm);

        // Shifted frame: content moves down by one stride; the vacated top
        // rows are zero (their windows are not compared).
        let mut shifted = vec![0.0f32; axial * lateral];
        for a in stride_samples..axial {
            for l in 0..lateral {
                shifted[a * lateral + l] = base[(a - stride_samples) * lateral + l];
            }
        }
        let shifted_frame = RfFrame::new(axial, lateral, geometry, shifted).unwrap();

        let make_core = |f: RfFrame| {
            BiopsyCore::new(
                CoreMeta {
                    core_id: "c".into(),
                    patient_id: "p".into(),
                    label: 1,
                    involvement: 100.0,
                    gleason: None,
                },
                f,
                RegionMask::full(axial, lateral),
                RegionMask::full(axial, lateral),
            )
            .unwrap()
        };
        let recs_a = extract_patches(&make_core(frame), PatchRegion::Needle, &cfg).unwrap();
        let recs_b = extract_patches(&make_core(shifted_frame), PatchRegion::Needle, &cfg).unwrap();

        let stride_mm_axial = stride_samples as f64 * geometry.axial_extent_mm / axial as f64;
        let mut matched = 0;
        for a in &recs_a {
            if let Some(b) = recs_b.iter().find(|b| {
                (b.axial_origin_mm - (a.axial_origin_mm + stride_mm_axial)).abs() < 1e-9
                    && (b.lateral_origin_mm - a.lateral_origin_mm).abs() < 1e-9
            }) {
                assert_eq!(a.patch, b.patch, "shifted window content differs");
                matched += 1;
            }
        }
        assert!(matched > 0, "no overlapping windows compared");
    }
}
