//! Prediction heatmaps over a B-mode style background.
//!
//! The background is the per-line analytic envelope of the raw frame,
//! log-compressed to a 60 dB dynamic range. The overlay classifies
//! patches on a dense grid inside the needle-and-prostate overlap,
//! paints class 0 pure blue and class 1 pure red, averages overlapping
//! patches per pixel first, and alpha-composites the result onto the
//! background at opacity one half. All arithmetic stays in f64 until a
//! single final rounding, so a given model and core always produce
//! byte-identical images.

use std::io::Write as IoWrite;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{extract_patches, BiopsyCore, ExtractConfig, PatchRegion, RfFrame};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::signal::{analytic_signal, envelope_and_phase, Patch};

use super::predict::predict_patch_probabilities;

/// Dynamic range of the log-compressed background, in dB.
const DYNAMIC_RANGE_DB: f64 = 60.0;
/// Overlay opacity when compositing onto the background.
const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    /// Square window side in mm.
    pub patch_mm: f64,
    /// Grid stride in mm; 1 mm gives the dense rendering grid.
    pub stride_mm: f64,
    /// Decision threshold turning probabilities into classes.
    pub threshold: f64,
    pub needle_overlap_min: f64,
    pub prostate_overlap_min: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            patch_mm: 5.0,
            stride_mm: 1.0,
            threshold: 0.5,
            needle_overlap_min: 0.66,
            prostate_overlap_min: 0.9,
        }
    }
}

/// Plain RGB raster with portable pixel-map serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let base = (row * self.width + col) * 3;
        self.rgb[base..base + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let base = (row * self.width + col) * 3;
        [self.rgb[base], self.rgb[base + 1], self.rgb[base + 2]]
    }

    /// Binary P6 encoding: text header, then packed RGB rows.
    pub fn p6_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write_p6(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.p6_bytes())?;
        Ok(())
    }
}

/// A rendered heatmap plus how many patches were scored; zero means the
/// overlay is empty and only the background was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedHeatmap {
    pub image: Image,
    pub scored_patches: usize,
}

/// Per-pixel gray level of the B-mode background in [0, 255], kept in
/// f64 for the later compositing step. Row-major, frame-sized.
fn background_gray(frame: &RfFrame) -> Result<Vec<f64>> {
    let h = frame.axial_count();
    let w = frame.lateral_count();
    let mut envelope = vec![0.0f64; h * w];
    let mut peak = 0.0f64;
    for col in 0..w {
        let line = frame.line(col);
        let analytic = analytic_signal(&line)?;
        let ep = envelope_and_phase(&analytic)?;
        for (row, &e) in ep.envelope.iter().enumerate() {
            envelope[row * w + col] = e;
            peak = peak.max(e);
        }
    }
    let mut gray = vec![0.0f64; h * w];
    if peak > 0.0 {
        for (g, &e) in gray.iter_mut().zip(&envelope) {
            // 20*log10 relative to the frame peak, clamped to the
            // dynamic range, mapped onto [0, 255].
            let db = if e > 0.0 {
                (20.0 * (e / peak).log10()).max(-DYNAMIC_RANGE_DB)
            } else {
                -DYNAMIC_RANGE_DB
            };
            *g = (db + DYNAMIC_RANGE_DB) / DYNAMIC_RANGE_DB * 255.0;
        }
    }
    Ok(gray)
}

/// Mean predicted class per covered pixel: `(sum, count)` accumulators
/// over the frame grid.
struct OverlayAccumulator {
    width: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl OverlayAccumulator {
    fn new(height: usize, width: usize) -> Self {
        Self {
            width,
            sum: vec![0.0; height * width],
            count: vec![0; height * width],
        }
    }

    fn add_rect(&mut self, row0: usize, col0: usize, rows: usize, cols: usize, class: u8) {
        for r in row0..row0 + rows {
            for c in col0..col0 + cols {
                let i = r * self.width + c;
                self.sum[i] += class as f64;
                self.count[i] += 1;
            }
        }
    }

    fn mix_at(&self, i: usize) -> Option<f64> {
        (self.count[i] > 0).then(|| self.sum[i] / self.count[i] as f64)
    }
}

/// Composite the class overlay onto the background: covered pixels get
/// `(1 - alpha) * gray + alpha * lerp(blue, red, mix)`, uncovered pixels
/// stay gray. One rounding at the end.
fn composite(gray: &[f64], overlay: &OverlayAccumulator, height: usize, width: usize) -> Result<Image> {
    let mut image = Image::new(width, height)?;
    let to_byte = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    for row in 0..height {
        for col in 0..width {
            let i = row * width + col;
            let g = gray[i];
            let rgb = match overlay.mix_at(i) {
                Some(mix) => {
                    let red = 255.0 * mix;
                    let blue = 255.0 * (1.0 - mix);
                    [
                        to_byte((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * red),
                        to_byte((1.0 - OVERLAY_ALPHA) * g),
                        to_byte((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * blue),
                    ]
                }
                None => {
                    let b = to_byte(g);
                    [b, b, b]
                }
            };
            image.set(row, col, rgb);
        }
    }
    Ok(image)
}

/// Render the prediction heatmap of one core. Patches come from a dense
/// grid within the needle-and-prostate overlap; their input size for the
/// model is taken from the model's own architecture.
pub fn render_heatmap(
    model: &mut Model,
    core: &BiopsyCore,
    cfg: &HeatmapConfig,
) -> Result<RenderedHeatmap> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::InvalidArgument(format!(
            "decision threshold {} outside [0, 1]",
            cfg.threshold
        )));
    }
    let frame = &core.frame;
    let h = frame.axial_count();
    let w = frame.lateral_count();
    let gray = background_gray(frame)?;

    let extract = ExtractConfig {
        patch_mm: cfg.patch_mm,
        stride_mm: cfg.stride_mm,
        needle_overlap_min: cfg.needle_overlap_min,
        prostate_overlap_min: cfg.prostate_overlap_min,
        out_size: model.arch().input_size,
    };
    let records = extract_patches(core, PatchRegion::Needle, &extract)?;

    let mut overlay = OverlayAccumulator::new(h, w);
    let scored = records.len();
    if scored > 0 {
        let patches: Vec<&Patch> = records.iter().map(|r| &r.patch).collect();
        let probabilities = predict_patch_probabilities(model, &patches)?;
        // Window size in pixels, identical to the extraction walk.
        let (patch_lines, patch_samples) =
            crate::data::mm_to_samples(frame, cfg.patch_mm, cfg.patch_mm);
        let mm_per_sample = frame.geometry.axial_extent_mm / h as f64;
        let mm_per_line = frame.geometry.lateral_extent_mm / w as f64;
        for (record, &p) in records.iter().zip(&probabilities) {
            let class = u8::from(p >= cfg.threshold);
            let row0 = (record.axial_origin_mm / mm_per_sample).round() as usize;
            let col0 = (record.lateral_origin_mm / mm_per_line).round() as usize;
            overlay.add_rect(row0, col0, patch_samples, patch_lines, class);
        }
    }

    Ok(RenderedHeatmap {
        image: composite(&gray, &overlay, h, w)?,
        scored_patches: scored,
    })
}
