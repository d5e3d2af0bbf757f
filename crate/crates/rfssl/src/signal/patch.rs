//! 2D RF patch: rows are axial samples, columns are lateral positions, so
//! each column holds one RF line. Pixel values are `f64` in memory; the
//! dataset containers store them as `f32`, and the extraction pipeline
//! quantizes through `f32` so stored patches round-trip bit for bit.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Patch {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "patch data length {} != {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    /// Copy of column `col` (one RF line, axial direction).
    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.height).map(|r| self.get(r, col)).collect()
    }

    pub fn set_column(&mut self, col: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.height);
        for (r, &v) in values.iter().enumerate() {
            self.set(r, col, v);
        }
    }

    /// Round every pixel through `f32`. Extraction applies this as its last
    /// step so stored pixel blocks reproduce in-memory values exactly.
    pub fn quantize_f32(&mut self) {
        for v in self.data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }

    pub fn max_abs_diff(&self, other: &Patch) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Statistics-based rescale to `[0, 1]`.
///
/// Pixels are clamped to a four-standard-deviation window around the mean,
/// then that window is mapped affinely onto `[0, 1]` (the mean lands on
/// 0.5). A zero-variance patch cannot define the window; it becomes a
/// constant 0.5 patch and the returned flag is true.
pub fn instance_normalize(patch: &Patch) -> (Patch, bool) {
    let n = patch.data.len() as f64;
    let mean = patch.data.iter().sum::<f64>() / n;
    let var = patch.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        let constant = Patch::filled(patch.height, patch.width, 0.5).expect("valid dims");
        return (constant, true);
    }
    let lo = mean - 4.0 * std;
    let span = 8.0 * std;
    let data: Vec<f64> = patch
        .data
        .iter()
        .map(|&x| (x.clamp(lo, lo + span) - lo) / span)
        .collect();
    (
        Patch {
            height: patch.height,
            width: patch.width,
            data,
        },
        false,
    )
}

/// Corner-aligned bilinear resize.
///
/// Output sample `i` of an axis with `out` points maps to source coordinate
/// `i * (in - 1) / (out - 1)`; a single-point output axis samples the source
/// center. Interpolation uses the lerp form, so constant inputs are
/// reproduced exactly.
pub fn resize_bilinear(patch: &Patch, out_height: usize, out_width: usize) -> Result<Patch> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {out_height}x{out_width}"
        )));
    }
    let (h, w) = (patch.height, patch.width);
    let src_coord = |i: usize, out: usize, inp: usize| -> f64 {
        if out == 1 {
            (inp - 1) as f64 / 2.0
        } else {
            i as f64 * (inp - 1) as f64 / (out - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(out_height * out_width);
    for oy in 0..out_height {
        let sy = src_coord(oy, out_height, h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_width {
            let sx = src_coord(ox, out_width, w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = {
                let a = patch.get(y0, x0);
                a + fx * (patch.get(y0, x1) - a)
            };
            let bot = {
                let a = patch.get(y1, x0);
                a + fx * (patch.get(y1, x1) - a)
            };
            data.push(top + fy * (bot - top));
        }
    }
    Patch::new(out_height, out_width, data)
}
