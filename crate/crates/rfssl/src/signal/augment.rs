//! Patch augmentations.
//!
//! Two families share one sampling interface. The geometric family
//! (translation, erasing, flips) treats the patch as an image. The physics
//! family works on the analytic signal of each column: a phase shift
//! rotates every column's analytic signal by one shared angle, which leaves
//! the envelope untouched; envelope distortion multiplies every column's
//! analytic signal by one shared positive field `1 + n(t)`, which leaves
//! the phase untouched.
//!
//! `sample_augmentation` draws one concrete transform per enabled category
//! (each independently skipped with `skip_probability`) in a fixed order:
//! translation, erasing, vertical flip, horizontal flip, phase shift,
//! envelope distortion. Application order equals sampling order. The drawn
//! plan is plain data, so a plan applied twice to the same patch gives
//! bit-identical results.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::signal::analytic::{analytic_signal, fft_forward, fft_inverse};
use crate::signal::patch::Patch;

/// Augmentation categories in their fixed sampling/application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Translation,
    Erasing,
    VerticalFlip,
    HorizontalFlip,
    PhaseShift,
    EnvelopeDistortion,
}

pub const CATEGORY_ORDER: [Category; 6] = [
    Category::Translation,
    Category::Erasing,
    Category::VerticalFlip,
    Category::HorizontalFlip,
    Category::PhaseShift,
    Category::EnvelopeDistortion,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Categories eligible for sampling; order of this list is irrelevant,
    /// sampling always walks `CATEGORY_ORDER`.
    pub enabled: Vec<Category>,
    /// Probability of skipping each enabled category independently.
    pub skip_probability: f64,
    /// Maximum |shift| per axis as a fraction of that axis.
    pub translation_max_fraction: f64,
    /// Erased rectangle edge lengths as fractions of the patch edges.
    pub erase_min_fraction: f64,
    pub erase_max_fraction: f64,
    /// Fill for vacated / erased pixels (patches are normalized to [0,1],
    /// so 0.5 is the neutral value).
    pub fill_value: f64,
    /// Target standard deviation of the envelope noise field n(t).
    pub envelope_noise_std: f64,
    /// Low-pass cutoff for n(t) as a fraction of Nyquist.
    pub envelope_noise_cutoff: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: CATEGORY_ORDER.to_vec(),
            skip_probability: 0.5,
            translation_max_fraction: 0.2,
            erase_min_fraction: 0.02,
            erase_max_fraction: 0.1,
            fill_value: 0.5,
            envelope_noise_std: 0.2,
            envelope_noise_cutoff: 0.1,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.skip_probability) {
            return Err(Error::InvalidArgument(format!(
                "skip_probability {} outside [0, 1]",
                self.skip_probability
            )));
        }
        if !(0.0..=1.0).contains(&self.translation_max_fraction) {
            return Err(Error::InvalidArgument(format!(
                "translation_max_fraction {} outside [0, 1]",
                self.translation_max_fraction
            )));
        }
        if self.erase_min_fraction < 0.0
            || self.erase_max_fraction > 1.0
            || self.erase_min_fraction > self.erase_max_fraction
        {
            return Err(Error::InvalidArgument(format!(
                "erase fractions [{}, {}] invalid",
                self.erase_min_fraction, self.erase_max_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.envelope_noise_std) {
            return Err(Error::InvalidArgument(format!(
                "envelope_noise_std {} outside [0, 1)",
                self.envelope_noise_std
            )));
        }
        if !(self.envelope_noise_cutoff > 0.0 && self.envelope_noise_cutoff <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "envelope_noise_cutoff {} outside (0, 1]",
                self.envelope_noise_cutoff
            )));
        }
        if !self.fill_value.is_finite() {
            return Err(Error::NonFinite("fill_value".into()));
        }
        Ok(())
    }
}

/// One concrete, fully parameterized transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    /// Shift content by (frac * axis) pixels, positive moves content toward
    /// higher indices; vacated pixels take `fill_value`.
    Translate { frac_axial: f64, frac_lateral: f64 },
    /// Erase a rectangle. Sizes and position are fractions; the rectangle
    /// always lies fully inside the patch.
    Erase { frac_h: f64, frac_w: f64, pos_h: f64, pos_w: f64 },
    VerticalFlip,
    HorizontalFlip,
    /// Rotate every column's analytic signal by the same angle.
    PhaseShift { theta: f64 },
    /// Multiply every column's analytic signal by the same `1 + n(t)`;
    /// the noise realization is reproduced from `noise_seed`.
    EnvelopeDistort { noise_seed: u64 },
}

/// Draw one transform per enabled category, each independently skipped with
/// `config.skip_probability`, in the fixed category order.
pub fn sample_augmentation(config: &AugmentationConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Transform>> {
    config.validate()?;
    let mut plan = Vec::new();
    for cat in CATEGORY_ORDER {
        if !config.enabled.contains(&cat) {
            continue;
        }
        let skip: f64 = rng.gen();
        if skip < config.skip_probability {
            continue;
        }
        let t = match cat {
            Category::Translation => {
                let m = config.translation_max_fraction;
                Transform::Translate {
                    frac_axial: rng.gen_range(-m..=m),
                    frac_lateral: rng.gen_range(-m..=m),
                }
            }
            Category::Erasing => Transform::Erase {
                frac_h: rng.gen_range(config.erase_min_fraction..=config.erase_max_fraction),
                frac_w: rng.gen_range(config.erase_min_fraction..=config.erase_max_fraction),
                pos_h: rng.gen(),
                pos_w: rng.gen(),
            },
            Category::VerticalFlip => Transform::VerticalFlip,
            Category::HorizontalFlip => Transform::HorizontalFlip,
            Category::PhaseShift => Transform::PhaseShift {
                theta: rng.gen_range(0.0..std::f64::consts::TAU),
            },
            Category::EnvelopeDistortion => Transform::EnvelopeDistort { noise_seed: rng.gen() },
        };
        plan.push(t);
    }
    Ok(plan)
}

/// Apply a plan in order.
pub fn apply_augmentations(patch: &Patch, plan: &[Transform], config: &AugmentationConfig) -> Result<Patch> {
    let mut out = patch.clone();
    for t in plan {
        out = apply_one(&out, t, config)?;
    }
    Ok(out)
}

fn apply_one(patch: &Patch, transform: &Transform, config: &AugmentationConfig) -> Result<Patch> {
    match *transform {
        Transform::Translate { frac_axial, frac_lateral } => {
            translate(patch, frac_axial, frac_lateral, config.fill_value)
        }
        Transform::Erase { frac_h, frac_w, pos_h, pos_w } => {
            erase(patch, frac_h, frac_w, pos_h, pos_w, config.fill_value)
        }
        Transform::VerticalFlip => Ok(vflip(patch)),
        Transform::HorizontalFlip => Ok(hflip(patch)),
        Transform::PhaseShift { theta } => phase_shift(patch, theta),
        Transform::EnvelopeDistort { noise_seed } => envelope_distort(
            patch,
            noise_seed,
            config.envelope_noise_std,
            config.envelope_noise_cutoff,
        ),
    }
}

/// Integer-pixel translation; fractions are rounded to pixels per axis.
pub fn translate(patch: &Patch, frac_axial: f64, frac_lateral: f64, fill: f64) -> Result<Patch> {
    let (h, w) = (patch.height(), patch.width());
    let dy = (frac_axial * h as f64).round() as isize;
    let dx = (frac_lateral * w as f64).round() as isize;
    let mut out = Patch::filled(h, w, fill)?;
    for y in 0..h as isize {
        let sy = y - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w as isize {
            let sx = x - dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            out.set(y as usize, x as usize, patch.get(sy as usize, sx as usize));
        }
    }
    Ok(out)
}

/// Rectangle erase; the rectangle is placed fully inside the patch.
pub fn erase(patch: &Patch, frac_h: f64, frac_w: f64, pos_h: f64, pos_w: f64, fill: f64) -> Result<Patch> {
    let (h, w) = (patch.height(), patch.width());
    let rh = ((frac_h * h as f64).round() as usize).clamp(1, h);
    let rw = ((frac_w * w as f64).round() as usize).clamp(1, w);
    let top = ((pos_h * (h - rh + 1) as f64).floor() as usize).min(h - rh);
    let left = ((pos_w * (w - rw + 1) as f64).floor() as usize).min(w - rw);
    let mut out = patch.clone();
    for y in top..top + rh {
        for x in left..left + rw {
            out.set(y, x, fill);
        }
    }
    Ok(out)
}

/// Flip rows (axial direction).
pub fn vflip(patch: &Patch) -> Patch {
    let (h, w) = (patch.height(), patch.width());
    let mut out = patch.clone();
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, patch.get(h - 1 - y, x));
        }
    }
    out
}

/// Flip columns (lateral direction).
pub fn hflip(patch: &Patch) -> Patch {
    let (h, w) = (patch.height(), patch.width());
    let mut out = patch.clone();
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, patch.get(y, w - 1 - x));
        }
    }
    out
}

/// Rotate each column's analytic signal by `theta` and keep the real part.
/// The same angle is used for every column, and |a * e^{i theta}| = |a|, so
/// per-column envelopes are preserved.
pub fn phase_shift(patch: &Patch, theta: f64) -> Result<Patch> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("phase shift angle".into()));
    }
    let rot = Complex64::new(theta.cos(), theta.sin());
    let mut out = patch.clone();
    let mut col_buf = vec![0.0f64; patch.height()];
    for c in 0..patch.width() {
        let col = patch.column(c);
        let a = analytic_signal(&col)?;
        for (t, z) in a.samples.iter().enumerate() {
            col_buf[t] = (z * rot).re;
        }
        out.set_column(c, &col_buf);
    }
    Ok(out)
}

/// Reproducible envelope noise field: white Gaussian noise, low-passed by
/// zeroing DFT bins above `cutoff * Nyquist` (symmetrically, so the field
/// stays real), rescaled to `target_std`, clamped to |n| <= 0.9 so the
/// multiplier `1 + n` stays positive.
pub fn envelope_noise(len: usize, noise_seed: u64, target_std: f64, cutoff: f64) -> Vec<f64> {
    let mut rng = rng::substream(noise_seed, "envelope-noise");
    let white: Vec<f64> = (0..len).map(|_| rng::gaussian(&mut rng)).collect();
    let mut spectrum = fft_forward(&white);
    let max_bin = cutoff * (len as f64 / 2.0);
    for (k, v) in spectrum.iter_mut().enumerate() {
        let freq_index = k.min(len - k) as f64;
        if freq_index > max_bin {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    fft_inverse(&mut spectrum);
    let mut n: Vec<f64> = spectrum.iter().map(|z| z.re).collect();
    let mean = n.iter().sum::<f64>() / len as f64;
    let std = (n.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / len as f64).sqrt();
    if std > 0.0 {
        let scale = target_std / std;
        for v in n.iter_mut() {
            *v *= scale;
        }
    } else {
        for v in n.iter_mut() {
            *v = 0.0;
        }
    }
    for v in n.iter_mut() {
        *v = v.clamp(-0.9, 0.9);
    }
    n
}

/// Multiply each column's analytic signal by `1 + n(t)` and keep the real
/// part. The same field is used for every column; since `1 + n > 0`, the
/// instantaneous phase of each column is unchanged.
pub fn envelope_distort(patch: &Patch, noise_seed: u64, target_std: f64, cutoff: f64) -> Result<Patch> {
    let n = envelope_noise(patch.height(), noise_seed, target_std, cutoff);
    let mut out = patch.clone();
    let mut col_buf = vec![0.0f64; patch.height()];
    for c in 0..patch.width() {
        let col = patch.column(c);
        let a = analytic_signal(&col)?;
        for (t, z) in a.samples.iter().enumerate() {
            col_buf[t] = (z * (1.0 + n[t])).re;
        }
        out.set_column(c, &col_buf);
    }
    Ok(out)
}
