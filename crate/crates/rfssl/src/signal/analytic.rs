//! Analytic signal of a sampled RF line and its envelope/phase split.
//!
//! The analytic signal is built in the frequency domain: take the DFT,
//! keep bin 0 as is, double bins `1..ceil(N/2)-1`, keep the Nyquist bin
//! (even `N`) as is, zero everything above, then invert. The real part of
//! the result reproduces the input up to FFT round-off; the imaginary part
//! is the discrete Hilbert transform of the line.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Analytic signal of one RF line.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticLine {
    pub samples: Vec<Complex64>,
}

/// Envelope, unwrapped phase and instantaneous frequency of one line.
///
/// `inst_frequency` is in radians per sample: central differences of the
/// unwrapped phase in the interior, one-sided differences at the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopePhase {
    pub envelope: Vec<f64>,
    pub phase: Vec<f64>,
    pub inst_frequency: Vec<f64>,
}

type PlanPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

fn plans(n: usize) -> PlanPair {
    static CACHE: OnceLock<Mutex<HashMap<usize, PlanPair>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("fft plan cache poisoned");
    map.entry(n)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
        })
        .clone()
}

/// Forward FFT of a real line into a complex spectrum.
pub(crate) fn fft_forward(line: &[f64]) -> Vec<Complex64> {
    let n = line.len();
    let (fwd, _) = plans(n);
    let mut buf: Vec<Complex64> = line.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fwd.process(&mut buf);
    buf
}

/// Inverse FFT including the 1/N normalization rustfft leaves out.
pub(crate) fn fft_inverse(spectrum: &mut [Complex64]) {
    let n = spectrum.len();
    let (_, inv) = plans(n);
    inv.process(spectrum);
    let scale = 1.0 / n as f64;
    for v in spectrum.iter_mut() {
        *v *= scale;
    }
}

/// Analytic signal of `line` via the DFT construction.
///
/// Requires at least 4 samples; shorter lines have no usable band structure.
pub fn analytic_signal(line: &[f64]) -> Result<AnalyticLine> {
    let n = line.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!(
            "analytic_signal needs >= 4 samples, got {n}"
        )));
    }
    if line.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("analytic_signal input".into()));
    }
    let mut spectrum = fft_forward(line);
    let half = n / 2;
    // Bin 0 stays. For even n the Nyquist bin `half` stays. Positive bins
    // double, the rest vanish.
    for (k, v) in spectrum.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == half) {
            // unchanged
        } else if k < half || (n % 2 == 1 && k <= (n - 1) / 2) {
            *v *= 2.0;
        } else {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    fft_inverse(&mut spectrum);
    Ok(AnalyticLine { samples: spectrum })
}

/// Envelope, unwrapped phase, and instantaneous frequency of an analytic
/// line. Phase at samples with zero modulus is 0 by convention.
pub fn envelope_and_phase(analytic: &AnalyticLine) -> Result<EnvelopePhase> {
    let n = analytic.samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "envelope_and_phase needs >= 2 samples, got {n}"
        )));
    }
    let envelope: Vec<f64> = analytic.samples.iter().map(|z| z.norm()).collect();
    let raw: Vec<f64> = analytic
        .samples
        .iter()
        .map(|z| if z.re == 0.0 && z.im == 0.0 { 0.0 } else { z.arg() })
        .collect();

    // Unwrap by accumulating 2*pi offsets whenever the raw phase jumps by
    // more than pi between neighbors.
    let mut phase = Vec::with_capacity(n);
    let mut offset = 0.0f64;
    phase.push(raw[0]);
    for i in 1..n {
        let mut delta = raw[i] - raw[i - 1];
        while delta > std::f64::consts::PI {
            delta -= std::f64::consts::TAU;
            offset -= std::f64::consts::TAU;
        }
        while delta < -std::f64::consts::PI {
            delta += std::f64::consts::TAU;
            offset += std::f64::consts::TAU;
        }
        phase.push(raw[i] + offset);
    }

    let mut inst_frequency = vec![0.0f64; n];
    inst_frequency[0] = phase[1] - phase[0];
    inst_frequency[n - 1] = phase[n - 1] - phase[n - 2];
    for i in 1..n - 1 {
        inst_frequency[i] = (phase[i + 1] - phase[i - 1]) / 2.0;
    }

    Ok(EnvelopePhase {
        envelope,
        phase,
        inst_frequency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    /// O(N^2) reference: build the Hilbert kernel by a naive inverse-DFT sum
    /// of the -j*sgn weights, then circularly convolve. Independent of the
    /// FFT path above.
    fn hilbert_oracle(line: &[f64]) -> Vec<f64> {
        let n = line.len();
        let mut kernel = vec![0.0f64; n];
        for (m, km) in kernel.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..n {
                let w = if k == 0 || (n % 2 == 0 && k == n / 2) {
                    0.0
                } else if k < (n + 1) / 2 {
                    1.0
                } else {
                    -1.0
                };
                let ang = TAU * (k as f64) * (m as f64) / n as f64;
                // -j * sgn weight, inverse transform direction.
                acc += Complex64::new(0.0, -w) * Complex64::new(ang.cos(), ang.sin());
            }
            *km = acc.re / n as f64;
        }
        let mut out = vec![0.0f64; n];
        for (t, ot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, &x) in line.iter().enumerate() {
                acc += x * kernel[(t + n - m) % n];
            }
            *ot = acc;
        }
        out
    }

    fn test_line(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, "analytic-test");
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn rejects_short_and_nonfinite_lines() {
        assert!(analytic_signal(&[1.0, 2.0, 3.0]).is_err());
        assert!(analytic_signal(&[1.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn real_part_round_trips() {
        for n in [8usize, 64, 255, 256] {
            let line = test_line(n, n as u64);
            let a = analytic_signal(&line).unwrap();
            let max_err = line
                .iter()
                .zip(&a.samples)
                .map(|(x, z)| (x - z.re).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 1e-8, "round-trip error {max_err:.3e} at n={n}");
        }
    }

    #[test]
    fn imaginary_part_matches_quadratic_kernel_oracle() {
        for n in [16usize, 64, 193, 256] {
            let line = test_line(n, 1000 + n as u64);
            let a = analytic_signal(&line).unwrap();
            let want = hilbert_oracle(&line);
            let max_err = want
                .iter()
                .zip(&a.samples)
                .map(|(w, z)| (w - z.im).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 1e-8, "kernel oracle error {max_err:.3e} at n={n}");
        }
    }

    #[test]
    fn am_tone_envelope_and_frequency() {
        // Amplitude-modulated tone: a(t) = 1 + 0.5 cos(2 pi * 2 t / N),
        // carrier 16 cycles over N = 512 samples. The modulation is far
        // below the carrier, so the analytic envelope tracks a(t).
        let n = 512usize;
        let carrier = 16.0;
        let line: Vec<f64> = (0..n)
            .map(|t| {
                let a = 1.0 + 0.5 * (TAU * 2.0 * t as f64 / n as f64).cos();
                a * (TAU * carrier * t as f64 / n as f64).cos()
            })
            .collect();
        let a = analytic_signal(&line).unwrap();
        let ep = envelope_and_phase(&a).unwrap();

        let margin = n / 20; // ignore 5% at each edge
        let expected_freq = TAU * carrier / n as f64;
        for t in margin..n - margin {
            let amp = 1.0 + 0.5 * (TAU * 2.0 * t as f64 / n as f64).cos();
            assert!(
                (ep.envelope[t] - amp).abs() < 2e-2,
                "envelope off at t={t}: {} vs {amp}",
                ep.envelope[t]
            );
            assert!(
                (ep.inst_frequency[t] - expected_freq).abs() < 1e-3,
                "inst freq off at t={t}: {} vs {expected_freq}",
                ep.inst_frequency[t]
            );
        }
    }

    #[test]
    fn zero_line_gives_zero_envelope_and_phase() {
        let a = analytic_signal(&vec![0.0; 32]).unwrap();
        let ep = envelope_and_phase(&a).unwrap();
        assert!(ep.envelope.iter().all(|&e| e == 0.0));
        assert!(ep.phase.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn unwrapped_phase_has_bounded_steps() {
        for n in [64usize, 257] {
            let line = test_line(n, 5000 + n as u64);
            let a = analytic_signal(&line).unwrap();
            let ep = envelope_and_phase(&a).unwrap();
            for i in 1..n {
                let d = (ep.phase[i] - ep.phase[i - 1]).abs();
                assert!(d <= PI + 1e-12, "phase step {d} > pi at {i} (n={n})");
            }
        }
    }

    #[test]
    fn odd_length_lines_are_supported() {
        let line = test_line(101, 9);
        let a = analytic_signal(&line).unwrap();
        let max_err = line
            .iter()
            .zip(&a.samples)
            .map(|(x, z)| (x - z.re).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-8);
    }
}
