//! Error metrics, FFT spectra, peak detection and the interpolation /
//! extrapolation study harness.

mod study;

pub use study::{
    run_study, write_study, ModelPredictor, OracleStub, Predictor, StudyAggregate, StudyReport,
    StudyRow,
};

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;
use thiserror::Error;

use crate::integrator::check_uniform_grid;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("length mismatch: prediction has {pred} points, truth has {truth}")]
    Shape { pred: usize, truth: usize },
    #[error("spectrum needs at least 8 samples, got {0}")]
    TooShort(usize),
    #[error("sampling interval must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("time grid is not uniform: {0}")]
    NonUniform(String),
    #[error("spectrum has no local maxima")]
    NoPeaks,
    #[error("prediction failed: {0}")]
    Predict(String),
    #[error(transparent)]
    Dataset(#[from] crate::datagen::DatasetError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io(path: &Path, source: std::io::Error) -> SpectralError {
    SpectralError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Peaks below this fraction of the largest non-DC magnitude are rounding
/// noise, not maxima.
pub const PEAK_FLOOR: f64 = 1e-6;

/// Half-width (bins) of the window around the driving frequency.
pub const DRIVING_WINDOW: usize = 2;

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, SpectralError> {
    check_len(pred, truth)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

/// Signed error, prediction minus truth.
pub fn abs_error(pred: &[f64], truth: &[f64]) -> Result<Vec<f64>, SpectralError> {
    check_len(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| p - t).collect())
}

fn check_len(pred: &[f64], truth: &[f64]) -> Result<(), SpectralError> {
    if pred.len() != truth.len() {
        return Err(SpectralError::Shape {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Peak {
    pub bin: usize,
    pub freq: f64,
    pub mag: f64,
}

/// One-sided amplitude spectrum: a sinusoid of amplitude `A` centred on a
/// bin shows magnitude `A` there.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub freqs: Vec<f64>,
    pub mags: Vec<f64>,
    /// Bin width (Hz).
    pub resolution: f64,
    /// Number of time samples the spectrum came from.
    pub n_samples: usize,
    pub natural_peak: Option<Peak>,
    pub driving_peak: Option<Peak>,
    /// Natural and driving windows overlap (resonance).
    pub merged: bool,
}

impl SpectrumReport {
    /// Mean-removed signal energy `Σ x²` implied by the magnitudes.
    pub fn energy(&self) -> f64 {
        let n = self.n_samples;
        let last = self.mags.len() - 1;
        let mut e = 0.0;
        for (k, m) in self.mags.iter().enumerate() {
            let edge = k == 0 || (k == last && n % 2 == 0);
            e += if edge { m * m } else { 0.5 * m * m };
        }
        e * n as f64
    }

    pub fn bin_of(&self, freq: f64) -> usize {
        ((freq / self.resolution).round().max(0.0) as usize).min(self.mags.len() - 1)
    }
}

/// Mean-removed FFT magnitude of a uniformly sampled signal with step `dt`.
pub fn fft_spectrum(signal: &[f64], dt: f64) -> Result<SpectrumReport, SpectralError> {
    let n = signal.len();
    if n < 8 {
        return Err(SpectralError::TooShort(n));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SpectralError::BadStep(dt));
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let resolution = 1.0 / (n as f64 * dt);
    let mags = buf[..=half]
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let edge = k == 0 || (k == half && n % 2 == 0);
            let scale = if edge { 1.0 } else { 2.0 };
            scale * c.norm() / n as f64
        })
        .collect();
    Ok(SpectrumReport {
        freqs: (0..=half).map(|k| k as f64 * resolution).collect(),
        mags,
        resolution,
        n_samples: n,
        natural_peak: None,
        driving_peak: None,
        merged: false,
    })
}

/// [`fft_spectrum`] on an explicit time grid (s), which must be uniform.
pub fn fft_spectrum_on_grid(signal: &[f64], t: &[f64]) -> Result<SpectrumReport, SpectralError> {
    if signal.len() != t.len() {
        return Err(SpectralError::Shape {
            pred: signal.len(),
            truth: t.len(),
        });
    }
    if t.len() < 8 {
        return Err(SpectralError::TooShort(t.len()));
    }
    let dt = check_uniform_grid(t).map_err(|e| SpectralError::NonUniform(e.to_string()))?;
    fft_spectrum(signal, dt)
}

/// Local maxima above the noise floor, DC excluded.
pub fn local_maxima(mags: &[f64]) -> Vec<usize> {
    let top = mags.iter().skip(1).cloned().fold(0.0, f64::max);
    let floor = top * PEAK_FLOOR;
    let last = mags.len().saturating_sub(1);
    (1..mags.len())
        .filter(|&i| {
            let m = mags[i];
            m > floor && m > mags[i - 1] && (i == last || m >= mags[i + 1])
        })
        .collect()
}

/// Fill in the natural and driving peaks. The driving peak is the largest
/// local maximum within [`DRIVING_WINDOW`] bins of the hint; the natural
/// peak is the largest one outside it. Without a hint only the natural
/// peak is searched.
pub fn detect_peaks(
    spec: &SpectrumReport,
    driving_hint: Option<f64>,
) -> Result<SpectrumReport, SpectralError> {
    let maxima = local_maxima(&spec.mags);
    if maxima.is_empty() {
        return Err(SpectralError::NoPeaks);
    }
    let peak = |bin: usize| Peak {
        bin,
        freq: spec.freqs[bin],
        mag: spec.mags[bin],
    };
    let largest = |it: &mut dyn Iterator<Item = usize>| {
        it.fold(None, |best: Option<usize>, i| match best {
            Some(b) if spec.mags[b] >= spec.mags[i] => Some(b),
            _ => Some(i),
        })
    };
    let hint_bin = driving_hint.map(|f| spec.bin_of(f));
    let inside = |i: usize| hint_bin.is_some_and(|h| i.abs_diff(h) <= DRIVING_WINDOW);
    let driving = largest(&mut maxima.iter().copied().filter(|&i| inside(i)));
    let natural = largest(&mut maxima.iter().copied().filter(|&i| !inside(i)));
    let merged = match (natural, hint_bin) {
        (Some(n), Some(h)) => n.abs_diff(h) <= 2 * DRIVING_WINDOW,
        _ => false,
    };
    let mut out = spec.clone();
    out.driving_peak = driving.map(peak);
    out.natural_peak = natural.map(peak);
    out.merged = merged;
    Ok(out)
}
