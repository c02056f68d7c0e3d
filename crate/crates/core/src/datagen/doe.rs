use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::physics::BubbleModel;

/// Inclusive, uniformly spaced levels over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelRange {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl LevelRange {
    pub fn new(lo: f64, hi: f64, count: usize) -> Self {
        Self { lo, hi, count }
    }

    pub fn levels(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.lo];
        }
        let step = (self.hi - self.lo) / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                if i == self.count - 1 {
                    self.hi
                } else {
                    self.lo + step * i as f64
                }
            })
            .collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        let tol = 1e-9 * self.hi.abs().max(self.lo.abs());
        x >= self.lo - tol && x <= self.hi + tol
    }
}

/// Design of experiments for one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoeSpec {
    /// Initial radii (m).
    pub r0_values: Vec<f64>,
    /// Pressure amplitudes (Pa).
    pub amp: LevelRange,
    /// Driving frequencies (Hz).
    pub freq: LevelRange,
    /// Simulated horizon (s).
    pub t_max: f64,
    /// Samples per trajectory, both endpoints included.
    pub n_points: usize,
    pub model: BubbleModel,
}

/// One point of the design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoePoint {
    pub r0: f64,
    pub amp: f64,
    pub freq: f64,
}

impl DoeSpec {
    /// Training design with a single 50 µm bubble: 10 amplitudes in
    /// [1, 10]·10⁵ Pa and 300 frequencies in [200, 2000] kHz.
    pub fn single_radius(model: BubbleModel) -> Self {
        Self {
            r0_values: vec![50e-6],
            amp: LevelRange::new(1e5, 1e6, 10),
            freq: LevelRange::new(200e3, 2000e3, 300),
            t_max: default_horizon(model),
            n_points: 2000,
            model,
        }
    }

    /// Interpolation/extrapolation study: amplitudes {5.5, 11}·10⁵ Pa and
    /// 20 frequencies in [600, 2500] kHz.
    pub fn interpolation_study(model: BubbleModel) -> Self {
        Self {
            r0_values: vec![50e-6],
            amp: LevelRange::new(5.5e5, 11e5, 2),
            freq: LevelRange::new(600e3, 2500e3, 20),
            t_max: default_horizon(model),
            n_points: 2000,
            model,
        }
    }

    /// Five radii 50–90 µm, 10 amplitudes × 30 frequencies each.
    pub fn multi_radius() -> Self {
        Self {
            r0_values: vec![50e-6, 60e-6, 70e-6, 80e-6, 90e-6],
            amp: LevelRange::new(1e5, 1e6, 10),
            freq: LevelRange::new(200e3, 2000e3, 30),
            t_max: 55e-6,
            n_points: 2000,
            model: BubbleModel::KellerMiksis,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Invalid(m));
        if self.r0_values.is_empty() {
            return bad("r0_values must not be empty".into());
        }
        if self.r0_values.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return bad("r0_values must be positive".into());
        }
        for (name, r) in [("amp", &self.amp), ("freq", &self.freq)] {
            if r.count < 1 {
                return bad(format!("{name}.count must be >= 1"));
            }
            if !(r.lo <= r.hi) || !r.lo.is_finite() || !r.hi.is_finite() {
                return bad(format!("{name} range must be ordered (lo <= hi)"));
            }
        }
        if self.amp.lo < 0.0 {
            return bad("amplitudes must be non-negative".into());
        }
        if !(self.freq.lo > 0.0) {
            return bad("frequencies must be positive".into());
        }
        if !(self.t_max > 0.0) {
            return bad("t_max must be positive".into());
        }
        if self.n_points < 2 {
            return bad("n_points must be >= 2".into());
        }
        Ok(())
    }

    pub fn cardinality(&self) -> usize {
        self.r0_values.len() * self.amp.count * self.freq.count
    }

    /// Whether an (amp, freq) pair lies inside this design's ranges.
    pub fn covers(&self, amp: f64, freq: f64) -> bool {
        self.amp.contains(amp) && self.freq.contains(freq)
    }
}

/// Horizon used per model: 50 µs for Rayleigh–Plesset, 55 µs for Keller–Miksis.
pub fn default_horizon(model: BubbleModel) -> f64 {
    match model {
        BubbleModel::RayleighPlesset => 50e-6,
        BubbleModel::KellerMiksis => 55e-6,
    }
}

/// Cartesian product of the levels, radius-major then amplitude then frequency.
pub fn build_doe(spec: &DoeSpec) -> Result<Vec<DoePoint>, DatasetError> {
    spec.validate()?;
    let amps = spec.amp.levels();
    let freqs = spec.freq.levels();
    let mut out = Vec::with_capacity(spec.cardinality());
    for &r0 in &spec.r0_values {
        for &amp in &amps {
            for &freq in &freqs {
                out.push(DoePoint { r0, amp, freq });
            }
        }
    }
    Ok(out)
}
