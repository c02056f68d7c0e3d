//! Governing equations for a single spherical bubble.
//!
//! Everything here works in non-dimensional units: radius scaled by the
//! initial radius `a = R0`, time by the horizon `tau = t_max`, pressure by
//! `P* = n · rho · a² / tau²`. With the default choice of `n` the pressure
//! scale equals the ambient pressure, so forcing values stay O(1–10).

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::scalar::Scalar;

/// Polytropic gas law exponent used when none is configured.
pub const DEFAULT_POLYTROPIC: f64 = 1.4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("invalid parameter {name} = {value}: {reason}")]
    Domain {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("bubble radius reached non-positive value {r_bar}")]
    Singularity { r_bar: f64 },
    #[error("Keller–Miksis denominator vanished ({denominator:e}) at r_bar={r_bar}, rdot_bar={rdot_bar}")]
    Degenerate {
        denominator: f64,
        r_bar: f64,
        rdot_bar: f64,
    },
}

fn domain(name: &'static str, value: f64, reason: &'static str) -> PhysicsError {
    PhysicsError::Domain {
        name,
        value,
        reason,
    }
}

/// Which bubble equation drives the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BubbleModel {
    #[serde(rename = "RP")]
    RayleighPlesset,
    #[serde(rename = "KM")]
    KellerMiksis,
}

impl std::fmt::Display for BubbleModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BubbleModel::RayleighPlesset => f.write_str("RP"),
            BubbleModel::KellerMiksis => f.write_str("KM"),
        }
    }
}

/// Liquid and gas constants in SI units.
///
/// Defaults describe water at roughly 20 °C with an adiabatic gas
/// (`k = 1.4`). `p_g0 = None` selects the mechanical-equilibrium gas
/// pressure for whichever initial radius is being simulated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidParams {
    /// Liquid density (kg/m³).
    pub rho: f64,
    /// Dynamic viscosity (Pa·s).
    pub mu: f64,
    /// Surface tension (N/m).
    pub surface_tension: f64,
    /// Sound speed in the liquid (m/s).
    pub sound_speed: f64,
    /// Ambient pressure (Pa).
    pub p0: f64,
    /// Polytropic exponent.
    pub k: f64,
    /// Initial gas pressure (Pa); equilibrium value when absent.
    #[serde(default)]
    pub p_g0: Option<f64>,
}

impl Default for FluidParams {
    fn default() -> Self {
        Self {
            rho: 1000.0,
            mu: 1.0e-3,
            surface_tension: 0.0728,
            sound_speed: 1500.0,
            p0: 101_325.0,
            k: DEFAULT_POLYTROPIC,
            p_g0: None,
        }
    }
}

impl FluidParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let positive = |name, v: f64| {
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(domain(name, v, "must be strictly positive"))
            }
        };
        let non_negative = |name, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(domain(name, v, "must be non-negative and finite"))
            }
        };
        positive("rho", self.rho)?;
        non_negative("mu", self.mu)?;
        non_negative("surface_tension", self.surface_tension)?;
        positive("sound_speed", self.sound_speed)?;
        positive("p0", self.p0)?;
        if !(self.k >= 1.0 && self.k.is_finite()) {
            return Err(domain("k", self.k, "polytropic exponent must be >= 1"));
        }
        if let Some(p) = self.p_g0 {
            positive("p_g0", p)?;
        }
        Ok(())
    }

    /// Gas pressure used for a bubble of initial radius `r0`.
    pub fn gas_pressure_at(&self, r0: f64) -> f64 {
        self.p_g0
            .unwrap_or_else(|| equilibrium_gas_pressure(self, r0))
    }
}

/// Static force balance: the gas pressure that keeps an unforced bubble of
/// radius `r0` at rest under `P∞ = P0`.
pub fn equilibrium_gas_pressure(fluid: &FluidParams, r0: f64) -> f64 {
    fluid.p0 + 2.0 * fluid.surface_tension / r0
}

/// Characteristic scales of the non-dimensionalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    /// Length scale, the initial radius (m).
    pub a: f64,
    /// Time scale, the simulated horizon (s).
    pub tau: f64,
    /// Pressure scale (Pa).
    pub p_star: f64,
    /// Dimensionless constant `n` in `P* = n rho a² / tau²`.
    pub n_scale: f64,
}

/// Scales with `n` chosen so that `P* = P0`.
pub fn make_scales(r0: f64, t_max: f64, fluid: &FluidParams) -> Result<Scales, PhysicsError> {
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(domain("r0", r0, "initial radius must be positive"));
    }
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(domain("t_max", t_max, "horizon must be positive"));
    }
    fluid.validate()?;
    let inertial = fluid.rho * r0 * r0 / (t_max * t_max);
    Ok(Scales {
        a: r0,
        tau: t_max,
        p_star: fluid.p0,
        n_scale: fluid.p0 / inertial,
    })
}

impl Scales {
    /// Scales for an explicitly chosen `n`.
    pub fn with_n_scale(a: f64, tau: f64, rho: f64, n_scale: f64) -> Result<Self, PhysicsError> {
        if !(a > 0.0) {
            return Err(domain("a", a, "length scale must be positive"));
        }
        if !(tau > 0.0) {
            return Err(domain("tau", tau, "time scale must be positive"));
        }
        if !(n_scale > 0.0) {
            return Err(domain("n_scale", n_scale, "must be positive"));
        }
        Ok(Self {
            a,
            tau,
            p_star: n_scale * rho * a * a / (tau * tau),
            n_scale,
        })
    }

    pub fn velocity_scale(&self) -> f64 {
        self.a / self.tau
    }

    pub fn radius_to_si(&self, r_bar: f64) -> f64 {
        r_bar * self.a
    }
    pub fn radius_from_si(&self, r: f64) -> f64 {
        r / self.a
    }
    pub fn velocity_to_si(&self, rdot_bar: f64) -> f64 {
        rdot_bar * self.velocity_scale()
    }
    pub fn velocity_from_si(&self, rdot: f64) -> f64 {
        rdot / self.velocity_scale()
    }
    pub fn time_to_si(&self, t_bar: f64) -> f64 {
        t_bar * self.tau
    }
    pub fn time_from_si(&self, t: f64) -> f64 {
        t / self.tau
    }
    pub fn pressure_to_si(&self, p_bar: f64) -> f64 {
        p_bar * self.p_star
    }
    pub fn pressure_from_si(&self, p: f64) -> f64 {
        p / self.p_star
    }
}

/// Reynolds, Weber and Mach numbers plus the gas-pressure coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionlessGroups {
    pub re: f64,
    pub we: f64,
    pub mach: f64,
    /// `n · P_G0 / P*`.
    pub pg0_ratio: f64,
    pub n_scale: f64,
    pub k: f64,
}

pub fn dimensionless_groups(
    fluid: &FluidParams,
    scales: &Scales,
) -> Result<DimensionlessGroups, PhysicsError> {
    fluid.validate()?;
    let Scales {
        a,
        tau,
        p_star,
        n_scale,
    } = *scales;
    if !(a > 0.0 && tau > 0.0 && p_star > 0.0) {
        return Err(domain(
            "scales",
            a.min(tau).min(p_star),
            "scales must be positive",
        ));
    }
    // mu = 0 or S = 0 yields an infinite group, which zeroes its term.
    Ok(DimensionlessGroups {
        re: fluid.rho * a * a / (fluid.mu * tau),
        we: fluid.rho * a * a * a / (fluid.surface_tension * tau * tau),
        mach: a / (tau * fluid.sound_speed),
        pg0_ratio: n_scale * fluid.gas_pressure_at(a) / p_star,
        n_scale,
        k: fluid.k,
    })
}

/// Non-dimensional gas pressure `n P_G0/P* · r̄^(−3k)`.
pub fn gas_pressure(r_bar: f64, groups: &DimensionlessGroups) -> Result<f64, PhysicsError> {
    if !(r_bar > 0.0) {
        return Err(PhysicsError::Singularity { r_bar });
    }
    Ok(groups.pg0_ratio * r_bar.powf(-3.0 * groups.k))
}

/// Non-dimensional radius and wall velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BubbleState {
    pub r_bar: f64,
    pub rdot_bar: f64,
}

impl BubbleState {
    pub const EQUILIBRIUM: BubbleState = BubbleState {
        r_bar: 1.0,
        rdot_bar: 0.0,
    };

    pub fn to_array(self) -> [f64; 2] {
        [self.r_bar, self.rdot_bar]
    }
}

impl From<[f64; 2]> for BubbleState {
    fn from(y: [f64; 2]) -> Self {
        Self {
            r_bar: y[0],
            rdot_bar: y[1],
        }
    }
}

#[inline]
fn check_radius<S: Scalar>(r: S) -> Result<(), PhysicsError> {
    let v = r.value();
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(PhysicsError::Singularity { r_bar: v })
    }
}

#[inline]
fn inv_or_zero(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        1.0 / x
    }
}

/// Rayleigh–Plesset right-hand side `[Ṙ̄, R̈̄]`.
pub fn rp_rhs<S: Scalar>(
    y: [S; 2],
    p_bar: f64,
    g: &DimensionlessGroups,
) -> Result<[S; 2], PhysicsError> {
    let [r, v] = y;
    check_radius(r)?;
    let inv_r = S::cst(1.0) / r;
    let gas = r.powf(-3.0 * g.k).scale(g.pg0_ratio);
    let visc = (v * inv_r).scale(4.0 * inv_or_zero(g.re));
    let tension = inv_r.scale(2.0 * inv_or_zero(g.we));
    let acc = (gas - S::cst(g.n_scale * p_bar) - visc - tension - (v * v).scale(1.5)) * inv_r;
    Ok([v, acc])
}

/// Keller–Miksis right-hand side `[Ṙ̄, R̈̄]`.
///
/// `dp_bar` is the non-dimensional rate of the far-field pressure.
pub fn km_rhs<S: Scalar>(
    y: [S; 2],
    p_bar: f64,
    dp_bar: f64,
    g: &DimensionlessGroups,
) -> Result<[S; 2], PhysicsError> {
    let [r, v] = y;
    check_radius(r)?;
    let m = g.mach;
    let inv_re = inv_or_zero(g.re);
    let inv_we = inv_or_zero(g.we);
    let one = S::cst(1.0);
    let inv_r = one / r;
    let gas = r.powf(-3.0 * g.k).scale(g.pg0_ratio);

    // Same association order as rp_rhs so the equilibrium cancels exactly.
    let pressure_bracket = gas
        - S::cst(g.n_scale * p_bar)
        - (v * inv_r).scale(4.0 * inv_re)
        - inv_r.scale(2.0 * inv_we);
    let rate_bracket = (gas * v).scale(-3.0 * g.k)
        + (v * inv_r).scale(2.0 * inv_we)
        + (v * v * inv_r).scale(4.0 * inv_re)
        - r.scale(g.n_scale * dp_bar);
    let numerator = (one + v.scale(m)) * pressure_bracket + rate_bracket.scale(m)
        - (one - v.scale(m / 3.0)) * (v * v).scale(1.5);
    let denominator = (one - v.scale(m)) * r + S::cst(4.0 * m * inv_re);
    let dv = denominator.value();
    if !(dv.abs() > 1e-300) || !dv.is_finite() {
        return Err(PhysicsError::Degenerate {
            denominator: dv,
            r_bar: r.value(),
            rdot_bar: v.value(),
        });
    }
    Ok([v, numerator / denominator])
}

/// Analytic sinusoidal forcing `P∞ = P0 + amp sin(2π f t)` in
/// non-dimensional time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidalForcing {
    /// `P0 / P*`.
    pub mean_bar: f64,
    /// `amp / P*`.
    pub amp_bar: f64,
    /// Angular frequency in units of `1/tau`.
    pub omega_bar: f64,
}

impl SinusoidalForcing {
    pub fn new(amp: f64, freq: f64, fluid: &FluidParams, scales: &Scales) -> Self {
        Self {
            mean_bar: fluid.p0 / scales.p_star,
            amp_bar: amp / scales.p_star,
            omega_bar: 2.0 * PI * freq * scales.tau,
        }
    }

    pub fn constant(p_bar: f64) -> Self {
        Self {
            mean_bar: p_bar,
            amp_bar: 0.0,
            omega_bar: 0.0,
        }
    }

    /// `(P̄∞, dP̄∞/dt̄)` at non-dimensional time `t_bar`.
    #[inline]
    pub fn eval(&self, t_bar: f64) -> (f64, f64) {
        let (s, c) = (self.omega_bar * t_bar).sin_cos();
        (
            self.mean_bar + self.amp_bar * s,
            self.amp_bar * self.omega_bar * c,
        )
    }
}

/// Everything needed to evaluate the bubble ODE at any time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BubbleSystem {
    pub model: BubbleModel,
    pub groups: DimensionlessGroups,
    pub forcing: SinusoidalForcing,
}

impl BubbleSystem {
    #[inline]
    pub fn rhs<S: Scalar>(&self, t_bar: f64, y: [S; 2]) -> Result<[S; 2], PhysicsError> {
        let (p, dp) = self.forcing.eval(t_bar);
        self.rhs_forced(p, dp, y)
    }

    /// Right-hand side with the far-field pressure and its rate supplied.
    #[inline]
    pub fn rhs_forced<S: Scalar>(
        &self,
        p: f64,
        dp: f64,
        y: [S; 2],
    ) -> Result<[S; 2], PhysicsError> {
        match self.model {
            BubbleModel::RayleighPlesset => rp_rhs(y, p, &self.groups),
            BubbleModel::KellerMiksis => km_rhs(y, p, dp, &self.groups),
        }
    }
}

/// Forcing signal sampled on a uniform non-dimensional grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureProfile {
    pub t_grid: Vec<f64>,
    pub p_bar: Vec<f64>,
    pub dp_bar: Vec<f64>,
    /// Amplitude (Pa).
    pub amp: f64,
    /// Driving frequency (Hz).
    pub freq: f64,
}

impl PressureProfile {
    pub fn n_points(&self) -> usize {
        self.t_grid.len()
    }
}

/// Uniform grid on `[0, 1]` including both endpoints.
pub fn unit_grid(n_points: usize) -> Vec<f64> {
    let last = (n_points - 1) as f64;
    (0..n_points).map(|i| i as f64 / last).collect()
}

pub fn sinusoidal_pressure(
    amp: f64,
    freq: f64,
    fluid: &FluidParams,
    scales: &Scales,
    n_points: usize,
) -> Result<PressureProfile, PhysicsError> {
    if !(amp >= 0.0 && amp.is_finite()) {
        return Err(domain("amp", amp, "amplitude must be non-negative"));
    }
    if !(freq > 0.0 && freq.is_finite()) {
        return Err(domain("freq", freq, "frequency must be positive"));
    }
    if n_points < 2 {
        return Err(domain(
            "n_points",
            n_points as f64,
            "need at least two samples",
        ));
    }
    let forcing = SinusoidalForcing::new(amp, freq, fluid, scales);
    let t_grid = unit_grid(n_points);
    let (p_bar, dp_bar) = t_grid.iter().map(|&t| forcing.eval(t)).unzip();
    Ok(PressureProfile {
        t_grid,
        p_bar,
        dp_bar,
        amp,
        freq,
    })
}

/// Linear-oscillation estimate of the natural frequency (Hz), ignoring
/// surface tension and viscosity.
pub fn minnaert_frequency(fluid: &FluidParams, r0: f64) -> f64 {
    (3.0 * fluid.k * fluid.p0 / fluid.rho).sqrt() / (2.0 * PI * r0)
}
