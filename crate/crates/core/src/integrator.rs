//! Dormand–Prince RK5(4)7M integration and the discrete one-step residual
//! used by the physics loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{BubbleModel, BubbleSystem, PhysicsError, Scales};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrationError {
    #[error("right-hand side failed at grid index {index} (t = {t}): {source}")]
    Rhs {
        index: usize,
        t: f64,
        #[source]
        source: PhysicsError,
    },
    #[error("step size underflow at t = {t} (dt = {dt:e}); problem too stiff for the tolerance")]
    Stiffness { t: f64, dt: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("invalid integration request: {0}")]
    Invalid(String),
}

/// Coefficients of an explicit embedded Runge–Kutta pair.
#[derive(Debug, Clone, Copy)]
pub struct ButcherTableau {
    pub c: [f64; 7],
    pub a: [[f64; 7]; 7],
    pub b5: [f64; 7],
    pub b4: [f64; 7],
}

/// The Dormand–Prince RK5(4)7M pair.
pub const DOPRI5: ButcherTableau = ButcherTableau {
    c: [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0],
    a: [
        [0.0; 7],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
            0.0,
        ],
    ],
    b5: [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ],
    b4: [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ],
};

/// Continuous-extension weights for 4th-order dense output.
const DENSE: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

impl ButcherTableau {
    /// Largest violation of the row-sum and weight-sum conditions.
    pub fn consistency_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..7 {
            let row: f64 = self.a[i].iter().sum();
            worst = worst.max((row - self.c[i]).abs());
        }
        worst = worst.max((self.b5.iter().sum::<f64>() - 1.0).abs());
        worst.max((self.b4.iter().sum::<f64>() - 1.0).abs())
    }
}

/// Outcome of a single explicit step.
#[derive(Debug, Clone, Copy)]
pub struct RkStep<S, const D: usize> {
    pub y5: [S; D],
    pub y4: [S; D],
    pub k: [[S; D]; 7],
}

#[inline]
fn axpy<S: Scalar, const D: usize>(
    y: &[S; D],
    k: &[[S; D]; 7],
    w: &[f64; 7],
    dt: f64,
    upto: usize,
) -> [S; D] {
    let mut out = *y;
    for (d, o) in out.iter_mut().enumerate() {
        let mut acc = S::cst(0.0);
        for j in 0..upto {
            if w[j] != 0.0 {
                acc = acc + k[j][d].scale(w[j]);
            }
        }
        *o = *o + acc.scale(dt);
    }
    out
}

/// One RK5(4)7M step from `(t, y)` with step `dt`.
pub fn rk_step<S, const D: usize, E, F>(f: F, y: [S; D], t: f64, dt: f64) -> Result<RkStep<S, D>, E>
where
    S: Scalar,
    F: FnMut(f64, [S; D]) -> Result<[S; D], E>,
{
    rk_step_fsal(f, y, t, dt, None)
}

/// Like [`rk_step`] but reuses a known slope at `(t, y)`.
pub fn rk_step_fsal<S, const D: usize, E, F>(
    mut f: F,
    y: [S; D],
    t: f64,
    dt: f64,
    k1: Option<[S; D]>,
) -> Result<RkStep<S, D>, E>
where
    S: Scalar,
    F: FnMut(f64, [S; D]) -> Result<[S; D], E>,
{
    let tab = &DOPRI5;
    let mut k = [[S::cst(0.0); D]; 7];
    k[0] = match k1 {
        Some(k1) => k1,
        None => f(t, y)?,
    };
    for i in 1..7 {
        let yi = axpy(&y, &k, &tab.a[i], dt, i);
        k[i] = f(t + tab.c[i] * dt, yi)?;
    }
    // a[6] == b5, so the last stage state is the 5th-order solution.
    let y5 = axpy(&y, &k, &tab.b5, dt, 7);
    let y4 = axpy(&y, &k, &tab.b4, dt, 7);
    Ok(RkStep { y5, y4, k })
}

/// Fifth-order state of one step from `(t, y)`. Skips the last stage slope,
/// which only the embedded estimate needs.
pub fn rk5_state<S, const D: usize, E, F>(mut f: F, y: [S; D], t: f64, dt: f64) -> Result<[S; D], E>
where
    S: Scalar,
    F: FnMut(f64, [S; D]) -> Result<[S; D], E>,
{
    const A: [[f64; 7]; 7] = DOPRI5.a;
    const B: [f64; 7] = DOPRI5.b5;
    const C: [f64; 7] = DOPRI5.c;
    // Unrolled form of `axpy`: same association order, zero weights skipped.
    macro_rules! comb {
        ($($w:expr => $k:expr),+) => {{
            let mut out = y;
            for d in 0..D {
                let mut acc = S::cst(0.0);
                $(acc = acc + $k[d].scale($w);)+
                out[d] = out[d] + acc.scale(dt);
            }
            out
        }};
    }
    let k1 = f(t, y)?;
    let k2 = f(t + C[1] * dt, comb!(A[1][0] => k1))?;
    let k3 = f(t + C[2] * dt, comb!(A[2][0] => k1, A[2][1] => k2))?;
    let k4 = f(
        t + C[3] * dt,
        comb!(A[3][0] => k1, A[3][1] => k2, A[3][2] => k3),
    )?;
    let k5 = f(
        t + C[4] * dt,
        comb!(A[4][0] => k1, A[4][1] => k2, A[4][2] => k3, A[4][3] => k4),
    )?;
    let k6 = f(
        t + C[5] * dt,
        comb!(A[5][0] => k1, A[5][1] => k2, A[5][2] => k3, A[5][3] => k4, A[5][4] => k5),
    )?;
    Ok(comb!(B[0] => k1, B[2] => k3, B[3] => k4, B[4] => k5, B[5] => k6))
}

/// `y_next − (y + dt Σ b5_j k_j)`: zero when `y_next` is exactly one
/// RK5(4)7M step from `y`.
pub fn residual_operator<S, const D: usize, E, F>(
    y: [S; D],
    y_next: [S; D],
    f: F,
    t: f64,
    dt: f64,
) -> Result<[S; D], E>
where
    S: Scalar,
    F: FnMut(f64, [S; D]) -> Result<[S; D], E>,
{
    let step = rk_step(f, y, t, dt)?;
    let mut g = y_next;
    for d in 0..D {
        g[d] = y_next[d] - step.y5[d];
    }
    Ok(g)
}

/// States recorded on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution<const D: usize> {
    pub t: Vec<f64>,
    pub y: Vec<[f64; D]>,
}

/// Checks that `grid` is strictly increasing with constant spacing.
pub fn check_uniform_grid(grid: &[f64]) -> Result<f64, IntegrationError> {
    if grid.len() < 2 {
        return Err(IntegrationError::Invalid(
            "grid needs at least two nodes".into(),
        ));
    }
    let dt = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(IntegrationError::Invalid("grid must be increasing".into()));
    }
    let scale = grid[0].abs().max(grid[grid.len() - 1].abs()).max(dt);
    for (i, w) in grid.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * scale {
            return Err(IntegrationError::Invalid(format!(
                "grid is not uniform at index {i}"
            )));
        }
    }
    Ok(dt)
}

/// One FSAL RK5(4)7M step per grid interval.
pub fn integrate_fixed<const D: usize, F>(
    mut f: F,
    y0: [f64; D],
    t_grid: &[f64],
) -> Result<Solution<D>, IntegrationError>
where
    F: FnMut(f64, [f64; D]) -> Result<[f64; D], PhysicsError>,
{
    check_uniform_grid(t_grid)?;
    let mut ys = Vec::with_capacity(t_grid.len());
    ys.push(y0);
    let mut y = y0;
    let mut k1: Option<[f64; D]> = None;
    for (i, w) in t_grid.windows(2).enumerate() {
        let (t, dt) = (w[0], w[1] - w[0]);
        let mut stage_t = t;
        let step = rk_step_fsal(
            |ts, ys| {
                stage_t = ts;
                f(ts, ys)
            },
            y,
            t,
            dt,
            k1,
        )
        .map_err(|source| IntegrationError::Rhs {
            index: i,
            t: stage_t,
            source,
        })?;
        y = step.y5;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(IntegrationError::NonFinite { t: w[1] });
        }
        k1 = Some(step.k[6]);
        ys.push(y);
    }
    Ok(Solution {
        t: t_grid.to_vec(),
        y: ys,
    })
}

/// Tolerances and limits for [`integrate_adaptive`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on attempted steps.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    5_000_000
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: default_max_steps(),
        }
    }
}

/// Statistics of an adaptive run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdaptiveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

fn error_norm<const D: usize>(
    y: &[f64; D],
    y5: &[f64; D],
    y4: &[f64; D],
    o: &AdaptiveOptions,
) -> f64 {
    let mut acc = 0.0;
    for d in 0..D {
        let sc = o.atol + o.rtol * y[d].abs().max(y5[d].abs());
        let e = (y5[d] - y4[d]) / sc;
        acc += e * e;
    }
    (acc / D as f64).sqrt()
}

/// Adaptive RK5(4)7M from `output[0]` to `output[last]`, sampled at every
/// node of `output` by dense interpolation of the stage data.
pub fn integrate_adaptive<const D: usize, F>(
    mut f: F,
    y0: [f64; D],
    output: &[f64],
    opts: &AdaptiveOptions,
) -> Result<(Solution<D>, AdaptiveStats), IntegrationError>
where
    F: FnMut(f64, [f64; D]) -> Result<[f64; D], PhysicsError>,
{
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(IntegrationError::Invalid(
            "tolerances must be positive".into(),
        ));
    }
    if output.len() < 2 || output.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(IntegrationError::Invalid(
            "output times must be strictly increasing".into(),
        ));
    }
    let t0 = output[0];
    let t_end = output[output.len() - 1];
    let span = t_end - t0;
    let h_min = 1e-14 * span;

    let mut stats = AdaptiveStats::default();
    let mut eval = |t: f64, y: [f64; D], stats: &mut AdaptiveStats| {
        stats.evaluations += 1;
        f(t, y).map_err(|source| IntegrationError::Rhs {
            index: 0,
            t,
            source,
        })
    };

    let mut t = t0;
    let mut y = y0;
    let mut k1 = eval(t, y, &mut stats)?;
    let mut h = initial_step(&mut eval, t, &y, &k1, span, opts, &mut stats)?;

    let mut ys = Vec::with_capacity(output.len());
    ys.push(y0);
    let mut next_out = 1;

    while next_out < output.len() {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(IntegrationError::Stiffness { t, dt: h });
        }
        let last = t + h >= t_end || (t_end - (t + h)) < h_min;
        if last {
            h = t_end - t;
        }
        let trial = {
            let mut ev = |ts: f64, yy: [f64; D]| eval(ts, yy, &mut stats);
            rk_step_fsal(&mut ev, y, t, h, Some(k1))
        };
        // A stage that leaves the physical domain (for instance a trial
        // radius overshooting through zero) counts as a rejected step.
        let err = match &trial {
            Ok(step) => error_norm(&y, &step.y5, &step.y4, opts),
            Err(IntegrationError::Rhs { .. }) => f64::INFINITY,
            Err(_) => return Err(trial.err().expect("error branch")),
        };
        if !err.is_finite() {
            h *= FAC_MIN;
            stats.rejected += 1;
            if h < h_min {
                return Err(IntegrationError::Stiffness { t, dt: h });
            }
            continue;
        }
        let fac = if err == 0.0 {
            FAC_MAX
        } else {
            (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
        };
        let step = trial.expect("finite error implies a completed step");
        if err <= 1.0 {
            let t_new = if last { t_end } else { t + h };
            while next_out < output.len() && output[next_out] <= t_new {
                let theta = (output[next_out] - t) / h;
                ys.push(dense_eval(&y, &step, h, theta));
                next_out += 1;
            }
            if last {
                // Guard against rounding in the final node comparison.
                while next_out < output.len() {
                    ys.push(step.y5);
                    next_out += 1;
                }
            }
            stats.accepted += 1;
            t = t_new;
            y = step.y5;
            k1 = step.k[6];
            if y.iter().any(|v| !v.is_finite()) {
                return Err(IntegrationError::NonFinite { t });
            }
            h *= fac;
        } else {
            stats.rejected += 1;
            h *= fac.min(1.0);
            if h < h_min {
                return Err(IntegrationError::Stiffness { t, dt: h });
            }
        }
    }
    Ok((
        Solution {
            t: output.to_vec(),
            y: ys,
        },
        stats,
    ))
}

fn initial_step<const D: usize, G>(
    eval: &mut G,
    t: f64,
    y: &[f64; D],
    k1: &[f64; D],
    span: f64,
    o: &AdaptiveOptions,
    stats: &mut AdaptiveStats,
) -> Result<f64, IntegrationError>
where
    G: FnMut(f64, [f64; D], &mut AdaptiveStats) -> Result<[f64; D], IntegrationError>,
{
    let norm = |v: &[f64; D]| {
        let mut s = 0.0;
        for d in 0..D {
            let sc = o.atol + o.rtol * y[d].abs();
            s += (v[d] / sc).powi(2);
        }
        (s / D as f64).sqrt()
    };
    let d0 = norm(y);
    let d1 = norm(k1);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6 * span
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(span);
    let mut y1 = *y;
    for d in 0..D {
        y1[d] += h0 * k1[d];
    }
    let k2 = eval(t + h0, y1, stats)?;
    let mut diff = [0.0; D];
    for d in 0..D {
        diff[d] = k2[d] - k1[d];
    }
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6 * span)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

fn dense_eval<const D: usize>(y: &[f64; D], step: &RkStep<f64, D>, h: f64, theta: f64) -> [f64; D] {
    let s1 = 1.0 - theta;
    let mut out = [0.0; D];
    for d in 0..D {
        let r1 = y[d];
        let r2 = step.y5[d] - y[d];
        let r3 = h * step.k[0][d] - r2;
        let r4 = r2 - h * step.k[6][d] - r3;
        let mut r5 = 0.0;
        for j in 0..7 {
            r5 += DENSE[j] * step.k[j][d];
        }
        r5 *= h;
        out[d] = r1 + theta * (r2 + s1 * (r3 + theta * (r4 + s1 * r5)));
    }
    out
}

/// Provenance attached to a solved bubble trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub r0: f64,
    pub amp: f64,
    pub freq: f64,
    pub model: BubbleModel,
    pub scales: Scales,
}

/// Non-dimensional radius and velocity on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BubbleTrajectory {
    pub t_grid: Vec<f64>,
    pub r_bar: Vec<f64>,
    pub rdot_bar: Vec<f64>,
    pub meta: TrajectoryMeta,
}

impl BubbleTrajectory {
    fn from_solution(sol: Solution<2>, meta: TrajectoryMeta) -> Result<Self, IntegrationError> {
        let (r_bar, rdot_bar): (Vec<f64>, Vec<f64>) = sol.y.iter().map(|y| (y[0], y[1])).unzip();
        if let Some(i) = r_bar.iter().position(|&r| !(r > 0.0)) {
            return Err(IntegrationError::Rhs {
                index: i,
                t: sol.t[i],
                source: PhysicsError::Singularity { r_bar: r_bar[i] },
            });
        }
        Ok(Self {
            t_grid: sol.t,
            r_bar,
            rdot_bar,
            meta,
        })
    }
}

/// Fixed-step solution of a bubble system from `y0`.
pub fn solve_fixed(
    system: &BubbleSystem,
    y0: [f64; 2],
    t_grid: &[f64],
    meta: TrajectoryMeta,
) -> Result<BubbleTrajectory, IntegrationError> {
    let sol = integrate_fixed(|t, y| system.rhs(t, y), y0, t_grid)?;
    BubbleTrajectory::from_solution(sol, meta)
}

/// Adaptive solution of a bubble system resampled onto `t_grid`.
pub fn solve_adaptive(
    system: &BubbleSystem,
    y0: [f64; 2],
    t_grid: &[f64],
    opts: &AdaptiveOptions,
    meta: TrajectoryMeta,
) -> Result<BubbleTrajectory, IntegrationError> {
    check_uniform_grid(t_grid)?;
    let (sol, _) = integrate_adaptive(|t, y| system.rhs(t, y), y0, t_grid, opts)?;
    BubbleTrajectory::from_solution(sol, meta)
}

/// Mean squared one-step residual `‖G‖²` of a trajectory under the system.
pub fn mean_residual_sq(
    system: &BubbleSystem,
    t_grid: &[f64],
    r_bar: &[f64],
    rdot_bar: &[f64],
) -> Result<f64, PhysicsError> {
    let mut acc = 0.0;
    for n in 0..t_grid.len() - 1 {
        let dt = t_grid[n + 1] - t_grid[n];
        let g = residual_operator(
            [r_bar[n], rdot_bar[n]],
            [r_bar[n + 1], rdot_bar[n + 1]],
            |t, y| system.rhs(t, y),
            t_grid[n],
            dt,
        )?;
        acc += g[0] * g[0] + g[1] * g[1];
    }
    Ok(acc / (t_grid.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{
        dimensionless_groups, make_scales, unit_grid, FluidParams, SinusoidalForcing,
    };
    use std::convert::Infallible;

    fn ok<T>(v: T) -> Result<T, Infallible> {
        Ok(v)
    }

    #[test]
    fn rk5_state_matches_full_step() {
        let f = |t: f64, y: [f64; 2]| ok([y[1], -y[0] + t.sin()]);
        for &(y, dt) in &[([1.0, 0.0], 0.1), ([0.3, -2.0], 0.01), ([-5.0, 4.0], 1.3)] {
            let full = rk_step(f, y, 0.7, dt).unwrap();
            assert_eq!(rk5_state(f, y, 0.7, dt).unwrap(), full.y5);
        }
    }

    #[test]
    fn tableau_is_consistent() {
        assert!(
            DOPRI5.consistency_defect() <= 1e-15,
            "{}",
            DOPRI5.consistency_defect()
        );
        assert_eq!(DOPRI5.a[6], DOPRI5.b5);
    }

    #[test]
    fn zero_field_leaves_state() {
        let s = rk_step(|_, _| ok([0.0, 0.0]), [1.5, -2.0], 0.3, 0.1).unwrap();
        assert_eq!(s.y5, [1.5, -2.0]);
        assert_eq!(s.y4, [1.5, -2.0]);
    }

    #[test]
    fn exponential_single_step() {
        let s = rk_step(|_, y: [f64; 1]| ok(y), [1.0], 0.0, 0.1).unwrap();
        // The method's stability polynomial for y' = y is the degree-5 Taylor
        // polynomial plus z^6/600, so one step sits 2.6e-10 above e^0.1.
        let z: f64 = 0.1;
        let poly = 1.0
            + z
            + z * z / 2.0
            + z.powi(3) / 6.0
            + z.powi(4) / 24.0
            + z.powi(5) / 120.0
            + z.powi(6) / 600.0;
        assert!((s.y5[0] - poly).abs() < 1e-15);
        assert!((s.y5[0] - z.exp()).abs() < 3e-10);
    }

    #[test]
    fn oscillator_step_preserves_energy() {
        for &dt in &[0.1, 0.05] {
            let s = rk_step(|_, y: [f64; 2]| ok([y[1], -y[0]]), [1.0, 0.0], 0.0, dt).unwrap();
            let e = s.y5[0] * s.y5[0] + s.y5[1] * s.y5[1];
            assert!(
                (e - 1.0).abs() < 0.1 * dt.powi(6),
                "dt={dt} drift {}",
                e - 1.0
            );
        }
    }

    #[test]
    fn fixed_exponential_endpoint() {
        let grid = unit_grid(2001);
        let sol = integrate_fixed(|_, y: [f64; 1]| Ok(y), [1.0], &grid).unwrap();
        let end = sol.y.last().unwrap()[0];
        assert!((end - std::f64::consts::E).abs() / std::f64::consts::E < 1e-12);
    }

    #[test]
    fn fixed_counts_fsal_evaluations() {
        let grid = unit_grid(101);
        let mut calls = 0usize;
        integrate_fixed(
            |_, y: [f64; 1]| {
                calls += 1;
                Ok([-y[0]])
            },
            [1.0],
            &grid,
        )
        .unwrap();
        assert_eq!(calls, 7 + 6 * 99);
    }

    #[test]
    fn fixed_reports_failing_index() {
        let grid = unit_grid(11);
        let err = integrate_fixed(
            |t, y: [f64; 1]| {
                if t > 0.45 {
                    Err(PhysicsError::Singularity { r_bar: 0.0 })
                } else {
                    Ok(y)
                }
            },
            [1.0],
            &grid,
        )
        .unwrap_err();
        match err {
            IntegrationError::Rhs { index, .. } => assert_eq!(index, 4),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn fixed_rejects_non_uniform_grid() {
        let grid = [0.0, 0.1, 0.3];
        assert!(matches!(
            integrate_fixed(|_, y: [f64; 1]| Ok(y), [1.0], &grid),
            Err(IntegrationError::Invalid(_))
        ));
    }

    #[test]
    fn adaptive_zero_field_is_exact() {
        let grid = unit_grid(50);
        let (sol, stats) = integrate_adaptive(
            |_, _| Ok([0.0, 0.0]),
            [2.0, 3.0],
            &grid,
            &AdaptiveOptions::default(),
        )
        .unwrap();
        assert_eq!(stats.rejected, 0);
        assert!(sol.y.iter().all(|y| *y == [2.0, 3.0]));
    }

    #[test]
    fn adaptive_agrees_with_fine_fixed() {
        // y'' = -y with damping, smooth problem.
        let f = |_: f64, y: [f64; 2]| Ok([y[1], -y[0] - 0.1 * y[1]]);
        let coarse = unit_grid(201);
        let opts = AdaptiveOptions {
            rtol: 1e-10,
            atol: 1e-12,
            ..Default::default()
        };
        let (ad, _) = integrate_adaptive(f, [1.0, 0.0], &coarse, &opts).unwrap();
        let fine = unit_grid(2001);
        let fx = integrate_fixed(f, [1.0, 0.0], &fine).unwrap();
        for (i, y) in ad.y.iter().enumerate() {
            let z = fx.y[i * 10];
            assert!(
                (y[0] - z[0]).abs() < 1e-8 && (y[1] - z[1]).abs() < 1e-8,
                "i={i}"
            );
        }
    }

    #[test]
    fn adaptive_rejects_bad_tolerances() {
        let opts = AdaptiveOptions {
            rtol: 0.0,
            ..Default::default()
        };
        assert!(integrate_adaptive(|_, y: [f64; 1]| Ok(y), [1.0], &[0.0, 1.0], &opts).is_err());
    }

    #[test]
    fn residual_of_exact_step_vanishes() {
        let f = |_: f64, y: [f64; 2]| ok([y[1], -4.0 * y[0]]);
        let s = rk_step(f, [0.3, 1.1], 0.2, 0.05).unwrap();
        let g = residual_operator([0.3, 1.1], s.y5, f, 0.2, 0.05).unwrap();
        assert!(g[0].abs() <= 1e-15 && g[1].abs() <= 1e-15);
        let delta = [1e-3, -2e-3];
        let g2 = residual_operator(
            [0.3, 1.1],
            [s.y5[0] + delta[0], s.y5[1] + delta[1]],
            f,
            0.2,
            0.05,
        )
        .unwrap();
        assert!((g2[0] - delta[0]).abs() < 1e-15 && (g2[1] - delta[1]).abs() < 1e-15);
    }

    #[test]
    fn residual_is_time_shift_invariant_for_autonomous_fields() {
        let f = |_: f64, y: [f64; 2]| ok([y[1], -y[0].sin()]);
        let a = residual_operator([0.5, 0.2], [0.52, 0.19], f, 0.0, 0.01).unwrap();
        let b = residual_operator([0.5, 0.2], [0.52, 0.19], f, 7.25, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equilibrium_bubble_stays_put() {
        let fluid = FluidParams::default();
        let scales = make_scales(50e-6, 50e-6, &fluid).unwrap();
        let groups = dimensionless_groups(&fluid, &scales).unwrap();
        for model in [BubbleModel::RayleighPlesset, BubbleModel::KellerMiksis] {
            let sys = BubbleSystem {
                model,
                groups,
                forcing: SinusoidalForcing::new(0.0, 1e6, &fluid, &scales),
            };
            let meta = TrajectoryMeta {
                r0: 50e-6,
                amp: 0.0,
                freq: 1e6,
                model,
                scales,
            };
            let traj = solve_fixed(&sys, [1.0, 0.0], &unit_grid(2001), meta).unwrap();
            assert!(traj.r_bar.iter().all(|r| (r - 1.0).abs() < 1e-9));
            assert!(traj.rdot_bar.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn collapse_is_reported_not_nan() {
        let fluid = FluidParams::default();
        let scales = make_scales(50e-6, 50e-6, &fluid).unwrap();
        let groups = dimensionless_groups(&fluid, &scales).unwrap();
        let sys = BubbleSystem {
            model: BubbleModel::RayleighPlesset,
            groups,
            forcing: SinusoidalForcing::constant(1.0),
        };
        // Violent inward initial velocity on a coarse grid drives r through zero.
        let meta = TrajectoryMeta {
            r0: 50e-6,
            amp: 0.0,
            freq: 1.0,
            model: sys.model,
            scales,
        };
        let res = solve_fixed(&sys, [1.0, -5000.0], &unit_grid(11), meta);
        assert!(res.is_err());
    }
}
