use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::integrator::{check_uniform_grid, rk5_state, DOPRI5};
use crate::nn::Var;
use crate::physics::{BubbleSystem, PhysicsError};
use crate::scalar::{Dual2, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_data: f64,
    pub w_ode: f64,
    #[serde(default)]
    pub w_ic: f64,
}

impl LossWeights {
    pub const SINGLE_RADIUS: Self = Self {
        w_data: 1.0,
        w_ode: 100.0,
        w_ic: 0.0,
    };

    pub const MULTI_RADIUS: Self = Self {
        w_data: 1.0,
        w_ode: 1000.0,
        w_ic: 1.0,
    };

    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, w) in [
            ("w_data", self.w_data),
            ("w_ode", self.w_ode),
            ("w_ic", self.w_ic),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(TrainError::Config(format!(
                    "{name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms; `ic` is zero outside multi-radius runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub data: f64,
    pub ode: f64,
    pub ic: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.data.is_finite() && self.ode.is_finite() && self.ic.is_finite()
    }
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    let mut acc = w.w_data * parts.data;
    // Skip disabled terms so an unused infinite part cannot poison the sum.
    if w.w_ode != 0.0 {
        acc += w.w_ode * parts.ode;
    }
    if w.w_ic != 0.0 {
        acc += w.w_ic * parts.ic;
    }
    acc
}

fn check_same(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(), TrainError> {
    if a != b {
        return Err(TrainError::Shape { op, lhs: a, rhs: b });
    }
    Ok(())
}

/// `(1/m) Σᵢ ‖predᵢ − truthᵢ‖²` with the norm over the time axis.
pub fn data_loss(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64, TrainError> {
    check_same("data_loss", pred.dim(), truth.dim())?;
    let m = pred.nrows().max(1) as f64;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / m)
}

pub fn data_loss_var<'t>(pred: Var<'t>, truth: &Array2<f64>) -> Result<Var<'t>, TrainError> {
    check_same("data_loss", pred.dim(), truth.dim())?;
    let m = pred.dim().0.max(1) as f64;
    let d = pred.sub(pred.tape().constant(truth.clone()))?;
    Ok(d.mul(d)?.sum().scale(1.0 / m))
}

/// Mean of `(R̄(0) − 1)²` over `(sample, radius)` pairs. `radius` is
/// `m × (n·k)` in radius-major blocks of `n`.
pub fn ic_loss(radius: &Array2<f64>, n_time: usize) -> Result<f64, TrainError> {
    let cols = ic_columns(radius.ncols(), n_time)?;
    let mut acc = 0.0;
    for row in radius.rows() {
        for &c in &cols {
            acc += (row[c] - 1.0) * (row[c] - 1.0);
        }
    }
    Ok(acc / (radius.nrows() * cols.len()).max(1) as f64)
}

fn ic_columns(ncols: usize, n_time: usize) -> Result<Vec<usize>, TrainError> {
    if n_time == 0 || ncols % n_time != 0 {
        return Err(TrainError::Config(format!(
            "output width {ncols} is not a multiple of the time grid {n_time}"
        )));
    }
    Ok((0..ncols / n_time).map(|j| j * n_time).collect())
}

pub fn ic_loss_var<'t>(radius: Var<'t>, n_time: usize) -> Result<Var<'t>, TrainError> {
    let (m, ncols) = radius.dim();
    let cols = ic_columns(ncols, n_time)?;
    let value = radius.value();
    let count = (m * cols.len()).max(1) as f64;
    let mut grad = Array2::zeros((m, ncols));
    let mut acc = 0.0;
    for i in 0..m {
        for &c in &cols {
            let e = value[[i, c]] - 1.0;
            acc += e * e;
            grad[[i, c]] = 2.0 * e / count;
        }
    }
    Ok(radius
        .tape()
        .custom_scalar(acc / count, vec![(radius, grad)])?)
}

/// Residual sum and its gradients for one trajectory segment.
struct SegmentResidual {
    sum_sq: f64,
    g_r: Vec<f64>,
    g_v: Vec<f64>,
}

/// Forcing at the seven stage times of every window, from one `sin_cos`
/// per window and fixed stage offsets.
fn stage_forcing(system: &BubbleSystem, t_grid: &[f64], dt: f64) -> Vec<[(f64, f64); 7]> {
    let f = &system.forcing;
    let offsets = DOPRI5.c.map(|c| (f.omega_bar * c * dt).sin_cos());
    t_grid[..t_grid.len() - 1]
        .iter()
        .map(|&t| {
            let (s0, c0) = (f.omega_bar * t).sin_cos();
            offsets.map(|(sd, cd)| {
                let s = s0 * cd + c0 * sd;
                let c = c0 * cd - s0 * sd;
                (f.mean_bar + f.amp_bar * s, f.amp_bar * f.omega_bar * c)
            })
        })
        .collect()
}

type StageTable = Arc<Vec<[(f64, f64); 7]>>;

/// Tables are fixed per (forcing, grid) and reused across epochs. The
/// cache stops growing past `STAGE_CACHE_BYTES`.
const STAGE_CACHE_BYTES: usize = 256 << 20;

struct StageCache {
    map: HashMap<(u64, u64, u64, u64), StageTable>,
    bytes: usize,
}

fn stage_cache() -> &'static Mutex<StageCache> {
    static CACHE: OnceLock<Mutex<StageCache>> = OnceLock::new();
    CACHE.get_or_init(|| {
        Mutex::new(StageCache {
            map: HashMap::new(),
            bytes: 0,
        })
    })
}

fn grid_key(t_grid: &[f64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for t in t_grid {
        t.to_bits().hash(&mut h);
    }
    h.finish()
}

fn cached_stage_forcing(system: &BubbleSystem, t_grid: &[f64], grid: u64, dt: f64) -> StageTable {
    let f = &system.forcing;
    let key = (
        f.mean_bar.to_bits(),
        f.amp_bar.to_bits(),
        f.omega_bar.to_bits(),
        grid ^ dt.to_bits().rotate_left(17),
    );
    if let Some(t) = stage_cache().lock().expect("cache lock").map.get(&key) {
        return t.clone();
    }
    let table = Arc::new(stage_forcing(system, t_grid, dt));
    let size = table.len() * std::mem::size_of::<[(f64, f64); 7]>();
    let mut cache = stage_cache().lock().expect("cache lock");
    if cache.bytes + size <= STAGE_CACHE_BYTES {
        cache.bytes += size;
        cache.map.insert(key, table.clone());
    }
    table
}

fn forced_step<S: Scalar>(
    system: &BubbleSystem,
    table: &[(f64, f64); 7],
    y: [S; 2],
    t: f64,
    dt: f64,
) -> Result<[S; 2], PhysicsError> {
    let mut stage = 0;
    // rk5_state evaluates the stages in order.
    rk5_state(
        |_, y| {
            let (p, dp) = table[stage];
            stage += 1;
            system.rhs_forced(p, dp, y)
        },
        y,
        t,
        dt,
    )
}

fn segment_residual(
    system: &BubbleSystem,
    t_grid: &[f64],
    grid: u64,
    dt: f64,
    r: ArrayView1<f64>,
    v: ArrayView1<f64>,
    with_grad: bool,
) -> Result<SegmentResidual, (usize, PhysicsError)> {
    let n = t_grid.len();
    let forcing = cached_stage_forcing(system, t_grid, grid, dt);
    let mut out = SegmentResidual {
        sum_sq: 0.0,
        g_r: if with_grad { vec![0.0; n] } else { Vec::new() },
        g_v: if with_grad { vec![0.0; n] } else { Vec::new() },
    };
    for w in 0..n - 1 {
        let table = &forcing[w];
        let (g, jac) = if with_grad {
            let y = [Dual2::var(r[w], 0), Dual2::var(v[w], 1)];
            let s = forced_step(system, table, y, t_grid[w], dt).map_err(|e| (w, e))?;
            ([r[w + 1] - s[0].v, v[w + 1] - s[1].v], [s[0].d, s[1].d])
        } else {
            let s = forced_step(system, table, [r[w], v[w]], t_grid[w], dt).map_err(|e| (w, e))?;
            ([r[w + 1] - s[0], v[w + 1] - s[1]], [[0.0; 2]; 2])
        };
        out.sum_sq += g[0] * g[0] + g[1] * g[1];
        if with_grad {
            out.g_r[w + 1] += 2.0 * g[0];
            out.g_v[w + 1] += 2.0 * g[1];
            // G = y_next − Φ(y), so ∂‖G‖²/∂y = −2 Jᵀ G with J = ∂Φ/∂y.
            out.g_r[w] -= 2.0 * (jac[0][0] * g[0] + jac[1][0] * g[1]);
            out.g_v[w] -= 2.0 * (jac[0][1] * g[0] + jac[1][1] * g[1]);
        }
    }
    Ok(out)
}

struct OdeEval {
    value: f64,
    g_r: Option<Array2<f64>>,
    g_v: Option<Array2<f64>>,
}

/// `systems[i][j]` drives row `i`, radius block `j`.
fn ode_eval(
    radius: &Array2<f64>,
    rdot: &Array2<f64>,
    systems: &[Vec<BubbleSystem>],
    t_grid: &[f64],
    with_grad: bool,
) -> Result<OdeEval, TrainError> {
    check_same("ode_loss", radius.dim(), rdot.dim())?;
    let n = t_grid.len();
    if n < 2 {
        return Err(TrainError::Config(
            "ode loss needs at least two collocation points".into(),
        ));
    }
    let dt = check_uniform_grid(t_grid)
        .map_err(|e| TrainError::Config(format!("collocation grid: {e}")))?;
    let (m, ncols) = radius.dim();
    if systems.len() != m {
        return Err(TrainError::Shape {
            op: "ode_loss_systems",
            lhs: (m, ncols),
            rhs: (systems.len(), 0),
        });
    }
    let k = ncols / n;
    if k * n != ncols || systems.iter().any(|s| s.len() != k) {
        return Err(TrainError::Config(format!(
            "output width {ncols} does not match {k} radius blocks of {n} points"
        )));
    }
    let grid = grid_key(t_grid);
    let jobs: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let cols = ndarray::s![j * n..(j + 1) * n];
            segment_residual(
                &systems[i][j],
                t_grid,
                grid,
                dt,
                radius.row(i).slice(cols),
                rdot.row(i).slice(cols),
                with_grad,
            )
            .map_err(|(window, source)| TrainError::Physics {
                row: i,
                block: j,
                window,
                source,
            })
        })
        .collect();
    let count = (m * k * (n - 1)) as f64;
    let mut total = 0.0;
    let (mut g_r, mut g_v) = if with_grad {
        (
            Some(Array2::zeros((m, ncols))),
            Some(Array2::zeros((m, ncols))),
        )
    } else {
        (None, None)
    };
    for (&(i, j), res) in jobs.iter().zip(results) {
        let seg = res?;
        total += seg.sum_sq;
        if let (Some(gr), Some(gv)) = (g_r.as_mut(), g_v.as_mut()) {
            for c in 0..n {
                gr[[i, j * n + c]] = seg.g_r[c] / count;
                gv[[i, j * n + c]] = seg.g_v[c] / count;
            }
        }
    }
    Ok(OdeEval {
        value: total / count,
        g_r,
        g_v,
    })
}

/// Mean `‖G‖²` over every window of every segment.
pub fn ode_loss(
    radius: &Array2<f64>,
    rdot: &Array2<f64>,
    systems: &[Vec<BubbleSystem>],
    t_grid: &[f64],
) -> Result<f64, TrainError> {
    Ok(ode_eval(radius, rdot, systems, t_grid, false)?.value)
}

pub fn ode_loss_var<'t>(
    radius: Var<'t>,
    rdot: Var<'t>,
    systems: &[Vec<BubbleSystem>],
    t_grid: &[f64],
) -> Result<Var<'t>, TrainError> {
    let r = radius.value();
    let v = rdot.value();
    let ev = ode_eval(&r, &v, systems, t_grid, true)?;
    let locals = vec![
        (radius, ev.g_r.expect("requested")),
        (rdot, ev.g_v.expect("requested")),
    ];
    Ok(radius.tape().custom_scalar(ev.value, locals)?)
}

/// Mean over samples of the time-averaged squared error.
pub fn mean_sample_mse(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64, TrainError> {
    check_same("mse", pred.dim(), truth.dim())?;
    let n = pred.ncols().max(1) as f64;
    Ok(data_loss(pred, truth)? / n)
}

/// Per-row relative L2 error `‖pred − truth‖ / ‖truth‖`.
pub fn relative_l2(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Vec<f64>, TrainError> {
    check_same("relative_l2", pred.dim(), truth.dim())?;
    let diff = pred - truth;
    let num = diff.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let den = truth.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    Ok(num.iter().zip(&den).map(|(a, b)| a / b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_sample, DoePoint, DoeSpec};
    use crate::integrator::AdaptiveOptions;
    use crate::nn::Tape;
    use crate::physics::{BubbleModel, FluidParams, SinusoidalForcing};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |_| rng.random_range(0.5..1.5))
    }

    #[test]
    fn data_loss_examples() {
        let a = array![[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]];
        assert_eq!(data_loss(&a, &a).unwrap(), 0.0);
        let eps = 0.125;
        let off = &a + eps;
        assert_eq!(data_loss(&off, &a).unwrap(), 3.0 * eps * eps);
        assert!(data_loss(&a, &array![[1.0]]).is_err());
    }

    #[test]
    fn data_loss_matches_two_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, t) = (random(&mut rng, 4, 9), random(&mut rng, 4, 9));
        let mut oracle = 0.0;
        for i in 0..4 {
            let mut row = 0.0;
            for j in 0..9 {
                row += (p[[i, j]] - t[[i, j]]).powi(2);
            }
            oracle += row;
        }
        oracle /= 4.0;
        assert!((data_loss(&p, &t).unwrap() - oracle).abs() < 1e-14);
        let tape = Tape::new();
        let pv = tape.param(p.clone());
        let v = data_loss_var(pv, &t).unwrap();
        assert!((v.scalar() - oracle).abs() < 1e-14);
        let g = tape.backward(v).unwrap();
        let gp = g.get(pv).unwrap();
        assert!(gp
            .iter()
            .zip((&p - &t).iter())
            .all(|(g, d)| (g - 2.0 * d / 4.0).abs() < 1e-15));
    }

    #[test]
    fn ic_loss_examples() {
        let n = 3;
        let exact = array![[1.0, 0.2, 0.3, 1.0, 5.0, 6.0]];
        assert_eq!(ic_loss(&exact, n).unwrap(), 0.0);
        let d = 0.25;
        let off = array![
            [1.0 + d, 0.0, 0.0, 1.0 + d, 0.0, 0.0],
            [1.0 + d, 9.0, 9.0, 1.0 + d, 9.0, 9.0]
        ];
        assert_eq!(ic_loss(&off, n).unwrap(), d * d);
        let mixed = array![
            [1.5, 0.0, 0.0, 0.9, 0.0, 0.0],
            [0.7, 0.0, 0.0, 1.0, 0.0, 0.0]
        ];
        let oracle = (0.25 + 0.01 + 0.09 + 0.0) / 4.0;
        assert!((ic_loss(&mixed, n).unwrap() - oracle).abs() < 1e-15);
        let tape = Tape::new();
        let v = ic_loss_var(tape.param(mixed.clone()), n).unwrap();
        assert!((v.scalar() - oracle).abs() < 1e-15);
        assert!(ic_loss(&mixed, 4).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let p = LossParts {
            data: 0.5,
            ode: 0.01,
            ic: f64::NAN,
        };
        assert!((total_loss(&p, &LossWeights::SINGLE_RADIUS) - 1.5).abs() < 1e-15);
        assert_eq!(
            total_loss(&LossParts::default(), &LossWeights::MULTI_RADIUS),
            0.0
        );
        let q = LossParts {
            data: 0.5,
            ode: 0.01,
            ic: 0.2,
        };
        assert!((total_loss(&q, &LossWeights::MULTI_RADIUS) - (0.5 + 10.0 + 0.2)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn total_loss_linear_in_weights(d in 0.0f64..10.0, o in 0.0f64..10.0, c in 0.0f64..10.0,
                                         w1 in 0.0f64..100.0, w2 in 0.0f64..100.0, s in 0.0f64..5.0) {
            let p = LossParts { data: d, ode: o, ic: c };
            let a = LossWeights { w_data: w1, w_ode: w2, w_ic: 1.0 };
            let scaled = LossWeights { w_data: w1 * s, ..a };
            let base = total_loss(&p, &a);
            let lin = base + (s - 1.0) * w1 * d;
            prop_assert!((total_loss(&p, &scaled) - lin).abs() <= 1e-9 * (1.0 + lin.abs()));
        }
    }

    fn eq_system(forcing: SinusoidalForcing, model: BubbleModel) -> BubbleSystem {
        let fluid = FluidParams::default();
        let scales = crate::physics::make_scales(50e-6, 50e-6, &fluid).unwrap();
        let mut f = fluid;
        f.p_g0 = Some(fluid.gas_pressure_at(50e-6));
        BubbleSystem {
            model,
            groups: crate::physics::dimensionless_groups(&f, &scales).unwrap(),
            forcing,
        }
    }

    #[test]
    fn ode_loss_fixed_point_and_non_solution() {
        let n = 50;
        let t = crate::physics::unit_grid(n);
        let r = Array2::ones((1, n));
        let v = Array2::zeros((1, n));
        for model in [BubbleModel::RayleighPlesset, BubbleModel::KellerMiksis] {
            let eq = eq_system(SinusoidalForcing::constant(1.0), model);
            let scales =
                crate::physics::make_scales(50e-6, 50e-6, &FluidParams::default()).unwrap();
            let mean = FluidParams::default().p0 / scales.p_star;
            let eq = BubbleSystem {
                forcing: SinusoidalForcing::constant(mean),
                ..eq
            };
            let l = ode_loss(&r, &v, &[vec![eq]], &t).unwrap();
            assert!(l <= 1e-30, "{model:?}: {l:e}");
            let forced = BubbleSystem {
                forcing: SinusoidalForcing::new(3e5, 1e6, &FluidParams::default(), &scales),
                ..eq
            };
            assert!(ode_loss(&r, &v, &[vec![forced]], &t).unwrap() > 0.0);
        }
    }

    #[test]
    fn ode_loss_on_ground_truth_is_tiny() {
        let fluid = FluidParams::default();
        for model in [BubbleModel::RayleighPlesset, BubbleModel::KellerMiksis] {
            let spec = DoeSpec::single_radius(model);
            let s = generate_sample(
                0,
                DoePoint {
                    r0: 50e-6,
                    amp: 4e5,
                    freq: 1.2e6,
                },
                &spec,
                &fluid,
                &AdaptiveOptions::default(),
            )
            .unwrap();
            let n = s.n_points();
            let r = Array2::from_shape_vec((1, n), s.radius.clone()).unwrap();
            let v = Array2::from_shape_vec((1, n), s.rdot.clone()).unwrap();
            let sys = s.system(&fluid).unwrap();
            let l = ode_loss(&r, &v, &[vec![sys]], &s.pressure.t_grid).unwrap();
            assert!(l <= 1e-10, "{model:?}: {l:e}");
        }
    }

    #[test]
    fn ode_loss_gradient_matches_fd() {
        let fluid = FluidParams::default();
        let scales = crate::physics::make_scales(50e-6, 50e-6, &fluid).unwrap();
        let n = 200;
        let t = crate::physics::unit_grid(n);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Array2::from_shape_fn((2, 2 * n), |_| rng.random_range(0.8..1.2));
        let v = Array2::from_shape_fn((2, 2 * n), |_| rng.random_range(-0.3..0.3));
        let base = eq_system(
            SinusoidalForcing::new(2e5, 8e5, &fluid, &scales),
            BubbleModel::KellerMiksis,
        );
        let rp = BubbleSystem {
            model: BubbleModel::RayleighPlesset,
            ..base
        };
        let systems = vec![vec![base, rp], vec![rp, base]];
        let tape = Tape::new();
        let (rv, vv) = (tape.param(r.clone()), tape.param(v.clone()));
        let l = ode_loss_var(rv, vv, &systems, &t).unwrap();
        let g = tape.backward(l).unwrap();
        let (gr, gv) = (g.get(rv).unwrap(), g.get(vv).unwrap());
        for (which, grad) in [(0, &gr), (1, &gv)] {
            for idx in [(0, 0), (0, 5), (1, n - 1), (1, n), (0, 2 * n - 1), (1, 77)] {
                let h = 1e-6;
                let eval = |d: f64| {
                    let (mut r2, mut v2) = (r.clone(), v.clone());
                    if which == 0 {
                        r2[idx] += d;
                    } else {
                        v2[idx] += d;
                    }
                    ode_loss(&r2, &v2, &systems, &t).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grad[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * an.abs().max(1e-6),
                    "{which} {idx:?}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn ode_loss_propagates_physics_errors() {
        let n = 5;
        let t = crate::physics::unit_grid(n);
        let sys = eq_system(
            SinusoidalForcing::constant(1.0),
            BubbleModel::RayleighPlesset,
        );
        let mut r = Array2::ones((1, n));
        r[[0, 2]] = -0.1;
        let err = ode_loss(&r, &Array2::zeros((1, n)), &[vec![sys]], &t).unwrap_err();
        assert!(
            matches!(
                err,
                TrainError::Physics {
                    row: 0,
                    block: 0,
                    window: 2,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn relative_l2_and_mse() {
        let t = array![[3.0, 4.0]];
        let p = array![[3.0, 5.0]];
        assert_eq!(relative_l2(&p, &t).unwrap(), vec![0.2]);
        assert_eq!(mean_sample_mse(&p, &t).unwrap(), 0.5);
    }
}
