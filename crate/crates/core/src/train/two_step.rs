use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::TrainData;
use super::loss::{data_loss_var, ic_loss_var, ode_loss_var, LossParts, LossWeights};
use super::single::{validation_mse, CheckpointSink, EpochRecord, TrainConfig, TrainOutcome};
use super::TrainError;
use crate::nn::{AdamConfig, AdamState, Architecture, NetworkParams, RowAdam, Tape, Trainable};

/// Singular directions with `σ_i / σ_max` below this are dropped from the
/// basis.
pub const MIN_SINGULAR_RATIO: f64 = 1e-12;

/// Thin SVD of the trained trunk outputs plus the stage-1 coefficients.
///
/// Only the leading `rank` directions are kept. The discarded latent slots
/// get zero branch targets and a zero projection column, so the network
/// keeps its `d`-wide layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkBasis {
    /// `N × d` trunk outputs on the training grid.
    pub t_star: Array2<f64>,
    /// `N × rank`
    pub u: Array2<f64>,
    /// All `d` singular values, non-increasing.
    pub sigma: Vec<f64>,
    /// `d × rank`
    pub v: Array2<f64>,
    /// `m × d`
    pub a_star: Array2<f64>,
    pub rank: usize,
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

impl TrunkBasis {
    pub fn new(t_star: Array2<f64>, a_star: Array2<f64>) -> Result<Self, TrainError> {
        let d = t_star.ncols();
        if d == 0 || t_star.nrows() < d || a_star.ncols() != d {
            return Err(TrainError::Shape {
                op: "trunk_basis",
                lhs: t_star.dim(),
                rhs: a_star.dim(),
            });
        }
        let svd = to_nalgebra(&t_star).svd(true, true);
        let u = svd.u.as_ref().expect("requested U");
        let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        if !(sigma[0] > 0.0 && sigma[0].is_finite()) {
            return Err(TrainError::BasisDegenerate {
                sigma_max: sigma[0],
                latent_dim: d,
            });
        }
        let rank = sigma
            .iter()
            .take_while(|&&s| s / sigma[0] >= MIN_SINGULAR_RATIO)
            .count();
        let u = Array2::from_shape_fn((t_star.nrows(), rank), |(r, c)| u[(r, order[c])]);
        let v = Array2::from_shape_fn((d, rank), |(r, c)| v_t[(order[c], r)]);
        Ok(Self {
            t_star,
            u,
            sigma,
            v,
            a_star,
            rank,
        })
    }

    /// `max |UᵀU − I|` over the kept directions.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.u.t().dot(&self.u);
        g.indexed_iter()
            .map(|((i, j), &x)| (x - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    /// `‖U_r Σ_r V_rᵀ − T*‖_F / ‖T*‖_F`.
    pub fn reconstruction_error(&self) -> f64 {
        let mut us = self.u.clone();
        for (c, &s) in self.sigma[..self.rank].iter().enumerate() {
            us.column_mut(c).mapv_inplace(|x| x * s);
        }
        let diff = us.dot(&self.v.t()) - &self.t_star;
        let norm = |a: &Array2<f64>| a.iter().map(|x| x * x).sum::<f64>().sqrt();
        norm(&diff) / norm(&self.t_star)
    }

    /// Branch targets `A V Σ`, zero-padded to `m × d`.
    pub fn branch_targets(&self) -> Array2<f64> {
        let av = self.a_star.dot(&self.v);
        let mut out = Array2::zeros(self.a_star.dim());
        for (c, &s) in self.sigma[..self.rank].iter().enumerate() {
            out.column_mut(c).assign(&av.column(c).mapv(|x| x * s));
        }
        out
    }

    /// `V Σ⁻¹`, zero-padded to `d × d`; applied to the trunk output at
    /// inference.
    pub fn projection(&self) -> Array2<f64> {
        let d = self.sigma.len();
        let mut p = Array2::zeros((d, d));
        for (c, &s) in self.sigma[..self.rank].iter().enumerate() {
            p.column_mut(c).assign(&self.v.column(c).mapv(|x| x / s));
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct TwoStepOutcome {
    /// Final network with the trunk projection installed; `history` holds
    /// the branch stage.
    pub outcome: TrainOutcome,
    pub trunk_history: Vec<EpochRecord>,
    pub basis: TrunkBasis,
}

fn trunk_values(params: &NetworkParams, x: &Array2<f64>) -> Result<Array2<f64>, TrainError> {
    let tape = Tape::new();
    let net = params.bind(&tape, Trainable::Trunk);
    let (t, _) = net.trunk(tape.constant(x.clone()), None)?;
    Ok(t.value().as_ref().clone())
}

/// Stage 1: trunk plus per-row coefficients; stage 2: SVD of the trunk
/// and a branch fitted to the rotated coefficients.
pub fn train_two_step(
    cfg: &TrainConfig,
    arch: &Architecture,
    train: &TrainData,
    val: Option<&TrainData>,
    r0_ref: f64,
    sink: Option<&CheckpointSink>,
) -> Result<TwoStepOutcome, TrainError> {
    cfg.validate(train.rows())?;
    let mut params = NetworkParams::init(arch, cfg.seed)?;
    if params.branch_input_dim() != train.pressure.ncols() {
        return Err(TrainError::Config(format!(
            "branch input width {} does not match the {}-point pressure profiles",
            params.branch_input_dim(),
            train.pressure.ncols()
        )));
    }
    let d = params.latent_dim();
    let (x, dx) = train.trunk_input(params.trunk_input_dim(), r0_ref)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7 << 32);
    let limit = 1.0 / (d as f64).sqrt();
    let mut a = Array2::from_shape_fn((train.rows(), d), |_| rng.random_range(-limit..limit));
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut adam = AdamState::new(adam_cfg, &params.tensors());
    let mut row_adam = RowAdam::new(adam_cfg, a.dim());
    let use_ode = cfg.step1_ode && cfg.weights.w_ode != 0.0;
    let w = &cfg.weights;
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut trunk_history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            let data = train.select(batch);
            let tape = Tape::new();
            let net = params.bind(&tape, Trainable::Trunk);
            let ab = tape.param(a.select(ndarray::Axis(0), batch));
            let (t, dt) = net.trunk(
                tape.constant(x.clone()),
                use_ode.then(|| tape.constant(dx.clone())),
            )?;
            let raw = ab.matmul_t(t)?;
            let r = raw.softplus();
            let ld = data_loss_var(r, &data.radius)?;
            let mut parts = LossParts {
                data: ld.scalar(),
                ode: f64::NAN,
                ic: f64::NAN,
            };
            let mut total = ld.scale(w.w_data);
            if let Some(dt) = dt {
                let dr = raw.sigmoid().mul(ab.matmul_t(dt)?)?;
                let lo = ode_loss_var(r, dr, &data.systems, &data.t_grid)?;
                parts.ode = lo.scalar();
                total = total.add(lo.scale(w.w_ode))?;
            }
            if w.w_ic != 0.0 {
                let li = ic_loss_var(r, data.n_time())?;
                parts.ic = li.scalar();
                total = total.add(li.scale(w.w_ic))?;
            }
            let nonfinite = || TrainError::NonFinite {
                epoch,
                sample_ids: batch
                    .iter()
                    .flat_map(|&i| train.ids[i].iter().copied())
                    .collect(),
                parts,
            };
            if !total.scalar().is_finite() {
                return Err(nonfinite());
            }
            let grads = tape.backward(total)?;
            let g_net = net.gradients(&grads)?;
            let g_a = grads.get(ab)?;
            if g_a
                .iter()
                .chain(g_net.iter().flatten())
                .any(|v| !v.is_finite())
            {
                return Err(nonfinite());
            }
            adam.step(&mut params.tensors_mut(), &g_net)?;
            row_adam.step_rows(&mut a, &g_a, batch)?;
            let frac = batch.len() as f64 / train.rows() as f64;
            acc.data += parts.data * frac;
            acc.ode += parts.ode * frac;
            acc.ic += parts.ic * frac;
        }
        trunk_history.push(EpochRecord {
            epoch,
            l_data: acc.data,
            l_ode: acc.ode,
            l_ic: acc.ic,
            val_mse: f64::NAN,
        });
        if let Some(s) = sink {
            if epoch % cfg.checkpoint_every() == 0 || epoch == cfg.epochs {
                s.log(&format!(
                    "trunk epoch {epoch}: L_data {:.4e} L_ode {:.4e}",
                    acc.data, acc.ode
                ));
                s.history("history_trunk.csv", &trunk_history)?;
            }
        }
    }

    let basis = TrunkBasis::new(trunk_values(&params, &x)?, a)?;
    if let Some(s) = sink {
        s.log(&format!(
            "trunk SVD: sigma_max {:.4e} sigma_min {:.4e} rank {}/{d} |UtU-I| {:.2e} recon {:.2e}",
            basis.sigma[0],
            basis.sigma[d - 1],
            basis.rank,
            basis.orthonormality_defect(),
            basis.reconstruction_error()
        ));
    }
    let targets = basis.branch_targets();
    params.trunk_projection = Some(basis.projection());

    let branch_epochs = cfg.branch_epochs.unwrap_or(cfg.epochs);
    let mut adam = AdamState::new(adam_cfg, &params.tensors());
    let mut history = Vec::with_capacity(branch_epochs);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let every = (branch_epochs / 100).max(1);
    for epoch in 1..=branch_epochs {
        order.shuffle(&mut rng);
        let mut l_data = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let net = params.bind(&tape, Trainable::Branch);
            let b = net.branch(tape.constant(train.pressure.select(ndarray::Axis(0), batch)))?;
            let loss = data_loss_var(b, &targets.select(ndarray::Axis(0), batch))?;
            if !loss.scalar().is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    sample_ids: batch
                        .iter()
                        .flat_map(|&i| train.ids[i].iter().copied())
                        .collect(),
                    parts: LossParts {
                        data: loss.scalar(),
                        ode: f64::NAN,
                        ic: f64::NAN,
                    },
                });
            }
            let grads = net.gradients(&tape.backward(loss)?)?;
            adam.step(&mut params.tensors_mut(), &grads)?;
            l_data += loss.scalar() * batch.len() as f64 / train.rows() as f64;
        }
        let val_mse = match val {
            Some(v) => validation_mse(&params, v, r0_ref)?,
            None => f64::NAN,
        };
        history.push(EpochRecord {
            epoch,
            l_data,
            l_ode: f64::NAN,
            l_ic: f64::NAN,
            val_mse,
        });
        if val.is_none() || val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best = params.clone();
        }
        if let Some(s) = sink {
            if epoch % every == 0 || epoch == branch_epochs {
                s.log(&format!(
                    "branch epoch {epoch}: L_coef {l_data:.4e} val_mse {val_mse:.4e}"
                ));
                s.history("history.csv", &history)?;
                s.save("last", &params)?;
            }
        }
    }
    if let Some(s) = sink {
        s.history("history.csv", &history)?;
        s.history("history_trunk.csv", &trunk_history)?;
        s.save("final", &params)?;
        s.save("best", &best)?;
    }
    Ok(TwoStepOutcome {
        outcome: TrainOutcome {
            params,
            best,
            best_epoch,
            best_val_mse: if best_val.is_finite() {
                best_val
            } else {
                f64::NAN
            },
            history,
            weights: LossWeights {
                w_ode: if use_ode { w.w_ode } else { 0.0 },
                ..*w
            },
        },
        trunk_history,
        basis,
    })
}
