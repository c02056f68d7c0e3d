use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::TrainData;
use super::loss::{
    data_loss_var, ic_loss_var, mean_sample_mse, ode_loss_var, LossParts, LossWeights,
};
use super::TrainError;
use crate::nn::{
    save_checkpoint, AdamConfig, AdamState, Architecture, Checkpoint, NetworkParams, Tape,
    Trainable,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Rescale `w_ode` on the first batch so both weighted terms match.
    #[serde(default)]
    pub auto_balance: bool,
    /// Include the ODE residual in two-step stage 1.
    #[serde(default)]
    pub step1_ode: bool,
    /// Branch-stage epochs for two-step training; defaults to `epochs`.
    #[serde(default)]
    pub branch_epochs: Option<usize>,
    #[serde(default)]
    pub kfold: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self, train_rows: usize) -> Result<(), TrainError> {
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.batch_size > train_rows {
            return Err(TrainError::Config(format!(
                "batch_size {} must be in 1..={train_rows} (training rows)",
                self.batch_size
            )));
        }
        if let Some(k) = self.kfold {
            if k < 2 {
                return Err(TrainError::Config(format!("kfold must be >= 2, got {k}")));
            }
        }
        Ok(())
    }

    /// Epochs between periodic checkpoints.
    pub fn checkpoint_every(&self) -> usize {
        (self.epochs / 100).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_data: f64,
    pub l_ode: f64,
    pub l_ic: f64,
    pub val_mse: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,L_data,L_ode,L_ic,val_mse\n");
    for r in history {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.epoch, r.l_data, r.l_ode, r.l_ic, r.val_mse
        ));
    }
    std::fs::write(path, out).map_err(|e| super::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub best: NetworkParams,
    /// Zero when no epoch ran.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub history: Vec<EpochRecord>,
    /// `w_ode` actually used (differs from the config under auto-balance).
    pub weights: LossWeights,
}

/// Where periodic checkpoints and the history go.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
    pub progress: bool,
}

impl CheckpointSink {
    pub fn save(&self, name: &str, params: &NetworkParams) -> Result<(), TrainError> {
        let ckpt = Checkpoint {
            params: params.clone(),
            config: self.config.clone(),
            extra: self.extra.clone(),
        };
        Ok(save_checkpoint(&self.dir.join(name), &ckpt)?)
    }

    pub fn history(&self, file: &str, history: &[EpochRecord]) -> Result<(), TrainError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| super::io(&self.dir, e))?;
        write_history_csv(&self.dir.join(file), history)
    }

    pub fn log(&self, msg: &str) {
        if self.progress {
            let _ = writeln!(std::io::stderr(), "{msg}");
        }
    }
}

/// Gated prediction over a whole set, in row chunks.
pub fn predict_rows(
    params: &NetworkParams,
    data: &TrainData,
    r0_ref: f64,
) -> Result<Array2<f64>, TrainError> {
    let (x, _) = data.trunk_input(params.trunk_input_dim(), r0_ref)?;
    let chunks: Vec<_> = (0..data.rows()).step_by(64).collect();
    let parts: Vec<Result<Array2<f64>, TrainError>> = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + 64).min(data.rows());
            let p = data.pressure.slice(s![start..end, ..]).to_owned();
            Ok(params.predict(&p, &x, None)?.0)
        })
        .collect();
    let mut out = Array2::zeros(data.radius.dim());
    for (&start, part) in chunks.iter().zip(parts) {
        let part = part?;
        out.slice_mut(s![start..start + part.nrows(), ..])
            .assign(&part);
    }
    Ok(out)
}

pub fn validation_mse(
    params: &NetworkParams,
    data: &TrainData,
    r0_ref: f64,
) -> Result<f64, TrainError> {
    mean_sample_mse(&predict_rows(params, data, r0_ref)?, &data.radius)
}

/// Loss parts and gradients of the weighted total on one batch. Terms
/// with zero weight are not evaluated and come back as NaN; a non-finite
/// total yields no gradients.
pub fn batch_gradients(
    params: &NetworkParams,
    data: &TrainData,
    rows: &[usize],
    trunk: &(Array2<f64>, Array2<f64>),
    weights: &LossWeights,
) -> Result<(LossParts, Vec<Array2<f64>>), TrainError> {
    batch_gradients_with_trunk(params, data, rows, trunk, weights, false).map(|(p, g, _)| (p, g))
}

/// [`batch_gradients`], optionally also returning the trunk outputs of the
/// forward pass (the parameters before the update).
fn batch_gradients_with_trunk(
    params: &NetworkParams,
    data: &TrainData,
    rows: &[usize],
    trunk: &(Array2<f64>, Array2<f64>),
    weights: &LossWeights,
    keep_trunk: bool,
) -> Result<(LossParts, Vec<Array2<f64>>, Option<Array2<f64>>), TrainError> {
    let tape = Tape::new();
    let net = params.bind(&tape, Trainable::All);
    let batch = data.select(rows);
    let p = tape.constant(batch.pressure.clone());
    let x = tape.constant(trunk.0.clone());
    let use_ode = weights.w_ode != 0.0;
    let dx = use_ode.then(|| tape.constant(trunk.1.clone()));
    let out = net.forward(p, x, dx)?;
    let trunk_out = keep_trunk.then(|| out.trunk.value().as_ref().clone());
    let ld = data_loss_var(out.radius, &batch.radius)?;
    let mut parts = LossParts {
        data: ld.scalar(),
        ode: f64::NAN,
        ic: f64::NAN,
    };
    let mut total = ld.scale(weights.w_data);
    if let Some(dr) = out.d_radius {
        let lo = ode_loss_var(out.radius, dr, &batch.systems, &batch.t_grid)?;
        parts.ode = lo.scalar();
        total = total.add(lo.scale(weights.w_ode))?;
    }
    if weights.w_ic != 0.0 {
        let li = ic_loss_var(out.radius, batch.n_time())?;
        parts.ic = li.scalar();
        total = total.add(li.scale(weights.w_ic))?;
    }
    if !total.scalar().is_finite() {
        return Ok((parts, Vec::new(), trunk_out));
    }
    let grads = tape.backward(total)?;
    Ok((parts, net.gradients(&grads)?, trunk_out))
}

fn non_finite(epoch: usize, batch: &[usize], data: &TrainData, parts: LossParts) -> TrainError {
    TrainError::NonFinite {
        epoch,
        sample_ids: batch
            .iter()
            .flat_map(|&r| data.ids[r].iter().copied())
            .collect(),
        parts,
    }
}

fn accumulate(acc: &mut LossParts, p: &LossParts, w: f64) {
    acc.data += p.data * w;
    acc.ode += p.ode * w;
    acc.ic += p.ic * w;
}

/// Seeded mini-batch training of all network parameters.
pub fn train_single(
    cfg: &TrainConfig,
    arch: &Architecture,
    train: &TrainData,
    val: Option<&TrainData>,
    r0_ref: f64,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(train.rows())?;
    let mut params = NetworkParams::init(arch, cfg.seed)?;
    if params.branch_input_dim() != train.pressure.ncols() {
        return Err(TrainError::Config(format!(
            "branch input width {} does not match the {}-point pressure profiles",
            params.branch_input_dim(),
            train.pressure.ncols()
        )));
    }
    let trunk = train.trunk_input(params.trunk_input_dim(), r0_ref)?;
    let mut weights = cfg.weights;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut track = Tracker {
        history: Vec::with_capacity(cfg.epochs),
        best: params.clone(),
        best_val: f64::INFINITY,
        best_epoch: 0,
        best_dirty: false,
        every: cfg.checkpoint_every(),
        epochs: cfg.epochs,
        has_val: val.is_some(),
    };
    let shared_trunk = val.is_some_and(|v| v.t_grid == train.t_grid && v.r0_values == train.r0_values);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    // An epoch's record is closed at the first forward pass of the next
    // epoch, whose trunk outputs are those of the end-of-epoch parameters.
    let mut pending: Option<(usize, LossParts)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossParts::default();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.auto_balance && epoch == 1 && adam.step_count == 0 {
                weights = balance(&params, train, batch, &trunk, weights)?;
                if let Some(s) = sink {
                    s.log(&format!("auto-balance: w_ode = {:e}", weights.w_ode));
                }
            }
            let keep = bi == 0 && pending.is_some() && shared_trunk;
            let (parts, grads, trunk_out) =
                batch_gradients_with_trunk(&params, train, batch, &trunk, &weights, keep)?;
            if let Some((done, acc_done)) = pending.take() {
                let val_mse = match (val, trunk_out) {
                    (Some(v), Some(t)) => {
                        mean_sample_mse(&params.predict_with_trunk(&v.pressure, &t)?, &v.radius)?
                    }
                    (Some(v), None) => validation_mse(&params, v, r0_ref)?,
                    _ => f64::NAN,
                };
                track.close(done, acc_done, val_mse, &params, sink)?;
            }
            if grads.is_empty() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(non_finite(epoch, batch, train, parts));
            }
            adam.step(&mut params.tensors_mut(), &grads)?;
            accumulate(&mut acc, &parts, batch.len() as f64 / train.rows() as f64);
        }
        pending = Some((epoch, acc));
    }
    if let Some((done, acc_done)) = pending {
        let val_mse = match val {
            Some(v) => validation_mse(&params, v, r0_ref)?,
            None => f64::NAN,
        };
        track.close(done, acc_done, val_mse, &params, sink)?;
    }
    if let Some(s) = sink {
        s.history("history.csv", &track.history)?;
        s.save("final", &params)?;
        s.save("best", &track.best)?;
    }
    Ok(TrainOutcome {
        params,
        best: track.best,
        best_epoch: track.best_epoch,
        best_val_mse: if track.best_val.is_finite() {
            track.best_val
        } else {
            f64::NAN
        },
        history: track.history,
        weights,
    })
}

/// History, best-model selection and periodic checkpoints.
struct Tracker {
    history: Vec<EpochRecord>,
    best: NetworkParams,
    best_val: f64,
    best_epoch: usize,
    best_dirty: bool,
    every: usize,
    epochs: usize,
    has_val: bool,
}

impl Tracker {
    fn close(
        &mut self,
        epoch: usize,
        acc: LossParts,
        val_mse: f64,
        params: &NetworkParams,
        sink: Option<&CheckpointSink>,
    ) -> Result<(), TrainError> {
        let rec = EpochRecord {
            epoch,
            l_data: acc.data,
            l_ode: acc.ode,
            l_ic: acc.ic,
            val_mse,
        };
        self.history.push(rec);
        if !self.has_val || val_mse < self.best_val {
            self.best_val = val_mse;
            self.best_epoch = epoch;
            self.best = params.clone();
            self.best_dirty = true;
        }
        if let Some(s) = sink {
            if epoch % self.every == 0 || epoch == self.epochs {
                s.log(&format!(
                    "epoch {epoch}: L_data {:.4e} L_ode {:.4e} L_ic {:.4e} val_mse {:.4e}",
                    rec.l_data, rec.l_ode, rec.l_ic, rec.val_mse
                ));
                s.history("history.csv", &self.history)?;
                s.save("last", params)?;
                if self.best_dirty {
                    s.save("best", &self.best)?;
                    self.best_dirty = false;
                }
            }
        }
        Ok(())
    }
}

fn balance(
    params: &NetworkParams,
    data: &TrainData,
    rows: &[usize],
    trunk: &(Array2<f64>, Array2<f64>),
    w: LossWeights,
) -> Result<LossWeights, TrainError> {
    let probe = LossWeights { w_ode: 1.0, ..w };
    let (parts, _) = batch_gradients(params, data, rows, trunk, &probe)?;
    if parts.ode > 0.0 && parts.ode.is_finite() && parts.data.is_finite() {
        Ok(LossWeights {
            w_ode: w.w_data * parts.data / parts.ode,
            ..w
        })
    } else {
        Ok(w)
    }
}

/// `k` disjoint folds from a seeded shuffle; the last fold takes the
/// remainder.
pub fn kfold_assign(n_rows: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, TrainError> {
    if k < 2 || k > n_rows {
        return Err(TrainError::Config(format!(
            "cannot build {k} folds from {n_rows} rows"
        )));
    }
    let mut idx: Vec<usize> = (0..n_rows).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let size = n_rows / k;
    Ok((0..k)
        .map(|f| {
            let end = if f == k - 1 { n_rows } else { (f + 1) * size };
            let mut fold = idx[f * size..end].to_vec();
            fold.sort_unstable();
            fold
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_rows: usize,
    pub val_rows: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub final_val_mse: f64,
}

/// Train one model per fold; returns the fold model with the lowest
/// validation MSE, its index, and the per-fold table.
pub fn kfold_train(
    cfg: &TrainConfig,
    arch: &Architecture,
    data: &TrainData,
    k: usize,
    r0_ref: f64,
    sink: Option<&CheckpointSink>,
) -> Result<(TrainOutcome, usize, Vec<FoldReport>), TrainError> {
    let folds = kfold_assign(data.rows(), k, cfg.seed)?;
    let runs: Vec<Result<(TrainOutcome, FoldReport), TrainError>> = folds
        .par_iter()
        .enumerate()
        .map(|(f, val_rows)| {
            let train_rows: Vec<usize> = (0..data.rows())
                .filter(|r| val_rows.binary_search(r).is_err())
                .collect();
            let train = data.select(&train_rows);
            let val = data.select(val_rows);
            let fold_sink = sink.map(|s| CheckpointSink {
                dir: s.dir.join(format!("fold_{f}")),
                ..s.clone()
            });
            let out = train_single(cfg, arch, &train, Some(&val), r0_ref, fold_sink.as_ref())?;
            let report = FoldReport {
                fold: f,
                train_rows: train_rows.len(),
                val_rows: val_rows.len(),
                best_epoch: out.best_epoch,
                best_val_mse: out.best_val_mse,
                final_val_mse: out.history.last().map_or(f64::NAN, |r| r.val_mse),
            };
            Ok((out, report))
        })
        .collect();
    let mut outcomes = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    for r in runs {
        let (o, rep) = r?;
        outcomes.push(o);
        reports.push(rep);
    }
    let best = reports
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.best_val_mse.total_cmp(&b.1.best_val_mse))
        .map(|(i, _)| i)
        .expect("k >= 2");
    Ok((outcomes.swap_remove(best), best, reports))
}
