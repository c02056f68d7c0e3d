use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[inline]
fn update(cfg: &AdamConfig, bc1: f64, bc2: f64, p: &mut f64, m: &mut f64, v: &mut f64, g: f64) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let mh = *m / bc1;
    let vh = *v / bc2;
    *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
}

/// Bias-corrected Adam over a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[&Array2<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step_count: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Array2<f64>],
        grads: &[Array2<f64>],
    ) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::Shape {
                op: "adam_step",
                lhs: (params.len(), 0),
                rhs: (grads.len(), self.m.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.dim() != g.dim() || p.dim() != m.dim() {
                return Err(NnError::Shape {
                    op: "adam_step",
                    lhs: p.dim(),
                    rhs: g.dim(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let cfg = self.cfg;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            Zip::from(&mut **p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| update(&cfg, bc1, bc2, p, m, v, g));
        }
        Ok(())
    }
}

/// Adam over the rows of one matrix where each step only touches a
/// subset of rows; every row keeps its own step count.
#[derive(Debug, Clone, PartialEq)]
pub struct RowAdam {
    pub cfg: AdamConfig,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub steps: Vec<u64>,
}

impl RowAdam {
    pub fn new(cfg: AdamConfig, shape: (usize, usize)) -> Self {
        Self {
            cfg,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            steps: vec![0; shape.0],
        }
    }

    /// `grad` holds one row per entry of `rows`, in that order. Rows must
    /// be distinct.
    pub fn step_rows(
        &mut self,
        param: &mut Array2<f64>,
        grad: &Array2<f64>,
        rows: &[usize],
    ) -> Result<(), NnError> {
        if param.dim() != self.m.dim()
            || grad.nrows() != rows.len()
            || grad.ncols() != param.ncols()
        {
            return Err(NnError::Shape {
                op: "row_adam_step",
                lhs: param.dim(),
                rhs: grad.dim(),
            });
        }
        for (k, &r) in rows.iter().enumerate() {
            if r >= param.nrows() {
                return Err(NnError::Index {
                    index: r,
                    len: param.nrows(),
                });
            }
            self.steps[r] += 1;
            let t = self.steps[r] as i32;
            let bc1 = 1.0 - self.cfg.beta1.powi(t);
            let bc2 = 1.0 - self.cfg.beta2.powi(t);
            for j in 0..param.ncols() {
                update(
                    &self.cfg,
                    bc1,
                    bc2,
                    &mut param[[r, j]],
                    &mut self.m[[r, j]],
                    &mut self.v[[r, j]],
                    grad[[k, j]],
                );
            }
        }
        Ok(())
    }
}
