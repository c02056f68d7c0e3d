use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{rowdy_scalar, softplus, Tape, Var};
use super::NnError;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Rowdy,
    Linear,
}

/// Layer widths and activations of the branch/trunk pair.
///
/// Every layer except the last of each subnetwork applies its
/// activation; the last layers are affine so the latent coefficients and
/// basis functions are unconstrained in sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[input, hidden..., latent]`
    pub branch: Vec<usize>,
    /// `[input, hidden..., latent]`
    pub trunk: Vec<usize>,
    pub branch_activation: Activation,
    pub trunk_activation: Activation,
    /// Rowdy term count `K` (ReLU base plus `K − 1` sinusoids).
    pub rowdy_terms: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Architecture(m));
        if self.branch.len() < 2 || self.trunk.len() < 2 {
            return bad("branch and trunk need at least an input and an output width".into());
        }
        if self.branch.iter().chain(&self.trunk).any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.branch.last() != self.trunk.last() {
            return bad(format!(
                "branch output {} differs from trunk output {}",
                self.branch.last().unwrap(),
                self.trunk.last().unwrap()
            ));
        }
        let uses_rowdy = self.branch_activation == Activation::Rowdy
            || self.trunk_activation == Activation::Rowdy;
        if uses_rowdy && self.rowdy_terms < 1 {
            return bad("rowdy_terms must be >= 1".into());
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        *self.branch.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weight: Array2<f64>,
    /// `1 × out`
    pub bias: Array2<f64>,
}

impl DenseLayer {
    pub fn new(weight: Array2<f64>, bias: Vec<f64>) -> Result<Self, NnError> {
        let out = bias.len();
        if weight.nrows() != out {
            return Err(NnError::Shape {
                op: "dense_new",
                lhs: weight.dim(),
                rhs: (1, out),
            });
        }
        Ok(Self {
            weight,
            bias: Array2::from_shape_vec((1, out), bias).expect("row"),
        })
    }

    /// Glorot-uniform weights and zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-limit..limit)),
            bias: Array2::zeros((1, outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    /// `h = x Wᵀ + b` for a batch `x` of rows.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        if x.ncols() != self.inputs() {
            return Err(NnError::Shape {
                op: "dense_forward",
                lhs: x.dim(),
                rhs: self.weight.dim(),
            });
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }
}

/// Learnable parameters of one Rowdy activation.
#[derive(Debug, Clone, PartialEq)]
pub struct RowdyParams {
    /// `1 × K`: `a₀, a₁, ..., a_{K−1}`
    pub a: Array2<f64>,
    /// `1 × (K−1)`
    pub f: Array2<f64>,
    /// `1 × (K−1)`
    pub c: Array2<f64>,
}

impl RowdyParams {
    /// `a₀ = 0.1`, other amplitudes and phases zero, `Fᵢ = i`.
    pub fn init(k: usize) -> Self {
        let mut a = Array2::zeros((1, k));
        a[[0, 0]] = 0.1;
        Self {
            a,
            f: Array2::from_shape_fn((1, k.saturating_sub(1)), |(_, i)| (i + 1) as f64),
            c: Array2::zeros((1, k.saturating_sub(1))),
        }
    }

    pub fn terms(&self) -> usize {
        self.a.ncols()
    }

    pub fn activate(&self, h: &Array2<f64>) -> Array2<f64> {
        let (a, f, c) = (
            self.a.as_slice().expect("contiguous"),
            self.f.as_slice().expect("contiguous"),
            self.c.as_slice().expect("contiguous"),
        );
        h.mapv(|x| rowdy_scalar(x, a, f, c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerAct {
    Relu,
    Rowdy(RowdyParams),
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub dense: DenseLayer,
    pub act: LayerAct,
}

impl Layer {
    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.dense.weight, &self.dense.bias];
        if let LayerAct::Rowdy(r) = &self.act {
            v.extend([&r.a, &r.f, &r.c]);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![&mut self.dense.weight, &mut self.dense.bias];
        if let LayerAct::Rowdy(r) = &mut self.act {
            v.extend([&mut r.a, &mut r.f, &mut r.c]);
        }
        v
    }

    fn tensor_names(&self, prefix: &str) -> Vec<String> {
        let mut v = vec![format!("{prefix}.weight"), format!("{prefix}.bias")];
        if matches!(self.act, LayerAct::Rowdy(_)) {
            v.extend(["a", "f", "c"].map(|s| format!("{prefix}.rowdy_{s}")));
        }
        v
    }
}

fn build_stack(widths: &[usize], act: Activation, k: usize, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let last = widths.len() - 2;
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Layer {
            dense: DenseLayer::glorot(w[0], w[1], rng),
            act: if i == last {
                LayerAct::Linear
            } else {
                match act {
                    Activation::Relu => LayerAct::Relu,
                    Activation::Rowdy => LayerAct::Rowdy(RowdyParams::init(k)),
                    Activation::Linear => LayerAct::Linear,
                }
            },
        })
        .collect()
}

/// Which parameters a tape records as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    Branch,
    Trunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub branch: Vec<Layer>,
    pub trunk: Vec<Layer>,
    /// Fixed `d × d` map applied to the trunk output (two-step training's
    /// `V Σ⁻¹`); not trained.
    pub trunk_projection: Option<Array2<f64>>,
}

impl NetworkParams {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch = build_stack(
            &arch.branch,
            arch.branch_activation,
            arch.rowdy_terms,
            &mut rng,
        );
        let trunk = build_stack(
            &arch.trunk,
            arch.trunk_activation,
            arch.rowdy_terms,
            &mut rng,
        );
        Ok(Self {
            arch: arch.clone(),
            branch,
            trunk,
            trunk_projection: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim()
    }

    pub fn branch_input_dim(&self) -> usize {
        self.arch.branch[0]
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.arch.trunk[0]
    }

    /// Trainable tensors, branch first, each layer as W, b[, a, F, c].
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        self.branch
            .iter()
            .chain(&self.trunk)
            .flat_map(|l| l.tensors())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.branch
            .iter_mut()
            .chain(self.trunk.iter_mut())
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let b = self
            .branch
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.tensor_names(&format!("branch.{i}")));
        let t = self
            .trunk
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.tensor_names(&format!("trunk.{i}")));
        b.chain(t).collect()
    }

    /// Number of tensors that belong to the branch in [`Self::tensors`].
    pub fn branch_tensor_count(&self) -> usize {
        self.branch.iter().map(|l| l.tensors().len()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Record all parameters on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: Trainable) -> BoundNet<'t> {
        let bind_stack = |layers: &[Layer], train: bool| -> Vec<BoundLayer<'t>> {
            let leaf = |x: &Array2<f64>| {
                if train {
                    tape.param(x.clone())
                } else {
                    tape.constant(x.clone())
                }
            };
            layers
                .iter()
                .map(|l| BoundLayer {
                    w: leaf(&l.dense.weight),
                    b: leaf(&l.dense.bias),
                    act: match &l.act {
                        LayerAct::Relu => BoundAct::Relu,
                        LayerAct::Linear => BoundAct::Linear,
                        LayerAct::Rowdy(r) => BoundAct::Rowdy(leaf(&r.a), leaf(&r.f), leaf(&r.c)),
                    },
                })
                .collect()
        };
        let branch = bind_stack(&self.branch, trainable != Trainable::Trunk);
        let trunk = bind_stack(&self.trunk, trainable != Trainable::Branch);
        let projection = self
            .trunk_projection
            .as_ref()
            .map(|p| tape.constant(p.clone()));
        BoundNet {
            tape,
            branch,
            trunk,
            projection,
        }
    }

    /// Gated prediction `m × n` and optionally its trunk-input derivative
    /// along `tangent`, without recording gradients.
    pub fn predict(
        &self,
        pressure: &Array2<f64>,
        trunk_input: &Array2<f64>,
        tangent: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>), NnError> {
        let tape = Tape::new();
        let net = self.bind(&tape, Trainable::All);
        let p = tape.constant(pressure.clone());
        let x = tape.constant(trunk_input.clone());
        let dx = tangent.map(|d| tape.constant(d.clone()));
        let out = net.forward(p, x, dx)?;
        let r = out.radius.value().as_ref().clone();
        let dr = out.d_radius.map(|d| d.value().as_ref().clone());
        Ok((r, dr))
    }

    /// Gated prediction from precomputed trunk outputs (`N × d`, projection
    /// already applied), as produced by [`BoundNet::trunk`].
    pub fn predict_with_trunk(
        &self,
        pressure: &Array2<f64>,
        trunk_out: &Array2<f64>,
    ) -> Result<Array2<f64>, NnError> {
        let tape = Tape::new();
        let net = self.bind(&tape, Trainable::All);
        let b = net.branch(tape.constant(pressure.clone()))?;
        let raw = combine(b, tape.constant(trunk_out.clone()))?;
        Ok(output_gate(raw).value().as_ref().clone())
    }
}

enum BoundAct<'t> {
    Relu,
    Linear,
    Rowdy(Var<'t>, Var<'t>, Var<'t>),
}

struct BoundLayer<'t> {
    w: Var<'t>,
    b: Var<'t>,
    act: BoundAct<'t>,
}

impl<'t> BoundLayer<'t> {
    fn leaves(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.w, self.b];
        if let BoundAct::Rowdy(a, f, c) = self.act {
            v.extend([a, f, c]);
        }
        v
    }
}

/// Network parameters recorded on a tape.
pub struct BoundNet<'t> {
    tape: &'t Tape,
    branch: Vec<BoundLayer<'t>>,
    trunk: Vec<BoundLayer<'t>>,
    projection: Option<Var<'t>>,
}

pub struct NetOutput<'t> {
    /// Gated radii `m × n`.
    pub radius: Var<'t>,
    /// `∂R/∂(trunk input) · tangent`, `m × n`.
    pub d_radius: Option<Var<'t>>,
    /// Ungated `B Tᵀ`.
    pub raw: Var<'t>,
    pub branch: Var<'t>,
    pub trunk: Var<'t>,
}

/// `R = B Tᵀ`.
pub fn combine<'t>(b: Var<'t>, t: Var<'t>) -> Result<Var<'t>, NnError> {
    b.matmul_t(t)
}

pub fn output_gate<'t>(raw: Var<'t>) -> Var<'t> {
    raw.softplus()
}

impl<'t> BoundNet<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Leaves in the order of [`NetworkParams::tensors`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        self.branch
            .iter()
            .chain(&self.trunk)
            .flat_map(|l| l.leaves())
            .collect()
    }

    /// Gradients for every tensor, zeros for frozen ones.
    pub fn gradients(&self, grads: &super::Gradients) -> Result<Vec<Array2<f64>>, NnError> {
        self.leaves()
            .into_iter()
            .map(|v| match grads.get(v) {
                Err(NnError::NotTrainable) => Ok(Array2::zeros(v.dim())),
                other => other,
            })
            .collect()
    }

    pub fn branch(&self, pressure: Var<'t>) -> Result<Var<'t>, NnError> {
        let mut x = pressure;
        for l in &self.branch {
            let h = x.matmul_t(l.w)?.add_row(l.b)?;
            x = match l.act {
                BoundAct::Relu => h.relu(),
                BoundAct::Linear => h,
                BoundAct::Rowdy(a, f, c) => h.rowdy(a, f, c)?,
            };
        }
        Ok(x)
    }

    /// Trunk output and, given a tangent of the input, its directional
    /// derivative carried forward layer by layer.
    pub fn trunk(
        &self,
        input: Var<'t>,
        tangent: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Option<Var<'t>>), NnError> {
        let mut x = input;
        let mut dx = tangent;
        for l in &self.trunk {
            let h = x.matmul_t(l.w)?.add_row(l.b)?;
            let dh = match dx {
                Some(d) => Some(d.matmul_t(l.w)?),
                None => None,
            };
            (x, dx) = match l.act {
                BoundAct::Linear => (h, dh),
                BoundAct::Relu => {
                    let dy = match dh {
                        Some(d) => Some(d.mul(h.relu_mask())?),
                        None => None,
                    };
                    (h.relu(), dy)
                }
                BoundAct::Rowdy(a, f, c) => {
                    let dy = match dh {
                        Some(d) => Some(d.mul(h.rowdy_deriv(a, f, c)?)?),
                        None => None,
                    };
                    (h.rowdy(a, f, c)?, dy)
                }
            };
        }
        if let Some(p) = self.projection {
            x = x.matmul(p)?;
            dx = match dx {
                Some(d) => Some(d.matmul(p)?),
                None => None,
            };
        }
        Ok((x, dx))
    }

    pub fn forward(
        &self,
        pressure: Var<'t>,
        trunk_input: Var<'t>,
        tangent: Option<Var<'t>>,
    ) -> Result<NetOutput<'t>, NnError> {
        let b = self.branch(pressure)?;
        let (t, dt) = self.trunk(trunk_input, tangent)?;
        let raw = combine(b, t)?;
        let radius = output_gate(raw);
        let d_radius = match dt {
            Some(dt) => Some(raw.sigmoid().mul(combine(b, dt)?)?),
            None => None,
        };
        Ok(NetOutput {
            radius,
            d_radius,
            raw,
            branch: b,
            trunk: t,
        })
    }
}

/// Column `n × 1` of time values with a unit tangent.
pub fn time_column(t: &[f64]) -> (Array2<f64>, Array2<f64>) {
    let n = t.len();
    (
        Array2::from_shape_vec((n, 1), t.to_vec()).expect("column"),
        Array2::ones((n, 1)),
    )
}

/// Pure-array gated output, used as an oracle for the tape path.
pub fn gate_array(raw: &Array2<f64>) -> Array2<f64> {
    raw.mapv(softplus)
}
