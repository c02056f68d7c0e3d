//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`]s. Calling
//! [`Tape::backward`] on a 1×1 value walks the record in reverse and returns
//! exact gradients for every leaf created with `requires_grad`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Axis, Zip};

use super::NnError;

/// Fixed amplitude scale `n` of the Rowdy activation.
pub const ROWDY_SCALE: f64 = 10.0;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

enum Op {
    Leaf,
    /// `a · bᵀ`
    MatMulT(usize, usize),
    /// `a · b`
    MatMul(usize, usize),
    /// `x + row` broadcast over rows.
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Rowdy(RowdyIds, Rc<Trig>),
    RowdyDeriv(RowdyIds, Rc<Trig>),
    SelectRows(usize, Vec<usize>),
    SumAll(usize),
    /// Scalar output whose local gradient with respect to each listed input
    /// was computed during the forward pass.
    Custom(Vec<(usize, Array2<f64>)>),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct RowdyIds {
    h: usize,
    a: usize,
    f: usize,
    c: usize,
}

/// `sin θ` and `cos θ` of every sinusoid phase `θ = n Fᵢ h + cᵢ`, element
/// major, shared by the activation, its derivative and their backward
/// passes.
struct Trig {
    sin: Vec<f64>,
    cos: Vec<f64>,
}

impl Trig {
    fn new(h: &Array2<f64>, f: &[f64], c: &[f64]) -> Self {
        let k = f.len();
        let mut sin = Vec::with_capacity(h.len() * k);
        let mut cos = Vec::with_capacity(h.len() * k);
        for &x in h.iter() {
            for i in 0..k {
                let (s, co) = (ROWDY_SCALE * f[i] * x + c[i]).sin_cos();
                sin.push(s);
                cos.push(co);
            }
        }
        Self { sin, cos }
    }
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    trig: RefCell<HashMap<RowdyIds, Rc<Trig>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(tape {}, node {})", self.tape.id, self.idx)
    }
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

fn mismatch(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> NnError {
    NnError::Shape {
        op,
        lhs: shape(a),
        rhs: shape(b),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow. Where `eˣ` underflows the result is
/// held at the smallest normal float so it stays positive.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        let s = x.exp().ln_1p();
        if s == 0.0 {
            f64::MIN_POSITIVE
        } else {
            s
        }
    }
}

/// Logistic function, the derivative of [`softplus`].
#[inline]
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// Scalar Rowdy activation with amplitudes `a = [a₀, a₁, ...]`,
/// frequencies `f = [F₁, ...]` and phases `c = [c₁, ...]`.
#[inline]
pub fn rowdy_scalar(h: f64, a: &[f64], f: &[f64], c: &[f64]) -> f64 {
    let s0 = ROWDY_SCALE * a[0];
    let mut y = (s0 * h).max(0.0);
    for i in 0..f.len() {
        y += (ROWDY_SCALE * a[i + 1]) * (ROWDY_SCALE * f[i] * h + c[i]).sin();
    }
    y
}

/// Derivative of [`rowdy_scalar`] with respect to `h`.
#[inline]
pub fn rowdy_scalar_deriv(h: f64, a: &[f64], f: &[f64], c: &[f64]) -> f64 {
    let s0 = ROWDY_SCALE * a[0];
    let mut y = if s0 * h > 0.0 { s0 } else { 0.0 };
    for i in 0..f.len() {
        let th = ROWDY_SCALE * f[i] * h + c[i];
        y += ROWDY_SCALE * a[i + 1] * ROWDY_SCALE * f[i] * th.cos();
    }
    y
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            trig: RefCell::new(HashMap::new()),
        }
    }

    fn trig(&self, ids: RowdyIds, h: &Array2<f64>, f: &[f64], c: &[f64]) -> Rc<Trig> {
        self.trig
            .borrow_mut()
            .entry(ids)
            .or_insert_with(|| Rc::new(Trig::new(h, f, c)))
            .clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, idx: usize) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    fn grad_flag(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    fn own(&self, v: Var<'_>) -> Result<usize, NnError> {
        if std::ptr::eq(self, v.tape) {
            Ok(v.idx)
        } else {
            Err(NnError::ForeignVar)
        }
    }

    /// Record a scalar computed outside the tape together with its local
    /// gradients `∂value/∂input` for each input.
    pub fn custom_scalar<'t>(
        &'t self,
        value: f64,
        locals: Vec<(Var<'t>, Array2<f64>)>,
    ) -> Result<Var<'t>, NnError> {
        let mut ids = Vec::with_capacity(locals.len());
        let mut rg = false;
        for (v, g) in locals {
            let idx = self.own(v)?;
            let val = self.value_of(idx);
            if val.dim() != g.dim() {
                return Err(mismatch("custom_scalar", &val, &g));
            }
            rg |= self.grad_flag(idx);
            ids.push((idx, g));
        }
        Ok(self.push(Array2::from_elem((1, 1), value), Op::Custom(ids), rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NnError> {
        let root = self.own(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[root].value.dim() != (1, 1) {
            return Err(NnError::NotScalar(nodes[root].value.dim()));
        }
        if !nodes[root].requires_grad {
            return Err(NnError::NoGradPath);
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
            match &mut grads[idx] {
                Some(cur) => *cur += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| nodes[i].value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::MatMulT(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, g.dot(val(*b)));
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, g.t().dot(val(*a)));
                    }
                }
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::AddRow(x, row) => {
                    if needs(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needs(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, &g * val(*b));
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, &g * val(*a));
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if !(x > 0.0) {
                            *d = 0.0;
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| *d *= sigmoid(x));
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(node.value.as_ref())
                        .for_each(|d, &s| *d *= s * (1.0 - s));
                    acc(&mut grads, *a, d);
                }
                Op::Rowdy(ids, trig) => {
                    let parts = rowdy_backward(&g, val(ids.h), val(ids.a), val(ids.f), trig, false);
                    push_rowdy(&mut grads, &nodes, *ids, parts, acc);
                }
                Op::RowdyDeriv(ids, trig) => {
                    let parts = rowdy_backward(&g, val(ids.h), val(ids.a), val(ids.f), trig, true);
                    push_rowdy(&mut grads, &nodes, *ids, parts, acc);
                }
                Op::SelectRows(a, rows) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]]));
                }
                Op::Custom(locals) => {
                    let s = g[[0, 0]];
                    for (i, l) in locals {
                        if needs(*i) {
                            acc(&mut grads, *i, l * s);
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

struct RowdyParts {
    h: Array2<f64>,
    a: Array2<f64>,
    f: Array2<f64>,
    c: Array2<f64>,
}

fn push_rowdy(
    grads: &mut [Option<Array2<f64>>],
    nodes: &[Node],
    ids: RowdyIds,
    parts: RowdyParts,
    acc: fn(&mut [Option<Array2<f64>>], usize, Array2<f64>),
) {
    for (i, g) in [
        (ids.h, parts.h),
        (ids.a, parts.a),
        (ids.f, parts.f),
        (ids.c, parts.c),
    ] {
        if nodes[i].requires_grad {
            acc(grads, i, g);
        }
    }
}

/// Gradients of the Rowdy activation (or, with `deriv`, of its derivative
/// `σ'(h)`) contracted with the upstream gradient `g`.
fn rowdy_backward(
    g: &Array2<f64>,
    h: &Array2<f64>,
    a: &Array2<f64>,
    f: &Array2<f64>,
    trig: &Trig,
    deriv: bool,
) -> RowdyParts {
    const N: f64 = ROWDY_SCALE;
    let a = a.as_slice().expect("contiguous");
    let f = f.as_slice().expect("contiguous");
    let k = f.len();
    let s0 = N * a[0];
    let nn = N * N;
    // per-term constants: value coefficient, h-derivative coefficient
    let (va, vh): (Vec<f64>, Vec<f64>) = if deriv {
        (0..k)
            .map(|i| (nn * a[i + 1] * f[i], -nn * N * a[i + 1] * f[i] * f[i]))
            .unzip()
    } else {
        (0..k)
            .map(|i| (N * a[i + 1], N * a[i + 1] * N * f[i]))
            .unzip()
    };
    let mut gh = Array2::zeros(h.dim());
    let mut ga = vec![0.0; k + 1];
    let mut gf = vec![0.0; k];
    let mut gc = vec![0.0; k];
    let h = h.as_standard_layout();
    let g = g.as_standard_layout();
    let hs = h.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let out = gh.as_slice_mut().expect("fresh array");
    for (e, ((o, &gu), &x)) in out.iter_mut().zip(gs).zip(hs).enumerate() {
        let sin = &trig.sin[e * k..(e + 1) * k];
        let cos = &trig.cos[e * k..(e + 1) * k];
        let on = s0 * x > 0.0;
        let mut dh = 0.0;
        if deriv {
            if on {
                ga[0] += gu * N;
            }
            // z = N² aᵢ Fᵢ cos θ
            for i in 0..k {
                let (s, co) = (sin[i], cos[i]);
                dh += vh[i] * s;
                ga[i + 1] += gu * nn * f[i] * co;
                gf[i] += gu * (nn * a[i + 1] * co - va[i] * s * N * x);
                gc[i] -= gu * va[i] * s;
            }
        } else {
            if on {
                dh += s0;
                ga[0] += gu * N * x;
            }
            // y = N aᵢ sin θ
            for i in 0..k {
                let (s, co) = (sin[i], cos[i]);
                dh += vh[i] * co;
                ga[i + 1] += gu * N * s;
                let gco = gu * va[i] * co;
                gf[i] += gco * N * x;
                gc[i] += gco;
            }
        }
        *o = gu * dh;
    }
    let row = |v: Vec<f64>| Array2::from_shape_vec((1, v.len()), v).expect("row shape");
    RowdyParts {
        h: gh,
        a: row(ga),
        f: row(gf),
        c: row(gc),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var<'_>) -> Result<Array2<f64>, NnError> {
        if v.tape.id != self.tape {
            return Err(NnError::ForeignVar);
        }
        let node_rg = v.tape.grad_flag(v.idx);
        if !node_rg {
            return Err(NnError::NotTrainable);
        }
        Ok(match self.grads.get(v.idx).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array2::zeros(v.value().dim()),
        })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array2<f64>> {
        self.tape.value_of(self.idx)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn scalar(&self) -> f64 {
        self.value()[[0, 0]]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_flag(self.idx)
    }

    fn other(&self, o: Var<'t>) -> Result<usize, NnError> {
        self.tape.own(o)
    }

    fn unary(&self, value: Array2<f64>, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, o: Var<'t>, value: Array2<f64>, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || o.requires_grad();
        self.tape.push(value, op, rg)
    }

    /// `self · oᵀ`
    pub fn matmul_t(&self, o: Var<'t>) -> Result<Var<'t>, NnError> {
        let j = self.other(o)?;
        let (a, b) = (self.value(), o.value());
        if a.ncols() != b.ncols() {
            return Err(mismatch("matmul_t", &a, &b));
        }
        Ok(self.binary(o, a.dot(&b.t()), Op::MatMulT(self.idx, j)))
    }

    /// `self · o`
    pub fn matmul(&self, o: Var<'t>) -> Result<Var<'t>, NnError> {
        let j = self.other(o)?;
        let (a, b) = (self.value(), o.value());
        if a.ncols() != b.nrows() {
            return Err(mismatch("matmul", &a, &b));
        }
        Ok(self.binary(o, a.dot(b.as_ref()), Op::MatMul(self.idx, j)))
    }

    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>, NnError> {
        let j = self.other(row)?;
        let (a, r) = (self.value(), row.value());
        if r.nrows() != 1 || r.ncols() != a.ncols() {
            return Err(mismatch("add_row", &a, &r));
        }
        Ok(self.binary(row, a.as_ref() + r.as_ref(), Op::AddRow(self.idx, j)))
    }

    fn elementwise(
        &self,
        o: Var<'t>,
        name: &'static str,
        f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>, NnError> {
        let j = self.other(o)?;
        let (a, b) = (self.value(), o.value());
        if a.dim() != b.dim() {
            return Err(mismatch(name, &a, &b));
        }
        Ok(self.binary(o, f(&a, &b), op(self.idx, j)))
    }

    pub fn add(&self, o: Var<'t>) -> Result<Var<'t>, NnError> {
        self.elementwise(o, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, o: Var<'t>) -> Result<Var<'t>, NnError> {
        self.elementwise(o, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, o: Var<'t>) -> Result<Var<'t>, NnError> {
        self.elementwise(o, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(self.value().as_ref() * s, Op::Scale(self.idx, s))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value().mapv(|x| x.max(0.0)), Op::Relu(self.idx))
    }

    /// Constant 0/1 mask of the ReLU's active region.
    pub fn relu_mask(&self) -> Var<'t> {
        self.tape
            .constant(self.value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(self.value().mapv(softplus), Op::Softplus(self.idx))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(self.value().mapv(sigmoid), Op::Sigmoid(self.idx))
    }

    fn rowdy_ids(&self, a: Var<'t>, f: Var<'t>, c: Var<'t>) -> Result<RowdyIds, NnError> {
        let ids = RowdyIds {
            h: self.idx,
            a: self.other(a)?,
            f: self.other(f)?,
            c: self.other(c)?,
        };
        let (av, fv, cv) = (a.value(), f.value(), c.value());
        if av.nrows() != 1 || av.ncols() < 1 {
            return Err(NnError::Rowdy(format!(
                "amplitudes must be 1×K, got {:?}",
                av.dim()
            )));
        }
        let k = av.ncols() - 1;
        if fv.dim() != (1, k) || cv.dim() != (1, k) {
            return Err(NnError::Rowdy(format!(
                "frequencies {:?} and phases {:?} must be 1×{k}",
                fv.dim(),
                cv.dim()
            )));
        }
        Ok(ids)
    }

    fn rowdy_map(
        &self,
        a: Var<'t>,
        f: Var<'t>,
        c: Var<'t>,
        deriv: bool,
    ) -> Result<Var<'t>, NnError> {
        const N: f64 = ROWDY_SCALE;
        let ids = self.rowdy_ids(a, f, c)?;
        let h = self.value();
        let (av, fv) = (a.value(), f.value());
        let (av, fv) = (
            av.as_slice().expect("contiguous"),
            fv.as_slice().expect("contiguous"),
        );
        let trig = self
            .tape
            .trig(ids, &h, fv, c.value().as_slice().expect("contiguous"));
        let k = fv.len();
        let s0 = N * av[0];
        let coef: Vec<f64> = if deriv {
            (0..k).map(|i| N * av[i + 1] * N * fv[i]).collect()
        } else {
            (0..k).map(|i| N * av[i + 1]).collect()
        };
        let table = if deriv { &trig.cos } else { &trig.sin };
        let mut y = Array2::zeros(h.dim());
        for ((e, out), &x) in y.iter_mut().enumerate().zip(h.iter()) {
            let row = &table[e * k..(e + 1) * k];
            let mut acc = if deriv {
                if s0 * x > 0.0 {
                    s0
                } else {
                    0.0
                }
            } else {
                (s0 * x).max(0.0)
            };
            for (cf, v) in coef.iter().zip(row) {
                acc += cf * v;
            }
            *out = acc;
        }
        let rg =
            self.requires_grad() || a.requires_grad() || f.requires_grad() || c.requires_grad();
        let op = if deriv {
            Op::RowdyDeriv(ids, trig)
        } else {
            Op::Rowdy(ids, trig)
        };
        Ok(self.tape.push(y, op, rg))
    }

    /// Elementwise Rowdy activation.
    pub fn rowdy(&self, a: Var<'t>, f: Var<'t>, c: Var<'t>) -> Result<Var<'t>, NnError> {
        self.rowdy_map(a, f, c, false)
    }

    /// Elementwise derivative of the Rowdy activation with respect to its
    /// input, itself differentiable.
    pub fn rowdy_deriv(&self, a: Var<'t>, f: Var<'t>, c: Var<'t>) -> Result<Var<'t>, NnError> {
        self.rowdy_map(a, f, c, true)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>, NnError> {
        let v = self.value();
        if let Some(&r) = rows.iter().find(|&&r| r >= v.nrows()) {
            return Err(NnError::Index {
                index: r,
                len: v.nrows(),
            });
        }
        let out = v.select(Axis(0), rows);
        Ok(self.unary(out, Op::SelectRows(self.idx, rows.to_vec())))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Array2::from_elem((1, 1), s), Op::SumAll(self.idx))
    }
}
