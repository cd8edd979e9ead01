//! Reverse-mode differentiation over a recorded sequence of tensor
//! operations.
//!
//! A [`Tape`] is the computation record. Leaves enter through
//! [`Tape::param`] (gradients are reported for these) or
//! [`Tape::constant`]. Every operation on a [`Var`] appends a node whose
//! inputs precede it, so replaying adjoints from the loss backwards visits
//! each node once.
//!
//! ```
//! use pengcde::autodiff::Tape;
//! use pengcde::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let loss = x.mul(x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::equivariant::kernels;
use crate::error::{Error, Result};
use crate::tensor::{broadcast_zip, gemm, reduce_to_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn slope(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    Act(Activation, usize),
    LinComb(Vec<(f64, usize)>),
    SumAll(usize),
    SumLastAxis(usize),
    Reshape(usize),
    Transpose(usize),
    LayerNorm { input: usize, inv_std: Vec<f64> },
    EquivApply { weights: usize, input: usize },
    PermuteRows { input: usize, perm: Vec<usize> },
    BceLogits { logits: usize, targets: Tensor },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// The computation record.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// New empty record. Non-finite checks follow `debug_assertions`.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(cfg!(debug_assertions)),
        }
    }

    pub fn set_finite_checks(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, is_param: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: is_param,
            is_param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op_inputs(&op).iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            is_param: false,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn owns(&self, v: Var<'_>) -> bool {
        std::ptr::eq(self, v.tape) && v.id < self.len()
    }

    /// Exact reverse-mode gradients of a scalar `loss` for every parameter
    /// leaf it depends on.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(Error::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut out = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.is_param {
                out.insert(id, g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Act(_, a)
        | Op::SumAll(a)
        | Op::SumLastAxis(a)
        | Op::Reshape(a)
        | Op::Transpose(a) => vec![*a],
        Op::LinComb(terms) => terms.iter().map(|t| t.1).collect(),
        Op::LayerNorm { input, .. } | Op::PermuteRows { input, .. } => vec![*input],
        Op::EquivApply { weights, input } => vec![*weights, *input],
        Op::BceLogits { logits, .. } => vec![*logits],
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut ga, 0.0);
                accumulate(nodes, grads, *a, Tensor::from_parts(vec![m, k], ga));
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut gb, 0.0);
                accumulate(nodes, grads, *b, Tensor::from_parts(vec![k, n], gb));
            }
        }
        Op::Binary(kind, a, b) => {
            let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
            match kind {
                Binary::Add => {
                    accumulate(nodes, grads, *a, reduce_to_shape(g, &sa));
                    accumulate(nodes, grads, *b, reduce_to_shape(g, &sb));
                }
                Binary::Sub => {
                    accumulate(nodes, grads, *a, reduce_to_shape(g, &sa));
                    accumulate(nodes, grads, *b, reduce_to_shape(&g.scale(-1.0), &sb));
                }
                Binary::Mul => {
                    if nodes[*a].requires_grad {
                        let ga = g.mul(val(*b)).expect("broadcast checked on forward");
                        accumulate(nodes, grads, *a, reduce_to_shape(&ga, &sa));
                    }
                    if nodes[*b].requires_grad {
                        let gb = g.mul(val(*a)).expect("broadcast checked on forward");
                        accumulate(nodes, grads, *b, reduce_to_shape(&gb, &sb));
                    }
                }
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.scale(*c)),
        Op::Act(kind, a) => {
            let x = val(*a).data();
            let y = node.value.data();
            let data = g
                .data()
                .iter()
                .zip(x.iter().zip(y))
                .map(|(gi, (&xi, &yi))| gi * kind.slope(xi, yi))
                .collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
        }
        Op::LinComb(terms) => {
            for &(c, i) in terms {
                accumulate(nodes, grads, i, g.scale(c));
            }
        }
        Op::SumAll(a) => {
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), g.item()));
        }
        Op::SumLastAxis(a) => {
            let shape = val(*a).shape().to_vec();
            let last = *shape.last().unwrap();
            let data = g
                .data()
                .iter()
                .flat_map(|&gi| std::iter::repeat_n(gi, last))
                .collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(shape, data));
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
        }
        Op::Transpose(a) => {
            accumulate(nodes, grads, *a, g.transpose().expect("matrix"));
        }
        Op::LayerNorm { input, inv_std } => {
            let y = &node.value;
            let width = *y.shape().last().unwrap();
            let mut out = vec![0.0; y.len()];
            for (r, &s) in inv_std.iter().enumerate() {
                let span = r * width..(r + 1) * width;
                let gy = &g.data()[span.clone()];
                let yy = &y.data()[span.clone()];
                let mean_g = gy.iter().sum::<f64>() / width as f64;
                let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                for (o, (gi, yi)) in out[span].iter_mut().zip(gy.iter().zip(yy)) {
                    *o = s * (gi - mean_g - yi * mean_gy);
                }
            }
            accumulate(nodes, grads, *input, Tensor::from_parts(y.shape().to_vec(), out));
        }
        Op::EquivApply { weights, input } => {
            let a = val(*input);
            let n = a.shape()[0];
            if nodes[*weights].requires_grad {
                let inner = kernels::basis_inner_products(n, a.data(), g.data());
                accumulate(nodes, grads, *weights, Tensor::from_parts(vec![15], inner.to_vec()));
            }
            if nodes[*input].requires_grad {
                let w = val(*weights).data();
                let mut wa = [0.0; 15];
                for (k, &wk) in w.iter().enumerate() {
                    wa[kernels::adjoint_index(k)] += wk;
                }
                let mut out = vec![0.0; n * n];
                kernels::apply_combination(n, &wa, g.data(), &mut out);
                accumulate(nodes, grads, *input, Tensor::from_parts(vec![n, n], out));
            }
        }
        Op::PermuteRows { input, perm } => {
            let shape = val(*input).shape().to_vec();
            let width = g.len() / perm.len();
            let mut out = vec![0.0; g.len()];
            for (i, &src) in perm.iter().enumerate() {
                out[src * width..(src + 1) * width]
                    .copy_from_slice(&g.data()[i * width..(i + 1) * width]);
            }
            accumulate(nodes, grads, *input, Tensor::from_parts(shape, out));
        }
        Op::BceLogits { logits, targets } => {
            let x = val(*logits);
            let scale = g.item() / x.len() as f64;
            let data = x
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&xi, &yi)| scale * (sigmoid(xi) - yi))
                .collect();
            accumulate(nodes, grads, *logits, Tensor::from_parts(x.shape().to_vec(), data));
        }
    }
}

/// Gradients keyed by parameter node.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&v.id)
    }

    /// Gradient for `v`, zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    pub fn by_node(&self) -> &HashMap<usize, Tensor> {
        &self.grads
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.value().matmul(&other.value())?;
        self.tape.push(v, Op::MatMul(self.id, other.id), "matmul")
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (v, name) = match kind {
            Binary::Add => (broadcast_zip(&a, &b, "add", |x, y| x + y)?, "add"),
            Binary::Sub => (broadcast_zip(&a, &b, "sub", |x, y| x - y)?, "sub"),
            Binary::Mul => (broadcast_zip(&a, &b, "mul", |x, y| x * y)?, "mul"),
        };
        self.tape.push(v, Op::Binary(kind, self.id, other.id), name)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    /// Entrywise (Hadamard) product with broadcasting.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().scale(c);
        self.tape.push(v, Op::Scale(self.id, c), "scale")
    }

    pub fn activate(self, kind: Activation) -> Result<Var<'t>> {
        if kind == Activation::Identity {
            return Ok(self);
        }
        let v = self.value().map(|x| kind.apply(x));
        self.tape.push(v, Op::Act(kind, self.id), "activation")
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.activate(Activation::Tanh)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.activate(Activation::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.activate(Activation::Sigmoid)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::SumAll(self.id), "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums out the trailing axis.
    pub fn sum_last_axis(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        let Some((&last, lead)) = shape.split_last() else {
            return Err(Error::invalid("sum_last_axis on a scalar"));
        };
        let data = if last == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            x.data().chunks(last).map(|c| c.iter().sum()).collect()
        };
        let v = Tensor::from_parts(lead.to_vec(), data);
        self.tape.push(v, Op::SumLastAxis(self.id), "sum_last_axis")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape.push(v, Op::Reshape(self.id), "reshape")
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        self.tape.push(v, Op::Transpose(self.id), "transpose")
    }

    /// Normalizes every slice along the trailing axis to zero mean and unit
    /// variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let width = *x
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm on a scalar"))?;
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / width.max(1));
        for (row, o) in x.data().chunks(width).zip(out.chunks_mut(width)) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (oi, xi) in o.iter_mut().zip(row) {
                *oi = (xi - mean) * s;
            }
            inv_std.push(s);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.tape.push(
            v,
            Op::LayerNorm {
                input: self.id,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// `Σ_k w_k B_k(self)` over the 15 permutation-equivariant basis maps;
    /// `weights` has shape `[15]`, `self` is square.
    pub fn equiv_apply(self, weights: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(weights)?;
        let (a, w) = (self.value(), weights.value());
        let (n, m) = a.dims2()?;
        if n != m || w.len() != 15 {
            return Err(Error::ShapeMismatch {
                op: "equiv_apply",
                lhs: w.shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
        let mut coeffs = [0.0; 15];
        coeffs.copy_from_slice(w.data());
        let mut out = vec![0.0; n * n];
        kernels::apply_combination(n, &coeffs, a.data(), &mut out);
        self.tape.push(
            Tensor::from_parts(vec![n, n], out),
            Op::EquivApply {
                weights: weights.id,
                input: self.id,
            },
            "equiv_apply",
        )
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rows = *x.shape().first().unwrap_or(&0);
        if rows != perm.len() {
            return Err(Error::ShapeMismatch {
                op: "permute_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![perm.len()],
            });
        }
        let width = x.len() / rows.max(1);
        let mut out = Vec::with_capacity(x.len());
        for &src in perm {
            out.extend_from_slice(&x.data()[src * width..(src + 1) * width]);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.tape.push(
            v,
            Op::PermuteRows {
                input: self.id,
                perm: perm.to_vec(),
            },
            "permute_rows",
        )
    }

    /// Mean logistic cross-entropy of logits against 0/1 targets, computed
    /// in the overflow-free form `max(x,0) - x y + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(self, targets: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != targets.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: x.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&xi, &yi)| xi.max(0.0) - xi * yi + (-xi.abs()).exp().ln_1p())
            .sum();
        let v = Tensor::scalar(total / x.len() as f64);
        self.tape.push(
            v,
            Op::BceLogits {
                logits: self.id,
                targets: targets.clone(),
            },
            "bce_with_logits",
        )
    }
}

/// `Σ c_i x_i` as one recorded node. All terms share a shape.
pub fn lin_comb<'t>(terms: &[(f64, Var<'t>)]) -> Result<Var<'t>> {
    let (_, first) = *terms
        .first()
        .ok_or_else(|| Error::invalid("empty linear combination"))?;
    let tape = first.tape;
    let mut acc = first.value().scale(terms[0].0);
    for &(c, v) in &terms[1..] {
        first.same_tape(v)?;
        acc.axpy(c, &v.value())?;
    }
    let ids = terms.iter().map(|&(c, v)| (c, v.id)).collect();
    tape.push(acc, Op::LinComb(ids), "lin_comb")
}

/// Max over parameter tensors of `‖AD − FD‖ / (‖FD‖ + 1e-12)` with central
/// differences of step `h`. `f` records a scalar loss from parameter vars.
pub fn gradcheck<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.value().item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("gradcheck"))
        }
    };
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, ad) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        for j in 0..work[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            diff2 += (ad.data()[j] - fd).powi(2);
            fd2 += fd * fd;
        }
        worst = worst.max(diff2.sqrt() / (fd2.sqrt() + 1e-12));
    }
    Ok(worst)
}
