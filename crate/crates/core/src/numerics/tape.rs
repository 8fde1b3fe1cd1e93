//! Reverse-mode differentiation over a flat tape of array operations.
//!
//! Values are computed eagerly when a node is pushed; `backward` walks the
//! tape once in reverse. Only the primitives below exist: affine maps
//! (matmul, bias, add/sub, constant scaling), the elementwise nonlinearities
//! tanh/relu/sin/cos/exp/log/square, sum/mean reductions and column
//! concatenation.

use std::collections::BTreeMap;

use super::array::{gemm, Array};
use super::params::ParamSet;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Relu,
    Sin,
    Cos,
    Exp,
    Log,
    Square,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulConst(Var, Array),
    Scale(Var, f64),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Variables bound to the leaves of a [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn bind_params(&mut self, params: &ParamSet) -> ParamVars {
        let vars = params.iter().map(|(name, arr)| (name.to_string(), self.variable(arr.clone()))).collect();
        ParamVars { vars }
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(shape_err(format!("add_row {:?} + {:?}", xv.shape(), bv.shape())));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += y;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "sub")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= y;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Array) -> Result<Var> {
        self.value(x).same_shape(&c, "mul_const")?;
        let mut out = self.value(x).clone();
        for (o, y) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= y;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| f.apply(v));
        let rg = self.rg(x);
        self.push(out, Op::Unary(x, f), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Array::scalar(m), Op::Mean(x), rg)
    }

    /// `[m,n1] ++ [m,n2] -> [m,n1+n2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err(format!("concat {:?} ++ {:?}", av.shape(), bv.shape())));
        }
        let (m, n1, n2) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::matrix(m, n1 + n2, out)?, Op::ConcatCols(a, b), rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(Error::Contract(format!("backward requires a scalar output, got shape {:?}", ov.shape())));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array::full(ov.shape(), 1.0));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.rg(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                        accumulate(&mut grads, *a, Array::matrix(m, k, da)?);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                        accumulate(&mut grads, *b, Array::matrix(k, n, db)?);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.rg(*bias) {
                        let bshape = self.value(*bias).shape().to_vec();
                        let c = g.cols();
                        let mut db = vec![0.0; c];
                        for r in 0..g.rows() {
                            for (d, v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *bias, Array::new(bshape, db)?);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g.clone());
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::MulConst(x, c) => {
                    let mut d = g.clone();
                    for (o, y) in d.data_mut().iter_mut().zip(c.data()) {
                        *o *= y;
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.map(|v| v * s)),
                Op::Unary(x, f) => {
                    let xv = self.value(*x);
                    let mut d = g.clone();
                    for ((o, &xi), &yi) in d.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                        *o *= f.deriv(xi, yi);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let gs = g.data()[0];
                    accumulate(&mut grads, *x, Array::full(self.value(*x).shape(), gs));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gs = g.data()[0] / xv.len().max(1) as f64;
                    accumulate(&mut grads, *x, Array::full(xv.shape(), gs));
                }
                Op::ConcatCols(a, b) => {
                    let (n1, n2) = (self.value(*a).cols(), self.value(*b).cols());
                    let m = g.rows();
                    let mut da = Vec::with_capacity(m * n1);
                    let mut db = Vec::with_capacity(m * n2);
                    for r in 0..m {
                        let row = g.row(r);
                        da.extend_from_slice(&row[..n1]);
                        db.extend_from_slice(&row[n1..]);
                    }
                    if self.rg(*a) {
                        let shape = self.value(*a).shape().to_vec();
                        accumulate(&mut grads, *a, Array::new(shape, da)?);
                    }
                    if self.rg(*b) {
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut grads, *b, Array::new(shape, db)?);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Evaluates a scalar expression over `params` and returns it with the
/// gradient with respect to every parameter.
pub fn value_and_grad<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.bind_params(params);
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Contract(format!("objective must be scalar, got shape {:?}", value.shape())));
    }
    let loss = value.data()[0];
    let grads = tape.backward(out)?;
    let mut out_grads = params.zeros_like();
    for (name, var) in &vars.vars {
        if let Some(g) = grads.get(*var) {
            out_grads.get_mut(name)?.data_mut().copy_from_slice(g.data());
        }
    }
    Ok((loss, out_grads))
}
