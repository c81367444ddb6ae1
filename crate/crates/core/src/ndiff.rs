//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! A [`Tape`] records one forward computation. Nodes are appended after
//! their inputs, so index order is a topological order and the backward
//! pass is a single reverse sweep. Persistent weights live in a
//! [`ParameterStore`]; they are copied onto the tape with [`Tape::param`]
//! and gradients flow back with [`ParameterStore::accumulate`].
//!
//! Gradients accumulate: calling [`Tape::backward`] twice without
//! [`Tape::zero_grad`] adds the two results, and the same holds for
//! [`ParameterStore::accumulate`] until [`ParameterStore::zero_grad`] or an
//! optimizer step clears them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Mat,
    grad: Option<Mat>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that receives a gradient.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies parameter `name` onto the tape.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let p = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{}'", name)))?;
        let v = self.push(p.value.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    /// Same value as `v`, cut from the graph.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Parameter nodes on this tape with their store names.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_deref().map(|name| (name, Var(i))))
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerics(format!("non-finite values in {}", what)))
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{}: {:?} vs {:?}", op, sa, sb)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = va * vb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).component_mul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x + 1·row`, broadcasting a `1 × c` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != vx.ncols() {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                vx.shape(),
                vr.shape()
            )));
        }
        let mut out = vx.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(vr[(0, j)]);
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Mat::from_element(1, 1, s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / (v.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(Mat::from_element(1, 1, s), Op::Mean(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Horizontal concatenation; every part must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        let rows = self.value(*first).nrows();
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.nrows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts {} vs {}",
                    rows,
                    v.nrows()
                )));
            }
            cols += v.ncols();
        }
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            out.view_mut((0, offset), (rows, v.ncols())).copy_from(v);
            offset += v.ncols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that
    /// requires a gradient holds `d loss / d node`, zero when the loss does
    /// not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                shape
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::from_element(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.vjp(i, &g);
            for (input, gi) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => *acc += gi,
                    slot => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let g = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| Mat::zeros(node.value.nrows(), node.value.ncols()));
            match &mut node.grad {
                Some(acc) => *acc += g,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Vector–Jacobian products of node `i` given its output gradient,
    /// only for inputs that need one.
    fn vjp(&self, i: usize, g: &Mat) -> Vec<(Var, Mat)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut v = Vec::with_capacity(2);
        let mut push = |x: Var, f: &dyn Fn() -> Mat| {
            if self.rg(x) {
                v.push((x, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                push(*a, &|| g * self.value(*b).transpose());
                push(*b, &|| self.value(*a).transpose() * g);
            }
            Op::Add(a, b) => {
                push(*a, &|| g.clone());
                push(*b, &|| g.clone());
            }
            Op::Sub(a, b) => {
                push(*a, &|| g.clone());
                push(*b, &|| -g);
            }
            Op::Mul(a, b) => {
                push(*a, &|| g.component_mul(self.value(*b)));
                push(*b, &|| g.component_mul(self.value(*a)));
            }
            Op::AddRow(x, row) => {
                push(*x, &|| g.clone());
                push(*row, &|| {
                    let mut rsum = Mat::zeros(1, g.ncols());
                    for (j, col) in g.column_iter().enumerate() {
                        rsum[(0, j)] = col.sum();
                    }
                    rsum
                });
            }
            Op::Scale(x, c) => push(*x, &|| g * *c),
            Op::AddScalar(x) => push(*x, &|| g.clone()),
            Op::Tanh(x) => push(*x, &|| g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
            Op::Sigmoid(x) => push(*x, &|| g.zip_map(out, |gi, y| gi * y * (1.0 - y))),
            Op::Softplus(x) => push(*x, &|| g.zip_map(self.value(*x), |gi, xi| gi * sigmoid(xi))),
            Op::Exp(x) => push(*x, &|| g.component_mul(out)),
            Op::Log(x) => push(*x, &|| g.component_div(self.value(*x))),
            Op::Square(x) => push(*x, &|| g.zip_map(self.value(*x), |gi, xi| 2.0 * gi * xi)),
            Op::Sum(x) => push(*x, &|| {
                let (r, c) = self.value(*x).shape();
                Mat::from_element(r, c, g[(0, 0)])
            }),
            Op::Mean(x) => push(*x, &|| {
                let val = self.value(*x);
                let s = g[(0, 0)] / (val.len().max(1) as f64);
                Mat::from_element(val.nrows(), val.ncols(), s)
            }),
            Op::Transpose(x) => push(*x, &|| g.transpose()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).ncols();
                    push(*p, &|| g.columns(offset, c).into_owned());
                    offset += c;
                }
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Mat,
    pub grad: Mat,
    /// Subnetwork the parameter belongs to, used to select what an
    /// optimizer step updates.
    pub group: String,
}

/// Named parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: &str, value: Mat) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter '{}'", name)));
        }
        let grad = Mat::zeros(value.nrows(), value.ncols());
        self.params.insert(
            name.to_string(),
            Parameter {
                value,
                grad,
                group: group.to_string(),
            },
        );
        Ok(())
    }

    /// Dense layer weight `fan_in × fan_out` drawn from
    /// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))` and a zero bias.
    pub fn insert_dense<R: Rng>(
        &mut self,
        prefix: &str,
        group: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Mat::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound));
        self.insert(&format!("{}.w", prefix), group, w)?;
        self.insert(&format!("{}.b", prefix), group, Mat::zeros(1, fan_out))
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Adds the gradients of every parameter node on `tape` into the store.
    /// Call after [`Tape::backward`].
    pub fn accumulate(&mut self, tape: &Tape) -> Result<()> {
        for (name, var) in tape.params() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter '{}'", name)))?;
            if let Some(g) = tape.grad(var) {
                p.grad += g;
            }
        }
        Ok(())
    }

    /// `p ← p − lr·(grad + weight_decay·p)` for every parameter, then zero
    /// all gradients.
    pub fn sgd_step(&mut self, lr: f64, weight_decay: f64) -> Result<()> {
        self.sgd_step_filtered(lr, weight_decay, |_| true)
    }

    /// Like [`sgd_step`](Self::sgd_step) but only parameters whose group
    /// passes `select` move. Every gradient is zeroed either way. On a
    /// non-finite gradient nothing is updated.
    pub fn sgd_step_filtered(
        &mut self,
        lr: f64,
        weight_decay: f64,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.sgd_step_with(weight_decay, |g| select(g).then_some(lr))
    }

    /// SGD step with a per-group step size; groups mapped to `None` are left
    /// unchanged. Every gradient is zeroed afterwards.
    pub fn sgd_step_with(
        &mut self,
        weight_decay: f64,
        rate: impl Fn(&str) -> Option<f64>,
    ) -> Result<()> {
        for (name, p) in &self.params {
            if rate(&p.group).is_some() && !p.grad.iter().all(|g| g.is_finite()) {
                let name = name.clone();
                self.zero_grad();
                return Err(Error::Numerics(format!(
                    "non-finite gradient for parameter '{}'",
                    name
                )));
            }
        }
        for p in self.params.values_mut() {
            if let Some(lr) = rate(&p.group) {
                let decay = weight_decay;
                p.value.zip_apply(&p.grad, |v, g| *v -= lr * (g + decay * *v));
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

/// Worst relative error between the tape gradient of a scalar loss and
/// central differences with step `h`, over every parameter of `store`.
///
/// Per parameter the error is `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖, 1e-4)`,
/// so gradients that vanish analytically are held to an absolute bound. `loss` must rebuild the same computation on a
/// fresh tape from the given store.
pub fn gradient_check(
    store: &ParameterStore,
    h: f64,
    loss: impl Fn(&mut Tape, &ParameterStore) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out)?;
    let mut work = store.clone();
    work.zero_grad();
    work.accumulate(&tape)?;
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, s)?;
        Ok(t.scalar(v))
    };
    let names: Vec<String> = store.names().cloned().collect();
    let mut worst = 0.0f64;
    for name in names {
        let analytic = work.params[&name].grad.clone();
        let mut numeric = Mat::zeros(analytic.nrows(), analytic.ncols());
        for idx in 0..analytic.len() {
            let orig = work.params[&name].value[idx];
            work.params.get_mut(&name).expect("present").value[idx] = orig + h;
            let up = eval(&work)?;
            work.params.get_mut(&name).expect("present").value[idx] = orig - h;
            let down = eval(&work)?;
            work.params.get_mut(&name).expect("present").value[idx] = orig;
            numeric[idx] = (up - down) / (2.0 * h);
        }
        let scale = analytic.norm().max(numeric.norm()).max(1e-4);
        worst = worst.max((analytic - numeric).norm() / scale);
    }
    Ok(worst)
}

/// Adam with L2 weight decay folded into the gradient. Moment estimates
/// are kept per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken.
    pub t: u64,
    pub moments: BTreeMap<String, (Mat, Mat)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Updates the parameters whose group passes `select` and zeroes every
    /// gradient. On a non-finite gradient nothing is updated.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        lr: f64,
        weight_decay: f64,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.step_with(store, weight_decay, |g| select(g).then_some(lr))
    }

    /// As [`Adam::step`] with a per-group step size.
    pub fn step_with(
        &mut self,
        store: &mut ParameterStore,
        weight_decay: f64,
        rate: impl Fn(&str) -> Option<f64>,
    ) -> Result<()> {
        for (name, p) in &store.params {
            if rate(&p.group).is_some() && !p.grad.iter().all(|g| g.is_finite()) {
                let name = name.clone();
                store.zero_grad();
                return Err(Error::Numerics(format!(
                    "non-finite gradient for parameter '{}'",
                    name
                )));
            }
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in store.params.iter_mut() {
            if let Some(lr) = rate(&p.group) {
                let (r, c) = p.value.shape();
                let (m, v) = self
                    .moments
                    .entry(name.clone())
                    .or_insert_with(|| (Mat::zeros(r, c), Mat::zeros(r, c)));
                let values = p.value.as_mut_slice().iter_mut();
                let state = m.as_mut_slice().iter_mut().zip(v.as_mut_slice());
                for ((x, g), (mi, vi)) in values.zip(p.grad.as_slice()).zip(state) {
                    let g = g + weight_decay * *x;
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

const ARCHIVE_MAGIC: &[u8; 8] = b"NDARCH01";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    #[serde(default)]
    pub group: String,
    pub shape: [usize; 2],
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArchiveManifest {
    pub dtype: String,
    pub tensors: Vec<ArchiveEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A flat name → matrix archive.
///
/// Layout: the 8 bytes `NDARCH01`, a little-endian `u64` manifest length,
/// the UTF-8 JSON manifest (names, groups, shapes, element offsets, dtype
/// `"f64"`, free-form `meta`), then every tensor as little-endian `f64` in
/// row-major order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, String, Mat)>,
    pub meta: serde_json::Value,
}

impl Archive {
    pub fn from_store(store: &ParameterStore) -> Self {
        Archive {
            tensors: store
                .iter()
                .map(|(n, p)| (n.clone(), p.group.clone(), p.value.clone()))
                .collect(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, group: impl Into<String>, value: Mat) {
        self.tensors.push((name.into(), group.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, m)| m)
    }

    /// Rebuilds a parameter store from every tensor whose group passes
    /// `select`.
    pub fn to_store(&self, select: impl Fn(&str) -> bool) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for (name, group, value) in &self.tensors {
            if select(group) {
                store.insert(name, group, value.clone())?;
            }
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, group, m) in &self.tensors {
            entries.push(ArchiveEntry {
                name: name.clone(),
                group: group.clone(),
                shape: [m.nrows(), m.ncols()],
                offset,
            });
            offset += m.len();
        }
        let manifest = ArchiveManifest {
            dtype: "f64".into(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest: {}", e)))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, m) in &self.tensors {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(bad("missing archive magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: ArchiveManifest = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("manifest: {}", e)))?;
        if manifest.dtype != "f64" {
            return Err(bad("only f64 archives are supported"));
        }
        let data = &bytes[16 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let [rows, cols] = entry.shape;
            let start = entry.offset * 8;
            let end = start + rows * cols * 8;
            let raw = data
                .get(start..end)
                .ok_or_else(|| bad(&format!("tensor '{}' out of bounds", entry.name)))?;
            let mut m = Mat::zeros(rows, cols);
            for (k, chunk) in raw.chunks_exact(8).enumerate() {
                m[(k / cols, k % cols)] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            tensors.push((entry.name.clone(), entry.group.clone(), m));
        }
        Ok(Archive {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-5;
        let mut g = Mat::zeros(x.nrows(), x.ncols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
    }

    #[test]
    fn matmul_sum_gradient_is_outer_product() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::identity(2, 2));
        let x = t.constant(Mat::from_column_slice(2, 1, &[1.0, 2.0]));
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        // d/dW sum(Wx) = 1 xᵀ
        let expected = Mat::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(t.grad(w).unwrap(), &expected);
        let fd = numeric_grad(&Mat::identity(2, 2), |w| (w * Mat::from_column_slice(2, 1, &[1.0, 2.0])).sum());
        assert!(rel_err(&expected, &fd) < 1e-8);
    }

    #[test]
    fn tanh_at_zero_has_unit_slope() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros(1, 1));
        let y = t.tanh(x);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_element(2, 2, 3.0));
        let s = t.stop_gradient(x);
        let y = t.square(s);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Mat::zeros(2, 2));
    }

    #[test]
    fn non_scalar_loss_is_shape_error() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn independent_parameter_gets_exact_zero() {
        let mut store = ParameterStore::new();
        store.insert("a", "g", Mat::from_element(1, 1, 2.0)).unwrap();
        store.insert("b", "g", Mat::from_element(1, 3, 5.0)).unwrap();
        let mut t = Tape::new();
        let a = t.param(&store, "a").unwrap();
        let _b = t.param(&store, "b").unwrap();
        let sq = t.square(a);
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        store.accumulate(&t).unwrap();
        assert_eq!(store.get("a").unwrap().grad[(0, 0)], 4.0);
        assert_eq!(store.get("b").unwrap().grad, Mat::zeros(1, 3));
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_element(1, 1, 1.5));
        let y = t.square(x);
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap()[(0, 0)], 6.0);
        t.zero_grad();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap()[(0, 0)], 3.0);
    }

    #[test]
    fn reused_node_sums_its_paths() {
        // f(x) = sum(x ∘ x + 3x) → 2x + 3
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_row_slice(1, 3, &[1.0, -2.0, 0.5]));
        let xx = t.mul(x, x).unwrap();
        let x3 = t.scale(x, 3.0);
        let s = t.add(xx, x3).unwrap();
        let loss = t.sum(s);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Mat::from_row_slice(1, 3, &[5.0, -1.0, 4.0]));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Mat::from_fn(3, 4, |_, _| rng.gen_range(0.2..2.0));
        let row0 = Mat::from_fn(1, 4, |_, _| rng.gen_range(-1.0..1.0));
        let w0 = Mat::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let forward = |t: &mut Tape, x: Var, row: Var, w: Var| -> Var {
            let a = t.add_row(x, row).unwrap();
            let b = t.tanh(a);
            let c = t.sigmoid(x);
            let d = t.log(x);
            let e = t.exp(b);
            let f = t.softplus(d);
            let g1 = t.mul(c, e).unwrap();
            let g2 = t.sub(g1, f).unwrap();
            let g3 = t.add_scalar(g2, 0.3);
            let h = t.matmul(g3, w).unwrap();
            let ht = t.transpose(h);
            let cat = t.concat_cols(&[ht, ht]).unwrap();
            let sq = t.square(cat);
            t.mean(sq)
        };
        let eval = |x: &Mat, row: &Mat, w: &Mat| {
            let mut t = Tape::new();
            let (x, row, w) = (t.constant(x.clone()), t.constant(row.clone()), t.constant(w.clone()));
            let l = forward(&mut t, x, row, w);
            t.scalar(l)
        };
        let mut t = Tape::new();
        let (x, row, w) = (t.leaf(x0.clone()), t.leaf(row0.clone()), t.leaf(w0.clone()));
        let loss = forward(&mut t, x, row, w);
        t.backward(loss).unwrap();
        let fx = numeric_grad(&x0, |x| eval(x, &row0, &w0));
        let fr = numeric_grad(&row0, |r| eval(&x0, r, &w0));
        let fw = numeric_grad(&w0, |w| eval(&x0, &row0, w));
        assert!(rel_err(t.grad(x).unwrap(), &fx) < 1e-6);
        assert!(rel_err(t.grad(row).unwrap(), &fr) < 1e-6);
        assert!(rel_err(t.grad(w).unwrap(), &fw) < 1e-6);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_row_slice(1, 2, &[800.0, -800.0]));
        let y = t.softplus(x);
        assert_eq!(t.value(y)[(0, 0)], 800.0);
        assert_eq!(t.value(y)[(0, 1)], 0.0);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        assert_eq!((g[(0, 0)], g[(0, 1)]), (1.0, 0.0));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut s = ParameterStore::new();
        s.insert("p", "g", Mat::from_element(1, 1, 1.0)).unwrap();
        s.get_mut("p").unwrap().grad[(0, 0)] = 2.0;
        s.sgd_step(0.1, 0.0).unwrap();
        assert!((s.get("p").unwrap().value[(0, 0)] - 0.8).abs() < 1e-15);
        assert_eq!(s.get("p").unwrap().grad[(0, 0)], 0.0);

        let mut s = ParameterStore::new();
        s.insert("p", "g", Mat::from_element(1, 1, 1.0)).unwrap();
        s.sgd_step(0.1, 0.1).unwrap();
        assert!((s.get("p").unwrap().value[(0, 0)] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_on_quadratic_bowl_decays_geometrically() {
        let mut s = ParameterStore::new();
        s.insert("p", "g", Mat::from_element(1, 1, 1.0)).unwrap();
        for _ in 0..100 {
            let mut t = Tape::new();
            let p = t.param(&s, "p").unwrap();
            let sq = t.square(p);
            let l = t.sum(sq);
            t.backward(l).unwrap();
            s.accumulate(&t).unwrap();
            s.sgd_step(0.1, 0.0).unwrap();
        }
        let p = s.get("p").unwrap().value[(0, 0)];
        // p_k = (1 - 2 lr)^k = 0.8^100 ≈ 2.04e-10
        assert!((p - 0.8f64.powi(100)).abs() < 1e-20);
        assert!(p.abs() < 1e-8);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut s = ParameterStore::new();
        s.insert("enc.w", "enc", Mat::from_element(1, 1, 1.0)).unwrap();
        s.get_mut("enc.w").unwrap().grad[(0, 0)] = f64::NAN;
        let err = s.sgd_step(0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(s.get("enc.w").unwrap().value[(0, 0)], 1.0);
    }

    #[test]
    fn filtered_step_only_moves_selected_groups() {
        let mut s = ParameterStore::new();
        s.insert("a", "enc", Mat::from_element(1, 1, 1.0)).unwrap();
        s.insert("b", "dec", Mat::from_element(1, 1, 1.0)).unwrap();
        s.get_mut("a").unwrap().grad[(0, 0)] = 1.0;
        s.get_mut("b").unwrap().grad[(0, 0)] = 1.0;
        s.sgd_step_filtered(0.5, 0.0, |g| g == "enc").unwrap();
        assert_eq!(s.get("a").unwrap().value[(0, 0)], 0.5);
        assert_eq!(s.get("b").unwrap().value[(0, 0)], 1.0);
        assert_eq!(s.get("b").unwrap().grad[(0, 0)], 0.0);
    }

    #[test]
    fn archive_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParameterStore::new();
        s.insert_dense("layer0", "enc", 5, 3, &mut rng).unwrap();
        let mut a = Archive::from_store(&s);
        a.meta = serde_json::json!({"iteration": 7});
        let back = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_store(|_| true).unwrap(), s);
        assert!(Archive::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn dense_init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParameterStore::new();
        s.insert_dense("l", "g", 10, 6, &mut rng).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(s.get("l.w").unwrap().value.iter().all(|v| v.abs() <= bound));
        assert_eq!(s.get("l.b").unwrap().value, Mat::zeros(1, 6));
    }
}
