use std::collections::HashMap;

use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Floor added inside logarithms of probabilities.
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    /// `broadcast` is set when the right operand is a row vector spread over a matrix.
    Binary {
        kind: Binary,
        lhs: Var,
        rhs: Var,
        broadcast: bool,
    },
    Activation(Activation, Var),
    MeanRows(Var),
    Softmax(Var),
    Sum(Var),
    Scale(Var, f64),
    Offset(Var),
    ScalarMul(Var, Var),
    Detach,
    KlDiv(Var, Var),
    CrossEntropy(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Per-step tape of primitive applications.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// Build a fresh graph (or [`Graph::clear`]) for each forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, when `var` depends on a parameter.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

/// Max-shifted softmax of a slice.
pub fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `A·B` for `A: m×k` and `B: k×n` (or `B: k`, giving `m`).
fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bound.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Whether gradients can reach `v` from a parameter.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite {
                op: op_name(&op),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        let t = t.detached();
        self.push(t, Op::Input, false)
            .expect("tensor values are finite by construction")
    }

    /// Records a parameter leaf, reusing the node if `id` is already bound.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = store.get(id).detached();
        let v = self
            .push(t, Op::Param, true)
            .expect("parameter values are finite");
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() > 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let n = bv.cols();
        let data = matmul_raw(av.data(), m, k, bv.data(), n);
        let shape = if bv.rank() == 1 { vec![m] } else { vec![m, n] };
        let tracked = self.tracked(&[a, b]);
        self.push(Tensor::from_parts(shape, data), Op::MatMul(a, b), tracked)
    }

    /// Element-wise `add`, `sub` or `mul`. Shapes must match, or `b` must be a
    /// length-`d` vector broadcast across the rows of an `L×d` matrix `a`.
    pub fn elementwise(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = if av.shape() == bv.shape() {
            false
        } else if av.rank() == 2 && bv.rank() == 1 && av.shape()[1] == bv.shape()[0] {
            true
        } else {
            return Err(shape_err("elementwise", av, bv));
        };
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let bd = bv.data();
        let w = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[if broadcast { i % w } else { i }]))
            .collect();
        let shape = av.shape().to_vec();
        let tracked = self.tracked(&[a, b]);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Binary {
                kind,
                lhs: a,
                rhs: b,
                broadcast,
            },
            tracked,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(Binary::Mul, a, b)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let f = match kind {
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => sigmoid,
            Activation::Relu => |v: f64| if v > 0.0 { v } else { 0.0 },
        };
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect());
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Activation(kind, x), tracked)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.activation(Activation::Relu, x)
    }

    /// Column means of an `L×d` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(NumericsError::Shape {
                op: "mean_rows",
                left: xv.shape().to_vec(),
                right: vec![],
            });
        }
        let (l, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; d];
        for i in 0..l {
            out.iter_mut().zip(xv.row(i)).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / l as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let tracked = self.tracked(&[x]);
        self.push(Tensor::from_parts(vec![d], out), Op::MeanRows(x), tracked)
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var, NumericsError> {
        let zv = self.value(z);
        if zv.rank() != 1 || zv.numel() < 2 {
            return Err(NumericsError::Shape {
                op: "softmax",
                left: zv.shape().to_vec(),
                right: vec![],
            });
        }
        let p = softmax_slice(zv.data());
        let tracked = self.tracked(&[z]);
        self.push(Tensor::from_parts(vec![p.len()], p), Op::Softmax(z), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// `c·x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| c * v).collect());
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Scale(x, c), tracked)
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v + c).collect());
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Offset(x), tracked)
    }

    /// `s·x` where `s` is a one-element tensor.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var, NumericsError> {
        let (sv, xv) = (self.value(s), self.value(x));
        let k = sv
            .item()
            .ok_or_else(|| shape_err("scalar_mul", sv, xv))?;
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| k * v).collect());
        let tracked = self.tracked(&[s, x]);
        self.push(out, Op::ScalarMul(s, x), tracked)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).detached();
        self.push(t, Op::Detach, false)
            .expect("detach copies finite values")
    }

    /// `Σ q·ln((q+ε)/(p+ε))` over two probability vectors.
    pub fn kl_div(&mut self, q: Var, p: Var) -> Result<Var, NumericsError> {
        let (qv, pv) = (self.value(q), self.value(p));
        if qv.rank() != 1 || qv.shape() != pv.shape() {
            return Err(shape_err("kl_div", qv, pv));
        }
        let kl = qv
            .data()
            .iter()
            .zip(pv.data())
            .map(|(&qi, &pi)| qi * ((qi + PROB_EPS) / (pi + PROB_EPS)).ln())
            .sum();
        let tracked = self.tracked(&[q, p]);
        self.push(Tensor::scalar(kl), Op::KlDiv(q, p), tracked)
    }

    /// `logsumexp(z) − z[label]`, the cross-entropy of `softmax(z)` against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NumericsError> {
        let zv = self.value(logits);
        if zv.rank() != 1 || label >= zv.numel() {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                left: zv.shape().to_vec(),
                right: vec![label],
            });
        }
        let loss = log_sum_exp(zv.data()) - zv.data()[label];
        let tracked = self.tracked(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, label), tracked)
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Each recorded node is visited once, in reverse order. Calling this twice
    /// and accumulating both results doubles the stored gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .bound
            .iter()
            .filter(|(_, v)| v.0 <= loss.0)
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Backward into the store's gradient accumulators.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &node.value;
        match node.op {
            Op::Input | Op::Param | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.cols();
                // dA = G·Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        da[i * k + p] = (0..n).map(|j| g[i * n + j] * bv.data()[p * n + j]).sum();
                    }
                }
                // dB = Aᵀ·G
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        db[p * n + j] = (0..m).map(|i| av.data()[i * k + p] * g[i * n + j]).sum();
                    }
                }
                send(a, da);
                send(b, db);
            }
            Op::Binary {
                kind,
                lhs,
                rhs,
                broadcast,
            } => {
                let (av, bv) = (self.value(lhs), self.value(rhs));
                let w = bv.numel();
                let bidx = |i: usize| if broadcast { i % w } else { i };
                let (ga, gb_full): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Binary::Mul => (
                        g.iter().enumerate().map(|(i, gi)| gi * bv.data()[bidx(i)]).collect(),
                        g.iter().zip(av.data()).map(|(gi, a)| gi * a).collect(),
                    ),
                };
                let gb = if broadcast {
                    let mut acc = vec![0.0; w];
                    gb_full.iter().enumerate().for_each(|(i, v)| acc[i % w] += v);
                    acc
                } else {
                    gb_full
                };
                send(lhs, ga);
                send(rhs, gb);
            }
            Op::Activation(kind, x) => {
                let xv = self.value(x);
                let d: Vec<f64> = match kind {
                    Activation::Tanh => g.iter().zip(out.data()).map(|(gi, t)| gi * (1.0 - t * t)).collect(),
                    Activation::Sigmoid => g.iter().zip(out.data()).map(|(gi, s)| gi * s * (1.0 - s)).collect(),
                    Activation::Relu => g
                        .iter()
                        .zip(xv.data())
                        .map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 })
                        .collect(),
                };
                send(x, d);
            }
            Op::MeanRows(x) => {
                let xv = self.value(x);
                let (l, d) = (xv.shape()[0], xv.shape()[1]);
                let inv = 1.0 / l as f64;
                let dx = (0..l * d).map(|i| g[i % d] * inv).collect();
                send(x, dx);
            }
            Op::Softmax(z) => {
                let p = out.data();
                let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                let dz = p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect();
                send(z, dz);
            }
            Op::Sum(x) => {
                let n = self.value(x).numel();
                send(x, vec![g[0]; n]);
            }
            Op::Scale(x, c) => send(x, g.iter().map(|v| c * v).collect()),
            Op::Offset(x) => send(x, g.to_vec()),
            Op::ScalarMul(s, x) => {
                let (sv, xv) = (self.value(s), self.value(x));
                let k = sv.data()[0];
                let ds = g.iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                send(s, vec![ds]);
                send(x, g.iter().map(|v| k * v).collect());
            }
            Op::KlDiv(q, p) => {
                let (qv, pv) = (self.value(q), self.value(p));
                let dq = qv
                    .data()
                    .iter()
                    .zip(pv.data())
                    .map(|(&qi, &pi)| {
                        g[0] * (((qi + PROB_EPS) / (pi + PROB_EPS)).ln() + qi / (qi + PROB_EPS))
                    })
                    .collect();
                let dp = qv
                    .data()
                    .iter()
                    .zip(pv.data())
                    .map(|(&qi, &pi)| -g[0] * qi / (pi + PROB_EPS))
                    .collect();
                send(q, dq);
                send(p, dp);
            }
            Op::CrossEntropy(z, label) => {
                let mut dz = softmax_slice(self.value(z).data());
                dz[label] -= 1.0;
                dz.iter_mut().for_each(|v| *v *= g[0]);
                send(z, dz);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::Binary { kind, .. } => match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        },
        Op::Activation(kind, _) => match kind {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        },
        Op::MeanRows(_) => "mean_rows",
        Op::Softmax(_) => "softmax",
        Op::Sum(_) => "sum",
        Op::Scale(..) => "scale",
        Op::Offset(_) => "offset",
        Op::ScalarMul(..) => "scalar_mul",
        Op::Detach => "detach",
        Op::KlDiv(..) => "kl_div",
        Op::CrossEntropy(..) => "cross_entropy",
    }
}
