//! Wengert tape: records forward operations and replays them in reverse.
//!
//! Every operation stores its output value and a backward rule keyed by the
//! input node ids. Node ids are assigned in creation order, so the tape is
//! topologically sorted by construction and a single reverse sweep visits
//! each op exactly once.
//!
//! A tape can run `backward` once; a second call is a contract error, since
//! the gradient buffers are consumed by the first traversal.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Square(usize),
    Sqrt(usize),
    Mean(usize),
    Sum(usize),
    Scale(usize, f64),
    AddConst(usize),
    /// Mean softmax cross-entropy against fixed target rows (held constant).
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Tensor,
    },
}

struct TapeNode {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the tape's gradient leaves.
///
/// Leaves that do not lie on any path to the loss map to zero tensors.
pub struct GradientMap {
    grads: BTreeMap<usize, Tensor>,
}

impl GradientMap {
    /// Gradient for a leaf var. Panics if `v` is not a gradient leaf.
    pub fn get(&self, v: Var) -> &Tensor {
        self.grads
            .get(&v.0)
            .expect("var is not a requires_grad leaf of this tape")
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse-mode differentiation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf; its `requires_grad` flag decides whether
    /// `backward` reports a gradient for it.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let id = self.nodes.len();
        t.set_tape_id(id);
        let requires_grad = t.requires_grad();
        self.nodes.push(TapeNode {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(id)
    }

    /// Leaf that participates in gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    /// Leaf held constant (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        let mut value = value;
        value.set_tape_id(id);
        self.nodes.push(TapeNode {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).div(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Div(a.0, b.0), rg))
    }

    /// Adds a length-C bias to every row of an N×C input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_bias(self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x.0, bias.0), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        let rg = self.rg(a);
        self.push(out, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a.0), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).square();
        let rg = self.rg(a);
        self.push(out, Op::Square(a.0), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).sqrt();
        let rg = self.rg(a);
        self.push(out, Op::Sqrt(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = self.value(a).mean();
        let rg = self.rg(a);
        self.push(out, Op::Mean(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum();
        let rg = self.rg(a);
        self.push(out, Op::Sum(a.0), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a.0, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).add_const(c);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a.0), rg)
    }

    /// Affine layer `x·Wᵀ + b` for weights stored as C_out×C_in.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        let xw = self.matmul(x, wt)?;
        self.add_bias(xw, b)
    }

    /// Mean softmax cross-entropy of logit rows against fixed target rows.
    ///
    /// Targets are per-row distributions (one-hot for hard labels) and are
    /// not differentiated through.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let x = self.value(logits);
        if x.shape().len() != 2 || targets.shape() != x.shape() {
            return Err(Error::shape(format!(
                "softmax_cross_entropy: logits {:?} vs targets {:?}",
                x.shape(),
                targets.shape()
            )));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let mut total = 0.0;
        for i in 0..n {
            let row = &x.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                total -= targets.data()[i * c + j] * (row[j] - lse);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// requires_grad leaf; unreachable leaves get zero tensors.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap> {
        if self.consumed {
            return Err(Error::contract(
                "backward already ran on this tape; record a fresh tape",
            ));
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut map = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let t = match grads[id].take() {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g)?,
                    None => Tensor::zeros(node.value.shape().to_vec()),
                };
                map.insert(id, t);
            }
        }
        Ok(GradientMap { grads: map })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                if self.nodes[*a].requires_grad {
                    let da = gt.matmul(&self.nodes[*b].value.transpose()?)?;
                    acc(grads, *a, da.data());
                }
                if self.nodes[*b].requires_grad {
                    let db = self.nodes[*a].value.transpose()?.matmul(&gt)?;
                    acc(grads, *b, db.data());
                }
            }
            Op::Transpose(a) => {
                if self.nodes[*a].requires_grad {
                    let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?.transpose()?;
                    acc(grads, *a, gt.data());
                }
            }
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g, 1.0, None);
                self.acc_broadcast(grads, *b, g, 1.0, None);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g, 1.0, None);
                self.acc_broadcast(grads, *b, g, -1.0, None);
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                self.acc_broadcast(grads, *a, g, 1.0, Some(bv));
                self.acc_broadcast(grads, *b, g, 1.0, Some(av));
            }
            Op::Div(a, b) => {
                // y = a / b
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let inv_b = bv.map(|x| 1.0 / x);
                self.acc_broadcast(grads, *a, g, 1.0, Some(&inv_b));
                // d/db = -a / b²  evaluated with broadcast semantics
                let factor = av.div(&bv.square()).expect("shapes checked at record time");
                self.acc_broadcast(grads, *b, g, -1.0, Some(&factor));
            }
            Op::AddBias(x, b) => {
                if self.nodes[*x].requires_grad {
                    acc(grads, *x, g);
                }
                if self.nodes[*b].requires_grad {
                    let (n, c) = {
                        let s = node.value.shape();
                        (s[0], s[1])
                    };
                    let mut db = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    acc(grads, *b, &db);
                }
            }
            Op::Relu(a) => {
                if self.nodes[*a].requires_grad {
                    let x = self.nodes[*a].value.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    acc(grads, *a, &da);
                }
            }
            Op::Sigmoid(a) => {
                if self.nodes[*a].requires_grad {
                    let s = node.value.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(s)
                        .map(|(&gi, &si)| gi * si * (1.0 - si))
                        .collect();
                    acc(grads, *a, &da);
                }
            }
            Op::Square(a) => {
                if self.nodes[*a].requires_grad {
                    let x = self.nodes[*a].value.data();
                    let da: Vec<f64> = g.iter().zip(x).map(|(&gi, &xi)| 2.0 * xi * gi).collect();
                    acc(grads, *a, &da);
                }
            }
            Op::Sqrt(a) => {
                if self.nodes[*a].requires_grad {
                    let y = node.value.data();
                    let da: Vec<f64> = g.iter().zip(y).map(|(&gi, &yi)| gi * 0.5 / yi).collect();
                    acc(grads, *a, &da);
                }
            }
            Op::Mean(a) => {
                if self.nodes[*a].requires_grad {
                    let n = self.nodes[*a].value.numel();
                    let da = vec![g[0] / n as f64; n];
                    acc(grads, *a, &da);
                }
            }
            Op::Sum(a) => {
                if self.nodes[*a].requires_grad {
                    let n = self.nodes[*a].value.numel();
                    let da = vec![g[0]; n];
                    acc(grads, *a, &da);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                    acc(grads, *a, &da);
                }
            }
            Op::AddConst(a) => {
                if self.nodes[*a].requires_grad {
                    acc(grads, *a, g);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                if self.nodes[*logits].requires_grad {
                    let x = &self.nodes[*logits].value;
                    let (n, c) = (x.shape()[0], x.shape()[1]);
                    let mut da = vec![0.0; n * c];
                    for i in 0..n {
                        let row = &x.data()[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                        let denom: f64 = exps.iter().sum();
                        for j in 0..c {
                            let p = exps[j] / denom;
                            da[i * c + j] = g[0] * (p - targets.data()[i * c + j]) / n as f64;
                        }
                    }
                    acc(grads, *logits, &da);
                }
            }
        }
        Ok(())
    }

    /// Accumulates `sign · g ⊙ factor` into input `a`, collapsing the
    /// contribution by summation when `a` is a scalar that was broadcast.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: usize,
        g: &[f64],
        sign: f64,
        factor: Option<&Tensor>,
    ) {
        if !self.nodes[a].requires_grad {
            return;
        }
        let contrib: Vec<f64> = match factor {
            None => g.iter().map(|&gi| sign * gi).collect(),
            Some(f) if f.numel() == g.len() => g
                .iter()
                .zip(f.data())
                .map(|(&gi, &fi)| sign * gi * fi)
                .collect(),
            Some(f) => {
                // factor was the scalar operand, broadcast over g
                debug_assert!(f.is_scalar());
                let fv = f.data()[0];
                g.iter().map(|&gi| sign * gi * fv).collect()
            }
        };
        let target_n = self.nodes[a].value.numel();
        if target_n == contrib.len() {
            acc(grads, a, &contrib);
        } else {
            debug_assert_eq!(target_n, 1);
            acc(grads, a, &[contrib.iter().sum::<f64>()]);
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, contribution: &[f64]) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot => *slot = Some(contribution.to_vec()),
    }
}

/// Central finite differences of a scalar-valued function, one input at a
/// time. Used as the independent oracle for gradient checks.
pub fn central_difference(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    h: f64,
) -> Tensor {
    let mut grad = Tensor::zeros(inputs[which].shape().to_vec());
    for k in 0..inputs[which].numel() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[k] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[k] -= h;
        grad.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// Max relative error between an analytic gradient and its finite-difference
/// estimate, with an absolute floor to keep near-zero entries comparable.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
