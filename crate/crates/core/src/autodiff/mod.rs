//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so a tape is cheap to
//! build per example and is dropped after [`Tape::backward`].

mod gradcheck;
mod params;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use params::{Gradients, ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Tensor};

/// Lower bound applied to `log p` in [`Tape::cross_entropy`].
pub const LOG_PROB_FLOOR: f64 = -745.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    GatherRow {
        table: Var,
        row: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    trace: Option<Vec<usize>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(256),
            trace: None,
        }
    }

    /// Record the node indices visited by the next backward pass.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// `[m×k]·[k×n]`, or `[m×k]·[k]` for a matrix–vector product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (sa, sb) = (at.shape(), bt.shape());
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let out = if sb.len() == 1 {
            let (m, k) = (sa[0], sa[1]);
            let (ad, x) = (at.data(), bt.data());
            let y: Vec<f64> = (0..m).map(|i| dot(&ad[i * k..(i + 1) * k], x)).collect();
            Tensor::vector(y)
        } else {
            at.matmul(bt)?
        };
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        if at.shape().len() != 2 {
            return Err(Error::shape("transpose", at.shape(), &[]));
        }
        let (r, c) = (at.rows(), at.cols());
        let d = at.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(Op::Transpose(a), t))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape(op, at.shape(), bt.shape()));
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(at.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), t)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let at = self.value(a);
        if !at.all_finite() {
            return Err(Error::NonFinite("activation input"));
        }
        let t = at.map(|x| kind.apply(x));
        Ok(self.push(Op::Act(a, kind), t))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let p = softmax(at.data())?;
        let t = Tensor::new(at.shape().to_vec(), p)?;
        Ok(self.push(Op::Softmax(a), t))
    }

    /// `-log softmax(logits)[label]`, with `log p` floored at [`LOG_PROB_FLOOR`].
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lt = self.value(logits);
        let n = lt.len();
        if label >= n {
            return Err(Error::OutOfRange {
                what: "class label",
                index: label,
                size: n,
            });
        }
        let l = lt.data();
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let log_p = (l[label] - log_z).max(LOG_PROB_FLOOR);
        let probs = softmax(l)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            Tensor::scalar(-log_p),
        ))
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat inputs"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(Error::shape("concat", t.shape(), &[]));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data)))
    }

    /// `src[start..start+len]` of a rank-1 tensor.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 1 || start + len > t.len() || len == 0 {
            return Err(Error::shape("slice", t.shape(), &[start, len]));
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.push(Op::Slice { src, start }, out))
    }

    /// Row `row` of a matrix as a vector.
    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("gather_row", t.shape(), &[]));
        }
        if row >= t.rows() {
            return Err(Error::OutOfRange {
                what: "table row",
                index: row,
                size: t.rows(),
            });
        }
        let out = Tensor::vector(t.row(row).to_vec());
        Ok(self.push(Op::GatherRow { table, row }, out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Replays the tape in reverse from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        let mut param_grads = Gradients::empty(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(trace) = self.trace.as_mut() {
                trace.push(i);
            }
            self.propagate(i, g, &mut grads, &mut param_grads)?;
        }
        Ok(param_grads)
    }

    /// Node indices visited by the last traced backward pass.
    pub fn backward_trace(&self) -> Option<&[usize]> {
        self.trace.as_deref()
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Gradients,
    ) -> Result<()> {
        fn acc<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
        }

        match &self.nodes[i].op {
            Op::Constant => {}
            Op::Param(id) => {
                let slot = params.slot_mut(*id, g.shape());
                slot.add_assign(&g);
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = (at.rows(), at.cols());
                if bt.shape().len() == 1 {
                    // y = A x: dA += g xᵀ, dx += Aᵀ g
                    let x = bt.data();
                    let ad = at.data();
                    let mut ga = grads[a.0]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(at.shape()));
                    let gx = acc(grads, *b, bt.shape()).data_mut();
                    let gad = ga.data_mut();
                    for (r, &gr) in g.data().iter().enumerate() {
                        if gr != 0.0 {
                            let row = r * k..(r + 1) * k;
                            axpy(gr, x, &mut gad[row.clone()]);
                            axpy(gr, &ad[row], gx);
                        }
                    }
                    grads[a.0] = Some(ga);
                } else {
                    let n = bt.cols();
                    let gd = g.data();
                    // dA = G Bᵀ
                    let bd = bt.data();
                    let ga = acc(grads, *a, at.shape()).data_mut();
                    for r in 0..m {
                        for p in 0..k {
                            ga[r * k + p] += dot(&gd[r * n..(r + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                    // dB = Aᵀ G
                    let ad = at.data();
                    let gb = acc(grads, *b, bt.shape()).data_mut();
                    for r in 0..m {
                        for p in 0..k {
                            axpy(
                                ad[r * k + p],
                                &gd[r * n..(r + 1) * n],
                                &mut gb[p * n..(p + 1) * n],
                            );
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let shape = self.shape(*a).to_vec();
                let (r, c) = (shape[0], shape[1]);
                let ga = acc(grads, *a, &shape).data_mut();
                let gd = g.data();
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += gd[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.shape()).add_assign(&g);
                acc(grads, *b, g.shape()).add_assign(&g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.shape()).add_assign(&g);
                axpy(-1.0, g.data(), acc(grads, *b, g.shape()).data_mut());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = acc(grads, *a, g.shape()).data_mut();
                for ((o, gi), bi) in ga.iter_mut().zip(g.data()).zip(bv) {
                    *o += gi * bi;
                }
                let gb = acc(grads, *b, g.shape()).data_mut();
                for ((o, gi), ai) in gb.iter_mut().zip(g.data()).zip(av) {
                    *o += gi * ai;
                }
            }
            Op::Scale(a, f) => axpy(*f, g.data(), acc(grads, *a, g.shape()).data_mut()),
            Op::Act(a, kind) => {
                let y = self.nodes[i].value.as_ref().expect("activation output");
                let ga = acc(grads, *a, g.shape()).data_mut();
                for ((o, gi), yi) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gi * kind.derivative_from_output(*yi);
                }
            }
            Op::Softmax(a) => {
                let p = self.nodes[i].value.as_ref().expect("softmax output").data();
                let inner = dot(g.data(), p);
                let ga = acc(grads, *a, g.shape()).data_mut();
                for ((o, gi), pi) in ga.iter_mut().zip(g.data()).zip(p) {
                    *o += pi * (gi - inner);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let upstream = g.item();
                let log_p = -self.nodes[i].value.as_ref().expect("loss").item();
                let ga = acc(grads, *logits, &[probs.len()]).data_mut();
                // The floor makes the loss locally constant in the logits.
                if log_p > LOG_PROB_FLOOR {
                    for (j, (o, p)) in ga.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        *o += upstream * (p - onehot);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    axpy(
                        1.0,
                        &g.data()[offset..offset + n],
                        acc(grads, p, &[n]).data_mut(),
                    );
                    offset += n;
                }
            }
            Op::Slice { src, start } => {
                let shape = self.shape(*src).to_vec();
                let gs = acc(grads, *src, &shape).data_mut();
                axpy(1.0, g.data(), &mut gs[*start..*start + g.len()]);
            }
            Op::GatherRow { table, row } => {
                let shape = self.shape(*table).to_vec();
                let c = shape[1];
                let gt = acc(grads, *table, &shape).data_mut();
                axpy(1.0, g.data(), &mut gt[row * c..(row + 1) * c]);
            }
            Op::Sum(a) => {
                let s = g.item();
                let shape = self.shape(*a).to_vec();
                acc(grads, *a, &shape)
                    .data_mut()
                    .iter_mut()
                    .for_each(|o| *o += s);
            }
        }
        Ok(())
    }
}
