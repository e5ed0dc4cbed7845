//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops are recorded in forward order with input/output node ids and
//! replayed in reverse to accumulate gradients. Gradient accumulators
//! start empty each pass; `zero_grads` resets them so repeated backward
//! passes are reproducible.

use crate::binarize::{ste_backward, SteKind};
use crate::error::{Error, Result};
use crate::ops::{self, BinKind};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

enum Op {
    Binary {
        kind: BinKind,
        a: VarId,
        b: VarId,
        out: VarId,
    },
    AddScalar {
        a: VarId,
        out: VarId,
    },
    MulScalar {
        a: VarId,
        c: f64,
        out: VarId,
    },
    PowI {
        a: VarId,
        n: i32,
        out: VarId,
    },
    Unary {
        kind: UnKind,
        a: VarId,
        out: VarId,
    },
    PRelu {
        x: VarId,
        slope: VarId,
        out: VarId,
    },
    SignSte {
        x: VarId,
        kind: SteKind,
        out: VarId,
    },
    Matmul {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Conv2d {
        x: VarId,
        w: VarId,
        out: VarId,
        stride: usize,
        pad: usize,
        pad_value: f64,
    },
    MaxPool2d {
        x: VarId,
        out: VarId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: VarId,
        out: VarId,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        out: VarId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Softmax {
        x: VarId,
        out: VarId,
    },
    LogSoftmax {
        x: VarId,
        out: VarId,
    },
    CrossEntropy {
        logits: VarId,
        labels: Vec<usize>,
        out: VarId,
        probs: Tensor,
    },
    Sum {
        a: VarId,
        out: VarId,
    },
    Mean {
        a: VarId,
        out: VarId,
    },
    MeanRows {
        a: VarId,
        out: VarId,
    },
    Reshape {
        a: VarId,
        out: VarId,
    },
    SoftHist {
        x: VarId,
        out: VarId,
        centers: Vec<f64>,
        bandwidth: f64,
        norm: f64,
        counts: Vec<f64>,
        eps: f64,
    },
}

#[derive(Clone, Copy)]
enum UnKind {
    Neg,
    Abs,
    Sqrt,
    Ln,
    Exp,
    Relu,
    Hardtanh,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf tensor. Only leaves with `requires_grad` receive
    /// gradients; the tape snapshots the data.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push_node(value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push_node(value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(BinKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: VarId, b: VarId) -> Result<VarId> {
        let value = ops::binary_elementwise(kind, self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::Binary { kind, a, b, out });
        Ok(out)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let value = self.value(a).map(|x| x + c);
        value.check_finite("add_scalar")?;
        let rg = self.rg(&[a]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::AddScalar { a, out });
        Ok(out)
    }

    pub fn mul_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let value = self.value(a).map(|x| x * c);
        value.check_finite("mul_scalar")?;
        let rg = self.rg(&[a]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::MulScalar { a, c, out });
        Ok(out)
    }

    pub fn powi(&mut self, a: VarId, n: i32) -> Result<VarId> {
        let value = self.value(a).map(|x| x.powi(n));
        value.check_finite("powi")?;
        let rg = self.rg(&[a]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::PowI { a, n, out });
        Ok(out)
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId> {
        self.unary(UnKind::Neg, a)
    }

    pub fn abs(&mut self, a: VarId) -> Result<VarId> {
        self.unary(UnKind::Abs, a)
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        self.unary(UnKind::Sqrt, a)
    }

    pub fn ln(&mut self, a: VarId) -> Result<VarId> {
        self.unary(UnKind::Ln, a)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.unary(UnKind::Exp, a)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.unary(UnKind::Relu, a)
    }

    pub fn hardtanh(&mut self, a: VarId) -> Result<VarId> {
        self.unary(UnKind::Hardtanh, a)
    }

    fn unary(&mut self, kind: UnKind, a: VarId) -> Result<VarId> {
        let (name, value): (&'static str, Tensor) = match kind {
            UnKind::Neg => ("neg", self.value(a).map(|x| -x)),
            UnKind::Abs => ("abs", self.value(a).map(f64::abs)),
            UnKind::Sqrt => ("sqrt", self.value(a).map(f64::sqrt)),
            UnKind::Ln => ("ln", self.value(a).map(f64::ln)),
            UnKind::Exp => ("exp", self.value(a).map(f64::exp)),
            UnKind::Relu => ("relu", ops::relu(self.value(a))),
            UnKind::Hardtanh => ("hardtanh", ops::hardtanh(self.value(a))),
        };
        value.check_finite(name)?;
        let rg = self.rg(&[a]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::Unary { kind, a, out });
        Ok(out)
    }

    pub fn prelu(&mut self, x: VarId, slope: VarId) -> Result<VarId> {
        if self.value(slope).numel() != 1 {
            return Err(Error::shape("prelu", "slope must be a scalar".to_string()));
        }
        let s = self.value(slope).data()[0];
        let value = self.value(x).map(|v| if v > 0.0 { v } else { s * v });
        value.check_finite("prelu")?;
        let rg = self.rg(&[x, slope]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::PRelu { x, slope, out });
        Ok(out)
    }

    /// Sign projection (+1 for x >= 0, -1 otherwise) with a straight-through
    /// gradient of the chosen kind.
    pub fn sign_ste(&mut self, x: VarId, kind: SteKind) -> Result<VarId> {
        let value = crate::binarize::sign(self.value(x));
        let rg = self.rg(&[x]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::SignSte { x, kind, out });
        Ok(out)
    }

    // ---- linear algebra / conv ------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        stride: usize,
        pad: usize,
        pad_value: f64,
    ) -> Result<VarId> {
        let value = ops::conv2d(self.value(x), self.value(w), stride, pad, pad_value)?;
        let rg = self.rg(&[x, w]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::Conv2d {
            x,
            w,
            out,
            stride,
            pad,
            pad_value,
        });
        Ok(out)
    }

    pub fn max_pool2d(&mut self, x: VarId, k: usize, stride: usize) -> Result<VarId> {
        let (value, argmax) = ops::max_pool2d(self.value(x), k, stride)?;
        let rg = self.rg(&[x]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::MaxPool2d { x, out, argmax });
        Ok(out)
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let value = ops::global_avg_pool(self.value(x))?;
        let rg = self.rg(&[x]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::GlobalAvgPool { x, out });
        Ok(out)
    }

    /// Batch normalization with batch statistics (training mode). Returns
    /// the output node and the per-channel (mean, var) so the caller can
    /// maintain running statistics.
    pub fn batchnorm2d_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<(VarId, Vec<f64>, Vec<f64>)> {
        let shape = self.value(x).shape();
        if shape.len() != 4 {
            return Err(Error::shape("batchnorm2d", "expected rank 4".to_string()));
        }
        if shape[0] < 2 {
            return Err(Error::shape(
                "batchnorm2d",
                format!("training mode needs batch >= 2, got {}", shape[0]),
            ));
        }
        let (mean, var) = ops::batch_stats(self.value(x))?;
        let out = self.batchnorm_record(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<VarId> {
        self.batchnorm_record(x, gamma, beta, mean, var, eps, false)
    }

    fn batchnorm_record(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        training: bool,
    ) -> Result<VarId> {
        let value = ops::batchnorm_apply(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            mean,
            var,
            eps,
        )?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let rg = self.rg(&[x, gamma, beta]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            mean: mean.to_vec(),
            inv_std,
            training,
        });
        Ok(out)
    }

    // ---- rows / reductions ----------------------------------------------

    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        let value = ops::softmax(self.value(x))?;
        let rg = self.rg(&[x]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::Softmax { x, out });
        Ok(out)
    }

    pub fn log_softmax(&mut self, x: VarId) -> Result<VarId> {
        let value = ops::log_softmax(self.value(x))?;
        let rg = self.rg(&[x]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::LogSoftmax { x, out });
        Ok(out)
    }

    /// Mean cross-entropy over the batch, fused with softmax for stability.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let ce = ops::cross_entropy(self.value(logits), labels)?;
        let probs = ops::softmax(self.value(logits))?;
        let rg = self.rg(&[logits]);
        let out = self.push_node(Tensor::scalar(ce), rg);
        self.ops.push(Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            out,
            probs,
        });
        Ok(out)
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let value = Tensor::scalar(ops::sum(self.value(a)));
        value.check_finite("sum")?;
        let rg = self.rg(&[a]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::Sum { a, out });
        Ok(out)
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let value = Tensor::scalar(ops::mean(self.value(a)));
        value.check_finite("mean")?;
        let rg = self.rg(&[a]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::Mean { a, out });
        Ok(out)
    }

    /// Population variance, composed from primitives so it differentiates.
    pub fn var(&mut self, a: VarId) -> Result<VarId> {
        let mu = self.mean(a)?;
        let d = self.sub(a, mu)?;
        let d2 = self.powi(d, 2)?;
        self.mean(d2)
    }

    /// [m, n] -> [m] row means.
    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.value(a).shape();
        if shape.len() != 2 {
            return Err(Error::shape("mean_rows", "expected rank 2".to_string()));
        }
        let (m, n) = (shape[0], shape[1]);
        let mut data = vec![0.0; m];
        for (i, row) in self.value(a).data().chunks(n).enumerate() {
            let mut acc = 0.0;
            for v in row {
                acc += v;
            }
            data[i] = acc / n as f64;
        }
        let value = Tensor::new(vec![m], data)?;
        value.check_finite("mean_rows")?;
        let rg = self.rg(&[a]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::MeanRows { a, out });
        Ok(out)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::Reshape { a, out });
        Ok(out)
    }

    /// Soft (triangular-kernel) histogram over symmetric range, epsilon
    /// smoothed and normalized. Out-of-range values clamp to the edge bin
    /// centers and contribute no gradient.
    pub fn soft_histogram(
        &mut self,
        x: VarId,
        bins: usize,
        range: f64,
        bandwidth: f64,
        eps: f64,
    ) -> Result<VarId> {
        let fwd = soft_hist_forward(self.value(x).data(), bins, range, bandwidth, eps)?;
        let value = Tensor::new(vec![bins], fwd.probs)?;
        value.check_finite("soft_histogram")?;
        let rg = self.rg(&[x]);
        let out = self.push_node(value, rg);
        self.ops.push(Op::SoftHist {
            x,
            out,
            centers: fwd.centers,
            bandwidth,
            norm: fwd.norm,
            counts: fwd.counts,
            eps,
        });
        Ok(out)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Accumulates into any existing
    /// gradients; call `zero_grads` between passes for a fresh one.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.value(loss).shape()),
            ));
        }
        let seed_shape = self.value(loss).shape().to_vec();
        self.accumulate(loss, Tensor::ones(&seed_shape));

        for i in (0..self.ops.len()).rev() {
            self.backward_op(i)?;
        }
        Ok(())
    }

    fn out_grad(&self, out: VarId) -> Option<Tensor> {
        self.nodes[out.0].grad.clone()
    }

    fn accumulate(&mut self, id: VarId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.nodes[id.0].grad = Some(g),
        }
    }

    fn backward_op(&mut self, op_idx: usize) -> Result<()> {
        // Ops are Plain Old Data except for saved buffers; moving the op out
        // and back avoids cloning large saved tensors.
        let op = std::mem::replace(
            &mut self.ops[op_idx],
            Op::Sum {
                a: VarId(0),
                out: VarId(0),
            },
        );
        self.dispatch_backward(&op)?;
        self.ops[op_idx] = op;
        Ok(())
    }

    fn dispatch_backward(&mut self, op: &Op) -> Result<()> {
        match op {
            Op::Binary { kind, a, b, out } => {
                let Some(dz) = self.out_grad(*out) else {
                    return Ok(());
                };
                let (da, db) = match kind {
                    BinKind::Add => (dz.clone(), dz.clone()),
                    BinKind::Sub => (dz.clone(), dz.map(|v| -v)),
                    BinKind::Mul => {
                        let av = self.value(*a).broadcast_to(dz.shape())?;
                        let bv = self.value(*b).broadcast_to(dz.shape())?;
                        (ops::mul(&dz, &bv)?, ops::mul(&dz, &av)?)
                    }
                    BinKind::Div => {
                        let av = self.value(*a).broadcast_to(dz.shape())?;
                        let bv = self.value(*b).broadcast_to(dz.shape())?;
                        let da = ops::div(&dz, &bv)?;
                        // db = -dz * a / b^2
                        let num = ops::mul(&dz, &av)?;
                        let b2 = ops::mul(&bv, &bv)?;
                        let db = ops::div(&num, &b2)?.map(|v| -v);
                        (da, db)
                    }
                };
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                self.accumulate(*a, da.reduce_to_shape(&sa));
                self.accumulate(*b, db.reduce_to_shape(&sb));
            }
            Op::AddScalar { a, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    self.accumulate(*a, dz);
                }
            }
            Op::MulScalar { a, c, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    self.accumulate(*a, dz.map(|v| v * c));
                }
            }
            Op::PowI { a, n, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let n = *n;
                    let av = self.value(*a).clone();
                    let g = Tensor::new(
                        av.shape().to_vec(),
                        dz.data()
                            .iter()
                            .zip(av.data())
                            .map(|(&d, &x)| d * n as f64 * x.powi(n - 1))
                            .collect(),
                    )?;
                    self.accumulate(*a, g);
                }
            }
            Op::Unary { kind, a, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let av = self.value(*a).clone();
                    let ov = self.value(*out).clone();
                    let g = match kind {
                        UnKind::Neg => dz.map(|v| -v),
                        // subgradient at 0 follows the sign convention (+1)
                        UnKind::Abs => zip_map(&dz, &av, |d, x| {
                            d * if x >= 0.0 { 1.0 } else { -1.0 }
                        })?,
                        UnKind::Sqrt => zip_map(&dz, &ov, |d, y| d * 0.5 / y)?,
                        UnKind::Ln => zip_map(&dz, &av, |d, x| d / x)?,
                        UnKind::Exp => zip_map(&dz, &ov, |d, y| d * y)?,
                        UnKind::Relu => zip_map(&dz, &av, |d, x| if x > 0.0 { d } else { 0.0 })?,
                        UnKind::Hardtanh => {
                            zip_map(&dz, &av, |d, x| if x.abs() <= 1.0 { d } else { 0.0 })?
                        }
                    };
                    self.accumulate(*a, g);
                }
            }
            Op::PRelu { x, slope, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let s = self.value(*slope).data()[0];
                    let xv = self.value(*x).clone();
                    let dx = zip_map(&dz, &xv, |d, v| if v > 0.0 { d } else { d * s })?;
                    let mut ds = 0.0;
                    for (d, v) in dz.data().iter().zip(xv.data()) {
                        if *v <= 0.0 {
                            ds += d * v;
                        }
                    }
                    let slope_shape = self.value(*slope).shape().to_vec();
                    self.accumulate(*x, dx);
                    self.accumulate(*slope, Tensor::full(&slope_shape, ds));
                }
            }
            Op::SignSte { x, kind, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let g = ste_backward(*kind, self.value(*x), &dz)?;
                    self.accumulate(*x, g);
                }
            }
            Op::Matmul { a, b, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let av = self.value(*a).clone();
                    let bv = self.value(*b).clone();
                    let da = ops::matmul(&dz, &transpose2(&bv))?;
                    let db = ops::matmul(&transpose2(&av), &dz)?;
                    self.accumulate(*a, da);
                    self.accumulate(*b, db);
                }
            }
            Op::Conv2d {
                x,
                w,
                out,
                stride,
                pad,
                pad_value,
            } => {
                if let Some(dz) = self.out_grad(*out) {
                    let xv = self.value(*x).clone();
                    let wv = self.value(*w).clone();
                    if self.nodes[x.0].requires_grad {
                        let dx =
                            ops::conv2d_input_grad(&dz, &wv, xv.shape(), *stride, *pad);
                        self.accumulate(*x, dx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let dw = ops::conv2d_weight_grad(
                            &dz, &xv, wv.shape(), *stride, *pad, *pad_value,
                        );
                        self.accumulate(*w, dw);
                    }
                }
            }
            Op::MaxPool2d { x, out, argmax } => {
                if let Some(dz) = self.out_grad(*out) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src] += dz.data()[o];
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::GlobalAvgPool { x, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let shape = self.value(*x).shape().to_vec();
                    let (h, w) = (shape[2], shape[3]);
                    let scale = 1.0 / (h * w) as f64;
                    let mut dx = Tensor::zeros(&shape);
                    for plane in 0..shape[0] * shape[1] {
                        let g = dz.data()[plane] * scale;
                        let base = plane * h * w;
                        for v in &mut dx.data_mut()[base..base + h * w] {
                            *v = g;
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                out,
                mean,
                inv_std,
                training,
            } => {
                if let Some(dz) = self.out_grad(*out) {
                    let xv = self.value(*x).clone();
                    let gv = self.value(*gamma).clone();
                    let (n, c, h, w) = ops::dims4(&xv);
                    let m = (n * h * w) as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ci in 0..c {
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for k in base..base + h * w {
                                let xhat = (xv.data()[k] - mean[ci]) * inv_std[ci];
                                dgamma[ci] += dz.data()[k] * xhat;
                                dbeta[ci] += dz.data()[k];
                            }
                        }
                    }
                    let mut dx = Tensor::zeros(xv.shape());
                    for ci in 0..c {
                        let g = gv.data()[ci];
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for k in base..base + h * w {
                                let d = dz.data()[k];
                                let v = if *training {
                                    let xhat = (xv.data()[k] - mean[ci]) * inv_std[ci];
                                    g * inv_std[ci]
                                        * (d - dbeta[ci] / m - xhat * dgamma[ci] / m)
                                } else {
                                    g * inv_std[ci] * d
                                };
                                dx.data_mut()[k] = v;
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                    self.accumulate(*gamma, Tensor::new(vec![c], dgamma)?);
                    self.accumulate(*beta, Tensor::new(vec![c], dbeta)?);
                }
            }
            Op::Softmax { x, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let p = self.value(*out).clone();
                    let cols = p.shape()[1];
                    let mut dx = Tensor::zeros(p.shape());
                    for r in 0..p.shape()[0] {
                        let base = r * cols;
                        let mut dot = 0.0;
                        for k in 0..cols {
                            dot += dz.data()[base + k] * p.data()[base + k];
                        }
                        for k in 0..cols {
                            dx.data_mut()[base + k] =
                                p.data()[base + k] * (dz.data()[base + k] - dot);
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::LogSoftmax { x, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let ls = self.value(*out).clone();
                    let cols = ls.shape()[1];
                    let mut dx = Tensor::zeros(ls.shape());
                    for r in 0..ls.shape()[0] {
                        let base = r * cols;
                        let mut dsum = 0.0;
                        for k in 0..cols {
                            dsum += dz.data()[base + k];
                        }
                        for k in 0..cols {
                            let p = ls.data()[base + k].exp();
                            dx.data_mut()[base + k] = dz.data()[base + k] - p * dsum;
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                out,
                probs,
            } => {
                if let Some(dz) = self.out_grad(*out) {
                    let scale = dz.data()[0] / labels.len() as f64;
                    let k = probs.shape()[1];
                    let mut dx = probs.map(|p| p * scale);
                    for (i, &l) in labels.iter().enumerate() {
                        dx.data_mut()[i * k + l] -= scale;
                    }
                    self.accumulate(*logits, dx);
                }
            }
            Op::Sum { a, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let g = dz.data()[0];
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(*a, Tensor::full(&shape, g));
                }
            }
            Op::Mean { a, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let shape = self.value(*a).shape().to_vec();
                    let g = dz.data()[0] / self.value(*a).numel() as f64;
                    self.accumulate(*a, Tensor::full(&shape, g));
                }
            }
            Op::MeanRows { a, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let shape = self.value(*a).shape().to_vec();
                    let (m, n) = (shape[0], shape[1]);
                    let mut dx = Tensor::zeros(&shape);
                    for i in 0..m {
                        let g = dz.data()[i] / n as f64;
                        for j in 0..n {
                            dx.data_mut()[i * n + j] = g;
                        }
                    }
                    self.accumulate(*a, dx);
                }
            }
            Op::Reshape { a, out } => {
                if let Some(dz) = self.out_grad(*out) {
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(*a, dz.reshape(&shape)?);
                }
            }
            Op::SoftHist {
                x,
                out,
                centers,
                bandwidth,
                norm,
                counts,
                eps,
            } => {
                if let Some(dz) = self.out_grad(*out) {
                    let bins = centers.len();
                    let h = centers[1] - centers[0];
                    let lo = centers[0];
                    let hi = centers[bins - 1];
                    // dS/dx contributions: d probs_j / d x_k
                    //   = [dcounts_j * S - (counts_j + eps) * dS] / S^2
                    // with dS = sum_j dcounts_j. A fixed dot product
                    // sum_j dz_j*(counts_j+eps) folds the second term.
                    let s = *norm;
                    let mut dot_dz_probs = 0.0;
                    for j in 0..bins {
                        dot_dz_probs += dz.data()[j] * (counts[j] + eps);
                    }
                    dot_dz_probs /= s * s;
                    let xv = self.value(*x).clone();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (k, &v) in xv.data().iter().enumerate() {
                        if v <= lo || v >= hi {
                            continue; // clamped: no gradient
                        }
                        let j0 = (((v - bandwidth) - lo) / h).floor().max(0.0) as usize;
                        let j1 = ((((v + bandwidth) - lo) / h).ceil() as usize).min(bins - 1);
                        let mut acc = 0.0;
                        for (j, center) in centers.iter().enumerate().take(j1 + 1).skip(j0) {
                            let d = v - center;
                            if d.abs() < *bandwidth {
                                // d/dv of (1 - |v - c|/b)
                                let dcount = -d.signum() / bandwidth;
                                acc += dcount * (dz.data()[j] / s - dot_dz_probs);
                            }
                        }
                        dx.data_mut()[k] = acc;
                    }
                    self.accumulate(*x, dx);
                }
            }
        }
        Ok(())
    }
}

pub(crate) struct SoftHistForward {
    pub centers: Vec<f64>,
    pub counts: Vec<f64>,
    pub norm: f64,
    pub probs: Vec<f64>,
}

/// Shared forward pass for the soft histogram, used by the tape op and by
/// the plain density estimator.
pub(crate) fn soft_hist_forward(
    data: &[f64],
    bins: usize,
    range: f64,
    bandwidth: f64,
    eps: f64,
) -> Result<SoftHistForward> {
    if bins < 2 || range <= 0.0 || bandwidth <= 0.0 || eps <= 0.0 {
        return Err(Error::Invalid(format!(
            "soft_histogram: bins={bins} range={range} bandwidth={bandwidth} eps={eps}"
        )));
    }
    let h = 2.0 * range / bins as f64;
    let centers: Vec<f64> = (0..bins).map(|j| -range + (j as f64 + 0.5) * h).collect();
    let lo = centers[0];
    let hi = centers[bins - 1];
    let mut counts = vec![0.0; bins];
    for &v in data {
        let vc = v.clamp(lo, hi);
        let j0 = (((vc - bandwidth) - lo) / h).floor().max(0.0) as usize;
        let j1 = ((((vc + bandwidth) - lo) / h).ceil() as usize).min(bins - 1);
        for (j, center) in centers.iter().enumerate().take(j1 + 1).skip(j0) {
            let u = (vc - center).abs() / bandwidth;
            if u < 1.0 {
                counts[j] += 1.0 - u;
            }
        }
    }
    let norm: f64 = counts.iter().sum::<f64>() + bins as f64 * eps;
    let probs: Vec<f64> = counts.iter().map(|c| (c + eps) / norm).collect();
    Ok(SoftHistForward {
        centers,
        counts,
        norm,
        probs,
    })
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn transpose2(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}
