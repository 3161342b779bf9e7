//! Tape-based reverse-mode automatic differentiation.
//!
//! Ops execute eagerly and record a node on the tape when any input
//! requires gradients. [`Tape::backward`] replays the recorded nodes in
//! reverse, accumulating vector-Jacobian products into a gradient map.
//! The tape keeps forward-op and backward-pass counters so callers can
//! assert how much work a training step performed.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor, TensorId};

/// Norm floor below which l2 normalization refuses to divide.
pub const NORM_FLOOR: Elem = 1e-12;

const BN_EPS: Elem = 1e-5;

/// Recorded operation kind plus whatever the backward pass needs.
#[derive(Debug)]
enum Op {
    Add,
    /// rhs was broadcast over the rows of lhs ([B,d] + [d]).
    AddBias,
    Sub,
    Mul,
    ScalarMul(Elem),
    Matmul,
    Conv2d { stride: usize, pad: usize },
    MaxPool2d { argmax: Vec<u32> },
    GlobalAvgPool,
    Relu,
    BatchNorm { mean: Vec<Elem>, inv_std: Vec<Elem>, batch_stats: bool },
    Sum,
    Mean,
    L2Normalize { inv_norm: Vec<Elem> },
    Dot,
    Log,
    Exp,
    LogSumExp { softmax: Vec<Elem> },
    Concat { sizes: Vec<usize> },
    Reshape,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Gradients produced by one backward pass, keyed by tensor id.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<TensorId, Vec<Elem>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[Elem]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient w.r.t. `t`, zeros when no gradient flowed to it.
    pub fn wrt(&self, t: &Tensor) -> Vec<Elem> {
        match self.grads.get(&t.id()) {
            Some(g) => g.clone(),
            None => vec![0.0; t.numel()],
        }
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id())
    }
}

/// Records ops and replays them in reverse for gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    node_of: RefCell<HashMap<TensorId, usize>>,
    forward_ops: Cell<u64>,
    backward_passes: Cell<u64>,
}

/// Which statistics batch_norm normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a> {
    /// Statistics of the current batch (training mode).
    Batch,
    /// Fixed running statistics (evaluation mode).
    Running { mean: &'a [Elem], var: &'a [Elem] },
}

/// batch_norm output plus the batch statistics it computed, so the caller
/// can fold them into running buffers.
pub struct BnOutput {
    pub out: Tensor,
    pub batch_mean: Option<Vec<Elem>>,
    pub batch_var: Option<Vec<Elem>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn forward_ops(&self) -> u64 {
        self.forward_ops.get()
    }

    pub fn backward_passes(&self) -> u64 {
        self.backward_passes.get()
    }

    /// Drop all recorded nodes and reset both counters.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.node_of.borrow_mut().clear();
        self.forward_ops.set(0);
        self.backward_passes.set(0);
    }

    fn emit(&self, op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<Elem>) -> Tensor {
        self.forward_ops.set(self.forward_ops.get() + 1);
        let record = inputs.iter().any(Tensor::requires_grad);
        let out = Tensor::new(shape, data, record);
        if record {
            let mut nodes = self.nodes.borrow_mut();
            self.node_of.borrow_mut().insert(out.id(), nodes.len());
            nodes.push(Node { op, inputs, output: out.clone() });
        }
        out
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() == b.shape() {
            let data = zip_map(a.data(), b.data(), |x, y| x + y);
            Ok(self.emit(Op::Add, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
        } else if a.shape().len() == 2 && b.shape().len() == 1 && a.shape()[1] == b.shape()[0] {
            let cols = a.shape()[1];
            let mut data = a.data().to_vec();
            for (i, v) in data.iter_mut().enumerate() {
                *v += b.data()[i % cols];
            }
            Ok(self.emit(Op::AddBias, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
        } else {
            Err(Self::shape_err(
                "add",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ))
        }
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Self::shape_err(
                "sub",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = zip_map(a.data(), b.data(), |x, y| x - y);
        Ok(self.emit(Op::Sub, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Self::shape_err(
                "mul",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = zip_map(a.data(), b.data(), |x, y| x * y);
        Ok(self.emit(Op::Mul, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
    }

    pub fn scalar_mul(&self, a: &Tensor, c: Elem) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x * c).collect();
        Ok(self.emit(Op::ScalarMul(c), vec![a.clone()], a.shape().to_vec(), data))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        Ok(self.emit(Op::Relu, vec![a.clone()], a.shape().to_vec(), data))
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = a.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let data = a.data().iter().map(|x| x.ln()).collect();
        Ok(self.emit(Op::Log, vec![a.clone()], a.shape().to_vec(), data))
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.exp()).collect();
        Ok(self.emit(Op::Exp, vec![a.clone()], a.shape().to_vec(), data))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let total: Elem = a.data().iter().sum();
        Ok(self.emit(Op::Sum, vec![a.clone()], vec![1], vec![total]))
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let total: Elem = a.data().iter().sum();
        let n = a.numel() as Elem;
        Ok(self.emit(Op::Mean, vec![a.clone()], vec![1], vec![total / n]))
    }

    pub fn dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 || a.shape() != b.shape() {
            return Err(Self::shape_err(
                "dot",
                format!("need equal 1-d shapes, got {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let total: Elem = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        Ok(self.emit(Op::Dot, vec![a.clone(), b.clone()], vec![1], vec![total]))
    }

    /// Numerically stable log(sum(exp(x))) over a 1-d tensor.
    pub fn logsumexp(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 {
            return Err(Self::shape_err(
                "logsumexp",
                format!("need a 1-d tensor, got {:?}", a.shape()),
            ));
        }
        let max = a.data().iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
        let sum_exp: Elem = a.data().iter().map(|x| (x - max).exp()).sum();
        let value = max + sum_exp.ln();
        let softmax: Vec<Elem> = a.data().iter().map(|x| (x - max).exp() / sum_exp).collect();
        Ok(self.emit(Op::LogSumExp { softmax }, vec![a.clone()], vec![1], vec![value]))
    }

    /// Normalize to unit Euclidean norm: the whole vector for 1-d input,
    /// each row for 2-d input. Rows with norm at or below [`NORM_FLOOR`]
    /// are a domain error.
    pub fn l2_normalize(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = match a.shape() {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Self::shape_err(
                    "l2_normalize",
                    format!("need 1-d or 2-d tensor, got {other:?}"),
                ))
            }
        };
        let mut inv_norm = Vec::with_capacity(rows);
        let mut data = vec![0.0; a.numel()];
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<Elem>().sqrt();
            if norm <= NORM_FLOOR {
                return Err(Error::Domain(format!(
                    "l2_normalize: row {r} has norm {norm:e}, at or below floor {NORM_FLOOR:e}"
                )));
            }
            let inv = 1.0 / norm;
            inv_norm.push(inv);
            for c in 0..cols {
                data[r * cols + c] = row[c] * inv;
            }
        }
        Ok(self.emit(Op::L2Normalize { inv_norm }, vec![a.clone()], a.shape().to_vec(), data))
    }

    // ── Structure ops ───────────────────────────────────────────────────

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Self::shape_err(
                "reshape",
                format!("{:?} ({} elems) -> {shape:?} ({numel} elems)", a.shape(), a.numel()),
            ));
        }
        Ok(self.emit(Op::Reshape, vec![a.clone()], shape, a.data().to_vec()))
    }

    /// Concatenate along axis 0. All inputs must agree on the trailing dims.
    pub fn concat(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat", "empty input list".to_string()));
        }
        let tail = &parts[0].shape()[1..];
        let mut dim0 = 0;
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Self::shape_err(
                    "concat",
                    format!("trailing dims differ: {:?} vs {:?}", parts[0].shape(), p.shape()),
                ));
            }
            dim0 += p.shape()[0];
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let sizes = parts.iter().map(|p| p.numel()).collect();
        let inputs = parts.iter().map(|p| (*p).clone()).collect();
        Ok(self.emit(Op::Concat { sizes }, inputs, shape, data))
    }

    /// Value-identical tensor that blocks gradient flow.
    pub fn stop_gradient(&self, a: &Tensor) -> Tensor {
        self.forward_ops.set(self.forward_ops.get() + 1);
        a.detached()
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (&[m, ka], &[kb, n]) = match (a.shape(), b.shape()) {
            ([m, ka], [kb, n]) => (&[*m, *ka], &[*kb, *n]),
            _ => {
                return Err(Self::shape_err(
                    "matmul",
                    format!("need 2-d tensors, got {:?} vs {:?}", a.shape(), b.shape()),
                ))
            }
        };
        if ka != kb {
            return Err(Self::shape_err(
                "matmul",
                format!("inner dims differ: [{m},{ka}] x [{kb},{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_rowmajor(m, ka, n, a.data(), b.data(), &mut out);
        Ok(self.emit(Op::Matmul, vec![a.clone(), b.clone()], vec![m, n], out))
    }

    /// 2-d convolution, zero padding, square stride. Input [B,C,H,W],
    /// weight [OC,C,KH,KW]. Implemented as im2col followed by one gemm.
    pub fn conv2d(&self, x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (&[b, c, h, w], &[oc, wc, kh, kw]) = match (x.shape(), weight.shape()) {
            ([b, c, h, w], [oc, wc, kh, kw]) => (&[*b, *c, *h, *w], &[*oc, *wc, *kh, *kw]),
            _ => {
                return Err(Self::shape_err(
                    "conv2d",
                    format!("need 4-d input and weight, got {:?} vs {:?}", x.shape(), weight.shape()),
                ))
            }
        };
        if c != wc {
            return Err(Self::shape_err(
                "conv2d",
                format!("input channels {c} != weight channels {wc}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Self::shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let k = c * kh * kw;
        let rows = b * oh * ow;
        let patches = im2col(x.data(), b, c, h, w, kh, kw, stride, pad, oh, ow);
        // tmp[r, oc] = patches[r, :] . weight[oc, :]
        let mut tmp = vec![0.0; rows * oc];
        gemm(
            rows, k, oc,
            &patches, (k as isize, 1),
            weight.data(), (1, k as isize),
            &mut tmp,
        );
        let mut out = vec![0.0; b * oc * oh * ow];
        for bi in 0..b {
            for ohw in 0..oh * ow {
                let r = bi * oh * ow + ohw;
                for o in 0..oc {
                    out[(bi * oc + o) * oh * ow + ohw] = tmp[r * oc + o];
                }
            }
        }
        Ok(self.emit(
            Op::Conv2d { stride, pad },
            vec![x.clone(), weight.clone()],
            vec![b, oc, oh, ow],
            out,
        ))
    }

    /// Max pooling with square kernel and stride.
    pub fn max_pool2d(&self, x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
        let &[b, c, h, w] = match x.shape() {
            [b, c, h, w] => &[*b, *c, *h, *w],
            other => {
                return Err(Self::shape_err(
                    "max_pool2d",
                    format!("need 4-d input, got {other:?}"),
                ))
            }
        };
        if h < kernel || w < kernel {
            return Err(Self::shape_err(
                "max_pool2d",
                format!("kernel {kernel} larger than input {h}x{w}"),
            ));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0u32; b * c * oh * ow];
        let data = x.data();
        for bc in 0..b * c {
            let plane = bc * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = Elem::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let at = plane + (i * stride + di) * w + (j * stride + dj);
                            if data[at] > best {
                                best = data[at];
                                best_at = at;
                            }
                        }
                    }
                    out[bc * oh * ow + i * ow + j] = best;
                    argmax[bc * oh * ow + i * ow + j] = best_at as u32;
                }
            }
        }
        Ok(self.emit(Op::MaxPool2d { argmax }, vec![x.clone()], vec![b, c, oh, ow], out))
    }

    /// Spatial mean per channel: [B,C,H,W] -> [B,C].
    pub fn global_avg_pool(&self, x: &Tensor) -> Result<Tensor> {
        let &[b, c, h, w] = match x.shape() {
            [b, c, h, w] => &[*b, *c, *h, *w],
            other => {
                return Err(Self::shape_err(
                    "global_avg_pool",
                    format!("need 4-d input, got {other:?}"),
                ))
            }
        };
        let area = (h * w) as Elem;
        let mut out = vec![0.0; b * c];
        for bc in 0..b * c {
            out[bc] = x.data()[bc * h * w..(bc + 1) * h * w].iter().sum::<Elem>() / area;
        }
        Ok(self.emit(Op::GlobalAvgPool, vec![x.clone()], vec![b, c], out))
    }

    /// Batch normalization over [B,D] (per feature) or [B,C,H,W] (per
    /// channel). `scale` and `shift` are the learned affine parameters.
    /// Running-statistics buffers live outside the tape; in `Batch` mode the
    /// computed statistics are handed back for the caller to fold in.
    pub fn batch_norm(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        stats: BnStats,
    ) -> Result<BnOutput> {
        let (n0, channels, n1) = match x.shape() {
            [b, d] => (*b, *d, 1usize),
            [b, c, h, w] => (*b, *c, h * w),
            other => {
                return Err(Self::shape_err(
                    "batch_norm",
                    format!("need 2-d or 4-d input, got {other:?}"),
                ))
            }
        };
        if scale.shape() != [channels] || shift.shape() != [channels] {
            return Err(Self::shape_err(
                "batch_norm",
                format!(
                    "scale {:?} / shift {:?} do not match {channels} channels",
                    scale.shape(),
                    shift.shape()
                ),
            ));
        }
        let reduce_n = (n0 * n1) as Elem;
        let data = x.data();
        let at = |i0: usize, ch: usize, i1: usize| (i0 * channels + ch) * n1 + i1;

        let (mean, var, batch_stats) = match stats {
            BnStats::Batch => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for ch in 0..channels {
                    let mut s = 0.0;
                    for i0 in 0..n0 {
                        for i1 in 0..n1 {
                            s += data[at(i0, ch, i1)];
                        }
                    }
                    let m = s / reduce_n;
                    let mut v = 0.0;
                    for i0 in 0..n0 {
                        for i1 in 0..n1 {
                            let d = data[at(i0, ch, i1)] - m;
                            v += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / reduce_n;
                }
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Self::shape_err(
                        "batch_norm",
                        format!(
                            "running stats of length {}/{} for {channels} channels",
                            mean.len(),
                            var.len()
                        ),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };

        let inv_std: Vec<Elem> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = vec![0.0; x.numel()];
        for i0 in 0..n0 {
            for ch in 0..channels {
                let (m, is) = (mean[ch], inv_std[ch]);
                let (g, b) = (scale.data()[ch], shift.data()[ch]);
                for i1 in 0..n1 {
                    let idx = at(i0, ch, i1);
                    out[idx] = (data[idx] - m) * is * g + b;
                }
            }
        }

        let (batch_mean, batch_var) = if batch_stats {
            (Some(mean.clone()), Some(var.clone()))
        } else {
            (None, None)
        };
        let out = self.emit(
            Op::BatchNorm { mean, inv_std, batch_stats },
            vec![x.clone(), scale.clone(), shift.clone()],
            x.shape().to_vec(),
            out,
        );
        Ok(BnOutput { out, batch_mean, batch_var })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns the gradient map and
    /// increments the backward-pass counter by exactly one.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.numel() != 1 {
            return Err(Error::Domain(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        let root_node = self
            .node_of
            .borrow()
            .get(&root.id())
            .copied()
            .ok_or_else(|| Error::Domain("backward root was not produced on this tape".into()))?;
        self.backward_passes.set(self.backward_passes.get() + 1);

        let nodes = self.nodes.borrow();
        let mut grads: HashMap<TensorId, Vec<Elem>> = HashMap::new();
        grads.insert(root.id(), vec![1.0]);
        for node in nodes[..=root_node].iter().rev() {
            let Some(g) = grads.get(&node.output.id()) else { continue };
            let g = g.clone();
            node_vjp(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut HashMap<TensorId, Vec<Elem>>, t: &Tensor, delta: Vec<Elem>) {
    if !t.requires_grad() {
        return;
    }
    match grads.get_mut(&t.id()) {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        None => {
            grads.insert(t.id(), delta);
        }
    }
}

fn node_vjp(node: &Node, g: &[Elem], grads: &mut HashMap<TensorId, Vec<Elem>>) {
    let ins = &node.inputs;
    let out = &node.output;
    match &node.op {
        Op::Add => {
            accumulate(grads, &ins[0], g.to_vec());
            accumulate(grads, &ins[1], g.to_vec());
        }
        Op::AddBias => {
            accumulate(grads, &ins[0], g.to_vec());
            if ins[1].requires_grad() {
                let cols = ins[1].numel();
                let mut db = vec![0.0; cols];
                for (i, gi) in g.iter().enumerate() {
                    db[i % cols] += gi;
                }
                accumulate(grads, &ins[1], db);
            }
        }
        Op::Sub => {
            accumulate(grads, &ins[0], g.to_vec());
            accumulate(grads, &ins[1], g.iter().map(|x| -x).collect());
        }
        Op::Mul => {
            if ins[0].requires_grad() {
                accumulate(grads, &ins[0], zip_map(g, ins[1].data(), |a, b| a * b));
            }
            if ins[1].requires_grad() {
                accumulate(grads, &ins[1], zip_map(g, ins[0].data(), |a, b| a * b));
            }
        }
        Op::ScalarMul(c) => {
            accumulate(grads, &ins[0], g.iter().map(|x| x * c).collect());
        }
        Op::Relu => {
            let mask = out.data();
            accumulate(
                grads,
                &ins[0],
                g.iter().zip(mask).map(|(gi, &o)| if o > 0.0 { *gi } else { 0.0 }).collect(),
            );
        }
        Op::Log => {
            accumulate(grads, &ins[0], zip_map(g, ins[0].data(), |gi, x| gi / x));
        }
        Op::Exp => {
            accumulate(grads, &ins[0], zip_map(g, out.data(), |gi, o| gi * o));
        }
        Op::Sum => {
            accumulate(grads, &ins[0], vec![g[0]; ins[0].numel()]);
        }
        Op::Mean => {
            let scale = g[0] / ins[0].numel() as Elem;
            accumulate(grads, &ins[0], vec![scale; ins[0].numel()]);
        }
        Op::Dot => {
            if ins[0].requires_grad() {
                accumulate(grads, &ins[0], ins[1].data().iter().map(|x| g[0] * x).collect());
            }
            if ins[1].requires_grad() {
                accumulate(grads, &ins[1], ins[0].data().iter().map(|x| g[0] * x).collect());
            }
        }
        Op::LogSumExp { softmax } => {
            accumulate(grads, &ins[0], softmax.iter().map(|s| g[0] * s).collect());
        }
        Op::L2Normalize { inv_norm } => {
            let cols = ins[0].numel() / inv_norm.len();
            let y = out.data();
            let mut dx = vec![0.0; ins[0].numel()];
            for (r, inv) in inv_norm.iter().enumerate() {
                let span = r * cols..(r + 1) * cols;
                let yr = &y[span.clone()];
                let gr = &g[span.clone()];
                let proj: Elem = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (slot, (yi, gi)) in dx[span].iter_mut().zip(yr.iter().zip(gr)) {
                    *slot = inv * (gi - yi * proj);
                }
            }
            accumulate(grads, &ins[0], dx);
        }
        Op::Reshape => {
            accumulate(grads, &ins[0], g.to_vec());
        }
        Op::Concat { sizes } => {
            let mut offset = 0;
            for (part, &len) in ins.iter().zip(sizes) {
                if part.requires_grad() {
                    accumulate(grads, part, g[offset..offset + len].to_vec());
                }
                offset += len;
            }
        }
        Op::Matmul => {
            let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
            let n = ins[1].shape()[1];
            if ins[0].requires_grad() {
                // dA = g . B^T
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, (n as isize, 1), ins[1].data(), (1, n as isize), &mut da);
                accumulate(grads, &ins[0], da);
            }
            if ins[1].requires_grad() {
                // dB = A^T . g
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, ins[0].data(), (1, k as isize), g, (n as isize, 1), &mut db);
                accumulate(grads, &ins[1], db);
            }
        }
        Op::Conv2d { stride, pad } => conv2d_vjp(ins, out, g, *stride, *pad, grads),
        Op::MaxPool2d { argmax } => {
            let mut dx = vec![0.0; ins[0].numel()];
            for (gi, &at) in g.iter().zip(argmax) {
                dx[at as usize] += gi;
            }
            accumulate(grads, &ins[0], dx);
        }
        Op::GlobalAvgPool => {
            let shape = ins[0].shape();
            let area = shape[2] * shape[3];
            let scale = 1.0 / area as Elem;
            let mut dx = vec![0.0; ins[0].numel()];
            for bc in 0..shape[0] * shape[1] {
                let v = g[bc] * scale;
                for slot in &mut dx[bc * area..(bc + 1) * area] {
                    *slot = v;
                }
            }
            accumulate(grads, &ins[0], dx);
        }
        Op::BatchNorm { mean, inv_std, batch_stats } => {
            bn_vjp(ins, g, mean, inv_std, *batch_stats, grads);
        }
    }
}

fn conv2d_vjp(
    ins: &[Tensor],
    out: &Tensor,
    g: &[Elem],
    stride: usize,
    pad: usize,
    grads: &mut HashMap<TensorId, Vec<Elem>>,
) {
    let (x, weight) = (&ins[0], &ins[1]);
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    let k = c * kh * kw;
    let rows = b * oh * ow;

    // g arrives as [B,OC,OH,OW]; regroup to [rows, OC] to match the im2col gemm.
    let mut g2d = vec![0.0; rows * oc];
    for bi in 0..b {
        for o in 0..oc {
            for ohw in 0..oh * ow {
                g2d[(bi * oh * ow + ohw) * oc + o] = g[(bi * oc + o) * oh * ow + ohw];
            }
        }
    }

    if weight.requires_grad() {
        // dW[oc, k] = g2d^T . patches  (patches recomputed, cheaper than saving)
        let patches = im2col(x.data(), b, c, h, w, kh, kw, stride, pad, oh, ow);
        let mut dw = vec![0.0; oc * k];
        gemm(oc, rows, k, &g2d, (1, oc as isize), &patches, (k as isize, 1), &mut dw);
        accumulate(grads, weight, dw);
    }
    if x.requires_grad() {
        // d_patches = g2d . W, then scatter back to the input layout.
        let mut dpatches = vec![0.0; rows * k];
        gemm(rows, oc, k, &g2d, (oc as isize, 1), weight.data(), (k as isize, 1), &mut dpatches);
        let dx = col2im(&dpatches, b, c, h, w, kh, kw, stride, pad, oh, ow);
        accumulate(grads, x, dx);
    }
}

fn bn_vjp(
    ins: &[Tensor],
    g: &[Elem],
    mean: &[Elem],
    inv_std: &[Elem],
    batch_stats: bool,
    grads: &mut HashMap<TensorId, Vec<Elem>>,
) {
    let (x, scale, _shift) = (&ins[0], &ins[1], &ins[2]);
    let (n0, channels, n1) = match x.shape() {
        [b, d] => (*b, *d, 1usize),
        [b, c, h, w] => (*b, *c, h * w),
        _ => unreachable!("shape checked at forward"),
    };
    let reduce_n = (n0 * n1) as Elem;
    let data = x.data();
    let at = |i0: usize, ch: usize, i1: usize| (i0 * channels + ch) * n1 + i1;

    let mut dscale = vec![0.0; channels];
    let mut dshift = vec![0.0; channels];
    let mut sum_g = vec![0.0; channels];
    let mut sum_gx = vec![0.0; channels];
    for i0 in 0..n0 {
        for ch in 0..channels {
            for i1 in 0..n1 {
                let idx = at(i0, ch, i1);
                let xhat = (data[idx] - mean[ch]) * inv_std[ch];
                sum_g[ch] += g[idx];
                sum_gx[ch] += g[idx] * xhat;
            }
        }
    }
    for ch in 0..channels {
        dscale[ch] = sum_gx[ch];
        dshift[ch] = sum_g[ch];
    }

    if x.requires_grad() {
        let mut dx = vec![0.0; x.numel()];
        for i0 in 0..n0 {
            for ch in 0..channels {
                let gamma_is = scale.data()[ch] * inv_std[ch];
                for i1 in 0..n1 {
                    let idx = at(i0, ch, i1);
                    dx[idx] = if batch_stats {
                        let xhat = (data[idx] - mean[ch]) * inv_std[ch];
                        gamma_is * (g[idx] - sum_g[ch] / reduce_n - xhat * sum_gx[ch] / reduce_n)
                    } else {
                        gamma_is * g[idx]
                    };
                }
            }
        }
        accumulate(grads, x, dx);
    }
    accumulate(grads, scale, dscale);
    accumulate(grads, &ins[2], dshift);
}

// ── Kernels ─────────────────────────────────────────────────────────────

fn zip_map(a: &[Elem], b: &[Elem], f: impl Fn(Elem, Elem) -> Elem) -> Vec<Elem> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// C[m,n] (row-major) = A . B with explicit strides for A and B, so
/// transposed operands are stride swaps instead of copies.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Elem],
    (rsa, csa): (isize, isize),
    b: &[Elem],
    (rsb, csb): (isize, isize),
    c: &mut [Elem],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    #[cfg(not(feature = "f32"))]
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(),
            n as isize, 1,
        );
    }
    #[cfg(feature = "f32")]
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(),
            n as isize, 1,
        );
    }
}

fn gemm_rowmajor(m: usize, k: usize, n: usize, a: &[Elem], b: &[Elem], c: &mut [Elem]) {
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c);
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[Elem],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<Elem> {
    let k = c * kh * kw;
    let mut patches = vec![0.0; b * oh * ow * k];
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let row = ((bi * oh + i) * ow + j) * k;
                for ci in 0..c {
                    let plane = (bi * c + ci) * h * w;
                    for di in 0..kh {
                        let src_i = (i * stride + di) as isize - pad as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        for dj in 0..kw {
                            let src_j = (j * stride + dj) as isize - pad as isize;
                            if src_j < 0 || src_j >= w as isize {
                                continue;
                            }
                            patches[row + (ci * kh + di) * kw + dj] =
                                x[plane + src_i as usize * w + src_j as usize];
                        }
                    }
                }
            }
        }
    }
    patches
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dpatches: &[Elem],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<Elem> {
    let k = c * kh * kw;
    let mut dx = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let row = ((bi * oh + i) * ow + j) * k;
                for ci in 0..c {
                    let plane = (bi * c + ci) * h * w;
                    for di in 0..kh {
                        let src_i = (i * stride + di) as isize - pad as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        for dj in 0..kw {
                            let src_j = (j * stride + dj) as isize - pad as isize;
                            if src_j < 0 || src_j >= w as isize {
                                continue;
                            }
                            dx[plane + src_i as usize * w + src_j as usize] +=
                                dpatches[row + (ci * kh + di) * kw + dj];
                        }
                    }
                }
            }
        }
    }
    dx
}
