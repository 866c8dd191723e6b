use std::cell::{Ref, RefCell};
use std::fmt;

use super::conv::{self, ConvGeom};
use super::{nchw_dims, Conv2dSpec, Result, Tensor, TensorError};

/// Recorded primitive. Indices refer to earlier nodes on the same tape.
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sum(usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        geom: ConvGeom,
    },
    ChannelAffine {
        input: usize,
        gain: usize,
        shift: usize,
    },
    Upsample2x(usize),
    Softmax(usize),
    LogSoftmax(usize),
    CrossEntropy {
        logits: usize,
        /// Softmax probabilities saved from the forward pass.
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    /// Accumulated gradient, kept for leaves only.
    grad: Option<Tensor>,
}

/// Append-only record of a differentiable computation.
///
/// Nodes whose inputs carry no gradient are stored as constants, so running
/// a frozen network on a tape costs no backward bookkeeping.
///
/// Gradients of leaves accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grad`] is called.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = match op {
            Op::Leaf => Op::Leaf,
            op if requires_grad => op,
            _ => Op::Leaf,
        };
        nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d`loss`/d(node) back to every leaf that requires a
    /// gradient, adding into the leaf's accumulated gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to a different tape");
        let mut leaf_grads: Vec<(usize, Tensor)> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(TensorError::NonScalarLoss {
                    shape: root.value.shape().to_vec(),
                });
            }
            let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
            grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                propagate(&nodes, node, &g, &mut grads);
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            let slot = &mut nodes[id].grad;
            match slot {
                Some(acc) => acc.axpy(1.0, &g)?,
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn with_data(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor {
        shape: like.shape().to_vec(),
        data,
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &node.value;
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            let va = &nodes[a].value;
            let vb = &nodes[b].value;
            if nodes[a].requires_grad {
                accumulate(grads, nodes, a, g.zip_map(vb, "mul", |g, y| g * y).expect("shape"));
            }
            if nodes[b].requires_grad {
                accumulate(grads, nodes, b, g.zip_map(va, "mul", |g, x| g * x).expect("shape"));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, a, g.scale(s)),
        Op::Relu(a) => {
            let x = &nodes[a].value;
            let d = g.zip_map(x, "relu", |g, x| if x > 0.0 { g } else { 0.0 }).expect("shape");
            accumulate(grads, nodes, a, d);
        }
        Op::Sum(a) => {
            let g0 = g.data()[0];
            accumulate(grads, nodes, a, Tensor::full(nodes[a].value.shape(), g0));
        }
        Op::Reshape(a) => {
            let d = with_data(&nodes[a].value, g.data().to_vec());
            accumulate(grads, nodes, a, d);
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            ref geom,
        } => {
            let need = (
                nodes[input].requires_grad,
                nodes[kernel].requires_grad,
                nodes[bias].requires_grad,
            );
            let cg = conv::backward(nodes[input].value.data(), nodes[kernel].value.data(), g.data(), geom, need);
            if let Some(dx) = cg.input {
                accumulate(grads, nodes, input, with_data(&nodes[input].value, dx));
            }
            if let Some(dw) = cg.weight {
                accumulate(grads, nodes, kernel, with_data(&nodes[kernel].value, dw));
            }
            if let Some(db) = cg.bias {
                accumulate(grads, nodes, bias, with_data(&nodes[bias].value, db));
            }
        }
        Op::ChannelAffine { input, gain, shift } => {
            let x = &nodes[input].value;
            let gv = nodes[gain].value.data();
            let (n, c, hw) = nchw_dims("channel_affine", x.shape()).expect("checked in forward");
            let mut dx = vec![0.0; x.len()];
            let mut dg = vec![0.0; c];
            let mut ds = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for p in off..off + hw {
                        let gy = g.data()[p];
                        dx[p] = gy * gv[ch];
                        dg[ch] += gy * x.data()[p];
                        ds[ch] += gy;
                    }
                }
            }
            accumulate(grads, nodes, input, with_data(x, dx));
            accumulate(grads, nodes, gain, with_data(&nodes[gain].value, dg));
            accumulate(grads, nodes, shift, with_data(&nodes[shift].value, ds));
        }
        Op::Upsample2x(a) => {
            let x = &nodes[a].value;
            let (nc, h, w) = planes(x.shape());
            let mut dx = vec![0.0; x.len()];
            let gd = g.data();
            for p in 0..nc {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        dx[(p * h + i / 2) * w + j / 2] += gd[(p * 2 * h + i) * 2 * w + j];
                    }
                }
            }
            accumulate(grads, nodes, a, with_data(x, dx));
        }
        Op::Softmax(a) => {
            // dx = y * (g - sum_c y*g)
            let (n, c, hw) = nchw_dims("softmax", out.shape()).expect("checked in forward");
            let y = out.data();
            let gd = g.data();
            let mut dx = vec![0.0; y.len()];
            for b in 0..n {
                for p in 0..hw {
                    let base = b * c * hw + p;
                    let dot: f64 = (0..c).map(|ch| y[base + ch * hw] * gd[base + ch * hw]).sum();
                    for ch in 0..c {
                        let i = base + ch * hw;
                        dx[i] = y[i] * (gd[i] - dot);
                    }
                }
            }
            accumulate(grads, nodes, a, with_data(out, dx));
        }
        Op::LogSoftmax(a) => {
            // dx = g - softmax * sum_c g
            let (n, c, hw) = nchw_dims("log_softmax", out.shape()).expect("checked in forward");
            let y = out.data();
            let gd = g.data();
            let mut dx = vec![0.0; y.len()];
            for b in 0..n {
                for p in 0..hw {
                    let base = b * c * hw + p;
                    let total: f64 = (0..c).map(|ch| gd[base + ch * hw]).sum();
                    for ch in 0..c {
                        let i = base + ch * hw;
                        dx[i] = gd[i] - y[i].exp() * total;
                    }
                }
            }
            accumulate(grads, nodes, a, with_data(out, dx));
        }
        Op::CrossEntropy {
            logits,
            ref probs,
            ref targets,
            count,
        } => {
            let x = &nodes[logits].value;
            let (n, c, hw) = nchw_dims("cross_entropy_seg", x.shape()).expect("checked in forward");
            let scale = g.data()[0] / count as f64;
            let mut dx = vec![0.0; x.len()];
            for b in 0..n {
                for p in 0..hw {
                    let Some(t) = targets[b * hw + p] else { continue };
                    let base = b * c * hw + p;
                    for ch in 0..c {
                        let i = base + ch * hw;
                        let onehot = if ch == t { 1.0 } else { 0.0 };
                        dx[i] = scale * (probs[i] - onehot);
                    }
                }
            }
            accumulate(grads, nodes, logits, with_data(x, dx));
        }
    }
}

/// `(planes, H, W)` for a tensor whose last two axes are spatial.
fn planes(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    (shape[..r - 2].iter().product(), h, w)
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Owned copy of the current value.
    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Option<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = self.value().zip_map(&other.value(), op, f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, node, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let value = self.value().scale(s);
        self.tape.push(value, Op::Scale(self.id, s), self.requires_grad())
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.value().map(|v| if v < 0.0 { 0.0 } else { v });
        self.tape.push(value, Op::Relu(self.id), self.requires_grad())
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.push(value, Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.to_tensor().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id), self.requires_grad()))
    }

    /// 2-D convolution. `self` is `[C_in,H,W]` or `[N,C_in,H,W]`, `kernel`
    /// is `[C_out,C_in,K,K]`, `bias` is `[C_out]`.
    pub fn conv2d(self, kernel: Var<'t>, bias: Var<'t>, spec: Conv2dSpec) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        self.same_tape(&bias);
        let (geom, data) = {
            let x = self.value();
            let k = kernel.value();
            let b = bias.value();
            let geom = ConvGeom::new(x.shape(), k.shape(), b.shape(), spec)?;
            (geom, conv::forward(x.data(), k.data(), b.data(), &geom))
        };
        let shape = if self.value().rank() == 3 {
            vec![geom.cout, geom.ho, geom.wo]
        } else {
            vec![geom.n, geom.cout, geom.ho, geom.wo]
        };
        let rg = self.requires_grad() || kernel.requires_grad() || bias.requires_grad();
        let op = Op::Conv2d {
            input: self.id,
            kernel: kernel.id,
            bias: bias.id,
            geom,
        };
        Ok(self.tape.push(Tensor { shape, data }, op, rg))
    }

    /// Per-channel `x * gain[c] + shift[c]`.
    pub fn channel_affine(self, gain: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
        const OP: &str = "channel_affine";
        let value = {
            let x = self.value();
            let (n, c, hw) = nchw_dims(OP, x.shape())?;
            gain.value().expect_shape(OP, &[c])?;
            shift.value().expect_shape(OP, &[c])?;
            let gv = gain.value();
            let sv = shift.value();
            let mut data = x.data().to_vec();
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for v in &mut data[off..off + hw] {
                        *v = *v * gv.data()[ch] + sv.data()[ch];
                    }
                }
            }
            with_data(&x, data)
        };
        let rg = self.requires_grad() || gain.requires_grad() || shift.requires_grad();
        let op = Op::ChannelAffine {
            input: self.id,
            gain: gain.id,
            shift: shift.id,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Nearest-neighbour 2x spatial upsampling over the last two axes.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            if x.rank() < 2 {
                return Err(TensorError::Rank {
                    op: "upsample2x",
                    expected: ">= 2",
                    got: x.rank(),
                });
            }
            let (nc, h, w) = planes(x.shape());
            let mut data = vec![0.0; x.len() * 4];
            for p in 0..nc {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        data[(p * 2 * h + i) * 2 * w + j] = x.data()[(p * h + i / 2) * w + j / 2];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            let r = shape.len();
            shape[r - 2] *= 2;
            shape[r - 1] *= 2;
            Tensor { shape, data }
        };
        Ok(self.tape.push(value, Op::Upsample2x(self.id), self.requires_grad()))
    }

    /// Softmax over the channel axis of `[C,H,W]` / `[N,C,H,W]` logits.
    pub fn softmax_channels(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            check_finite("softmax_channels", &x)?;
            softmax_channels(&x, false)?
        };
        Ok(self.tape.push(value, Op::Softmax(self.id), self.requires_grad()))
    }

    pub fn log_softmax_channels(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            check_finite("log_softmax_channels", &x)?;
            softmax_channels(&x, true)?
        };
        Ok(self.tape.push(value, Op::LogSoftmax(self.id), self.requires_grad()))
    }

    /// Mean pixel-wise negative log-likelihood of `targets` (one entry per
    /// pixel, row-major over N,H,W; `None` = ignored).
    pub fn cross_entropy_seg(self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        const OP: &str = "cross_entropy_seg";
        let (value, probs, count) = {
            let x = self.value();
            check_finite(OP, &x)?;
            let (n, c, hw) = nchw_dims(OP, x.shape())?;
            if targets.len() != n * hw {
                return Err(TensorError::Dimension {
                    op: OP,
                    dim: "target pixels",
                    expected: (n * hw).to_string(),
                    got: targets.len(),
                });
            }
            let logp = softmax_channels(&x, true)?;
            let mut total = 0.0;
            let mut count = 0usize;
            for b in 0..n {
                for p in 0..hw {
                    let Some(t) = targets[b * hw + p] else { continue };
                    if t >= c {
                        return Err(TensorError::Dimension {
                            op: OP,
                            dim: "target class",
                            expected: format!("< {c}"),
                            got: t,
                        });
                    }
                    total -= logp.data()[b * c * hw + t * hw + p];
                    count += 1;
                }
            }
            if count == 0 {
                return Err(TensorError::Invalid {
                    op: OP,
                    reason: "every pixel is ignored; the mean is undefined".into(),
                });
            }
            let probs = logp.data().iter().map(|v| v.exp()).collect::<Vec<_>>();
            (Tensor::scalar(total / count as f64), probs, count)
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            probs,
            targets: targets.to_vec(),
            count,
        };
        Ok(self.tape.push(value, op, self.requires_grad()))
    }
}

/// Numerically stable (log-)softmax over the channel axis.
pub(crate) fn softmax_channels(x: &Tensor, log: bool) -> Result<Tensor> {
    let (n, c, hw) = nchw_dims("softmax_channels", x.shape())?;
    if c < 2 {
        return Err(TensorError::Dimension {
            op: "softmax_channels",
            dim: "channels",
            expected: ">= 2".into(),
            got: c,
        });
    }
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for p in 0..hw {
            let base = b * c * hw + p;
            let max = (0..c).map(|ch| xd[base + ch * hw]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (xd[base + ch * hw] - max).exp()).sum();
            let lz = z.ln();
            for ch in 0..c {
                let i = base + ch * hw;
                out[i] = if log {
                    xd[i] - max - lz
                } else {
                    (xd[i] - max).exp() / z
                };
            }
        }
    }
    Ok(with_data(x, out))
}

impl Tensor {
    /// Channel softmax on a plain value (no tape).
    pub fn softmax_channels(&self) -> Result<Tensor> {
        check_finite("softmax_channels", self)?;
        softmax_channels(self, false)
    }
}
