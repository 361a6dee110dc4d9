//! Reverse-mode tape over [`Tensor`] values.
//!
//! Forward calls append nodes (storing the forward value); `backward`
//! replays the tape in reverse and accumulates vector-Jacobian products.
//! Gradient-free evaluation uses [`Tape::inference`], which binds every
//! leaf as a constant and skips gradient bookkeeping.

use crate::error::{DiffError, Result};
use crate::kernels as kn;
use crate::store::ParamStore;
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// rhs broadcast over the leading axes of lhs.
    AddBcast(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Clamp(NodeId, f64, f64),
    Linear {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    },
    MatMul(NodeId, NodeId),
    TransposeLast2(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        geom: kn::ConvGeom,
    },
    Deconv2d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        geom: kn::DeconvGeom,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormInfer {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    SoftmaxCausal(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Gradients keyed by parameter name, produced by [`Tape::backward`].
pub struct Gradients {
    by_name: HashMap<String, Tensor>,
    order: Vec<String>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    /// Gradient for `name`, or zeros when the parameter was unreachable
    /// from the loss.
    pub fn get_or_zeros(&self, name: &str, shape: &[usize]) -> Tensor {
        self.by_name
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Global L2 norm over all gradients, accumulated in registration
    /// order so the result is bit-reproducible.
    pub fn global_norm(&self) -> f64 {
        self.order
            .iter()
            .map(|name| {
                self.by_name[name]
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every gradient in place (used for norm clipping).
    pub fn scale_all(&mut self, factor: f64) {
        for t in self.by_name.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
    grad_enabled: bool,
}

impl Tape {
    /// Tape that records gradients for parameter leaves.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Gradient-free tape; `param` behaves like `constant`.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Batch statistics stashed by a training-mode batch norm node.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNormTrain { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, needs_grad: bool, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(DiffError::non_finite(op_name, "output contains NaN or Inf"));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            needs_grad: needs_grad && self.grad_enabled,
            op,
        });
        Ok(id)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── leaves ─────────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("constant", value, false, Op::Leaf)
    }

    /// Named differentiable leaf. Rebinding a name is an error.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.param_index.contains_key(name) {
            return Err(DiffError::invalid("param", format!("name '{name}' already bound")));
        }
        let id = self.push("param", value, true, Op::Leaf)?;
        self.params.push((name.to_string(), id));
        self.param_index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Binds every entry of a store; trainable entries become params when
    /// the tape records gradients, everything else binds as constants.
    pub fn bind_store(&mut self, store: &ParamStore) -> Result<HashMap<String, NodeId>> {
        let mut map = HashMap::new();
        for entry in store.iter() {
            let id = if entry.trainable && self.grad_enabled {
                self.param(&entry.name, entry.tensor.clone())?
            } else {
                self.constant(entry.tensor.clone())?
            };
            map.insert(entry.name.clone(), id);
        }
        Ok(map)
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        self.push("add", v, self.needs(a) || self.needs(b), Op::Add(a, b))
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`
    /// (a.shape must end with b.shape).
    pub fn add_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < sb.len() || &sa[sa.len() - sb.len()..] != sb.as_slice() {
            return Err(DiffError::shape(
                "add_bcast",
                format!("rhs {sb:?} is not a suffix of lhs {sa:?}"),
            ));
        }
        let chunk = self.value(b).len();
        let mut data = self.value(a).data().to_vec();
        for window in data.chunks_exact_mut(chunk) {
            for (x, y) in window.iter_mut().zip(self.value(b).data()) {
                *x += y;
            }
        }
        let v = Tensor::new(sa, data)?;
        self.push("add_bcast", v, self.needs(a) || self.needs(b), Op::AddBcast(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        )?;
        self.push("sub", v, self.needs(a) || self.needs(b), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        self.push("mul", v, self.needs(a) || self.needs(b), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        self.push("scale", v, self.needs(a), Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, self.needs(a), Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| -x);
        self.push("neg", v, self.needs(a), Op::Neg(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, self.needs(a), Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push("ln", v, self.needs(a), Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push("sigmoid", v, self.needs(a), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push("tanh", v, self.needs(a), Op::Tanh(a))
    }

    /// Leaky ReLU; the kink at zero takes the right-derivative (slope 1).
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x < 0.0 { slope * x } else { x });
        self.push("leaky_relu", v, self.needs(a), Op::LeakyRelu(a, slope))
    }

    /// Clamp to [lo, hi]; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(DiffError::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", v, self.needs(a), Op::Clamp(a, lo, hi))
    }

    // ── dense / matmul ─────────────────────────────────────────────────

    /// `x[B, din] @ w[dout, din]^T (+ bias[dout])`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 {
            return Err(DiffError::shape(
                "linear",
                format!("expected rank-2 inputs, got {sx:?} and {sw:?}"),
            ));
        }
        if sx[1] != sw[1] {
            return Err(DiffError::shape(
                "linear",
                format!("input dim {} != weight dim {}", sx[1], sw[1]),
            ));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [sw[0]] {
                return Err(DiffError::shape(
                    "linear",
                    format!("bias shape {:?} != [{}]", sb, sw[0]),
                ));
            }
        }
        let (batch, din, dout) = (sx[0], sx[1], sw[0]);
        let mut y = vec![0.0; batch * dout];
        kn::linear_fwd(
            batch,
            din,
            dout,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &mut y,
        );
        let needs = self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            "linear",
            Tensor::new(vec![batch, dout], y)?,
            needs,
            Op::Linear { x, w, bias },
        )
    }

    /// Rank-2 `[m,k]@[k,n]` or batched rank-3 `[g,m,k]@[g,k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (g, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => (1usize, *m, *k1, *n),
            ([g1, m, k1], [g2, k2, n]) if g1 == g2 && k1 == k2 => (*g1, *m, *k1, *n),
            _ => {
                return Err(DiffError::shape(
                    "matmul",
                    format!("incompatible shapes {sa:?} and {sb:?}"),
                ))
            }
        };
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            kn::matmul2(
                m,
                k,
                n,
                &self.value(a).data()[gi * m * k..(gi + 1) * m * k],
                &self.value(b).data()[gi * k * n..(gi + 1) * k * n],
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![g, m, n] };
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            self.needs(a) || self.needs(b),
            Op::MatMul(a, b),
        )
    }

    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(DiffError::shape("transpose_last2", format!("rank {} < 2", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mats: usize = s[..s.len() - 2].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for m in 0..mats {
            let off = m * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = x[off + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let lastn = shape.len();
        shape.swap(lastn - 2, lastn - 1);
        self.push(
            "transpose_last2",
            Tensor::new(shape, out)?,
            self.needs(a),
            Op::TransposeLast2(a),
        )
    }

    // ── convolutions ───────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(DiffError::shape(
                "conv2d",
                format!("expected rank-4 x and w, got {sx:?} and {sw:?}"),
            ));
        }
        if sx[1] != sw[1] {
            return Err(DiffError::shape(
                "conv2d",
                format!("input channels {} != weight channels {}", sx[1], sw[1]),
            ));
        }
        if self.shape(bias) != [sw[0]] {
            return Err(DiffError::shape(
                "conv2d",
                format!("bias shape {:?} != [{}]", self.shape(bias), sw[0]),
            ));
        }
        let (h, w_in, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        let eff_h = h + 2 * pad;
        let eff_w = w_in + 2 * pad;
        if eff_h < kh || (eff_h - kh) % stride != 0 || eff_w < kw || (eff_w - kw) % stride != 0 {
            return Err(DiffError::shape(
                "conv2d",
                format!(
                    "spatial dims {h}x{w_in} with pad {pad} are not exactly covered by kernel {kh}x{kw} stride {stride}"
                ),
            ));
        }
        let geom = kn::ConvGeom {
            b: sx[0],
            c_in: sx[1],
            h,
            w: w_in,
            c_out: sw[0],
            kh,
            kw,
            stride,
            pad,
            oh: (eff_h - kh) / stride + 1,
            ow: (eff_w - kw) / stride + 1,
        };
        let mut y = vec![0.0; geom.b * geom.c_out * geom.oh * geom.ow];
        kn::conv2d_fwd(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            &mut y,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        self.push(
            "conv2d",
            Tensor::new(vec![geom.b, geom.c_out, geom.oh, geom.ow], y)?,
            needs,
            Op::Conv2d { x, w, bias, geom },
        )
    }

    /// Transposed convolution. `w` is [c_in, c_out, kh, kw]; the output
    /// spatial size is `(in - 1) * stride + k - 2 * pad`.
    pub fn deconv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(DiffError::shape(
                "deconv2d",
                format!("expected rank-4 x and w, got {sx:?} and {sw:?}"),
            ));
        }
        if sx[1] != sw[0] {
            return Err(DiffError::shape(
                "deconv2d",
                format!("input channels {} != weight in-channels {}", sx[1], sw[0]),
            ));
        }
        if self.shape(bias) != [sw[1]] {
            return Err(DiffError::shape(
                "deconv2d",
                format!("bias shape {:?} != [{}]", self.shape(bias), sw[1]),
            ));
        }
        let (h, w_in, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        let oh = (h - 1) * stride + kh;
        let ow = (w_in - 1) * stride + kw;
        if oh < 2 * pad || ow < 2 * pad {
            return Err(DiffError::shape(
                "deconv2d",
                format!("pad {pad} exceeds output extent {oh}x{ow}"),
            ));
        }
        let geom = kn::DeconvGeom {
            b: sx[0],
            c_in: sx[1],
            h,
            w: w_in,
            c_out: sw[1],
            kh,
            kw,
            stride,
            pad,
            oh: oh - 2 * pad,
            ow: ow - 2 * pad,
        };
        let mut y = vec![0.0; geom.b * geom.c_out * geom.oh * geom.ow];
        kn::deconv2d_fwd(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            &mut y,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        self.push(
            "deconv2d",
            Tensor::new(vec![geom.b, geom.c_out, geom.oh, geom.ow], y)?,
            needs,
            Op::Deconv2d { x, w, bias, geom },
        )
    }

    // ── batch norm ─────────────────────────────────────────────────────

    fn bn_check(&self, op: &'static str, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(DiffError::shape(op, format!("expected rank-4 input, got {sx:?}")));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(DiffError::shape(
                op,
                format!(
                    "gamma {:?} / beta {:?} must both be [{}]",
                    self.shape(gamma),
                    self.shape(beta),
                    c
                ),
            ));
        }
        Ok((sx[0], c, sx[2] * sx[3]))
    }

    /// Training-mode batch norm: statistics over (B, H, W) per channel.
    /// The batch mean/var are stashed on the node for running-average
    /// updates (see [`Tape::bn_batch_stats`]).
    pub fn batchnorm2d_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (b, c, plane) = self.bn_check("batchnorm2d_train", x, gamma, beta)?;
        let mut y = vec![0.0; self.value(x).len()];
        let stats = kn::bn_train_fwd(
            b,
            c,
            plane,
            eps,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mut y,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        self.push(
            "batchnorm2d_train",
            Tensor::new(shape, y)?,
            needs,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: stats.mean,
                var: stats.var,
                inv_std: stats.inv_std,
            },
        )
    }

    /// Inference-mode batch norm: a per-channel affine map using the
    /// provided running statistics.
    pub fn batchnorm2d_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<NodeId> {
        let (b, c, plane) = self.bn_check("batchnorm2d_infer", x, gamma, beta)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(DiffError::shape(
                "batchnorm2d_infer",
                format!(
                    "running stats {:?}/{:?} must be [{}]",
                    running_mean.shape(),
                    running_var.shape(),
                    c
                ),
            ));
        }
        let mean = running_mean.data().to_vec();
        let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for p in 0..plane {
                    y[off + p] = (xs[off + p] - mean[ci]) * inv_std[ci] * gs[ci] + bs[ci];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        self.push(
            "batchnorm2d_infer",
            Tensor::new(shape, y)?,
            needs,
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        )
    }

    // ── softmax / structure ────────────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap();
        let rows = self.value(a).len() / d;
        let mut y = vec![0.0; self.value(a).len()];
        kn::softmax_fwd(rows, d, self.value(a).data(), &mut y);
        self.push("softmax", Tensor::new(s, y)?, self.needs(a), Op::Softmax(a))
    }

    /// Causal softmax on [..., L, L]: row i spans columns 0..=i.
    pub fn softmax_causal(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(DiffError::shape(
                "softmax_causal",
                format!("expected [..., L, L], got {s:?}"),
            ));
        }
        let l = s[s.len() - 1];
        let mats = self.value(a).len() / (l * l);
        let mut y = vec![0.0; self.value(a).len()];
        kn::softmax_causal_fwd(mats, l, self.value(a).data(), &mut y);
        self.push(
            "softmax_causal",
            Tensor::new(s, y)?,
            self.needs(a),
            Op::SoftmaxCausal(a),
        )
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(DiffError::invalid("concat", "no parts given"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(DiffError::shape(
                "concat",
                format!("axis {axis} out of range for rank {}", first.len()),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(DiffError::shape(
                    "concat",
                    format!("part shape {:?} incompatible with {:?} on axis {axis}", s, first),
                ));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let pa = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                let s0 = o * pa * inner;
                data[dst..dst + pa * inner].copy_from_slice(&src[s0..s0 + pa * inner]);
            }
            offset += pa;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            needs,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(DiffError::shape(
                "slice",
                format!("axis {axis} out of range for rank {}", s.len()),
            ));
        }
        if start + len > s[axis] || len == 0 {
            return Err(DiffError::shape(
                "slice",
                format!("range {start}..{} exceeds axis {axis} of size {}", start + len, s[axis]),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let s0 = (o * s[axis] + start) * inner;
            let d0 = o * len * inner;
            data[d0..d0 + len * inner].copy_from_slice(&src[s0..s0 + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        self.push(
            "slice",
            Tensor::new(shape, data)?,
            self.needs(x),
            Op::Slice { x, axis, start, len },
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).data().iter().sum::<f64>();
        self.push("sum_all", Tensor::scalar(v), self.needs(a), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).data().iter().sum::<f64>() / self.value(a).len() as f64;
        self.push("mean_all", Tensor::scalar(v), self.needs(a), Op::MeanAll(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        self.push("reshape", v, self.needs(a), Op::Reshape(a))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if perm.len() != s.len() {
            return Err(DiffError::shape(
                "permute",
                format!("perm {:?} does not match rank {}", perm, s.len()),
            ));
        }
        let mut seen = vec![false; s.len()];
        for &p in perm {
            if p >= s.len() || seen[p] {
                return Err(DiffError::invalid("permute", format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_copy(self.value(a).data(), &s, perm);
        self.push(
            "permute",
            Tensor::new(out_shape, data)?,
            self.needs(a),
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// parameter leaf that the loss reaches.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(DiffError::invalid("backward", "tape built in inference mode"));
        }
        if !self.value(loss).is_scalar() {
            return Err(DiffError::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut by_name = HashMap::new();
        let mut order = Vec::new();
        for (name, id) in &self.params {
            if let Some(g) = grads[id.0].take() {
                let t = Tensor::new(self.nodes[id.0].value.shape().to_vec(), g)?;
                if !t.all_finite() {
                    return Err(DiffError::non_finite("backward", format!("gradient of '{name}'")));
                }
                by_name.insert(name.clone(), t);
                order.push(name.clone());
            }
        }
        Ok(Gradients { by_name, order })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[target.0].value.len()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |d| add_into(d, g));
                self.accum(grads, *b, |d| add_into(d, g));
            }
            Op::AddBcast(a, b) => {
                self.accum(grads, *a, |d| add_into(d, g));
                let chunk = self.nodes[b.0].value.len();
                self.accum(grads, *b, |d| {
                    for window in g.chunks_exact(chunk) {
                        for (acc, v) in d.iter_mut().zip(window) {
                            *acc += v;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |d| add_into(d, g));
                self.accum(grads, *b, |d| {
                    for (acc, v) in d.iter_mut().zip(g) {
                        *acc -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                self.accum(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * f;
                    }
                });
            }
            Op::AddScalar(a) => self.accum(grads, *a, |d| add_into(d, g)),
            Op::Neg(a) => self.accum(grads, *a, |d| {
                for (acc, v) in d.iter_mut().zip(g) {
                    *acc -= v;
                }
            }),
            Op::Exp(a) => {
                let y = node.value.data();
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Ln(a) => {
                let x = self.nodes[a.0].value.data();
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x[i];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.nodes[a.0].value.data();
                let slope = *slope;
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * if x[i] < 0.0 { slope } else { 1.0 };
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.nodes[a.0].value.data();
                let (lo, hi) = (*lo, *hi);
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        if x[i] >= lo && x[i] <= hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Linear { x, w, bias } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (batch, din, dout) = (sx[0], sx[1], sw[0]);
                let (vx, vw) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                self.accum(grads, *x, |d| kn::linear_bwd_x(batch, din, dout, g, vw, d));
                self.accum(grads, *w, |d| kn::linear_bwd_w(batch, din, dout, vx, g, d, None));
                if let Some(b) = bias {
                    self.accum(grads, *b, |d| {
                        for row in g.chunks_exact(dout) {
                            for (acc, v) in d.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (gn, m, k, n) = if sa.len() == 2 {
                    (1usize, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                // dA = dC @ B^T
                self.accum(grads, *a, |d| {
                    for gi in 0..gn {
                        kn::gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g[gi * m * n..(gi + 1) * m * n],
                            n as isize,
                            1,
                            &vb[gi * k * n..(gi + 1) * k * n],
                            1,
                            n as isize,
                            1.0,
                            &mut d[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                });
                // dB = A^T @ dC
                self.accum(grads, *b, |d| {
                    for gi in 0..gn {
                        kn::gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &va[gi * m * k..(gi + 1) * m * k],
                            1,
                            k as isize,
                            &g[gi * m * n..(gi + 1) * m * n],
                            n as isize,
                            1,
                            1.0,
                            &mut d[gi * k * n..(gi + 1) * k * n],
                        );
                    }
                });
            }
            Op::TransposeLast2(a) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mats: usize = s[..s.len() - 2].iter().product();
                self.accum(grads, *a, |d| {
                    for m in 0..mats {
                        let off = m * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                d[off + j * r + i] += g[off + i * c + j];
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, bias, geom } => {
                let vx = self.nodes[x.0].value.data();
                let vw = self.nodes[w.0].value.data();
                let want_x = self.nodes[x.0].needs_grad;
                let want_w = self.nodes[w.0].needs_grad;
                let want_b = self.nodes[bias.0].needs_grad;
                let mut dx = want_x.then(|| vec![0.0; vx.len()]);
                let mut dw = want_w.then(|| vec![0.0; vw.len()]);
                let mut db = want_b.then(|| vec![0.0; geom.c_out]);
                kn::conv2d_bwd(geom, vx, vw, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    self.accum(grads, *x, |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, |d| add_into(d, &dw));
                }
                if let Some(db) = db {
                    self.accum(grads, *bias, |d| add_into(d, &db));
                }
            }
            Op::Deconv2d { x, w, bias, geom } => {
                let vx = self.nodes[x.0].value.data();
                let vw = self.nodes[w.0].value.data();
                let want_x = self.nodes[x.0].needs_grad;
                let want_w = self.nodes[w.0].needs_grad;
                let want_b = self.nodes[bias.0].needs_grad;
                let mut dx = want_x.then(|| vec![0.0; vx.len()]);
                let mut dw = want_w.then(|| vec![0.0; vw.len()]);
                let mut db = want_b.then(|| vec![0.0; geom.c_out]);
                kn::deconv2d_bwd(geom, vx, vw, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    self.accum(grads, *x, |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, |d| add_into(d, &dw));
                }
                if let Some(db) = db {
                    self.accum(grads, *bias, |d| add_into(d, &db));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                ..
            } => {
                let sx = self.nodes[x.0].value.shape();
                let (b, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                let vx = self.nodes[x.0].value.data();
                let vg = self.nodes[gamma.0].value.data();
                let want_x = self.nodes[x.0].needs_grad;
                let want_g = self.nodes[gamma.0].needs_grad;
                let want_b = self.nodes[beta.0].needs_grad;
                let mut dx = want_x.then(|| vec![0.0; vx.len()]);
                let mut dg = want_g.then(|| vec![0.0; c]);
                let mut db = want_b.then(|| vec![0.0; c]);
                kn::bn_train_bwd(
                    b,
                    c,
                    plane,
                    vx,
                    vg,
                    mean,
                    inv_std,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, |d| add_into(d, &dx));
                }
                if let Some(dg) = dg {
                    self.accum(grads, *gamma, |d| add_into(d, &dg));
                }
                if let Some(db) = db {
                    self.accum(grads, *beta, |d| add_into(d, &db));
                }
            }
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let sx = self.nodes[x.0].value.shape();
                let (b, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                let vx = self.nodes[x.0].value.data();
                let vg = self.nodes[gamma.0].value.data();
                self.accum(grads, *x, |d| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            let k = vg[ci] * inv_std[ci];
                            for p in 0..plane {
                                d[off + p] += g[off + p] * k;
                            }
                        }
                    }
                });
                self.accum(grads, *gamma, |d| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            for p in 0..plane {
                                d[ci] += g[off + p] * (vx[off + p] - mean[ci]) * inv_std[ci];
                            }
                        }
                    }
                });
                self.accum(grads, *beta, |d| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            for p in 0..plane {
                                d[ci] += g[off + p];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let s = node.value.shape();
                let d_last = *s.last().unwrap();
                let rows = node.value.len() / d_last;
                let y = node.value.data();
                self.accum(grads, *a, |d| kn::softmax_bwd(rows, d_last, y, g, d));
            }
            Op::SoftmaxCausal(a) => {
                let s = node.value.shape();
                let l = *s.last().unwrap();
                let mats = node.value.len() / (l * l);
                let y = node.value.data();
                self.accum(grads, *a, |d| kn::softmax_causal_bwd(mats, l, y, g, d));
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let pa = self.nodes[p.0].value.shape()[*axis];
                    self.accum(grads, p, |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * pa * inner;
                            for i in 0..pa * inner {
                                d[dst + i] += g[src + i];
                            }
                        }
                    });
                    offset += pa;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let in_shape = self.nodes[x.0].value.shape().to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let total = in_shape[*axis];
                self.accum(grads, *x, |d| {
                    for o in 0..outer {
                        let dst = (o * total + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            d[dst + i] += g[src + i];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                self.accum(grads, *a, |d| {
                    for v in d.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g[0] / n;
                self.accum(grads, *a, |d| {
                    for v in d.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Reshape(a) => self.accum(grads, *a, |d| add_into(d, g)),
            Op::Permute { x, perm } => {
                let in_shape = self.nodes[x.0].value.shape().to_vec();
                // Scatter: out[perm(idx)] came from in[idx], so walk the
                // output linearly and add into the permuted-back input.
                let inverse = invert_perm(perm);
                let out_shape = node.value.shape().to_vec();
                self.accum(grads, *x, |d| {
                    let back = permute_copy(g, &out_shape, &inverse);
                    debug_assert_eq!(back.len(), d.len());
                    let _ = &in_shape;
                    add_into(d, &back);
                });
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// out[i0', i1', ...] = in[idx] where the output axis j reads input axis
/// perm[j]. Plain strided gather.
fn permute_copy(data: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for j in 0..rank {
            src += idx[j] * in_strides[perm[j]];
        }
        *slot = data[src];
        for j in (0..rank).rev() {
            idx[j] += 1;
            if idx[j] < out_shape[j] {
                break;
            }
            idx[j] = 0;
        }
    }
    out
}
