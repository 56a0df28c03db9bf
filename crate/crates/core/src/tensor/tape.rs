//! Reverse-mode differentiation over a linear operation tape.
//!
//! Ops are recorded in topological order during the forward pass; `backward`
//! walks the tape once in reverse. Gradient buffers are only allocated for
//! nodes on a path from a trainable leaf to the loss.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sequences per work unit in the fused scan; fixed so the reduction tree
/// shape (and therefore the floating-point result) never depends on the
/// thread count.
const SCAN_CHUNK: usize = 512;

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: S },
    AddScalar { x: NodeId },
    Matmul { a: NodeId, b: NodeId, bias: Option<NodeId>, m: usize, k: usize, n: usize },
    Reshape { x: NodeId },
    TransposeLast2 { x: NodeId, outer: usize, rows: usize, cols: usize },
    SumAxis { x: NodeId, outer: usize, width: usize, inner: usize, mean: bool },
    MeanAll { x: NodeId },
    MulBroadcastLast { x: NodeId, g: NodeId, width: usize },
    MulBroadcastMid { x: NodeId, s: NodeId, rows: usize, mid: usize, width: usize },
    Relu { x: NodeId },
    Silu { x: NodeId },
    Softplus { x: NodeId },
    Exp { x: NodeId },
    Softmax { x: NodeId, outer: usize, width: usize, inner: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<S>, invstd: Vec<S>, training: bool },
    GroupedConv1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        rows: usize,
        groups: usize,
        c_in: usize,
        c_out: usize,
        len: usize,
        kw: usize,
    },
    CausalConvDw { x: NodeId, w: NodeId, b: NodeId, rows: usize, len: usize, ch: usize, kw: usize },
    SelectiveScan {
        x: NodeId,
        delta: NodeId,
        bmat: NodeId,
        cmat: NodeId,
        a: NodeId,
        d_skip: NodeId,
        rows: usize,
        len: usize,
        ch: usize,
        n_state: usize,
    },
    GatherTokens { x: NodeId, indices: Arc<Vec<usize>>, rows: usize, src_len: usize, k: usize, width: usize },
    ScatterTokens { y: NodeId, indices: Arc<Vec<usize>>, rows: usize, src_len: usize, k: usize, width: usize },
    CosineToCenter { x: NodeId, center: usize, rows: usize, tokens: usize, width: usize, norms: Vec<S> },
    ConcatLast { parts: Vec<NodeId>, widths: Vec<usize>, rows: usize },
    CrossEntropyWeighted { logits: NodeId, targets: Arc<Vec<usize>>, weights: Arc<Vec<S>>, weight_sum: S },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients returned by [`Tape::backward`], addressed by node id.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf that is known to participate in the loss.
    pub fn expect(&self, id: NodeId) -> &[S] {
        self.get(id).expect("no gradient recorded for node")
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Record a trainable leaf (a parameter).
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Record a constant leaf (inputs, precomputed graph matrices, ...).
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut out = vec![S::ZERO; self.value(a).numel()];
        kernels::map_binary(self.value(a).data(), self.value(b).data(), &mut out, |x, y| x + y);
        let t = Tensor::new(out, self.shape(a).to_vec())?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let mut out = vec![S::ZERO; self.value(a).numel()];
        kernels::map_binary(self.value(a).data(), self.value(b).data(), &mut out, |x, y| x - y);
        let t = Tensor::new(out, self.shape(a).to_vec())?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let mut out = vec![S::ZERO; self.value(a).numel()];
        kernels::map_binary(self.value(a).data(), self.value(b).data(), &mut out, |x, y| x * y);
        let t = Tensor::new(out, self.shape(a).to_vec())?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> Result<NodeId> {
        let mut out = vec![S::ZERO; self.value(x).numel()];
        kernels::map_unary(self.value(x).data(), &mut out, |v| v * factor);
        let t = Tensor::new(out, self.shape(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Scale { x, factor }, needs))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let mut out = vec![S::ZERO; self.value(x).numel()];
        kernels::map_unary(self.value(x).data(), &mut out, |v| v + c);
        let t = Tensor::new(out, self.shape(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::AddScalar { x }, needs))
    }

    // ── Activations ─────────────────────────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = vec![S::ZERO; self.value(x).numel()];
        kernels::map_unary(self.value(x).data(), &mut out, |v| v.maxs(S::ZERO));
        let t = Tensor::new(out, self.shape(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Relu { x }, needs))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = vec![S::ZERO; self.value(x).numel()];
        kernels::map_unary(self.value(x).data(), &mut out, |v| v * sigmoid(v));
        let t = Tensor::new(out, self.shape(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Silu { x }, needs))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = vec![S::ZERO; self.value(x).numel()];
        kernels::map_unary(self.value(x).data(), &mut out, softplus);
        let t = Tensor::new(out, self.shape(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softplus { x }, needs))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = vec![S::ZERO; self.value(x).numel()];
        kernels::map_unary(self.value(x).data(), &mut out, |v| v.exp());
        let t = Tensor::new(out, self.shape(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Exp { x }, needs))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// a[m,k] · b[k,n], optionally + bias[n] broadcast over rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.linear(a, b, None)
    }

    pub fn linear(&mut self, a: NodeId, b: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions do not agree for shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if let Some(bias) = bias {
            if self.shape(bias) != [n] {
                return Err(Error::Dimension(format!(
                    "linear: bias shape {:?} does not match output width {n}",
                    self.shape(bias)
                )));
            }
        }
        let mut out = vec![S::ZERO; m * n];
        kernels::gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            bias.map(|id| self.value(id).data()),
            m,
            k,
            n,
            &mut out,
        );
        let t = Tensor::new(out, vec![m, n])?;
        let needs = self.needs(a) || self.needs(b) || bias.map_or(false, |id| self.needs(id));
        Ok(self.push(t, Op::Matmul { a, b, bias, m, k, n }, needs))
    }

    // ── Shape manipulation ──────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// [..., r, c] → [..., c, r].
    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("transpose_last2 needs rank ≥ 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let outer: usize = shape[..shape.len() - 2].iter().product();
        let src = self.value(x).data();
        let mut out = vec![S::ZERO; src.len()];
        for o in 0..outer {
            let base = o * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[base + c * rows + r] = src[base + r * cols + c];
                }
            }
        }
        let mut new_shape = shape.clone();
        let l = new_shape.len();
        new_shape.swap(l - 2, l - 1);
        let t = Tensor::new(out, new_shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::TransposeLast2 { x, outer, rows, cols }, needs))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Dimension(format!("reduce axis {axis} invalid for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let width = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![S::ZERO; outer * inner];
        let scale = if mean { S::ONE / S::from_f64(width as f64) } else { S::ONE };
        for o in 0..outer {
            for a in 0..width {
                let base = (o * width + a) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src[base..base + inner].iter()) {
                    *d += v;
                }
            }
        }
        if mean {
            for v in out.iter_mut() {
                *v *= scale;
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let t = Tensor::new(out, new_shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SumAxis { x, outer, width, inner, mean }, needs))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x).data();
        let mut acc = S::ZERO;
        for &v in src {
            acc += v;
        }
        let t = Tensor::scalar(acc / S::from_f64(src.len() as f64));
        let needs = self.needs(x);
        Ok(self.push(t, Op::MeanAll { x }, needs))
    }

    // ── Broadcast products ──────────────────────────────────────────

    /// x[..., w] ⊙ g[..., 1]: scales each trailing row of x by one value.
    pub fn mul_broadcast_last(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(g).to_vec());
        let ok = sx.len() == sg.len()
            && sg[sg.len() - 1] == 1
            && sx[..sx.len() - 1] == sg[..sg.len() - 1];
        if !ok {
            return Err(Error::Dimension(format!(
                "mul_broadcast_last: shapes {sx:?} and {sg:?} are incompatible"
            )));
        }
        let width = sx[sx.len() - 1];
        let xs = self.value(x).data();
        let gs = self.value(g).data();
        let mut out = vec![S::ZERO; xs.len()];
        for (i, chunk) in out.chunks_mut(width).enumerate() {
            let gv = gs[i];
            for (o, &xv) in chunk.iter_mut().zip(xs[i * width..(i + 1) * width].iter()) {
                *o = xv * gv;
            }
        }
        let t = Tensor::new(out, sx)?;
        let needs = self.needs(x) || self.needs(g);
        Ok(self.push(t, Op::MulBroadcastLast { x, g, width }, needs))
    }

    /// x[r, m, w] ⊙ s[r, 1, w]: broadcasts s over the middle axis.
    pub fn mul_broadcast_mid(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        let ok = sx.len() == 3 && ss.len() == 3 && ss[0] == sx[0] && ss[1] == 1 && ss[2] == sx[2];
        if !ok {
            return Err(Error::Dimension(format!(
                "mul_broadcast_mid: shapes {sx:?} and {ss:?} are incompatible"
            )));
        }
        let (rows, mid, width) = (sx[0], sx[1], sx[2]);
        let xs = self.value(x).data();
        let svals = self.value(s).data();
        let mut out = vec![S::ZERO; xs.len()];
        for r in 0..rows {
            let srow = &svals[r * width..(r + 1) * width];
            for m in 0..mid {
                let base = (r * mid + m) * width;
                for j in 0..width {
                    out[base + j] = xs[base + j] * srow[j];
                }
            }
        }
        let t = Tensor::new(out, sx)?;
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(t, Op::MulBroadcastMid { x, s, rows, mid, width }, needs))
    }

    // ── Softmax ─────────────────────────────────────────────────────

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Dimension(format!("softmax axis {axis} invalid for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let width = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![S::ZERO; src.len()];
        if inner == 1 {
            kernels::softmax_rows(src, outer, width, &mut out);
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * width + a) * inner + i;
                    let mut mx = S::neg_infinity();
                    for a in 0..width {
                        mx = mx.maxs(src[at(a)]);
                    }
                    let mut denom = S::ZERO;
                    for a in 0..width {
                        let e = (src[at(a)] - mx).exp();
                        out[at(a)] = e;
                        denom += e;
                    }
                    for a in 0..width {
                        out[at(a)] /= denom;
                    }
                }
            }
        }
        let t = Tensor::new(out, shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax { x, outer, width, inner }, needs))
    }

    // ── Batch normalization ─────────────────────────────────────────

    /// Normalizes x[B, f]. Training mode uses batch statistics and returns
    /// them (biased variance) so the caller can update its running state;
    /// eval mode normalizes with the provided running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
        training: bool,
    ) -> Result<(NodeId, Option<(Vec<S>, Vec<S>)>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("batch_norm expects [B, features], got {shape:?}")));
        }
        let (b, f) = (shape[0], shape[1]);
        if training && b < 2 {
            return Err(Error::Contract(format!(
                "batch-size error: batch_norm needs B ≥ 2 in training mode, got B = {b}"
            )));
        }
        if self.shape(gamma) != [f] || self.shape(beta) != [f] || running_mean.len() != f || running_var.len() != f {
            return Err(Error::Dimension(format!("batch_norm parameter widths do not match features {f}")));
        }
        let src = self.value(x).data();
        let (mean, var): (Vec<S>, Vec<S>) = if training {
            let inv_b = S::ONE / S::from_f64(b as f64);
            let mut mean = vec![S::ZERO; f];
            for row in src.chunks(f) {
                for (m, &v) in mean.iter_mut().zip(row.iter()) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_b;
            }
            let mut var = vec![S::ZERO; f];
            for row in src.chunks(f) {
                for ((vv, &v), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                    let d = v - m;
                    *vv += d * d;
                }
            }
            for vv in var.iter_mut() {
                *vv *= inv_b;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let invstd: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![S::ZERO; src.len()];
        for (orow, xrow) in out.chunks_mut(f).zip(src.chunks(f)) {
            for j in 0..f {
                orow[j] = (xrow[j] - mean[j]) * invstd[j] * gs[j] + bs[j];
            }
        }
        let t = Tensor::new(out, shape)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = if training { Some((mean.clone(), var)) } else { None };
        let node = self.push(t, Op::BatchNorm { x, gamma, beta, mean, invstd, training }, needs);
        Ok((node, stats))
    }

    // ── Convolutions ────────────────────────────────────────────────

    /// Length-preserving grouped conv; output channels in group g depend
    /// only on input channels in group g. Kernel width must be odd.
    pub fn grouped_conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, groups: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 {
            return Err(Error::Dimension(format!(
                "grouped_conv1d expects x [rows, ch, len] and w [out_ch, c_in, kw], got {sx:?} and {sw:?}"
            )));
        }
        let (rows, ch, len) = (sx[0], sx[1], sx[2]);
        if groups == 0 || ch % groups != 0 {
            return Err(Error::Config(format!(
                "grouped_conv1d: {ch} input channels are not divisible into {groups} groups"
            )));
        }
        let c_in = ch / groups;
        let (out_ch, w_cin, kw) = (sw[0], sw[1], sw[2]);
        if w_cin != c_in || out_ch % groups != 0 {
            return Err(Error::Config(format!(
                "grouped_conv1d: weight shape {sw:?} incompatible with {groups} groups of {c_in} channels"
            )));
        }
        if kw % 2 == 0 {
            return Err(Error::Contract(format!("grouped_conv1d requires an odd kernel width, got {kw}")));
        }
        let c_out = out_ch / groups;
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(Error::Dimension(format!(
                    "grouped_conv1d bias shape {:?} does not match {out_ch} output channels",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![S::ZERO; rows * out_ch * len];
        kernels::grouped_conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|id| self.value(id).data()),
            rows,
            groups,
            c_in,
            c_out,
            len,
            kw,
            &mut out,
        );
        let t = Tensor::new(out, vec![rows, out_ch, len])?;
        let needs = self.needs(x) || self.needs(w) || b.map_or(false, |id| self.needs(id));
        Ok(self.push(t, Op::GroupedConv1d { x, w, b, rows, groups, c_in, c_out, len, kw }, needs))
    }

    /// Causal depthwise conv over x[rows, len, ch], left-padded so step t
    /// only sees steps ≤ t.
    pub fn causal_depthwise_conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] {
            return Err(Error::Dimension(format!(
                "causal conv expects x [rows, len, ch] and w [ch, kw], got {sx:?} and {sw:?}"
            )));
        }
        let (rows, len, ch) = (sx[0], sx[1], sx[2]);
        let kw = sw[1];
        if self.shape(b) != [ch] {
            return Err(Error::Dimension(format!("causal conv bias must be [{ch}]")));
        }
        let mut out = vec![S::ZERO; rows * len * ch];
        kernels::causal_depthwise_conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            rows,
            len,
            ch,
            kw,
            &mut out,
        );
        let t = Tensor::new(out, sx)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, Op::CausalConvDw { x, w, b, rows, len, ch, kw }, needs))
    }

    // ── Selective scan (fused) ──────────────────────────────────────

    /// For each of `rows` independent sequences:
    ///   h_t = exp(Δ_t ⊙ A) ⊙ h_{t−1} + Δ_t·B_t·x_t,   y_t = ⟨C_t, h_t⟩ + D ⊙ x_t
    ///
    /// x, delta: [rows, len, ch]; bmat, cmat: [rows, len, n]; a: [ch, n];
    /// d_skip: [ch]. The backward pass recomputes each sequence's hidden
    /// states instead of saving them.
    pub fn selective_scan(
        &mut self,
        x: NodeId,
        delta: NodeId,
        bmat: NodeId,
        cmat: NodeId,
        a: NodeId,
        d_skip: NodeId,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Dimension(format!("selective_scan expects x [rows, len, ch], got {sx:?}")));
        }
        let (rows, len, ch) = (sx[0], sx[1], sx[2]);
        if len < 1 {
            return Err(Error::Contract("selective_scan requires seq ≥ 1".into()));
        }
        self.same_shape(x, delta, "selective_scan delta")?;
        let sb = self.shape(bmat).to_vec();
        if sb.len() != 3 || sb[0] != rows || sb[1] != len {
            return Err(Error::Dimension(format!("selective_scan B shape {sb:?} incompatible with x {sx:?}")));
        }
        let n_state = sb[2];
        self.same_shape(bmat, cmat, "selective_scan C")?;
        if self.shape(a) != [ch, n_state] || self.shape(d_skip) != [ch] {
            return Err(Error::Dimension(format!(
                "selective_scan A must be [{ch}, {n_state}] and D [{ch}], got {:?} and {:?}",
                self.shape(a),
                self.shape(d_skip)
            )));
        }
        let mut out = vec![S::ZERO; rows * len * ch];
        scan_forward(
            self.value(x).data(),
            self.value(delta).data(),
            self.value(bmat).data(),
            self.value(cmat).data(),
            self.value(a).data(),
            self.value(d_skip).data(),
            rows,
            len,
            ch,
            n_state,
            &mut out,
        );
        let t = Tensor::new(out, sx)?;
        let needs = self.needs(x)
            || self.needs(delta)
            || self.needs(bmat)
            || self.needs(cmat)
            || self.needs(a)
            || self.needs(d_skip);
        Ok(self.push(t, Op::SelectiveScan { x, delta, bmat, cmat, a, d_skip, rows, len, ch, n_state }, needs))
    }

    // ── Token gather/scatter ────────────────────────────────────────

    /// out[r, j, :] = x[r, indices[r·k + j], :]. Indices must be strictly
    /// increasing within each row.
    pub fn gather_tokens(&mut self, x: NodeId, indices: Arc<Vec<usize>>, k: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Dimension(format!("gather_tokens expects [rows, len, width], got {sx:?}")));
        }
        let (rows, src_len, width) = (sx[0], sx[1], sx[2]);
        if indices.len() != rows * k {
            return Err(Error::Contract(format!(
                "gather_tokens: {} indices supplied for {rows} rows × k = {k}",
                indices.len()
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![S::ZERO; rows * k * width];
        for r in 0..rows {
            for j in 0..k {
                let token = indices[r * k + j];
                debug_assert!(token < src_len);
                let from = (r * src_len + token) * width;
                let to = (r * k + j) * width;
                out[to..to + width].copy_from_slice(&src[from..from + width]);
            }
        }
        let t = Tensor::new(out, vec![rows, k, width])?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::GatherTokens { x, indices, rows, src_len, k, width }, needs))
    }

    /// Inverse placement: out[r, indices[r·k + j], :] = y[r, j, :], zeros
    /// everywhere else (the transposed-mask scatter).
    pub fn scatter_tokens(&mut self, y: NodeId, indices: Arc<Vec<usize>>, src_len: usize) -> Result<NodeId> {
        let sy = self.shape(y).to_vec();
        if sy.len() != 3 {
            return Err(Error::Dimension(format!("scatter_tokens expects [rows, k, width], got {sy:?}")));
        }
        let (rows, k, width) = (sy[0], sy[1], sy[2]);
        if indices.len() != rows * k {
            return Err(Error::Contract(format!(
                "scatter_tokens: {} indices supplied for {rows} rows × k = {k}",
                indices.len()
            )));
        }
        let src = self.value(y).data();
        let mut out = vec![S::ZERO; rows * src_len * width];
        for r in 0..rows {
            for j in 0..k {
                let token = indices[r * k + j];
                debug_assert!(token < src_len);
                let from = (r * k + j) * width;
                let to = (r * src_len + token) * width;
                out[to..to + width].copy_from_slice(&src[from..from + width]);
            }
        }
        let t = Tensor::new(out, vec![rows, src_len, width])?;
        let needs = self.needs(y);
        Ok(self.push(t, Op::ScatterTokens { y, indices, rows, src_len, k, width }, needs))
    }

    // ── Cosine similarity to a fixed center token ───────────────────

    /// x[rows, tokens, width] → [rows, tokens]; each token's cosine
    /// similarity to the token at `center`. Norms below 1e-12 are clamped
    /// (the degenerate-token case) and a warning is logged.
    pub fn cosine_to_center(&mut self, x: NodeId, center: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Dimension(format!("cosine_to_center expects [rows, tokens, width], got {sx:?}")));
        }
        let (rows, tokens, width) = (sx[0], sx[1], sx[2]);
        if center >= tokens {
            return Err(Error::Contract(format!("center index {center} out of {tokens} tokens")));
        }
        let eps = S::from_f64(1e-12);
        let src = self.value(x).data();
        let mut out = vec![S::ZERO; rows * tokens];
        let mut norms = vec![S::ZERO; rows * tokens];
        let mut degenerate = 0usize;
        for r in 0..rows {
            let row = &src[r * tokens * width..(r + 1) * tokens * width];
            for i in 0..tokens {
                let mut sq = S::ZERO;
                for &v in &row[i * width..(i + 1) * width] {
                    sq += v * v;
                }
                let nrm = sq.sqrt();
                if nrm < eps {
                    degenerate += 1;
                }
                norms[r * tokens + i] = nrm.maxs(eps);
            }
            let cvec = &row[center * width..(center + 1) * width];
            let cnorm = norms[r * tokens + center];
            for i in 0..tokens {
                let mut dot = S::ZERO;
                for (a, b) in row[i * width..(i + 1) * width].iter().zip(cvec.iter()) {
                    dot += *a * *b;
                }
                out[r * tokens + i] = dot / (norms[r * tokens + i] * cnorm);
            }
        }
        if degenerate > 0 {
            log::warn!("cosine_to_center: {degenerate} zero-norm tokens clamped to 1e-12");
        }
        let t = Tensor::new(out, vec![rows, tokens])?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::CosineToCenter { x, center, rows, tokens, width, norms }, needs))
    }

    // ── Concatenation ───────────────────────────────────────────────

    /// Concatenates 2-D inputs along the feature axis.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_last: no inputs".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Dimension(format!(
                    "concat_last: input {:?} incompatible with {rows} rows",
                    s
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![S::ZERO; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let t = Tensor::new(out, vec![rows, total])?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatLast { parts: parts.to_vec(), widths, rows }, needs))
    }

    // ── Weighted cross-entropy ──────────────────────────────────────

    /// Mean over the batch of w_{yᵢ}·(−log softmax(logitsᵢ)[yᵢ]), normalized
    /// by the mean batch weight. Stable log-sum-exp.
    pub fn cross_entropy_weighted(
        &mut self,
        logits: NodeId,
        targets: Arc<Vec<usize>>,
        class_weights: Arc<Vec<S>>,
    ) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("cross entropy expects logits [B, K], got {s:?}")));
        }
        let (b, k) = (s[0], s[1]);
        if targets.len() != b {
            return Err(Error::Data(format!("{} targets for batch of {b}", targets.len())));
        }
        if class_weights.len() != k {
            return Err(Error::Config(format!("{} class weights for {k} classes", class_weights.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Data(format!("target class {bad} out of range [0, {k})")));
        }
        let src = self.value(logits).data();
        let mut weight_sum = S::ZERO;
        let mut total = S::ZERO;
        for (i, row) in src.chunks(k).enumerate() {
            let y = targets[i];
            let w = class_weights[y];
            let mut mx = S::neg_infinity();
            for &v in row {
                mx = mx.maxs(v);
            }
            let mut lse = S::ZERO;
            for &v in row {
                lse += (v - mx).exp();
            }
            let log_prob = row[y] - mx - lse.ln();
            total += w * (-log_prob);
            weight_sum += w;
        }
        let t = Tensor::scalar(total / weight_sum);
        let needs = self.needs(logits);
        Ok(self.push(t, Op::CrossEntropyWeighted { logits, targets, weights: class_weights, weight_sum }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Propagates ∂loss/∂node to every node on a trainable path. The loss
    /// must be scalar; calling backward twice on one tape is rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.backward_done {
            return Err(Error::Contract("repeated backward without reset is rejected".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = grads[i].take().unwrap();
            self.backprop_node(i, &grad, &mut grads);
            // Leaves keep their gradient; interior buffers are dropped as we
            // pass them to keep peak memory at roughly one live grad per op.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], id: NodeId, update: impl FnOnce(&mut [S])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let buf = grads[id.0].get_or_insert_with(|| vec![S::ZERO; self.nodes[id.0].value.numel()]);
        update(buf);
    }

    fn backprop_node(&self, i: usize, grad: &[S], grads: &mut [Option<Vec<S>>]) {
        // Clones of op metadata are cheap (ids + small vectors behind Arc).
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                self.accumulate(grads, a, |g| add_into(g, grad));
                self.accumulate(grads, b, |g| add_into(g, grad));
            }

            Op::Sub { a, b } => {
                self.accumulate(grads, a, |g| add_into(g, grad));
                self.accumulate(grads, b, |g| {
                    for (o, &v) in g.iter_mut().zip(grad.iter()) {
                        *o -= v;
                    }
                });
            }

            Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |g| {
                    for ((o, &gv), &x) in g.iter_mut().zip(grad.iter()).zip(bv.iter()) {
                        *o += gv * x;
                    }
                });
                self.accumulate(grads, b, |g| {
                    for ((o, &gv), &x) in g.iter_mut().zip(grad.iter()).zip(av.iter()) {
                        *o += gv * x;
                    }
                });
            }

            Op::Scale { x, factor } => {
                self.accumulate(grads, x, |g| {
                    for (o, &v) in g.iter_mut().zip(grad.iter()) {
                        *o += v * factor;
                    }
                });
            }

            Op::AddScalar { x } => {
                self.accumulate(grads, x, |g| add_into(g, grad));
            }

            Op::Matmul { a, b, bias, m, k, n } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |g| {
                    // dA += dC · Bᵀ
                    let mut scratch = vec![S::ZERO; m * k];
                    kernels::gemm_nt(grad, bv, m, n, k, &mut scratch);
                    add_into(g, &scratch);
                });
                self.accumulate(grads, b, |g| {
                    // dB += Aᵀ · dC (accumulating kernel)
                    kernels::gemm_tn_accumulate(av, grad, m, k, n, g);
                });
                if let Some(bias) = bias {
                    self.accumulate(grads, bias, |g| {
                        kernels::column_sums_accumulate(grad, m, n, g);
                    });
                }
            }

            Op::Reshape { x } => {
                self.accumulate(grads, x, |g| add_into(g, grad));
            }

            Op::TransposeLast2 { x, outer, rows, cols } => {
                self.accumulate(grads, x, |g| {
                    // grad has shape [..., cols, rows]; transpose back.
                    for o in 0..outer {
                        let base = o * rows * cols;
                        for c in 0..cols {
                            for r in 0..rows {
                                g[base + r * cols + c] += grad[base + c * rows + r];
                            }
                        }
                    }
                });
            }

            Op::SumAxis { x, outer, width, inner, mean } => {
                let scale = if mean { S::ONE / S::from_f64(width as f64) } else { S::ONE };
                self.accumulate(grads, x, |g| {
                    for o in 0..outer {
                        for a in 0..width {
                            let base = (o * width + a) * inner;
                            for j in 0..inner {
                                g[base + j] += grad[o * inner + j] * scale;
                            }
                        }
                    }
                });
            }

            Op::MeanAll { x } => {
                let n = self.value(x).numel();
                let gv = grad[0] / S::from_f64(n as f64);
                self.accumulate(grads, x, |g| {
                    for o in g.iter_mut() {
                        *o += gv;
                    }
                });
            }

            Op::MulBroadcastLast { x, g: gate, width } => {
                let xv = self.value(x).data();
                let gv = self.value(gate).data();
                self.accumulate(grads, x, |g| {
                    for (i, chunk) in g.chunks_mut(width).enumerate() {
                        let gate_v = gv[i];
                        for (o, &d) in chunk.iter_mut().zip(grad[i * width..(i + 1) * width].iter()) {
                            *o += d * gate_v;
                        }
                    }
                });
                self.accumulate(grads, gate, |g| {
                    for (i, o) in g.iter_mut().enumerate() {
                        let mut acc = S::ZERO;
                        for j in 0..width {
                            acc += grad[i * width + j] * xv[i * width + j];
                        }
                        *o += acc;
                    }
                });
            }

            Op::MulBroadcastMid { x, s, rows, mid, width } => {
                let xv = self.value(x).data();
                let sv = self.value(s).data();
                self.accumulate(grads, x, |g| {
                    for r in 0..rows {
                        let srow = &sv[r * width..(r + 1) * width];
                        for m in 0..mid {
                            let base = (r * mid + m) * width;
                            for j in 0..width {
                                g[base + j] += grad[base + j] * srow[j];
                            }
                        }
                    }
                });
                self.accumulate(grads, s, |g| {
                    for r in 0..rows {
                        let gout = &mut g[r * width..(r + 1) * width];
                        for m in 0..mid {
                            let base = (r * mid + m) * width;
                            for j in 0..width {
                                gout[j] += grad[base + j] * xv[base + j];
                            }
                        }
                    }
                });
            }

            Op::Relu { x } => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(grad.iter()).zip(xv.iter()) {
                        if v > S::ZERO {
                            *o += d;
                        }
                    }
                });
            }

            Op::Silu { x } => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(grad.iter()).zip(xv.iter()) {
                        let s = sigmoid(v);
                        *o += d * s * (S::ONE + v * (S::ONE - s));
                    }
                });
            }

            Op::Softplus { x } => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(grad.iter()).zip(xv.iter()) {
                        *o += d * sigmoid(v);
                    }
                });
            }

            Op::Exp { x } => {
                let yv = self.value(NodeId(i)).data();
                self.accumulate(grads, x, |g| {
                    for ((o, &d), &y) in g.iter_mut().zip(grad.iter()).zip(yv.iter()) {
                        *o += d * y;
                    }
                });
            }

            Op::Softmax { x, outer, width, inner } => {
                let yv = self.value(NodeId(i)).data();
                self.accumulate(grads, x, |g| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |a: usize| (o * width + a) * inner + j;
                            let mut dot = S::ZERO;
                            for a in 0..width {
                                dot += grad[at(a)] * yv[at(a)];
                            }
                            for a in 0..width {
                                g[at(a)] += yv[at(a)] * (grad[at(a)] - dot);
                            }
                        }
                    }
                });
            }

            Op::BatchNorm { x, gamma, beta, mean, invstd, training } => {
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let f = mean.len();
                let b = xv.len() / f;
                // xhat recomputed from the saved statistics.
                let xhat = |bi: usize, j: usize| (xv[bi * f + j] - mean[j]) * invstd[j];
                self.accumulate(grads, gamma, |g| {
                    for j in 0..f {
                        let mut acc = S::ZERO;
                        for bi in 0..b {
                            acc += grad[bi * f + j] * xhat(bi, j);
                        }
                        g[j] += acc;
                    }
                });
                self.accumulate(grads, beta, |g| {
                    kernels::column_sums_accumulate(grad, b, f, g);
                });
                self.accumulate(grads, x, |g| {
                    if training {
                        let bf = S::from_f64(b as f64);
                        for j in 0..f {
                            let mut sum_dxhat = S::ZERO;
                            let mut sum_dxhat_xhat = S::ZERO;
                            for bi in 0..b {
                                let dxh = grad[bi * f + j] * gv[j];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat(bi, j);
                            }
                            for bi in 0..b {
                                let dxh = grad[bi * f + j] * gv[j];
                                g[bi * f + j] +=
                                    invstd[j] / bf * (bf * dxh - sum_dxhat - xhat(bi, j) * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for bi in 0..b {
                            for j in 0..f {
                                g[bi * f + j] += grad[bi * f + j] * gv[j] * invstd[j];
                            }
                        }
                    }
                });
            }

            Op::GroupedConv1d { x, w, b, rows, groups, c_in, c_out, len, kw } => {
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let half = (kw / 2) as isize;
                let row_in = groups * c_in * len;
                let row_out = groups * c_out * len;
                self.accumulate(grads, x, |g| {
                    let one = |gx: &mut [S], grow: &[S]| {
                        for gi in 0..groups {
                            for co in 0..c_out {
                                let oc = gi * c_out + co;
                                for t in 0..len {
                                    let d = grow[oc * len + t];
                                    for ci in 0..c_in {
                                        let xb = (gi * c_in + ci) * len;
                                        let wb = (oc * c_in + ci) * kw;
                                        for kk in 0..kw {
                                            let src = t as isize + kk as isize - half;
                                            if src >= 0 && (src as usize) < len {
                                                gx[xb + src as usize] += wv[wb + kk] * d;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    };
                    if rows >= 256 {
                        g.par_chunks_mut(row_in)
                            .zip(grad.par_chunks(row_out))
                            .for_each(|(gx, grow)| one(gx, grow));
                    } else {
                        for (gx, grow) in g.chunks_mut(row_in).zip(grad.chunks(row_out)) {
                            one(gx, grow);
                        }
                    }
                });
                self.accumulate(grads, w, |g| {
                    // Each output channel owns its weight slice and walks the
                    // rows in order: deterministic for any thread count.
                    g.par_chunks_mut(c_in * kw).enumerate().for_each(|(oc, gw)| {
                        let gi = oc / c_out;
                        for r in 0..rows {
                            let xrow = &xv[r * row_in..(r + 1) * row_in];
                            let grow = &grad[r * row_out..(r + 1) * row_out];
                            for t in 0..len {
                                let d = grow[oc * len + t];
                                for ci in 0..c_in {
                                    let xb = (gi * c_in + ci) * len;
                                    for kk in 0..kw {
                                        let src = t as isize + kk as isize - half;
                                        if src >= 0 && (src as usize) < len {
                                            gw[ci * kw + kk] += xrow[xb + src as usize] * d;
                                        }
                                    }
                                }
                            }
                        }
                    });
                });
                if let Some(b) = b {
                    self.accumulate(grads, b, |g| {
                        for (oc, gb) in g.iter_mut().enumerate() {
                            let mut acc = S::ZERO;
                            for r in 0..rows {
                                let base = r * row_out + oc * len;
                                for t in 0..len {
                                    acc += grad[base + t];
                                }
                            }
                            *gb += acc;
                        }
                    });
                }
            }

            Op::CausalConvDw { x, w, b, rows, len, ch, kw } => {
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let stride = len * ch;
                self.accumulate(grads, x, |g| {
                    let one = |gx: &mut [S], grow: &[S]| {
                        for t in 0..len {
                            for c in 0..ch {
                                let d = grow[t * ch + c];
                                for kk in 0..kw {
                                    let src = t as isize - (kw - 1 - kk) as isize;
                                    if src >= 0 {
                                        gx[src as usize * ch + c] += wv[c * kw + kk] * d;
                                    }
                                }
                            }
                        }
                    };
                    if rows >= 256 {
                        g.par_chunks_mut(stride).zip(grad.par_chunks(stride)).for_each(|(gx, gr)| one(gx, gr));
                    } else {
                        for (gx, gr) in g.chunks_mut(stride).zip(grad.chunks(stride)) {
                            one(gx, gr);
                        }
                    }
                });
                self.accumulate(grads, w, |g| {
                    g.par_chunks_mut(kw).enumerate().for_each(|(c, gw)| {
                        for r in 0..rows {
                            let xrow = &xv[r * stride..(r + 1) * stride];
                            let grow = &grad[r * stride..(r + 1) * stride];
                            for t in 0..len {
                                let d = grow[t * ch + c];
                                for kk in 0..kw {
                                    let src = t as isize - (kw - 1 - kk) as isize;
                                    if src >= 0 {
                                        gw[kk] += xrow[src as usize * ch + c] * d;
                                    }
                                }
                            }
                        }
                    });
                });
                self.accumulate(grads, b, |g| {
                    for (c, gb) in g.iter_mut().enumerate() {
                        let mut acc = S::ZERO;
                        for r in 0..rows {
                            for t in 0..len {
                                acc += grad[(r * len + t) * ch + c];
                            }
                        }
                        *gb += acc;
                    }
                });
            }

            Op::SelectiveScan { x, delta, bmat, cmat, a, d_skip, rows, len, ch, n_state } => {
                let ctx = ScanBackwardCtx {
                    x: self.value(x).data(),
                    delta: self.value(delta).data(),
                    bmat: self.value(bmat).data(),
                    cmat: self.value(cmat).data(),
                    a: self.value(a).data(),
                    d_skip: self.value(d_skip).data(),
                    rows,
                    len,
                    ch,
                    n_state,
                };
                let mut dx = vec![S::ZERO; rows * len * ch];
                let mut ddelta = vec![S::ZERO; rows * len * ch];
                let mut db = vec![S::ZERO; rows * len * n_state];
                let mut dc = vec![S::ZERO; rows * len * n_state];
                let (da, dd) = scan_backward(&ctx, grad, &mut dx, &mut ddelta, &mut db, &mut dc);
                self.accumulate(grads, x, |g| add_into(g, &dx));
                self.accumulate(grads, delta, |g| add_into(g, &ddelta));
                self.accumulate(grads, bmat, |g| add_into(g, &db));
                self.accumulate(grads, cmat, |g| add_into(g, &dc));
                self.accumulate(grads, a, |g| add_into(g, &da));
                self.accumulate(grads, d_skip, |g| add_into(g, &dd));
            }

            Op::GatherTokens { x, indices, rows, src_len, k, width } => {
                self.accumulate(grads, x, |g| {
                    let one = |gx: &mut [S], r: usize| {
                        for j in 0..k {
                            let token = indices[r * k + j];
                            let from = (r * k + j) * width;
                            let to = token * width;
                            for (o, &d) in gx[to..to + width].iter_mut().zip(grad[from..from + width].iter()) {
                                *o += d;
                            }
                        }
                    };
                    if rows >= 256 {
                        g.par_chunks_mut(src_len * width).enumerate().for_each(|(r, gx)| one(gx, r));
                    } else {
                        for (r, gx) in g.chunks_mut(src_len * width).enumerate() {
                            one(gx, r);
                        }
                    }
                });
            }

            Op::ScatterTokens { y, indices, rows, src_len, k, width } => {
                self.accumulate(grads, y, |g| {
                    let one = |gy: &mut [S], r: usize| {
                        for j in 0..k {
                            let token = indices[r * k + j];
                            let from = (r * src_len + token) * width;
                            let to = j * width;
                            for (o, &d) in gy[to..to + width].iter_mut().zip(grad[from..from + width].iter()) {
                                *o += d;
                            }
                        }
                    };
                    if rows >= 256 {
                        g.par_chunks_mut(k * width).enumerate().for_each(|(r, gy)| one(gy, r));
                    } else {
                        for (r, gy) in g.chunks_mut(k * width).enumerate() {
                            one(gy, r);
                        }
                    }
                });
            }

            Op::CosineToCenter { x, center, rows, tokens, width, norms } => {
                let xv = self.value(x).data();
                let yv = self.value(NodeId(i)).data();
                self.accumulate(grads, x, |g| {
                    for r in 0..rows {
                        let row = &xv[r * tokens * width..(r + 1) * tokens * width];
                        let grow = &grad[r * tokens..(r + 1) * tokens];
                        let cnorm = norms[r * tokens + center];
                        let cvec = &row[center * width..(center + 1) * width];
                        let gx = &mut g[r * tokens * width..(r + 1) * tokens * width];
                        for t in 0..tokens {
                            let d = grow[t];
                            if d == S::ZERO {
                                continue;
                            }
                            let nt = norms[r * tokens + t];
                            let cos = yv[r * tokens + t];
                            let tvec = t * width;
                            for j in 0..width {
                                // ∂cos/∂s_t
                                gx[tvec + j] += d * (cvec[j] / (nt * cnorm) - cos * row[tvec + j] / (nt * nt));
                                // ∂cos/∂s_c
                                gx[center * width + j] +=
                                    d * (row[tvec + j] / (nt * cnorm) - cos * cvec[j] / (cnorm * cnorm));
                            }
                        }
                    }
                });
            }

            Op::ConcatLast { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths.iter()) {
                    self.accumulate(grads, p, |g| {
                        for r in 0..rows {
                            let src = &grad[r * total + offset..r * total + offset + w];
                            for (o, &d) in g[r * w..(r + 1) * w].iter_mut().zip(src.iter()) {
                                *o += d;
                            }
                        }
                    });
                    offset += w;
                }
            }

            Op::CrossEntropyWeighted { logits, targets, weights, weight_sum } => {
                let lv = self.value(logits).data();
                let b = targets.len();
                let k = lv.len() / b;
                let gscale = grad[0];
                self.accumulate(grads, logits, |g| {
                    for (i2, row) in lv.chunks(k).enumerate() {
                        let y = targets[i2];
                        let w = weights[y] / weight_sum;
                        let mut mx = S::neg_infinity();
                        for &v in row {
                            mx = mx.maxs(v);
                        }
                        let mut denom = S::ZERO;
                        for &v in row {
                            denom += (v - mx).exp();
                        }
                        for c in 0..k {
                            let p = (row[c] - mx).exp() / denom;
                            let ind = if c == y { S::ONE } else { S::ZERO };
                            g[i2 * k + c] += gscale * w * (p - ind);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

// ── Fused selective-scan kernels ────────────────────────────────────

/// One sequence of the recurrence, writing y and (optionally) every hidden
/// state and discretized decay. `h_all`/`abar_all` must hold len·ch·n.
pub(crate) fn scan_sequence<S: Scalar>(
    x: &[S],
    delta: &[S],
    bmat: &[S],
    cmat: &[S],
    a: &[S],
    d_skip: &[S],
    len: usize,
    ch: usize,
    n: usize,
    y: &mut [S],
    mut h_all: Option<&mut [S]>,
    mut abar_all: Option<&mut [S]>,
) {
    let mut h = vec![S::ZERO; ch * n];
    let mut abar_scratch = vec![S::ZERO; n];
    for t in 0..len {
        let bt = &bmat[t * n..(t + 1) * n];
        let ct = &cmat[t * n..(t + 1) * n];
        for c in 0..ch {
            let dt = delta[t * ch + c];
            let xt = x[t * ch + c];
            let dx = dt * xt;
            let hc = &mut h[c * n..(c + 1) * n];
            let ac = &a[c * n..(c + 1) * n];
            // Dependence-free passes first so the compiler can vectorize
            // them (the strict-order reduction lives in its own short loop).
            let ab: &mut [S] = match abar_all.as_deref_mut() {
                Some(buf) => &mut buf[(t * ch + c) * n..(t * ch + c + 1) * n],
                None => &mut abar_scratch,
            };
            for j in 0..n {
                ab[j] = (dt * ac[j]).exp_fast();
            }
            for j in 0..n {
                hc[j] = ab[j] * hc[j] + dx * bt[j];
            }
            let mut out = S::ZERO;
            for j in 0..n {
                out += ct[j] * hc[j];
            }
            y[t * ch + c] = out + d_skip[c] * xt;
        }
        if let Some(buf) = h_all.as_deref_mut() {
            buf[t * ch * n..(t + 1) * ch * n].copy_from_slice(&h);
        }
    }
}

fn scan_forward<S: Scalar>(
    x: &[S],
    delta: &[S],
    bmat: &[S],
    cmat: &[S],
    a: &[S],
    d_skip: &[S],
    rows: usize,
    len: usize,
    ch: usize,
    n: usize,
    out: &mut [S],
) {
    let xs = len * ch;
    let bs = len * n;
    let one = |y: &mut [S], r: usize| {
        scan_sequence(
            &x[r * xs..(r + 1) * xs],
            &delta[r * xs..(r + 1) * xs],
            &bmat[r * bs..(r + 1) * bs],
            &cmat[r * bs..(r + 1) * bs],
            a,
            d_skip,
            len,
            ch,
            n,
            y,
            None,
            None,
        );
    };
    if rows >= 64 {
        out.par_chunks_mut(xs).enumerate().for_each(|(r, y)| one(y, r));
    } else {
        for (r, y) in out.chunks_mut(xs).enumerate() {
            one(y, r);
        }
    }
}

struct ScanBackwardCtx<'a, S: Scalar> {
    x: &'a [S],
    delta: &'a [S],
    bmat: &'a [S],
    cmat: &'a [S],
    a: &'a [S],
    d_skip: &'a [S],
    rows: usize,
    len: usize,
    ch: usize,
    n_state: usize,
}

/// Reverse sweep of the scan. Hidden states are recomputed per sequence
/// (len·ch·n scratch) rather than saved for the whole batch. Per-sequence
/// gradients land in disjoint slices; the shared (A, D) gradients are
/// reduced over fixed-size chunks in ascending order so the result does not
/// depend on the thread count.
fn scan_backward<S: Scalar>(
    ctx: &ScanBackwardCtx<'_, S>,
    dy: &[S],
    dx: &mut [S],
    ddelta: &mut [S],
    db: &mut [S],
    dc: &mut [S],
) -> (Vec<S>, Vec<S>) {
    let (rows, len, ch, n) = (ctx.rows, ctx.len, ctx.ch, ctx.n_state);
    let xs = len * ch;
    let bs = len * n;

    let one_chunk = |chunk_idx: usize,
                     dx_c: &mut [S],
                     dd_c: &mut [S],
                     db_c: &mut [S],
                     dc_c: &mut [S]|
     -> (Vec<S>, Vec<S>) {
        let r0 = chunk_idx * SCAN_CHUNK;
        let r1 = (r0 + SCAN_CHUNK).min(rows);
        let mut da = vec![S::ZERO; ch * n];
        let mut dd_skip = vec![S::ZERO; ch];
        let mut h_all = vec![S::ZERO; len * ch * n];
        let mut abar_all = vec![S::ZERO; len * ch * n];
        let mut dh = vec![S::ZERO; ch * n];
        let mut y_scratch = vec![S::ZERO; xs];
        for r in r0..r1 {
            let x = &ctx.x[r * xs..(r + 1) * xs];
            let delta = &ctx.delta[r * xs..(r + 1) * xs];
            let bmat = &ctx.bmat[r * bs..(r + 1) * bs];
            let cmat = &ctx.cmat[r * bs..(r + 1) * bs];
            let dyr = &dy[r * xs..(r + 1) * xs];
            let off = r - r0;
            let dxr = &mut dx_c[off * xs..(off + 1) * xs];
            let ddr = &mut dd_c[off * xs..(off + 1) * xs];
            let dbr = &mut db_c[off * bs..(off + 1) * bs];
            let dcr = &mut dc_c[off * bs..(off + 1) * bs];

            scan_sequence(
                x,
                delta,
                bmat,
                cmat,
                ctx.a,
                ctx.d_skip,
                len,
                ch,
                n,
                &mut y_scratch,
                Some(&mut h_all),
                Some(&mut abar_all),
            );
            dh.fill(S::ZERO);

            let mut dhv_buf = vec![S::ZERO; n];
            let mut red_buf = vec![S::ZERO; n];
            for t in (0..len).rev() {
                let bt = &bmat[t * n..(t + 1) * n];
                let ct = &cmat[t * n..(t + 1) * n];
                let ht = &h_all[t * ch * n..(t + 1) * ch * n];
                for c in 0..ch {
                    let dyv = dyr[t * ch + c];
                    let dt = delta[t * ch + c];
                    let xt = x[t * ch + c];
                    let ac = &ctx.a[c * n..(c + 1) * n];
                    let hc = &ht[c * n..(c + 1) * n];
                    let abc = &abar_all[(t * ch + c) * n..(t * ch + c + 1) * n];
                    let dhc = &mut dh[c * n..(c + 1) * n];
                    let dac = &mut da[c * n..(c + 1) * n];
                    let h_prev = if t == 0 { None } else { Some(&h_all[((t - 1) * ch + c) * n..((t - 1) * ch + c + 1) * n]) };

                    // y_t = ⟨C_t, h_t⟩ + D·x_t
                    dd_skip[c] += dyv * xt;

                    // Vectorizable passes: everything lane-wise over j, with
                    // the two scalar reductions done on a scratch buffer.
                    for j in 0..n {
                        dhv_buf[j] = dhc[j] + dyv * ct[j];
                    }
                    for j in 0..n {
                        dcr[t * n + j] += dyv * hc[j];
                        dbr[t * n + j] += dhv_buf[j] * dt * xt;
                    }
                    match h_prev {
                        Some(hp) => {
                            for j in 0..n {
                                let d_abar = dhv_buf[j] * hp[j];
                                dac[j] += d_abar * dt * abc[j];
                                // dd contributions via abar and via Δ·B·x.
                                red_buf[j] = d_abar * ac[j] * abc[j] + dhv_buf[j] * bt[j] * xt;
                            }
                        }
                        None => {
                            for j in 0..n {
                                red_buf[j] = dhv_buf[j] * bt[j] * xt;
                            }
                        }
                    }
                    let mut dd_acc = S::ZERO;
                    for j in 0..n {
                        dd_acc += red_buf[j];
                    }
                    for j in 0..n {
                        red_buf[j] = dhv_buf[j] * bt[j];
                    }
                    let mut dx_acc = dyv * ctx.d_skip[c];
                    for j in 0..n {
                        dx_acc += red_buf[j] * dt;
                    }
                    // propagate to h_{t−1}
                    for j in 0..n {
                        dhc[j] = dhv_buf[j] * abc[j];
                    }
                    dxr[t * ch + c] += dx_acc;
                    ddr[t * ch + c] += dd_acc;
                }
            }
        }
        (da, dd_skip)
    };

    let n_chunks = rows.div_ceil(SCAN_CHUNK);
    let partials: Vec<(Vec<S>, Vec<S>)> = if n_chunks > 1 {
        dx.par_chunks_mut(SCAN_CHUNK * xs)
            .zip(ddelta.par_chunks_mut(SCAN_CHUNK * xs))
            .zip(db.par_chunks_mut(SCAN_CHUNK * bs))
            .zip(dc.par_chunks_mut(SCAN_CHUNK * bs))
            .enumerate()
            .map(|(ci, (((dx_c, dd_c), db_c), dc_c))| one_chunk(ci, dx_c, dd_c, db_c, dc_c))
            .collect()
    } else {
        vec![one_chunk(0, dx, ddelta, db, dc)]
    };

    let mut da = vec![S::ZERO; ch * n];
    let mut dd = vec![S::ZERO; ch];
    for (pa, pd) in partials {
        add_into(&mut da, &pa);
        add_into(&mut dd, &pd);
    }
    (da, dd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::gradcheck::{finite_difference, max_rel_error};
    use crate::rng::{substream, Stream};

    fn t2(data: Vec<f64>, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(data, vec![r, c]).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape: Tape<f64> = Tape::new();
        let eye = tape.constant(t2(vec![1.0, 0.0, 0.0, 1.0], 2, 2));
        let a = tape.constant(t2(vec![1.0, 2.0, 3.0, 4.0], 2, 2));
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t2(vec![1.0, 2.0], 1, 2));
        let col = tape.constant(t2(vec![3.0, 4.0], 2, 1));
        let d = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(t2(vec![0.0; 6], 2, 3));
        let b = tape.constant(t2(vec![0.0; 8], 2, 4));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_at_identity_b_is_ones() {
        // loss = sum(a·I₂) ⇒ ∂loss/∂a = [[1,1],[1,1]], checked against FD.
        let a0 = vec![1.0, 2.0, 3.0, 4.0];
        let f = |inputs: &[Vec<f64>]| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let a = tape.param(t2(inputs[0].clone(), 2, 2));
            let eye = tape.constant(t2(vec![1.0, 0.0, 0.0, 1.0], 2, 2));
            let c = tape.matmul(a, eye).unwrap();
            let m = tape.mean_all(c).unwrap();
            tape.value(m).data()[0] * 4.0 // sum = mean·numel
        };
        let fd = finite_difference(f, &[a0.clone()], 1e-6);
        for &g in &fd[0] {
            assert!((g - 1.0).abs() < 1e-7);
        }

        let mut tape: Tape<f64> = Tape::new();
        let a = tape.param(t2(a0, 2, 2));
        let eye = tape.constant(t2(vec![1.0, 0.0, 0.0, 1.0], 2, 2));
        let c = tape.matmul(a, eye).unwrap();
        let m = tape.mean_all(c).unwrap();
        let s = tape.scale(m, 4.0).unwrap();
        let grads = tape.backward(s).unwrap();
        for &g in grads.expect(a) {
            assert!((g - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples_and_shift_invariance() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t2(vec![0.0, 0.0, 0.0], 1, 3));
        let s = tape.softmax(x, 1).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(t2(vec![1.0, 0.0, -1.0], 1, 3));
        let s = tape.softmax(x, 1).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 0.66524).abs() < 1e-5);
        assert!((v[1] - 0.24473).abs() < 1e-5);
        assert!((v[2] - 0.09003).abs() < 1e-5);
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let xc = tape.constant(t2(vec![1.0 + 7.3, 0.0 + 7.3, -1.0 + 7.3], 1, 3));
        let sc = tape.softmax(xc, 1).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(tape.value(sc).data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let empty = tape.constant(Tensor::<f64>::zeros(vec![2, 0]));
        assert!(matches!(tape.softmax(empty, 1), Err(Error::Dimension(_))));
        let x = tape.constant(t2(vec![0.0], 1, 1));
        assert!(matches!(tape.softmax(x, 5), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_on_random_tensors() {
        let mut rng = substream(40, Stream::Test, 0);
        for _ in 0..50 {
            let (r, c) = (rng.gen_range(1..8), rng.gen_range(1..8));
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.constant(t2(data, r, c));
            let s = tape.softmax(x, 1).unwrap();
            let v = tape.value(s).data();
            for row in v.chunks(c) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn batch_norm_examples() {
        // Constant feature ⇒ output is the affine shift (ε clamps the variance).
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t2(vec![3.0, 3.0, 3.0], 3, 1));
        let gamma = tape.constant(Tensor::new(vec![2.0], vec![1]).unwrap());
        let beta = tape.constant(Tensor::new(vec![0.7], vec![1]).unwrap());
        let (y, stats) = tape
            .batch_norm(x, gamma, beta, &[0.0], &[1.0], 1e-5, true)
            .unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
        let (mean, var) = stats.unwrap();
        assert_eq!(mean, vec![3.0]);
        assert_eq!(var, vec![0.0]);

        // Batch [−1, 1], affine (1, 0): out = ±1/√(1+ε).
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t2(vec![-1.0, 1.0], 2, 1));
        let gamma = tape.constant(Tensor::new(vec![1.0], vec![1]).unwrap());
        let beta = tape.constant(Tensor::new(vec![0.0], vec![1]).unwrap());
        let (y, _) = tape.batch_norm(x, gamma, beta, &[0.0], &[1.0], 1e-5, true).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let v = tape.value(y).data();
        assert!((v[0] + expect).abs() < 1e-15);
        assert!((v[1] - expect).abs() < 1e-15);
        let delta = 1.0 - expect;
        assert!(delta > 0.0 && delta < 1e-4);
    }

    #[test]
    fn batch_norm_eval_ignores_batch_composition() {
        let gamma_d = vec![1.3, -0.4];
        let beta_d = vec![0.1, 0.2];
        let rm = vec![0.5, -1.0];
        let rv = vec![2.0, 0.3];
        let run = |rows: Vec<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let n = rows.len() / 2;
            let x = tape.constant(t2(rows, n, 2));
            let gamma = tape.constant(Tensor::new(gamma_d.clone(), vec![2]).unwrap());
            let beta = tape.constant(Tensor::new(beta_d.clone(), vec![2]).unwrap());
            let (y, stats) = tape.batch_norm(x, gamma, beta, &rm, &rv, 1e-5, false).unwrap();
            assert!(stats.is_none());
            tape.value(y).data().to_vec()
        };
        let solo = run(vec![1.0, 2.0]);
        let crowd = run(vec![1.0, 2.0, -5.0, 9.0, 0.0, 0.0]);
        assert_eq!(solo[0], crowd[0]);
        assert_eq!(solo[1], crowd[1]);

        // Training mode demands B ≥ 2.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t2(vec![1.0, 2.0], 1, 2));
        let gamma = tape.constant(Tensor::new(gamma_d.clone(), vec![2]).unwrap());
        let beta = tape.constant(Tensor::new(beta_d.clone(), vec![2]).unwrap());
        let err = tape.batch_norm(x, gamma, beta, &rm, &rv, 1e-5, true).unwrap_err();
        assert!(err.to_string().contains("batch-size"));
    }

    #[test]
    fn backward_basics() {
        // loss = sum(x) ⇒ gradient of ones.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(t2(vec![1.0, -2.0, 0.5], 1, 3));
        let m = tape.mean_all(x).unwrap();
        let loss = tape.scale(m, 3.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        for &g in grads.expect(x) {
            assert!((g - 1.0).abs() < 1e-15);
        }

        // loss = sum(x²) at x = [1,2,3] ⇒ [2,4,6].
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(t2(vec![1.0, 2.0, 3.0], 1, 3));
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean_all(sq).unwrap();
        let loss = tape.scale(m, 3.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.expect(x);
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[1] - 4.0).abs() < 1e-12);
        assert!((g[2] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape: Tape<f64> = Tape::new();
        assert!(matches!(tape.backward(NodeId(0)), Err(Error::Contract(_))));

        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(t2(vec![1.0, 2.0], 1, 2));
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));

        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(t2(vec![1.0, 2.0], 1, 2));
        let loss = tape.mean_all(x).unwrap();
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(err.to_string().contains("repeated backward"));
    }

    #[test]
    fn chain_matmul_softmax_matches_finite_differences() {
        let mut rng = substream(41, Stream::Test, 0);
        let a0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = |inputs: &[Vec<f64>]| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let a = tape.param(t2(inputs[0].clone(), 2, 3));
            let b = tape.param(t2(inputs[1].clone(), 3, 2));
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax(c, 1).unwrap();
            let sq = tape.mul(s, s).unwrap();
            let m = tape.mean_all(sq).unwrap();
            tape.value(m).data()[0]
        };
        let fd = finite_difference(build, &[a0.clone(), b0.clone()], 1e-6);

        let mut tape: Tape<f64> = Tape::new();
        let a = tape.param(t2(a0, 2, 3));
        let b = tape.param(t2(b0, 3, 2));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(max_rel_error(grads.expect(a), &fd[0]) < 1e-5);
        assert!(max_rel_error(grads.expect(b), &fd[1]) < 1e-5);
    }

    #[test]
    fn grouped_conv_examples() {
        // Depthwise (groups = channels), kernel [1] with weight 1 ⇒ identity.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![1, 2, 3]).unwrap());
        let w = tape.constant(Tensor::new(vec![1.0, 1.0], vec![2, 1, 1]).unwrap());
        let y = tape.grouped_conv1d(x, w, None, 2).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        // Kernel [1,1,1], single channel, input [1,2,3] ⇒ [3,6,5].
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![1.0, 2.0, 3.0], vec![1, 1, 3]).unwrap());
        let w = tape.constant(Tensor::new(vec![1.0, 1.0, 1.0], vec![1, 1, 3]).unwrap());
        let y = tape.grouped_conv1d(x, w, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn grouped_conv_group_independence_is_bit_exact() {
        let mut rng = substream(42, Stream::Test, 0);
        for &groups in &[1usize, 2, 3, 6] {
            let (c_in, c_out, len) = (2, 3, 5);
            let rows = 2;
            let x0: Vec<f64> = (0..rows * groups * c_in * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..groups * c_out * c_in * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let run = |xv: Vec<f64>| {
                let mut tape: Tape<f64> = Tape::new();
                let x = tape.constant(Tensor::new(xv, vec![rows, groups * c_in, len]).unwrap());
                let wn = tape.constant(Tensor::new(w.clone(), vec![groups * c_out, c_in, 3]).unwrap());
                let y = tape.grouped_conv1d(x, wn, None, groups).unwrap();
                tape.value(y).data().to_vec()
            };
            let y0 = run(x0.clone());
            // Perturb all channels of group 0.
            let mut x1 = x0.clone();
            for r in 0..rows {
                for ci in 0..c_in {
                    for t in 0..len {
                        x1[(r * groups * c_in + ci) * len + t] += 5.0;
                    }
                }
            }
            let y1 = run(x1);
            for r in 0..rows {
                for oc in 0..groups * c_out {
                    for t in 0..len {
                        let idx = (r * groups * c_out + oc) * len + t;
                        if oc < c_out {
                            // group 0 can move
                        } else {
                            assert_eq!(y0[idx], y1[idx], "group {} moved", oc / c_out);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn grouped_conv_errors() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![0.0; 6], vec![1, 3, 2]).unwrap());
        let w = tape.constant(Tensor::new(vec![0.0; 2], vec![2, 1, 1]).unwrap());
        assert!(matches!(tape.grouped_conv1d(x, w, None, 2), Err(Error::Config(_))));

        let x = tape.constant(Tensor::new(vec![0.0; 8], vec![1, 2, 4]).unwrap());
        let w_even = tape.constant(Tensor::new(vec![0.0; 4], vec![2, 1, 2]).unwrap());
        assert!(matches!(tape.grouped_conv1d(x, w_even, None, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_hand_value_and_uniform_weights() {
        // K = 2, logits [0, 0], target 0, weights [1, 1] ⇒ ln 2.
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(t2(vec![0.0, 0.0], 1, 2));
        let loss = tape
            .cross_entropy_weighted(logits, Arc::new(vec![0]), Arc::new(vec![1.0, 1.0]))
            .unwrap();
        assert!((tape.value(loss).data()[0] - (2.0f64).ln()).abs() < 1e-12);

        // Uniform weights equal the unweighted loss.
        let mut rng = substream(43, Stream::Test, 0);
        let (b, k) = (5, 4);
        let logits_d: Vec<f64> = (0..b * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let eval = |w: Vec<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let l = tape.constant(t2(logits_d.clone(), b, k));
            let loss = tape
                .cross_entropy_weighted(l, Arc::new(targets.clone()), Arc::new(w))
                .unwrap();
            tape.value(loss).data()[0]
        };
        let uniform = eval(vec![1.0; k]);
        let scaled = eval(vec![2.5; k]);
        assert!((uniform - scaled).abs() < 1e-12);

        // Margin → ∞ ⇒ loss → 0.
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.constant(t2(vec![60.0, 0.0], 1, 2));
        let loss = tape
            .cross_entropy_weighted(l, Arc::new(vec![0]), Arc::new(vec![1.0, 1.0]))
            .unwrap();
        assert!(tape.value(loss).data()[0] < 1e-12);

        // Bad target index is a data error.
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.constant(t2(vec![0.0, 0.0], 1, 2));
        assert!(matches!(
            tape.cross_entropy_weighted(l, Arc::new(vec![2]), Arc::new(vec![1.0, 1.0])),
            Err(Error::Data(_))
        ));
    }
}
