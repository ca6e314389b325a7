//! Reverse-mode differentiation over a linear tape.
//!
//! Ops record their inputs during the forward pass; [`Tape::backward`]
//! replays the tape in reverse and accumulates gradients into every node
//! that (transitively) depends on a gradient-bearing leaf. All op outputs
//! are validated finite; NaN/Inf is reported as a numeric error instead of
//! silently propagating.

use crate::error::{Error, Result};
use crate::scalar::{pairwise_dot, pairwise_sum, Scalar};
use crate::tensor::Tensor;

pub type NodeId = usize;

const GELU_ALPHA: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_BETA: f64 = 0.044_715;

/// Per-direction components of the symmetric contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_v2t: f64,
    pub l_t2v: f64,
    pub l: f64,
}

/// Attention projection weights (ids of leaves already on the tape).
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// One pre-norm transformer block: x + attn(ln1(x)), then h + mlp(ln2(h)).
#[derive(Debug, Clone, Copy)]
pub struct BlockWeights {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub attn: AttnWeights,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

/// Gate-stacked LSTM parameters; gate order along the 4*d_h axis is
/// (input, forget, candidate, output).
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub bias: NodeId,
}

enum Op<S: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { x: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: S },
    ScaleByScalar { x: NodeId, s: NodeId },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Exp { x: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, eps: S },
    MeanRows { x: NodeId },
    Sum { x: NodeId },
    ConcatRows { parts: Vec<(NodeId, usize)> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatCols { parts: Vec<(NodeId, usize)> },
    Transpose { x: NodeId },
    GatherRows { table: NodeId, indices: Vec<usize> },
    UnfoldPatches { x: NodeId, ph: usize, pw: usize },
    Conv3d { input: NodeId, kernel: NodeId, pad: usize, stride: usize },
    Reshape { x: NodeId },
    Cosine { a: NodeId, b: NodeId, inv_na: S, inv_nb: S },
    CosineRows { v: NodeId, w: NodeId, inv_nv: Vec<S>, inv_nw: Vec<S> },
    SymmetricCe { s: NodeId, scale: S, row_sm: Vec<S>, col_sm: Vec<S> },
    StackScalars { parts: Vec<NodeId> },
}

impl<S: Scalar> Default for Op<S> {
    fn default() -> Self {
        Op::Leaf
    }
}

struct Node<S: Scalar> {
    dims: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
}

/// Computation tape. One per forward pass; dropped after the step.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].dims
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id].data
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<S> {
        Tensor::new(self.nodes[id].dims.clone(), self.nodes[id].data.clone())
            .expect("tape nodes hold valid tensors")
    }

    fn push(&mut self, dims: Vec<usize>, data: Vec<S>, op: Op<S>, needs_grad: bool) -> Result<NodeId> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value produced (node {}, dims {:?})",
                self.nodes.len(),
                dims
            )));
        }
        self.nodes.push(Node { dims, data, grad: None, needs_grad, op });
        Ok(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Result<NodeId> {
        self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn leaf_from(&mut self, dims: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<NodeId> {
        let numel: usize = dims.iter().product();
        if numel != data.len() || dims.is_empty() {
            return Err(Error::Dim(format!("leaf dims {dims:?} vs {} values", data.len())));
        }
        self.push(dims, data, Op::Leaf, requires_grad)
    }

    // ---- element-wise and affine --------------------------------------

    /// y = x W + b. Accepts x of shape [.., d_in] with rank 1 or 2.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, d_in, was_vec) = match self.nodes[x].dims[..] {
            [d] => (1, d, true),
            [n, d] => (n, d, false),
            _ => return Err(Error::Dim(format!("linear expects rank 1 or 2 input, got {:?}", self.nodes[x].dims))),
        };
        let wd = self.nodes[w].dims.clone();
        if wd.len() != 2 || wd[0] != d_in {
            return Err(Error::Dim(format!("linear weight {:?} does not accept input width {d_in}", wd)));
        }
        let d_out = wd[1];
        if self.nodes[b].dims[..] != [d_out] {
            return Err(Error::Dim(format!("linear bias {:?} vs output width {d_out}", self.nodes[b].dims)));
        }
        let x2 = if was_vec { self.reshape(x, vec![1, d_in])? } else { x };
        let mm = self.matmul(x2, w)?;
        let y = self.add_row(mm, b)?;
        if was_vec {
            self.reshape(y, vec![d_out])
        } else {
            let _ = rows;
            Ok(y)
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ad, bd) = (&self.nodes[a].dims, &self.nodes[b].dims);
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::Dim(format!("matmul {:?} x {:?}", ad, bd)));
        }
        let (n, k, m) = (ad[0], ad[1], bd[1]);
        let mut out = vec![S::ZERO; n * m];
        matmul_acc(&self.nodes[a].data, &self.nodes[b].data, &mut out, n, k, m);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![n, m], out, Op::Matmul { a, b }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].dims != self.nodes[b].dims {
            return Err(Error::Dim(format!(
                "add {:?} vs {:?}",
                self.nodes[a].dims, self.nodes[b].dims
            )));
        }
        let data: Vec<S> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(self.nodes[a].dims.clone(), data, Op::Add { a, b }, ng)
    }

    /// Broadcast-add a row vector to every row of a matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let xd = self.nodes[x].dims.clone();
        if xd.len() != 2 || self.nodes[row].dims[..] != [xd[1]] {
            return Err(Error::Dim(format!(
                "add_row {:?} + {:?}",
                xd, self.nodes[row].dims
            )));
        }
        let m = xd[1];
        let mut data = self.nodes[x].data.clone();
        for r in data.chunks_exact_mut(m) {
            for (v, &b) in r.iter_mut().zip(&self.nodes[row].data) {
                *v += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(xd, data, Op::AddRow { x, row }, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].dims != self.nodes[b].dims {
            return Err(Error::Dim(format!(
                "mul {:?} vs {:?}",
                self.nodes[a].dims, self.nodes[b].dims
            )));
        }
        let data: Vec<S> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(self.nodes[a].dims.clone(), data, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let data: Vec<S> = self.nodes[x].data.iter().map(|&v| v * c).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x].dims.clone(), data, Op::Scale { x, c }, ng)
    }

    /// Multiply every element of `x` by a single-element node `s`.
    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].data.len() != 1 {
            return Err(Error::Dim("scale_by_scalar expects a one-element node".into()));
        }
        let sv = self.nodes[s].data[0];
        let data: Vec<S> = self.nodes[x].data.iter().map(|&v| v * sv).collect();
        let ng = self.needs(x) || self.needs(s);
        self.push(self.nodes[x].dims.clone(), data, Op::ScaleByScalar { x, s }, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<S> = self.nodes[x].data.iter().map(|&v| v.max(S::ZERO)).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x].dims.clone(), data, Op::Relu { x }, ng)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let a = S::from_f64(GELU_ALPHA);
        let b = S::from_f64(GELU_BETA);
        let half = S::from_f64(0.5);
        let data: Vec<S> = self.nodes[x]
            .data
            .iter()
            .map(|&v| half * v * (S::ONE + (a * (v + b * v.powi(3))).tanh()))
            .collect();
        let ng = self.needs(x);
        self.push(self.nodes[x].dims.clone(), data, Op::Gelu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<S> = self.nodes[x].data.iter().map(|&v| sigmoid(v)).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x].dims.clone(), data, Op::Sigmoid { x }, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<S> = self.nodes[x].data.iter().map(|&v| v.tanh()).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x].dims.clone(), data, Op::Tanh { x }, ng)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<S> = self.nodes[x].data.iter().map(|&v| v.exp()).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x].dims.clone(), data, Op::Exp { x }, ng)
    }

    // ---- normalization and attention ----------------------------------

    /// Numerically-stabilized softmax along the last axis (rank 1 or 2).
    /// `masked[i*n + j] == true` forces weight 0 at that position.
    pub fn softmax_rows(&mut self, x: NodeId, masked: Option<&[bool]>) -> Result<NodeId> {
        let (rows, n) = last_axis(&self.nodes[x].dims)?;
        if n == 0 {
            return Err(Error::Dim("softmax over empty axis".into()));
        }
        if let Some(m) = masked {
            if m.len() != rows * n {
                return Err(Error::Dim("softmax mask length mismatch".into()));
            }
        }
        let mut data = vec![S::ZERO; rows * n];
        for r in 0..rows {
            let xs = &self.nodes[x].data[r * n..(r + 1) * n];
            let row_mask = masked.map(|m| &m[r * n..(r + 1) * n]);
            let mut mx = S::neg_infinity();
            for j in 0..n {
                if row_mask.map_or(true, |m| !m[j]) {
                    mx = mx.max(xs[j]);
                }
            }
            if !mx.is_finite() {
                return Err(Error::Dim(format!("softmax row {r} is fully masked")));
            }
            let out = &mut data[r * n..(r + 1) * n];
            for j in 0..n {
                out[j] = if row_mask.map_or(true, |m| !m[j]) { (xs[j] - mx).exp() } else { S::ZERO };
            }
            let z = pairwise_sum(out);
            for v in out.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.needs(x);
        self.push(self.nodes[x].dims.clone(), data, Op::SoftmaxRows { x }, ng)
    }

    /// Per-row layer normalization with affine transform.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId> {
        let (rows, d) = last_axis(&self.nodes[x].dims)?;
        if d == 0 {
            return Err(Error::Dim("layer_norm over empty axis".into()));
        }
        if self.nodes[gamma].dims[..] != [d] || self.nodes[beta].dims[..] != [d] {
            return Err(Error::Dim(format!(
                "layer_norm affine {:?}/{:?} vs width {d}",
                self.nodes[gamma].dims, self.nodes[beta].dims
            )));
        }
        let mut data = vec![S::ZERO; rows * d];
        for r in 0..rows {
            let xs = &self.nodes[x].data[r * d..(r + 1) * d];
            let (mean, inv_std) = row_moments(xs, eps);
            let out = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                let xhat = (xs[j] - mean) * inv_std;
                out[j] = self.nodes[gamma].data[j] * xhat + self.nodes[beta].data[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            self.nodes[x].dims.clone(),
            data,
            Op::LayerNormRows { x, gamma, beta, eps },
            ng,
        )
    }

    /// Scaled dot-product attention with `n_heads` heads over [L, d] inputs.
    /// Mask semantics: `masked[i*L + j] == true` blocks position j for query i.
    pub fn multi_head_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        masked: Option<&[bool]>,
        w: &AttnWeights,
    ) -> Result<NodeId> {
        let d = match self.nodes[q].dims[..] {
            [_, d] => d,
            _ => return Err(Error::Dim("attention expects [L, d] inputs".into())),
        };
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} not divisible by {n_heads} heads"
            )));
        }
        let dh = d / n_heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let qp = self.linear(q, w.wq, w.bq)?;
        let kp = self.linear(k, w.wk, w.bk)?;
        let vp = self.linear(v, w.wv, w.bv)?;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = self.slice_cols(qp, h * dh, dh)?;
            let kh = self.slice_cols(kp, h * dh, dh)?;
            let vh = self.slice_cols(vp, h * dh, dh)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scaled = self.scale(scores, scale)?;
            let weights = self.softmax_rows(scaled, masked)?;
            heads.push(self.matmul(weights, vh)?);
        }
        let cat = self.concat_cols(&heads)?;
        self.linear(cat, w.wo, w.bo)
    }

    /// Pre-norm transformer block with GELU MLP.
    pub fn transformer_block(
        &mut self,
        x: NodeId,
        n_heads: usize,
        masked: Option<&[bool]>,
        w: &BlockWeights,
        eps: S,
    ) -> Result<NodeId> {
        let n1 = self.layer_norm_rows(x, w.ln1_gamma, w.ln1_beta, eps)?;
        let attn = self.multi_head_attention(n1, n1, n1, n_heads, masked, &w.attn)?;
        let h = self.add(x, attn)?;
        let n2 = self.layer_norm_rows(h, w.ln2_gamma, w.ln2_beta, eps)?;
        let m1 = self.linear(n2, w.mlp_w1, w.mlp_b1)?;
        let act = self.gelu(m1)?;
        let m2 = self.linear(act, w.mlp_w2, w.mlp_b2)?;
        self.add(h, m2)
    }

    /// One LSTM recurrence step over [1, d_in] input and [1, d_h] state.
    pub fn lstm_step(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w: &LstmWeights,
    ) -> Result<(NodeId, NodeId)> {
        let dh = match self.nodes[h].dims[..] {
            [1, dh] => dh,
            _ => return Err(Error::Dim("lstm state must be [1, d_h]".into())),
        };
        if self.nodes[c].dims[..] != [1, dh] {
            return Err(Error::Dim("lstm cell state shape mismatch".into()));
        }
        let zx = self.matmul(x, w.w_x)?;
        let zh = self.matmul(h, w.w_h)?;
        let z0 = self.add(zx, zh)?;
        let z = self.add_row(z0, w.bias)?;
        if self.nodes[z].dims[1] != 4 * dh {
            return Err(Error::Dim("lstm weights must produce 4*d_h preactivations".into()));
        }
        let zi = self.slice_cols(z, 0, dh)?;
        let zf = self.slice_cols(z, dh, dh)?;
        let zg = self.slice_cols(z, 2 * dh, dh)?;
        let zo = self.slice_cols(z, 3 * dh, dh)?;
        let i = self.sigmoid(zi)?;
        let f = self.sigmoid(zf)?;
        let g = self.tanh(zg)?;
        let o = self.sigmoid(zo)?;
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c_next = self.add(fc, ig)?;
        let tc = self.tanh(c_next)?;
        let h_next = self.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    // ---- reductions ----------------------------------------------------

    /// Arithmetic mean across the first axis of [n, d] (pairwise-summed).
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = match self.nodes[x].dims[..] {
            [n, d] => (n, d),
            _ => return Err(Error::Dim("mean_rows expects [n, d]".into())),
        };
        if n == 0 {
            return Err(Error::Empty("mean over zero rows".into()));
        }
        let inv = S::from_f64(1.0 / n as f64);
        let mut col = vec![S::ZERO; n];
        let mut data = vec![S::ZERO; d];
        for j in 0..d {
            for i in 0..n {
                col[i] = self.nodes[x].data[i * d + j];
            }
            data[j] = pairwise_sum(&col) * inv;
        }
        let ng = self.needs(x);
        self.push(vec![d], data, Op::MeanRows { x }, ng)
    }

    /// Sum of all elements (pairwise), as a [1] node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = pairwise_sum(&self.nodes[x].data);
        let ng = self.needs(x);
        self.push(vec![1], vec![total], Op::Sum { x }, ng)
    }

    // ---- shape plumbing -------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let numel: usize = dims.iter().product();
        if numel != self.nodes[x].data.len() || dims.is_empty() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?}",
                self.nodes[x].dims, dims
            )));
        }
        let data = self.nodes[x].data.clone();
        let ng = self.needs(x);
        self.push(dims, data, Op::Reshape { x }, ng)
    }

    /// Stack inputs along the row axis; rank-1 inputs count as single rows.
    pub fn concat_rows(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Empty("concat_rows of nothing".into()));
        }
        let width = match self.nodes[ids[0]].dims[..] {
            [d] => d,
            [_, d] => d,
            _ => return Err(Error::Dim("concat_rows expects rank 1 or 2 parts".into())),
        };
        let mut parts = Vec::with_capacity(ids.len());
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &id in ids {
            let (r, d) = match self.nodes[id].dims[..] {
                [d] => (1, d),
                [r, d] => (r, d),
                _ => return Err(Error::Dim("concat_rows expects rank 1 or 2 parts".into())),
            };
            if d != width {
                return Err(Error::Dim(format!("concat_rows width {d} != {width}")));
            }
            parts.push((id, r));
            data.extend_from_slice(&self.nodes[id].data);
            rows += r;
            ng |= self.needs(id);
        }
        self.push(vec![rows, width], data, Op::ConcatRows { parts }, ng)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = match self.nodes[x].dims[..] {
            [n, d] => (n, d),
            _ => return Err(Error::Dim("slice_rows expects [n, d]".into())),
        };
        if start + len > n || len == 0 {
            return Err(Error::Dim(format!("slice_rows {start}..{} of {n}", start + len)));
        }
        let data = self.nodes[x].data[start * d..(start + len) * d].to_vec();
        let ng = self.needs(x);
        self.push(vec![len, d], data, Op::SliceRows { x, start }, ng)
    }

    /// Single row of a matrix, as a rank-1 vector.
    pub fn row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let r = self.slice_rows(x, i, 1)?;
        let d = self.nodes[r].dims[1];
        self.reshape(r, vec![d])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = match self.nodes[x].dims[..] {
            [n, d] => (n, d),
            _ => return Err(Error::Dim("slice_cols expects [n, d]".into())),
        };
        if start + len > d || len == 0 {
            return Err(Error::Dim(format!("slice_cols {start}..{} of {d}", start + len)));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&self.nodes[x].data[i * d + start..i * d + start + len]);
        }
        let ng = self.needs(x);
        self.push(vec![n, len], data, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Empty("concat_cols of nothing".into()));
        }
        let n = match self.nodes[ids[0]].dims[..] {
            [n, _] => n,
            _ => return Err(Error::Dim("concat_cols expects rank-2 parts".into())),
        };
        let mut parts = Vec::with_capacity(ids.len());
        let mut width = 0;
        let mut ng = false;
        for &id in ids {
            match self.nodes[id].dims[..] {
                [r, c] if r == n => {
                    parts.push((id, c));
                    width += c;
                    ng |= self.needs(id);
                }
                _ => return Err(Error::Dim("concat_cols row-count mismatch".into())),
            }
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for &(id, c) in &parts {
                data.extend_from_slice(&self.nodes[id].data[i * c..(i + 1) * c]);
            }
        }
        self.push(vec![n, width], data, Op::ConcatCols { parts }, ng)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = match self.nodes[x].dims[..] {
            [n, m] => (n, m),
            _ => return Err(Error::Dim("transpose expects rank 2".into())),
        };
        let mut data = vec![S::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = self.nodes[x].data[i * m + j];
            }
        }
        let ng = self.needs(x);
        self.push(vec![m, n], data, Op::Transpose { x }, ng)
    }

    /// Row lookup into an embedding table; duplicate indices accumulate
    /// gradient additively.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (v, d) = match self.nodes[table].dims[..] {
            [v, d] => (v, d),
            _ => return Err(Error::Dim("gather_rows expects a [vocab, d] table".into())),
        };
        if indices.is_empty() {
            return Err(Error::Empty("gather of zero indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Dim(format!("gather index {bad} out of table size {v}")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.nodes[table].data[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        self.push(
            vec![indices.len(), d],
            data,
            Op::GatherRows { table, indices: indices.to_vec() },
            ng,
        )
    }

    // ---- patch extraction ----------------------------------------------

    /// Cut a [C, H, W] frame into non-overlapping ph x pw patches and
    /// flatten each in (channel, row, col) order: output [n_patches, C*ph*pw].
    pub fn unfold_patches(&mut self, x: NodeId, ph: usize, pw: usize) -> Result<NodeId> {
        let (c, h, w) = match self.nodes[x].dims[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::Dim("unfold_patches expects [C, H, W]".into())),
        };
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::Dim(format!(
                "frame {h}x{w} not divisible by patch {ph}x{pw}"
            )));
        }
        let (gh, gw) = (h / ph, w / pw);
        let k = c * ph * pw;
        let mut data = vec![S::ZERO; gh * gw * k];
        let src = &self.nodes[x].data;
        for pi in 0..gh {
            for pj in 0..gw {
                let p = pi * gw + pj;
                let out = &mut data[p * k..(p + 1) * k];
                let mut o = 0;
                for ch in 0..c {
                    for di in 0..ph {
                        for dj in 0..pw {
                            out[o] = src[ch * h * w + (pi * ph + di) * w + (pj * pw + dj)];
                            o += 1;
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(vec![gh * gw, k], data, Op::UnfoldPatches { x, ph, pw }, ng)
    }

    /// Temporal 3D convolution over a [T, C, H, W] clip with a
    /// [d, C, t, ph, pw] kernel. Spatial stride equals the spatial kernel
    /// (non-overlapping patches); temporal stride/padding are explicit.
    /// Output is [T_out, n_patches, d].
    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        t_stride: usize,
        t_pad: usize,
    ) -> Result<NodeId> {
        let (t_in, c, h, w) = match self.nodes[input].dims[..] {
            [t, c, h, w] => (t, c, h, w),
            _ => return Err(Error::Dim("conv3d expects [T, C, H, W] input".into())),
        };
        let (d, kc, kt, ph, pw) = match self.nodes[kernel].dims[..] {
            [d, kc, kt, ph, pw] => (d, kc, kt, ph, pw),
            _ => return Err(Error::Dim("conv3d expects [d, C, t, h, w] kernel".into())),
        };
        if kc != c {
            return Err(Error::Dim(format!("conv3d channels {c} vs kernel {kc}")));
        }
        if kt % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel {kt} must be odd")));
        }
        if t_stride == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::Dim(format!(
                "conv3d spatial {h}x{w} not divisible by {ph}x{pw}"
            )));
        }
        let padded = t_in + 2 * t_pad;
        if padded < kt {
            return Err(Error::Dim(format!("conv3d window {kt} exceeds padded length {padded}")));
        }
        let t_out = (padded - kt) / t_stride + 1;
        let (gh, gw) = (h / ph, w / pw);
        let n_patches = gh * gw;
        let mut data = vec![S::ZERO; t_out * n_patches * d];
        let inp = &self.nodes[input].data;
        let ker = &self.nodes[kernel].data;
        let ksz = c * kt * ph * pw;
        for tau in 0..t_out {
            for pi in 0..gh {
                for pj in 0..gw {
                    let p = pi * gw + pj;
                    for m in 0..d {
                        let krow = &ker[m * ksz..(m + 1) * ksz];
                        let mut acc = S::ZERO;
                        let mut ki = 0;
                        for ch in 0..c {
                            for dt in 0..kt {
                                let f = (tau * t_stride + dt) as isize - t_pad as isize;
                                if f < 0 || f >= t_in as isize {
                                    ki += ph * pw;
                                    continue;
                                }
                                let base = f as usize * c * h * w + ch * h * w;
                                for di in 0..ph {
                                    let rowb = base + (pi * ph + di) * w + pj * pw;
                                    for dj in 0..pw {
                                        acc += inp[rowb + dj] * krow[ki];
                                        ki += 1;
                                    }
                                }
                            }
                        }
                        data[(tau * n_patches + p) * d + m] = acc;
                    }
                }
            }
        }
        let ng = self.needs(input) || self.needs(kernel);
        self.push(
            vec![t_out, n_patches, d],
            data,
            Op::Conv3d { input, kernel, pad: t_pad, stride: t_stride },
            ng,
        )
    }

    // ---- similarity -----------------------------------------------------

    /// Cosine similarity of two vectors, computed as a dot product of the
    /// elementwise-normalized inputs so batched and pairwise paths agree
    /// bit-for-bit. Zero-norm inputs are rejected.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (vec_len(&self.nodes[a].dims)?, vec_len(&self.nodes[b].dims)?);
        if da != db {
            return Err(Error::Dim(format!("cosine over lengths {da} vs {db}")));
        }
        let na = pairwise_dot(&self.nodes[a].data, &self.nodes[a].data).sqrt();
        let nb = pairwise_dot(&self.nodes[b].data, &self.nodes[b].data).sqrt();
        if na == S::ZERO || nb == S::ZERO {
            return Err(Error::Degenerate("cosine of zero-norm vector".into()));
        }
        let (inv_na, inv_nb) = (S::ONE / na, S::ONE / nb);
        let an: Vec<S> = self.nodes[a].data.iter().map(|&v| v * inv_na).collect();
        let bn: Vec<S> = self.nodes[b].data.iter().map(|&v| v * inv_nb).collect();
        let cval = pairwise_dot(&an, &bn);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![1], vec![cval], Op::Cosine { a, b, inv_na, inv_nb }, ng)
    }

    /// All-pairs cosine matrix between rows of `v` [B, d] and rows of
    /// `w` [B, d]: out[i][j] = cos(v_i, w_j). Rows are normalized once;
    /// each entry then reduces exactly like [`Tape::cosine`].
    pub fn cosine_rows(&mut self, v: NodeId, w: NodeId) -> Result<NodeId> {
        let (bv, d) = match self.nodes[v].dims[..] {
            [b, d] => (b, d),
            _ => return Err(Error::Dim("cosine_rows expects [B, d]".into())),
        };
        let bw = match self.nodes[w].dims[..] {
            [b, dw] if dw == d => b,
            _ => return Err(Error::Dim("cosine_rows width mismatch".into())),
        };
        let mut inv_nv = Vec::with_capacity(bv);
        let mut inv_nw = Vec::with_capacity(bw);
        let vn = normalized_rows(&self.nodes[v].data, bv, d, &mut inv_nv)
            .ok_or_else(|| Error::Degenerate("zero-norm pooled video vector".into()))?;
        let wn = normalized_rows(&self.nodes[w].data, bw, d, &mut inv_nw)
            .ok_or_else(|| Error::Degenerate("zero-norm text vector".into()))?;
        let mut data = vec![S::ZERO; bv * bw];
        for i in 0..bv {
            for j in 0..bw {
                data[i * bw + j] = pairwise_dot(&vn[i * d..(i + 1) * d], &wn[j * d..(j + 1) * d]);
            }
        }
        let ng = self.needs(v) || self.needs(w);
        self.push(vec![bv, bw], data, Op::CosineRows { v, w, inv_nv, inv_nw }, ng)
    }

    /// Symmetric InfoNCE over a square score matrix: row-softmax CE plus
    /// column-softmax CE on the diagonal, each averaged over the batch.
    /// Returns the scalar loss node and the per-direction values.
    pub fn symmetric_ce(&mut self, s: NodeId, scale: S) -> Result<(NodeId, LossBreakdown)> {
        let b = match self.nodes[s].dims[..] {
            [r, c] if r == c => r,
            _ => {
                return Err(Error::Batch(format!(
                    "similarity matrix must be square, got {:?}",
                    self.nodes[s].dims
                )))
            }
        };
        if scale <= S::ZERO {
            return Err(Error::Config("loss scale must be positive".into()));
        }
        let sc: Vec<S> = self.nodes[s].data.iter().map(|&v| v * scale).collect();
        let mut row_sm = vec![S::ZERO; b * b];
        let mut col_sm = vec![S::ZERO; b * b];
        let mut diag_row_logp = vec![S::ZERO; b];
        let mut diag_col_logp = vec![S::ZERO; b];
        let mut col = vec![S::ZERO; b];
        for i in 0..b {
            let row = &sc[i * b..(i + 1) * b];
            let lse = log_sum_exp(row, &mut row_sm[i * b..(i + 1) * b]);
            diag_row_logp[i] = row[i] - lse;
        }
        for j in 0..b {
            for i in 0..b {
                col[i] = sc[i * b + j];
            }
            let mut sm = vec![S::ZERO; b];
            let lse = log_sum_exp(&col, &mut sm);
            for i in 0..b {
                col_sm[i * b + j] = sm[i];
            }
            diag_col_logp[j] = col[j] - lse;
        }
        let inv_b = S::from_f64(1.0 / b as f64);
        let l_v2t = -pairwise_sum(&diag_row_logp) * inv_b;
        let l_t2v = -pairwise_sum(&diag_col_logp) * inv_b;
        let l = l_v2t + l_t2v;
        let breakdown = LossBreakdown {
            l_v2t: l_v2t.to_f64(),
            l_t2v: l_t2v.to_f64(),
            l: l.to_f64(),
        };
        let ng = self.needs(s);
        let id = self.push(vec![1], vec![l], Op::SymmetricCe { s, scale, row_sm, col_sm }, ng)?;
        Ok((id, breakdown))
    }

    /// Assemble single-element nodes into an [rows, cols] matrix.
    pub fn stack_scalars(&mut self, ids: &[NodeId], rows: usize, cols: usize) -> Result<NodeId> {
        if ids.len() != rows * cols || ids.is_empty() {
            return Err(Error::Dim(format!(
                "stack_scalars got {} parts for {rows}x{cols}",
                ids.len()
            )));
        }
        let mut data = Vec::with_capacity(ids.len());
        let mut ng = false;
        for &id in ids {
            if self.nodes[id].data.len() != 1 {
                return Err(Error::Dim("stack_scalars parts must be single-element".into()));
            }
            data.push(self.nodes[id].data[0]);
            ng |= self.needs(id);
        }
        self.push(vec![rows, cols], data, Op::StackScalars { parts: ids.to_vec() }, ng)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar node. Gradients accumulate into every
    /// node marked as needing them; leaves keep theirs for extraction.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::Dim("backward requires a scalar loss node".into()));
        }
        if !self.nodes[loss].needs_grad {
            return Ok(()); // nothing depends on a gradient-bearing leaf
        }
        self.nodes[loss].grad = Some(vec![S::ONE]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = std::mem::take(&mut self.nodes[i].op);
            self.backprop_node(i, &op)?;
            self.nodes[i].op = op;
        }
        // Defence against silent NaN in gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &node.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
            }
            }
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: NodeId) {
        if self.nodes[id].needs_grad && self.nodes[id].grad.is_none() {
            let n = self.nodes[id].data.len();
            self.nodes[id].grad = Some(vec![S::ZERO; n]);
        }
    }

    fn backprop_node(&mut self, i: NodeId, op: &Op<S>) -> Result<()> {
        macro_rules! wants {
            ($id:expr) => {
                self.nodes[$id].needs_grad
            };
        }
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.nodes[a].dims[0], self.nodes[a].dims[1]);
                let m = self.nodes[b].dims[1];
                let g = self.nodes[i].grad.clone().unwrap();
                if wants!(a) {
                    self.ensure_grad(a);
                    let bdat = &self.nodes[b].data;
                    let mut da = vec![S::ZERO; n * k];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        let darow = &mut da[r * k..(r + 1) * k];
                        for kk in 0..k {
                            darow[kk] = dotp(grow, &bdat[kk * m..(kk + 1) * m]);
                        }
                    }
                    axpy(self.nodes[a].grad.as_mut().unwrap(), &da);
                }
                if wants!(b) {
                    self.ensure_grad(b);
                    let adat = self.nodes[a].data.clone();
                    let db = self.nodes[b].grad.as_mut().unwrap();
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let aik = adat[r * k + kk];
                            let dbrow = &mut db[kk * m..(kk + 1) * m];
                            for j in 0..m {
                                dbrow[j] += aik * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let g = self.nodes[i].grad.clone().unwrap();
                for &p in &[*a, *b] {
                    if wants!(p) {
                        self.ensure_grad(p);
                        axpy(self.nodes[p].grad.as_mut().unwrap(), &g);
                    }
                }
            }
            Op::AddRow { x, row } => {
                let (x, row) = (*x, *row);
                let m = self.nodes[row].data.len();
                let g = self.nodes[i].grad.clone().unwrap();
                if wants!(x) {
                    self.ensure_grad(x);
                    axpy(self.nodes[x].grad.as_mut().unwrap(), &g);
                }
                if wants!(row) {
                    self.ensure_grad(row);
                    let dr = self.nodes[row].grad.as_mut().unwrap();
                    for chunk in g.chunks_exact(m) {
                        for (d, &gv) in dr.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let g = self.nodes[i].grad.clone().unwrap();
                if wants!(a) {
                    self.ensure_grad(a);
                    let bdat = self.nodes[b].data.clone();
                    let da = self.nodes[a].grad.as_mut().unwrap();
                    for ((d, &gv), &bv) in da.iter_mut().zip(&g).zip(&bdat) {
                        *d += gv * bv;
                    }
                }
                if wants!(b) {
                    self.ensure_grad(b);
                    let adat = self.nodes[a].data.clone();
                    let db = self.nodes[b].grad.as_mut().unwrap();
                    for ((d, &gv), &av) in db.iter_mut().zip(&g).zip(&adat) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for (d, &gv) in dx.iter_mut().zip(&g) {
                        *d += gv * c;
                    }
                }
            }
            Op::ScaleByScalar { x, s } => {
                let (x, s) = (*x, *s);
                let g = self.nodes[i].grad.clone().unwrap();
                let sv = self.nodes[s].data[0];
                if wants!(x) {
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for (d, &gv) in dx.iter_mut().zip(&g) {
                        *d += gv * sv;
                    }
                }
                if wants!(s) {
                    self.ensure_grad(s);
                    let xdat = &self.nodes[x].data;
                    let mut acc = S::ZERO;
                    for (&gv, &xv) in g.iter().zip(xdat) {
                        acc += gv * xv;
                    }
                    self.nodes[s].grad.as_mut().unwrap()[0] += acc;
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.ensure_grad(x);
                    let xdat = self.nodes[x].data.clone();
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(&xdat) {
                        if xv > S::ZERO {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.ensure_grad(x);
                    let xdat = self.nodes[x].data.clone();
                    let a = S::from_f64(GELU_ALPHA);
                    let bconst = S::from_f64(GELU_BETA);
                    let half = S::from_f64(0.5);
                    let three = S::from_f64(3.0);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for ((d, &gv), &v) in dx.iter_mut().zip(&g).zip(&xdat) {
                        let u = a * (v + bconst * v.powi(3));
                        let th = u.tanh();
                        let sech2 = S::ONE - th * th;
                        let du = a * (S::ONE + three * bconst * v * v);
                        *d += gv * (half * (S::ONE + th) + half * v * sech2 * du);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let y = self.nodes[i].data.clone();
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for ((d, &gv), &yv) in dx.iter_mut().zip(&g).zip(&y) {
                        *d += gv * yv * (S::ONE - yv);
                    }
                }
            }
            Op::Tanh { x } => {
                let x = *x;
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let y = self.nodes[i].data.clone();
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for ((d, &gv), &yv) in dx.iter_mut().zip(&g).zip(&y) {
                        *d += gv * (S::ONE - yv * yv);
                    }
                }
            }
            Op::Exp { x } => {
                let x = *x;
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let y = self.nodes[i].data.clone();
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for ((d, &gv), &yv) in dx.iter_mut().zip(&g).zip(&y) {
                        *d += gv * yv;
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let y = self.nodes[i].data.clone();
                    let (rows, n) = last_axis(&self.nodes[i].dims)?;
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for r in 0..rows {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let mut dot = S::ZERO;
                        for (&gv, &yv) in gs.iter().zip(ys) {
                            dot += gv * yv;
                        }
                        let dxr = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxr[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let g = self.nodes[i].grad.clone().unwrap();
                let (rows, d) = last_axis(&self.nodes[x].dims)?;
                let xdat = self.nodes[x].data.clone();
                let gdat = self.nodes[gamma].data.clone();
                let inv_d = S::from_f64(1.0 / d as f64);
                // Recompute per-row moments; cheaper than caching at these sizes.
                let mut xhat = vec![S::ZERO; d];
                for r in 0..rows {
                    let xs = &xdat[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let (mean, inv_std) = row_moments(xs, eps);
                    for j in 0..d {
                        xhat[j] = (xs[j] - mean) * inv_std;
                    }
                    if wants!(beta) {
                        self.ensure_grad(beta);
                        let db = self.nodes[beta].grad.as_mut().unwrap();
                        for (dbj, &gv) in db.iter_mut().zip(gs) {
                            *dbj += gv;
                        }
                    }
                    if wants!(gamma) {
                        self.ensure_grad(gamma);
                        let dg = self.nodes[gamma].grad.as_mut().unwrap();
                        for j in 0..d {
                            dg[j] += gs[j] * xhat[j];
                        }
                    }
                    if wants!(x) {
                        self.ensure_grad(x);
                        let mut sum_dxhat = S::ZERO;
                        let mut sum_dxhat_xhat = S::ZERO;
                        for j in 0..d {
                            let dxh = gs[j] * gdat[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[j];
                        }
                        let m1 = sum_dxhat * inv_d;
                        let m2 = sum_dxhat_xhat * inv_d;
                        let dx = self.nodes[x].grad.as_mut().unwrap();
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = gs[j] * gdat[j];
                            dxr[j] += inv_std * (dxh - m1 - xhat[j] * m2);
                        }
                    }
                }
            }
            Op::MeanRows { x } => {
                let x = *x;
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let (n, d) = (self.nodes[x].dims[0], self.nodes[x].dims[1]);
                    let inv = S::from_f64(1.0 / n as f64);
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for r in 0..n {
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxr[j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if wants!(x) {
                    let gv = self.nodes[i].grad.clone().unwrap()[0];
                    self.ensure_grad(x);
                    for d in self.nodes[x].grad.as_mut().unwrap().iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let g = self.nodes[i].grad.clone().unwrap();
                let width = *self.nodes[i].dims.last().unwrap();
                let mut off = 0;
                for &(p, rows) in parts {
                    let len = rows * width;
                    if wants!(p) {
                        self.ensure_grad(p);
                        axpy(self.nodes[p].grad.as_mut().unwrap(), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let d = self.nodes[x].dims[1];
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    axpy(&mut dx[start * d..start * d + g.len()], &g);
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let (n, len) = (self.nodes[i].dims[0], self.nodes[i].dims[1]);
                    let d = self.nodes[x].dims[1];
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for r in 0..n {
                        for j in 0..len {
                            dx[r * d + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let g = self.nodes[i].grad.clone().unwrap();
                let n = self.nodes[i].dims[0];
                let width = self.nodes[i].dims[1];
                let mut off = 0;
                for &(p, c) in parts {
                    if wants!(p) {
                        self.ensure_grad(p);
                        let dp = self.nodes[p].grad.as_mut().unwrap();
                        for r in 0..n {
                            for j in 0..c {
                                dp[r * c + j] += g[r * width + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let (m, n) = (self.nodes[i].dims[0], self.nodes[i].dims[1]);
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for a in 0..m {
                        for b in 0..n {
                            dx[b * m + a] += g[a * n + b];
                        }
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                let table = *table;
                if wants!(table) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let d = self.nodes[table].dims[1];
                    self.ensure_grad(table);
                    let dt = self.nodes[table].grad.as_mut().unwrap();
                    for (r, &idx) in indices.iter().enumerate() {
                        axpy(&mut dt[idx * d..(idx + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::UnfoldPatches { x, ph, pw } => {
                let (x, ph, pw) = (*x, *ph, *pw);
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let (c, h, w) = (
                        self.nodes[x].dims[0],
                        self.nodes[x].dims[1],
                        self.nodes[x].dims[2],
                    );
                    let (gh, gw) = (h / ph, w / pw);
                    let k = c * ph * pw;
                    self.ensure_grad(x);
                    let dx = self.nodes[x].grad.as_mut().unwrap();
                    for pi in 0..gh {
                        for pj in 0..gw {
                            let p = pi * gw + pj;
                            let gp = &g[p * k..(p + 1) * k];
                            let mut o = 0;
                            for ch in 0..c {
                                for di in 0..ph {
                                    for dj in 0..pw {
                                        dx[ch * h * w + (pi * ph + di) * w + (pj * pw + dj)] += gp[o];
                                        o += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv3d { input, kernel, pad, stride } => {
                let (input, kernel, pad, stride) = (*input, *kernel, *pad, *stride);
                let g = self.nodes[i].grad.clone().unwrap();
                let (t_in, c, h, w) = (
                    self.nodes[input].dims[0],
                    self.nodes[input].dims[1],
                    self.nodes[input].dims[2],
                    self.nodes[input].dims[3],
                );
                let (d, kt, ph, pw) = (
                    self.nodes[kernel].dims[0],
                    self.nodes[kernel].dims[2],
                    self.nodes[kernel].dims[3],
                    self.nodes[kernel].dims[4],
                );
                let t_out = self.nodes[i].dims[0];
                let (gh, gw) = (h / ph, w / pw);
                let n_patches = gh * gw;
                let ksz = c * kt * ph * pw;
                let inp = self.nodes[input].data.clone();
                let ker = self.nodes[kernel].data.clone();
                let mut dk = vec![S::ZERO; d * ksz];
                let mut din = vec![S::ZERO; t_in * c * h * w];
                let (want_k, want_in) = (wants!(kernel), wants!(input));
                for tau in 0..t_out {
                    for pi in 0..gh {
                        for pj in 0..gw {
                            let p = pi * gw + pj;
                            for m in 0..d {
                                let gv = g[(tau * n_patches + p) * d + m];
                                if gv == S::ZERO {
                                    continue;
                                }
                                let mut ki = 0;
                                for ch in 0..c {
                                    for dt in 0..kt {
                                        let f = (tau * stride + dt) as isize - pad as isize;
                                        if f < 0 || f >= t_in as isize {
                                            ki += ph * pw;
                                            continue;
                                        }
                                        let base = f as usize * c * h * w + ch * h * w;
                                        for di in 0..ph {
                                            let rowb = base + (pi * ph + di) * w + pj * pw;
                                            for dj in 0..pw {
                                                if want_k {
                                                    dk[m * ksz + ki] += gv * inp[rowb + dj];
                                                }
                                                if want_in {
                                                    din[rowb + dj] += gv * ker[m * ksz + ki];
                                                }
                                                ki += 1;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_k {
                    self.ensure_grad(kernel);
                    axpy(self.nodes[kernel].grad.as_mut().unwrap(), &dk);
                }
                if want_in {
                    self.ensure_grad(input);
                    axpy(self.nodes[input].grad.as_mut().unwrap(), &din);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if wants!(x) {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.ensure_grad(x);
                    axpy(self.nodes[x].grad.as_mut().unwrap(), &g);
                }
            }
            Op::Cosine { a, b, inv_na, inv_nb } => {
                let (a, b, inv_na, inv_nb) = (*a, *b, *inv_na, *inv_nb);
                let gv = self.nodes[i].grad.clone().unwrap()[0];
                let cval = self.nodes[i].data[0];
                let adat = self.nodes[a].data.clone();
                let bdat = self.nodes[b].data.clone();
                if wants!(a) {
                    self.ensure_grad(a);
                    let da = self.nodes[a].grad.as_mut().unwrap();
                    for j in 0..adat.len() {
                        let ahat = adat[j] * inv_na;
                        let bhat = bdat[j] * inv_nb;
                        da[j] += gv * (bhat - cval * ahat) * inv_na;
                    }
                }
                if wants!(b) {
                    self.ensure_grad(b);
                    let db = self.nodes[b].grad.as_mut().unwrap();
                    for j in 0..bdat.len() {
                        let ahat = adat[j] * inv_na;
                        let bhat = bdat[j] * inv_nb;
                        db[j] += gv * (ahat - cval * bhat) * inv_nb;
                    }
                }
            }
            Op::CosineRows { v, w, inv_nv, inv_nw } => {
                let (v, w) = (*v, *w);
                let g = self.nodes[i].grad.clone().unwrap();
                let s = self.nodes[i].data.clone();
                let (bv, bw) = (self.nodes[i].dims[0], self.nodes[i].dims[1]);
                let d = self.nodes[v].dims[1];
                let vdat = self.nodes[v].data.clone();
                let wdat = self.nodes[w].data.clone();
                if wants!(v) {
                    self.ensure_grad(v);
                    let dv = self.nodes[v].grad.as_mut().unwrap();
                    for a in 0..bv {
                        for j in 0..bw {
                            let gij = g[a * bw + j];
                            if gij == S::ZERO {
                                continue;
                            }
                            let sij = s[a * bw + j];
                            for t in 0..d {
                                let vhat = vdat[a * d + t] * inv_nv[a];
                                let what = wdat[j * d + t] * inv_nw[j];
                                dv[a * d + t] += gij * (what - sij * vhat) * inv_nv[a];
                            }
                        }
                    }
                }
                if wants!(w) {
                    self.ensure_grad(w);
                    let dw = self.nodes[w].grad.as_mut().unwrap();
                    for a in 0..bv {
                        for j in 0..bw {
                            let gij = g[a * bw + j];
                            if gij == S::ZERO {
                                continue;
                            }
                            let sij = s[a * bw + j];
                            for t in 0..d {
                                let vhat = vdat[a * d + t] * inv_nv[a];
                                let what = wdat[j * d + t] * inv_nw[j];
                                dw[j * d + t] += gij * (vhat - sij * what) * inv_nw[j];
                            }
                        }
                    }
                }
            }
            Op::SymmetricCe { s, scale, row_sm, col_sm } => {
                let s = *s;
                if wants!(s) {
                    let gv = self.nodes[i].grad.clone().unwrap()[0];
                    let b = self.nodes[s].dims[0];
                    let coef = gv * *scale * S::from_f64(1.0 / b as f64);
                    self.ensure_grad(s);
                    let ds = self.nodes[s].grad.as_mut().unwrap();
                    for r in 0..b {
                        for cidx in 0..b {
                            let idx = r * b + cidx;
                            let diag = if r == cidx { S::from_f64(2.0) } else { S::ZERO };
                            ds[idx] += coef * (row_sm[idx] + col_sm[idx] - diag);
                        }
                    }
                }
            }
            Op::StackScalars { parts } => {
                let g = self.nodes[i].grad.clone().unwrap();
                for (j, &p) in parts.iter().enumerate() {
                    if wants!(p) {
                        self.ensure_grad(p);
                        self.nodes[p].grad.as_mut().unwrap()[0] += g[j];
                    }
                }
            }
        }
        Ok(())
    }
}

// ---- kernels -------------------------------------------------------------

#[inline]
fn dotp<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn axpy<S: Scalar>(dst: &mut [S], src: &[S]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// C += A x B with the k-loop outside the j-loop so both B and C rows are
/// walked contiguously (autovectorizes well).
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

fn last_axis(dims: &[usize]) -> Result<(usize, usize)> {
    match dims {
        [n] => Ok((1, *n)),
        [r, n] => Ok((*r, *n)),
        _ => Err(Error::Dim(format!("expected rank 1 or 2, got {dims:?}"))),
    }
}

fn vec_len(dims: &[usize]) -> Result<usize> {
    match dims {
        [d] => Ok(*d),
        [1, d] => Ok(*d),
        _ => Err(Error::Dim(format!("expected a vector, got {dims:?}"))),
    }
}

fn row_moments<S: Scalar>(xs: &[S], eps: S) -> (S, S) {
    let d = xs.len();
    let inv_d = S::from_f64(1.0 / d as f64);
    let mean = pairwise_sum(xs) * inv_d;
    let mut var = S::ZERO;
    for &x in xs {
        let c = x - mean;
        var += c * c;
    }
    var *= inv_d;
    (mean, S::ONE / (var + eps).sqrt())
}

/// Normalize each row to unit L2 norm; `None` if any row has zero norm.
/// Inverse norms are appended to `inv_out`.
fn normalized_rows<S: Scalar>(data: &[S], rows: usize, d: usize, inv_out: &mut Vec<S>) -> Option<Vec<S>> {
    let mut out = vec![S::ZERO; rows * d];
    for r in 0..rows {
        let row = &data[r * d..(r + 1) * d];
        let norm = pairwise_dot(row, row).sqrt();
        if norm == S::ZERO {
            return None;
        }
        let inv = S::ONE / norm;
        inv_out.push(inv);
        for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = x * inv;
        }
    }
    Some(out)
}

/// Stable log-sum-exp; fills `sm_out` with the softmax of `xs`.
fn log_sum_exp<S: Scalar>(xs: &[S], sm_out: &mut [S]) -> S {
    let mut mx = xs[0];
    for &x in &xs[1..] {
        mx = mx.max(x);
    }
    for (o, &x) in sm_out.iter_mut().zip(xs) {
        *o = (x - mx).exp();
    }
    let z = pairwise_sum(sm_out);
    for o in sm_out.iter_mut() {
        *o /= z;
    }
    mx + z.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf64(tape: &mut Tape<f64>, dims: &[usize], data: &[f64]) -> NodeId {
        tape.leaf_from(dims.to_vec(), data.to_vec(), true).unwrap()
    }

    #[test]
    fn linear_identity_case() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[2], &[1.0, 2.0]);
        let w = leaf64(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = leaf64(&mut t, &[2], &[0.0, 0.0]);
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0]);
    }

    #[test]
    fn linear_bias_case() {
        // x=[1,1], W=I, b=[3,4] -> [4,5]
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[2], &[1.0, 1.0]);
        let w = leaf64(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = leaf64(&mut t, &[2], &[3.0, 4.0]);
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y), &[4.0, 5.0]);
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[3], &[1.0; 3]);
        let w = leaf64(&mut t, &[2, 2], &[1.0; 4]);
        let b = leaf64(&mut t, &[2], &[0.0; 2]);
        assert!(matches!(t.linear(x, w, b), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[2], &[0.0, 0.0]);
        let y = t.softmax_rows(x, None).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);

        let x2 = leaf64(&mut t, &[2], &[1000.0, 0.0]);
        let y2 = t.softmax_rows(x2, None).unwrap();
        assert!((t.value(y2)[0] - 1.0).abs() < 1e-12);
        assert!(t.value(y2)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_scripted_values() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let y = t.softmax_rows(x, None).unwrap();
        let v = t.value(y);
        // Frozen from the closed form e^x_i / sum_j e^x_j.
        assert!((v[0] - 0.09003057317038046).abs() < 1e-12);
        assert!((v[1] - 0.24472847105479767).abs() < 1e-12);
        assert!((v[2] - 0.6652409557748219).abs() < 1e-12);
        let s: f64 = v.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed_by_eps() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[4], &[5.0, 5.0, 5.0, 5.0]);
        let g = leaf64(&mut t, &[4], &[1.0; 4]);
        let b = leaf64(&mut t, &[4], &[0.0; 4]);
        let y = t.layer_norm_rows(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_unit_variance_row() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[2], &[1.0, -1.0]);
        let g = leaf64(&mut t, &[2], &[1.0, 1.0]);
        let b = leaf64(&mut t, &[2], &[0.0, 0.0]);
        let y = t.layer_norm_rows(x, g, b, 1e-12).unwrap();
        assert!((t.value(y)[0] - 1.0).abs() < 1e-6);
        assert!((t.value(y)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_single_token_weight_is_one() {
        // With L=1 the softmax row is [[1.0]] regardless of projections.
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[1, 4], &[0.3, -0.2, 0.5, 0.9]);
        let mut ids = Vec::new();
        for _ in 0..4 {
            let w = leaf64(&mut t, &[4, 4], &(0..16).map(|i| (i as f64 * 0.13).sin()).collect::<Vec<_>>());
            let b = leaf64(&mut t, &[4], &[0.01, 0.02, 0.03, 0.04]);
            ids.push((w, b));
        }
        let w = AttnWeights {
            wq: ids[0].0, bq: ids[0].1,
            wk: ids[1].0, bk: ids[1].1,
            wv: ids[2].0, bv: ids[2].1,
            wo: ids[3].0, bo: ids[3].1,
        };
        let y = t.multi_head_attention(x, x, x, 2, None, &w).unwrap();
        // Value path must equal out-proj(v-proj(x)) exactly since weights=1.
        let vp = t.linear(x, w.wv, w.bv).unwrap();
        let expect = t.linear(vp, w.wo, w.bo).unwrap();
        for (a, b) in t.value(y).iter().zip(t.value(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_zero_weights_zero_output() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[3, 4], &[0.5; 12]);
        let zw = leaf64(&mut t, &[4, 4], &[0.0; 16]);
        let zb = leaf64(&mut t, &[4], &[0.0; 4]);
        let w = AttnWeights { wq: zw, bq: zb, wk: zw, bk: zb, wv: zw, bv: zb, wo: zw, bo: zb };
        let y = t.multi_head_attention(x, x, x, 2, None, &w).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[2, 6], &[0.1; 12]);
        let w = leaf64(&mut t, &[6, 6], &[0.0; 36]);
        let b = leaf64(&mut t, &[6], &[0.0; 6]);
        let aw = AttnWeights { wq: w, bq: b, wk: w, bk: b, wv: w, bv: b, wo: w, bo: b };
        assert!(matches!(
            t.multi_head_attention(x, x, x, 4, None, &aw),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lstm_zero_params_zero_state() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[1, 3], &[0.7, -0.4, 0.2]);
        let h = leaf64(&mut t, &[1, 2], &[0.0, 0.0]);
        let c = leaf64(&mut t, &[1, 2], &[0.0, 0.0]);
        let wx = leaf64(&mut t, &[3, 8], &[0.0; 24]);
        let wh = leaf64(&mut t, &[2, 8], &[0.0; 16]);
        let b = leaf64(&mut t, &[8], &[0.0; 8]);
        let (h2, c2) = t.lstm_step(x, h, c, &LstmWeights { w_x: wx, w_h: wh, bias: b }).unwrap();
        assert!(t.value(h2).iter().all(|&v| v == 0.0));
        assert!(t.value(c2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_forget_gate_preserves_cell() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[1, 3], &[0.7, -0.4, 0.2]);
        let h = leaf64(&mut t, &[1, 2], &[0.0, 0.0]);
        let c = leaf64(&mut t, &[1, 2], &[0.31, -0.77]);
        let wx = leaf64(&mut t, &[3, 8], &[0.0; 24]);
        let wh = leaf64(&mut t, &[2, 8], &[0.0; 16]);
        // forget-gate slots are [dh..2dh)
        let mut bias = vec![0.0; 8];
        bias[2] = 100.0;
        bias[3] = 100.0;
        let b = leaf64(&mut t, &[8], &bias);
        let (_, c2) = t.lstm_step(x, h, c, &LstmWeights { w_x: wx, w_h: wh, bias: b }).unwrap();
        assert!((t.value(c2)[0] - 0.31).abs() < 1e-12);
        assert!((t.value(c2)[1] + 0.77).abs() < 1e-12);
    }

    #[test]
    fn mean_rows_identity_and_symmetry() {
        let mut t = Tape::<f64>::new();
        let single = leaf64(&mut t, &[1, 3], &[1.0, 2.0, 3.0]);
        let m = t.mean_rows(single).unwrap();
        assert_eq!(t.value(m), &[1.0, 2.0, 3.0]);

        let two = leaf64(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m2 = t.mean_rows(two).unwrap();
        assert_eq!(t.value(m2), &[0.5, 0.5]);
    }

    #[test]
    fn mean_rows_permutation_invariance() {
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 31 % 17) as f64).sin()).collect();
        let a = leaf64(&mut t, &[6, 4], &data);
        let mut permuted = vec![0.0; 24];
        let perm = [3, 0, 5, 1, 4, 2];
        for (r, &p) in perm.iter().enumerate() {
            permuted[r * 4..(r + 1) * 4].copy_from_slice(&data[p * 4..(p + 1) * 4]);
        }
        let b = leaf64(&mut t, &[6, 4], &permuted);
        let ma = t.mean_rows(a).unwrap();
        let mb = t.mean_rows(b).unwrap();
        for (x, y) in t.value(ma).iter().zip(t.value(mb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_basics() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, &[2], &[1.0, 2.0]);
        let b = leaf64(&mut t, &[2], &[2.0, 1.0]);
        let c = t.cosine(a, b).unwrap();
        assert!((t.value(c)[0] - 0.8).abs() < 1e-12);

        let same = t.cosine(a, a).unwrap();
        assert!((t.value(same)[0] - 1.0).abs() < 1e-12);

        let e1 = leaf64(&mut t, &[2], &[1.0, 0.0]);
        let e2 = leaf64(&mut t, &[2], &[0.0, 1.0]);
        let orth = t.cosine(e1, e2).unwrap();
        assert_eq!(t.value(orth)[0], 0.0);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, &[2], &[0.0, 0.0]);
        let b = leaf64(&mut t, &[2], &[1.0, 0.0]);
        assert!(matches!(t.cosine(a, b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut t = Tape::<f64>::new();
        let a = leaf64(&mut t, &[3], &[0.3, -1.2, 0.8]);
        let a5 = leaf64(&mut t, &[3], &[1.5, -6.0, 4.0]);
        let b = leaf64(&mut t, &[3], &[0.4, 0.9, -0.1]);
        let c1 = t.cosine(a, b).unwrap();
        let c2 = t.cosine(a5, b).unwrap();
        let c3 = t.cosine(b, a).unwrap();
        assert!((t.value(c1)[0] - t.value(c2)[0]).abs() < 1e-9);
        assert!((t.value(c1)[0] - t.value(c3)[0]).abs() < 1e-9);
    }

    #[test]
    fn conv3d_window_sums() {
        // All-ones kernel over a constant-1 single-channel clip: the centre
        // frame sees 3 frames x 4 pixels = 12, the edges see 8.
        let mut t = Tape::<f64>::new();
        let clip = leaf64(&mut t, &[3, 1, 2, 2], &[1.0; 12]);
        let ker = leaf64(&mut t, &[1, 1, 3, 2, 2], &[1.0; 12]);
        let y = t.conv3d(clip, ker, 1, 1).unwrap();
        assert_eq!(t.dims(y), &[3, 1, 1]);
        assert_eq!(t.value(y), &[8.0, 12.0, 8.0]);
    }

    #[test]
    fn conv3d_preserves_temporal_length() {
        let mut t = Tape::<f64>::new();
        for tt in 1..=5usize {
            let clip = t
                .leaf_from(vec![tt, 1, 2, 2], (0..tt * 4).map(|i| i as f64 * 0.1).collect(), false)
                .unwrap();
            let ker = leaf64(&mut t, &[2, 1, 3, 2, 2], &[0.5; 24]);
            let y = t.conv3d(clip, ker, 1, 1).unwrap();
            assert_eq!(t.dims(y)[0], tt);
        }
    }

    #[test]
    fn symmetric_ce_known_values() {
        // B=1: single-class softmax, zero loss.
        let mut t = Tape::<f64>::new();
        let s1 = leaf64(&mut t, &[1, 1], &[3.7]);
        let (_, bd) = t.symmetric_ce(s1, 1.0).unwrap();
        assert_eq!(bd.l, 0.0);

        // B=2 all-equal: uniform softmax, L = 2 ln 2.
        let s2 = leaf64(&mut t, &[2, 2], &[0.4; 4]);
        let (_, bd2) = t.symmetric_ce(s2, 1.0).unwrap();
        assert!((bd2.l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bd2.l - (bd2.l_v2t + bd2.l_t2v)).abs() < 1e-12);

        // Strong diagonal: L = 2 ln(1 + e^-10).
        let s3 = leaf64(&mut t, &[2, 2], &[10.0, 0.0, 0.0, 10.0]);
        let (_, bd3) = t.symmetric_ce(s3, 1.0).unwrap();
        let expect = 2.0 * (1.0 + (-10.0f64).exp()).ln();
        assert!((bd3.l - expect).abs() < 1e-12);
        assert!((bd3.l - 9.0800e-5).abs() < 1e-8);
    }

    #[test]
    fn symmetric_ce_rejects_non_square() {
        let mut t = Tape::<f64>::new();
        let s = leaf64(&mut t, &[2, 3], &[0.0; 6]);
        assert!(matches!(t.symmetric_ce(s, 1.0), Err(Error::Batch(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[1], &[1e308]);
        let y = t.mul(x, x);
        assert!(matches!(y, Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_through_simple_chain() {
        // loss = sum((x*2)^2) -> dl/dx = 8x elementwise... via mul+scale.
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[3], &[1.0, -2.0, 0.5]);
        let two = t.scale(x, 2.0).unwrap();
        let sq = t.mul(two, two).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        assert_eq!(g, &[8.0, -16.0, 4.0]);
    }

    #[test]
    fn masked_softmax_zeroes_blocked_positions() {
        let mut t = Tape::<f64>::new();
        let x = leaf64(&mut t, &[2, 2], &[5.0, 1.0, 0.3, 0.4]);
        let mask = [false, true, false, false]; // row 0 blocks col 1
        let y = t.softmax_rows(x, Some(&mask)).unwrap();
        let v = t.value(y);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-12);
    }
}
