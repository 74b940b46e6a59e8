//! Reverse-mode automatic differentiation over a recorded operation trace.
//!
//! Every forward op appends a node holding its output tensor and the op
//! descriptor. `backward` allocates fresh adjoint buffers, sweeps the trace
//! in reverse applying each op's registered adjoint, and accumulates (+=)
//! into `Parameter.grad` at parameter leaves. Nodes are appended after their
//! inputs, so the trace is topologically ordered by construction.

use crate::error::Error;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matmul_2d, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { a: VarId, c: f64 },
    AddBias { a: VarId, b: VarId },
    MatMul { a: VarId, b: VarId },
    Transpose { a: VarId },
    Reshape { a: VarId },
    Relu { a: VarId },
    Exp { a: VarId },
    Log { a: VarId },
    SumAll { a: VarId },
    MeanAll { a: VarId },
    SliceRows { a: VarId, start: usize },
    SliceCols { a: VarId, start: usize },
    ConcatRows { parts: Vec<VarId> },
    ConcatCols { parts: Vec<VarId> },
    GatherRows { a: VarId, idx: Vec<usize> },
    Softmax { a: VarId },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, eps: f64 },
    Conv2d { x: VarId, w: VarId, b: VarId, stride: usize },
    MaskedLse { a: VarId, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation trace. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims_2d(t: &Tensor, what: &str) -> (usize, usize) {
    assert_eq!(t.shape.len(), 2, "{what}: expected 2D tensor, got shape {:?}", t.shape);
    (t.shape[0], t.shape[1])
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

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Errors if any entry of `id` is NaN or infinite, naming the producer.
    pub fn check_finite(&self, id: VarId, producer: &str) -> Result<(), Error> {
        if self.value(id).all_finite() {
            Ok(())
        } else {
            Err(Error::Runtime(format!("non-finite values produced by {producer}")))
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Constant input: receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf { param: None })
    }

    /// Parameter leaf: `backward` accumulates into the parameter's grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> VarId {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    // ── Elementwise and scalar ──────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add: shape {:?} vs {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "sub: shape {:?} vs {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mul: shape {:?} vs {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale { a, c })
    }

    /// Adds a rank-1 bias over the last axis: a[..., j] + b[j].
    pub fn add_bias(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta.last_dim();
        assert_eq!(
            tb.shape,
            vec![d],
            "add_bias: bias shape {:?} vs last axis {} of {:?}",
            tb.shape,
            d,
            ta.shape
        );
        let mut data = ta.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data[i % d];
        }
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::AddBias { a, b })
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Relu { a })
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x.exp()).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Exp { a })
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x.ln()).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Log { a })
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let s: f64 = ta.data.iter().sum();
        let n = ta.numel() as f64;
        self.push(Tensor::scalar(s / n), Op::MeanAll { a })
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (m, k) = dims_2d(self.value(a), "matmul lhs");
        let (kb, n) = dims_2d(self.value(b), "matmul rhs");
        assert_eq!(
            k, kb,
            "matmul: inner dims differ, lhs {:?} vs rhs {:?}",
            self.value(a).shape,
            self.value(b).shape
        );
        let data = matmul_2d(&self.value(a).data, &self.value(b).data, m, k, n);
        self.push(Tensor { shape: vec![m, n], data }, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let (r, c) = dims_2d(self.value(a), "transpose");
        let src = &self.value(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor { shape: vec![c, r], data }, Op::Transpose { a })
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> VarId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.value(a).numel(),
            "reshape: {:?} incompatible with shape {:?}",
            shape,
            self.value(a).shape
        );
        let data = self.value(a).data.clone();
        self.push(Tensor { shape, data }, Op::Reshape { a })
    }

    // ── Row and column structure (2D) ───────────────────────────────

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let (r, c) = dims_2d(self.value(a), "slice_rows");
        assert!(start + len <= r, "slice_rows: {start}+{len} out of {r} rows");
        let data = self.value(a).data[start * c..(start + len) * c].to_vec();
        self.push(Tensor { shape: vec![len, c], data }, Op::SliceRows { a, start })
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let (r, c) = dims_2d(self.value(a), "slice_cols");
        assert!(start + len <= c, "slice_cols: {start}+{len} out of {c} cols");
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(Tensor { shape: vec![r, len], data }, Op::SliceCols { a, start })
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_rows: empty part list");
        let (_, c) = dims_2d(self.value(parts[0]), "concat_rows");
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = dims_2d(self.value(p), "concat_rows part");
            assert_eq!(pc, c, "concat_rows: column mismatch {pc} vs {c}");
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        self.push(Tensor { shape: vec![rows, c], data }, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let (r, _) = dims_2d(self.value(parts[0]), "concat_cols");
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = dims_2d(self.value(p), "concat_cols part");
                assert_eq!(pr, r, "concat_cols: row mismatch {pr} vs {r}");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.value(p).data;
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(Tensor { shape: vec![r, total], data }, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Gathers rows by index; duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: VarId, idx: &[usize]) -> VarId {
        let (r, c) = dims_2d(self.value(a), "gather_rows");
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows: index {i} out of {r} rows");
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor { shape: vec![idx.len(), c], data },
            Op::GatherRows { a, idx: idx.to_vec() },
        )
    }

    // ── Neural-net ops ──────────────────────────────────────────────

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let d = ta.last_dim();
        let rows = ta.rows_2d();
        let mut data = vec![0.0; ta.numel()];
        for r in 0..rows {
            let row = &ta.data[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                data[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                data[r * d + j] /= sum;
            }
        }
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Softmax { a })
    }

    /// Layer normalization over the last axis with learnable gamma/beta.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let tx = self.value(x);
        let d = tx.last_dim();
        assert_eq!(self.value(gamma).shape, vec![d], "layer_norm: gamma shape");
        assert_eq!(self.value(beta).shape, vec![d], "layer_norm: beta shape");
        let rows = tx.rows_2d();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let src = &self.value(x).data;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape.clone();
        self.push(Tensor { shape, data }, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Valid (no-padding) strided 2D convolution:
    /// x (N, ci, H, W) * w (co, ci, kh, kw) + b (co) -> (N, co, Ho, Wo).
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize) -> VarId {
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        assert_eq!(xs.len(), 4, "conv2d: input must be (N,c,H,W), got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d: kernel must be (co,ci,kh,kw), got {ws:?}");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, wci, "conv2d: input channels {ci} vs kernel channels {wci}");
        assert!(kh <= h && kw <= wd, "conv2d: kernel {kh}x{kw} larger than input {h}x{wd}");
        assert_eq!(self.value(b).shape, vec![co], "conv2d: bias shape");
        let ho = (h - kh) / stride + 1;
        let wo = (wd - kw) / stride + 1;

        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let mut out = vec![0.0; n * co * ho * wo];
        for ni in 0..n {
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bv[oc];
                        for ic in 0..ci {
                            let xbase = ((ni * ci + ic) * h + oy * stride) * wd + ox * stride;
                            let wbase = ((oc * ci + ic) * kh) * kw;
                            for ky in 0..kh {
                                let xrow = xbase + ky * wd;
                                let wrow = wbase + ky * kw;
                                for kx in 0..kw {
                                    acc += xv[xrow + kx] * wv[wrow + kx];
                                }
                            }
                        }
                        out[((ni * co + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        self.push(
            Tensor { shape: vec![n, co, ho, wo], data: out },
            Op::Conv2d { x, w, b, stride },
        )
    }

    /// Per-row log-sum-exp restricted to `mask` (row-major over a 2D input).
    /// Rows with an empty mask yield 0.0 and propagate no gradient.
    pub fn masked_lse(&mut self, a: VarId, mask: &[bool]) -> VarId {
        let (r, c) = dims_2d(self.value(a), "masked_lse");
        assert_eq!(mask.len(), r * c, "masked_lse: mask length {} vs {}x{}", mask.len(), r, c);
        let src = &self.value(a).data;
        let mut out = vec![0.0; r];
        for i in 0..r {
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if mask[i * c + j] {
                    max = max.max(src[i * c + j]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // empty row
            }
            let mut sum = 0.0;
            for j in 0..c {
                if mask[i * c + j] {
                    sum += (src[i * c + j] - max).exp();
                }
            }
            out[i] = max + sum.ln();
        }
        self.push(Tensor { shape: vec![r], data: out }, Op::MaskedLse { a, mask: mask.to_vec() })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; accumulates into `Parameter.grad`.
    pub fn backward(&self, loss: VarId, store: &mut ParamStore) {
        assert!(
            self.value(loss).is_scalar(),
            "backward: loss must be scalar, got shape {:?}",
            self.value(loss).shape
        );
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        store.accumulate_grad(*pid, &g);
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut adj, *a, &g.data);
                    self.accumulate(&mut adj, *b, &g.data);
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut adj, *a, &g.data);
                    let neg: Vec<f64> = g.data.iter().map(|v| -v).collect();
                    self.accumulate(&mut adj, *b, &neg);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> =
                        g.data.iter().zip(&self.value(*b).data).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> =
                        g.data.iter().zip(&self.value(*a).data).map(|(g, x)| g * x).collect();
                    self.accumulate(&mut adj, *a, &da);
                    self.accumulate(&mut adj, *b, &db);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = g.data.iter().map(|v| v * c).collect();
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::AddBias { a, b } => {
                    self.accumulate(&mut adj, *a, &g.data);
                    let d = self.value(*b).numel();
                    let mut db = vec![0.0; d];
                    for (i, v) in g.data.iter().enumerate() {
                        db[i % d] += v;
                    }
                    self.accumulate(&mut adj, *b, &db);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let nn = self.value(*b).shape[1];
                    // dA = g * B^T
                    let bt = transpose_flat(&self.value(*b).data, k, nn);
                    let da = matmul_2d(&g.data, &bt, m, nn, k);
                    // dB = A^T * g
                    let at = transpose_flat(&self.value(*a).data, m, k);
                    let db = matmul_2d(&at, &g.data, k, m, nn);
                    self.accumulate(&mut adj, *a, &da);
                    self.accumulate(&mut adj, *b, &db);
                }
                Op::Transpose { a } => {
                    let (r, c) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    // g has shape (c, r); transpose back
                    let da = transpose_flat(&g.data, c, r);
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::Reshape { a } => {
                    self.accumulate(&mut adj, *a, &g.data);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::Exp { a } => {
                    let da: Vec<f64> =
                        g.data.iter().zip(&self.nodes[i].value.data).map(|(g, e)| g * e).collect();
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::Log { a } => {
                    let da: Vec<f64> =
                        g.data.iter().zip(&self.value(*a).data).map(|(g, x)| g / x).collect();
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::SumAll { a } => {
                    let da = vec![g.data[0]; self.value(*a).numel()];
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::MeanAll { a } => {
                    let n = self.value(*a).numel();
                    let da = vec![g.data[0] / n as f64; n];
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::SliceRows { a, start } => {
                    let (_, c) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let mut da = vec![0.0; self.value(*a).numel()];
                    da[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::SliceCols { a, start } => {
                    let (r, c) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let len = g.shape[1];
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..len {
                            da[i * c + start + j] = g.data[i * len + j];
                        }
                    }
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.accumulate(&mut adj, p, &g.data[off..off + n]);
                        off += n;
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = g.shape[1];
                    let r = g.shape[0];
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).shape[1];
                        let mut dp = vec![0.0; r * w];
                        for i in 0..r {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g.data[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(&mut adj, p, &dp);
                        off += w;
                    }
                }
                Op::GatherRows { a, idx } => {
                    let c = self.value(*a).shape[1];
                    let mut da = vec![0.0; self.value(*a).numel()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            da[src * c + j] += g.data[r * c + j];
                        }
                    }
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::Softmax { a } => {
                    let out = &self.nodes[i].value;
                    let d = out.last_dim();
                    let rows = out.rows_2d();
                    let mut da = vec![0.0; out.numel()];
                    for r in 0..rows {
                        let s = &out.data[r * d..(r + 1) * d];
                        let gr = &g.data[r * d..(r + 1) * d];
                        let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                        for j in 0..d {
                            da[r * d + j] = s[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(&mut adj, *a, &da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let tx = self.value(*x);
                    let d = tx.last_dim();
                    let rows = tx.rows_2d();
                    let gam = &self.value(*gamma).data;
                    let mut dx = vec![0.0; tx.numel()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        let row = &tx.data[r * d..(r + 1) * d];
                        let gr = &g.data[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(g, gm)| g * gm).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                            dx[r * d + j] = inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(&mut adj, *x, &dx);
                    self.accumulate(&mut adj, *gamma, &dgamma);
                    self.accumulate(&mut adj, *beta, &dbeta);
                }
                Op::Conv2d { x, w, b, stride } => {
                    let xs = &self.value(*x).shape;
                    let ws = &self.value(*w).shape;
                    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                    let ho = (h - kh) / stride + 1;
                    let wo = (wd - kw) / stride + 1;
                    let xv = &self.value(*x).data;
                    let wv = &self.value(*w).data;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    let mut db = vec![0.0; co];
                    for ni in 0..n {
                        for oc in 0..co {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gv = g.data[((ni * co + oc) * ho + oy) * wo + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    db[oc] += gv;
                                    for ic in 0..ci {
                                        let xbase =
                                            ((ni * ci + ic) * h + oy * stride) * wd + ox * stride;
                                        let wbase = ((oc * ci + ic) * kh) * kw;
                                        for ky in 0..kh {
                                            let xrow = xbase + ky * wd;
                                            let wrow = wbase + ky * kw;
                                            for kx in 0..kw {
                                                dx[xrow + kx] += gv * wv[wrow + kx];
                                                dw[wrow + kx] += gv * xv[xrow + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(&mut adj, *x, &dx);
                    self.accumulate(&mut adj, *w, &dw);
                    self.accumulate(&mut adj, *b, &db);
                }
                Op::MaskedLse { a, mask } => {
                    let ta = self.value(*a);
                    let (r, c) = (ta.shape[0], ta.shape[1]);
                    let out = &self.nodes[i].value.data;
                    let mut da = vec![0.0; r * c];
                    for m in 0..r {
                        if g.data[m] == 0.0 {
                            continue;
                        }
                        let any = mask[m * c..(m + 1) * c].iter().any(|&b| b);
                        if !any {
                            continue; // empty row: no gradient by definition
                        }
                        for j in 0..c {
                            if mask[m * c + j] {
                                da[m * c + j] = g.data[m] * (ta.data[m * c + j] - out[m]).exp();
                            }
                        }
                    }
                    self.accumulate(&mut adj, *a, &da);
                }
            }
        }
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], id: VarId, delta: &[f64]) {
        match &mut adj[id.0] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                let shape = self.value(id).shape.clone();
                adj[id.0] = Some(Tensor::new(shape, delta.to_vec()));
            }
        }
    }
}

fn transpose_flat(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Sinusoidal positional table: row `pos` holds the standard absolute
/// encoding sin(pos / 10000^(2i/d)) and cos at alternating columns.
pub fn sinusoidal_table(n_pos: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n_pos, d]);
    for pos in 0..n_pos {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            t.data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..16).map(|v| v as f64 * 0.1).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 4, 4], img.clone()));
        let w = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, b, 1);
        assert_eq!(tape.value(y).shape, vec![1, 1, 4, 4]);
        assert_eq!(tape.value(y).data, img);
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![3], vec![5.0, -1.0, 2.0]));
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let loss = tape.sum_all(v);
        tape.backward(loss, &mut store);
        assert_eq!(store.grad(p).data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![2], vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let sq = tape.mul(v, v);
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut store);
        assert_eq!(store.grad(p).data, vec![2.0, 4.0]);
    }

    #[test]
    fn backward_is_additive() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![2], vec![3.0, -4.0]));
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let sq = tape.mul(v, v);
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut store);
        let once = store.grad(p).data.clone();
        tape.backward(loss, &mut store);
        let twice = store.grad(p).data.clone();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * a, "second backward must exactly double grads");
        }
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![2], vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        tape.backward(v, &mut store);
    }

    #[test]
    #[should_panic(expected = "add: shape")]
    fn add_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        tape.add(a, b);
    }

    #[test]
    fn forward_ops_are_pure() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.5, 0.0]));
        let y1 = tape.softmax(x);
        let y2 = tape.softmax(x);
        assert_eq!(tape.value(y1).data, tape.value(y2).data);
        assert_eq!(
            tape.value(x).data,
            vec![0.3, -0.7, 1.5, 0.0],
            "inputs must not be mutated"
        );
    }

    #[test]
    fn masked_lse_matches_direct() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let mask = vec![true, false, true, false, false, false];
        let y = tape.masked_lse(x, &mask);
        let expect0 = (1f64.exp() + 3f64.exp()).ln();
        assert!(close(tape.value(y).data[0], expect0, 1e-12));
        assert_eq!(tape.value(y).data[1], 0.0, "empty row yields 0");
    }

    #[test]
    fn sinusoidal_table_basics() {
        let t = sinusoidal_table(4, 6);
        assert_eq!(t.shape, vec![4, 6]);
        // pos 0: sin(0)=0, cos(0)=1 alternating
        assert_eq!(t.data[0], 0.0);
        assert_eq!(t.data[1], 1.0);
        // rows differ
        assert_ne!(t.data[6..12], t.data[12..18]);
    }
}
