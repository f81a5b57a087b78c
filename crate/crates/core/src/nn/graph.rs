//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. Leaves are either
//! constants or parameters; only parameters (and nodes downstream of them)
//! carry gradients, so frozen arrays never receive one.

use std::ops::Range;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-token rotation tables, `[tokens, pairs]` each.
#[derive(Clone, Debug)]
pub struct RopeTables {
    pub cos: Arc<Vec<f32>>,
    pub sin: Arc<Vec<f32>>,
    pub pairs: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, s: f32 },
    Silu { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, inv_std: Vec<f32> },
    Modulate { x: Var, shift: Var, scale: Var },
    MulBcast { x: Var, g: Var },
    SliceCols { x: Var, start: usize },
    ConcatTokens { parts: Vec<Var> },
    SliceTokens { x: Var, start: usize },
    BroadcastBatch { x: Var },
    SegmentBias { x: Var, table: Var, segments: Vec<Range<usize>> },
    Rope { x: Var, heads: usize, tables: RopeTables },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f32> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2x { x: Var },
    MseLoss { pred: Var, target: Tensor },
    ExternalLoss { pred: Var, grad: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes outside the trainable cone.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap_or(&1);
    let rows = if n == 0 {
        0
    } else {
        shape.iter().product::<usize>() / n
    };
    (rows, n)
}

fn btc(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [b, t, c] => Ok((*b, *t, *c)),
        _ => Err(Error::shape(format!("{what}: expected [B,T,C], got {shape:?}"))),
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = rows_of(av.shape());
        let [kb, n] = bv.shape() else {
            return Err(Error::shape(format!("matmul rhs must be 2-D, got {:?}", bv.shape())));
        };
        if k != *kb {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = *n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), k, 1, bv.data(), n, 1, 0.0, &mut out, n, 1);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::from_vec(&shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul { a, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(av.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    /// Adds a `[n]` bias to every row of `[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, n) = rows_of(xv.shape());
        if bv.numel() != n {
            return Err(Error::shape(format!("bias {:?} for {:?}", bv.shape(), xv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::from_vec(xv.shape(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, ng))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let t = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, s }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Silu { x }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Gelu { x }, ng)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Var {
        let xv = self.value(x);
        let (rows, n) = rows_of(xv.shape());
        let mut out = vec![0.0; rows * n];
        let mut inv_std = Vec::with_capacity(rows);
        for (src, dst) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
            let mean = src.iter().sum::<f32>() / n as f32;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let is = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::from_vec(xv.shape(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::LayerNorm { x, inv_std }, ng)
    }

    /// `x * (1 + scale[b]) + shift[b]` for `x: [B,T,C]`, `shift, scale: [B,C]`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, c) = btc(xv.shape(), "modulate")?;
        let (sh, sc) = (self.value(shift), self.value(scale));
        if sh.shape() != [b, c] || sc.shape() != [b, c] {
            return Err(Error::shape(format!(
                "modulate params {:?}/{:?} for {:?}",
                sh.shape(),
                sc.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for bi in 0..b {
            let s0 = &sh.data()[bi * c..(bi + 1) * c];
            let s1 = &sc.data()[bi * c..(bi + 1) * c];
            for row in out[bi * t * c..(bi + 1) * t * c].chunks_mut(c) {
                for j in 0..c {
                    row[j] = row[j] * (1.0 + s1[j]) + s0[j];
                }
            }
        }
        let tv = Tensor::from_vec(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(shift) || self.ng(scale);
        Ok(self.push(tv, Op::Modulate { x, shift, scale }, ng))
    }

    /// `x * g[b]` for `x: [B,T,C]`, `g: [B,C]`.
    pub fn mul_bcast(&mut self, x: Var, g: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, c) = btc(xv.shape(), "mul_bcast")?;
        let gv = self.value(g);
        if gv.shape() != [b, c] {
            return Err(Error::shape(format!("gate {:?} for {:?}", gv.shape(), xv.shape())));
        }
        let mut out = xv.data().to_vec();
        for bi in 0..b {
            let gg = &gv.data()[bi * c..(bi + 1) * c];
            for row in out[bi * t * c..(bi + 1) * t * c].chunks_mut(c) {
                for j in 0..c {
                    row[j] *= gg[j];
                }
            }
        }
        let tv = Tensor::from_vec(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(g);
        Ok(self.push(tv, Op::MulBcast { x, g }, ng))
    }

    /// Columns `start..start+len` of a `[rows, n]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let [rows, n] = xv.shape() else {
            return Err(Error::shape(format!("slice_cols needs 2-D, got {:?}", xv.shape())));
        };
        let (rows, n) = (*rows, *n);
        if start + len > n {
            return Err(Error::shape(format!("slice {start}+{len} of {n} columns")));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let tv = Tensor::from_vec(&[rows, len], out)?;
        let ng = self.ng(x);
        Ok(self.push(tv, Op::SliceCols { x, start }, ng))
    }

    /// Concatenates `[B,T_i,C]` parts along the token axis.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (b, _, c) = btc(first.shape(), "concat")?;
        let mut total = 0;
        for &p in parts {
            let (pb, pt, pc) = btc(self.value(p).shape(), "concat")?;
            if pb != b || pc != c {
                return Err(Error::shape("concat_tokens batch/channel mismatch"));
            }
            total += pt;
        }
        let mut out = Vec::with_capacity(b * total * c);
        for bi in 0..b {
            for &p in parts {
                let pv = self.value(p);
                let pt = pv.dim(1);
                out.extend_from_slice(&pv.data()[bi * pt * c..(bi + 1) * pt * c]);
            }
        }
        let tv = Tensor::from_vec(&[b, total, c], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            tv,
            Op::ConcatTokens {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, c) = btc(xv.shape(), "slice_tokens")?;
        if start + len > t {
            return Err(Error::shape(format!("token slice {start}+{len} of {t}")));
        }
        let mut out = Vec::with_capacity(b * len * c);
        for bi in 0..b {
            let base = bi * t * c;
            out.extend_from_slice(&xv.data()[base + start * c..base + (start + len) * c]);
        }
        let tv = Tensor::from_vec(&[b, len, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(tv, Op::SliceTokens { x, start }, ng))
    }

    /// `[M,C] -> [B,M,C]`.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let xv = self.value(x);
        let [m, c] = xv.shape() else {
            return Err(Error::shape("broadcast_batch needs [M,C]"));
        };
        let shape = [batch, *m, *c];
        let out = xv.data().repeat(batch);
        let tv = Tensor::from_vec(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(tv, Op::BroadcastBatch { x }, ng))
    }

    /// Adds row `i` of `table` to every token in `segments[i]`.
    pub fn segment_bias(&mut self, x: Var, table: Var, segments: &[Range<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, c) = btc(xv.shape(), "segment_bias")?;
        let tv = self.value(table);
        if tv.shape() != [segments.len(), c] {
            return Err(Error::shape(format!(
                "segment table {:?} for {} segments of width {c}",
                tv.shape(),
                segments.len()
            )));
        }
        let mut out = xv.data().to_vec();
        for bi in 0..b {
            for (i, seg) in segments.iter().enumerate() {
                if seg.end > t {
                    return Err(Error::shape("segment beyond sequence"));
                }
                let e = &tv.data()[i * c..(i + 1) * c];
                for tok in seg.clone() {
                    let row = &mut out[(bi * t + tok) * c..(bi * t + tok + 1) * c];
                    for (o, ev) in row.iter_mut().zip(e) {
                        *o += ev;
                    }
                }
            }
        }
        let outv = Tensor::from_vec(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(table);
        Ok(self.push(
            outv,
            Op::SegmentBias {
                x,
                table,
                segments: segments.to_vec(),
            },
            ng,
        ))
    }

    /// Rotates channel pairs `(2p, 2p+1)` of every head by per-token angles.
    pub fn rope(&mut self, x: Var, heads: usize, tables: &RopeTables) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, c) = btc(xv.shape(), "rope")?;
        let d = c / heads;
        if d != 2 * tables.pairs || tables.cos.len() != t * tables.pairs {
            return Err(Error::shape(format!(
                "rope tables ({} pairs, {} entries) for {t} tokens of head dim {d}",
                tables.pairs,
                tables.cos.len()
            )));
        }
        let mut out = xv.data().to_vec();
        rotate(&mut out, b, t, heads, d, tables, false);
        let outv = Tensor::from_vec(xv.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(
            outv,
            Op::Rope {
                x,
                heads,
                tables: tables.clone(),
            },
            ng,
        ))
    }

    /// Full (non-causal) multi-head softmax attention on `[B,T,C]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, t, c) = btc(qv.shape(), "attention")?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() || c % heads != 0 {
            return Err(Error::shape("attention q/k/v mismatch"));
        }
        let d = c / heads;
        let scale = 1.0 / (d as f32).sqrt();
        let mut probs = vec![0.0f32; b * heads * t * t];
        let mut out = vec![0.0f32; b * t * c];
        for bi in 0..b {
            for h in 0..heads {
                let off = bi * t * c + h * d;
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                gemm(
                    t,
                    d,
                    t,
                    scale,
                    &qv.data()[off..],
                    c,
                    1,
                    &kv.data()[off..],
                    1,
                    c,
                    0.0,
                    p,
                    t,
                    1,
                );
                for row in p.chunks_mut(t) {
                    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut s = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        s += *r;
                    }
                    let inv = 1.0 / s;
                    for r in row.iter_mut() {
                        *r *= inv;
                    }
                }
                gemm(
                    t,
                    t,
                    d,
                    1.0,
                    p,
                    t,
                    1,
                    &vv.data()[off..],
                    c,
                    1,
                    0.0,
                    &mut out[off..],
                    c,
                    1,
                );
            }
        }
        let outv = Tensor::from_vec(qv.shape(), out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            outv,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// 2-D convolution, `x: [N,Cin,H,W]`, `w: [Cout,Cin,k,k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geom = ConvGeom::new(xv.shape(), wv.shape(), stride, pad)?;
        if bv.numel() != geom.cout {
            return Err(Error::shape("conv bias length"));
        }
        let mut out = vec![0.0; geom.n * geom.cout * geom.ho * geom.wo];
        let mut cols = vec![0.0; geom.kdim() * geom.ho * geom.wo];
        let hw = geom.ho * geom.wo;
        for ni in 0..geom.n {
            geom.im2col(&xv.data()[ni * geom.in_len()..(ni + 1) * geom.in_len()], &mut cols);
            let dst = &mut out[ni * geom.cout * hw..(ni + 1) * geom.cout * hw];
            for (co, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(bv.data()[co]);
            }
            gemm(
                geom.cout,
                geom.kdim(),
                hw,
                1.0,
                wv.data(),
                geom.kdim(),
                1,
                &cols,
                hw,
                1,
                1.0,
                dst,
                hw,
                1,
            );
        }
        let outv = Tensor::from_vec(&[geom.n, geom.cout, geom.ho, geom.wo], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(outv, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape() else {
            return Err(Error::shape("upsample2x needs [N,C,H,W]"));
        };
        let (n, c, h, w) = (*n, *c, *h, *w);
        let mut out = vec![0.0; n * c * 4 * h * w];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let outv = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?;
        let ng = self.ng(x);
        Ok(self.push(outv, Op::Upsample2x { x }, ng))
    }

    /// Mean squared error against a constant target; scalar output.
    pub fn mse_loss(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(format!(
                "mse {:?} vs {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let n = pv.numel().max(1) as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        let tv = Tensor::from_vec(&[1], vec![(s / n) as f32])?;
        let ng = self.ng(pred);
        Ok(self.push(tv, Op::MseLoss { pred, target }, ng))
    }

    /// Scalar loss whose value and gradient w.r.t. `pred` were computed outside the tape.
    pub fn external_loss(&mut self, pred: Var, value: f32, grad: Tensor) -> Result<Var> {
        if self.value(pred).shape() != grad.shape() {
            return Err(Error::shape("external loss gradient shape"));
        }
        let tv = Tensor::from_vec(&[1], vec![value])?;
        let ng = self.ng(pred);
        Ok(self.push(tv, Op::ExternalLoss { pred, grad }, ng))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward needs a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Ok(Grads(grads));
        }
        grads[loss.0] = Some(Tensor::full(&[1], 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Grads(grads))
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = rows_of(av.shape());
                let n = bv.dim(1);
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, gd, n, 1, bv.data(), 1, n, 0.0, &mut da, k, 1);
                    self.acc(grads, *a, Tensor::from_vec(av.shape(), da)?);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, av.data(), 1, k, gd, n, 1, 0.0, &mut db, n, 1);
                    self.acc(grads, *b, Tensor::from_vec(bv.shape(), db)?);
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddBias { x, bias } => {
                self.acc(grads, *x, g.clone());
                if self.ng(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.acc(grads, *bias, Tensor::from_vec(self.value(*bias).shape(), db)?);
                }
            }
            Op::Scale { x, s } => {
                let d = gd.iter().map(|v| v * s).collect();
                self.acc(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &v)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &v)| gv * gelu_grad(v))
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let (_, n) = rows_of(node.value.shape());
                let mut dx = vec![0.0; y.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let mg = gr.iter().sum::<f32>() / n as f32;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                    for j in 0..n {
                        dx[r * n + j] = is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(g.shape(), dx)?);
            }
            Op::Modulate { x, shift, scale } => {
                let xv = self.value(*x);
                let sc = self.value(*scale);
                let (b, t, c) = btc(xv.shape(), "modulate")?;
                let mut dx = vec![0.0; xv.numel()];
                let mut dshift = vec![0.0; b * c];
                let mut dscale = vec![0.0; b * c];
                for bi in 0..b {
                    for ti in 0..t {
                        let o = (bi * t + ti) * c;
                        for j in 0..c {
                            let gv = gd[o + j];
                            dx[o + j] = gv * (1.0 + sc.data()[bi * c + j]);
                            dshift[bi * c + j] += gv;
                            dscale[bi * c + j] += gv * xv.data()[o + j];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                self.acc(grads, *shift, Tensor::from_vec(&[b, c], dshift)?);
                self.acc(grads, *scale, Tensor::from_vec(&[b, c], dscale)?);
            }
            Op::MulBcast { x, g: gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let (b, t, c) = btc(xv.shape(), "mul_bcast")?;
                let mut dx = vec![0.0; xv.numel()];
                let mut dg = vec![0.0; b * c];
                for bi in 0..b {
                    for ti in 0..t {
                        let o = (bi * t + ti) * c;
                        for j in 0..c {
                            dx[o + j] = gd[o + j] * gv.data()[bi * c + j];
                            dg[bi * c + j] += gd[o + j] * xv.data()[o + j];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                self.acc(grads, *gate, Tensor::from_vec(&[b, c], dg)?);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, n) = (xv.dim(0), xv.dim(1));
                let len = g.dim(1);
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            Op::ConcatTokens { parts } => {
                let (b, total, c) = btc(g.shape(), "concat")?;
                let mut offset = 0;
                for &p in parts {
                    let pt = self.value(p).dim(1);
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(b * pt * c);
                        for bi in 0..b {
                            let base = (bi * total + offset) * c;
                            dp.extend_from_slice(&gd[base..base + pt * c]);
                        }
                        self.acc(grads, p, Tensor::from_vec(&[b, pt, c], dp)?);
                    }
                    offset += pt;
                }
            }
            Op::SliceTokens { x, start } => {
                let xv = self.value(*x);
                let (b, t, c) = btc(xv.shape(), "slice_tokens")?;
                let len = g.dim(1);
                let mut dx = vec![0.0; xv.numel()];
                for bi in 0..b {
                    let dst = (bi * t + start) * c;
                    dx[dst..dst + len * c].copy_from_slice(&gd[bi * len * c..(bi + 1) * len * c]);
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            Op::BroadcastBatch { x } => {
                let xv = self.value(*x);
                let n = xv.numel();
                let mut dx = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (d, v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            Op::SegmentBias { x, table, segments } => {
                self.acc(grads, *x, g.clone());
                if self.ng(*table) {
                    let (b, t, c) = btc(g.shape(), "segment_bias")?;
                    let mut dt = vec![0.0; segments.len() * c];
                    for bi in 0..b {
                        for (i, seg) in segments.iter().enumerate() {
                            for tok in seg.clone() {
                                let row = &gd[(bi * t + tok) * c..(bi * t + tok + 1) * c];
                                for (d, v) in dt[i * c..(i + 1) * c].iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    self.acc(grads, *table, Tensor::from_vec(&[segments.len(), c], dt)?);
                }
            }
            Op::Rope { x, heads, tables } => {
                let (b, t, c) = btc(g.shape(), "rope")?;
                let mut dx = gd.to_vec();
                rotate(&mut dx, b, t, *heads, c / heads, tables, true);
                self.acc(grads, *x, Tensor::from_vec(g.shape(), dx)?);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (b, t, c) = btc(qv.shape(), "attention")?;
                let heads = *heads;
                let d = c / heads;
                let scale = 1.0 / (d as f32).sqrt();
                let mut dq = vec![0.0; b * t * c];
                let mut dk = vec![0.0; b * t * c];
                let mut dv = vec![0.0; b * t * c];
                let mut dp = vec![0.0; t * t];
                for bi in 0..b {
                    for h in 0..heads {
                        let off = bi * t * c + h * d;
                        let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                        // dV = P^T dO
                        gemm(t, t, d, 1.0, p, 1, t, &gd[off..], c, 1, 0.0, &mut dv[off..], c, 1);
                        // dP = dO V^T
                        gemm(
                            t,
                            d,
                            t,
                            1.0,
                            &gd[off..],
                            c,
                            1,
                            &vv.data()[off..],
                            1,
                            c,
                            0.0,
                            &mut dp,
                            t,
                            1,
                        );
                        for (prow, dprow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                            let dot: f32 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                            for (dd, pp) in dprow.iter_mut().zip(prow) {
                                *dd = pp * (*dd - dot);
                            }
                        }
                        // dQ = scale dS K, dK = scale dS^T Q
                        gemm(
                            t,
                            t,
                            d,
                            scale,
                            &dp,
                            t,
                            1,
                            &kv.data()[off..],
                            c,
                            1,
                            0.0,
                            &mut dq[off..],
                            c,
                            1,
                        );
                        gemm(
                            t,
                            t,
                            d,
                            scale,
                            &dp,
                            1,
                            t,
                            &qv.data()[off..],
                            c,
                            1,
                            0.0,
                            &mut dk[off..],
                            c,
                            1,
                        );
                    }
                }
                let shape = qv.shape().to_vec();
                self.acc(grads, *q, Tensor::from_vec(&shape, dq)?);
                self.acc(grads, *k, Tensor::from_vec(&shape, dk)?);
                self.acc(grads, *v, Tensor::from_vec(&shape, dv)?);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geom = ConvGeom::new(xv.shape(), wv.shape(), *stride, *pad)?;
                let hw = geom.ho * geom.wo;
                let kd = geom.kdim();
                if self.ng(*b) {
                    let mut db = vec![0.0; geom.cout];
                    for ni in 0..geom.n {
                        for (co, row) in gd[ni * geom.cout * hw..(ni + 1) * geom.cout * hw]
                            .chunks(hw)
                            .enumerate()
                        {
                            db[co] += row.iter().sum::<f32>();
                        }
                    }
                    self.acc(grads, *b, Tensor::from_vec(&[geom.cout], db)?);
                }
                let mut cols = vec![0.0; kd * hw];
                let mut dw = self.ng(*w).then(|| vec![0.0; geom.cout * kd]);
                let mut dx = self.ng(*x).then(|| vec![0.0; xv.numel()]);
                let mut dcols = vec![0.0; kd * hw];
                for ni in 0..geom.n {
                    let go = &gd[ni * geom.cout * hw..(ni + 1) * geom.cout * hw];
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(
                            &xv.data()[ni * geom.in_len()..(ni + 1) * geom.in_len()],
                            &mut cols,
                        );
                        gemm(geom.cout, hw, kd, 1.0, go, hw, 1, &cols, 1, hw, 1.0, dw, kd, 1);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(kd, geom.cout, hw, 1.0, wv.data(), 1, kd, go, hw, 1, 0.0, &mut dcols, hw, 1);
                        geom.col2im(
                            &dcols,
                            &mut dx[ni * geom.in_len()..(ni + 1) * geom.in_len()],
                        );
                    }
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, Tensor::from_vec(wv.shape(), dw)?);
                }
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
            }
            Op::Upsample2x { x } => {
                let xv = self.value(*x);
                let (h, w) = (xv.dim(2), xv.dim(3));
                let planes = xv.dim(0) * xv.dim(1);
                let mut dx = vec![0.0; xv.numel()];
                for plane in 0..planes {
                    let src = &gd[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            Op::MseLoss { pred, target } => {
                let pv = self.value(*pred);
                let k = 2.0 * gd[0] / pv.numel().max(1) as f32;
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| k * (a - b))
                    .collect();
                self.acc(grads, *pred, Tensor::from_vec(pv.shape(), d)?);
            }
            Op::ExternalLoss { pred, grad } => {
                let d = grad.data().iter().map(|v| v * gd[0]).collect();
                self.acc(grads, *pred, Tensor::from_vec(grad.shape(), d)?);
            }
        }
        Ok(())
    }
}

fn rotate(
    data: &mut [f32],
    b: usize,
    t: usize,
    heads: usize,
    d: usize,
    tables: &RopeTables,
    inverse: bool,
) {
    let c = heads * d;
    let pairs = tables.pairs;
    let sign = if inverse { -1.0 } else { 1.0 };
    for bi in 0..b {
        for ti in 0..t {
            let cs = &tables.cos[ti * pairs..(ti + 1) * pairs];
            let sn = &tables.sin[ti * pairs..(ti + 1) * pairs];
            for h in 0..heads {
                let base = (bi * t + ti) * c + h * d;
                for p in 0..pairs {
                    let (x0, x1) = (data[base + 2 * p], data[base + 2 * p + 1]);
                    let (co, si) = (cs[p], sign * sn[p]);
                    data[base + 2 * p] = x0 * co - x1 * si;
                    data[base + 2 * p + 1] = x0 * si + x1 * co;
                }
            }
        }
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let ([n, cin, h, wd], [cout, wcin, k, k2]) = (x, w) else {
            return Err(Error::shape(format!("conv2d shapes {x:?} / {w:?}")));
        };
        if cin != wcin || k != k2 || stride == 0 {
            return Err(Error::shape(format!("conv2d shapes {x:?} / {w:?}")));
        }
        if h + 2 * pad < *k || wd + 2 * pad < *k {
            return Err(Error::shape("conv2d kernel larger than padded input"));
        }
        Ok(Self {
            n: *n,
            cin: *cin,
            h: *h,
            w: *wd,
            cout: *cout,
            k: *k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// Rows are ordered channel-major (`ci * k * k + ky * k + kx`).
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                x[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dx[(ci * self.h + iy as usize) * self.w + ix as usize] +=
                                    src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
