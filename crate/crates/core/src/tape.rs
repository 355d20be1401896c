//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is a Wengert list. Every operation appends a node holding its
//! forward value and the inputs needed by its backward rule, so node ids are
//! a topological order by construction. [`Tape::backward`] walks the list once
//! in reverse, accumulating gradients additively into each input.
//!
//! One tape serves one forward/backward pass. Parameters live outside the
//! tape and are bound as leaves with [`Tape::param`] at the start of a pass,
//! which keeps independent tapes free to run on separate threads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, BroadcastMap};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Sigmoid(Var),
    ClampLog { x: Var, lo: f64, hi: f64 },
    Matmul(Var, Var),
    SoftmaxLast(Var),
    Transpose { x: Var, a: usize, b: usize },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MaskMul { x: Var, mask: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Conv1d { x: Var, w: Var, b: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BandedAttention(Box<BandedAttention>),
}

#[derive(Debug)]
struct BandedAttention {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    window: usize,
    include_self: bool,
    /// `[B, heads, T, window + 1]`; slot `s` of row `t` is key position `t - window + s`.
    probs: Vec<f64>,
    /// Inverted-dropout factors in the same layout as `probs`.
    keep: Option<Vec<f64>>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant by [`Tape::backward`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = kernels::broadcast_shape(op, ta.shape(), tb.shape())?;
        let ma = BroadcastMap::new(&shape, ta.shape());
        let mb = BroadcastMap::new(&shape, tb.shape());
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|o| f(da[ma.get(o)], db[mb.get(o)])).collect();
        Tensor::new(shape, data)
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn clamp_log(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi).ln());
        self.push(out, Op::ClampLog { x, lo, hi }, &[x])
    }

    /// Multiplies by a fixed mask of the same shape.
    pub fn mask_mul(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        if mask.shape() != self.shape(x) {
            return Err(Error::dim("mask_mul", self.shape(x), mask.shape()));
        }
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(mask.data())
                .map(|(a, m)| a * m)
                .collect(),
        )?;
        Ok(self.push(
            out,
            Op::MaskMul {
                x,
                mask: mask.into_data(),
            },
            &[x],
        ))
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales
    /// survivors by `1 / (1 - p)`. `p == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.shape(x), p, rng);
        self.mask_mul(x, mask)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    // ---- structural --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Swaps axes `a` and `b`.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let t = self.value(x);
        if a >= t.rank() || b >= t.rank() {
            return Err(Error::Shape(format!(
                "transpose axes ({a}, {b}) out of range for {:?}",
                t.shape()
            )));
        }
        let mut perm: Vec<usize> = (0..t.rank()).collect();
        perm.swap(a, b);
        let (data, shape) = kernels::permute(t.data(), t.shape(), &perm);
        Ok(self.push(Tensor::new(shape, data)?, Op::Transpose { x, a, b }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let run = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * run..(o + 1) * run]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} on axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let dim = t.shape()[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcasting over leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let geo = MatmulGeometry::new(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; geo.batch * geo.m * geo.n];
        for i in 0..geo.batch {
            let (ia, ib) = (geo.map_a.get(i), geo.map_b.get(i));
            kernels::gemm_nn(
                geo.m,
                geo.k,
                geo.n,
                &ta.data()[ia * geo.m * geo.k..],
                &tb.data()[ib * geo.k * geo.n..],
                &mut out[i * geo.m * geo.n..(i + 1) * geo.m * geo.n],
            );
        }
        let out = Tensor::new(geo.out_shape, out)?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Softmax over the last dimension. `-inf` entries map to exactly zero.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut out = t.data().to_vec();
        for (row, chunk) in out.chunks_exact_mut(d).enumerate() {
            softmax_in_place(chunk).map_err(|_| Error::DegenerateRow { row })?;
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::SoftmaxLast(x), &[x]))
    }

    /// Same-length 1-D convolution over time.
    ///
    /// `x: [B, T, Cin]`, `w: [Cout, Cin, h]`, `b: [Cout]` with odd `h`; the
    /// input is zero-padded by `(h - 1) / 2` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let geo = ConvGeometry::new(tx.shape(), tw.shape(), tb.shape())?;
        let wt = geo.kernel_slices(tw.data());
        let (bsz, t, cin, cout) = (geo.batch, geo.len, geo.cin, geo.cout);
        let mut out = vec![0.0; bsz * t * cout];
        for bi in 0..bsz {
            let xb = &tx.data()[bi * t * cin..(bi + 1) * t * cin];
            let ob = &mut out[bi * t * cout..(bi + 1) * t * cout];
            for row in ob.chunks_exact_mut(cout) {
                row.copy_from_slice(tb.data());
            }
            for (i, wi) in wt.chunks_exact(cin * cout).enumerate() {
                if let Some((t0, t1, src)) = geo.valid_rows(i) {
                    kernels::gemm_nn(
                        t1 - t0,
                        cin,
                        cout,
                        &xb[src * cin..],
                        wi,
                        &mut ob[t0 * cout..t1 * cout],
                    );
                }
            }
        }
        let out = Tensor::new(vec![bsz, t, cout], out)?;
        Ok(self.push(out, Op::Conv1d { x, w, b }, &[x, w, b]))
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tbeta) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape().last().ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        if tg.shape() != [d] || tbeta.shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let src = &tx.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (src[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tbeta.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head attention restricted to a causal band.
    ///
    /// `q`, `k`, `v` are `[B, T, d]` with heads laid out as contiguous
    /// `d / heads` column blocks. Position `t` attends to keys
    /// `max(0, t - window) ..= t - 1`, plus `t` itself when `include_self`.
    /// Cost is `O(B·T·window·d)`. `attn_dropout` is `(p, rng)` for training.
    #[allow(clippy::too_many_arguments)]
    pub fn banded_attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: usize,
        include_self: bool,
        attn_dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::dim("banded_attention", &shape, self.shape(k)));
        }
        let (bsz, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d={d} not divisible by heads={heads}")));
        }
        if window == 0 {
            return Err(Error::Config("attention window must be >= 1".into()));
        }
        let dk = d / heads;
        let slots = window + 1;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());

        let mut probs = vec![0.0; bsz * heads * t * slots];
        let mut scores = vec![f64::NEG_INFINITY; slots];
        for bi in 0..bsz {
            for h in 0..heads {
                for ti in 0..t {
                    let qrow = &qd[(bi * t + ti) * d + h * dk..][..dk];
                    for (s, sc) in scores.iter_mut().enumerate() {
                        *sc = match band_key(ti, s, window, include_self) {
                            Some(j) => scale * kernels::dot(qrow, &kd[(bi * t + j) * d + h * dk..][..dk]),
                            None => f64::NEG_INFINITY,
                        };
                    }
                    softmax_in_place(&mut scores)
                        .map_err(|_| Error::DegenerateRow { row: ti })?;
                    let base = ((bi * heads + h) * t + ti) * slots;
                    probs[base..base + slots].copy_from_slice(&scores);
                }
            }
        }
        let keep = match attn_dropout {
            Some((p, rng)) if p > 0.0 => Some(dropout_mask(&[probs.len()], p, rng).into_data()),
            _ => None,
        };
        let mut out = vec![0.0; bsz * t * d];
        for bi in 0..bsz {
            for h in 0..heads {
                for ti in 0..t {
                    let base = ((bi * heads + h) * t + ti) * slots;
                    let orow = &mut out[(bi * t + ti) * d + h * dk..][..dk];
                    for s in 0..slots {
                        let Some(j) = band_key(ti, s, window, include_self) else {
                            continue;
                        };
                        let mut p = probs[base + s];
                        if let Some(keep) = &keep {
                            p *= keep[base + s];
                        }
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(bi * t + j) * d + h * dk..][..dk];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let op = BandedAttention {
            q,
            k,
            v,
            heads,
            window,
            include_self,
            probs,
            keep,
        };
        Ok(self.push(out, Op::BandedAttention(Box::new(op)), &[q, k, v]))
    }

    /// Attention weights of a [`Tape::banded_attention`] node scattered into
    /// a dense `[B, heads, T, T]` tensor (before attention dropout).
    pub fn attention_weights(&self, v: Var) -> Result<Tensor> {
        let Op::BandedAttention(att) = &self.nodes[v.0].op else {
            return Err(Error::Contract("node is not a banded attention op".into()));
        };
        let shape = self.shape(v);
        let (bsz, t) = (shape[0], shape[1]);
        let slots = att.window + 1;
        let mut dense = vec![0.0; bsz * att.heads * t * t];
        for g in 0..bsz * att.heads {
            for ti in 0..t {
                for s in 0..slots {
                    if let Some(j) = band_key(ti, s, att.window, att.include_self) {
                        dense[(g * t + ti) * t + j] = att.probs[(g * t + ti) * slots + s];
                    }
                }
            }
        }
        Tensor::new(vec![bsz, att.heads, t, t], dense)
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a one-element `loss`, replacing any gradients
    /// from a previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.grad = match grads.get_mut(i).and_then(Option::take) {
                Some(g) if node.requires_grad => Some(
                    Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches value shape"),
                ),
                _ => None,
            };
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let shape = node.value.shape();
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if self.nodes[v.0].requires_grad {
                        acc(v, reduce_broadcast(g, shape, self.shape(v), |o| s * g[o]));
                    }
                }
            }
            Op::Mul(a, b) => {
                let shape = node.value.shape();
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let mb = BroadcastMap::new(shape, tb.shape());
                    acc(*a, reduce_broadcast(g, shape, ta.shape(), |o| g[o] * tb.data()[mb.get(o)]));
                }
                if self.nodes[b.0].requires_grad {
                    let ma = BroadcastMap::new(shape, ta.shape());
                    acc(*b, reduce_broadcast(g, shape, tb.shape(), |o| g[o] * ta.data()[ma.get(o)]));
                }
            }
            Op::Affine { x, scale } => acc(*x, g.iter().map(|v| v * scale).collect()),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc(*x, g.iter().zip(xd).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())
            }
            Op::Sigmoid(x) => acc(*x, g.iter().zip(val).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::ClampLog { x, lo, hi } => {
                let xd = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(g, &x)| if x > *lo && x < *hi { g / x } else { 0.0 })
                        .collect(),
                )
            }
            Op::MaskMul { x, mask } => acc(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n])
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Transpose { x, a, b } => {
                let mut perm: Vec<usize> = (0..node.value.rank()).collect();
                perm.swap(*a, *b);
                acc(*x, kernels::permute(g, node.value.shape(), &perm).0)
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.nodes[x.0].requires_grad {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(x, part);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = self.shape(*x);
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let (dim, len) = (src[*axis], node.value.shape()[*axis]);
                let mut full = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    full[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, full)
            }
            Op::SoftmaxLast(x) => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let mut dx = vec![0.0; g.len()];
                for ((y, gy), out) in val.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                    let dotp = kernels::dot(y, gy);
                    for j in 0..d {
                        out[j] = y[j] * (gy[j] - dotp);
                    }
                }
                acc(*x, dx)
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let geo = MatmulGeometry::new(ta.shape(), tb.shape()).expect("validated in forward");
                let (m, k, n) = (geo.m, geo.k, geo.n);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; ta.numel()];
                    for i in 0..geo.batch {
                        let (ia, ib) = (geo.map_a.get(i), geo.map_b.get(i));
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            &tb.data()[ib * k * n..],
                            &mut da[ia * m * k..(ia + 1) * m * k],
                        );
                    }
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; tb.numel()];
                    for i in 0..geo.batch {
                        let (ia, ib) = (geo.map_a.get(i), geo.map_b.get(i));
                        kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &ta.data()[ia * m * k..],
                            &g[i * m * n..],
                            &mut db[ib * k * n..(ib + 1) * k * n],
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::Conv1d { x, w, b } => {
                let (tx, tw, tb) = (self.value(*x), self.value(*w), self.value(*b));
                let geo = ConvGeometry::new(tx.shape(), tw.shape(), tb.shape()).expect("validated in forward");
                let (bsz, t, cin, cout) = (geo.batch, geo.len, geo.cin, geo.cout);
                if self.nodes[x.0].requires_grad {
                    let wt = geo.kernel_slices(tw.data());
                    let mut dx = vec![0.0; tx.numel()];
                    for bi in 0..bsz {
                        let gb = &g[bi * t * cout..(bi + 1) * t * cout];
                        let dxb = &mut dx[bi * t * cin..(bi + 1) * t * cin];
                        for (i, wi) in wt.chunks_exact(cin * cout).enumerate() {
                            if let Some((t0, t1, src)) = geo.valid_rows(i) {
                                let rows = t1 - t0;
                                kernels::gemm_nt(
                                    rows,
                                    cout,
                                    cin,
                                    &gb[t0 * cout..],
                                    wi,
                                    &mut dxb[src * cin..(src + rows) * cin],
                                );
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dwt = vec![0.0; tw.numel()];
                    for bi in 0..bsz {
                        let gb = &g[bi * t * cout..(bi + 1) * t * cout];
                        let xb = &tx.data()[bi * t * cin..(bi + 1) * t * cin];
                        for (i, dwi) in dwt.chunks_exact_mut(cin * cout).enumerate() {
                            if let Some((t0, t1, src)) = geo.valid_rows(i) {
                                kernels::gemm_tn(cin, t1 - t0, cout, &xb[src * cin..], &gb[t0 * cout..], dwi);
                            }
                        }
                    }
                    acc(*w, geo.kernel_slices_back(&dwt));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, db);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma).data();
                let d = tg.len();
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * tg[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = is * (gr[j] * tg[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
                if self.nodes[gamma.0].requires_grad {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.nodes[beta.0].requires_grad {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    acc(*beta, db);
                }
            }
            Op::BandedAttention(att) => {
                let (dq, dk_, dv) = self.banded_attention_backward(att, node.value.shape(), g);
                acc(att.q, dq);
                acc(att.k, dk_);
                acc(att.v, dv);
            }
        }
    }

    fn banded_attention_backward(
        &self,
        att: &BandedAttention,
        shape: &[usize],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (bsz, t, d) = (shape[0], shape[1], shape[2]);
        let heads = att.heads;
        let dk = d / heads;
        let slots = att.window + 1;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(att.q).data(),
            self.value(att.k).data(),
            self.value(att.v).data(),
        );
        let mut dq = vec![0.0; qd.len()];
        let mut dkey = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; slots];
        for bi in 0..bsz {
            for h in 0..heads {
                for ti in 0..t {
                    let base = ((bi * heads + h) * t + ti) * slots;
                    let grow = &g[(bi * t + ti) * d + h * dk..][..dk];
                    let probs = &att.probs[base..base + slots];
                    let mut weighted = 0.0;
                    for s in 0..slots {
                        dp[s] = 0.0;
                        let Some(j) = band_key(ti, s, att.window, att.include_self) else {
                            continue;
                        };
                        let keep = att.keep.as_ref().map_or(1.0, |k| k[base + s]);
                        let voff = (bi * t + j) * d + h * dk;
                        let pk = probs[s] * keep;
                        if pk != 0.0 {
                            for (dvv, gv) in dv[voff..voff + dk].iter_mut().zip(grow) {
                                *dvv += pk * gv;
                            }
                        }
                        dp[s] = keep * kernels::dot(grow, &vd[voff..voff + dk]);
                        weighted += probs[s] * dp[s];
                    }
                    let qoff = (bi * t + ti) * d + h * dk;
                    for s in 0..slots {
                        let Some(j) = band_key(ti, s, att.window, att.include_self) else {
                            continue;
                        };
                        let ds = probs[s] * (dp[s] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let koff = (bi * t + j) * d + h * dk;
                        for c in 0..dk {
                            dq[qoff + c] += ds * kd[koff + c];
                            dkey[koff + c] += ds * qd[qoff + c];
                        }
                    }
                }
            }
        }
        (dq, dkey, dv)
    }
}

/// Key position for slot `s` of query row `t`, if the slot is inside the band.
#[inline]
fn band_key(t: usize, s: usize, window: usize, include_self: bool) -> Option<usize> {
    if s == window {
        return include_self.then_some(t);
    }
    (t + s).checked_sub(window)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax; errors when every entry is `-inf`.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    // NaN is propagated rather than mistaken for a fully masked row.
    if row.iter().any(|v| v.is_nan()) {
        row.fill(f64::NAN);
        return Ok(());
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    Ok(())
}

/// Bernoulli keep-mask with inverted scaling.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 - p;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Sums `contrib(o)` over output positions into an `input`-shaped buffer.
fn reduce_broadcast(
    g: &[f64],
    out: &[usize],
    input: &[usize],
    contrib: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let map = BroadcastMap::new(out, input);
    if let BroadcastMap::Same = map {
        return (0..g.len()).map(contrib).collect();
    }
    let mut acc = vec![0.0; input.iter().product()];
    for o in 0..g.len() {
        acc[map.get(o)] += contrib(o);
    }
    acc
}

struct MatmulGeometry {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    map_a: BroadcastMap,
    map_b: BroadcastMap,
    out_shape: Vec<usize>,
}

impl MatmulGeometry {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
            return Err(Error::dim("matmul", a, b));
        }
        let (m, k, n) = (a[a.len() - 2], a[a.len() - 1], b[b.len() - 1]);
        let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch_shape =
            kernels::broadcast_shape("matmul", ba, bb).map_err(|_| Error::dim("matmul", a, b))?;
        let batch = batch_shape.iter().product();
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            batch,
            map_a: BroadcastMap::new(&batch_shape, ba),
            map_b: BroadcastMap::new(&batch_shape, bb),
            out_shape,
        })
    }
}

struct ConvGeometry {
    batch: usize,
    len: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], b: &[usize]) -> Result<Self> {
        if x.len() != 3 || w.len() != 3 || w[1] != x[2] {
            return Err(Error::dim("conv1d", x, w));
        }
        if b != [w[0]] {
            return Err(Error::dim("conv1d", w, b));
        }
        if w[2].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv1d kernel size must be odd for symmetric padding, got {}",
                w[2]
            )));
        }
        Ok(Self {
            batch: x[0],
            len: x[1],
            cin: x[2],
            cout: w[0],
            kernel: w[2],
        })
    }

    /// Re-lays `w[Cout, Cin, h]` as `h` row-major `[Cin, Cout]` matrices.
    fn kernel_slices(&self, w: &[f64]) -> Vec<f64> {
        let (cin, cout, h) = (self.cin, self.cout, self.kernel);
        let mut out = vec![0.0; w.len()];
        for c in 0..cout {
            for ci in 0..cin {
                for i in 0..h {
                    out[(i * cin + ci) * cout + c] = w[(c * cin + ci) * h + i];
                }
            }
        }
        out
    }

    fn kernel_slices_back(&self, wt: &[f64]) -> Vec<f64> {
        let (cin, cout, h) = (self.cin, self.cout, self.kernel);
        let mut out = vec![0.0; wt.len()];
        for c in 0..cout {
            for ci in 0..cin {
                for i in 0..h {
                    out[(c * cin + ci) * h + i] = wt[(i * cin + ci) * cout + c];
                }
            }
        }
        out
    }

    /// Output rows `t0..t1` that read input rows `src..` through kernel tap `i`.
    fn valid_rows(&self, i: usize) -> Option<(usize, usize, usize)> {
        let pad = (self.kernel - 1) / 2;
        let t = self.len as isize;
        let off = i as isize - pad as isize;
        let t0 = (-off).max(0);
        let t1 = (t - off).min(t);
        (t0 < t1).then(|| (t0 as usize, t1 as usize, (t0 + off) as usize))
    }
}
