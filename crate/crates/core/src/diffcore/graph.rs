//! Reverse-mode tape. Every op appends a node holding its forward value; the
//! backward sweep walks the tape in reverse, accumulating adjoints into the
//! inputs that require gradients.

use super::kernels::{self, adaptive_bin, conv_out, gemm, MatRef};
use super::sample;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Recip,
    Abs,
    Square,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Linear(Var, Var, Option<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        x: Var,
        n: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Expand {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GridSample {
        src: Var,
        theta: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Batch statistics observed by a training-mode batchnorm, to be folded into
/// the running averages by the owner of the parameters.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: Var,
    pub running_var: Var,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    stat_updates: Vec<StatUpdate>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(true)
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients flow into.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Value copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((Tensor::new(ta.shape(), data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_suffix", sa, sb));
        }
        let inner = tb.numel();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            add_into(chunk, tb.data());
        }
        let t = Tensor::new(sa, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddSuffix(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * k).collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    /// `a + k` for a scalar constant `k`.
    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + k).collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Shift(a), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let ta = self.value(a);
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Relu => Box::new(|x: f64| x.max(0.0)),
            Unary::LeakyRelu(s) => Box::new(move |x: f64| if x > 0.0 { x } else { s * x }),
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Sigmoid => Box::new(|x: f64| 1.0 / (1.0 + (-x).exp())),
            Unary::Exp => Box::new(f64::exp),
            Unary::Log => Box::new(f64::ln),
            Unary::Recip => Box::new(|x: f64| 1.0 / x),
            Unary::Abs => Box::new(f64::abs),
            Unary::Square => Box::new(|x: f64| x * x),
        };
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Unary(a, kind), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, n) = (sa[0], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(ta.data(), m, sa[1]), MatRef::new(tb.data(), sb[0], n), &mut out, 0.0);
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                MatRef::new(&ta.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&tb.data()[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let t = Tensor::new(&[bs, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Bmm(a, b), rg))
    }

    /// `x W + b` over the last axis of `x`; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[0] {
            return Err(Error::shape("linear", sx, sw));
        }
        let (fin, fout) = (sw[0], sw[1]);
        let rows = tx.numel() / fin;
        let mut out = vec![0.0; rows * fout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [fout] {
                return Err(Error::shape("linear bias", tb.shape(), &[fout]));
            }
            for r in out.chunks_mut(fout) {
                r.copy_from_slice(tb.data());
            }
        }
        gemm(MatRef::new(tx.data(), rows, fin), MatRef::new(tw.data(), fin, fout), &mut out, 1.0);
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = fout;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Linear(x, w, b), rg))
    }

    // ---- convolution and pooling ------------------------------------------

    /// 2-D convolution, `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || sx[2] + 2 * pad < sw[2] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let kk = cin * k * k;
        let mut col = vec![0.0; kk * ho * wo];
        let mut out = vec![0.0; n * cout * ho * wo];
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [cout] {
                    return Err(Error::shape("conv2d bias", tb.shape(), &[cout]));
                }
                Some(tb.data())
            }
            None => None,
        };
        for i in 0..n {
            let xi = &tx.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
            kernels::im2col(xi, cin, h, wd, k, stride, pad, &mut col);
            let oi = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
            if let Some(bias) = bias {
                for (c, plane) in oi.chunks_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v = bias[c]);
                }
            }
            gemm(MatRef::new(tw.data(), cout, kk), MatRef::new(&col, kk, ho * wo), oi, 1.0);
        }
        let t = Tensor::new(&[n, cout, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// 2x2 max pooling with stride 2 over `[N, C, H, W]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("max_pool2", s, &[2, 2]));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; nc * ho * wo];
        let mut argmax = vec![0usize; nc * ho * wo];
        let d = tx.data();
        for p in 0..nc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                            if d[idx] > best {
                                best = d[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Adaptive average pooling of `[N, C, H, W]` to `[N, C, n, n]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, n: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 || n == 0 || n > s[2] || n > s[3] {
            return Err(Error::InvalidGrid {
                grid: n,
                height: s.get(2).copied().unwrap_or(0),
                width: s.get(3).copied().unwrap_or(0),
            });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let d = tx.data();
        let mut out = vec![0.0; nc * n * n];
        for p in 0..nc {
            let plane = &d[p * h * w..(p + 1) * h * w];
            for cy in 0..n {
                let (y0, y1) = adaptive_bin(cy, n, h);
                for cx in 0..n {
                    let (x0, x1) = adaptive_bin(cx, n, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out[p * n * n + cy * n + cx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], n, n], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AdaptiveAvgPool { x, n }, rg))
    }

    // ---- normalisation -----------------------------------------------------

    /// Batch normalisation over all axes but axis 1. Training graphs use batch
    /// statistics and record a [`StatUpdate`]; evaluation graphs use the
    /// running statistics.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, running_mean: Var, running_var: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::shape("batchnorm", &s, &[]));
        }
        let c = s[1];
        for v in [gamma, beta, running_mean, running_var] {
            if self.shape(v) != [c] {
                return Err(Error::shape("batchnorm params", &s, self.shape(v)));
            }
        }
        let n = s[0];
        let inner: usize = s[2..].iter().product();
        let m = (n * inner) as f64;
        let d = tx.data();
        let (mean, var) = if self.training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let seg = &d[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                    mean[ch] += seg.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for b in 0..n {
                for ch in 0..c {
                    let seg = &d[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                    var[ch] += seg.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            (mean, var)
        } else {
            (
                self.value(running_mean).data().to_vec(),
                self.value(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for k in base..base + inner {
                    let xh = (d[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + bt[ch];
                }
            }
        }
        if self.training {
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.stat_updates.push(StatUpdate {
                running_mean,
                running_var,
                mean,
                var: var.iter().map(|v| v * unbiased).collect(),
            });
        }
        let t = Tensor::new(&s, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = self.training;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if axis >= s.len() {
            return Err(Error::shape("softmax", s, &[axis]));
        }
        let (outer, len, inner) = split_axis(s, axis);
        let d = tx.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (d[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let t = Tensor::new(s, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat", &[], &[]))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let tp = self.value(*p);
                let len = tp.shape()[axis];
                out.extend_from_slice(&tp.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape("slice", s, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", s, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let out = permute_data(tx.data(), s, axes);
        let t = Tensor::new(&out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Repeats a size-1 `axis` `count` times.
    pub fn expand(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if axis >= s.len() || s[axis] != 1 {
            return Err(Error::shape("expand", s, &[axis]));
        }
        let (outer, _, inner) = split_axis(s, axis);
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let seg = &tx.data()[o * inner..(o + 1) * inner];
            for _ in 0..count {
                out.extend_from_slice(seg);
            }
        }
        let mut shape = s.to_vec();
        shape[axis] = count;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Expand { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    // ---- sampling ----------------------------------------------------------

    /// Bilinear inverse warp of `src: [N, C, H, W]` by `theta: [N, 2, 3]`.
    pub fn grid_sample(&mut self, src: Var, theta: Var) -> Result<Var> {
        let (ts, tt) = (self.value(src), self.value(theta));
        let (ss, st) = (ts.shape(), tt.shape());
        if ss.len() != 4 || tt.numel() != ss[0] * 6 || st[0] != ss[0] {
            return Err(Error::shape("grid_sample", ss, st));
        }
        let (n, c, h, w) = (ss[0], ss[1], ss[2], ss[3]);
        let per = c * h * w;
        let mut out = vec![0.0; n * per];
        for i in 0..n {
            sample::warp_forward(
                &ts.data()[i * per..(i + 1) * per],
                c,
                h,
                w,
                &tt.data()[i * 6..(i + 1) * 6],
                &mut out[i * per..(i + 1) * per],
            );
        }
        let t = Tensor::new(ss, out)?;
        let rg = self.rg(src) || self.rg(theta);
        Ok(self.push(t, Op::GridSample { src, theta }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, adding into the `grad` of every
    /// leaf that requires gradients. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Reverse sweep seeded with an explicit adjoint for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::shape("backward seed", self.shape(out), &[seed.len()]));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(out.0 + 1, || None);
        adj[out.0] = Some(seed);
        let mut leaf_grads = Vec::new();
        for id in (0..=out.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                leaf_grads.push((id, g));
                continue;
            }
            self.backward_node(id, &g, &mut adj);
        }
        for (id, g) in leaf_grads {
            match &mut self.nodes[id].grad {
                Some(acc) => add_into(acc, &g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(adj, *b) {
                    add_into(s, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(adj, *b) {
                    s.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(adj, *a) {
                    for k in 0..g.len() {
                        s[k] += g[k] * vb[k];
                    }
                }
                if let Some(s) = self.slot(adj, *b) {
                    for k in 0..g.len() {
                        s[k] += g[k] * va[k];
                    }
                }
            }
            Op::AddSuffix(a, b) => {
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, g);
                }
                let inner = self.value(*b).numel();
                if let Some(s) = self.slot(adj, *b) {
                    for chunk in g.chunks(inner) {
                        add_into(s, chunk);
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().zip(g).for_each(|(d, v)| *d += k * v);
                }
            }
            Op::Shift(a) => {
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, g);
                }
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                if let Some(s) = self.slot(adj, *a) {
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::LeakyRelu(sl) => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    *sl
                                }
                            }
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Sigmoid => y[k] * (1.0 - y[k]),
                            Unary::Exp => y[k],
                            Unary::Log => 1.0 / x[k],
                            Unary::Recip => -y[k] * y[k],
                            Unary::Abs => {
                                if x[k] > 0.0 {
                                    1.0
                                } else if x[k] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x[k],
                        };
                        s[k] += g[k] * d;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                if let Some(s) = self.slot(adj, *a) {
                    for k in 0..g.len() {
                        if x[k] >= *lo && x[k] <= *hi {
                            s[k] += g[k];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let gm = MatRef::new(g, m, n);
                if let Some(s) = self.slot(adj, *a) {
                    gemm(gm, MatRef::new(tb.data(), k, n).t(), s, 1.0);
                }
                if let Some(s) = self.slot(adj, *b) {
                    gemm(MatRef::new(ta.data(), m, k).t(), gm, s, 1.0);
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if let Some(s) = self.slot(adj, *a) {
                    for i in 0..bs {
                        gemm(
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::new(&tb.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                            &mut s[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if let Some(s) = self.slot(adj, *b) {
                    for i in 0..bs {
                        gemm(
                            MatRef::new(&ta.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            &mut s[i * k * n..(i + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
            Op::Linear(x, w, b) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (fin, fout) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / fin;
                let gm = MatRef::new(g, rows, fout);
                if let Some(s) = self.slot(adj, *x) {
                    gemm(gm, MatRef::new(tw.data(), fin, fout).t(), s, 1.0);
                }
                if let Some(s) = self.slot(adj, *w) {
                    gemm(MatRef::new(tx.data(), rows, fin).t(), gm, s, 1.0);
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(adj, *b) {
                        for r in g.chunks(fout) {
                            add_into(s, r);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (sx, sw) = (tx.shape(), tw.shape());
                let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, k) = (sw[0], sw[2]);
                let ho = conv_out(h, k, *stride, *pad);
                let wo = conv_out(wd, k, *stride, *pad);
                let (kk, hwo) = (cin * k * k, ho * wo);
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut col = vec![0.0; kk * hwo];
                let mut dcol = vec![0.0; kk * hwo];
                if need_w || need_x {
                    let mut gw = if need_w { Some(vec![0.0; tw.numel()]) } else { None };
                    let mut gx = if need_x { Some(vec![0.0; tx.numel()]) } else { None };
                    for i in 0..n {
                        let gi = MatRef::new(&g[i * cout * hwo..(i + 1) * cout * hwo], cout, hwo);
                        if let Some(gw) = gw.as_mut() {
                            let xi = &tx.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
                            kernels::im2col(xi, cin, h, wd, k, *stride, *pad, &mut col);
                            gemm(gi, MatRef::new(&col, kk, hwo).t(), gw, 1.0);
                        }
                        if let Some(gx) = gx.as_mut() {
                            gemm(MatRef::new(tw.data(), cout, kk).t(), gi, &mut dcol, 0.0);
                            let gxi = &mut gx[i * cin * h * wd..(i + 1) * cin * h * wd];
                            kernels::col2im(&dcol, cin, h, wd, k, *stride, *pad, gxi);
                        }
                    }
                    if let (Some(gw), Some(s)) = (gw, self.slot(adj, *w)) {
                        add_into(s, &gw);
                    }
                    if let (Some(gx), Some(s)) = (gx, self.slot(adj, *x)) {
                        add_into(s, &gx);
                    }
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(adj, *b) {
                        for i in 0..n {
                            for c in 0..cout {
                                let base = (i * cout + c) * hwo;
                                s[c] += g[base..base + hwo].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(s) = self.slot(adj, *x) {
                    for (o, &at) in argmax.iter().enumerate() {
                        s[at] += g[o];
                    }
                }
            }
            Op::AdaptiveAvgPool { x, n } => {
                let sx = self.value(*x).shape().to_vec();
                let (nc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                if let Some(s) = self.slot(adj, *x) {
                    for p in 0..nc {
                        for cy in 0..*n {
                            let (y0, y1) = adaptive_bin(cy, *n, h);
                            for cx in 0..*n {
                                let (x0, x1) = adaptive_bin(cx, *n, w);
                                let gv = g[p * n * n + cy * n + cx] / ((y1 - y0) * (x1 - x0)) as f64;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        s[p * h * w + yy * w + xx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                if let Some(s) = self.slot(adj, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                s[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    if let Some(s) = self.slot(adj, *p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut s[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.value(*x).shape().to_vec();
                let (outer, full, inner) = split_axis(&sx, *axis);
                let len = node.value.shape()[*axis];
                if let Some(s) = self.slot(adj, *x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut s[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(adj, *x) {
                    add_into(s, g);
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                if let Some(s) = self.slot(adj, *x) {
                    add_into(s, &back);
                }
            }
            Op::Expand { x, axis } => {
                let (outer, count, inner) = split_axis(node.value.shape(), *axis);
                if let Some(s) = self.slot(adj, *x) {
                    for o in 0..outer {
                        for c in 0..count {
                            let base = (o * count + c) * inner;
                            add_into(&mut s[o * inner..(o + 1) * inner], &g[base..base + inner]);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(adj, *x) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                if let Some(s) = self.slot(adj, *x) {
                    s.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let m = (n * inner) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for k in base..base + inner {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if let Some(sl) = self.slot(adj, *gamma) {
                    add_into(sl, &sum_gx);
                }
                if let Some(sl) = self.slot(adj, *beta) {
                    add_into(sl, &sum_g);
                }
                if let Some(sl) = self.slot(adj, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            let k0 = gam[ch] * inv_std[ch];
                            for k in base..base + inner {
                                sl[k] += if *batch_stats {
                                    k0 / m * (m * g[k] - sum_g[ch] - xhat[k] * sum_gx[ch])
                                } else {
                                    k0 * g[k]
                                };
                            }
                        }
                    }
                }
            }
            Op::GridSample { src, theta } => {
                let (ts, tt) = (self.value(*src), self.value(*theta));
                let ss = ts.shape();
                let (n, c, h, w) = (ss[0], ss[1], ss[2], ss[3]);
                let per = c * h * w;
                let mut gsrc = if self.rg(*src) { Some(vec![0.0; ts.numel()]) } else { None };
                let mut gth = if self.rg(*theta) { Some(vec![0.0; n * 6]) } else { None };
                for i in 0..n {
                    sample::warp_backward(
                        &ts.data()[i * per..(i + 1) * per],
                        c,
                        h,
                        w,
                        &tt.data()[i * 6..(i + 1) * 6],
                        &g[i * per..(i + 1) * per],
                        gsrc.as_mut().map(|v| &mut v[i * per..(i + 1) * per]),
                        gth.as_mut().map(|v| &mut v[i * 6..(i + 1) * 6]),
                    );
                }
                if let (Some(gs), Some(s)) = (gsrc, self.slot(adj, *src)) {
                    add_into(s, &gs);
                }
                if let (Some(gt), Some(s)) = (gth, self.slot(adj, *theta)) {
                    add_into(s, &gt);
                }
            }
        }
    }
}

/// Reorders row-major `data` of `shape` so that output axis `i` is input axis
/// `axes[i]`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, GradcheckOptions, Rng};

    fn check<F>(f: F, shapes: &[&[usize]], seeds: u64)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        for seed in 0..seeds {
            let mut rng = Rng::new(100 + seed);
            let point: Vec<Tensor> = shapes.iter().map(|s| rng.uniform_tensor(s, -1.0, 1.0)).collect();
            let r = gradcheck(&f, &point, GradcheckOptions::default()).unwrap();
            assert!(r.passes(1e-5), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn elementwise_gradients() {
        check(|g, v| g.mul(v[0], v[1]), &[&[3, 4], &[3, 4]], 3);
        check(|g, v| g.sub(v[0], v[1]), &[&[5], &[5]], 2);
        check(|g, v| g.add_suffix(v[0], v[1]), &[&[2, 3, 4], &[4]], 2);
        check(|g, v| Ok(g.tanh(v[0])), &[&[6]], 3);
        check(|g, v| Ok(g.sigmoid(v[0])), &[&[6]], 3);
        check(|g, v| Ok(g.leaky_relu(v[0], 0.2)), &[&[6]], 3);
        check(
            |g, v| {
                let e = g.exp(v[0]);
                let s = g.shift(e, 0.5);
                let l = g.log(s);
                let r = g.recip(s);
                let q = g.square(l);
                g.mul(q, r)
            },
            &[&[7]],
            3,
        );
    }

    #[test]
    fn structural_gradients() {
        check(|g, v| g.matmul(v[0], v[1]), &[&[3, 4], &[4, 2]], 3);
        check(|g, v| g.bmm(v[0], v[1]), &[&[2, 3, 4], &[2, 4, 5]], 2);
        check(|g, v| g.linear(v[0], v[1], Some(v[2])), &[&[3, 4], &[4, 2], &[2]], 2);
        check(|g, v| g.softmax(v[0], 1), &[&[2, 5, 3]], 3);
        check(|g, v| g.permute(v[0], &[2, 0, 1]), &[&[2, 3, 4]], 1);
        check(
            |g, v| {
                let s = g.slice(v[0], 1, 1, 1)?;
                let e = g.expand(s, 1, 3)?;
                g.concat(&[e, v[0]], 1)
            },
            &[&[2, 3, 2]],
            2,
        );
        check(|g, v| g.adaptive_avg_pool(v[0], 3), &[&[1, 2, 7, 5]], 2);
        check(|g, v| g.max_pool2(v[0]), &[&[1, 2, 4, 6]], 2);
    }

    #[test]
    fn conv_and_batchnorm_gradients() {
        check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1), &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], 2);
        check(|g, v| g.conv2d(v[0], v[1], None, 2, 1), &[&[1, 2, 6, 5], &[2, 2, 3, 3]], 2);
        check(
            |g, v| {
                let rm = g.constant(Tensor::zeros(&[3]));
                let rv = g.constant(Tensor::full(&[3], 1.0));
                g.batchnorm(v[0], v[1], v[2], rm, rv)
            },
            &[&[4, 3, 2, 2], &[3], &[3]],
            3,
        );
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = Rng::new(9);
        let x = rng.uniform_tensor(&[2, 3, 6, 5], -1.0, 1.0);
        let w = rng.uniform_tensor(&[4, 3, 3, 3], -1.0, 1.0);
        let b = rng.uniform_tensor(&[4], -1.0, 1.0);
        let mut g = Graph::new(false);
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 3, 3]);
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = b.data()[co];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 6 || ix >= 5 {
                                        continue;
                                    }
                                    acc += x.data()[((n * 3 + ci) * 6 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = g.value(y).data()[((n * 4 + co) * 3 + oy) * 3 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::full(&[2, 4], 3.7));
        let y = g.softmax(x, 1).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn matmul_identity() {
        let mut rng = Rng::new(1);
        let a = rng.uniform_tensor(&[3, 3], -1.0, 1.0);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let mut g = Graph::new(false);
        let (av, iv) = (g.constant(a.clone()), g.constant(eye));
        let y = g.matmul(av, iv).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn second_backward_doubles_leaf_grads() {
        let mut g = Graph::new(false);
        let x = g.input(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let y = g.square(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap().to_vec();
        assert_eq!(once, vec![2.0, -4.0]);
        assert_eq!(twice, vec![4.0, -8.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new(false);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        let img = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(matches!(g.adaptive_avg_pool(img, 8), Err(Error::InvalidGrid { .. })));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::full(&[2, 1, 1, 1], 3.0));
        let gamma = g.constant(Tensor::full(&[1], 2.0));
        let beta = g.constant(Tensor::full(&[1], 0.5));
        let rm = g.constant(Tensor::full(&[1], 1.0));
        let rv = g.constant(Tensor::full(&[1], 4.0));
        let y = g.batchnorm(x, gamma, beta, rm, rv).unwrap();
        let expect = 2.0 * (3.0 - 1.0) / (4.0 + BN_EPS).sqrt() + 0.5;
        assert!(g.value(y).data().iter().all(|v| (v - expect).abs() < 1e-12));
        assert!(g.take_stat_updates().is_empty());
    }
}
