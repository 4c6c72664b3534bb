//! A small tape-based reverse-mode autodiff engine.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the tape in reverse and accumulates gradients. Feature maps use the
//! `[N, C, D, H, W]` layout; 2-D maps are represented with `D = 1`.

use crate::error::{LddmError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    InstanceNorm {
        x: Var,
        eps: f64,
    },
    AvgPool {
        x: Var,
        f: [usize; 3],
    },
    Upsample {
        x: Var,
        f: [usize; 3],
    },
    RepeatTime {
        x: Var,
        depth: usize,
    },
    PoolSpatial(Var),
    GlobalMean(Var),
    Reshape(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
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

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LddmError::ShapeMismatch {
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank_error(expected: usize, t: &Tensor) -> LddmError {
    LddmError::Geometry(format!(
        "expected rank-{expected} tensor, got shape {:?}",
        t.shape()
    ))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a · b + beta · c` for row-major `a: [m, k]` (or its transpose view) and `b: [k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: lengths checked above; strides describe views inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    od: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.ci * self.k[0] * self.k[1] * self.k[2]
    }
    fn positions(&self) -> usize {
        self.od * self.oh * self.ow
    }
}

/// Output indices `o` in `0..n_out` with `o·stride + k − pad` inside `0..len`.
fn valid_range(n_out: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // first o with o·stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // last o with o·stride + k − pad <= len − 1
    let hi = if len + pad > k { ((len + pad - 1 - k) / stride + 1).min(n_out) } else { 0 };
    (lo.min(hi), hi)
}

/// Visits every contiguous run of valid output positions for kernel offset
/// `kk`, passing `(dst_start, src_start, count)`; source steps by `stride[2]`.
fn for_each_run(g: &ConvGeom, ci: usize, kk: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let (zl, zh) = valid_range(g.od, g.d, g.stride[0], kk[0], g.pad[0]);
    let (yl, yh) = valid_range(g.oh, g.h, g.stride[1], kk[1], g.pad[1]);
    let (xl, xh) = valid_range(g.ow, g.w, g.stride[2], kk[2], g.pad[2]);
    if xl >= xh {
        return;
    }
    for od in zl..zh {
        let z = od * g.stride[0] + kk[0] - g.pad[0];
        for oh in yl..yh {
            let y = oh * g.stride[1] + kk[1] - g.pad[1];
            let x0 = xl * g.stride[2] + kk[2] - g.pad[2];
            let src = ((ci * g.d + z) * g.h + y) * g.w + x0;
            let dst = (od * g.oh + oh) * g.ow + xl;
            f(dst, src, xh - xl);
        }
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let p = g.positions();
    let (sx, plane) = (g.stride[2], g.oh * g.ow);
    let mut row = 0;
    for ci in 0..g.ci {
        for a in 0..g.k[0] {
            for b in 0..g.k[1] {
                for c in 0..g.k[2] {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (zl, zh) = valid_range(g.od, g.d, g.stride[0], a, g.pad[0]);
                    let (yl, yh) = valid_range(g.oh, g.h, g.stride[1], b, g.pad[1]);
                    let (xl, xh) = valid_range(g.ow, g.w, sx, c, g.pad[2]);
                    for od in 0..g.od {
                        let slab = &mut dst[od * plane..(od + 1) * plane];
                        if od < zl || od >= zh || xl >= xh {
                            slab.fill(0.0);
                            continue;
                        }
                        let z = od * g.stride[0] + a - g.pad[0];
                        for oh in 0..g.oh {
                            let run = &mut slab[oh * g.ow..(oh + 1) * g.ow];
                            if oh < yl || oh >= yh {
                                run.fill(0.0);
                                continue;
                            }
                            let y = oh * g.stride[1] + b - g.pad[1];
                            let src = ((ci * g.d + z) * g.h + y) * g.w + xl * sx + c - g.pad[2];
                            run[..xl].fill(0.0);
                            run[xh..].fill(0.0);
                            let n = xh - xl;
                            if sx == 1 {
                                run[xl..xh].copy_from_slice(&x[src..src + n]);
                            } else {
                                for i in 0..n {
                                    run[xl + i] = x[src + i * sx];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    let sx = g.stride[2];
    let mut row = 0;
    for ci in 0..g.ci {
        for a in 0..g.k[0] {
            for b in 0..g.k[1] {
                for c in 0..g.k[2] {
                    let src = &col[row * p..(row + 1) * p];
                    for_each_run(g, ci, [a, b, c], |d0, s0, n| {
                        for i in 0..n {
                            dx[s0 + i * sx] += src[d0 + i];
                        }
                    });
                    row += 1;
                }
            }
        }
    }
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

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used to differentiate w.r.t. inputs).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same length");
        let ng = self.ng(&[x]);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.map(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.map(x, |v| v + k, Op::AddScalar(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    fn channel_broadcast(&mut self, x: Var, v: Var, mul: bool) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let s = tx.shape();
        if s.len() < 2 || tv.shape() != [s[0], s[1]] {
            return Err(LddmError::ShapeMismatch {
                expected: s.iter().take(2).copied().collect(),
                found: tv.shape().to_vec(),
            });
        }
        let inner: usize = s[2..].iter().product();
        let mut data = tx.data().to_vec();
        for (nc, chunk) in data.chunks_mut(inner).enumerate() {
            let k = tv.data()[nc];
            if mul {
                chunk.iter_mut().for_each(|e| *e *= k);
            } else {
                chunk.iter_mut().for_each(|e| *e += k);
            }
        }
        let t = Tensor::new(s.to_vec(), data)?;
        let op = if mul {
            Op::MulChannel(x, v)
        } else {
            Op::AddChannel(x, v)
        };
        let ng = self.ng(&[x, v]);
        Ok(self.push(t, op, ng))
    }

    /// Adds `v: [N, C]` to every element of channel `c` of sample `n` in `x: [N, C, ...]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.channel_broadcast(x, v, false)
    }

    /// Multiplies channel `c` of sample `n` in `x: [N, C, ...]` by `v[n, c]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.channel_broadcast(x, v, true)
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 5 {
            return Err(rank_error(5, tx));
        }
        if tw.shape().len() != 5 {
            return Err(rank_error(5, tw));
        }
        let [n, ci, d, h, wd] = [
            tx.shape()[0],
            tx.shape()[1],
            tx.shape()[2],
            tx.shape()[3],
            tx.shape()[4],
        ];
        let co = tw.shape()[0];
        if tw.shape()[1] != ci {
            return Err(LddmError::ShapeMismatch {
                expected: vec![co, ci],
                found: tw.shape()[..2].to_vec(),
            });
        }
        let k = [tw.shape()[2], tw.shape()[3], tw.shape()[4]];
        let out_dim = |len: usize, i: usize| -> Result<usize> {
            let padded = len + 2 * pad[i];
            if padded < k[i] || stride[i] == 0 {
                return Err(LddmError::Geometry(format!(
                    "kernel {k:?} does not fit input {:?}",
                    tx.shape()
                )));
            }
            Ok((padded - k[i]) / stride[i] + 1)
        };
        let g = ConvGeom {
            ci,
            d,
            h,
            w: wd,
            k,
            stride,
            pad,
            od: out_dim(d, 0)?,
            oh: out_dim(h, 1)?,
            ow: out_dim(wd, 2)?,
        };
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(LddmError::ShapeMismatch {
                    expected: vec![co],
                    found: self.value(b).shape().to_vec(),
                });
            }
        }
        let (kc, p) = (g.cols(), g.positions());
        let in_per = ci * d * h * wd;
        let mut out = vec![0.0; n * co * p];
        let mut col = vec![0.0; kc * p];
        for s in 0..n {
            im2col(&g, &tx.data()[s * in_per..(s + 1) * in_per], &mut col);
            let o = &mut out[s * co * p..(s + 1) * co * p];
            if let Some(b) = b {
                for (c, row) in o.chunks_mut(p).enumerate() {
                    row.fill(self.nodes[b.0].value.data()[c]);
                }
            }
            gemm(
                co,
                kc,
                p,
                tw.data(),
                (kc as isize, 1),
                &col,
                (p as isize, 1),
                1.0,
                o,
            );
        }
        let t = Tensor::new(vec![n, co, g.od, g.oh, g.ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(
            t,
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]` → `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(LddmError::ShapeMismatch {
                expected: tw.shape().to_vec(),
                found: tx.shape().to_vec(),
            });
        }
        let (n, i, o) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [o] {
                return Err(LddmError::ShapeMismatch {
                    expected: vec![o],
                    found: tb.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(tb.data());
            }
        }
        gemm(
            n,
            i,
            o,
            tx.data(),
            (i as isize, 1),
            tw.data(),
            (1, i as isize),
            1.0,
            &mut out,
        );
        let t = Tensor::new(vec![n, o], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(t, Op::Linear { x, w, b }, ng))
    }

    /// Normalizes each `(n, c)` slice of `x: [N, C, ...]` to zero mean and
    /// unit standard deviation: `(x − μ) / (σ + eps)`.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() < 3 {
            return Err(rank_error(3, tx));
        }
        let inner: usize = tx.shape()[2..].iter().product();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            let (mu, sd) = mean_std(chunk);
            let inv = 1.0 / (sd + eps);
            chunk.iter_mut().for_each(|e| *e = (*e - mu) * inv);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::InstanceNorm { x, eps }, ng))
    }

    pub fn avg_pool(&mut self, x: Var, f: [usize; 3]) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 5 {
            return Err(rank_error(5, tx));
        }
        if (0..3).any(|i| f[i] == 0 || s[i + 2] % f[i] != 0) {
            return Err(LddmError::Geometry(format!(
                "pool factors {f:?} do not divide {:?}",
                &s[2..]
            )));
        }
        let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
        let (od, oh, ow) = (d / f[0], h / f[1], w / f[2]);
        let norm = 1.0 / (f[0] * f[1] * f[2]) as f64;
        let mut out = vec![0.0; nc * od * oh * ow];
        for c in 0..nc {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((c * od + z / f[0]) * oh + y / f[1]) * ow + xx / f[2];
                        out[o] += tx.data()[((c * d + z) * h + y) * w + xx] * norm;
                    }
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], od, oh, ow], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::AvgPool { x, f }, ng))
    }

    /// Nearest-neighbour upsampling by integer factors along `(D, H, W)`.
    pub fn upsample(&mut self, x: Var, f: [usize; 3]) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 5 {
            return Err(rank_error(5, tx));
        }
        let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
        let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
        let mut out = vec![0.0; nc * od * oh * ow];
        for c in 0..nc {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[((c * od + z) * oh + y) * ow + xx] =
                            tx.data()[((c * d + z / f[0]) * h + y / f[1]) * w + xx / f[2]];
                    }
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], od, oh, ow], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Upsample { x, f }, ng))
    }

    /// `[N, C, 1, H, W]` → `[N, C, depth, H, W]` by repetition along time.
    pub fn repeat_time(&mut self, x: Var, depth: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 5 || s[2] != 1 {
            return Err(LddmError::Geometry(format!(
                "repeat_time expects [N, C, 1, H, W], got {s:?}"
            )));
        }
        let hw = s[3] * s[4];
        let mut out = Vec::with_capacity(tx.len() * depth);
        for chunk in tx.data().chunks(hw) {
            for _ in 0..depth {
                out.extend_from_slice(chunk);
            }
        }
        let t = Tensor::new(vec![s[0], s[1], depth, s[3], s[4]], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::RepeatTime { x, depth }, ng))
    }

    /// Mean over `(H, W)`: `[N, C, D, H, W]` → `[N, C·D]`.
    pub fn pool_spatial(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 5 {
            return Err(rank_error(5, tx));
        }
        let hw = s[3] * s[4];
        let data = tx
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(vec![s[0], s[1] * s[2]], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::PoolSpatial(x), ng))
    }

    /// Mean over every axis after the channel axis: `[N, C, ...]` → `[N, C]`.
    pub fn global_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() < 3 {
            return Err(rank_error(3, tx));
        }
        let inner: usize = s[2..].iter().product();
        let data = tx
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let t = Tensor::new(vec![s[0], s[1]], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::GlobalMean(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Mean squared difference over all elements; a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb)?;
        let n = ta.len().max(1) as f64;
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), ng))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let s = tl.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(LddmError::ShapeMismatch {
                expected: vec![labels.len(), s.get(1).copied().unwrap_or(0)],
                found: s.to_vec(),
            });
        }
        let k = s[1];
        let mut loss = 0.0;
        for (row, &l) in tl.data().chunks(k).zip(labels) {
            let p = softmax(row);
            loss -= p[l].max(1e-300).ln();
        }
        loss /= labels.len() as f64;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(LddmError::InvalidArgument(
                "backward requires a scalar loss".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * va[i];
                    }
                });
            }
            Op::Scale(x, k) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(e, y)| *e += k * y));
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, gd)),
            Op::AddChannel(x, v) => {
                let inner = gd.len() / self.value(*v).len();
                self.acc(grads, *x, |d| add_into(d, gd));
                self.acc(grads, *v, |d| {
                    for (k, chunk) in gd.chunks(inner).enumerate() {
                        d[k] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::MulChannel(x, v) => {
                let tv = self.value(*v).data();
                let tx = self.value(*x).data();
                let inner = gd.len() / tv.len();
                self.acc(grads, *x, |d| {
                    for (k, (dc, gc)) in d.chunks_mut(inner).zip(gd.chunks(inner)).enumerate() {
                        dc.iter_mut().zip(gc).for_each(|(e, y)| *e += tv[k] * y);
                    }
                });
                self.acc(grads, *v, |d| {
                    for (k, (xc, gc)) in tx.chunks(inner).zip(gd.chunks(inner)).enumerate() {
                        d[k] += xc.iter().zip(gc).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Silu(x) => {
                let tx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        let s = sigmoid(tx[i]);
                        d[i] += gd[i] * (s + tx[i] * s * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(node, gd, *x, *w, *b, *stride, *pad, grads),
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, i, o) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                self.acc(grads, *x, |d| {
                    gemm(n, o, i, gd, (o as isize, 1), tw.data(), (i as isize, 1), 1.0, d)
                });
                self.acc(grads, *w, |d| {
                    gemm(o, n, i, gd, (1, o as isize), tx.data(), (i as isize, 1), 1.0, d)
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in gd.chunks(o) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::InstanceNorm { x, eps } => {
                let tx = self.value(*x);
                let inner: usize = tx.shape()[2..].iter().product();
                self.acc(grads, *x, |d| {
                    for ((dc, xc), gc) in d
                        .chunks_mut(inner)
                        .zip(tx.data().chunks(inner))
                        .zip(gd.chunks(inner))
                    {
                        let (mu, sd) = mean_std(xc);
                        let inv = 1.0 / (sd + eps);
                        let s = inner as f64;
                        let gbar = gc.iter().sum::<f64>() / s;
                        let gx: f64 = gc.iter().zip(xc).map(|(g, x)| g * (x - mu)).sum();
                        let coef = if sd > 0.0 { inv * inv * gx / (s * sd) } else { 0.0 };
                        for j in 0..inner {
                            dc[j] += inv * (gc[j] - gbar) - coef * (xc[j] - mu);
                        }
                    }
                });
            }
            Op::AvgPool { x, f } => {
                let s = self.value(*x).shape().to_vec();
                let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
                let (od, oh, ow) = (d / f[0], h / f[1], w / f[2]);
                let norm = 1.0 / (f[0] * f[1] * f[2]) as f64;
                self.acc(grads, *x, |dx| {
                    for c in 0..nc {
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..w {
                                    let o = ((c * od + z / f[0]) * oh + y / f[1]) * ow + xx / f[2];
                                    dx[((c * d + z) * h + y) * w + xx] += gd[o] * norm;
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, f } => {
                let s = self.value(*x).shape().to_vec();
                let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
                let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
                self.acc(grads, *x, |dx| {
                    for c in 0..nc {
                        for z in 0..od {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    dx[((c * d + z / f[0]) * h + y / f[1]) * w + xx / f[2]] +=
                                        gd[((c * od + z) * oh + y) * ow + xx];
                                }
                            }
                        }
                    }
                });
            }
            Op::RepeatTime { x, depth } => {
                let s = self.value(*x).shape();
                let hw = s[3] * s[4];
                self.acc(grads, *x, |dx| {
                    for (k, dc) in dx.chunks_mut(hw).enumerate() {
                        for t in 0..*depth {
                            let off = (k * depth + t) * hw;
                            add_into(dc, &gd[off..off + hw]);
                        }
                    }
                });
            }
            Op::PoolSpatial(x) => {
                let s = self.value(*x).shape();
                let hw = s[3] * s[4];
                self.acc(grads, *x, |dx| {
                    for (k, dc) in dx.chunks_mut(hw).enumerate() {
                        let v = gd[k] / hw as f64;
                        dc.iter_mut().for_each(|e| *e += v);
                    }
                });
            }
            Op::GlobalMean(x) => {
                let s = self.value(*x).shape();
                let inner: usize = s[2..].iter().product();
                self.acc(grads, *x, |dx| {
                    for (k, dc) in dx.chunks_mut(inner).enumerate() {
                        let v = gd[k] / inner as f64;
                        dc.iter_mut().for_each(|e| *e += v);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * gd[0] / va.len().max(1) as f64;
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += k * (va[i] - vb[i]);
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= k * (va[i] - vb[i]);
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let k = tl.shape()[1];
                let scale = gd[0] / labels.len() as f64;
                self.acc(grads, *logits, |d| {
                    for ((dr, row), &l) in d.chunks_mut(k).zip(tl.data().chunks(k)).zip(labels) {
                        let p = softmax(row);
                        for j in 0..k {
                            let target = if j == l { 1.0 } else { 0.0 };
                            dr[j] += scale * (p[j] - target);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node: &Node,
        gd: &[f64],
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
        grads: &mut [Option<Tensor>],
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape();
        let os = node.value.shape();
        let (n, co) = (xs[0], tw.shape()[0]);
        let g = ConvGeom {
            ci: xs[1],
            d: xs[2],
            h: xs[3],
            w: xs[4],
            k: [tw.shape()[2], tw.shape()[3], tw.shape()[4]],
            stride,
            pad,
            od: os[2],
            oh: os[3],
            ow: os[4],
        };
        let (kc, p) = (g.cols(), g.positions());
        let in_per = g.ci * g.d * g.h * g.w;
        let need_x = self.nodes[x.0].needs_grad;
        let need_w = self.nodes[w.0].needs_grad;
        if let Some(b) = b {
            self.acc(grads, b, |db| {
                for s in 0..n {
                    for (c, row) in gd[s * co * p..(s + 1) * co * p].chunks(p).enumerate() {
                        db[c] += row.iter().sum::<f64>();
                    }
                }
            });
        }
        if !need_x && !need_w {
            return;
        }
        let mut col = vec![0.0; kc * p];
        let mut dw = vec![0.0; co * kc];
        let mut dx = if need_x {
            vec![0.0; tx.len()]
        } else {
            Vec::new()
        };
        for s in 0..n {
            let go = &gd[s * co * p..(s + 1) * co * p];
            if need_w {
                im2col(&g, &tx.data()[s * in_per..(s + 1) * in_per], &mut col);
                gemm(co, p, kc, go, (p as isize, 1), &col, (1, p as isize), 1.0, &mut dw);
            }
            if need_x {
                gemm(
                    kc,
                    co,
                    p,
                    tw.data(),
                    (1, kc as isize),
                    go,
                    (p as isize, 1),
                    0.0,
                    &mut col,
                );
                col2im_add(&g, &col, &mut dx[s * in_per..(s + 1) * in_per]);
            }
        }
        if need_w {
            self.acc(grads, w, |d| add_into(d, &dw));
        }
        if need_x {
            self.acc(grads, x, |d| add_into(d, &dx));
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
