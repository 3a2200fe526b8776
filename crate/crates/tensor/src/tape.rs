//! Operation tape and reverse sweep.
//!
//! Every primitive appends one node holding its forward value together with
//! whatever it needs for the vector-Jacobian product. Nodes are appended in
//! creation order, which is already a topological order, so the reverse
//! sweep is a single pass from the loss index down to zero.

use crate::error::TensorError;
use crate::fft::BlockFft;
use crate::tensor::{axis_split, Tensor};
use num_complex::Complex64;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        axis: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
        mean: bool,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Fft {
        x: Var,
        ndim: usize,
    },
    IfftReal {
        x: Var,
        ndim: usize,
    },
    SpectralScale {
        x: Var,
        factor: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf. Leaves that did not influence the
    /// loss hold zeros; constants and intermediate nodes return `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<(), TensorError> {
    if axis >= t.rank() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: t.rank(),
        });
    }
    Ok(())
}

/// `c (m×n) += op(a) · op(b)`, row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn to_complex(data: &[f64]) -> Vec<Complex64> {
    data.chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}

/// Spatial block dims for a transform over the trailing `ndim` axes of `shape`.
fn spatial_dims(
    op: &'static str,
    shape: &[usize],
    ndim: usize,
) -> Result<Vec<usize>, TensorError> {
    if ndim == 0 || ndim > shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis: ndim,
            rank: shape.len(),
        });
    }
    Ok(shape[shape.len() - ndim..].to_vec())
}

fn fft_forward_real(data: &[f64], dims: &[usize]) -> Vec<f64> {
    let mut plan = BlockFft::new(dims, false);
    let block = plan.block_len();
    let scale = 1.0 / block as f64;
    let mut out = Vec::with_capacity(data.len() * 2);
    let mut buf = vec![Complex64::default(); block];
    for chunk in data.chunks_exact(block) {
        for (b, &v) in buf.iter_mut().zip(chunk) {
            *b = Complex64::new(v, 0.0);
        }
        plan.process(&mut buf);
        out.extend(buf.iter().flat_map(|c| [c.re * scale, c.im * scale]));
    }
    out
}

/// Real part of the unnormalized inverse transform, times `scale`.
fn fft_inverse_real(data: &[f64], dims: &[usize], scale: f64) -> Vec<f64> {
    let mut plan = BlockFft::new(dims, true);
    let block = plan.block_len();
    let mut out = Vec::with_capacity(data.len() / 2);
    for chunk in data.chunks_exact(2 * block) {
        let mut buf = to_complex(chunk);
        plan.process(&mut buf);
        out.extend(buf.iter().map(|c| c.re * scale));
    }
    out
}

fn complex_scale(data: &[f64], factor: &[f64], conjugate: bool) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let block = factor.len();
    for (chunk, dst) in data.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for ((z, f), o) in chunk
            .chunks_exact(2)
            .zip(factor.chunks_exact(2))
            .zip(dst.chunks_exact_mut(2))
        {
            let fi = if conjugate { -f[1] } else { f[1] };
            o[0] = z[0] * f[0] - z[1] * fi;
            o[1] = z[0] * fi + z[1] * f[0];
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        check_axis("softmax", x, axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax", axis });
        }
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Softmax { x: a, axis }, rg))
    }

    /// Normalizes to zero mean and unit (biased) variance along `axis`,
    /// with `eps` added to the variance. No affine part.
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var, TensorError> {
        let x = self.value(a);
        check_axis("layer_norm", x, axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        if n == 0 {
            return Err(TensorError::EmptyAxis {
                op: "layer_norm",
                axis,
            });
        }
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| src[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n)
                    .map(|j| {
                        let d = src[idx(j)] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    out[idx(j)] = (src[idx(j)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out.clone())?;
        let rg = self.rg(a);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x: a,
                axis,
                normalized: out,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(TensorError::EmptyAxis { op: "mean", axis: 0 });
        }
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a), rg))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let op = if mean { "mean_axis" } else { "sum_axis" };
        let x = self.value(a);
        check_axis(op, x, axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        if n == 0 && mean {
            return Err(TensorError::EmptyAxis { op, axis });
        }
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + j) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::SumAxis { x: a, axis, mean }, rg))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(a, axis, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, TensorError> {
        let x = self.value(a);
        check_axis("slice", x, axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        if start > end || end > n {
            return Err(TensorError::SliceBounds { start, end, len: n });
        }
        let m = end - start;
        let src = x.data();
        let mut out = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + m * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = m;
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Slice { x: a, axis, start }, rg))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let ref_shape = self.value(*first).shape().to_vec();
        check_axis("concat", self.value(*first), axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let ok = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: ref_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&ref_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let x = self.value(*p);
                let n = x.shape()[axis];
                let base = o * n * inner;
                out.extend_from_slice(&x.data()[base..base + n * inner]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.rank() < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: x.rank(),
            });
        }
        let r = x.rank();
        let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
        let out = transpose_blocks(x.data(), rows, cols);
        let mut shape = x.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    /// `a[..., k] · w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var, TensorError> {
        let (ta, tw) = (self.value(a), self.value(w));
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tw.shape().to_vec(),
        };
        if ta.rank() < 1 || tw.rank() != 2 {
            return Err(mismatch());
        }
        let k = *ta.shape().last().unwrap();
        if tw.shape()[0] != k {
            return Err(mismatch());
        }
        let n = tw.shape()[1];
        let m = ta.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tw.data(), false, &mut out);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(v, Op::MatMul(a, w), rg))
    }

    /// `a[b, m, k] · c[b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..],
                false,
                &tb.data()[i * k * n..],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let v = Tensor::new(vec![batch, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::BatchMatMul(a, b), rg))
    }

    fn broadcast_inner(
        &self,
        op: &'static str,
        x: Var,
        b: Var,
    ) -> Result<(usize, usize), TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (sx, sb) = (tx.shape(), tb.shape());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let inner = tb.len();
        Ok((tx.len() / inner.max(1), inner))
    }

    /// `x + b` where `b`'s shape equals the trailing dims of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_inner("add_broadcast", x, b)?;
        let tb = self.value(b).data().to_vec();
        let tx = self.value(x);
        let data = tx
            .data()
            .chunks_exact(tb.len().max(1))
            .flat_map(|row| row.iter().zip(&tb).map(|(u, v)| u + v))
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddBroadcast(x, b), rg))
    }

    /// `x * g` where `g`'s shape equals the trailing dims of `x`.
    pub fn mul_broadcast(&mut self, x: Var, g: Var) -> Result<Var, TensorError> {
        self.broadcast_inner("mul_broadcast", x, g)?;
        let tg = self.value(g).data().to_vec();
        let tx = self.value(x);
        let data = tx
            .data()
            .chunks_exact(tg.len().max(1))
            .flat_map(|row| row.iter().zip(&tg).map(|(u, v)| u * v))
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(v, Op::MulBroadcast(x, g), rg))
    }

    /// Forward DFT over the trailing `ndim` axes of a real tensor, divided by
    /// the block size. Output gains a trailing (re, im) axis of length 2.
    pub fn fft(&mut self, a: Var, ndim: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        let dims = spatial_dims("fft", x.shape(), ndim)?;
        let out = fft_forward_real(x.data(), &dims);
        let mut shape = x.shape().to_vec();
        shape.push(2);
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Fft { x: a, ndim }, rg))
    }

    /// Real part of the unscaled inverse DFT of a complex tensor laid out as
    /// `[..., n_1, ..., n_ndim, 2]`. Inverse of [`Tape::fft`] on Hermitian input.
    pub fn ifft_real(&mut self, a: Var, ndim: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        let shape = x.shape();
        if shape.last() != Some(&2) {
            return Err(TensorError::ShapeMismatch {
                op: "ifft_real",
                lhs: shape.to_vec(),
                rhs: vec![2],
            });
        }
        let dims = spatial_dims("ifft_real", &shape[..shape.len() - 1], ndim)?;
        let out = fft_inverse_real(x.data(), &dims, 1.0);
        let v = Tensor::new(shape[..shape.len() - 1].to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::IfftReal { x: a, ndim }, rg))
    }

    /// Complex multiplication of `[..., modes..., 2]` by a fixed per-mode
    /// factor of shape `[modes..., 2]`, broadcast over leading axes.
    pub fn spectral_scale(&mut self, a: Var, factor: &Tensor) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (sx, sf) = (x.shape(), factor.shape());
        if sf.last() != Some(&2) || sf.len() > sx.len() || sx[sx.len() - sf.len()..] != *sf {
            return Err(TensorError::ShapeMismatch {
                op: "spectral_scale",
                lhs: sx.to_vec(),
                rhs: sf.to_vec(),
            });
        }
        let out = complex_scale(x.data(), factor.data(), false);
        let v = Tensor::new(sx.to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(
            v,
            Op::SpectralScale {
                x: a,
                factor: factor.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaf_grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        // Leaves created after the loss never influenced it.
        for (idx, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) {
                leaf_grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(d, &x)| *d += c * x)
            }),
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((d, &x), &e) in s.iter_mut().zip(g).zip(y) {
                        *d += x * e;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                s[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                axis,
                normalized,
                inv_std,
            } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let mg = (0..n).map(|j| g[idx(j)]).sum::<f64>() / n as f64;
                            let mgx = (0..n)
                                .map(|j| g[idx(j)] * normalized[idx(j)])
                                .sum::<f64>()
                                / n as f64;
                            let r = inv_std[o * inner + i];
                            for j in 0..n {
                                s[idx(j)] += r * (g[idx(j)] - mg - normalized[idx(j)] * mgx);
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumAxis { x, axis, mean } => {
                let (outer, n, inner) = axis_split(self.value(*x).shape(), *axis);
                let w = if *mean { 1.0 / n as f64 } else { 1.0 };
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                s[(o * n + j) * inner + i] += w * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.value(*x).shape(), *axis);
                let m = node.value.shape()[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * m * inner;
                        add_into(&mut s[dst..dst + m * inner], &g[src..src + m * inner]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).shape()[*axis];
                    acc(*p, &mut |s| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            add_into(&mut s[dst..dst + n * inner], &g[src..src + n * inner]);
                        }
                    });
                    offset += n;
                }
            }
            Op::Transpose(a) => {
                let shape = node.value.shape();
                let r = shape.len();
                let gt = transpose_blocks(g, shape[r - 2], shape[r - 1]);
                acc(*a, &mut |s| add_into(s, &gt));
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let k = tw.shape()[0];
                let n = tw.shape()[1];
                let m = ta.len() / k.max(1);
                acc(*a, &mut |s| gemm(m, n, k, g, false, tw.data(), true, s));
                acc(*w, &mut |s| gemm(k, m, n, ta.data(), true, g, false, s));
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                acc(*a, &mut |s| {
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &tb.data()[i * k * n..],
                            true,
                            &mut s[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data()[i * m * k..],
                            true,
                            &g[i * m * n..],
                            false,
                            &mut s[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::AddBroadcast(x, b) => {
                let inner = self.value(*b).len().max(1);
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for row in g.chunks_exact(inner) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulBroadcast(x, m) => {
                let tm = self.value(*m).data();
                let tx = self.value(*x).data();
                let inner = tm.len().max(1);
                acc(*x, &mut |s| {
                    for (srow, grow) in s.chunks_exact_mut(inner).zip(g.chunks_exact(inner)) {
                        for ((d, &gv), &mv) in srow.iter_mut().zip(grow).zip(tm) {
                            *d += gv * mv;
                        }
                    }
                });
                acc(*m, &mut |s| {
                    for (grow, xrow) in g.chunks_exact(inner).zip(tx.chunks_exact(inner)) {
                        for ((d, &gv), &xv) in s.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                });
            }
            Op::Fft { x, ndim } => {
                let shape = self.value(*x).shape();
                let dims = shape[shape.len() - ndim..].to_vec();
                let block: usize = dims.iter().product();
                let gx = fft_inverse_real(g, &dims, 1.0 / block as f64);
                acc(*x, &mut |s| add_into(s, &gx));
            }
            Op::IfftReal { x, ndim } => {
                let shape = node.value.shape();
                let dims = shape[shape.len() - ndim..].to_vec();
                let gz = fft_forward_real(g, &dims);
                let block: usize = dims.iter().product();
                let scale = block as f64;
                acc(*x, &mut |s| {
                    s.iter_mut().zip(&gz).for_each(|(d, &v)| *d += v * scale)
                });
            }
            Op::SpectralScale { x, factor } => {
                let gx = complex_scale(g, factor.data(), true);
                acc(*x, &mut |s| add_into(s, &gx));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn transpose_blocks(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; data.len()];
    if block == 0 {
        return out;
    }
    for (src, dst) in data.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}
