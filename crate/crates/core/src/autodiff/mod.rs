//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and leaves
//! gradients on every leaf and parameter that requires them. Intermediate
//! gradients are dropped as soon as they have been propagated.

pub mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use self::kernels::{ConvGeom, ResizePlan};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        /// Batch statistics feed back into `xhat`; running statistics do not.
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Resize {
        x: Var,
        plan: ResizePlan<S>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Focal {
        logits: Var,
        target: Vec<S>,
        alpha: S,
        beta: S,
        npos: S,
    },
    Push {
        tl: Var,
        br: Var,
        margin: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<S>,
}

pub struct Graph<S: Real> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    param_vars: Vec<Option<Var>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::Axis { op, axis, rank });
    }
    Ok(())
}

fn check_rank(op: &'static str, t: &Tensor<impl Real>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Rank {
            op,
            expected: rank,
            found: t.rank(),
        });
    }
    Ok(())
}

fn accumulate<S: Real>(grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back onto the operand's own shape.
fn reduce_to<S: Real>(g: &[S], in_shape: &[usize], out_shape: &[usize]) -> Vec<S> {
    if in_shape == out_shape {
        return g.to_vec();
    }
    let n: usize = in_shape.iter().product();
    let mut out = vec![S::ZERO; n];
    for (gi, off) in g.iter().zip(kernels::broadcast_offsets(in_shape, out_shape)) {
        out[off] += *gi;
    }
    out
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is retained after [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter. Repeated requests reuse the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let i = id.index();
        if self.param_vars.len() <= i {
            self.param_vars.resize(i + 1, None);
        }
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_vars[i] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to a leaf or parameter.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape(), g.clone()).ok()
    }

    /// `(parameter, gradient)` for every parameter reached by the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[S])> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => self.grads.get(i)?.as_deref().map(|g| (id, g)),
            _ => None,
        })
    }

    // ---- convolution / pooling -------------------------------------------------

    fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_shape: Vec<usize>) -> Var {
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let out = kernels::conv_forward(xv, wv, bv, &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&out_shape, out).expect("conv output shape");
        self.push(value, Op::Conv { x, w, b, geom }, rg)
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs.len() != 1 || bs[0] != cout {
                return Err(Error::Dimension {
                    op,
                    axis: 0,
                    expected: cout,
                    found: bs.first().copied().unwrap_or(0),
                });
            }
        }
        Ok(())
    }

    /// 2D cross-correlation of `[Cin, H, W]` with `[Cout, Cin, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        check_rank(OP, self.value(x), 3)?;
        check_rank(OP, self.value(w), 4)?;
        if ws[1] != xs[0] {
            return Err(Error::Dimension {
                op: OP,
                axis: 0,
                expected: ws[1],
                found: xs[0],
            });
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::contract("conv2d: kernel extents must be odd"));
        }
        self.check_bias(OP, b, ws[0])?;
        let mut output = [1usize; 3];
        for (i, ax) in [1usize, 2].into_iter().enumerate() {
            output[i + 1] = ConvGeom::out_extent(xs[ax], ws[ax + 1], stride, padding).ok_or(Error::Dimension {
                op: OP,
                axis: ax,
                expected: ws[ax + 1],
                found: xs[ax] + 2 * padding,
            })?;
        }
        let geom = ConvGeom {
            cin: xs[0],
            cout: ws[0],
            input: [1, xs[1], xs[2]],
            kernel: [1, ws[2], ws[3]],
            stride: [1, stride, stride],
            pad: [0, padding, padding],
            output,
        };
        Ok(self.conv(x, w, b, geom, vec![ws[0], output[1], output[2]]))
    }

    /// 3D cross-correlation of `[Cin, T, H, W]` with `[Cout, Cin, kT, kH, kW]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        const OP: &str = "conv3d";
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        check_rank(OP, self.value(x), 4)?;
        check_rank(OP, self.value(w), 5)?;
        if ws[1] != xs[0] {
            return Err(Error::Dimension {
                op: OP,
                axis: 0,
                expected: ws[1],
                found: xs[0],
            });
        }
        if ws[2..].iter().any(|k| k % 2 == 0) {
            return Err(Error::contract("conv3d: kernel extents must be odd"));
        }
        self.check_bias(OP, b, ws[0])?;
        let mut output = [0usize; 3];
        for i in 0..3 {
            output[i] = ConvGeom::out_extent(xs[i + 1], ws[i + 2], stride[i], padding[i]).ok_or(Error::Dimension {
                op: OP,
                axis: i + 1,
                expected: ws[i + 2],
                found: xs[i + 1] + 2 * padding[i],
            })?;
        }
        let geom = ConvGeom {
            cin: xs[0],
            cout: ws[0],
            input: [xs[1], xs[2], xs[3]],
            kernel: [ws[2], ws[3], ws[4]],
            stride,
            pad: padding,
            output,
        };
        Ok(self.conv(x, w, b, geom, vec![ws[0], output[0], output[1], output[2]]))
    }

    /// Max pooling of `[C, T, H, W]` (no padding).
    pub fn maxpool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        const OP: &str = "maxpool3d";
        check_rank(OP, self.value(x), 4)?;
        let xs = self.value(x).shape().to_vec();
        let mut output = [0usize; 3];
        for i in 0..3 {
            output[i] = ConvGeom::out_extent(xs[i + 1], kernel[i], stride[i], 0).ok_or(Error::Dimension {
                op: OP,
                axis: i + 1,
                expected: kernel[i],
                found: xs[i + 1],
            })?;
        }
        let (out, argmax) =
            kernels::maxpool_forward(self.value(x).data(), xs[0], [xs[1], xs[2], xs[3]], kernel, stride, output);
        let value = Tensor::new(&[xs[0], output[0], output[1], output[2]], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Max pooling of `[C, H, W]` with a square window.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        check_rank("maxpool2d", self.value(x), 3)?;
        let s = self.value(x).shape().to_vec();
        let x4 = self.reshape(x, &[s[0], 1, s[1], s[2]])?;
        let y = self.maxpool3d(x4, [1, kernel, kernel], [1, stride, stride])?;
        let ys = self.value(y).shape().to_vec();
        self.reshape(y, &[ys[0], ys[2], ys[3]])
    }

    // ---- normalization ---------------------------------------------------------

    fn check_channel_params(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = self.value(x).shape()[0];
        for p in [gamma, beta] {
            let ps = self.value(p).shape();
            if ps.len() != 1 || ps[0] != c {
                return Err(Error::Dimension {
                    op,
                    axis: 0,
                    expected: c,
                    found: ps.first().copied().unwrap_or(0),
                });
            }
        }
        Ok(c)
    }

    /// Training-mode batch norm: statistics over every axis but the leading
    /// channel axis.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        let c = self.check_channel_params("batch_norm", x, gamma, beta)?;
        let xv = self.value(x);
        let m = xv.len() / c;
        let mf = S::from_usize(m);
        let mut mean = Vec::with_capacity(c);
        let mut var_b = Vec::with_capacity(c);
        for ch in xv.data().chunks(m) {
            let mu = ch.iter().copied().sum::<S>() / mf;
            let v = ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / mf;
            mean.push(mu);
            var_b.push(v);
        }
        let inv_std: Vec<S> = var_b.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (ci, ch) in xv.data().chunks(m).enumerate() {
            for &v in ch {
                let h = (v - mean[ci]) * inv_std[ci];
                xhat.push(h);
                out.push(g[ci] * h + b[ci]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let unbias = if m > 1 { mf / S::from_usize(m - 1) } else { S::ONE };
        let stats = BatchStats {
            mean,
            var: var_b.iter().map(|&v| v * unbias).collect(),
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((var, stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], var: &[S], eps: S) -> Result<Var> {
        let c = self.check_channel_params("batch_norm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Dimension {
                op: "batch_norm",
                axis: 0,
                expected: c,
                found: mean.len(),
            });
        }
        let xv = self.value(x);
        let m = xv.len() / c;
        let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (ci, ch) in xv.data().chunks(m).enumerate() {
            for &v in ch {
                let h = (v - mean[ci]) * inv_std[ci];
                xhat.push(h);
                out.push(g[ci] * h + b[ci]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    // ---- elementwise -----------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > S::ZERO { v } else { S::ZERO });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(Real::sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::new(av.shape(), data)?, rg));
        }
        let shape = kernels::broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
            let axis = av
                .shape()
                .iter()
                .zip(bv.shape())
                .position(|(x, y)| x != y && *x != 1 && *y != 1)
                .unwrap_or(0);
            if av.rank() != bv.rank() {
                Error::Rank {
                    op,
                    expected: av.rank(),
                    found: bv.rank(),
                }
            } else {
                Error::Dimension {
                    op,
                    axis,
                    expected: av.shape()[axis],
                    found: bv.shape()[axis],
                }
            }
        })?;
        let oa = kernels::broadcast_offsets(av.shape(), &shape);
        let ob = kernels::broadcast_offsets(bv.shape(), &shape);
        let data = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
            .collect();
        Ok((Tensor::new(&shape, data)?, rg))
    }

    /// Elementwise sum with broadcasting over size-1 axes of equal-rank operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: S) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    // ---- reductions / shape ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / S::from_usize(xv.len()));
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("mean_axis", axis, xv.rank())?;
        let (outer, n, inner) = outer_inner(xv.shape(), axis);
        let nf = S::from_usize(n);
        let mut out = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xv.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= nf);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanAxis { x, axis }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("softmax", axis, xv.rank())?;
        let (outer, n, inner) = outer_inner(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![S::ZERO; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut mx = d[at(0)];
                for k in 1..n {
                    mx = mx.max(d[at(k)]);
                }
                let mut z = S::ZERO;
                for k in 0..n {
                    let e = (d[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::contract("concat of zero tensors"))?);
        let rank = first.rank();
        check_axis("concat", axis, rank)?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != rank {
                return Err(Error::Rank {
                    op: "concat",
                    expected: rank,
                    found: s.len(),
                });
            }
            for ax in 0..rank {
                if ax != axis && s[ax] != first.shape()[ax] {
                    return Err(Error::Dimension {
                        op: "concat",
                        axis: ax,
                        expected: first.shape()[ax],
                        found: s[ax],
                    });
                }
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.len() / outer;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("narrow", axis, xv.rank())?;
        if len == 0 || start + len > xv.shape()[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                axis,
                expected: start + len,
                found: xv.shape()[axis],
            });
        }
        let (outer, n, inner) = outer_inner(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Bilinear resize of the trailing two axes (`align_corners=false`).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::Rank {
                op: "resize_bilinear",
                expected: 2,
                found: xv.rank(),
            });
        }
        let r = xv.rank();
        let plan = ResizePlan::new(xv.shape()[r - 2], xv.shape()[r - 1], out_h, out_w);
        let mut shape = xv.shape().to_vec();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let mut out = Tensor::zeros(&shape);
        plan.forward(xv.data(), out.data_mut());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize { x, plan }, rg))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.value(x).shape();
        let r = s.len();
        if r < 2 || factor == 0 {
            return Err(Error::contract("upsample_bilinear needs rank >= 2 and factor >= 1"));
        }
        let (h, w) = (s[r - 2] * factor, s[r - 1] * factor);
        self.resize_bilinear(x, h, w)
    }

    /// Picks flat elements; the result has shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() {
            return Err(Error::contract("gather with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::contract(alloc::format!(
                "gather index {bad} out of range for {} elements",
                xv.len()
            )));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(&[idx.len()], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    // ---- fused losses ----------------------------------------------------------

    /// Penalty-reduced focal loss evaluated from logits.
    ///
    /// `target` has the logits' shape; pixels equal to exactly 1 are positives.
    /// The sum is normalized by the positive count (at least 1).
    pub fn focal_loss_logits(&mut self, logits: Var, target: &Tensor<S>, alpha: S, beta: S) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() {
            let axis = lv.shape().iter().zip(target.shape()).position(|(a, b)| a != b).unwrap_or(0);
            return Err(Error::Dimension {
                op: "focal_loss",
                axis,
                expected: lv.shape().get(axis).copied().unwrap_or(0),
                found: target.shape().get(axis).copied().unwrap_or(0),
            });
        }
        let npos = target.data().iter().filter(|&&y| y == S::ONE).count().max(1);
        let npos = S::from_usize(npos);
        let mut total = S::ZERO;
        for (&x, &y) in lv.data().iter().zip(target.data()) {
            total += focal_term(x, y, alpha, beta);
        }
        let value = Tensor::scalar(-total / npos);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::Focal {
                logits,
                target: target.data().to_vec(),
                alpha,
                beta,
                npos,
            },
            rg,
        ))
    }

    /// Hinge push term over per-object mean embeddings `(tl + br) / 2`.
    pub fn push_loss(&mut self, tl: Var, br: Var, margin: S) -> Result<Var> {
        let (a, b) = (self.value(tl), self.value(br));
        if a.rank() != 1 || a.shape() != b.shape() {
            return Err(Error::contract("push_loss expects two equal-length vectors"));
        }
        let e: Vec<S> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x + y) * S::from_f64(0.5))
            .collect();
        let k = e.len();
        let mut total = S::ZERO;
        if k > 1 {
            for j in 0..k {
                for i in 0..k {
                    if i != j {
                        total += (margin - (e[j] - e[i]).abs()).max(S::ZERO);
                    }
                }
            }
            total /= S::from_usize(k * (k - 1));
        }
        let rg = self.rg(tl) || self.rg(br);
        Ok(self.push(Tensor::scalar(total), Op::Push { tl, br, margin }, rg))
    }

    // ---- backward --------------------------------------------------------------

    /// Accumulates d(loss)/d(node) into every leaf and parameter on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let need = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let cg = kernels::conv_backward(self.value(*x).data(), self.value(*w).data(), g, geom, need);
                if let Some(dx) = cg.input {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.weight {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.bias) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > S::ZERO { gi } else { S::ZERO })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = y.iter().zip(g).map(|(&s, &gi)| gi * s * (S::ONE - s)).collect();
                accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let mf = S::from_usize(m);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![S::ZERO; c];
                let mut dbeta = vec![S::ZERO; c];
                for ci in 0..c {
                    let gs = &g[ci * m..(ci + 1) * m];
                    let hs = &xhat[ci * m..(ci + 1) * m];
                    dbeta[ci] = gs.iter().copied().sum();
                    dgamma[ci] = gs.iter().zip(hs).map(|(&a, &b)| a * b).sum();
                }
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(xhat.len());
                    for ci in 0..c {
                        let gs = &g[ci * m..(ci + 1) * m];
                        let hs = &xhat[ci * m..(ci + 1) * m];
                        let k = gam[ci] * inv_std[ci];
                        if *batch_stats {
                            let (sg, sgh) = (dbeta[ci], dgamma[ci]);
                            for (&gi, &hi) in gs.iter().zip(hs) {
                                dx.push(k * (gi - sg / mf - hi * sgh / mf));
                            }
                        } else {
                            dx.extend(gs.iter().map(|&gi| k * gi));
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![S::ZERO; self.value(*x).len()];
                for (&a, &gi) in argmax.iter().zip(g) {
                    dx[a as usize] += gi;
                }
                accumulate(grads, *x, dx);
            }
            Op::Resize { x, plan } => {
                let mut dx = vec![S::ZERO; self.value(*x).len()];
                plan.backward(g, &mut dx);
                accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = outer_inner(node.value.shape(), *axis);
                let mut dx = vec![S::ZERO; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + j;
                        let dot: S = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let mut parts: Vec<Vec<S>> = xs
                    .iter()
                    .map(|&v| Vec::with_capacity(self.value(v).len()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, &v) in parts.iter_mut().zip(xs) {
                        let chunk = self.value(v).len() / outer;
                        p.extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (p, &v) in parts.into_iter().zip(xs) {
                    if self.rg(v) {
                        accumulate(grads, v, p);
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.value(*x).shape();
                let (outer, n, inner) = outer_inner(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![S::ZERO; self.value(*x).len()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = outer_inner(self.value(*x).shape(), *axis);
                let nf = S::from_usize(n);
                let mut dx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        dx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v / nf));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                let out_shape = node.value.shape();
                if self.rg(*a) {
                    accumulate(grads, *a, reduce_to(g, self.value(*a).shape(), out_shape));
                }
                if self.rg(*b) {
                    let mut gb = reduce_to(g, self.value(*b).shape(), out_shape);
                    if negate {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let out_shape = node.value.shape();
                let (av, bv) = (self.value(*a), self.value(*b));
                let same = av.shape() == out_shape && bv.shape() == out_shape;
                let (oa, ob) = if same {
                    (None, None)
                } else {
                    (
                        Some(kernels::broadcast_offsets(av.shape(), out_shape)),
                        Some(kernels::broadcast_offsets(bv.shape(), out_shape)),
                    )
                };
                let pick = |t: &Tensor<S>, offs: &Option<Vec<usize>>, k: usize| match offs {
                    Some(o) => t.data()[o[k]],
                    None => t.data()[k],
                };
                if self.rg(*a) {
                    let full: Vec<S> = g.iter().enumerate().map(|(k, &gi)| gi * pick(bv, &ob, k)).collect();
                    accumulate(grads, *a, reduce_to(&full, av.shape(), out_shape));
                }
                if self.rg(*b) {
                    let full: Vec<S> = g.iter().enumerate().map(|(k, &gi)| gi * pick(av, &oa, k)).collect();
                    accumulate(grads, *b, reduce_to(&full, bv.shape(), out_shape));
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(x) => accumulate(grads, *x, g.to_vec()),
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0] / S::from_usize(n); n]);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![S::ZERO; self.value(*x).len()];
                for (&i, &gi) in idx.iter().zip(g) {
                    dx[i] += gi;
                }
                accumulate(grads, *x, dx);
            }
            Op::Focal {
                logits,
                target,
                alpha,
                beta,
                npos,
            } => {
                let k = -g[0] / *npos;
                let dx = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&x, &t)| k * focal_term_grad(x, t, *alpha, *beta))
                    .collect();
                accumulate(grads, *logits, dx);
            }
            Op::Push { tl, br, margin } => {
                let (a, b) = (self.value(*tl).data(), self.value(*br).data());
                let n = a.len();
                let mut de = vec![S::ZERO; n];
                if n > 1 {
                    let half = S::from_f64(0.5);
                    let e: Vec<S> = a.iter().zip(b).map(|(&x, &y)| (x + y) * half).collect();
                    let norm = g[0] / S::from_usize(n * (n - 1));
                    for j in 0..n {
                        for i in 0..n {
                            if i == j {
                                continue;
                            }
                            let d = e[j] - e[i];
                            if *margin - d.abs() > S::ZERO && d != S::ZERO {
                                let sgn = if d > S::ZERO { S::ONE } else { -S::ONE };
                                de[j] -= sgn * norm;
                                de[i] += sgn * norm;
                            }
                        }
                    }
                    de.iter_mut().for_each(|v| *v *= half);
                }
                if self.rg(*tl) {
                    accumulate(grads, *tl, de.clone());
                }
                if self.rg(*br) {
                    accumulate(grads, *br, de);
                }
            }
        }
    }
}

/// Per-pixel focal contribution (before the `-1/Npos` factor).
fn focal_term<S: Real>(x: S, y: S, alpha: S, beta: S) -> S {
    let p = x.sigmoid();
    let log_p = -(-x).softplus();
    let log_1mp = -x.softplus();
    if y == S::ONE {
        (S::ONE - p).powf(alpha) * log_p
    } else {
        (S::ONE - y).powf(beta) * p.powf(alpha) * log_1mp
    }
}

/// d focal_term / d logit.
fn focal_term_grad<S: Real>(x: S, y: S, alpha: S, beta: S) -> S {
    let p = x.sigmoid();
    let q = S::ONE - p;
    if y == S::ONE {
        let log_p = -(-x).softplus();
        q.powf(alpha) * (q - alpha * p * log_p)
    } else {
        let log_q = -x.softplus();
        (S::ONE - y).powf(beta) * p.powf(alpha) * (alpha * q * log_q - p)
    }
}
