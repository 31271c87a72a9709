mod conv;
mod gemm;

pub use conv::Conv2d;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Split a shape at `axis` into (outer, axis length, inner) extents.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(&*other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op("add", &[self, other], self.shape().to_vec(), data, |ctx| {
            Ok(vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())])
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(&*other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op("sub", &[self, other], self.shape().to_vec(), data, |ctx| {
            Ok(vec![
                Some(ctx.grad.to_vec()),
                Some(ctx.grad.iter().map(|g| -g).collect()),
            ])
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(&*other.data()).map(|(a, b)| a * b).collect();
        Tensor::from_op("mul", &[self, other], self.shape().to_vec(), data, |ctx| {
            let a = ctx.inputs[0].data();
            let b = ctx.inputs[1].data();
            let da = ctx.grad.iter().zip(&*b).map(|(g, v)| g * v).collect();
            let db = ctx.grad.iter().zip(&*a).map(|(g, v)| g * v).collect();
            Ok(vec![Some(da), Some(db)])
        })
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        if !factor.is_finite() {
            return Err(Error::invalid("scale", "factor must be finite"));
        }
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op("scale", &[self], self.shape().to_vec(), data, move |ctx| {
            Ok(vec![Some(ctx.grad.iter().map(|g| g * factor).collect())])
        })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data().iter().sum();
        let n = self.len();
        Tensor::from_op("sum", &[self], Vec::new(), vec![total], move |ctx| {
            Ok(vec![Some(vec![ctx.grad[0]; n])])
        })
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&self) -> Result<Tensor> {
        if self.len() == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let n = self.len();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op("mean", &[self], Vec::new(), vec![total / n as f64], move |ctx| {
            Ok(vec![Some(vec![ctx.grad[0] / n as f64; n])])
        })
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op("reshape", &[self], shape, self.to_vec(), |ctx| {
            Ok(vec![Some(ctx.grad.to_vec())])
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op("relu", &[self], self.shape().to_vec(), data, |ctx| {
            let x = ctx.inputs[0].data();
            Ok(vec![Some(
                ctx.grad.iter().zip(&*x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
            )])
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        if !slope.is_finite() {
            return Err(Error::invalid("leaky_relu", "slope must be finite"));
        }
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        Tensor::from_op("leaky_relu", &[self], self.shape().to_vec(), data, move |ctx| {
            let x = ctx.inputs[0].data();
            Ok(vec![Some(
                ctx.grad
                    .iter()
                    .zip(&*x)
                    .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                    .collect(),
            )])
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        // Branch on sign for numerical stability at large |x|.
        let data = self
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        Tensor::from_op("sigmoid", &[self], self.shape().to_vec(), data, |ctx| {
            let y = ctx.output.data();
            Ok(vec![Some(
                ctx.grad.iter().zip(&*y).map(|(g, &s)| g * s * (1.0 - s)).collect(),
            )])
        })
    }

    /// Elementwise square root. Inputs must be strictly positive so the
    /// gradient `1/(2√x)` stays finite; add a small epsilon upstream when a
    /// value can reach zero.
    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("sqrt", "inputs must be strictly positive"));
        }
        let data = self.data().iter().map(|&v| v.sqrt()).collect();
        Tensor::from_op("sqrt", &[self], self.shape().to_vec(), data, |ctx| {
            let y = ctx.output.data();
            Ok(vec![Some(
                ctx.grad.iter().zip(&*y).map(|(g, &s)| g * 0.5 / s).collect(),
            )])
        })
    }

    /// Elementwise reciprocal. Inputs must be bounded away from zero.
    pub fn recip(&self) -> Result<Tensor> {
        if self.data().iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::invalid("recip", "inputs must be finite and nonzero"));
        }
        let data = self.data().iter().map(|&v| 1.0 / v).collect();
        Tensor::from_op("recip", &[self], self.shape().to_vec(), data, |ctx| {
            let y = ctx.output.data();
            Ok(vec![Some(
                ctx.grad.iter().zip(&*y).map(|(g, &s)| -g * s * s).collect(),
            )])
        })
    }

    /// Normalizes each axis-0 slice (channel) to zero mean and unit variance
    /// over its remaining elements: `y = (x − μ_c) / √(σ²_c + eps)`.
    /// Parameter-free; keeps activations bounded through deep unnormalized
    /// stacks.
    pub fn channel_norm(&self, eps: f64) -> Result<Tensor> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid("channel_norm", format!("eps must be positive, got {eps}")));
        }
        if self.shape().len() < 2 {
            return Err(Error::shape(
                "channel_norm",
                format!("expected [C, ...] with rank >= 2, got {:?}", self.shape()),
            ));
        }
        let c = self.shape()[0];
        let n = self.len() / c;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut scales = vec![0.0; c];
        for ch in 0..c {
            let lane = &x[ch * n..(ch + 1) * n];
            let mean = lane.iter().sum::<f64>() / n as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = (var + eps).sqrt();
            scales[ch] = s;
            for (o, v) in out[ch * n..(ch + 1) * n].iter_mut().zip(lane) {
                *o = (v - mean) / s;
            }
        }
        drop(x);
        Tensor::from_op("channel_norm", &[self], self.shape().to_vec(), out, move |ctx| {
            let y = ctx.output.data();
            let mut dx = vec![0.0; y.len()];
            for ch in 0..c {
                let g = &ctx.grad[ch * n..(ch + 1) * n];
                let yl = &y[ch * n..(ch + 1) * n];
                let g_mean = g.iter().sum::<f64>() / n as f64;
                let gy_mean = g.iter().zip(yl).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for ((d, &gi), &yi) in dx[ch * n..(ch + 1) * n].iter_mut().zip(g).zip(yl) {
                    *d = (gi - g_mean - yi * gy_mean) / scales[ch];
                }
            }
            Ok(vec![Some(dx)])
        })
    }

    /// Softmax along `axis`, stabilized by subtracting each lane's maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, lanes, inner) = axis_split("softmax", self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * lanes + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..lanes {
                    max = max.max(x[idx(j)]);
                }
                let mut denom = 0.0;
                for j in 0..lanes {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    denom += e;
                }
                for j in 0..lanes {
                    out[idx(j)] /= denom;
                }
            }
        }
        drop(x);
        Tensor::from_op("softmax", &[self], self.shape().to_vec(), out, move |ctx| {
            let y = ctx.output.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * lanes + j) * inner + i;
                    let mut dot = 0.0;
                    for j in 0..lanes {
                        dot += ctx.grad[idx(j)] * y[idx(j)];
                    }
                    for j in 0..lanes {
                        dx[idx(j)] = y[idx(j)] * (ctx.grad[idx(j)] - dot);
                    }
                }
            }
            Ok(vec![Some(dx)])
        })
    }

    /// Matrix product of `[m,k]` by `[k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm::gemm_nn(m, k, n, 1.0, &self.data(), &other.data(), 0.0, &mut out);
        Tensor::from_op("matmul", &[self, other], [m, n], out, move |ctx| {
            let a = ctx.inputs[0].data();
            let b = ctx.inputs[1].data();
            let da = if ctx.inputs[0].requires_grad() {
                // dA[m,k] = dC[m,n] * B[k,n]^T
                let mut da = vec![0.0; m * k];
                gemm::gemm_nt(m, n, k, 1.0, ctx.grad, &b, 0.0, &mut da);
                Some(da)
            } else {
                None
            };
            let db = if ctx.inputs[1].requires_grad() {
                // dB[k,n] = A[m,k]^T * dC[m,n]
                let mut db = vec![0.0; k * n];
                gemm::gemm_tn(k, m, n, 1.0, &a, ctx.grad, 0.0, &mut db);
                Some(db)
            } else {
                None
            };
            Ok(vec![da, db])
        })
    }

    /// Concatenate tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("concat", "no tensors given"));
        };
        let rank = first.ndim();
        let mut axis_total = 0;
        for p in parts {
            if p.ndim() != rank {
                return Err(Error::shape("concat", "rank mismatch between parts"));
            }
            for (d, (&a, &b)) in first.shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(
                        "concat",
                        format!("parts disagree on axis {d}: {:?} vs {:?}", first.shape(), p.shape()),
                    ));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split("concat", &shape, axis)?;

        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            let data = p.data();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * axis_total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&data[src..src + len * inner]);
            }
            offset += len;
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op("concat", parts, shape, out, move |ctx| {
            let mut grads = Vec::with_capacity(lens.len());
            let mut offset = 0;
            for (&len, input) in lens.iter().zip(ctx.inputs) {
                if input.requires_grad() {
                    let mut g = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = (o * axis_total + offset) * inner;
                        let dst = o * len * inner;
                        g[dst..dst + len * inner].copy_from_slice(&ctx.grad[src..src + len * inner]);
                    }
                    grads.push(Some(g));
                } else {
                    grads.push(None);
                }
                offset += len;
            }
            Ok(grads)
        })
    }

    /// Select one index along the leading axis, dropping it:
    /// `[C, rest..] -> [rest..]`.
    pub fn select_axis0(&self, index: usize) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(Error::shape("select_axis0", "tensor is rank-0"));
        }
        let c = self.shape()[0];
        if index >= c {
            return Err(Error::invalid("select_axis0", format!("index {index} out of {c}")));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let data = self.data()[index * inner..(index + 1) * inner].to_vec();
        let shape = self.shape()[1..].to_vec();
        let total = self.len();
        Tensor::from_op("select_axis0", &[self], shape, data, move |ctx| {
            let mut dx = vec![0.0; total];
            dx[index * inner..(index + 1) * inner].copy_from_slice(ctx.grad);
            Ok(vec![Some(dx)])
        })
    }

    /// Spatial mean per channel: `[C,H,W] -> [C]`.
    pub fn mean_spatial(&self) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return Err(Error::shape(
                "mean_spatial",
                format!("expected [C,H,W], got {:?}", self.shape()),
            ));
        };
        let hw = h * w;
        let x = self.data();
        let out: Vec<f64> =
            (0..c).map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        drop(x);
        Tensor::from_op("mean_spatial", &[self], [c], out, move |ctx| {
            let mut dx = vec![0.0; c * hw];
            for ch in 0..c {
                let g = ctx.grad[ch] / hw as f64;
                dx[ch * hw..(ch + 1) * hw].fill(g);
            }
            Ok(vec![Some(dx)])
        })
    }

    /// Multiply `[C,H,W]` by a per-pixel gate `[H,W]`, broadcast over channels.
    pub fn mul_gate(&self, gate: &Tensor) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return Err(Error::shape("mul_gate", format!("expected [C,H,W], got {:?}", self.shape())));
        };
        if gate.shape() != [h, w] {
            return Err(Error::shape(
                "mul_gate",
                format!("gate {:?} does not match spatial extent {h}x{w}", gate.shape()),
            ));
        }
        let hw = h * w;
        let x = self.data();
        let g = gate.data();
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = x[ch * hw + p] * g[p];
            }
        }
        drop(x);
        drop(g);
        Tensor::from_op("mul_gate", &[self, gate], [c, h, w], out, move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx.inputs[1].data();
            let dx = if ctx.inputs[0].requires_grad() {
                let mut dx = vec![0.0; c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dx[ch * hw + p] = ctx.grad[ch * hw + p] * g[p];
                    }
                }
                Some(dx)
            } else {
                None
            };
            let dg = if ctx.inputs[1].requires_grad() {
                let mut dg = vec![0.0; hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dg[p] += ctx.grad[ch * hw + p] * x[ch * hw + p];
                    }
                }
                Some(dg)
            } else {
                None
            };
            Ok(vec![dx, dg])
        })
    }

    /// Gather single elements of a `[C,H,W]` tensor at `(channel, y, x)`
    /// positions into a `[P]` vector. Positions may repeat.
    pub fn gather_points(&self, points: &[(usize, usize, usize)]) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return Err(Error::shape(
                "gather_points",
                format!("expected [C,H,W], got {:?}", self.shape()),
            ));
        };
        for &(pc, py, px) in points {
            if pc >= c || py >= h || px >= w {
                return Err(Error::invalid(
                    "gather_points",
                    format!("point ({pc},{py},{px}) outside [{c},{h},{w}]"),
                ));
            }
        }
        let x = self.data();
        let out: Vec<f64> = points.iter().map(|&(pc, py, px)| x[(pc * h + py) * w + px]).collect();
        drop(x);
        let points = points.to_vec();
        let total = self.len();
        Tensor::from_op("gather_points", &[self], [out.len()], out, move |ctx| {
            let mut dx = vec![0.0; total];
            for (g, &(pc, py, px)) in ctx.grad.iter().zip(&points) {
                dx[(pc * h + py) * w + px] += g;
            }
            Ok(vec![Some(dx)])
        })
    }

    /// Symmetric (edge-inclusive) reflection padding of the two spatial axes
    /// of a `[C,H,W]` tensor. Requires `pad <= H` and `pad <= W`.
    pub fn pad_reflect(&self, pad: usize) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return Err(Error::shape(
                "pad_reflect",
                format!("expected [C,H,W], got {:?}", self.shape()),
            ));
        };
        if pad > h || pad > w {
            return Err(Error::invalid(
                "pad_reflect",
                format!("pad {pad} exceeds spatial extent {h}x{w}"),
            ));
        }
        let reflect = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i - 1) as usize
            } else if i >= n as isize {
                2 * n - 1 - i as usize
            } else {
                i as usize
            }
        };
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let x = self.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let iy = reflect(oy as isize - pad as isize, h);
                for ox in 0..ow {
                    let ix = reflect(ox as isize - pad as isize, w);
                    out[(ch * oh + oy) * ow + ox] = x[(ch * h + iy) * w + ix];
                }
            }
        }
        drop(x);
        Tensor::from_op("pad_reflect", &[self], [c, oh, ow], out, move |ctx| {
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for oy in 0..oh {
                    let iy = reflect(oy as isize - pad as isize, h);
                    for ox in 0..ow {
                        let ix = reflect(ox as isize - pad as isize, w);
                        dx[(ch * h + iy) * w + ix] += ctx.grad[(ch * oh + oy) * ow + ox];
                    }
                }
            }
            Ok(vec![Some(dx)])
        })
    }

    /// Nearest-neighbour upsampling of `[C,H,W]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be positive"));
        }
        let &[c, h, w] = self.shape() else {
            return Err(Error::shape(
                "upsample_nearest",
                format!("expected [C,H,W], got {:?}", self.shape()),
            ));
        };
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let src = (ch * h + oy / factor) * w;
                let dst = (ch * oh + oy) * ow;
                for ox in 0..ow {
                    out[dst + ox] = x[src + ox / factor];
                }
            }
        }
        drop(x);
        Tensor::from_op("upsample_nearest", &[self], [c, oh, ow], out, move |ctx| {
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for oy in 0..oh {
                    let dst = (ch * h + oy / factor) * w;
                    let src = (ch * oh + oy) * ow;
                    for ox in 0..ow {
                        dx[dst + ox / factor] += ctx.grad[src + ox];
                    }
                }
            }
            Ok(vec![Some(dx)])
        })
    }
}
