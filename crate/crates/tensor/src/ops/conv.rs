use crate::error::{Error, Result};
use crate::ops::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

/// Spatial convolution hyperparameters. `padding` is zero-padding applied to
/// both sides of each spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2d {
    fn default() -> Self {
        Conv2d { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2d {
    pub fn stride(stride: usize) -> Conv2d {
        Conv2d { stride, ..Conv2d::default() }
    }

    pub fn padded(padding: usize) -> Conv2d {
        Conv2d { padding, ..Conv2d::default() }
    }

    pub fn dilated(dilation: usize, padding: usize) -> Conv2d {
        Conv2d { dilation, padding, ..Conv2d::default() }
    }

    fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cfg: Conv2d,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, cfg: Conv2d) -> Result<Geometry> {
    if cfg.stride == 0 || cfg.dilation == 0 {
        return Err(Error::invalid("conv2d", "stride and dilation must be positive"));
    }
    let (n, cin, h, w) = match *input.shape() {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [C,H,W] or [N,C,H,W], got {:?}", input.shape()),
            ))
        }
    };
    let &[k, wc, kh, kw] = weight.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("weight must be [K,C,kh,kw], got {:?}", weight.shape()),
        ));
    };
    if wc != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wc}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{k}], got {:?}", b.shape()),
            ));
        }
    }
    let (Some(oh), Some(ow)) = (cfg.out_extent(h, kh), cfg.out_extent(w, kw)) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} (dilation {}) exceeds padded input {h}x{w}", cfg.dilation),
        ));
    };
    Ok(Geometry { n, cin, h, w, k, kh, kw, oh, ow, cfg })
}

/// Lay out the receptive field of every output pixel as a column:
/// col[(c*kh+r)*kw+q, oy*ow+ox] = x[c, oy*s + r*d - p, ox*s + q*d - p].
fn im2col(x: &[f64], g: &Geometry, col: &mut [f64]) {
    let Geometry { cin, h, w, kh, kw, oh, ow, cfg, .. } = *g;
    let pixels = oh * ow;
    col.fill(0.0);
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for r in 0..kh {
            for q in 0..kw {
                let row = ((c * kh + r) * kw + q) * pixels;
                for oy in 0..oh {
                    let iy = (oy * cfg.stride + r * cfg.dilation) as isize - cfg.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = iy as usize * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * cfg.stride + q * cfg.dilation) as isize - cfg.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            col[dst + ox] = plane[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of `im2col`'s transpose: accumulates column gradients back
/// onto input pixels.
fn col2im(col: &[f64], g: &Geometry, dx: &mut [f64]) {
    let Geometry { cin, h, w, kh, kw, oh, ow, cfg, .. } = *g;
    let pixels = oh * ow;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for r in 0..kh {
            for q in 0..kw {
                let row = ((c * kh + r) * kw + q) * pixels;
                for oy in 0..oh {
                    let iy = (oy * cfg.stride + r * cfg.dilation) as isize - cfg.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = iy as usize * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * cfg.stride + q * cfg.dilation) as isize - cfg.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[dst + ix as usize] += col[src + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &Geometry) -> Vec<f64> {
    let pixels = g.out_pixels();
    let rows = g.col_rows();
    let mut col = vec![0.0; rows * pixels];
    let mut out = vec![0.0; g.n * g.k * pixels];
    let in_stride = g.cin * g.h * g.w;
    for s in 0..g.n {
        im2col(&x[s * in_stride..(s + 1) * in_stride], g, &mut col);
        let out_s = &mut out[s * g.k * pixels..(s + 1) * g.k * pixels];
        gemm_nn(g.k, rows, pixels, 1.0, weight, &col, 0.0, out_s);
        if let Some(b) = bias {
            for (kch, bk) in b.iter().enumerate() {
                for v in &mut out_s[kch * pixels..(kch + 1) * pixels] {
                    *v += bk;
                }
            }
        }
    }
    out
}

impl Tensor {
    /// 2-D convolution (cross-correlation: kernels are *not* flipped).
    ///
    /// `input` is `[C,H,W]` or `[N,C,H,W]`, `weight` is `[K,C,kh,kw]`, and an
    /// optional `bias` is `[K]`. The output keeps the input's rank.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, cfg: Conv2d) -> Result<Tensor> {
        let g = geometry(self, weight, bias, cfg)?;
        let out = {
            let x = self.data();
            let wt = weight.data();
            let b = bias.map(|b| b.data());
            forward(&x, &wt, b.as_deref(), &g)
        };
        let out_shape: Vec<usize> = if self.ndim() == 3 {
            vec![g.k, g.oh, g.ow]
        } else {
            vec![g.n, g.k, g.oh, g.ow]
        };
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        Tensor::from_op("conv2d", &inputs, out_shape, out, move |ctx| {
            let x = ctx.inputs[0].data();
            let wt = ctx.inputs[1].data();
            let g = geometry(&ctx.inputs[0], &ctx.inputs[1], None, cfg)?;
            let pixels = g.out_pixels();
            let rows = g.col_rows();
            let in_stride = g.cin * g.h * g.w;
            let need_dx = ctx.inputs[0].requires_grad();
            let need_dw = ctx.inputs[1].requires_grad();

            let mut dx = if need_dx { Some(vec![0.0; x.len()]) } else { None };
            let mut dw = if need_dw { Some(vec![0.0; wt.len()]) } else { None };
            let mut col = vec![0.0; rows * pixels];
            let mut dcol = vec![0.0; rows * pixels];
            for s in 0..g.n {
                let dout_s = &ctx.grad[s * g.k * pixels..(s + 1) * g.k * pixels];
                if let Some(dw) = dw.as_mut() {
                    im2col(&x[s * in_stride..(s + 1) * in_stride], &g, &mut col);
                    // dW[K,rows] += dOut[K,pixels] * col[rows,pixels]^T
                    gemm_nt(g.k, pixels, rows, 1.0, dout_s, &col, 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    // dcol[rows,pixels] = W[K,rows]^T * dOut[K,pixels]
                    gemm_tn(rows, g.k, pixels, 1.0, &wt, dout_s, 0.0, &mut dcol);
                    col2im(&dcol, &g, &mut dx[s * in_stride..(s + 1) * in_stride]);
                }
            }
            let db = if has_bias && ctx.inputs[2].requires_grad() {
                let mut db = vec![0.0; g.k];
                for s in 0..g.n {
                    let dout_s = &ctx.grad[s * g.k * pixels..(s + 1) * g.k * pixels];
                    for (kch, dbk) in db.iter_mut().enumerate() {
                        *dbk += dout_s[kch * pixels..(kch + 1) * pixels].iter().sum::<f64>();
                    }
                }
                Some(db)
            } else {
                None
            };
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(db);
            }
            Ok(grads)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple-loop reference, used to pin the im2col/GEMM path.
    pub(crate) fn conv2d_naive(
        x: &[f64],
        (cin, h, w): (usize, usize, usize),
        wt: &[f64],
        (k, kh, kw): (usize, usize, usize),
        bias: Option<&[f64]>,
        cfg: Conv2d,
    ) -> (Vec<f64>, usize, usize) {
        let span_h = cfg.dilation * (kh - 1) + 1;
        let span_w = cfg.dilation * (kw - 1) + 1;
        let oh = (h + 2 * cfg.padding - span_h) / cfg.stride + 1;
        let ow = (w + 2 * cfg.padding - span_w) / cfg.stride + 1;
        let mut out = vec![0.0; k * oh * ow];
        for kc in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[kc]);
                    for c in 0..cin {
                        for r in 0..kh {
                            for q in 0..kw {
                                let iy = (oy * cfg.stride + r * cfg.dilation) as isize - cfg.padding as isize;
                                let ix = (ox * cfg.stride + q * cfg.dilation) as isize - cfg.padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x[(c * h + iy as usize) * w + ix as usize]
                                        * wt[((kc * cin + c) * kh + r) * kw + q];
                                }
                            }
                        }
                    }
                    out[(kc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    fn ramp(n: usize, scale: f64, offset: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64).sin() * scale + offset).collect()
    }

    #[test]
    fn matches_naive_reference_across_configs() {
        let configs = [
            Conv2d::default(),
            Conv2d::padded(1),
            Conv2d::stride(2),
            Conv2d { stride: 2, padding: 1, dilation: 1 },
            Conv2d::dilated(2, 2),
            Conv2d::dilated(3, 3),
        ];
        for cfg in configs {
            let (cin, h, w, k, kh, kw) = (3, 9, 8, 4, 3, 3);
            let x = ramp(cin * h * w, 1.3, -0.2);
            let wt = ramp(k * cin * kh * kw, 0.7, 0.1);
            let b = ramp(k, 0.5, -0.3);
            let xt = Tensor::from_vec([cin, h, w], x.clone()).unwrap();
            let wtt = Tensor::from_vec([k, cin, kh, kw], wt.clone()).unwrap();
            let bt = Tensor::from_vec([k], b.clone()).unwrap();
            let got = xt.conv2d(&wtt, Some(&bt), cfg).unwrap();
            let (want, oh, ow) = conv2d_naive(&x, (cin, h, w), &wt, (k, kh, kw), Some(&b), cfg);
            assert_eq!(got.shape(), [k, oh, ow], "cfg {cfg:?}");
            for (a, b) in got.to_vec().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "cfg {cfg:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        // 1x1 kernel with weight 1 and no padding reproduces the input.
        let x = Tensor::from_vec([1, 4, 4], ramp(16, 2.0, 0.0)).unwrap();
        let w = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&w, None, Conv2d::default()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn batched_input_matches_per_sample() {
        let cfg = Conv2d::padded(1);
        let (cin, h, w, k) = (2, 5, 6, 3);
        let x0 = ramp(cin * h * w, 1.0, 0.3);
        let x1 = ramp(cin * h * w, -0.8, 0.0);
        let wt = ramp(k * cin * 9, 0.4, -0.1);
        let batch = Tensor::from_vec([2, cin, h, w], [x0.clone(), x1.clone()].concat()).unwrap();
        let wtt = Tensor::from_vec([k, cin, 3, 3], wt.clone()).unwrap();
        let got = batch.conv2d(&wtt, None, cfg).unwrap();
        let (want0, oh, ow) = conv2d_naive(&x0, (cin, h, w), &wt, (k, 3, 3), None, cfg);
        let (want1, _, _) = conv2d_naive(&x1, (cin, h, w), &wt, (k, 3, 3), None, cfg);
        assert_eq!(got.shape(), [2, k, oh, ow]);
        let flat = got.to_vec();
        for (a, b) in flat[..k * oh * ow].iter().zip(&want0) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in flat[k * oh * ow..].iter().zip(&want1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_oversized_kernel_and_channel_mismatch() {
        let x = Tensor::from_vec([1, 2, 2], vec![0.0; 4]).unwrap();
        let w = Tensor::from_vec([1, 1, 3, 3], vec![0.0; 9]).unwrap();
        assert!(x.conv2d(&w, None, Conv2d::default()).is_err());
        let w = Tensor::from_vec([1, 2, 1, 1], vec![0.0; 2]).unwrap();
        assert!(x.conv2d(&w, None, Conv2d::default()).is_err());
    }
}
