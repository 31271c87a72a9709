//! Feature pyramid over RGB input, plus region feature extraction.
//!
//! A strided stem and one residual block per level build four maps whose
//! resolution halves level to level (strides 4, 8, 16, 32 relative to the
//! input); 1×1 laterals and nearest-neighbour top-down sums give every level
//! the same channel count. Deep levels see more context through more
//! nonlinearities but at coarser resolution — exactly the tension the decoder
//! is there to resolve. All convolutions are bias-free, so zero weights give
//! a zero pyramid.
//!
//! `crop_region` replaces a detector's RoI pooling: it bilinearly samples a
//! fixed-size grid of points inside a ground-truth box, differentiably.

use dctensor::{Conv2d, Tensor};

use crate::error::{Error, Result};
use crate::init::ParamStore;

/// Epsilon for the parameter-free per-channel normalizations sprinkled after
/// every branch-summing point (residual blocks, top-down merges, the unified
/// map). Sums of correlated branches compound activation variance with depth;
/// standardizing each channel after the sum keeps magnitudes — and therefore
/// gradients — at unit scale regardless of network size, with no learned
/// state. A zero map stays exactly zero.
pub const NORM_EPS: f64 = 1e-5;

/// Four feature maps at strides 4, 8, 16, 32, shared channel count.
pub struct PyramidFeatures {
    pub p2: Tensor,
    pub p3: Tensor,
    pub p4: Tensor,
    pub p5: Tensor,
}

impl PyramidFeatures {
    pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.p2, &self.p3, &self.p4, &self.p5]
    }
}

/// Axis-aligned instance box, in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub instance_id: usize,
}

impl RegionBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, instance_id: usize) -> Result<RegionBox> {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) || x1 <= x0 || y1 <= y0 {
            return Err(Error::invalid(
                "region_box",
                format!("degenerate box ({x0}, {y0}, {x1}, {y1})"),
            ));
        }
        Ok(RegionBox { x0, y0, x1, y1, instance_id })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

struct ResBlock {
    conv1: Tensor,
    conv2: Tensor,
    skip: Tensor,
}

impl ResBlock {
    fn new(params: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> ResBlock {
        ResBlock {
            conv1: params.conv(&format!("{name}.conv1"), c_out, c_in, 3, 3),
            conv2: params.conv(&format!("{name}.conv2"), c_out, c_out, 3, 3),
            skip: params.conv(&format!("{name}.skip"), c_out, c_in, 1, 1),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let cfg = Conv2d { stride: 2, padding: 1, dilation: 1 };
        let main = x.conv2d(&self.conv1, None, cfg)?.relu()?;
        let main = main.conv2d(&self.conv2, None, Conv2d::padded(1))?;
        let skip = x.conv2d(&self.skip, None, Conv2d::stride(2))?;
        Ok(main.add(&skip)?.relu()?)
    }
}

/// Stem + residual levels + lateral/top-down merge.
pub struct Backbone {
    stem: Tensor,
    blocks: Vec<ResBlock>,
    laterals: Vec<Tensor>,
    channels: usize,
}

impl Backbone {
    pub fn new(channels: usize, params: &mut ParamStore) -> Backbone {
        let stem = params.conv("backbone.stem", channels, 3, 3, 3);
        let blocks = (2..=5)
            .map(|lvl| ResBlock::new(params, &format!("backbone.block{lvl}"), channels, channels))
            .collect();
        let laterals = (2..=5)
            .map(|lvl| params.conv(&format!("backbone.lateral{lvl}"), channels, channels, 1, 1))
            .collect();
        Backbone { stem, blocks, laterals, channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `[3,H,W]` (H, W divisible by 32) → four levels at strides 4, 8, 16, 32.
    pub fn forward(&self, image: &Tensor) -> Result<PyramidFeatures> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::invalid(
                "forward_pyramid",
                format!("expected [3,H,W], got {:?}", image.shape()),
            ));
        };
        if c != 3 {
            return Err(Error::invalid("forward_pyramid", format!("expected 3 channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(
                "forward_pyramid",
                format!("extents must be divisible by 32, got {h}x{w}"),
            ));
        }

        let cfg = Conv2d { stride: 2, padding: 1, dilation: 1 };
        let stem = image.conv2d(&self.stem, None, cfg)?.relu()?;
        let mut bottoms = Vec::with_capacity(4);
        let mut x = stem;
        for block in &self.blocks {
            x = block.forward(&x)?.channel_norm(NORM_EPS)?;
            bottoms.push(x.clone());
        }

        // Top-down: coarsest lateral first, then lateral + upsampled-coarser.
        let mut tops: Vec<Tensor> = Vec::with_capacity(4);
        for lvl in (0..4).rev() {
            let lat = bottoms[lvl].conv2d(&self.laterals[lvl], None, Conv2d::default())?;
            let merged = match tops.last() {
                Some(above) => lat.add(&above.upsample_nearest(2)?)?,
                None => lat,
            };
            tops.push(merged.channel_norm(NORM_EPS)?);
        }
        let mut it = tops.into_iter().rev();
        Ok(PyramidFeatures {
            p2: it.next().unwrap(),
            p3: it.next().unwrap(),
            p4: it.next().unwrap(),
            p5: it.next().unwrap(),
        })
    }
}

/// Bilinearly samples an `out`-sized grid of points spread over `bx` (image
/// coordinates; `stride` converts to this feature map's pixel frame).
/// Sample points sit at the centres of an `out.0 × out.1` subdivision of the
/// box, so a full-map box at native resolution reproduces the input exactly.
/// Differentiable with respect to `feat`.
pub fn crop_region(feat: &Tensor, bx: &RegionBox, out: (usize, usize), stride: f64) -> Result<Tensor> {
    let &[c, fh, fw] = feat.shape() else {
        return Err(Error::invalid("crop_region", format!("expected [C,H,W], got {:?}", feat.shape())));
    };
    let (oh, ow) = out;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("crop_region", "empty output grid"));
    }
    if bx.x1 <= bx.x0 || bx.y1 <= bx.y0 {
        return Err(Error::invalid("crop_region", "degenerate box"));
    }
    if stride <= 0.0 || !stride.is_finite() {
        return Err(Error::invalid("crop_region", format!("bad stride {stride}")));
    }

    // Per-axis neighbour indices and blend weight, clamped at the border.
    let axis = |lo: f64, hi: f64, n_out: usize, extent: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let p = (lo + (i as f64 + 0.5) * (hi - lo) / n_out as f64) / stride - 0.5;
                let f = p.floor();
                let w = p - f;
                let clamp = |v: f64| (v.max(0.0) as usize).min(extent - 1);
                (clamp(f), clamp(f + 1.0), w)
            })
            .collect()
    };
    let ys = axis(bx.y0, bx.y1, oh, fh);
    let xs = axis(bx.x0, bx.x1, ow, fw);

    let data = {
        let src = feat.data();
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let plane = &src[ch * fh * fw..(ch + 1) * fh * fw];
            for &(i0, i1, wy) in &ys {
                for &(j0, j1, wx) in &xs {
                    let v = (1.0 - wy) * (1.0 - wx) * plane[i0 * fw + j0]
                        + (1.0 - wy) * wx * plane[i0 * fw + j1]
                        + wy * (1.0 - wx) * plane[i1 * fw + j0]
                        + wy * wx * plane[i1 * fw + j1];
                    data.push(v);
                }
            }
        }
        data
    };

    let n_in = feat.len();
    Ok(Tensor::from_op("crop_region", &[feat], vec![c, oh, ow], data, move |ctx| {
        let mut grad = vec![0.0; n_in];
        let mut o = 0;
        for ch in 0..c {
            let base = ch * fh * fw;
            for &(i0, i1, wy) in &ys {
                for &(j0, j1, wx) in &xs {
                    let g = ctx.grad[o];
                    o += 1;
                    grad[base + i0 * fw + j0] += (1.0 - wy) * (1.0 - wx) * g;
                    grad[base + i0 * fw + j1] += (1.0 - wy) * wx * g;
                    grad[base + i1 * fw + j0] += wy * (1.0 - wx) * g;
                    grad[base + i1 * fw + j1] += wy * wx * g;
                }
            }
        }
        Ok(vec![Some(grad)])
    })?)
}
