//! Per-region correspondence head: 8 stacked convolutions over the cropped
//! unified feature, then six pixel-wise linear maps — body mask, body parts,
//! keypoints, surface index, and per-surface U/V charts — plus the losses
//! that supervise them. The surface classifier's weight matrix is supplied by
//! the caller each forward pass (either a plain parameter or synthesized from
//! the 2D parsers), so surface gradients can reach the parser weights.

use dctensor::losses::{cross_entropy_pixels, smooth_l1};
use dctensor::{Conv2d, Tensor};

use crate::body;
use crate::error::{Error, Result};
use crate::init::ParamStore;
use crate::transfer::{Ktm, KtmMode, ParserWeights};

/// Surface classes: the 24 charted surfaces plus background at index 0.
pub const SURFACE_CHANNELS: usize = body::SURFACE_COUNT + 1;

const STACK_DEPTH: usize = 8;

/// All learned parameters of the head (the surface classifier is *not* here:
/// it is either `w_s_direct` or synthesized by the transfer module).
pub struct HeadWeights {
    /// 8 stacked 3×3 convolutions mapping the region crop to D channels.
    pub stack: Vec<(Tensor, Tensor)>,
    /// Pixel-wise body/background classifier, `[2, D]`.
    pub w_b: Tensor,
    /// Per-surface U regressor, `[25, D]`.
    pub w_u: Tensor,
    /// Per-surface V regressor, `[25, D]`.
    pub w_v: Tensor,
    /// 2D parser classifiers (`w_loc` region-level, `w_part`/`w_kpt`
    /// pixel-wise) and the transfer parameters.
    pub parsers: ParserWeights,
    /// Plain learned surface classifier, present only when transfer is off.
    pub w_s_direct: Option<Tensor>,
    channels: usize,
}

impl HeadWeights {
    /// Registers every head parameter in `params`. `in_channels` is the
    /// unified-map channel count the region crop arrives with; `d` is the
    /// head's working width.
    pub fn new(in_channels: usize, d: usize, mode: KtmMode, params: &mut ParamStore) -> HeadWeights {
        let mut stack = Vec::with_capacity(STACK_DEPTH);
        let mut c_in = in_channels;
        for i in 0..STACK_DEPTH {
            let w = params.conv(&format!("head.conv{}", i + 1), d, c_in, 3, 3);
            let b = params.zeros(&format!("head.conv{}.bias", i + 1), &[d]);
            stack.push((w, b));
            c_in = d;
        }
        let w_b = params.linear("head.w_b", 2, d);
        let w_u = params.linear("head.w_u", SURFACE_CHANNELS, d);
        let w_v = params.linear("head.w_v", SURFACE_CHANNELS, d);
        let parsers = ParserWeights::new(d, mode, params);
        let w_s_direct = match mode {
            KtmMode::Off => Some(params.linear("head.w_s", SURFACE_CHANNELS, d)),
            _ => None,
        };
        HeadWeights { stack, w_b, w_u, w_v, parsers, w_s_direct, channels: d }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The surface classifier for this step: the plain parameter when
    /// transfer is off, otherwise freshly synthesized from the parsers.
    pub fn surface_weights(&self, ktm: &Ktm) -> Result<Tensor> {
        match ktm.mode {
            KtmMode::Off => Ok(self
                .w_s_direct
                .as_ref()
                .expect("off mode owns a direct surface classifier")
                .clone()),
            _ => ktm.synthesize(&self.parsers),
        }
    }
}

/// The six pixel-wise output maps over one region grid.
pub struct HeadOutput {
    /// Body vs background logits, `[2, Hr, Wr]`.
    pub p_b: Tensor,
    /// Body-part logits, `[14, Hr, Wr]`.
    pub p_bp: Tensor,
    /// Keypoint logits, `[17, Hr, Wr]`.
    pub p_k: Tensor,
    /// Surface logits, `[25, Hr, Wr]`.
    pub p_s: Tensor,
    /// U charts, `[25, Hr, Wr]` — read at the surface's channel.
    pub p_u: Tensor,
    /// V charts, `[25, Hr, Wr]`.
    pub p_v: Tensor,
    /// The D-channel representation the maps were read from.
    pub features: Tensor,
}

/// Applies a `[K, D]` weight matrix pixel-wise to `[D, H, W]` features.
fn pixel_map(w: &Tensor, feat: &Tensor) -> Result<Tensor> {
    let &[d, h, wd] = feat.shape() else {
        return Err(Error::invalid("pixel_map", format!("features {:?}", feat.shape())));
    };
    let k = w.shape()[0];
    Ok(w.matmul(&feat.reshape([d, h * wd])?)?.reshape([k, h, wd])?)
}

/// Runs the stacked convolutions and the six output maps. `w_s` must be
/// `[25, D]` and is typically produced by [`HeadWeights::surface_weights`].
pub fn forward_head(region_feat: &Tensor, weights: &HeadWeights, w_s: &Tensor) -> Result<HeadOutput> {
    let d = weights.channels;
    if w_s.shape() != [SURFACE_CHANNELS, d] {
        return Err(Error::invalid(
            "forward_head",
            format!("surface weights {:?}, expected [{SURFACE_CHANNELS}, {d}]", w_s.shape()),
        ));
    }
    let mut f = region_feat.clone();
    for (w, b) in &weights.stack {
        f = f.conv2d(w, Some(b), Conv2d::padded(1))?.relu()?;
    }
    Ok(HeadOutput {
        p_b: pixel_map(&weights.w_b, &f)?,
        p_bp: pixel_map(&weights.parsers.w_part, &f)?,
        p_k: pixel_map(&weights.parsers.w_kpt, &f)?,
        p_s: pixel_map(w_s, &f)?,
        p_u: pixel_map(&weights.w_u, &f)?,
        p_v: pixel_map(&weights.w_v, &f)?,
        features: f,
    })
}

/// Region-level person/background logits: `w_loc` applied to the spatially
/// pooled head feature. Softmax of the result ranks instances at evaluation.
pub fn instance_logits(out: &HeadOutput, weights: &HeadWeights) -> Result<Tensor> {
    let d = weights.channels;
    let pooled = out.features.mean_spatial()?.reshape([d, 1])?;
    Ok(weights.parsers.w_loc.matmul(&pooled)?.reshape([2])?)
}

/// One sparse ground-truth correspondence on the region grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub y: usize,
    pub x: usize,
    /// Surface label in `1..=24`.
    pub surface: usize,
    /// Chart coordinates in `[0,1]²`.
    pub u: f64,
    pub v: f64,
}

/// Ground truth rasterized onto one region's `(Hr, Wr)` grid.
#[derive(Debug, Clone)]
pub struct RegionTruth {
    pub h: usize,
    pub w: usize,
    /// 0 background / 1 body, one entry per pixel.
    pub body: Vec<usize>,
    /// Part index `0..14` per pixel; read only where `body == 1`.
    pub part: Vec<usize>,
    /// Visible keypoints as `(y, x)` grid positions, COCO order.
    pub keypoints: Vec<Option<(usize, usize)>>,
    /// Sparse surface correspondences.
    pub points: Vec<SurfacePoint>,
}

impl RegionTruth {
    /// An all-background truth with no annotations.
    pub fn empty(h: usize, w: usize) -> RegionTruth {
        RegionTruth {
            h,
            w,
            body: vec![0; h * w],
            part: vec![0; h * w],
            keypoints: vec![None; body::KEYPOINT_COUNT],
            points: Vec::new(),
        }
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.h != h || self.w != w {
            return Err(Error::invalid(
                "compute_losses",
                format!("truth grid {}x{} vs output {h}x{w}", self.h, self.w),
            ));
        }
        if self.body.len() != h * w || self.part.len() != h * w {
            return Err(Error::invalid("compute_losses", "truth raster length mismatch"));
        }
        if self.keypoints.len() != body::KEYPOINT_COUNT {
            return Err(Error::invalid("compute_losses", "expected 17 keypoint slots"));
        }
        for p in &self.points {
            if p.y >= h || p.x >= w {
                return Err(Error::invalid(
                    "compute_losses",
                    format!("point ({},{}) outside {h}x{w}", p.y, p.x),
                ));
            }
            if p.surface == 0 || p.surface > body::SURFACE_COUNT {
                return Err(Error::invalid(
                    "compute_losses",
                    format!("surface label {} outside 1..=24", p.surface),
                ));
            }
        }
        Ok(())
    }
}

/// Per-task loss weights.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub lambda_b: f64,
    pub lambda_bp: f64,
    pub lambda_k: f64,
    pub lambda_s: f64,
    pub lambda_uv: f64,
    /// Optional per-channel weights for the surface cross-entropy (the
    /// re-weighting imbalance strategy); index 0 is the unused background lane.
    pub surface_class_weights: Option<[f64; SURFACE_CHANNELS]>,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            lambda_b: 1.0,
            lambda_bp: 1.0,
            lambda_k: 1.0,
            lambda_s: 1.0,
            lambda_uv: 10.0,
            surface_class_weights: None,
        }
    }
}

/// Weighted total plus the unweighted per-task values.
pub struct Losses {
    pub total: Tensor,
    pub body: f64,
    pub part: f64,
    pub kpt: f64,
    pub surface: f64,
    pub uv: f64,
}

/// Pixels within Euclidean distance 1 of a grid point (the point and its
/// 4-neighbours), clipped to the grid.
fn disk(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let (y, x, h, w) = (y as i64, x as i64, h as i64, w as i64);
    [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
        .into_iter()
        .map(move |(dy, dx)| (y + dy, x + dx))
        .filter(move |&(py, px)| py >= 0 && py < h && px >= 0 && px < w)
        .map(|(py, px)| (py as usize, px as usize))
}

/// All supervision for one region. Dense body/part terms cover every (fg for
/// parts) pixel; keypoint CE covers radius-1 disks around visible keypoints;
/// surface CE and the U/V smooth-L1 touch only the sparse annotated points,
/// with U/V read at each point's ground-truth surface channel.
pub fn compute_losses(out: &HeadOutput, truth: &RegionTruth, cfg: &LossConfig) -> Result<Losses> {
    let &[_, h, w] = out.p_b.shape() else {
        return Err(Error::invalid("compute_losses", format!("p_b shape {:?}", out.p_b.shape())));
    };
    truth.validate(h, w)?;

    let l_body = cross_entropy_pixels(&out.p_b, &truth.body, None, None)?;

    let fg_mask: Vec<f64> = truth.body.iter().map(|&b| b as f64).collect();
    let l_part = cross_entropy_pixels(&out.p_bp, &truth.part, Some(&fg_mask), None)?;

    let mut k_targets = vec![0usize; h * w];
    let mut k_mask = vec![0.0; h * w];
    for (k, pos) in truth.keypoints.iter().enumerate() {
        let Some((ky, kx)) = *pos else { continue };
        if ky >= h || kx >= w {
            return Err(Error::invalid(
                "compute_losses",
                format!("keypoint {k} at ({ky},{kx}) outside {h}x{w}"),
            ));
        }
        for (py, px) in disk(ky, kx, h, w) {
            k_targets[py * w + px] = k;
            k_mask[py * w + px] = 1.0;
        }
    }
    let l_kpt = cross_entropy_pixels(&out.p_k, &k_targets, Some(&k_mask), None)?;

    // Sparse terms: one gathered lane per annotated point, so coincident
    // points each keep their own target.
    let (l_surf, l_uv) = if truth.points.is_empty() {
        (None, None)
    } else {
        let n = truth.points.len();
        let mut lanes = Vec::with_capacity(SURFACE_CHANNELS * n);
        for c in 0..SURFACE_CHANNELS {
            lanes.extend(truth.points.iter().map(|p| (c, p.y, p.x)));
        }
        let logits = out.p_s.gather_points(&lanes)?.reshape([SURFACE_CHANNELS, n])?;
        let targets: Vec<usize> = truth.points.iter().map(|p| p.surface).collect();
        let weights = cfg.surface_class_weights.as_ref().map(|w| &w[..]);
        let l_s = cross_entropy_pixels(&logits, &targets, None, weights)?;

        let uv_points: Vec<(usize, usize, usize)> =
            truth.points.iter().map(|p| (p.surface, p.y, p.x)).collect();
        let u_target =
            Tensor::from_vec(vec![n], truth.points.iter().map(|p| p.u).collect::<Vec<_>>())?;
        let v_target =
            Tensor::from_vec(vec![n], truth.points.iter().map(|p| p.v).collect::<Vec<_>>())?;
        let l_u = smooth_l1(&out.p_u.gather_points(&uv_points)?, &u_target, None)?;
        let l_v = smooth_l1(&out.p_v.gather_points(&uv_points)?, &v_target, None)?;
        (Some(l_s), Some(l_u.add(&l_v)?))
    };

    let mut total = l_body.scale(cfg.lambda_b)?.add(&l_part.scale(cfg.lambda_bp)?)?;
    total = total.add(&l_kpt.scale(cfg.lambda_k)?)?;
    if let Some(ls) = &l_surf {
        total = total.add(&ls.scale(cfg.lambda_s)?)?;
    }
    if let Some(luv) = &l_uv {
        total = total.add(&luv.scale(cfg.lambda_uv)?)?;
    }

    let item = |t: &Option<Tensor>| t.as_ref().map_or(0.0, |t| t.item().unwrap());
    Ok(Losses {
        body: l_body.item()?,
        part: l_part.item()?,
        kpt: l_kpt.item()?,
        surface: item(&l_surf),
        uv: item(&l_uv),
        total,
    })
}
