//! The assembled region-based pipeline: pyramid backbone, cross-resolution
//! decoder, per-region correspondence head with the transfer-synthesized
//! surface classifier — plus the geometry that moves ground truth onto the
//! region grid and predictions back onto the image.

use dctensor::Tensor;

use crate::backbone::{crop_region, Backbone, RegionBox};
use crate::body;
use crate::config::Config;
use crate::decoder::{Decoder, DecoderCfg, DecoderOutput};
use crate::error::{Error, Result};
use crate::head::{forward_head, instance_logits, HeadOutput, HeadWeights, RegionTruth, SurfacePoint};
use crate::init::ParamStore;
use crate::metrics::PredMap;
use crate::synth::Instance;
use crate::transfer::Ktm;

/// Feature stride of the unified decoder map relative to the image.
pub const MAP_STRIDE: usize = 4;

/// A constructed model: every trainable tensor lives in `params`, in a fixed
/// creation order, so seeded construction is bitwise-reproducible.
pub struct Model {
    pub backbone: Backbone,
    pub decoder: Decoder,
    pub head: HeadWeights,
    pub ktm: Ktm,
    pub params: ParamStore,
    region_size: usize,
}

impl Model {
    pub fn new(cfg: &Config) -> Result<Model> {
        let mut params = ParamStore::new(cfg.seed);
        let backbone = Backbone::new(cfg.channels, &mut params);
        let decoder = Decoder::new(
            DecoderCfg {
                channels: cfg.channels,
                unified_channels: cfg.unified_channels,
                dilations: cfg.dilations.clone(),
                mode: cfg.mid.refine_mode(),
            },
            &mut params,
        )?;
        let head =
            HeadWeights::new(cfg.unified_channels, cfg.head_channels, cfg.ktm, &mut params);
        let ktm = Ktm::new(cfg.ktm, cfg.omega, cfg.tau)?;
        Ok(Model { backbone, decoder, head, ktm, params, region_size: cfg.region_size })
    }

    pub fn region_size(&self) -> usize {
        self.region_size
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        self.params.tensors()
    }

    /// This step's surface classifier (direct parameter or synthesized from
    /// the parsers — call inside the recording so gradients flow back).
    pub fn surface_classifier(&self) -> Result<Tensor> {
        self.head.surface_weights(&self.ktm)
    }

    /// Image `[3,H,W]` → decoder output with the unified `[Cu,H/4,W/4]` map.
    pub fn forward_image(&self, image: &Tensor) -> Result<DecoderOutput> {
        let pyr = self.backbone.forward(image)?;
        self.decoder.forward(&pyr)
    }

    /// One region: crop the unified map to the region grid and run the head.
    pub fn forward_region(
        &self,
        unified: &Tensor,
        bx: &RegionBox,
        w_s: &Tensor,
    ) -> Result<HeadOutput> {
        let r = self.region_size;
        let crop = crop_region(unified, bx, (r, r), MAP_STRIDE as f64)?;
        forward_head(&crop, &self.head, w_s)
    }

    /// Person probability for a region's output.
    pub fn region_score(&self, out: &HeadOutput) -> Result<f64> {
        let logits = instance_logits(out, &self.head)?;
        let p = logits.reshape([2, 1])?.softmax(0)?;
        let score = p.data()[1];
        Ok(score)
    }
}

// ---------------------------------------------------------------------------
// Region geometry
// ---------------------------------------------------------------------------

/// Image point → region grid cell (clamped into the grid).
pub fn image_to_grid(bx: &RegionBox, r: usize, x: f64, y: f64) -> (usize, usize) {
    let gx = ((x + 0.5 - bx.x0) / bx.width() * r as f64).floor();
    let gy = ((y + 0.5 - bx.y0) / bx.height() * r as f64).floor();
    let clamp = |v: f64| (v.max(0.0) as usize).min(r - 1);
    (clamp(gy), clamp(gx))
}

/// Region grid cell centre → nearest image pixel (clamped into the image).
pub fn grid_to_image(bx: &RegionBox, r: usize, gy: usize, gx: usize, w: usize, h: usize) -> (usize, usize) {
    let ix = bx.x0 + (gx as f64 + 0.5) * bx.width() / r as f64;
    let iy = bx.y0 + (gy as f64 + 0.5) * bx.height() / r as f64;
    let cx = (ix.floor().max(0.0) as usize).min(w - 1);
    let cy = (iy.floor().max(0.0) as usize).min(h - 1);
    (cy, cx)
}

/// Projects one instance's ground truth onto the region grid: body/part
/// labels sampled at cell centres, keypoints and sparse points mapped by the
/// forward geometry.
pub fn region_truth(inst: &Instance, width: usize, height: usize, r: usize) -> RegionTruth {
    region_truth_in_box(inst, &inst.region, width, height, r)
}

/// Same projection over an arbitrary box (the fully-convolutional path uses
/// the whole image as one region).
pub fn region_truth_in_box(
    inst: &Instance,
    bx: &RegionBox,
    width: usize,
    height: usize,
    r: usize,
) -> RegionTruth {
    let mut truth = RegionTruth::empty(r, r);
    for gy in 0..r {
        for gx in 0..r {
            let (iy, ix) = grid_to_image(bx, r, gy, gx, width, height);
            let src = iy * width + ix;
            if inst.body_mask[src] == 1 {
                truth.body[gy * r + gx] = 1;
                truth.part[gy * r + gx] = (inst.part_mask[src] - 1) as usize;
            }
        }
    }
    for (k, kp) in inst.keypoints.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        let (gy, gx) = image_to_grid(bx, r, kp.x, kp.y);
        truth.keypoints[k] = Some((gy, gx));
    }
    for p in &inst.points {
        let (gy, gx) = image_to_grid(bx, r, p.x as f64, p.y as f64);
        truth.points.push(SurfacePoint { y: gy, x: gx, surface: p.surface, u: p.u, v: p.v });
    }
    truth
}

/// Decodes a region's head output into an image-space correspondence map:
/// within the box, a pixel is body where the body head says so, its surface
/// is the argmax of the surface lanes (background lane excluded) and its
/// chart coordinates are read at that lane.
pub fn region_prediction(out: &HeadOutput, bx: &RegionBox, width: usize, height: usize) -> Result<PredMap> {
    let &[_, rh, rw] = out.p_b.shape() else {
        return Err(Error::invalid("region_prediction", "p_b must be [2,H,W]"));
    };
    if rh != rw {
        return Err(Error::invalid("region_prediction", "region grid must be square"));
    }
    let r = rh;
    let p_b = out.p_b.data();
    let p_s = out.p_s.data();
    let p_u = out.p_u.data();
    let p_v = out.p_v.data();
    let mut map = PredMap::background(width, height);
    let x_lo = bx.x0.floor().max(0.0) as usize;
    let y_lo = bx.y0.floor().max(0.0) as usize;
    let x_hi = (bx.x1.ceil() as usize).min(width);
    let y_hi = (bx.y1.ceil() as usize).min(height);
    for iy in y_lo..y_hi {
        for ix in x_lo..x_hi {
            let (gy, gx) = image_to_grid(bx, r, ix as f64, iy as f64);
            let cell = gy * r + gx;
            if p_b[cell] >= p_b[r * r + cell] {
                continue; // background wins
            }
            let mut best = 1;
            for s in 2..=body::SURFACE_COUNT {
                if p_s[s * r * r + cell] > p_s[best * r * r + cell] {
                    best = s;
                }
            }
            let dst = iy * width + ix;
            map.surface[dst] = best as u8;
            map.u[dst] = p_u[best * r * r + cell];
            map.v[dst] = p_v[best * r * r + cell];
        }
    }
    Ok(map)
}

/// Scene-level body target for the decoder's segmentation branch at the map
/// stride: a cell is foreground when any covered image pixel belongs to any
/// instance.
pub fn seg_target(instances: &[Instance], width: usize, height: usize) -> (Vec<usize>, usize, usize) {
    let (mw, mh) = (width / MAP_STRIDE, height / MAP_STRIDE);
    let mut target = vec![0usize; mw * mh];
    for inst in instances {
        for my in 0..mh {
            for mx in 0..mw {
                if target[my * mw + mx] == 1 {
                    continue;
                }
                'block: for dy in 0..MAP_STRIDE {
                    for dx in 0..MAP_STRIDE {
                        let (iy, ix) = (my * MAP_STRIDE + dy, mx * MAP_STRIDE + dx);
                        if inst.body_mask[iy * width + ix] == 1 {
                            target[my * mw + mx] = 1;
                            break 'block;
                        }
                    }
                }
            }
        }
    }
    (target, mh, mw)
}
