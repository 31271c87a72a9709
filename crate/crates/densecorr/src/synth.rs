//! Seeded generator of articulated stick-figure scenes with exact dense
//! ground truth, plus the dataset file format.
//!
//! A figure is a 17-joint skeleton posed by sampled joint angles; each of the
//! 14 body parts is rendered as a parallelogram quad carrying an affine
//! `(a, b)` chart (`a` across the width, `b` along the axis) whose `a` axis
//! subdivides into the part's surfaces. This yields exact per-pixel
//! `(surface, u, v)` truth with no mesh. Training annotations degrade the
//! dense truth to the benchmark's label regimes: at most 196 sparse points
//! per instance (100 on average) drawn with a configurable per-surface
//! imbalance profile that favours torso/head over hands/feet.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dctensor::Tensor;

use crate::backbone::RegionBox;
use crate::body;
use crate::error::{Error, Result};

/// Hard cap on sparse correspondence points per training instance.
pub const TRAIN_POINT_CAP: usize = 196;

/// Scene generation parameters.
#[derive(Debug, Clone)]
pub struct SceneCfg {
    pub width: usize,
    pub height: usize,
    pub n_instances: usize,
    /// 0 = keep figures apart; 1 = allow full overlap.
    pub occlusion_level: f64,
    /// Figure height as a fraction of `min(width, height)`.
    pub scale_range: (f64, f64),
    /// Mean sparse-point count per instance.
    pub point_mean: f64,
    /// Cap on sparse points (≤ [`TRAIN_POINT_CAP`]).
    pub point_cap: usize,
    /// Relative sampling weight per surface label (index = label − 1).
    pub profile: [f64; body::SURFACE_COUNT],
    /// Background clutter quads not in the person class.
    pub distractors: usize,
}

impl Default for SceneCfg {
    fn default() -> SceneCfg {
        SceneCfg {
            width: 64,
            height: 64,
            n_instances: 2,
            occlusion_level: 0.3,
            scale_range: (0.45, 0.8),
            point_mean: 100.0,
            point_cap: TRAIN_POINT_CAP,
            profile: default_profile(),
            distractors: 3,
        }
    }
}

/// Default imbalance profile: torso/head surfaces three times the weight of
/// hand/foot surfaces, limbs in between.
pub fn default_profile() -> [f64; body::SURFACE_COUNT] {
    let mut p = [0.0; body::SURFACE_COUNT];
    for s in 1..=body::SURFACE_COUNT {
        let part = body::surface_part(s);
        p[s - 1] = match part {
            0 | 1 => 3.0,           // head, torso
            10 | 11 | 12 | 13 => 1.0, // hands, feet
            _ => 2.0,               // arm and leg segments
        };
    }
    p
}

/// One visible body pixel with its exact chart truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensePixel {
    pub x: usize,
    pub y: usize,
    /// Surface label in `1..=24`.
    pub surface: usize,
    pub u: f64,
    pub v: f64,
}

/// A sparse training correspondence (subsampled from the dense truth).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnPoint {
    pub x: usize,
    pub y: usize,
    pub surface: usize,
    pub u: f64,
    pub v: f64,
}

/// An image-space keypoint with its visibility flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Per-instance ground truth (visibility-aware: occluded pixels belong to the
/// instance in front).
#[derive(Debug, Clone)]
pub struct Instance {
    pub region: RegionBox,
    /// `height·width` grid, 1 where this instance is the visible owner.
    pub body_mask: Vec<u8>,
    /// `height·width` grid: 0 background, else part index + 1.
    pub part_mask: Vec<u8>,
    /// 17 keypoints, COCO order.
    pub keypoints: Vec<Keypoint>,
    /// Sparse training points (≤ [`TRAIN_POINT_CAP`]).
    pub points: Vec<AnnPoint>,
    /// Full dense truth over the visible body pixels.
    pub dense: Vec<DensePixel>,
}

/// A generated scene: image plus per-instance annotations.
#[derive(Debug)]
pub struct SceneAnnotation {
    pub image: Tensor,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
}

// ---------------------------------------------------------------------------
// Figure construction
// ---------------------------------------------------------------------------

type Vec2 = (f64, f64);

fn rot(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
}

fn add(a: Vec2, b: Vec2) -> Vec2 {
    (a.0 + b.0, a.1 + b.1)
}

fn scale_v(v: Vec2, k: f64) -> Vec2 {
    (v.0 * k, v.1 * k)
}

/// Unit perpendicular pointing toward the figure's left (+x when upright).
fn perp_left(d: Vec2) -> Vec2 {
    let n = (d.0 * d.0 + d.1 * d.1).sqrt();
    (d.1 / n, -d.0 / n)
}

/// One body part as an affine chart quad: `pixel(a, b) = origin + a·ua + b·va`.
#[derive(Debug, Clone, Copy)]
pub struct PartQuad {
    pub part: usize,
    pub origin: Vec2,
    pub ua: Vec2,
    pub va: Vec2,
}

/// A posed figure in its canonical frame (y up, pelvis near (0, 0.51),
/// overall height ≈ 1).
pub struct FigureSpec {
    /// COCO-ordered joint positions.
    pub joints: [Vec2; body::KEYPOINT_COUNT],
    /// The 14 part quads.
    pub quads: Vec<PartQuad>,
}

fn limb_quad(part: usize, from: Vec2, to: Vec2, width: f64) -> PartQuad {
    let axis = (to.0 - from.0, to.1 - from.1);
    let n = perp_left(axis);
    PartQuad {
        part,
        origin: add(from, scale_v(n, -0.5 * width)),
        ua: scale_v(n, width),
        va: axis,
    }
}

/// Samples a posed figure. Joint angles are drawn from ranges that keep limbs
/// from collapsing into the torso, so every surface stays renderable.
pub fn sample_figure(rng: &mut ChaCha8Rng) -> FigureSpec {
    let lean = rng.gen_range(-0.15..0.15);
    let tilt = rng.gen_range(-0.2..0.2);

    let pelvis: Vec2 = (0.0, 0.51);
    let d_t = rot((0.0, 1.0), lean); // torso up
    let left = perp_left(d_t);

    let hip_r = add(pelvis, scale_v(left, -0.065));
    let hip_l = add(pelvis, scale_v(left, 0.065));
    let neck = add(pelvis, scale_v(d_t, 0.30));

    // Torso chart fixed by the joint-entry convention: hips at (0.3/0.7, 0.05),
    // neck at (0.5, 1.0), shoulders derived at (0.1/0.9, 0.95).
    let ua_t = scale_v((hip_l.0 - hip_r.0, hip_l.1 - hip_r.1), 2.5);
    let va_t = scale_v((neck.0 - pelvis.0, neck.1 - pelvis.1), 1.0 / 0.95);
    let origin_t = (
        pelvis.0 - 0.5 * ua_t.0 - 0.05 * va_t.0,
        pelvis.1 - 0.5 * ua_t.1 - 0.05 * va_t.1,
    );
    let torso_at = |a: f64, b: f64| -> Vec2 {
        (origin_t.0 + a * ua_t.0 + b * va_t.0, origin_t.1 + a * ua_t.1 + b * va_t.1)
    };
    let sh_r = torso_at(0.1, 0.95);
    let sh_l = torso_at(0.9, 0.95);

    // Head.
    let d_h = rot(d_t, tilt);
    let head = PartQuad {
        part: 0,
        origin: add(neck, scale_v(perp_left(d_h), -0.5 * 0.16)),
        ua: scale_v(perp_left(d_h), 0.16),
        va: scale_v(d_h, 0.20),
    };
    let head_at = |a: f64, b: f64| -> Vec2 {
        (head.origin.0 + a * head.ua.0 + b * head.va.0, head.origin.1 + a * head.ua.1 + b * head.va.1)
    };

    // Arms: outward-positive swing, bend mostly outward.
    let down = scale_v(d_t, -1.0);
    let mut arm = |side: f64, sh: Vec2| -> (Vec2, Vec2, Vec2) {
        let swing = rng.gen_range(0.08..0.55);
        let bend = rng.gen_range(-0.1..0.7);
        let d_ua = rot(down, side * swing);
        let elbow = add(sh, scale_v(d_ua, 0.17));
        let d_la = rot(down, side * (swing + bend));
        let wrist = add(elbow, scale_v(d_la, 0.16));
        let hand_tip = add(wrist, scale_v(d_la, 0.075));
        (elbow, wrist, hand_tip)
    };
    // side: the left arm rotates counter-clockwise outward (+x side), the
    // right arm clockwise.
    let (elb_l, wri_l, hand_l) = arm(-1.0, sh_l);
    let (elb_r, wri_r, hand_r) = arm(1.0, sh_r);

    // Legs.
    let mut leg = |side: f64, hip: Vec2| -> (Vec2, Vec2, Vec2) {
        let swing = rng.gen_range(-0.1..0.4);
        let bend = rng.gen_range(-0.25..0.15);
        let d_ul = rot((0.0, -1.0), side * swing);
        let knee = add(hip, scale_v(d_ul, 0.225));
        let d_ll = rot((0.0, -1.0), side * (swing + bend));
        let ankle = add(knee, scale_v(d_ll, 0.225));
        let foot_tip = add(ankle, scale_v(rot((0.0, -1.0), side * 0.45), 0.07));
        (knee, ankle, foot_tip)
    };
    let (knee_l, ank_l, foot_l) = leg(-1.0, hip_l);
    let (knee_r, ank_r, foot_r) = leg(1.0, hip_r);

    // Joint positions, COCO order.
    let joints = [
        head_at(0.5, 0.55),  // nose
        head_at(0.60, 0.66), // left_eye
        head_at(0.40, 0.66), // right_eye
        head_at(0.78, 0.52), // left_ear
        head_at(0.22, 0.52), // right_ear
        sh_l,
        sh_r,
        elb_l,
        elb_r,
        wri_l,
        wri_r,
        hip_l,
        hip_r,
        knee_l,
        knee_r,
        ank_l,
        ank_r,
    ];

    // Paint order: legs behind the torso, head on the torso, arms in front,
    // extremities on top so they are never self-occluded away.
    let quads = vec![
        limb_quad(6, hip_r, knee_r, 0.085),
        limb_quad(7, knee_r, ank_r, 0.065),
        limb_quad(8, hip_l, knee_l, 0.085),
        limb_quad(9, knee_l, ank_l, 0.065),
        PartQuad { part: 1, origin: origin_t, ua: ua_t, va: va_t },
        head,
        limb_quad(2, sh_r, elb_r, 0.055),
        limb_quad(3, elb_r, wri_r, 0.045),
        limb_quad(4, sh_l, elb_l, 0.055),
        limb_quad(5, elb_l, wri_l, 0.045),
        limb_quad(12, ank_r, foot_r, 0.075),
        limb_quad(13, ank_l, foot_l, 0.075),
        limb_quad(10, wri_r, hand_r, 0.06),
        limb_quad(11, wri_l, hand_l, 0.06),
    ];
    FigureSpec { joints, quads }
}

/// Surface label and chart coordinates of a part-chart point.
fn surface_of(part: usize, a: f64, b: f64) -> (usize, f64, f64) {
    let surfaces = body::part_surfaces(part);
    let surface = if surfaces.len() == 1 {
        surfaces[0]
    } else if a < 0.5 {
        surfaces[0]
    } else {
        surfaces[1]
    };
    let (u, v) = body::chart_to_uv(surface, a, b);
    (surface, u, v)
}

// ---------------------------------------------------------------------------
// Scene assembly
// ---------------------------------------------------------------------------

struct Painter {
    w: usize,
    h: usize,
    /// Visible owner per pixel: (instance, part), or None.
    owner: Vec<Option<(usize, u8)>>,
    aa: Vec<f64>,
    bb: Vec<f64>,
}

impl Painter {
    fn new(w: usize, h: usize) -> Painter {
        Painter { w, h, owner: vec![None; w * h], aa: vec![0.0; w * h], bb: vec![0.0; w * h] }
    }

    /// Rasterizes a quad for `instance`, overwriting anything painted before.
    fn paint(&mut self, instance: usize, q: &PartQuad) {
        let corners = [
            q.origin,
            add(q.origin, q.ua),
            add(q.origin, q.va),
            add(add(q.origin, q.ua), q.va),
        ];
        let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let det = q.ua.0 * q.va.1 - q.ua.1 * q.va.0;
        if det.abs() < 1e-12 {
            return;
        }
        let x0 = (min_x.floor().max(0.0)) as usize;
        let x1 = (max_x.ceil().min(self.w as f64)) as usize;
        let y0 = (min_y.floor().max(0.0)) as usize;
        let y1 = (max_y.ceil().min(self.h as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let px = x as f64 + 0.5 - q.origin.0;
                let py = y as f64 + 0.5 - q.origin.1;
                let a = (px * q.va.1 - py * q.va.0) / det;
                let b = (py * q.ua.0 - px * q.ua.1) / det;
                if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) {
                    let i = y * self.w + x;
                    self.owner[i] = Some((instance, q.part as u8));
                    self.aa[i] = a;
                    self.bb[i] = b;
                }
            }
        }
    }
}

/// Bilinear value noise from a coarse random lattice.
fn paint_background(img: &mut [f64], w: usize, h: usize, rng: &mut ChaCha8Rng) {
    const G: usize = 9;
    for c in 0..3 {
        let lattice: Vec<f64> = (0..G * G).map(|_| rng.gen_range(0.0..0.35)).collect();
        for y in 0..h {
            for x in 0..w {
                let fy = y as f64 / h as f64 * (G - 1) as f64;
                let fx = x as f64 / w as f64 * (G - 1) as f64;
                let (iy, ix) = (fy as usize, fx as usize);
                let (ty, tx) = (fy - iy as f64, fx - ix as f64);
                let iy1 = (iy + 1).min(G - 1);
                let ix1 = (ix + 1).min(G - 1);
                let top = lattice[iy * G + ix] * (1.0 - tx) + lattice[iy * G + ix1] * tx;
                let bot = lattice[iy1 * G + ix] * (1.0 - tx) + lattice[iy1 * G + ix1] * tx;
                img[(c * h + y) * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
}

/// Paints a clutter quad (colour only, never an owner).
fn paint_distractor(img: &mut [f64], w: usize, h: usize, rng: &mut ChaCha8Rng) {
    let dim = w.min(h) as f64;
    let cx = rng.gen_range(0.1 * w as f64..0.9 * w as f64);
    let cy = rng.gen_range(0.1 * h as f64..0.9 * h as f64);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let len_a = rng.gen_range(0.08..0.25) * dim;
    let len_b = rng.gen_range(0.08..0.25) * dim;
    let ua = rot((len_a, 0.0), angle);
    let va = rot((0.0, len_b), angle + rng.gen_range(-0.4..0.4));
    let origin = (cx - 0.5 * ua.0 - 0.5 * va.0, cy - 0.5 * ua.1 - 0.5 * va.1);
    let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let det = ua.0 * va.1 - ua.1 * va.0;
    if det.abs() < 1e-12 {
        return;
    }
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5 - origin.0;
            let py = y as f64 + 0.5 - origin.1;
            let a = (px * va.1 - py * va.0) / det;
            let b = (py * ua.0 - px * ua.1) / det;
            if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) {
                for c in 0..3 {
                    img[(c * h + y) * w + x] = color[c];
                }
            }
        }
    }
}

/// Sum of 12 uniforms minus 6: a near-Gaussian with mean 0, variance 1.
fn gaussish(rng: &mut ChaCha8Rng) -> f64 {
    (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0
}

/// Generates one scene. Identical `(seed, cfg)` → bitwise-identical output.
pub fn generate_scene(seed: u64, cfg: &SceneCfg) -> Result<SceneAnnotation> {
    if cfg.n_instances == 0 {
        return Err(Error::invalid("generate_scene", "config requests zero instances"));
    }
    if cfg.width < 16 || cfg.height < 16 {
        return Err(Error::invalid("generate_scene", "image must be at least 16x16"));
    }
    if cfg.point_cap > TRAIN_POINT_CAP {
        return Err(Error::invalid(
            "generate_scene",
            format!("point cap {} exceeds {TRAIN_POINT_CAP}", cfg.point_cap),
        ));
    }
    if cfg.profile.iter().any(|&w| w < 0.0) || cfg.profile.iter().all(|&w| w == 0.0) {
        return Err(Error::invalid("generate_scene", "profile weights must be >= 0, not all zero"));
    }
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0; 3 * h * w];
    paint_background(&mut img, w, h, &mut rng);
    for _ in 0..cfg.distractors {
        paint_distractor(&mut img, w, h, &mut rng);
    }

    // Place figures: sampled pelvis positions, kept apart per occlusion level.
    let dim = w.min(h) as f64;
    let mut placed: Vec<(f64, f64, f64, f64, FigureSpec)> = Vec::new(); // (s, px, py, flip, fig)
    for _ in 0..cfg.n_instances {
        let mut accepted = None;
        for _attempt in 0..120 {
            let s = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1) * dim;
            let margin = |extent: f64, len: f64| -> (f64, f64) {
                if 2.0 * extent * s < len {
                    (extent * s, len - extent * s)
                } else {
                    (len / 2.0 - 0.5, len / 2.0 + 0.5)
                }
            };
            let (lo_x, hi_x) = margin(0.45, w as f64);
            let (lo_y, hi_y) = margin(0.52, h as f64);
            let px = rng.gen_range(lo_x..=hi_x);
            let py = rng.gen_range(lo_y..=hi_y);
            let ok = placed.iter().all(|&(s2, px2, _, _, _)| {
                (px - px2).abs() >= (1.0 - cfg.occlusion_level) * 0.35 * (s + s2)
            });
            if ok {
                let flip = if rng.gen::<bool>() { -1.0 } else { 1.0 };
                let fig = sample_figure(&mut rng);
                accepted = Some((s, px, py, flip, fig));
                break;
            }
        }
        if let Some(p) = accepted {
            placed.push(p);
        }
    }

    // Rasterize: later instances are painted over earlier ones.
    let mut painter = Painter::new(w, h);
    let to_image = |s: f64, px: f64, py: f64, flip: f64, p: Vec2| -> Vec2 {
        (px + s * flip * p.0, py + s * (0.51 - p.1))
    };
    let lin = |s: f64, flip: f64, v: Vec2| -> Vec2 { (s * flip * v.0, -s * v.1) };
    for (inst, (s, px, py, flip, fig)) in placed.iter().enumerate() {
        for q in &fig.quads {
            let iq = PartQuad {
                part: q.part,
                origin: to_image(*s, *px, *py, *flip, q.origin),
                ua: lin(*s, *flip, q.ua),
                va: lin(*s, *flip, q.va),
            };
            painter.paint(inst, &iq);
        }
    }

    // Colour the owned pixels: channel 0 encodes the part, 1/2 the chart.
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if let Some((_, part)) = painter.owner[i] {
                let noise = rng.gen_range(-0.02..0.02);
                img[i] = ((part as f64 + 1.0) / 15.0 + noise).clamp(0.0, 1.0);
                img[h * w + i] = (painter.aa[i] + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
                img[2 * h * w + i] = (painter.bb[i] + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
            }
        }
    }

    // Per-instance truth from the visibility-resolved owner map.
    let mut instances = Vec::new();
    for (inst, (s, px, py, flip, fig)) in placed.iter().enumerate() {
        let mut body_mask = vec![0u8; h * w];
        let mut part_mask = vec![0u8; h * w];
        let mut dense = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let Some((o, part)) = painter.owner[i] else { continue };
                if o != inst {
                    continue;
                }
                body_mask[i] = 1;
                part_mask[i] = part + 1;
                let (surface, u, v) = surface_of(part as usize, painter.aa[i], painter.bb[i]);
                dense.push(DensePixel { x, y, surface, u, v });
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
        if dense.len() < 8 {
            continue;
        }
        let region = RegionBox::new(
            x0 as f64,
            y0 as f64,
            (x1 + 1) as f64,
            (y1 + 1) as f64,
            instances.len(),
        )?;

        let keypoints: Vec<Keypoint> = fig
            .joints
            .iter()
            .map(|&j| {
                let (jx, jy) = to_image(*s, *px, *py, *flip, j);
                let (cx, cy) = (jx.floor() as i64, jy.floor() as i64);
                let mut visible = false;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (qx, qy) = (cx + dx, cy + dy);
                        if qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h {
                            if let Some((o, _)) = painter.owner[qy as usize * w + qx as usize] {
                                visible |= o == inst;
                            }
                        }
                    }
                }
                Keypoint { x: jx, y: jy, visible }
            })
            .collect();

        // Sparse training points: surface by profile weight, pixel uniform
        // within that surface's visible pixels, with replacement.
        let mut by_surface: Vec<Vec<usize>> = vec![Vec::new(); body::SURFACE_COUNT + 1];
        for (di, d) in dense.iter().enumerate() {
            by_surface[d.surface].push(di);
        }
        let weights: Vec<f64> = (1..=body::SURFACE_COUNT)
            .map(|sfc| if by_surface[sfc].is_empty() { 0.0 } else { cfg.profile[sfc - 1] })
            .collect();
        let total_w: f64 = weights.iter().sum();
        let n_raw = cfg.point_mean + (cfg.point_mean / 5.0) * gaussish(&mut rng);
        let n_points = (n_raw.round().max(1.0) as usize).min(cfg.point_cap);
        let mut points = Vec::with_capacity(n_points);
        if total_w > 0.0 {
            for _ in 0..n_points {
                let mut pick = rng.gen_range(0.0..total_w);
                let mut sfc = body::SURFACE_COUNT;
                for (k, &wt) in weights.iter().enumerate() {
                    if pick < wt {
                        sfc = k + 1;
                        break;
                    }
                    pick -= wt;
                }
                let list = &by_surface[sfc];
                let d = dense[list[rng.gen_range(0..list.len())]];
                points.push(AnnPoint { x: d.x, y: d.y, surface: d.surface, u: d.u, v: d.v });
            }
        }

        instances.push(Instance { region, body_mask, part_mask, keypoints, points, dense });
    }

    if instances.is_empty() {
        return Err(Error::invalid("generate_scene", "no instance ended up visible"));
    }
    let image = Tensor::from_vec(vec![3, h, w], img)?;
    Ok(SceneAnnotation { image, width: w, height: h, instances })
}

// ---------------------------------------------------------------------------
// Dataset file format
// ---------------------------------------------------------------------------

const DATASET_FORMAT: &str = "densecorr-scenes";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderDto {
    format: String,
    version: u32,
    scenes: usize,
}

#[derive(Serialize, Deserialize)]
struct DenseDto {
    x: Vec<u16>,
    y: Vec<u16>,
    surface: Vec<u8>,
    u: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct InstanceDto {
    bbox: [f64; 4],
    keypoints: Vec<(f64, f64, bool)>,
    points: Vec<AnnPoint>,
    dense: DenseDto,
}

#[derive(Serialize, Deserialize)]
struct SceneDto {
    width: usize,
    height: usize,
    instances: Vec<InstanceDto>,
    image_bytes: usize,
}

/// Writes scenes as a header line, then per scene one JSON metadata line
/// followed by the raw little-endian f64 image payload and a newline.
pub fn write_dataset(path: &Path, scenes: &[SceneAnnotation]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let header =
        HeaderDto { format: DATASET_FORMAT.into(), version: DATASET_VERSION, scenes: scenes.len() };
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Parse(e.to_string()))?;
    out.write_all(b"\n")?;
    for scene in scenes {
        let dto = SceneDto {
            width: scene.width,
            height: scene.height,
            instances: scene
                .instances
                .iter()
                .map(|inst| InstanceDto {
                    bbox: [inst.region.x0, inst.region.y0, inst.region.x1, inst.region.y1],
                    keypoints: inst.keypoints.iter().map(|k| (k.x, k.y, k.visible)).collect(),
                    points: inst.points.clone(),
                    dense: DenseDto {
                        x: inst.dense.iter().map(|d| d.x as u16).collect(),
                        y: inst.dense.iter().map(|d| d.y as u16).collect(),
                        surface: inst.dense.iter().map(|d| d.surface as u8).collect(),
                        u: inst.dense.iter().map(|d| d.u).collect(),
                        v: inst.dense.iter().map(|d| d.v).collect(),
                    },
                })
                .collect(),
            image_bytes: scene.image.len() * 8,
        };
        serde_json::to_writer(&mut out, &dto).map_err(|e| Error::Parse(e.to_string()))?;
        out.write_all(b"\n")?;
        for v in scene.image.data().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self, what: &str) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse(format!("{what}: unexpected end of file")))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Parse(format!("{what}: metadata is not UTF-8")))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse(format!("{what}: unexpected end of file")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Reads a dataset written by [`write_dataset`]. Errors name the offending
/// record.
pub fn read_dataset(path: &Path) -> Result<Vec<SceneAnnotation>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    let header: HeaderDto = serde_json::from_str(cur.line("header")?)
        .map_err(|e| Error::Parse(format!("header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Parse(format!("header: unknown format {:?}", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Parse(format!(
            "header: unsupported dataset version {} (supported: {DATASET_VERSION})",
            header.version
        )));
    }

    let mut scenes = Vec::with_capacity(header.scenes);
    for rec in 0..header.scenes {
        let what = format!("scene {rec}");
        let dto: SceneDto = serde_json::from_str(cur.line(&what)?)
            .map_err(|e| Error::Parse(format!("{what}: {e}")))?;
        let (w, h) = (dto.width, dto.height);
        if dto.image_bytes != 3 * w * h * 8 {
            return Err(Error::Parse(format!(
                "{what}: image payload {} bytes, expected {}",
                dto.image_bytes,
                3 * w * h * 8
            )));
        }
        let raw = cur.bytes(dto.image_bytes, &what)?;
        let pixels: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if cur.bytes(1, &what)? != b"\n" {
            return Err(Error::Parse(format!("{what}: missing payload terminator")));
        }
        let image = Tensor::from_vec(vec![3, h, w], pixels)
            .map_err(|e| Error::Parse(format!("{what}: {e}")))?;

        let mut instances = Vec::with_capacity(dto.instances.len());
        for (k, inst) in dto.instances.into_iter().enumerate() {
            let fail = |msg: String| Error::Parse(format!("{what} instance {k}: {msg}"));
            let lens = [
                inst.dense.x.len(),
                inst.dense.y.len(),
                inst.dense.surface.len(),
                inst.dense.u.len(),
                inst.dense.v.len(),
            ];
            if lens.iter().any(|&l| l != lens[0]) {
                return Err(fail("dense arrays disagree in length".into()));
            }
            if inst.keypoints.len() != body::KEYPOINT_COUNT {
                return Err(fail(format!("{} keypoints, expected 17", inst.keypoints.len())));
            }
            let mut body_mask = vec![0u8; h * w];
            let mut part_mask = vec![0u8; h * w];
            let mut dense = Vec::with_capacity(lens[0]);
            for i in 0..lens[0] {
                let (x, y) = (inst.dense.x[i] as usize, inst.dense.y[i] as usize);
                let surface = inst.dense.surface[i] as usize;
                if x >= w || y >= h {
                    return Err(fail(format!("dense pixel ({x},{y}) outside {w}x{h}")));
                }
                if surface == 0 || surface > body::SURFACE_COUNT {
                    return Err(fail(format!("surface label {surface} outside 1..=24")));
                }
                body_mask[y * w + x] = 1;
                part_mask[y * w + x] = body::surface_part(surface) as u8 + 1;
                dense.push(DensePixel { x, y, surface, u: inst.dense.u[i], v: inst.dense.v[i] });
            }
            for p in &inst.points {
                if p.x >= w || p.y >= h || body_mask[p.y * w + p.x] == 0 {
                    return Err(fail(format!("point ({},{}) outside the body mask", p.x, p.y)));
                }
            }
            let region =
                RegionBox::new(inst.bbox[0], inst.bbox[1], inst.bbox[2], inst.bbox[3], k)
                    .map_err(|e| fail(e.to_string()))?;
            instances.push(Instance {
                region,
                body_mask,
                part_mask,
                keypoints: inst
                    .keypoints
                    .iter()
                    .map(|&(x, y, visible)| Keypoint { x, y, visible })
                    .collect(),
                points: inst.points,
                dense,
            });
        }
        scenes.push(SceneAnnotation { image, width: w, height: h, instances });
    }
    Ok(scenes)
}
