//! Pyramid refinement and unification into one high-resolution map.
//!
//! Refinement runs two passes over the pyramid. Downward, each level absorbs
//! the level above it after a lossless parity fold brings that level to the
//! same resolution (`Q_i = P_i + proj(fold(Q_{i-1}))`). Upward, each refined
//! level is unfolded back to 2× resolution and added into the level below
//! (`R_{i-1} = Q_{i-1} + unfold(R_i)`), so every level ends up informed by
//! both finer and coarser scales while keeping its own shape.
//!
//! Unification upsamples all refined levels to the finest grid, concatenates
//! them, and applies one 3×3 kernel at several dilation rates over reflected
//! padding, summing the branches — the kernel is shared, so the rates differ
//! only in receptive field.
//!
//! A 1×1 two-way classifier over the unified map predicts instance-vs-
//! background; its foreground sigmoid multiplicatively suppresses background
//! features before region cropping.

use dctensor::{Conv2d, Tensor};

use crate::backbone::{PyramidFeatures, NORM_EPS};
use crate::error::{Error, Result};
use crate::init::ParamStore;
use crate::rearrange::{fa, ifa, IfaBranch};

/// How the cross-resolution refinement moves information between levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineMode {
    /// No refinement: concatenated raw pyramid through a 1×1 map.
    Off,
    /// Lossy resampling: stride-2 convolution down, nearest-upsample + conv up.
    Strided,
    /// Lossless parity fold down, learned parity unfold up.
    Parity,
}

#[derive(Debug, Clone)]
pub struct DecoderCfg {
    pub channels: usize,
    pub unified_channels: usize,
    pub dilations: Vec<usize>,
    pub mode: RefineMode,
}

pub struct DecoderOutput {
    pub refined: PyramidFeatures,
    /// `[Cu, H/4, W/4]` unified representation, gated when a mask head exists.
    pub unified: Tensor,
    /// `[2, H/4, W/4]` background/foreground logits (`None` in [`RefineMode::Off`]).
    pub seg_logits: Option<Tensor>,
}

enum DownStep {
    Parity { proj: Tensor },
    Strided { conv: Tensor },
}

enum UpStep {
    Parity { branches: Vec<IfaBranch> },
    Strided { conv: Tensor },
}

pub struct Decoder {
    cfg: DecoderCfg,
    downs: Vec<DownStep>,
    ups: Vec<UpStep>,
    trident: Option<Tensor>,
    unify: Option<Tensor>,
    seg: Option<Tensor>,
}

impl Decoder {
    pub fn new(cfg: DecoderCfg, params: &mut ParamStore) -> Result<Decoder> {
        if cfg.dilations.is_empty() {
            return Err(Error::invalid("decoder", "empty dilation list"));
        }
        let c = cfg.channels;
        let (mut downs, mut ups) = (Vec::new(), Vec::new());
        match cfg.mode {
            RefineMode::Off => {}
            RefineMode::Strided => {
                for lvl in 3..=5 {
                    downs.push(DownStep::Strided {
                        conv: params.conv(&format!("decoder.fold{lvl}"), c, c, 3, 3),
                    });
                }
                for lvl in (2..=4).rev() {
                    ups.push(UpStep::Strided {
                        conv: params.conv(&format!("decoder.unfold{lvl}"), c, c, 3, 3),
                    });
                }
            }
            RefineMode::Parity => {
                for lvl in 3..=5 {
                    downs.push(DownStep::Parity {
                        proj: params.conv(&format!("decoder.fold{lvl}"), c, 4 * c, 1, 1),
                    });
                }
                for lvl in (2..=4).rev() {
                    let branches = (0..4)
                        .map(|k| IfaBranch {
                            weight: params.conv(&format!("decoder.unfold{lvl}.k{k}"), c, c, 3, 3),
                            bias: None,
                        })
                        .collect();
                    ups.push(UpStep::Parity { branches });
                }
            }
        }
        let (trident, unify, seg) = match cfg.mode {
            RefineMode::Off => {
                (None, Some(params.conv("decoder.unify", cfg.unified_channels, 4 * c, 1, 1)), None)
            }
            _ => (
                Some(params.conv("decoder.trident", cfg.unified_channels, 4 * c, 3, 3)),
                None,
                Some(params.conv("decoder.seg", 2, cfg.unified_channels, 1, 1)),
            ),
        };
        Ok(Decoder { cfg, downs, ups, trident, unify, seg })
    }

    pub fn cfg(&self) -> &DecoderCfg {
        &self.cfg
    }

    /// Two-pass cross-resolution refinement; shape-preserving per level.
    pub fn refine(&self, pyr: &PyramidFeatures) -> Result<PyramidFeatures> {
        let levels = pyr.levels();
        if self.downs.is_empty() {
            return Ok(PyramidFeatures {
                p2: pyr.p2.clone(),
                p3: pyr.p3.clone(),
                p4: pyr.p4.clone(),
                p5: pyr.p5.clone(),
            });
        }
        // Downward: q[0] = P2; q[i] = P_i + proj(fold(q[i-1])).
        let mut q: Vec<Tensor> = vec![levels[0].clone()];
        for (i, step) in self.downs.iter().enumerate() {
            let folded = match step {
                DownStep::Parity { proj } => fa(&q[i])?.conv2d(proj, None, Conv2d::default())?,
                DownStep::Strided { conv } => {
                    q[i].conv2d(conv, None, Conv2d { stride: 2, padding: 1, dilation: 1 })?
                }
            };
            q.push(levels[i + 1].add(&folded)?);
        }
        // Upward: r[3] = q[3]; r[i-1] = q[i-1] + unfold(r[i]).
        let mut r: Vec<Tensor> = vec![q[3].clone()];
        for (i, step) in self.ups.iter().enumerate() {
            let top = r.last().unwrap();
            let unfolded = match step {
                UpStep::Parity { branches } => ifa(top, branches)?,
                UpStep::Strided { conv } => {
                    top.upsample_nearest(2)?.conv2d(conv, None, Conv2d::padded(1))?
                }
            };
            r.push(q[2 - i].add(&unfolded)?);
        }
        r.reverse();
        let mut it = r.into_iter();
        Ok(PyramidFeatures {
            p2: it.next().unwrap(),
            p3: it.next().unwrap(),
            p4: it.next().unwrap(),
            p5: it.next().unwrap(),
        })
    }

    /// Upsample-concat all levels to the finest grid, then either the shared
    /// multi-dilation kernel (refining modes) or a plain 1×1 map (off).
    pub fn unify(&self, refined: &PyramidFeatures) -> Result<Tensor> {
        let stacked = Tensor::concat(
            &[
                &refined.p2,
                &refined.p3.upsample_nearest(2)?,
                &refined.p4.upsample_nearest(4)?,
                &refined.p5.upsample_nearest(8)?,
            ],
            0,
        )?;
        match (&self.trident, &self.unify) {
            (Some(kernel), _) => {
                let mut acc: Option<Tensor> = None;
                for &d in &self.cfg.dilations {
                    let branch = stacked
                        .pad_reflect(d)?
                        .conv2d(kernel, None, Conv2d { stride: 1, padding: 0, dilation: d })?;
                    acc = Some(match acc {
                        Some(a) => a.add(&branch)?,
                        None => branch,
                    });
                }
                Ok(acc.expect("non-empty dilations"))
            }
            (None, Some(w)) => Ok(stacked.conv2d(w, None, Conv2d::default())?),
            (None, None) => unreachable!("decoder always has a unification map"),
        }
    }

    /// Foreground/background logits plus the background-suppressed map.
    /// Without a mask head the unified map passes through ungated.
    pub fn strengthen(&self, unified: &Tensor) -> Result<(Option<Tensor>, Tensor)> {
        let Some(seg) = &self.seg else {
            return Ok((None, unified.clone()));
        };
        let logits = unified.conv2d(seg, None, Conv2d::default())?;
        let gate = logits.select_axis0(1)?.sigmoid()?;
        let suppressed = unified.mul_gate(&gate)?;
        Ok((Some(logits), suppressed))
    }

    pub fn forward(&self, pyr: &PyramidFeatures) -> Result<DecoderOutput> {
        let refined = self.refine(pyr)?;
        // The multi-dilation sum in `unify` stacks three correlated copies of
        // the same kernel's response; standardize before gating so the head
        // always sees unit-scale features.
        let unified = self.unify(&refined)?.channel_norm(NORM_EPS)?;
        let (seg_logits, suppressed) = self.strengthen(&unified)?;
        Ok(DecoderOutput { refined, unified: suppressed, seg_logits })
    }
}
