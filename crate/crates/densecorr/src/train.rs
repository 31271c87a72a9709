//! Deterministic single-threaded training: one scene per iteration, SGD with
//! momentum and a two-step learning-rate decay, optional long-tail strategy,
//! CSV-ready loss log.

use dctensor::losses::cross_entropy_pixels;
use dctensor::{optim::Sgd, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ImbalanceMode, Pipeline};
use crate::error::{Error, Result};
use crate::head::{compute_losses, forward_head, HeadOutput, SURFACE_CHANNELS};
use crate::imbalance::{ohem_triplet, ClassStats, Resampler};
use crate::model::{region_truth, seg_target, Model};
use crate::synth::{Instance, SceneAnnotation};

/// One logged iteration (all loss values unweighted except `total`).
#[derive(Debug, Clone)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub body: f64,
    pub part: f64,
    pub kpt: f64,
    pub surface: f64,
    pub uv: f64,
    pub seg: f64,
    pub instance: f64,
    pub triplet: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,lr,total,body,part,kpt,surface,uv,seg,instance,triplet\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iter, r.lr, r.total, r.body, r.part, r.kpt, r.surface, r.uv, r.seg, r.instance, r.triplet
        ));
    }
    s
}

/// Per-surface point counts over a training set (0-based class = surface−1).
pub fn surface_stats(scenes: &[SceneAnnotation]) -> Result<ClassStats> {
    let labels = scenes
        .iter()
        .flat_map(|s| s.instances.iter())
        .flat_map(|i| i.points.iter().map(|p| p.surface - 1));
    ClassStats::from_labels(crate::body::SURFACE_COUNT, labels)
}

/// Features at the annotated grid points, `[n_points, D]`, for hard-example
/// mining; paired with the points' 0-based surface labels.
fn point_features(out: &HeadOutput, truth: &crate::head::RegionTruth) -> Result<Option<(Tensor, Vec<usize>)>> {
    if truth.points.is_empty() {
        return Ok(None);
    }
    let d = out.features.shape()[0];
    let mut lanes = Vec::with_capacity(truth.points.len() * d);
    let mut labels = Vec::with_capacity(truth.points.len());
    for p in &truth.points {
        for c in 0..d {
            lanes.push((c, p.y, p.x));
        }
        labels.push(p.surface - 1);
    }
    let feats = out.features.gather_points(&lanes)?.reshape([truth.points.len(), d])?;
    Ok(Some((feats, labels)))
}

/// Trains `model` in place; returns the loss log. Bitwise-reproducible for a
/// given `(config, scenes)` pair.
pub fn train(model: &Model, scenes: &[SceneAnnotation], cfg: &Config) -> Result<Vec<LogRow>> {
    if scenes.is_empty() {
        return Err(Error::invalid("train", "no training scenes"));
    }
    let stats = match cfg.imbalance {
        ImbalanceMode::Reweight | ImbalanceMode::Resample | ImbalanceMode::Ohem => {
            Some(surface_stats(scenes)?)
        }
        _ => None,
    };
    let mut loss_cfg = cfg.loss_config();
    if cfg.imbalance == ImbalanceMode::Reweight {
        let w = stats.as_ref().expect("stats built").weights();
        let mut cw = [1.0; SURFACE_CHANNELS];
        cw[1..].copy_from_slice(w);
        loss_cfg.surface_class_weights = Some(cw);
    }

    let trainable = model.trainable();
    let mut opt = Sgd::new(cfg.momentum);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5ce0e9a5));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x1f85_2f2d));
    let mut log = Vec::with_capacity(cfg.iters);

    for iter in 0..cfg.iters {
        let scene = &scenes[order_rng.gen_range(0..scenes.len())];
        for t in &trainable {
            t.zero_grad();
        }
        let tape = Tape::new();
        let row = {
            let _rec = tape.recording();
            let w_s = model.surface_classifier()?;
            let dec = model.forward_image(&scene.image)?;

            let mut total: Option<Tensor> = None;
            let add = |acc: &mut Option<Tensor>, t: Tensor| -> Result<()> {
                *acc = Some(match acc.take() {
                    Some(a) => a.add(&t)?,
                    None => t,
                });
                Ok(())
            };

            // (head output, grid truth) per supervised unit: one per region
            // for the region path, the whole map for the FCN path.
            let units: Vec<(HeadOutput, crate::head::RegionTruth)> = match cfg.pipeline {
                Pipeline::Rcnn => scene
                    .instances
                    .iter()
                    .map(|inst| {
                        let inst = resampled(inst, cfg, stats.as_ref(), &mut sample_rng)?;
                        let out = model.forward_region(&dec.unified, &inst.region, &w_s)?;
                        let truth =
                            region_truth(&inst, scene.width, scene.height, model.region_size());
                        Ok((out, truth))
                    })
                    .collect::<Result<_>>()?,
                Pipeline::Fcn => {
                    let inst = crate::fcn::single_instance(scene)?;
                    let inst = resampled(inst, cfg, stats.as_ref(), &mut sample_rng)?;
                    let out = forward_head(&dec.unified, &model.head, &w_s)?;
                    let truth = crate::fcn::fcn_truth(&inst, scene.width, scene.height)?;
                    vec![(out, truth)]
                }
            };

            let (mut body, mut part, mut kpt, mut surface, mut uv, mut instance) =
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            let mut ohem_feats: Vec<(Tensor, Vec<usize>)> = Vec::new();
            let n = units.len() as f64;
            for (out, truth) in &units {
                let losses = compute_losses(out, truth, &loss_cfg)?;
                body += losses.body / n;
                part += losses.part / n;
                kpt += losses.kpt / n;
                surface += losses.surface / n;
                uv += losses.uv / n;
                add(&mut total, losses.total.scale(1.0 / n)?)?;

                let logits = crate::head::instance_logits(out, &model.head)?.reshape([2, 1])?;
                let l_inst = cross_entropy_pixels(&logits, &[1], None, None)?;
                instance += l_inst.item()? / n;
                add(&mut total, l_inst.scale(cfg.lambda_instance / n)?)?;

                if cfg.imbalance == ImbalanceMode::Ohem {
                    if let Some(pair) = point_features(out, truth)? {
                        ohem_feats.push(pair);
                    }
                }
            }

            let mut seg = 0.0;
            if let Some(seg_logits) = &dec.seg_logits {
                let (target, _, _) = seg_target(&scene.instances, scene.width, scene.height);
                let l_seg = cross_entropy_pixels(seg_logits, &target, None, None)?;
                seg = l_seg.item()?;
                add(&mut total, l_seg.scale(cfg.lambda_seg)?)?;
            }

            let mut triplet = 0.0;
            if !ohem_feats.is_empty() {
                let (parts, labels): (Vec<Tensor>, Vec<Vec<usize>>) =
                    ohem_feats.into_iter().unzip();
                let refs: Vec<&Tensor> = parts.iter().collect();
                let feats = Tensor::concat(&refs, 0)?;
                let labels: Vec<usize> = labels.into_iter().flatten().collect();
                let l_tri = ohem_triplet(
                    &feats,
                    &labels,
                    stats.as_ref().expect("stats built"),
                    cfg.triplet_margin,
                )?;
                triplet = l_tri.item()?;
                add(&mut total, l_tri.scale(cfg.lambda_triplet)?)?;
            }

            let total = total.expect("at least one instance");
            let row = LogRow {
                iter,
                lr: cfg.lr_at(iter),
                total: total.item()?,
                body,
                part,
                kpt,
                surface,
                uv,
                seg,
                instance,
                triplet,
            };
            tape.backward(&total)?;
            row
        };
        opt.step(&trainable, row.lr)?;
        log.push(row);
    }
    Ok(log)
}

/// The resample strategy redraws each instance's sparse points by inverse
/// class frequency; every other strategy passes the instance through
/// untouched.
fn resampled(
    inst: &Instance,
    cfg: &Config,
    stats: Option<&ClassStats>,
    rng: &mut ChaCha8Rng,
) -> Result<Instance> {
    if cfg.imbalance != ImbalanceMode::Resample || inst.points.is_empty() {
        return Ok(inst.clone());
    }
    let stats = stats.expect("stats built");
    let labels: Vec<usize> = inst.points.iter().map(|p| p.surface - 1).collect();
    let sampler = Resampler::new(stats, &labels)?;
    let picks = sampler.draw(rng, inst.points.len());
    let mut out = inst.clone();
    out.points = picks.into_iter().map(|i| inst.points[i]).collect();
    Ok(out)
}
