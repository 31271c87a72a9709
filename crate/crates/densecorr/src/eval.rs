//! Whole-dataset evaluation: per-instance correspondence maps, geodesic
//! similarity matching, AP/AR report with per-part tables, the
//! ground-truth-substitution sweep, and the background-suppression probe.

use crate::config::{Config, Pipeline};
use crate::error::{Error, Result};
use crate::metrics::{
    compute_ap_ar, gps, per_category_report, substitute, ApSummary, EvalReport, ImageEval,
    PredMap, SubstituteFlags,
};
use crate::model::{region_prediction, seg_target, Model};
use crate::synth::SceneAnnotation;

/// One scene's predictions: an image-space correspondence map and a
/// confidence per ground-truth region.
#[derive(Debug, Clone)]
pub struct ScenePredictions {
    pub maps: Vec<PredMap>,
    pub scores: Vec<f64>,
}

/// Runs the model over every scene: one prediction per gt region on the
/// region path, one whole-map prediction on the fully-convolutional path.
pub fn predict_scenes(
    model: &Model,
    scenes: &[SceneAnnotation],
    pipeline: Pipeline,
) -> Result<Vec<ScenePredictions>> {
    let w_s = model.surface_classifier()?;
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut maps = Vec::with_capacity(scene.instances.len());
        let mut scores = Vec::with_capacity(scene.instances.len());
        match pipeline {
            Pipeline::Rcnn => {
                let dec = model.forward_image(&scene.image)?;
                for inst in &scene.instances {
                    let head_out = model.forward_region(&dec.unified, &inst.region, &w_s)?;
                    maps.push(region_prediction(
                        &head_out,
                        &inst.region,
                        scene.width,
                        scene.height,
                    )?);
                    scores.push(model.region_score(&head_out)?);
                }
            }
            Pipeline::Fcn => {
                crate::fcn::single_instance(scene)?;
                let head_out = crate::fcn::forward_fcn(model, &scene.image, &w_s)?;
                maps.push(crate::fcn::fcn_prediction(&head_out, scene.width, scene.height)?);
                scores.push(model.region_score(&head_out)?);
            }
        }
        out.push(ScenePredictions { maps, scores });
    }
    Ok(out)
}

fn image_evals(
    scenes: &[SceneAnnotation],
    preds: &[Vec<PredMap>],
    scores: &[Vec<f64>],
    kappa: f64,
) -> Result<Vec<ImageEval>> {
    let mut images = Vec::with_capacity(scenes.len());
    for ((scene, maps), scene_scores) in scenes.iter().zip(preds).zip(scores) {
        let gts: Vec<&crate::synth::Instance> =
            scene.instances.iter().filter(|i| !i.dense.is_empty()).collect();
        let sims: Vec<Vec<f64>> = maps
            .iter()
            .map(|m| {
                gts.iter()
                    .map(|g| gps(&g.dense, m, kappa).expect("non-empty dense truth"))
                    .collect()
            })
            .collect();
        images.push(ImageEval {
            sims,
            scores: scene_scores.clone(),
            gt_areas: gts.iter().map(|g| g.region.area()).collect(),
        });
    }
    Ok(images)
}

fn summary_from_maps(
    scenes: &[SceneAnnotation],
    maps: &[Vec<PredMap>],
    scores: &[Vec<f64>],
    kappa: f64,
    boundary: f64,
) -> Result<ApSummary> {
    compute_ap_ar(&image_evals(scenes, maps, scores, kappa)?, boundary)
}

/// Full report from precomputed predictions (prediction order must pair with
/// instance order — prediction `i` is scored against instance `i` in the
/// per-part table).
pub fn report_from_predictions(
    scenes: &[SceneAnnotation],
    preds: &[ScenePredictions],
    kappa: f64,
    boundary: f64,
) -> Result<EvalReport> {
    if scenes.len() != preds.len() {
        return Err(Error::invalid(
            "report_from_predictions",
            format!("{} scenes but {} prediction sets", scenes.len(), preds.len()),
        ));
    }
    let maps: Vec<Vec<PredMap>> = preds.iter().map(|p| p.maps.clone()).collect();
    let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.scores.clone()).collect();
    let summary = summary_from_maps(scenes, &maps, &scores, kappa, boundary)?;
    let mut pairs = Vec::new();
    for (scene, pred) in scenes.iter().zip(preds) {
        for (i, inst) in scene.instances.iter().enumerate() {
            pairs.push((&inst.dense[..], pred.maps.get(i)));
        }
    }
    Ok(EvalReport::new(summary, per_category_report(&pairs)))
}

/// Forward + report in one call.
pub fn evaluate(model: &Model, scenes: &[SceneAnnotation], cfg: &Config) -> Result<EvalReport> {
    let preds = predict_scenes(model, scenes, cfg.pipeline)?;
    report_from_predictions(scenes, &preds, cfg.kappa, cfg.size_boundary)
}

/// AP under every combination of ground-truth substitutions. Returns the 16
/// `(flags, ap)` rows, plain evaluation first, all-substitutions last.
pub fn substitution_sweep(
    scenes: &[SceneAnnotation],
    preds: &[ScenePredictions],
    kappa: f64,
    boundary: f64,
) -> Result<Vec<(SubstituteFlags, f64)>> {
    let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.scores.clone()).collect();
    let mut rows = Vec::with_capacity(16);
    for bits in 0..16u8 {
        let flags = SubstituteFlags {
            use_gt_body: bits & 1 != 0,
            use_gt_surface: bits & 2 != 0,
            use_gt_u: bits & 4 != 0,
            use_gt_v: bits & 8 != 0,
        };
        let maps: Vec<Vec<PredMap>> = scenes
            .iter()
            .zip(preds)
            .map(|(scene, p)| {
                scene
                    .instances
                    .iter()
                    .zip(&p.maps)
                    .map(|(inst, m)| substitute(m, &inst.dense, flags))
                    .collect()
            })
            .collect();
        let summary = summary_from_maps(scenes, &maps, &scores, kappa, boundary)?;
        rows.push((flags, summary.ap));
    }
    Ok(rows)
}

/// Mean instance-suppression gate activation over (background, body) map
/// cells — the decoder's segmentation branch should fire on bodies only.
pub fn gate_separation(model: &Model, scenes: &[SceneAnnotation]) -> Result<(f64, f64)> {
    let (mut bg_sum, mut bg_n, mut fg_sum, mut fg_n) = (0.0, 0usize, 0.0, 0usize);
    for scene in scenes {
        let dec = model.forward_image(&scene.image)?;
        let Some(seg) = &dec.seg_logits else {
            return Err(Error::invalid("gate_separation", "decoder has no segmentation branch"));
        };
        let gate = seg.select_axis0(1)?.sigmoid()?;
        let g = gate.data();
        let (target, mh, mw) = seg_target(&scene.instances, scene.width, scene.height);
        for i in 0..mh * mw {
            if target[i] == 1 {
                fg_sum += g[i];
                fg_n += 1;
            } else {
                bg_sum += g[i];
                bg_n += 1;
            }
        }
    }
    if bg_n == 0 || fg_n == 0 {
        return Err(Error::invalid("gate_separation", "need both background and body cells"));
    }
    Ok((bg_sum / bg_n as f64, fg_sum / fg_n as f64))
}
