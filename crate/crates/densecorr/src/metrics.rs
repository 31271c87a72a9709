//! Evaluation: geodesic point similarity, keypoint similarity, greedy
//! matching, threshold-swept average precision/recall, per-part report, and
//! the ground-truth-substitution diagnostic.

use serde::Serialize;

use crate::body;
use crate::error::{Error, Result};
use crate::synth::DensePixel;

/// Gaussian falloff scale for geodesic point similarity.
pub const KAPPA: f64 = 0.255;

/// Medium/large gt-box-area boundary (image pixels squared).
pub const SIZE_BOUNDARY: f64 = 96.0 * 96.0;

/// Matching thresholds 0.50, 0.55, …, 0.95.
pub fn thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// A per-pixel correspondence prediction over the whole image. Surface 0
/// means "no body here"; its chart values are meaningless.
#[derive(Debug, Clone, PartialEq)]
pub struct PredMap {
    pub w: usize,
    pub h: usize,
    pub surface: Vec<u8>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl PredMap {
    pub fn background(w: usize, h: usize) -> PredMap {
        PredMap { w, h, surface: vec![0; w * h], u: vec![0.0; w * h], v: vec![0.0; w * h] }
    }

    pub fn at(&self, x: usize, y: usize) -> (usize, f64, f64) {
        let i = y * self.w + x;
        (self.surface[i] as usize, self.u[i], self.v[i])
    }
}

/// Geodesic proxy distance between a predicted and a true correspondence.
/// A background prediction costs the full cap.
pub fn point_distance(pred: (usize, f64, f64), gt: (usize, f64, f64)) -> f64 {
    if pred.0 == 0 || gt.0 == 0 {
        return body::DISTANCE_CAP;
    }
    body::geodesic(pred.0, pred.1, pred.2, gt.0, gt.1, gt.2)
}

/// Geodesic point similarity: mean over gt points of `exp(−d²/(2κ²))`.
/// `None` when there are no points (such an instance is excluded from
/// matching rather than scored).
pub fn gps(gt_points: &[DensePixel], pred: &PredMap, kappa: f64) -> Option<f64> {
    if gt_points.is_empty() {
        return None;
    }
    let mut acc = 0.0;
    for p in gt_points {
        let d = point_distance(pred.at(p.x, p.y), (p.surface, p.u, p.v));
        acc += (-d * d / (2.0 * kappa * kappa)).exp();
    }
    Some(acc / gt_points.len() as f64)
}

/// Object keypoint similarity: mean over visible gt keypoints of
/// `exp(−d²/(2·area·k_i²))` with the standard per-joint falloffs.
/// `None` when no keypoint is visible.
pub fn oks(gt: &[crate::synth::Keypoint], pred: &[(f64, f64)], area: f64) -> Result<Option<f64>> {
    if gt.len() != body::KEYPOINT_COUNT || pred.len() != body::KEYPOINT_COUNT {
        return Err(Error::invalid("oks", "expected 17 gt and 17 predicted keypoints"));
    }
    if area <= 0.0 {
        return Err(Error::invalid("oks", "area must be positive"));
    }
    let mut acc = 0.0;
    let mut n = 0;
    for (i, g) in gt.iter().enumerate() {
        if !g.visible {
            continue;
        }
        let (dx, dy) = (pred[i].0 - g.x, pred[i].1 - g.y);
        let k = body::KEYPOINT_FALLOFF[i];
        acc += (-(dx * dx + dy * dy) / (2.0 * area * k * k)).exp();
        n += 1;
    }
    Ok(if n == 0 { None } else { Some(acc / n as f64) })
}

// ---------------------------------------------------------------------------
// Matching and AP/AR
// ---------------------------------------------------------------------------

/// One image's matchable content: similarity of every (prediction, gt) pair,
/// prediction confidences, and gt box areas for size strata.
#[derive(Debug, Clone)]
pub struct ImageEval {
    /// `sims[p][g]` ∈ [0,1].
    pub sims: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub gt_areas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    Tp,
    Fp,
    /// Matched a gt outside the evaluated stratum: dropped from the ranking.
    Ignored,
}

/// Greedy matching of one image at one threshold: predictions in descending
/// score order each take the available gt with the highest similarity
/// (ties → lower gt index) if it reaches the threshold.
fn match_image(img: &ImageEval, t: f64, include: &[bool]) -> Vec<Outcome> {
    let n_pred = img.scores.len();
    let mut order: Vec<usize> = (0..n_pred).collect();
    order.sort_by(|&a, &b| img.scores[b].partial_cmp(&img.scores[a]).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; img.gt_areas.len()];
    let mut out = vec![Outcome::Fp; n_pred];
    for &p in &order {
        let mut best: Option<(f64, usize)> = None;
        for (g, &used) in taken.iter().enumerate() {
            if used {
                continue;
            }
            let s = img.sims[p][g];
            if s >= t && best.map_or(true, |(bs, _)| s > bs) {
                best = Some((s, g));
            }
        }
        if let Some((_, g)) = best {
            taken[g] = true;
            out[p] = if include[g] { Outcome::Tp } else { Outcome::Ignored };
        }
    }
    out
}

/// Area under the 101-point interpolated precision-recall curve.
fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    // curve: (recall, precision) in ranking order
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|&&(rec, _)| rec >= level - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

fn ap_ar_at(images: &[ImageEval], t: f64, stratum: Option<(f64, f64)>) -> Option<(f64, f64)> {
    let mut includes: Vec<Vec<bool>> = Vec::with_capacity(images.len());
    let mut n_gt = 0usize;
    for img in images {
        let inc: Vec<bool> = img
            .gt_areas
            .iter()
            .map(|&a| stratum.map_or(true, |(lo, hi)| a >= lo && a < hi))
            .collect();
        n_gt += inc.iter().filter(|&&b| b).count();
        includes.push(inc);
    }
    if n_gt == 0 {
        return None;
    }
    // Rank all predictions globally by score (ties → earlier image/index).
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for p in 0..img.scores.len() {
            ranked.push((i, p));
        }
    }
    ranked.sort_by(|&(ia, pa), &(ib, pb)| {
        images[ib].scores[pb]
            .partial_cmp(&images[ia].scores[pa])
            .unwrap()
            .then(ia.cmp(&ib))
            .then(pa.cmp(&pb))
    });
    let outcomes: Vec<Vec<Outcome>> =
        images.iter().zip(&includes).map(|(img, inc)| match_image(img, t, inc)).collect();
    let mut curve = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(i, p) in &ranked {
        match outcomes[i][p] {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => continue,
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    Some((interpolated_ap(&curve), tp as f64 / n_gt as f64))
}

/// AP/AR summary over the standard threshold sweep.
#[derive(Debug, Clone, Serialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar: f64,
    pub ar_per_threshold: Vec<f64>,
}

/// Sweeps the thresholds and size strata. `boundary` splits medium from
/// large gt boxes by area.
pub fn compute_ap_ar(images: &[ImageEval], boundary: f64) -> Result<ApSummary> {
    for (i, img) in images.iter().enumerate() {
        if img.sims.len() != img.scores.len() {
            return Err(Error::invalid(
                "compute_ap_ar",
                format!("image {i}: {} sim rows for {} scores", img.sims.len(), img.scores.len()),
            ));
        }
        for row in &img.sims {
            if row.len() != img.gt_areas.len() {
                return Err(Error::invalid("compute_ap_ar", format!("image {i}: ragged sims")));
            }
            if row.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::invalid("compute_ap_ar", format!("image {i}: similarity outside [0,1]")));
            }
        }
        if img.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("compute_ap_ar", format!("image {i}: non-finite score")));
        }
    }
    if images.iter().all(|img| img.gt_areas.is_empty()) {
        return Err(Error::invalid("compute_ap_ar", "no ground-truth instances"));
    }

    let mut aps = Vec::new();
    let mut ars = Vec::new();
    let mut aps_m = Vec::new();
    let mut aps_l = Vec::new();
    for t in thresholds() {
        let (ap, ar) = ap_ar_at(images, t, None).expect("gts exist");
        aps.push(ap);
        ars.push(ar);
        if let Some((ap_m, _)) = ap_ar_at(images, t, Some((0.0, boundary))) {
            aps_m.push(ap_m);
        }
        if let Some((ap_l, _)) = ap_ar_at(images, t, Some((boundary, f64::INFINITY))) {
            aps_l.push(ap_l);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(ApSummary {
        ap: mean(&aps),
        ap50: aps[0],
        ap75: aps[5],
        ap_m: (!aps_m.is_empty()).then(|| mean(&aps_m)),
        ap_l: (!aps_l.is_empty()).then(|| mean(&aps_l)),
        ar: mean(&ars),
        ar_per_threshold: ars,
    })
}

// ---------------------------------------------------------------------------
// Per-category report
// ---------------------------------------------------------------------------

/// Per-standard-part point metrics. `None` marks a part with no gt points
/// (absent, never reported as zero).
#[derive(Debug, Clone, Serialize)]
pub struct CategoryReport {
    pub ar: [Option<f64>; body::STANDARD_PART_COUNT],
    pub u_mse: [Option<f64>; body::STANDARD_PART_COUNT],
    pub v_mse: [Option<f64>; body::STANDARD_PART_COUNT],
    pub uv_gd: [Option<f64>; body::STANDARD_PART_COUNT],
}

/// Point-wise evaluation over each instance's dense gt against the paired
/// prediction (None = the instance went undetected). Per part: AR is the
/// fraction of points whose predicted surface lands in the right standard
/// part; U/V MSE run over exact-surface matches; UV-GD is the mean geodesic
/// proxy distance over all points.
pub fn per_category_report(pairs: &[(&[DensePixel], Option<&PredMap>)]) -> CategoryReport {
    const P: usize = body::STANDARD_PART_COUNT;
    let mut n_points = [0usize; P];
    let mut n_part_ok = [0usize; P];
    let mut n_exact = [0usize; P];
    let mut u_sq = [0.0; P];
    let mut v_sq = [0.0; P];
    let mut gd = [0.0; P];
    for (points, pred) in pairs {
        for pt in *points {
            let std_part = body::surface_standard(pt.surface);
            n_points[std_part] += 1;
            let guess = pred.map(|m| m.at(pt.x, pt.y));
            match guess {
                Some((s, u, v)) if s != 0 => {
                    if body::surface_standard(s) == std_part {
                        n_part_ok[std_part] += 1;
                    }
                    if s == pt.surface {
                        n_exact[std_part] += 1;
                        u_sq[std_part] += (u - pt.u) * (u - pt.u);
                        v_sq[std_part] += (v - pt.v) * (v - pt.v);
                    }
                    gd[std_part] += point_distance((s, u, v), (pt.surface, pt.u, pt.v));
                }
                _ => gd[std_part] += body::DISTANCE_CAP,
            }
        }
    }
    let ratio = |num: &[usize; P], den: &[usize; P]| {
        std::array::from_fn(|p| (den[p] > 0).then(|| num[p] as f64 / den[p] as f64))
    };
    let meansq = |sq: &[f64; P], den: &[usize; P]| {
        std::array::from_fn(|p| (den[p] > 0).then(|| sq[p] / den[p] as f64))
    };
    CategoryReport {
        ar: ratio(&n_part_ok, &n_points),
        u_mse: meansq(&u_sq, &n_exact),
        v_mse: meansq(&v_sq, &n_exact),
        uv_gd: meansq(&gd, &n_points),
    }
}

// ---------------------------------------------------------------------------
// Ground-truth substitution
// ---------------------------------------------------------------------------

/// Which prediction channels to replace with ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct SubstituteFlags {
    pub use_gt_body: bool,
    pub use_gt_surface: bool,
    pub use_gt_u: bool,
    pub use_gt_v: bool,
}

impl SubstituteFlags {
    pub fn all() -> SubstituteFlags {
        SubstituteFlags { use_gt_body: true, use_gt_surface: true, use_gt_u: true, use_gt_v: true }
    }
}

/// Replaces prediction channels with ground truth at the gt body pixels.
///
/// The replacements are point-wise non-worsening: fixing the surface moves
/// the predicted chart point by projection (same part), through the shared
/// joint (adjacent part), or to the chart centre (non-adjacent — previously
/// at the distance cap), so each point's geodesic error never increases; the
/// U/V channels only overwrite when the (possibly fixed) surface is already
/// correct.
pub fn substitute(pred: &PredMap, gt: &[DensePixel], flags: SubstituteFlags) -> PredMap {
    let mut out = pred.clone();
    for p in gt {
        let i = p.y * out.w + p.x;
        let s = out.surface[i] as usize;
        if s == 0 {
            if flags.use_gt_body {
                out.surface[i] = p.surface as u8;
                out.u[i] = p.u;
                out.v[i] = p.v;
            }
            continue;
        }
        if flags.use_gt_surface && s != p.surface {
            let (part_pred, a, b) = body::chart_point(s, out.u[i], out.v[i]);
            let part_gt = body::surface_part(p.surface);
            let (u, v) = if part_pred == part_gt {
                body::chart_to_uv(p.surface, a, b)
            } else if let Some((_, entry_gt)) = body::joint_between(part_pred, part_gt) {
                body::chart_to_uv(p.surface, entry_gt.0, entry_gt.1)
            } else {
                (0.5, 0.5)
            };
            out.surface[i] = p.surface as u8;
            out.u[i] = u;
            out.v[i] = v;
        }
        if out.surface[i] as usize == p.surface {
            if flags.use_gt_u {
                out.u[i] = p.u;
            }
            if flags.use_gt_v {
                out.v[i] = p.v;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

/// The full evaluation record: detection AP/AR plus the per-part table.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar: f64,
    pub ar_per_threshold: Vec<f64>,
    pub per_category: CategoryReport,
}

impl EvalReport {
    pub fn new(summary: ApSummary, per_category: CategoryReport) -> EvalReport {
        EvalReport {
            ap: summary.ap,
            ap50: summary.ap50,
            ap75: summary.ap75,
            ap_m: summary.ap_m,
            ap_l: summary.ap_l,
            ar: summary.ar,
            ar_per_threshold: summary.ar_per_threshold,
            per_category,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-part table as CSV: one column per standard part, one row per
    /// metric. Absent parts leave empty cells.
    pub fn category_csv(&self) -> String {
        let mut out = String::from("metric");
        for name in body::STANDARD_PART_NAMES {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        let mut row = |name: &str, vals: &[Option<f64>; body::STANDARD_PART_COUNT]| {
            out.push_str(name);
            for v in vals {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        };
        row("ar", &self.per_category.ar);
        row("u_mse", &self.per_category.u_mse);
        row("v_mse", &self.per_category.v_mse);
        row("uv_gd", &self.per_category.uv_gd);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_point(x: usize, y: usize, surface: usize, u: f64, v: f64) -> DensePixel {
        DensePixel { x, y, surface, u, v }
    }

    fn exact_map(points: &[DensePixel], w: usize, h: usize) -> PredMap {
        let mut m = PredMap::background(w, h);
        for p in points {
            let i = p.y * w + p.x;
            m.surface[i] = p.surface as u8;
            m.u[i] = p.u;
            m.v[i] = p.v;
        }
        m
    }

    #[test]
    fn gps_perfect_cap_and_mixture() {
        let pts: Vec<DensePixel> = (0..10)
            .map(|i| dense_point(i, 0, 1 + (i % 24), 0.3, 0.7))
            .collect();
        let m = exact_map(&pts, 16, 4);
        assert_eq!(gps(&pts, &m, KAPPA), Some(1.0));

        // Wrong non-adjacent surface everywhere: distance = cap.
        // head (parts 0) vs foot (13): not adjacent.
        let head_pts: Vec<DensePixel> = (0..8).map(|i| dense_point(i, 1, 23, 0.5, 0.5)).collect();
        let mut wrong = PredMap::background(16, 4);
        for p in &head_pts {
            let i = p.y * 16 + p.x;
            wrong.surface[i] = 5; // foot_left
            wrong.u[i] = 0.5;
            wrong.v[i] = 0.5;
        }
        let want = (-1.0 / (2.0 * KAPPA * KAPPA)).exp();
        let got = gps(&head_pts, &wrong, KAPPA).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        assert!((want - 4.6e-4).abs() < 1e-4);

        // Half perfect, half cap → mean of the two values.
        let mut mixed_pts = head_pts.clone();
        let perfect: Vec<DensePixel> = (8..16).map(|i| dense_point(i, 1, 23, 0.5, 0.5)).collect();
        let mut half = wrong.clone();
        for p in &perfect {
            let i = p.y * 16 + p.x;
            half.surface[i] = 23;
            half.u[i] = 0.5;
            half.v[i] = 0.5;
        }
        mixed_pts.extend_from_slice(&perfect);
        let got = gps(&mixed_pts, &half, KAPPA).unwrap();
        assert!((got - (1.0 + want) / 2.0).abs() < 1e-15);

        // No points: excluded.
        assert_eq!(gps(&[], &m, KAPPA), None);
    }

    #[test]
    fn gps_decreases_when_one_point_moves_away() {
        let pts = vec![dense_point(0, 0, 1, 0.5, 0.5), dense_point(1, 0, 1, 0.5, 0.5)];
        let near = exact_map(&pts, 4, 1);
        let mut far = near.clone();
        far.u[1] = 0.9;
        assert!(gps(&pts, &far, KAPPA).unwrap() < gps(&pts, &near, KAPPA).unwrap());
    }

    #[test]
    fn oks_exact_displaced_and_invisible() {
        use crate::synth::Keypoint;
        let mut gt: Vec<Keypoint> =
            (0..17).map(|i| Keypoint { x: i as f64, y: 2.0 * i as f64, visible: true }).collect();
        let pred: Vec<(f64, f64)> = gt.iter().map(|k| (k.x, k.y)).collect();
        assert_eq!(oks(&gt, &pred, 100.0).unwrap(), Some(1.0));

        // displace joint 4 by (3, 4): scalar hand computation
        let mut moved = pred.clone();
        moved[4] = (gt[4].x + 3.0, gt[4].y + 4.0);
        let k = body::KEYPOINT_FALLOFF[4];
        let want = (16.0 + (-25.0 / (2.0 * 100.0 * k * k)).exp()) / 17.0;
        let got = oks(&gt, &moved, 100.0).unwrap().unwrap();
        assert!((got - want).abs() < 1e-15);

        for g in &mut gt {
            g.visible = false;
        }
        assert_eq!(oks(&gt, &pred, 100.0).unwrap(), None);
    }

    #[test]
    fn ap_trivial_cases() {
        let one = ImageEval { sims: vec![vec![1.0]], scores: vec![0.9], gt_areas: vec![100.0] };
        let s = compute_ap_ar(&[one], SIZE_BOUNDARY).unwrap();
        assert_eq!(s.ap, 1.0);
        assert_eq!(s.ar, 1.0);
        assert_eq!(s.ap_m, Some(1.0));
        assert_eq!(s.ap_l, None);

        let none = ImageEval { sims: vec![], scores: vec![], gt_areas: vec![100.0] };
        let s = compute_ap_ar(&[none], SIZE_BOUNDARY).unwrap();
        assert_eq!(s.ap, 0.0);
        assert_eq!(s.ar, 0.0);
    }

    #[test]
    fn tied_similarities_take_the_lower_gt_index() {
        let img = ImageEval {
            sims: vec![vec![0.8, 0.8], vec![0.0, 0.8]],
            scores: vec![0.9, 0.5],
            gt_areas: vec![10.0, 10.0],
        };
        // pred 0 must take gt 0 (tie → lower index), leaving gt 1 for pred 1:
        // both TPs at t=0.5..=0.8 → perfect recall there.
        let s = compute_ap_ar(&[img], SIZE_BOUNDARY).unwrap();
        assert_eq!(s.ar_per_threshold[0], 1.0);
    }

    /// Reference evaluator: re-runs the greedy matching from scratch for
    /// every ranked prefix and reads the interpolated curve directly.
    fn oracle_ap_ar(images: &[ImageEval], t: f64, stratum: Option<(f64, f64)>) -> Option<(f64, f64)> {
        let included = |img: &ImageEval, g: usize| {
            stratum.map_or(true, |(lo, hi)| img.gt_areas[g] >= lo && img.gt_areas[g] < hi)
        };
        let n_gt: usize = images
            .iter()
            .map(|img| (0..img.gt_areas.len()).filter(|&g| included(img, g)).count())
            .sum();
        if n_gt == 0 {
            return None;
        }
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for (i, img) in images.iter().enumerate() {
            for p in 0..img.scores.len() {
                ranked.push((i, p));
            }
        }
        ranked.sort_by(|&(ia, pa), &(ib, pb)| {
            images[ib].scores[pb]
                .partial_cmp(&images[ia].scores[pa])
                .unwrap()
                .then(ia.cmp(&ib))
                .then(pa.cmp(&pb))
        });
        // Match a set of predictions (given per image in global rank order).
        let run = |k: usize| -> (usize, usize) {
            let mut tp = 0;
            let mut fp = 0;
            for (i, img) in images.iter().enumerate() {
                let mut taken = vec![false; img.gt_areas.len()];
                let preds: Vec<usize> =
                    ranked[..k].iter().filter(|&&(ri, _)| ri == i).map(|&(_, p)| p).collect();
                for &p in &preds {
                    let mut best_g = None;
                    let mut best_s = -1.0;
                    for g in 0..img.gt_areas.len() {
                        if !taken[g] && img.sims[p][g] >= t && img.sims[p][g] > best_s {
                            best_s = img.sims[p][g];
                            best_g = Some(g);
                        }
                    }
                    match best_g {
                        Some(g) => {
                            taken[g] = true;
                            if included(img, g) {
                                tp += 1;
                            }
                        }
                        None => fp += 1,
                    }
                }
            }
            (tp, fp)
        };
        let mut curve = Vec::new();
        for k in 1..=ranked.len() {
            let (tp, fp) = run(k);
            if tp + fp == 0 {
                continue; // prefix ends on an ignored prediction
            }
            curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
        let mut ap = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let mut best = 0.0;
            for &(rec, prec) in &curve {
                if rec >= level - 1e-12 && prec > best {
                    best = prec;
                }
            }
            ap += best;
        }
        let (tp_all, _) = run(ranked.len());
        Some((ap / 101.0, tp_all as f64 / n_gt as f64))
    }

    #[test]
    fn random_small_cases_match_the_reference_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..500 {
            let n_images = rng.gen_range(1..=3);
            let images: Vec<ImageEval> = (0..n_images)
                .map(|_| {
                    let n_pred = rng.gen_range(0..=5);
                    let n_gt = rng.gen_range(0..=5);
                    ImageEval {
                        sims: (0..n_pred)
                            .map(|_| {
                                (0..n_gt)
                                    .map(|_| {
                                        // quantize so similarity ties happen
                                        (rng.gen_range(0.0f64..1.0) * 8.0).round() / 8.0
                                    })
                                    .collect()
                            })
                            .collect(),
                        scores: (0..n_pred).map(|_| rng.gen_range(0.0..1.0)).collect(),
                        gt_areas: (0..n_gt).map(|_| rng.gen_range(10.0..20000.0)).collect(),
                    }
                })
                .collect();
            if images.iter().all(|i| i.gt_areas.is_empty()) {
                continue;
            }
            for t in thresholds() {
                let got = ap_ar_at(&images, t, None).unwrap();
                let want = oracle_ap_ar(&images, t, None).unwrap();
                assert!((got.0 - want.0).abs() < 1e-9, "case {case} t {t}: ap {} vs {}", got.0, want.0);
                assert!((got.1 - want.1).abs() < 1e-9, "case {case} t {t}: ar {} vs {}", got.1, want.1);
                for stratum in [Some((0.0, SIZE_BOUNDARY)), Some((SIZE_BOUNDARY, f64::INFINITY))] {
                    let got = ap_ar_at(&images, t, stratum);
                    let want = oracle_ap_ar(&images, t, stratum);
                    match (got, want) {
                        (None, None) => {}
                        (Some(g), Some(w)) => {
                            assert!((g.0 - w.0).abs() < 1e-9, "case {case} stratum ap");
                            assert!((g.1 - w.1).abs() < 1e-9, "case {case} stratum ar");
                        }
                        _ => panic!("case {case}: stratum presence disagrees"),
                    }
                }
            }
        }
    }

    #[test]
    fn per_category_perfect_offset_and_oracle() {
        // Points across several parts.
        let pts = vec![
            dense_point(0, 0, 1, 0.2, 0.3),  // torso_front → std part 1
            dense_point(1, 0, 2, 0.6, 0.1),  // torso_back → 1
            dense_point(2, 0, 23, 0.5, 0.5), // head_right → 0
            dense_point(3, 0, 3, 0.4, 0.9),  // hand_right → std 8? (hand)
        ];
        let m = exact_map(&pts, 8, 1);
        let rep = per_category_report(&[(&pts, Some(&m))]);
        for p in 0..body::STANDARD_PART_COUNT {
            if let Some(ar) = rep.ar[p] {
                assert_eq!(ar, 1.0);
                assert_eq!(rep.u_mse[p], Some(0.0));
                assert_eq!(rep.v_mse[p], Some(0.0));
                assert_eq!(rep.uv_gd[p], Some(0.0));
            } else {
                assert!(rep.u_mse[p].is_none());
                assert!(rep.uv_gd[p].is_none());
            }
        }

        // U offset by +0.1 with perfect classification → U-MSE 0.01.
        let mut off = m.clone();
        for u in &mut off.u {
            *u += 0.1;
        }
        let rep = per_category_report(&[(&pts, Some(&off))]);
        for p in 0..body::STANDARD_PART_COUNT {
            if let Some(mse) = rep.u_mse[p] {
                assert!((mse - 0.01).abs() < 1e-12, "part {p}: {mse}");
                assert_eq!(rep.v_mse[p], Some(0.0));
            }
        }

        // Undetected instance: AR 0, GD = cap.
        let rep = per_category_report(&[(&pts, None)]);
        assert_eq!(rep.ar[1], Some(0.0));
        assert_eq!(rep.uv_gd[1], Some(body::DISTANCE_CAP));
        assert!(rep.u_mse[1].is_none());

        // Random case against a scalar loop.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = Vec::new();
        let w = 32;
        for i in 0..200 {
            pts.push(dense_point(
                i % w,
                i / w,
                rng.gen_range(1..=24),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ));
        }
        let mut pred = PredMap::background(w, 8);
        for p in &pts {
            let i = p.y * w + p.x;
            pred.surface[i] = rng.gen_range(0..=24) as u8;
            pred.u[i] = rng.gen_range(0.0..1.0);
            pred.v[i] = rng.gen_range(0.0..1.0);
        }
        let rep = per_category_report(&[(&pts, Some(&pred))]);
        for std_part in 0..body::STANDARD_PART_COUNT {
            let sel: Vec<&DensePixel> =
                pts.iter().filter(|p| body::surface_standard(p.surface) == std_part).collect();
            if sel.is_empty() {
                assert!(rep.ar[std_part].is_none());
                continue;
            }
            let mut ok = 0.0;
            let mut exact = 0;
            let mut u_sq = 0.0;
            let mut gd = 0.0;
            for p in sel.iter() {
                let (s, u, v) = pred.at(p.x, p.y);
                if s == 0 {
                    gd += 1.0;
                    continue;
                }
                if body::surface_standard(s) == std_part {
                    ok += 1.0;
                }
                if s == p.surface {
                    exact += 1;
                    u_sq += (u - p.u) * (u - p.u);
                }
                gd += body::geodesic(s, u, v, p.surface, p.u, p.v);
            }
            assert!((rep.ar[std_part].unwrap() - ok / sel.len() as f64).abs() < 1e-12);
            assert!((rep.uv_gd[std_part].unwrap() - gd / sel.len() as f64).abs() < 1e-12);
            if exact > 0 {
                assert!((rep.u_mse[std_part].unwrap() - u_sq / exact as f64).abs() < 1e-12);
            } else {
                assert!(rep.u_mse[std_part].is_none());
            }
        }
    }

    #[test]
    fn substitution_no_flags_is_identity_and_all_flags_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = 16;
        let pts: Vec<DensePixel> = (0..40)
            .map(|i| {
                dense_point(
                    i % w,
                    i / w,
                    rng.gen_range(1..=24),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let mut pred = PredMap::background(w, 4);
        for p in &pts {
            let i = p.y * w + p.x;
            pred.surface[i] = rng.gen_range(0..=24) as u8;
            pred.u[i] = rng.gen_range(0.0..1.0);
            pred.v[i] = rng.gen_range(0.0..1.0);
        }
        let same = substitute(&pred, &pts, SubstituteFlags::default());
        assert_eq!(same, pred);
        let fixed = substitute(&pred, &pts, SubstituteFlags::all());
        assert_eq!(gps(&pts, &fixed, KAPPA), Some(1.0));
    }

    #[test]
    fn surface_substitution_never_worsens_any_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = 64;
        for _trial in 0..50 {
            let pts: Vec<DensePixel> = (0..w)
                .map(|i| {
                    dense_point(
                        i,
                        0,
                        rng.gen_range(1..=24),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let mut pred = PredMap::background(w, 1);
            for p in &pts {
                let i = p.y * w + p.x;
                pred.surface[i] = rng.gen_range(0..=24) as u8;
                pred.u[i] = rng.gen_range(0.0..1.0);
                pred.v[i] = rng.gen_range(0.0..1.0);
            }
            let flags = SubstituteFlags { use_gt_surface: true, ..Default::default() };
            let sub = substitute(&pred, &pts, flags);
            for p in &pts {
                let before = point_distance(pred.at(p.x, p.y), (p.surface, p.u, p.v));
                let after = point_distance(sub.at(p.x, p.y), (p.surface, p.u, p.v));
                assert!(
                    after <= before + 1e-12,
                    "point ({},{}): {before} -> {after}",
                    p.x,
                    p.y
                );
            }
            // and the chain: adding gt UV on top never lowers similarity
            let flags_uv = SubstituteFlags {
                use_gt_surface: true,
                use_gt_u: true,
                use_gt_v: true,
                ..Default::default()
            };
            let sub_uv = substitute(&pred, &pts, flags_uv);
            assert!(gps(&pts, &sub_uv, KAPPA) >= gps(&pts, &sub, KAPPA));
            assert!(gps(&pts, &sub, KAPPA) >= gps(&pts, &pred, KAPPA));
        }
    }

    #[test]
    fn report_serializes_to_json_and_csv() {
        let img = ImageEval { sims: vec![vec![1.0]], scores: vec![0.9], gt_areas: vec![100.0] };
        let summary = compute_ap_ar(&[img], SIZE_BOUNDARY).unwrap();
        let pts = vec![dense_point(0, 0, 1, 0.5, 0.5)];
        let m = exact_map(&pts, 2, 1);
        let rep = EvalReport::new(summary, per_category_report(&[(&pts, Some(&m))]));
        let json = rep.to_json();
        assert!(json.contains("\"ap\": 1.0"), "{json}");
        assert!(json.contains("\"ap_l\": null"));
        let csv = rep.category_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0].split(',').count(), 11);
        assert!(lines[1].starts_with("ar,"));
    }
}
