//! Differentiable loss primitives.
//!
//! All three losses reduce to a rank-0 tensor and share a convention for
//! sparse supervision: positions whose mask (or weight) sums to zero yield a
//! zero loss with a zero gradient rather than an error, so callers can feed
//! instances with no annotations through the same code path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn zero_loss(op: &'static str, inputs: &[&Tensor]) -> Result<Tensor> {
    let sizes: Vec<usize> = inputs.iter().map(|t| t.len()).collect();
    Tensor::from_op(op, inputs, Vec::new(), vec![0.0], move |_ctx| {
        Ok(sizes.iter().map(|&n| Some(vec![0.0; n])).collect())
    })
}

/// Pixel-wise cross entropy over the leading class axis.
///
/// `logits` is `[C, ...]` with one lane of `C` scores per remaining position.
/// `targets` gives the class index per position. `mask` (same position count)
/// weights each position's contribution; `None` means every position counts.
/// `class_weights` (length `C`) additionally weights positions by their target
/// class. The result is the weighted mean of `-log softmax(lane)[target]`.
pub fn cross_entropy_pixels(
    logits: &Tensor,
    targets: &[usize],
    mask: Option<&[f64]>,
    class_weights: Option<&[f64]>,
) -> Result<Tensor> {
    if logits.ndim() == 0 {
        return Err(Error::shape("cross_entropy", "logits must have a class axis"));
    }
    let c = logits.shape()[0];
    let p = logits.len() / c.max(1);
    if c == 0 {
        return Err(Error::shape("cross_entropy", "zero classes"));
    }
    if targets.len() != p {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets for {p} positions", targets.len()),
        ));
    }
    if let Some(m) = mask {
        if m.len() != p {
            return Err(Error::shape("cross_entropy", format!("mask has {} of {p} positions", m.len())));
        }
        if m.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::invalid("cross_entropy", "mask weights must be finite and >= 0"));
        }
    }
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::shape("cross_entropy", format!("{} class weights for {c} classes", w.len())));
        }
        if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::invalid("cross_entropy", "class weights must be finite and >= 0"));
        }
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::invalid("cross_entropy", format!("target {t} at position {i} exceeds {c} classes")));
        }
    }

    let weight_at = |pos: usize, class: usize| -> f64 {
        let m = mask.map_or(1.0, |m| m[pos]);
        let cw = class_weights.map_or(1.0, |w| w[class]);
        m * cw
    };
    let total_weight: f64 = targets.iter().enumerate().map(|(i, &t)| weight_at(i, t)).sum();
    if total_weight == 0.0 {
        return zero_loss("cross_entropy", &[logits]);
    }

    let x = logits.data();
    let mut loss = 0.0;
    for pos in 0..p {
        let wp = weight_at(pos, targets[pos]);
        if wp == 0.0 {
            continue;
        }
        let lane = |j: usize| x[j * p + pos];
        let mut max = f64::NEG_INFINITY;
        for j in 0..c {
            max = max.max(lane(j));
        }
        let lse = max + (0..c).map(|j| (lane(j) - max).exp()).sum::<f64>().ln();
        loss += wp * (lse - lane(targets[pos]));
    }
    drop(x);
    loss /= total_weight;

    let targets = targets.to_vec();
    let mask = mask.map(|m| m.to_vec());
    let class_weights = class_weights.map(|w| w.to_vec());
    Tensor::from_op("cross_entropy", &[logits], Vec::new(), vec![loss], move |ctx| {
        let g = ctx.grad[0];
        let x = ctx.inputs[0].data();
        let mut dx = vec![0.0; x.len()];
        for pos in 0..p {
            let t = targets[pos];
            let m = mask.as_ref().map_or(1.0, |m| m[pos]);
            let cw = class_weights.as_ref().map_or(1.0, |w| w[t]);
            let wp = m * cw;
            if wp == 0.0 {
                continue;
            }
            let lane = |j: usize| x[j * p + pos];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                max = max.max(lane(j));
            }
            let denom: f64 = (0..c).map(|j| (lane(j) - max).exp()).sum();
            let scale = g * wp / total_weight;
            for j in 0..c {
                let soft = (lane(j) - max).exp() / denom;
                dx[j * p + pos] = scale * (soft - if j == t { 1.0 } else { 0.0 });
            }
        }
        Ok(vec![Some(dx)])
    })
}

/// Smooth-L1 (Huber with unit transition) between same-shape tensors,
/// averaged over the masked positions.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, mask: Option<&[f64]>) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "smooth_l1",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.len();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape("smooth_l1", format!("mask has {} of {n} positions", m.len())));
        }
        if m.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::invalid("smooth_l1", "mask weights must be finite and >= 0"));
        }
    }
    let total_weight: f64 = mask.map_or(n as f64, |m| m.iter().sum());
    if total_weight == 0.0 {
        return zero_loss("smooth_l1", &[pred, target]);
    }

    let loss = {
        let a = pred.data();
        let b = target.data();
        let mut acc = 0.0;
        for i in 0..n {
            let w = mask.map_or(1.0, |m| m[i]);
            if w == 0.0 {
                continue;
            }
            let d = a[i] - b[i];
            acc += w * if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        acc / total_weight
    };

    let mask = mask.map(|m| m.to_vec());
    Tensor::from_op("smooth_l1", &[pred, target], Vec::new(), vec![loss], move |ctx| {
        let g = ctx.grad[0];
        let a = ctx.inputs[0].data();
        let b = ctx.inputs[1].data();
        let mut dpred = vec![0.0; n];
        for i in 0..n {
            let w = mask.as_ref().map_or(1.0, |m| m[i]);
            if w == 0.0 {
                continue;
            }
            let d = a[i] - b[i];
            let slope = if d.abs() < 1.0 { d } else { d.signum() };
            dpred[i] = g * w * slope / total_weight;
        }
        let dtarget = if ctx.inputs[1].requires_grad() {
            Some(dpred.iter().map(|v| -v).collect())
        } else {
            None
        };
        Ok(vec![Some(dpred), dtarget])
    })
}

/// Margin-based triplet loss over rows of a `[P,D]` feature matrix.
///
/// Rows are L2-normalized internally; for each `(anchor, positive, negative)`
/// index triple the hinge `max(0, d(a,p) - d(a,n) + margin)` is taken on the
/// normalized Euclidean distances, and the result is the mean over triples.
/// Degenerate geometry gets subgradient zero: all-identical features yield
/// exactly `margin` with no gradient.
pub fn triplet_margin(
    features: &Tensor,
    triplets: &[(usize, usize, usize)],
    margin: f64,
) -> Result<Tensor> {
    let &[rows, dim] = features.shape() else {
        return Err(Error::shape(
            "triplet_margin",
            format!("expected [P,D] features, got {:?}", features.shape()),
        ));
    };
    if !margin.is_finite() || margin < 0.0 {
        return Err(Error::invalid("triplet_margin", "margin must be finite and >= 0"));
    }
    for &(a, p, n) in triplets {
        if a >= rows || p >= rows || n >= rows {
            return Err(Error::invalid(
                "triplet_margin",
                format!("triplet ({a},{p},{n}) outside {rows} rows"),
            ));
        }
    }
    if triplets.is_empty() {
        return zero_loss("triplet_margin", &[features]);
    }

    const EPS: f64 = 1e-12;
    let normalize = move |x: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut unit = vec![0.0; rows * dim];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * dim..(r + 1) * dim];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm > EPS {
                for (u, v) in unit[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                    *u = v / norm;
                }
            }
        }
        (unit, norms)
    };
    let dist = move |unit: &[f64], i: usize, j: usize| -> f64 {
        unit[i * dim..(i + 1) * dim]
            .iter()
            .zip(&unit[j * dim..(j + 1) * dim])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };

    let loss = {
        let x = features.data();
        let (unit, _) = normalize(&x);
        triplets
            .iter()
            .map(|&(a, p, n)| (dist(&unit, a, p) - dist(&unit, a, n) + margin).max(0.0))
            .sum::<f64>()
            / triplets.len() as f64
    };

    let triplets = triplets.to_vec();
    Tensor::from_op("triplet_margin", &[features], Vec::new(), vec![loss], move |ctx| {
        let g = ctx.grad[0] / triplets.len() as f64;
        let x = ctx.inputs[0].data();
        let (unit, norms) = normalize(&x);
        // Accumulate d(loss)/d(unit rows), then push through the
        // normalization Jacobian (I - u u^T)/norm once per row.
        let mut dunit = vec![0.0; rows * dim];
        for &(a, p, n) in &triplets {
            let d_ap = dist(&unit, a, p);
            let d_an = dist(&unit, a, n);
            if d_ap - d_an + margin <= 0.0 {
                continue;
            }
            for k in 0..dim {
                let ua = unit[a * dim + k];
                let up = unit[p * dim + k];
                let un = unit[n * dim + k];
                if d_ap > EPS {
                    let u = (ua - up) / d_ap;
                    dunit[a * dim + k] += g * u;
                    dunit[p * dim + k] -= g * u;
                }
                if d_an > EPS {
                    let u = (ua - un) / d_an;
                    dunit[a * dim + k] -= g * u;
                    dunit[n * dim + k] += g * u;
                }
            }
        }
        let mut dx = vec![0.0; rows * dim];
        for r in 0..rows {
            if norms[r] <= EPS {
                continue;
            }
            let u = &unit[r * dim..(r + 1) * dim];
            let du = &dunit[r * dim..(r + 1) * dim];
            let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
            for k in 0..dim {
                dx[r * dim + k] = (du[k] - u[k] * dot) / norms[r];
            }
        }
        Ok(vec![Some(dx)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn uniform_logits_cost_ln_c() {
        // Equal logits over C classes: -log(1/C) = ln C regardless of target.
        let logits = Tensor::from_vec([4, 3], vec![0.5; 12]).unwrap();
        let loss = cross_entropy_pixels(&logits, &[0, 1, 3], None, None).unwrap();
        assert!((loss.item().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_costs_near_zero() {
        let logits = Tensor::from_vec([2, 2], vec![30.0, -30.0, -30.0, 30.0]).unwrap();
        let loss = cross_entropy_pixels(&logits, &[0, 1], None, None).unwrap();
        assert!(loss.item().unwrap() < 1e-10);
    }

    #[test]
    fn empty_mask_gives_zero_loss_and_gradient() {
        let tape = Tape::new();
        let logits = Tensor::param([3, 2], vec![0.3; 6]).unwrap();
        let loss = {
            let _rec = tape.recording();
            cross_entropy_pixels(&logits, &[0, 2], Some(&[0.0, 0.0][..]), None).unwrap()
        };
        assert_eq!(loss.item().unwrap(), 0.0);
        tape.backward(&loss).unwrap();
        assert!(logits.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mask_restricts_positions() {
        let logits = Tensor::from_vec([2, 2], vec![5.0, 0.0, -5.0, 0.0]).unwrap();
        // Only position 1 (uniform lane) counts: loss = ln 2.
        let loss = cross_entropy_pixels(&logits, &[0, 0], Some(&[0.0, 1.0][..]), None).unwrap();
        assert!((loss.item().unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_weights_follow_torch_convention() {
        // Weighted mean: sum(w_t * ce) / sum(w_t).
        let logits = Tensor::from_vec([2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let w = [1.0, 3.0];
        let loss = cross_entropy_pixels(&logits, &[0, 1], None, Some(&w[..])).unwrap();
        assert!((loss.item().unwrap() - 2.0f64.ln()).abs() < 1e-12);
        // Weighting is invisible when per-position costs are equal; make them differ.
        let logits = Tensor::from_vec([2, 2], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let ce0 = (1.0 + (-2.0f64).exp()).ln(); // target 0, logit gap 2
        let ce1 = 2.0f64.ln();
        let loss = cross_entropy_pixels(&logits, &[0, 1], None, Some(&w[..])).unwrap();
        assert!((loss.item().unwrap() - (1.0 * ce0 + 3.0 * ce1) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_quadratic_and_linear_regions() {
        let pred = Tensor::from_vec([2], vec![0.5, 3.0]).unwrap();
        let target = Tensor::from_vec([2], vec![0.0, 0.0]).unwrap();
        let loss = smooth_l1(&pred, &target, None).unwrap();
        // (0.5*0.25 + (3-0.5)) / 2
        assert!((loss.item().unwrap() - (0.125 + 2.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_features_hit_the_margin() {
        let f = Tensor::from_vec([3, 4], vec![0.7; 12]).unwrap();
        let loss = triplet_margin(&f, &[(0, 1, 2)], 0.5).unwrap();
        assert_eq!(loss.item().unwrap(), 0.5);
    }

    #[test]
    fn separated_features_cost_nothing() {
        // Anchor equals positive, negative is orthogonal: d_ap=0, d_an=sqrt(2).
        let f = Tensor::from_vec(
            [3, 2],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let loss = triplet_margin(&f, &[(0, 1, 2)], 0.5).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn triplet_is_scale_invariant() {
        let base = vec![1.0, 0.2, -0.3, 0.8, 0.1, -0.9];
        let f1 = Tensor::from_vec([3, 2], base.clone()).unwrap();
        let f2 = Tensor::from_vec([3, 2], base.iter().map(|v| v * 37.0).collect()).unwrap();
        let a = triplet_margin(&f1, &[(0, 1, 2)], 0.5).unwrap().item().unwrap();
        let b = triplet_margin(&f2, &[(0, 1, 2)], 0.5).unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
