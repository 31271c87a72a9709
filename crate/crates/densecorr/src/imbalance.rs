//! Long-tail countermeasures for the surface classifier: inverse-frequency
//! loss re-weighting, inverse-frequency point re-sampling, and an online
//! hard-example triplet loss over minor-category features. Each is a drop-in
//! strategy; when disabled the training pipeline is bit-for-bit unchanged.

use dctensor::Tensor;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};

/// Guard inside norms and square roots so gradients stay finite when a
/// feature vector (or a pair distance) degenerates to zero.
const NORM_EPSILON: f64 = 1e-12;

/// Per-class annotated-point counts with their derived inverse-frequency
/// weights and sampling probabilities. Built once from the training set.
#[derive(Debug, Clone)]
pub struct ClassStats {
    counts: Vec<usize>,
    weights: Vec<f64>,
    probabilities: Vec<f64>,
}

impl ClassStats {
    /// From per-class counts. At least one count must be positive.
    pub fn new(counts: Vec<usize>) -> Result<ClassStats> {
        if counts.is_empty() {
            return Err(Error::invalid("ClassStats", "no classes"));
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::invalid("ClassStats", "all class counts are zero"));
        }
        // Inverse-frequency weights, zero-count classes pinned to the
        // largest seen weight, then renormalized to mean 1.
        let max_raw =
            counts.iter().filter(|&&c| c > 0).map(|&c| 1.0 / c as f64).fold(0.0, f64::max);
        let mut weights: Vec<f64> =
            counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { max_raw }).collect();
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        for w in &mut weights {
            *w /= mean;
        }
        // Sampling probabilities over classes that actually have points.
        let mut probabilities: Vec<f64> =
            counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
        let total: f64 = probabilities.iter().sum();
        for p in &mut probabilities {
            *p /= total;
        }
        Ok(ClassStats { counts, weights, probabilities })
    }

    /// Tallies 0-based class labels.
    pub fn from_labels(n_classes: usize, labels: impl IntoIterator<Item = usize>) -> Result<ClassStats> {
        let mut counts = vec![0usize; n_classes];
        for l in labels {
            if l >= n_classes {
                return Err(Error::invalid("ClassStats", format!("label {l} out of range")));
            }
            counts[l] += 1;
        }
        ClassStats::new(counts)
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Mean-1 inverse-frequency loss weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Sum-1 inverse-frequency sampling probabilities (zero for empty classes).
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// The bottom half of classes by count (ties broken toward the lower
    /// class id), i.e. the "minor" categories mined by the triplet loss.
    pub fn minor_classes(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        order.sort_by_key(|&c| (self.counts[c], c));
        order.truncate(self.counts.len() / 2);
        order.sort_unstable();
        order
    }
}

/// Inverse-frequency point sampler: classes are drawn with probability
/// proportional to `1/count`, then a point uniformly within the class.
#[derive(Debug, Clone)]
pub struct Resampler {
    by_class: Vec<Vec<usize>>,
    class_ids: Vec<usize>,
    class_probs: Vec<f64>,
}

impl Resampler {
    /// `labels[i]` is the class of candidate point `i`. Classes absent from
    /// the batch are skipped and the remaining probabilities renormalized.
    pub fn new(stats: &ClassStats, labels: &[usize]) -> Result<Resampler> {
        if labels.is_empty() {
            return Err(Error::invalid("Resampler", "no candidate points"));
        }
        let mut by_class = vec![Vec::new(); stats.class_count()];
        for (i, &l) in labels.iter().enumerate() {
            if l >= stats.class_count() {
                return Err(Error::invalid("Resampler", format!("label {l} out of range")));
            }
            by_class[l].push(i);
        }
        let class_ids: Vec<usize> =
            (0..stats.class_count()).filter(|&c| !by_class[c].is_empty()).collect();
        let class_probs: Vec<f64> = class_ids.iter().map(|&c| stats.probabilities()[c]).collect();
        if class_probs.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid(
                "Resampler",
                "candidate points all belong to classes with zero training count",
            ));
        }
        Ok(Resampler { by_class, class_ids, class_probs })
    }

    /// Draws `n` point indices (with replacement).
    pub fn draw(&self, rng: &mut impl Rng, n: usize) -> Vec<usize> {
        let dist = WeightedIndex::new(&self.class_probs).expect("validated positive weights");
        (0..n)
            .map(|_| {
                let class = self.class_ids[dist.sample(rng)];
                let members = &self.by_class[class];
                members[rng.gen_range(0..members.len())]
            })
            .collect()
    }
}

/// An anchor's mined pair: hardest positive (same class, farthest) and
/// hardest negative (other class, nearest) by feature distance.
struct MinedTriplet {
    anchor: usize,
    positive: usize,
    negative: usize,
}

/// Pairwise Euclidean distances between L2-normalized rows of an `[n, d]`
/// matrix, computed in plain scalars for pair mining.
fn normalized_distances(rows: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut norms = vec![0.0; n];
    for (i, nm) in norms.iter_mut().enumerate() {
        *nm = (rows[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>() + NORM_EPSILON).sqrt();
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 =
                (0..d).map(|k| rows[i * d + k] * rows[j * d + k]).sum::<f64>() / (norms[i] * norms[j]);
            let dd = (2.0 - 2.0 * dot + NORM_EPSILON).max(NORM_EPSILON).sqrt();
            dist[i * n + j] = dd;
            dist[j * n + i] = dd;
        }
    }
    dist
}

/// Online hard-example triplet loss over the batch's minor-category points.
///
/// `features` is `[n, d]` (one row per annotated point), `labels[i]` its
/// 0-based class. Every point of a minor class (bottom half by training
/// count) anchors one triplet: the farthest same-class point and the nearest
/// other-class point, on L2-normalized features. Returns the mean hinge
/// `max(0, d(a,p) − d(a,n) + margin)`, or a constant zero when no anchor has
/// both a positive and a negative.
pub fn ohem_triplet(
    features: &Tensor,
    labels: &[usize],
    stats: &ClassStats,
    margin: f64,
) -> Result<Tensor> {
    let shape = features.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid("ohem_triplet", "features must be [points, dims]"));
    }
    let (n, d) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::invalid(
            "ohem_triplet",
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::invalid("ohem_triplet", "margin must be finite and nonnegative"));
    }
    let minor = stats.minor_classes();

    let dist = normalized_distances(&features.data(), n, d);
    let mut triplets = Vec::new();
    for a in 0..n {
        if !minor.contains(&labels[a]) {
            continue;
        }
        let mut positive: Option<usize> = None; // farthest same-class
        let mut negative: Option<usize> = None; // nearest other-class
        for b in 0..n {
            if b == a {
                continue;
            }
            let dd = dist[a * n + b];
            if labels[b] == labels[a] {
                if positive.map_or(true, |p| dd > dist[a * n + p]) {
                    positive = Some(b);
                }
            } else if negative.map_or(true, |q| dd < dist[a * n + q]) {
                negative = Some(b);
            }
        }
        if let (Some(positive), Some(negative)) = (positive, negative) {
            triplets.push(MinedTriplet { anchor: a, positive, negative });
        }
    }
    if triplets.is_empty() {
        return Ok(Tensor::full([1], 0.0));
    }

    // Differentiable route: recompute the mined pairs' distances with
    // tensor ops so gradients reach the feature rows.
    let norm2 = |i: usize| -> Result<Tensor> {
        let row = features.select_axis0(i)?;
        Ok(row.mul(&row)?.sum()?.reshape([1])?.add(&Tensor::full([1], NORM_EPSILON))?)
    };
    let pair_distance = |i: usize, j: usize| -> Result<Tensor> {
        let dot =
            features.select_axis0(i)?.mul(&features.select_axis0(j)?)?.sum()?.reshape([1])?;
        let cos = dot.mul(&norm2(i)?.mul(&norm2(j)?)?.sqrt()?.recip()?)?;
        Ok(cos.scale(-2.0)?.add(&Tensor::full([1], 2.0 + NORM_EPSILON))?.sqrt()?)
    };
    let mut terms = Vec::with_capacity(triplets.len());
    for t in &triplets {
        let d_ap = pair_distance(t.anchor, t.positive)?;
        let d_an = pair_distance(t.anchor, t.negative)?;
        terms.push(d_ap.sub(&d_an)?.add(&Tensor::full([1], margin))?.relu()?);
    }
    let refs: Vec<&Tensor> = terms.iter().collect();
    Ok(Tensor::concat(&refs, 0)?.mean()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dctensor::{optim::Sgd, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_counts_give_unit_weights_and_uniform_probabilities() {
        let s = ClassStats::new(vec![40, 40, 40, 40]).unwrap();
        assert_eq!(s.weights(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(s.probabilities(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn two_class_weights_match_the_closed_form() {
        let s = ClassStats::new(vec![100, 50]).unwrap();
        // raw (1/100, 1/50) ∝ (1, 2); mean-1 normalization → (2/3, 4/3)
        assert!((s.weights()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.weights()[1] - 4.0 / 3.0).abs() < 1e-15);
        let mean = s.weights().iter().sum::<f64>() / 2.0;
        assert!((mean - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_count_class_gets_the_max_weight() {
        let s = ClassStats::new(vec![10, 40, 0]).unwrap();
        let w = s.weights();
        assert_eq!(w[2], w[0]);
        assert!(w[0] > w[1]);
        assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-15);
        // zero-count classes cannot be sampled
        assert_eq!(s.probabilities()[2], 0.0);
        assert!((s.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_counts_are_rejected() {
        let err = ClassStats::new(vec![0, 0]).unwrap_err().to_string();
        assert!(err.contains("all class counts are zero"), "{err}");
    }

    #[test]
    fn minor_classes_are_the_bottom_half_by_count() {
        let s = ClassStats::new(vec![50, 10, 30, 10, 90, 20]).unwrap();
        // sorted by (count, id): 1(10), 3(10), 5(20), 2(30), 0(50), 4(90)
        assert_eq!(s.minor_classes(), vec![1, 3, 5]);
        let two = ClassStats::new(vec![900, 100]).unwrap();
        assert_eq!(two.minor_classes(), vec![1]);
    }

    #[test]
    fn resampler_hits_the_analytic_frequency() {
        let stats = ClassStats::new(vec![900, 100]).unwrap();
        let mut labels = vec![0usize; 900];
        labels.extend(std::iter::repeat(1).take(100));
        let sampler = Resampler::new(&stats, &labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = sampler.draw(&mut rng, 100_000);
        let minor = draws.iter().filter(|&&i| labels[i] == 1).count() as f64 / 100_000.0;
        assert!((minor - 0.9).abs() < 0.03, "minor frequency {minor}");
    }

    #[test]
    fn resampler_is_deterministic_under_a_seed() {
        let stats = ClassStats::new(vec![10, 20, 5]).unwrap();
        let labels: Vec<usize> = (0..35).map(|i| if i < 10 { 0 } else if i < 30 { 1 } else { 2 }).collect();
        let sampler = Resampler::new(&stats, &labels).unwrap();
        let a = sampler.draw(&mut ChaCha8Rng::seed_from_u64(42), 500);
        let b = sampler.draw(&mut ChaCha8Rng::seed_from_u64(42), 500);
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_stats_sample_points_uniformly() {
        let stats = ClassStats::new(vec![50, 50]).unwrap();
        let labels: Vec<usize> = (0..100).map(|i| i / 50).collect();
        let sampler = Resampler::new(&stats, &labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = sampler.draw(&mut rng, 100_000);
        let first = draws.iter().filter(|&&i| labels[i] == 0).count() as f64 / 100_000.0;
        assert!((first - 0.5).abs() < 0.03, "class-0 frequency {first}");
    }

    fn feature_tensor(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::param(vec![rows.len(), d], flat).unwrap()
    }

    #[test]
    fn separated_clusters_cost_nothing() {
        // class 1 is minor; clusters point in opposite directions.
        let stats = ClassStats::new(vec![4, 2]).unwrap();
        let rows = vec![
            vec![1.0, 0.01],
            vec![1.0, -0.02],
            vec![0.99, 0.0],
            vec![1.0, 0.03],
            vec![-1.0, 0.01],
            vec![-1.0, -0.01],
        ];
        let labels = [0, 0, 0, 0, 1, 1];
        let f = feature_tensor(&rows);
        let loss = ohem_triplet(&f, &labels, &stats, 0.5).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn collapsed_features_cost_the_margin() {
        let stats = ClassStats::new(vec![3, 2]).unwrap();
        let rows = vec![vec![0.4, -0.3, 0.2]; 5];
        let labels = [0, 0, 0, 1, 1];
        let f = feature_tensor(&rows);
        let loss = ohem_triplet(&f, &labels, &stats, 0.5).unwrap();
        assert!((loss.item().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_minor_points_cost_nothing() {
        let stats = ClassStats::new(vec![10, 2]).unwrap(); // minor = {1}
        let rows = vec![vec![0.3, 0.1], vec![-0.2, 0.5], vec![0.9, 0.9]];
        let labels = [0, 0, 0];
        let f = feature_tensor(&rows);
        let loss = ohem_triplet(&f, &labels, &stats, 0.5).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn random_batch_matches_a_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for case in 0..30 {
            let n = rng.gen_range(4..12);
            let d = rng.gen_range(2..6);
            let n_classes = rng.gen_range(2..5);
            let counts: Vec<usize> = (0..n_classes).map(|_| rng.gen_range(1..100)).collect();
            let stats = ClassStats::new(counts).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
            let rows: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let f = feature_tensor(&rows);
            let margin = 0.5;
            let got = ohem_triplet(&f, &labels, &stats, margin).unwrap().item().unwrap();

            // Oracle: plain-f64 normalization, exhaustive hardest pairs.
            let normed: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let nm = (r.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
                    r.iter().map(|v| v / nm).collect()
                })
                .collect();
            let dist = |a: &Vec<f64>, b: &Vec<f64>| -> f64 {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
            };
            let minor = stats.minor_classes();
            let mut terms = Vec::new();
            for a in 0..n {
                if !minor.contains(&labels[a]) {
                    continue;
                }
                let mut dp: Option<f64> = None;
                let mut dn: Option<f64> = None;
                for b in 0..n {
                    if b == a {
                        continue;
                    }
                    let dd = dist(&normed[a], &normed[b]);
                    if labels[b] == labels[a] {
                        dp = Some(dp.map_or(dd, |v: f64| v.max(dd)));
                    } else {
                        dn = Some(dn.map_or(dd, |v: f64| v.min(dd)));
                    }
                }
                if let (Some(dp), Some(dn)) = (dp, dn) {
                    terms.push((dp - dn + margin).max(0.0));
                }
            }
            let want = if terms.is_empty() {
                0.0
            } else {
                terms.iter().sum::<f64>() / terms.len() as f64
            };
            assert!(
                (got - want).abs() < 1e-7,
                "case {case}: {got} vs oracle {want} (n={n} d={d})"
            );
        }
    }

    #[test]
    fn triplet_gradients_pull_minor_clusters_apart() {
        // Two overlapping classes; a few SGD steps on the triplet loss alone
        // must reduce it.
        let stats = ClassStats::new(vec![6, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> =
            (0..9).map(|_| (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
        let labels = [0, 0, 0, 0, 0, 0, 1, 1, 1];
        let f = feature_tensor(&rows);
        let tape = Tape::new();
        let first = {
            let _rec = tape.recording();
            ohem_triplet(&f, &labels, &stats, 0.5).unwrap()
        };
        let start = first.item().unwrap();
        assert!(start > 0.0, "overlapping clusters should incur loss");
        let mut opt = Sgd::new(0.0);
        tape.backward(&first).unwrap();
        opt.step(&[f.clone()], 0.1).unwrap();
        for _ in 0..20 {
            f.zero_grad();
            let tape = Tape::new();
            let loss = {
                let _rec = tape.recording();
                ohem_triplet(&f, &labels, &stats, 0.5).unwrap()
            };
            tape.backward(&loss).unwrap();
            opt.step(&[f.clone()], 0.1).unwrap();
        }
        let end = ohem_triplet(&f, &labels, &stats, 0.5).unwrap().item().unwrap();
        assert!(end < start, "loss {start} -> {end}");
    }
}
