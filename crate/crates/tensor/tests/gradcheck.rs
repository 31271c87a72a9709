//! Central finite-difference checks for every differentiable operator.
//!
//! The analytic gradient from one backward pass is compared against
//! (f(x+h) - f(x-h)) / 2h elementwise with h = 1e-5. Test points are sampled
//! away from the kinks of relu/leaky-relu/smooth-l1/hinge so the numeric
//! derivative is well defined.

use dctensor::{losses, Conv2d, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-8;

/// Compare analytic and numeric gradients of `build` (a scalar-valued
/// function of `params`) for every element of every parameter.
fn gradcheck(label: &str, params: &[&Tensor], build: &dyn Fn() -> Tensor) {
    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = {
        let _rec = tape.recording();
        build()
    };
    assert_eq!(loss.len(), 1, "{label}: loss must be scalar");
    tape.backward(&loss).expect(label);

    for (pi, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut bumped = base.clone();
            bumped[i] += H;
            p.set_data(&bumped).unwrap();
            let up = build().item().unwrap();
            bumped[i] = base[i] - H;
            p.set_data(&bumped).unwrap();
            let down = build().item().unwrap();
            p.set_data(&base).unwrap();
            let numeric = (up - down) / (2.0 * H);
            let got = analytic[i];
            let tol = ATOL + RTOL * got.abs().max(numeric.abs());
            assert!(
                (got - numeric).abs() <= tol,
                "{label}: param {pi} element {i}: analytic {got} vs numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Values bounded away from zero, for operators with a kink at the origin.
fn rand_vec_off_origin(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape.to_vec(), rand_vec(rng, n)).unwrap()
}

/// Random constant cotangent so every output element is probed with a
/// distinct weight (plain `.sum()` would hide sign errors that cancel).
fn project(t: &Tensor, r: &Tensor) -> Tensor {
    t.mul(r).unwrap().sum().unwrap()
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = rng();
    for shape in [vec![7], vec![2, 3], vec![2, 2, 3]] {
        let a = param(&mut rng, &shape);
        let b = param(&mut rng, &shape);
        let r = Tensor::from_vec(shape.clone(), rand_vec(&mut rng, a.len())).unwrap();
        gradcheck("add", &[&a, &b], &|| project(&a.add(&b).unwrap(), &r));
        gradcheck("sub", &[&a, &b], &|| project(&a.sub(&b).unwrap(), &r));
        gradcheck("mul", &[&a, &b], &|| project(&a.mul(&b).unwrap(), &r));
        gradcheck("scale", &[&a], &|| project(&a.scale(-1.7).unwrap(), &r));
        gradcheck("sum", &[&a], &|| a.sum().unwrap());
        gradcheck("mean", &[&a], &|| a.mean().unwrap());
    }
}

#[test]
fn activations() {
    let mut rng = rng();
    for shape in [vec![6], vec![3, 4], vec![2, 3, 2]] {
        let n: usize = shape.iter().product();
        let x = Tensor::param(shape.clone(), rand_vec_off_origin(&mut rng, n)).unwrap();
        let r = Tensor::from_vec(shape.clone(), rand_vec(&mut rng, n)).unwrap();
        gradcheck("relu", &[&x], &|| project(&x.relu().unwrap(), &r));
        gradcheck("leaky_relu", &[&x], &|| project(&x.leaky_relu(0.2).unwrap(), &r));
        gradcheck("sigmoid", &[&x], &|| project(&x.sigmoid().unwrap(), &r));
        gradcheck("recip", &[&x], &|| project(&x.recip().unwrap(), &r));
        let pos: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
        let xp = Tensor::param(shape.clone(), pos).unwrap();
        gradcheck("sqrt", &[&xp], &|| project(&xp.sqrt().unwrap(), &r));
        for axis in 0..shape.len() {
            gradcheck("softmax", &[&x], &|| project(&x.softmax(axis).unwrap(), &r));
        }
    }
    for shape in [vec![2, 5], vec![3, 2, 4], vec![1, 6, 2]] {
        let n: usize = shape.iter().product();
        let x = Tensor::param(shape.clone(), rand_vec(&mut rng, n)).unwrap();
        let r = Tensor::from_vec(shape.clone(), rand_vec(&mut rng, n)).unwrap();
        gradcheck("channel_norm", &[&x], &|| project(&x.channel_norm(1e-3).unwrap(), &r));
    }
}

#[test]
fn matmul_and_reshape() {
    let mut rng = rng();
    for (m, k, n) in [(2, 3, 4), (1, 5, 2), (4, 2, 3)] {
        let a = param(&mut rng, &[m, k]);
        let b = param(&mut rng, &[k, n]);
        let r = Tensor::from_vec([m, n], rand_vec(&mut rng, m * n)).unwrap();
        gradcheck("matmul", &[&a, &b], &|| project(&a.matmul(&b).unwrap(), &r));
        gradcheck("reshape", &[&a], &|| {
            let flat = a.reshape([k * m]).unwrap();
            let rr = Tensor::full([k * m], 0.7);
            project(&flat, &rr)
        });
    }
}

#[test]
fn concat_and_select() {
    let mut rng = rng();
    for axis in 0..3 {
        let mut sa = vec![2, 3, 2];
        let mut sb = vec![2, 3, 2];
        sa[axis] = 1;
        sb[axis] = 2;
        let a = param(&mut rng, &sa);
        let b = param(&mut rng, &sb);
        let mut so = vec![2, 3, 2];
        so[axis] = 3;
        let n: usize = so.iter().product();
        let r = Tensor::from_vec(so, rand_vec(&mut rng, n)).unwrap();
        gradcheck("concat", &[&a, &b], &|| project(&Tensor::concat(&[&a, &b], axis).unwrap(), &r));
    }
    let x = param(&mut rng, &[3, 2, 2]);
    let r = Tensor::from_vec([2, 2], rand_vec(&mut rng, 4)).unwrap();
    gradcheck("select_axis0", &[&x], &|| project(&x.select_axis0(1).unwrap(), &r));
}

#[test]
fn spatial_ops() {
    let mut rng = rng();
    let x = param(&mut rng, &[3, 4, 5]);
    let gate = param(&mut rng, &[4, 5]);
    let r = Tensor::from_vec([3, 4, 5], rand_vec(&mut rng, 60)).unwrap();
    gradcheck("mul_gate", &[&x, &gate], &|| project(&x.mul_gate(&gate).unwrap(), &r));

    let rc = Tensor::from_vec([3], rand_vec(&mut rng, 3)).unwrap();
    gradcheck("mean_spatial", &[&x], &|| project(&x.mean_spatial().unwrap(), &rc));

    let pts = [(0usize, 1usize, 2usize), (2, 3, 4), (0, 1, 2), (1, 0, 0)];
    let rp = Tensor::from_vec([4], rand_vec(&mut rng, 4)).unwrap();
    gradcheck("gather_points", &[&x], &|| project(&x.gather_points(&pts).unwrap(), &rp));

    for pad in [1usize, 2] {
        let rpad =
            Tensor::from_vec([3, 4 + 2 * pad, 5 + 2 * pad], rand_vec(&mut rng, 3 * (4 + 2 * pad) * (5 + 2 * pad)))
                .unwrap();
        gradcheck("pad_reflect", &[&x], &|| project(&x.pad_reflect(pad).unwrap(), &rpad));
    }

    let ru = Tensor::from_vec([3, 8, 10], rand_vec(&mut rng, 240)).unwrap();
    gradcheck("upsample_nearest", &[&x], &|| project(&x.upsample_nearest(2).unwrap(), &ru));
}

#[test]
fn conv2d_all_hyperparameters() {
    let mut rng = rng();
    let cases = [
        (1, 5, 5, 2, 3, Conv2d::default()),
        (2, 6, 5, 3, 3, Conv2d::padded(1)),
        (2, 7, 7, 2, 3, Conv2d::stride(2)),
        (3, 6, 6, 2, 3, Conv2d { stride: 2, padding: 1, dilation: 1 }),
        (2, 7, 7, 2, 2, Conv2d::dilated(2, 1)),
        (1, 9, 9, 2, 3, Conv2d::dilated(3, 3)),
    ];
    for (cin, h, w, k, ksz, cfg) in cases {
        let x = param(&mut rng, &[cin, h, w]);
        let wt = param(&mut rng, &[k, cin, ksz, ksz]);
        let b = param(&mut rng, &[k]);
        let probe = x.conv2d(&wt, Some(&b), cfg).unwrap();
        let r = Tensor::from_vec(probe.shape().to_vec(), rand_vec(&mut rng, probe.len())).unwrap();
        gradcheck("conv2d", &[&x, &wt, &b], &|| project(&x.conv2d(&wt, Some(&b), cfg).unwrap(), &r));
    }
    // Batched input.
    let x = param(&mut rng, &[2, 2, 4, 4]);
    let wt = param(&mut rng, &[3, 2, 3, 3]);
    let cfg = Conv2d::padded(1);
    let probe = x.conv2d(&wt, None, cfg).unwrap();
    let r = Tensor::from_vec(probe.shape().to_vec(), rand_vec(&mut rng, probe.len())).unwrap();
    gradcheck("conv2d_batched", &[&x, &wt], &|| project(&x.conv2d(&wt, None, cfg).unwrap(), &r));
}

#[test]
fn loss_gradients() {
    let mut rng = rng();

    for (c, p) in [(3, 4), (5, 2), (2, 9)] {
        let logits = param(&mut rng, &[c, p]);
        let targets: Vec<usize> = (0..p).map(|_| rng.gen_range(0..c)).collect();
        let t = targets.clone();
        gradcheck("cross_entropy", &[&logits], &|| {
            losses::cross_entropy_pixels(&logits, &t, None, None).unwrap()
        });
        let mask: Vec<f64> = (0..p).map(|_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 }).collect();
        let weights: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
        if mask.iter().sum::<f64>() > 0.0 {
            let (t, m, w) = (targets.clone(), mask.clone(), weights.clone());
            gradcheck("cross_entropy_masked_weighted", &[&logits], &|| {
                losses::cross_entropy_pixels(&logits, &t, Some(&m[..]), Some(&w[..])).unwrap()
            });
        }
    }

    // Differences kept away from the |d| = 1 kink: targets are far offsets.
    let pred = Tensor::param([6], vec![0.3, -0.2, 0.5, 1.9, -1.4, 0.1]).unwrap();
    let target = Tensor::from_vec([6], vec![0.0, 0.2, 0.1, -0.6, 1.0, 0.0]).unwrap();
    gradcheck("smooth_l1", &[&pred], &|| losses::smooth_l1(&pred, &target, None).unwrap());
    let mask = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
    gradcheck("smooth_l1_masked", &[&pred], &|| {
        losses::smooth_l1(&pred, &target, Some(&mask[..])).unwrap()
    });

    // Triplet away from its hinge boundary and from coincident points.
    let feats = Tensor::param(
        [4, 3],
        vec![1.0, 0.2, -0.1, 0.9, 0.3, 0.0, -0.4, 1.1, 0.5, 0.2, -0.8, 0.9],
    )
    .unwrap();
    let trips = [(0usize, 1usize, 2usize), (1, 0, 3)];
    gradcheck("triplet_margin", &[&feats], &|| {
        losses::triplet_margin(&feats, &trips, 0.5).unwrap()
    });
}
