//! Lossless fold/unfold between resolution and channels.
//!
//! `fa` halves resolution by moving the four pixel-parity sub-grids into
//! channel blocks — a pure permutation, so no information is lost, unlike
//! strided pooling. `ifa` doubles resolution by predicting one feature map per
//! parity sub-grid with a convolution and scattering the four maps back.
//! The sub-grid order is frozen here once for both directions:
//! block 0 = (even row, even col), 1 = (even, odd), 2 = (odd, even),
//! 3 = (odd, odd).

use dctensor::{Conv2d, Tensor};

use crate::error::{Error, Result};

/// Row/col offsets of the four parity sub-grids, in frozen block order.
pub const PARITY_OFFSETS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// Applies the permutation `out[o] = in[perm[o]]` as a differentiable op.
fn permute(op: &'static str, t: &Tensor, shape: Vec<usize>, perm: Vec<usize>) -> Result<Tensor> {
    let data = {
        let src = t.data();
        perm.iter().map(|&i| src[i]).collect()
    };
    let n_in = t.len();
    Tensor::from_op(op, &[t], shape, data, move |ctx| {
        let mut grad = vec![0.0; n_in];
        for (o, &i) in perm.iter().enumerate() {
            grad[i] += ctx.grad[o];
        }
        Ok(vec![Some(grad)])
    })
    .map_err(Error::from)
}

/// Folds `[C,H,W]` (even `H`, `W`) into `[4C,H/2,W/2]`: channel block `k`
/// holds parity sub-grid `k`. Pure permutation; differentiable.
pub fn fa(t: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::invalid("fa", format!("expected [C,H,W], got {:?}", t.shape())));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("fa", format!("spatial extents must be even, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut perm = Vec::with_capacity(c * h * w);
    for (k, &(dr, dc)) in PARITY_OFFSETS.iter().enumerate() {
        let _ = k;
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    perm.push(ch * h * w + (2 * i + dr) * w + (2 * j + dc));
                }
            }
        }
    }
    permute("fa", t, vec![4 * c, oh, ow], perm)
}

/// Exact inverse of [`fa`]: unfolds `[4C,H,W]` into `[C,2H,2W]` by scattering
/// channel block `k` onto parity sub-grid `k`.
pub fn fa_inverse(t: &Tensor) -> Result<Tensor> {
    let &[c4, h, w] = t.shape() else {
        return Err(Error::invalid("fa_inverse", format!("expected [4C,H,W], got {:?}", t.shape())));
    };
    if c4 % 4 != 0 {
        return Err(Error::invalid("fa_inverse", format!("leading extent {c4} not divisible by 4")));
    }
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    // out[ch, 2i+dr, 2j+dc] = in[k·C+ch, i, j]  ⇒  build perm indexed by output.
    let mut perm = vec![0usize; c4 * h * w];
    for (k, &(dr, dc)) in PARITY_OFFSETS.iter().enumerate() {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let out_idx = ch * oh * ow + (2 * i + dr) * ow + (2 * j + dc);
                    perm[out_idx] = (k * c + ch) * h * w + i * w + j;
                }
            }
        }
    }
    permute("fa_inverse", t, vec![c, oh, ow], perm)
}

/// One of the four upsampling branches: a 3×3, padding-1 convolution.
pub struct IfaBranch {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl IfaBranch {
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        Ok(t.conv2d(&self.weight, self.bias.as_ref(), Conv2d::padded(1))?)
    }
}

/// Doubles resolution: each branch predicts the feature map for one parity
/// sub-grid of the `2H×2W` output, and the four maps are scattered per the
/// frozen block order. `[C,H,W] → [C',2H,2W]` where `C'` is the shared branch
/// output channel count.
pub fn ifa(t: &Tensor, branches: &[IfaBranch]) -> Result<Tensor> {
    if branches.len() != 4 {
        return Err(Error::invalid("ifa", format!("need 4 branches, got {}", branches.len())));
    }
    let outs: Vec<Tensor> = branches.iter().map(|b| b.apply(t)).collect::<Result<_>>()?;
    let shape0 = outs[0].shape().to_vec();
    for (k, o) in outs.iter().enumerate() {
        if o.shape() != shape0 {
            return Err(Error::invalid(
                "ifa",
                format!("branch {k} output {:?} disagrees with branch 0 {:?}", o.shape(), shape0),
            ));
        }
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    fa_inverse(&Tensor::concat(&refs, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn two_by_two_lists_parities_in_block_order() {
        let t = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = fa(&t).unwrap();
        assert_eq!(f.shape(), &[4, 1, 1]);
        // (ee, eo, oe, oo) of [[1,2],[3,4]]
        assert_eq!(f.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let back = fa_inverse(&f).unwrap();
        assert_eq!(back.shape(), &[1, 2, 2]);
        assert_eq!(back.to_vec(), t.to_vec());
    }

    #[test]
    fn shapes_fold_and_unfold() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = tensor(&[4, 8, 6], &mut rng);
        let f = fa(&t).unwrap();
        assert_eq!(f.shape(), &[16, 4, 3]);
        assert_eq!(fa_inverse(&f).unwrap().shape(), &[4, 8, 6]);
    }

    #[test]
    fn fa_is_pure_permutation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = tensor(&[3, 6, 6], &mut rng);
        let mut input = t.to_vec();
        let mut output = fa(&t).unwrap().to_vec();
        input.sort_by(f64::total_cmp);
        output.sort_by(f64::total_cmp);
        assert_eq!(input, output);
    }

    #[test]
    fn round_trip_is_bitwise_for_a_thousand_tensors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let c = rng.gen_range(1..4);
            let h = 2 * rng.gen_range(1..5);
            let w = 2 * rng.gen_range(1..5);
            let t = tensor(&[c, h, w], &mut rng);
            let back = fa_inverse(&fa(&t).unwrap()).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert_eq!(back.to_vec(), t.to_vec());
        }
    }

    proptest! {
        #[test]
        fn round_trip_property(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = tensor(&[c, 2 * h, 2 * w], &mut rng);
            let back = fa_inverse(&fa(&t).unwrap()).unwrap();
            prop_assert_eq!(back.to_vec(), t.to_vec());
        }
    }

    #[test]
    fn odd_extents_rejected() {
        let t = Tensor::zeros(vec![1, 3, 4]);
        assert!(fa(&t).is_err());
        let t = Tensor::zeros(vec![3, 2, 2]);
        assert!(fa_inverse(&t).is_err());
    }

    fn identity_branch(c: usize) -> IfaBranch {
        // 3×3 kernel with a centred 1 on the matching channel.
        let mut w = vec![0.0; c * c * 9];
        for ch in 0..c {
            w[ch * c * 9 + ch * 9 + 4] = 1.0;
        }
        IfaBranch { weight: Tensor::from_vec(vec![c, c, 3, 3], w).unwrap(), bias: None }
    }

    fn zero_branch(c: usize) -> IfaBranch {
        IfaBranch { weight: Tensor::zeros(vec![c, c, 3, 3]), bias: None }
    }

    #[test]
    fn identity_branches_preserve_constants() {
        let t = Tensor::full(vec![2, 4, 4], 1.5);
        let branches: Vec<IfaBranch> = (0..4).map(|_| identity_branch(2)).collect();
        let out = ifa(&t, &branches).unwrap();
        assert_eq!(out.shape(), &[2, 8, 8]);
        assert!(out.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn single_live_branch_hits_exactly_its_parity_subgrid() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = tensor(&[2, 4, 4], &mut rng);
        for live in 0..4 {
            let branches: Vec<IfaBranch> =
                (0..4).map(|k| if k == live { identity_branch(2) } else { zero_branch(2) }).collect();
            let out = ifa(&t, &branches).unwrap();
            let (dr, dc) = PARITY_OFFSETS[live];
            let expect = branches[live].apply(&t).unwrap();
            for ch in 0..2 {
                for i in 0..8 {
                    for j in 0..8 {
                        let v = out.at(&[ch, i, j]);
                        if i % 2 == dr && j % 2 == dc {
                            assert_eq!(v, expect.at(&[ch, i / 2, j / 2]));
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_flow_through_fold_and_unfold() {
        let tape = dctensor::Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 2 * 4 * 4;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::param(vec![2, 4, 4], data).unwrap();
        {
            let _g = tape.recording();
            // Weighted sum distinguishes positions, so the permutation's
            // transpose is exercised, not just accumulation.
            let f = fa(&x).unwrap();
            let weights =
                Tensor::from_vec(f.shape().to_vec(), (0..f.len()).map(|i| i as f64).collect())
                    .unwrap();
            let loss = f.mul(&weights).unwrap().sum().unwrap();
            tape.backward(&loss).unwrap();
        }
        let grad = x.grad().unwrap();
        // grad of x at position p equals the weight at fa's image of p.
        let f = fa(&x).unwrap();
        let weights: Vec<f64> = (0..f.len()).map(|i| i as f64).collect();
        let mut expect = vec![0.0; n];
        let fvals = f.to_vec();
        let xvals = x.to_vec();
        for (o, w) in weights.iter().enumerate() {
            // find source index by value identity: permutation of distinct values
            let src = xvals.iter().position(|&v| v == fvals[o]).unwrap();
            expect[src] += w;
        }
        assert_eq!(grad, expect);
    }
}
