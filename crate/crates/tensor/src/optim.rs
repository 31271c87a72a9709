use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stochastic gradient descent with classical momentum, optional L2 weight
/// decay, and optional global gradient-norm clipping.
///
/// Per step and parameter: `v <- momentum * v + g; p <- p - lr * v`, where
/// `g` is the (possibly rescaled) gradient plus `weight_decay * p`; the
/// gradient slot is then cleared. Clipping rescales the concatenated
/// gradient of *all* parameters to at most the given L2 norm, so one
/// outsized mini-batch cannot launch the velocity into a runaway. Velocity
/// buffers are keyed by tensor identity and start at zero.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    clip_norm: Option<f64>,
    velocity: HashMap<u64, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Sgd {
        Sgd { momentum, weight_decay: 0.0, clip_norm: None, velocity: HashMap::new() }
    }

    /// Adds `wd * p` to every gradient before the momentum update. Keeps
    /// unconstrained logit magnitudes (and with them, normalized-layer
    /// weight drift) bounded over long runs.
    pub fn with_weight_decay(mut self, wd: f64) -> Sgd {
        assert!(wd.is_finite() && wd >= 0.0, "weight decay must be finite and >= 0, got {wd}");
        self.weight_decay = wd;
        self
    }

    /// Rescales each step's combined gradient so its global L2 norm is at
    /// most `c`. Gradients below the threshold pass through untouched.
    pub fn with_clip_norm(mut self, c: f64) -> Sgd {
        assert!(c.is_finite() && c > 0.0, "clip norm must be finite and > 0, got {c}");
        self.clip_norm = Some(c);
        self
    }

    /// Apply one update. Every parameter must have a populated gradient; a
    /// missing gradient means the forward/backward pass did not reach it,
    /// which is a wiring bug worth surfacing rather than skipping.
    pub fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Invalid { op: "sgd_step", msg: format!("bad learning rate {lr}") });
        }
        let mut grads = Vec::with_capacity(params.len());
        for p in params {
            grads.push(p.grad().ok_or_else(|| {
                Error::NoGradient(format!("parameter id {} (shape {:?})", p.id(), p.shape()))
            })?);
        }
        let mut scale = 1.0;
        if let Some(c) = self.clip_norm {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Invalid {
                    op: "sgd_step",
                    msg: format!("gradient norm is {norm}"),
                });
            }
            if norm > c {
                scale = c / norm;
            }
        }
        for (p, grad) in params.iter().zip(&grads) {
            let v = self.velocity.entry(p.id()).or_insert_with(|| vec![0.0; p.len()]);
            let mut next = p.to_vec();
            for ((vi, gi), xi) in v.iter_mut().zip(grad).zip(&mut next) {
                *vi = self.momentum * *vi + gi * scale + self.weight_decay * *xi;
                *xi -= lr * *vi;
            }
            p.set_data(&next)?;
            p.zero_grad();
        }
        Ok(())
    }
}
