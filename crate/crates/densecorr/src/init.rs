//! Seeded parameter creation and bookkeeping.
//!
//! Every trainable tensor in the model is born here, in a fixed order, from a
//! single [`ChaCha8Rng`] stream — two stores built with the same seed and the
//! same construction sequence hold bitwise-identical parameters, which is what
//! makes whole training runs reproducible from one `u64`.

use std::path::Path;

use dctensor::{checkpoint, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ordered collection of named trainable tensors plus the RNG they draw from.
pub struct ParamStore {
    rng: ChaCha8Rng,
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new(seed: u64) -> ParamStore {
        ParamStore { rng: ChaCha8Rng::seed_from_u64(seed), entries: Vec::new() }
    }

    fn register(&mut self, name: &str, tensor: Tensor) -> Tensor {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name:?}"
        );
        self.entries.push((name.to_string(), tensor.clone()));
        tensor
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::param(shape.to_vec(), data).expect("finite init")
    }

    /// Convolution weight `[c_out, c_in, kh, kw]`, He-uniform over
    /// fan-in = `c_in · kh · kw` (bound √(6/fan_in)).
    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, kh: usize, kw: usize) -> Tensor {
        let bound = (6.0 / (c_in * kh * kw) as f64).sqrt();
        let t = self.uniform(&[c_out, c_in, kh, kw], bound);
        self.register(name, t)
    }

    /// Matrix `[rows, cols]` applied as `x · W`, Xavier-uniform over
    /// fan-in = rows, fan-out = cols (bound √(6/(rows+cols))).
    pub fn linear(&mut self, name: &str, rows: usize, cols: usize) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let t = self.uniform(&[rows, cols], bound);
        self.register(name, t)
    }

    /// Zero-initialised tensor (biases).
    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let t = Tensor::param(shape.to_vec(), vec![0.0; n]).expect("finite init");
        self.register(name, t)
    }

    /// Tensor with explicit initial values (transferred weights).
    pub fn with_values(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Tensor {
        let t = Tensor::param(shape.to_vec(), data).expect("finite init");
        self.register(name, t)
    }

    /// The parameters in creation order, for the optimizer.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_tensors(path, &self.entries)?;
        Ok(())
    }

    /// Copies values from a checkpoint into the existing tensors. The file
    /// must contain exactly this store's names with matching shapes.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = checkpoint::load_tensors(path)?;
        if loaded.len() != self.entries.len() {
            return Err(Error::invalid(
                "load",
                format!("checkpoint has {} tensors, model has {}", loaded.len(), self.entries.len()),
            ));
        }
        for (name, tensor) in &self.entries {
            let Some((_, src)) = loaded.iter().find(|(n, _)| n == name) else {
                return Err(Error::invalid("load", format!("checkpoint is missing {name:?}")));
            };
            if src.shape() != tensor.shape() {
                return Err(Error::invalid(
                    "load",
                    format!(
                        "{name:?} has shape {:?} in checkpoint, {:?} in model",
                        src.shape(),
                        tensor.shape()
                    ),
                ));
            }
            tensor.set_data(&src.data())?;
        }
        Ok(())
    }
}
