//! Named parameter storage with gradient accumulators and optimizer slots.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// One named tensor: value, gradient, and Adam moment slots. Non-trainable
/// entries (batch-norm running statistics) are carried for checkpointing but
/// skipped by the optimizer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor2D,
    pub grad: Tensor2D,
    pub moment1: Tensor2D,
    pub moment2: Tensor2D,
    pub trainable: bool,
}

impl Param {
    fn new(value: Tensor2D, trainable: bool) -> Self {
        let (r, c) = value.shape();
        Param {
            value,
            grad: Tensor2D::zeros(r, c),
            moment1: Tensor2D::zeros(r, c),
            moment2: Tensor2D::zeros(r, c),
            trainable,
        }
    }
}

/// Insertion-ordered name -> parameter map. Order is the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    entries: std::collections::HashMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor2D) -> Result<()> {
        self.insert_with(name, value, true)
    }

    pub fn insert_state(&mut self, name: &str, value: Tensor2D) -> Result<()> {
        self.insert_with(name, value, false)
    }

    fn insert_with(&mut self, name: &str, value: Tensor2D, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Key(format!("duplicate parameter {name}")));
        }
        self.names.push(name.to_string());
        self.entries
            .insert(name.to_string(), Param::new(value, trainable));
        Ok(())
    }

    /// Uniform(-1/sqrt(d), 1/sqrt(d)) initialized trainable matrix.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = 1.0 / (d as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor2D::from_vec(rows, cols, data)?)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Key(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Key(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2D> {
        Ok(&self.get(name)?.value)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor2D) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} for parameter {} of shape {:?}",
                grad.shape(),
                name,
                p.grad.shape()
            )));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names
            .iter()
            .map(move |n| (n.as_str(), &self.entries[n]))
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Param)) {
        for n in &self.names {
            f(n, self.entries.get_mut(n).expect("name without entry"));
        }
    }

    /// Global L2 norm over trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| {
                let n = p.grad.frobenius_norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Round every value to f32 precision (32-bit training mode).
    pub fn round_values_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            p.value.round_to_f32();
        }
    }
}
