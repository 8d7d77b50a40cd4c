//! Named trainable tensors and their binding onto a tape.

use crate::rng::RngStream;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Param<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
    bound: Option<Var>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
            bound: None,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::full(shape, T::one()))
    }

    /// `N(0, std²)` entries drawn from a stream keyed by `name`, so the
    /// values depend only on `(seed, name)`.
    pub fn normal(name: impl Into<String>, shape: &[usize], std: f64, seed: u64) -> Self {
        let name = name.into();
        let mut rng = RngStream::named(seed, &name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
        Self::new(name, Tensor::new(shape, data).expect("positive shape"))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn set_value(&mut self, value: Tensor<T>) {
        self.value = value;
        self.bound = None;
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
        self.bound = None;
    }

    /// Leaf for this parameter on `tape`, created on first use per tape.
    pub fn var(&mut self, tape: &mut Tape<T>) -> Var {
        if let Some(v) = self.bound {
            if tape.try_value(v).is_ok() {
                return v;
            }
        }
        let v = tape.leaf(self.value.clone(), self.trainable);
        self.bound = Some(v);
        v
    }

    /// Uses an externally created node in place of this parameter on its tape.
    pub fn bind(&mut self, v: Var) {
        self.bound = Some(v);
    }

    pub fn unbind(&mut self) {
        self.bound = None;
    }

    /// Gradient from the last backward on `tape`, if this parameter took part.
    pub fn grad<'t>(&self, tape: &'t Tape<T>) -> Option<&'t Tensor<T>> {
        self.bound.and_then(|v| tape.grad(v))
    }
}
