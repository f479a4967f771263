use rand::Rng;

use crate::tensor::{Real, Tensor};

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: [usize; 4]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn uniform(name: impl Into<String>, shape: [usize; 4], bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect();
        Self::new(name, Tensor::from_vec(shape, data))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns learnable parameters in a fixed order.
pub trait Parameterized<T: Real> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Sets every parameter to zero.
    fn zero_weights(&mut self) {
        for p in self.params_mut() {
            p.value.fill(T::zero());
        }
    }

    /// Flattens all parameter values in declaration order.
    fn flat_values(&self) -> Vec<T> {
        self.params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    fn flat_grads(&self) -> Vec<T> {
        self.params()
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    fn set_flat_values(&mut self, values: &[T]) {
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.numel();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        assert_eq!(off, values.len(), "flat parameter vector length mismatch");
    }
}
