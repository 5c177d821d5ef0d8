use crate::error::Result;
use crate::tensor::{Real, Tensor};

use super::{missing_cache, Module, Slot};

/// `max(0, x)`; the sub-gradient at exactly zero is 0.
#[derive(Clone, Debug, Default)]
pub struct Relu<T: Real> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Relu { input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.input = Some(x.clone());
        y
    }

    /// Like `forward` but consumes the input, keeping only what backward needs.
    pub fn forward_owned(&mut self, x: Tensor<T>) -> Tensor<T> {
        let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("relu"))?;
        x.same_shape(grad_out, "relu backward")?;
        let data = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect();
        Tensor::new(grad_out.shape(), data)
    }
}

/// `ln(1 + eˣ)`, used to keep predicted depth positive.
#[derive(Clone, Debug, Default)]
pub struct Softplus<T: Real> {
    input: Option<Tensor<T>>,
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `softplus⁻¹(y) = ln(eʸ − 1)`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Real> Softplus<T> {
    pub fn new() -> Self {
        Softplus { input: None }
    }

    pub fn forward(&mut self, x: Tensor<T>) -> Tensor<T> {
        let y = x.map(softplus);
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("softplus"))?;
        x.same_shape(grad_out, "softplus backward")?;
        let data = x.data().iter().zip(grad_out.data()).map(|(&v, &g)| g * sigmoid(v)).collect();
        Tensor::new(grad_out.shape(), data)
    }
}

impl<T: Real> Module<T> for Relu<T> {
    fn visit(&mut self, _f: &mut dyn FnMut(Slot<'_, T>)) {}
}

impl<T: Real> Module<T> for Softplus<T> {
    fn visit(&mut self, _f: &mut dyn FnMut(Slot<'_, T>)) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_gradient() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let mut r = Relu::new();
        let y = r.forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = r.backward(&Tensor::ones(&[3]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let mut r2 = Relu::new();
        assert_eq!(r2.forward(&y).data(), y.data());
        assert!(r2.backward(&x).is_ok());
        assert!(r2.backward(&x).is_err());
    }

    #[test]
    fn softplus_is_stable_and_invertible() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-800.0f64), 0.0);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
        for y in [0.01, 0.7, 3.0, 15.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12);
        }
    }
}
