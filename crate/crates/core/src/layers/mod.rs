//! Differentiable layers with hand-written backward passes.
//!
//! Each layer caches what it needs during `forward` and consumes the cache in
//! `backward`, which returns the input gradient and accumulates parameter
//! gradients. Call `forward` again before every `backward`.

mod activation;
mod conv;
mod norm;
mod residual;
mod sftl;

pub use activation::{sigmoid, softplus, softplus_inverse, Relu, Softplus};
pub use conv::{Conv2d, TransposedConv2d};
pub use norm::BatchNorm2d;
pub use residual::ResidualBlock;
pub use sftl::{Sftl, SftlConfig, SftlMode, TapReport};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Parameter, Real, Tensor};

/// A mutable view of one piece of layer state.
pub enum Slot<'a, T: Real> {
    /// Trainable, updated by the optimizer.
    Param(&'a mut Parameter<T>),
    /// Persistent non-trainable state such as batch-norm running statistics.
    Buffer(&'a str, &'a mut Tensor<T>),
}

pub trait Module<T: Real> {
    fn visit(&mut self, f: &mut dyn FnMut(Slot<'_, T>));

    fn zero_grad(&mut self) {
        self.visit(&mut |s| {
            if let Slot::Param(p) = s {
                p.zero_grad();
            }
        });
    }

    /// Switches batch-norm layers between batch and running statistics.
    fn set_training(&mut self, _on: bool) {}

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| {
            if let Slot::Param(p) = s {
                n += p.value.numel();
            }
        });
        n
    }
}

/// Kaiming-normal weights, `std = sqrt(2 / fan_in)`.
pub(crate) fn kaiming<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(std * rng.sample::<f64, _>(StandardNormal))).expect("non-empty weight shape")
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn missing_cache(layer: &str) -> crate::Error {
    crate::Error::InvalidArgument(format!("{layer}: backward called without a forward pass"))
}
