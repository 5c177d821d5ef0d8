use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ew_add, Real, Tensor};

use super::{join, BatchNorm2d, Conv2d, Module, Relu, Slot};

/// `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`. The shortcut is a
/// strided 1×1 conv + batch norm whenever the stride or width changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Real> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu1: Relu<T>,
    relu_out: Relu<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let shortcut = if stride > 1 || c_in != c_out {
            Some((
                Conv2d::new(&join(name, "proj"), c_in, c_out, 1, stride, false, rng)?,
                BatchNorm2d::new(&join(name, "proj_bn"), c_out)?,
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1: Conv2d::new(&join(name, "conv1"), c_in, c_out, 3, stride, false, rng)?,
            bn1: BatchNorm2d::new(&join(name, "bn1"), c_out)?,
            conv2: Conv2d::new(&join(name, "conv2"), c_out, c_out, 3, 1, false, rng)?,
            bn2: BatchNorm2d::new(&join(name, "bn2"), c_out)?,
            shortcut,
            relu1: Relu::new(),
            relu_out: Relu::new(),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.conv1.forward(x)?;
        let a = self.bn1.forward(&a)?;
        let a = self.relu1.forward_owned(a);
        let a = self.conv2.forward(&a)?;
        let a = self.bn2.forward(&a)?;
        let s = match self.shortcut.as_mut() {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        let sum = ew_add(&a, &s)?;
        Ok(self.relu_out.forward_owned(sum))
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu_out.backward(grad_out)?;
        let gs = match self.shortcut.as_mut() {
            Some((conv, bn)) => conv.backward(&bn.backward(&g)?)?,
            None => g.clone(),
        };
        let ga = self.bn2.backward(&g)?;
        let ga = self.conv2.backward(&ga)?;
        let ga = self.relu1.backward(&ga)?;
        let ga = self.bn1.backward(&ga)?;
        let gx = self.conv1.backward(&ga)?;
        ew_add(&gx, &gs)
    }
}

impl<T: Real> Module<T> for ResidualBlock<T> {
    fn visit(&mut self, f: &mut dyn FnMut(Slot<'_, T>)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.visit(f);
            bn.visit(f);
        }
    }

    fn set_training(&mut self, on: bool) {
        self.bn1.set_training(on);
        self.bn2.set_training(on);
        if let Some((_, bn)) = self.shortcut.as_mut() {
            bn.set_training(on);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_residual_branch_is_projected_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = ResidualBlock::<f64>::new("r", 4, 4, 1, &mut rng).unwrap();
        block.bn2.gamma.value = Tensor::zeros(&[4]).unwrap();
        let x = Tensor::<f64>::randn(&[2, 4, 4, 6], 1).unwrap().map(f64::abs);
        assert_eq!(block.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = ResidualBlock::<f64>::new("r", 3, 8, 2, &mut rng).unwrap();
        let y = block.forward(&Tensor::randn(&[2, 3, 8, 16], 2).unwrap()).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 8]);
        assert!(block.shortcut.is_some());
    }
}
