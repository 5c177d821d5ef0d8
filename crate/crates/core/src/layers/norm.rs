use crate::error::{Error, Result};
use crate::tensor::{Parameter, Real, Tensor};

use super::{join, missing_cache, Module, Slot};

/// Per-channel batch normalization for `n × c × h × w` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Real> {
    pub name: String,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub training: bool,
    cache: Option<Cache<T>>,
}

#[derive(Clone, Debug)]
struct Cache<T: Real> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            name: name.to_string(),
            gamma: Parameter::new(join(name, "gamma"), Tensor::ones(&[c])?),
            beta: Parameter::new(join(name, "beta"), Tensor::zeros(&[c])?),
            running_mean: Tensor::zeros(&[c])?,
            running_var: Tensor::ones(&[c])?,
            eps: 1e-5,
            momentum: 0.1,
            training: true,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::shape("batchnorm", format!("input has {c} channels, expected {}", self.channels())));
        }
        let p = h * w;
        let count = n * p;
        if self.training && count < 2 {
            return Err(Error::InvalidArgument("batchnorm training needs at least two values per channel".into()));
        }
        let mut xhat = Tensor::zeros(x.shape())?;
        let mut y = Tensor::zeros(x.shape())?;
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let plane = |b: usize| &x.data()[(b * c + ch) * p..][..p];
            let (mean, var) = if self.training {
                let mean = (0..n).flat_map(plane).map(|v| v.as_f64()).sum::<f64>() / count as f64;
                let var = (0..n).flat_map(plane).map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / count as f64;
                let m = self.momentum;
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = T::lit((1.0 - m) * rm.as_f64() + m * mean);
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = T::lit((1.0 - m) * rv.as_f64() + m * var * count as f64 / (count - 1) as f64);
                (mean, var)
            } else {
                (self.running_mean.data()[ch].as_f64(), self.running_var.data()[ch].as_f64())
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (g, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for b in 0..n {
                let off = (b * c + ch) * p;
                for q in off..off + p {
                    let xh = T::lit((x.data()[q].as_f64() - mean) * is);
                    xhat.data_mut()[q] = xh;
                    y.data_mut()[q] = g * xh + bt;
                }
            }
        }
        self.cache = Some(Cache { xhat, inv_std, batch_stats: self.training });
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let Cache { xhat, inv_std, batch_stats } = self.cache.take().ok_or_else(|| missing_cache("batchnorm"))?;
        xhat.same_shape(grad_out, "batchnorm backward")?;
        let (n, c, h, w) = xhat.dims4()?;
        let p = h * w;
        let count = (n * p) as f64;
        let mut gx = Tensor::zeros(xhat.shape())?;
        for ch in 0..c {
            let idx = |b: usize| (b * c + ch) * p..(b * c + ch + 1) * p;
            let (mut sg, mut sgx) = (0.0, 0.0);
            for b in 0..n {
                for q in idx(b) {
                    let g = grad_out.data()[q].as_f64();
                    sg += g;
                    sgx += g * xhat.data()[q].as_f64();
                }
            }
            let gd = self.gamma.grad.data_mut();
            gd[ch] = gd[ch] + T::lit(sgx);
            let bd = self.beta.grad.data_mut();
            bd[ch] = bd[ch] + T::lit(sg);
            let scale = self.gamma.value.data()[ch].as_f64() * inv_std[ch];
            for b in 0..n {
                for q in idx(b) {
                    let g = grad_out.data()[q].as_f64();
                    gx.data_mut()[q] = T::lit(if batch_stats {
                        scale * (g - sg / count - xhat.data()[q].as_f64() * sgx / count)
                    } else {
                        scale * g
                    });
                }
            }
        }
        Ok(gx)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, f: &mut dyn FnMut(Slot<'_, T>)) {
        f(Slot::Param(&mut self.gamma));
        f(Slot::Param(&mut self.beta));
        f(Slot::Buffer(&join(&self.name, "running_mean"), &mut self.running_mean));
        f(Slot::Buffer(&join(&self.name, "running_var"), &mut self.running_var));
    }

    fn set_training(&mut self, on: bool) {
        self.training = on;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_gives_beta() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 2).unwrap();
        bn.beta.value = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        bn.gamma.value = Tensor::new(&[2], vec![3.0, 2.0]).unwrap();
        let y = bn.forward(&Tensor::full(&[2, 2, 3, 3], 7.0).unwrap()).unwrap();
        for (q, v) in y.data().iter().enumerate() {
            let ch = (q / 9) % 2;
            assert_eq!(*v, [0.5, -1.5][ch]);
        }
    }

    #[test]
    fn batch_statistics_follow_gamma_beta() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 3).unwrap();
        bn.eps = 0.0;
        bn.gamma.value = Tensor::new(&[3], vec![2.0, -0.5, 1.0]).unwrap();
        bn.beta.value = Tensor::new(&[3], vec![1.0, 0.0, -3.0]).unwrap();
        let x = Tensor::<f64>::randn(&[4, 3, 5, 5], 2).unwrap().map(|v| 4.0 * v + 9.0);
        let y = bn.forward(&x).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.data()[(b * 3 + ch) * 25..][..25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - bn.beta.value.data()[ch]).abs() < 1e-6);
            assert!((std - bn.gamma.value.data()[ch].abs()).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_update_and_eval_mode() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1).unwrap();
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        bn.forward(&x).unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        // unbiased var 2, blended with 1
        assert!((bn.running_var.data()[0] - 1.1).abs() < 1e-15);
        bn.training = false;
        let y = bn.forward(&x).unwrap();
        let want = (1.0 - 0.2) / (1.1f64 + 1e-5).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn single_value_training_is_rejected() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1).unwrap();
        assert!(bn.forward(&Tensor::zeros(&[1, 1, 1, 1]).unwrap()).is_err());
        bn.training = false;
        assert!(bn.forward(&Tensor::zeros(&[1, 1, 1, 1]).unwrap()).is_ok());
    }
}
