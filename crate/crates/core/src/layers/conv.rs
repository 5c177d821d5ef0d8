use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::sampling::{col2im, im2col, ColumnBuffer, Unfold};
use crate::sphere;
use crate::tensor::{Parameter, Real, Tensor};

use super::{join, kaiming, missing_cache, Module, Slot};

/// `out_b = W · cols_b (+ bias)` for every batch element.
pub(crate) fn apply_weights<T: Real>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cols: &ColumnBuffer<T>,
) -> Result<Tensor<T>> {
    let c_out = weight.shape()[0];
    let rows = weight.numel() / c_out;
    if rows != cols.rows {
        return Err(Error::shape(
            "conv",
            format!("kernel expects {rows} unfolded rows, input provides {}", cols.rows),
        ));
    }
    let p = cols.cols();
    let mut out = Tensor::zeros(&[cols.n, c_out, cols.out_h, cols.out_w])?;
    for b in 0..cols.n {
        let dst = out.item_mut(b);
        gemm(
            T::one(),
            MatRef::new(weight.data(), c_out, rows),
            MatRef::new(cols.item(b), rows, p),
            T::zero(),
            dst,
            p,
        );
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                let bv = bias.data()[o];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Ok(out)
}

/// Accumulates weight/bias gradients and returns the column gradient.
pub(crate) fn weights_backward<T: Real>(
    weight: &mut Parameter<T>,
    bias: Option<&mut Parameter<T>>,
    cols: &ColumnBuffer<T>,
    grad_out: &Tensor<T>,
) -> Result<ColumnBuffer<T>> {
    let c_out = weight.shape()[0];
    let rows = cols.rows;
    let p = cols.cols();
    if grad_out.shape() != [cols.n, c_out, cols.out_h, cols.out_w] {
        return Err(Error::shape(
            "conv backward",
            format!("gradient {:?} vs output [{}, {c_out}, {}, {}]", grad_out.shape(), cols.n, cols.out_h, cols.out_w),
        ));
    }
    let mut gcols = ColumnBuffer::zeros(cols.n, rows, cols.out_h, cols.out_w);
    for b in 0..cols.n {
        let g = grad_out.item(b);
        gemm(
            T::one(),
            MatRef::new(g, c_out, p),
            MatRef::new(cols.item(b), rows, p).t(),
            T::one(),
            weight.grad.data_mut(),
            rows,
        );
        gemm(
            T::one(),
            MatRef::new(weight.value.data(), c_out, rows).t(),
            MatRef::new(g, c_out, p),
            T::zero(),
            gcols.item_mut(b),
            p,
        );
    }
    if let Some(bias) = bias {
        let gb = bias.grad.data_mut();
        for b in 0..cols.n {
            for (o, row) in grad_out.item(b).chunks(p).enumerate() {
                gb[o] = gb[o] + row.iter().copied().sum::<T>();
            }
        }
    }
    Ok(gcols)
}

/// 2-D convolution via im2col + matrix product. Panorama padding: zeros above
/// and below, columns wrap.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub unfold: Unfold,
    cache: Option<(ColumnBuffer<T>, [usize; 4])>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        sphere::check_odd(k)?;
        let weight = kaiming(&[c_out, c_in, k, k], c_in * k * k, rng);
        Self::from_weights(name, weight, bias.then(|| Tensor::zeros(&[c_out]).unwrap()), Unfold::panorama(k, stride))
    }

    pub fn from_weights(name: &str, weight: Tensor<T>, bias: Option<Tensor<T>>, unfold: Unfold) -> Result<Self> {
        let &[c_out, _, k, k2] = weight.shape() else {
            return Err(Error::shape("Conv2d", format!("weight must be 4-D, got {:?}", weight.shape())));
        };
        sphere::check_odd(k)?;
        if k != k2 || k != unfold.k {
            return Err(Error::shape("Conv2d", "kernel must be square and match the unfold size"));
        }
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("Conv2d", format!("bias {:?} for {c_out} outputs", b.shape())));
            }
        }
        Ok(Conv2d {
            weight: Parameter::new(join(name, "weight"), weight),
            bias: bias.map(|b| Parameter::new(join(name, "bias"), b)),
            unfold,
            cache: None,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.c_in() {
            return Err(Error::shape("conv2d", format!("input has {c} channels, kernel expects {}", self.c_in())));
        }
        let cols = im2col(x, self.unfold)?;
        let y = apply_weights(&self.weight.value, self.bias.as_ref().map(|b| &b.value), &cols)?;
        self.cache = Some((cols, [n, c, h, w]));
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (cols, shape) = self.cache.take().ok_or_else(|| missing_cache("conv2d"))?;
        let gcols = weights_backward(&mut self.weight, self.bias.as_mut(), &cols, grad_out)?;
        col2im(&gcols, shape, self.unfold)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&mut self, f: &mut dyn FnMut(Slot<'_, T>)) {
        f(Slot::Param(&mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            f(Slot::Param(b));
        }
    }
}

/// Transposed convolution, defined as the data-adjoint of [`Conv2d`] with the
/// same kernel size, stride and panorama padding: output spatial size is
/// `input · stride`. Weights are laid out `c_in × c_out × k × k`.
#[derive(Clone, Debug)]
pub struct TransposedConv2d<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub unfold: Unfold,
    cache: Option<Tensor<T>>,
}

impl<T: Real> TransposedConv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        sphere::check_odd(k)?;
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let fan_in = (c_in * k * k / (stride * stride)).max(1);
        let weight = kaiming(&[c_in, c_out, k, k], fan_in, rng);
        Self::from_weights(name, weight, bias.then(|| Tensor::zeros(&[c_out]).unwrap()), Unfold::panorama(k, stride))
    }

    pub fn from_weights(name: &str, weight: Tensor<T>, bias: Option<Tensor<T>>, unfold: Unfold) -> Result<Self> {
        let &[_, c_out, k, k2] = weight.shape() else {
            return Err(Error::shape("TransposedConv2d", format!("weight must be 4-D, got {:?}", weight.shape())));
        };
        if k != k2 || k != unfold.k {
            return Err(Error::shape("TransposedConv2d", "kernel must be square and match the unfold size"));
        }
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("TransposedConv2d", format!("bias {:?} for {c_out} outputs", b.shape())));
            }
        }
        Ok(TransposedConv2d {
            weight: Parameter::new(join(name, "weight"), weight),
            bias: bias.map(|b| Parameter::new(join(name, "bias"), b)),
            unfold,
            cache: None,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (oh, ow) = (h * self.unfold.stride, w * self.unfold.stride);
        if self.unfold.out_size(oh, ow)? != (h, w) {
            return Err(Error::shape(
                "tconv2d",
                format!("kernel {} / stride {} cannot upsample {h}x{w}", self.unfold.k, self.unfold.stride),
            ));
        }
        Ok((oh, ow))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.c_in() {
            return Err(Error::shape("tconv2d", format!("input has {c} channels, kernel expects {}", self.c_in())));
        }
        let (oh, ow) = self.out_dims(h, w)?;
        let c_out = self.c_out();
        let k = self.unfold.k;
        let rows = c_out * k * k;
        let p = h * w;
        let mut cols = ColumnBuffer::zeros(n, rows, h, w);
        for b in 0..n {
            gemm(
                T::one(),
                MatRef::new(self.weight.value.data(), c, rows).t(),
                MatRef::new(x.item(b), c, p),
                T::zero(),
                cols.item_mut(b),
                p,
            );
        }
        let mut y = col2im(&cols, [n, c_out, oh, ow], self.unfold)?;
        if let Some(bias) = &self.bias {
            let plane = oh * ow;
            for b in 0..n {
                for (o, row) in y.item_mut(b).chunks_mut(plane).enumerate() {
                    let bv = bias.value.data()[o];
                    row.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("tconv2d"))?;
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = self.out_dims(h, w)?;
        let c_out = self.c_out();
        if grad_out.shape() != [n, c_out, oh, ow] {
            return Err(Error::shape("tconv2d backward", format!("gradient {:?}", grad_out.shape())));
        }
        let gcols = im2col(grad_out, self.unfold)?;
        let rows = gcols.rows;
        let p = h * w;
        let mut gx = Tensor::zeros(&[n, c, h, w])?;
        for b in 0..n {
            gemm(
                T::one(),
                MatRef::new(x.item(b), c, p),
                MatRef::new(gcols.item(b), rows, p).t(),
                T::one(),
                self.weight.grad.data_mut(),
                rows,
            );
            gemm(
                T::one(),
                MatRef::new(self.weight.value.data(), c, rows),
                MatRef::new(gcols.item(b), rows, p),
                T::zero(),
                gx.item_mut(b),
                p,
            );
        }
        if let Some(bias) = self.bias.as_mut() {
            let plane = oh * ow;
            let gb = bias.grad.data_mut();
            for b in 0..n {
                for (o, row) in grad_out.item(b).chunks(plane).enumerate() {
                    gb[o] = gb[o] + row.iter().copied().sum::<T>();
                }
            }
        }
        Ok(gx)
    }
}

impl<T: Real> Module<T> for TransposedConv2d<T> {
    fn visit(&mut self, f: &mut dyn FnMut(Slot<'_, T>)) {
        f(Slot::Param(&mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            f(Slot::Param(b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::Padding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution with panorama padding.
    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let pad = (k / 2) as i64;
        let oh = (h + 2 * (k / 2) - k) / stride + 1;
        let ow = (wd + 2 * (k / 2) - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, oh, ow]).unwrap();
        for b in 0..n {
            for o in 0..co {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias[o];
                        for ch in 0..c {
                            for di in 0..k {
                                for dj in 0..k {
                                    let si = (i * stride + di) as i64 - pad;
                                    let sj = ((j * stride + dj) as i64 - pad).rem_euclid(wd as i64);
                                    if si < 0 || si >= h as i64 {
                                        continue;
                                    }
                                    acc += w.data()[((o * c + ch) * k + di) * k + dj]
                                        * x.data()[((b * c + ch) * h + si as usize) * wd + sj as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let mut conv = Conv2d::from_weights("c", w, None, Unfold::panorama(1, 1)).unwrap();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(conv.forward(&x).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        w.data_mut()[4] = 1.0;
        let mut conv = Conv2d::from_weights("c", w, None, Unfold::panorama(3, 1)).unwrap();
        let x = Tensor::<f64>::randn(&[1, 1, 5, 6], 2).unwrap();
        assert_eq!(conv.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let mut conv = Conv2d::<f64>::new("c", 3, 4, 3, stride, true, &mut rng).unwrap();
            conv.bias.as_mut().unwrap().value = Tensor::randn(&[4], 3).unwrap();
            let x = Tensor::<f64>::randn(&[2, 3, 6, 6], 4).unwrap();
            let y = conv.forward(&x).unwrap();
            let want = direct_conv(&x, &conv.weight.value, conv.bias.as_ref().unwrap().value.data(), stride);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new("c", 3, 4, 3, 1, false, &mut rng).unwrap();
        assert!(conv.forward(&Tensor::zeros(&[1, 2, 4, 4]).unwrap()).is_err());
        assert!(Conv2d::<f64>::new("c", 3, 4, 2, 1, false, &mut rng).is_err());
    }

    #[test]
    fn tconv_doubles_and_equals_conv_backward_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tconv = TransposedConv2d::<f64>::new("t", 3, 2, 3, 2, false, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[2, 3, 4, 5], 6).unwrap();
        let y = tconv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 8, 10]);
        // conv 2 -> 3 channels with the same kernel, stride 2
        let mut conv =
            Conv2d::from_weights("c", tconv.weight.value.clone(), None, Unfold::panorama(3, 2)).unwrap();
        conv.forward(&Tensor::zeros(&[2, 2, 8, 10]).unwrap()).unwrap();
        let back = conv.backward(&x).unwrap();
        for (a, b) in y.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tconv_rejects_unreachable_shapes() {
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]).unwrap();
        let spec = Unfold { k: 3, stride: 2, pad: 0, padding: Padding::Zero };
        let mut t = TransposedConv2d::from_weights("t", w, None, spec).unwrap();
        assert!(t.forward(&Tensor::zeros(&[1, 1, 4, 4]).unwrap()).is_err());
    }
}
