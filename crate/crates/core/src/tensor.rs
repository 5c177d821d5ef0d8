//! Dense row-major tensors with an optional gradient buffer.
//!
//! Every differentiable operation in the crate follows one convention: the
//! forward pass returns a fresh tensor, and the matching backward function
//! *accumulates* (`+=`) into the `grad` buffers of its inputs. Gradients are
//! cleared explicitly with [`Tensor::zero_grad`] / [`Parameter::zero_grad`].
//!
//! 4-D feature maps are laid out `batch × channels × height × width`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` on raw strided storage. Callers in
    /// [`crate::linalg`] guarantee the strides stay inside the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Run-time precision switch: 64-bit for gradient checks, 32-bit for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidArgument("tensor shape must be non-empty".into()));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "zero-sized dimension {pos} in shape {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    /// Standard-normal samples. The stream is ChaCha8 seeded with
    /// `seed_from_u64(seed)`, transformed by the ziggurat sampler of
    /// `rand_distr::StandardNormal`, so a given seed reproduces bit-exactly.
    pub fn randn(shape: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::randn_with(shape, &mut rng)
    }

    pub fn randn_with<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform_with<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Gradient as a standalone tensor (zeros when never touched).
    pub fn grad_tensor(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.grad.clone().unwrap_or_else(|| vec![T::zero(); self.data.len()]),
            grad: None,
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape("dims4", format!("expected 4-D tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{context} (element {i})"))),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    /// View of batch element `n` of a 4-D tensor as a flat slice.
    pub fn item(&self, n: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[n * per..(n + 1) * per]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let per = self.data.len() / self.shape[0];
        &mut self.data[n * per..(n + 1) * per]
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: impl Iterator<Item = T>) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + s);
}

pub fn ew_add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_shape(b, "ew_add")?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
        grad: None,
    })
}

pub fn ew_add_backward<T: Real>(grad_out: &[T], a: &mut Tensor<T>, b: &mut Tensor<T>) {
    accumulate(a.grad_mut(), grad_out.iter().copied());
    accumulate(b.grad_mut(), grad_out.iter().copied());
}

pub fn ew_mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_shape(b, "ew_mul")?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
        grad: None,
    })
}

pub fn ew_mul_backward<T: Real>(grad_out: &[T], a: &mut Tensor<T>, b: &mut Tensor<T>) {
    let ga: Vec<T> = grad_out.iter().zip(&b.data).map(|(&g, &y)| g * y).collect();
    let gb: Vec<T> = grad_out.iter().zip(&a.data).map(|(&g, &x)| g * x).collect();
    accumulate(a.grad_mut(), ga.into_iter());
    accumulate(b.grad_mut(), gb.into_iter());
}

pub fn ew_mul_scalar<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

pub fn ew_mul_scalar_backward<T: Real>(grad_out: &[T], a: &mut Tensor<T>, s: T) {
    accumulate(a.grad_mut(), grad_out.iter().map(|&g| g * s));
}

pub fn ew_map<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    a.map(f)
}

/// Backward of [`ew_map`]; `df` is the derivative of the mapped function.
pub fn ew_map_backward<T: Real>(grad_out: &[T], a: &mut Tensor<T>, df: impl Fn(T) -> T) {
    let g: Vec<T> = grad_out.iter().zip(&a.data).map(|(&g, &x)| g * df(x)).collect();
    accumulate(a.grad_mut(), g.into_iter());
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..na {
        data.extend_from_slice(&a.data[n * ca * plane..(n + 1) * ca * plane]);
        data.extend_from_slice(&b.data[n * cb * plane..(n + 1) * cb * plane]);
    }
    Ok(Tensor {
        shape: vec![na, ca + cb, ha, wa],
        data,
        grad: None,
    })
}

/// Splits a 4-D tensor (or its gradient) after channel `c_first`.
pub fn split_channels<T: Real>(t: &Tensor<T>, c_first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    split_slice(&t.data, t.dims4()?, c_first)
}

fn split_slice<T: Real>(
    data: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    c_first: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if c_first == 0 || c_first >= c {
        return Err(Error::shape("split_channels", format!("cannot split {c} channels at {c_first}")));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * c_first * plane);
    let mut b = Vec::with_capacity(n * (c - c_first) * plane);
    for item in data.chunks(c * plane) {
        a.extend_from_slice(&item[..c_first * plane]);
        b.extend_from_slice(&item[c_first * plane..]);
    }
    Ok((
        Tensor::new(&[n, c_first, h, w], a)?,
        Tensor::new(&[n, c - c_first, h, w], b)?,
    ))
}

pub fn concat_channels_backward<T: Real>(
    grad_out: &Tensor<T>,
    a: &mut Tensor<T>,
    b: &mut Tensor<T>,
) -> Result<()> {
    let c_a = a.dims4()?.1;
    let (ga, gb) = split_channels(grad_out, c_a)?;
    a.same_shape(&ga, "concat_channels_backward")?;
    b.same_shape(&gb, "concat_channels_backward")?;
    accumulate(a.grad_mut(), ga.data.into_iter());
    accumulate(b.grad_mut(), gb.data.into_iter());
    Ok(())
}

/// A trainable tensor with its gradient and Adam moment buffers.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor {
            shape: value.shape.clone(),
            data: vec![T::zero(); value.numel()],
            grad: None,
        };
        Parameter {
            name: name.into(),
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}
