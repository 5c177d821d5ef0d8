//! Differentiable bilinear sampling and the (deformable) im2col unfoldings.
//!
//! A [`ColumnBuffer`] holds, for every batch element, a `(c·k²) × P` matrix
//! whose row `ch·k² + tap` lists channel `ch` of stencil tap `tap` for each of
//! the `P` output pixels. A convolution is then one matrix product per batch
//! element with weights laid out `c_out × c × k × k`.

use crate::error::{Error, Result};
use crate::sphere::{self, EquirectGrid, TangentCoord};
use crate::tensor::{Real, Tensor};

/// How integer sample positions outside the feature map are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WrapPolicy {
    /// Longitude wraps modulo `w`; rows past a pole reflect back onto the
    /// sphere with longitude shifted by half a turn.
    Spherical,
    /// Longitude wraps; rows outside the map read as zero (planar conv padding).
    ZeroRows,
    /// Clamp both axes to the border (plain planar images).
    Clamp,
}

impl WrapPolicy {
    /// Maps an integer position to an in-range `(row, col)`, or `None` when it
    /// reads as zero.
    #[inline]
    pub fn resolve(self, i: i64, j: i64, h: usize, w: usize) -> Option<(usize, usize)> {
        let (hi, wi) = (h as i64, w as i64);
        match self {
            WrapPolicy::Spherical => {
                let mut i = i.rem_euclid(2 * hi);
                let mut j = j;
                if i >= hi {
                    i = 2 * hi - 1 - i;
                    j += wi / 2;
                }
                Some((i as usize, j.rem_euclid(wi) as usize))
            }
            WrapPolicy::ZeroRows => {
                if i < 0 || i >= hi {
                    None
                } else {
                    Some((i as usize, j.rem_euclid(wi) as usize))
                }
            }
            WrapPolicy::Clamp => Some((i.clamp(0, hi - 1) as usize, j.clamp(0, wi - 1) as usize)),
        }
    }
}

pub(crate) const NO_INDEX: u32 = u32::MAX;

/// The four resolved corners of one bilinear sample plus its fractional
/// position inside the cell.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    /// Plane offsets `row·w + col` of corners 00, 01, 10, 11 (`NO_INDEX` = zero).
    pub idx: [u32; 4],
    pub fr: f64,
    pub fc: f64,
}

impl BilinearTap {
    pub fn new(r: f64, c: f64, h: usize, w: usize, policy: WrapPolicy) -> Self {
        let r0 = r.floor();
        let c0 = c.floor();
        let (ri, ci) = (r0 as i64, c0 as i64);
        let mut idx = [NO_INDEX; 4];
        for (k, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            if let Some((a, b)) = policy.resolve(ri + di, ci + dj, h, w) {
                idx[k] = (a * w + b) as u32;
            }
        }
        BilinearTap {
            idx,
            fr: r - r0,
            fc: c - c0,
        }
    }

    #[inline]
    fn weights<T: Real>(&self) -> [T; 4] {
        let fr = T::lit(self.fr);
        let fc = T::lit(self.fc);
        let gr = T::one() - fr;
        let gc = T::one() - fc;
        [gr * gc, gr * fc, fr * gc, fr * fc]
    }

    #[inline]
    fn corner<T: Real>(&self, plane: &[T], k: usize) -> T {
        match self.idx[k] {
            NO_INDEX => T::zero(),
            i => plane[i as usize],
        }
    }

    /// Interpolated value on one channel plane.
    #[inline]
    pub fn sample<T: Real>(&self, plane: &[T]) -> T {
        let wts = self.weights::<T>();
        let mut acc = T::zero();
        for (k, wt) in wts.into_iter().enumerate() {
            if self.idx[k] != NO_INDEX {
                acc = acc + wt * plane[self.idx[k] as usize];
            }
        }
        acc
    }

    /// Scatters `g · weight` into the four corners of a gradient plane.
    #[inline]
    pub fn scatter<T: Real>(&self, grad_plane: &mut [T], g: T) {
        let wts = self.weights::<T>();
        for (k, wt) in wts.into_iter().enumerate() {
            if self.idx[k] != NO_INDEX {
                let i = self.idx[k] as usize;
                grad_plane[i] = grad_plane[i] + g * wt;
            }
        }
    }

    /// `(∂v/∂row, ∂v/∂col)` of the interpolated value. At integer positions
    /// this is the right-continuous branch (the cell starting at the point).
    #[inline]
    pub fn coord_grad<T: Real>(&self, plane: &[T]) -> (T, T) {
        let v00 = self.corner(plane, 0);
        let v01 = self.corner(plane, 1);
        let v10 = self.corner(plane, 2);
        let v11 = self.corner(plane, 3);
        let fr = T::lit(self.fr);
        let fc = T::lit(self.fc);
        let dr = (T::one() - fc) * (v10 - v00) + fc * (v11 - v01);
        let dc = (T::one() - fr) * (v01 - v00) + fr * (v11 - v10);
        (dr, dc)
    }
}

fn check_coord(r: f64, c: f64) -> Result<()> {
    if !r.is_finite() || !c.is_finite() {
        return Err(Error::NonFinite(format!("sampling coordinate ({r}, {c})")));
    }
    Ok(())
}

fn plane_dims<T: Real>(features: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *features.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(
            "bilinear_sample",
            format!("expected c×h×w features, got {:?}", features.shape()),
        )),
    }
}

/// Bilinear sample of every channel of a `c×h×w` (or `1×c×h×w`) map at the
/// fractional position `at = (row, col)`.
pub fn bilinear_sample<T: Real>(features: &Tensor<T>, at: (f64, f64), wrap: WrapPolicy) -> Result<Vec<T>> {
    let (c, h, w) = plane_dims(features)?;
    check_coord(at.0, at.1)?;
    let tap = BilinearTap::new(at.0, at.1, h, w, wrap);
    Ok(features.data().chunks(h * w).take(c).map(|p| tap.sample(p)).collect())
}

/// Backward of [`bilinear_sample`]: accumulates into `features.grad` and
/// returns the gradient with respect to `(row, col)`.
pub fn bilinear_sample_backward<T: Real>(
    features: &mut Tensor<T>,
    at: (f64, f64),
    wrap: WrapPolicy,
    grad_out: &[T],
) -> Result<(T, T)> {
    let (c, h, w) = plane_dims(features)?;
    check_coord(at.0, at.1)?;
    if grad_out.len() != c {
        return Err(Error::shape("bilinear_sample_backward", format!("{} grads for {c} channels", grad_out.len())));
    }
    let tap = BilinearTap::new(at.0, at.1, h, w, wrap);
    let (mut dr, mut dc) = (T::zero(), T::zero());
    for (ch, &g) in grad_out.iter().enumerate() {
        let plane = &features.data()[ch * h * w..(ch + 1) * h * w];
        let (a, b) = tap.coord_grad(plane);
        dr = dr + g * a;
        dc = dc + g * b;
    }
    let grad = features.grad_mut();
    for (ch, &g) in grad_out.iter().enumerate() {
        tap.scatter(&mut grad[ch * h * w..(ch + 1) * h * w], g);
    }
    Ok((dr, dc))
}

/// Per-pixel, per-tap fractional source coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    coords: Vec<[f64; 2]>,
    pub policy: WrapPolicy,
    /// Tangent-plane spacing when the grid came from the inverse gnomonic
    /// projection; required for tangent-plane deformation.
    pub tangent_step: Option<f64>,
}

impl SamplingGrid {
    pub fn new(h: usize, w: usize, k: usize, coords: Vec<[f64; 2]>, policy: WrapPolicy) -> Result<Self> {
        if coords.len() != h * w * k * k {
            return Err(Error::shape(
                "SamplingGrid::new",
                format!("{} coordinates for {h}x{w} pixels with {} taps", coords.len(), k * k),
            ));
        }
        if let Some(c) = coords.iter().find(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::NonFinite(format!("sampling grid coordinate {c:?}")));
        }
        Ok(SamplingGrid {
            h,
            w,
            k,
            coords,
            policy,
            tangent_step: None,
        })
    }

    /// Integer `k×k` stencil around every pixel (ordinary convolution taps).
    pub fn planar(h: usize, w: usize, k: usize, policy: WrapPolicy) -> Result<Self> {
        sphere::check_odd(k)?;
        let taps = sphere::stencil(k);
        let mut coords = Vec::with_capacity(h * w * taps.len());
        for i in 0..h {
            for j in 0..w {
                for &(di, dj) in &taps {
                    coords.push([(i as i64 + di) as f64, (j as i64 + dj) as f64]);
                }
            }
        }
        Self::new(h, w, k, coords, policy)
    }

    /// Inverse-gnomonic grid with the tangent step recorded.
    pub fn inverse_gnomonic(grid: &EquirectGrid, k: usize, step: f64) -> Result<Self> {
        let mut g = sphere::ig_sampling_grid(grid, k, step)?;
        g.tangent_step = Some(step);
        Ok(g)
    }

    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    #[inline]
    pub fn coord(&self, i: usize, j: usize, tap: usize) -> [f64; 2] {
        self.coords[(i * self.w + j) * self.k * self.k + tap]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }
}

/// Unfolded features: `n` matrices of `(c·k²) × (out_h·out_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnBuffer<T: Real> {
    pub n: usize,
    pub rows: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub data: Vec<T>,
}

impl<T: Real> ColumnBuffer<T> {
    pub fn zeros(n: usize, rows: usize, out_h: usize, out_w: usize) -> Self {
        ColumnBuffer {
            n,
            rows,
            out_h,
            out_w,
            data: vec![T::zero(); n * rows * out_h * out_w],
        }
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn item(&self, n: usize) -> &[T] {
        let per = self.rows * self.cols();
        &self.data[n * per..(n + 1) * per]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let per = self.rows * self.cols();
        &mut self.data[n * per..(n + 1) * per]
    }
}

/// Border handling for integer unfolding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zeros on every side.
    Zero,
    /// Zeros above and below, columns wrap around (panorama seam).
    WrapHorizontal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Unfold {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl Unfold {
    /// Odd kernel with "same" padding `(k-1)/2`, wrapping horizontally.
    pub fn panorama(k: usize, stride: usize) -> Self {
        Unfold {
            k,
            stride,
            pad: k / 2,
            padding: Padding::WrapHorizontal,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |n: usize| -> Option<usize> {
            let padded = n + 2 * self.pad;
            (padded >= self.k).then(|| (padded - self.k) / self.stride + 1)
        };
        match (span(h), span(w)) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => Ok((a, b)),
            _ => Err(Error::InvalidArgument(format!(
                "unfold k={} stride={} pad={} leaves no output for {h}x{w}",
                self.k, self.stride, self.pad
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        sphere::check_odd(self.k)?;
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        Ok(())
    }

    #[inline]
    fn source(&self, oi: usize, oj: usize, di: usize, dj: usize, h: usize, w: usize) -> Option<usize> {
        let i = (oi * self.stride + di) as i64 - self.pad as i64;
        let j = (oj * self.stride + dj) as i64 - self.pad as i64;
        if i < 0 || i >= h as i64 {
            return None;
        }
        let j = match self.padding {
            Padding::Zero if j < 0 || j >= w as i64 => return None,
            Padding::Zero => j,
            Padding::WrapHorizontal => j.rem_euclid(w as i64),
        };
        Some(i as usize * w + j as usize)
    }
}

/// Integer-offset unfolding (no interpolation).
pub fn im2col<T: Real>(features: &Tensor<T>, spec: Unfold) -> Result<ColumnBuffer<T>> {
    spec.validate()?;
    let (n, c, h, w) = features.dims4()?;
    let (oh, ow) = spec.out_size(h, w)?;
    let k = spec.k;
    let mut cols = ColumnBuffer::zeros(n, c * k * k, oh, ow);
    let p = oh * ow;
    for b in 0..n {
        let src = features.item(b);
        let dst = cols.item_mut(b);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let row = &mut dst[(ch * k * k + di * k + dj) * p..][..p];
                    for oi in 0..oh {
                        for oj in 0..ow {
                            if let Some(s) = spec.source(oi, oj, di, dj, h, w) {
                                row[oi * ow + oj] = plane[s];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatters columns back into an `n×c×h×w` map.
pub fn col2im<T: Real>(cols: &ColumnBuffer<T>, shape: [usize; 4], spec: Unfold) -> Result<Tensor<T>> {
    spec.validate()?;
    let [n, c, h, w] = shape;
    let (oh, ow) = spec.out_size(h, w)?;
    let k = spec.k;
    if cols.n != n || cols.rows != c * k * k || cols.out_h != oh || cols.out_w != ow {
        return Err(Error::shape("col2im", format!("columns do not match target {shape:?}")));
    }
    let mut out = Tensor::zeros(&shape)?;
    let p = oh * ow;
    for b in 0..n {
        let src = cols.item(b);
        let dst = out.item_mut(b);
        for ch in 0..c {
            let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let row = &src[(ch * k * k + di * k + dj) * p..][..p];
                    for oi in 0..oh {
                        for oj in 0..ow {
                            if let Some(s) = spec.source(oi, oj, di, dj, h, w) {
                                plane[s] = plane[s] + row[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Interpretation of a learned offset tensor in [`deform_im2col`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OffsetMode {
    /// `2k²` channels of `(x, y)` tangent-plane deltas per tap, added before
    /// the inverse gnomonic projection. Each component is clipped to `±cap`.
    Tangent { cap: f64 },
    /// `2k²` channels of `(row, col)` pixel deltas per tap, added after the
    /// grid coordinates.
    Pixel,
}

/// What [`deform_im2col`] keeps for the backward pass; `O(n·h·w·k²)`.
#[derive(Clone, Debug)]
pub struct DeformCache {
    pub n: usize,
    pub taps: Vec<BilinearTap>,
    /// `d(row, col)/d(offset pair)` per tap; identity in pixel mode.
    pub jacobians: Option<Vec<[f64; 4]>>,
    pub mode: Option<OffsetMode>,
}

impl DeformCache {
    pub fn bytes(&self) -> usize {
        self.taps.capacity() * std::mem::size_of::<BilinearTap>()
            + self.jacobians.as_ref().map_or(0, |j| j.capacity() * std::mem::size_of::<[f64; 4]>())
    }
}

/// Fractional `(row, col)` of one tap after applying its learned delta, plus
/// the derivative of that coordinate with respect to the delta.
fn deformed_coord(
    grid: &SamplingGrid,
    eq: Option<&EquirectGrid>,
    i: usize,
    j: usize,
    tap: usize,
    offset: (i64, i64),
    delta: Option<(f64, f64)>,
    mode: Option<OffsetMode>,
) -> ([f64; 2], [f64; 4]) {
    match (mode, delta) {
        (Some(OffsetMode::Tangent { cap }), Some((dx, dy))) => {
            let eq = eq.expect("tangent mode carries an equirect grid");
            let step = grid.tangent_step.expect("checked by caller");
            let (di, dj) = offset;
            let base = sphere::tap_tangent(di, dj, step);
            let (cx, gx) = clip(dx, cap);
            let (cy, gy) = clip(dy, cap);
            let s = TangentCoord::new(base.x + cx, base.y + cy);
            let t = eq.pixel_to_sphere(i as f64, j as f64);
            let p = sphere::inverse_gnomonic(t, s);
            let (r, c) = eq.sphere_to_pixel(p);
            let jac = sphere::inverse_gnomonic_jacobian(t, s);
            // row = (π/2 − φ)·h/π − ½ ;  col = (θ + π)·w/2π − ½
            let sr = -(eq.h as f64) / std::f64::consts::PI;
            let sc = eq.w as f64 / std::f64::consts::TAU;
            (
                [r, c],
                [sr * jac[0][0] * gx, sr * jac[0][1] * gy, sc * jac[1][0] * gx, sc * jac[1][1] * gy],
            )
        }
        (Some(OffsetMode::Pixel), Some((dr, dc))) => {
            let [r, c] = grid.coord(i, j, tap);
            ([r + dr, c + dc], [1.0, 0.0, 0.0, 1.0])
        }
        _ => (grid.coord(i, j, tap), [0.0; 4]),
    }
}

#[inline]
fn clip(v: f64, cap: f64) -> (f64, f64) {
    if v > cap {
        (cap, 0.0)
    } else if v < -cap {
        (-cap, 0.0)
    } else {
        (v, 1.0)
    }
}

/// Unfolds `features` at the (optionally deformed) grid coordinates with
/// bilinear interpolation. Output pixels coincide with input pixels.
pub fn deform_im2col<T: Real>(
    features: &Tensor<T>,
    grid: &SamplingGrid,
    offsets: Option<(&Tensor<T>, OffsetMode)>,
) -> Result<(ColumnBuffer<T>, DeformCache)> {
    let (n, c, h, w) = features.dims4()?;
    if (h, w) != (grid.h, grid.w) {
        return Err(Error::shape(
            "deform_im2col",
            format!("grid {}x{} vs features {h}x{w}", grid.h, grid.w),
        ));
    }
    let kk = grid.taps();
    let eq = match offsets {
        Some((off, mode)) => {
            if off.shape() != [n, 2 * kk, h, w] {
                return Err(Error::shape(
                    "deform_im2col",
                    format!("offsets {:?}, expected {:?}", off.shape(), [n, 2 * kk, h, w]),
                ));
            }
            if let OffsetMode::Tangent { .. } = mode {
                if grid.tangent_step.is_none() {
                    return Err(Error::InvalidArgument(
                        "tangent-plane offsets need an inverse-gnomonic grid".into(),
                    ));
                }
                Some(EquirectGrid::new(h, w)?)
            } else {
                None
            }
        }
        None => None,
    };
    let mode = offsets.map(|(_, m)| m);
    let p = h * w;
    let stencil = sphere::stencil(grid.k);
    let mut cols = ColumnBuffer::zeros(n, c * kk, h, w);
    let mut taps = Vec::with_capacity(n * p * kk);
    let mut jacobians = offsets.map(|_| Vec::with_capacity(n * p * kk));
    for b in 0..n {
        let off = offsets.map(|(o, _)| o.item(b));
        for i in 0..h {
            for j in 0..w {
                let pix = i * w + j;
                for tap in 0..kk {
                    let delta = off.map(|o| (o[2 * tap * p + pix].as_f64(), o[(2 * tap + 1) * p + pix].as_f64()));
                    let ([r, cc], jac) = deformed_coord(grid, eq.as_ref(), i, j, tap, stencil[tap], delta, mode);
                    check_coord(r, cc)?;
                    taps.push(BilinearTap::new(r, cc, h, w, grid.policy));
                    if let Some(js) = jacobians.as_mut() {
                        js.push(jac);
                    }
                }
            }
        }
        let src = features.item(b);
        let dst = cols.item_mut(b);
        let bt = &taps[b * p * kk..];
        for ch in 0..c {
            let plane = &src[ch * p..(ch + 1) * p];
            for tap in 0..kk {
                let row = &mut dst[(ch * kk + tap) * p..][..p];
                for (pix, v) in row.iter_mut().enumerate() {
                    *v = bt[pix * kk + tap].sample(plane);
                }
            }
        }
    }
    Ok((cols, DeformCache { n, taps, jacobians, mode }))
}

/// Backward of [`deform_im2col`]: gradients for the features and, when
/// offsets were used, for the offsets.
pub fn deform_im2col_backward<T: Real>(
    grad_cols: &ColumnBuffer<T>,
    features: &Tensor<T>,
    cache: &DeformCache,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (n, c, h, w) = features.dims4()?;
    let p = h * w;
    let kk = grad_cols.rows / c;
    if grad_cols.n != n || grad_cols.rows != c * kk || grad_cols.cols() != p || cache.taps.len() != n * p * kk {
        return Err(Error::shape("deform_im2col_backward", "column gradient does not match cache"));
    }
    let mut gfeat = Tensor::zeros(features.shape())?;
    let mut goff = match cache.jacobians {
        Some(_) => Some(Tensor::zeros(&[n, 2 * kk, h, w])?),
        None => None,
    };
    for b in 0..n {
        let src = features.item(b);
        let gsrc = grad_cols.item(b);
        let bt = &cache.taps[b * p * kk..(b + 1) * p * kk];
        let gdst = gfeat.item_mut(b);
        for ch in 0..c {
            let plane = &mut gdst[ch * p..(ch + 1) * p];
            for tap in 0..kk {
                let row = &gsrc[(ch * kk + tap) * p..][..p];
                for (pix, &g) in row.iter().enumerate() {
                    bt[pix * kk + tap].scatter(plane, g);
                }
            }
        }
        if let (Some(go), Some(jacs)) = (goff.as_mut(), cache.jacobians.as_ref()) {
            let jacs = &jacs[b * p * kk..(b + 1) * p * kk];
            let go = go.item_mut(b);
            for pix in 0..p {
                for tap in 0..kk {
                    let t = &bt[pix * kk + tap];
                    let (mut dr, mut dc) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let g = gsrc[(ch * kk + tap) * p + pix];
                        let (a, bb) = t.coord_grad(&src[ch * p..(ch + 1) * p]);
                        dr = dr + g * a;
                        dc = dc + g * bb;
                    }
                    let j = jacs[pix * kk + tap];
                    let (dr, dc) = (dr.as_f64(), dc.as_f64());
                    go[2 * tap * p + pix] = T::lit(dr * j[0] + dc * j[2]);
                    go[(2 * tap + 1) * p + pix] = T::lit(dr * j[1] + dc * j[3]);
                }
            }
        }
    }
    Ok((gfeat, goff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_spot_values() {
        let f = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let v = bilinear_sample(&f, (0.5, 0.5), WrapPolicy::Clamp).unwrap();
        assert_eq!(v, vec![1.5]);
        let v = bilinear_sample(&f, (0.0, 0.0), WrapPolicy::Clamp).unwrap();
        assert_eq!(v, vec![0.0]);
        assert!(bilinear_sample(&f, (f64::NAN, 0.0), WrapPolicy::Clamp).is_err());
    }

    #[test]
    fn bilinear_coordinate_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Tensor::<f64>::randn(&[3, 6, 12], 4).unwrap();
        let wsum = [0.3, -1.2, 0.7];
        let loss = |r: f64, c: f64, pol| {
            bilinear_sample(&f, (r, c), pol)
                .unwrap()
                .iter()
                .zip(wsum)
                .map(|(v, w)| v * w)
                .sum::<f64>()
        };
        for pol in [WrapPolicy::Spherical, WrapPolicy::ZeroRows, WrapPolicy::Clamp] {
            for _ in 0..100 {
                let r: f64 = rng.random_range(-2.0..7.0);
                let c: f64 = rng.random_range(-3.0..14.0);
                if (r - r.round()).abs() < 1e-3 || (c - c.round()).abs() < 1e-3 {
                    continue;
                }
                let mut ff = f.clone();
                let (dr, dc) = bilinear_sample_backward(&mut ff, (r, c), pol, &wsum).unwrap();
                let h = 1e-5;
                let nr = (loss(r + h, c, pol) - loss(r - h, c, pol)) / (2.0 * h);
                let nc = (loss(r, c + h, pol) - loss(r, c - h, pol)) / (2.0 * h);
                assert!((nr - dr).abs() <= 1e-4 * nr.abs().max(dr.abs()).max(1e-6), "{pol:?} dr {dr} vs {nr}");
                assert!((nc - dc).abs() <= 1e-4 * nc.abs().max(dc.abs()).max(1e-6), "{pol:?} dc {dc} vs {nc}");
            }
        }
    }

    #[test]
    fn spherical_policy_reflects_over_poles() {
        // row -1 is row 0 seen across the north pole, half a turn away
        assert_eq!(WrapPolicy::Spherical.resolve(-1, 0, 4, 8), Some((0, 4)));
        assert_eq!(WrapPolicy::Spherical.resolve(4, 1, 4, 8), Some((3, 5)));
        // three reflections: -9 -> 8 -> -1 -> 0
        assert_eq!(WrapPolicy::Spherical.resolve(-9, 3, 4, 8), Some((0, 7)));
        assert_eq!(WrapPolicy::Spherical.resolve(2, -1, 4, 8), Some((2, 7)));
        assert_eq!(WrapPolicy::ZeroRows.resolve(-1, 0, 4, 8), None);
        assert_eq!(WrapPolicy::Clamp.resolve(-1, 9, 4, 8), Some((0, 7)));
    }

    #[test]
    fn wrap_continuity_across_seam() {
        let f = Tensor::<f64>::randn(&[2, 5, 10], 12).unwrap();
        let eps = 1e-6;
        for r in [0.25, 2.0, 3.7] {
            let a = bilinear_sample(&f, (r, 10.0 - eps), WrapPolicy::Spherical).unwrap();
            let b = bilinear_sample(&f, (r, 0.0 - 1e-12), WrapPolicy::Spherical).unwrap();
            let c = bilinear_sample(&f, (r, 10.0), WrapPolicy::Spherical).unwrap();
            for ((x, y), z) in a.iter().zip(&b).zip(&c) {
                assert!((x - y).abs() < 1e-5);
                assert!((y - z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ig_grid_seam_columns_are_adjacent() {
        let eq = EquirectGrid::new(16, 32).unwrap();
        // θ = −π and θ = π − ε land in the cell between the last and first column
        let (_, c0) = eq.sphere_to_pixel(sphere::SphereCoord::new(0.1, -std::f64::consts::PI));
        let (_, c1) = eq.sphere_to_pixel(sphere::SphereCoord::new(0.1, std::f64::consts::PI - 1e-9));
        let t0 = BilinearTap::new(3.0, c0, 16, 32, WrapPolicy::Spherical);
        let t1 = BilinearTap::new(3.0, c1, 16, 32, WrapPolicy::Spherical);
        let col = |t: &BilinearTap, k: usize| t.idx[k] as usize % 32;
        assert_eq!((col(&t0, 0), col(&t0, 1)), (31, 0));
        assert_eq!((col(&t1, 0), col(&t1, 1)), (31, 0));
    }

    fn nested_unfold(x: &Tensor<f64>, k: usize) -> Vec<f64> {
        let (_, c, h, w) = x.dims4().unwrap();
        let r = (k / 2) as i64;
        let mut out = vec![];
        for ch in 0..c {
            for di in -r..=r {
                for dj in -r..=r {
                    for i in 0..h as i64 {
                        for j in 0..w as i64 {
                            let (si, sj) = (i + di, j + dj);
                            let v = if si < 0 || si >= h as i64 {
                                0.0
                            } else {
                                x.data()[ch * h * w + si as usize * w + sj.rem_euclid(w as i64) as usize]
                            };
                            out.push(v);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_k1_is_a_reshape() {
        let x = Tensor::<f64>::randn(&[2, 3, 4, 5], 1).unwrap();
        let cols = im2col(&x, Unfold::panorama(1, 1)).unwrap();
        assert_eq!(cols.data, x.data());
    }

    #[test]
    fn im2col_matches_nested_loops() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64).unwrap();
        let cols = im2col(&x, Unfold::panorama(3, 1)).unwrap();
        assert_eq!(cols.data, nested_unfold(&x, 3));
        let x = Tensor::<f64>::randn(&[1, 2, 5, 6], 3).unwrap();
        assert_eq!(im2col(&x, Unfold::panorama(5, 1)).unwrap().data, nested_unfold(&x, 5));
    }

    #[test]
    fn im2col_rejects_degenerate_sizes() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        let spec = Unfold { k: 5, stride: 1, pad: 0, padding: Padding::Zero };
        assert!(im2col(&x, spec).is_err());
        assert!(im2col(&x, Unfold::panorama(2, 1)).is_err());
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        for spec in [
            Unfold::panorama(3, 1),
            Unfold::panorama(3, 2),
            Unfold { k: 3, stride: 2, pad: 1, padding: Padding::Zero },
        ] {
            let x = Tensor::<f64>::randn(&[2, 2, 6, 8], 5).unwrap();
            let cols = im2col(&x, spec).unwrap();
            let y = ColumnBuffer {
                data: Tensor::<f64>::randn(&[cols.data.len()], 6).unwrap().into_data(),
                ..cols.clone()
            };
            let lhs: f64 = cols.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
            let back = col2im(&y, [2, 2, 6, 8], spec).unwrap();
            let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn deform_with_planar_grid_equals_im2col_exactly() {
        let x = Tensor::<f64>::randn(&[2, 3, 5, 8], 8).unwrap();
        let grid = SamplingGrid::planar(5, 8, 3, WrapPolicy::ZeroRows).unwrap();
        let (cols, _) = deform_im2col(&x, &grid, None).unwrap();
        assert_eq!(cols.data, im2col(&x, Unfold::panorama(3, 1)).unwrap().data);
        let zeros = Tensor::zeros(&[2, 18, 5, 8]).unwrap();
        let (cols2, _) = deform_im2col(&x, &grid, Some((&zeros, OffsetMode::Pixel))).unwrap();
        assert_eq!(cols2.data, cols.data);
    }

    #[test]
    fn deform_rejects_mismatched_grid() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 8]).unwrap();
        let grid = SamplingGrid::planar(5, 8, 3, WrapPolicy::ZeroRows).unwrap();
        assert!(matches!(deform_im2col(&x, &grid, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn ig_deform_at_equator_tracks_planar_im2col() {
        let (h, w) = (256, 512);
        let eq = EquirectGrid::new(h, w).unwrap();
        // smooth input: low-frequency function of the pixel position
        let x = Tensor::<f64>::from_fn(&[1, 1, h, w], |idx| {
            let (i, j) = ((idx / w) as f64, (idx % w) as f64);
            (i * 0.05).sin() + (j * std::f64::consts::TAU / w as f64 * 3.0).cos()
        })
        .unwrap();
        // restrict to an equatorial strip to keep the test quick
        let grid = SamplingGrid::inverse_gnomonic(&eq, 3, eq.pitch()).unwrap();
        let (cols, _) = deform_im2col(&x, &grid, None).unwrap();
        let planar = im2col(&x, Unfold::panorama(3, 1)).unwrap();
        let p = h * w;
        let mut worst = 0.0f64;
        for tap in 0..9 {
            for i in 120..136 {
                for j in 0..w {
                    let a = cols.data[tap * p + i * w + j];
                    let b = planar.data[tap * p + i * w + j];
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst < 1e-2, "equator deviation {worst}");
    }

    #[test]
    fn offset_gradients_match_finite_differences() {
        let eq = EquirectGrid::new(6, 12).unwrap();
        let grid = SamplingGrid::inverse_gnomonic(&eq, 3, eq.pitch()).unwrap();
        let x = Tensor::<f64>::randn(&[1, 2, 6, 12], 21).unwrap();
        let off0 = Tensor::<f64>::randn(&[1, 18, 6, 12], 22).unwrap().map(|v| 0.2 * v);
        let probe = Tensor::<f64>::randn(&[2 * 9 * 72], 23).unwrap();
        for mode in [OffsetMode::Tangent { cap: 10.0 }, OffsetMode::Pixel] {
            let loss = |off: &Tensor<f64>| {
                let (cols, _) = deform_im2col(&x, &grid, Some((off, mode))).unwrap();
                cols.data.iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let (_, cache) = deform_im2col(&x, &grid, Some((&off0, mode))).unwrap();
            let gcols = ColumnBuffer { n: 1, rows: 18, out_h: 6, out_w: 12, data: probe.data().to_vec() };
            let (_, goff) = deform_im2col_backward(&gcols, &x, &cache).unwrap();
            let goff = goff.unwrap();
            let h = 1e-6;
            let mut checked = 0;
            for idx in (0..off0.numel()).step_by(7) {
                let mut a = off0.clone();
                a.data_mut()[idx] += h;
                let mut b = off0.clone();
                b.data_mut()[idx] -= h;
                let (fa, fb) = (loss(&a), loss(&b));
                let mut c = off0.clone();
                c.data_mut()[idx] += 0.0;
                let f0 = loss(&c);
                // skip kinks: one-sided slopes disagree when a lattice line is crossed
                if ((fa - f0) - (f0 - fb)).abs() / h > 1e-3 {
                    continue;
                }
                let num = (fa - fb) / (2.0 * h);
                let ana = goff.data()[idx];
                assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6), "{mode:?} idx {idx}: {ana} vs {num}");
                checked += 1;
            }
            assert!(checked > 100);
        }
    }

    proptest! {
        #[test]
        fn sampling_is_linear_in_features(
            r in -1.0f64..5.0, c in -2.0f64..9.0, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000,
        ) {
            let f1 = Tensor::<f64>::randn(&[2, 4, 8], seed).unwrap();
            let f2 = Tensor::<f64>::randn(&[2, 4, 8], seed + 1).unwrap();
            let mix = Tensor::new(&[2, 4, 8], f1.data().iter().zip(f2.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
            for pol in [WrapPolicy::Spherical, WrapPolicy::ZeroRows, WrapPolicy::Clamp] {
                let s = bilinear_sample(&mix, (r, c), pol).unwrap();
                let s1 = bilinear_sample(&f1, (r, c), pol).unwrap();
                let s2 = bilinear_sample(&f2, (r, c), pol).unwrap();
                for ch in 0..2 {
                    prop_assert!((s[ch] - (alpha * s1[ch] + beta * s2[ch])).abs() < 1e-12);
                }
            }
        }
    }
}
