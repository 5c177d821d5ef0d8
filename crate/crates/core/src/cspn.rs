//! Spatial propagation refinement with sensor-depth replacement.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::missing_cache;
use crate::sampling::{BilinearTap, SamplingGrid, WrapPolicy};
use crate::sphere::{self, EquirectGrid};
use crate::tensor::{Real, Tensor};

/// Guard below which an affinity field is treated as all-zero.
pub const AFFINITY_EPS: f64 = 1e-12;

/// Metric sensor depth with its availability mask (`mask == (dp > 0)`).
#[derive(Clone, Debug, PartialEq)]
pub struct SensorDepth<T: Real> {
    pub dp: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> SensorDepth<T> {
    pub fn new(dp: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        dp.same_shape(&mask, "sensor depth")?;
        for (q, (&d, &m)) in dp.data().iter().zip(mask.data()).enumerate() {
            let want = if d > T::zero() { T::one() } else { T::zero() };
            if m != want {
                return Err(Error::InvalidArgument(format!(
                    "sensor mask disagrees with depth at flat index {q} (dp {}, mask {})",
                    d.as_f64(),
                    m.as_f64()
                )));
            }
        }
        Ok(SensorDepth { dp, mask })
    }

    pub fn from_depth(dp: Tensor<T>) -> Self {
        let mask = dp.map(|d| if d > T::zero() { T::one() } else { T::zero() });
        SensorDepth { dp, mask }
    }

    /// Fraction of pixels with a measurement.
    pub fn coverage(&self) -> f64 {
        self.mask.data().iter().filter(|&&m| m > T::zero()).count() as f64 / self.mask.numel() as f64
    }
}

/// Normalized neighbor weights `κ` (`k²−1` channels) and center weight `κ(0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityField<T: Real> {
    pub kappa: Tensor<T>,
    pub center: Tensor<T>,
}

/// `κ = κ̂ / Σ|κ̂|`, `κ(0) = 1 − Σκ`; pixels with `Σ|κ̂| < 1e-12` become the
/// identity (`κ = 0`, `κ(0) = 1`).
pub fn normalize_affinity<T: Real>(raw: &Tensor<T>) -> Result<AffinityField<T>> {
    let (n, m, h, w) = raw.dims4()?;
    let p = h * w;
    let mut kappa = Tensor::zeros(raw.shape())?;
    let mut center = Tensor::zeros(&[n, 1, h, w])?;
    for b in 0..n {
        let r = raw.item(b);
        let kd = kappa.item_mut(b);
        for pix in 0..p {
            let s: f64 = (0..m).map(|t| r[t * p + pix].as_f64().abs()).sum();
            if s < AFFINITY_EPS {
                center.item_mut(b)[pix] = T::one();
                continue;
            }
            let mut total = T::zero();
            for t in 0..m {
                let v = T::lit(r[t * p + pix].as_f64() / s);
                kd[t * p + pix] = v;
                total = total + v;
            }
            center.item_mut(b)[pix] = T::one() - total;
        }
    }
    Ok(AffinityField { kappa, center })
}

/// Backward of [`normalize_affinity`] given gradients of `κ` and `κ(0)`.
pub fn normalize_affinity_backward<T: Real>(
    raw: &Tensor<T>,
    grad_kappa: &Tensor<T>,
    grad_center: &Tensor<T>,
) -> Result<Tensor<T>> {
    raw.same_shape(grad_kappa, "normalize_affinity backward")?;
    let (n, m, h, w) = raw.dims4()?;
    let p = h * w;
    if grad_center.shape() != [n, 1, h, w] {
        return Err(Error::shape("normalize_affinity backward", "center gradient shape"));
    }
    let mut g = Tensor::zeros(raw.shape())?;
    let mut gp = vec![0.0; m];
    for b in 0..n {
        let r = raw.item(b);
        let gk = grad_kappa.item(b);
        let gc = grad_center.item(b);
        let gd = g.item_mut(b);
        for pix in 0..p {
            let s: f64 = (0..m).map(|t| r[t * p + pix].as_f64().abs()).sum();
            if s < AFFINITY_EPS {
                continue;
            }
            let g0 = gc[pix].as_f64();
            let mut dotp = 0.0;
            for t in 0..m {
                gp[t] = gk[t * p + pix].as_f64() - g0;
                dotp += gp[t] * r[t * p + pix].as_f64();
            }
            for t in 0..m {
                let sign = r[t * p + pix].as_f64().signum();
                let sign = if r[t * p + pix].as_f64() == 0.0 { 0.0 } else { sign };
                gd[t * p + pix] = T::lit(gp[t] / s - sign * dotp / (s * s));
            }
        }
    }
    Ok(g)
}

/// Neighborhood used by the propagation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CspnVariant {
    /// Integer 8-neighborhood (for `k = 3`).
    Cspn,
    /// Inverse-gnomonic neighborhood.
    Ig,
    /// Inverse-gnomonic neighborhood plus learned pixel-space offsets.
    D,
}

impl FromStr for CspnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cspn" => Ok(CspnVariant::Cspn),
            "ig" => Ok(CspnVariant::Ig),
            "d" => Ok(CspnVariant::D),
            _ => Err(Error::Config(format!("unknown cspn variant '{s}' (cspn|ig|d)"))),
        }
    }
}

impl fmt::Display for CspnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CspnVariant::Cspn => "cspn",
            CspnVariant::Ig => "ig",
            CspnVariant::D => "d",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationConfig {
    pub k: usize,
    pub iterations: usize,
    pub variant: CspnVariant,
}

impl PropagationConfig {
    pub fn new(variant: CspnVariant) -> Self {
        PropagationConfig { k: 3, iterations: 12, variant }
    }

    pub fn validate(&self) -> Result<()> {
        sphere::check_odd(self.k)?;
        if self.k < 3 {
            return Err(Error::Config("cspn kernel must be at least 3".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("cspn needs at least one iteration".into()));
        }
        Ok(())
    }

    /// Number of neighbor channels, `k² − 1`.
    pub fn neighbors(&self) -> usize {
        self.k * self.k - 1
    }
}

/// Neighbor coordinates per pixel, excluding the center tap: `[h·w][k²−1]`.
pub fn neighbor_coords(variant: CspnVariant, h: usize, w: usize, k: usize) -> Result<Vec<[f64; 2]>> {
    let grid = match variant {
        CspnVariant::Cspn => SamplingGrid::planar(h, w, k, WrapPolicy::Spherical)?,
        CspnVariant::Ig | CspnVariant::D => {
            let eq = EquirectGrid::new(h, w)?;
            SamplingGrid::inverse_gnomonic(&eq, k, eq.pitch())?
        }
    };
    let kk = k * k;
    let mid = kk / 2;
    Ok(grid
        .coords()
        .chunks(kk)
        .flat_map(|c| c.iter().enumerate().filter(|(t, _)| *t != mid).map(|(_, v)| *v))
        .collect())
}

/// Bilinear taps of every neighbor for every batch item, `[n][h·w][k²−1]`.
pub fn neighbor_taps<T: Real>(
    base: &[[f64; 2]],
    n: usize,
    h: usize,
    w: usize,
    m: usize,
    offsets: Option<&Tensor<T>>,
) -> Result<Vec<BilinearTap>> {
    let p = h * w;
    if let Some(off) = offsets {
        if off.shape() != [n, 2 * m, h, w] {
            return Err(Error::shape("cspn offsets", format!("{:?}, expected {:?}", off.shape(), [n, 2 * m, h, w])));
        }
    }
    let mut taps = Vec::with_capacity(n * p * m);
    for b in 0..n {
        let off = offsets.map(|o| o.item(b));
        for pix in 0..p {
            for t in 0..m {
                let [mut r, mut c] = base[pix * m + t];
                if let Some(o) = off {
                    r += o[2 * t * p + pix].as_f64();
                    c += o[(2 * t + 1) * p + pix].as_f64();
                }
                if !r.is_finite() || !c.is_finite() {
                    return Err(Error::NonFinite(format!("cspn neighbor coordinate ({r}, {c})")));
                }
                taps.push(BilinearTap::new(r, c, h, w, WrapPolicy::Spherical));
            }
        }
    }
    Ok(taps)
}

/// `H' = κ(0)·H₀ + Σ_Δ κ(Δ)·H(neighbor Δ)` for 1-channel maps.
pub fn propagation_step<T: Real>(
    h_tau: &Tensor<T>,
    h0: &Tensor<T>,
    aff: &AffinityField<T>,
    taps: &[BilinearTap],
) -> Result<Tensor<T>> {
    h_tau.same_shape(h0, "propagation_step")?;
    h0.same_shape(&aff.center, "propagation_step")?;
    let (n, c, h, w) = h0.dims4()?;
    let (_, m, _, _) = aff.kappa.dims4()?;
    let p = h * w;
    if c != 1 || aff.kappa.shape() != [n, m, h, w] || taps.len() != n * p * m {
        return Err(Error::shape("propagation_step", "affinity, taps and depth maps disagree"));
    }
    let mut out = Tensor::zeros(h0.shape())?;
    for b in 0..n {
        let (src, base, k0, kap) = (h_tau.item(b), h0.item(b), aff.center.item(b), aff.kappa.item(b));
        let bt = &taps[b * p * m..(b + 1) * p * m];
        let dst = out.item_mut(b);
        for pix in 0..p {
            let mut acc = k0[pix] * base[pix];
            for t in 0..m {
                acc = acc + kap[t * p + pix] * bt[pix * m + t].sample(src);
            }
            dst[pix] = acc;
        }
    }
    Ok(out)
}

/// `(1−m)·H + m·dp`, evaluated as a select so sensor pixels equal `dp` bit-exactly.
pub fn replacement_step<T: Real>(h: &Tensor<T>, sensor: &SensorDepth<T>) -> Result<Tensor<T>> {
    h.same_shape(&sensor.dp, "replacement_step")?;
    let data = h
        .data()
        .iter()
        .zip(sensor.dp.data())
        .zip(sensor.mask.data())
        .map(|((&v, &d), &m)| if m > T::zero() { d } else { v })
        .collect();
    Tensor::new(h.shape(), data)
}

/// Gradients returned by [`Cspn::backward`].
#[derive(Clone, Debug)]
pub struct CspnGrads<T: Real> {
    pub h0: Tensor<T>,
    pub raw: Tensor<T>,
    pub offsets: Option<Tensor<T>>,
}

struct Cache<T: Real> {
    h0: Tensor<T>,
    raw: Tensor<T>,
    aff: AffinityField<T>,
    taps: Vec<BilinearTap>,
    states: Vec<Tensor<T>>,
    mask: Option<Tensor<T>>,
    has_offsets: bool,
}

/// Runs `N` propagation steps, each followed by replacement, and keeps what
/// the backward pass needs.
pub struct Cspn<T: Real> {
    pub config: PropagationConfig,
    base: Option<(usize, usize, Vec<[f64; 2]>)>,
    cache: Option<Cache<T>>,
}

impl<T: Real> Cspn<T> {
    pub fn new(config: PropagationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Cspn { config, base: None, cache: None })
    }

    /// Neighbor coordinates before any learned offset.
    pub fn base_coords(&mut self, h: usize, w: usize) -> Result<&[[f64; 2]]> {
        if self.base.as_ref().is_none_or(|b| (b.0, b.1) != (h, w)) {
            self.base = Some((h, w, neighbor_coords(self.config.variant, h, w, self.config.k)?));
        }
        Ok(&self.base.as_ref().unwrap().2)
    }

    pub fn forward(
        &mut self,
        h0: &Tensor<T>,
        raw: &Tensor<T>,
        offsets: Option<&Tensor<T>>,
        sensor: Option<&SensorDepth<T>>,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = h0.dims4()?;
        let m = self.config.neighbors();
        if c != 1 || raw.shape() != [n, m, h, w] {
            return Err(Error::shape(
                "cspn",
                format!("depth {:?} with affinities {:?}; expected {m} affinity channels", h0.shape(), raw.shape()),
            ));
        }
        match (self.config.variant, offsets) {
            (CspnVariant::D, None) => return Err(Error::InvalidArgument("d-cspn needs offsets".into())),
            (CspnVariant::Cspn | CspnVariant::Ig, Some(_)) => {
                return Err(Error::InvalidArgument(format!("{} variant takes no offsets", self.config.variant)))
            }
            _ => {}
        }
        if let Some(s) = sensor {
            s.dp.same_shape(h0, "cspn sensor")?;
        }
        let aff = normalize_affinity(raw)?;
        let base = self.base_coords(h, w)?;
        let taps = neighbor_taps(base, n, h, w, m, offsets)?;
        let mut states = Vec::with_capacity(self.config.iterations);
        let mut cur = h0.clone();
        for _ in 0..self.config.iterations {
            let next = propagation_step(&cur, h0, &aff, &taps)?;
            let next = match sensor {
                Some(s) => replacement_step(&next, s)?,
                None => next,
            };
            states.push(cur);
            cur = next;
        }
        self.cache = Some(Cache {
            h0: h0.clone(),
            raw: raw.clone(),
            aff,
            taps,
            states,
            mask: sensor.map(|s| s.mask.clone()),
            has_offsets: offsets.is_some(),
        });
        Ok(cur)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<CspnGrads<T>> {
        let Cache { h0, raw, aff, taps, states, mask, has_offsets } =
            self.cache.take().ok_or_else(|| missing_cache("cspn"))?;
        h0.same_shape(grad_out, "cspn backward")?;
        let (n, _, h, w) = h0.dims4()?;
        let m = self.config.neighbors();
        let p = h * w;
        let mut g = grad_out.clone();
        let mut gh0 = Tensor::zeros(h0.shape())?;
        let mut gk = Tensor::zeros(aff.kappa.shape())?;
        let mut gc = Tensor::zeros(aff.center.shape())?;
        let mut goff = if has_offsets { Some(Tensor::zeros(&[n, 2 * m, h, w])?) } else { None };
        for state in states.iter().rev() {
            if let Some(mask) = &mask {
                for (v, &mk) in g.data_mut().iter_mut().zip(mask.data()) {
                    if mk > T::zero() {
                        *v = T::zero();
                    }
                }
            }
            let mut gin = Tensor::zeros(h0.shape())?;
            for b in 0..n {
                let (gb, src, base) = (g.item(b), state.item(b), h0.item(b));
                let (k0, kap) = (aff.center.item(b), aff.kappa.item(b));
                let bt = &taps[b * p * m..(b + 1) * p * m];
                let gh0b = gh0.item_mut(b);
                let gcb = gc.item_mut(b);
                for pix in 0..p {
                    gcb[pix] = gcb[pix] + gb[pix] * base[pix];
                    gh0b[pix] = gh0b[pix] + gb[pix] * k0[pix];
                }
                let gkb = gk.item_mut(b);
                let ginb = gin.item_mut(b);
                for pix in 0..p {
                    let gv = gb[pix];
                    for t in 0..m {
                        let tap = &bt[pix * m + t];
                        gkb[t * p + pix] = gkb[t * p + pix] + gv * tap.sample(src);
                        tap.scatter(ginb, gv * kap[t * p + pix]);
                    }
                }
                if let Some(go) = goff.as_mut() {
                    let gob = go.item_mut(b);
                    for pix in 0..p {
                        let gv = gb[pix];
                        for t in 0..m {
                            let (dr, dc) = bt[pix * m + t].coord_grad(src);
                            let wgt = gv * kap[t * p + pix];
                            gob[2 * t * p + pix] = gob[2 * t * p + pix] + wgt * dr;
                            gob[(2 * t + 1) * p + pix] = gob[(2 * t + 1) * p + pix] + wgt * dc;
                        }
                    }
                }
            }
            g = gin;
        }
        for (a, &v) in gh0.data_mut().iter_mut().zip(g.data()) {
            *a = *a + v;
        }
        let graw = normalize_affinity_backward(&raw, &gk, &gc)?;
        Ok(CspnGrads { h0: gh0, raw: graw, offsets: goff })
    }
}

/// One-shot propagation without keeping a backward cache.
pub fn run_cspn<T: Real>(
    h0: &Tensor<T>,
    raw: &Tensor<T>,
    offsets: Option<&Tensor<T>>,
    sensor: Option<&SensorDepth<T>>,
    config: PropagationConfig,
) -> Result<Tensor<T>> {
    let mut c = Cspn::new(config)?;
    let out = c.forward(h0, raw, offsets, sensor)?;
    c.cache = None;
    Ok(out)
}
