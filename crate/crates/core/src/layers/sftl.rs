use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::sampling::{
    col2im, deform_im2col, deform_im2col_backward, im2col, ColumnBuffer, DeformCache, OffsetMode, SamplingGrid,
    Unfold,
};
use crate::sphere::{self, EquirectGrid};
use crate::tensor::{ew_add, Parameter, Real, Tensor};

use super::conv::{apply_weights, weights_backward};
use super::{join, kaiming, missing_cache, Conv2d, Module, Slot};

/// Sampling neighborhood of a spherical feature transform layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SftlMode {
    /// Integer `k×k` stencil: an ordinary convolution.
    Planar,
    /// Inverse gnomonic taps from each pixel's tangent plane.
    Igt,
    /// Inverse gnomonic taps plus learned tangent-plane offsets.
    Digt,
}

impl FromStr for SftlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planar" => Ok(SftlMode::Planar),
            "igt" => Ok(SftlMode::Igt),
            "digt" => Ok(SftlMode::Digt),
            _ => Err(Error::Config(format!("unknown sftl mode '{s}' (planar|igt|digt)"))),
        }
    }
}

impl fmt::Display for SftlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SftlMode::Planar => "planar",
            SftlMode::Igt => "igt",
            SftlMode::Digt => "digt",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SftlConfig {
    pub mode: SftlMode,
    pub k: usize,
    /// Tangent-plane tap spacing; `None` uses the pixel pitch `π/h`.
    pub step: Option<f64>,
    /// Offset clip in units of the tap spacing.
    pub cap_steps: f64,
}

impl SftlConfig {
    pub fn new(mode: SftlMode, k: usize) -> Self {
        SftlConfig { mode, k, step: None, cap_steps: 4.0 }
    }

    pub fn step_for(&self, h: usize) -> f64 {
        self.step.unwrap_or(std::f64::consts::PI / h as f64)
    }
}

/// One sampled tap as reported by [`Sftl::inspect`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapReport {
    pub tangent: sphere::TangentCoord,
    pub delta: (f64, f64),
    pub coord: (f64, f64),
}

struct Cache<T: Real> {
    input: Tensor<T>,
    cols: ColumnBuffer<T>,
    deform: Option<DeformCache>,
}

/// Convolution whose taps follow the configured sampling neighborhood.
pub struct Sftl<T: Real> {
    pub config: SftlConfig,
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    /// 3×3 head predicting `2k²` tangent offsets (`Digt` only).
    pub offset_head: Option<Conv2d<T>>,
    grid: Option<SamplingGrid>,
    last_offsets: Option<Tensor<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Real> Sftl<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        config: SftlConfig,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let k = config.k;
        sphere::check_odd(k)?;
        let weight = kaiming(&[c_out, c_in, k, k], c_in * k * k, rng);
        let offset_head = if config.mode == SftlMode::Digt {
            let zeros = Tensor::zeros(&[2 * k * k, c_in, 3, 3])?;
            Some(Conv2d::from_weights(
                &join(name, "offset"),
                zeros,
                Some(Tensor::zeros(&[2 * k * k])?),
                Unfold::panorama(3, 1),
            )?)
        } else {
            None
        };
        Ok(Sftl {
            config,
            weight: Parameter::new(join(name, "weight"), weight),
            bias: bias.then(|| Parameter::new(join(name, "bias"), Tensor::zeros(&[c_out]).unwrap())),
            offset_head,
            grid: None,
            last_offsets: None,
            cache: None,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Sampling grid for an `h × w` input, built on first use.
    pub fn grid(&mut self, h: usize, w: usize) -> Result<&SamplingGrid> {
        if self.grid.as_ref().is_none_or(|g| (g.h, g.w) != (h, w)) {
            let eq = EquirectGrid::new(h, w)?;
            self.grid = Some(SamplingGrid::inverse_gnomonic(&eq, self.config.k, self.config.step_for(h))?);
        }
        Ok(self.grid.as_ref().unwrap())
    }

    /// Offsets predicted during the most recent forward pass.
    pub fn last_offsets(&self) -> Option<&Tensor<T>> {
        self.last_offsets.as_ref()
    }

    fn cap(&self, h: usize) -> f64 {
        self.config.cap_steps * self.config.step_for(h)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.c_in() {
            return Err(Error::shape("sftl", format!("input has {c} channels, kernel expects {}", self.c_in())));
        }
        let (cols, deform) = match self.config.mode {
            SftlMode::Planar => (im2col(x, Unfold::panorama(self.config.k, 1))?, None),
            SftlMode::Igt => {
                let (cols, dc) = deform_im2col(x, self.grid(h, w)?, None)?;
                (cols, Some(dc))
            }
            SftlMode::Digt => {
                let cap = self.cap(h);
                let off = self.offset_head.as_mut().expect("digt has an offset head").forward(x)?;
                self.grid(h, w)?;
                let grid = self.grid.as_ref().unwrap();
                let (cols, dc) = deform_im2col(x, grid, Some((&off, OffsetMode::Tangent { cap })))?;
                self.last_offsets = Some(off);
                (cols, Some(dc))
            }
        };
        let y = apply_weights(&self.weight.value, self.bias.as_ref().map(|b| &b.value), &cols)?;
        self.cache = Some(Cache { input: x.clone(), cols, deform });
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let Cache { input, cols, deform } = self.cache.take().ok_or_else(|| missing_cache("sftl"))?;
        let gcols = weights_backward(&mut self.weight, self.bias.as_mut(), &cols, grad_out)?;
        match deform {
            None => {
                let (n, c, h, w) = input.dims4()?;
                col2im(&gcols, [n, c, h, w], Unfold::panorama(self.config.k, 1))
            }
            Some(dc) => {
                let (gx, goff) = deform_im2col_backward(&gcols, &input, &dc)?;
                match (goff, self.offset_head.as_mut()) {
                    (Some(goff), Some(head)) => ew_add(&gx, &head.backward(&goff)?),
                    _ => Ok(gx),
                }
            }
        }
    }

    /// Per-tap sampling details at pixel `(i, j)` of batch item `b`, using the
    /// offsets from the most recent forward pass.
    pub fn inspect(&mut self, b: usize, i: usize, j: usize, h: usize, w: usize) -> Result<Vec<TapReport>> {
        if i >= h || j >= w {
            return Err(Error::InvalidArgument(format!("pixel ({i}, {j}) outside {h}x{w}")));
        }
        let k = self.config.k;
        let step = self.config.step_for(h);
        let cap = self.cap(h);
        let eq = EquirectGrid::new(h, w)?;
        let p = h * w;
        let mode = self.config.mode;
        let offsets = self.last_offsets.as_ref().map(|o| o.item(b).to_vec());
        let mut out = Vec::with_capacity(k * k);
        for (tap, (di, dj)) in sphere::stencil(k).into_iter().enumerate() {
            let tangent = sphere::tap_tangent(di, dj, step);
            let report = match mode {
                SftlMode::Planar => TapReport {
                    tangent,
                    delta: (0.0, 0.0),
                    coord: ((i as i64 + di) as f64, (j as i64 + dj) as f64),
                },
                _ => {
                    let delta = match &offsets {
                        Some(o) if mode == SftlMode::Digt => (
                            o[2 * tap * p + i * w + j].as_f64().clamp(-cap, cap),
                            o[(2 * tap + 1) * p + i * w + j].as_f64().clamp(-cap, cap),
                        ),
                        _ => (0.0, 0.0),
                    };
                    let s = sphere::TangentCoord::new(tangent.x + delta.0, tangent.y + delta.1);
                    TapReport { tangent, delta, coord: sphere::ig_tap_coordinate(&eq, i, j, s) }
                }
            };
            out.push(report);
        }
        Ok(out)
    }
}

impl<T: Real> Module<T> for Sftl<T> {
    fn visit(&mut self, f: &mut dyn FnMut(Slot<'_, T>)) {
        f(Slot::Param(&mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            f(Slot::Param(b));
        }
        if let Some(head) = self.offset_head.as_mut() {
            head.visit(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(mode_a: SftlMode, mode_b: SftlMode, c: usize, seed: u64) -> (Sftl<f64>, Sftl<f64>) {
        let a = Sftl::new("s", c, 4, SftlConfig::new(mode_a, 3), true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = Sftl::new("s", c, 4, SftlConfig::new(mode_b, 3), true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (a, b)
    }

    #[test]
    fn planar_matches_conv_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = Sftl::<f64>::new("s", 3, 5, SftlConfig::new(SftlMode::Planar, 3), true, &mut rng).unwrap();
        s.bias.as_mut().unwrap().value = Tensor::randn(&[5], 1).unwrap();
        let mut conv = Conv2d::from_weights(
            "c",
            s.weight.value.clone(),
            Some(s.bias.as_ref().unwrap().value.clone()),
            Unfold::panorama(3, 1),
        )
        .unwrap();
        let x = Tensor::<f64>::randn(&[2, 3, 6, 12], 5).unwrap();
        assert_eq!(s.forward(&x).unwrap(), conv.forward(&x).unwrap());
        let g = Tensor::<f64>::randn(&[2, 5, 6, 12], 6).unwrap();
        assert_eq!(s.backward(&g).unwrap(), conv.backward(&g).unwrap());
    }

    #[test]
    fn digt_with_zero_head_matches_igt_bit_exactly() {
        let (mut igt, mut digt) = pair(SftlMode::Igt, SftlMode::Digt, 2, 7);
        let x = Tensor::<f64>::randn(&[2, 2, 8, 16], 3).unwrap();
        assert_eq!(igt.forward(&x).unwrap(), digt.forward(&x).unwrap());
        assert!(digt.inspect(0, 0, 0, 8, 16).unwrap().iter().all(|t| t.delta == (0.0, 0.0)));
    }

    #[test]
    fn igt_near_planar_at_the_equator() {
        let (h, w) = (256, 512);
        let (mut igt, mut planar) = pair(SftlMode::Igt, SftlMode::Planar, 1, 4);
        let x = Tensor::from_fn(&[1, 1, h, w], |q| {
            let (i, j) = ((q / w) as f64, (q % w) as f64);
            (i * 0.05).sin() + (j * 0.03).cos()
        })
        .unwrap();
        let a = igt.forward(&x).unwrap();
        let b = planar.forward(&x).unwrap();
        for o in 0..4 {
            for i in [h / 2 - 1, h / 2] {
                for j in 0..w {
                    let q = (o * h + i) * w + j;
                    assert!((a.data()[q] - b.data()[q]).abs() < 1e-2);
                }
            }
        }
    }

    #[test]
    fn inspect_reports_k_squared_taps() {
        let (mut igt, _) = pair(SftlMode::Igt, SftlMode::Planar, 1, 4);
        let taps = igt.inspect(0, 4, 3, 8, 16).unwrap();
        assert_eq!(taps.len(), 9);
        let grid = igt.grid(8, 16).unwrap().clone();
        for (t, r) in taps.iter().enumerate() {
            let c = grid.coord(4, 3, t);
            assert_eq!((c[0], c[1]), r.coord);
        }
        assert!(igt.inspect(0, 8, 0, 8, 16).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("digt".parse::<SftlMode>().unwrap(), SftlMode::Digt);
        assert!("bogus".parse::<SftlMode>().is_err());
        assert_eq!(SftlMode::Igt.to_string(), "igt");
    }
}
