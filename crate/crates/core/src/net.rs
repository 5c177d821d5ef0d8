//! The encoder-decoder depth network with spherical feature transform and
//! propagation refinement.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::cspn::{Cspn, CspnVariant, PropagationConfig, SensorDepth};
use crate::error::{Error, Result};
use crate::layers::{
    softplus_inverse, BatchNorm2d, Conv2d, Module, Relu, ResidualBlock, Sftl, SftlConfig, SftlMode, Slot, Softplus,
    TapReport, TransposedConv2d,
};
use crate::sphere;
use crate::sampling::Unfold;
use crate::tensor::{concat_channels, ew_add, split_channels, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub h: usize,
    pub w: usize,
    /// Width of each input stem.
    pub stem: usize,
    /// Encoder stage widths; each stage halves the resolution.
    pub channels: [usize; 4],
    pub sftl: SftlMode,
    pub sftl_k: usize,
    /// `None` disables refinement.
    pub cspn: Option<CspnVariant>,
    pub cspn_k: usize,
    pub cspn_iters: usize,
    pub partial_depth: bool,
    /// Initial coarse depth in meters (sets the depth-head bias).
    pub depth_init: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            h: 128,
            w: 256,
            stem: 16,
            channels: [32, 64, 128, 256],
            sftl: SftlMode::Digt,
            sftl_k: 3,
            cspn: Some(CspnVariant::D),
            cspn_k: 3,
            cspn_iters: 12,
            partial_depth: true,
            depth_init: 3.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w != 2 * self.h {
            return Err(Error::Config(format!("panorama width must be twice the height, got {}x{}", self.h, self.w)));
        }
        if self.h == 0 || self.h % 16 != 0 {
            return Err(Error::Config(format!("height {} must be a positive multiple of 16", self.h)));
        }
        if self.stem == 0 || self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.sftl_k % 2 == 0 || self.cspn_k % 2 == 0 || self.cspn_k < 3 {
            return Err(Error::Config("kernel sizes must be odd (cspn at least 3)".into()));
        }
        if self.cspn.is_some() && self.cspn_iters == 0 {
            return Err(Error::Config("cspn needs at least one iteration".into()));
        }
        if !(self.depth_init > 0.0) {
            return Err(Error::Config("depth_init must be positive".into()));
        }
        Ok(())
    }

    pub fn propagation(&self) -> Option<PropagationConfig> {
        self.cspn.map(|variant| PropagationConfig { k: self.cspn_k, iterations: self.cspn_iters, variant })
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value '{value}' for net.{key}"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        match key {
            "h" => self.h = num(value)?,
            "w" => self.w = num(value)?,
            "stem" => self.stem = num(value)?,
            "channels" => {
                let v: Vec<usize> = value.split(',').map(num).collect::<Result<_>>()?;
                self.channels = v.try_into().map_err(|_| bad())?;
            }
            "sftl" => self.sftl = value.parse()?,
            "sftl_k" => self.sftl_k = num(value)?,
            "cspn" => self.cspn = if value == "off" { None } else { Some(value.parse()?) },
            "cspn_k" => self.cspn_k = num(value)?,
            "cspn_iters" => self.cspn_iters = num(value)?,
            "pd" => {
                self.partial_depth = match value {
                    "front" => true,
                    "none" => false,
                    _ => return Err(Error::Config(format!("unknown pd '{value}' (front|none)"))),
                }
            }
            "depth_init" => self.depth_init = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown key net.{key}"))),
        }
        Ok(())
    }

    /// Canonical `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        let ch = self.channels.map(|c| c.to_string()).join(",");
        format!(
            "h = {}\nw = {}\nstem = {}\nchannels = {ch}\nsftl = {}\nsftl_k = {}\ncspn = {}\ncspn_k = {}\ncspn_iters = {}\npd = {}\ndepth_init = {:?}\n",
            self.h,
            self.w,
            self.stem,
            self.sftl,
            self.sftl_k,
            self.cspn.map_or("off".to_string(), |v| v.to_string()),
            self.cspn_k,
            self.cspn_iters,
            if self.partial_depth { "front" } else { "none" },
            self.depth_init,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected 'key = value', got '{line}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Conv → batch norm → ReLU.
struct ConvUnit<T: Real> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
}

impl<T: Real> ConvUnit<T> {
    fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Result<Self> {
        Ok(ConvUnit {
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, k, 1, false, rng)?,
            bn: BatchNorm2d::new(&format!("{name}.bn"), c_out)?,
            relu: Relu::new(),
        })
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y)?;
        Ok(self.relu.forward_owned(y))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu.backward(g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    fn visit(&mut self, f: &mut dyn FnMut(Slot<'_, T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }
}

/// Transposed conv ×2 → BN → ReLU, concat the mirror skip, 1×1 fusion.
struct UpUnit<T: Real> {
    tconv: TransposedConv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
    fuse: ConvUnit<T>,
    c_up: usize,
}

impl<T: Real> UpUnit<T> {
    fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        c_skip: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(UpUnit {
            tconv: TransposedConv2d::new(&format!("{name}.tconv"), c_in, c_out, 3, 2, false, rng)?,
            bn: BatchNorm2d::new(&format!("{name}.bn"), c_out)?,
            relu: Relu::new(),
            fuse: ConvUnit::new(&format!("{name}.fuse"), c_out + c_skip, c_out, 1, rng)?,
            c_up: c_out,
        })
    }

    fn forward(&mut self, x: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.tconv.forward(x)?;
        let y = self.bn.forward(&y)?;
        let y = self.relu.forward_owned(y);
        self.fuse.forward(&concat_channels(&y, skip)?)
    }

    /// Returns the gradients of the upsampled input and of the skip.
    fn backward(&mut self, g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let g = self.fuse.backward(g)?;
        let (gu, gs) = split_channels(&g, self.c_up)?;
        let gu = self.relu.backward(&gu)?;
        let gu = self.bn.backward(&gu)?;
        Ok((self.tconv.backward(&gu)?, gs))
    }

    fn visit(&mut self, f: &mut dyn FnMut(Slot<'_, T>)) {
        self.tconv.visit(f);
        self.bn.visit(f);
        self.fuse.visit(f);
    }
}

/// Network outputs. Depth maps are `n × 1 × h × w`.
#[derive(Clone, Debug)]
pub struct OdeOutput<T: Real> {
    pub depth_coarse: Tensor<T>,
    pub depth_refined: Tensor<T>,
    /// Pixel offsets of the refinement neighbors (`d` variant only).
    pub offsets: Option<Tensor<T>>,
    /// Raw (unnormalized) affinities when refinement is enabled.
    pub affinities: Option<Tensor<T>>,
}

pub struct OdeNet<T: Real> {
    pub config: NetworkConfig,
    stem_rgb: ConvUnit<T>,
    stem_depth: Option<ConvUnit<T>>,
    encoder: Vec<ResidualBlock<T>>,
    pub sftl: Sftl<T>,
    sftl_bn: BatchNorm2d<T>,
    sftl_relu: Relu<T>,
    decoder: Vec<UpUnit<T>>,
    depth_head: Conv2d<T>,
    softplus: Softplus<T>,
    affinity_head: Option<Conv2d<T>>,
    offset_head: Option<Conv2d<T>>,
    pub cspn: Option<Cspn<T>>,
    stem_split: Option<usize>,
}

/// Sensor depth enters the stem in units of 10 m.
pub const SENSOR_INPUT_SCALE: f64 = 0.1;

impl<T: Real> OdeNet<T> {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let s = config.stem;
        let ch = config.channels;
        let stem_rgb = ConvUnit::new("stem_rgb", 3, s, 3, rng)?;
        let stem_depth = if config.partial_depth { Some(ConvUnit::new("stem_depth", 2, s, 3, rng)?) } else { None };
        let c_stem = if config.partial_depth { 2 * s } else { s };
        let mut encoder = Vec::with_capacity(4);
        let mut c_prev = c_stem;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(ResidualBlock::new(&format!("enc{i}"), c_prev, c, 2, rng)?);
            c_prev = c;
        }
        let sftl_cfg = SftlConfig::new(config.sftl, config.sftl_k);
        let sftl = Sftl::new("sftl", ch[3], ch[3], sftl_cfg, false, rng)?;
        let sftl_bn = BatchNorm2d::new("sftl_bn", ch[3])?;
        let skips = [ch[2], ch[1], ch[0], c_stem];
        let outs = [ch[2], ch[1], ch[0], s];
        let mut decoder = Vec::with_capacity(4);
        let mut c_in = ch[3];
        for i in 0..4 {
            decoder.push(UpUnit::new(&format!("dec{i}"), c_in, outs[i], skips[i], rng)?);
            c_in = outs[i];
        }
        let mut depth_head = Conv2d::new("depth_head", s, 1, 3, 1, true, rng)?;
        depth_head.bias.as_mut().unwrap().value = Tensor::full(&[1], T::lit(softplus_inverse(config.depth_init)))?;
        let (affinity_head, offset_head, cspn) = match config.propagation() {
            Some(p) => {
                let m = p.neighbors();
                let aff = Conv2d::new("affinity_head", s, m, 3, 1, true, rng)?;
                let off = if p.variant == CspnVariant::D {
                    Some(Conv2d::from_weights(
                        "offset_head",
                        Tensor::zeros(&[2 * m, s, 3, 3])?,
                        Some(Tensor::zeros(&[2 * m])?),
                        Unfold::panorama(3, 1),
                    )?)
                } else {
                    None
                };
                (Some(aff), off, Some(Cspn::new(p)?))
            }
            None => (None, None, None),
        };
        Ok(OdeNet {
            stem_split: config.partial_depth.then_some(s),
            config,
            stem_rgb,
            stem_depth,
            encoder,
            sftl,
            sftl_bn,
            sftl_relu: Relu::new(),
            decoder,
            depth_head,
            softplus: Softplus::new(),
            affinity_head,
            offset_head,
            cspn,
        })
    }

    pub fn forward(&mut self, image: &Tensor<T>, sensor: Option<&SensorDepth<T>>) -> Result<OdeOutput<T>> {
        let (n, c, h, w) = image.dims4()?;
        if c != 3 || (h, w) != (self.config.h, self.config.w) {
            return Err(Error::shape(
                "OdeNet::forward",
                format!("image {:?}, expected [n, 3, {}, {}]", image.shape(), self.config.h, self.config.w),
            ));
        }
        let sensor = match (self.config.partial_depth, sensor) {
            (true, Some(s)) => {
                if s.dp.shape() != [n, 1, h, w] {
                    return Err(Error::shape("OdeNet::forward", format!("sensor depth {:?}", s.dp.shape())));
                }
                Some(s)
            }
            (true, None) => return Err(Error::InvalidArgument("network expects a sensor depth input".into())),
            (false, Some(_)) => {
                return Err(Error::InvalidArgument("network was built without a sensor depth input".into()))
            }
            (false, None) => None,
        };
        let mut stem = self.stem_rgb.forward(image)?;
        if let (Some(unit), Some(s)) = (self.stem_depth.as_mut(), sensor) {
            let d = unit.forward(&concat_channels(&s.dp.map(|v| v * T::lit(SENSOR_INPUT_SCALE)), &s.mask)?)?;
            stem = concat_channels(&stem, &d)?;
        }
        let mut feats = Vec::with_capacity(4);
        let mut x = stem.clone();
        for block in &mut self.encoder {
            x = block.forward(&x)?;
            feats.push(x.clone());
        }
        let b = self.sftl.forward(&x)?;
        let b = self.sftl_bn.forward(&b)?;
        let mut d = self.sftl_relu.forward_owned(b);
        let skips = [&feats[2], &feats[1], &feats[0], &stem];
        for (unit, skip) in self.decoder.iter_mut().zip(skips) {
            d = unit.forward(&d, skip)?;
        }
        let coarse = self.softplus.forward(self.depth_head.forward(&d)?);
        let (refined, offsets, affinities) = match self.cspn.as_mut() {
            Some(cspn) => {
                let raw = self.affinity_head.as_mut().unwrap().forward(&d)?;
                let off = match self.offset_head.as_mut() {
                    Some(head) => Some(head.forward(&d)?),
                    None => None,
                };
                let refined = cspn.forward(&coarse, &raw, off.as_ref(), sensor)?;
                (refined, off, Some(raw))
            }
            None => (coarse.clone(), None, None),
        };
        refined.check_finite("refined depth")?;
        Ok(OdeOutput { depth_coarse: coarse, depth_refined: refined, offsets, affinities })
    }

    /// Backpropagates the gradient of the refined depth; returns the image gradient.
    pub fn backward(&mut self, grad_refined: &Tensor<T>) -> Result<Tensor<T>> {
        let (g_coarse, g_heads) = match self.cspn.as_mut() {
            Some(cspn) => {
                let grads = cspn.backward(grad_refined)?;
                let mut gd = self.affinity_head.as_mut().unwrap().backward(&grads.raw)?;
                if let (Some(head), Some(go)) = (self.offset_head.as_mut(), grads.offsets.as_ref()) {
                    gd = ew_add(&gd, &head.backward(go)?)?;
                }
                (grads.h0, Some(gd))
            }
            None => (grad_refined.clone(), None),
        };
        let g = self.softplus.backward(&g_coarse)?;
        let mut gd = self.depth_head.backward(&g)?;
        if let Some(gh) = g_heads {
            gd = ew_add(&gd, &gh)?;
        }
        let mut skip_grads = Vec::with_capacity(4);
        for unit in self.decoder.iter_mut().rev() {
            let (gu, gs) = unit.backward(&gd)?;
            skip_grads.push(gs);
            gd = gu;
        }
        // skip_grads: [stem, feats[0], feats[1], feats[2]]
        let g = self.sftl_relu.backward(&gd)?;
        let g = self.sftl_bn.backward(&g)?;
        let mut g = self.sftl.backward(&g)?;
        for i in (0..4).rev() {
            if i < 3 {
                g = ew_add(&g, &skip_grads[i + 1])?;
            }
            g = self.encoder[i].backward(&g)?;
        }
        let g_stem = ew_add(&g, &skip_grads[0])?;
        match (self.stem_split, self.stem_depth.as_mut()) {
            (Some(s), Some(unit)) => {
                let (g_rgb, g_depth) = split_channels(&g_stem, s)?;
                unit.backward(&g_depth)?;
                self.stem_rgb.backward(&g_rgb)
            }
            _ => self.stem_rgb.backward(&g_stem),
        }
    }
}

/// Layer whose sampling locations [`OdeNet::inspect`] reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Sftl,
    Cspn,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sftl" => Ok(Stage::Sftl),
            "cspn" => Ok(Stage::Cspn),
            _ => Err(Error::Config(format!("unknown stage '{s}' (sftl|cspn)"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sftl => "sftl",
            Stage::Cspn => "cspn",
        })
    }
}

/// Taps of one pixel; coordinates are rows and columns of `grid`.
#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    pub grid: (usize, usize),
    pub pixel: (usize, usize),
    pub taps: Vec<TapReport>,
}

impl<T: Real> OdeNet<T> {
    /// Sampling locations used at image pixel `(i, j)` of the first batch
    /// item in the forward pass that produced `out`.
    ///
    /// The feature transform runs on the bottleneck, 16 times coarser than the
    /// image, so its report is for the bottleneck cell containing `(i, j)`.
    /// The propagation report lists the `k² − 1` neighbors.
    pub fn inspect(&mut self, out: &OdeOutput<T>, stage: Stage, i: usize, j: usize) -> Result<Inspection> {
        let (h, w) = (self.config.h, self.config.w);
        if i >= h || j >= w {
            return Err(Error::InvalidArgument(format!("pixel ({i}, {j}) outside {h}x{w}")));
        }
        match stage {
            Stage::Sftl => {
                let (hb, wb) = (h / 16, w / 16);
                let (bi, bj) = (i / 16, j / 16);
                let taps = self.sftl.inspect(0, bi, bj, hb, wb)?;
                Ok(Inspection { grid: (hb, wb), pixel: (bi, bj), taps })
            }
            Stage::Cspn => {
                let cspn = self
                    .cspn
                    .as_mut()
                    .ok_or_else(|| Error::Config("this network has no propagation stage".into()))?;
                let k = cspn.config.k;
                let m = cspn.config.neighbors();
                let step = std::f64::consts::PI / h as f64;
                let (p, pix) = (h * w, i * w + j);
                let base = cspn.base_coords(h, w)?[pix * m..(pix + 1) * m].to_vec();
                let off = out.offsets.as_ref().map(|o| o.item(0));
                let taps = sphere::stencil(k)
                    .into_iter()
                    .filter(|&d| d != (0, 0))
                    .zip(base)
                    .enumerate()
                    .map(|(t, ((di, dj), [r, c]))| {
                        let delta = off.map_or((0.0, 0.0), |o| (o[2 * t * p + pix].as_f64(), o[(2 * t + 1) * p + pix].as_f64()));
                        TapReport { tangent: sphere::tap_tangent(di, dj, step), delta, coord: (r + delta.0, c + delta.1) }
                    })
                    .collect();
                Ok(Inspection { grid: (h, w), pixel: (i, j), taps })
            }
        }
    }
}

impl<T: Real> Module<T> for OdeNet<T> {
    fn visit(&mut self, f: &mut dyn FnMut(Slot<'_, T>)) {
        self.stem_rgb.visit(f);
        if let Some(u) = self.stem_depth.as_mut() {
            u.visit(f);
        }
        for b in &mut self.encoder {
            b.visit(f);
        }
        self.sftl.visit(f);
        self.sftl_bn.visit(f);
        for u in &mut self.decoder {
            u.visit(f);
        }
        self.depth_head.visit(f);
        if let Some(h) = self.affinity_head.as_mut() {
            h.visit(f);
        }
        if let Some(h) = self.offset_head.as_mut() {
            h.visit(f);
        }
    }

    fn set_training(&mut self, on: bool) {
        self.stem_rgb.bn.set_training(on);
        if let Some(u) = self.stem_depth.as_mut() {
            u.bn.set_training(on);
        }
        for b in &mut self.encoder {
            b.set_training(on);
        }
        self.sftl_bn.set_training(on);
        for u in &mut self.decoder {
            u.bn.set_training(on);
            u.fuse.bn.set_training(on);
        }
    }
}

/// Mean absolute error over pixels with `gt > 0`, and its gradient with
/// respect to `pred` (`sign(pred − gt) / count`, zero at ties).
pub fn l1_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.same_shape(gt, "l1_loss")?;
    let count = gt.data().iter().filter(|&&g| g > T::zero()).count();
    if count == 0 {
        return Err(Error::InvalidArgument("l1_loss: no valid ground-truth pixels".into()));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            if g > T::zero() {
                let d = p.as_f64() - g.as_f64();
                total += d.abs();
                T::lit(if d > 0.0 { inv } else if d < 0.0 { -inv } else { 0.0 })
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((total * inv, Tensor::new(pred.shape(), grad)?))
}
