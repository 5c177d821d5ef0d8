//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check evaluates the probe loss `L = Σ (out − out₀) · R` (fixed random
//! `R`, `out₀` the unperturbed output) and
//! compares its analytic gradient with `(L(x+h) − L(x−h)) / 2h` element by
//! element. Elements with a non-differentiable point (ReLU hinge, bilinear
//! cell edge, offset clip) within `2h` are detected from a five-point stencil
//! and skipped; the skipped fraction is reported and bounded.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cspn::{self, Cspn, CspnVariant, PropagationConfig, SensorDepth};
use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm2d, Conv2d, Module, Relu, ResidualBlock, Sftl, SftlConfig, SftlMode, Slot, TransposedConv2d,
};
use crate::net::{NetworkConfig, OdeNet};
use crate::sampling::{deform_im2col, deform_im2col_backward, ColumnBuffer, OffsetMode, SamplingGrid};
use crate::sphere::EquirectGrid;
use crate::tensor::{Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients smaller
    /// than this are compared to an absolute `tolerance · floor`.
    pub floor: f64,
    /// Jumps in the second difference above this fraction of the slope mark a kink.
    pub kink: f64,
    pub max_skipped: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { step: 1e-5, tolerance: 1e-4, floor: 1e-5, kink: 1e-4, max_skipped: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub target: String,
    pub config: GradcheckConfig,
    pub tensors: Vec<TensorReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn skipped_fraction(&self) -> f64 {
        let total: usize = self.tensors.iter().map(|t| t.checked + t.skipped).sum();
        let skipped: usize = self.tensors.iter().map(|t| t.skipped).sum();
        skipped as f64 / total.max(1) as f64
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.config.tolerance && self.skipped_fraction() <= self.config.max_skipped
    }

    /// `Err(Error::Gradcheck)` naming the worst tensor when the check fails.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let worst = self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
        Err(Error::Gradcheck(match worst {
            Some(t) if t.max_rel_err >= self.config.tolerance => format!(
                "{}: tensor '{}' element {} has rel err {:.3e} (tolerance {:.0e})",
                self.target, t.name, t.worst_index, t.max_rel_err, self.config.tolerance
            ),
            _ => format!("{}: {:.1}% of elements skipped as non-smooth", self.target, 100.0 * self.skipped_fraction()),
        }))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} [{}] max rel err {:.3e}, skipped {:.2}%",
            self.target,
            if self.passed() { "ok" } else { "FAIL" },
            self.max_rel_err(),
            100.0 * self.skipped_fraction()
        )?;
        for t in &self.tensors {
            writeln!(f, "  {:<32} {:>7} checked {:>5} skipped  max rel err {:.3e}", t.name, t.checked, t.skipped, t.max_rel_err)?;
        }
        Ok(())
    }
}

/// Something whose scalar loss can be perturbed element by element.
pub trait Probe {
    /// Names and lengths of the checked tensors.
    fn tensors(&mut self) -> Vec<(String, usize)>;
    fn get(&mut self, tensor: usize, index: usize) -> f64;
    fn set(&mut self, tensor: usize, index: usize, value: f64);
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradient of [`Probe::loss`] for every checked tensor.
    fn analytic(&mut self) -> Result<Vec<Vec<f64>>>;
}

pub fn check(target: &str, probe: &mut dyn Probe, config: GradcheckConfig) -> Result<GradcheckReport> {
    let specs = probe.tensors();
    let analytic = probe.analytic()?;
    if analytic.len() != specs.len() {
        return Err(Error::Gradcheck(format!("{target}: analytic gradient count mismatch")));
    }
    let h = config.step;
    let mut tensors = Vec::with_capacity(specs.len());
    for (t, (name, len)) in specs.into_iter().enumerate() {
        if analytic[t].len() != len {
            return Err(Error::Gradcheck(format!("{target}: gradient of '{name}' has the wrong length")));
        }
        let mut rep = TensorReport { name, checked: 0, skipped: 0, max_rel_err: 0.0, worst_index: 0 };
        for i in 0..len {
            let x = probe.get(t, i);
            let mut f = [0.0; 5];
            for (k, v) in f.iter_mut().enumerate() {
                probe.set(t, i, x + (k as f64 - 2.0) * h);
                *v = probe.loss()?;
            }
            probe.set(t, i, x);
            let (fm, fp) = (f[1], f[3]);
            // one-sided slopes over the four sub-intervals; their second
            // differences are flat for smooth functions
            let s: Vec<f64> = f.windows(2).map(|p| (p[1] - p[0]) / h).collect();
            let d: Vec<f64> = s.windows(2).map(|p| p[1] - p[0]).collect();
            let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let noise = 4.0 * f64::EPSILON * f[2].abs().max(1.0) / h;
            let jump = (d[1] - d[0]).abs().max((d[2] - d[1]).abs());
            if jump > config.kink * scale + 8.0 * noise {
                rep.skipped += 1;
                continue;
            }
            let num = (fp - fm) / (2.0 * h);
            let a = analytic[t][i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(config.floor);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("{target}: gradient of '{}'", rep.name)));
            }
            if err > rep.max_rel_err {
                rep.max_rel_err = err;
                rep.worst_index = i;
            }
            rep.checked += 1;
        }
        tensors.push(rep);
    }
    Ok(GradcheckReport { target: target.to_string(), config, tensors })
}

type Forward<M> = Box<dyn FnMut(&mut M, &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>>;
type Backward<M> = Box<dyn FnMut(&mut M, &[Tensor<f64>], &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>>;

/// Probe over a module's parameters and a chosen subset of its inputs.
pub struct ModuleProbe<M: Module<f64>> {
    pub module: M,
    pub inputs: Vec<(String, Tensor<f64>)>,
    /// Indices of `inputs` whose gradients are checked.
    pub checked_inputs: Vec<usize>,
    forward: Forward<M>,
    backward: Backward<M>,
    weights: Option<Vec<Tensor<f64>>>,
    reference: Option<Vec<Tensor<f64>>>,
    seed: u64,
}

impl<M: Module<f64>> ModuleProbe<M> {
    /// `backward` receives the inputs and the output gradients and returns
    /// one gradient per input (unchecked ones may be anything).
    pub fn new(
        module: M,
        inputs: Vec<(String, Tensor<f64>)>,
        checked_inputs: Vec<usize>,
        forward: impl FnMut(&mut M, &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> + 'static,
        backward: impl FnMut(&mut M, &[Tensor<f64>], &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> + 'static,
        seed: u64,
    ) -> Self {
        ModuleProbe {
            module,
            inputs,
            checked_inputs,
            forward: Box::new(forward),
            backward: Box::new(backward),
            weights: None,
            reference: None,
            seed,
        }
    }

    fn params(&mut self) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        self.module.visit(&mut |s| {
            if let Slot::Param(p) = s {
                v.push((p.name.clone(), p.value.numel()));
            }
        });
        v
    }

    fn with_param<R>(&mut self, idx: usize, f: impl FnOnce(&mut Parameter<f64>) -> R) -> R {
        let mut f = Some(f);
        let mut out = None;
        let mut k = 0;
        self.module.visit(&mut |s| {
            if let Slot::Param(p) = s {
                if k == idx {
                    out = Some((f.take().unwrap())(p));
                }
                k += 1;
            }
        });
        out.expect("parameter index in range")
    }

    fn run(&mut self) -> Result<Vec<Tensor<f64>>> {
        let inputs: Vec<Tensor<f64>> = self.inputs.iter().map(|(_, t)| t.clone()).collect();
        let outs = (self.forward)(&mut self.module, &inputs)?;
        if self.weights.is_none() {
            let seed = self.seed;
            self.weights = Some(
                outs.iter()
                    .enumerate()
                    .map(|(i, o)| Tensor::randn(o.shape(), seed.wrapping_add(1000 + i as u64)))
                    .collect::<Result<_>>()?,
            );
        }
        Ok(outs)
    }
}

impl<M: Module<f64>> Probe for ModuleProbe<M> {
    fn tensors(&mut self) -> Vec<(String, usize)> {
        let mut v: Vec<(String, usize)> = self
            .checked_inputs
            .iter()
            .map(|&i| (format!("input:{}", self.inputs[i].0), self.inputs[i].1.numel()))
            .collect();
        v.extend(self.params());
        v
    }

    fn get(&mut self, tensor: usize, index: usize) -> f64 {
        let n = self.checked_inputs.len();
        if tensor < n {
            self.inputs[self.checked_inputs[tensor]].1.data()[index]
        } else {
            self.with_param(tensor - n, |p| p.value.data()[index])
        }
    }

    fn set(&mut self, tensor: usize, index: usize, value: f64) {
        let n = self.checked_inputs.len();
        if tensor < n {
            self.inputs[self.checked_inputs[tensor]].1.data_mut()[index] = value;
        } else {
            self.with_param(tensor - n, |p| p.value.data_mut()[index] = value);
        }
    }

    fn loss(&mut self) -> Result<f64> {
        let outs = self.run()?;
        if self.reference.is_none() {
            self.reference = Some(outs.clone());
        }
        let w = self.weights.as_ref().unwrap();
        let base = self.reference.as_ref().unwrap();
        // centered on the first evaluation so the sum carries little round-off
        Ok(outs
            .iter()
            .zip(base)
            .zip(w)
            .map(|((o, b), r)| {
                o.data().iter().zip(b.data()).zip(r.data()).map(|((x, y), z)| (x - y) * z).sum::<f64>()
            })
            .sum())
    }

    fn analytic(&mut self) -> Result<Vec<Vec<f64>>> {
        self.module.zero_grad();
        self.reference = Some(self.run()?);
        let w = self.weights.clone().unwrap();
        let inputs: Vec<Tensor<f64>> = self.inputs.iter().map(|(_, t)| t.clone()).collect();
        let gin = (self.backward)(&mut self.module, &inputs, &w)?;
        let mut v: Vec<Vec<f64>> = self.checked_inputs.iter().map(|&i| gin[i].data().to_vec()).collect();
        self.module.visit(&mut |s| {
            if let Slot::Param(p) = s {
                v.push(p.grad.data().to_vec());
            }
        });
        Ok(v)
    }
}

/// A module with no parameters, for checking free functions.
#[derive(Default)]
pub struct Stateless<S>(pub S);

impl<S> Module<f64> for Stateless<S> {
    fn visit(&mut self, _f: &mut dyn FnMut(Slot<'_, f64>)) {}
}

impl Module<f64> for Cspn<f64> {
    fn visit(&mut self, _f: &mut dyn FnMut(Slot<'_, f64>)) {}
}

/// Every target accepted by [`run_target`], in `all` order.
pub const TARGETS: &[&str] = &[
    "relu",
    "conv",
    "tconv",
    "batchnorm",
    "residual",
    "sftl-planar",
    "sftl-igt",
    "sftl-digt",
    "bilinear",
    "deform-tangent",
    "affinity",
    "propagation",
    "cspn",
    "net",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64, scale: f64) -> Result<Tensor<f64>> {
    Ok(Tensor::randn(shape, seed)?.map(|v| v * scale))
}

fn one(t: Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
    Ok(vec![t])
}

/// Runs one named check on its fixed micro configuration.
pub fn run_target(target: &str, config: GradcheckConfig) -> Result<GradcheckReport> {
    match target {
        "relu" => {
            // strictly away from the hinge
            let x = randn(&[2, 3, 4, 5], 1, 1.0)?.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
            let mut p = ModuleProbe::new(
                Relu::<f64>::new(),
                vec![("x".into(), x)],
                vec![0],
                |m, i| one(m.forward(&i[0])),
                |m, _, g| one(m.backward(&g[0])?),
                1,
            );
            check(target, &mut p, config)
        }
        "conv" => {
            let mut r = rng(2);
            let mut conv = Conv2d::<f64>::new("conv", 2, 3, 3, 2, true, &mut r)?;
            conv.bias.as_mut().unwrap().value = randn(&[3], 3, 1.0)?;
            let mut p = ModuleProbe::new(
                conv,
                vec![("x".into(), randn(&[2, 2, 5, 6], 4, 1.0)?)],
                vec![0],
                |m, i| one(m.forward(&i[0])?),
                |m, _, g| one(m.backward(&g[0])?),
                2,
            );
            check(target, &mut p, config)
        }
        "tconv" => {
            let mut r = rng(5);
            let tconv = TransposedConv2d::<f64>::new("tconv", 2, 3, 3, 2, true, &mut r)?;
            let mut p = ModuleProbe::new(
                tconv,
                vec![("x".into(), randn(&[2, 2, 3, 4], 6, 1.0)?)],
                vec![0],
                |m, i| one(m.forward(&i[0])?),
                |m, _, g| one(m.backward(&g[0])?),
                5,
            );
            check(target, &mut p, config)
        }
        "batchnorm" => {
            let mut bn = BatchNorm2d::<f64>::new("bn", 3)?;
            bn.gamma.value = Tensor::new(&[3], vec![1.5, -0.7, 0.9])?;
            bn.beta.value = Tensor::new(&[3], vec![0.1, 0.2, -0.3])?;
            let mut p = ModuleProbe::new(
                bn,
                vec![("x".into(), randn(&[2, 3, 3, 4], 7, 2.0)?)],
                vec![0],
                |m, i| one(m.forward(&i[0])?),
                |m, _, g| one(m.backward(&g[0])?),
                7,
            );
            check(target, &mut p, config)
        }
        "residual" => {
            let mut r = rng(8);
            let block = ResidualBlock::<f64>::new("res", 3, 4, 2, &mut r)?;
            let mut p = ModuleProbe::new(
                block,
                vec![("x".into(), randn(&[2, 3, 4, 8], 9, 1.0)?)],
                vec![0],
                |m, i| one(m.forward(&i[0])?),
                |m, _, g| one(m.backward(&g[0])?),
                8,
            );
            check(target, &mut p, config)
        }
        "sftl-planar" | "sftl-igt" | "sftl-digt" => {
            let mode: SftlMode = target.trim_start_matches("sftl-").parse()?;
            let mut r = rng(10);
            let mut sftl = Sftl::<f64>::new("sftl", 2, 3, SftlConfig::new(mode, 3), true, &mut r)?;
            if let Some(head) = sftl.offset_head.as_mut() {
                head.weight.value = randn(head.weight.shape(), 11, 0.05)?;
                head.bias.as_mut().unwrap().value = randn(&[18], 12, 0.05)?;
            }
            let mut p = ModuleProbe::new(
                sftl,
                vec![("x".into(), randn(&[2, 2, 6, 12], 13, 1.0)?)],
                vec![0],
                |m, i| one(m.forward(&i[0])?),
                |m, _, g| one(m.backward(&g[0])?),
                10,
            );
            check(target, &mut p, config)
        }
        "bilinear" | "deform-tangent" => {
            let (h, w) = (6, 12);
            let eq = EquirectGrid::new(h, w)?;
            let grid = SamplingGrid::inverse_gnomonic(&eq, 3, eq.pitch())?;
            let mode = if target == "bilinear" {
                OffsetMode::Pixel
            } else {
                OffsetMode::Tangent { cap: 4.0 * eq.pitch() }
            };
            let scale = if target == "bilinear" { 0.7 } else { 0.5 * eq.pitch() };
            let inputs = vec![
                ("features".into(), randn(&[2, 2, h, w], 14, 1.0)?),
                ("offsets".into(), randn(&[2, 18, h, w], 15, scale)?),
            ];
            let g1 = grid.clone();
            let mut p = ModuleProbe::new(
                Stateless(()),
                inputs,
                vec![0, 1],
                move |_, i| {
                    let (cols, _) = deform_im2col(&i[0], &g1, Some((&i[1], mode)))?;
                    one(Tensor::new(&[cols.n, cols.rows, cols.out_h, cols.out_w], cols.data)?)
                },
                move |_, i, g| {
                    let (cols, cache) = deform_im2col(&i[0], &grid, Some((&i[1], mode)))?;
                    let gcols = ColumnBuffer { data: g[0].data().to_vec(), ..cols };
                    let (gf, go) = deform_im2col_backward(&gcols, &i[0], &cache)?;
                    Ok(vec![gf, go.expect("offsets were given")])
                },
                14,
            );
            check(target, &mut p, config)
        }
        "affinity" => {
            let raw = randn(&[2, 8, 3, 4], 16, 1.0)?;
            let mut p = ModuleProbe::new(
                Stateless(()),
                vec![("raw".into(), raw)],
                vec![0],
                |_, i| {
                    let a = cspn::normalize_affinity(&i[0])?;
                    Ok(vec![a.kappa, a.center])
                },
                |_, i, g| one(cspn::normalize_affinity_backward(&i[0], &g[0], &g[1])?),
                16,
            );
            check(target, &mut p, config)
        }
        "propagation" | "cspn" => {
            let (h, w) = (6, 12);
            let (iters, variant) = if target == "propagation" { (1, CspnVariant::Ig) } else { (3, CspnVariant::D) };
            let cfg = PropagationConfig { k: 3, iterations: iters, variant };
            let h0 = randn(&[2, 1, h, w], 17, 1.0)?.map(|v| 2.0 + v);
            let raw = randn(&[2, 8, h, w], 18, 1.0)?;
            let dp = Tensor::from_fn(&[2, 1, h, w], |q| if q % 5 == 0 { 1.5 + 0.01 * q as f64 } else { 0.0 })?;
            let sensor = SensorDepth::from_depth(dp);
            let mut inputs = vec![("h0".into(), h0), ("raw".into(), raw)];
            let mut checked = vec![0, 1];
            if variant == CspnVariant::D {
                inputs.push(("offsets".into(), randn(&[2, 16, h, w], 19, 0.4)?));
                checked.push(2);
            }
            let s1 = sensor.clone();
            let mut p = ModuleProbe::new(
                Cspn::<f64>::new(cfg)?,
                inputs,
                checked,
                move |m, i| one(m.forward(&i[0], &i[1], i.get(2), Some(&s1))?),
                |m, _, g| {
                    let gr = m.backward(&g[0])?;
                    let mut v = vec![gr.h0, gr.raw];
                    v.extend(gr.offsets);
                    Ok(v)
                },
                17,
            );
            check(target, &mut p, config)
        }
        "net" => {
            let cfg = NetworkConfig {
                h: 16,
                w: 32,
                stem: 3,
                channels: [3, 3, 4, 4],
                cspn_iters: 3,
                ..NetworkConfig::default()
            };
            let mut r = rng(20);
            let mut net = OdeNet::<f64>::new(cfg, &mut r)?;
            if let Some(head) = net.sftl.offset_head.as_mut() {
                head.weight.value = randn(head.weight.shape(), 21, 0.05)?;
            }
            let img = Tensor::<f64>::uniform_with(&[2, 3, 16, 32], 0.0, 1.0, &mut rng(22))?;
            let dp = Tensor::from_fn(&[2, 1, 16, 32], |q| if q % 3 == 0 { 2.0 + 0.01 * (q % 50) as f64 } else { 0.0 })?;
            let sensor = SensorDepth::from_depth(dp);
            let mut p = ModuleProbe::new(
                net,
                vec![("image".into(), img)],
                vec![],
                move |m, i| one(m.forward(&i[0], Some(&sensor))?.depth_refined),
                |m, _, g| one(m.backward(&g[0])?),
                20,
            );
            check(target, &mut p, config)
        }
        _ => Err(Error::Config(format!("unknown gradcheck target '{target}' (all|{})", TARGETS.join("|")))),
    }
}

/// Runs `target`, or every target for `"all"`.
pub fn run(target: &str, config: GradcheckConfig) -> Result<Vec<GradcheckReport>> {
    if target == "all" {
        TARGETS.iter().map(|t| run_target(t, config)).collect()
    } else {
        Ok(vec![run_target(target, config)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_is_exact_away_from_zero() {
        let r = run_target("relu", GradcheckConfig::default()).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.tensors[0].skipped, 0);
        assert!(r.max_rel_err() < 1e-9);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Bad(f64);
        impl Probe for Bad {
            fn tensors(&mut self) -> Vec<(String, usize)> {
                vec![("x".into(), 1)]
            }
            fn get(&mut self, _: usize, _: usize) -> f64 {
                self.0
            }
            fn set(&mut self, _: usize, _: usize, v: f64) {
                self.0 = v;
            }
            fn loss(&mut self) -> Result<f64> {
                Ok(self.0 * self.0)
            }
            fn analytic(&mut self) -> Result<Vec<Vec<f64>>> {
                Ok(vec![vec![3.0 * self.0]])
            }
        }
        let r = check("bad", &mut Bad(1.3), GradcheckConfig::default()).unwrap();
        assert!(!r.passed());
        assert!(matches!(r.into_result(), Err(Error::Gradcheck(_))));
    }

    #[test]
    fn unknown_target_is_a_config_error() {
        assert!(matches!(run_target("bogus", GradcheckConfig::default()), Err(Error::Config(_))));
    }
}
