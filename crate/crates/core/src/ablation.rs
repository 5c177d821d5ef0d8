//! Small-scale ablation over the feature transform, the propagation variant
//! and the partial-depth input, on a rendered dataset.

use std::fmt;
use std::path::Path;

use crate::cspn::CspnVariant;
use crate::data::{load_split, make_dataset_split, Split, SplitCounts};
use crate::error::{Error, Result};
use crate::layers::SftlMode;
use crate::net::NetworkConfig;
use crate::sphere::{EquirectGrid, PinholeFov};
use crate::train::{EpochLog, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub sftl: SftlMode,
    pub cspn: Option<CspnVariant>,
    pub partial_depth: bool,
}

const fn variant(name: &'static str, sftl: SftlMode, cspn: Option<CspnVariant>, partial_depth: bool) -> Variant {
    Variant { name, sftl, cspn, partial_depth }
}

pub const BACKBONE: Variant = variant("backbone", SftlMode::Planar, None, false);
pub const FRONT: Variant = variant("front", SftlMode::Planar, None, true);
pub const IGT: Variant = variant("igt", SftlMode::Igt, None, true);
pub const DCSPN: Variant = variant("dcspn", SftlMode::Planar, Some(CspnVariant::D), true);
pub const FULL: Variant = variant("full", SftlMode::Digt, Some(CspnVariant::D), true);

pub const VARIANTS: [Variant; 5] = [BACKBONE, FRONT, IGT, DCSPN, FULL];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSetup {
    pub train: usize,
    pub val: usize,
    pub h: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub stem: usize,
    pub channels: [usize; 4],
    pub cspn_iters: usize,
    pub schedule: TrainConfig,
    pub variants: Vec<Variant>,
}

impl Default for AblationSetup {
    /// 512/64 samples at 64×128, three seeds, narrow widths, the default schedule.
    fn default() -> Self {
        AblationSetup {
            train: 512,
            val: 64,
            h: 64,
            data_seed: 2024,
            seeds: vec![0, 1, 2],
            stem: 8,
            channels: [16, 32, 64, 64],
            cspn_iters: 12,
            schedule: TrainConfig::default(),
            variants: VARIANTS.to_vec(),
        }
    }
}

impl AblationSetup {
    pub fn network(&self, v: &Variant) -> NetworkConfig {
        NetworkConfig {
            h: self.h,
            w: 2 * self.h,
            stem: self.stem,
            channels: self.channels,
            sftl: v.sftl,
            cspn: v.cspn,
            cspn_iters: self.cspn_iters,
            partial_depth: v.partial_depth,
            ..NetworkConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub variant: &'static str,
    pub seed: u64,
    pub log: Vec<EpochLog>,
}

impl Run {
    /// Validation Abs Rel after the last epoch.
    pub fn final_abs_rel(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.metrics.abs_rel)
    }

    pub fn best_abs_rel(&self) -> f64 {
        self.log.iter().map(|r| r.metrics.abs_rel).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<Run>,
}

impl AblationReport {
    fn finals(&self, variant: &str) -> Vec<(u64, f64)> {
        self.runs.iter().filter(|r| r.variant == variant).map(|r| (r.seed, r.final_abs_rel())).collect()
    }

    /// Mean final validation Abs Rel over seeds.
    pub fn mean(&self, variant: &str) -> f64 {
        let v = self.finals(variant);
        v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64
    }

    /// `(seeds where a ≤ b, seeds compared)`.
    pub fn wins(&self, a: &str, b: &str) -> (usize, usize) {
        let fb = self.finals(b);
        let mut n = 0;
        let mut won = 0;
        for (seed, x) in self.finals(a) {
            if let Some(&(_, y)) = fb.iter().find(|(s, _)| *s == seed) {
                n += 1;
                won += usize::from(x <= y);
            }
        }
        (won, n)
    }

    /// `1 − mean(full) / mean(backbone)`.
    pub fn full_gain(&self) -> f64 {
        1.0 - self.mean(FULL.name) / self.mean(BACKBONE.name)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant,seed,final_abs_rel,best_abs_rel")?;
        for r in &self.runs {
            writeln!(f, "{},{},{:.5},{:.5}", r.variant, r.seed, r.final_abs_rel(), r.best_abs_rel())?;
        }
        Ok(())
    }
}

/// Renders the dataset into `dir` and trains every variant for every seed.
pub fn run(setup: &AblationSetup, dir: &Path, progress: &mut dyn FnMut(&str, u64, &EpochLog)) -> Result<AblationReport> {
    if setup.train == 0 || setup.val == 0 || setup.seeds.is_empty() {
        return Err(Error::Config("ablation needs train and val samples and at least one seed".into()));
    }
    let grid = EquirectGrid::new(setup.h, 2 * setup.h)?;
    let counts = SplitCounts { train: setup.train, val: setup.val, test: 0 };
    let manifest = make_dataset_split(counts, grid, PinholeFov::default(), dir, setup.data_seed)?;
    let train = load_split::<f32>(&manifest, Split::Train)?;
    let val = load_split::<f32>(&manifest, Split::Val)?;
    let mut runs = Vec::new();
    for &seed in &setup.seeds {
        for v in &setup.variants {
            let cfg = TrainConfig { seed, ..setup.schedule.clone() };
            let mut t = Trainer::<f32>::new(setup.network(v), cfg)?;
            while t.epochs_done < setup.schedule.epochs {
                let row = t.run_epoch(&train, &val)?;
                progress(v.name, seed, &row);
            }
            runs.push(Run { variant: v.name, seed, log: t.log.clone() });
        }
    }
    Ok(AblationReport { runs })
}
