//! Adam with a step schedule, the training and validation loops, and
//! best-by-validation checkpointing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{capture, restore, Checkpoint, RngState};
use crate::data::{collate, load_split, DatasetManifest, OmniSample, Split};
use crate::error::{Error, Result};
use crate::layers::{Module, Slot};
use crate::metrics::{DepthMetrics, MetricSums};
use crate::net::{l1_loss, NetworkConfig, OdeNet};
use crate::tensor::{Precision, Real};

pub const LOG_HEADER: &str = "epoch,train_l1,abs_rel,sq_rel,rmse,rms_log,d1,d2,d3,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    /// Learning rate of the first epoch.
    pub lr: f64,
    /// The rate is multiplied by `lr_decay` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 8,
            epochs: 10,
            lr: 2e-4,
            lr_step: 3,
            lr_decay: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// The full 20-epoch schedule.
    pub fn full_protocol() -> Self {
        TrainConfig { epochs: 20, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) || self.lr_step == 0 {
            return Err(Error::Config(format!(
                "learning rate schedule must be positive: lr={}, lr_step={}, lr_decay={}",
                self.lr, self.lr_step, self.lr_decay
            )));
        }
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam needs beta in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// `lr · lr_decay^⌊epoch / lr_step⌋`, epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value '{value}' for train.{key}"));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let real = |v: &str| v.parse::<f64>().map_err(|_| bad());
        match key {
            "batch" => self.batch = int(value)?,
            "epochs" => self.epochs = int(value)?,
            "lr" => self.lr = real(value)?,
            "lr_step" => self.lr_step = int(value)?,
            "lr_decay" => self.lr_decay = real(value)?,
            "beta1" => self.beta1 = real(value)?,
            "beta2" => self.beta2 = real(value)?,
            "eps" => self.eps = real(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "precision" => self.precision = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key train.{key}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "batch = {}\nepochs = {}\nlr = {:?}\nlr_step = {}\nlr_decay = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nseed = {}\nprecision = {}\n",
            self.batch,
            self.epochs,
            self.lr,
            self.lr_step,
            self.lr_decay,
            self.beta1,
            self.beta2,
            self.eps,
            self.seed,
            self.precision
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
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

/// Bias-corrected Adam update of every parameter; `t` counts steps from 1.
///
/// A non-finite gradient aborts before any parameter changes.
pub fn adam_step<T: Real>(module: &mut dyn Module<T>, cfg: &TrainConfig, lr: f64, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("adam step index starts at 1".into()));
    }
    let mut bad = None;
    module.visit(&mut |s| {
        if let Slot::Param(p) = s {
            if bad.is_none() && p.grad.data().iter().any(|g| !g.is_finite()) {
                bad = Some(p.name.clone());
            }
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    module.visit(&mut |s| {
        if let Slot::Param(p) = s {
            let g = p.grad.data().to_vec();
            let (m, v) = (p.adam_m.data_mut(), p.adam_v.data_mut());
            let mut step = vec![0.0; g.len()];
            for i in 0..g.len() {
                let gi = g[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                step[i] = lr * (m[i].as_f64() / c1) / ((v[i].as_f64() / c2).sqrt() + cfg.eps);
            }
            for (x, d) in p.value.data_mut().iter_mut().zip(step) {
                *x = T::lit(x.as_f64() - d);
            }
        }
    });
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_l1: f64,
    pub metrics: DepthMetrics,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    /// One CSV row under [`LOG_HEADER`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.epoch, self.train_l1, self.metrics.csv_row(), self.lr)
    }
}

/// Predictions are floored here before scoring, since propagation with
/// signed affinities can leave the positive range.
pub const MIN_PRED_DEPTH: f64 = 1e-3;

/// Refined-depth metrics over every pixel with positive ground truth, in eval mode.
pub fn evaluate_samples<T: Real>(net: &mut OdeNet<T>, samples: &[OmniSample<T>], batch: usize) -> Result<DepthMetrics> {
    net.set_training(false);
    let mut sums = MetricSums::default();
    let result = (|| {
        for chunk in samples.chunks(batch.max(1)) {
            let b = collate(&chunk.iter().collect::<Vec<_>>())?;
            let sensor = net.config.partial_depth.then_some(&b.sensor);
            let out = net.forward(&b.image, sensor)?;
            let valid = b.depth_gt.map(|g| if g > T::zero() { T::one() } else { T::zero() });
            let floor = T::lit(MIN_PRED_DEPTH);
            let pred = out.depth_refined.map(|d| if d < floor { floor } else { d });
            sums.add(&pred, &b.depth_gt, &valid)?;
        }
        sums.finish()
    })();
    net.set_training(true);
    result
}

pub struct Trainer<T: Real> {
    pub net: OdeNet<T>,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    pub epochs_done: usize,
    pub steps: u64,
    pub best_abs_rel: f64,
    pub log: Vec<EpochLog>,
    log_text: String,
}

impl<T: Real> Trainer<T> {
    pub fn new(net: NetworkConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let net = OdeNet::new(net, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            net,
            config,
            rng,
            epochs_done: 0,
            steps: 0,
            best_abs_rel: f64::INFINITY,
            log: Vec::new(),
            log_text: String::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.net.clone(), ck.train.clone())?;
        restore(&mut t.net, &ck.params, &ck.buffers)?;
        t.rng = ChaCha8Rng::from_seed(ck.rng.seed);
        t.rng.set_stream(ck.rng.stream);
        t.rng.set_word_pos(ck.rng.word_pos);
        t.epochs_done = ck.epochs_done as usize;
        t.steps = ck.steps;
        t.best_abs_rel = ck.best_abs_rel;
        t.log_text = ck.log.lines().skip(1).map(|l| format!("{l}\n")).collect();
        Ok(t)
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        let (params, buffers) = capture(&mut self.net);
        Checkpoint {
            net: self.net.config.clone(),
            train: self.config.clone(),
            log: self.log_csv(),
            epochs_done: self.epochs_done as u64,
            steps: self.steps,
            best_abs_rel: self.best_abs_rel,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            params,
            buffers,
        }
    }

    /// Header plus one row per completed epoch, including epochs run before a resume.
    pub fn log_csv(&self) -> String {
        format!("{LOG_HEADER}\n{}", self.log_text)
    }

    /// One pass over `train` in a seeded random order; returns the mean L1.
    pub fn train_epoch(&mut self, train: &[OmniSample<T>]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let epoch = self.epochs_done;
        let lr = self.config.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        self.net.set_training(true);
        let mut total = 0.0;
        for idx in order.chunks(self.config.batch) {
            let step = self.steps + 1;
            let ctx = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, step {step}: {m}")),
                e => e,
            };
            let b = collate(&idx.iter().map(|&i| &train[i]).collect::<Vec<_>>())?;
            let sensor = self.config_pd().then_some(&b.sensor);
            let out = self.net.forward(&b.image, sensor).map_err(ctx)?;
            let (loss, grad) = l1_loss(&out.depth_refined, &b.depth_gt)?;
            if !loss.is_finite() {
                return Err(ctx(Error::NonFinite(format!("loss {loss}"))));
            }
            self.net.zero_grad();
            self.net.backward(&grad).map_err(ctx)?;
            self.steps = step;
            adam_step(&mut self.net, &self.config, lr, step).map_err(ctx)?;
            total += loss * idx.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    fn config_pd(&self) -> bool {
        self.net.config.partial_depth
    }

    /// Trains one epoch, validates, and records the log row.
    pub fn run_epoch(&mut self, train: &[OmniSample<T>], val: &[OmniSample<T>]) -> Result<EpochLog> {
        let lr = self.config.lr_at(self.epochs_done);
        let train_l1 = self.train_epoch(train)?;
        let metrics = evaluate_samples(&mut self.net, val, self.config.batch)?;
        let row = EpochLog { epoch: self.epochs_done, train_l1, metrics, lr };
        self.epochs_done += 1;
        self.log.push(row);
        self.log_text += &format!("{row}\n");
        Ok(row)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Files written by [`train`] next to the best checkpoint.
pub fn last_checkpoint_path(out: &Path) -> PathBuf {
    sibling(out, ".last")
}

pub fn log_path(out: &Path) -> PathBuf {
    sibling(out, ".log.csv")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub log: String,
    pub best_abs_rel: f64,
    pub best_epoch: Option<usize>,
}

/// Trains on the manifest's train split and validates on its val split.
///
/// Writes the best-by-val-abs-rel checkpoint to `out`, the latest state to
/// `<out>.last` and the metric log to `<out>.log.csv`. With `resume`, training
/// continues from a `.last` checkpoint whose configs match (epochs may grow).
pub fn train(
    manifest: &DatasetManifest,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(manifest, net, cfg, out, resume, progress),
        Precision::F64 => train_typed::<f64>(manifest, net, cfg, out, resume, progress),
    }
}

fn train_typed<T: Real>(
    manifest: &DatasetManifest,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainSummary> {
    cfg.validate()?;
    net.validate()?;
    if (manifest.h, manifest.w) != (net.h, net.w) {
        return Err(Error::Config(format!(
            "dataset is {}x{} but the network expects {}x{}",
            manifest.h, manifest.w, net.h, net.w
        )));
    }
    let train: Vec<OmniSample<T>> = load_split(manifest, Split::Train)?;
    let val: Vec<OmniSample<T>> = load_split(manifest, Split::Val)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "need train and val samples, manifest has {} and {}",
            train.len(),
            val.len()
        )));
    }
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let same = TrainConfig { epochs: cfg.epochs, ..ck.train.clone() } == *cfg;
            if &ck.net != net || !same {
                return Err(Error::Config(format!("{} was trained with a different config", p.display())));
            }
            let mut t = Trainer::from_checkpoint(&ck)?;
            t.config.epochs = cfg.epochs;
            t
        }
        None => Trainer::<T>::new(net.clone(), cfg.clone())?,
    };
    let mut best_epoch = None;
    while trainer.epochs_done < cfg.epochs {
        let row = trainer.run_epoch(&train, &val)?;
        progress(&row);
        let improved = row.metrics.abs_rel < trainer.best_abs_rel;
        if improved {
            trainer.best_abs_rel = row.metrics.abs_rel;
            best_epoch = Some(row.epoch);
        }
        let ck = trainer.checkpoint();
        if improved {
            ck.save(out)?;
        }
        ck.save(&last_checkpoint_path(out))?;
        let lp = log_path(out);
        fs::write(&lp, trainer.log_csv()).map_err(|e| Error::io(&lp, e))?;
    }
    Ok(TrainSummary { log: trainer.log_csv(), best_abs_rel: trainer.best_abs_rel, best_epoch })
}

/// Builds the network stored in a checkpoint, in eval mode.
pub fn load_network<T: Real>(ck: &Checkpoint) -> Result<OdeNet<T>> {
    let mut t = Trainer::<T>::from_checkpoint(ck)?;
    t.net.set_training(false);
    Ok(t.net)
}
