//! Trains a small full model, evaluates it and writes a prediction with preview.
//!
//! `cargo run --release --example train_eval [epochs]`

use ode_depth::checkpoint::Checkpoint;
use ode_depth::data::{colorize, load_sample, make_dataset, write_pfm, write_ppm, Split};
use ode_depth::infer::{evaluate_checkpoint, predict};
use ode_depth::net::NetworkConfig;
use ode_depth::sphere::{EquirectGrid, PinholeFov};
use ode_depth::train::{self, TrainConfig, LOG_HEADER};

fn main() -> ode_depth::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let dir = std::env::temp_dir().join(format!("ode-train-{}", std::process::id()));
    let m = make_dataset(72, EquirectGrid::new(64, 128)?, PinholeFov::default(), &dir.join("data"), 7)?;
    let net = NetworkConfig { h: 64, w: 128, stem: 8, channels: [16, 32, 64, 64], ..NetworkConfig::default() };
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let out = dir.join("model.ck");
    println!("{LOG_HEADER}");
    let summary = train::train(&m, &net, &cfg, &out, None, &mut |row| println!("{row}"))?;
    println!("best val abs_rel {:.4} at epoch {:?}", summary.best_abs_rel, summary.best_epoch);

    let ck = Checkpoint::load(&out)?;
    println!("{}", evaluate_checkpoint(&ck, &m, Split::Val)?);
    let e = m.split(Split::Val).next().expect("a val sample");
    let s = load_sample::<f64>(&m, e)?;
    let p = predict(&ck, &s.image, Some(&s.sensor.dp), None)?;
    let (lo, hi) = p.depth.min_max();
    write_pfm(&dir.join("pred.pfm"), &p.depth)?;
    write_ppm(&dir.join("pred.ppm"), &colorize(&p.depth, lo, hi)?)?;
    println!("prediction written to {}", dir.display());
    Ok(())
}
