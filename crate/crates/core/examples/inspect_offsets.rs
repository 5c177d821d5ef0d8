//! Sampling locations of the feature transform and of the propagation
//! neighbors at one pixel of an untrained full model.
//!
//! `cargo run --release --example inspect_offsets`

use ode_depth::cspn::SensorDepth;
use ode_depth::data::render_sample;
use ode_depth::net::{NetworkConfig, OdeNet, Stage};
use ode_depth::sphere::{EquirectGrid, PinholeFov};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ode_depth::Result<()> {
    let cfg = NetworkConfig { h: 64, w: 128, stem: 8, channels: [16, 32, 64, 64], ..NetworkConfig::default() };
    let mut net = OdeNet::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let s = render_sample::<f32>(3, &EquirectGrid::new(64, 128)?, &PinholeFov::default())?;
    let out = net.forward(&s.image, Some(&SensorDepth::from_depth(s.sensor.dp.clone())))?;
    for (stage, (i, j)) in [(Stage::Sftl, (8, 40)), (Stage::Cspn, (8, 40)), (Stage::Cspn, (32, 40))] {
        let r = net.inspect(&out, stage, i, j)?;
        println!("{stage} at image pixel ({i}, {j}) -> grid {:?} pixel {:?}", r.grid, r.pixel);
        for t in &r.taps {
            println!(
                "  tangent ({:+.4}, {:+.4})  delta ({:+.4}, {:+.4})  at ({:.3}, {:.3})",
                t.tangent.x, t.tangent.y, t.delta.0, t.delta.1, t.coord.0, t.coord.1
            );
        }
    }
    Ok(())
}
