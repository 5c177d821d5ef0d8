//! Renders a small synthetic panorama dataset and a color preview of one depth map.
//!
//! `cargo run --release --example gen_data [out_dir] [n]`

use std::path::PathBuf;

use ode_depth::data::{colorize, load_split, make_dataset, write_ppm, Split};
use ode_depth::sphere::{EquirectGrid, PinholeFov};

fn main() -> ode_depth::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let n = args.next().and_then(|a| a.parse().ok()).unwrap_or(16);
    let m = make_dataset(n, EquirectGrid::new(64, 128)?, PinholeFov::default(), &out, 1)?;
    println!("{} train, {} val samples in {}", m.count(Split::Train), m.count(Split::Val), out.display());
    for s in load_split::<f32>(&m, Split::Val)? {
        let (lo, hi) = s.depth_gt.min_max();
        println!("val sample: depth {lo:.2}..{hi:.2} m, sensor coverage {:.1}%", 100.0 * s.sensor.coverage());
        write_ppm(&out.join("val_depth_preview.ppm"), &colorize(&s.depth_gt, lo as f64, hi as f64)?)?;
    }
    Ok(())
}
