//! Spreads front-view sensor depth into a flat initial guess with
//! image-guided affinities, for each propagation variant.
//!
//! `cargo run --release --example propagation`

use ode_depth::cspn::{run_cspn, CspnVariant, PropagationConfig, SensorDepth};
use ode_depth::data::render_sample;
use ode_depth::metrics::evaluate;
use ode_depth::sampling::WrapPolicy;
use ode_depth::sphere::{stencil, EquirectGrid, PinholeFov};
use ode_depth::Tensor;

fn main() -> ode_depth::Result<()> {
    let (h, w) = (64, 128);
    let p = h * w;
    let s = render_sample::<f64>(11, &EquirectGrid::new(h, w)?, &PinholeFov::default())?;
    let sensor = SensorDepth::from_depth(s.sensor.dp.clone());
    let observed = sensor.mask.sum();
    let flat = Tensor::full(&[1, 1, h, w], sensor.dp.sum() / observed)?;

    let img = s.image.data();
    let taps: Vec<(i64, i64)> = stencil(3).into_iter().filter(|&d| d != (0, 0)).collect();
    let raw = Tensor::from_fn(&[1, 8, h, w], |q| {
        let (t, pix) = (q / p, q % p);
        let (i, j) = ((pix / w) as i64, (pix % w) as i64);
        let (r, c) = WrapPolicy::Spherical.resolve(i + taps[t].0, j + taps[t].1, h, w).unwrap();
        let d2: f64 = (0..3).map(|ch| (img[ch * p + pix] - img[ch * p + r * w + c]).powi(2)).sum();
        (-d2 / 0.01).exp()
    })?;

    // pixels within a few rows and columns of the sensor footprint
    let near = Tensor::from_fn(&[1, 1, h, w], |q| {
        let (i, j) = (q / w, q % w);
        let hit = (i.saturating_sub(6)..(i + 7).min(h))
            .any(|a| (j as i64 - 6..j as i64 + 7).any(|b| sensor.mask.data()[a * w + b.rem_euclid(w as i64) as usize] > 0.0));
        if hit && sensor.mask.data()[q] == 0.0 { 1.0 } else { 0.0 }
    })?;
    println!("{} sensor pixels, {} pixels in the surrounding band", observed, near.sum());
    println!("flat guess: band abs_rel {:.4}", evaluate(&flat, &s.depth_gt, &near)?.abs_rel);
    let zero = Tensor::zeros(&[1, 16, h, w])?;
    for v in [CspnVariant::Cspn, CspnVariant::Ig, CspnVariant::D] {
        let off = (v == CspnVariant::D).then_some(&zero);
        let cfg = PropagationConfig { iterations: 48, ..PropagationConfig::new(v) };
        let out = run_cspn(&flat, &raw, off, Some(&sensor), cfg)?;
        println!("{v:>5}: band abs_rel {:.4}", evaluate(&out, &s.depth_gt, &near)?.abs_rel);
    }
    Ok(())
}
