//! Inverse gnomonic sampling locations of a 3×3 kernel at several latitudes.
//!
//! `cargo run --release --example geometry`

use ode_depth::sphere::{
    forward_gnomonic, great_circle_distance, ig_sampling_grid, inverse_gnomonic, EquirectGrid, SphereCoord, TangentCoord,
};

fn main() -> ode_depth::Result<()> {
    let eq = EquirectGrid::new(16, 32)?;
    let grid = ig_sampling_grid(&eq, 3, eq.pitch())?;
    for i in [0, 4, 8] {
        let c = eq.pixel_to_sphere(i as f64, 16.0);
        println!("pixel ({i}, 16) at latitude {:.1}°", c.phi.to_degrees());
        for row in 0..3 {
            let taps: Vec<String> = (0..3)
                .map(|col| {
                    let [r, c] = grid.coord(i, 16, row * 3 + col);
                    format!("({r:6.2}, {c:6.2})")
                })
                .collect();
            println!("  {}", taps.join(" "));
        }
    }

    let t = SphereCoord::new(0.6, -1.1);
    let s = TangentCoord::new(0.3, -0.2);
    let p = inverse_gnomonic(t, s);
    let back = forward_gnomonic(t, p)?;
    println!(
        "tangent ({}, {}) -> (φ {:.6}, θ {:.6}) -> ({:.12}, {:.12}); distance {:.12} = atan ρ {:.12}",
        s.x,
        s.y,
        p.phi,
        p.theta,
        back.x,
        back.y,
        great_circle_distance(t, p),
        s.norm().atan()
    );
    Ok(())
}
