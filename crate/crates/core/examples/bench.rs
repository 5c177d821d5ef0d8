//! Extra heap bytes and latency of `deform_im2col` versus `im2col` over a size sweep.
//!
//! `cargo run --release --example bench`

use ode_depth::bench::{self, CountingAlloc, CSV_HEADER};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() -> ode_depth::Result<()> {
    let (rows, fit) = bench::sweep(&[16, 32, 48, 64], &[3, 5], 16, 3)?;
    println!("{CSV_HEADER}");
    for r in &rows {
        println!("{r}");
    }
    println!("deform extra bytes ≈ {:.2}·h·w·k² + {:.0} (R² = {:.6})", fit.slope, fit.intercept, fit.r2);
    for pair in rows.chunks(2) {
        println!("h={} k={}: deform/plain time {:.2}x", pair[0].h, pair[0].k, pair[1].ns_per_call / pair[0].ns_per_call);
    }
    Ok(())
}
