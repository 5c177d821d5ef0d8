//! Latency and extra-memory measurements for `im2col` versus `deform_im2col`.
//!
//! Memory is measured with [`CountingAlloc`], which the final binary installs:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: ode_depth::bench::CountingAlloc = ode_depth::bench::CountingAlloc;
//! ```

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt;
use std::hint::black_box;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::sampling::{deform_im2col, im2col, OffsetMode, SamplingGrid, Unfold};
use crate::sphere::EquirectGrid;
use crate::tensor::Tensor;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);
static MEASURING: Mutex<()> = Mutex::new(());

/// System allocator that tracks live and peak heap bytes.
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            grow(new_size);
        }
        p
    }
}

fn grow(bytes: usize) {
    ACTIVE.store(true, Ordering::Relaxed);
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

pub fn counter_installed() -> bool {
    drop(black_box(vec![0u8; 64]));
    ACTIVE.load(Ordering::Relaxed)
}

/// Runs `f` and returns its result with the peak heap growth above the
/// starting level, counting whatever the result still holds. Measurements are
/// serialized; allocations on other threads still count.
pub fn peak_extra<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let _guard = MEASURING.lock().unwrap_or_else(|e| e.into_inner());
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let r = black_box(f());
    (r, PEAK.load(Ordering::Relaxed).saturating_sub(base))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub op: &'static str,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub ns_per_call: f64,
    pub extra_bytes: usize,
}

pub const CSV_HEADER: &str = "op,h,w,c,k,ns_per_call,extra_bytes";

impl fmt::Display for BenchRow {
    /// One CSV row under [`CSV_HEADER`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{},{:.0},{}", self.op, self.h, self.w, self.c, self.k, self.ns_per_call, self.extra_bytes)
    }
}

/// Times `iters` calls of planar `im2col` and of tangent-offset
/// `deform_im2col` on a `1×c×h×w` map, and records each call's extra heap bytes.
pub fn bench_sampling(h: usize, w: usize, c: usize, k: usize, iters: usize) -> Result<[BenchRow; 2]> {
    if !counter_installed() {
        return Err(Error::Config("bench needs ode_depth::bench::CountingAlloc as the global allocator".into()));
    }
    if iters == 0 || c == 0 {
        return Err(Error::InvalidArgument("bench sizes must be at least 1".into()));
    }
    let eq = EquirectGrid::new(h, w)?;
    let x = Tensor::<f32>::randn(&[1, c, h, w], 1)?;
    let grid = SamplingGrid::inverse_gnomonic(&eq, k, eq.pitch())?;
    let off = Tensor::<f32>::zeros(&[1, 2 * k * k, h, w])?;
    let mode = OffsetMode::Tangent { cap: 4.0 * eq.pitch() };
    let unfold = Unfold::panorama(k, 1);

    let (r, plain_bytes) = peak_extra(|| im2col(&x, unfold));
    drop(r?);
    let (r, deform_bytes) = peak_extra(|| deform_im2col(&x, &grid, Some((&off, mode))));
    drop(r?);
    let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        f()?;
        let t = Instant::now();
        for _ in 0..iters {
            f()?;
        }
        Ok(t.elapsed().as_nanos() as f64 / iters as f64)
    };
    let plain_ns = time(&|| im2col(&x, unfold).map(|r| drop(black_box(r))))?;
    let deform_ns = time(&|| deform_im2col(&x, &grid, Some((&off, mode))).map(|r| drop(black_box(r))))?;
    let row = |op, ns_per_call, extra_bytes| BenchRow { op, h, w, c, k, ns_per_call, extra_bytes };
    Ok([row("im2col", plain_ns, plain_bytes), row("deform_im2col", deform_ns, deform_bytes)])
}

/// Least-squares line `y = a·x + b` with its coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("a fit needs at least two (x, y) pairs".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("fit needs at least two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r2 })
}

/// Benchmarks every `(h, k)` pair at `w = 2h` and fits deform extra bytes against `h·w·k²`.
pub fn sweep(heights: &[usize], kernels: &[usize], c: usize, iters: usize) -> Result<(Vec<BenchRow>, LinearFit)> {
    let mut rows = Vec::new();
    for &k in kernels {
        for &h in heights {
            rows.extend(bench_sampling(h, 2 * h, c, k, iters)?);
        }
    }
    let deform: Vec<&BenchRow> = rows.iter().filter(|r| r.op == "deform_im2col").collect();
    let xs: Vec<f64> = deform.iter().map(|r| (r.h * r.w * r.k * r.k) as f64).collect();
    let ys: Vec<f64> = deform.iter().map(|r| r.extra_bytes as f64).collect();
    let fit = linear_fit(&xs, &ys)?;
    Ok((rows, fit))
}
