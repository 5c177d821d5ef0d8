//! Spherical coordinates, equirectangular pixel conventions, gnomonic
//! projections and the pinhole field-of-view mask.
//!
//! Conventions used everywhere in the crate:
//!
//! * latitude `phi ∈ [-π/2, π/2]` (north positive), longitude `theta ∈ [-π, π)`;
//! * unit ray of `(phi, theta)` is `(cos φ cos θ, cos φ sin θ, sin φ)`, so the
//!   front view looks along `+x` and `+z` is up;
//! * pixel `(i, j)` of an `h × w` panorama has its *center* at
//!   `φ = π/2 − (i + ½)·π/h`, `θ = −π + (j + ½)·2π/w` (row 0 is north);
//! * tangent-plane coordinates `(x, y)` point east and north.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};
use crate::sampling::{SamplingGrid, WrapPolicy};
use crate::tensor::{Real, Tensor};

/// Below this tangent-plane radius the inverse projection returns the tangent
/// point itself.
pub const RHO_EPS: f64 = 1e-12;

/// Wraps a longitude into `[-π, π)`.
pub fn normalize_longitude(theta: f64) -> f64 {
    let mut t = theta - TAU * ((theta + PI) / TAU).floor();
    if t >= PI {
        t -= TAU;
    }
    if t < -PI {
        t = -PI;
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereCoord {
    pub phi: f64,
    pub theta: f64,
}

impl SphereCoord {
    /// Clamps latitude to the closed range and wraps longitude.
    pub fn new(phi: f64, theta: f64) -> Self {
        SphereCoord {
            phi: phi.clamp(-FRAC_PI_2, FRAC_PI_2),
            theta: normalize_longitude(theta),
        }
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (sp, cp) = self.phi.sin_cos();
        let (st, ct) = self.theta.sin_cos();
        [cp * ct, cp * st, sp]
    }

    pub fn from_vector(v: [f64; 3]) -> Self {
        let r = norm(v);
        SphereCoord::new((v[2] / r).clamp(-1.0, 1.0).asin(), v[1].atan2(v[0]))
    }

    /// Local east unit vector.
    pub fn east(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        [-st, ct, 0.0]
    }

    /// Local north unit vector.
    pub fn north(&self) -> [f64; 3] {
        let (sp, cp) = self.phi.sin_cos();
        let (st, ct) = self.theta.sin_cos();
        [-sp * ct, -sp * st, cp]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TangentCoord {
    pub x: f64,
    pub y: f64,
}

impl TangentCoord {
    pub fn new(x: f64, y: f64) -> Self {
        TangentCoord { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// A full 2:1 equirectangular panorama grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EquirectGrid {
    pub h: usize,
    pub w: usize,
}

impl EquirectGrid {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w != 2 * h {
            return Err(Error::InvalidArgument(format!(
                "equirectangular grid must satisfy w == 2h >= 2, got {h}x{w}"
            )));
        }
        Ok(EquirectGrid { h, w })
    }

    /// Angular size of one pixel (identical along both axes).
    pub fn pitch(&self) -> f64 {
        PI / self.h as f64
    }

    /// Fractional pixel coordinates are allowed; longitude is wrapped.
    pub fn pixel_to_sphere(&self, i: f64, j: f64) -> SphereCoord {
        let phi = FRAC_PI_2 - (i + 0.5) * PI / self.h as f64;
        let theta = -PI + (j + 0.5) * TAU / self.w as f64;
        SphereCoord::new(phi, theta)
    }

    /// Inverse of [`EquirectGrid::pixel_to_sphere`]: `(row, col)`.
    pub fn sphere_to_pixel(&self, p: SphereCoord) -> (f64, f64) {
        let i = (FRAC_PI_2 - p.phi) * self.h as f64 / PI - 0.5;
        let j = (p.theta + PI) * self.w as f64 / TAU - 0.5;
        (i, j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinholeFov {
    pub hfov: f64,
    pub vfov: f64,
    pub center: SphereCoord,
}

impl PinholeFov {
    pub fn new(hfov: f64, vfov: f64, center: SphereCoord) -> Result<Self> {
        let ok = |a: f64| a > 0.0 && a < PI;
        if !ok(hfov) || !ok(vfov) {
            return Err(Error::InvalidArgument(format!(
                "field of view must lie in (0, π): hfov={hfov}, vfov={vfov}"
            )));
        }
        Ok(PinholeFov { hfov, vfov, center })
    }

    pub fn from_degrees(hfov: f64, vfov: f64) -> Result<Self> {
        Self::new(hfov.to_radians(), vfov.to_radians(), SphereCoord::new(0.0, 0.0))
    }

    /// Whether a unit ray falls inside the frustum.
    pub fn contains(&self, ray: [f64; 3]) -> bool {
        let forward = dot(ray, self.center.unit_vector());
        if forward <= 0.0 {
            return false;
        }
        let right = dot(ray, self.center.east());
        let up = dot(ray, self.center.north());
        right.atan2(forward).abs() <= self.hfov / 2.0 && up.atan2(forward).abs() <= self.vfov / 2.0
    }
}

impl Default for PinholeFov {
    /// 70° × 60° looking at `(0, 0)`.
    fn default() -> Self {
        PinholeFov::from_degrees(70.0, 60.0).expect("valid default field of view")
    }
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Maps a tangent-plane point around `t` back onto the sphere.
///
/// With `ρ = ‖s‖` and `v = atan ρ`:
///
/// ```text
/// φ = asin(cos v · sin τφ + y · sin v · cos τφ / ρ)
/// θ = τθ + atan2(x · sin v, ρ · cos τφ · cos v − y · sin τφ · sin v)
/// ```
pub fn inverse_gnomonic(t: SphereCoord, s: TangentCoord) -> SphereCoord {
    let rho = s.norm();
    if rho < RHO_EPS {
        return t;
    }
    let v = rho.atan();
    let (sv, cv) = v.sin_cos();
    let (sp, cp) = t.phi.sin_cos();
    let phi = (cv * sp + s.y * sv * cp / rho).clamp(-1.0, 1.0).asin();
    let theta = t.theta + (s.x * sv).atan2(rho * cp * cv - s.y * sp * sv);
    SphereCoord::new(phi, theta)
}

/// Partial derivatives of [`inverse_gnomonic`] with respect to the tangent
/// coordinates: `[[∂φ/∂x, ∂φ/∂y], [∂θ/∂x, ∂θ/∂y]]`.
///
/// Evaluated through the equivalent central projection
/// `P = (C + xE + yN) / ‖C + xE + yN‖`. Undefined exactly at a pole, where
/// longitude is degenerate; there the longitude row is zero.
pub fn inverse_gnomonic_jacobian(t: SphereCoord, s: TangentCoord) -> [[f64; 2]; 2] {
    let c = t.unit_vector();
    let e = t.east();
    let n = t.north();
    let v = [
        c[0] + s.x * e[0] + s.y * n[0],
        c[1] + s.x * e[1] + s.y * n[1],
        c[2] + s.x * e[2] + s.y * n[2],
    ];
    let len = norm(v);
    let p = [v[0] / len, v[1] / len, v[2] / len];
    // dP/da = (A - P (P·A)) / |V| for tangent direction A
    let dp = |a: [f64; 3]| {
        let pa = dot(p, a);
        [
            (a[0] - p[0] * pa) / len,
            (a[1] - p[1] * pa) / len,
            (a[2] - p[2] * pa) / len,
        ]
    };
    let dx = dp(e);
    let dy = dp(n);
    let cos_phi = (p[0] * p[0] + p[1] * p[1]).sqrt();
    let rxy = p[0] * p[0] + p[1] * p[1];
    let dphi = |d: [f64; 3]| if cos_phi > 0.0 { d[2] / cos_phi } else { 0.0 };
    let dtheta = |d: [f64; 3]| {
        if rxy > 0.0 {
            (p[0] * d[1] - p[1] * d[0]) / rxy
        } else {
            0.0
        }
    };
    [[dphi(dx), dphi(dy)], [dtheta(dx), dtheta(dy)]]
}

/// Projects `p` onto the plane tangent at `t`. Fails when `p` is 90° or more
/// away from `t`.
pub fn forward_gnomonic(t: SphereCoord, p: SphereCoord) -> Result<TangentCoord> {
    let (sp0, cp0) = t.phi.sin_cos();
    let (sp, cp) = p.phi.sin_cos();
    let (sd, cd) = (p.theta - t.theta).sin_cos();
    let cos_c = sp0 * sp + cp0 * cp * cd;
    if cos_c <= 1e-12 {
        return Err(Error::Projection(format!(
            "point ({:.6}, {:.6}) is at least 90° from tangent point ({:.6}, {:.6})",
            p.phi, p.theta, t.phi, t.theta
        )));
    }
    Ok(TangentCoord {
        x: cp * sd / cos_c,
        y: (cp0 * sp - sp0 * cp * cd) / cos_c,
    })
}

/// Angle between two points, computed as `atan2(‖a×b‖, a·b)` on unit vectors
/// so that it stays accurate for nearly coincident points.
pub fn great_circle_distance(a: SphereCoord, b: SphereCoord) -> f64 {
    let ua = a.unit_vector();
    let ub = b.unit_vector();
    norm(cross(ua, ub)).atan2(dot(ua, ub))
}

/// Tap offsets of a `k × k` stencil as `(row, col)` integer deltas, row-major.
pub fn stencil(k: usize) -> Vec<(i64, i64)> {
    let r = (k / 2) as i64;
    (-r..=r).flat_map(|di| (-r..=r).map(move |dj| (di, dj))).collect()
}

/// Tangent-plane position of a stencil tap: columns go east, rows go south.
pub fn tap_tangent(di: i64, dj: i64, step: f64) -> TangentCoord {
    TangentCoord::new(dj as f64 * step, -(di as f64) * step)
}

pub(crate) fn check_odd(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {k}")));
    }
    Ok(())
}

/// Fractional source coordinate of one tap of output pixel `(i, j)`, with the
/// tangent offset `s` already including any learned deformation.
pub fn ig_tap_coordinate(grid: &EquirectGrid, i: usize, j: usize, s: TangentCoord) -> (f64, f64) {
    let t = grid.pixel_to_sphere(i as f64, j as f64);
    grid.sphere_to_pixel(inverse_gnomonic(t, s))
}

/// Builds the inverse-gnomonic sampling grid: every output pixel gets the
/// `k²` tangent-plane taps `{-(k-1)/2..(k-1)/2}² · step` pushed through
/// [`inverse_gnomonic`] and converted back to fractional pixel coordinates.
pub fn ig_sampling_grid(grid: &EquirectGrid, k: usize, step: f64) -> Result<SamplingGrid> {
    check_odd(k)?;
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("tangent step must be positive, got {step}")));
    }
    let taps = stencil(k);
    let mut coords = Vec::with_capacity(grid.h * grid.w * taps.len());
    for i in 0..grid.h {
        for j in 0..grid.w {
            for &(di, dj) in &taps {
                let (r, c) = ig_tap_coordinate(grid, i, j, tap_tangent(di, dj, step));
                coords.push([r, c]);
            }
        }
    }
    SamplingGrid::new(grid.h, grid.w, k, coords, WrapPolicy::Spherical)
}

/// `1×1×h×w` indicator of the pixels whose center ray lies in the frustum.
pub fn fov_mask<T: Real>(grid: &EquirectGrid, fov: &PinholeFov) -> Tensor<T> {
    Tensor::from_fn(&[1, 1, grid.h, grid.w], |idx| {
        let (i, j) = (idx / grid.w, idx % grid.w);
        let ray = grid.pixel_to_sphere(i as f64, j as f64).unit_vector();
        if fov.contains(ray) {
            T::one()
        } else {
            T::zero()
        }
    })
    .expect("grid dimensions are non-zero")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-12;

    #[test]
    fn pixel_to_sphere_corner() {
        let g = EquirectGrid::new(2, 4).unwrap();
        let p = g.pixel_to_sphere(0.0, 0.0);
        assert!((p.phi - PI / 4.0).abs() < EPS);
        assert!((p.theta + 3.0 * PI / 4.0).abs() < EPS);
    }

    #[test]
    fn center_pixel_is_near_equator() {
        for h in [2usize, 3, 8, 33] {
            let g = EquirectGrid::new(h, 2 * h).unwrap();
            let p = g.pixel_to_sphere((h / 2) as f64, h as f64);
            assert!(p.phi.abs() <= PI / (2.0 * h as f64) + EPS);
        }
    }

    #[test]
    fn grid_requires_two_to_one() {
        assert!(EquirectGrid::new(64, 100).is_err());
        assert!(EquirectGrid::new(0, 0).is_err());
    }

    #[test]
    fn pixel_roundtrip() {
        let g = EquirectGrid::new(17, 34).unwrap();
        for i in 0..17 {
            for j in 0..34 {
                let (r, c) = g.sphere_to_pixel(g.pixel_to_sphere(i as f64, j as f64));
                assert!((r - i as f64).abs() < EPS && (c - j as f64).abs() < EPS);
            }
        }
    }

    #[test]
    fn inverse_gnomonic_spot_values() {
        let o = SphereCoord::new(0.0, 0.0);
        let p = inverse_gnomonic(o, TangentCoord::new(0.0, 1.0));
        assert!((p.phi - PI / 4.0).abs() < EPS && p.theta.abs() < EPS);
        let p = inverse_gnomonic(o, TangentCoord::new(1.0, 0.0));
        assert!(p.phi.abs() < EPS && (p.theta - PI / 4.0).abs() < EPS);
        let t = SphereCoord::new(0.3, 1.1);
        assert_eq!(inverse_gnomonic(t, TangentCoord::new(0.0, 0.0)), t);
        assert_eq!(inverse_gnomonic(t, TangentCoord::new(1e-13, 0.0)), t);
    }

    #[test]
    fn forward_gnomonic_identity_and_domain() {
        let t = SphereCoord::new(-0.4, 2.0);
        let s = forward_gnomonic(t, t).unwrap();
        assert!(s.x.abs() < EPS && s.y.abs() < EPS);
        let antipode = SphereCoord::new(0.4, 2.0 - PI);
        assert!(matches!(forward_gnomonic(t, antipode), Err(Error::Projection(_))));
        let quarter = SphereCoord::new(0.0, PI / 2.0);
        assert!(forward_gnomonic(SphereCoord::new(0.0, 0.0), quarter).is_err());
    }

    fn random_point(rng: &mut impl Rng) -> SphereCoord {
        // uniform on the sphere
        let z: f64 = rng.random_range(-1.0..1.0);
        SphereCoord::new(z.asin(), rng.random_range(-PI..PI))
    }

    #[test]
    fn gnomonic_roundtrip_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        let mut n = 0;
        while n < 1000 {
            let t = random_point(&mut rng);
            let p = random_point(&mut rng);
            if great_circle_distance(t, p) >= PI / 2.0 - 1e-3 {
                continue;
            }
            let s = forward_gnomonic(t, p).unwrap();
            let back = inverse_gnomonic(t, s);
            worst = worst.max(great_circle_distance(back, p));
            n += 1;
        }
        assert!(worst < 1e-9, "worst round-trip error {worst}");
    }

    #[test]
    fn great_circle_spot_values() {
        let d = great_circle_distance(SphereCoord::new(0.0, 0.0), SphereCoord::new(0.0, PI / 2.0));
        assert!((d - PI / 2.0).abs() < EPS);
        let d = great_circle_distance(SphereCoord::new(FRAC_PI_2, 0.3), SphereCoord::new(FRAC_PI_2, -2.0));
        assert!(d.abs() < EPS);
    }

    proptest! {
        #[test]
        fn angular_distance_equals_arctan_radius(
            phi in -FRAC_PI_2..FRAC_PI_2, theta in -PI..PI,
            x in -50.0f64..50.0, y in -50.0f64..50.0,
        ) {
            let t = SphereCoord::new(phi, theta);
            let s = TangentCoord::new(x, y);
            let d = great_circle_distance(t, inverse_gnomonic(t, s));
            prop_assert!((d - s.norm().atan()).abs() < 1e-9);
        }

        #[test]
        fn triangle_inequality(
            a in (-FRAC_PI_2..FRAC_PI_2, -PI..PI),
            b in (-FRAC_PI_2..FRAC_PI_2, -PI..PI),
            c in (-FRAC_PI_2..FRAC_PI_2, -PI..PI),
        ) {
            let (a, b, c) = (SphereCoord::new(a.0, a.1), SphereCoord::new(b.0, b.1), SphereCoord::new(c.0, c.1));
            let ab = great_circle_distance(a, b);
            prop_assert!((ab - great_circle_distance(b, a)).abs() < 1e-15);
            prop_assert!(ab <= great_circle_distance(a, c) + great_circle_distance(c, b) + 1e-12);
        }

        #[test]
        fn jacobian_matches_finite_differences(
            phi in -1.4f64..1.4, theta in -PI..PI, x in -2.0f64..2.0, y in -2.0f64..2.0,
        ) {
            let t = SphereCoord::new(phi, theta);
            let s = TangentCoord::new(x, y);
            let p = inverse_gnomonic(t, s);
            prop_assume!(p.phi.abs() < 1.45);
            let jac = inverse_gnomonic_jacobian(t, s);
            let h = 1e-6;
            for (axis, (dx, dy)) in [(1.0, 0.0), (0.0, 1.0)].into_iter().enumerate() {
                let a = inverse_gnomonic(t, TangentCoord::new(x + h * dx, y + h * dy));
                let b = inverse_gnomonic(t, TangentCoord::new(x - h * dx, y - h * dy));
                let dphi = (a.phi - b.phi) / (2.0 * h);
                let dtheta = normalize_longitude(a.theta - b.theta) / (2.0 * h);
                prop_assert!((dphi - jac[0][axis]).abs() < 1e-5 * (1.0 + dphi.abs()));
                prop_assert!((dtheta - jac[1][axis]).abs() < 1e-5 * (1.0 + dtheta.abs()));
            }
        }
    }

    #[test]
    fn k1_grid_samples_itself() {
        let g = EquirectGrid::new(8, 16).unwrap();
        let sg = ig_sampling_grid(&g, 1, g.pitch()).unwrap();
        for i in 0..8 {
            for j in 0..16 {
                let [r, c] = sg.coord(i, j, 0);
                assert!((r - i as f64).abs() < 1e-9 && (c - j as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let g = EquirectGrid::new(8, 16).unwrap();
        assert!(ig_sampling_grid(&g, 2, 0.1).is_err());
    }

    #[test]
    fn equator_grid_is_nearly_the_integer_stencil() {
        let g = EquirectGrid::new(256, 512).unwrap();
        let sg = ig_sampling_grid(&g, 3, g.pitch()).unwrap();
        let mut worst = 0.0f64;
        for i in [127usize, 128] {
            for j in [0usize, 100, 511] {
                for (t, (di, dj)) in stencil(3).into_iter().enumerate() {
                    let [r, c] = sg.coord(i, j, t);
                    let want_c = j as f64 + dj as f64;
                    // compare modulo the seam
                    let dc = (c - want_c).rem_euclid(512.0);
                    let dc = dc.min(512.0 - dc);
                    worst = worst.max((r - (i as f64 + di as f64)).abs()).max(dc);
                }
            }
        }
        assert!(worst < 0.01, "equator deviation {worst}");
    }

    #[test]
    fn polar_neighbors_spread_over_many_columns() {
        let g = EquirectGrid::new(32, 64).unwrap();
        let sg = ig_sampling_grid(&g, 3, g.pitch()).unwrap();
        let cols: Vec<f64> = (0..9).map(|t| sg.coord(0, 10, t)[1]).collect();
        let spread = cols.iter().cloned().fold(f64::MIN, f64::max) - cols.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 3.0, "spread {spread}");
    }

    #[test]
    fn fov_mask_center_and_symmetry() {
        let g = EquirectGrid::new(32, 64).unwrap();
        let fov = PinholeFov::default();
        let m: Tensor<f64> = fov_mask(&g, &fov);
        // θ=0 sits between columns 31 and 32; check the ray at (0,0) directly.
        assert!(fov.contains(SphereCoord::new(0.0, 0.0).unit_vector()));
        assert_eq!(m.data()[16 * 64 + 32], 1.0);
        for i in 0..32 {
            for j in 0..64 {
                assert_eq!(m.data()[i * 64 + j], m.data()[(31 - i) * 64 + j]);
            }
        }
    }

    #[test]
    fn fov_mask_approaches_front_hemisphere() {
        let g = EquirectGrid::new(32, 64).unwrap();
        let a = PI - 1e-9;
        let fov = PinholeFov::new(a, a, SphereCoord::new(0.0, 0.0)).unwrap();
        let m: Tensor<f64> = fov_mask(&g, &fov);
        for i in 0..32 {
            for j in 0..64 {
                let ray = g.pixel_to_sphere(i as f64, j as f64).unit_vector();
                let want = if ray[0] > 1e-6 { 1.0 } else { 0.0 };
                if ray[0].abs() > 1e-6 {
                    assert_eq!(m.data()[i * 64 + j], want);
                }
            }
        }
        assert!(PinholeFov::new(PI, 1.0, SphereCoord::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn fov_mask_solid_angle_fraction() {
        let g = EquirectGrid::new(128, 256).unwrap();
        let fov = PinholeFov::default();
        let m: Tensor<f64> = fov_mask(&g, &fov);
        let (mut inside, mut total) = (0.0, 0.0);
        for i in 0..128 {
            let wgt = g.pixel_to_sphere(i as f64, 0.0).phi.cos();
            for j in 0..256 {
                total += wgt;
                inside += wgt * m.data()[i * 256 + j];
            }
        }
        let frac = inside / total;
        // Monte-Carlo oracle over uniform directions
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 400_000;
        let hits = (0..trials).filter(|_| fov.contains(random_point(&mut rng).unit_vector())).count();
        let mc = hits as f64 / trials as f64;
        // closed form for a rectangular pyramid: Ω = 4 asin(sin a · sin b)
        let exact = 4.0 * ((35f64).to_radians().sin() * (30f64).to_radians().sin()).asin() / (4.0 * PI);
        assert!((mc - exact).abs() / exact < 0.02, "mc {mc} exact {exact}");
        assert!((frac - exact).abs() / exact < 0.02, "mask {frac} exact {exact}");
    }
}
