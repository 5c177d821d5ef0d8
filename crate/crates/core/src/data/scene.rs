//! Procedural rooms and an exact ray caster over equirectangular pixels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sphere::{self, EquirectGrid};

/// Minimum distance between the camera and any primitive surface.
pub const CLEARANCE: f64 = 0.3;
/// Accepted ground-truth depth range in meters; scenes outside it are resampled.
pub const DEPTH_RANGE: (f64, f64) = (0.3, 20.0);

const AMBIENT: f64 = 0.25;

/// Room enclosure centered at the origin, `z` up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Room {
    Box { half: [f64; 3] },
    Sphere { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Box { center: [f64; 3], half: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

/// Parameters from which a [`Scene`] is drawn deterministically.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub room: Room,
    /// Inclusive range of the primitive count.
    pub primitives: (usize, usize),
    /// Range of primitive half-size or radius, meters.
    pub sizes: (f64, f64),
    /// Camera offset from the room center as a fraction of the half-extent.
    pub camera_jitter: f64,
    /// Unit vector pointing towards the light.
    pub light: [f64; 3],
}

impl SceneSpec {
    /// Empty room with the camera at its center.
    pub fn empty(room: Room) -> Self {
        SceneSpec {
            seed: 0,
            room,
            primitives: (0, 0),
            sizes: (0.2, 0.5),
            camera_jitter: 0.0,
            light: normalize([0.3, 0.2, 0.9]),
        }
    }

    /// Box room 4 to 10 m across with 2 to 6 primitives.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let half = [rng.random_range(2.0..5.0), rng.random_range(2.0..5.0), rng.random_range(1.3..2.0)];
        let az = rng.random_range(-PI..PI);
        let el = rng.random_range(0.5..1.2f64);
        SceneSpec {
            seed,
            room: Room::Box { half },
            primitives: (2, 6),
            sizes: (0.15, 0.6),
            camera_jitter: 0.3,
            light: [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.room {
            Room::Box { half } => half.iter().all(|&v| v > CLEARANCE && v.is_finite()),
            Room::Sphere { radius } => radius > CLEARANCE && radius.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("room {:?} is smaller than the camera clearance", self.room)));
        }
        if !(0.0..1.0).contains(&self.camera_jitter) {
            return Err(Error::InvalidArgument(format!("camera jitter {} outside [0, 1)", self.camera_jitter)));
        }
        if self.primitives.0 > self.primitives.1 || !(self.sizes.0 > 0.0 && self.sizes.0 <= self.sizes.1) {
            return Err(Error::InvalidArgument("empty primitive count or size range".into()));
        }
        if (sphere::norm(self.light) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("light direction must be a unit vector".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Scene> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2);
        let extent = match self.room {
            Room::Box { half } => half,
            Room::Sphere { radius } => [radius / 3f64.sqrt(); 3],
        };
        let j = self.camera_jitter;
        let camera = [
            j * extent[0] * rng.random_range(-1.0..1.0),
            j * extent[1] * rng.random_range(-1.0..1.0),
            0.5 * j * extent[2] * rng.random_range(-1.0..1.0),
        ];
        let count = rng.random_range(self.primitives.0..=self.primitives.1);
        let mut primitives = Vec::with_capacity(count);
        for _ in 0..count {
            for _ in 0..100 {
                let size = rng.random_range(self.sizes.0..=self.sizes.1);
                let is_box = rng.random_bool(0.5);
                let center: [f64; 3] = std::array::from_fn(|a| {
                    let room = (extent[a] - size).max(0.0);
                    rng.random_range(-room..=room)
                });
                let shape = if is_box {
                    let s = [size, size * rng.random_range(0.5..1.0), size * rng.random_range(0.5..1.5)];
                    Shape::Box { center, half: s }
                } else {
                    Shape::Sphere { center, radius: size }
                };
                let albedo = std::array::from_fn(|_| rng.random_range(0.2..0.95));
                let p = Primitive { shape, albedo };
                if surface_distance(&p.shape, camera) > CLEARANCE && fits(&p.shape, self.room) {
                    primitives.push(p);
                    break;
                }
            }
        }
        let walls = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.4..0.9)));
        let scene = Scene { room: self.room, camera, primitives, walls, light: self.light };
        scene.validate()?;
        Ok(scene)
    }
}

/// Concrete geometry: room, camera position, primitives and wall albedos.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub room: Room,
    pub camera: [f64; 3],
    pub primitives: Vec<Primitive>,
    /// `−x, +x, −y, +y, −z, +z` faces; the first entry colors a sphere room.
    pub walls: [[f64; 3]; 6],
    pub light: [f64; 3],
}

/// Depth and shaded color of one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub normal: [f64; 3],
    pub albedo: [f64; 3],
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let c = self.camera;
        let inside = match self.room {
            Room::Box { half } => (0..3).all(|a| c[a].abs() < half[a]),
            Room::Sphere { radius } => sphere::norm(c) < radius,
        };
        if !inside {
            return Err(Error::InvalidArgument(format!("camera {c:?} is not strictly inside the room")));
        }
        if let Some(p) = self.primitives.iter().find(|p| surface_distance(&p.shape, c) <= CLEARANCE) {
            return Err(Error::InvalidArgument(format!("primitive {:?} violates the camera clearance", p.shape)));
        }
        Ok(())
    }

    /// Nearest intersection along the unit ray `d` from the camera.
    pub fn trace(&self, d: [f64; 3]) -> Result<Hit> {
        let o = self.camera;
        let mut best = match self.room {
            Room::Box { half } => {
                let mut best: Option<(f64, usize)> = None;
                for a in 0..3 {
                    if d[a] == 0.0 {
                        continue;
                    }
                    let face = if d[a] > 0.0 { half[a] } else { -half[a] };
                    let t = (face - o[a]) / d[a];
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, 2 * a + usize::from(d[a] > 0.0)));
                    }
                }
                let (t, face) = best.ok_or_else(|| Error::InvalidArgument("zero ray direction".into()))?;
                let mut normal = [0.0; 3];
                normal[face / 2] = if face % 2 == 1 { -1.0 } else { 1.0 };
                Hit { depth: t, normal, albedo: self.walls[face] }
            }
            Room::Sphere { radius } => {
                let b = sphere::dot(o, d);
                let c = sphere::dot(o, o) - radius * radius;
                let t = -b + (b * b - c).sqrt();
                let p = along(o, d, t);
                Hit { depth: t, normal: scale(p, -1.0 / radius), albedo: self.walls[0] }
            }
        };
        if !(best.depth.is_finite() && best.depth > 0.0) {
            return Err(Error::InvalidArgument(format!("ray {d:?} escaped the room")));
        }
        for prim in &self.primitives {
            if let Some((t, normal)) = intersect(&prim.shape, o, d) {
                if t < best.depth {
                    best = Hit { depth: t, normal, albedo: prim.albedo };
                }
            }
        }
        Ok(best)
    }

    /// Lambertian shading with an ambient floor.
    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let lit = AMBIENT + (1.0 - AMBIENT) * sphere::dot(hit.normal, self.light).max(0.0);
        hit.albedo.map(|a| (a * lit).clamp(0.0, 1.0))
    }

    /// Ray-casts every pixel center: `(depth[h·w], rgb planes[3·h·w])`.
    pub fn render(&self, grid: &EquirectGrid) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = grid.h * grid.w;
        let hits: Vec<(f64, [f64; 3])> = (0..p)
            .into_par_iter()
            .map(|q| {
                let ray = grid.pixel_to_sphere((q / grid.w) as f64, (q % grid.w) as f64).unit_vector();
                let hit = self.trace(ray)?;
                Ok((hit.depth, self.shade(&hit)))
            })
            .collect::<Result<_>>()?;
        let depth = hits.iter().map(|h| h.0).collect();
        let mut rgb = vec![0.0; 3 * p];
        for (q, (_, c)) in hits.iter().enumerate() {
            for ch in 0..3 {
                rgb[ch * p + q] = c[ch];
            }
        }
        Ok((depth, rgb))
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    scale(v, 1.0 / sphere::norm(v))
}

fn scale(v: [f64; 3], s: f64) -> [f64; 3] {
    v.map(|x| x * s)
}

fn along(o: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|a| o[a] + t * d[a])
}

fn surface_distance(shape: &Shape, p: [f64; 3]) -> f64 {
    match *shape {
        Shape::Sphere { center, radius } => sphere::norm(std::array::from_fn(|a| p[a] - center[a])) - radius,
        Shape::Box { center, half } => {
            let out: [f64; 3] = std::array::from_fn(|a| ((p[a] - center[a]).abs() - half[a]).max(0.0));
            let outside = sphere::norm(out);
            if outside > 0.0 {
                outside
            } else {
                (0..3).map(|a| (p[a] - center[a]).abs() - half[a]).fold(f64::MIN, f64::max)
            }
        }
    }
}

fn fits(shape: &Shape, room: Room) -> bool {
    let (center, reach) = match *shape {
        Shape::Sphere { center, radius } => (center, [radius; 3]),
        Shape::Box { center, half } => (center, half),
    };
    match room {
        Room::Box { half } => (0..3).all(|a| center[a].abs() + reach[a] < half[a]),
        Room::Sphere { radius } => sphere::norm(center) + sphere::norm(reach) < radius,
    }
}

/// First positive hit of the ray `o + t·d` with a primitive, with the outward normal.
fn intersect(shape: &Shape, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc: [f64; 3] = std::array::from_fn(|a| o[a] - center[a]);
            let b = sphere::dot(oc, d);
            let c = sphere::dot(oc, oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            if t <= 0.0 {
                return None;
            }
            let p = along(o, d, t);
            Some((t, std::array::from_fn(|a| (p[a] - center[a]) / radius)))
        }
        Shape::Box { center, half } => {
            let (mut t_in, mut t_out, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
            for a in 0..3 {
                let (lo, hi) = (center[a] - half[a] - o[a], center[a] + half[a] - o[a]);
                if d[a] == 0.0 {
                    if lo > 0.0 || hi < 0.0 {
                        return None;
                    }
                    continue;
                }
                let (t0, t1) = if d[a] > 0.0 { (lo / d[a], hi / d[a]) } else { (hi / d[a], lo / d[a]) };
                if t0 > t_in {
                    t_in = t0;
                    axis = a;
                }
                t_out = t_out.min(t1);
            }
            if t_in > t_out || t_in <= 0.0 {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = -d[axis].signum();
            Some((t_in, n))
        }
    }
}
