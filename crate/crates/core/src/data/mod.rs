//! Synthetic equirectangular RGB-D samples, partial sensor depth and file I/O.

mod formats;
mod manifest;
mod scene;

use std::fs;
use std::path::Path;

use rayon::prelude::*;

pub use formats::{
    colorize, decode_pfm, decode_ppm, encode_pfm, encode_ppm, read_pfm, read_ppm, turbo, write_pfm, write_ppm,
};
pub use manifest::{DatasetManifest, ManifestEntry, Split, MAGIC};
pub use scene::{Hit, Primitive, Room, Scene, SceneSpec, Shape, CLEARANCE, DEPTH_RANGE};

use crate::cspn::SensorDepth;
use crate::error::{Error, Result};
use crate::sphere::{fov_mask, EquirectGrid, PinholeFov};
use crate::tensor::{Real, Tensor};

pub const MANIFEST_NAME: &str = "manifest.txt";

/// One panorama: `1×3×h×w` image, `1×1×h×w` depth and the front-view sensor depth.
#[derive(Clone, Debug, PartialEq)]
pub struct OmniSample<T: Real> {
    pub image: Tensor<T>,
    pub depth_gt: Tensor<T>,
    pub sensor: SensorDepth<T>,
}

impl<T: Real> OmniSample<T> {
    pub fn from_parts(image: Tensor<T>, depth_gt: Tensor<T>, mask: &Tensor<T>) -> Result<Self> {
        depth_gt.same_shape(mask, "sample mask")?;
        let dp = Tensor::from_fn(depth_gt.shape(), |q| depth_gt.data()[q] * mask.data()[q])?;
        Ok(OmniSample { image, depth_gt, sensor: SensorDepth::from_depth(dp) })
    }
}

/// Renders the scene drawn from `spec`; the sensor sees the `fov` frustum.
pub fn render_scene<T: Real>(spec: &SceneSpec, grid: &EquirectGrid, fov: &PinholeFov) -> Result<OmniSample<T>> {
    let scene = spec.build()?;
    let (depth, rgb) = scene.render(grid)?;
    let (h, w) = (grid.h, grid.w);
    let image = Tensor::new(&[1, 3, h, w], rgb.into_iter().map(T::lit).collect())?;
    let depth = Tensor::new(&[1, 1, h, w], depth.into_iter().map(T::lit).collect())?;
    OmniSample::from_parts(image, depth, &fov_mask(grid, fov))
}

/// Number of samples per split; files are numbered train, then val, then test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// One eighth (at least one, when `n ≥ 2`) goes to validation.
    pub fn for_total(n: usize) -> Self {
        let val = if n >= 2 { (n / 8).max(1) } else { 0 };
        SplitCounts { train: n - val, val, test: 0 }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, i: usize) -> Split {
        if i < self.train {
            Split::Train
        } else if i < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Seed of sample `index`; each dataset seed owns a disjoint 2³²-wide range.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    (seed << 32) | index as u64
}

/// Draws scenes until the rendered depth lies in [`DEPTH_RANGE`].
pub fn render_sample<T: Real>(seed: u64, grid: &EquirectGrid, fov: &PinholeFov) -> Result<OmniSample<T>> {
    for attempt in 0..64u64 {
        let spec = SceneSpec::random(seed ^ (attempt << 56));
        let s = render_scene::<T>(&spec, grid, fov)?;
        let (lo, hi) = s.depth_gt.min_max();
        if lo.as_f64() >= DEPTH_RANGE.0 && hi.as_f64() <= DEPTH_RANGE.1 {
            return Ok(s);
        }
    }
    Err(Error::InvalidArgument(format!("no scene within the depth range for seed {seed}")))
}

pub fn make_dataset(n: usize, grid: EquirectGrid, fov: PinholeFov, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    make_dataset_split(SplitCounts::for_total(n), grid, fov, out_dir, seed)
}

/// Writes `<i>_image.ppm`, `<i>_depth.pfm`, `<i>_sensor.pfm` per sample plus the manifest.
pub fn make_dataset_split(
    counts: SplitCounts,
    grid: EquirectGrid,
    fov: PinholeFov,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = (0..counts.total())
        .into_par_iter()
        .map(|i| {
            let s = render_sample::<f64>(sample_seed(seed, i), &grid, &fov)?;
            let e = ManifestEntry {
                split: counts.split_of(i),
                image: format!("{i:05}_image.ppm").into(),
                depth: format!("{i:05}_depth.pfm").into(),
                sensor: format!("{i:05}_sensor.pfm").into(),
            };
            write_ppm(&out_dir.join(&e.image), &s.image)?;
            write_pfm(&out_dir.join(&e.depth), &s.depth_gt)?;
            write_pfm(&out_dir.join(&e.sensor), &s.sensor.dp)?;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = DatasetManifest { h: grid.h, w: grid.w, entries, root: out_dir.to_path_buf() };
    m.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(m)
}

/// Reads one sample; the sensor mask is recovered from the nonzero sensor pixels.
pub fn load_sample<T: Real>(m: &DatasetManifest, e: &ManifestEntry) -> Result<OmniSample<T>> {
    let image = read_ppm(&m.resolve(&e.image))?;
    let depth_gt = read_pfm(&m.resolve(&e.depth))?;
    let dp = read_pfm(&m.resolve(&e.sensor))?;
    for (t, p, c) in [(&image, &e.image, 3), (&depth_gt, &e.depth, 1), (&dp, &e.sensor, 1)] {
        if t.shape() != [1, c, m.h, m.w] {
            return Err(Error::Config(format!(
                "{}: {:?} does not match the manifest grid {}x{}",
                m.resolve(p).display(),
                t.shape(),
                m.h,
                m.w
            )));
        }
    }
    Ok(OmniSample { image, depth_gt, sensor: SensorDepth::from_depth(dp) })
}

pub fn load_split<T: Real>(m: &DatasetManifest, split: Split) -> Result<Vec<OmniSample<T>>> {
    let entries: Vec<_> = m.split(split).collect();
    entries.par_iter().map(|e| load_sample(m, e)).collect()
}

/// Samples stacked along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Real> {
    pub image: Tensor<T>,
    pub depth_gt: Tensor<T>,
    pub sensor: SensorDepth<T>,
}

fn stack<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        p.same_shape(first, "batch")?;
        data.extend_from_slice(p.data());
    }
    shape[0] *= parts.len();
    Tensor::new(&shape, data)
}

pub fn collate<T: Real>(samples: &[&OmniSample<T>]) -> Result<Batch<T>> {
    let pick = |f: fn(&OmniSample<T>) -> &Tensor<T>| stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>());
    Ok(Batch {
        image: pick(|s| &s.image)?,
        depth_gt: pick(|s| &s.depth_gt)?,
        sensor: SensorDepth { dp: pick(|s| &s.sensor.dp)?, mask: pick(|s| &s.sensor.mask)? },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        assert_eq!(SplitCounts::for_total(0), SplitCounts { train: 0, val: 0, test: 0 });
        assert_eq!(SplitCounts::for_total(4), SplitCounts { train: 3, val: 1, test: 0 });
        assert_eq!(SplitCounts::for_total(576), SplitCounts { train: 504, val: 72, test: 0 });
        let c = SplitCounts { train: 2, val: 1, test: 1 };
        assert_eq!((0..4).map(|i| c.split_of(i)).collect::<Vec<_>>(), [Split::Train, Split::Train, Split::Val, Split::Test]);
    }

    #[test]
    fn sensor_is_depth_times_mask() {
        let g = EquirectGrid::new(16, 32).unwrap();
        let s: OmniSample<f64> = render_sample(7, &g, &PinholeFov::default()).unwrap();
        let mask: Tensor<f64> = fov_mask(&g, &PinholeFov::default());
        assert_eq!(s.sensor.mask, mask);
        for q in 0..g.h * g.w {
            assert_eq!(s.sensor.dp.data()[q], s.depth_gt.data()[q] * mask.data()[q]);
        }
    }

    #[test]
    fn collate_stacks_items() {
        let g = EquirectGrid::new(4, 8).unwrap();
        let a: OmniSample<f32> = render_sample(1, &g, &PinholeFov::default()).unwrap();
        let b: OmniSample<f32> = render_sample(2, &g, &PinholeFov::default()).unwrap();
        let batch = collate(&[&a, &b]).unwrap();
        assert_eq!(batch.image.shape(), &[2, 3, 4, 8]);
        assert_eq!(batch.depth_gt.item(1), b.depth_gt.data());
        assert_eq!(batch.sensor.mask.item(0), a.sensor.mask.data());
    }
}
