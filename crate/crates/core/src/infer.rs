//! Running a trained checkpoint: single-panorama prediction, offset
//! inspection and split evaluation.

use crate::checkpoint::Checkpoint;
use crate::cspn::SensorDepth;
use crate::data::{load_split, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::DepthMetrics;
use crate::net::{Inspection, Stage};
use crate::tensor::{Precision, Real, Tensor};
use crate::train::{evaluate_samples, load_network, MIN_PRED_DEPTH};

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Refined depth, `1×1×h×w`, floored at [`MIN_PRED_DEPTH`].
    pub depth: Tensor<f64>,
    pub coarse: Tensor<f64>,
    /// False when the network takes no sensor input and the given one was ignored.
    pub sensor_used: bool,
    pub inspection: Option<Inspection>,
}

/// Predicts depth for one `1×3×h×w` panorama. A sensor map (`1×1×h×w`,
/// zero where unobserved) is required by networks trained with partial depth.
pub fn predict(
    ck: &Checkpoint,
    image: &Tensor<f64>,
    sensor: Option<&Tensor<f64>>,
    inspect: Option<(Stage, usize, usize)>,
) -> Result<Prediction> {
    match ck.train.precision {
        Precision::F32 => predict_typed::<f32>(ck, image, sensor, inspect),
        Precision::F64 => predict_typed::<f64>(ck, image, sensor, inspect),
    }
}

fn predict_typed<T: Real>(
    ck: &Checkpoint,
    image: &Tensor<f64>,
    sensor: Option<&Tensor<f64>>,
    inspect: Option<(Stage, usize, usize)>,
) -> Result<Prediction> {
    let mut net = load_network::<T>(ck)?;
    let (h, w) = (net.config.h, net.config.w);
    if image.shape() != [1, 3, h, w] {
        return Err(Error::shape("predict", format!("image {:?}, network expects [1, 3, {h}, {w}]", image.shape())));
    }
    let sensor = match (net.config.partial_depth, sensor) {
        (true, None) => return Err(Error::InvalidArgument("this network needs a sensor depth map".into())),
        (true, Some(s)) => {
            if s.shape() != [1, 1, h, w] {
                return Err(Error::shape("predict", format!("sensor {:?}, expected [1, 1, {h}, {w}]", s.shape())));
            }
            Some(SensorDepth::from_depth(s.cast::<T>()))
        }
        (false, _) => None,
    };
    let out = net.forward(&image.cast(), sensor.as_ref())?;
    let inspection = match inspect {
        Some((stage, i, j)) => Some(net.inspect(&out, stage, i, j)?),
        None => None,
    };
    Ok(Prediction {
        depth: out.depth_refined.cast::<f64>().map(|d| d.max(MIN_PRED_DEPTH)),
        coarse: out.depth_coarse.cast(),
        sensor_used: sensor.is_some(),
        inspection,
    })
}

/// Metrics of a checkpoint over one split of a dataset.
pub fn evaluate_checkpoint(ck: &Checkpoint, manifest: &DatasetManifest, split: Split) -> Result<DepthMetrics> {
    match ck.train.precision {
        Precision::F32 => evaluate_typed::<f32>(ck, manifest, split),
        Precision::F64 => evaluate_typed::<f64>(ck, manifest, split),
    }
}

fn evaluate_typed<T: Real>(ck: &Checkpoint, manifest: &DatasetManifest, split: Split) -> Result<DepthMetrics> {
    let mut net = load_network::<T>(ck)?;
    if (manifest.h, manifest.w) != (net.config.h, net.config.w) {
        return Err(Error::Config(format!(
            "dataset is {}x{} but the network expects {}x{}",
            manifest.h, manifest.w, net.config.h, net.config.w
        )));
    }
    let samples = load_split::<T>(manifest, split)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("the {split} split is empty")));
    }
    evaluate_samples(&mut net, &samples, ck.train.batch)
}
