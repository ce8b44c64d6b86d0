use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::scale_table;
use crate::error::{Error, Result};
use crate::geometry::{slot, CameraParams, Point2};
use crate::nn::PtModel;
use crate::scene::{project_all, synthesize_batch, visibility_check, PerturbationSpec, PoseRanges, Scene};
use crate::seed::{self, stream};

/// Quantile of clean-capture distances used as the default drift threshold.
pub const DRIFT_QUANTILE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftVerdict {
    pub camera: usize,
    pub distance: f64,
    pub drifted: bool,
}

/// Scaled RMS difference over the nine intrinsic slots. Intrinsics do not
/// depend on where the rig stands, so the prediction can be compared with the
/// factory values directly.
pub fn intrinsic_distance(pred: &CameraParams, oem: &CameraParams, lambda_scale: f64) -> f64 {
    let scale = scale_table(lambda_scale);
    let (a, b) = (pred.to_array(), oem.to_array());
    let sq: f64 = slot::INTRINSICS.map(|i| ((a[i] - b[i]) * scale[i]).powi(2)).sum();
    (sq / slot::INTRINSICS.len() as f64).sqrt()
}

/// Compares the network's estimate for each camera with the factory calibration.
pub fn detect_decalibration(
    model: &PtModel,
    observations: &[Vec<Point2>],
    oem: &[CameraParams],
    threshold: f64,
    lambda_scale: f64,
) -> Result<Vec<DriftVerdict>> {
    let pred = model.predict(observations)?;
    if oem.len() != pred.len() {
        return Err(Error::ShapeMismatch(format!("{} OEM cameras for {} predictions", oem.len(), pred.len())));
    }
    Ok(pred
        .iter()
        .zip(oem)
        .enumerate()
        .map(|(camera, (p, o))| {
            let distance = intrinsic_distance(p, o, lambda_scale);
            DriftVerdict {
                camera,
                distance,
                drifted: distance > threshold,
            }
        })
        .collect())
}

/// Largest per-camera distance for each of `n` captures of the exact factory rig.
pub fn clean_distances(
    model: &PtModel,
    scene: &Scene,
    ranges: &PoseRanges,
    n: usize,
    lambda_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let batch = synthesize_batch(n, scene, &PerturbationSpec::none(), ranges, seed)?;
    let oem = &scene.oem.cameras;
    batch
        .samples
        .iter()
        .map(|s| {
            let v = detect_decalibration(model, &s.observations, oem, f64::INFINITY, lambda_scale)?;
            Ok(v.iter().map(|d| d.distance).fold(0.0, f64::max))
        })
        .collect()
}

/// Threshold at `quantile` of the clean-capture distances.
pub fn calibrate_threshold(distances: &[f64], quantile: f64) -> f64 {
    let mut d = distances.to_vec();
    d.sort_by(f64::total_cmp);
    if d.is_empty() {
        return f64::INFINITY;
    }
    let pos = (quantile.clamp(0.0, 1.0) * (d.len() - 1) as f64 - 1e-9).ceil().max(0.0) as usize;
    d[pos]
}

/// One capture where a single camera's focal lengths have drifted by
/// `factor` (e.g. 1.1). Returns the observations and the drifted camera.
pub fn drift_capture(scene: &Scene, ranges: &PoseRanges, factor: f64, seed: u64) -> Result<(Vec<Vec<Point2>>, usize)> {
    let mut rng = seed::rng(seed::derive(seed, stream::DRIFT, 0));
    let camera = rng.random_range(0..scene.n_cameras());
    for _ in 0..crate::scene::MAX_ATTEMPTS_PER_SAMPLE {
        let pose = ranges.sample(scene.radius, &mut rng);
        let mut params = scene.pose(&pose, &scene.oem)?;
        params[camera].intrinsics.fx *= factor;
        params[camera].intrinsics.fy *= factor;
        if visibility_check(&params, &scene.object.fiducials, scene.image_size(), scene.margin) {
            return Ok((project_all(&params, &scene.object.fiducials)?, camera));
        }
    }
    Err(Error::SynthesisStalled {
        requested: 1,
        accepted: 0,
        attempts: crate::scene::MAX_ATTEMPTS_PER_SAMPLE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Clean captures used to set the threshold.
    pub calibration_samples: usize,
    /// Clean and drifted captures scored against the threshold (each).
    pub trials: usize,
    /// Focal multiplier applied to one camera in drifted captures.
    pub drift_factor: f64,
    pub quantile: f64,
    pub lambda_scale: f64,
    pub pose_ranges: PoseRanges,
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            calibration_samples: 1000,
            trials: 200,
            drift_factor: 1.1,
            quantile: DRIFT_QUANTILE,
            lambda_scale: 1000.0,
            pose_ranges: PoseRanges::overhead(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub threshold: f64,
    pub trials: usize,
    /// Fraction of drifted captures whose drifted camera was flagged.
    pub detection_rate: f64,
    /// Fraction of clean captures with any camera flagged.
    pub false_positive_rate: f64,
    pub clean_distance_median: f64,
    pub drift_distance_median: f64,
}

/// Sets a threshold on one clean set, then scores a disjoint clean set and a
/// set of single-camera focal drifts.
pub fn detection_study(model: &PtModel, scene: &Scene, cfg: &DetectionConfig) -> Result<DetectionSummary> {
    if cfg.trials == 0 || cfg.calibration_samples == 0 {
        return Err(Error::InvalidConfig("detection needs calibration samples and trials".into()));
    }
    let ls = cfg.lambda_scale;
    let calib = clean_distances(
        model,
        scene,
        &cfg.pose_ranges,
        cfg.calibration_samples,
        ls,
        seed::derive(cfg.seed, stream::CALIBRATE, 0),
    )?;
    let threshold = calibrate_threshold(&calib, cfg.quantile);
    let clean = clean_distances(model, scene, &cfg.pose_ranges, cfg.trials, ls, seed::derive(cfg.seed, stream::EVAL, 0))?;
    let false_positives = clean.iter().filter(|d| **d > threshold).count();
    let mut drift = Vec::with_capacity(cfg.trials);
    let mut detected = 0;
    for t in 0..cfg.trials {
        let (obs, camera) = drift_capture(scene, &cfg.pose_ranges, cfg.drift_factor, seed::derive(cfg.seed, stream::DRIFT, t as u64))?;
        let v = detect_decalibration(model, &obs, &scene.oem.cameras, threshold, ls)?;
        detected += v[camera].drifted as usize;
        drift.push(v[camera].distance);
    }
    let median = |v: &[f64]| crate::baseline::quantiles(v).median;
    Ok(DetectionSummary {
        threshold,
        trials: cfg.trials,
        detection_rate: detected as f64 / cfg.trials as f64,
        false_positive_rate: false_positives as f64 / cfg.trials as f64,
        clean_distance_median: median(&clean),
        drift_distance_median: median(&drift),
    })
}
