use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::loss_reproj;
use super::trainer::BEHIND_CAMERA_PENALTY;
use crate::error::{Error, Result};
use crate::geometry::{project, CameraParams, Point2, Point3, PARAMS_PER_CAMERA};
use crate::nn::PtModel;
use crate::recal::{CalibrationInput, PtRecalibrator, Recalibrator};
use crate::scene::{synthesize_batch, ImageSize, PerturbationSpec, PoseRanges, Scene};
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub trials: usize,
    pub perturbation: PerturbationSpec,
    pub pose_ranges: PoseRanges,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            trials: 3,
            perturbation: PerturbationSpec::none(),
            pose_ranges: PoseRanges::overhead(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("evaluation needs at least one trial".into()));
        }
        self.perturbation.validate()?;
        self.pose_ranges.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEval {
    pub camera: usize,
    /// Pixel RMSE over every sample and trial for this camera.
    pub re_rmse: f64,
    /// First sample of the first trial, for side-by-side inspection.
    pub example_pred: Vec<f64>,
    pub example_gt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub trials: usize,
    pub n_samples: usize,
    pub perturbation: PerturbationSpec,
    /// Mean over trials of the per-trial mean sample RMSE (pixels).
    pub re_avg: f64,
    /// Sample standard deviation of the per-trial means (0 for one trial).
    pub re_std: f64,
    pub trial_re: Vec<f64>,
    pub per_camera: Vec<CameraEval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_s: f64,
    pub mean_s: f64,
    pub runs: usize,
}

/// Reprojection RMSE of one capture, with the training penalty for points
/// that land behind a camera.
pub fn reprojection_rmse(pred: &[CameraParams], gt: &[CameraParams], fiducials: &[Point3], image: ImageSize) -> f64 {
    loss_reproj(pred, gt, fiducials, BEHIND_CAMERA_PENALTY * image.diagonal())
}

fn camera_sq_error(pred: &CameraParams, gt: &CameraParams, fiducials: &[Point3], penalty: f64) -> f64 {
    fiducials
        .iter()
        .map(|f| match (project(f, pred), project(f, gt)) {
            (Ok(a), Ok(b)) if a.x.is_finite() && a.y.is_finite() => (a - b).norm_squared(),
            _ => penalty * penalty,
        })
        .sum()
}

const CHUNK: usize = 64;

/// Runs `method` on `cfg.trials` independent synthetic test sets.
pub fn evaluate(method: &dyn Recalibrator, scene: &Scene, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let nc = scene.n_cameras();
    let fiducials = &scene.object.fiducials;
    let penalty = BEHIND_CAMERA_PENALTY * scene.image_size().diagonal();
    let mut trial_re = Vec::with_capacity(cfg.trials);
    let mut cam_sq = vec![0.0; nc];
    let mut example: Option<(Vec<CameraParams>, Vec<CameraParams>)> = None;
    for t in 0..cfg.trials {
        let trial_seed = seed::derive(cfg.seed, stream::EVAL, t as u64);
        let batch = synthesize_batch(cfg.n_samples, scene, &cfg.perturbation, &cfg.pose_ranges, trial_seed)?;
        let priors = batch
            .samples
            .iter()
            .map(|s| scene.pose(&s.pose, &scene.oem))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<CalibrationInput> = batch
            .samples
            .iter()
            .zip(&priors)
            .map(|(s, prior)| CalibrationInput {
                observations: &s.observations,
                fiducials,
                prior,
                ground_truth: Some(&s.gt_params),
            })
            .collect();
        let preds: Vec<Vec<CameraParams>> = inputs
            .par_chunks(CHUNK)
            .map(|c| method.calibrate_batch(c))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let mut sum = 0.0;
        for (pred, s) in preds.iter().zip(&batch.samples) {
            if pred.len() != nc {
                return Err(Error::ShapeMismatch(format!("{} returned {} cameras", method.name(), pred.len())));
            }
            sum += loss_reproj(pred, &s.gt_params, fiducials, penalty);
            for (c, (p, g)) in pred.iter().zip(&s.gt_params).enumerate() {
                cam_sq[c] += camera_sq_error(p, g, fiducials, penalty);
            }
        }
        if example.is_none() {
            example = preds.first().cloned().zip(batch.samples.first().map(|s| s.gt_params.clone()));
        }
        trial_re.push(if preds.is_empty() { 0.0 } else { sum / preds.len() as f64 });
    }
    let re_avg = trial_re.iter().sum::<f64>() / trial_re.len() as f64;
    let re_std = if trial_re.len() > 1 {
        (trial_re.iter().map(|r| (r - re_avg).powi(2)).sum::<f64>() / (trial_re.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let n_points = (cfg.trials * cfg.n_samples * fiducials.len()).max(1) as f64;
    let per_camera = (0..nc)
        .map(|c| {
            let (pred, gt) = example
                .as_ref()
                .map(|(p, g)| (p[c].to_array().to_vec(), g[c].to_array().to_vec()))
                .unwrap_or_else(|| (vec![f64::NAN; PARAMS_PER_CAMERA], vec![f64::NAN; PARAMS_PER_CAMERA]));
            CameraEval {
                camera: c,
                re_rmse: (cam_sq[c] / n_points).sqrt(),
                example_pred: pred,
                example_gt: gt,
            }
        })
        .collect();
    Ok(EvalReport {
        method: method.name().to_string(),
        trials: cfg.trials,
        n_samples: cfg.n_samples,
        perturbation: cfg.perturbation,
        re_avg,
        re_std,
        trial_re,
        per_camera,
    })
}

pub fn evaluate_model(model: Arc<PtModel>, scene: &Scene, cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate(&PtRecalibrator { model, chunk: CHUNK }, scene, cfg)
}

/// Wall-clock of single-capture inference on a warm model.
pub fn measure_latency(model: &PtModel, observations: &[Vec<Point2>], runs: usize) -> Result<LatencyStats> {
    model.predict(observations)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(model.predict(std::hint::black_box(observations))?);
        times.push(t.elapsed().as_secs_f64());
    }
    let q = crate::baseline::quantiles(&times);
    Ok(LatencyStats {
        median_s: q.median,
        mean_s: times.iter().sum::<f64>() / runs.max(1) as f64,
        runs,
    })
}
