use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::object::CalibrationObject;
use super::perturb::{perturb, PerturbationSpec};
use super::pose::{pose_rig, PoseRanges, PoseSample};
use super::rig::{ImageSize, OemCalibration, RigSpec};
use crate::error::{Error, Result};
use crate::geometry::{project, world_to_camera, CameraParams, Point2, Point3, Z_MIN};
use crate::seed::{self, stream};

/// Attempts allowed per sample before synthesis is declared stalled; a sample
/// that needs more than this has seen a rejection rate above 99%.
pub const MAX_ATTEMPTS_PER_SAMPLE: usize = 100;

/// Everything needed to synthesize observations for one rig/object pair.
#[derive(Debug, Clone)]
pub struct Scene {
    pub rig: RigSpec,
    pub oem: OemCalibration,
    pub object: CalibrationObject,
    /// Hemisphere radius ρ (meters).
    pub radius: f64,
    /// Visibility margin in pixels.
    pub margin: f64,
}

impl Scene {
    pub fn n_cameras(&self) -> usize {
        self.rig.n_cameras()
    }

    pub fn n_fiducials(&self) -> usize {
        self.object.n_fiducials()
    }

    pub fn image_size(&self) -> ImageSize {
        self.rig.image_size
    }

    /// Look-at target for every pose.
    pub fn target(&self) -> Point3 {
        self.object.centroid()
    }

    pub fn pose(&self, pose: &PoseSample, oem: &OemCalibration) -> Result<Vec<CameraParams>> {
        pose_rig(oem, pose, &self.target())
    }

    pub fn validate(&self) -> Result<()> {
        if self.oem.cameras.len() != self.rig.n_cameras() {
            return Err(Error::InvalidConfig(format!(
                "OEM calibration has {} cameras, rig has {}",
                self.oem.cameras.len(),
                self.rig.n_cameras()
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidConfig("hemisphere radius must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidConfig("margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// One synthesized capture.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub pose: PoseSample,
    pub gt_params: Vec<CameraParams>,
    /// `observations[camera][fiducial]`
    pub observations: Vec<Vec<Point2>>,
}

/// Projects every fiducial into every camera.
pub fn project_all(params: &[CameraParams], fiducials: &[Point3]) -> Result<Vec<Vec<Point2>>> {
    params
        .iter()
        .map(|cam| fiducials.iter().map(|p| project(p, cam)).collect())
        .collect()
}

/// True iff every fiducial lies in front of and inside the image of every camera.
pub fn visibility_check(
    params: &[CameraParams],
    fiducials: &[Point3],
    image: ImageSize,
    margin: f64,
) -> bool {
    params.iter().all(|cam| {
        fiducials.iter().all(|p| {
            let pc = world_to_camera(p, &cam.extrinsics);
            if pc.z <= Z_MIN {
                return false;
            }
            match project(p, cam) {
                Ok(px) => px.x.is_finite() && px.y.is_finite() && image.contains(px.x, px.y, margin),
                Err(_) => false,
            }
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SynthStats {
    pub accepted: usize,
    pub attempts: usize,
}

impl SynthStats {
    pub fn rejected(&self) -> usize {
        self.attempts - self.accepted
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<TrainingSample>,
    pub stats: SynthStats,
}

/// Draws perturbed, posed, visibility-filtered samples.
///
/// Sample `i` uses its own stream derived from `(seed, i)`, so the output is
/// independent of thread count. Invisible draws are rejected and resampled.
pub fn synthesize_batch(
    n: usize,
    scene: &Scene,
    spec: &PerturbationSpec,
    ranges: &PoseRanges,
    seed: u64,
) -> Result<Batch> {
    scene.validate()?;
    spec.validate()?;
    ranges.validate()?;
    let results: Vec<(Option<TrainingSample>, usize)> = (0..n)
        .into_par_iter()
        .map(|i| synthesize_one(scene, spec, ranges, seed::derive(seed, stream::SYNTH, i as u64)))
        .collect();
    let attempts = results.iter().map(|r| r.1).sum();
    let samples: Vec<TrainingSample> = results.into_iter().filter_map(|r| r.0).collect();
    let stats = SynthStats {
        accepted: samples.len(),
        attempts,
    };
    if samples.len() < n {
        return Err(Error::SynthesisStalled {
            requested: n,
            accepted: samples.len(),
            attempts,
        });
    }
    Ok(Batch { samples, stats })
}

fn synthesize_one(
    scene: &Scene,
    spec: &PerturbationSpec,
    ranges: &PoseRanges,
    sample_seed: u64,
) -> (Option<TrainingSample>, usize) {
    let mut rng = seed::rng(sample_seed);
    for attempt in 1..=MAX_ATTEMPTS_PER_SAMPLE {
        let perturbed = OemCalibration {
            cameras: scene.oem.cameras.iter().map(|c| perturb(c, spec, &mut rng)).collect(),
        };
        let pose = ranges.sample(scene.radius, &mut rng);
        let Ok(gt_params) = scene.pose(&pose, &perturbed) else {
            continue;
        };
        if !visibility_check(&gt_params, &scene.object.fiducials, scene.image_size(), scene.margin) {
            continue;
        }
        let Ok(observations) = project_all(&gt_params, &scene.object.fiducials) else {
            continue;
        };
        return (
            Some(TrainingSample {
                pose,
                gt_params,
                observations,
            }),
            attempt,
        );
    }
    (None, MAX_ATTEMPTS_PER_SAMPLE)
}
