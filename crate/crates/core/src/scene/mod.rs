//! Dynamic camera pose synthesis: rigs, calibration objects, hemisphere
//! placement, OEM perturbation and visibility-filtered batch generation.

mod object;
mod perturb;
mod pose;
mod rig;
mod synth;

pub use object::{load_object, make_object, object_from_file, CalibrationObject, ObjectFile, ObjectKind};
pub use perturb::{draw_delta, perturb, PerturbationSpec, ROTATION_PERTURB_SCALE, ZERO_DISTORTION_STEP};
pub use pose::{
    hemisphere_centroid, look_at_default, look_at_rotation, pose_rig, rig_placement, roll_rotation,
    AngleRange, PoseRanges, PoseSample,
};
pub use rig::{ImageSize, MountRecord, OemCalibration, RigDefaults, RigFile, RigSpec, BUILTIN_RIGS};
pub use synth::{
    project_all, synthesize_batch, visibility_check, Batch, Scene, SynthStats, TrainingSample,
    MAX_ATTEMPTS_PER_SAMPLE,
};

use crate::error::Result;

pub const DEFAULT_MARGIN: f64 = 8.0;

/// Built-in rig with default intrinsics, hemisphere radius equal to the rig focus distance.
pub fn default_scene(rig: &str, object: &ObjectKind) -> Result<Scene> {
    let defaults = RigDefaults::default();
    let rig = RigSpec::builtin(rig, &defaults)?;
    let oem = OemCalibration::nominal(&rig, &defaults);
    Ok(Scene {
        rig,
        oem,
        object: make_object(object)?,
        radius: defaults.focus_distance,
        margin: DEFAULT_MARGIN,
    })
}
