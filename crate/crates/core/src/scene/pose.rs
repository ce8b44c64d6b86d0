use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rig::OemCalibration;
use crate::error::{Error, Result};
use crate::geometry::{rot_z, CameraParams, Extrinsics, Point3};

/// Placement of the rig centroid on the hemisphere plus the roll about its view axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub theta: f64,
    pub phi: f64,
    pub alpha: f64,
    pub radius: f64,
    pub centroid: Point3,
}

impl PoseSample {
    pub fn new(theta: f64, phi: f64, alpha: f64, radius: f64) -> Self {
        Self {
            theta,
            phi,
            alpha,
            radius,
            centroid: hemisphere_centroid(theta, phi, radius),
        }
    }
}

/// Closed sampling interval `[lo, hi]`; `lo == hi` pins the angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct AngleRange {
    pub lo: f64,
    pub hi: f64,
}

impl AngleRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

impl From<[f64; 2]> for AngleRange {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<AngleRange> for [f64; 2] {
    fn from(r: AngleRange) -> Self {
        [r.lo, r.hi]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub theta: AngleRange,
    pub phi: AngleRange,
    pub alpha: AngleRange,
}

impl PoseRanges {
    pub const fn full() -> Self {
        use std::f64::consts::{FRAC_PI_2, TAU};
        Self {
            theta: AngleRange::new(0.0, TAU),
            phi: AngleRange::new(0.0, FRAC_PI_2),
            alpha: AngleRange::new(0.0, TAU),
        }
    }

    /// Overhead rig: θ = φ = 0, free roll.
    pub const fn overhead() -> Self {
        Self {
            theta: AngleRange::fixed(0.0),
            phi: AngleRange::fixed(0.0),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::{FRAC_PI_2, TAU};
        let ok = |r: &AngleRange, max: f64| r.lo <= r.hi && r.lo >= 0.0 && r.hi <= max + 1e-12;
        if ok(&self.theta, TAU) && ok(&self.phi, FRAC_PI_2) && ok(&self.alpha, TAU) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "pose ranges must lie within θ∈[0,2π], φ∈[0,π/2], α∈[0,2π]: {self:?}"
            )))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, radius: f64, rng: &mut R) -> PoseSample {
        let theta = self.theta.sample(rng);
        let phi = self.phi.sample(rng);
        let alpha = self.alpha.sample(rng);
        PoseSample::new(theta, phi, alpha, radius)
    }

    /// Deterministic pose at the centre of each range.
    pub fn reference(&self, radius: f64) -> PoseSample {
        PoseSample::new(
            self.theta.midpoint(),
            self.phi.midpoint(),
            self.alpha.midpoint(),
            radius,
        )
    }
}

pub fn hemisphere_centroid(theta: f64, phi: f64, radius: f64) -> Point3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Point3::new(radius * sp * ct, radius * sp * st, radius * cp)
}

/// World-from-camera rotation whose +z column points from `eye` to `target`
/// and whose −y column leans towards `up_hint`.
pub fn look_at_rotation(eye: &Point3, target: &Point3, up_hint: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let dir = target - eye;
    let n = dir.norm();
    if !(n > 1e-12) {
        return Err(Error::DegenerateLookAt("eye coincides with target"));
    }
    let z = dir / n;
    let x = z.cross(up_hint);
    let nx = x.norm();
    if !(nx > 1e-9 * up_hint.norm()) || up_hint.norm() == 0.0 {
        return Err(Error::DegenerateLookAt("up hint is parallel to the view direction"));
    }
    let x = x / nx;
    let y = z.cross(&x);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

/// Look-at with the default world +y hint, falling back to +x near ±y views.
pub fn look_at_default(eye: &Point3, target: &Point3) -> Result<Matrix3<f64>> {
    let dir = (target - eye).normalize();
    let up = if (dir.dot(&Vector3::y()).abs() - 1.0).abs() < 1e-6 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    look_at_rotation(eye, target, &up)
}

/// Intrinsic rotation by `alpha` about the local view (+z) axis.
pub fn roll_rotation(alpha: f64) -> Matrix3<f64> {
    rot_z(alpha)
}

/// World-from-rig transform: rig centroid at the pose centroid, rig +z aimed at `target`.
pub fn rig_placement(pose: &PoseSample, target: &Point3) -> Result<Extrinsics> {
    let focus = look_at_default(&pose.centroid, target)?;
    Ok(Extrinsics {
        r: focus * roll_rotation(pose.alpha),
        t: pose.centroid,
    })
}

/// World-frame camera parameters of every camera for a given rig pose.
///
/// The extrinsics in `oem` are rig-relative (camera-from-rig); the result
/// composes them with the inverse of the rig placement.
pub fn pose_rig(oem: &OemCalibration, pose: &PoseSample, target: &Point3) -> Result<Vec<CameraParams>> {
    let rig_from_world = rig_placement(pose, target)?.inverse();
    Ok(oem
        .cameras
        .iter()
        .map(|c| CameraParams {
            extrinsics: c.extrinsics.compose(&rig_from_world),
            intrinsics: c.intrinsics,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{orthogonality_error, project, Intrinsics};
    use crate::scene::rig::{RigDefaults, RigSpec};
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, TAU};

    #[test]
    fn hemisphere_examples() {
        assert_relative_eq!(hemisphere_centroid(1.3, 0.0, 1.5), Point3::new(0.0, 0.0, 1.5));
        assert_relative_eq!(
            hemisphere_centroid(0.0, FRAC_PI_2, 2.0),
            Point3::new(2.0, 0.0, 0.0),
            epsilon = 1e-15
        );
        let mut rng = crate::seed::rng(3);
        for _ in 0..10_000 {
            let p = PoseRanges::full().sample(1.7, &mut rng);
            assert!((p.centroid.norm() - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn look_at_examples() {
        let r = look_at_rotation(&Point3::new(0.0, 0.0, 2.0), &Point3::zeros(), &Vector3::y()).unwrap();
        assert_relative_eq!(r.column(2).into_owned(), Vector3::new(0.0, 0.0, -1.0));
        let r = look_at_rotation(&Point3::new(1.0, 0.0, 0.0), &Point3::zeros(), &Vector3::z()).unwrap();
        assert_relative_eq!(r.column(2).into_owned(), Vector3::new(-1.0, 0.0, 0.0));
        assert!(orthogonality_error(&r) < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn look_at_degenerate() {
        let e = Point3::new(0.0, 1.0, 0.0);
        assert!(look_at_rotation(&e, &e, &Vector3::z()).is_err());
        assert!(look_at_rotation(&e, &Point3::zeros(), &Vector3::y()).is_err());
        // fallback handles the ±y case
        assert!(look_at_default(&e, &Point3::zeros()).is_ok());
    }

    #[test]
    fn look_at_aligns_on_hemisphere() {
        let mut rng = crate::seed::rng(9);
        for _ in 0..1000 {
            let p = PoseRanges::full().sample(1.5, &mut rng);
            let r = look_at_default(&p.centroid, &Point3::zeros()).unwrap();
            let want = (-p.centroid).normalize();
            let got = r.column(2).into_owned();
            let angle = got.cross(&want).norm().atan2(got.dot(&want));
            assert!(angle < 1e-9);
        }
    }

    #[test]
    fn roll_examples() {
        assert_eq!(roll_rotation(0.0), Matrix3::identity());
        assert!((roll_rotation(TAU) - Matrix3::identity()).norm() < 1e-12);
        let focus = look_at_default(&Point3::new(0.3, 0.2, 1.0), &Point3::zeros()).unwrap();
        let combined = focus * roll_rotation(FRAC_PI_3);
        assert_relative_eq!(combined.column(2), focus.column(2), epsilon = 1e-15);
        // up vector rotated about the view axis by π/3 (Rodrigues oracle)
        let axis = nalgebra::Unit::new_normalize(focus.column(2).into_owned());
        let rodrigues = nalgebra::Rotation3::from_axis_angle(&axis, FRAC_PI_3);
        let up = focus.column(1).into_owned();
        assert_relative_eq!(combined.column(1).into_owned(), rodrigues * up, epsilon = 1e-12);
    }

    #[test]
    fn single_camera_at_pole() {
        let oem = OemCalibration {
            cameras: vec![CameraParams {
                extrinsics: Extrinsics::identity(),
                intrinsics: Intrinsics::pinhole(1000.0, 1000.0, 512.0, 512.0),
            }],
        };
        let pose = PoseSample::new(0.4, 0.0, 0.0, 1.5);
        let cams = pose_rig(&oem, &pose, &Point3::zeros()).unwrap();
        assert_relative_eq!(cams[0].extrinsics.center(), Point3::new(0.0, 0.0, 1.5), epsilon = 1e-12);
        let px = project(&Point3::zeros(), &cams[0]).unwrap();
        assert_relative_eq!(px.x, 512.0, epsilon = 1e-9);
        assert_relative_eq!(px.y, 512.0, epsilon = 1e-9);
    }

    #[test]
    fn overhead_poses_share_centroid() {
        let mut rng = crate::seed::rng(1);
        let a = PoseRanges::overhead().sample(1.5, &mut rng);
        let b = PoseRanges::overhead().sample(1.5, &mut rng);
        assert_eq!(a.centroid, b.centroid);
        assert_ne!(a.alpha, b.alpha);
    }

    #[test]
    fn placement_preserves_mount_geometry_and_centres_object() {
        let d = RigDefaults::default();
        let rig = RigSpec::builtin("O-10", &d).unwrap();
        let oem = crate::scene::rig::OemCalibration::nominal(&rig, &d);
        let mut rng = crate::seed::rng(21);
        for _ in 0..200 {
            let pose = PoseRanges::full().sample(d.focus_distance, &mut rng);
            let cams = pose_rig(&oem, &pose, &Point3::zeros()).unwrap();
            for i in 0..cams.len() {
                let px = project(&Point3::zeros(), &cams[i]).unwrap();
                assert!((px.x - 512.0).abs() < 1.0 && (px.y - 512.0).abs() < 1.0);
                for j in 0..i {
                    let world = (cams[i].extrinsics.center() - cams[j].extrinsics.center()).norm();
                    let nominal =
                        (oem.cameras[i].extrinsics.center() - oem.cameras[j].extrinsics.center()).norm();
                    assert!((world - nominal).abs() < 1e-9);
                }
            }
        }
    }
}
