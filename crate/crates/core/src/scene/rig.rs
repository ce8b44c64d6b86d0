use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::pose::look_at_rotation;
use crate::error::{Error, Result};
use crate::geometry::{orthogonality_error, CameraParams, Extrinsics, Intrinsics, Point3};

/// Image width and height in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub const fn square(side: f64) -> Self {
        Self {
            width: side,
            height: side,
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    pub fn contains(&self, x: f64, y: f64, margin: f64) -> bool {
        x >= margin && x <= self.width - margin && y >= margin && y <= self.height - margin
    }
}

impl From<[f64; 2]> for ImageSize {
    fn from(v: [f64; 2]) -> Self {
        Self {
            width: v[0],
            height: v[1],
        }
    }
}

impl From<ImageSize> for [f64; 2] {
    fn from(s: ImageSize) -> Self {
        [s.width, s.height]
    }
}

/// A fixed multi-camera rig. Each mount maps rig coordinates into the camera
/// frame; the rig frame's +z axis is its viewing direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RigSpec {
    pub name: String,
    pub image_size: ImageSize,
    pub mounts: Vec<Extrinsics>,
}

/// Per-camera manufacturer calibration, extrinsics expressed in the rig frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OemCalibration {
    pub cameras: Vec<CameraParams>,
}

/// Nominal values used when a rig is generated rather than loaded from a file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigDefaults {
    pub image_size: ImageSize,
    pub focal: f64,
    pub distortion: f64,
    /// Distance from the rig plane to the point every camera aims at.
    pub focus_distance: f64,
    /// Radius of the O-shaped ring, also the half-extent of U/T layouts.
    pub ring_radius: f64,
}

impl Default for RigDefaults {
    fn default() -> Self {
        Self {
            image_size: ImageSize::square(1024.0),
            focal: 1100.0,
            distortion: 0.01,
            focus_distance: 1.5,
            ring_radius: 0.3,
        }
    }
}

pub const BUILTIN_RIGS: [&str; 4] = ["O-10", "O-6", "U-7", "T-4"];

impl RigSpec {
    pub fn n_cameras(&self) -> usize {
        self.mounts.len()
    }

    /// O-, U- and T-shaped layouts. `O-<n>` accepts any camera count.
    pub fn builtin(name: &str, defaults: &RigDefaults) -> Result<Self> {
        let r = defaults.ring_radius;
        let positions: Vec<(f64, f64)> = match name {
            "U-7" => vec![
                (-r, r),
                (-r, 0.0),
                (-r, -r),
                (0.0, -r),
                (r, -r),
                (r, 0.0),
                (r, r),
            ],
            "T-4" => vec![(-r, r), (0.0, r), (r, r), (0.0, -r)],
            other => match other.strip_prefix("O-").and_then(|n| n.parse::<usize>().ok()) {
                Some(n) if n >= 1 => (0..n)
                    .map(|i| {
                        let a = std::f64::consts::TAU * i as f64 / n as f64;
                        (r * a.cos(), r * a.sin())
                    })
                    .collect(),
                _ => {
                    return Err(Error::BadRigFile(format!(
                        "unknown built-in rig '{other}' (expected one of {BUILTIN_RIGS:?} or O-<n>)"
                    )))
                }
            },
        };
        let n = positions.len() as f64;
        let (mx, my) = positions
            .iter()
            .fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x / n, ay + y / n));
        let focus = Point3::new(0.0, 0.0, defaults.focus_distance);
        let mounts = positions
            .iter()
            .map(|&(x, y)| {
                let eye = Point3::new(x - mx, y - my, 0.0);
                let world_from_cam = look_at_rotation(&eye, &focus, &Vector3::y())?;
                let r = world_from_cam.transpose();
                Ok(Extrinsics { r, t: -(r * eye) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            image_size: defaults.image_size,
            mounts,
        })
    }
}

impl OemCalibration {
    /// Mount extrinsics paired with identical nominal intrinsics.
    pub fn nominal(rig: &RigSpec, defaults: &RigDefaults) -> Self {
        let d = defaults.distortion;
        let intr = Intrinsics {
            fx: defaults.focal,
            fy: defaults.focal,
            cx: rig.image_size.width / 2.0,
            cy: rig.image_size.height / 2.0,
            k1: d,
            k2: d,
            k3: d,
            p1: d,
            p2: d,
        };
        Self {
            cameras: rig
                .mounts
                .iter()
                .map(|m| CameraParams {
                    extrinsics: *m,
                    intrinsics: intr,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MountRecord {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

/// On-disk rig definition: mounts plus the OEM intrinsics for each camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub name: String,
    pub image_size: ImageSize,
    pub cameras: Vec<MountRecord>,
    pub intrinsics: Vec<Intrinsics>,
}

impl RigFile {
    pub fn from_rig(rig: &RigSpec, oem: &OemCalibration) -> Self {
        Self {
            name: rig.name.clone(),
            image_size: rig.image_size,
            cameras: rig
                .mounts
                .iter()
                .map(|m| {
                    let mut r = [0.0; 9];
                    for i in 0..3 {
                        for j in 0..3 {
                            r[3 * i + j] = m.r[(i, j)];
                        }
                    }
                    MountRecord {
                        r,
                        t: [m.t.x, m.t.y, m.t.z],
                    }
                })
                .collect(),
            intrinsics: oem.cameras.iter().map(|c| c.intrinsics).collect(),
        }
    }

    pub fn into_rig(self) -> Result<(RigSpec, OemCalibration)> {
        if self.cameras.is_empty() {
            return Err(Error::BadRigFile("rig has no cameras".into()));
        }
        if self.cameras.len() != self.intrinsics.len() {
            return Err(Error::BadRigFile(format!(
                "{} mounts but {} intrinsics entries",
                self.cameras.len(),
                self.intrinsics.len()
            )));
        }
        if !(self.image_size.width > 0.0 && self.image_size.height > 0.0) {
            return Err(Error::BadRigFile("image_size must be positive".into()));
        }
        let mut mounts = Vec::with_capacity(self.cameras.len());
        for (i, m) in self.cameras.iter().enumerate() {
            let r = Matrix3::from_row_slice(&m.r);
            if orthogonality_error(&r) > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
                return Err(Error::BadRigFile(format!("camera {i}: R is not a rotation")));
            }
            mounts.push(Extrinsics {
                r,
                t: Vector3::from_column_slice(&m.t),
            });
        }
        for (i, k) in self.intrinsics.iter().enumerate() {
            if !(k.fx > 0.0 && k.fy > 0.0) {
                return Err(Error::BadRigFile(format!("camera {i}: focal lengths must be positive")));
            }
        }
        let oem = OemCalibration {
            cameras: mounts
                .iter()
                .zip(&self.intrinsics)
                .map(|(m, k)| CameraParams {
                    extrinsics: *m,
                    intrinsics: *k,
                })
                .collect(),
        };
        Ok((
            RigSpec {
                name: self.name,
                image_size: self.image_size,
                mounts,
            },
            oem,
        ))
    }

    pub fn load(path: &Path) -> Result<(RigSpec, OemCalibration)> {
        let text = std::fs::read_to_string(path)?;
        let file: RigFile = serde_json::from_str(&text)
            .map_err(|e| Error::BadRigFile(format!("{}: {e}", path.display())))?;
        file.into_rig()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    #[test]
    fn builtin_camera_counts() {
        let d = RigDefaults::default();
        for (name, n) in [("O-10", 10), ("O-6", 6), ("U-7", 7), ("T-4", 4)] {
            let rig = RigSpec::builtin(name, &d).unwrap();
            assert_eq!(rig.n_cameras(), n);
            for m in &rig.mounts {
                assert!(orthogonality_error(&m.r) < 1e-12);
            }
        }
        assert!(RigSpec::builtin("X-3", &d).is_err());
        assert!(RigSpec::builtin("O-0", &d).is_err());
    }

    #[test]
    fn mounts_aim_at_focus_point() {
        let d = RigDefaults::default();
        let rig = RigSpec::builtin("U-7", &d).unwrap();
        let oem = OemCalibration::nominal(&rig, &d);
        let focus = Point3::new(0.0, 0.0, d.focus_distance);
        for cam in &oem.cameras {
            let px = project(&focus, cam).unwrap();
            assert!((px.x - 512.0).abs() < 1e-9 && (px.y - 512.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rig_file_round_trip_and_validation() {
        let d = RigDefaults::default();
        let rig = RigSpec::builtin("T-4", &d).unwrap();
        let oem = OemCalibration::nominal(&rig, &d);
        let file = RigFile::from_rig(&rig, &oem);
        let text = serde_json::to_string(&file).unwrap();
        assert!(text.contains("\"R\""));
        let (rig2, oem2) = serde_json::from_str::<RigFile>(&text).unwrap().into_rig().unwrap();
        assert_eq!(rig2, rig);
        assert_eq!(oem2, oem);

        let mut bad = file.clone();
        bad.cameras[0].r[0] = 2.0;
        assert!(bad.into_rig().is_err());
        let mut bad = file;
        bad.intrinsics.pop();
        assert!(bad.into_rig().is_err());
    }
}
