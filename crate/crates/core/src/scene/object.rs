use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Known 3D fiducials in the object frame (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationObject {
    pub name: String,
    pub fiducials: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectKind {
    Cube8 { edge: f64 },
    Cube27 { edge: f64 },
    Sphere64 { radius: f64 },
    File(PathBuf),
}

impl ObjectKind {
    /// `cube8`, `cube27`, `sphere64`, or anything else as a file path.
    pub fn parse(spec: &str, edge: f64, radius: f64) -> Self {
        match spec {
            "cube8" => Self::Cube8 { edge },
            "cube27" => Self::Cube27 { edge },
            "sphere64" => Self::Sphere64 { radius },
            path => Self::File(PathBuf::from(path)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectFile {
    pub name: String,
    pub fiducials: Vec<[f64; 3]>,
}

impl CalibrationObject {
    pub fn n_fiducials(&self) -> usize {
        self.fiducials.len()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.fiducials.len() as f64;
        self.fiducials.iter().fold(Point3::zeros(), |acc, p| acc + p / n)
    }

    pub fn to_file(&self) -> ObjectFile {
        ObjectFile {
            name: self.name.clone(),
            fiducials: self.fiducials.iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }
}

pub fn make_object(kind: &ObjectKind) -> Result<CalibrationObject> {
    match kind {
        ObjectKind::Cube8 { edge } => {
            let h = edge / 2.0;
            let mut fiducials = Vec::with_capacity(8);
            for &x in &[-h, h] {
                for &y in &[-h, h] {
                    for &z in &[-h, h] {
                        fiducials.push(Point3::new(x, y, z));
                    }
                }
            }
            Ok(CalibrationObject {
                name: "cube8".into(),
                fiducials,
            })
        }
        ObjectKind::Cube27 { edge } => {
            let h = edge / 2.0;
            let steps = [-h, 0.0, h];
            let mut fiducials = Vec::with_capacity(27);
            for &x in &steps {
                for &y in &steps {
                    for &z in &steps {
                        fiducials.push(Point3::new(x, y, z));
                    }
                }
            }
            Ok(CalibrationObject {
                name: "cube27".into(),
                fiducials,
            })
        }
        ObjectKind::Sphere64 { radius } => {
            // Fibonacci lattice
            let n = 64;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let fiducials = (0..n)
                .map(|i| {
                    let z = 1.0 - (2 * i + 1) as f64 / n as f64;
                    let ring = (1.0 - z * z).sqrt();
                    let a = golden * i as f64;
                    let p = Point3::new(ring * a.cos(), ring * a.sin(), z);
                    p.normalize() * *radius
                })
                .collect();
            Ok(CalibrationObject {
                name: "sphere64".into(),
                fiducials,
            })
        }
        ObjectKind::File(path) => load_object(path),
    }
}

pub fn load_object(path: &Path) -> Result<CalibrationObject> {
    let bad = |msg: String| Error::BadObjectFile(format!("{}: {msg}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let file: ObjectFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    object_from_file(file).map_err(|e| match e {
        Error::BadObjectFile(msg) => bad(msg),
        other => other,
    })
}

pub fn object_from_file(file: ObjectFile) -> Result<CalibrationObject> {
    if file.fiducials.len() < 4 {
        return Err(Error::BadObjectFile(format!(
            "need at least 4 fiducials, found {}",
            file.fiducials.len()
        )));
    }
    if file.fiducials.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::BadObjectFile("non-finite fiducial coordinate".into()));
    }
    Ok(CalibrationObject {
        name: file.name,
        fiducials: file.fiducials.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(),
    })
}
