//! Dataset files: one JSON header line, then fixed-stride little-endian `f64`
//! records, one per capture:
//!
//! ```text
//! θ φ α ρ | N_C × 21 ground-truth params | N_C × N_fid × (x, y)
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CameraParams, Point2, PARAMS_PER_CAMERA};
use crate::scene::{PoseSample, RigFile, Scene, TrainingSample};

pub const DATASET_FORMAT: &str = "ncal-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub n_samples: usize,
    pub n_cameras: usize,
    pub n_fiducials: usize,
    /// Values per record.
    pub stride: usize,
    pub rig_hash: String,
    pub object_hash: String,
    /// Run metadata (seed, config hash, synthesis statistics).
    pub extra: serde_json::Value,
}

pub fn stride(n_cameras: usize, n_fiducials: usize) -> usize {
    4 + n_cameras * PARAMS_PER_CAMERA + n_cameras * n_fiducials * 2
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn rig_hash(scene: &Scene) -> String {
    let file = RigFile::from_rig(&scene.rig, &scene.oem);
    hex_sha256(&serde_json::to_vec(&file).expect("rig file serializes"))
}

pub fn object_hash(scene: &Scene) -> String {
    let bytes: Vec<u8> = scene
        .object
        .fiducials
        .iter()
        .flat_map(|p| [p.x, p.y, p.z])
        .flat_map(f64::to_le_bytes)
        .collect();
    hex_sha256(&bytes)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptDataset(msg.into())
}

pub fn write_dataset(w: &mut impl Write, scene: &Scene, samples: &[TrainingSample], extra: serde_json::Value) -> Result<()> {
    let (nc, nf) = (scene.n_cameras(), scene.n_fiducials());
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        n_samples: samples.len(),
        n_cameras: nc,
        n_fiducials: nf,
        stride: stride(nc, nf),
        rig_hash: rig_hash(scene),
        object_hash: object_hash(scene),
        extra,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(header.stride * 8);
    for s in samples {
        if s.gt_params.len() != nc || s.observations.len() != nc || s.observations.iter().any(|o| o.len() != nf) {
            return Err(Error::ShapeMismatch("sample does not match the scene".into()));
        }
        buf.clear();
        let mut push = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
        for v in [s.pose.theta, s.pose.phi, s.pose.alpha, s.pose.radius] {
            push(v);
        }
        for c in &s.gt_params {
            c.to_array().into_iter().for_each(&mut push);
        }
        for cam in &s.observations {
            for p in cam {
                push(p.x);
                push(p.y);
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(r: impl Read) -> Result<(DatasetHeader, Vec<TrainingSample>)> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(corrupt("missing header line"));
    }
    let header: DatasetHeader = serde_json::from_slice(&line).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(corrupt(format!("unexpected format {}", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(corrupt(format!("unsupported version {}", header.version)));
    }
    let (nc, nf) = (header.n_cameras, header.n_fiducials);
    if header.stride != stride(nc, nf) {
        return Err(corrupt("stride does not match the camera and fiducial counts"));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != header.n_samples * header.stride * 8 {
        return Err(corrupt(format!(
            "body holds {} bytes, expected {} samples of {} values",
            body.len(),
            header.n_samples,
            header.stride
        )));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let samples = values
        .chunks_exact(header.stride.max(1))
        .take(header.n_samples)
        .map(|rec| {
            let pose = PoseSample::new(rec[0], rec[1], rec[2], rec[3]);
            let params = &rec[4..4 + nc * PARAMS_PER_CAMERA];
            let obs = &rec[4 + nc * PARAMS_PER_CAMERA..];
            TrainingSample {
                pose,
                gt_params: params.chunks_exact(PARAMS_PER_CAMERA).map(CameraParams::from_slice).collect(),
                observations: obs
                    .chunks_exact(2 * nf.max(1))
                    .map(|c| c.chunks_exact(2).map(|p| Point2::new(p[0], p[1])).collect())
                    .collect(),
            }
        })
        .collect();
    Ok((header, samples))
}

pub fn save_dataset(path: &Path, scene: &Scene, samples: &[TrainingSample], extra: serde_json::Value) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut f, scene, samples, extra)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<TrainingSample>)> {
    let f = std::fs::File::open(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    read_dataset(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{default_scene, synthesize_batch, ObjectKind, PerturbationSpec, PoseRanges};

    fn data(n: usize) -> (Scene, Vec<TrainingSample>) {
        let scene = default_scene("T-4", &ObjectKind::Cube8 { edge: 0.1 }).unwrap();
        let spec = PerturbationSpec::new(0.05, 0.05).unwrap();
        let b = synthesize_batch(n, &scene, &spec, &PoseRanges::full(), 9).unwrap();
        (scene, b.samples)
    }

    #[test]
    fn round_trip() {
        let (scene, samples) = data(5);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &scene, &samples, serde_json::json!({"seed": 9})).unwrap();
        let (h, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(h.n_samples, 5);
        assert_eq!(back.len(), 5);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.observations, b.observations);
            for (x, y) in a.gt_params.iter().zip(&b.gt_params) {
                assert_eq!(x.to_array(), y.to_array());
            }
            assert_eq!(a.pose.theta, b.pose.theta);
        }
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let (scene, _) = data(0);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &scene, &[], serde_json::Value::Null).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 1);
        assert!(read_dataset(buf.as_slice()).unwrap().1.is_empty());
    }

    #[test]
    fn truncation_detected() {
        let (scene, samples) = data(2);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &scene, &samples, serde_json::Value::Null).unwrap();
        buf.pop();
        assert!(matches!(read_dataset(buf.as_slice()), Err(Error::CorruptDataset(_))));
        assert!(matches!(read_dataset(&b"{}"[..]), Err(Error::CorruptDataset(_))));
    }
}
