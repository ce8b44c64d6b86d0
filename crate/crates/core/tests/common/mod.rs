#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use ncal_core::geometry::{axis_angle, CameraParams, Extrinsics, Intrinsics, Point3};
use proptest::prelude::*;

pub fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.0..std::f64::consts::PI).prop_map(|(x, y, z, a)| {
        let axis = Vector3::new(x, y, z);
        if axis.norm() < 1e-3 {
            axis_angle(&Vector3::z(), a)
        } else {
            axis_angle(&axis, a)
        }
    })
}

pub fn intrinsics() -> impl Strategy<Value = Intrinsics> {
    (
        (600.0..1400.0f64, 600.0..1400.0f64, 400.0..600.0f64, 400.0..600.0f64),
        (-0.2..0.2f64, -0.1..0.1f64, -0.05..0.05f64, -0.01..0.01f64, -0.01..0.01f64),
    )
        .prop_map(|((fx, fy, cx, cy), (k1, k2, k3, p1, p2))| Intrinsics { fx, fy, cx, cy, k1, k2, k3, p1, p2 })
}

pub fn camera() -> impl Strategy<Value = CameraParams> {
    (rotation(), -0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64, intrinsics()).prop_map(|(r, x, y, z, intrinsics)| CameraParams {
        extrinsics: Extrinsics { r, t: Vector3::new(x, y, z) },
        intrinsics,
    })
}

/// A camera with a world point in front of it at depth `Z^C ∈ [0.2, 3]`
/// inside a ±45° cone.
pub fn camera_and_point() -> impl Strategy<Value = (CameraParams, Point3)> {
    (camera(), -1.0..1.0f64, -1.0..1.0f64, 0.2..3.0f64).prop_map(|(cam, u, v, z)| {
        let pc = Point3::new(u * z, v * z, z);
        let e = &cam.extrinsics;
        (cam, e.r.transpose() * (pc - e.t))
    })
}
