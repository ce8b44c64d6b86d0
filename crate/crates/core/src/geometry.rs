//! Pinhole camera model with radial-tangential distortion.
//!
//! ```text
//! P_c      = R·P + t
//! x_n, y_n = X_c / Z_c, Y_c / Z_c
//! r²       = x_n² + y_n²
//! x_d      = x_n(1 + k1 r² + k2 r⁴ + k3 r⁶) + 2 p1 x_n y_n + p2 (r² + 2 x_n²)
//! y_d      = y_n(1 + k1 r² + k2 r⁴ + k3 r⁶) + p1 (r² + 2 y_n²) + 2 p2 x_n y_n
//! u, v     = fx·x_d + cx, fy·y_d + cy
//! ```
//!
//! Camera parameters flatten to 21 scalars in the order
//! `[R (9, row-major), t (3), fx, fy, cx, cy, k1, k2, k3, p1, p2]`.

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;
pub type Point2 = Vector2<f64>;

/// Number of scalars describing one camera.
pub const PARAMS_PER_CAMERA: usize = 21;

/// Perspective divide guard (meters).
pub const Z_MIN: f64 = 1e-6;

/// Gram-Schmidt degeneracy threshold.
pub const GS_EPS: f64 = 1e-9;

/// Slot offsets into the flattened 21-vector.
pub mod slot {
    use std::ops::Range;
    pub const ROTATION: Range<usize> = 0..9;
    pub const TRANSLATION: Range<usize> = 9..12;
    pub const FOCAL: Range<usize> = 12..14;
    pub const PRINCIPAL: Range<usize> = 14..16;
    pub const DISTORTION: Range<usize> = 16..21;
    pub const INTRINSICS: Range<usize> = 12..21;

    pub const NAMES: [&str; 21] = [
        "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "tx", "ty", "tz", "fx",
        "fy", "cx", "cy", "k1", "k2", "k3", "p1", "p2",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Intrinsics {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            p1: 0.0,
            p2: 0.0,
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.k3, self.p1, self.p2,
        ]
    }

    pub fn from_array(v: &[f64; 9]) -> Self {
        Self {
            fx: v[0],
            fy: v[1],
            cx: v[2],
            cy: v[3],
            k1: v[4],
            k2: v[5],
            k3: v[6],
            p1: v[7],
            p2: v[8],
        }
    }
}

/// Camera-from-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        -(self.r.transpose() * self.t)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Extrinsics) -> Extrinsics {
        Extrinsics {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    pub fn inverse(&self) -> Extrinsics {
        let rt = self.r.transpose();
        Extrinsics { r: rt, t: -(rt * self.t) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub extrinsics: Extrinsics,
    pub intrinsics: Intrinsics,
}

impl CameraParams {
    pub fn to_array(&self) -> [f64; PARAMS_PER_CAMERA] {
        let mut out = [0.0; PARAMS_PER_CAMERA];
        let r = &self.extrinsics.r;
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = r[(i, j)];
            }
            out[9 + i] = self.extrinsics.t[i];
        }
        out[12..21].copy_from_slice(&self.intrinsics.to_array());
        out
    }

    /// Rebuilds parameters from the flat layout. The rotation block is taken as-is.
    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), PARAMS_PER_CAMERA, "camera parameter slice must have 21 entries");
        let r = Matrix3::from_row_slice(&v[0..9]);
        let t = Vector3::new(v[9], v[10], v[11]);
        let mut intr = [0.0; 9];
        intr.copy_from_slice(&v[12..21]);
        Self {
            extrinsics: Extrinsics { r, t },
            intrinsics: Intrinsics::from_array(&intr),
        }
    }
}

/// First two columns of a rotation matrix, `(c0, c1)` stacked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub fn columns(&self) -> (Vector3<f64>, Vector3<f64>) {
        let v = &self.0;
        (Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }
}

pub fn world_to_camera(p: &Point3, ext: &Extrinsics) -> Point3 {
    ext.r * p + ext.t
}

pub fn distort(xn: f64, yn: f64, intr: &Intrinsics) -> (f64, f64) {
    let r2 = xn * xn + yn * yn;
    let radial = 1.0 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3));
    let xy = xn * yn;
    let xd = xn * radial + 2.0 * intr.p1 * xy + intr.p2 * (r2 + 2.0 * xn * xn);
    let yd = yn * radial + intr.p1 * (r2 + 2.0 * yn * yn) + 2.0 * intr.p2 * xy;
    (xd, yd)
}

/// Projects a camera-frame point to pixels.
pub fn project_camera_point(pc: &Point3, intr: &Intrinsics) -> Result<Point2> {
    if pc.z <= Z_MIN {
        return Err(Error::BehindCamera { z: pc.z });
    }
    let (xd, yd) = distort(pc.x / pc.z, pc.y / pc.z, intr);
    Ok(Point2::new(intr.fx * xd + intr.cx, intr.fy * yd + intr.cy))
}

pub fn project(p: &Point3, params: &CameraParams) -> Result<Point2> {
    project_camera_point(&world_to_camera(p, &params.extrinsics), &params.intrinsics)
}

/// Gram-Schmidt reconstruction of a rotation from two 3-vectors.
pub fn rot6d_to_matrix(r6: &Rotation6D) -> Result<Matrix3<f64>> {
    let (a1, a2) = r6.columns();
    let n1 = a1.norm();
    if !(n1 > GS_EPS) {
        return Err(Error::DegenerateRotation("first column has vanishing norm"));
    }
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let nu = u.norm();
    if !(nu > GS_EPS) {
        return Err(Error::DegenerateRotation("columns are parallel"));
    }
    let b2 = u / nu;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> Rotation6D {
    Rotation6D([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ])
}

/// Jacobian of the row-major rotation entries with respect to the 6D inputs (9×6).
pub fn rot6d_jacobian(r6: &Rotation6D) -> Result<SMatrix<f64, 9, 6>> {
    // Input cotangent for each of the nine outputs.
    let mut jac = SMatrix::<f64, 9, 6>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let mut g = [0.0; 9];
            g[3 * i + j] = 1.0;
            let row = rot6d_vjp(r6, &g)?;
            for (k, v) in row.iter().enumerate() {
                jac[(3 * i + j, k)] = *v;
            }
        }
    }
    Ok(jac)
}

/// Vector-Jacobian product of [`rot6d_to_matrix`]: maps a cotangent on the
/// row-major 3×3 output back onto the six inputs.
pub fn rot6d_vjp(r6: &Rotation6D, grad_out: &[f64; 9]) -> Result<[f64; 6]> {
    let (a1, a2) = r6.columns();
    let n1 = a1.norm();
    if !(n1 > GS_EPS) {
        return Err(Error::DegenerateRotation("first column has vanishing norm"));
    }
    let b1 = a1 / n1;
    let d = b1.dot(&a2);
    let u = a2 - b1 * d;
    let nu = u.norm();
    if !(nu > GS_EPS) {
        return Err(Error::DegenerateRotation("columns are parallel"));
    }
    let b2 = u / nu;
    // Row-major output entry (i, j) is column j, component i.
    let col = |j: usize| Vector3::new(grad_out[j], grad_out[3 + j], grad_out[6 + j]);
    let g3 = col(2);
    let mut g1 = col(0) + b2.cross(&g3);
    let g2 = col(1) + g3.cross(&b1);
    // b2 = u / |u|
    let gu = (g2 - b2 * b2.dot(&g2)) / nu;
    // u = a2 - (b1·a2) b1
    let ga2 = gu - b1 * b1.dot(&gu);
    g1 -= gu * d + a2 * b1.dot(&gu);
    // b1 = a1 / |a1|
    let ga1 = (g1 - b1 * b1.dot(&g1)) / n1;
    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

/// Rotation angle of `R1ᵀ R2`, in `[0, π]`.
pub fn geodesic_distance(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let c = ((r1.transpose() * r2).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Analytic 2×21 Jacobian of the projected pixel with respect to the
/// flattened camera parameters.
pub fn project_jacobian(p: &Point3, params: &CameraParams) -> Result<SMatrix<f64, 2, 21>> {
    let ext = &params.extrinsics;
    let k = &params.intrinsics;
    let pc = world_to_camera(p, ext);
    if pc.z <= Z_MIN {
        return Err(Error::BehindCamera { z: pc.z });
    }
    let iz = 1.0 / pc.z;
    let xn = pc.x * iz;
    let yn = pc.y * iz;
    let r2 = xn * xn + yn * yn;
    let radial = 1.0 + r2 * (k.k1 + r2 * (k.k2 + r2 * k.k3));
    let dradial = k.k1 + r2 * (2.0 * k.k2 + 3.0 * k.k3 * r2);
    let (xd, yd) = distort(xn, yn, k);

    let dxd_dxn = radial + 2.0 * xn * xn * dradial + 2.0 * k.p1 * yn + 6.0 * k.p2 * xn;
    let dxd_dyn = 2.0 * xn * yn * dradial + 2.0 * k.p1 * xn + 2.0 * k.p2 * yn;
    let dyd_dxn = 2.0 * xn * yn * dradial + 2.0 * k.p1 * xn + 2.0 * k.p2 * yn;
    let dyd_dyn = radial + 2.0 * yn * yn * dradial + 6.0 * k.p1 * yn + 2.0 * k.p2 * xn;

    // d(xn, yn) / d(Pc)
    let dn = SMatrix::<f64, 2, 3>::new(iz, 0.0, -xn * iz, 0.0, iz, -yn * iz);
    let dd = SMatrix::<f64, 2, 2>::new(dxd_dxn, dxd_dyn, dyd_dxn, dyd_dyn);
    let f = SMatrix::<f64, 2, 2>::new(k.fx, 0.0, 0.0, k.fy);
    let dpix_dpc = f * dd * dn;

    let mut jac = SMatrix::<f64, 2, 21>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            // dPc_i / dR_ij = P_j
            jac[(0, 3 * i + j)] = dpix_dpc[(0, i)] * p[j];
            jac[(1, 3 * i + j)] = dpix_dpc[(1, i)] * p[j];
        }
        jac[(0, 9 + i)] = dpix_dpc[(0, i)];
        jac[(1, 9 + i)] = dpix_dpc[(1, i)];
    }
    jac[(0, 12)] = xd;
    jac[(1, 13)] = yd;
    jac[(0, 14)] = 1.0;
    jac[(1, 15)] = 1.0;

    let xy = xn * yn;
    let dist_x = [xn * r2, xn * r2 * r2, xn * r2 * r2 * r2, 2.0 * xy, r2 + 2.0 * xn * xn];
    let dist_y = [yn * r2, yn * r2 * r2, yn * r2 * r2 * r2, r2 + 2.0 * yn * yn, 2.0 * xy];
    for c in 0..5 {
        jac[(0, 16 + c)] = k.fx * dist_x[c];
        jac[(1, 16 + c)] = k.fy * dist_y[c];
    }
    Ok(jac)
}

/// Rotation by `angle` about `axis` (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis / n), angle)
        .into_inner()
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Frobenius norm of `RᵀR − I`.
pub fn orthogonality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::FRAC_PI_2;

    fn cam(fx: f64, cx: f64, k1: f64) -> CameraParams {
        CameraParams {
            extrinsics: Extrinsics::identity(),
            intrinsics: Intrinsics {
                k1,
                ..Intrinsics::pinhole(fx, fx, cx, cx)
            },
        }
    }

    #[test]
    fn world_to_camera_examples() {
        let id = Extrinsics::identity();
        assert_eq!(world_to_camera(&Point3::new(1.0, 2.0, 3.0), &id), Point3::new(1.0, 2.0, 3.0));
        let shift = Extrinsics {
            r: Matrix3::identity(),
            t: Vector3::new(0.1, 0.2, 0.3),
        };
        assert_eq!(world_to_camera(&Point3::zeros(), &shift), Point3::new(0.1, 0.2, 0.3));
        let rz = Extrinsics {
            r: rot_z(FRAC_PI_2),
            t: Vector3::zeros(),
        };
        let p = world_to_camera(&Point3::new(1.0, 0.0, 0.0), &rz);
        assert_relative_eq!(p, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn distort_examples() {
        let zero = Intrinsics::pinhole(1.0, 1.0, 0.0, 0.0);
        assert_eq!(distort(0.1, 0.2, &zero), (0.1, 0.2));
        let radial = Intrinsics {
            k1: 0.3,
            k2: -0.2,
            k3: 0.1,
            ..zero
        };
        assert_eq!(distort(0.0, 0.0, &radial), (0.0, 0.0));
        // r² = 0.05, factor 1 + 0.1·0.05 = 1.005
        let k1 = Intrinsics { k1: 0.1, ..zero };
        let (x, y) = distort(0.1, 0.2, &k1);
        assert_relative_eq!(x, 0.1005, epsilon = 1e-15);
        assert_relative_eq!(y, 0.2010, epsilon = 1e-15);
    }

    #[test]
    fn project_examples() {
        let c = cam(1000.0, 512.0, 0.0);
        assert_eq!(project(&Point3::new(0.0, 0.0, 2.0), &c).unwrap(), Point2::new(512.0, 512.0));
        let p = project(&Point3::new(0.1, 0.2, 1.0), &c).unwrap();
        assert_relative_eq!(p, Point2::new(612.0, 712.0), epsilon = 1e-12);
        let p = project(&Point3::new(0.1, 0.2, 1.0), &cam(1000.0, 512.0, 0.1)).unwrap();
        assert_relative_eq!(p, Point2::new(612.5, 713.0), epsilon = 1e-10);
    }

    #[test]
    fn project_rejects_points_behind() {
        let c = cam(1000.0, 512.0, 0.0);
        assert!(matches!(
            project(&Point3::new(0.0, 0.0, -1.0), &c),
            Err(Error::BehindCamera { .. })
        ));
        assert!(project(&Point3::new(0.0, 0.0, Z_MIN), &c).is_err());
        assert!(project_jacobian(&Point3::new(0.0, 0.0, 0.0), &c).is_err());
    }

    #[test]
    fn rot6d_examples() {
        let i = rot6d_to_matrix(&Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(i, Matrix3::identity());
        let i = rot6d_to_matrix(&Rotation6D([2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert_eq!(i, Matrix3::identity());
        assert_eq!(matrix_to_rot6d(&Matrix3::identity()).0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let r6 = matrix_to_rot6d(&rot_z(FRAC_PI_2)).0;
        let expect = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in r6.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn rot6d_degenerate_inputs_error() {
        assert!(rot6d_to_matrix(&Rotation6D([0.0; 6])).is_err());
        assert!(rot6d_to_matrix(&Rotation6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])).is_err());
        assert!(rot6d_vjp(&Rotation6D([0.0; 6]), &[0.0; 9]).is_err());
    }

    #[test]
    fn rot6d_random_draws_are_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let mut v = [0.0; 6];
            for x in &mut v {
                *x = rng.sample(StandardNormal);
            }
            let r = rot6d_to_matrix(&Rotation6D(v)).unwrap();
            assert!(orthogonality_error(&r) < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
            assert!((back - r).norm() < 1e-9);
        }
    }

    #[test]
    fn rot6d_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut v = [0.0; 6];
            for x in &mut v {
                *x = rng.sample(StandardNormal);
            }
            let jac = rot6d_jacobian(&Rotation6D(v)).unwrap();
            let h = 1e-6;
            for k in 0..6 {
                let mut vp = v;
                let mut vm = v;
                vp[k] += h;
                vm[k] -= h;
                let rp = rot6d_to_matrix(&Rotation6D(vp)).unwrap();
                let rm = rot6d_to_matrix(&Rotation6D(vm)).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        let fd = (rp[(i, j)] - rm[(i, j)]) / (2.0 * h);
                        assert!((fd - jac[(3 * i + j, k)]).abs() < 1e-6 * (1.0 + fd.abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn geodesic_examples() {
        let i = Matrix3::identity();
        assert_eq!(geodesic_distance(&i, &i), 0.0);
        assert_relative_eq!(geodesic_distance(&i, &rot_z(FRAC_PI_2)), FRAC_PI_2, epsilon = 1e-15);
        assert_relative_eq!(
            geodesic_distance(&i, &rot_z(std::f64::consts::PI)),
            std::f64::consts::PI,
            epsilon = 1e-7
        );
    }

    #[test]
    fn params_flatten_round_trip() {
        let p = CameraParams {
            extrinsics: Extrinsics {
                r: rot_z(0.3),
                t: Vector3::new(1.0, 2.0, 3.0),
            },
            intrinsics: Intrinsics {
                fx: 1.0,
                fy: 2.0,
                cx: 3.0,
                cy: 4.0,
                k1: 5.0,
                k2: 6.0,
                k3: 7.0,
                p1: 8.0,
                p2: 9.0,
            },
        };
        let flat = p.to_array();
        assert_eq!(flat.len(), PARAMS_PER_CAMERA);
        assert_eq!(flat[1], p.extrinsics.r[(0, 1)]);
        assert_eq!(&flat[9..], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert_eq!(CameraParams::from_slice(&flat), p);
    }

    #[test]
    fn jacobian_structure() {
        let mut c = cam(900.0, 500.0, 0.05);
        c.intrinsics.p1 = 0.01;
        c.intrinsics.p2 = -0.02;
        let p = Point3::new(0.2, -0.1, 1.3);
        let jac = project_jacobian(&p, &c).unwrap();
        assert_eq!(jac[(0, 14)], 1.0);
        assert_eq!(jac[(1, 15)], 1.0);
        let (xd, yd) = distort(p.x / p.z, p.y / p.z, &c.intrinsics);
        assert_eq!(jac[(0, 12)], xd);
        assert_eq!(jac[(1, 13)], yd);
        assert_eq!(jac[(0, 13)], 0.0);
    }
}
