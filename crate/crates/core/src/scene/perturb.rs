use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, CameraParams};

/// Largest rotation (radians) applied at `kappa_ext = 1`.
pub const ROTATION_PERTURB_SCALE: f64 = std::f64::consts::PI / 18.0;

/// Step applied to a zero-valued distortion coefficient at `δ = 1`.
pub const ZERO_DISTORTION_STEP: f64 = 0.01;

/// Maximum fractional perturbation of intrinsic and extrinsic parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kappa_int: f64,
    pub kappa_ext: f64,
}

impl PerturbationSpec {
    pub fn new(kappa_int: f64, kappa_ext: f64) -> Result<Self> {
        let spec = Self {
            kappa_int,
            kappa_ext,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub const fn none() -> Self {
        Self {
            kappa_int: 0.0,
            kappa_ext: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in [self.kappa_int, self.kappa_ext] {
            if !(0.0..=0.5).contains(&k) {
                return Err(Error::InvalidConfig(format!("kappa {k} outside [0, 0.5]")));
            }
        }
        Ok(())
    }
}

/// Signed uniform draw in `[−κ, κ]`.
pub fn draw_delta<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    kappa * (2.0 * u - 1.0)
}

/// Multiplicatively perturbs each scalar by `(1 + δ)`, `δ ~ U(−κ, κ)`.
///
/// Rotations are perturbed by a random axis-angle composition of angle
/// `|δ|·π/18` to stay on SO(3). Zero distortion coefficients move additively
/// by `δ·0.01`.
pub fn perturb<R: Rng + ?Sized>(params: &CameraParams, spec: &PerturbationSpec, rng: &mut R) -> CameraParams {
    let mut out = *params;
    let intr = &mut out.intrinsics;
    for v in [&mut intr.fx, &mut intr.fy, &mut intr.cx, &mut intr.cy] {
        *v *= 1.0 + draw_delta(spec.kappa_int, rng);
    }
    for v in [&mut intr.k1, &mut intr.k2, &mut intr.k3, &mut intr.p1, &mut intr.p2] {
        let d = draw_delta(spec.kappa_int, rng);
        if *v == 0.0 {
            *v = d * ZERO_DISTORTION_STEP;
        } else {
            *v *= 1.0 + d;
        }
    }

    let ext = &mut out.extrinsics;
    for i in 0..3 {
        ext.t[i] *= 1.0 + draw_delta(spec.kappa_ext, rng);
    }
    let angle = draw_delta(spec.kappa_ext, rng).abs() * ROTATION_PERTURB_SCALE;
    let axis = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    if angle != 0.0 {
        ext.r = axis_angle(&axis, angle) * ext.r;
    }
    out
}
