use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{geodesic_distance, project, slot, CameraParams, Point2, Point3, PARAMS_PER_CAMERA};
use crate::nn::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the parameter and geodesic terms.
    pub lambda1: f64,
    /// Weight on the reprojection term (phase 2 only).
    pub lambda2: f64,
    /// Multiplier on rotation and distortion entries inside the parameter term.
    pub lambda_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 100.0,
            lambda2: 0.01,
            lambda_scale: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Parameter and geodesic terms only.
    One,
    /// Adds the reprojection term.
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub diff: f64,
    pub geo: f64,
    /// Reprojection RMSE in pixels; only computed in phase 2.
    pub reproj: Option<f64>,
}

/// Per-slot multipliers used by the parameter term: `lambda_scale` on the
/// rotation and distortion entries, 1 elsewhere.
pub fn scale_table(lambda_scale: f64) -> [f64; PARAMS_PER_CAMERA] {
    std::array::from_fn(|i| {
        if slot::ROTATION.contains(&i) || slot::DISTORTION.contains(&i) {
            lambda_scale
        } else {
            1.0
        }
    })
}

/// RMSE over every scaled parameter of every camera.
pub fn loss_diff(pred: &[CameraParams], gt: &[CameraParams], lambda_scale: f64) -> f64 {
    let scale = scale_table(lambda_scale);
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for ((a, b), s) in p.to_array().iter().zip(g.to_array()).zip(scale) {
            let d = s * a - s * b;
            sum += d * d;
        }
    }
    (sum / (pred.len() * PARAMS_PER_CAMERA).max(1) as f64).sqrt()
}

/// Mean geodesic angle between predicted and true rotations.
pub fn loss_geo(pred: &[CameraParams], gt: &[CameraParams]) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| geodesic_distance(&p.extrinsics.r, &g.extrinsics.r))
        .sum();
    sum / pred.len().max(1) as f64
}

/// Squared pixel error of one fiducial, with `penalty²` if either projection fails.
fn point_sq_error(p: &Point3, pred: &CameraParams, target: &Point2, penalty: f64) -> f64 {
    match project(p, pred) {
        Ok(x) if x.x.is_finite() && x.y.is_finite() => (x - target).norm_squared(),
        _ => penalty * penalty,
    }
}

/// Pixel RMSE between projections under `pred` and `gt` over every camera and fiducial.
pub fn loss_reproj(pred: &[CameraParams], gt: &[CameraParams], fiducials: &[Point3], penalty: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for f in fiducials {
            let target = match project(f, g) {
                Ok(t) => t,
                Err(_) => {
                    sum += penalty * penalty;
                    n += 1;
                    continue;
                }
            };
            sum += point_sq_error(f, p, &target, penalty);
            n += 1;
        }
    }
    (sum / n.max(1) as f64).sqrt()
}

pub fn compound_loss(
    pred: &[CameraParams],
    gt: &[CameraParams],
    fiducials: &[Point3],
    phase: Phase,
    weights: &LossWeights,
    penalty: f64,
) -> LossBreakdown {
    let diff = loss_diff(pred, gt, weights.lambda_scale);
    let geo = loss_geo(pred, gt);
    let mut total = weights.lambda1 * diff + weights.lambda1 * geo;
    let reproj = match phase {
        Phase::One => None,
        Phase::Two => {
            let r = loss_reproj(pred, gt, fiducials, penalty);
            total += weights.lambda2 * r;
            Some(r)
        }
    };
    LossBreakdown {
        total,
        diff,
        geo,
        reproj,
    }
}

/// Records the compound loss on `tape` for predictions `[rows, 21]`.
///
/// `gt` holds the matching true parameters and `observed` the true pixel
/// projections (`rows × N_fid`, camera-major).
pub fn record_loss(
    tape: &mut Tape,
    pred: Var,
    gt: &Tensor,
    fiducials: &[Point3],
    observed: &[Point2],
    phase: Phase,
    weights: &LossWeights,
    penalty: f64,
) -> Result<(Var, LossBreakdown)> {
    let rows = gt.rows();
    let scale = Tensor::new(vec![1, PARAMS_PER_CAMERA], scale_table(weights.lambda_scale).to_vec())?;
    let zeros = Tensor::zeros(&[1, PARAMS_PER_CAMERA]);
    let gt_var = tape.constant(gt.clone());
    let diff = tape.sub(pred, gt_var)?;
    let diff = tape.affine_rows_cyclic(diff, &scale, &zeros)?;
    let sq = tape.square(diff);
    let ms = tape.mean(sq);
    let l_diff = tape.sqrt(ms);

    let rot = tape.slice_cols(pred, slot::ROTATION.start, 9)?;
    let gt_rot: Vec<f64> = gt.data().chunks(PARAMS_PER_CAMERA).flat_map(|r| r[slot::ROTATION].to_vec()).collect();
    let angles = tape.geodesic(rot, &Tensor::new(vec![rows, 9], gt_rot)?)?;
    let l_geo = tape.mean(angles);

    let sum = tape.add(l_diff, l_geo)?;
    let mut total = tape.scale(sum, weights.lambda1);
    let mut reproj = None;
    if phase == Phase::Two {
        let err = tape.reprojection(pred, fiducials, observed, penalty)?;
        let ms = tape.mean(err);
        let l_eps = tape.sqrt(ms);
        reproj = Some(tape.value(l_eps).item());
        let weighted = tape.scale(l_eps, weights.lambda2);
        total = tape.add(total, weighted)?;
    }
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        diff: tape.value(l_diff).item(),
        geo: tape.value(l_geo).item(),
        reproj,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, rot_z, Extrinsics, Intrinsics};
    use crate::seed;
    use nalgebra::Vector3;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn cam(rng: &mut impl Rng) -> CameraParams {
        let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1).normalize();
        CameraParams {
            extrinsics: Extrinsics {
                r: axis_angle(&axis, rng.random::<f64>() * 0.3),
                t: Vector3::new(rng.random::<f64>() * 0.1, rng.random::<f64>() * 0.1, 1.5),
            },
            intrinsics: Intrinsics {
                fx: 1000.0 + rng.random::<f64>() * 100.0,
                fy: 1000.0 + rng.random::<f64>() * 100.0,
                cx: 512.0,
                cy: 512.0,
                k1: 0.01 * rng.random::<f64>(),
                k2: 0.0,
                k3: 0.0,
                p1: 0.001,
                p2: 0.0,
            },
        }
    }

    fn fiducials() -> Vec<Point3> {
        (0..8)
            .map(|i| Point3::new(((i & 1) as f64 - 0.5) * 0.1, ((i >> 1 & 1) as f64 - 0.5) * 0.1, ((i >> 2) as f64 - 0.5) * 0.1))
            .collect()
    }

    #[test]
    fn zero_at_ground_truth() {
        let mut rng = seed::rng(1);
        let gt: Vec<_> = (0..3).map(|_| cam(&mut rng)).collect();
        let f = fiducials();
        assert_eq!(loss_diff(&gt, &gt, 1000.0), 0.0);
        assert_eq!(loss_geo(&gt, &gt), 0.0);
        assert_eq!(loss_reproj(&gt, &gt, &f, 1e4), 0.0);
        for phase in [Phase::One, Phase::Two] {
            assert_eq!(compound_loss(&gt, &gt, &f, phase, &LossWeights::default(), 1e4).total, 0.0);
        }
    }

    #[test]
    fn distortion_slot_scaling() {
        let mut rng = seed::rng(2);
        let gt = vec![cam(&mut rng)];
        let mut pred = gt.clone();
        pred[0].intrinsics.k2 += 0.001;
        let want = (1.0f64 / 21.0).sqrt();
        assert!((loss_diff(&pred, &gt, 1000.0) - want).abs() < 1e-12);
    }

    #[test]
    fn geodesic_mean() {
        let mut rng = seed::rng(3);
        let gt: Vec<_> = (0..2).map(|_| cam(&mut rng)).collect();
        let mut pred = gt.clone();
        pred[1].extrinsics.r = gt[1].extrinsics.r * rot_z(FRAC_PI_2);
        // acos keeps only about half the digits for the exact camera
        assert!((loss_geo(&pred, &gt) - FRAC_PI_2 / 2.0).abs() < 1e-7);
    }

    #[test]
    fn uniform_principal_shift() {
        let mut rng = seed::rng(4);
        let mut gt = vec![cam(&mut rng), cam(&mut rng)];
        for c in &mut gt {
            c.intrinsics = Intrinsics::pinhole(c.intrinsics.fx, c.intrinsics.fy, 512.0, 512.0);
        }
        let mut pred = gt.clone();
        for c in &mut pred {
            c.intrinsics.cx += 2.0;
        }
        assert!((loss_reproj(&pred, &gt, &fiducials(), 1e4) - 2.0).abs() < 1e-12);
    }

    fn as_tensor(cams: &[CameraParams]) -> Tensor {
        Tensor::new(vec![cams.len(), 21], cams.iter().flat_map(|c| c.to_array()).collect()).unwrap()
    }

    #[test]
    fn tape_loss_matches_scalar_loss() {
        let mut rng = seed::rng(5);
        let gt: Vec<_> = (0..4).map(|_| cam(&mut rng)).collect();
        let pred: Vec<_> = (0..4).map(|_| cam(&mut rng)).collect();
        let f = fiducials();
        let observed: Vec<Point2> = gt.iter().flat_map(|c| f.iter().map(|p| project(p, c).unwrap()).collect::<Vec<_>>()).collect();
        let w = LossWeights::default();
        for phase in [Phase::One, Phase::Two] {
            let mut tape = Tape::new();
            let p = tape.leaf(as_tensor(&pred));
            let (_, got) = record_loss(&mut tape, p, &as_tensor(&gt), &f, &observed, phase, &w, 1e4).unwrap();
            let want = compound_loss(&pred, &gt, &f, phase, &w, 1e4);
            assert!((got.total - want.total).abs() < 1e-10 * want.total.max(1.0));
            assert!((got.diff - want.diff).abs() < 1e-12 * want.diff.max(1.0));
            assert!((got.geo - want.geo).abs() < 1e-12);
            if phase == Phase::Two {
                assert!((got.reproj.unwrap() - want.reproj.unwrap()).abs() < 1e-10);
                let recomposed = w.lambda1 * want.diff + w.lambda1 * want.geo + w.lambda2 * want.reproj.unwrap();
                assert!((want.total - recomposed).abs() < 1e-12 * recomposed);
            }
        }
    }

    #[test]
    fn phase_one_ignores_lambda2() {
        let mut rng = seed::rng(6);
        let gt: Vec<_> = (0..2).map(|_| cam(&mut rng)).collect();
        let pred: Vec<_> = (0..2).map(|_| cam(&mut rng)).collect();
        let a = compound_loss(&pred, &gt, &fiducials(), Phase::One, &LossWeights::default(), 1e4);
        let w = LossWeights {
            lambda2: 123.0,
            ..LossWeights::default()
        };
        let b = compound_loss(&pred, &gt, &fiducials(), Phase::One, &w, 1e4);
        assert_eq!(a.total, b.total);
    }
}
