//! Levenberg–Marquardt bundle adjustment over camera parameters, plus the
//! perturbation sweep and runtime harnesses used to compare it with the network.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    matrix_to_rot6d, project, project_jacobian, rot6d_jacobian, rot6d_to_matrix, CameraParams, Point2, Point3,
    Rotation6D, PARAMS_PER_CAMERA,
};
use crate::scene::{synthesize_batch, PerturbationSpec, PoseRanges, Scene};
use crate::seed::{self, stream};

/// Per-camera coordinates the solver works in: 6D rotation, translation, then the nine intrinsics.
pub const LM_COORDS: usize = 18;
pub const LM_NAMES: [&str; LM_COORDS] = [
    "r6_0", "r6_1", "r6_2", "r6_3", "r6_4", "r6_5", "tx", "ty", "tz", "fx", "fy", "cx", "cy", "k1", "k2", "k3", "p1",
    "p2",
];

/// Which solver coordinates are optimized; the rest stay at their initial value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeMask(pub [bool; LM_COORDS]);

impl FreeMask {
    pub fn intrinsics() -> Self {
        Self(std::array::from_fn(|i| i >= 9))
    }

    pub fn all() -> Self {
        Self([true; LM_COORDS])
    }

    pub fn only(name: &str) -> Option<Self> {
        let i = LM_NAMES.iter().position(|n| *n == name)?;
        Some(Self(std::array::from_fn(|j| j == i)))
    }

    pub fn parse(spec: &str) -> Result<Self> {
        match spec {
            "intrinsics" => Ok(Self::intrinsics()),
            "all" => Ok(Self::all()),
            name => Self::only(name).ok_or_else(|| Error::InvalidConfig(format!("unknown free-parameter mask '{name}'"))),
        }
    }

    pub fn n_free(&self) -> usize {
        self.0.iter().filter(|f| **f).count()
    }
}

impl Default for FreeMask {
    fn default() -> Self {
        Self::intrinsics()
    }
}

fn to_coords(c: &CameraParams) -> [f64; LM_COORDS] {
    let r6 = matrix_to_rot6d(&c.extrinsics.r).0;
    let flat = c.to_array();
    let mut out = [0.0; LM_COORDS];
    out[..6].copy_from_slice(&r6);
    out[6..].copy_from_slice(&flat[9..]);
    out
}

fn from_coords(x: &[f64]) -> Result<CameraParams> {
    let r = rot6d_to_matrix(&Rotation6D(x[..6].try_into().unwrap()))?;
    let mut flat = [0.0; PARAMS_PER_CAMERA];
    for i in 0..3 {
        for j in 0..3 {
            flat[3 * i + j] = r[(i, j)];
        }
    }
    flat[9..].copy_from_slice(&x[6..]);
    Ok(CameraParams::from_slice(&flat))
}

/// Camera-only bundle adjustment instance: fiducials are known and fixed.
#[derive(Debug, Clone)]
pub struct BAProblem {
    pub fiducials: Vec<Point3>,
    /// `observations[camera][fiducial]`
    pub observations: Vec<Vec<Point2>>,
    pub initial: Vec<CameraParams>,
    pub mask: FreeMask,
}

impl BAProblem {
    pub fn validate(&self) -> Result<()> {
        let nf = self.fiducials.len();
        if self.observations.len() != self.initial.len() || self.observations.iter().any(|o| o.len() != nf) {
            return Err(Error::ShapeMismatch(format!(
                "observations must be {} cameras × {nf} fiducials",
                self.initial.len()
            )));
        }
        Ok(())
    }

    pub fn n_cameras(&self) -> usize {
        self.initial.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iters: usize,
    pub g_tol: f64,
    pub c_tol: f64,
    /// Disable to always run `max_iters` iterations (runtime measurements).
    pub early_stop: bool,
    pub mu_init: f64,
    pub mu_down: f64,
    pub mu_up: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iters: 25,
            g_tol: 1e-10,
            c_tol: 1e-12,
            early_stop: true,
            mu_init: 1e-3,
            mu_down: 3.0,
            mu_up: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    GradientTolerance,
    CostTolerance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BAIteration {
    pub iteration: usize,
    /// Reprojection RMSE (pixels) after this iteration.
    pub cost: f64,
    pub mu: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BATrace {
    pub initial_cost: f64,
    pub iterations: Vec<BAIteration>,
    pub stop: StopReason,
}

impl BATrace {
    pub fn final_cost(&self) -> f64 {
        self.iterations.last().map_or(self.initial_cost, |i| i.cost)
    }
}

struct State {
    coords: Vec<[f64; LM_COORDS]>,
    residual: DVector<f64>,
    sq: f64,
}

fn evaluate(problem: &BAProblem, coords: &[[f64; LM_COORDS]]) -> Option<State> {
    let cams = coords.iter().map(|x| from_coords(x)).collect::<Result<Vec<_>>>().ok()?;
    evaluate_cameras(problem, &cams, coords.to_vec())
}

fn evaluate_cameras(problem: &BAProblem, cams: &[CameraParams], coords: Vec<[f64; LM_COORDS]>) -> Option<State> {
    let nf = problem.fiducials.len();
    let mut residual = DVector::zeros(2 * nf * cams.len());
    for (c, cam) in cams.iter().enumerate() {
        for (f, p) in problem.fiducials.iter().enumerate() {
            let px = project(p, cam).ok()?;
            let o = problem.observations[c][f];
            let row = 2 * (c * nf + f);
            residual[row] = px.x - o.x;
            residual[row + 1] = px.y - o.y;
        }
    }
    let sq = residual.norm_squared();
    sq.is_finite().then_some(State { coords, residual, sq })
}

/// Free coordinates as `(camera, coordinate)` pairs, in column order.
fn free_columns(problem: &BAProblem) -> Vec<(usize, usize)> {
    (0..problem.n_cameras())
        .flat_map(|c| (0..LM_COORDS).filter(|i| problem.mask.0[*i]).map(move |i| (c, i)))
        .collect()
}

/// Stacked residual Jacobian over the free coordinates.
fn jacobian(problem: &BAProblem, coords: &[[f64; LM_COORDS]], cols: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let nf = problem.fiducials.len();
    let mut j = DMatrix::zeros(2 * nf * coords.len(), cols.len());
    let mut first_col = vec![usize::MAX; coords.len()];
    for (k, (c, _)) in cols.iter().enumerate() {
        first_col[*c] = first_col[*c].min(k);
    }
    for (c, x) in coords.iter().enumerate() {
        if first_col[c] == usize::MAX {
            continue;
        }
        let cam = from_coords(x)?;
        let r6 = Rotation6D(x[..6].try_into().unwrap());
        let rot_needed = problem.mask.0[..6].iter().any(|f| *f);
        let drot = if rot_needed { Some(rot6d_jacobian(&r6)?) } else { None };
        for (f, p) in problem.fiducials.iter().enumerate() {
            let jp = project_jacobian(p, &cam)?;
            let row = 2 * (c * nf + f);
            let mut k = first_col[c];
            for i in (0..LM_COORDS).filter(|i| problem.mask.0[*i]) {
                for a in 0..2 {
                    j[(row + a, k)] = if i < 6 {
                        let dr = drot.as_ref().unwrap();
                        (0..9).map(|m| jp[(a, m)] * dr[(m, i)]).sum()
                    } else {
                        jp[(a, i + 3)]
                    };
                }
                k += 1;
            }
        }
    }
    Ok(j)
}

fn rmse(sq: f64, n_points: usize) -> f64 {
    (sq / n_points.max(1) as f64).sqrt()
}

/// Damped Gauss–Newton refinement of the free camera coordinates.
pub fn lm_refine(problem: &BAProblem, options: &LmOptions) -> Result<(Vec<CameraParams>, BATrace)> {
    problem.validate()?;
    let n_points = problem.n_cameras() * problem.fiducials.len();
    let cols = free_columns(problem);
    let coords: Vec<[f64; LM_COORDS]> = problem.initial.iter().map(to_coords).collect();
    // the initial cost is taken on the given cameras, not on their 6D round trip
    let mut state = evaluate_cameras(problem, &problem.initial, coords).ok_or(Error::BehindCamera { z: f64::NAN })?;
    let mut accepted_any = false;
    let mut trace = BATrace {
        initial_cost: rmse(state.sq, n_points),
        iterations: Vec::with_capacity(options.max_iters),
        stop: StopReason::MaxIterations,
    };
    let mut mu: Option<f64> = None;
    let mut jac = jacobian(problem, &state.coords, &cols)?;
    for iteration in 1..=options.max_iters {
        let started = Instant::now();
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * &state.residual;
        if options.early_stop && g.amax() < options.g_tol {
            trace.iterations.push(BAIteration {
                iteration,
                cost: rmse(state.sq, n_points),
                mu: mu.unwrap_or(0.0),
                step_norm: 0.0,
                accepted: true,
                seconds: started.elapsed().as_secs_f64(),
            });
            trace.stop = StopReason::GradientTolerance;
            break;
        }
        let diag = a.diagonal();
        if let Some(k) = (0..cols.len()).find(|k| !(diag[*k] > 0.0)) {
            return Err(Error::SingularNormalEquations {
                camera: cols[k].0,
                parameter: LM_NAMES[cols[k].1],
            });
        }
        let m = *mu.get_or_insert(options.mu_init * diag.max());
        let mut damped = a.clone();
        for k in 0..cols.len() {
            damped[(k, k)] += m * diag[k];
        }
        let Some(chol) = damped.cholesky() else {
            let k = diag.imin();
            return Err(Error::SingularNormalEquations {
                camera: cols[k].0,
                parameter: LM_NAMES[cols[k].1],
            });
        };
        let delta = chol.solve(&(-g));
        let step_norm = delta.norm();
        let mut cand = state.coords.clone();
        for (k, (c, i)) in cols.iter().enumerate() {
            cand[*c][*i] += delta[k];
        }
        let trial = evaluate(problem, &cand).filter(|s| s.sq < state.sq);
        let accepted = trial.is_some();
        let mut converged = false;
        if let Some(next) = trial {
            converged = (state.sq - next.sq) <= options.c_tol * state.sq;
            state = next;
            accepted_any = true;
            mu = Some(m / options.mu_down);
            jac = jacobian(problem, &state.coords, &cols)?;
        } else {
            mu = Some(m * options.mu_up);
        }
        trace.iterations.push(BAIteration {
            iteration,
            cost: rmse(state.sq, n_points),
            mu: mu.unwrap(),
            step_norm,
            accepted,
            seconds: started.elapsed().as_secs_f64(),
        });
        if options.early_stop && (converged || (!accepted && step_norm == 0.0)) {
            trace.stop = StopReason::CostTolerance;
            break;
        }
    }
    if !accepted_any {
        return Ok((problem.initial.clone(), trace));
    }
    let refined = state.coords.iter().map(|x| from_coords(x)).collect::<Result<Vec<_>>>()?;
    Ok((refined, trace))
}

/// Pixel RMSE of `params` against observations over all cameras and fiducials.
pub fn observation_rmse(params: &[CameraParams], fiducials: &[Point3], observations: &[Vec<Point2>], penalty: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (cam, obs) in params.iter().zip(observations) {
        for (p, o) in fiducials.iter().zip(obs) {
            sum += match project(p, cam) {
                Ok(x) if x.x.is_finite() && x.y.is_finite() => (x - o).norm_squared(),
                _ => penalty * penalty,
            };
            n += 1;
        }
    }
    (sum / n.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub trials: usize,
    /// κ for each trial is drawn uniformly from this interval.
    pub kappa_range: [f64; 2],
    pub k_iters: usize,
    pub mask: FreeMask,
    pub pose_ranges: PoseRanges,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            kappa_range: [0.1, 0.1],
            k_iters: 25,
            mask: FreeMask::intrinsics(),
            pose_ranges: PoseRanges::overhead(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub trial: usize,
    pub kappa: f64,
    pub re_before: f64,
    pub re_after_1: f64,
    pub re_after_k: f64,
    pub k_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p05: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p95: f64,
}

/// Linear-interpolated quantiles of `values`.
pub fn quantiles(values: &[f64]) -> Quantiles {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| -> f64 {
        if v.is_empty() {
            return f64::NAN;
        }
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Quantiles {
        p05: q(0.05),
        p25: q(0.25),
        median: q(0.5),
        p75: q(0.75),
        p95: q(0.95),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub before: Quantiles,
    pub after_1: Quantiles,
    pub after_k: Quantiles,
}

/// LM starting point for a synthesized capture: the OEM calibration posed at
/// the capture's true rig pose.
fn sweep_trial(scene: &Scene, cfg: &SweepConfig, trial: usize) -> Result<SweepRecord> {
    let trial_seed = seed::derive(cfg.seed, stream::BASELINE, trial as u64);
    let mut rng = seed::rng(trial_seed);
    let [lo, hi] = cfg.kappa_range;
    let kappa = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let spec = PerturbationSpec::new(kappa, 0.0)?;
    let sample = synthesize_batch(1, scene, &spec, &cfg.pose_ranges, rng.random())?.samples.remove(0);
    let initial = scene.pose(&sample.pose, &scene.oem)?;
    let penalty = 10.0 * scene.image_size().diagonal();
    let re = |p: &[CameraParams]| observation_rmse(p, &scene.object.fiducials, &sample.observations, penalty);
    let problem = BAProblem {
        fiducials: scene.object.fiducials.clone(),
        observations: sample.observations.clone(),
        initial: initial.clone(),
        mask: cfg.mask,
    };
    let run = |iters: usize| -> Result<Vec<CameraParams>> {
        let opts = LmOptions {
            max_iters: iters,
            ..LmOptions::default()
        };
        Ok(lm_refine(&problem, &opts)?.0)
    };
    Ok(SweepRecord {
        trial,
        kappa,
        re_before: re(&initial),
        re_after_1: re(&run(1)?),
        re_after_k: re(&run(cfg.k_iters)?),
        k_iters: cfg.k_iters,
    })
}

/// Pre/post-LM reprojection error over many independently perturbed captures.
pub fn perturbation_sweep(scene: &Scene, cfg: &SweepConfig) -> Result<(Vec<SweepRecord>, SweepSummary)> {
    if cfg.trials == 0 {
        return Err(Error::InvalidConfig("sweep needs at least one trial".into()));
    }
    let [lo, hi] = cfg.kappa_range;
    if !(0.0..=0.5).contains(&lo) || !(lo..=0.5).contains(&hi) {
        return Err(Error::InvalidConfig(format!("kappa range {lo}..{hi} outside [0, 0.5]")));
    }
    let records = (0..cfg.trials)
        .into_par_iter()
        .map(|t| sweep_trial(scene, cfg, t))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&SweepRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let summary = SweepSummary {
        before: quantiles(&col(|r| r.re_before)),
        after_1: quantiles(&col(|r| r.re_after_1)),
        after_k: quantiles(&col(|r| r.re_after_k)),
    };
    Ok((records, summary))
}

/// Describes the instance a runtime row was measured on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    pub n_cameras: usize,
    pub n_fiducials: usize,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub label: String,
    pub lm_iters: Option<usize>,
    pub median_s: f64,
    pub mean_s: f64,
    pub reps: usize,
    #[serde(flatten)]
    pub instance: InstanceDescriptor,
}

pub fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / reps.max(1) as f64;
    Ok((quantiles(&times).median, mean))
}

/// Wall-clock for 0, 1 and `k` LM iterations (early stopping off) and,
/// optionally, one network inference on the same instance.
pub fn runtime_benchmark(
    problem: &BAProblem,
    k: usize,
    reps: usize,
    instance: InstanceDescriptor,
    inference: Option<&mut dyn FnMut() -> Result<()>>,
) -> Result<Vec<RuntimeRow>> {
    let mut rows = Vec::new();
    let mut iters = vec![0, 1, k];
    iters.dedup();
    for it in iters {
        let opts = LmOptions {
            max_iters: it,
            early_stop: false,
            ..LmOptions::default()
        };
        let (median_s, mean_s) = time_reps(reps, || lm_refine(problem, &opts).map(|_| ()))?;
        rows.push(RuntimeRow {
            label: format!("lm_{it}"),
            lm_iters: Some(it),
            median_s,
            mean_s,
            reps,
            instance,
        });
    }
    if let Some(f) = inference {
        f()?;
        let (median_s, mean_s) = time_reps(reps, f)?;
        rows.push(RuntimeRow {
            label: "inference".into(),
            lm_iters: None,
            median_s,
            mean_s,
            reps,
            instance,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{default_scene, make_object, project_all, ObjectKind};

    fn problem(kappa: f64, s: u64) -> (BAProblem, Vec<CameraParams>) {
        let scene = default_scene("O-6", &ObjectKind::Cube8 { edge: 0.1 }).unwrap();
        let spec = PerturbationSpec::new(kappa, 0.0).unwrap();
        let sample = synthesize_batch(1, &scene, &spec, &PoseRanges::overhead(), s).unwrap().samples.remove(0);
        let initial = scene.pose(&sample.pose, &scene.oem).unwrap();
        (
            BAProblem {
                fiducials: scene.object.fiducials.clone(),
                observations: sample.observations.clone(),
                initial,
                mask: FreeMask::intrinsics(),
            },
            sample.gt_params,
        )
    }

    #[test]
    fn ground_truth_is_fixed_point() {
        let (mut p, gt) = problem(0.1, 1);
        p.initial = gt;
        let (_, trace) = lm_refine(&p, &LmOptions::default()).unwrap();
        assert_eq!(trace.iterations.len(), 1);
        assert!(trace.iterations[0].step_norm < 1e-12);
        assert_eq!(trace.initial_cost, 0.0);
        let no_stop = LmOptions {
            early_stop: false,
            max_iters: 1,
            ..LmOptions::default()
        };
        let (_, trace) = lm_refine(&p, &no_stop).unwrap();
        assert!(trace.iterations[0].step_norm < 1e-12);
    }

    #[test]
    fn reduces_cost_and_accepted_costs_never_increase() {
        for s in 0..10 {
            let (p, _) = problem(0.1, s);
            let (_, trace) = lm_refine(&p, &LmOptions::default()).unwrap();
            let mut prev = trace.initial_cost;
            for it in &trace.iterations {
                assert!(it.cost <= prev);
                prev = it.cost;
            }
            assert!(trace.final_cost() < trace.initial_cost);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (mut p, _) = problem(0.05, 3);
        p.mask = FreeMask::all();
        let cols = free_columns(&p);
        let coords: Vec<_> = p.initial.iter().map(to_coords).collect();
        let j = jacobian(&p, &coords, &cols).unwrap();
        let h = 1e-7;
        for (k, (c, i)) in cols.iter().enumerate() {
            // the pixel is linear in the distortion coefficients, so a large step is exact
            let step = if *i >= 13 { 1e-2 } else { h * coords[*c][*i].abs().max(1.0) };
            let mut plus = coords.clone();
            plus[*c][*i] += step;
            let mut minus = coords.clone();
            minus[*c][*i] -= step;
            let rp = evaluate(&p, &plus).unwrap().residual;
            let rm = evaluate(&p, &minus).unwrap().residual;
            let fd = (rp - rm) / (2.0 * step);
            let col = j.column(k);
            let err = (&fd - col).norm() / fd.norm().max(1e-6);
            assert!(err < 1e-4, "column {k} ({}): {err}", LM_NAMES[*i]);
        }
    }

    fn single_camera() -> BAProblem {
        let cam = CameraParams {
            extrinsics: crate::geometry::Extrinsics {
                t: nalgebra::Vector3::new(0.0, 0.0, 1.5),
                ..crate::geometry::Extrinsics::identity()
            },
            intrinsics: crate::geometry::Intrinsics {
                k1: 0.01,
                k2: 0.01,
                k3: 0.01,
                p1: 0.01,
                p2: 0.01,
                ..crate::geometry::Intrinsics::pinhole(1100.0, 1100.0, 512.0, 512.0)
            },
        };
        let fiducials = make_object(&ObjectKind::Cube8 { edge: 0.1 }).unwrap().fiducials;
        BAProblem {
            observations: project_all(&[cam], &fiducials).unwrap(),
            fiducials,
            initial: vec![cam],
            mask: FreeMask::only("fx").unwrap(),
        }
    }

    #[test]
    fn recovers_single_focal_like_grid_search() {
        let mut p = single_camera();
        let truth = p.initial[0].intrinsics.fx;
        p.initial[0].intrinsics.fx *= 1.05;
        let (out, trace) = lm_refine(&p, &LmOptions::default()).unwrap();
        assert!(trace.iterations.len() <= 10);
        let fx = out[0].intrinsics.fx;
        assert!((fx / truth - 1.0).abs() < 1e-6, "fx {fx}");

        let cost = |fx: f64| {
            let mut c = p.initial[0];
            c.intrinsics.fx = fx;
            observation_rmse(&[c], &p.fiducials, &p.observations, 1e6)
        };
        let cell = 0.01;
        let grid: Vec<f64> = (0..=20000).map(|i| 1000.0 + cell * i as f64).collect();
        let best = grid.iter().copied().min_by(|a, b| cost(*a).total_cmp(&cost(*b))).unwrap();
        assert!((best - fx).abs() <= cell);
    }

    #[test]
    fn unobservable_parameter_is_reported() {
        let mut p = single_camera();
        // points on the optical axis carry no information about k1
        p.fiducials = (1..5).map(|i| Point3::new(0.0, 0.0, 0.1 * i as f64)).collect();
        p.observations = project_all(&p.initial, &p.fiducials).unwrap();
        p.mask = FreeMask::only("k1").unwrap();
        let opts = LmOptions {
            early_stop: false,
            ..LmOptions::default()
        };
        match lm_refine(&p, &opts) {
            Err(Error::SingularNormalEquations { camera, parameter }) => assert_eq!((camera, parameter), (0, "k1")),
            other => panic!("expected a singular system, got {other:?}"),
        }
    }

    #[test]
    fn quantile_basics() {
        let q = quantiles(&[3.0, 1.0, 2.0]);
        assert_eq!((q.p25, q.median, q.p75), (1.5, 2.0, 2.5));
    }

    #[test]
    fn zero_kappa_sweep_is_exact() {
        let scene = default_scene("O-6", &ObjectKind::Cube8 { edge: 0.1 }).unwrap();
        let cfg = SweepConfig {
            trials: 3,
            kappa_range: [0.0, 0.0],
            ..SweepConfig::default()
        };
        let (records, _) = perturbation_sweep(&scene, &cfg).unwrap();
        for r in &records {
            assert_eq!((r.re_before, r.re_after_1, r.re_after_k), (0.0, 0.0, 0.0));
        }
        assert_eq!(records, perturbation_sweep(&scene, &cfg).unwrap().0);
    }
}
