use serde::{Deserialize, Serialize};

use super::loss::{record_loss, LossWeights, Phase};
use crate::error::{Error, Result};
use crate::geometry::{CameraParams, Point2, PARAMS_PER_CAMERA};
use crate::nn::{clip_gradients, Adam, AdamState, Checkpoint, LrMap, OptimizerState, PlateauScheduler, PtModel, Tape, Tensor};
use crate::scene::{synthesize_batch, PerturbationSpec, PoseRanges, Scene};
use crate::seed::{self, stream};

/// Penalty distance for predicted projections that land behind a camera, as a
/// multiple of the image diagonal.
pub const BEHIND_CAMERA_PENALTY: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: u32,
    pub rel_threshold: f64,
    pub lr_min: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 200,
            rel_threshold: 1e-4,
            lr_min: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase1_epochs: u64,
    pub total_epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub perturbation: PerturbationSpec,
    pub pose_ranges: PoseRanges,
    pub weights: LossWeights,
    pub lr: LrMap,
    pub clip_norm: f64,
    pub scheduler: SchedulerConfig,
    /// Epochs between scheduler evaluations.
    pub eval_every: u64,
    /// Epochs between periodic checkpoints (0 disables them).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 10_000,
            total_epochs: 20_000,
            batch_size: 512,
            seed: 0,
            perturbation: PerturbationSpec::none(),
            pose_ranges: PoseRanges::full(),
            weights: LossWeights::default(),
            lr: LrMap::default(),
            clip_norm: 1.0,
            scheduler: SchedulerConfig::default(),
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.phase1_epochs > self.total_epochs {
            return bad("phase1_epochs exceeds total_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        let w = &self.weights;
        if !(w.lambda1 >= 0.0 && w.lambda2 >= 0.0 && w.lambda_scale >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        self.perturbation.validate()?;
        self.pose_ranges.validate()
    }

    pub fn phase(&self, epoch: u64) -> Phase {
        if epoch < self.phase1_epochs {
            Phase::One
        } else {
            Phase::Two
        }
    }
}

/// One line of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub phase: u8,
    /// True on the first epoch of phase 2.
    pub phase_start: bool,
    pub loss: f64,
    pub l_diff: f64,
    pub l_geo: f64,
    pub l_reproj: Option<f64>,
    pub grad_norm: f64,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub batch_seed: u64,
}

/// OEM calibration posed at the reference pose of `ranges`: the centre of the
/// model's output space.
pub fn nominal_cameras(scene: &Scene, ranges: &PoseRanges) -> Result<Vec<CameraParams>> {
    scene.pose(&ranges.reference(scene.radius), &scene.oem)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub scene: Scene,
    pub model: PtModel,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, scene: Scene, model: PtModel) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        check_compat(&scene, &model)?;
        let refs: Vec<&Tensor> = model.store.params.iter().map(|p| &p.value).collect();
        let s = config.scheduler;
        let optimizer = OptimizerState {
            adam: Adam::default(),
            moments: AdamState::new(&refs),
            lr: config.lr,
            scheduler: PlateauScheduler::new(s.factor, s.patience, s.rel_threshold, s.lr_min),
        };
        Ok(Self {
            config,
            scene,
            model,
            optimizer,
            epoch: 0,
        })
    }

    /// Continues from a checkpoint; the next epoch is the one after the
    /// checkpointed epoch, so the continuation matches an uninterrupted run.
    pub fn resume(config: TrainConfig, scene: Scene, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, scene, ckpt.model)?;
        if let Some(opt) = ckpt.optimizer {
            t.optimizer = opt;
        }
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
            extra: serde_json::json!({ "train": serde_json::to_value(&self.config)? }),
        })
    }

    fn penalty(&self) -> f64 {
        BEHIND_CAMERA_PENALTY * self.scene.image_size().diagonal()
    }

    /// Runs one epoch: fresh batch, forward, loss, backward, clip, update, schedule.
    pub fn step(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let cfg = &self.config;
        let batch_seed = seed::derive(cfg.seed, stream::TRAIN, epoch);
        let batch = synthesize_batch(cfg.batch_size, &self.scene, &cfg.perturbation, &cfg.pose_ranges, batch_seed)?;
        let obs: Vec<&[Vec<Point2>]> = batch.samples.iter().map(|s| s.observations.as_slice()).collect();
        let input = self.model.prepare_input(&obs)?;
        let gt = Tensor::new(
            vec![batch.samples.len() * self.scene.n_cameras(), PARAMS_PER_CAMERA],
            batch.samples.iter().flat_map(|s| s.gt_params.iter().flat_map(|c| c.to_array())).collect(),
        )?;
        let observed: Vec<Point2> = batch.samples.iter().flat_map(|s| s.observations.iter().flatten().copied()).collect();

        let phase = cfg.phase(epoch);
        let mut tape = Tape::new();
        let fwd = self.model.forward(&mut tape, &input)?;
        let (loss, parts) = record_loss(
            &mut tape,
            fwd.output,
            &gt,
            &self.scene.object.fiducials,
            &observed,
            phase,
            &cfg.weights,
            self.penalty(),
        )?;
        let non_finite = Error::NonFiniteLoss {
            epoch: epoch as usize,
            batch_seed,
        };
        if !parts.total.is_finite() {
            return Err(non_finite);
        }
        let mut grads_all = tape.backward(loss)?;
        let mut grads: Vec<Tensor> = fwd
            .params
            .iter()
            .zip(&self.model.store.params)
            .map(|(v, p)| grads_all.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        drop(tape);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(non_finite);
        }
        let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
        let lr = self.optimizer.lr;
        let lrs: Vec<f64> = self.model.store.params.iter().map(|p| lr.get(p.group)).collect();
        let mut params: Vec<&mut Tensor> = self.model.store.params.iter_mut().map(|p| &mut p.value).collect();
        self.optimizer.adam.step(&mut self.optimizer.moments, &mut params, &grads, &lrs);

        let phase_start = phase == Phase::Two && epoch == cfg.phase1_epochs && epoch > 0;
        if phase_start {
            // the loss gains a term here; improvements are measured afresh
            self.optimizer.scheduler.best = None;
            self.optimizer.scheduler.bad_evals = 0;
        }
        if (epoch + 1) % cfg.eval_every == 0 {
            self.optimizer.scheduler.observe(parts.total, &mut self.optimizer.lr);
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            phase: phase.number(),
            phase_start,
            loss: parts.total,
            l_diff: parts.diff,
            l_geo: parts.geo,
            l_reproj: parts.reproj,
            grad_norm,
            lr_encoder: lr.encoder,
            lr_heads: lr.heads,
            batch_seed,
        })
    }

    /// Steps until `total_epochs`, handing each record to `on_epoch`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>) -> Result<()> {
        while self.epoch < self.config.total_epochs {
            let rec = self.step()?;
            on_epoch(&rec, self)?;
        }
        Ok(())
    }
}

fn check_compat(scene: &Scene, model: &PtModel) -> Result<()> {
    let c = &model.config;
    if c.n_cameras != scene.n_cameras() || c.n_fiducials != scene.n_fiducials() {
        return Err(Error::InvalidConfig(format!(
            "model expects {} cameras × {} fiducials, scene has {} × {}",
            c.n_cameras,
            c.n_fiducials,
            scene.n_cameras(),
            scene.n_fiducials()
        )));
    }
    Ok(())
}

/// Trains `model` for `config.total_epochs` epochs and returns it with its loss curve.
pub fn train(config: TrainConfig, scene: Scene, model: PtModel) -> Result<(PtModel, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(config, scene, model)?;
    let mut curve = Vec::with_capacity(trainer.config.total_epochs as usize);
    trainer.run(|r, _| {
        curve.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.model, curve))
}
