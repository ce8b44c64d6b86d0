//! Interchangeable recalibration strategies behind one trait, looked up by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::baseline::{lm_refine, BAProblem, FreeMask, LmOptions};
use crate::error::{Error, Result};
use crate::geometry::{CameraParams, Point2, Point3};
use crate::nn::PtModel;

/// Everything a strategy may look at for one capture.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationInput<'a> {
    /// `observations[camera][fiducial]`
    pub observations: &'a [Vec<Point2>],
    pub fiducials: &'a [Point3],
    /// OEM calibration placed at the capture's rig pose.
    pub prior: &'a [CameraParams],
    /// Only the oracle reads this; it is `None` outside synthetic evaluation.
    pub ground_truth: Option<&'a [CameraParams]>,
}

pub trait Recalibrator: Send + Sync {
    fn name(&self) -> &str;

    fn calibrate(&self, input: &CalibrationInput<'_>) -> Result<Vec<CameraParams>>;

    fn calibrate_batch(&self, inputs: &[CalibrationInput<'_>]) -> Result<Vec<Vec<CameraParams>>> {
        inputs.iter().map(|i| self.calibrate(i)).collect()
    }
}

/// The trained point-based network.
pub struct PtRecalibrator {
    pub model: Arc<PtModel>,
    /// Samples per forward pass in `calibrate_batch`.
    pub chunk: usize,
}

impl Recalibrator for PtRecalibrator {
    fn name(&self) -> &str {
        "pt"
    }

    fn calibrate(&self, input: &CalibrationInput<'_>) -> Result<Vec<CameraParams>> {
        self.model.predict(input.observations)
    }

    fn calibrate_batch(&self, inputs: &[CalibrationInput<'_>]) -> Result<Vec<Vec<CameraParams>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.chunk.max(1)) {
            let obs: Vec<&[Vec<Point2>]> = chunk.iter().map(|i| i.observations).collect();
            out.extend(self.model.predict_batch(&obs)?);
        }
        Ok(out)
    }
}

/// Levenberg–Marquardt bundle adjustment started from the prior.
pub struct LmRecalibrator {
    pub options: LmOptions,
    pub mask: FreeMask,
}

impl Recalibrator for LmRecalibrator {
    fn name(&self) -> &str {
        "lm"
    }

    fn calibrate(&self, input: &CalibrationInput<'_>) -> Result<Vec<CameraParams>> {
        let problem = BAProblem {
            fiducials: input.fiducials.to_vec(),
            observations: input.observations.to_vec(),
            initial: input.prior.to_vec(),
            mask: self.mask,
        };
        Ok(lm_refine(&problem, &self.options)?.0)
    }
}

/// Returns the ground truth; a plumbing check for evaluation.
pub struct OracleRecalibrator;

impl Recalibrator for OracleRecalibrator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn calibrate(&self, input: &CalibrationInput<'_>) -> Result<Vec<CameraParams>> {
        input
            .ground_truth
            .map(<[CameraParams]>::to_vec)
            .ok_or_else(|| Error::InvalidConfig("the oracle needs ground-truth parameters".into()))
    }
}

/// Keeps the factory calibration: the "do nothing" reference.
pub struct OemRecalibrator;

impl Recalibrator for OemRecalibrator {
    fn name(&self) -> &str {
        "oem"
    }

    fn calibrate(&self, input: &CalibrationInput<'_>) -> Result<Vec<CameraParams>> {
        Ok(input.prior.to_vec())
    }
}

/// What a factory may draw on when building a strategy.
#[derive(Clone, Default)]
pub struct RegistryContext {
    pub model: Option<Arc<PtModel>>,
    pub lm: LmOptions,
    pub mask: FreeMask,
}

pub type Factory = Box<dyn Fn(&RegistryContext) -> Result<Box<dyn Recalibrator>> + Send + Sync>;

pub struct Registry {
    factories: BTreeMap<String, Factory>,
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: Factory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, ctx: &RegistryContext) -> Result<Box<dyn Recalibrator>> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownRecalibrator(format!("{name} (known: {})", self.names().join(", "))))?;
        f(ctx)
    }
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(
            "pt",
            Box::new(|ctx| {
                let model = ctx
                    .model
                    .clone()
                    .ok_or_else(|| Error::InvalidConfig("method 'pt' needs a checkpoint".into()))?;
                Ok(Box::new(PtRecalibrator { model, chunk: 256 }))
            }),
        );
        r.register(
            "lm",
            Box::new(|ctx| {
                Ok(Box::new(LmRecalibrator {
                    options: ctx.lm,
                    mask: ctx.mask,
                }))
            }),
        );
        r.register("oracle", Box::new(|_| Ok(Box::new(OracleRecalibrator))));
        r.register("oem", Box::new(|_| Ok(Box::new(OemRecalibrator))));
        r
    }
}
