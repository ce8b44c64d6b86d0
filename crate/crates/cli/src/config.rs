use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ncal_core::baseline::FreeMask;
use ncal_core::dataset::hex_sha256;
use ncal_core::nn::PtModelConfig;
use ncal_core::scene::{
    load_object, make_object, ObjectKind, OemCalibration, PerturbationSpec, PoseRanges, RigDefaults, RigFile,
    RigSpec, Scene, DEFAULT_MARGIN,
};
use ncal_core::training::{DetectionConfig, TrainConfig};

use crate::exit::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Built-in rig name, ignored when `rig_file` is set.
    pub rig: String,
    pub rig_file: Option<PathBuf>,
    /// `cube8`, `cube27`, `sphere64` or a path to an object file.
    pub object: String,
    pub edge: f64,
    pub sphere_radius: f64,
    /// Hemisphere radius in meters; defaults to the rig's focus distance.
    pub radius: Option<f64>,
    pub margin: f64,
    pub pose_ranges: PoseRanges,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            rig: "O-6".into(),
            rig_file: None,
            object: "cube8".into(),
            edge: 0.1,
            sphere_radius: 0.1,
            radius: None,
            margin: DEFAULT_MARGIN,
            pose_ranges: PoseRanges::overhead(),
        }
    }
}

impl SceneConfig {
    pub fn build(&self) -> anyhow::Result<Scene> {
        let defaults = RigDefaults::default();
        let (rig, oem) = match &self.rig_file {
            Some(path) => RigFile::load(path)?,
            None => {
                let rig = RigSpec::builtin(&self.rig, &defaults)?;
                let oem = OemCalibration::nominal(&rig, &defaults);
                (rig, oem)
            }
        };
        let object = match ObjectKind::parse(&self.object, self.edge, self.sphere_radius) {
            ObjectKind::File(p) => load_object(&p)?,
            kind => make_object(&kind)?,
        };
        let scene = Scene {
            rig,
            oem,
            object,
            radius: self.radius.unwrap_or(defaults.focus_distance),
            margin: self.margin,
        };
        scene.validate()?;
        self.pose_ranges.validate()?;
        Ok(scene)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `smoke` or `desk`; the fields below override the preset.
    pub preset: String,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub cie_noise_sigma: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: "smoke".into(),
            d_model: None,
            n_layers: None,
            n_heads: None,
            d_ff: None,
            cie_noise_sigma: None,
        }
    }
}

impl ModelConfig {
    pub fn build(&self, scene: &Scene, seed: u64) -> anyhow::Result<PtModelConfig> {
        let (nc, nf, size, r) = (scene.n_cameras(), scene.n_fiducials(), scene.image_size(), scene.radius);
        let mut c = match self.preset.as_str() {
            "smoke" => PtModelConfig::smoke(nc, nf, size, r),
            "desk" => PtModelConfig::desk(nc, nf, size, r),
            other => return Err(ConfigError(format!("unknown model preset '{other}' (smoke, desk)")).into()),
        };
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.n_layers = self.n_layers.unwrap_or(c.n_layers);
        c.n_heads = self.n_heads.unwrap_or(c.n_heads);
        c.d_ff = self.d_ff.unwrap_or(c.d_ff);
        c.cie_noise_sigma = self.cie_noise_sigma.unwrap_or(c.cie_noise_sigma);
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub perturbation: PerturbationSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            perturbation: PerturbationSpec::none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub method: String,
    pub n_samples: usize,
    pub trials: usize,
    pub perturbation: PerturbationSpec,
    /// Intrinsic κ values to sweep; empty means just `perturbation`.
    pub kappas: Vec<f64>,
    pub latency_runs: usize,
    pub detect: bool,
    pub detection: DetectionConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            method: "pt".into(),
            n_samples: 1000,
            trials: 3,
            perturbation: PerturbationSpec::none(),
            kappas: Vec::new(),
            latency_runs: 1000,
            detect: false,
            detection: DetectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub trials: usize,
    pub kappa_range: [f64; 2],
    pub k_iters: usize,
    /// `intrinsics`, `all`, or a single coordinate name such as `fx`.
    pub mask: String,
    pub reps: usize,
    /// Rigs timed for the runtime-versus-camera-count table; empty means the scene rig only.
    pub runtime_rigs: Vec<String>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            trials: 100,
            kappa_range: [0.1, 0.1],
            k_iters: 25,
            mask: "intrinsics".into(),
            reps: 100,
            runtime_rigs: Vec::new(),
        }
    }
}

impl BaselineSection {
    pub fn mask(&self) -> anyhow::Result<FreeMask> {
        FreeMask::parse(&self.mask).map_err(|e| ConfigError(e.to_string()).into())
    }
}

/// Effective configuration of a run: the config file with flag overrides applied.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub baseline: BaselineSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    /// Copies run-wide settings into the per-command sections.
    pub fn normalize(&mut self) {
        self.train.seed = self.seed;
        self.train.pose_ranges = self.scene.pose_ranges;
        self.eval.detection.seed = self.seed;
        self.eval.detection.pose_ranges = self.scene.pose_ranges;
        self.eval.detection.lambda_scale = self.train.weights.lambda_scale;
    }

    pub fn hash(&self) -> String {
        hex_sha256(&serde_json::to_vec(self).expect("config serializes"))
    }
}
