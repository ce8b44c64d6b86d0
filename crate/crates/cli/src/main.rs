use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod cmd;
mod config;
mod exit;

use config::RunConfig;
use exit::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "ncal", version, about = "Neural recalibration of fixed multi-camera rigs")]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "NCAL_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct SceneArgs {
    /// Built-in rig: O-<n>, U-7 or T-4.
    #[arg(long)]
    rig: Option<String>,
    /// Rig/OEM JSON file (overrides --rig).
    #[arg(long)]
    rig_file: Option<PathBuf>,
    /// cube8, cube27, sphere64 or an object JSON file.
    #[arg(long)]
    object: Option<String>,
    /// Hemisphere radius in meters.
    #[arg(long)]
    radius: Option<f64>,
    /// Visibility margin in pixels.
    #[arg(long)]
    margin: Option<f64>,
    /// Pose ranges preset: overhead (θ = φ = 0) or full.
    #[arg(long)]
    pose: Option<String>,
}

#[derive(Args, Debug, Default)]
struct KappaArgs {
    #[arg(long)]
    kappa_int: Option<f64>,
    #[arg(long)]
    kappa_ext: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset of posed, perturbed captures.
    Synth {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        kappa: KappaArgs,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the point-based model.
    Train {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        kappa: KappaArgs,
        /// smoke or desk.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        n_layers: Option<usize>,
        #[arg(long)]
        n_heads: Option<usize>,
        #[arg(long)]
        d_ff: Option<usize>,
        /// Total epochs.
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        phase1_epochs: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a recalibration method on synthetic test sets.
    Eval {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        kappa: KappaArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// pt, lm, oracle or oem.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated intrinsic κ values to sweep.
        #[arg(long, value_delimiter = ',')]
        eval_kappas: Option<Vec<f64>>,
        #[arg(long)]
        latency_runs: Option<usize>,
        /// Also run the decalibration-detection study.
        #[arg(long)]
        detect: bool,
        #[arg(long)]
        detect_trials: Option<usize>,
        #[arg(long)]
        calibration_samples: Option<usize>,
        #[arg(long)]
        drift_factor: Option<f64>,
    },
    /// Run the bundle-adjustment sweep and runtime benchmark.
    Baseline {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        kappa_lo: Option<f64>,
        #[arg(long)]
        kappa_hi: Option<f64>,
        #[arg(long)]
        k_iters: Option<usize>,
        /// intrinsics, all, or one coordinate name.
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated rigs for the runtime table.
        #[arg(long, value_delimiter = ',')]
        runtime_rigs: Option<Vec<String>>,
    },
    /// Turn the records of a run directory into CSV files.
    Report {
        /// Run directory (defaults to --out).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl SceneArgs {
    fn apply(self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        let s = &mut cfg.scene;
        set(&mut s.rig, self.rig);
        if self.rig_file.is_some() {
            s.rig_file = self.rig_file;
        }
        set(&mut s.object, self.object);
        if self.radius.is_some() {
            s.radius = self.radius;
        }
        set(&mut s.margin, self.margin);
        if let Some(p) = self.pose {
            s.pose_ranges = match p.as_str() {
                "overhead" => ncal_core::scene::PoseRanges::overhead(),
                "full" => ncal_core::scene::PoseRanges::full(),
                other => return Err(ConfigError(format!("unknown pose preset '{other}' (overhead, full)")).into()),
            };
        }
        Ok(())
    }
}

impl KappaArgs {
    fn apply(self, spec: &mut ncal_core::scene::PerturbationSpec) {
        set(&mut spec.kappa_int, self.kappa_int);
        set(&mut spec.kappa_ext, self.kappa_ext);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(format!("--threads: {e}")))?;
    }
    let out = cli.out;
    let file_config = || RunConfig::load(cli.config.as_deref());
    let finish = |mut cfg: RunConfig| {
        set(&mut cfg.seed, cli.seed);
        cfg.normalize();
        cfg
    };
    match cli.command {
        Command::Synth { scene, kappa, n } => {
            let mut cfg = file_config()?;
            scene.apply(&mut cfg)?;
            kappa.apply(&mut cfg.synth.perturbation);
            set(&mut cfg.synth.n, n);
            cmd::synth(&finish(cfg), &out)
        }
        Command::Train {
            scene,
            kappa,
            preset,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            epochs,
            phase1_epochs,
            batch_size,
            checkpoint_every,
            resume,
        } => {
            let mut cfg = file_config()?;
            scene.apply(&mut cfg)?;
            kappa.apply(&mut cfg.train.perturbation);
            set(&mut cfg.model.preset, preset);
            cfg.model.d_model = d_model.or(cfg.model.d_model);
            cfg.model.n_layers = n_layers.or(cfg.model.n_layers);
            cfg.model.n_heads = n_heads.or(cfg.model.n_heads);
            cfg.model.d_ff = d_ff.or(cfg.model.d_ff);
            set(&mut cfg.train.total_epochs, epochs);
            set(&mut cfg.train.phase1_epochs, phase1_epochs);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.checkpoint_every, checkpoint_every);
            cmd::train(&finish(cfg), &out, resume.as_deref())
        }
        Command::Eval {
            scene,
            kappa,
            checkpoint,
            method,
            samples,
            trials,
            eval_kappas,
            latency_runs,
            detect,
            detect_trials,
            calibration_samples,
            drift_factor,
        } => {
            let ckpt = checkpoint.as_deref().map(ncal_core::nn::load_checkpoint).transpose()?;
            let mut cfg = match (&cli.config, &ckpt) {
                (None, Some(c)) => cmd::config_from_checkpoint(c)?,
                _ => file_config()?,
            };
            scene.apply(&mut cfg)?;
            let e = &mut cfg.eval;
            kappa.apply(&mut e.perturbation);
            set(&mut e.method, method);
            set(&mut e.n_samples, samples);
            set(&mut e.trials, trials);
            set(&mut e.kappas, eval_kappas);
            set(&mut e.latency_runs, latency_runs);
            e.detect |= detect;
            set(&mut e.detection.trials, detect_trials);
            set(&mut e.detection.calibration_samples, calibration_samples);
            set(&mut e.detection.drift_factor, drift_factor);
            cmd::eval(&finish(cfg), &out, ckpt)
        }
        Command::Baseline {
            scene,
            checkpoint,
            trials,
            kappa_lo,
            kappa_hi,
            k_iters,
            mask,
            reps,
            runtime_rigs,
        } => {
            let ckpt = checkpoint.as_deref().map(ncal_core::nn::load_checkpoint).transpose()?;
            let mut cfg = file_config()?;
            scene.apply(&mut cfg)?;
            let b = &mut cfg.baseline;
            set(&mut b.trials, trials);
            set(&mut b.kappa_range[0], kappa_lo);
            set(&mut b.kappa_range[1], kappa_hi);
            set(&mut b.k_iters, k_iters);
            set(&mut b.mask, mask);
            set(&mut b.reps, reps);
            set(&mut b.runtime_rigs, runtime_rigs);
            cmd::baseline(&finish(cfg), &out, ckpt)
        }
        Command::Report { run_dir } => cmd::report(run_dir.as_deref().unwrap_or(&out)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG as u8 } else { exit::OK as u8 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e) as u8)
        }
    }
}
