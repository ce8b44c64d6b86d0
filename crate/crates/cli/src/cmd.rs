use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use ncal_core::baseline::{
    lm_refine, perturbation_sweep, runtime_benchmark, BAIteration, BAProblem, InstanceDescriptor, LmOptions,
    RuntimeRow, SweepConfig,
};
use ncal_core::dataset::save_dataset;
use ncal_core::nn::{save_checkpoint, Checkpoint, PtModel};
use ncal_core::recal::{Registry, RegistryContext};
use ncal_core::records::{read_records, write_records, RecordWriter};
use ncal_core::scene::{synthesize_batch, PerturbationSpec, Scene};
use ncal_core::seed::{self, stream};
use ncal_core::training::{
    detection_study, evaluate, measure_latency, nominal_cameras, DetectionSummary, EpochRecord, EvalConfig,
    EvalReport, LatencyStats, Trainer,
};

use crate::config::RunConfig;
use crate::exit::{ConfigError, RecordsError};

pub const DATASET_FILE: &str = "dataset.ncd";
pub const CHECKPOINT_FILE: &str = "checkpoint.ncal";
pub const LOSS_FILE: &str = "loss.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.jsonl";
pub const RUNTIME_FILE: &str = "runtime.jsonl";
pub const TRACE_FILE: &str = "ba_trace.jsonl";

/// Provenance block embedded in every deterministic artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
}

fn meta(command: &str, cfg: &RunConfig) -> Meta {
    Meta {
        tool: "ncal".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Wall-clock facts live in a sidecar so the main artifacts stay reproducible.
struct Timing {
    command: &'static str,
    started: f64,
    clock: Instant,
}

impl Timing {
    fn start(command: &'static str) -> Self {
        Self {
            command,
            started: unix_now(),
            clock: Instant::now(),
        }
    }

    fn finish(self, out: &Path, cfg: &RunConfig, extra: serde_json::Value) -> anyhow::Result<()> {
        let v = serde_json::json!({
            "command": self.command,
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "started_unix": self.started,
            "finished_unix": unix_now(),
            "wall_seconds": self.clock.elapsed().as_secs_f64(),
            "extra": extra,
        });
        write_json(&out.join(format!("timing-{}.json", self.command)), &v)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| path.display().to_string())
}

fn prepare_out(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn build_scene(cfg: &RunConfig) -> anyhow::Result<Scene> {
    cfg.scene.build()
}

pub fn synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let timing = Timing::start("synth");
    let scene = build_scene(cfg)?;
    let batch = synthesize_batch(
        cfg.synth.n,
        &scene,
        &cfg.synth.perturbation,
        &cfg.scene.pose_ranges,
        seed::derive(cfg.seed, stream::SYNTH, 0),
    )?;
    prepare_out(out)?;
    let m = meta("synth", cfg);
    let extra = serde_json::json!({ "meta": &m, "stats": batch.stats });
    save_dataset(&out.join(DATASET_FILE), &scene, &batch.samples, extra.clone())?;
    write_json(&out.join("synth.json"), &extra)?;
    let s = batch.stats;
    println!(
        "synthesized {} samples ({} cameras × {} fiducials): {} attempts, {} rejected ({:.2}%)",
        s.accepted,
        scene.n_cameras(),
        scene.n_fiducials(),
        s.attempts,
        s.rejected(),
        if s.attempts == 0 { 0.0 } else { 100.0 * s.rejected() as f64 / s.attempts as f64 }
    );
    println!("wrote {}", out.join(DATASET_FILE).display());
    timing.finish(out, cfg, serde_json::Value::Null)
}

fn checkpoint_extra(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "run": cfg,
    })
}

/// The run configuration a checkpoint was trained with.
pub fn config_from_checkpoint(ckpt: &Checkpoint) -> anyhow::Result<RunConfig> {
    match ckpt.extra.get("run") {
        Some(run) => Ok(serde_json::from_value(run.clone())
            .map_err(|e| ConfigError(format!("checkpoint run configuration: {e}")))?),
        None => Ok(RunConfig::default()),
    }
}

pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let timing = Timing::start("train");
    cfg.train.validate()?;
    let scene = build_scene(cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = ncal_core::nn::load_checkpoint(path)?;
            if ckpt.epoch > cfg.train.total_epochs {
                return Err(ConfigError(format!(
                    "checkpoint is at epoch {}, beyond --epochs {}",
                    ckpt.epoch, cfg.train.total_epochs
                ))
                .into());
            }
            Trainer::resume(cfg.train.clone(), scene, ckpt)?
        }
        None => {
            let mc = cfg.model.build(&scene, cfg.seed)?;
            let model = PtModel::new(mc, &nominal_cameras(&scene, &cfg.scene.pose_ranges)?)?;
            Trainer::new(cfg.train.clone(), scene, model)?
        }
    };
    prepare_out(out)?;

    // keep the curve up to the resume point so the file matches an uninterrupted run
    let loss_path = out.join(LOSS_FILE);
    let start = trainer.epoch;
    let kept: Vec<Stamped<EpochRecord>> = if start > 0 && loss_path.exists() {
        read_records::<Stamped<EpochRecord>>(&loss_path)?
            .into_iter()
            .filter(|r| r.record.epoch < start)
            .collect()
    } else {
        Vec::new()
    };
    write_records(&loss_path, &kept)?;
    let mut curve = RecordWriter::append(&loss_path)?;

    let extra = checkpoint_extra(cfg);
    let total = cfg.train.total_epochs;
    let every = cfg.train.checkpoint_every;
    let print_every = (total / 20).max(1);
    println!(
        "training {} parameters for epochs {start}..{total} (phase 2 from {}), batch {}",
        trainer.model.store.n_scalars(),
        cfg.train.phase1_epochs,
        cfg.train.batch_size
    );
    let hash = cfg.hash();
    let result = trainer.run(|rec, t| {
        curve.write(&Stamped {
            config_hash: hash.clone(),
            seed: cfg.seed,
            record: rec,
        })?;
        if rec.phase_start {
            println!("epoch {}: phase 2 begins", rec.epoch);
        }
        if (rec.epoch + 1) % print_every == 0 || rec.epoch + 1 == total {
            println!(
                "epoch {:>6}  loss {:.6e}  diff {:.4e}  geo {:.4e}  reproj {}  lr {:.1e}",
                rec.epoch + 1,
                rec.loss,
                rec.l_diff,
                rec.l_geo,
                rec.l_reproj.map_or("-".to_string(), |v| format!("{v:.4e}")),
                rec.lr_heads
            );
        }
        if every > 0 && t.epoch % every == 0 && t.epoch < total {
            let mut c = t.checkpoint()?;
            c.extra = extra.clone();
            save_checkpoint(&c, &out.join(format!("checkpoint-{:06}.ncal", t.epoch)))?;
        }
        Ok(())
    });
    curve.flush()?;
    result?;
    let mut ckpt = trainer.checkpoint()?;
    ckpt.extra = extra;
    save_checkpoint(&ckpt, &out.join(CHECKPOINT_FILE))?;
    write_json(
        &out.join("train.json"),
        &serde_json::json!({ "meta": meta("train", cfg), "epochs": trainer.epoch }),
    )?;
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    timing.finish(out, cfg, serde_json::json!({ "resumed_from_epoch": start }))
}

/// A record line tagged with the run it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub record: T,
}

fn stamp<T>(cfg: &RunConfig, records: impl IntoIterator<Item = T>) -> Vec<Stamped<T>> {
    let hash = cfg.hash();
    records
        .into_iter()
        .map(|record| Stamped {
            config_hash: hash.clone(),
            seed: cfg.seed,
            record,
        })
        .collect()
}

/// One line of `eval.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub config_hash: String,
    pub seed: u64,
    pub kappa_int: f64,
    pub kappa_ext: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub meta: Meta,
    pub reports: Vec<EvalReport>,
    pub detection: Option<DetectionSummary>,
}

pub fn eval(cfg: &RunConfig, out: &Path, ckpt: Option<Checkpoint>) -> anyhow::Result<()> {
    let timing = Timing::start("eval");
    let scene = build_scene(cfg)?;
    let e = &cfg.eval;
    let model = ckpt.map(|c| Arc::new(c.model));
    if let Some(m) = &model {
        if m.config.n_cameras != scene.n_cameras() || m.config.n_fiducials != scene.n_fiducials() {
            return Err(ConfigError(format!(
                "checkpoint expects {} cameras × {} fiducials, scene has {} × {}",
                m.config.n_cameras,
                m.config.n_fiducials,
                scene.n_cameras(),
                scene.n_fiducials()
            ))
            .into());
        }
    }
    let ctx = RegistryContext {
        model: model.clone(),
        ..RegistryContext::default()
    };
    let method = Registry::default().build(&e.method, &ctx)?;
    let specs: Vec<PerturbationSpec> = if e.kappas.is_empty() {
        vec![e.perturbation]
    } else {
        e.kappas
            .iter()
            .map(|k| PerturbationSpec::new(*k, e.perturbation.kappa_ext))
            .collect::<Result<_, _>>()?
    };
    prepare_out(out)?;
    let hash = cfg.hash();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for spec in specs {
        let ec = EvalConfig {
            n_samples: e.n_samples,
            trials: e.trials,
            perturbation: spec,
            pose_ranges: cfg.scene.pose_ranges,
            seed: cfg.seed,
        };
        let r = evaluate(method.as_ref(), &scene, &ec)?;
        println!(
            "{}  κ_int {:.4}  κ_ext {:.4}  RE_avg = {:.6} ± {:.6} px  ({} trials × {} samples)",
            r.method, spec.kappa_int, spec.kappa_ext, r.re_avg, r.re_std, r.trials, r.n_samples
        );
        rows.push(EvalRow {
            config_hash: hash.clone(),
            seed: cfg.seed,
            kappa_int: spec.kappa_int,
            kappa_ext: spec.kappa_ext,
            report: r.clone(),
        });
        reports.push(r);
    }
    write_records(&out.join(EVAL_FILE), &rows)?;

    let mut detection = None;
    if e.detect {
        let m = model
            .as_deref()
            .ok_or_else(|| ConfigError("--detect needs a checkpoint".into()))?;
        let d = detection_study(m, &scene, &e.detection)?;
        println!(
            "drift detection: threshold {:.4}, detected {:.1}% of {:.0}% focal drifts, {:.1}% false positives",
            d.threshold,
            100.0 * d.detection_rate,
            100.0 * (e.detection.drift_factor - 1.0),
            100.0 * d.false_positive_rate
        );
        detection = Some(d);
    }
    let report = CalibrationReport {
        meta: meta("eval", cfg),
        reports,
        detection,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    println!("wrote {}", out.join(REPORT_FILE).display());

    let mut latency: Option<LatencyStats> = None;
    if let (Some(m), true) = (&model, e.latency_runs > 0) {
        let sample = synthesize_batch(1, &scene, &PerturbationSpec::none(), &cfg.scene.pose_ranges, cfg.seed)?;
        let l = measure_latency(m, &sample.samples[0].observations, e.latency_runs)?;
        println!("inference latency: median {:.3e} s, mean {:.3e} s over {} runs", l.median_s, l.mean_s, l.runs);
        latency = Some(l);
    }
    timing.finish(out, cfg, serde_json::json!({ "latency": latency }))
}

/// One line of `ba_trace.jsonl`; iteration 0 is the starting point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub cost: f64,
    pub mu: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub seconds: f64,
}

impl From<&BAIteration> for TraceRow {
    fn from(i: &BAIteration) -> Self {
        Self {
            iteration: i.iteration,
            cost: i.cost,
            mu: i.mu,
            step_norm: i.step_norm,
            accepted: i.accepted,
            seconds: i.seconds,
        }
    }
}

fn lm_instance(scene: &Scene, kappa: f64, mask: ncal_core::baseline::FreeMask, cfg: &RunConfig) -> anyhow::Result<BAProblem> {
    let spec = PerturbationSpec::new(kappa, 0.0)?;
    let seed = seed::derive(cfg.seed, stream::BASELINE, u64::MAX);
    let sample = synthesize_batch(1, scene, &spec, &cfg.scene.pose_ranges, seed)?.samples.remove(0);
    Ok(BAProblem {
        fiducials: scene.object.fiducials.clone(),
        initial: scene.pose(&sample.pose, &scene.oem)?,
        observations: sample.observations,
        mask,
    })
}

pub fn baseline(cfg: &RunConfig, out: &Path, ckpt: Option<Checkpoint>) -> anyhow::Result<()> {
    let timing = Timing::start("baseline");
    let scene = build_scene(cfg)?;
    let b = &cfg.baseline;
    let mask = b.mask()?;
    if b.trials == 0 {
        return Err(ConfigError("baseline trials must be at least 1".into()).into());
    }
    let sc = SweepConfig {
        trials: b.trials,
        kappa_range: b.kappa_range,
        k_iters: b.k_iters,
        mask,
        pose_ranges: cfg.scene.pose_ranges,
        seed: cfg.seed,
    };
    let (records, summary) = perturbation_sweep(&scene, &sc).map_err(|e| match e {
        ncal_core::Error::InvalidConfig(m) => anyhow::Error::from(ConfigError(m)),
        other => other.into(),
    })?;
    prepare_out(out)?;
    write_records(&out.join(SWEEP_FILE), &stamp(cfg, records))?;
    write_json(
        &out.join("sweep_summary.json"),
        &serde_json::json!({ "meta": meta("baseline", cfg), "summary": summary }),
    )?;
    println!(
        "LM sweep over {} trials, κ ∈ [{}, {}]: median RE {:.4} px before, {:.4} after 1 iteration, {:.4} after {}",
        b.trials, b.kappa_range[0], b.kappa_range[1], summary.before.median, summary.after_1.median, summary.after_k.median, b.k_iters
    );

    let kappa = b.kappa_range[1];
    let problem = lm_instance(&scene, kappa, mask, cfg)?;
    let opts = LmOptions {
        max_iters: b.k_iters,
        early_stop: false,
        ..LmOptions::default()
    };
    let (_, trace) = lm_refine(&problem, &opts)?;
    let mut trace_rows = vec![TraceRow {
        iteration: 0,
        cost: trace.initial_cost,
        mu: 0.0,
        step_norm: 0.0,
        accepted: true,
        seconds: 0.0,
    }];
    trace_rows.extend(trace.iterations.iter().map(TraceRow::from));
    write_records(&out.join(TRACE_FILE), &stamp(cfg, trace_rows))?;

    let model = ckpt.map(|c| c.model);
    let rigs = if b.runtime_rigs.is_empty() {
        vec![None]
    } else {
        b.runtime_rigs.iter().map(|r| Some(r.clone())).collect()
    };
    let mut runtime: Vec<RuntimeRow> = Vec::new();
    for rig in rigs {
        let s = match &rig {
            None => scene.clone(),
            Some(name) => {
                let mut sc = cfg.scene.clone();
                sc.rig = name.clone();
                sc.rig_file = None;
                sc.build()?
            }
        };
        let p = lm_instance(&s, kappa, mask, cfg)?;
        let instance = InstanceDescriptor {
            n_cameras: s.n_cameras(),
            n_fiducials: s.n_fiducials(),
            kappa,
        };
        let m = model.as_ref().filter(|m| m.config.n_cameras == s.n_cameras() && m.config.n_fiducials == s.n_fiducials());
        let obs = p.observations.clone();
        let mut infer = m.map(|m| move || m.predict(&obs).map(|_| ()));
        let infer_dyn: Option<&mut dyn FnMut() -> ncal_core::Result<()>> =
            infer.as_mut().map(|f| f as &mut dyn FnMut() -> ncal_core::Result<()>);
        let rows = runtime_benchmark(&p, b.k_iters, b.reps, instance, infer_dyn)?;
        for r in &rows {
            println!(
                "runtime {:>10}  N_C {:>2}  median {:.3e} s  mean {:.3e} s  ({} reps)",
                r.label, r.instance.n_cameras, r.median_s, r.mean_s, r.reps
            );
        }
        runtime.extend(rows);
    }
    write_records(&out.join(RUNTIME_FILE), &stamp(cfg, runtime))?;
    timing.finish(out, cfg, serde_json::Value::Null)
}

fn read_or_records_error<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    read_records(path).map_err(|e| RecordsError(format!("{}: {e}", path.display())).into())
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Writes plot-ready CSVs for every record file present in `run_dir`.
pub fn report(run_dir: &Path) -> anyhow::Result<()> {
    let expected = [LOSS_FILE, EVAL_FILE, RUNTIME_FILE, TRACE_FILE];
    let present: Vec<&str> = expected.iter().copied().filter(|f| run_dir.join(f).is_file()).collect();
    if present.is_empty() {
        return Err(RecordsError(format!(
            "no record files in {}; expected any of: {}",
            run_dir.display(),
            expected.join(", ")
        ))
        .into());
    }
    let csv_dir = run_dir.join("csv");
    std::fs::create_dir_all(&csv_dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let mut emit = |name: &str, body: String| -> anyhow::Result<()> {
        let p = csv_dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    for f in present {
        let path = run_dir.join(f);
        let mut body = String::new();
        match f {
            LOSS_FILE => {
                body.push_str("epoch,phase,phase_start,loss,l_diff,l_geo,l_reproj,grad_norm,lr_encoder,lr_heads\n");
                for Stamped { record: r, .. } in read_or_records_error::<Stamped<EpochRecord>>(&path)? {
                    writeln!(
                        body,
                        "{},{},{},{},{},{},{},{},{},{}",
                        r.epoch,
                        r.phase,
                        r.phase_start as u8,
                        r.loss,
                        r.l_diff,
                        r.l_geo,
                        csv_opt(r.l_reproj),
                        r.grad_norm,
                        r.lr_encoder,
                        r.lr_heads
                    )?;
                }
                emit("loss_vs_epoch.csv", body)?;
            }
            EVAL_FILE => {
                let mut rows = read_or_records_error::<EvalRow>(&path)?;
                rows.sort_by(|a, b| {
                    a.kappa_int
                        .total_cmp(&b.kappa_int)
                        .then(a.kappa_ext.total_cmp(&b.kappa_ext))
                        .then(a.report.method.cmp(&b.report.method))
                });
                body.push_str("kappa_int,kappa_ext,method,re_avg,re_std,trials,n_samples\n");
                for r in rows {
                    writeln!(
                        body,
                        "{},{},{},{},{},{},{}",
                        r.kappa_int, r.kappa_ext, r.report.method, r.report.re_avg, r.report.re_std, r.report.trials, r.report.n_samples
                    )?;
                }
                emit("re_vs_kappa.csv", body)?;
            }
            RUNTIME_FILE => {
                let mut rows: Vec<RuntimeRow> = read_or_records_error::<Stamped<RuntimeRow>>(&path)?.into_iter().map(|r| r.record).collect();
                rows.sort_by(|a, b| a.instance.n_cameras.cmp(&b.instance.n_cameras).then(a.label.cmp(&b.label)));
                body.push_str("n_cameras,n_fiducials,kappa,label,lm_iters,median_s,mean_s,reps\n");
                for r in rows {
                    writeln!(
                        body,
                        "{},{},{},{},{},{},{},{}",
                        r.instance.n_cameras,
                        r.instance.n_fiducials,
                        r.instance.kappa,
                        r.label,
                        r.lm_iters.map_or(String::new(), |k| k.to_string()),
                        r.median_s,
                        r.mean_s,
                        r.reps
                    )?;
                }
                emit("runtime_vs_cameras.csv", body)?;
            }
            TRACE_FILE => {
                body.push_str("iteration,cost,mu,step_norm,accepted,seconds\n");
                for Stamped { record: r, .. } in read_or_records_error::<Stamped<TraceRow>>(&path)? {
                    writeln!(
                        body,
                        "{},{},{},{},{},{}",
                        r.iteration, r.cost, r.mu, r.step_norm, r.accepted as u8, r.seconds
                    )?;
                }
                emit("ba_iterations.csv", body)?;
            }
            _ => unreachable!(),
        }
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
