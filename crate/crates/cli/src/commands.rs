//! The pipeline verbs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use anyhow::{Context, Result};
use blockskip_core::diffusion::{
    container, sample as sample_chain, train_teacher as fit_teacher, BlockChainModel, Dataset, NoiseSchedule,
};
use blockskip_core::executor::run_masked_chain;
use blockskip_core::metrics::{block_macs, feature_distortion, mask_cost, mask_report, wall_clock, Summary, TimingSummary};
use blockskip_core::rectify::{rectify as rectify_mask, verify_equivalence, RectificationReport};
use blockskip_core::trainer::{self, SamplingMode};
use blockskip_core::{MaskMatrix, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::artifacts::{self, read_samples, should_write, sibling, Policy, Provenance, SampleHeader};
use crate::config::RunConfig;
use crate::failure::fail;
use crate::{EvaluateArgs, MaskArgs, ModeArg, RectifyArgs, ReportArgs, SampleArgs, TeacherArgs, TrainerOverrides};

/// Largest deviation `rectify --verify` accepts.
pub const VERIFY_TOLERANCE: f32 = 1e-5;

pub fn policy(force: bool, resume: bool) -> Policy {
    Policy::from_flags(force, resume)
}

/// Loads a teacher and checks it was built for this config's model and schedule.
pub fn load_model(dir: &Path, cfg: &RunConfig) -> Result<BlockChainModel> {
    let (model, manifest) = container::load(dir).with_context(|| format!("loading model {}", dir.display()))?;
    if manifest.model != cfg.model_spec()? {
        return Err(fail("model_mismatch", format!("{} was built for a different model spec", dir.display())));
    }
    if manifest.schedule != cfg.schedule {
        return Err(fail(
            "model_mismatch",
            format!("{} was trained on schedule {}, config has {}", dir.display(), manifest.schedule.id(), cfg.schedule.id()),
        ));
    }
    if manifest.config_hash.as_deref().is_some_and(|h| h != cfg.teacher_hash()) {
        log::warn!("{} was trained under a different config (seed, dataset or teacher settings)", dir.display());
    }
    Ok(model)
}

pub fn provenance(cfg: &RunConfig) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

pub fn train_teacher(args: &TeacherArgs) -> Result<Value> {
    let cfg = RunConfig::load(&args.common.config)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.teacher_dir());
    let hash = cfg.teacher_hash();
    let curve_path = curve_path(&dir);
    if !should_write(&dir, policy(args.common.force, args.common.resume), &hash)? {
        let manifest = container::read_manifest(&dir)?;
        return Ok(json!({ "teacher": dir, "checksum": manifest.checksum, "reused": true }));
    }
    let dataset = Dataset::from_spec(&cfg.dataset)?;
    let schedule = NoiseSchedule::new(cfg.schedule.clone())?;
    let (model, report) = fit_teacher(cfg.model_spec()?, &dataset, &schedule, &cfg.teacher)?;
    let manifest = container::save(&dir, &model, &cfg.schedule, cfg.seed, Some(hash.clone()))?;
    let mut csv = String::from("iteration,loss,held_out\n");
    for p in &report.curve {
        let held = p.held_out.map(|h| h.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{held}\n", p.iteration, p.loss));
    }
    let prov = Provenance {
        config_hash: hash,
        seed: cfg.seed,
    };
    artifacts::write(&curve_path, prov.csv(&csv))?;
    Ok(json!({
        "teacher": dir,
        "checksum": manifest.checksum,
        "held_out_loss": report.held_out_loss,
        "curve": curve_path,
    }))
}

fn curve_path(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "teacher".into());
    dir.with_file_name(format!("{name}_curve.csv"))
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainerOverrides) -> Result<()> {
    let t = &mut cfg.trainer;
    if let Some(v) = o.lambda_sparse {
        t.lambda_sparse = v;
    }
    if let Some(v) = o.lambda_bimodal {
        t.lambda_bimodal = v;
    }
    let tau = o.tau.or(t.sampling_mode.tau()).unwrap_or(1.0);
    match o.sampling_mode {
        Some(ModeArg::Continuous) => t.sampling_mode = SamplingMode::Continuous,
        Some(ModeArg::BernoulliSt) => t.sampling_mode = SamplingMode::BernoulliSt,
        Some(ModeArg::Gumbel) => t.sampling_mode = SamplingMode::GumbelSoftmax { tau },
        None => {
            if let SamplingMode::GumbelSoftmax { tau: old } = &mut t.sampling_mode {
                *old = tau;
            } else if o.tau.is_some() {
                return Err(fail("usage", "--tau only applies to gumbel sampling"));
            }
        }
    }
    if o.no_loss_scaling {
        t.loss_scaling = false;
    }
    cfg.validate()
}

impl TrainerOverrides {
    pub fn to_args(&self) -> Vec<OsString> {
        let mut a: Vec<OsString> = Vec::new();
        let mut push = |k: &str, v: String| {
            a.push(k.into());
            a.push(v.into());
        };
        if let Some(v) = self.lambda_sparse {
            push("--lambda-sparse", v.to_string());
        }
        if let Some(v) = self.lambda_bimodal {
            push("--lambda-bimodal", v.to_string());
        }
        if let Some(m) = self.sampling_mode {
            let name = match m {
                ModeArg::Continuous => "continuous",
                ModeArg::BernoulliSt => "bernoulli-st",
                ModeArg::Gumbel => "gumbel",
            };
            push("--sampling-mode", name.into());
        }
        if let Some(v) = self.tau {
            push("--tau", v.to_string());
        }
        if self.no_loss_scaling {
            a.push("--no-loss-scaling".into());
        }
        a
    }
}

/// Runs `blockskip <args>` once per job, all at the same time, and waits for
/// every one of them.
pub fn fan_out(jobs: Vec<Vec<OsString>>) -> Result<Vec<Value>> {
    let exe = std::env::current_exe().context("locating the blockskip executable")?;
    let children = jobs
        .into_iter()
        .map(|args| {
            Command::new(&exe)
                .args(&args)
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .with_context(|| format!("spawning {}", exe.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    for child in children {
        let out = child.wait_with_output()?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let last = stderr.lines().last().unwrap_or_default();
            let msg = serde_json::from_str::<Value>(last)
                .ok()
                .and_then(|v| v["error"]["message"].as_str().map(String::from))
                .unwrap_or_else(|| last.to_string());
            return Err(fail("subprocess", format!("worker failed: {msg}")));
        }
        results.push(serde_json::from_slice(&out.stdout).unwrap_or(Value::Null));
    }
    Ok(results)
}

pub fn train_mask(args: &MaskArgs) -> Result<Value> {
    let mut cfg = RunConfig::load(&args.common.config)?;
    apply_overrides(&mut cfg, &args.overrides)?;
    let model_dir = args.model.clone().unwrap_or_else(|| cfg.teacher_dir());

    if !args.sweep_lambda_sparse.is_empty() {
        let jobs = args
            .sweep_lambda_sparse
            .iter()
            .map(|&l| {
                let mut a: Vec<OsString> = vec!["train-mask".into(), "--config".into(), args.common.config.clone().into()];
                a.extend(["--model".into(), model_dir.clone().into()]);
                a.extend(["--out".into(), cfg.output_dir.join(format!("mask_ls{l}.json")).into()]);
                a.extend(TrainerOverrides {
                    lambda_sparse: Some(l),
                    ..args.overrides.clone()
                }
                .to_args());
                if args.common.force {
                    a.push("--force".into());
                }
                if args.common.resume {
                    a.push("--resume".into());
                }
                a
            })
            .collect();
        return Ok(json!({ "sweep": fan_out(jobs)? }));
    }

    let path = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("mask.json"));
    let prov = provenance(&cfg);
    if !should_write(&path, policy(args.common.force, args.common.resume), &prov.config_hash)? {
        return Ok(json!({ "mask": path, "reused": true }));
    }
    let model = load_model(&model_dir, &cfg)?;
    let schedule = NoiseSchedule::new(cfg.schedule.clone())?;
    let mut out = trainer::train_mask(&model, &schedule, &cfg.trainer)?;
    out.mask.metadata.config_hash = Some(prov.config_hash.clone());
    artifacts::write(&path, out.mask.to_json()? + "\n")?;
    let trace = sibling(&path, "trace.csv");
    let weights = sibling(&path, "weights.csv");
    artifacts::write(&trace, prov.csv(&trainer::trace_csv(&out.trace)))?;
    artifacts::write(&weights, prov.csv(&out.weights.to_csv()))?;
    let (macs, speedup) = mask_cost(&out.mask, &block_macs(model.spec()))?;
    Ok(json!({
        "mask": path,
        "trace": trace,
        "weights": weights,
        "lambda_sparse": cfg.trainer.lambda_sparse,
        "masked_macs": macs,
        "speedup_macs": speedup,
        "zeros": out.mask.zeros(),
    }))
}

#[derive(Serialize)]
struct RectifyReportFile {
    config_hash: Option<String>,
    seed: Option<u64>,
    #[serde(flatten)]
    report: RectificationReport,
    max_deviation: Option<f32>,
    speedup_before: Option<f64>,
    speedup_after: Option<f64>,
}

pub fn rectify(args: &RectifyArgs) -> Result<Value> {
    let mask = MaskMatrix::load(&args.mask).with_context(|| format!("loading mask {}", args.mask.display()))?;
    let out = args.out.clone().unwrap_or_else(|| sibling(&args.mask, "rectified.json"));
    let report_path = sibling(&out, "report.json");
    let hash = mask.metadata.config_hash.clone().unwrap_or_default();
    if !should_write(&out, policy(args.force, args.resume), &hash)? {
        return Ok(json!({ "mask": out, "reused": true }));
    }
    let (rectified, mut report) = rectify_mask(&mask)?;
    let mut speedups = (None, None);
    if let Some(config) = &args.config {
        let cfg = RunConfig::load(config)?;
        let cost = block_macs(&cfg.model_spec()?);
        speedups = (Some(mask_cost(&mask, &cost)?.1), Some(mask_cost(&rectified, &cost)?.1));
        if args.verify {
            let model = load_model(&args.model.clone().unwrap_or_else(|| cfg.teacher_dir()), &cfg)?;
            let schedule = NoiseSchedule::new(cfg.schedule.clone())?;
            let seeds: Vec<u64> = (0..args.seeds as u64).collect();
            report.deviations = verify_equivalence(&model, &schedule, &mask, &rectified, cfg.sampler, &seeds)?;
            report.seeds = seeds;
        }
    }
    let max_deviation = report.max_deviation();
    artifacts::write(&out, rectified.to_json()? + "\n")?;
    let flipped = report.flipped.len();
    artifacts::write_json(
        &report_path,
        &RectifyReportFile {
            config_hash: mask.metadata.config_hash.clone(),
            seed: mask.metadata.seed,
            report,
            max_deviation,
            speedup_before: speedups.0,
            speedup_after: speedups.1,
        },
    )?;
    if let Some(d) = max_deviation.filter(|&d| !(d <= VERIFY_TOLERANCE)) {
        return Err(fail(
            "verification",
            format!("rectified sampling deviates by {d:e} (tolerance {VERIFY_TOLERANCE:e}); see {}", report_path.display()),
        ));
    }
    Ok(json!({
        "mask": out,
        "report": report_path,
        "flipped": flipped,
        "max_deviation": max_deviation,
        "speedup_before": speedups.0,
        "speedup_after": speedups.1,
    }))
}

fn load_mask_or_ones(path: Option<&Path>, steps: usize, blocks: usize) -> Result<MaskMatrix> {
    let m = match path {
        Some(p) => MaskMatrix::load(p).with_context(|| format!("loading mask {}", p.display()))?,
        None => MaskMatrix::all_ones(steps, blocks),
    };
    if m.steps() != steps || m.blocks() != blocks {
        return Err(fail(
            "model_mismatch",
            format!("mask is {}x{}, expected {steps}x{blocks}", m.steps(), m.blocks()),
        ));
    }
    Ok(m)
}

pub fn sample(args: &SampleArgs) -> Result<Value> {
    let cfg = RunConfig::load(&args.common.config)?;
    let spec = cfg.model_spec()?;
    let image_side = match spec.layout {
        blockskip_core::diffusion::DataLayout::Image { side, .. } => Some(side),
        _ => None,
    };
    let out = args.out.clone().unwrap_or_else(|| {
        let ext = if image_side.is_some() { "f32" } else { "csv" };
        cfg.output_dir.join(format!("samples.{ext}"))
    });
    let prov = provenance(&cfg);
    if !should_write(&out, policy(args.common.force, args.common.resume), &prov.config_hash)? {
        return Ok(json!({ "samples": out, "reused": true }));
    }
    let model = load_model(&args.model.clone().unwrap_or_else(|| cfg.teacher_dir()), &cfg)?;
    let schedule = NoiseSchedule::new(cfg.schedule.clone())?;
    let mask = load_mask_or_ones(args.mask.as_deref(), schedule.steps(), model.num_blocks())?;
    let count = args.count.unwrap_or(cfg.evaluation.samples);
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + count as u64).collect();
    let (x, _, stats) = run_masked_chain(&model, &schedule, &mask, cfg.sampler, &seeds)?;
    let header = SampleHeader {
        config_hash: prov.config_hash.clone(),
        seed: cfg.seed,
        sampler: format!("{:?}", cfg.sampler).to_lowercase(),
        first_seed: args.first_seed,
        count,
        dim: spec.layout.data_dim(),
        side: image_side,
        mask_sha256: args.mask.as_deref().map(artifacts::sha256_file).transpose()?,
    };
    artifacts::write_samples(&out, &header, &x)?;
    let stats_path = sibling(&out, "stats.csv");
    let counts_path = sibling(&out, "counts.csv");
    artifacts::write(&stats_path, prov.csv(&stats.to_csv()))?;
    let mut counts = String::from("b,computed_steps\n");
    for (b, c) in stats.compute_counts().iter().enumerate() {
        counts.push_str(&format!("{b},{c}\n"));
    }
    artifacts::write(&counts_path, prov.csv(&counts))?;
    Ok(json!({
        "samples": out,
        "stats": stats_path,
        "counts": counts_path,
        "total_macs": stats.total_macs(),
    }))
}

/// The summary file: the evaluation summary plus provenance.
#[derive(Serialize)]
pub struct SummaryFile {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub summary: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingSummary>,
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| fail("usage", format!("{flag} is required")))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<Value> {
    let cfg = RunConfig::load(&args.common.config)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("summary.json"));
    let prov = provenance(&cfg);
    if !should_write(&out, policy(args.common.force, args.common.resume), &prov.config_hash)? {
        return Ok(json!({ "summary": out, "reused": true }));
    }
    let load = |p: &Path| -> Result<Tensor> { Ok(read_samples(p)?.1) };
    let reference = load(require(&args.reference, "--reference")?)?;
    let baseline = load(require(&args.baseline, "--baseline")?)?;
    let masked = load(require(&args.masked, "--masked")?)?;
    let spec = cfg.model_spec()?;
    let mask = load_mask_or_ones(args.mask.as_deref(), cfg.schedule.steps, spec.num_blocks())?;
    let timing = if args.timing_reps > 0 {
        let model = load_model(&args.model.clone().unwrap_or_else(|| cfg.teacher_dir()), &cfg)?;
        let schedule = NoiseSchedule::new(cfg.schedule.clone())?;
        let seeds: Vec<u64> = (0..cfg.evaluation.timing_seeds as u64).collect();
        Some(wall_clock(&model, &schedule, &mask, cfg.sampler, &seeds, args.timing_reps)?)
    } else {
        None
    };
    let summary = Summary::compute(&baseline, &reference, &masked, &mask, &block_macs(&spec), timing.as_ref())?;
    let file = SummaryFile {
        config_hash: prov.config_hash,
        seed: cfg.seed,
        summary,
        timing,
    };
    artifacts::write_json(&out, &file)?;
    let mut v = serde_json::to_value(&file)?;
    v["summary"] = json!(out);
    Ok(v)
}

pub fn report(args: &ReportArgs) -> Result<Value> {
    let cfg = RunConfig::load(&args.common.config)?;
    let dir = args.out_dir.clone().unwrap_or_else(|| cfg.output_dir.join("report"));
    let prov = provenance(&cfg);
    let heatmap = dir.join("heatmap.csv");
    if !should_write(&heatmap, policy(args.common.force, args.common.resume), &prov.config_hash)? {
        return Ok(json!({ "report": dir, "reused": true }));
    }
    let model = load_model(&args.model.clone().unwrap_or_else(|| cfg.teacher_dir()), &cfg)?;
    let schedule = NoiseSchedule::new(cfg.schedule.clone())?;
    let mask = load_mask_or_ones(Some(&args.mask), schedule.steps(), model.num_blocks())?;
    let seeds: Vec<u64> = (0..cfg.evaluation.report_seeds as u64).collect();
    let (_, masked, stats) = run_masked_chain(&model, &schedule, &mask, cfg.sampler, &seeds)?;
    let (_, original) = sample_chain(&model, &schedule, cfg.sampler, &seeds)?;
    let rep = mask_report(&mask, &stats)?;
    let distortion = feature_distortion(&masked.end_features, &original.end_features)?;
    let files = [
        (heatmap, rep.heatmap_csv()),
        (dir.join("histogram.csv"), rep.histogram_csv()),
        (dir.join("sparsity.csv"), rep.sparsity_csv()),
        (dir.join("distortion.csv"), blockskip_core::metrics::distortion_csv(&distortion)),
        (dir.join("stats.csv"), stats.to_csv()),
    ];
    for (p, body) in &files {
        artifacts::write(p, prov.csv(body))?;
    }
    Ok(json!({
        "report": dir,
        "files": files.iter().map(|(p, _)| p).collect::<Vec<_>>(),
        "near_binary_fraction": rep.near_binary_fraction,
    }))
}

