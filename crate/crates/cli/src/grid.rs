//! Ablation grids: train one mask per variant, each in its own process, then
//! sample and score every variant against shared unmasked sets.

use std::ffi::OsString;
use std::fmt::Write as _;

use anyhow::Result;
use blockskip_core::diffusion::{sample, NoiseSchedule};
use blockskip_core::executor::run_masked_chain;
use blockskip_core::metrics::{block_macs, Summary};
use blockskip_core::rectify::rectify;
use blockskip_core::MaskMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::artifacts::{self, should_write};
use crate::commands::{fan_out, load_model, policy, provenance};
use crate::config::RunConfig;
use crate::{EvaluateArgs, GridArg, ModeArg, TrainerOverrides};

#[derive(Clone, Debug)]
struct Variant {
    name: String,
    mode: ModeArg,
    rectify: bool,
    loss_scaling: bool,
    bimodal: bool,
}

impl Variant {
    /// Variants differing only in `rectify` share a trained mask.
    fn training_key(&self) -> String {
        format!(
            "{}{}{}",
            mode_name(self.mode),
            if self.loss_scaling { "" } else { "-no-loss-scaling" },
            if self.bimodal { "" } else { "-no-bimodal" }
        )
    }
}

fn mode_name(m: ModeArg) -> &'static str {
    match m {
        ModeArg::Continuous => "continuous",
        ModeArg::BernoulliSt => "bernoulli_st",
        ModeArg::Gumbel => "gumbel",
    }
}

fn variants(grid: GridArg) -> Vec<(&'static str, Vec<Variant>)> {
    let v = |name: &str, mode, rectify, loss_scaling, bimodal| Variant {
        name: name.to_string(),
        mode,
        rectify,
        loss_scaling,
        bimodal,
    };
    let sampling = || {
        let mut out = Vec::new();
        for mode in [ModeArg::Continuous, ModeArg::BernoulliSt, ModeArg::Gumbel] {
            out.push(v(mode_name(mode), mode, false, true, true));
            out.push(v(&format!("{}+rectify", mode_name(mode)), mode, true, true, true));
        }
        out
    };
    let toggles = || {
        vec![
            v("full w/o rectify", ModeArg::Continuous, false, true, true),
            v("full", ModeArg::Continuous, true, true, true),
            v("w/o loss scaling", ModeArg::Continuous, true, false, true),
            v("w/o bi-modal", ModeArg::Continuous, true, true, false),
        ]
    };
    match grid {
        GridArg::SamplingMode => vec![("sampling_mode", sampling())],
        GridArg::Toggles => vec![("toggles", toggles())],
        GridArg::All => vec![("sampling_mode", sampling()), ("toggles", toggles())],
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub method: String,
    pub sampling_mode: String,
    pub rectified: bool,
    pub loss_scaling: bool,
    pub bimodal: bool,
    pub flipped: usize,
    pub masked_macs: u64,
    pub speedup_macs: f64,
    pub mmd: f64,
    pub mmd_noise_floor: f64,
    pub near_binary_fraction: f64,
}

const COLUMNS: &str = "method,sampling_mode,rectified,loss_scaling,bimodal,flipped,masked_macs,speedup_macs,mmd,mmd_noise_floor,near_binary_fraction";

fn csv(rows: &[Row]) -> String {
    let mut out = format!("{COLUMNS}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.sampling_mode,
            r.rectified,
            r.loss_scaling,
            r.bimodal,
            r.flipped,
            r.masked_macs,
            r.speedup_macs,
            r.mmd,
            r.mmd_noise_floor,
            r.near_binary_fraction
        );
    }
    out
}

fn markdown(rows: &[Row]) -> String {
    let mut out = String::from("| Method | Speedup (MACs) | MMD | MMD noise floor | Near-binary |\n|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.2}x | {:.3e} | {:.3e} | {:.3} |",
            r.method, r.speedup_macs, r.mmd, r.mmd_noise_floor, r.near_binary_fraction
        );
    }
    out
}

pub fn run(args: &EvaluateArgs, grid: GridArg) -> Result<Value> {
    let cfg = RunConfig::load(&args.common.config)?;
    let prov = provenance(&cfg);
    let dir = cfg.output_dir.join("grid");
    let tables = variants(grid);
    let pol = policy(args.common.force, args.common.resume);
    for (name, _) in &tables {
        if !should_write(&dir.join(format!("{name}.csv")), pol, &prov.config_hash)? {
            return Ok(json!({ "grid": dir, "reused": true }));
        }
    }
    let model_dir = args.model.clone().unwrap_or_else(|| cfg.teacher_dir());

    let mut keys: Vec<(String, Variant)> = Vec::new();
    for v in tables.iter().flat_map(|(_, vs)| vs) {
        if !keys.iter().any(|(k, _)| *k == v.training_key()) {
            keys.push((v.training_key(), v.clone()));
        }
    }
    let mask_path = |key: &str| dir.join(key).join("mask.json");
    let jobs = keys
        .iter()
        .map(|(key, v)| {
            let mut a: Vec<OsString> = vec!["train-mask".into(), "--config".into(), args.common.config.clone().into()];
            a.extend(["--model".into(), model_dir.clone().into()]);
            a.extend(["--out".into(), mask_path(key).into()]);
            a.extend(
                TrainerOverrides {
                    sampling_mode: Some(v.mode),
                    lambda_bimodal: (!v.bimodal).then_some(0.0),
                    no_loss_scaling: !v.loss_scaling,
                    ..Default::default()
                }
                .to_args(),
            );
            a.push("--force".into());
            a
        })
        .collect();
    fan_out(jobs)?;

    let model = load_model(&model_dir, &cfg)?;
    let schedule = NoiseSchedule::new(cfg.schedule.clone())?;
    let n = cfg.evaluation.samples as u64;
    let baseline_seeds: Vec<u64> = (0..n).collect();
    let reference_seeds: Vec<u64> = (n..2 * n).collect();
    let (baseline, _) = sample(&model, &schedule, cfg.sampler, &baseline_seeds)?;
    let (reference, _) = sample(&model, &schedule, cfg.sampler, &reference_seeds)?;
    let cost = block_macs(model.spec());

    let mut result = serde_json::Map::new();
    for (name, vs) in &tables {
        let mut rows = Vec::new();
        for v in vs {
            let trained = MaskMatrix::load(&mask_path(&v.training_key()))?;
            let (mask, flipped) = if v.rectify {
                let (r, rep) = rectify(&trained)?;
                (r, rep.flipped.len())
            } else {
                (trained, 0)
            };
            let (masked, _, _) = run_masked_chain(&model, &schedule, &mask, cfg.sampler, &baseline_seeds)?;
            let s = Summary::compute(&baseline, &reference, &masked, &mask, &cost, None)?;
            rows.push(Row {
                method: v.name.clone(),
                sampling_mode: mode_name(v.mode).to_string(),
                rectified: v.rectify,
                loss_scaling: v.loss_scaling,
                bimodal: v.bimodal,
                flipped,
                masked_macs: s.masked_macs,
                speedup_macs: s.speedup_macs,
                mmd: s.mmd,
                mmd_noise_floor: s.mmd_noise_floor,
                near_binary_fraction: s.near_binary_fraction,
            });
        }
        artifacts::write(&dir.join(format!("{name}.csv")), prov.csv(&csv(&rows)))?;
        artifacts::write(&dir.join(format!("{name}.md")), markdown(&rows))?;
        result.insert((*name).to_string(), serde_json::to_value(&rows)?);
    }
    Ok(json!({ "grid": dir, "tables": result }))
}
