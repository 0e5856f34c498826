//! Mask training against the frozen teacher.
//!
//! Sampling runs from t = T−1 down to 0 on a small batch of training seeds.
//! At each timestep only the score row `s[t, ·]` is optimised: the student
//! state and the feature cache come from earlier timesteps as constants, so
//! the autodiff graph never spans more than one step. The loss is
//!
//! ```text
//! L_t = ‖x_end − x_ori_end‖ / √n  +  λ₁·w(t)·Σ_b s  +  λ₂·w(t)·Σ_b s(1−s)
//! ```
//!
//! where `n` is the batch size and `w(t)` grows where the teacher's end
//! feature changes little between neighbouring steps (cheap to cache).

use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::{advance, sample, BlockChainModel, ChainNoise, NoiseSchedule, SamplerKind, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::executor::{masked_graph, FeatureCache, Gate};
use crate::mask::{MaskMatrix, MaskMetadata};
use crate::optim::Adam;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// How the score row turns into block gates during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingMode {
    /// Blend with the score itself.
    #[default]
    Continuous,
    /// Sample a hard gate from Bernoulli(s); the gradient passes straight through to s.
    BernoulliSt,
    /// Two-class Gumbel-softmax (binary concrete) relaxation at temperature `tau`.
    GumbelSoftmax { tau: f64 },
}

impl SamplingMode {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingMode::Continuous => "continuous",
            SamplingMode::BernoulliSt => "bernoulli_st",
            SamplingMode::GumbelSoftmax { .. } => "gumbel_softmax",
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            SamplingMode::GumbelSoftmax { tau } => Some(tau),
            _ => None,
        }
    }
}

/// Where the teacher's reference end feature comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInput {
    /// The unmasked model evaluated on the student's current state.
    #[default]
    StudentState,
    /// The end features of a separate unmasked chain from the same seeds.
    IndependentTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// λ₁, weight of the sparsity term.
    pub lambda_sparse: f64,
    /// λ₂, weight of the bi-modal term.
    pub lambda_bimodal: f64,
    pub learning_rate: f64,
    /// Gradient steps per timestep.
    pub iterations: usize,
    /// Number of noise seeds per timestep batch.
    pub batch_size: usize,
    pub sampling_mode: SamplingMode,
    /// Binarisation threshold: m = 1 where s > threshold.
    pub threshold: f64,
    pub seed: u64,
    pub teacher_input: TeacherInput,
    /// Scale the regularisers by the timestep weight w(t); off means w ≡ 1.
    pub loss_scaling: bool,
    pub sampler: SamplerKind,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lambda_sparse: 0.3,
            lambda_bimodal: 0.1,
            learning_rate: 0.05,
            iterations: 50,
            batch_size: 8,
            sampling_mode: SamplingMode::Continuous,
            threshold: 0.5,
            seed: 0,
            teacher_input: TeacherInput::StudentState,
            loss_scaling: true,
            sampler: SamplerKind::Ddim,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sparse >= 0.0 && self.lambda_bimodal >= 0.0) {
            return Err(Error::invalid("lambda_sparse and lambda_bimodal must be non-negative"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if let Some(tau) = self.sampling_mode.tau() {
            if !(tau > 0.0) {
                return Err(Error::invalid(format!("gumbel temperature must be positive, got {tau}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// One logged optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub t: usize,
    pub iteration: usize,
    pub feature: f64,
    pub sparse: f64,
    pub bimodal: f64,
    pub w: f64,
    pub total: f64,
}

/// `feature + λ₁·w·sparse + λ₂·w·bimodal`.
pub fn total_loss(feature: f64, sparse: f64, bimodal: f64, lambda_sparse: f64, lambda_bimodal: f64, w: f64) -> LossBreakdown {
    LossBreakdown {
        t: 0,
        iteration: 0,
        feature,
        sparse,
        bimodal,
        w,
        total: feature + lambda_sparse * w * sparse + lambda_bimodal * w * bimodal,
    }
}

/// ‖x_end − x_ori_end‖₂ over all elements.
pub fn feature_loss(x_end: &Tensor, x_ori_end: &Tensor) -> Result<f64> {
    x_end.check_same_shape(x_ori_end, "feature_loss")?;
    Ok(x_end
        .data()
        .iter()
        .zip(x_ori_end.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Σ_b |s_b|.
pub fn sparse_loss(s_row: &[f32]) -> f64 {
    s_row.iter().map(|&s| f64::from(s).abs()).sum()
}

/// Σ_b s_b(1 − s_b).
pub fn bimodal_loss(s_row: &[f32]) -> f64 {
    s_row.iter().map(|&s| f64::from(s) * (1.0 - f64::from(s))).sum()
}

/// Relative change of the end feature into each timestep, indexed by t:
/// `δ[t] = ‖e_t − e_{t−1}‖ / ‖e_t‖`. The last sampling step, t = 0, has no
/// successor and gets `None`.
pub fn compute_delta(trajectory: &TrajectoryRecord) -> Result<Vec<Option<f64>>> {
    let e = &trajectory.end_features;
    if e.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 steps, got {}", e.len())));
    }
    let mut out = vec![None];
    for t in 1..e.len() {
        let norm = e[t].norm();
        if norm == 0.0 {
            return Err(Error::invalid(format!("end feature at t={t} has zero norm")));
        }
        out.push(Some(feature_loss(&e[t], &e[t - 1])? / norm));
    }
    Ok(out)
}

/// w for a given δ[t]/max(δ).
pub fn weight_for_ratio(ratio: f64) -> f64 {
    if ratio < 0.1 {
        2.0
    } else if ratio < 0.5 {
        1.5
    } else {
        1.0
    }
}

/// Per-timestep δ and the loss weight derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepWeights {
    pub delta: Vec<Option<f64>>,
    pub w: Vec<f64>,
}

impl TimestepWeights {
    pub fn from_delta(delta: Vec<Option<f64>>) -> Self {
        let max = delta.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let w = if max > 0.0 {
            delta.iter().map(|d| d.map_or(1.0, |d| weight_for_ratio(d / max))).collect()
        } else {
            warn!("all feature variations are zero; using unit timestep weights");
            vec![1.0; delta.len()]
        };
        TimestepWeights { delta, w }
    }

    pub fn uniform(steps: usize) -> Self {
        TimestepWeights {
            delta: vec![None; steps],
            w: vec![1.0; steps],
        }
    }

    /// `t,delta,w`; an undefined δ is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,delta,w\n");
        for (t, (d, w)) in self.delta.iter().zip(&self.w).enumerate() {
            let d = d.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{t},{d},{w}");
        }
        out
    }
}

/// Weight w(t) of one timestep.
pub fn piecewise_weight(delta: &[Option<f64>], t: usize) -> f64 {
    TimestepWeights::from_delta(delta.to_vec()).w[t]
}

/// Unmasked reference chain over the training seeds.
pub fn teacher_trajectory(model: &BlockChainModel, schedule: &NoiseSchedule, mode: SamplerKind, seeds: &[u64]) -> Result<TrajectoryRecord> {
    Ok(sample(model, schedule, mode, seeds)?.1)
}

/// m = 1 where s > threshold; the first sampling step (row T−1) is always 1.
pub fn binarize(scores: &[f32], steps: usize, blocks: usize, threshold: f64) -> Vec<u8> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| u8::from(i / blocks == steps - 1 || f64::from(s) > threshold))
        .collect()
}

/// Inputs of one timestep's optimisation problem.
#[derive(Clone, Debug)]
pub struct TimestepProblem<'a> {
    pub t: usize,
    pub x_t: &'a Tensor,
    pub cache: &'a FeatureCache,
    /// Teacher end feature, token layout.
    pub x_ori_end: &'a Tensor,
    pub w: f64,
}

struct LossGraph {
    g: Graph,
    s: Var,
    total: Var,
    feature: Var,
    sparse: Var,
    bimodal: Var,
}

fn gates_for(g: &mut Graph, s: Var, blocks: usize, mode: SamplingMode, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<Gate>> {
    match (mode, rng) {
        (SamplingMode::Continuous, _) | (_, None) => (0..blocks).map(|b| Ok(Gate::Blend(g.index(s, b)?))).collect(),
        (SamplingMode::BernoulliSt, Some(rng)) => {
            let draws: Vec<f32> = g
                .value(s)
                .data()
                .iter()
                .map(|&p| if rng.gen::<f32>() < p { 1.0 } else { 0.0 })
                .collect();
            let hard = g.straight_through(s, Tensor::vector(draws))?;
            (0..blocks).map(|b| Ok(Gate::Blend(g.index(hard, b)?))).collect()
        }
        (SamplingMode::GumbelSoftmax { tau }, Some(rng)) => {
            let logistic: Vec<f32> = (0..blocks)
                .map(|_| {
                    let u: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
                    (u.ln() - (1.0 - u).ln()) as f32
                })
                .collect();
            let soft = gumbel_gate(g, s, Tensor::vector(logistic), tau)?;
            (0..blocks).map(|b| Ok(Gate::Blend(g.index(soft, b)?))).collect()
        }
    }
}

/// `σ((log s − log(1−s) + noise)/τ)` with s kept away from 0 and 1.
fn gumbel_gate(g: &mut Graph, s: Var, noise: Tensor, tau: f64) -> Result<Var> {
    let sc = g.clamp(s, 1e-6, 1.0 - 1e-6);
    let ls = g.log(sc);
    let rest = g.affine(sc, -1.0, 1.0);
    let lr = g.log(rest);
    let logit = g.sub(ls, lr)?;
    let n = g.constant(noise);
    let z = g.add(logit, n)?;
    let z = g.scale(z, (1.0 / tau) as f32);
    Ok(g.sigmoid(z))
}

fn build_loss(
    model: &BlockChainModel,
    p: &TimestepProblem<'_>,
    s_row: &[f32],
    config: &TrainerConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossGraph> {
    let blocks = model.num_blocks();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let s = g.param(Tensor::vector(s_row.to_vec()));
    let gates = gates_for(&mut g, s, blocks, config.sampling_mode, rng)?;
    let mg = masked_graph(&mut g, &bound, p.x_t, p.t, &gates, p.cache)?;
    let end = *mg.outputs.last().expect("at least one block");
    let n = p.x_t.dims2("train_mask")?.0;
    let ori = g.constant(p.x_ori_end.clone());
    let diff = g.sub(end, ori)?;
    let norm = g.l2_norm(diff)?;
    let feature = g.scale(norm, (1.0 / (n as f64).sqrt()) as f32);
    let sparse = g.sum(s)?;
    let rest = g.affine(s, -1.0, 1.0);
    let prod = g.mul(s, rest)?;
    let bimodal = g.sum(prod)?;
    let ws = g.scale(sparse, (config.lambda_sparse * p.w) as f32);
    let wb = g.scale(bimodal, (config.lambda_bimodal * p.w) as f32);
    let total = g.add(feature, ws)?;
    let total = g.add(total, wb)?;
    Ok(LossGraph {
        g,
        s,
        total,
        feature,
        sparse,
        bimodal,
    })
}

fn breakdown(lg: &LossGraph, t: usize, iteration: usize, w: f64) -> LossBreakdown {
    let v = |x: Var| f64::from(lg.g.value(x).data()[0]);
    LossBreakdown {
        t,
        iteration,
        feature: v(lg.feature),
        sparse: v(lg.sparse),
        bimodal: v(lg.bimodal),
        w,
        total: v(lg.total),
    }
}

/// Loss of one timestep under the continuous relaxation and its gradient with
/// respect to the score row.
pub fn timestep_loss_grad(
    model: &BlockChainModel,
    problem: &TimestepProblem<'_>,
    s_row: &[f32],
    config: &TrainerConfig,
) -> Result<(LossBreakdown, Vec<f32>)> {
    let cfg = TrainerConfig {
        sampling_mode: SamplingMode::Continuous,
        ..config.clone()
    };
    let lg = build_loss(model, problem, s_row, &cfg, None)?;
    let grads = lg.g.backward(lg.total)?;
    let grad = grads
        .get(lg.s)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; s_row.len()]);
    Ok((breakdown(&lg, problem.t, 0, problem.w), grad))
}

/// Runs the configured gradient steps on one score row, projecting onto
/// [0, 1] after each update. Returns the new row, the per-iteration losses and
/// the largest graph built.
pub fn optimize_timestep(
    model: &BlockChainModel,
    problem: &TimestepProblem<'_>,
    s_row: &[f32],
    config: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, Vec<LossBreakdown>, usize)> {
    let mut s = Tensor::vector(s_row.to_vec());
    let mut adam = Adam::new(config.learning_rate as f32);
    let mut trace = Vec::with_capacity(config.iterations);
    let mut peak = 0;
    for it in 0..config.iterations {
        let lg = build_loss(model, problem, s.data(), config, Some(rng))?;
        peak = peak.max(lg.g.len());
        let entry = breakdown(&lg, problem.t, it, problem.w);
        if !entry.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "mask loss at t={} iteration {it} with s = {:?}",
                problem.t,
                s.data()
            )));
        }
        trace.push(entry);
        let grads = lg.g.backward(lg.total)?;
        let zero = Tensor::zeros(s.shape());
        let grad = grads.get(lg.s).unwrap_or(&zero).clone();
        adam.step(&mut [&mut s], &[Some(&grad)]);
        for v in s.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok((s.into_data(), trace, peak))
}

/// Deterministic gates used to carry the student forward after a row is
/// trained: the score itself, its binarisation for the Bernoulli mode, and the
/// noise-free relaxation for Gumbel-softmax.
fn carry_gates(s_row: &[f32], config: &TrainerConfig) -> Vec<f32> {
    s_row
        .iter()
        .map(|&s| match config.sampling_mode {
            SamplingMode::Continuous => s,
            SamplingMode::BernoulliSt => f32::from(u8::from(f64::from(s) > config.threshold)),
            SamplingMode::GumbelSoftmax { tau } => {
                let s = f64::from(s).clamp(1e-6, 1.0 - 1e-6);
                crate::autodiff::sigmoid(((s.ln() - (1.0 - s).ln()) / tau) as f32)
            }
        })
        .collect()
}

/// Everything a training pass produces.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub mask: MaskMatrix,
    pub trace: Vec<LossBreakdown>,
    pub weights: TimestepWeights,
    /// Student states and end features, indexed by timestep.
    pub student: TrajectoryRecord,
    /// Largest autodiff graph built at each timestep (0 where nothing was trained).
    pub graph_nodes: Vec<usize>,
}

/// `t,iteration,feature,sparse,bimodal,total,w`.
pub fn trace_csv(trace: &[LossBreakdown]) -> String {
    let mut out = String::from("t,iteration,feature,sparse,bimodal,total,w\n");
    for l in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            l.t, l.iteration, l.feature, l.sparse, l.bimodal, l.total, l.w
        );
    }
    out
}

/// Training seeds drawn from the mask stream of `seed`.
pub fn training_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = stream_rng(seed, Stream::Mask);
    (0..n).map(|_| rng.gen()).collect()
}

/// Trains a mask from all-ones scores.
pub fn train_mask(model: &BlockChainModel, schedule: &NoiseSchedule, config: &TrainerConfig) -> Result<TrainOutput> {
    let init = vec![1.0; schedule.steps() * model.num_blocks()];
    train_mask_from(model, schedule, config, &init)
}

/// Trains a mask starting from the given row-major scores.
pub fn train_mask_from(
    model: &BlockChainModel,
    schedule: &NoiseSchedule,
    config: &TrainerConfig,
    init: &[f32],
) -> Result<TrainOutput> {
    config.validate()?;
    if !model.is_frozen() {
        return Err(Error::invalid("mask training needs a frozen teacher"));
    }
    let (steps, blocks) = (schedule.steps(), model.num_blocks());
    if init.len() != steps * blocks || init.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::invalid(format!(
            "initial scores must be {steps}x{blocks} values in [0, 1]"
        )));
    }
    let mut scores = init.to_vec();
    scores[(steps - 1) * blocks..].fill(1.0);

    let seeds = training_seeds(config.seed, config.batch_size);
    let mut rng = stream_rng(config.seed, Stream::Mask);
    for _ in 0..config.batch_size {
        let _: u64 = rng.gen();
    }
    let teacher = teacher_trajectory(model, schedule, config.sampler, &seeds)?;
    let weights = if config.loss_scaling {
        TimestepWeights::from_delta(compute_delta(&teacher)?)
    } else {
        TimestepWeights {
            delta: compute_delta(&teacher)?,
            w: vec![1.0; steps],
        }
    };

    let mut noise = ChainNoise::new(&seeds, model.spec().layout.data_dim());
    let mut x = noise.draw();
    let mut cache = FeatureCache::new(blocks);
    let mut student = TrajectoryRecord::with_capacity(steps, &seeds, schedule.spec().id());
    let mut trace = Vec::new();
    let mut graph_nodes = vec![0; steps];

    for t in (0..steps).rev() {
        let row = t * blocks..(t + 1) * blocks;
        if t + 1 < steps {
            let ori = match config.teacher_input {
                TeacherInput::StudentState => model.forward(&x, t)?.1.pop().expect("at least one block"),
                TeacherInput::IndependentTrajectory => teacher.end_features[t].clone(),
            };
            let problem = TimestepProblem {
                t,
                x_t: &x,
                cache: &cache,
                x_ori_end: &ori,
                w: weights.w[t],
            };
            let (s, tr, peak) = optimize_timestep(model, &problem, &scores[row.clone()], config, &mut rng)?;
            scores[row.clone()].copy_from_slice(&s);
            trace.extend(tr);
            graph_nodes[t] = peak;
        }

        let gates = if t + 1 == steps {
            vec![1.0; blocks]
        } else {
            carry_gates(&scores[row], config)
        };
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let gate_vars: Vec<Gate> = gates.iter().map(|&v| Gate::Blend(g.constant(Tensor::scalar(v)))).collect();
        let mg = masked_graph(&mut g, &bound, &x, t, &gate_vars, &cache)?;
        for (b, &v) in gates.iter().enumerate() {
            if v > 0.5 || t + 1 == steps {
                cache.set(b, g.value(mg.outputs[b]).clone());
            }
        }
        let eps = model.spec().layout.from_tokens(g.value(mg.eps))?;
        student.states.push(x.clone());
        student
            .end_features
            .push(g.value(*mg.outputs.last().expect("at least one block")).clone());
        let z = (config.sampler == SamplerKind::Ddpm && t > 0).then(|| noise.draw());
        x = advance(&x, &eps, t, schedule, config.sampler, z.as_ref())?;
    }

    let m = binarize(&scores, steps, blocks, config.threshold);
    let mut mask = MaskMatrix::from_parts(steps, blocks, scores, m)?;
    mask.block_ids = model
        .blocks()
        .iter()
        .enumerate()
        .map(|(b, k)| format!("block{b}:{}", k.kind().name()))
        .collect();
    mask.metadata = MaskMetadata {
        lambda_sparse: Some(config.lambda_sparse),
        lambda_bimodal: Some(config.lambda_bimodal),
        sampling_mode: Some(config.sampling_mode.name().to_string()),
        tau: config.sampling_mode.tau(),
        threshold: Some(config.threshold),
        loss_scaling: Some(config.loss_scaling),
        seed: Some(config.seed),
        schedule_id: Some(schedule.spec().id()),
        model_checksum: Some(model.checksum()),
        config_hash: None,
    };
    Ok(TrainOutput {
        mask,
        trace,
        weights,
        student: student.finish(),
        graph_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ModelSpec, ScheduleSpec};
    use crate::executor::run_masked_chain;
    use rand::SeedableRng;

    fn setup(blocks: usize, steps: usize) -> (BlockChainModel, NoiseSchedule) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = BlockChainModel::init(ModelSpec::points(2, 16, blocks), &mut rng).unwrap();
        m.freeze();
        (m, NoiseSchedule::new(ScheduleSpec::linear(steps, 1e-3, 0.2)).unwrap())
    }

    fn quick(iterations: usize) -> TrainerConfig {
        TrainerConfig {
            iterations,
            batch_size: 4,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn weight_table_and_boundaries() {
        assert_eq!(weight_for_ratio(0.05), 2.0);
        assert_eq!(weight_for_ratio(0.0999), 2.0);
        assert_eq!(weight_for_ratio(0.10), 1.5);
        assert_eq!(weight_for_ratio(0.4999), 1.5);
        assert_eq!(weight_for_ratio(0.50), 1.0);
        assert_eq!(weight_for_ratio(0.7), 1.0);
        let w = TimestepWeights::from_delta(vec![None, Some(1.0), Some(0.5), Some(0.1), Some(0.05)]);
        assert_eq!(w.w, vec![1.0, 1.0, 1.0, 1.5, 2.0]);
        assert_eq!(TimestepWeights::from_delta(vec![None, Some(0.0), Some(0.0)]).w, vec![1.0; 3]);
        assert_eq!(piecewise_weight(&[None, Some(1.0), Some(0.05)], 2), 2.0);
    }

    #[test]
    fn loss_terms_examples() {
        assert_eq!(sparse_loss(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(sparse_loss(&[0.5, 1.0, 0.0]), 1.5);
        assert_eq!(sparse_loss(&[1.0; 4]), 4.0);
        assert_eq!(bimodal_loss(&[0.0, 1.0]), 0.0);
        assert_eq!(bimodal_loss(&[0.5]), 0.25);
        assert!((bimodal_loss(&[0.2, 0.8]) - 0.32).abs() < 1e-7);
        let a = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(feature_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(feature_loss(&Tensor::vector(vec![4.0, 5.0]), &a).unwrap(), 5.0);
        assert!(feature_loss(&a, &Tensor::vector(vec![1.0])).is_err());
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.1, 0.2, 2.0).total, 0.0);
        assert!((total_loss(1.0, 2.0, 0.5, 0.1, 0.2, 2.0).total - 1.6).abs() < 1e-12);
    }

    #[test]
    fn delta_examples() {
        let v = Tensor::vector(vec![1.0, 2.0, 2.0]);
        let v2 = v.map(|x| 2.0 * x);
        let rec = |e: Vec<Tensor>| TrajectoryRecord {
            states: vec![],
            end_features: e,
            seeds: vec![],
            schedule_id: String::new(),
        };
        // δ[t] compares t with its successor t − 1.
        let d = compute_delta(&rec(vec![v2.clone(), v.clone(), v.clone()])).unwrap();
        assert_eq!(d, vec![None, Some(1.0), Some(0.0)]);
        assert!(compute_delta(&rec(vec![v.clone()])).is_err());
        assert!(compute_delta(&rec(vec![v, Tensor::zeros(&[3])])).is_err());
    }

    #[test]
    fn binarize_is_strict_and_pins_first_step() {
        assert_eq!(binarize(&[0.51, 0.5, 0.2, 0.1], 2, 2, 0.5), vec![1, 0, 1, 1]);
        assert_eq!(binarize(&[0.9; 6], 3, 2, 0.5), vec![1; 6]);
    }

    #[test]
    fn zero_iterations_keep_all_ones() {
        let (m, s) = setup(3, 6);
        let out = train_mask(&m, &s, &quick(0)).unwrap();
        assert!(out.mask.scores().iter().all(|&v| v == 1.0));
        assert!(out.mask.decisions().iter().all(|&v| v == 1));
        assert!(out.trace.is_empty());
    }

    #[test]
    fn no_regularisation_is_stationary_at_ones() {
        let (m, s) = setup(3, 6);
        let cfg = TrainerConfig {
            lambda_sparse: 0.0,
            lambda_bimodal: 0.0,
            ..quick(5)
        };
        let out = train_mask(&m, &s, &cfg).unwrap();
        assert!(out.mask.scores().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn block_equal_to_cache_is_driven_to_zero() {
        // With the same input at two consecutive calls, f_b equals the cache,
        // so the feature term is flat in s and only sparsity acts.
        let (m, _) = setup(1, 4);
        let x = Tensor::matrix(2, 2, vec![0.3, -0.2, 1.0, 0.5]).unwrap();
        let mut cache = FeatureCache::new(1);
        let (_, feats) = m.forward(&x, 2).unwrap();
        cache.set(0, feats[0].clone());
        let problem = TimestepProblem {
            t: 2,
            x_t: &x,
            cache: &cache,
            x_ori_end: &feats[0],
            w: 1.0,
        };
        let cfg = TrainerConfig {
            lambda_sparse: 0.1,
            lambda_bimodal: 0.0,
            ..quick(60)
        };
        let (_, grad) = timestep_loss_grad(&m, &problem, &[0.6], &cfg).unwrap();
        assert!((grad[0] - 0.1).abs() < 1e-6, "{grad:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, trace, _) = optimize_timestep(&m, &problem, &[1.0], &cfg, &mut rng).unwrap();
        assert_eq!(s, vec![0.0]);
        assert!(trace.iter().all(|l| l.feature.abs() < 1e-6));
    }

    #[test]
    fn loss_trace_satisfies_composition_identity() {
        let (m, s) = setup(4, 8);
        let cfg = quick(10);
        let out = train_mask(&m, &s, &cfg).unwrap();
        assert_eq!(out.trace.len(), 7 * 10);
        for l in &out.trace {
            let want = l.feature + cfg.lambda_sparse * l.w * l.sparse + cfg.lambda_bimodal * l.w * l.bimodal;
            assert!((l.total - want).abs() <= 1e-6, "{l:?}");
        }
        assert!(out.mask.scores().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.mask.row(7), &[1, 1, 1, 1]);
    }

    #[test]
    fn teacher_is_untouched_and_training_deterministic() {
        let (m, s) = setup(3, 6);
        let before = m.checksum();
        let a = train_mask(&m, &s, &quick(5)).unwrap();
        let b = train_mask(&m, &s, &quick(5)).unwrap();
        assert_eq!(m.checksum(), before);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.mask.metadata.model_checksum.as_deref(), Some(before.as_str()));
    }

    #[test]
    fn graph_size_does_not_grow_with_progress() {
        let (m, s) = setup(3, 10);
        let out = train_mask(&m, &s, &quick(3)).unwrap();
        let trained: Vec<usize> = out.graph_nodes[..9].to_vec();
        assert!(trained.iter().all(|&n| n == trained[0] && n > 0), "{trained:?}");
        assert_eq!(out.graph_nodes[9], 0);
    }

    #[test]
    fn frozen_binary_scores_reproduce_masked_chain() {
        let (m, s) = setup(3, 6);
        #[rustfmt::skip]
        let bits: Vec<u8> = vec![
            1, 0, 1,
            0, 1, 0,
            1, 1, 0,
            0, 0, 1,
            1, 0, 0,
            1, 1, 1,
        ];
        let init: Vec<f32> = bits.iter().map(|&b| f32::from(b)).collect();
        let out = train_mask_from(&m, &s, &quick(0), &init).unwrap();
        let mask = MaskMatrix::from_binary(6, 3, bits).unwrap();
        let seeds = training_seeds(0, 4);
        let (_, rec, _) = run_masked_chain(&m, &s, &mask, SamplerKind::Ddim, &seeds).unwrap();
        assert_eq!(out.student, rec);
    }

    #[test]
    fn later_rows_do_not_affect_earlier_losses() {
        let (m, s) = setup(3, 6);
        let cfg = quick(4);
        let base = train_mask(&m, &s, &cfg).unwrap();
        // Changing the starting scores of row 1 only touches rows t ≤ 1.
        let mut init = vec![1.0f32; 18];
        init[3] = 0.3;
        let other = train_mask_from(&m, &s, &cfg, &init).unwrap();
        for (a, b) in base.trace.iter().zip(&other.trace) {
            if a.t > 1 {
                assert_eq!(a, b);
            }
        }
        assert_ne!(base.trace.iter().filter(|l| l.t == 1).collect::<Vec<_>>(), other.trace.iter().filter(|l| l.t == 1).collect::<Vec<_>>());
    }

    #[test]
    fn all_sampling_modes_run() {
        let (m, s) = setup(3, 6);
        for mode in [
            SamplingMode::BernoulliSt,
            SamplingMode::GumbelSoftmax { tau: 0.5 },
            SamplingMode::GumbelSoftmax { tau: 1.0 },
        ] {
            let cfg = TrainerConfig {
                sampling_mode: mode,
                ..quick(5)
            };
            let out = train_mask(&m, &s, &cfg).unwrap();
            assert_eq!(out.mask.metadata.sampling_mode.as_deref(), Some(mode.name()));
            assert!(out.mask.validate().is_ok());
        }
        let bad = TrainerConfig {
            sampling_mode: SamplingMode::GumbelSoftmax { tau: 0.0 },
            ..quick(1)
        };
        assert!(train_mask(&m, &s, &bad).is_err());
    }

    #[test]
    fn unfrozen_model_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = BlockChainModel::init(ModelSpec::points(2, 8, 2), &mut rng).unwrap();
        let s = NoiseSchedule::new(ScheduleSpec::linear(4, 1e-3, 0.2)).unwrap();
        assert!(train_mask(&m, &s, &quick(1)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (m, _) = setup(4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::matrix(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x1 = Tensor::matrix(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut cache = FeatureCache::new(4);
        let (_, feats) = m.forward(&x0, 6).unwrap();
        for (b, f) in feats.into_iter().enumerate() {
            cache.set(b, f);
        }
        let ori = m.forward(&x1, 5).unwrap().1.pop().unwrap();
        let problem = TimestepProblem {
            t: 5,
            x_t: &x1,
            cache: &cache,
            x_ori_end: &ori,
            w: 1.5,
        };
        let cfg = TrainerConfig::default();
        let s_row = [0.3f32, 0.7, 0.55, 0.2];
        let (_, grad) = timestep_loss_grad(&m, &problem, &s_row, &cfg).unwrap();
        let h = 1e-2f32;
        for b in 0..4 {
            let mut p = s_row;
            let mut q = s_row;
            p[b] += h;
            q[b] -= h;
            let lp = timestep_loss_grad(&m, &problem, &p, &cfg).unwrap().0.total;
            let lq = timestep_loss_grad(&m, &problem, &q, &cfg).unwrap().0.total;
            let fd = (lp - lq) / (2.0 * f64::from(h));
            assert!((fd - f64::from(grad[b])).abs() <= 2e-3 * fd.abs().max(0.1), "b={b} fd={fd} ad={}", grad[b]);
        }
    }
}
