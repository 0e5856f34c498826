//! ε-prediction training of the block-chain denoiser.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{BlockChainModel, ModelSpec};
use super::sampler::diffuse_with;
use super::schedule::NoiseSchedule;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate decays along a half cosine to this fraction of the start.
    pub final_lr_fraction: f64,
    pub held_out_size: usize,
    /// Training fails if the final held-out ε-MSE is above this.
    pub max_held_out_loss: Option<f64>,
    /// Held-out loss is logged every this many iterations (0 = only at the end).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            iterations: 2000,
            batch_size: 256,
            learning_rate: 2e-3,
            final_lr_fraction: 0.05,
            held_out_size: 2048,
            max_held_out_loss: None,
            eval_every: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub held_out: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub curve: Vec<CurvePoint>,
    pub held_out_loss: f64,
}

/// A noised batch: inputs, per-sample timesteps and the noise to predict.
struct NoisedBatch {
    x_t: Tensor,
    timesteps: Vec<usize>,
    noise: Tensor,
}

fn noised_batch(x0: &Tensor, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<NoisedBatch> {
    let (n, d) = x0.dims2("noised_batch")?;
    let timesteps: Vec<usize> = (0..n).map(|_| rng.gen_range(0..schedule.steps())).collect();
    let noise = Tensor::matrix(n, d, (0..n * d).map(|_| StandardNormal.sample(rng)).collect())?;
    let mut x_t = Vec::with_capacity(n * d);
    for (i, &t) in timesteps.iter().enumerate() {
        let row = diffuse_with(
            &Tensor::vector(x0.row(i).to_vec()),
            &Tensor::vector(noise.row(i).to_vec()),
            schedule.alpha_bar()[t],
        )?;
        x_t.extend_from_slice(row.data());
    }
    Ok(NoisedBatch {
        x_t: Tensor::matrix(n, d, x_t)?,
        timesteps,
        noise,
    })
}

/// Mean squared ε error of `model` on a batch; also returns the graph pieces
/// when `trainable` so the caller can take gradients.
fn batch_loss(model: &BlockChainModel, batch: &NoisedBatch, trainable: bool) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let m = model.bind(&mut g, trainable);
    let (mut h, temb) = m.stem(&mut g, &batch.x_t, &batch.timesteps)?;
    for b in 0..model.num_blocks() {
        h = m.block(&mut g, b, h, temb)?;
    }
    let eps = m.head(&mut g, h)?;
    let target = g.constant(m.layout().to_tokens(&batch.noise)?);
    let diff = g.sub(eps, target)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean(sq)?;
    let params = m.params();
    Ok((g, loss, params))
}

/// Held-out ε-MSE over a fixed batch drawn from the held-out stream of `seed`.
pub fn held_out_loss(model: &BlockChainModel, dataset: &Dataset, schedule: &NoiseSchedule, seed: u64, n: usize) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::HeldOut);
    let x0 = dataset.sample(&mut rng, n);
    let batch = noised_batch(&x0, schedule, &mut rng)?;
    let (g, loss, _) = batch_loss(model, &batch, false)?;
    Ok(f64::from(g.value(loss).item()?))
}

/// Trains a fresh model with the given architecture and returns it frozen.
pub fn train_teacher(
    spec: ModelSpec,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    config: &TeacherConfig,
) -> Result<(BlockChainModel, TeacherReport)> {
    if spec.layout.data_dim() != dataset.data_dim() {
        return Err(Error::invalid(format!(
            "model expects {}-dimensional data, dataset yields {}",
            spec.layout.data_dim(),
            dataset.data_dim()
        )));
    }
    if config.batch_size == 0 || config.held_out_size == 0 {
        return Err(Error::invalid("batch and held-out sizes must be positive"));
    }
    let mut init_rng = stream_rng(config.seed, Stream::Teacher);
    let mut model = BlockChainModel::init(spec, &mut init_rng)?;
    let mut data_rng = stream_rng(config.seed, Stream::Data);
    let mut noise_rng = init_rng;
    let mut adam = Adam::new(config.learning_rate as f32);
    let mut curve = Vec::new();

    for it in 0..config.iterations {
        let progress = it as f64 / config.iterations as f64;
        let decay = config.final_lr_fraction + (1.0 - config.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.lr = (config.learning_rate * decay) as f32;

        let x0 = dataset.sample(&mut data_rng, config.batch_size);
        let batch = noised_batch(&x0, schedule, &mut noise_rng)?;
        let (g, loss, vars) = batch_loss(&model, &batch, true)?;
        let loss_value = f64::from(g.value(loss).item()?);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "teacher loss diverged at iteration {it} (lr {:.3e}): {loss_value}",
                adam.lr
            )));
        }
        let grads = g.backward(loss)?;
        let grad_refs: Vec<Option<&Tensor>> = vars.iter().map(|&v| grads.get(v)).collect();
        adam.step(&mut model.params_mut()?, &grad_refs);

        let held_out = (config.eval_every > 0 && (it + 1) % config.eval_every == 0)
            .then(|| held_out_loss(&model, dataset, schedule, config.seed, config.held_out_size))
            .transpose()?;
        if let Some(h) = held_out {
            log::info!("teacher iteration {}: loss {loss_value:.4}, held-out {h:.4}", it + 1);
        }
        curve.push(CurvePoint {
            iteration: it + 1,
            loss: loss_value,
            held_out,
        });
    }

    let held_out_loss = held_out_loss(&model, dataset, schedule, config.seed, config.held_out_size)?;
    if let Some(limit) = config.max_held_out_loss {
        if !(held_out_loss <= limit) {
            return Err(Error::invalid(format!(
                "teacher held-out loss {held_out_loss:.4} exceeds the configured limit {limit}"
            )));
        }
    }
    model.freeze();
    Ok((model, TeacherReport { curve, held_out_loss }))
}
