use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// β rises linearly from `beta_min` to `beta_max`.
    Linear,
    /// ᾱ follows the squared-cosine curve with offset 0.008; the implied β are
    /// clipped into `[beta_min, beta_max]` and ᾱ is recomputed from them.
    Cosine,
}

/// Parameters that determine a [`NoiseSchedule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub kind: ScheduleKind,
}

impl ScheduleSpec {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Self {
        ScheduleSpec {
            steps,
            beta_min,
            beta_max,
            kind: ScheduleKind::Linear,
        }
    }

    /// Short stable identifier, recorded in masks and trajectories.
    pub fn id(&self) -> String {
        let kind = match self.kind {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        };
        format!("{kind}-T{}-b{}-{}", self.steps, self.beta_min, self.beta_max)
    }
}

/// Per-step α_t and cumulative ᾱ_t = ∏_{i≤t} α_i, with t = 0 the least noisy step.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            steps,
            beta_min,
            beta_max,
            kind,
        } = spec;
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "schedule needs 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|t| beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (0..steps)
                    .map(|t| {
                        let prev = f(t as f64);
                        let next = f(t as f64 + 1.0);
                        (1.0 - next / prev).clamp(beta_min, beta_max)
                    })
                    .collect()
            }
        };
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { spec, alpha, alpha_bar })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha[t]
    }

    /// ᾱ_{t−1}, with ᾱ_{−1} = 1 for the clean data.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }
}
