//! Wall-clock latency of masked and unmasked sampling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, BlockChainModel, NoiseSchedule, SamplerKind};
use crate::error::{Error, Result};
use crate::executor::run_masked_chain;
use crate::mask::MaskMatrix;

/// Median and interquartile range of repeated measurements, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median: f64,
    pub iqr: f64,
    pub repetitions: usize,
}

impl LatencyStats {
    pub fn from_samples(mut secs: Vec<f64>) -> Self {
        secs.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (secs.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            secs[lo] + (secs[hi] - secs[lo]) * (pos - lo as f64)
        };
        LatencyStats {
            median: q(0.5),
            iqr: q(0.75) - q(0.25),
            repetitions: secs.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub masked: LatencyStats,
    pub unmasked: LatencyStats,
    /// Unmasked over masked median.
    pub speedup: f64,
}

/// Times full-chain sampling of `seeds`, interleaving masked and unmasked
/// runs after one warm-up of each.
pub fn wall_clock(
    model: &BlockChainModel,
    schedule: &NoiseSchedule,
    mask: &MaskMatrix,
    mode: SamplerKind,
    seeds: &[u64],
    repetitions: usize,
) -> Result<TimingSummary> {
    if repetitions == 0 {
        return Err(Error::invalid("wall_clock needs at least one repetition"));
    }
    run_masked_chain(model, schedule, mask, mode, seeds)?;
    sample(model, schedule, mode, seeds)?;
    let mut masked = Vec::with_capacity(repetitions);
    let mut unmasked = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        run_masked_chain(model, schedule, mask, mode, seeds)?;
        masked.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        sample(model, schedule, mode, seeds)?;
        unmasked.push(start.elapsed().as_secs_f64());
    }
    let masked = LatencyStats::from_samples(masked);
    let unmasked = LatencyStats::from_samples(unmasked);
    Ok(TimingSummary {
        masked,
        unmasked,
        speedup: unmasked.median / masked.median,
    })
}
