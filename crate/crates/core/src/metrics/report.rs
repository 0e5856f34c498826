//! Mask analysis exports and the evaluation summary.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::cost::{mask_cost, CostModel};
use super::mmd::{median_bandwidth, mmd, mmd_biased};
use super::timing::TimingSummary;
use crate::error::{Error, Result};
use crate::executor::ExecutionStats;
use crate::mask::MaskMatrix;
use crate::tensor::Tensor;

/// Timesteps aggregated per heatmap row.
pub const HEATMAP_WINDOW: usize = 5;
pub const HISTOGRAM_BINS: usize = 10;

/// Fraction of scores within 0.1 of 0 or 1.
pub fn near_binary_fraction(scores: &[f32]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let near = scores.iter().filter(|&&s| (s - s.round()).abs() < 0.1).count();
    near as f64 / scores.len() as f64
}

/// Counts of scores in equal-width bins over [0, 1]; 1.0 lands in the last bin.
pub fn histogram(scores: &[f32], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &s in scores {
        let i = ((s.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
        h[i] += 1;
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    /// `(first t, last t, compute count per block)` for each window, in sampling order.
    pub heatmap: Vec<(usize, usize, Vec<usize>)>,
    pub histogram: Vec<usize>,
    pub near_binary_fraction: f64,
    /// Skipped fraction of blocks per timestep, indexed by t.
    pub sparsity: Vec<f64>,
}

pub fn mask_report(mask: &MaskMatrix, stats: &ExecutionStats) -> Result<MaskReport> {
    if stats.steps() != mask.steps() || stats.blocks() != mask.blocks() {
        return Err(Error::invalid("execution stats do not match the mask"));
    }
    let (steps, blocks) = (mask.steps(), mask.blocks());
    let mut heatmap = Vec::new();
    let mut hi = steps;
    while hi > 0 {
        let lo = hi.saturating_sub(HEATMAP_WINDOW);
        let counts = (0..blocks)
            .map(|b| (lo..hi).filter(|&t| stats.computed(t, b)).count())
            .collect();
        heatmap.push((hi - 1, lo, counts));
        hi = lo;
    }
    let sparsity = (0..steps)
        .map(|t| (0..blocks).filter(|&b| !stats.computed(t, b)).count() as f64 / blocks as f64)
        .collect();
    Ok(MaskReport {
        heatmap,
        histogram: histogram(mask.scores(), HISTOGRAM_BINS),
        near_binary_fraction: near_binary_fraction(mask.scores()),
        sparsity,
    })
}

impl MaskReport {
    pub fn heatmap_csv(&self) -> String {
        let blocks = self.heatmap.first().map_or(0, |r| r.2.len());
        let mut out = String::from("t_from,t_to");
        for b in 0..blocks {
            let _ = write!(out, ",block{b}");
        }
        out.push('\n');
        for (from, to, counts) in &self.heatmap {
            let _ = write!(out, "{from},{to}");
            for c in counts {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let bins = self.histogram.len();
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.histogram.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c}", i as f64 / bins as f64, (i + 1) as f64 / bins as f64);
        }
        out
    }

    pub fn sparsity_csv(&self) -> String {
        let mut out = String::from("t,sparsity\n");
        for (t, s) in self.sparsity.iter().enumerate() {
            let _ = writeln!(out, "{t},{s}");
        }
        out
    }
}

/// `‖x_end − x_ori_end‖ / ‖x_ori_end‖` per timestep.
pub fn feature_distortion(masked: &[Tensor], original: &[Tensor]) -> Result<Vec<f64>> {
    if masked.len() != original.len() {
        return Err(Error::invalid("trajectories have different lengths"));
    }
    masked
        .iter()
        .zip(original)
        .map(|(m, o)| {
            m.check_same_shape(o, "feature_distortion")?;
            let diff: f64 = m
                .data()
                .iter()
                .zip(o.data())
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum::<f64>()
                .sqrt();
            let n = o.norm();
            Ok(if n > 0.0 { diff / n } else { diff })
        })
        .collect()
}

pub fn distortion_csv(distortion: &[f64]) -> String {
    let mut out = String::from("t,distortion\n");
    for (t, d) in distortion.iter().enumerate() {
        let _ = writeln!(out, "{t},{d}");
    }
    out
}

/// The evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub baseline_macs: u64,
    pub masked_macs: u64,
    /// Baseline over masked MACs.
    pub speedup_macs: f64,
    /// Unmasked over masked median latency; only present when timing was requested.
    pub speedup_wallclock: Option<f64>,
    /// Squared MMD between masked and reference samples (V-statistic).
    pub mmd: f64,
    /// Squared MMD between two independent unmasked sample sets (V-statistic).
    pub mmd_noise_floor: f64,
    /// Unbiased counterparts of the two values above.
    pub mmd_unbiased: f64,
    pub mmd_noise_floor_unbiased: f64,
    pub near_binary_fraction: f64,
}

impl Summary {
    /// Compares `masked` and an independent unmasked `baseline` set against
    /// the unmasked `reference` set, all under one median-heuristic bandwidth
    /// fitted on baseline and reference.
    pub fn compute(
        baseline: &Tensor,
        reference: &Tensor,
        masked: &Tensor,
        mask: &MaskMatrix,
        cost: &CostModel,
        timing: Option<&TimingSummary>,
    ) -> Result<Summary> {
        let (masked_macs, speedup_macs) = mask_cost(mask, cost)?;
        let h = median_bandwidth(baseline, reference)?;
        Ok(Summary {
            baseline_macs: cost.baseline_total(mask.steps()),
            masked_macs,
            speedup_macs,
            speedup_wallclock: timing.map(|t| t.speedup),
            mmd: mmd_biased(masked, reference, Some(h))?,
            mmd_noise_floor: mmd_biased(baseline, reference, Some(h))?,
            mmd_unbiased: mmd(masked, reference, Some(h))?,
            mmd_noise_floor_unbiased: mmd(baseline, reference, Some(h))?,
            near_binary_fraction: near_binary_fraction(mask.scores()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{BlockChainModel, ModelSpec, NoiseSchedule, SamplerKind, ScheduleSpec};
    use crate::executor::run_masked_chain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn near_binary_examples() {
        assert_eq!(near_binary_fraction(&[0.0, 1.0, 0.05]), 1.0);
        assert_eq!(near_binary_fraction(&[0.5]), 0.0);
        assert_eq!(near_binary_fraction(&[0.95, 0.2]), 0.5);
    }

    #[test]
    fn histogram_conserves_mass() {
        let s = [0.0, 0.05, 0.1, 0.55, 0.999, 1.0];
        let h = histogram(&s, 10);
        assert_eq!(h.iter().sum::<usize>(), 6);
        assert_eq!(h[0], 2);
        assert_eq!(h[9], 2);
    }

    #[test]
    fn all_ones_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = BlockChainModel::init(ModelSpec::points(2, 8, 3), &mut rng).unwrap();
        let s = NoiseSchedule::new(ScheduleSpec::linear(12, 1e-3, 0.2)).unwrap();
        let mask = MaskMatrix::all_ones(12, 3);
        let (_, _, stats) = run_masked_chain(&m, &s, &mask, SamplerKind::Ddim, &[1]).unwrap();
        let r = mask_report(&mask, &stats).unwrap();
        assert_eq!(stats.compute_counts(), vec![12; 3]);
        assert_eq!(r.heatmap.len(), 3);
        assert_eq!(r.heatmap[0], (11, 7, vec![5, 5, 5]));
        assert_eq!(r.heatmap[2], (1, 0, vec![2, 2, 2]));
        assert_eq!(r.histogram.iter().sum::<usize>(), 36);
        assert!(r.sparsity.iter().all(|&v| v == 0.0));
        assert_eq!(r.heatmap_csv().lines().next(), Some("t_from,t_to,block0,block1,block2"));
    }

    #[test]
    fn distortion_is_relative() {
        let o = vec![Tensor::vector(vec![3.0, 4.0])];
        let m = vec![Tensor::vector(vec![3.0, 9.0])];
        assert_eq!(feature_distortion(&m, &o).unwrap(), vec![1.0]);
        assert_eq!(feature_distortion(&o, &o).unwrap(), vec![0.0]);
    }

    #[test]
    fn summary_of_identical_sets() {
        let x = Tensor::matrix(4, 2, vec![0.0, 1.0, 2.0, 0.5, -1.0, 0.3, 0.7, 0.7]).unwrap();
        let mask = MaskMatrix::all_ones(3, 2);
        let cost = CostModel {
            block_macs: vec![10, 20],
            overhead_macs: 5,
        };
        let s = Summary::compute(&x, &x, &x, &mask, &cost, None).unwrap();
        assert_eq!((s.baseline_macs, s.masked_macs, s.speedup_macs), (105, 105, 1.0));
        assert!(s.mmd.abs() <= 1e-8 && s.mmd_noise_floor.abs() <= 1e-8);
        assert_eq!(s.speedup_wallclock, None);
        assert_eq!(s.near_binary_fraction, 1.0);
    }
}
