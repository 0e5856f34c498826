//! Training-free mask rectification and the liveness check that certifies it.
//!
//! A block output computed at `(t, b)` has two possible consumers: block
//! `b+1` at the same step, and the cache read by later sampling steps
//! (smaller t) that skip `b`. When block `b+1` is skipped at t and block `b`
//! is recomputed at t−1, neither exists and the computation can go.

use serde::{Deserialize, Serialize};

use crate::diffusion::{BlockChainModel, NoiseSchedule, SamplerKind};
use crate::error::{Error, Result};
use crate::executor::run_masked_chain;
use crate::mask::MaskMatrix;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RectificationReport {
    /// Cells switched from compute to skip, as `(t, b)`.
    pub flipped: Vec<(usize, usize)>,
    pub zeros_before: usize,
    pub zeros_after: usize,
    /// Seeds used by [`verify_equivalence`], if it was run.
    pub seeds: Vec<u64>,
    /// Max abs output deviation per seed between the two masks.
    pub deviations: Vec<f32>,
}

impl RectificationReport {
    pub fn max_deviation(&self) -> Option<f32> {
        self.deviations.iter().copied().reduce(f32::max)
    }
}

/// Scans t = 0 … T−1 and, within each step, b = B−2 … 0, zeroing `m[t, b]`
/// when `m[t, b+1] = 0` and (t = 0 or `m[t−1, b] = 1`). Updates are seen by
/// the rest of the scan. The returned mask has `rectified` set.
pub fn rectify(mask: &MaskMatrix) -> Result<(MaskMatrix, RectificationReport)> {
    mask.validate()?;
    let mut m = mask.clone();
    let mut flipped = Vec::new();
    for t in 0..m.steps() {
        for b in (0..m.blocks().saturating_sub(1)).rev() {
            if m.get(t, b) == 1 && m.get(t, b + 1) == 0 && (t == 0 || m.get(t - 1, b) == 1) {
                m.set(t, b, 0);
                flipped.push((t, b));
            }
        }
    }
    m.rectified = true;
    let report = RectificationReport {
        flipped,
        zeros_before: mask.zeros(),
        zeros_after: m.zeros(),
        ..Default::default()
    };
    Ok((m, report))
}

/// Computed cells whose value reaches some step's ε output.
///
/// Walks the dataflow backwards from every end feature: a position `(t, b)`
/// holds either its own computation (m = 1) or the cached value of the nearest
/// earlier sampling step that computed `b`; a live computation makes its input
/// position `(t, b−1)` live in turn. Returns a row-major T×B table.
pub fn liveness_oracle(mask: &MaskMatrix) -> Vec<bool> {
    let (steps, blocks) = (mask.steps(), mask.blocks());
    let producer = |t: usize, b: usize| (t..steps).find(|&s| mask.get(s, b) == 1);
    let mut live = vec![false; steps * blocks];
    let mut stack: Vec<(usize, usize)> = (0..steps).filter_map(|t| producer(t, blocks - 1).map(|s| (s, blocks - 1))).collect();
    while let Some((t, b)) = stack.pop() {
        if std::mem::replace(&mut live[t * blocks + b], true) {
            continue;
        }
        if b > 0 {
            if let Some(s) = producer(t, b - 1) {
                stack.push((s, b - 1));
            }
        }
    }
    live
}

/// Max abs deviation per seed between full chains sampled under two masks.
pub fn verify_equivalence(
    model: &BlockChainModel,
    schedule: &NoiseSchedule,
    before: &MaskMatrix,
    after: &MaskMatrix,
    mode: SamplerKind,
    seeds: &[u64],
) -> Result<Vec<f32>> {
    if seeds.is_empty() {
        return Err(Error::invalid("verification needs at least one seed"));
    }
    let (a, _, _) = run_masked_chain(model, schedule, before, mode, seeds)?;
    let (b, _, _) = run_masked_chain(model, schedule, after, mode, seeds)?;
    Ok((0..seeds.len())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f32::max)
        })
        .collect())
}
