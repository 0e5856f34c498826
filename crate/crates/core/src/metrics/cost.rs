//! Multiply-accumulate accounting.
//!
//! Only dense products are counted: a dense layer `k → n` applied to `L`
//! tokens costs `L·k·n`. Normalisation, biases and activations are ignored.
//!
//! | part | MACs per sample |
//! |------|-----------------|
//! | MLP block | `L·(d·h + h·d)` |
//! | token-mix block | `L·L·d` (mixing) `+ L·d·d` (projection) |
//! | overhead | `L·k·d` (input) `+ L·d·d` (time embedding) `+ L·d·k` (output) |
//!
//! with `d` the width, `h` the MLP hidden size and `k` the token dimension.

use serde::{Deserialize, Serialize};

use crate::diffusion::{BlockKind, ModelSpec};
use crate::error::{Error, Result};
use crate::mask::MaskMatrix;

/// MACs of a dense `k → n` layer over `tokens` tokens.
pub fn dense_macs(tokens: usize, k: usize, n: usize) -> u64 {
    (tokens * k * n) as u64
}

/// Per-sample cost of one denoiser evaluation, split by maskable block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub block_macs: Vec<u64>,
    pub overhead_macs: u64,
}

/// Builds the [`CostModel`] of a model architecture.
pub fn block_macs(spec: &ModelSpec) -> CostModel {
    let l = spec.layout.tokens();
    let k = spec.layout.token_dim();
    let (d, h) = (spec.width, spec.hidden);
    let block_macs = spec
        .blocks
        .iter()
        .map(|kind| match kind {
            BlockKind::Mlp => dense_macs(l, d, h) + dense_macs(l, h, d),
            BlockKind::TokenMix => (l * l * d) as u64 + dense_macs(l, d, d),
        })
        .collect();
    let overhead_macs = dense_macs(l, k, d) + dense_macs(l, d, d) + dense_macs(l, d, k);
    CostModel {
        block_macs,
        overhead_macs,
    }
}

impl CostModel {
    pub fn blocks(&self) -> usize {
        self.block_macs.len()
    }

    /// One full step: overhead plus every block.
    pub fn step_macs(&self) -> u64 {
        self.overhead_macs + self.block_macs.iter().sum::<u64>()
    }

    /// Unmasked cost of a `steps`-step chain.
    pub fn baseline_total(&self, steps: usize) -> u64 {
        steps as u64 * self.step_macs()
    }
}

/// Total MACs per sample under `mask`, and the speedup over the unmasked chain.
pub fn mask_cost(mask: &MaskMatrix, cost: &CostModel) -> Result<(u64, f64)> {
    if mask.blocks() != cost.blocks() {
        return Err(Error::invalid(format!(
            "mask has {} blocks, cost model {}",
            mask.blocks(),
            cost.blocks()
        )));
    }
    let total: u64 = (0..mask.steps())
        .map(|t| {
            cost.overhead_macs
                + mask
                    .row(t)
                    .iter()
                    .zip(&cost.block_macs)
                    .map(|(&m, &c)| u64::from(m) * c)
                    .sum::<u64>()
        })
        .sum();
    let baseline = cost.baseline_total(mask.steps());
    Ok((total, baseline as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_linear() {
        assert_eq!(dense_macs(1, 64, 64), 4096);
    }

    #[test]
    fn toy_point_model_hand_count() {
        let c = block_macs(&ModelSpec::points(2, 64, 8));
        // up 64×128 + down 128×64 per block
        assert_eq!(c.block_macs, vec![16384; 8]);
        // input 2×64, time 64×64, output 64×2
        assert_eq!(c.overhead_macs, 128 + 4096 + 128);
        assert_eq!(c.baseline_total(50), 50 * (8 * 16384 + 4352));
    }

    #[test]
    fn toy_image_model_hand_count() {
        // 8×8 image, 2×2 patches: 16 tokens of dimension 4, width 16.
        let c = block_macs(&ModelSpec::image(8, 2, 16, 2));
        assert_eq!(c.block_macs[0], 16 * 16 * 16 + 16 * 16 * 16);
        assert_eq!(c.block_macs[1], 16 * (16 * 32 + 32 * 16));
        assert_eq!(c.overhead_macs, 16 * 4 * 16 + 16 * 16 * 16 + 16 * 16 * 4);
    }

    #[test]
    fn doubling_width_quadruples_mlp_blocks() {
        let a = block_macs(&ModelSpec::points(2, 32, 1));
        let b = block_macs(&ModelSpec::points(2, 64, 1));
        assert_eq!(b.block_macs[0], 4 * a.block_macs[0]);
    }

    #[test]
    fn speedup_examples() {
        let c = block_macs(&ModelSpec::points(2, 16, 3));
        let (total, s) = mask_cost(&MaskMatrix::all_ones(10, 3), &c).unwrap();
        assert_eq!(total, c.baseline_total(10));
        assert_eq!(s, 1.0);

        let flat = CostModel {
            block_macs: vec![10; 2],
            overhead_macs: 0,
        };
        let m = MaskMatrix::from_binary(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(mask_cost(&m, &flat).unwrap(), (20, 2.0));
        assert!(mask_cost(&m, &c).is_err());
    }

    proptest! {
        #[test]
        fn cost_is_monotone(bits in proptest::collection::vec(0u8..2, 15), cell in 0usize..10) {
            let mut bits = bits;
            for b in &mut bits[10..] { *b = 1; }
            let c = block_macs(&ModelSpec::image(8, 2, 8, 5));
            let m = MaskMatrix::from_binary(3, 5, bits.clone()).unwrap();
            let mut more = bits;
            more[cell] = 1;
            let m2 = MaskMatrix::from_binary(3, 5, more).unwrap();
            prop_assert!(mask_cost(&m2, &c).unwrap().0 >= mask_cost(&m, &c).unwrap().0);
        }
    }
}
