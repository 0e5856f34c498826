//! The T×B execution mask and its JSON file format.
//!
//! Row `t` of the matrix belongs to sampling timestep `t`; sampling visits the
//! rows from `T−1` down to `0`. Column `b` is chain block `b`.
//!
//! File layout (`version` 1):
//!
//! ```json
//! {
//!   "version": 1,
//!   "T": 50, "B": 8,
//!   "block_ids": ["block0:mlp", …],
//!   "s": [1.0, 0.93, …],   // T·B continuous scores, row-major
//!   "m": [1, 1, 0, …],     // T·B binary decisions, row-major
//!   "rectified": false,
//!   "metadata": { … }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK_VERSION: u32 = 1;

/// Where a mask came from. All fields are informational.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskMetadata {
    pub lambda_sparse: Option<f64>,
    pub lambda_bimodal: Option<f64>,
    pub sampling_mode: Option<String>,
    pub tau: Option<f64>,
    pub threshold: Option<f64>,
    pub loss_scaling: Option<bool>,
    pub seed: Option<u64>,
    pub schedule_id: Option<String>,
    pub model_checksum: Option<String>,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMatrix {
    pub version: u32,
    #[serde(rename = "T")]
    steps: usize,
    #[serde(rename = "B")]
    blocks: usize,
    pub block_ids: Vec<String>,
    #[serde(rename = "s")]
    scores: Vec<f32>,
    #[serde(rename = "m")]
    mask: Vec<u8>,
    pub rectified: bool,
    pub metadata: MaskMetadata,
}

fn default_block_ids(blocks: usize) -> Vec<String> {
    (0..blocks).map(|b| format!("block{b}")).collect()
}

impl MaskMatrix {
    /// Every block computed at every step; scores all 1.
    pub fn all_ones(steps: usize, blocks: usize) -> Self {
        MaskMatrix {
            version: MASK_VERSION,
            steps,
            blocks,
            block_ids: default_block_ids(blocks),
            scores: vec![1.0; steps * blocks],
            mask: vec![1; steps * blocks],
            rectified: false,
            metadata: MaskMetadata::default(),
        }
    }

    /// A binary mask with scores equal to the decisions. Validated.
    pub fn from_binary(steps: usize, blocks: usize, mask: Vec<u8>) -> Result<Self> {
        let m = MaskMatrix {
            version: MASK_VERSION,
            steps,
            blocks,
            block_ids: default_block_ids(blocks),
            scores: mask.iter().map(|&v| f32::from(v)).collect(),
            mask,
            rectified: false,
            metadata: MaskMetadata::default(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds from scores and decisions. Validated.
    pub fn from_parts(steps: usize, blocks: usize, scores: Vec<f32>, mask: Vec<u8>) -> Result<Self> {
        let m = MaskMatrix {
            version: MASK_VERSION,
            steps,
            blocks,
            block_ids: default_block_ids(blocks),
            scores,
            mask,
            rectified: false,
            metadata: MaskMetadata::default(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks shapes, value ranges and that the first sampling step computes
    /// every block.
    pub fn validate(&self) -> Result<()> {
        let n = self.steps * self.blocks;
        if self.steps == 0 || self.blocks == 0 {
            return Err(Error::invalid("mask must have at least one timestep and one block"));
        }
        if self.scores.len() != n || self.mask.len() != n || self.block_ids.len() != self.blocks {
            return Err(Error::invalid(format!(
                "mask {}x{} has {} scores, {} decisions, {} block ids",
                self.steps,
                self.blocks,
                self.scores.len(),
                self.mask.len(),
                self.block_ids.len()
            )));
        }
        if let Some(i) = self.scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid(format!(
                "score {} at (t={}, b={}) outside [0, 1]",
                self.scores[i],
                i / self.blocks,
                i % self.blocks
            )));
        }
        if let Some(i) = self.mask.iter().position(|&v| v > 1) {
            return Err(Error::invalid(format!("mask value {} at index {i} is not binary", self.mask[i])));
        }
        if let Some(b) = self.row(self.steps - 1).iter().position(|&v| v != 1) {
            return Err(Error::invalid(format!(
                "first sampling step (t={}) must compute every block; block {b} is skipped",
                self.steps - 1
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn get(&self, t: usize, b: usize) -> u8 {
        self.mask[t * self.blocks + b]
    }

    pub fn set(&mut self, t: usize, b: usize, value: u8) {
        self.mask[t * self.blocks + b] = value;
    }

    pub fn score(&self, t: usize, b: usize) -> f32 {
        self.scores[t * self.blocks + b]
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.mask[t * self.blocks..(t + 1) * self.blocks]
    }

    pub fn score_row(&self, t: usize) -> &[f32] {
        &self.scores[t * self.blocks..(t + 1) * self.blocks]
    }

    pub fn decisions(&self) -> &[u8] {
        &self.mask
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn zeros(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 0).count()
    }

    /// Σ_t m[t, b] for every block.
    pub fn compute_counts(&self) -> Vec<usize> {
        (0..self.blocks)
            .map(|b| (0..self.steps).filter(|&t| self.get(t, b) == 1).count())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: MaskMatrix = serde_json::from_str(text)?;
        if m.version != MASK_VERSION {
            return Err(Error::invalid(format!("unsupported mask version {}", m.version)));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
