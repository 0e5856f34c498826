//! The run configuration file.
//!
//! A single TOML document describes a whole pipeline run:
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/moons"
//! sampler = "ddim"
//!
//! [dataset]
//! kind = "two-moons"
//! noise = 0.05
//!
//! [model]
//! width = 64
//! blocks = 8
//!
//! [schedule]
//! steps = 50
//! beta_min = 0.001
//! beta_max = 0.2
//! kind = "linear"
//!
//! [teacher]
//! iterations = 2000
//! max_held_out_loss = 0.35
//!
//! [trainer]
//! lambda_sparse = 0.35
//! lambda_bimodal = 0.2
//! ```
//!
//! `seed` is the only source of randomness; the `seed` fields of the teacher
//! and trainer sections are overwritten with it, and the trainer's sampler
//! with the top-level `sampler`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use blockskip_core::diffusion::{DatasetSpec, ModelSpec, SamplerKind, ScheduleSpec, TeacherConfig};
use blockskip_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::fail;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sampler: SamplerKind,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

/// Architecture; the data layout follows from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: usize,
    /// MLP hidden width, 2·width when absent.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Patch side for image data.
    #[serde(default = "default_patch")]
    pub patch: usize,
}

fn default_patch() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Samples per set (reference, baseline, masked).
    pub samples: usize,
    /// Chains run by `report` and by rectification checks.
    pub report_seeds: usize,
    /// Seeds used for wall-clock timing.
    pub timing_seeds: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            samples: 1000,
            report_seeds: 64,
            timing_seeds: 64,
        }
    }
}

impl RunConfig {
    /// Reads, normalises and validates a config file. Relative paths inside
    /// it are taken relative to the file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| fail("config", format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let DatasetSpec::TinyImages { dir, .. } = &mut cfg.dataset {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn normalize(&mut self) {
        self.teacher.seed = self.seed;
        self.trainer.seed = self.seed;
        self.trainer.sampler = self.sampler;
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::TinyImages { dir, .. } = &self.dataset {
            if !dir.is_dir() {
                return Err(fail("config", format!("dataset directory {} does not exist", dir.display())));
            }
        }
        if self.schedule.steps == 0 {
            return Err(fail("config", "schedule needs at least one step"));
        }
        self.model_spec()?.validate()?;
        self.trainer.validate()?;
        if self.evaluation.samples < 2 {
            return Err(fail("config", "evaluation.samples must be at least 2"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = match &self.dataset {
            DatasetSpec::TwoMoons { .. } | DatasetSpec::GaussianMixture { .. } => {
                ModelSpec::points(2, self.model.width, self.model.blocks)
            }
            DatasetSpec::TinyImages { side, .. } => {
                ModelSpec::image(*side, self.model.patch, self.model.width, self.model.blocks)
            }
        };
        if let Some(h) = self.model.hidden {
            spec.hidden = h;
        }
        Ok(spec)
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        digest(&c)
    }

    /// Hash of the fields the teacher depends on. Teachers carry this one so
    /// that changing mask-training settings does not invalidate them.
    pub fn teacher_hash(&self) -> String {
        digest(&(&self.seed, &self.dataset, &self.model, &self.schedule, &self.teacher))
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.output_dir.join("teacher")
    }
}

fn digest(value: &impl Serialize) -> String {
    let json = serde_json::to_vec(value).expect("config serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        output_dir = "out"
        [dataset]
        kind = "two-moons"
        noise = 0.05
        [model]
        width = 16
        blocks = 4
        [schedule]
        steps = 10
        beta_min = 0.001
        beta_max = 0.2
        kind = "linear"
    "#;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn seed_propagates_and_paths_resolve() {
        let (dir, p) = write(MINIMAL);
        let c = RunConfig::load(&p).unwrap();
        assert_eq!((c.teacher.seed, c.trainer.seed), (3, 3));
        assert_eq!(c.output_dir, dir.path().join("out"));
        assert_eq!(c.model_spec().unwrap(), ModelSpec::points(2, 16, 4));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let (_d, p) = write(MINIMAL);
        let a = RunConfig::load(&p).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.trainer.lambda_sparse = 0.1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.teacher_hash(), b.teacher_hash());
        b.seed = 4;
        assert_ne!(a.teacher_hash(), b.teacher_hash());
    }

    #[test]
    fn missing_image_dir_is_rejected() {
        let text = MINIMAL.replace("kind = \"two-moons\"\n        noise = 0.05", "kind = \"tiny-images\"\n        dir = \"nope\"\n        side = 8");
        let (_d, p) = write(&text);
        let err = RunConfig::load(&p).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_d, p) = write(&format!("{MINIMAL}\n[extra]\nx = 1\n"));
        assert!(RunConfig::load(&p).is_err());
    }
}
