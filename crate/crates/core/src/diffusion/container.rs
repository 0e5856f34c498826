//! On-disk model container.
//!
//! A container is a directory holding `manifest.json` and one raw
//! little-endian `f32` file per parameter tensor:
//!
//! ```text
//! model/
//!   manifest.json
//!   input.weight.f32
//!   input.bias.f32
//!   block0.up.weight.f32
//!   …
//! ```
//!
//! The manifest lists every parameter with its shape and SHA-256, plus a
//! whole-model checksum (see [`BlockChainModel::checksum`]). Loading verifies
//! all of them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{hex, BlockChainModel, ModelSpec};
use super::schedule::ScheduleSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "blockskip-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    /// Hash of the run configuration that produced the model, if any.
    pub config_hash: Option<String>,
    pub frozen: bool,
    pub checksum: String,
    pub parameters: Vec<ParamEntry>,
}

/// Writes `model` into `dir`, creating it if needed.
pub fn save(
    dir: &Path,
    model: &BlockChainModel,
    schedule: &ScheduleSpec,
    seed: u64,
    config_hash: Option<String>,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut parameters = Vec::new();
    for (name, t) in model.named_params() {
        let bytes = t.to_le_bytes();
        let file = format!("{name}.f32");
        fs::write(dir.join(&file), &bytes)?;
        parameters.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            file,
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: FORMAT_VERSION,
        model: model.spec().clone(),
        schedule: schedule.clone(),
        seed,
        config_hash,
        frozen: model.is_frozen(),
        checksum: model.checksum(),
        parameters,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::Container(format!(
            "unsupported container {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads and verifies a container.
pub fn load(dir: &Path) -> Result<(BlockChainModel, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut params = Vec::with_capacity(manifest.parameters.len());
    for p in &manifest.parameters {
        let bytes = fs::read(dir.join(&p.file))?;
        if hex(&Sha256::digest(&bytes)) != p.sha256 {
            return Err(Error::Container(format!("checksum mismatch for {}", p.name)));
        }
        if bytes.len() % 4 != 0 {
            return Err(Error::Container(format!("{} is not a whole number of f32 values", p.file)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((p.name.clone(), Tensor::new(p.shape.clone(), data)?));
    }
    let mut model = BlockChainModel::zeros(manifest.model.clone())?;
    model.load_params(params)?;
    if model.checksum() != manifest.checksum {
        return Err(Error::Container("model checksum mismatch".into()));
    }
    if manifest.frozen {
        model.freeze();
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_preserves_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = BlockChainModel::init(ModelSpec::image(8, 2, 8, 3), &mut rng).unwrap();
        m.freeze();
        let sched = ScheduleSpec::linear(10, 1e-3, 0.2);
        save(dir.path(), &m, &sched, 42, Some("abc".into())).unwrap();
        let (back, manifest) = load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(manifest.seed, 42);
        assert_eq!(manifest.schedule, sched);
        assert!(dir.path().join("block0.mix.f32").exists());
    }

    #[test]
    fn corrupted_parameter_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = BlockChainModel::init(ModelSpec::points(2, 4, 1), &mut rng).unwrap();
        save(dir.path(), &m, &ScheduleSpec::linear(4, 0.1, 0.2), 0, None).unwrap();
        let f = dir.path().join("output.bias.f32");
        let mut bytes = fs::read(&f).unwrap();
        bytes[0] ^= 1;
        fs::write(&f, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Container(_))));
    }
}
