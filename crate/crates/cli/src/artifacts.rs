//! Artifact files: provenance headers, sample sets and overwrite policy.
//!
//! Every artifact records the config hash and seed that produced it. JSON
//! artifacts carry a `config_hash` field (masks keep it in their metadata),
//! model containers in their manifest, and CSV files in a first comment line
//! holding a JSON object:
//!
//! ```text
//! # {"config_hash":"9f2c…","seed":0}
//! x,y
//! 0.4133,-0.2011
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use blockskip_core::diffusion::container;
use blockskip_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::failure::fail;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn csv(&self, body: &str) -> String {
        format!("# {}\n{body}", serde_json::to_string(self).expect("provenance serialises"))
    }
}

/// What produced a sample set. Stored in the CSV comment line for point data
/// and in the JSON sidecar of raw image data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub config_hash: String,
    pub seed: u64,
    pub sampler: String,
    pub first_seed: u64,
    pub count: usize,
    pub dim: usize,
    /// Image side length; absent for point data.
    pub side: Option<usize>,
    /// SHA-256 of the mask file used, absent for unmasked sampling.
    pub mask_sha256: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// `foo/mask.json` + `trace.csv` → `foo/mask.trace.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

/// Points go to a CSV at `path`; images to raw little-endian f32 at `path`
/// with the header in a sidecar.
pub fn write_samples(path: &Path, header: &SampleHeader, x: &Tensor) -> Result<()> {
    if header.side.is_some() {
        write(path, x.to_le_bytes())?;
        return write_json(&sidecar(path), header);
    }
    let (_, d) = x.dims2("write_samples")?;
    let mut out = format!("# {}\n", serde_json::to_string(header)?);
    let cols: Vec<String> = if d == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (0..d).map(|i| format!("x{i}")).collect()
    };
    out.push_str(&cols.join(","));
    out.push('\n');
    for row in x.data().chunks(d) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write(path, out)
}

pub fn read_samples(path: &Path) -> Result<(SampleHeader, Tensor)> {
    let ctx = || format!("reading samples {}", path.display());
    if path.extension().is_some_and(|e| e == "csv") {
        let text = fs::read_to_string(path).with_context(ctx)?;
        let mut lines = text.lines();
        let header: SampleHeader = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| fail("samples", format!("{} has no provenance line", path.display())))
            .and_then(|l| serde_json::from_str(l).map_err(Into::into))
            .with_context(ctx)?;
        let mut data = Vec::with_capacity(header.count * header.dim);
        for line in lines.skip(1).filter(|l| !l.is_empty()) {
            for cell in line.split(',') {
                data.push(
                    cell.trim()
                        .parse::<f32>()
                        .map_err(|e| fail("samples", format!("{}: bad value {cell:?}: {e}", path.display())))?,
                );
            }
        }
        if data.len() != header.count * header.dim {
            return Err(fail(
                "samples",
                format!("{}: expected {}x{} values, found {}", path.display(), header.count, header.dim, data.len()),
            ));
        }
        return Ok((header.clone(), Tensor::matrix(header.count, header.dim, data)?));
    }
    let header: SampleHeader = serde_json::from_slice(&fs::read(sidecar(path)).with_context(ctx)?)?;
    let bytes = fs::read(path).with_context(ctx)?;
    if bytes.len() != header.count * header.dim * 4 {
        return Err(fail("samples", format!("{}: size does not match its sidecar", path.display())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((header.clone(), Tensor::matrix(header.count, header.dim, data)?))
}

/// The config hash recorded in an existing artifact, if it has one.
pub fn embedded_hash(path: &Path) -> Result<Option<String>> {
    if path.is_dir() {
        return Ok(container::read_manifest(path)?.config_hash);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let text = fs::read_to_string(path)?;
            let first = text.lines().next().unwrap_or_default();
            Ok(first
                .strip_prefix("# ")
                .and_then(|l| serde_json::from_str::<Value>(l).ok())
                .and_then(|v| v["config_hash"].as_str().map(String::from)))
        }
        Some("json") => {
            let v: Value = serde_json::from_slice(&fs::read(path)?)?;
            Ok(v.get("config_hash")
                .or_else(|| v.get("metadata").and_then(|m| m.get("config_hash")))
                .and_then(Value::as_str)
                .map(String::from))
        }
        _ => embedded_hash(&sidecar(path)),
    }
}

/// How to treat outputs that already exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    /// Refuse to touch them.
    Fail,
    /// Overwrite them.
    Force,
    /// Keep them if their config hash matches, refuse otherwise.
    Resume,
}

impl Policy {
    pub fn from_flags(force: bool, resume: bool) -> Policy {
        match (force, resume) {
            (true, _) => Policy::Force,
            (false, true) => Policy::Resume,
            _ => Policy::Fail,
        }
    }
}

fn occupied(path: &Path) -> bool {
    if path.is_dir() {
        fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
    } else {
        path.exists()
    }
}

/// Whether the command should (re)write `path`. `Ok(false)` means an up to
/// date artifact is already there.
pub fn should_write(path: &Path, policy: Policy, expected_hash: &str) -> Result<bool> {
    if !occupied(path) {
        return Ok(true);
    }
    match policy {
        Policy::Force => Ok(true),
        Policy::Fail => Err(fail(
            "exists",
            format!("{} already exists; pass --force to overwrite or --resume to reuse", path.display()),
        )),
        Policy::Resume => match embedded_hash(path)? {
            Some(h) if h == expected_hash => {
                log::info!("{} is up to date", path.display());
                Ok(false)
            }
            found => Err(fail(
                "hash_mismatch",
                format!(
                    "{} was produced by config {} but the current config hashes to {expected_hash}",
                    path.display(),
                    found.as_deref().unwrap_or("<none>")
                ),
            )),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(side: Option<usize>, count: usize, dim: usize) -> SampleHeader {
        SampleHeader {
            config_hash: "abc".into(),
            seed: 1,
            sampler: "ddim".into(),
            first_seed: 0,
            count,
            dim,
            side,
            mask_sha256: None,
        }
    }

    #[test]
    fn point_samples_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let x = Tensor::matrix(3, 2, vec![0.1, -1.0 / 3.0, 1e-8, 7.25, f32::MIN_POSITIVE, -0.0]).unwrap();
        write_samples(&p, &header(None, 3, 2), &x).unwrap();
        let (h, y) = read_samples(&p).unwrap();
        assert_eq!(h, header(None, 3, 2));
        assert_eq!(x.to_le_bytes(), y.to_le_bytes());
        assert_eq!(fs::read_to_string(&p).unwrap().lines().nth(1), Some("x,y"));
        assert_eq!(embedded_hash(&p).unwrap().as_deref(), Some("abc"));
    }

    #[test]
    fn image_samples_use_a_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.f32");
        let x = Tensor::matrix(2, 4, (0..8).map(|i| i as f32 * 0.5).collect()).unwrap();
        write_samples(&p, &header(Some(2), 2, 4), &x).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 32);
        assert_eq!(read_samples(&p).unwrap().1, x);
        assert_eq!(embedded_hash(&p).unwrap().as_deref(), Some("abc"));
    }

    #[test]
    fn overwrite_policy() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        assert!(should_write(&p, Policy::Fail, "h").unwrap());
        write_json(&p, &serde_json::json!({"config_hash": "h"})).unwrap();
        assert!(should_write(&p, Policy::Fail, "h").is_err());
        assert!(should_write(&p, Policy::Force, "other").unwrap());
        assert!(!should_write(&p, Policy::Resume, "h").unwrap());
        let err = should_write(&p, Policy::Resume, "other").unwrap_err();
        assert_eq!(crate::failure::kind_of(&err), "hash_mismatch");
        assert!(should_write(dir.path().join("empty_dir").as_path(), Policy::Fail, "h").unwrap());
    }

    #[test]
    fn sibling_names() {
        assert_eq!(sibling(Path::new("a/mask.json"), "trace.csv"), PathBuf::from("a/mask.trace.csv"));
    }
}
