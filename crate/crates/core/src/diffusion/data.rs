//! Toy training sets.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Two interleaved half circles, standardised to roughly unit scale.
    TwoMoons { noise: f64 },
    /// Isotropic Gaussians with centres evenly spaced on a circle.
    GaussianMixture { components: usize, radius: f64, std: f64 },
    /// Grayscale PNG/PGM files in a directory, resized to `side × side` and
    /// scaled to [−1, 1].
    TinyImages { dir: PathBuf, side: usize },
}

#[derive(Clone, Debug)]
pub enum Dataset {
    TwoMoons { noise: f64 },
    GaussianMixture { components: usize, radius: f64, std: f64 },
    Images { side: usize, images: Vec<Vec<f32>> },
}

// Mean and per-axis spread of the noise-free moons, used for standardisation.
const MOONS_CENTER: [f64; 2] = [0.5, 0.25];
const MOONS_SCALE: [f64; 2] = [0.866, 0.5];

impl Dataset {
    /// Builds the dataset, reading image files if needed.
    pub fn from_spec(spec: &DatasetSpec) -> Result<Self> {
        match spec {
            &DatasetSpec::TwoMoons { noise } => {
                if !(noise >= 0.0) {
                    return Err(Error::invalid("two-moons noise must be non-negative"));
                }
                Ok(Dataset::TwoMoons { noise })
            }
            &DatasetSpec::GaussianMixture { components, radius, std } => {
                if components == 0 || !(std > 0.0) {
                    return Err(Error::invalid("gaussian mixture needs components > 0 and std > 0"));
                }
                Ok(Dataset::GaussianMixture { components, radius, std })
            }
            DatasetSpec::TinyImages { dir, side } => load_images(dir, *side),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Dataset::TwoMoons { .. } | Dataset::GaussianMixture { .. } => 2,
            Dataset::Images { side, .. } => side * side,
        }
    }

    /// `n` independent draws as an `[n, data_dim]` matrix.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Tensor {
        let d = self.data_dim();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            match self {
                Dataset::TwoMoons { noise } => {
                    let theta = rng.gen_range(0.0..std::f64::consts::PI);
                    let (x, y) = if rng.gen_bool(0.5) {
                        (theta.cos(), theta.sin())
                    } else {
                        (1.0 - theta.cos(), 0.5 - theta.sin())
                    };
                    let nx: f64 = StandardNormal.sample(rng);
                    let ny: f64 = StandardNormal.sample(rng);
                    out.push(((x + noise * nx - MOONS_CENTER[0]) / MOONS_SCALE[0]) as f32);
                    out.push(((y + noise * ny - MOONS_CENTER[1]) / MOONS_SCALE[1]) as f32);
                }
                Dataset::GaussianMixture { components, radius, std } => {
                    let k = rng.gen_range(0..*components);
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / *components as f64;
                    let nx: f64 = StandardNormal.sample(rng);
                    let ny: f64 = StandardNormal.sample(rng);
                    out.push((radius * angle.cos() + std * nx) as f32);
                    out.push((radius * angle.sin() + std * ny) as f32);
                }
                Dataset::Images { images, .. } => {
                    let i = rng.gen_range(0..images.len());
                    out.extend_from_slice(&images[i]);
                }
            }
        }
        Tensor::matrix(n, d, out).expect("sized by construction")
    }
}

fn load_images(dir: &Path, side: usize) -> Result<Dataset> {
    if side == 0 {
        return Err(Error::invalid("image side must be positive"));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "pgm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no PNG/PGM images in {}", dir.display())));
    }
    let images = paths
        .iter()
        .map(|p| {
            let img = image::open(p)
                .map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?
                .into_luma8();
            let img = image::imageops::resize(&img, side as u32, side as u32, image::imageops::FilterType::Triangle);
            Ok(img.pixels().map(|px| f32::from(px.0[0]) / 127.5 - 1.0).collect())
        })
        .collect::<Result<Vec<Vec<f32>>>>()?;
    Ok(Dataset::Images { side, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_moons_is_roughly_standardised() {
        let d = Dataset::from_spec(&DatasetSpec::TwoMoons { noise: 0.05 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = d.sample(&mut rng, 20_000);
        for axis in 0..2 {
            let vals: Vec<f64> = (0..20_000).map(|i| f64::from(x.row(i)[axis])).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 0.05, "axis {axis} mean {mean}");
            assert!((0.7..1.3).contains(&var.sqrt()), "axis {axis} std {}", var.sqrt());
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let d = Dataset::from_spec(&DatasetSpec::GaussianMixture {
            components: 8,
            radius: 2.0,
            std: 0.1,
        })
        .unwrap();
        let a = d.sample(&mut ChaCha8Rng::seed_from_u64(9), 50);
        let b = d.sample(&mut ChaCha8Rng::seed_from_u64(9), 50);
        assert_eq!(a, b);
    }

    #[test]
    fn loads_image_directory() {
        let dir = tempfile::tempdir().unwrap();
        for k in 0..3u8 {
            let img = image::GrayImage::from_fn(16, 16, |x, y| image::Luma([((x + y) as u8).wrapping_mul(8 + k)]));
            img.save(dir.path().join(format!("img{k}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let d = Dataset::from_spec(&DatasetSpec::TinyImages {
            dir: dir.path().to_path_buf(),
            side: 8,
        })
        .unwrap();
        assert_eq!(d.data_dim(), 64);
        let x = d.sample(&mut ChaCha8Rng::seed_from_u64(1), 4);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn missing_directory_is_an_error() {
        let spec = DatasetSpec::TinyImages {
            dir: PathBuf::from("/nonexistent/blockskip"),
            side: 8,
        };
        assert!(Dataset::from_spec(&spec).is_err());
    }
}
