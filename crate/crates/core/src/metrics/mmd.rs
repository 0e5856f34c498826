//! Squared maximum mean discrepancy with an RBF kernel.
//!
//! `k(x, y) = exp(−‖x − y‖² / (2h²))`, where the bandwidth `h` defaults to the
//! median pairwise distance of the pooled samples.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

fn rows(x: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = x.dims2("mmd")?;
    if n < 2 {
        return Err(Error::invalid(format!("mmd needs at least 2 samples per set, got {n}")));
    }
    Ok((n, d))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
}

/// Pooled samples as row slices, checking the dimensions agree.
fn pool<'a>(a: &'a Tensor, b: &'a Tensor) -> Result<(Vec<&'a [f32]>, usize)> {
    let (na, da) = rows(a)?;
    let (nb, db) = rows(b)?;
    if da != db {
        return Err(Error::ShapeMismatch {
            op: "mmd",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out: Vec<&[f32]> = (0..na).map(|i| a.row(i)).collect();
    out.extend((0..nb).map(|i| b.row(i)));
    Ok((out, na))
}

/// Median pairwise Euclidean distance of the pooled sets.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (all, _) = pool(a, b)?;
    let mut d: Vec<f64> = Vec::with_capacity(all.len() * (all.len() - 1) / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(sq_dist(all[i], all[j]));
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let h = m.sqrt();
    Ok(if h > 0.0 { h } else { 1.0 })
}

/// Pooled kernel matrix, row-major.
struct Kernel {
    n: usize,
    k: Vec<f64>,
}

impl Kernel {
    fn new(all: &[&[f32]], h: f64) -> Self {
        let n = all.len();
        let inv = 1.0 / (2.0 * h * h);
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            k[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = (-sq_dist(all[i], all[j]) * inv).exp();
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        Kernel { n, k }
    }

    /// MMD² between the index sets `x` and `y`.
    fn mmd(&self, x: &[usize], y: &[usize], unbiased: bool) -> f64 {
        let within = |s: &[usize]| {
            let mut sum = 0.0;
            for &i in s {
                for &j in s {
                    if !unbiased || i != j {
                        sum += self.k[i * self.n + j];
                    }
                }
            }
            let m = s.len() as f64;
            sum / if unbiased { m * (m - 1.0) } else { m * m }
        };
        let mut cross = 0.0;
        for &i in x {
            for &j in y {
                cross += self.k[i * self.n + j];
            }
        }
        let cross = cross / (x.len() * y.len()) as f64;
        within(x) + within(y) - 2.0 * cross
    }
}

fn estimate(a: &Tensor, b: &Tensor, bandwidth: Option<f64>, unbiased: bool) -> Result<f64> {
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::invalid(format!("bandwidth must be positive, got {h}"))),
        None => median_bandwidth(a, b)?,
    };
    let (all, na) = pool(a, b)?;
    let kern = Kernel::new(&all, h);
    let x: Vec<usize> = (0..na).collect();
    let y: Vec<usize> = (na..all.len()).collect();
    Ok(kern.mmd(&x, &y, unbiased))
}

/// Unbiased MMD² estimate. Can be slightly negative when the sets agree.
pub fn mmd(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    estimate(a, b, bandwidth, true)
}

/// Biased (V-statistic) MMD² estimate; never negative.
pub fn mmd_biased(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    estimate(a, b, bandwidth, false)
}

/// The `quantile` of unbiased MMD² under random relabelling of the pooled
/// samples, i.e. the rejection threshold of a permutation two-sample test.
pub fn permutation_threshold(a: &Tensor, b: &Tensor, permutations: usize, quantile: f64, seed: u64) -> Result<f64> {
    if permutations == 0 || !(0.0..=1.0).contains(&quantile) {
        return Err(Error::invalid("need at least one permutation and a quantile in [0, 1]"));
    }
    let h = median_bandwidth(a, b)?;
    let (all, na) = pool(a, b)?;
    let kern = Kernel::new(&all, h);
    let mut rng = stream_rng(seed, Stream::Evaluation);
    let mut idx: Vec<usize> = (0..all.len()).collect();
    let mut stats: Vec<f64> = (0..permutations)
        .map(|_| {
            idx.shuffle(&mut rng);
            kern.mmd(&idx[..na], &idx[na..], true)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let pos = ((permutations - 1) as f64 * quantile).round() as usize;
    Ok(stats[pos])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian(seed: u64, n: usize, mean: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, 1.0).unwrap();
        Tensor::matrix(n, 2, (0..2 * n).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn self_comparison_is_not_positive() {
        let a = gaussian(1, 200, 0.0);
        assert!(mmd(&a, &a, None).unwrap() <= 1e-8);
        assert!(mmd_biased(&a, &a, None).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn symmetric() {
        let a = gaussian(1, 150, 0.0);
        let b = gaussian(2, 120, 0.5);
        let ab = mmd(&a, &b, None).unwrap();
        let ba = mmd(&b, &a, None).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn far_apart_sets_saturate() {
        // With a fixed unit bandwidth the cross term vanishes and each
        // within-set mean of k approaches E k(x, x') = 1/(1 + 2σ²/h²)^{d/2} = 1/3.
        let a = gaussian(3, 400, 0.0);
        let b = gaussian(4, 400, 100.0);
        let v = mmd(&a, &b, Some(1.0)).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn same_distribution_below_permutation_threshold() {
        let a = gaussian(5, 150, 0.0);
        let b = gaussian(6, 150, 0.0);
        let thr = permutation_threshold(&a, &b, 200, 0.95, 0).unwrap();
        assert!(mmd(&a, &b, None).unwrap() < thr);
        let c = gaussian(7, 150, 1.0);
        assert!(mmd(&a, &c, None).unwrap() > thr);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = gaussian(1, 10, 0.0);
        let b = Tensor::zeros(&[10, 3]);
        assert!(mmd(&a, &b, None).is_err());
        assert!(mmd(&a, &Tensor::zeros(&[1, 2]), None).is_err());
    }
}
