use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::{par, rng};

/// Bandwidth used when the samples have no spread.
pub const KDE_FALLBACK_BANDWIDTH: f64 = 1e-3;

fn standardized(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ss == 0.0 || !ss.is_finite() {
        return None;
    }
    Some(centered.into_iter().map(|v| v / ss).collect())
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("pearson_corr", &[a.len()], &[b.len()]));
    }
    if a.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 3 samples, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

/// Pearson product-moment correlation.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let za = standardized(a).ok_or(Error::ZeroVariance("first input"))?;
    let zb = standardized(b).ok_or(Error::ZeroVariance("second input"))?;
    Ok(super::dot(&za, &zb).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PermutationResult {
    pub r: f64,
    pub p_value: f64,
    pub n_perm: usize,
}

/// Two-sided permutation test for a Pearson correlation.
///
/// `p = (1 + #{|r_perm| >= |r_obs|}) / (1 + n_perm)`. Each shuffle draws
/// from its own derived stream, so the result does not depend on threading.
pub fn permutation_test(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<PermutationResult> {
    if n_perm < 100 {
        return Err(Error::InvalidArgument(format!("n_perm must be >= 100, got {n_perm}")));
    }
    check_pair(a, b)?;
    let za = standardized(a).ok_or(Error::ZeroVariance("first input"))?;
    let zb = standardized(b).ok_or(Error::ZeroVariance("second input"))?;
    let r = super::dot(&za, &zb).clamp(-1.0, 1.0);
    let threshold = r.abs() * (1.0 - 1e-12);
    let hits = par::map_range(n_perm, |i| {
        let mut idx: Vec<u32> = (0..zb.len() as u32).collect();
        idx.shuffle(&mut rng::rng(rng::derive(seed, i as u64)));
        let rp: f64 = za.iter().zip(&idx).map(|(x, &j)| x * zb[j as usize]).sum();
        usize::from(rp.abs() >= threshold)
    });
    let count: usize = hits.into_iter().sum();
    Ok(PermutationResult {
        r,
        p_value: (count + 1) as f64 / (n_perm + 1) as f64,
        n_perm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KdeResult {
    pub density: Vec<f64>,
    pub bandwidth: f64,
    /// Set when the samples had no spread and the fallback bandwidth was used.
    pub degenerate: bool,
}

/// Gaussian kernel density estimate with Scott's-rule bandwidth
/// `n^(-1/5) · std` (sample standard deviation).
pub fn gaussian_kde(samples: &[f64], eval_points: &[f64]) -> Result<KdeResult> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("kde needs at least one sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kde samples".into()));
    }
    let n = samples.len() as f64;
    let std = if samples.len() >= 2 {
        let mean = samples.iter().sum::<f64>() / n;
        (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let (bandwidth, degenerate) = if std > 0.0 {
        (std * n.powf(-0.2), false)
    } else {
        (KDE_FALLBACK_BANDWIDTH, true)
    };
    let norm = 1.0 / (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let density = eval_points
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| {
                    let z = (x - s) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(KdeResult {
        density,
        bandwidth,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corr_with_self_and_negation() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0];
        assert!((pearson_corr(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_corr(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn corr_hand_value() {
        // r = 5 / sqrt(2 * (38/3)) for (1,2,3) vs (2,4,7)
        let r = pearson_corr(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap();
        let expected = 5.0 / (2.0f64 * 38.0 / 3.0).sqrt();
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.9934).abs() < 1e-4);
    }

    #[test]
    fn corr_errors() {
        assert!(matches!(
            pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]),
            Err(Error::ZeroVariance(_))
        ));
        assert!(pearson_corr(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn permutation_identical_inputs() {
        let a: Vec<f64> = (0..50).map(|i| ((i * 37) % 50) as f64).collect();
        let res = permutation_test(&a, &a, 999, 3).unwrap();
        assert!(res.p_value <= 0.002);
        assert_eq!(res.p_value, 1.0 / 1000.0);
    }

    #[test]
    fn permutation_constant_input_errors() {
        let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(permutation_test(&a, &[2.0; 10], 100, 0).is_err());
        assert!(permutation_test(&a, &a, 10, 0).is_err());
    }

    #[test]
    fn kde_peak_and_symmetry() {
        let samples = [0.45, 0.5, 0.5, 0.55, 0.52, 0.48];
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let k = gaussian_kde(&samples, &grid).unwrap();
        let arg = (0..grid.len()).max_by(|&i, &j| k.density[i].total_cmp(&k.density[j])).unwrap();
        assert_eq!(arg, 50);
        let two = gaussian_kde(&[0.0, 1.0], &grid).unwrap();
        for i in 0..=50 {
            assert!((two.density[i] - two.density[100 - i]).abs() < 1e-12);
        }
        assert!(k.density.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn kde_zero_spread_flagged() {
        let k = gaussian_kde(&[0.3, 0.3, 0.3], &[0.3, 0.5]).unwrap();
        assert!(k.degenerate);
        assert_eq!(k.bandwidth, KDE_FALLBACK_BANDWIDTH);
        assert!(k.density[0] > k.density[1]);
    }
}
