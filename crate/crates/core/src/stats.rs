//! Small statistics helpers: the standard normal, sample moments, rank correlation.

use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

const PROBIT_CLAMP: f64 = 1e-12;

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard-normal CDF; `p` is clamped into `[1e-12, 1 - 1e-12]`.
pub fn probit(p: f64) -> f64 {
    let p = p.clamp(PROBIT_CLAMP, 1.0 - PROBIT_CLAMP);
    let mut z = erfc_inv(2.0 * p) * -std::f64::consts::SQRT_2;
    // The library inverse is only accurate to ~1e-9; polish against the exact CDF.
    for _ in 0..2 {
        z -= (normal_cdf(z) - p) / normal_pdf(z);
    }
    z
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased (n - 1) sample standard deviation.
pub fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation (Pearson correlation of average ranks). A constant
/// input has no defined correlation and yields 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidValue(format!(
            "rank correlation needs two equal-length series of at least 2 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probit_round_trips_through_the_cdf() {
        for p in [1e-6, 0.01, 0.3, 0.5, 0.9, 0.999] {
            assert!((normal_cdf(probit(p)) - p).abs() < 1e-14 * p.max(1e-2) * 100.0);
        }
        assert_eq!(probit(0.5), 0.0);
    }

    #[test]
    fn sample_moments() {
        assert_eq!(mean(&[-1.0, 1.0]), 0.0);
        assert!((sample_std(&[-1.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    #[test]
    fn spearman_with_ties_matches_hand_computation() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // ranks of b: [1, 2.5, 2.5, 4]; Pearson against [1, 2, 3, 4] = 4.5 / sqrt(5 * 4.5)
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 5.0, 5.0, 9.0]).unwrap();
        assert!((r - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-15);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }
}
