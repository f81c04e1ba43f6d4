use rand::Rng;

use crate::error::{RdaError, Result};

use super::replication_rng;

/// Median with the two middle values averaged for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Sample standard deviation (n − 1 denominator); zero for a single value.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

fn resample_stats(values: &[f64], n_boot: usize, seed: u64, stat: impl Fn(&mut [f64]) -> f64) -> Vec<f64> {
    let mut rng = replication_rng(seed, u64::MAX);
    let n = values.len();
    let mut buf = vec![0.0; n];
    (0..n_boot)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = values[rng.random_range(0..n)];
            }
            stat(&mut buf)
        })
        .collect()
}

/// Percentile bootstrap interval for the median.
///
/// The endpoints are widened, if needed, to contain the sample median.
pub fn bootstrap_median_ci(values: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(RdaError::EmptySample("bootstrap of an empty vector".into()));
    }
    if !(level > 0.0 && level < 1.0) || n_boot == 0 {
        return Err(RdaError::Config("bootstrap needs 0 < level < 1 and n_boot >= 1".into()));
    }
    let mut meds = resample_stats(values, n_boot, seed, |b| {
        b.sort_by(f64::total_cmp);
        median_sorted(b)
    });
    meds.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let m = median(values);
    let lo = quantile_sorted(&meds, alpha / 2.0).min(m);
    let hi = quantile_sorted(&meds, 1.0 - alpha / 2.0).max(m);
    Ok((lo, hi))
}

/// Bootstrap standard error of the sample standard deviation.
pub fn bootstrap_sd_se(values: &[f64], n_boot: usize, seed: u64) -> Result<f64> {
    if values.len() < 2 {
        return Err(RdaError::EmptySample("need at least two values".into()));
    }
    let sds = resample_stats(values, n_boot, seed, |b| sample_sd(b));
    Ok(sample_sd(&sds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_vector_gives_point_interval() {
        let (lo, hi) = bootstrap_median_ci(&[2.5; 17], 300, 0.95, 1).unwrap();
        assert_eq!((lo, hi), (2.5, 2.5));
    }

    #[test]
    fn interval_stays_within_data_range() {
        for seed in 0..20 {
            let (lo, hi) = bootstrap_median_ci(&[1.0, 2.0, 3.0], 300, 0.95, seed).unwrap();
            assert!(1.0 <= lo && lo <= 2.0 && 2.0 <= hi && hi <= 3.0);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let v: Vec<f64> = (0..50).map(|k| (k as f64 * 0.37).sin()).collect();
        assert_eq!(bootstrap_median_ci(&v, 200, 0.9, 4).unwrap(), bootstrap_median_ci(&v, 200, 0.9, 4).unwrap());
    }

    #[test]
    fn median_of_even_length_averages() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn empty_input_errors() {
        assert!(bootstrap_median_ci(&[], 10, 0.95, 0).is_err());
    }
}
