//! Small order statistics and moments shared across modules.

/// Percentile with linear interpolation between closest ranks
/// (rank `q/100 · (n−1)`). Reorders `values`. Returns `None` when empty.
pub fn percentile_mut(values: &mut [f64], q: f64) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let rank = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let (_, lo_v, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_v = *lo_v;
    if hi == lo {
        return Some(lo_v);
    }
    // The smallest element of the upper partition is the next order statistic.
    let hi_v = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Some(lo_v + (hi_v - lo_v) * (rank - lo as f64))
}

pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    percentile_mut(&mut values.to_vec(), q)
}

/// Same interpolation rule over a 256-bin histogram of 8-bit values.
pub fn histogram_percentile(hist: &[u64; 256], q: f64) -> Option<f64> {
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return None;
    }
    let rank = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as u64;
    let hi = rank.ceil() as u64;
    let value_at = |r: u64| {
        let mut acc = 0u64;
        for (v, &c) in hist.iter().enumerate() {
            acc += c;
            if acc > r {
                return v as f64;
            }
        }
        255.0
    };
    let lo_v = value_at(lo);
    let hi_v = value_at(hi);
    Some(lo_v + (hi_v - lo_v) * (rank - lo as f64))
}

/// Median; the mean of the two central values for an even count.
pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 50.0)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Unbiased sample variance (n − 1 denominator).
pub fn sample_variance(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let m = mean(values)?;
    Some(values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64)
}
