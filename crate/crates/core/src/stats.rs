//! Small sample-statistics helpers shared by simulation, calibration, and
//! verification.

/// Sample mean; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n-1 denominator); 0 when fewer than two
/// observations.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn se_mean(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::INFINITY;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Standard error of the sample variance, from the fourth central moment:
/// `sqrt((m4 - m2^2) / n)`.
pub fn se_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::INFINITY;
    }
    let m = mean(xs);
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for x in xs {
        let d2 = (x - m) * (x - m);
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n as f64;
    m4 /= n as f64;
    ((m4 - m2 * m2).max(0.0) / n as f64).sqrt()
}

/// `log(mean(exp(z_i)))` with max-shift stabilization.
pub fn log_mean_exp(zs: &[f64]) -> f64 {
    assert!(!zs.is_empty(), "log_mean_exp of an empty slice");
    let m = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = zs.iter().map(|z| (z - m).exp()).sum();
    m + (sum / zs.len() as f64).ln()
}
