//! Small numerical helpers shared by the estimators and fits.

use statrs::function::gamma::digamma;

/// Trigamma function ψ₁(x) for x > 0: upward recurrence to x ≥ 10, then the
/// asymptotic Bernoulli series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + inv2 / 2.0
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}

/// Log-domain statistics of a Gamma(k, μ/k) variate X (a k-average
/// periodogram bin with mean μ): `E[ln X] = ln μ + bias` and
/// `Var[ln X] = variance`, independent of μ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogGammaStats {
    pub bias: f64,
    pub variance: f64,
}

impl LogGammaStats {
    pub fn new(shape: f64) -> Self {
        Self {
            bias: digamma(shape) - shape.ln(),
            variance: trigamma(shape),
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Centered moving average with a window of `2 * half + 1`, shrinking at the
/// edges.
pub fn moving_average(values: &[f64], half: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Ordinary least-squares slope and intercept of `y` on `x`, with R².
pub fn linear_regression(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}
