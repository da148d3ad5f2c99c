//! Small numerical helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Standard normal CDF, via `erfc` for full precision in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, polished with Newton steps so that
/// `norm_cdf(norm_quantile(p))` round-trips to near machine precision.
pub fn norm_quantile(p: f64) -> f64 {
    let mut x = std_normal().inverse_cdf(p);
    for _ in 0..2 {
        if !x.is_finite() {
            return x;
        }
        let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if density <= 0.0 {
            break;
        }
        x -= (norm_cdf(x) - p) / density;
    }
    x
}

/// `z_{1-alpha/2}` for a two-sided interval at confidence `level`.
pub fn z_for_level(level: f64) -> f64 {
    norm_quantile(1.0 - (1.0 - level) / 2.0)
}

/// Two-sided normal p-value for a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    (2.0 * norm_cdf(-z.abs())).min(1.0)
}

/// Neumaier-compensated sum; order-dependent only through the input order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Sample variance with divisor `n - 1`.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    compensated_sum(values.iter().map(|v| (v - m) * (v - m))) / (n - 1) as f64
}

/// Deterministic RNG for substream `stream` of master seed `seed`.
///
/// Every parallel task draws from its own substream, so results do not
/// depend on how tasks are scheduled across workers.
pub fn substream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `ln C(n, k)`.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `C(n, k)` exactly, or `None` if it overflows `u128`.
pub fn choose_exact(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Binomial pmf computed in log space.
pub fn binom_pmf(n: u64, k: u64, prob: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if prob <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if prob >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (ln_choose(n, k) + k as f64 * prob.ln() + (n - k) as f64 * (-prob).ln_1p()).exp()
}

/// `P[Bin(n, prob) <= k]` by direct pmf summation.
pub fn binom_cdf(n: u64, k: u64, prob: f64) -> f64 {
    compensated_sum((0..=k.min(n)).map(|j| binom_pmf(n, j, prob))).min(1.0)
}

/// `P[Bin(n, prob) >= k]` by direct pmf summation.
pub fn binom_sf(n: u64, k: u64, prob: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    compensated_sum((k..=n).map(|j| binom_pmf(n, j, prob))).min(1.0)
}

/// Empirical quantile with linear interpolation (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
