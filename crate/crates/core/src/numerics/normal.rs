//! Standard normal distribution.

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn normal_pdf(v: f64) -> f64 {
    (-0.5 * v * v - LN_SQRT_2PI).exp()
}

/// `Φ(v)`, the standard normal CDF.
///
/// The central region uses the all-positive Taylor series
/// `Φ(v) = ½ + φ(v) Σ v^(2n+1)/(2n+1)!!`, which has no cancellation. Tails
/// beyond `|v| ≥ 3` use the Laplace continued fraction for `1 − Φ(|v|)`, so
/// small tail probabilities keep full relative precision.
pub fn normal_cdf(v: f64) -> f64 {
    if v.is_nan() {
        return f64::NAN;
    }
    let a = v.abs();
    if a >= 3.0 {
        let tail = upper_tail(a);
        return if v > 0.0 { 1.0 - tail } else { tail };
    }
    let q = v * v;
    let mut sum = v;
    let mut term = v;
    let mut prev = 0.0;
    let mut i = 1.0;
    while sum != prev {
        prev = sum;
        i += 2.0;
        term *= q / i;
        sum = prev + term;
    }
    (0.5 + sum * normal_pdf(v)).clamp(0.0, 1.0)
}

/// `1 − Φ(x)` for `x ≥ 3`: `φ(x) / (x + 1/(x + 2/(x + 3/(x + …))))`.
fn upper_tail(x: f64) -> f64 {
    if x > 40.0 {
        return 0.0;
    }
    let mut t = x;
    for k in (1..=300).rev() {
        t = x + k as f64 / t;
    }
    normal_pdf(x) / t
}
