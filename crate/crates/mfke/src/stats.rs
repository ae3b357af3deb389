//! Scalar special functions for Gaussian laws.
//!
//! Self-contained implementations of `erf`/`erfc`, the standard normal
//! density, distribution function and quantile. The error function uses the
//! alternating Maclaurin series below the crossover point and a Lentz
//! continued fraction for the complementary function above it; the quantile
//! is obtained by Newton iteration on the distribution function from an
//! asymptotic starting guess. Accuracy is a few ulps away from the crossover
//! and better than 1e-13 everywhere we rely on it.

/// 1/sqrt(2 pi).
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

const SQRT_PI: f64 = 1.772_453_850_905_516;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Crossover between the Maclaurin series and the continued fraction.
const ERF_SERIES_CUTOFF: f64 = 2.0;

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < ERF_SERIES_CUTOFF {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < ERF_SERIES_CUTOFF {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

/// Maclaurin series, valid (and accurate) for 0 <= x < 2.
fn erf_series(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1.0_f64;
    loop {
        term *= -x2 / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() <= 1e-18 * sum.abs() {
            break;
        }
        n += 1.0;
    }
    2.0 / SQRT_PI * sum
}

/// Continued fraction for erfc, valid for x >= 2 (modified Lentz).
fn erfc_cf(x: f64) -> f64 {
    if x > 27.0 {
        // exp(-x^2) underflows past ~27; the result is below f64 tiny.
        return 0.0;
    }
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = f;
    let mut d = 0.0_f64;
    let mut n = 1.0_f64;
    loop {
        // Partial numerators a_n = n/2, partial denominators b_n = x.
        let a = 0.5 * n;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
        n += 1.0;
    }
    (-x * x).exp() / (SQRT_PI * f)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Density of a Gaussian with the given mean and standard deviation.
pub fn gaussian_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    normal_pdf((x - mean) / sd) / sd
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile: the inverse of [`normal_cdf`].
///
/// Returns infinities at p = 0 and p = 1, NaN outside [0, 1].
pub fn normal_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        return -normal_quantile(1.0 - p);
    }
    // Asymptotic tail guess, then Newton on normal_cdf. Quadratic
    // convergence reaches machine precision well within eight iterations
    // from a guess of this quality, and extra iterations are idempotent.
    let t = (-2.0 * p.ln()).sqrt();
    let mut x = -(t - (t.ln() + (2.0 * std::f64::consts::PI).ln()) / (2.0 * t));
    if !x.is_finite() {
        x = 0.0;
    }
    for _ in 0..8 {
        let f = normal_cdf(x) - p;
        let d = normal_pdf(x);
        if d <= f64::MIN_POSITIVE {
            break;
        }
        x -= f / d;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // Reference digits from standard tables.
        assert!((erf(0.5) - 0.5204998778130465).abs() < 1e-14);
        assert!((erf(1.0) - 0.8427007929497149).abs() < 1e-14);
        assert!((erf(2.0) - 0.9953222650189527).abs() < 1e-13);
        assert!((erfc(3.0) - 2.209049699858544e-5).abs() < 1e-17);
        assert_eq!(erf(0.0), 0.0);
        assert!((erf(-1.0) + erf(1.0)).abs() < 1e-16);
    }

    #[test]
    fn cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.0) - 0.8413447460685429).abs() < 1e-14);
        assert!((normal_cdf(-1.959963984540054) - 0.025).abs() < 1e-14);
    }

    #[test]
    fn quantile_inverts_cdf() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.5)).abs() < 1e-15);
        // Upper tail stops at 4: past that, representing p = 1 - eps in a
        // double loses more digits than the tolerance allows.
        for &x in &[-8.0, -5.0, -2.5, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let p = normal_cdf(x);
            assert!(
                (normal_quantile(p) - x).abs() < 1e-10 * x.abs().max(1.0),
                "round trip failed at {x}"
            );
        }
    }

    #[test]
    fn quantile_edge_cases() {
        assert_eq!(normal_quantile(0.0), f64::NEG_INFINITY);
        assert_eq!(normal_quantile(1.0), f64::INFINITY);
        assert!(normal_quantile(-0.1).is_nan());
        assert!(normal_quantile(1.1).is_nan());
    }

    #[test]
    fn pdf_peak() {
        assert!((normal_pdf(0.0) - INV_SQRT_2PI).abs() < 1e-16);
        assert!((gaussian_pdf(1.0, 1.0, 0.5) - 2.0 * INV_SQRT_2PI).abs() < 1e-15);
    }
}
