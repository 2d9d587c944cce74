//! Scalar special functions used by the bounded normalizers.
//!
//! `erf` is evaluated with an all-positive power series below
//! [`SERIES_CUTOFF`] and with a Lentz continued fraction for `erfc`
//! above it. Both branches stay within a few ulp of the true value, well
//! under the 1e-12 absolute error budget the saturation thresholds need.

use std::f64::consts::PI;
use std::sync::LazyLock;

/// Output magnitude above which a bounded nonlinearity counts as saturated.
pub const SATURATION_LEVEL: f64 = 0.99;

const SERIES_CUTOFF: f64 = 3.0;
const ERFC_FRACTION_CUTOFF: f64 = 2.0;
const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// The error function.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    let v = if ax < SERIES_CUTOFF {
        erf_series(ax)
    } else {
        1.0 - erfc_continued_fraction(ax)
    };
    v.copysign(x)
}

/// Complementary error function `1 - erf(x)`.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    // the fraction still converges quickly here and avoids cancellation
    if x >= ERFC_FRACTION_CUTOFF {
        erfc_continued_fraction(x)
    } else if x <= -ERFC_FRACTION_CUTOFF {
        2.0 - erfc_continued_fraction(-x)
    } else {
        1.0 - erf(x)
    }
}

/// Derivative of erf: `2 exp(-u^2) / sqrt(pi)`.
#[inline]
pub fn erf_prime(u: f64) -> f64 {
    FRAC_2_SQRT_PI * (-u * u).exp()
}

// erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n 2^n x^(2n+1) / (2n+1)!!
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

// erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
fn erfc_continued_fraction(x: f64) -> f64 {
    if x > 27.0 {
        return 0.0;
    }
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 * 0.5;
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
    }
    (-x * x).exp() / (PI.sqrt() * f)
}

/// Derivative of tanh in terms of its input.
#[inline]
pub fn tanh_prime(u: f64) -> f64 {
    let t = u.tanh();
    1.0 - t * t
}

/// Derivative of asinh.
#[inline]
pub fn asinh_prime(u: f64) -> f64 {
    1.0 / (1.0 + u * u).sqrt()
}

/// Bisection for the positive root of `f(u) = target` on `[lo, hi]`,
/// assuming `f` is increasing there.
pub fn bisect_increasing(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

static ERF_THRESHOLD: LazyLock<f64> =
    LazyLock::new(|| bisect_increasing(erf, SATURATION_LEVEL, 0.0, 6.0));
static TANH_THRESHOLD: LazyLock<f64> =
    LazyLock::new(|| bisect_increasing(f64::tanh, SATURATION_LEVEL, 0.0, 10.0));

/// `|u|` beyond which `|erf(u)| > 0.99` (about 1.8214).
pub fn erf_saturation_threshold() -> f64 {
    *ERF_THRESHOLD
}

/// `|u|` beyond which `|tanh(u)| > 0.99` (about 2.6467).
pub fn tanh_saturation_threshold() -> f64 {
    *TANH_THRESHOLD
}

#[cfg(test)]
mod tests {
    use super::*;

    // Composite Simpson quadrature of the erf integrand; independent of both
    // evaluation branches above.
    fn erf_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let f = |t: f64| (-t * t).exp();
        let mut acc = f(0.0) + f(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        FRAC_2_SQRT_PI * acc * h / 3.0
    }

    #[test]
    fn erf_matches_quadrature_oracle() {
        let mut x = -6.0;
        while x <= 6.0 {
            let got = erf(x);
            let want = erf_quadrature(x);
            assert!((got - want).abs() < 1e-12, "erf({x}) = {got}, oracle {want}");
            x += 0.0137;
        }
    }

    #[test]
    fn erf_matches_libm_across_branch_switch() {
        for i in 0..4000 {
            let x = -8.0 + i as f64 * 0.004;
            assert!((erf(x) - libm::erf(x)).abs() < 1e-14, "x = {x}");
        }
        for x in [2.999_999_999, 3.0, 3.000_000_001] {
            assert!((erf(x) - libm::erf(x)).abs() < 1e-15);
            assert!((erfc(x) - libm::erfc(x)).abs() / libm::erfc(x) < 1e-12);
        }
        for i in 0..1000 {
            let x = 1.5 + i as f64 * 0.01;
            let rel = (erfc(x) - libm::erfc(x)).abs() / libm::erfc(x);
            assert!(rel < 1e-12, "erfc({x}) relative error {rel}");
        }
    }

    #[test]
    fn erf_odd_and_bounded() {
        assert_eq!(erf(0.0), 0.0);
        assert_eq!(erf(40.0), 1.0);
        assert_eq!(erf(-40.0), -1.0);
        for x in [0.1, 0.7, 1.5, 2.9, 3.1, 5.0] {
            assert_eq!(erf(-x), -erf(x));
            assert!(erf(x) < 1.0 || x > 5.8);
        }
        assert!(erf(f64::NAN).is_nan());
    }

    #[test]
    fn erf_prime_matches_central_difference() {
        let h = 1e-6;
        let u = 0.7;
        let fd = (erf(u + h) - erf(u - h)) / (2.0 * h);
        assert!((fd - erf_prime(u)).abs() / erf_prime(u) < 1e-6);
    }

    #[test]
    fn thresholds_match_root_finding_oracles() {
        // tanh has a closed-form inverse.
        let tanh_exact = 0.5 * ((1.0 + SATURATION_LEVEL) / (1.0 - SATURATION_LEVEL)).ln();
        assert!((tanh_saturation_threshold() - tanh_exact).abs() < 1e-12);
        // Newton on the quadrature oracle for erf.
        let mut u: f64 = 1.8;
        for _ in 0..20 {
            u -= (erf_quadrature(u) - SATURATION_LEVEL) / erf_prime(u);
        }
        assert!((erf_saturation_threshold() - u).abs() < 1e-10);
        assert!((erf_saturation_threshold() - 1.8214).abs() < 1e-3);
        assert!((tanh_saturation_threshold() - 2.6467).abs() < 1e-3);
    }
}
