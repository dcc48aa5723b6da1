//! Scalar densities, CDFs and quantiles used by the likelihood and the priors.
//!
//! Gamma distributions use the shape–scale convention throughout.

use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// `log Φ(z)` for the standard normal, accurate deep into the lower tail.
pub fn std_normal_logcdf(z: f64) -> f64 {
    if z == f64::INFINITY {
        return 0.0;
    }
    if z == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if z > -30.0 {
        if z > 38.5 {
            return 0.0;
        }
        if z > 5.0 {
            // log(1 - Q) with Q tiny.
            return (-0.5 * erfc(z / std::f64::consts::SQRT_2)).ln_1p();
        }
        return (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln();
    }
    // Asymptotic Mills-ratio expansion.
    let z2 = z * z;
    let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2) + 105.0 / (z2 * z2 * z2 * z2);
    -0.5 * z2 - (-z).ln() - LN_SQRT_2PI + series.ln()
}

pub fn normal_logcdf(x: f64, mean: f64, sd: f64) -> f64 {
    std_normal_logcdf((x - mean) / sd)
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

pub fn gamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    (shape - 1.0) * x.ln() - x / scale - ln_gamma(shape) - shape * scale.ln()
}

/// Regularised lower incomplete gamma `P(shape, x)`.
pub fn gamma_p(shape: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x == f64::INFINITY {
        1.0
    } else {
        gamma_lr(shape, x)
    }
}

/// Regularised upper incomplete gamma `Q(shape, x)`.
pub fn gamma_q(shape: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x == f64::INFINITY {
        0.0
    } else {
        gamma_ur(shape, x)
    }
}

/// Quantile of a unit-scale Gamma(`shape`) variable: solves `P(shape, x) = p`.
///
/// Newton iteration in `log x` on whichever of `P` or `Q` is smaller,
/// safeguarded by a bisection bracket.
pub fn gamma_quantile_unit(shape: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let lower = p <= 0.5;
    let resid = |y: f64| {
        let x = y.exp();
        if lower {
            gamma_p(shape, x) - p
        } else {
            (1.0 - p) - gamma_q(shape, x)
        }
    };
    let ln_gamma_a = ln_gamma(shape);
    // d/dy P(shape, e^y) = x · pdf(x).
    let slope = |y: f64| (shape * y - y.exp() - ln_gamma_a).exp();

    // Starting point: Wilson–Hilferty, or the small-x series for tiny p.
    let z = std_normal_quantile(p);
    let wh = shape * (1.0 - 1.0 / (9.0 * shape) + z / (3.0 * shape.sqrt())).powi(3);
    let small = (p.ln() + ln_gamma(shape + 1.0)) / shape;
    let mut y = if wh > 0.0 && shape > 0.5 { wh.ln() } else { small };
    if !y.is_finite() {
        y = shape.ln();
    }

    let mut lo = y;
    let mut hi = y;
    let mut step = 1.0;
    while resid(lo) > 0.0 {
        lo -= step;
        step *= 2.0;
    }
    step = 1.0;
    while resid(hi) < 0.0 {
        hi += step;
        step *= 2.0;
    }
    for _ in 0..200 {
        let r = resid(y);
        if r == 0.0 {
            break;
        }
        if r > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let mut next = y - r / slope(y);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - y).abs() <= 1e-14 * (1.0 + y.abs()) || hi - lo <= 1e-14 * (1.0 + y.abs());
        y = next;
        if done {
            break;
        }
    }
    y.exp()
}

pub fn half_normal_logpdf(x: f64, scale: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    std::f64::consts::LN_2 + normal_logpdf(x, 0.0, scale)
}

pub fn gumbel_logpdf(x: f64, loc: f64, scale: f64) -> f64 {
    let z = (x - loc) / scale;
    -scale.ln() - z - (-z).exp()
}

pub fn gumbel_median(loc: f64, scale: f64) -> f64 {
    loc - scale * std::f64::consts::LN_2.ln()
}

pub fn gumbel_quantile(loc: f64, scale: f64, p: f64) -> f64 {
    loc - scale * (-p.ln()).ln()
}

/// Trigamma `ψ₁(x)` for `x > 0`.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    acc + r + 0.5 * r2 + r * r2 * (1.0 / 6.0 - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 / 30.0)))
}

/// Tetragamma `ψ₂(x)` for `x > 0`.
pub fn tetragamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    acc - r2 - r2 * r - 0.5 * r2 * r2 + r2 * r2 * r2 * (1.0 / 6.0 - r2 * (1.0 / 6.0 - 0.3 * r2))
}

pub use statrs::function::gamma::digamma;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logcdf_matches_direct_in_body_and_is_finite_in_tail() {
        for z in [-5.0, -1.0, 0.0, 0.3, 2.0, 6.0] {
            assert!((std_normal_logcdf(z) - std_normal_cdf(z).ln()).abs() < 1e-12, "{z}");
        }
        assert!((std_normal_logcdf(0.0) - 0.5f64.ln()).abs() < 1e-15);
        // Continuity across the asymptotic switch.
        let a = std_normal_logcdf(-29.999_999);
        let b = std_normal_logcdf(-30.000_001);
        assert!((a - b).abs() < 1e-3, "{a} {b}");
        assert!(std_normal_logcdf(-1e3).is_finite());
    }

    #[test]
    fn gamma_quantile_round_trip() {
        for &shape in &[0.2, 0.7, 1.0, 3.3, 26.0, 150.0] {
            for &p in &[1e-10, 1e-6, 0.025, 0.5, 0.975, 1.0 - 1e-8] {
                let x = gamma_quantile_unit(shape, p);
                let back = gamma_p(shape, x);
                assert!((back - p).abs() < 1e-10 * p.max(1e-3).min(1.0) + 1e-14, "shape {shape} p {p}: {back}");
            }
        }
    }

    #[test]
    fn exponential_quantile_closed_form() {
        let x = gamma_quantile_unit(1.0, 0.5);
        assert!((x - std::f64::consts::LN_2).abs() < 1e-13);
    }

    #[test]
    fn polygamma_against_finite_differences() {
        for &x in &[0.3, 1.0, 2.5, 12.0] {
            let h = 1e-5;
            let t_fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((trigamma(x) - t_fd).abs() < 1e-6 * trigamma(x).abs(), "{x}");
            let q_fd = (trigamma(x + h) - trigamma(x - h)) / (2.0 * h);
            assert!((tetragamma(x) - q_fd).abs() < 1e-6 * tetragamma(x).abs(), "{x}");
        }
        // ψ₁(1) = π²/6.
        assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-13);
    }

    #[test]
    fn gumbel_median_value() {
        assert!((gumbel_median(-7.0, 3.0) - (-7.0 - 3.0 * std::f64::consts::LN_2.ln())).abs() < 1e-15);
        assert!((gumbel_quantile(-7.0, 3.0, 0.5) - gumbel_median(-7.0, 3.0)).abs() < 1e-12);
    }
}
