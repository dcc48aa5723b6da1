//! Globally adaptive 21-point Gauss–Kronrod quadrature.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

// Kronrod abscissae on [0, 1]; odd indices are the embedded 10-point Gauss nodes.
const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_958_109_831_074,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub abs_error: f64,
    pub intervals: usize,
    pub evaluations: usize,
}

/// One 21-point Kronrod rule on `[a, b]`, returning the estimate and the
/// Kronrod–Gauss difference.
pub fn gk21<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let mut kronrod = fc * WGK[10];
    let mut gauss = 0.0;
    for j in 0..10 {
        let dx = half * XGK[j];
        let s = f(centre - dx) + f(centre + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Integrates `f` over `[a, b]`, bisecting the interval with the largest error
/// estimate until `error ≤ max(atol, rtol·|value|)`.
pub fn integrate<F: FnMut(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rtol: f64,
    atol: f64,
    max_intervals: usize,
) -> Result<QuadResult> {
    integrate_pieces(f, &[a, b], rtol, atol, max_intervals)
}

/// As [`integrate`], starting from the partition given by the sorted
/// `breaks`. Seeding the partition around a known narrow feature keeps the
/// first coarse rule from missing it.
pub fn integrate_pieces<F: FnMut(f64) -> f64>(
    mut f: F,
    breaks: &[f64],
    rtol: f64,
    atol: f64,
    max_intervals: usize,
) -> Result<QuadResult> {
    if breaks.len() < 2 || breaks.iter().any(|x| !x.is_finite()) {
        return Err(Error::Quadrature(format!("invalid partition {breaks:?}")));
    }
    if breaks.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Quadrature("partition must be sorted".into()));
    }
    let mut heap = BinaryHeap::new();
    let mut evaluations = 0;
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            let (v, e) = gk21(&mut f, w[0], w[1]);
            evaluations += 21;
            heap.push(Segment { a: w[0], b: w[1], value: v, error: e });
        }
    }
    if heap.is_empty() {
        return Ok(QuadResult { value: 0.0, abs_error: 0.0, intervals: 0, evaluations: 0 });
    }
    let mut total: f64 = heap.iter().map(|s| s.value).sum();
    let mut err: f64 = heap.iter().map(|s| s.error).sum();
    loop {
        if !total.is_finite() || !err.is_finite() {
            return Err(Error::Quadrature(format!("integrand produced {total}")));
        }
        if err <= atol.max(rtol * total.abs()) {
            break;
        }
        if heap.len() >= max_intervals {
            return Err(Error::Quadrature(format!(
                "no convergence after {} intervals (error {err:e}, value {total:e})",
                heap.len()
            )));
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(Error::Quadrature("interval collapsed below machine resolution".into()));
        }
        let (lv, le) = gk21(&mut f, worst.a, mid);
        let (rv, re) = gk21(&mut f, mid, worst.b);
        evaluations += 42;
        heap.push(Segment { a: worst.a, b: mid, value: lv, error: le });
        heap.push(Segment { a: mid, b: worst.b, value: rv, error: re });
        // Re-summing avoids drift from repeated add/subtract.
        total = heap.iter().map(|s| s.value).sum();
        err = heap.iter().map(|s| s.error).sum();
    }
    Ok(QuadResult { value: total, abs_error: err, intervals: heap.len(), evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact_to_degree_31() {
        let (v, _) = gk21(&mut |x: f64| x.powi(30) + 3.0 * x.powi(7), -1.0, 1.0);
        assert!((v - 2.0 / 31.0).abs() < 1e-15);
    }

    #[test]
    fn peaked_integrand() {
        let r = integrate(|x: f64| (-1e2 * (x - 0.3).powi(2)).exp(), -5.0, 5.0, 1e-12, 0.0, 500).unwrap();
        let exact = (std::f64::consts::PI / 1e2).sqrt();
        assert!((r.value - exact).abs() < 1e-12 * exact, "{} vs {exact}", r.value);
    }

    #[test]
    fn sqrt_singularity() {
        let r = integrate(|x: f64| x.sqrt(), 0.0, 1.0, 1e-10, 0.0, 500).unwrap();
        assert!((r.value - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn breakpoints_catch_narrow_spike() {
        let f = |x: f64| (-1e6 * (x - 3.217).powi(2)).exp();
        let exact = (std::f64::consts::PI / 1e6).sqrt();
        let r = integrate_pieces(f, &[-10.0, 3.2, 3.25, 10.0], 1e-10, 0.0, 500).unwrap();
        assert!((r.value - exact).abs() < 1e-10 * exact);
    }

    #[test]
    fn reports_failure() {
        let r = integrate(|x: f64| 1.0 / x.abs().max(1e-300), -1.0, 1.0, 1e-12, 0.0, 20);
        assert!(matches!(r, Err(Error::Quadrature(_))));
    }
}
