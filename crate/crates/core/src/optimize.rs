//! Small derivative-free optimisers.

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section minimisation of a unimodal `f` on `[a, b]`.
///
/// On return `[a, b]` is the final bracket; the best point found is returned.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, a: &mut f64, b: &mut f64, tol: f64) -> f64 {
    let mut x1 = *b - INV_PHI * (*b - *a);
    let mut x2 = *a + INV_PHI * (*b - *a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while (*b - *a).abs() > tol * (1.0 + x1.abs().max(x2.abs())) {
        if f1 <= f2 {
            *b = x2;
            x2 = x1;
            f2 = f1;
            x1 = *b - INV_PHI * (*b - *a);
            f1 = f(x1);
        } else {
            *a = x1;
            x1 = x2;
            f1 = f2;
            x2 = *a + INV_PHI * (*b - *a);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder–Mead simplex minimisation.
///
/// Stops when both the simplex diameter and the spread of function values fall
/// below `xtol` / `ftol`, or after `max_iter` iterations.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    xtol: f64,
    ftol: f64,
    max_iter: usize,
) -> NelderMeadResult {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step[i];
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| sanitize(f(x))).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let diam = simplex[1..]
            .iter()
            .map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if diam <= xtol && (values[n] - values[0]).abs() <= ftol {
            converged = true;
            break;
        }

        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };

        let xr = along(-1.0);
        let fr = sanitize(f(&xr));
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = sanitize(f(&xe));
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = along(-0.5);
                let fc = sanitize(f(&xc));
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = sanitize(f(&xc));
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                // Shrink towards the best vertex.
                for i in 1..=n {
                    for j in 0..n {
                        simplex[i][j] = simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]);
                    }
                    values[i] = sanitize(f(&simplex[i]));
                }
            }
        }
    }
    let best = (0..=n).min_by(|&i, &j| values[i].total_cmp(&values[j])).unwrap();
    NelderMeadResult { x: simplex[best].clone(), fx: values[best], iterations, converged }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}
