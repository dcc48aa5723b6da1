use proptest::prelude::*;

use rtshift::branching::{bp_summary, extinction_probs, extinction_quadratic, growth_rate};
use rtshift::data::{preprocess, Preprocessed, RawSeries, NBA_ETA};
use rtshift::surrogate::Standardizer;
use rtshift::timeshift::{GgParams, TimeShiftLaw};
use rtshift::ModelParams;

fn params() -> impl Strategy<Value = ModelParams> {
    (0.2f64..40.0, 0.5f64..10.0, 0.1f64..5.0, 0.2f64..15.0, 2.0f64..30.0)
        .prop_map(|(r0, k, delta, rho, c)| ModelParams::new(r0, k, delta, rho, c, 0.0).unwrap())
}

fn gg() -> impl Strategy<Value = GgParams> {
    (0.05f64..3.0, 0.2f64..3.0, 0.2f64..3.0).prop_map(|(a, d, p)| GgParams::new(a, d, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn one_is_a_root_of_the_extinction_quadratic(p in params()) {
        let scale = p.rho * (p.c + p.beta_star()) + p.c * (p.delta + p.rho);
        prop_assert!(extinction_quadratic(&p, 1.0).abs() <= 1e-12 * scale);
    }

    #[test]
    fn extinction_probability_is_a_root_in_unit_interval(p in params()) {
        let q = extinction_probs(&p);
        prop_assert!(q.iter().all(|x| (0.0..=1.0).contains(x)));
        if p.r0 > 1.0 {
            let scale = p.rho * (p.c + p.beta_star());
            prop_assert!(extinction_quadratic(&p, q[2]).abs() <= 1e-10 * scale);
            prop_assert!(bp_summary(&p).unwrap().q_star < 1.0);
        } else {
            prop_assert_eq!(q[0], 1.0);
        }
    }

    #[test]
    fn growth_sign_follows_r0(p in params()) {
        let lambda = growth_rate(&p);
        if (p.r0 - 1.0).abs() > 1e-6 {
            prop_assert_eq!(lambda > 0.0, p.r0 > 1.0, "R0 {} λ {}", p.r0, lambda);
        }
    }

    #[test]
    fn law_invariant_to_joint_rescaling(g in gg(), lambda in 0.5f64..8.0, mu_w in 0.01f64..2.0, s in 0.01f64..100.0, tau in -8.0f64..8.0) {
        let base = TimeShiftLaw::new(lambda, mu_w, 0.3, g).unwrap();
        let scaled = TimeShiftLaw::new(lambda, mu_w * s, 0.3, GgParams::new(g.a * s, g.d, g.p).unwrap()).unwrap();
        prop_assert!((base.log_pdf(tau) - scaled.log_pdf(tau)).abs() <= 1e-9 * (1.0 + base.log_pdf(tau).abs()));
        prop_assert!((base.cdf(tau) - scaled.cdf(tau)).abs() <= 1e-12);
    }

    #[test]
    fn law_is_change_of_variables_of_w(g in gg(), lambda in 0.5f64..8.0, mu_w in 0.01f64..2.0, tau in -8.0f64..8.0) {
        let law = TimeShiftLaw::new(lambda, mu_w, 0.3, g).unwrap();
        let w = mu_w * (lambda * tau).exp();
        let expect = g.logpdf(w) + (lambda * w).ln();
        prop_assert!((law.log_pdf(tau) - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        prop_assert!((law.cdf(tau) - g.cdf(w)).abs() <= 1e-12);
    }

    #[test]
    fn preprocess_is_idempotent(values in prop::collection::vec(prop_oneof![Just(NBA_ETA), 2.7f64..9.0], 1..40), start in -20i32..5) {
        let days: Vec<f64> = (0..values.len()).map(|i| (start + i as i32) as f64).collect();
        let raw = RawSeries::new("x", days, values, NBA_ETA).unwrap();
        if let Preprocessed::Included(once) = preprocess(&raw).unwrap() {
            prop_assert_eq!(preprocess(&once).unwrap(), Preprocessed::Included(once.clone()));
        }
    }

    #[test]
    fn standardized_columns_have_unit_moments(rows in prop::collection::vec((0.1f64..30.0, 0.1f64..3.0, 0.1f64..12.0), 3..200)) {
        let rows: Vec<[f64; 3]> = rows.into_iter().map(|(a, b, c)| [a, b, c]).collect();
        let Ok(st) = Standardizer::fit(&rows) else { return Ok(()) };
        let z: Vec<[f64; 3]> = rows.iter().map(|r| st.apply(*r)).collect();
        let n = z.len() as f64;
        for j in 0..3 {
            let m = z.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = z.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            prop_assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9, "column {}: mean {}, var {}", j, m, v);
        }
        for (r, zr) in rows.iter().zip(&z) {
            let back = st.invert(*zr);
            for j in 0..3 {
                prop_assert!((back[j] - r[j]).abs() <= 1e-12 * r[j].abs().max(1.0));
            }
        }
    }
}
