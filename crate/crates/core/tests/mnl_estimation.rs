use assnn::data::{AlternativeSpec, AttributeSchema, ChoiceDataset};
use assnn::mnl::{fit_mnl, mnl_loglik_and_grad, mnl_marginal_utils, mnl_utilities, FitOptions, MnlSpec, UtilityForm};
use assnn::nncore::softmax;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schema() -> AttributeSchema {
    AttributeSchema::new(vec![AlternativeSpec::new("a", "TC1", &["TT1"]), AlternativeSpec::new("b", "TC2", &["TT2"]), AlternativeSpec::new("c", "TC3", &["TT3"])], "CHOICE", None).unwrap()
}

fn spec(form: UtilityForm) -> MnlSpec {
    MnlSpec::new(&schema(), form)
        .with_asc("b")
        .unwrap()
        .with_asc("c")
        .unwrap()
        .with_generic("B_TC", &["TC1", "TC2", "TC3"])
        .unwrap()
        .with_specific("B_TT_A", "a", "TT1")
        .unwrap()
        .with_specific("B_TT_B", "b", "TT2")
        .unwrap()
        .with_generic("B_TT", &["TT1", "TT2", "TT3"])
        .unwrap()
}

/// Choices drawn from the logit implied by `theta`.
fn simulate(spec: &MnlSpec, theta: &[f64], n: usize, seed: u64) -> ChoiceDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.gen_range(0.05..3.0)).collect()).collect();
    let choices = rows
        .iter()
        .map(|x| {
            let p = softmax(&mnl_utilities(spec, theta, x).unwrap()).unwrap();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            p.iter()
                .position(|&pj| {
                    acc += pj;
                    u < acc
                })
                .unwrap_or(p.len() - 1)
        })
        .collect();
    ChoiceDataset::from_rows(schema(), rows, choices, None).unwrap()
}

const THETA: [f64; 6] = [0.3, -0.4, -1.2, -0.5, 0.4, -0.8];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loglik_gradient_matches_finite_differences(theta in prop::collection::vec(-2.0f64..2.0, 6), log in any::<bool>(), seed in 0u64..1000) {
        let form = if log { UtilityForm::LogLinear } else { UtilityForm::Linear };
        let s = spec(form);
        let ds = simulate(&s, &THETA, 60, seed);
        let (_, g) = mnl_loglik_and_grad(&s, &theta, &ds).unwrap();
        for k in 0..6 {
            let h = 1e-5;
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (mnl_loglik_and_grad(&s, &up, &ds).unwrap().0 - mnl_loglik_and_grad(&s, &down, &ds).unwrap().0) / (2.0 * h);
            prop_assert!((g[k] - fd).abs() <= 1e-7 * fd.abs().max(1.0), "k {} analytic {} fd {}", k, g[k], fd);
        }
    }

    #[test]
    fn loglik_is_concave_along_lines(dir in prop::collection::vec(-1.0f64..1.0, 6), log in any::<bool>()) {
        let form = if log { UtilityForm::LogLinear } else { UtilityForm::Linear };
        let s = spec(form);
        let ds = simulate(&s, &THETA, 200, 5);
        let f = |t: f64| {
            let th: Vec<f64> = THETA.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            mnl_loglik_and_grad(&s, &th, &ds).unwrap().0
        };
        let vals: Vec<f64> = (-40..=40).map(|i| f(i as f64 * 0.1)).collect();
        for w in vals.windows(3) {
            prop_assert!(w[0] + w[2] - 2.0 * w[1] <= 1e-8 * w[1].abs(), "second difference positive: {:?}", w);
        }
        // Once the scan starts falling it never rises again.
        let peak = vals.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        prop_assert!(vals[peak..].windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()));
    }

    #[test]
    fn marginal_utilities_match_finite_differences(theta in prop::collection::vec(-2.0f64..2.0, 6), x in prop::collection::vec(0.05f64..3.0, 6), log in any::<bool>()) {
        let form = if log { UtilityForm::LogLinear } else { UtilityForm::Linear };
        let s = spec(form);
        let mu = mnl_marginal_utils(&s, &theta, &x).unwrap();
        for (j, entries) in mu.iter().enumerate() {
            for &(c, m) in entries {
                let h = 1e-6;
                let (mut up, mut down) = (x.clone(), x.clone());
                up[c] += h;
                down[c] -= h;
                let fd = (mnl_utilities(&s, &theta, &up).unwrap()[j] - mnl_utilities(&s, &theta, &down).unwrap()[j]) / (2.0 * h);
                prop_assert!((m - fd).abs() <= 1e-8 * fd.abs().max(1.0), "alt {} col {} mu {} fd {}", j, c, m, fd);
            }
        }
    }
}

#[test]
fn recovers_single_coefficient_within_three_standard_errors() {
    let s = MnlSpec::new(&schema(), UtilityForm::Linear).with_generic("B_TC", &["TC1", "TC2", "TC3"]).unwrap();
    let beta = -1.5;
    let ds = simulate(&s, &[beta], 10_000, 11);
    let est = fit_mnl(&s, &ds, &[0.0], FitOptions::default()).unwrap();
    assert!(est.converged);
    // Observed information by central differences of the analytic gradient.
    let h = 1e-4;
    let g = |b: f64| mnl_loglik_and_grad(&s, &[b], &ds).unwrap().1[0];
    let info = -(g(est.values[0] + h) - g(est.values[0] - h)) / (2.0 * h);
    let se = 1.0 / info.sqrt();
    assert!((est.values[0] - beta).abs() < 3.0 * se, "estimate {} se {se}", est.values[0]);
}

#[test]
fn starting_at_the_optimum_is_stationary() {
    for form in [UtilityForm::Linear, UtilityForm::LogLinear] {
        let s = spec(form);
        let ds = simulate(&s, &THETA, 2_000, 3);
        let first = fit_mnl(&s, &ds, &[0.0; 6], FitOptions::default()).unwrap();
        assert!(first.converged);
        let again = fit_mnl(&s, &ds, &first.values, FitOptions::default()).unwrap();
        assert!(again.converged);
        assert_eq!(again.iterations, 0);
        assert!((again.log_likelihood - first.log_likelihood).abs() <= 1e-10);
    }
}

#[test]
fn estimation_is_deterministic() {
    let s = spec(UtilityForm::LogLinear);
    let ds = simulate(&s, &THETA, 1_000, 9);
    let a = fit_mnl(&s, &ds, &[0.0; 6], FitOptions::default()).unwrap();
    let b = fit_mnl(&s, &ds, &[0.0; 6], FitOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn log_form_rejects_values_below_the_offset() {
    let s = spec(UtilityForm::LogLinear);
    let x = [0.05, 0.05, -0.2, 0.05, 0.05, 0.05];
    assert!(mnl_utilities(&s, &THETA, &x).is_err());
}
