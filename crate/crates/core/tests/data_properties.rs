use std::collections::HashSet;

use assnn::data::{gradient_to_original_units, minmax_normalize, prescale, stratified_split_indices, validation_tail, AlternativeSpec, AttributeSchema, ChoiceDataset, MuUnits};
use proptest::prelude::*;

fn schema() -> AttributeSchema {
    AttributeSchema::new(vec![AlternativeSpec::new("1", "TC1", &["TT1", "HE1"]), AlternativeSpec::new("2", "TC2", &["TT2"]), AlternativeSpec::new("3", "TC3", &["TT3"])], "CHOICE", None).unwrap()
}

fn dataset_strategy() -> impl Strategy<Value = ChoiceDataset> {
    (8usize..60).prop_flat_map(|n| {
        (prop::collection::vec(prop::collection::vec(0.0f64..500.0, 7), n), prop::collection::vec(0usize..3, n)).prop_map(|(mut rows, choices)| {
            // Pin both ends of every column so no range is degenerate.
            rows[0] = vec![0.0; 7];
            rows[1] = vec![600.0; 7];
            ChoiceDataset::from_rows(schema(), rows, choices, None).unwrap()
        })
    })
}

fn choices_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2usize..40, 3).prop_flat_map(|counts| {
        let c: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
        Just(c).prop_shuffle()
    })
}

proptest! {
    #[test]
    fn split_partitions_rows_and_keeps_class_quotas(choices in choices_strategy(), frac in 0.05f64..0.6, seed in any::<u64>()) {
        let (train, test) = stratified_split_indices(&choices, 3, frac, seed).unwrap();
        let all: HashSet<usize> = train.iter().chain(&test).copied().collect();
        prop_assert_eq!(all.len(), choices.len());
        prop_assert_eq!(train.len() + test.len(), choices.len());
        prop_assert_eq!(test.len(), (choices.len() as f64 * frac).round() as usize);
        for c in 0..3 {
            let n_c = choices.iter().filter(|&&y| y == c).count() as f64;
            let t_c = test.iter().filter(|&&i| choices[i] == c).count() as f64;
            prop_assert!((t_c - n_c * frac).abs() < 1.0, "class {} quota {} got {}", c, n_c * frac, t_c);
            prop_assert!(train.iter().any(|&i| choices[i] == c));
        }
        prop_assert_eq!(stratified_split_indices(&choices, 3, frac, seed).unwrap(), (train, test));
    }

    #[test]
    fn normalisation_round_trips_and_stays_in_unit_box(ds in dataset_strategy(), factor in 1.0f64..200.0) {
        let pre = prescale(&ds, factor).unwrap();
        let (norm, rec) = minmax_normalize(&pre).unwrap();
        prop_assert!(norm.rows().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        let back = rec.denormalize(&norm).unwrap();
        for (a, b) in back.rows().flatten().zip(pre.rows().flatten()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let direct = rec.transform(&ds).unwrap();
        for (a, b) in direct.rows().flatten().zip(norm.rows().flatten()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        // Every cost column shares one pooled range.
        let ranges: Vec<f64> = ["TC1", "TC2", "TC3"].iter().map(|c| rec.bounds(c).unwrap().range()).collect();
        prop_assert!(ranges.iter().all(|&r| r == ranges[0]));
    }

    #[test]
    fn chain_rule_matches_finite_differences(ds in dataset_strategy(), a in -2.0f64..2.0, b in 0.1f64..3.0, col in 0usize..7) {
        let pre = prescale(&ds, 100.0).unwrap();
        let (_, rec) = minmax_normalize(&pre).unwrap();
        let name = &ds.columns()[col];
        let bounds = rec.bounds(name).unwrap();
        // f(z) = sin(a z) + b z^2 on the normalised value.
        let f = |z: f64| (a * z).sin() + b * z * z;
        let df = |z: f64| a * (a * z).cos() + 2.0 * b * z;
        let x = bounds.min + 0.37 * bounds.range();
        let h = 1e-6 * bounds.range();
        let fd = (f(bounds.scale(x + h)) - f(bounds.scale(x - h))) / (2.0 * h);
        let analytic = gradient_to_original_units(df(bounds.scale(x)), name, &rec, MuUnits::PerPrescaledUnit).unwrap();
        prop_assert!((analytic - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "analytic {} fd {}", analytic, fd);
        let per_original = gradient_to_original_units(df(bounds.scale(x)), name, &rec, MuUnits::PerOriginalUnit).unwrap();
        prop_assert!((per_original * 100.0 - analytic).abs() <= 1e-12 * analytic.abs().max(1.0));
    }

    #[test]
    fn validation_tail_preserves_order(ds in dataset_strategy(), frac in 0.05f64..0.9) {
        let (fit, val) = validation_tail(&ds, frac).unwrap();
        prop_assert_eq!(fit.len() + val.len(), ds.len());
        prop_assert_eq!(val.len(), (ds.len() as f64 * frac + 1e-9).floor() as usize);
        let joined: Vec<&[f64]> = fit.rows().chain(val.rows()).collect();
        let original: Vec<&[f64]> = ds.rows().collect();
        prop_assert_eq!(joined, original);
        let (fit2, val2) = validation_tail(&ds, frac).unwrap();
        prop_assert_eq!(fit2, fit);
        prop_assert_eq!(val2, val);
    }
}

#[test]
fn validation_tail_half_of_four() {
    let rows = (0..4).map(|i| vec![i as f64; 7]).collect();
    let ds = ChoiceDataset::from_rows(schema(), rows, vec![0, 1, 2, 0], None).unwrap();
    let (fit, val) = validation_tail(&ds, 0.5).unwrap();
    assert_eq!((fit.len(), val.len()), (2, 2));
    assert_eq!(val.row(0)[0], 2.0);
    assert!(validation_tail(&ds, 0.0).is_err());
}
