use assnn::architectures::{build_network, Topology, Variant};
use assnn::data::{ingest_swissmetro, swissmetro_cost_time_schema, AlternativeSpec, AttributeSchema, ChoiceDataset, SwissmetroFilterConfig};
use assnn::mnl::UtilityForm;
use assnn::nncore::Activation;
use assnn::prepare::bundled_swissmetro;
use assnn::synthgen::{generate_choices, mean_true_vtt, sample_gumbel, true_vtt_at, DgpSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TT: [&str; 3] = ["TRAIN_TT", "SM_TT", "CAR_TT"];

/// Design-averaged true VTT per mode under the log-linear generator, computed
/// independently from the raw file.
const DATASET2_TRUE_VTT: [f64; 3] = [0.9925387398452845, 2.265185158998126, 1.1649261801089985];

fn design() -> ChoiceDataset {
    ingest_swissmetro(&bundled_swissmetro(), &SwissmetroFilterConfig::default()).unwrap().project(&swissmetro_cost_time_schema()).unwrap()
}

fn shares(ds: &ChoiceDataset) -> Vec<f64> {
    ds.choice_shares()
}

#[test]
fn zero_utility_gives_equal_shares() {
    let d = design();
    let dgp = DgpSpec::new(UtilityForm::Linear, 0.0, 0.0, d.schema(), &TT).unwrap();
    let ds = generate_choices(&d, &dgp, 1).unwrap();
    let n = ds.len() as f64;
    let sd = (1.0 / 3.0 * (2.0 / 3.0) / n).sqrt();
    for s in shares(&ds) {
        assert!((s - 1.0 / 3.0).abs() < 3.0 * sd, "share {s}");
    }
}

#[test]
fn replicated_row_frequencies_match_logit_probabilities() {
    let d = design();
    let row = d.row(17).to_vec();
    let n = 10_000;
    let rep = ChoiceDataset::from_rows(d.schema().clone(), vec![row.clone(); n], vec![0; n], None).unwrap();
    for dgp in [DgpSpec::linear_reference(d.schema(), &TT).unwrap(), DgpSpec::log_linear_reference(d.schema(), &TT).unwrap()] {
        let ds = generate_choices(&rep, &dgp, 4).unwrap();
        let v: Vec<f64> = (0..3)
            .map(|j| {
                let c = row[d.column_index(&dgp.cost_columns[j]).unwrap()] / 100.0;
                let t = row[d.column_index(&dgp.time_columns[j]).unwrap()] / 100.0;
                dgp.utility(c, t).unwrap()
            })
            .collect();
        let p = assnn::nncore::softmax(&v).unwrap();
        for (f, pj) in shares(&ds).iter().zip(&p) {
            let se = (pj * (1.0 - pj) / n as f64).sqrt();
            assert!((f - pj).abs() < 3.0 * se.max(1e-4), "frequency {f} probability {pj}");
        }
    }
}

#[test]
fn network_probabilities_match_simulated_frequencies() {
    let schema = AttributeSchema::new(vec![AlternativeSpec::new("a", "C1", &["T1"]), AlternativeSpec::new("b", "C2", &["T2"]), AlternativeSpec::new("c", "C3", &["T3"])], "y", None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = build_network(Variant::Ass, Topology::new(1, 5, Activation::Tanh).unwrap(), &schema, true, &mut rng).unwrap();
    let x = [0.2, 0.7, 0.5, 0.1, 0.9, 0.4];
    let v = net.utilities(&x).unwrap();
    let p = net.choice_probabilities(&x).unwrap();
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let u: Vec<f64> = v.iter().map(|vj| vj + sample_gumbel(&mut rng)).collect();
        let best = (0..3).max_by(|&a, &b| u[a].partial_cmp(&u[b]).unwrap()).unwrap();
        counts[best] += 1;
    }
    for (c, pj) in counts.iter().zip(&p) {
        let f = *c as f64 / n as f64;
        let se = (pj * (1.0 - pj) / n as f64).sqrt();
        assert!((f - pj).abs() < 3.0 * se, "frequency {f} probability {pj}");
    }
}

#[test]
fn generation_is_independent_of_thread_count() {
    let d = design();
    let dgp = DgpSpec::log_linear_reference(d.schema(), &TT).unwrap();
    let run = |threads| rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| generate_choices(&d, &dgp, 99).unwrap());
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, generate_choices(&d, &dgp, 99).unwrap());
    assert_ne!(one.choices(), generate_choices(&d, &dgp, 100).unwrap().choices());
    // Attributes are copied through.
    assert!(one.rows().zip(d.rows()).all(|(a, b)| a == b));
}

#[test]
fn design_averaged_true_vtt() {
    let d = design();
    assert_eq!(d.len(), 9036);
    let linear = mean_true_vtt(&d, &DgpSpec::linear_reference(d.schema(), &TT).unwrap()).unwrap();
    assert!(linear.iter().all(|v| (v - 1.5).abs() < 1e-12));
    let log = mean_true_vtt(&d, &DgpSpec::log_linear_reference(d.schema(), &TT).unwrap()).unwrap();
    for (got, want) in log.iter().zip(DATASET2_TRUE_VTT) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn log_linear_vtt_at_equal_arguments() {
    let d = design();
    let dgp = DgpSpec::log_linear_reference(d.schema(), &TT).unwrap();
    for x in [0.0, 0.3, 1.7] {
        assert!((true_vtt_at(&dgp, x, x) - 5.0 / 3.0).abs() < 1e-12);
    }
}
