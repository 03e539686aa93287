//! Empirical Swissmetro run: MNL baselines, ASS-NN and ASU-DNN ensembles,
//! then marginal utilities, VTT and VoWT per mode with trimming and
//! travel-time bins.
//!
//! cargo run --release --example swissmetro_welfare -- [repetitions] [seed]

use assnn::architectures::{NetworkSpec, Topology, Variant};
use assnn::data::{ingest_swissmetro, MuUnits, SwissmetroFilterConfig};
use assnn::mnl::{fit_mnl, mnl_loglik_and_grad, FitOptions, MnlSpec, UtilityForm};
use assnn::nncore::Activation;
use assnn::prepare::{bundled_swissmetro, prepare, DEFAULT_PRESCALE};
use assnn::training::{ensemble_test_loglik, rho_squared, train_ensemble, TrainConfig};
use assnn::welfare::{marginal_utilities, summarize, vowt, vtt, WelfareConfig};

fn main() -> assnn::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let repetitions: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);

    let ds = ingest_swissmetro(&bundled_swissmetro(), &SwissmetroFilterConfig::default())?;
    println!("{} observations, choice counts {:?}", ds.len(), ds.choice_counts());
    let data = prepare(&ds, 0.2, seed, DEFAULT_PRESCALE)?;
    let (n_test, j) = (data.test.len(), ds.n_alternatives());

    for form in [UtilityForm::Linear, UtilityForm::LogLinear] {
        let spec = MnlSpec::swissmetro(form)?;
        let est = fit_mnl(&spec, &data.train_prescaled, &vec![0.0; spec.n_parameters()], FitOptions::default())?;
        let (ll, _) = mnl_loglik_and_grad(&spec, &est.values, &data.test_prescaled)?;
        println!("{form:?} MNL (offset {}):\n{}test LL {ll:.2}, rho2 {:.4}\n", spec.log_offset, est.table(), rho_squared(ll, n_test, j));
    }

    let topology = Topology::new(2, 10, Activation::Tanh)?;
    let cfg = TrainConfig { base_seed: seed, ..TrainConfig::default() };
    let tt = [Some("TRAIN_TT"), Some("SM_TT"), Some("CAR_TT")];
    let he = [Some("TRAIN_HE"), Some("SM_HE"), None];
    for variant in [Variant::Ass, Variant::Asu] {
        let spec = NetworkSpec { variant, topology, use_asc: true };
        let ens = train_ensemble(&spec, &data.train, repetitions, &cfg)?;
        let agg = ensemble_test_loglik(&ens, &data.test)?;
        println!("{}: test LL {:.2} (LL of mean prob {:.2}), rho2 {:.4}", variant.name(), agg.mean_of_ll, agg.ll_of_mean_prob, rho_squared(agg.mean_of_ll, n_test, j));
        let mu = marginal_utilities(&ens, &ds, &data.scaling, MuUnits::PerPrescaledUnit)?;
        let (vtt_t, vowt_t) = (vtt(&mu, &tt, Default::default())?, vowt(&mu, &he, Default::default())?);
        let summary = summarize(&ds, &mu, &[&vtt_t, &vowt_t], &WelfareConfig::default())?;
        for (col, m) in &summary.mean_mu {
            println!("  mean MU {col:>9} (x100): {m:+.3}");
        }
        for m in &summary.measures {
            println!(
                "  {:>4} {:>5}: mean {:.3}  (dropped: {} undefined, {} negative, {} upper; {} kept)",
                m.measure,
                m.mode,
                m.mean.unwrap_or(f64::NAN),
                m.report.undefined,
                m.report.negative,
                m.report.upper,
                m.report.retained
            );
        }
        for b in &summary.vtt_bins {
            let means: Vec<String> = b.bins.iter().map(|x| x.mean.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())).collect();
            println!("  VTT by travel time {:>5}: {}", b.mode, means.join(" "));
        }
    }
    Ok(())
}
