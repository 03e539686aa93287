//! Monte Carlo check: simulate choices from a known linear or log-linear
//! utility on the Swissmetro design, then compare MNL and ASS-NN recovery of
//! marginal utilities and value of travel time against the truth.
//!
//! cargo run --release --example monte_carlo -- [linear|log] [repetitions] [seed]

use assnn::architectures::{NetworkSpec, Topology, Variant};
use assnn::data::{ingest_swissmetro, MuUnits, SwissmetroFilterConfig};
use assnn::mnl::{fit_mnl, mnl_loglik_and_grad, FitOptions, MnlSpec, UtilityForm};
use assnn::nncore::Activation;
use assnn::prepare::{bundled_swissmetro, prepare, DEFAULT_PRESCALE};
use assnn::synthgen::{generate_choices, mean_true_vtt, DgpSpec};
use assnn::training::{ensemble_test_loglik, rho_squared, train_ensemble, TrainConfig};
use assnn::welfare::{marginal_utilities, summarize, vtt, WelfareConfig};

fn main() -> assnn::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let log_form = args.first().map(|s| s == "log").unwrap_or(false);
    let repetitions: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);

    let design = ingest_swissmetro(&bundled_swissmetro(), &SwissmetroFilterConfig::default())?;
    let schema = design.schema().clone();
    let tt = ["TRAIN_TT", "SM_TT", "CAR_TT"];
    let dgp = if log_form { DgpSpec::log_linear_reference(&schema, &tt)? } else { DgpSpec::linear_reference(&schema, &tt)? };
    let ds = generate_choices(&design, &dgp, seed)?;
    println!("choice shares: {:?}", ds.choice_shares());

    let data = prepare(&ds, 0.2, seed, DEFAULT_PRESCALE)?;
    let (n_test, j) = (data.test.len(), ds.n_alternatives());

    let mnl = MnlSpec::generic_cost_time(&schema, UtilityForm::Linear, &tt)?;
    let est = fit_mnl(&mnl, &data.train_prescaled, &[0.0, 0.0], FitOptions::default())?;
    let (mnl_test_ll, _) = mnl_loglik_and_grad(&mnl, &est.values, &data.test_prescaled)?;
    print!("{}", est.table());
    println!("linear MNL test LL {mnl_test_ll:.2}, rho2 {:.4}", rho_squared(mnl_test_ll, n_test, j));

    let topology = if log_form { Topology::new(2, 10, Activation::Tanh)? } else { Topology::new(1, 15, Activation::Tanh)? };
    let spec = NetworkSpec { variant: Variant::Ass, topology, use_asc: false };
    let cfg = TrainConfig { base_seed: seed, ..TrainConfig::default() };
    let started = std::time::Instant::now();
    let ens = train_ensemble(&spec, &data.train, repetitions, &cfg)?;
    println!("trained {repetitions} members in {:.1?}", started.elapsed());
    for m in &ens.members {
        println!("  seed {} stopped at epoch {} (best {})", m.seed, m.history.stopped_epoch, m.history.best_epoch);
    }
    let agg = ensemble_test_loglik(&ens, &data.test)?;
    println!("ASS-NN test LL {:.2} (LL of mean prob {:.2}), rho2 {:.4}", agg.mean_of_ll, agg.ll_of_mean_prob, rho_squared(agg.mean_of_ll, n_test, j));

    let mu = marginal_utilities(&ens, &design, &data.scaling, MuUnits::PerPrescaledUnit)?;
    let vtt_table = vtt(&mu, &tt.map(Some), Default::default())?;
    let no_trim = WelfareConfig { upper_quantile: 0.0, drop_negative: false, ..Default::default() };
    let summary = summarize(&design, &mu, &[&vtt_table], &no_trim)?;
    let truth = mean_true_vtt(&design, &dgp)?;
    for (k, alt) in schema.alternatives.iter().enumerate() {
        println!(
            "{:>6}: mean MU_TC {:+.3}  mean MU_TT {:+.3}  mean VTT {:.3}  (true mean VTT {:.3})",
            alt.name,
            mu.mean(&alt.cost_column)?,
            mu.mean(tt[k])?,
            summary.mean_of("VTT", &alt.name).unwrap_or(f64::NAN),
            truth[k]
        );
    }
    Ok(())
}
