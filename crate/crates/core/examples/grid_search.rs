//! Topology search for ASS-NN on synthetic log-linear choices: scores each
//! candidate by mean test log-likelihood over a small ensemble and reports
//! the selection.
//!
//! cargo run --release --example grid_search -- [repetitions] [seed] [full]

use assnn::architectures::Variant;
use assnn::data::{ingest_swissmetro, swissmetro_cost_time_schema, SwissmetroFilterConfig};
use assnn::prepare::{bundled_swissmetro, prepare, DEFAULT_PRESCALE};
use assnn::synthgen::{generate_choices, DgpSpec};
use assnn::training::{default_grid, grid_search, TrainConfig};

fn main() -> assnn::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let repetitions: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(2);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let full = args.get(2).is_some_and(|s| s == "full");

    let design = ingest_swissmetro(&bundled_swissmetro(), &SwissmetroFilterConfig::default())?.project(&swissmetro_cost_time_schema())?;
    let dgp = DgpSpec::log_linear_reference(design.schema(), &["TRAIN_TT", "SM_TT", "CAR_TT"])?;
    let data = prepare(&generate_choices(&design, &dgp, seed)?, 0.2, seed, DEFAULT_PRESCALE)?;

    // Every fourth candidate unless the full grid is asked for.
    let grid: Vec<_> = default_grid().into_iter().enumerate().filter(|(i, _)| full || i % 4 == 0).map(|(_, t)| t).collect();
    let cfg = TrainConfig { base_seed: seed, ..TrainConfig::default() };
    let result = grid_search(&grid, Variant::Ass, false, &data.train, &data.test, repetitions, &cfg)?;
    result.write_csv(std::io::stdout().lock(), None)?;
    let best = result.best();
    println!(
        "selected {}x{} {} ({} parameters), mean test LL {:.2}",
        best.topology.hidden_layers,
        best.topology.nodes_per_layer,
        best.topology.activation.name(),
        best.n_parameters,
        best.mean_test_ll
    );
    Ok(())
}
