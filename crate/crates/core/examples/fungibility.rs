//! Cost fungibility by construction: with the cost subnetwork tied, a unit of
//! cost moves every alternative's utility by the same amount whenever the
//! alternatives carry the same cost. The untied variant does not share this.
//! Also checks the analytic input gradients against central differences.
//!
//! cargo run --release --example fungibility -- [seed]

use assnn::architectures::{build_network, Topology, Variant};
use assnn::data::{swissmetro_cost_time_schema, ChoiceDataset};
use assnn::nncore::Activation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> assnn::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let schema = swissmetro_cost_time_schema();
    let probe = ChoiceDataset::from_rows(schema.clone(), vec![vec![0.0; 6]], vec![0], None)?;
    let cost_cols: Vec<usize> = schema.alternatives.iter().map(|a| probe.column_index(&a.cost_column).expect("cost column")).collect();
    let topology = Topology::new(2, 10, Activation::Tanh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for variant in [Variant::Ass, Variant::Asu] {
        let net = build_network(variant, topology, &schema, true, &mut rng)?;
        let mut worst_spread = 0.0f64;
        let mut worst_fd = 0.0f64;
        for _ in 0..200 {
            let mut x: Vec<f64> = (0..probe.n_columns()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let cost = rng.gen_range(0.0..1.0);
            cost_cols.iter().for_each(|&c| x[c] = cost);
            let g = net.input_gradients(&x)?;
            let d: Vec<f64> = cost_cols.iter().enumerate().map(|(j, &c)| g.get(j, c).unwrap_or(f64::NAN)).collect();
            let spread = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min);
            worst_spread = worst_spread.max(spread);
            for (j, &c) in cost_cols.iter().enumerate() {
                let h = 1e-6;
                let (mut up, mut down) = (x.clone(), x.clone());
                up[c] += h;
                down[c] -= h;
                let fd = (net.utilities(&up)?[j] - net.utilities(&down)?[j]) / (2.0 * h);
                worst_fd = worst_fd.max((fd - d[j]).abs());
            }
        }
        println!(
            "{}: {} parameters, largest spread of dV/dcost across alternatives at equal cost {worst_spread:.3e}, largest gradient error vs central differences {worst_fd:.3e}",
            variant.name(),
            net.n_parameters()
        );
    }
    Ok(())
}
