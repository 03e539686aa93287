use std::fs;
use std::path::Path;

use assnn::architectures::{build_network, NetworkSpec, Topology, Variant};
use assnn::cli::main_with_args;
use assnn::data::{ingest_swissmetro, swissmetro_cost_time_schema, ChoiceDataset, MuUnits, SwissmetroFilterConfig};
use assnn::nncore::Activation;
use assnn::prepare::{bundled_swissmetro, prepare, DEFAULT_PRESCALE};
use assnn::synthgen::{generate_choices, DgpSpec};
use assnn::training::{EnsembleMember, TrainedEnsemble};
use assnn::welfare::{marginal_utilities, vtt, Aggregation};
use assnn::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const TT: [&str; 3] = ["TRAIN_TT", "SM_TT", "CAR_TT"];

fn schema_json() -> Value {
    serde_json::to_value(swissmetro_cost_time_schema()).unwrap()
}

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("assnn").chain(args.iter().copied()))
}

fn write_config(dir: &Path, name: &str, cfg: Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// `n` rows spread evenly over the cost/time design, with linear-generator
/// choices, as a wide CSV.
fn small_wide_csv(dir: &Path, n: usize) -> String {
    let d = ingest_swissmetro(&bundled_swissmetro(), &SwissmetroFilterConfig::default()).unwrap().project(&swissmetro_cost_time_schema()).unwrap();
    let d = d.subset(&(0..n).map(|i| i * d.len() / n).collect::<Vec<_>>());
    let ds = generate_choices(&d, &DgpSpec::linear_reference(d.schema(), &TT).unwrap(), 2).unwrap();
    let path = dir.join(format!("wide_{n}.csv"));
    ds.save_csv(&path, None).unwrap();
    path.to_string_lossy().into_owned()
}

fn wide_data(path: &str) -> Value {
    json!({ "format": "wide", "path": path, "schema": schema_json(), "headway_columns": [null, null, null] })
}

#[test]
fn help_and_argument_errors() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(run(&["train", "--seed", "not-a-number"]), 1);
    assert_eq!(run(&["train", "--config", "/nonexistent/config.json"]), 1);
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ \"seed\": ").unwrap();
    assert_eq!(run(&["mnl", "--config", bad.to_str().unwrap()]), 1);
    let unknown = write_config(tmp.path(), "unknown.json", json!({ "data": { "format": "parquet" } }));
    assert_eq!(run(&["mnl", "--config", &unknown]), 1);
    assert_eq!(Error::Numerical("x".into()).exit_code(), 2);
    assert_eq!(Error::Validation("x".into()).exit_code(), 1);
}

#[test]
fn gen_synth_is_byte_identical_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = |tag: &str| tmp.path().join(tag);
    let cfg = |tag: &str| {
        write_config(
            tmp.path(),
            &format!("{tag}.json"),
            json!({
                "output_dir": out(tag),
                "data": { "format": "swissmetro", "schema": schema_json(), "headway_columns": [null, null, null] },
                "dgp": { "form": "log_linear", "beta_cost": -3.0, "beta_time": -5.0 },
            }),
        )
    };
    let (a, c) = (cfg("a"), cfg("c"));
    assert_eq!(run(&["gen-synth", "--config", &a, "--seed", "5"]), 0);
    let first: Vec<String> = ["synthetic.csv", "truth.csv"].iter().map(|f| fs::read_to_string(out("a").join(f)).unwrap()).collect();
    for workers in ["1", "3"] {
        assert_eq!(run(&["gen-synth", "--config", &a, "--seed", "5", "--workers", workers]), 0);
        for (f, before) in ["synthetic.csv", "truth.csv"].iter().zip(&first) {
            assert_eq!(&fs::read_to_string(out("a").join(f)).unwrap(), before, "{f} with {workers} workers");
        }
    }
    assert_eq!(run(&["gen-synth", "--config", &c, "--seed", "6"]), 0);
    let text = fs::read_to_string(out("a").join("synthetic.csv")).unwrap();
    assert!(text.starts_with("# assnn 0.1.0 gen-synth seed=5 config_sha256="));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 9036 + 1);
    assert_ne!(text, fs::read_to_string(out("c").join("synthetic.csv")).unwrap());
    let truth = fs::read_to_string(out("a").join("truth.csv")).unwrap();
    assert_eq!(truth.lines().filter(|l| !l.starts_with('#')).count(), 3 * 9036 + 1);
}

#[test]
fn empty_design_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let design = tmp.path().join("empty.csv");
    fs::write(&design, "ID,TRAIN_CO,TRAIN_TT,SM_CO,SM_TT,CAR_CO,CAR_TT\n").unwrap();
    let cfg = write_config(
        tmp.path(),
        "cfg.json",
        json!({
            "output_dir": tmp.path().join("out"),
            "data": { "format": "design", "path": design, "schema": schema_json(), "headway_columns": [null, null, null] },
        }),
    );
    assert_eq!(run(&["gen-synth", "--config", &cfg]), 1);
    assert!(!tmp.path().join("out").join("synthetic.csv").exists());
}

#[test]
fn mnl_recovers_linear_generator_and_reports_iteration_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = write_config(
        tmp.path(),
        "gen.json",
        json!({
            "output_dir": tmp.path(),
            "data": { "format": "swissmetro", "schema": schema_json(), "headway_columns": [null, null, null] },
            "dgp": { "form": "linear", "beta_cost": -2.0, "beta_time": -3.0 },
        }),
    );
    assert_eq!(run(&["gen-synth", "--config", &gen, "--seed", "1"]), 0);
    let synthetic = tmp.path().join("synthetic.csv");
    let fit = |name: &str, max_iterations: usize| {
        let out = tmp.path().join(name);
        let cfg = write_config(
            tmp.path(),
            &format!("{name}.json"),
            json!({
                "output_dir": out,
                "data": wide_data(synthetic.to_str().unwrap()),
                "mnl": { "form": "linear", "specification": "generic_cost_time", "max_iterations": max_iterations },
            }),
        );
        assert_eq!(run(&["mnl", "--config", &cfg, "--seed", "1"]), 0);
        read_json(&out.join("mnl_linear.json"))
    };
    let full = fit("full", 500);
    assert_eq!(full["estimate"]["converged"], json!(true));
    let names: Vec<String> = serde_json::from_value(full["estimate"]["names"].clone()).unwrap();
    let values: Vec<f64> = serde_json::from_value(full["estimate"]["values"].clone()).unwrap();
    assert_eq!(names, ["B_TC", "B_TT"]);
    assert!((values[0] + 2.0).abs() < 0.1 && (values[1] + 3.0).abs() < 0.1, "{values:?}");
    assert_eq!(full["provenance"]["command"], json!("mnl"));
    let capped = fit("capped", 0);
    assert_eq!(capped["estimate"]["converged"], json!(false));
    assert_eq!(capped["estimate"]["iterations"], json!(0));
}

#[test]
fn grid_search_scores_every_configuration_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_wide_csv(tmp.path(), 400);
    let cfg = |name: &str, grid: Option<Value>| {
        let mut c = json!({
            "output_dir": tmp.path().join(name),
            "data": wide_data(&data),
            "repetitions": 1,
            "training": { "max_epochs": 2 },
        });
        if let Some(g) = grid {
            c["grid"] = g;
        }
        write_config(tmp.path(), &format!("{name}.json"), c)
    };
    let full = cfg("full", None);
    assert_eq!(run(&["grid-search", "--config", &full, "--seed", "3"]), 0);
    let csv = fs::read_to_string(tmp.path().join("full/grid.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 26);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",true")).count(), 1);
    let again = cfg("again", None);
    assert_eq!(run(&["grid-search", "--config", &again, "--seed", "3", "--workers", "2"]), 0);
    let csv2 = fs::read_to_string(tmp.path().join("again/grid.csv")).unwrap();
    // Output directories differ, so compare everything below the header line.
    let body = |s: &str| s.lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(body(&csv), body(&csv2));

    let one = cfg("one", Some(json!([{ "hidden_layers": 2, "nodes_per_layer": 5, "activation": "relu" }])));
    assert_eq!(run(&["grid-search", "--config", &one]), 0);
    let csv = fs::read_to_string(tmp.path().join("one/grid.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 2);
    let selected = read_json(&tmp.path().join("one/grid_selected.json"));
    assert_eq!(selected["selected"]["topology"]["nodes_per_layer"], json!(5));
}

#[test]
fn train_welfare_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_wide_csv(tmp.path(), 1500);
    let out = tmp.path().join("run");
    let cfg = write_config(
        tmp.path(),
        "cfg.json",
        json!({
            "output_dir": out,
            "data": wide_data(&data),
            "network": { "variant": "ASS", "hidden_layers": 1, "nodes_per_layer": 5, "activation": "tanh", "use_asc": false },
            "repetitions": 1,
        }),
    );
    assert_eq!(run(&["train", "--config", &cfg, "--seed", "4"]), 0);
    let metrics = read_json(&out.join("metrics.json"));
    for block in ["full", "train", "test"] {
        let b = &metrics[block];
        let (m, l) = (b["mean_of_ll"].as_f64().unwrap(), b["ll_of_mean_prob"].as_f64().unwrap());
        assert!((m - l).abs() <= 1e-9 * m.abs(), "{block}: {m} vs {l}");
        assert!(b["rho2_mean_of_ll"].is_number());
    }
    assert_eq!(metrics["test"]["n"], json!(300));
    assert_eq!(metrics["provenance"]["seed"], json!(4));
    assert!(out.join("ensemble/manifest.json").exists());
    assert!(out.join("ensemble/member_000.json").exists());

    assert_eq!(run(&["welfare", "--config", &cfg, "--seed", "4"]), 0);
    for f in ["mu.csv", "mu_long.csv", "ratios.csv", "vtt_bins.csv", "welfare_summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary = read_json(&out.join("welfare_summary.json"));
    let modes: Vec<&str> = summary["measures"].as_array().unwrap().iter().map(|m| m["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["train", "SM", "car"]);
    let mu = fs::read_to_string(out.join("mu.csv")).unwrap();
    assert!(mu.starts_with("# assnn 0.1.0 welfare seed=4 config_sha256="));
    assert_eq!(mu.lines().filter(|l| !l.starts_with('#')).count(), 1501);

    assert_eq!(run(&["report", "--config", &cfg]), 0);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("ASS x1"));
    assert!(report.contains("VTT"));
}

/// An untrained linear ASS network whose time and cost derivatives share a
/// sign for every mode makes every VTT negative.
fn negative_vtt_ensemble(ds: &ChoiceDataset) -> TrainedEnsemble {
    let data = prepare(ds, 0.2, 0, DEFAULT_PRESCALE).unwrap();
    let topology = Topology::new(1, 1, Activation::Identity).unwrap();
    let spec = NetworkSpec { variant: Variant::Ass, topology, use_asc: false };
    for seed in 0..1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let network = build_network(Variant::Ass, topology, ds.schema(), false, &mut rng).unwrap();
        let member = EnsembleMember { seed, network, history: Default::default(), train_ll: 0.0, val_ll: 0.0, test_ll: None };
        let ens = TrainedEnsemble { spec, scaling: Some(data.scaling.clone()), members: vec![member] };
        let mu = marginal_utilities(&ens, ds, &data.scaling, MuUnits::PerPrescaledUnit).unwrap();
        let t = vtt(&mu, &TT.map(Some), Aggregation::MeanThenRatio).unwrap();
        if t.values[0].iter().all(|v| v.is_some_and(|x| x < 0.0)) {
            return ens;
        }
    }
    panic!("no seed produced negative values for every mode");
}

#[test]
fn empty_retained_set_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_wide_csv(tmp.path(), 200);
    let ds = assnn::data::load_wide_csv(Path::new(&data), &swissmetro_cost_time_schema()).unwrap();
    let ens_dir = tmp.path().join("ens");
    negative_vtt_ensemble(&ds).save(&ens_dir, None).unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", json!({ "output_dir": tmp.path().join("out"), "data": wide_data(&data), "ensemble_dir": ens_dir }));
    assert_eq!(run(&["welfare", "--config", &cfg]), 1);
    // The drop report is still written before the failure.
    let summary = read_json(&tmp.path().join("out/welfare_summary.json"));
    assert_eq!(summary["measures"][0]["report"]["negative"], json!(200));
    assert_eq!(summary["measures"][0]["report"]["retained"], json!(0));
}
