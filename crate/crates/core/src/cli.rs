//! Config-driven commands behind the `assnn` binary.
//!
//! Every command reads one JSON [`RunConfig`]; `--seed` and `--workers`
//! override the file. Outputs land in `output_dir` and carry a provenance
//! header: `#` comment lines in CSV files, a `provenance` field in JSON.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::architectures::{NetworkSpec, Topology, Variant};
use crate::data::{ingest_swissmetro, load_design_csv, load_wide_csv, swissmetro_schema, AttributeSchema, ChoiceDataset, SwissmetroFilterConfig};
use crate::error::{Error, Result};
use crate::mnl::{fit_mnl, mnl_loglik_and_grad, FitOptions, MnlSpec, UtilityForm};
use crate::nncore::Activation;
use crate::prepare::{bundled_swissmetro, prepare, PreparedData, DEFAULT_PRESCALE};
use crate::synthgen::{generate_choices, save_truth_csv, truth_table, DgpSpec};
use crate::training::{default_grid, ensemble_test_loglik, grid_search, rho_squared, train_ensemble, TrainConfig, TrainedEnsemble};
use crate::welfare::{marginal_utilities, summarize, vowt, vtt, write_bins_csv, write_ratios_csv, WelfareConfig};

#[derive(Debug, Parser)]
#[command(name = "assnn", version, about = "Neural discrete choice models with tied cost utilities")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for training and simulation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate choices on a design from a known utility function.
    GenSynth,
    /// Score every hyperparameter configuration with an ensemble.
    GridSearch,
    /// Train and persist one ensemble.
    Train,
    /// Estimate a multinomial logit baseline.
    Mnl,
    /// Marginal utilities, VTT and VoWT from a persisted ensemble.
    Welfare,
    /// Summarise the JSON outputs found in the output directory.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenSynth => "gen-synth",
            Command::GridSearch => "grid-search",
            Command::Train => "train",
            Command::Mnl => "mnl",
            Command::Welfare => "welfare",
            Command::Report => "report",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Raw Swissmetro release, filtered.
    #[default]
    Swissmetro,
    /// Wide CSV with a choice column.
    Wide,
    /// Wide CSV whose choice column may be missing.
    Design,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Defaults to the bundled Swissmetro file.
    pub path: Option<PathBuf>,
    /// Defaults to the Swissmetro schema. With Swissmetro input, the cleaned
    /// data is projected onto it.
    pub schema: Option<AttributeSchema>,
    pub filters: SwissmetroFilterConfig,
    pub test_fraction: f64,
    pub prescale: f64,
    /// Travel-time column per alternative.
    pub time_columns: Option<Vec<String>>,
    /// Headway column per alternative, `null` where absent.
    pub headway_columns: Option<Vec<Option<String>>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DataFormat::default(),
            path: None,
            schema: None,
            filters: SwissmetroFilterConfig::default(),
            test_fraction: 0.2,
            prescale: DEFAULT_PRESCALE,
            time_columns: None,
            headway_columns: None,
        }
    }
}

impl DataConfig {
    pub fn schema(&self) -> AttributeSchema {
        self.schema.clone().unwrap_or_else(swissmetro_schema)
    }

    pub fn time_columns(&self) -> Vec<String> {
        self.time_columns.clone().unwrap_or_else(|| ["TRAIN_TT", "SM_TT", "CAR_TT"].map(String::from).to_vec())
    }

    pub fn headway_columns(&self) -> Vec<Option<String>> {
        self.headway_columns.clone().unwrap_or_else(|| vec![Some("TRAIN_HE".into()), Some("SM_HE".into()), None])
    }

    pub fn load(&self) -> Result<ChoiceDataset> {
        let ds = match self.format {
            DataFormat::Swissmetro => {
                let ds = ingest_swissmetro(&self.path.clone().unwrap_or_else(bundled_swissmetro), &self.filters)?;
                match &self.schema {
                    Some(s) => ds.project(s)?,
                    None => ds,
                }
            }
            DataFormat::Wide => load_wide_csv(self.require_path()?, &self.schema())?,
            DataFormat::Design => load_design_csv(self.require_path()?, &self.schema())?,
        };
        if ds.is_empty() {
            return Err(Error::Empty("dataset has no rows".into()));
        }
        Ok(ds)
    }

    fn require_path(&self) -> Result<&Path> {
        self.path.as_deref().ok_or_else(|| Error::InvalidArgument("data.path is required for CSV input".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub form: UtilityForm,
    pub beta_cost: f64,
    pub beta_time: f64,
    pub offset: f64,
    pub prescale: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig { form: UtilityForm::Linear, beta_cost: -2.0, beta_time: -3.0, offset: 0.1, prescale: DEFAULT_PRESCALE }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub hidden_layers: usize,
    pub nodes_per_layer: usize,
    pub activation: Activation,
    pub use_asc: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { variant: Variant::Ass, hidden_layers: 2, nodes_per_layer: 10, activation: Activation::Tanh, use_asc: true }
    }
}

impl NetworkConfig {
    pub fn spec(&self) -> Result<NetworkSpec> {
        Ok(NetworkSpec { variant: self.variant, topology: Topology::new(self.hidden_layers, self.nodes_per_layer, self.activation)?, use_asc: self.use_asc })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MnlSpecification {
    /// Constants on SM and car, generic cost, mode-specific time and headway.
    #[default]
    Swissmetro,
    /// Generic cost and time, no constants.
    GenericCostTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnlConfig {
    pub form: UtilityForm,
    pub specification: MnlSpecification,
    pub log_offset: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for MnlConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        MnlConfig { form: UtilityForm::Linear, specification: MnlSpecification::default(), log_offset: 0.1, tolerance: fit.tolerance, max_iterations: fit.max_iterations }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub dgp: DgpConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub repetitions: usize,
    /// Topologies to score; the full 26-entry grid when absent.
    pub grid: Option<Vec<Topology>>,
    pub mnl: MnlConfig,
    pub welfare: WelfareConfig,
    /// Defaults to `<output_dir>/ensemble`.
    pub ensemble_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: None,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            dgp: DgpConfig::default(),
            network: NetworkConfig::default(),
            training: TrainConfig::default(),
            repetitions: 10,
            grid: None,
            mnl: MnlConfig::default(),
            welfare: WelfareConfig::default(),
            ensemble_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn ensemble_dir(&self) -> PathBuf {
        self.ensemble_dir.clone().unwrap_or_else(|| self.output_dir.join("ensemble"))
    }

    /// Training settings with the base seed tied to the top-level seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { base_seed: self.seed, ..self.training }
    }

    /// SHA-256 of the effective configuration's JSON form. The worker count
    /// is left out since results do not depend on it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&RunConfig { workers: None, ..self.clone() }).expect("config serialises");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
}

impl Provenance {
    pub fn new(command: Command, cfg: &RunConfig) -> Self {
        Provenance { tool: "assnn".into(), version: env!("CARGO_PKG_VERSION").into(), command: command.name().into(), seed: cfg.seed, config_sha256: cfg.hash() }
    }

    /// One-line form used in CSV comment headers.
    pub fn header(&self) -> String {
        format!("{} {} {} seed={} config_sha256={}", self.tool, self.version, self.command, self.seed, self.config_sha256)
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serialises")
    }
}

fn write_json(path: &Path, prov: &Provenance, body: serde_json::Value) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("provenance".into(), prov.json());
    if let serde_json::Value::Object(m) = body {
        doc.extend(m);
    }
    fs::write(path, serde_json::to_string_pretty(&serde_json::Value::Object(doc))? + "\n")?;
    Ok(())
}

fn create_csv(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

/// Resolves the configuration and runs one command.
pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(w) = cfg.workers {
        if w == 0 {
            return Err(Error::InvalidArgument("--workers must be at least 1".into()));
        }
        // A pool already built by an earlier call in this process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    run_command(cli.command, &cfg)
}

pub fn run_command(command: Command, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let prov = Provenance::new(command, cfg);
    match command {
        Command::GenSynth => cmd_gen_synth(cfg, &prov),
        Command::GridSearch => cmd_grid_search(cfg, &prov),
        Command::Train => cmd_train(cfg, &prov),
        Command::Mnl => cmd_mnl(cfg, &prov),
        Command::Welfare => cmd_welfare(cfg, &prov),
        Command::Report => cmd_report(cfg),
    }
}

fn prepared(cfg: &RunConfig) -> Result<(ChoiceDataset, PreparedData)> {
    let ds = cfg.data.load()?;
    let data = prepare(&ds, cfg.data.test_fraction, cfg.seed, cfg.data.prescale)?;
    Ok((ds, data))
}

fn cmd_gen_synth(cfg: &RunConfig, prov: &Provenance) -> Result<()> {
    let design = cfg.data.load()?;
    let tt = cfg.data.time_columns();
    let tt: Vec<&str> = tt.iter().map(String::as_str).collect();
    let d = &cfg.dgp;
    let dgp = DgpSpec { offset: d.offset, prescale: d.prescale, ..DgpSpec::new(d.form, d.beta_cost, d.beta_time, design.schema(), &tt)? };
    dgp.validate()?;
    let ds = generate_choices(&design, &dgp, cfg.seed)?;
    let data_path = cfg.output_dir.join("synthetic.csv");
    let truth_path = cfg.output_dir.join("truth.csv");
    ds.save_csv(&data_path, Some(&prov.header()))?;
    save_truth_csv(&truth_table(&design, &dgp)?, &truth_path, Some(&prov.header()))?;
    let shares = ds.choice_shares();
    println!("generated {} choices ({:?} utility), shares {:?}", ds.len(), dgp.form, shares.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>());
    println!("wrote {} and {}", data_path.display(), truth_path.display());
    Ok(())
}

fn cmd_grid_search(cfg: &RunConfig, prov: &Provenance) -> Result<()> {
    let (_, data) = prepared(cfg)?;
    let grid = cfg.grid.clone().unwrap_or_else(default_grid);
    let result = grid_search(&grid, cfg.network.variant, cfg.network.use_asc, &data.train, &data.test, cfg.repetitions, &cfg.train_config())?;
    result.write_csv(create_csv(&cfg.output_dir.join("grid.csv"))?, Some(&prov.header()))?;
    let best = result.best();
    write_json(&cfg.output_dir.join("grid_selected.json"), prov, serde_json::json!({ "variant": result.variant, "use_asc": result.use_asc, "repetitions": result.repetitions, "selected": best }))?;
    println!("scored {} configurations; selected {} (mean test LL {:.3}, rho2 {:.4})", result.entries.len(), best.topology, best.mean_test_ll, best.mean_test_rho2);
    Ok(())
}

fn cmd_train(cfg: &RunConfig, prov: &Provenance) -> Result<()> {
    let (_, data) = prepared(cfg)?;
    let spec = cfg.network.spec()?;
    let mut ens = train_ensemble(&spec, &data.train, cfg.repetitions, &cfg.train_config())?.with_scaling(data.scaling.clone());
    let full = data.scaling.transform(&cfg.data.load()?)?;
    let j = full.n_alternatives();
    let test = ens.score_test(&data.test)?;
    let train = ensemble_test_loglik(&ens, &data.train)?;
    let all = ensemble_test_loglik(&ens, &full)?;
    let dir = cfg.ensemble_dir();
    ens.save(&dir, Some(&prov.json()))?;
    ens.write_metrics_csv(create_csv(&cfg.output_dir.join("members.csv"))?, Some(&prov.header()))?;
    let block = |agg: crate::training::EnsembleLoglik, n: usize| {
        serde_json::json!({
            "n": n,
            "mean_of_ll": agg.mean_of_ll,
            "ll_of_mean_prob": agg.ll_of_mean_prob,
            "rho2_mean_of_ll": rho_squared(agg.mean_of_ll, n, j),
            "rho2_ll_of_mean_prob": rho_squared(agg.ll_of_mean_prob, n, j),
        })
    };
    write_json(
        &cfg.output_dir.join("metrics.json"),
        prov,
        serde_json::json!({
            "spec": spec,
            "repetitions": ens.len(),
            "ensemble_dir": dir,
            "full": block(all, full.len()),
            "train": block(train, data.train.len()),
            "test": block(test, data.test.len()),
        }),
    )?;
    println!(
        "{} {} x{}: test LL {:.3} (LL of mean prob {:.3}), test rho2 {:.4}",
        spec.variant.name(),
        spec.topology,
        ens.len(),
        test.mean_of_ll,
        test.ll_of_mean_prob,
        rho_squared(test.mean_of_ll, data.test.len(), j)
    );
    Ok(())
}

fn mnl_spec(cfg: &RunConfig, schema: &AttributeSchema) -> Result<MnlSpec> {
    let spec = match cfg.mnl.specification {
        MnlSpecification::Swissmetro => MnlSpec::swissmetro(cfg.mnl.form)?,
        MnlSpecification::GenericCostTime => {
            let tt = cfg.data.time_columns();
            let tt: Vec<&str> = tt.iter().map(String::as_str).collect();
            MnlSpec::generic_cost_time(schema, cfg.mnl.form, &tt)?
        }
    };
    Ok(spec.with_log_offset(cfg.mnl.log_offset))
}

fn cmd_mnl(cfg: &RunConfig, prov: &Provenance) -> Result<()> {
    let (_, data) = prepared(cfg)?;
    let spec = mnl_spec(cfg, data.train.schema())?;
    let options = FitOptions { tolerance: cfg.mnl.tolerance, max_iterations: cfg.mnl.max_iterations };
    let est = fit_mnl(&spec, &data.train_prescaled, &vec![0.0; spec.n_parameters()], options)?;
    let (test_ll, _) = mnl_loglik_and_grad(&spec, &est.values, &data.test_prescaled)?;
    let (n, j) = (data.test.len(), data.test.n_alternatives());
    let name = match spec.form {
        UtilityForm::Linear => "mnl_linear.json",
        UtilityForm::LogLinear => "mnl_log_linear.json",
    };
    write_json(
        &cfg.output_dir.join(name),
        prov,
        serde_json::json!({
            "form": spec.form,
            "log_offset": spec.log_offset,
            "estimate": est,
            "test": { "n": n, "ll": test_ll, "rho2": rho_squared(test_ll, n, j) },
        }),
    )?;
    if spec.form == UtilityForm::LogLinear {
        println!("log offset: {}", spec.log_offset);
    }
    print!("{}", est.table());
    println!("test LL {test_ll:.3}, test rho2 {:.4}", rho_squared(test_ll, n, j));
    Ok(())
}

fn cmd_welfare(cfg: &RunConfig, prov: &Provenance) -> Result<()> {
    let ens = TrainedEnsemble::load(&cfg.ensemble_dir())?;
    let scaling = ens.scaling.clone().ok_or_else(|| Error::Validation("ensemble manifest has no scaling record".into()))?;
    let ds = cfg.data.load()?;
    let mu = marginal_utilities(&ens, &ds, &scaling, cfg.welfare.units)?;
    let tt = cfg.data.time_columns();
    let he = cfg.data.headway_columns();
    let tt: Vec<Option<&str>> = tt.iter().map(|s| Some(s.as_str())).collect();
    let he: Vec<Option<&str>> = he.iter().map(|s| s.as_deref()).collect();
    let vtt_t = vtt(&mu, &tt, cfg.welfare.aggregation)?;
    let mut tables = vec![vtt_t];
    if he.iter().any(Option::is_some) {
        tables.push(vowt(&mu, &he, cfg.welfare.aggregation)?);
    }
    let refs: Vec<_> = tables.iter().collect();
    let summary = summarize(&ds, &mu, &refs, &cfg.welfare)?;
    let h = prov.header();
    mu.write_csv(create_csv(&cfg.output_dir.join("mu.csv"))?, Some(&h))?;
    mu.write_long_csv(&ds, create_csv(&cfg.output_dir.join("mu_long.csv"))?, Some(&h))?;
    write_ratios_csv(&refs, create_csv(&cfg.output_dir.join("ratios.csv"))?, Some(&h))?;
    write_bins_csv(&summary, create_csv(&cfg.output_dir.join("vtt_bins.csv"))?, Some(&h))?;
    write_json(&cfg.output_dir.join("welfare_summary.json"), prov, serde_json::to_value(&summary)?)?;
    for m in &summary.measures {
        let r = &m.report;
        println!(
            "{:>4} {:>6}: mean {}  (total {}, undefined {}, negative {}, upper {}, retained {})",
            m.measure,
            m.mode,
            m.mean.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
            r.total,
            r.undefined,
            r.negative,
            r.upper,
            r.retained
        );
    }
    if let Some(m) = summary.measures.iter().find(|m| m.report.retained == 0) {
        return Err(Error::Empty(format!("no {} values retained for {} after trimming", m.measure, m.mode)));
    }
    Ok(())
}

fn read_json(path: &Path) -> Option<serde_json::Value> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    let mut lines = Vec::new();
    for name in ["mnl_linear.json", "mnl_log_linear.json"] {
        if let Some(v) = read_json(&dir.join(name)) {
            lines.push(format!("{:<22} test LL {:>11.3}  rho2 {:.4}", name.trim_end_matches(".json"), v["test"]["ll"].as_f64().unwrap_or(f64::NAN), v["test"]["rho2"].as_f64().unwrap_or(f64::NAN)));
        }
    }
    if let Some(v) = read_json(&dir.join("metrics.json")) {
        let t = &v["test"];
        lines.push(format!(
            "{:<22} test LL {:>11.3}  rho2 {:.4}  (LL of mean prob {:.3})",
            format!("{} x{}", v["spec"]["variant"].as_str().unwrap_or("?"), v["repetitions"]),
            t["mean_of_ll"].as_f64().unwrap_or(f64::NAN),
            t["rho2_mean_of_ll"].as_f64().unwrap_or(f64::NAN),
            t["ll_of_mean_prob"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    if let Some(v) = read_json(&dir.join("grid_selected.json")) {
        let s = &v["selected"];
        lines.push(format!(
            "grid selection         {}x{} {}  mean test LL {:.3}",
            s["topology"]["hidden_layers"],
            s["topology"]["nodes_per_layer"],
            s["topology"]["activation"].as_str().unwrap_or("?"),
            s["mean_test_ll"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    if let Some(v) = read_json(&dir.join("welfare_summary.json")) {
        for m in v["measures"].as_array().into_iter().flatten() {
            lines.push(format!(
                "{:<4} {:<17} mean {}",
                m["measure"].as_str().unwrap_or("?"),
                m["mode"].as_str().unwrap_or("?"),
                m["mean"].as_f64().map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
            ));
        }
    }
    if lines.is_empty() {
        return Err(Error::Validation(format!("no results found in {}", dir.display())));
    }
    let text = lines.join("\n") + "\n";
    print!("{text}");
    fs::write(dir.join("report.txt"), text)?;
    Ok(())
}

/// Parses arguments, runs, and maps the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
