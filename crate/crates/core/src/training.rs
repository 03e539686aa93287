//! Mini-batch training with early stopping, seeded ensembles, goodness of fit
//! and the hyperparameter grid.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::architectures::{build_network, NetworkSpec, Topology, UtilityNetwork, Variant};
use crate::data::{validation_tail, ChoiceDataset, ScalingRecord};
use crate::error::{Error, Result};
use crate::nncore::{adam_step, Activation, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub base_seed: u64,
    /// Share of the training rows (taken from the end) held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { max_epochs: 200, patience: 6, batch_size: 32, adam: AdamConfig::default(), base_seed: 0, validation_fraction: 0.2 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("patience, max_epochs and batch_size must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("validation fraction must lie in (0, 1), got {}", self.validation_fraction)));
        }
        Ok(())
    }
}

/// Stops once the monitored loss has not strictly improved on its best value
/// for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, stale: 0, epoch: 0 }
    }

    /// Records one epoch's loss; returns true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the best loss, 0 before any observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Mean batch cross-entropy per epoch.
    pub fit_loss: Vec<f64>,
    /// Validation cross-entropy after each epoch.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
}

fn mean_ce(net: &UtilityNetwork, ds: &ChoiceDataset) -> Result<f64> {
    Ok(-net.log_likelihood(ds)? / ds.len() as f64)
}

/// Trains `net` in place on `fit` and returns the final-epoch network.
pub fn train_once(mut net: UtilityNetwork, fit: &ChoiceDataset, val: &ChoiceDataset, cfg: &TrainConfig, seed: u64) -> Result<(UtilityNetwork, TrainingHistory)> {
    cfg.validate()?;
    if fit.is_empty() || val.is_empty() {
        return Err(Error::Empty("training needs non-empty fit and validation sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut state = AdamState::new(net.n_parameters(), cfg.adam);
    let mut ws = net.workspace();
    let mut grad = Vec::with_capacity(net.n_parameters());
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainingHistory::default();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = net.loss_and_gradient(fit, batch, &mut ws, &mut grad)?;
            total += loss * batch.len() as f64;
            adam_step(net.parameters_mut(), &grad, &mut state)?;
        }
        let fit_loss = total / fit.len() as f64;
        let val_loss = mean_ce(&net, val)?;
        if !fit_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at epoch {epoch} (fit {fit_loss}, validation {val_loss})")));
        }
        history.fit_loss.push(fit_loss);
        history.val_loss.push(val_loss);
        history.stopped_epoch = epoch;
        log::trace!("epoch {epoch}: fit {fit_loss:.5} val {val_loss:.5}");
        if stopper.observe(val_loss) {
            history.early_stopped = true;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((net, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMember {
    pub seed: u64,
    pub network: UtilityNetwork,
    pub history: TrainingHistory,
    /// Log-likelihood over the whole training set (fit and validation rows).
    pub train_ll: f64,
    pub val_ll: f64,
    pub test_ll: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedEnsemble {
    pub spec: NetworkSpec,
    pub scaling: Option<ScalingRecord>,
    pub members: Vec<EnsembleMember>,
}

/// Trains one ensemble member; member `r` is seeded with `base_seed + r`.
pub fn train_member(spec: &NetworkSpec, train: &ChoiceDataset, cfg: &TrainConfig, r: usize) -> Result<EnsembleMember> {
    let seed = cfg.base_seed.wrapping_add(r as u64);
    let (fit, val) = validation_tail(train, cfg.validation_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build_network(spec.variant, spec.topology, train.schema(), spec.use_asc, &mut rng)?;
    let (network, history) = train_once(net, &fit, &val, cfg, seed)?;
    log::debug!("{} {} member {r}: stopped at epoch {}", spec.variant.name(), spec.topology, history.stopped_epoch);
    Ok(EnsembleMember { seed, train_ll: network.log_likelihood(train)?, val_ll: network.log_likelihood(&val)?, network, history, test_ll: None })
}

/// `repetitions` independent members; order of execution does not affect results.
pub fn train_ensemble(spec: &NetworkSpec, train: &ChoiceDataset, repetitions: usize, cfg: &TrainConfig) -> Result<TrainedEnsemble> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("an ensemble needs at least one repetition".into()));
    }
    spec.topology.validate()?;
    cfg.validate()?;
    let members = (0..repetitions).into_par_iter().map(|r| train_member(spec, train, cfg, r)).collect::<Result<Vec<_>>>()?;
    Ok(TrainedEnsemble { spec: *spec, scaling: None, members })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleLoglik {
    /// Mean over members of each member's log-likelihood.
    pub mean_of_ll: f64,
    /// Log-likelihood of the member-averaged probabilities.
    pub ll_of_mean_prob: f64,
}

impl TrainedEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn with_scaling(mut self, scaling: ScalingRecord) -> Self {
        self.scaling = Some(scaling);
        self
    }

    pub fn networks(&self) -> impl Iterator<Item = &UtilityNetwork> {
        self.members.iter().map(|m| &m.network)
    }

    /// Scores every member on `test` and stores the per-member values.
    pub fn score_test(&mut self, test: &ChoiceDataset) -> Result<EnsembleLoglik> {
        let agg = ensemble_test_loglik(self, test)?;
        for m in &mut self.members {
            m.test_ll = Some(m.network.log_likelihood(test)?);
        }
        Ok(agg)
    }

    /// Member-averaged choice probabilities per row.
    pub fn mean_probabilities(&self, ds: &ChoiceDataset) -> Result<Vec<Vec<f64>>> {
        let mut mean = vec![vec![0.0; ds.n_alternatives()]; ds.len()];
        for net in self.networks() {
            for (acc, p) in mean.iter_mut().zip(net.probabilities(ds)?) {
                acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
        }
        let r = self.len() as f64;
        mean.iter_mut().flatten().for_each(|v| *v /= r);
        Ok(mean)
    }

    /// Writes `manifest.json` plus one `member_NNN.json` per network.
    pub fn save(&self, dir: &Path, provenance: Option<&serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (r, m) in self.members.iter().enumerate() {
            let file = format!("member_{r:03}.json");
            fs::write(dir.join(&file), m.network.to_json()?)?;
            entries.push(ManifestMember { file, seed: m.seed, history: m.history.clone(), train_ll: m.train_ll, val_ll: m.val_ll, test_ll: m.test_ll });
        }
        let manifest = Manifest { provenance: provenance.cloned(), spec: self.spec, scaling: self.scaling.clone(), members: entries };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut members = Vec::with_capacity(manifest.members.len());
        for m in manifest.members {
            let network = UtilityNetwork::from_json(&fs::read_to_string(dir.join(&m.file))?)?;
            if network.spec() != manifest.spec {
                return Err(Error::Validation(format!("{} does not match the ensemble specification", m.file)));
            }
            members.push(EnsembleMember { seed: m.seed, network, history: m.history, train_ll: m.train_ll, val_ll: m.val_ll, test_ll: m.test_ll });
        }
        if members.is_empty() {
            return Err(Error::Empty(format!("ensemble in {} has no members", dir.display())));
        }
        Ok(TrainedEnsemble { spec: manifest.spec, scaling: manifest.scaling, members })
    }

    /// One CSV row per member.
    pub fn write_metrics_csv<W: Write>(&self, mut out: W, provenance: Option<&str>) -> Result<()> {
        write_comment(&mut out, provenance)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["repetition", "seed", "stopped_epoch", "best_epoch", "train_ll", "val_ll", "test_ll"])?;
        for (r, m) in self.members.iter().enumerate() {
            w.write_record([
                r.to_string(),
                m.seed.to_string(),
                m.history.stopped_epoch.to_string(),
                m.history.best_epoch.to_string(),
                m.train_ll.to_string(),
                m.val_ll.to_string(),
                m.test_ll.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestMember {
    file: String,
    seed: u64,
    history: TrainingHistory,
    train_ll: f64,
    val_ll: f64,
    test_ll: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
    spec: NetworkSpec,
    scaling: Option<ScalingRecord>,
    members: Vec<ManifestMember>,
}

pub(crate) fn write_comment<W: Write>(out: &mut W, provenance: Option<&str>) -> Result<()> {
    if let Some(p) = provenance {
        for line in p.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    Ok(())
}

/// Both ensemble aggregates of the test log-likelihood.
pub fn ensemble_test_loglik(ens: &TrainedEnsemble, test: &ChoiceDataset) -> Result<EnsembleLoglik> {
    if ens.is_empty() {
        return Err(Error::Empty("ensemble has no members".into()));
    }
    let mut sum = 0.0;
    for net in ens.networks() {
        sum += net.log_likelihood(test)?;
    }
    let mean_p = ens.mean_probabilities(test)?;
    let ll_of_mean_prob = mean_p.iter().zip(test.choices()).map(|(p, &y)| p[y].max(crate::nncore::PROB_FLOOR).ln()).sum();
    Ok(EnsembleLoglik { mean_of_ll: sum / ens.len() as f64, ll_of_mean_prob })
}

/// `1 - LL / (N ln(1/J))`.
pub fn rho_squared(ll: f64, n: usize, n_alternatives: usize) -> f64 {
    1.0 - ll / (n as f64 * (1.0 / n_alternatives as f64).ln())
}

/// The 26 candidate topologies: one hidden layer of 5..30 nodes and two of
/// 5..30, each with relu and tanh.
pub fn default_grid() -> Vec<Topology> {
    let mut grid = Vec::with_capacity(26);
    for (layers, widths) in [(1, &[5, 6, 7, 8, 9, 10, 15, 20, 30][..]), (2, &[5, 10, 20, 30][..])] {
        for &w in widths {
            for act in [Activation::Relu, Activation::Tanh] {
                grid.push(Topology { hidden_layers: layers, nodes_per_layer: w, activation: act });
            }
        }
    }
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub topology: Topology,
    pub n_parameters: usize,
    pub mean_test_ll: f64,
    pub mean_test_rho2: f64,
    pub ll_of_mean_prob: f64,
    pub mean_stopped_epoch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub variant: Variant,
    pub use_asc: bool,
    pub repetitions: usize,
    pub entries: Vec<GridEntry>,
    pub selected: usize,
}

impl GridResult {
    pub fn best(&self) -> &GridEntry {
        &self.entries[self.selected]
    }

    pub fn write_csv<W: Write>(&self, mut out: W, provenance: Option<&str>) -> Result<()> {
        write_comment(&mut out, provenance)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["hidden_layers", "nodes_per_layer", "activation", "n_parameters", "mean_test_ll", "mean_test_rho2", "ll_of_mean_prob", "mean_stopped_epoch", "selected"])?;
        for (i, e) in self.entries.iter().enumerate() {
            w.write_record([
                e.topology.hidden_layers.to_string(),
                e.topology.nodes_per_layer.to_string(),
                e.topology.activation.name().to_string(),
                e.n_parameters.to_string(),
                e.mean_test_ll.to_string(),
                e.mean_test_rho2.to_string(),
                e.ll_of_mean_prob.to_string(),
                e.mean_stopped_epoch.to_string(),
                (i == self.selected).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Highest mean test LL; ties go to fewer parameters, then tanh.
pub fn select_best(entries: &[GridEntry]) -> Option<usize> {
    let rank = |e: &GridEntry| (e.n_parameters, e.topology.activation != Activation::Tanh);
    (0..entries.len()).reduce(|best, i| {
        let (a, b) = (&entries[i], &entries[best]);
        if a.mean_test_ll > b.mean_test_ll || (a.mean_test_ll == b.mean_test_ll && rank(a) < rank(b)) {
            i
        } else {
            best
        }
    })
}

/// Scores one `repetitions`-member ensemble per topology on the test set.
pub fn grid_search(grid: &[Topology], variant: Variant, use_asc: bool, train: &ChoiceDataset, test: &ChoiceDataset, repetitions: usize, cfg: &TrainConfig) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("hyperparameter grid is empty".into()));
    }
    let mut entries = Vec::with_capacity(grid.len());
    for topology in grid {
        let spec = NetworkSpec { variant, topology: *topology, use_asc };
        let ens = train_ensemble(&spec, train, repetitions, cfg)?;
        let agg = ensemble_test_loglik(&ens, test)?;
        let n_parameters = ens.members[0].network.n_parameters();
        let mean_stopped_epoch = ens.members.iter().map(|m| m.history.stopped_epoch as f64).sum::<f64>() / ens.len() as f64;
        log::info!("{} {topology}: mean test LL {:.3}", variant.name(), agg.mean_of_ll);
        entries.push(GridEntry {
            topology: *topology,
            n_parameters,
            mean_test_ll: agg.mean_of_ll,
            mean_test_rho2: rho_squared(agg.mean_of_ll, test.len(), test.n_alternatives()),
            ll_of_mean_prob: agg.ll_of_mean_prob,
            mean_stopped_epoch,
        });
    }
    let selected = select_best(&entries).expect("non-empty grid");
    Ok(GridResult { variant, use_asc, repetitions, entries, selected })
}
