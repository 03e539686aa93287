//! Pseudo-synthetic choices on a fixed design from a known random utility model.
//!
//! Utilities are evaluated on attributes expressed in the generator's own
//! units (original units divided by [`DgpSpec::prescale`]); every oracle here
//! reports marginal utilities per such unit.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, ChoiceDataset};
use crate::error::{Error, Result};
use crate::mnl::UtilityForm;

/// Standard Gumbel draw (location 0, scale 1).
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // gen::<f64>() lies in [0, 1); reject the closed end.
    let mut u: f64 = rng.gen();
    while u <= 0.0 {
        u = rng.gen();
    }
    -(-u.ln()).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Cost,
    Time,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub form: UtilityForm,
    pub beta_cost: f64,
    pub beta_time: f64,
    pub offset: f64,
    /// One cost and one time column per alternative, in schema order.
    pub cost_columns: Vec<String>,
    pub time_columns: Vec<String>,
    pub prescale: f64,
}

impl DgpSpec {
    pub fn new(form: UtilityForm, beta_cost: f64, beta_time: f64, schema: &AttributeSchema, time_columns: &[&str]) -> Result<Self> {
        let spec = DgpSpec { form, beta_cost, beta_time, offset: 0.1, cost_columns: schema.cost_columns(), time_columns: time_columns.iter().map(|s| s.to_string()).collect(), prescale: 100.0 };
        if spec.time_columns.len() != spec.cost_columns.len() {
            return Err(Error::Schema(format!("{} time columns given for {} alternatives", spec.time_columns.len(), spec.cost_columns.len())));
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Linear generator with cost -2 and time -3.
    pub fn linear_reference(schema: &AttributeSchema, time_columns: &[&str]) -> Result<Self> {
        DgpSpec::new(UtilityForm::Linear, -2.0, -3.0, schema, time_columns)
    }

    /// Log-linear generator with cost -3, time -5 and offset 0.1.
    pub fn log_linear_reference(schema: &AttributeSchema, time_columns: &[&str]) -> Result<Self> {
        DgpSpec::new(UtilityForm::LogLinear, -3.0, -5.0, schema, time_columns)
    }

    pub fn validate(&self) -> Result<()> {
        if self.form == UtilityForm::LogLinear && !(self.offset > 0.0) {
            return Err(Error::InvalidArgument(format!("log offset must be positive, got {}", self.offset)));
        }
        if !(self.prescale > 0.0) {
            return Err(Error::InvalidArgument(format!("prescale must be positive, got {}", self.prescale)));
        }
        Ok(())
    }

    pub fn n_alternatives(&self) -> usize {
        self.cost_columns.len()
    }

    fn transform(&self, x: f64) -> Result<f64> {
        match self.form {
            UtilityForm::Linear => Ok(x),
            UtilityForm::LogLinear => {
                let y = x + self.offset;
                if y <= 0.0 {
                    return Err(Error::Domain(format!("ln({x} + {}) is undefined", self.offset)));
                }
                Ok(y.ln())
            }
        }
    }

    /// Deterministic utility from cost and time in generator units.
    pub fn utility(&self, cost: f64, time: f64) -> Result<f64> {
        Ok(self.beta_cost * self.transform(cost)? + self.beta_time * self.transform(time)?)
    }

    fn resolve(&self, ds: &ChoiceDataset) -> Result<Resolved> {
        self.validate()?;
        if self.cost_columns.len() != ds.n_alternatives() || self.time_columns.len() != ds.n_alternatives() {
            return Err(Error::Schema("generator columns do not cover every alternative".into()));
        }
        let cost = self.cost_columns.iter().map(|c| ds.require_column(c)).collect::<Result<_>>()?;
        let time = self.time_columns.iter().map(|c| ds.require_column(c)).collect::<Result<_>>()?;
        Ok(Resolved { cost, time, to_generator: ds.prescale_factor() / self.prescale })
    }
}

struct Resolved {
    cost: Vec<usize>,
    time: Vec<usize>,
    to_generator: f64,
}

impl Resolved {
    fn attributes(&self, row: &[f64], j: usize) -> (f64, f64) {
        (row[self.cost[j]] * self.to_generator, row[self.time[j]] * self.to_generator)
    }
}

/// Draws one choice per design row; attributes are copied through. Row `i`
/// uses its own generator stream, so results do not depend on thread count.
pub fn generate_choices(design: &ChoiceDataset, dgp: &DgpSpec, seed: u64) -> Result<ChoiceDataset> {
    let r = dgp.resolve(design)?;
    let j = design.n_alternatives();
    let choices = (0..design.len())
        .into_par_iter()
        .map(|i| {
            let row = design.row(i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut best = (0, f64::NEG_INFINITY);
            for alt in 0..j {
                let (c, t) = r.attributes(row, alt);
                let u = dgp.utility(c, t)? + sample_gumbel(&mut rng);
                if u > best.1 {
                    best = (alt, u);
                }
            }
            Ok(best.0)
        })
        .collect::<Result<Vec<_>>>()?;
    design.with_choices(choices)
}

/// Marginal utility of one attribute at a value in generator units.
pub fn true_mu_at(dgp: &DgpSpec, value: f64, attribute: Attribute) -> f64 {
    let beta = match attribute {
        Attribute::Cost => dgp.beta_cost,
        Attribute::Time => dgp.beta_time,
    };
    match dgp.form {
        UtilityForm::Linear => beta,
        UtilityForm::LogLinear => beta / (value + dgp.offset),
    }
}

/// True marginal utility for row `row`, alternative `j`.
pub fn true_mu(dgp: &DgpSpec, ds: &ChoiceDataset, row: usize, j: usize, attribute: Attribute) -> Result<f64> {
    let r = dgp.resolve(ds)?;
    let (c, t) = r.attributes(ds.row(row), j);
    Ok(match attribute {
        Attribute::Cost => true_mu_at(dgp, c, Attribute::Cost),
        Attribute::Time => true_mu_at(dgp, t, Attribute::Time),
    })
}

/// Value of travel time from cost and time in generator units.
pub fn true_vtt_at(dgp: &DgpSpec, cost: f64, time: f64) -> f64 {
    true_mu_at(dgp, time, Attribute::Time) / true_mu_at(dgp, cost, Attribute::Cost)
}

pub fn true_vtt(dgp: &DgpSpec, ds: &ChoiceDataset, row: usize, j: usize) -> Result<f64> {
    let r = dgp.resolve(ds)?;
    let (c, t) = r.attributes(ds.row(row), j);
    Ok(true_vtt_at(dgp, c, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub row: usize,
    pub alternative: String,
    pub utility: f64,
    pub mu_time: f64,
    pub mu_cost: f64,
    pub vtt: f64,
}

/// Per row and alternative ground truth.
pub fn truth_table(design: &ChoiceDataset, dgp: &DgpSpec) -> Result<Vec<TruthRow>> {
    let r = dgp.resolve(design)?;
    let schema = design.schema();
    let mut out = Vec::with_capacity(design.len() * design.n_alternatives());
    for (i, row) in design.rows().enumerate() {
        for (j, alt) in schema.alternatives.iter().enumerate() {
            let (c, t) = r.attributes(row, j);
            out.push(TruthRow {
                row: i,
                alternative: alt.name.clone(),
                utility: dgp.utility(c, t)?,
                mu_time: true_mu_at(dgp, t, Attribute::Time),
                mu_cost: true_mu_at(dgp, c, Attribute::Cost),
                vtt: true_vtt_at(dgp, c, t),
            });
        }
    }
    Ok(out)
}

/// Mean true VTT per alternative over the design.
pub fn mean_true_vtt(design: &ChoiceDataset, dgp: &DgpSpec) -> Result<Vec<f64>> {
    let r = dgp.resolve(design)?;
    let j = design.n_alternatives();
    let mut sums = vec![0.0; j];
    for row in design.rows() {
        for (alt, s) in sums.iter_mut().enumerate() {
            let (c, t) = r.attributes(row, alt);
            *s += true_vtt_at(dgp, c, t);
        }
    }
    Ok(sums.into_iter().map(|s| s / design.len().max(1) as f64).collect())
}

pub fn write_truth_csv<W: Write>(rows: &[TruthRow], mut out: W, provenance: Option<&str>) -> Result<()> {
    if let Some(p) = provenance {
        for line in p.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_truth_csv(rows: &[TruthRow], path: &Path, provenance: Option<&str>) -> Result<()> {
    write_truth_csv(rows, std::io::BufWriter::new(std::fs::File::create(path)?), provenance)
}
