//! Marginal utilities, value of time measures, trimming and binning.
//!
//! Every attribute column belongs to exactly one alternative, so a marginal
//! utility is indexed by (observation, column): the derivative of the owning
//! alternative's utility with respect to that column.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, ChoiceDataset, MuUnits, ScalingRecord};
use crate::error::{Error, Result};
use crate::mnl::{mnl_marginal_utils, MnlSpec};
use crate::training::{write_comment, TrainedEnsemble};

/// Denominators smaller than this in magnitude make a ratio undefined.
pub const MRS_EPSILON: f64 = 1e-10;

/// Order in which ensemble members and ratios are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average member marginal utilities per observation, then take ratios.
    #[default]
    MeanThenRatio,
    /// Take ratios per member, then average the defined ones.
    RatioThenMean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MuTable {
    pub schema: AttributeSchema,
    pub columns: Vec<String>,
    pub units: MuUnits,
    /// Row-major `N x K` member-averaged marginal utilities.
    pub values: Vec<f64>,
    /// Per-member tables with the same layout; empty for single-model sources.
    pub members: Vec<Vec<f64>>,
}

impl MuTable {
    pub fn len(&self) -> usize {
        self.values.len() / self.columns.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns.iter().position(|c| c == name).ok_or_else(|| Error::Schema(format!("no marginal utilities for column `{name}`")))
    }

    pub fn get(&self, row: usize, column: usize) -> f64 {
        self.values[row * self.columns.len() + column]
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column_index(name)?;
        Ok((0..self.len()).map(|r| self.get(r, c)).collect())
    }

    /// Mean over observations of one column's marginal utility.
    pub fn mean(&self, name: &str) -> Result<f64> {
        let v = self.column(name)?;
        Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
    }

    /// Rescales to another unit convention.
    pub fn to_units(&self, units: MuUnits, prescale: f64) -> MuTable {
        let f = match (self.units, units) {
            (MuUnits::PerPrescaledUnit, MuUnits::PerOriginalUnit) => 1.0 / prescale,
            (MuUnits::PerOriginalUnit, MuUnits::PerPrescaledUnit) => prescale,
            _ => 1.0,
        };
        let scale = |v: &Vec<f64>| v.iter().map(|x| x * f).collect::<Vec<_>>();
        MuTable { units, values: scale(&self.values), members: self.members.iter().map(scale).collect(), ..self.clone() }
    }

    /// Wide CSV: `row`, then one `MU_<column>` per attribute.
    pub fn write_csv<W: Write>(&self, mut out: W, provenance: Option<&str>) -> Result<()> {
        write_comment(&mut out, provenance)?;
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = std::iter::once("row".to_string()).chain(self.columns.iter().map(|c| format!("MU_{c}"))).collect();
        w.write_record(&header)?;
        for r in 0..self.len() {
            let rec: Vec<String> = std::iter::once(r.to_string()).chain((0..self.columns.len()).map(|c| self.get(r, c).to_string())).collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long CSV (`row, mode, attribute, value, mu`) with attribute values from `ds`.
    pub fn write_long_csv<W: Write>(&self, ds: &ChoiceDataset, mut out: W, provenance: Option<&str>) -> Result<()> {
        write_comment(&mut out, provenance)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "mode", "attribute", "value", "mu"])?;
        let idx: Vec<usize> = self.columns.iter().map(|c| ds.require_column(c)).collect::<Result<_>>()?;
        for r in 0..self.len() {
            for (c, name) in self.columns.iter().enumerate() {
                let owner = self.schema.owner_of(name).map(|j| self.schema.alternatives[j].name.as_str()).unwrap_or("");
                w.write_record([r.to_string(), owner.to_string(), name.clone(), ds.value(r, idx[c]).to_string(), self.get(r, c).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_units_source(ds: &ChoiceDataset, scaling: &ScalingRecord) -> Result<()> {
    let cols = ds.schema().attribute_columns();
    for c in &cols {
        scaling.bounds(c)?;
    }
    Ok(())
}

/// Ensemble marginal utilities for original-unit data `ds`.
pub fn marginal_utilities(ens: &TrainedEnsemble, ds: &ChoiceDataset, scaling: &ScalingRecord, units: MuUnits) -> Result<MuTable> {
    if ens.is_empty() {
        return Err(Error::Empty("ensemble has no members".into()));
    }
    check_units_source(ds, scaling)?;
    if ens.members[0].network.schema() != ds.schema() {
        return Err(Error::Schema("ensemble and dataset schemas differ".into()));
    }
    let normalized = scaling.transform(ds)?;
    let columns = ds.schema().attribute_columns();
    let k = columns.len();
    let col_idx: Vec<usize> = columns.iter().map(|c| normalized.require_column(c)).collect::<Result<_>>()?;
    let factors: Vec<f64> = columns.iter().map(|c| scaling.gradient_to_original_units(1.0, c, units)).collect::<Result<_>>()?;
    let owners: Vec<usize> = columns.iter().map(|c| ds.schema().owner_of(c).expect("attribute column has an owner")).collect();
    let mut members = Vec::with_capacity(ens.len());
    for net in ens.networks() {
        let mut ws = net.workspace();
        let mut table = vec![0.0; normalized.len() * k];
        for (r, x) in normalized.rows().enumerate() {
            let g = net.input_gradients_with(x, &mut ws)?;
            for c in 0..k {
                let d = g.get(owners[c], col_idx[c]).unwrap_or(0.0);
                table[r * k + c] = d * factors[c];
            }
        }
        members.push(table);
    }
    let r = members.len() as f64;
    let mut values = vec![0.0; normalized.len() * k];
    for m in &members {
        values.iter_mut().zip(m).for_each(|(a, b)| *a += b);
    }
    values.iter_mut().for_each(|v| *v /= r);
    Ok(MuTable { schema: ds.schema().clone(), columns, units, values, members })
}

/// Marginal utilities of an estimated MNL on data in the model's own units.
pub fn mnl_mu_table(spec: &MnlSpec, theta: &[f64], ds: &ChoiceDataset) -> Result<MuTable> {
    let columns = ds.schema().attribute_columns();
    let k = columns.len();
    let mut values = vec![0.0; ds.len() * k];
    for (r, x) in ds.rows().enumerate() {
        for entries in mnl_marginal_utils(spec, theta, x)? {
            for (c, mu) in entries {
                values[r * k + c] = mu;
            }
        }
    }
    Ok(MuTable { schema: ds.schema().clone(), columns, units: MuUnits::PerPrescaledUnit, values, members: Vec::new() })
}

/// `num / den`, undefined when the denominator is numerically zero.
pub fn mrs(mu_num: f64, mu_den: f64) -> Option<f64> {
    (mu_den.abs() >= MRS_EPSILON && mu_num.is_finite() && mu_den.is_finite()).then(|| mu_num / mu_den)
}

/// Per-observation ratios for every alternative that has a numerator column.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioTable {
    pub measure: String,
    pub alternatives: Vec<String>,
    pub numerator_columns: Vec<Option<String>>,
    /// `values[row][alternative]`; `None` when undefined or not applicable.
    pub values: Vec<Vec<Option<f64>>>,
}

impl RatioTable {
    pub fn applicable(&self, alternative: usize) -> bool {
        self.numerator_columns[alternative].is_some()
    }

    /// Values of one alternative, undefined entries included as `None`.
    pub fn alternative(&self, j: usize) -> Vec<Option<f64>> {
        self.values.iter().map(|r| r[j]).collect()
    }
}

/// Ratio of each alternative's `numerator_columns[j]` marginal utility to its cost marginal utility.
pub fn ratio_table(mu: &MuTable, measure: &str, numerator_columns: &[Option<&str>], aggregation: Aggregation) -> Result<RatioTable> {
    let schema = &mu.schema;
    if numerator_columns.len() != schema.n_alternatives() {
        return Err(Error::Dimension { expected: schema.n_alternatives(), got: numerator_columns.len() });
    }
    let k = mu.columns.len();
    let mut pairs = Vec::with_capacity(numerator_columns.len());
    for (j, num) in numerator_columns.iter().enumerate() {
        pairs.push(match num {
            Some(name) => {
                if schema.owner_of(name) != Some(j) {
                    return Err(Error::Schema(format!("`{name}` is not an attribute of {}", schema.alternatives[j].name)));
                }
                Some((mu.column_index(name)?, mu.column_index(&schema.alternatives[j].cost_column)?))
            }
            None => None,
        });
    }
    let sources: Vec<&Vec<f64>> = match aggregation {
        Aggregation::MeanThenRatio => vec![&mu.values],
        Aggregation::RatioThenMean if mu.members.is_empty() => vec![&mu.values],
        Aggregation::RatioThenMean => mu.members.iter().collect(),
    };
    let values = (0..mu.len())
        .map(|r| {
            pairs
                .iter()
                .map(|p| {
                    let (n, d) = (*p)?;
                    let defined: Vec<f64> = sources.iter().filter_map(|t| mrs(t[r * k + n], t[r * k + d])).collect();
                    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
                })
                .collect()
        })
        .collect();
    Ok(RatioTable {
        measure: measure.to_string(),
        alternatives: schema.alternatives.iter().map(|a| a.name.clone()).collect(),
        numerator_columns: numerator_columns.iter().map(|c| c.map(str::to_string)).collect(),
        values,
    })
}

pub fn vtt(mu: &MuTable, time_columns: &[Option<&str>], aggregation: Aggregation) -> Result<RatioTable> {
    ratio_table(mu, "VTT", time_columns, aggregation)
}

pub fn vowt(mu: &MuTable, headway_columns: &[Option<&str>], aggregation: Aggregation) -> Result<RatioTable> {
    ratio_table(mu, "VoWT", headway_columns, aggregation)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimReport {
    pub total: usize,
    pub undefined: usize,
    pub negative: usize,
    pub upper: usize,
    pub retained: usize,
}

/// Drops undefined values, then negatives when asked, then values above
/// the `(1 - upper_quantile)` empirical quantile of what remains.
pub fn trim(values: &[Option<f64>], upper_quantile: f64, drop_negative: bool) -> Result<(Vec<f64>, TrimReport)> {
    if !(0.0..1.0).contains(&upper_quantile) {
        return Err(Error::InvalidArgument(format!("upper quantile must lie in [0, 1), got {upper_quantile}")));
    }
    let mut report = TrimReport { total: values.len(), ..Default::default() };
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    report.undefined = values.len() - defined.len();
    let kept: Vec<f64> = defined.into_iter().filter(|&v| !(drop_negative && v < 0.0)).collect();
    report.negative = values.len() - report.undefined - kept.len();
    let (kept, upper) = match upper_threshold(&kept, upper_quantile) {
        Some(t) => trim_above(&kept, t),
        None => (kept, 0),
    };
    report.upper = upper;
    report.retained = kept.len();
    if kept.is_empty() && !values.is_empty() {
        log::warn!("trimming dropped all {} values", values.len());
    }
    Ok((kept, report))
}

/// Largest value kept when dropping the top `floor(n q)` of `values`.
pub fn upper_threshold(values: &[f64], upper_quantile: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let drop = ((n as f64) * upper_quantile + 1e-9).floor() as usize;
    (drop < n).then(|| sorted[n - drop - 1])
}

/// Keeps values `<= threshold` in their original order; returns the drop count.
pub fn trim_above(values: &[f64], threshold: f64) -> (Vec<f64>, usize) {
    let kept: Vec<f64> = values.iter().copied().filter(|&v| v <= threshold).collect();
    let dropped = values.len() - kept.len();
    (kept, dropped)
}

/// Default travel-time bin edges in minutes.
pub const DEFAULT_BIN_EDGES: [f64; 7] = [0.0, 60.0, 90.0, 120.0, 180.0, 240.0, 300.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinMean {
    pub lower: f64,
    /// `None` for the open last bin.
    pub upper: Option<f64>,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean: Option<f64>,
}

/// Mean of `value` per left-closed `[edge_i, edge_{i+1})` bin of `time`; the last
/// bin is open ended. Rows below the first edge are ignored.
pub fn bin_by_travel_time(rows: &[(f64, f64)], edges: &[f64]) -> Result<Vec<BinMean>> {
    if edges.is_empty() || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("bin edges must be non-empty and strictly increasing".into()));
    }
    let mut sums = vec![(0usize, 0.0); edges.len()];
    for &(t, v) in rows {
        if t < edges[0] {
            continue;
        }
        let b = edges.partition_point(|&e| e <= t) - 1;
        sums[b].0 += 1;
        sums[b].1 += v;
    }
    Ok(sums.iter().enumerate().map(|(i, &(count, s))| BinMean { lower: edges[i], upper: edges.get(i + 1).copied(), count, mean: (count > 0).then(|| s / count as f64) }).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WelfareConfig {
    pub upper_quantile: f64,
    pub drop_negative: bool,
    pub bin_edges: Vec<f64>,
    pub aggregation: Aggregation,
    pub units: MuUnits,
}

impl Default for WelfareConfig {
    fn default() -> Self {
        WelfareConfig { upper_quantile: 0.05, drop_negative: true, bin_edges: DEFAULT_BIN_EDGES.to_vec(), aggregation: Aggregation::default(), units: MuUnits::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub measure: String,
    pub mode: String,
    pub report: TrimReport,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeBins {
    pub mode: String,
    pub bins: Vec<BinMean>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelfareSummary {
    /// Untrimmed mean marginal utility per attribute column.
    pub mean_mu: Vec<(String, f64)>,
    pub measures: Vec<MeasureSummary>,
    pub vtt_bins: Vec<ModeBins>,
}

impl WelfareSummary {
    pub fn mean_of(&self, measure: &str, mode: &str) -> Option<f64> {
        self.measures.iter().find(|m| m.measure == measure && m.mode == mode).and_then(|m| m.mean)
    }
}

/// Trims each (measure, mode) once and bins retained VTT by the mode's
/// travel time taken from original-unit data `ds`.
pub fn summarize(ds: &ChoiceDataset, mu: &MuTable, ratios: &[&RatioTable], cfg: &WelfareConfig) -> Result<WelfareSummary> {
    if ds.len() != mu.len() {
        return Err(Error::Dimension { expected: mu.len(), got: ds.len() });
    }
    let mean_mu = mu.columns.iter().map(|c| Ok((c.clone(), mu.mean(c)?))).collect::<Result<_>>()?;
    let mut measures = Vec::new();
    let mut vtt_bins = Vec::new();
    for table in ratios {
        for (j, mode) in table.alternatives.iter().enumerate() {
            let Some(num_col) = &table.numerator_columns[j] else { continue };
            let values = table.alternative(j);
            let (kept, report) = trim(&values, cfg.upper_quantile, cfg.drop_negative)?;
            let mean = (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64);
            measures.push(MeasureSummary { measure: table.measure.clone(), mode: mode.clone(), report, mean });
            if table.measure == "VTT" {
                let kept_set = retained_mask(&values, cfg.upper_quantile, cfg.drop_negative);
                let tcol = ds.require_column(num_col)?;
                let rows: Vec<(f64, f64)> = values.iter().enumerate().filter(|(r, _)| kept_set[*r]).map(|(r, v)| (ds.value(r, tcol) * ds.prescale_factor(), v.unwrap())).collect();
                vtt_bins.push(ModeBins { mode: mode.clone(), bins: bin_by_travel_time(&rows, &cfg.bin_edges)? });
            }
        }
    }
    Ok(WelfareSummary { mean_mu, measures, vtt_bins })
}

/// Which entries `trim` retains.
pub fn retained_mask(values: &[Option<f64>], upper_quantile: f64, drop_negative: bool) -> Vec<bool> {
    let pass = |v: &Option<f64>| matches!(v, Some(x) if !(drop_negative && *x < 0.0));
    let pre: Vec<f64> = values.iter().filter(|v| pass(v)).map(|v| v.unwrap()).collect();
    let t = upper_threshold(&pre, upper_quantile).unwrap_or(f64::INFINITY);
    values.iter().map(|v| pass(v) && v.unwrap() <= t).collect()
}

/// `row, mode, measure, value` for every defined ratio.
pub fn write_ratios_csv<W: Write>(tables: &[&RatioTable], mut out: W, provenance: Option<&str>) -> Result<()> {
    write_comment(&mut out, provenance)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "mode", "measure", "value"])?;
    for t in tables {
        for (r, row) in t.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if t.applicable(j) {
                    w.write_record([r.to_string(), t.alternatives[j].clone(), t.measure.clone(), v.map(|x| x.to_string()).unwrap_or_default()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `mode, lower, upper, count, mean` per travel-time bin.
pub fn write_bins_csv<W: Write>(summary: &WelfareSummary, mut out: W, provenance: Option<&str>) -> Result<()> {
    write_comment(&mut out, provenance)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "lower", "upper", "count", "mean_vtt"])?;
    for m in &summary.vtt_bins {
        for b in &m.bins {
            w.write_record([m.mode.clone(), b.lower.to_string(), b.upper.map(|u| u.to_string()).unwrap_or_default(), b.count.to_string(), b.mean.map(|u| u.to_string()).unwrap_or_default()])?;
        }
    }
    w.flush()?;
    Ok(())
}
