//! Wide-format choice data: ingestion, scaling, normalisation and splitting.
//!
//! Values move through three unit systems. Raw files are in original units
//! (CHF, minutes). [`prescale`] divides everything by a factor (100 by default)
//! and [`minmax_normalize`] maps the prescaled values into `[0, 1]`, using a
//! single pooled range for every cost column so the shared cost stack sees one
//! affine map. [`ScalingRecord`] keeps what is needed to go back.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One alternative of the choice set and the columns describing it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlternativeSpec {
    pub name: String,
    pub cost_column: String,
    #[serde(default)]
    pub non_cost_columns: Vec<String>,
}

impl AlternativeSpec {
    pub fn new(name: &str, cost_column: &str, non_cost_columns: &[&str]) -> Self {
        AlternativeSpec { name: name.to_string(), cost_column: cost_column.to_string(), non_cost_columns: non_cost_columns.iter().map(|s| s.to_string()).collect() }
    }
}

/// Column layout of a wide choice dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub alternatives: Vec<AlternativeSpec>,
    pub choice_column: String,
    #[serde(default)]
    pub respondent_column: Option<String>,
}

impl AttributeSchema {
    pub fn new(alternatives: Vec<AlternativeSpec>, choice_column: &str, respondent_column: Option<&str>) -> Result<Self> {
        let schema = AttributeSchema { alternatives, choice_column: choice_column.to_string(), respondent_column: respondent_column.map(str::to_string) };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alternatives.is_empty() {
            return Err(Error::Schema("schema has no alternatives".into()));
        }
        let mut seen = HashSet::new();
        for alt in &self.alternatives {
            if alt.cost_column.is_empty() {
                return Err(Error::Schema(format!("alternative `{}` has no cost column", alt.name)));
            }
            for col in std::iter::once(&alt.cost_column).chain(&alt.non_cost_columns) {
                if !seen.insert(col.as_str()) {
                    return Err(Error::Schema(format!("column `{col}` is bound more than once")));
                }
            }
        }
        Ok(())
    }

    pub fn n_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    /// Attribute columns in storage order: per alternative, cost first, then non-cost.
    pub fn attribute_columns(&self) -> Vec<String> {
        self.alternatives.iter().flat_map(|a| std::iter::once(a.cost_column.clone()).chain(a.non_cost_columns.iter().cloned())).collect()
    }

    pub fn cost_columns(&self) -> Vec<String> {
        self.alternatives.iter().map(|a| a.cost_column.clone()).collect()
    }

    pub fn is_cost_column(&self, column: &str) -> bool {
        self.alternatives.iter().any(|a| a.cost_column == column)
    }

    pub fn alternative_index(&self, name: &str) -> Option<usize> {
        self.alternatives.iter().position(|a| a.name == name)
    }

    /// Alternative that owns `column`, if any.
    pub fn owner_of(&self, column: &str) -> Option<usize> {
        self.alternatives.iter().position(|a| a.cost_column == column || a.non_cost_columns.iter().any(|c| c == column))
    }
}

/// Immutable wide-format choice observations.
///
/// Attribute values are stored row-major in [`AttributeSchema::attribute_columns`]
/// order. Chosen alternatives are 0-based internally and 1-based in files.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceDataset {
    schema: AttributeSchema,
    columns: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f64>,
    choices: Vec<usize>,
    respondents: Vec<i64>,
    prescale_factor: f64,
}

impl ChoiceDataset {
    /// Builds a dataset from row-major values. `choices` are 0-based.
    pub fn from_rows(schema: AttributeSchema, rows: Vec<Vec<f64>>, choices: Vec<usize>, respondents: Option<Vec<i64>>) -> Result<Self> {
        schema.validate()?;
        let columns = schema.attribute_columns();
        if rows.len() != choices.len() {
            return Err(Error::Dimension { expected: rows.len(), got: choices.len() });
        }
        let mut values = Vec::with_capacity(rows.len() * columns.len());
        for row in &rows {
            if row.len() != columns.len() {
                return Err(Error::Dimension { expected: columns.len(), got: row.len() });
            }
            values.extend_from_slice(row);
        }
        let respondents = match respondents {
            Some(r) if r.len() != rows.len() => return Err(Error::Dimension { expected: rows.len(), got: r.len() }),
            Some(r) => r,
            None => (1..=rows.len() as i64).collect(),
        };
        Self::assemble(schema, values, choices, respondents, 1.0)
    }

    fn assemble(schema: AttributeSchema, values: Vec<f64>, choices: Vec<usize>, respondents: Vec<i64>, prescale_factor: f64) -> Result<Self> {
        let columns = schema.attribute_columns();
        let j = schema.n_alternatives();
        if let Some((row, &c)) = choices.iter().enumerate().find(|(_, &c)| c >= j) {
            return Err(Error::Validation(format!("row {}: chosen alternative {} outside 1..{}", row + 1, c + 1, j)));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("missing or non-finite value in row {}, column `{}`", pos / columns.len() + 1, columns[pos % columns.len()])));
        }
        let index = columns.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Ok(ChoiceDataset { schema, columns, index, values, choices, respondents, prescale_factor })
    }

    fn with_values(&self, values: Vec<f64>, prescale_factor: f64) -> ChoiceDataset {
        ChoiceDataset { values, prescale_factor, ..self.clone() }
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    pub fn n_alternatives(&self) -> usize {
        self.schema.n_alternatives()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    /// Cumulative prescale factor applied to the attribute values (1 for raw data).
    pub fn prescale_factor(&self) -> f64 {
        self.prescale_factor
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require_column(&self, name: &str) -> Result<usize> {
        self.column_index(name).ok_or_else(|| Error::Schema(format!("unknown column `{name}`")))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.columns.len();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let k = self.columns.len().max(1);
        self.values.chunks(k).take(self.len())
    }

    pub fn value(&self, row: usize, column: usize) -> f64 {
        self.values[row * self.columns.len() + column]
    }

    pub fn column_values(&self, column: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.value(i, column)).collect()
    }

    /// 0-based chosen alternative of each row.
    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    pub fn respondents(&self) -> &[i64] {
        &self.respondents
    }

    /// Observed count per alternative.
    pub fn choice_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_alternatives()];
        for &c in &self.choices {
            counts[c] += 1;
        }
        counts
    }

    pub fn choice_shares(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.choice_counts().into_iter().map(|c| c as f64 / n).collect()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> ChoiceDataset {
        let mut values = Vec::with_capacity(indices.len() * self.columns.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        ChoiceDataset { values, choices: indices.iter().map(|&i| self.choices[i]).collect(), respondents: indices.iter().map(|&i| self.respondents[i]).collect(), ..self.clone() }
    }

    /// Re-expresses the dataset under `schema`, whose attribute columns must all
    /// exist here and whose alternatives must match in number.
    pub fn project(&self, schema: &AttributeSchema) -> Result<ChoiceDataset> {
        schema.validate()?;
        if schema.n_alternatives() != self.n_alternatives() {
            return Err(Error::Schema(format!("{} alternatives cannot be projected onto {}", self.n_alternatives(), schema.n_alternatives())));
        }
        let idx: Vec<usize> = schema.attribute_columns().iter().map(|c| self.require_column(c)).collect::<Result<_>>()?;
        let values = self.rows().flat_map(|r| idx.iter().map(move |&i| r[i])).collect();
        Self::assemble(schema.clone(), values, self.choices.clone(), self.respondents.clone(), self.prescale_factor)
    }

    /// Same attributes with a new set of 0-based choices.
    pub fn with_choices(&self, choices: Vec<usize>) -> Result<ChoiceDataset> {
        if choices.len() != self.len() {
            return Err(Error::Dimension { expected: self.len(), got: choices.len() });
        }
        Self::assemble(self.schema.clone(), self.values.clone(), choices, self.respondents.clone(), self.prescale_factor)
    }

    /// Writes the dataset as a wide CSV. `provenance` lines are emitted as `#` comments.
    pub fn write_csv<W: Write>(&self, mut out: W, provenance: Option<&str>) -> Result<()> {
        if let Some(p) = provenance {
            for line in p.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = Vec::new();
        if let Some(r) = &self.schema.respondent_column {
            header.push(r.clone());
        }
        header.push(self.schema.choice_column.clone());
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if self.schema.respondent_column.is_some() {
                rec.push(self.respondents[i].to_string());
            }
            rec.push((self.choices[i] + 1).to_string());
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, provenance: Option<&str>) -> Result<()> {
        let file = File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), provenance)
    }
}

fn detect_delimiter(first_line: &str) -> u8 {
    if first_line.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

fn read_all(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    Ok(s)
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    let first = text.lines().find(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty()).unwrap_or("");
    csv::ReaderBuilder::new().delimiter(detect_delimiter(first)).comment(Some(b'#')).trim(csv::Trim::All).flexible(false).from_reader(text.as_bytes())
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.parse::<f64>().map_err(|_| Error::Parse { row, column: column.to_string(), value: cell.to_string() })
}

/// Parses wide-format CSV text. Lines starting with `#` are ignored.
pub fn read_wide_csv(text: &str, schema: &AttributeSchema) -> Result<ChoiceDataset> {
    read_wide(text, schema, true)
}

/// Like [`read_wide_csv`], but the choice column may be absent (every row then
/// points at the first alternative). Used for design matrices.
pub fn read_design_csv(text: &str, schema: &AttributeSchema) -> Result<ChoiceDataset> {
    read_wide(text, schema, false)
}

fn read_wide(text: &str, schema: &AttributeSchema, require_choice: bool) -> Result<ChoiceDataset> {
    schema.validate()?;
    let mut reader = csv_reader(text);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let columns = schema.attribute_columns();
    let mut positions = Vec::with_capacity(columns.len());
    for c in &columns {
        positions.push(find(c).ok_or_else(|| Error::Schema(format!("missing column `{c}`")))?);
    }
    let choice_pos = match find(&schema.choice_column) {
        Some(p) => Some(p),
        None if require_choice => return Err(Error::Schema(format!("missing column `{}`", schema.choice_column))),
        None => None,
    };
    let resp_pos = match &schema.respondent_column {
        Some(r) => Some(find(r).ok_or_else(|| Error::Schema(format!("missing column `{r}`")))?),
        None => None,
    };
    let j = schema.n_alternatives();
    let mut values = Vec::new();
    let mut choices = Vec::new();
    let mut respondents = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        for (col, &p) in columns.iter().zip(&positions) {
            values.push(parse_cell(rec.get(p).unwrap_or(""), row, col)?);
        }
        match choice_pos {
            Some(p) => {
                let raw = parse_cell(rec.get(p).unwrap_or(""), row, &schema.choice_column)?;
                if raw.fract() != 0.0 || raw < 1.0 || raw > j as f64 {
                    return Err(Error::Validation(format!("row {row}: choice value {raw} outside 1..{j}")));
                }
                choices.push(raw as usize - 1);
            }
            None => choices.push(0),
        }
        respondents.push(match resp_pos {
            Some(p) => parse_cell(rec.get(p).unwrap_or(""), row, schema.respondent_column.as_deref().unwrap_or(""))? as i64,
            None => row as i64,
        });
    }
    ChoiceDataset::assemble(schema.clone(), values, choices, respondents, 1.0)
}

/// Loads a wide CSV (one choice situation per row).
pub fn load_wide_csv(path: &Path, schema: &AttributeSchema) -> Result<ChoiceDataset> {
    read_wide_csv(&read_all(path)?, schema)
}

pub fn load_design_csv(path: &Path, schema: &AttributeSchema) -> Result<ChoiceDataset> {
    read_design_csv(&read_all(path)?, schema)
}

/// Raw header names of the Swissmetro release. Loadable from a JSON mapping file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwissmetroColumns {
    pub id: String,
    pub choice: String,
    pub annual_card: String,
    pub train_av: String,
    pub sm_av: String,
    pub car_av: String,
    pub train_tt: String,
    pub train_co: String,
    pub train_he: String,
    pub sm_tt: String,
    pub sm_co: String,
    pub sm_he: String,
    pub car_tt: String,
    pub car_co: String,
}

impl Default for SwissmetroColumns {
    fn default() -> Self {
        let s = |v: &str| v.to_string();
        SwissmetroColumns {
            id: s("ID"),
            choice: s("CHOICE"),
            annual_card: s("GA"),
            train_av: s("TRAIN_AV"),
            sm_av: s("SM_AV"),
            car_av: s("CAR_AV"),
            train_tt: s("TRAIN_TT"),
            train_co: s("TRAIN_CO"),
            train_he: s("TRAIN_HE"),
            sm_tt: s("SM_TT"),
            sm_co: s("SM_CO"),
            sm_he: s("SM_HE"),
            car_tt: s("CAR_TT"),
            car_co: s("CAR_CO"),
        }
    }
}

/// Excludes rows whose `column` equals `equals`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusionRule {
    pub column: String,
    pub equals: f64,
}

/// Cleaning rules for the raw Swissmetro file. The defaults keep rows where all
/// three modes are available and a mode was chosen, which yields 9,036 choice
/// situations on the public release.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwissmetroFilterConfig {
    pub columns: SwissmetroColumns,
    pub require_all_available: bool,
    pub drop_non_response: bool,
    pub annual_card_zero_cost: bool,
    pub exclusions: Vec<ExclusionRule>,
}

impl Default for SwissmetroFilterConfig {
    fn default() -> Self {
        SwissmetroFilterConfig { columns: SwissmetroColumns::default(), require_all_available: true, drop_non_response: true, annual_card_zero_cost: true, exclusions: Vec::new() }
    }
}

impl SwissmetroFilterConfig {
    /// Reads a column-name mapping file; every other setting keeps its default.
    pub fn with_mapping_file(path: &Path) -> Result<Self> {
        let columns: SwissmetroColumns = serde_json::from_str(&read_all(path)?)?;
        Ok(SwissmetroFilterConfig { columns, ..Default::default() })
    }
}

/// Schema produced by [`ingest_swissmetro`]: train, Swissmetro and car, with
/// cost and time for all modes and headway for the two public transport modes.
pub fn swissmetro_schema() -> AttributeSchema {
    AttributeSchema {
        alternatives: vec![
            AlternativeSpec::new("train", "TRAIN_CO", &["TRAIN_TT", "TRAIN_HE"]),
            AlternativeSpec::new("SM", "SM_CO", &["SM_TT", "SM_HE"]),
            AlternativeSpec::new("car", "CAR_CO", &["CAR_TT"]),
        ],
        choice_column: "CHOICE".into(),
        respondent_column: Some("ID".into()),
    }
}

pub fn read_swissmetro(text: &str, filters: &SwissmetroFilterConfig) -> Result<ChoiceDataset> {
    let mut reader = csv_reader(text);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema(format!("raw column `{name}` not found in Swissmetro file")));
    let c = &filters.columns;
    let id = find(&c.id)?;
    let choice = find(&c.choice)?;
    let ga = find(&c.annual_card)?;
    let av = [find(&c.train_av)?, find(&c.sm_av)?, find(&c.car_av)?];
    let attrs = [find(&c.train_co)?, find(&c.train_tt)?, find(&c.train_he)?, find(&c.sm_co)?, find(&c.sm_tt)?, find(&c.sm_he)?, find(&c.car_co)?, find(&c.car_tt)?];
    let exclusions = filters.exclusions.iter().map(|r| find(&r.column).map(|p| (p, r.equals))).collect::<Result<Vec<_>>>()?;

    let mut values = Vec::new();
    let mut choices = Vec::new();
    let mut respondents = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let get = |p: usize| parse_cell(rec.get(p).unwrap_or(""), row, &headers[p]);
        if filters.require_all_available && av.iter().map(|&p| get(p)).collect::<Result<Vec<_>>>()?.iter().any(|&a| a != 1.0) {
            continue;
        }
        let chosen = get(choice)?;
        if chosen == 0.0 && filters.drop_non_response {
            continue;
        }
        if exclusions.iter().map(|&(p, v)| get(p).map(|x| x == v)).collect::<Result<Vec<_>>>()?.into_iter().any(|b| b) {
            continue;
        }
        if chosen.fract() != 0.0 || !(1.0..=3.0).contains(&chosen) {
            return Err(Error::Validation(format!("row {row}: choice value {chosen} outside 1..3")));
        }
        let mut a = attrs.iter().map(|&p| get(p)).collect::<Result<Vec<_>>>()?;
        if filters.annual_card_zero_cost && get(ga)? == 1.0 {
            a[0] = 0.0;
            a[3] = 0.0;
        }
        values.extend(a);
        choices.push(chosen as usize - 1);
        respondents.push(get(id)? as i64);
    }
    ChoiceDataset::assemble(swissmetro_schema(), values, choices, respondents, 1.0)
}

/// Swissmetro alternatives with cost and travel time only.
pub fn swissmetro_cost_time_schema() -> AttributeSchema {
    AttributeSchema::new(
        vec![AlternativeSpec::new("train", "TRAIN_CO", &["TRAIN_TT"]), AlternativeSpec::new("SM", "SM_CO", &["SM_TT"]), AlternativeSpec::new("car", "CAR_CO", &["CAR_TT"])],
        "CHOICE",
        Some("ID"),
    )
    .expect("static schema is valid")
}

/// Reads and cleans a raw Swissmetro file (tab- or comma-separated).
pub fn ingest_swissmetro(path: &Path, filters: &SwissmetroFilterConfig) -> Result<ChoiceDataset> {
    read_swissmetro(&read_all(path)?, filters)
}

/// Divides every attribute by `factor`.
pub fn prescale(ds: &ChoiceDataset, factor: f64) -> Result<ChoiceDataset> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidArgument(format!("prescale factor must be positive, got {factor}")));
    }
    let values = ds.values.iter().map(|v| v / factor).collect();
    Ok(ds.with_values(values, ds.prescale_factor * factor))
}

/// Observed range of one column (or of the pooled cost group).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn scale(&self, x: f64) -> f64 {
        (x - self.min) / self.range()
    }

    pub fn unscale(&self, x: f64) -> f64 {
        x * self.range() + self.min
    }
}

/// Unit in which derivatives with respect to attributes are reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MuUnits {
    /// Per unit of the prescaled attribute; with the default prescale of 100
    /// this is "per 100 CHF" / "per 100 minutes".
    #[default]
    PerPrescaledUnit,
    PerOriginalUnit,
}

/// Min-max bounds recorded on prescaled data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub prescale: f64,
    pub cost_columns: Vec<String>,
    pub cost: Bounds,
    pub columns: BTreeMap<String, Bounds>,
}

impl ScalingRecord {
    pub fn bounds(&self, column: &str) -> Result<Bounds> {
        if self.cost_columns.iter().any(|c| c == column) {
            Ok(self.cost)
        } else {
            self.columns.get(column).copied().ok_or_else(|| Error::Schema(format!("column `{column}` has no scaling record")))
        }
    }

    fn bounds_per_column(&self, ds: &ChoiceDataset) -> Result<Vec<Bounds>> {
        ds.columns().iter().map(|c| self.bounds(c)).collect()
    }

    /// Applies the recorded affine maps to a dataset carrying the same prescale.
    pub fn normalize(&self, ds: &ChoiceDataset) -> Result<ChoiceDataset> {
        self.check_prescale(ds)?;
        let bounds = self.bounds_per_column(ds)?;
        let k = bounds.len();
        let values = ds.values.iter().enumerate().map(|(i, &v)| bounds[i % k].scale(v)).collect();
        Ok(ds.with_values(values, ds.prescale_factor))
    }

    /// Inverse of [`normalize`](Self::normalize); returns prescaled values.
    pub fn denormalize(&self, ds: &ChoiceDataset) -> Result<ChoiceDataset> {
        let bounds = self.bounds_per_column(ds)?;
        let k = bounds.len();
        let values = ds.values.iter().enumerate().map(|(i, &v)| bounds[i % k].unscale(v)).collect();
        Ok(ds.with_values(values, ds.prescale_factor))
    }

    /// Prescales then normalises original-unit data.
    pub fn transform(&self, original: &ChoiceDataset) -> Result<ChoiceDataset> {
        let pre = if original.prescale_factor() == self.prescale { original.clone() } else { prescale(original, self.prescale / original.prescale_factor())? };
        self.normalize(&pre)
    }

    fn check_prescale(&self, ds: &ChoiceDataset) -> Result<()> {
        if (ds.prescale_factor - self.prescale).abs() > 1e-12 * self.prescale {
            return Err(Error::Validation(format!("dataset prescale {} does not match scaling record prescale {}", ds.prescale_factor, self.prescale)));
        }
        Ok(())
    }

    pub fn gradient_to_original_units(&self, grad_normalized: f64, column: &str, units: MuUnits) -> Result<f64> {
        gradient_to_original_units(grad_normalized, column, self, units)
    }
}

/// Min-max normalisation; non-cost columns use their own range, all cost
/// columns share the pooled range.
pub fn minmax_normalize(ds: &ChoiceDataset) -> Result<(ChoiceDataset, ScalingRecord)> {
    if ds.is_empty() {
        return Err(Error::Empty("cannot normalise an empty dataset".into()));
    }
    let schema = ds.schema();
    let cost_columns = schema.cost_columns();
    let mut cost = Bounds { min: f64::INFINITY, max: f64::NEG_INFINITY };
    let mut columns = BTreeMap::new();
    for (ci, name) in ds.columns().iter().enumerate() {
        let vals = ds.column_values(ci);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if schema.is_cost_column(name) {
            cost.min = cost.min.min(lo);
            cost.max = cost.max.max(hi);
        } else {
            if hi <= lo {
                return Err(Error::DegenerateColumn(name.clone()));
            }
            columns.insert(name.clone(), Bounds { min: lo, max: hi });
        }
    }
    if cost.max <= cost.min {
        return Err(Error::DegenerateColumn(format!("pooled cost ({})", cost_columns.join(", "))));
    }
    let record = ScalingRecord { prescale: ds.prescale_factor(), cost_columns, cost, columns };
    let normalized = record.normalize(ds)?;
    Ok((normalized, record))
}

fn floor_tol(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// Row indices of a stratified split.
///
/// The test size is `round(N * test_fraction)`, apportioned across classes by
/// largest remainder on the quotas `n_c * test_fraction`. Classes are shuffled
/// with a seeded generator, and both index lists come back in shuffled order.
pub fn stratified_split_indices(choices: &[usize], n_classes: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in choices.iter().enumerate() {
        by_class[c].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.len() == 1) {
        return Err(Error::Validation(format!("class {} has a single observation; stratification needs at least 2", c + 1)));
    }
    let n = choices.len();
    let target = ((n as f64) * test_fraction).round() as usize;
    let quotas: Vec<f64> = by_class.iter().map(|v| v.len() as f64 * test_fraction).collect();
    let mut take: Vec<usize> = quotas.iter().map(|&q| floor_tol(q)).collect();
    let assigned: usize = take.iter().sum();
    let mut order: Vec<usize> = (0..n_classes).collect();
    if assigned < target {
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - take[a] as f64;
            let rb = quotas[b] - take[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let grow: Vec<usize> = order.iter().copied().filter(|&c| take[c] + 1 < by_class[c].len()).take(target - assigned).collect();
        for c in grow {
            take[c] += 1;
        }
    } else if assigned > target {
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - take[a] as f64;
            let rb = quotas[b] - take[b] as f64;
            ra.partial_cmp(&rb).unwrap().then(a.cmp(&b))
        });
        let shrink: Vec<usize> = order.iter().copied().filter(|&c| take[c] > 0).take(assigned - target).collect();
        for c in shrink {
            take[c] -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n - target);
    let mut test = Vec::with_capacity(target);
    for (members, &t) in by_class.iter_mut().zip(&take) {
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..t]);
        train.extend_from_slice(&members[t..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, test))
}

/// Stratified train/test split on the chosen alternative.
pub fn stratified_split(ds: &ChoiceDataset, test_fraction: f64, seed: u64) -> Result<(ChoiceDataset, ChoiceDataset)> {
    let (train, test) = stratified_split_indices(ds.choices(), ds.n_alternatives(), test_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Splits off the last `floor(N * fraction)` rows as a validation set, order preserved.
pub fn validation_tail(train: &ChoiceDataset, fraction: f64) -> Result<(ChoiceDataset, ChoiceDataset)> {
    let (fit, val) = validation_tail_indices(train.len(), fraction)?;
    Ok((train.subset(&fit), train.subset(&val)))
}

pub fn validation_tail_indices(n: usize, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    let n_val = floor_tol(n as f64 * fraction);
    Ok(((0..n - n_val).collect(), (n - n_val..n).collect()))
}

/// Converts a derivative taken with respect to a normalised column into the
/// requested unit: divide by the prescaled range, and additionally by the
/// prescale factor for per-original-unit reporting.
pub fn gradient_to_original_units(grad_normalized: f64, column: &str, scaling: &ScalingRecord, units: MuUnits) -> Result<f64> {
    let per_prescaled = grad_normalized / scaling.bounds(column)?.range();
    Ok(match units {
        MuUnits::PerPrescaledUnit => per_prescaled,
        MuUnits::PerOriginalUnit => per_prescaled / scaling.prescale,
    })
}

/// Reads the first non-comment line of a text file, for provenance checks.
pub fn first_data_line(path: &Path) -> Result<Option<String>> {
    let reader = BufReader::new(File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        if !line.starts_with('#') {
            return Ok(Some(line));
        }
    }
    Ok(None)
}
