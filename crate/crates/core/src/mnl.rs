//! Linear and log-linear multinomial logit models estimated by maximum likelihood.

use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, ChoiceDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityForm {
    Linear,
    LogLinear,
}

/// One taste coefficient and the `(alternative, column)` pairs it multiplies.
/// A generic coefficient lists one pair per alternative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnlTerm {
    pub name: String,
    pub entries: Vec<(usize, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnlSpec {
    pub form: UtilityForm,
    pub schema: AttributeSchema,
    /// Alternatives that receive a constant. The first alternative should not be among them.
    pub asc_alternatives: Vec<usize>,
    pub terms: Vec<MnlTerm>,
    pub log_offset: f64,
}

/// Default constant added inside the logarithm of the log-linear form.
pub const DEFAULT_LOG_OFFSET: f64 = 0.1;

impl MnlSpec {
    pub fn new(schema: &AttributeSchema, form: UtilityForm) -> Self {
        MnlSpec { form, schema: schema.clone(), asc_alternatives: Vec::new(), terms: Vec::new(), log_offset: DEFAULT_LOG_OFFSET }
    }

    pub fn with_asc(mut self, alternative: &str) -> Result<Self> {
        let j = self.alt(alternative)?;
        self.asc_alternatives.push(j);
        Ok(self)
    }

    /// Coefficient shared by all alternatives; `columns[j]` belongs to alternative `j`.
    pub fn with_generic(mut self, name: &str, columns: &[&str]) -> Result<Self> {
        if columns.len() != self.schema.n_alternatives() {
            return Err(Error::Schema(format!("generic term `{name}` needs a column for every alternative")));
        }
        let entries = columns.iter().enumerate().map(|(j, c)| self.check_column(j, c).map(|_| (j, c.to_string()))).collect::<Result<Vec<_>>>()?;
        self.terms.push(MnlTerm { name: name.to_string(), entries });
        Ok(self)
    }

    pub fn with_specific(mut self, name: &str, alternative: &str, column: &str) -> Result<Self> {
        let j = self.alt(alternative)?;
        self.check_column(j, column)?;
        self.terms.push(MnlTerm { name: name.to_string(), entries: vec![(j, column.to_string())] });
        Ok(self)
    }

    pub fn with_log_offset(mut self, offset: f64) -> Self {
        self.log_offset = offset;
        self
    }

    fn alt(&self, name: &str) -> Result<usize> {
        self.schema.alternative_index(name).ok_or_else(|| Error::Schema(format!("unknown alternative `{name}`")))
    }

    fn check_column(&self, j: usize, column: &str) -> Result<()> {
        match self.schema.owner_of(column) {
            Some(owner) if owner == j => Ok(()),
            _ => Err(Error::Schema(format!("column `{column}` is not an attribute of alternative {}", self.schema.alternatives[j].name))),
        }
    }

    /// Generic cost and generic time coefficients, no constants.
    pub fn generic_cost_time(schema: &AttributeSchema, form: UtilityForm, time_columns: &[&str]) -> Result<Self> {
        let costs = schema.cost_columns();
        let costs: Vec<&str> = costs.iter().map(String::as_str).collect();
        MnlSpec::new(schema, form).with_generic("B_TC", &costs)?.with_generic("B_TT", time_columns)
    }

    /// Swissmetro specification: constants on SM and car, generic cost,
    /// mode-specific time and headway coefficients.
    pub fn swissmetro(form: UtilityForm) -> Result<Self> {
        MnlSpec::new(&crate::data::swissmetro_schema(), form)
            .with_asc("SM")?
            .with_asc("car")?
            .with_generic("B_TC", &["TRAIN_CO", "SM_CO", "CAR_CO"])?
            .with_specific("B_TT_TRAIN", "train", "TRAIN_TT")?
            .with_specific("B_TT_SM", "SM", "SM_TT")?
            .with_specific("B_TT_CAR", "car", "CAR_TT")?
            .with_specific("B_HE_TRAIN", "train", "TRAIN_HE")?
            .with_specific("B_HE_SM", "SM", "SM_HE")
    }

    pub fn n_parameters(&self) -> usize {
        self.asc_alternatives.len() + self.terms.len()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.asc_alternatives.iter().map(|&j| format!("ASC_{}", self.schema.alternatives[j].name.to_uppercase())).chain(self.terms.iter().map(|t| t.name.clone())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.form == UtilityForm::LogLinear && !(self.log_offset > 0.0) {
            return Err(Error::InvalidArgument(format!("log offset must be positive, got {}", self.log_offset)));
        }
        Ok(())
    }

    fn transform(&self, x: f64) -> Result<f64> {
        match self.form {
            UtilityForm::Linear => Ok(x),
            UtilityForm::LogLinear => {
                let y = x + self.log_offset;
                if y <= 0.0 {
                    return Err(Error::Domain(format!("ln({x} + {}) is undefined", self.log_offset)));
                }
                Ok(y.ln())
            }
        }
    }

    fn column_indices(&self) -> Vec<Vec<(usize, usize)>> {
        let columns = self.schema.attribute_columns();
        self.terms.iter().map(|t| t.entries.iter().map(|(j, c)| (*j, columns.iter().position(|n| n == c).unwrap())).collect()).collect()
    }

    /// Row-major `N x J x P` design tensor of transformed attributes.
    fn design(&self, ds: &ChoiceDataset) -> Result<Design> {
        self.validate()?;
        if ds.schema() != &self.schema {
            return Err(Error::Schema("dataset schema differs from the MNL specification's".into()));
        }
        let j = self.schema.n_alternatives();
        let p = self.n_parameters();
        let idx = self.column_indices();
        let mut z = vec![0.0; ds.len() * j * p];
        for (n, row) in ds.rows().enumerate() {
            self.fill_row(row, &idx, &mut z[n * j * p..(n + 1) * j * p])?;
        }
        Ok(Design { z, j, p })
    }

    fn fill_row(&self, row: &[f64], idx: &[Vec<(usize, usize)>], out: &mut [f64]) -> Result<()> {
        let p = self.n_parameters();
        let a = self.asc_alternatives.len();
        for (k, &alt) in self.asc_alternatives.iter().enumerate() {
            out[alt * p + k] = 1.0;
        }
        for (t, entries) in idx.iter().enumerate() {
            for &(alt, c) in entries {
                out[alt * p + a + t] += self.transform(row[c])?;
            }
        }
        Ok(())
    }
}

struct Design {
    z: Vec<f64>,
    j: usize,
    p: usize,
}

impl Design {
    fn n(&self) -> usize {
        self.z.len() / (self.j * self.p).max(1)
    }

    /// Log-likelihood and its gradient.
    fn loglik(&self, theta: &[f64], choices: &[usize]) -> (f64, Vec<f64>) {
        let (j, p) = (self.j, self.p);
        let mut ll = 0.0;
        let mut grad = vec![0.0; p];
        let mut v = vec![0.0; j];
        for (n, &y) in choices.iter().enumerate().take(self.n()) {
            let zn = &self.z[n * j * p..(n + 1) * j * p];
            for (alt, vj) in v.iter_mut().enumerate() {
                *vj = zn[alt * p..(alt + 1) * p].iter().zip(theta).map(|(a, b)| a * b).sum();
            }
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
            ll += v[y] - m - s.ln();
            for (alt, &vj) in v.iter().enumerate() {
                let pj = (vj - m).exp() / s;
                let ind = if alt == y { 1.0 } else { 0.0 };
                for (g, &zv) in grad.iter_mut().zip(&zn[alt * p..(alt + 1) * p]) {
                    *g += (ind - pj) * zv;
                }
            }
        }
        (ll, grad)
    }
}

/// Deterministic utilities of one observation.
pub fn mnl_utilities(spec: &MnlSpec, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    let (j, p) = (spec.schema.n_alternatives(), spec.n_parameters());
    if theta.len() != p {
        return Err(Error::Dimension { expected: p, got: theta.len() });
    }
    let mut z = vec![0.0; j * p];
    spec.fill_row(x, &spec.column_indices(), &mut z)?;
    Ok((0..j).map(|alt| z[alt * p..(alt + 1) * p].iter().zip(theta).map(|(a, b)| a * b).sum()).collect())
}

/// `sum_n ln p_{n, chosen}` and its analytic gradient.
pub fn mnl_loglik_and_grad(spec: &MnlSpec, theta: &[f64], ds: &ChoiceDataset) -> Result<(f64, Vec<f64>)> {
    if theta.len() != spec.n_parameters() {
        return Err(Error::Dimension { expected: spec.n_parameters(), got: theta.len() });
    }
    let design = spec.design(ds)?;
    Ok(design.loglik(theta, ds.choices()))
}

/// Choice probabilities of every row.
pub fn mnl_probabilities(spec: &MnlSpec, theta: &[f64], ds: &ChoiceDataset) -> Result<Vec<Vec<f64>>> {
    ds.rows().map(|x| crate::nncore::softmax(&mnl_utilities(spec, theta, x)?)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnlEstimate {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub gradient_norm: f64,
    pub iterations: usize,
}

impl MnlEstimate {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    /// Two-column parameter table.
    pub fn table(&self) -> String {
        let width = self.names.iter().map(|n| n.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<width$}  {:>12}\n", "Name", "Value");
        for (n, v) in self.names.iter().zip(&self.values) {
            s.push_str(&format!("{n:<width$}  {v:>12.6}\n"));
        }
        s.push_str(&format!("Final log likelihood: {:.4}\n", self.log_likelihood));
        s.push_str(&format!("Converged: {} ({} iterations, max |gradient| {:.3e})\n", self.converged, self.iterations, self.gradient_norm));
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { tolerance: 1e-6, max_iterations: 500 }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS ascent on the log-likelihood with a backtracking (Armijo) line search.
pub fn fit_mnl(spec: &MnlSpec, ds: &ChoiceDataset, init: &[f64], options: FitOptions) -> Result<MnlEstimate> {
    if ds.is_empty() {
        return Err(Error::Empty("cannot estimate an MNL on an empty dataset".into()));
    }
    let p = spec.n_parameters();
    if init.len() != p {
        return Err(Error::Dimension { expected: p, got: init.len() });
    }
    let design = spec.design(ds)?;
    let choices = ds.choices();
    // Minimise f = -LL.
    let eval = |theta: &[f64]| {
        let (ll, g) = design.loglik(theta, choices);
        (-ll, g.into_iter().map(|v| -v).collect::<Vec<_>>())
    };
    let mut theta = init.to_vec();
    let (mut f, mut g) = eval(&theta);
    let identity = |scale: f64| {
        let mut h = vec![0.0; p * p];
        for i in 0..p {
            h[i * p + i] = scale;
        }
        h
    };
    let mut h = identity(1.0 / max_abs(&g).max(1.0));
    let mut iterations = 0;
    let mut stalled = false;
    while max_abs(&g) >= options.tolerance && iterations < options.max_iterations {
        let mut d: Vec<f64> = (0..p).map(|i| -dot(&h[i * p..(i + 1) * p], &g)).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h = identity(1.0 / max_abs(&g).max(1.0));
            d = g.iter().map(|v| -v * h[0]).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(&d).map(|(t, di)| t + step * di).collect();
            let (ft, gt) = eval(&trial);
            // Near the optimum decreases in f vanish below summation roundoff;
            // there a lower gradient norm decides.
            let noise = 64.0 * f64::EPSILON * f.abs().max(1.0);
            let armijo = ft <= f + 1e-4 * step * slope && ft < f - noise;
            let flat = (ft - f).abs() <= noise && max_abs(&gt) < max_abs(&g);
            if ft.is_finite() && (armijo || flat) {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        log::trace!("iteration {iterations}: f {f:.10} max|g| {:.3e} step {step:.3e} accepted {}", max_abs(&g), accepted.is_some());
        let Some((next, fn_, gn)) = accepted else {
            if stalled {
                break;
            }
            stalled = true;
            h = identity(1.0 / max_abs(&g).max(1.0));
            continue;
        };
        stalled = false;
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if iterations == 1 {
                h = identity(sy / dot(&y, &y));
            }
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..p).map(|i| dot(&h[i * p..(i + 1) * p], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..p {
                for k in 0..p {
                    h[i * p + k] += -rho * (hy[i] * s[k] + s[i] * hy[k]) + (rho * rho * yhy + rho) * s[i] * s[k];
                }
            }
        }
        theta = next;
        f = fn_;
        g = gn;
    }
    let gradient_norm = max_abs(&g);
    Ok(MnlEstimate { names: spec.parameter_names(), values: theta, log_likelihood: -f, converged: gradient_norm < options.tolerance, gradient_norm, iterations })
}

/// Marginal utilities per alternative: `(column index, dV_j/dx)` for every
/// attribute entering alternative `j`'s utility. Linear form gives the
/// coefficient; log-linear gives `beta / (x + offset)`.
pub fn mnl_marginal_utils(spec: &MnlSpec, theta: &[f64], x: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
    spec.validate()?;
    if theta.len() != spec.n_parameters() {
        return Err(Error::Dimension { expected: spec.n_parameters(), got: theta.len() });
    }
    let a = spec.asc_alternatives.len();
    let mut out: Vec<Vec<(usize, f64)>> = vec![Vec::new(); spec.schema.n_alternatives()];
    for (t, entries) in spec.column_indices().iter().enumerate() {
        let beta = theta[a + t];
        for &(alt, c) in entries {
            let mu = match spec.form {
                UtilityForm::Linear => beta,
                UtilityForm::LogLinear => {
                    spec.transform(x[c])?;
                    beta / (x[c] + spec.log_offset)
                }
            };
            match out[alt].iter_mut().find(|(col, _)| *col == c) {
                Some(e) => e.1 += mu,
                None => out[alt].push((c, mu)),
            }
        }
    }
    Ok(out)
}
