//! Utility networks: the shared-cost-weights model (ASS), the fully
//! alternative-specific model (ASU) and the fully connected model (FC).
//!
//! For ASS and ASU, each alternative `j` has a non-cost stack `f_j` reading only
//! its own non-cost columns and a cost stack `g_j` reading only its own cost
//! column; `V_j = f_j + g_j + ASC_j`. In ASS every `g_j` points at the same
//! parameter blocks, so `g_j(c) = g_m(c)` for every pair of alternatives. FC
//! maps all columns to all `J` utilities with one stack.
//!
//! All trainable values live in one flat vector. A block is an offset into it;
//! tied uses share the offset, so the shared block receives the summed
//! gradient of all its uses and can never drift apart.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, ChoiceDataset};
use crate::error::{Error, Result};
use crate::nncore::{self, Activation, ParameterBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ASS")]
    Ass,
    #[serde(rename = "ASU")]
    Asu,
    #[serde(rename = "FC")]
    Fc,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ass => "ASS",
            Variant::Asu => "ASU",
            Variant::Fc => "FC",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ASS" | "ASS-NN" => Ok(Variant::Ass),
            "ASU" | "ASU-DNN" => Ok(Variant::Asu),
            "FC" => Ok(Variant::Fc),
            _ => Err(Error::InvalidArgument(format!("unknown network variant `{s}`"))),
        }
    }
}

/// Depth, width and hidden activation shared by every stack of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    pub hidden_layers: usize,
    pub nodes_per_layer: usize,
    pub activation: Activation,
}

impl Topology {
    pub fn new(hidden_layers: usize, nodes_per_layer: usize, activation: Activation) -> Result<Self> {
        let t = Topology { hidden_layers, nodes_per_layer, activation };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.nodes_per_layer == 0 {
            return Err(Error::InvalidArgument(format!("topology needs at least one hidden layer and node, got {}x{}", self.hidden_layers, self.nodes_per_layer)));
        }
        Ok(())
    }

    /// Parameters of one stack with `n_inputs` inputs and `n_outputs` identity outputs.
    pub fn stack_parameter_count(&self, n_inputs: usize, n_outputs: usize) -> usize {
        let h = self.nodes_per_layer;
        n_inputs * h + h + (self.hidden_layers - 1) * (h * h + h) + h * n_outputs + n_outputs
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{} {}", self.hidden_layers, self.nodes_per_layer, self.activation.name())
    }
}

/// Everything needed to rebuild a network's structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub topology: Topology,
    pub use_asc: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockLayout {
    offset: usize,
    out_dim: usize,
    in_dim: usize,
    tie_tag: Option<String>,
}

impl BlockLayout {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.out_dim * self.in_dim
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let s = self.offset + self.out_dim * self.in_dim;
        s..s + self.out_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    block: usize,
    activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
struct Stack {
    inputs: Vec<usize>,
    layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
struct AltGraph {
    non_cost: Option<Stack>,
    cost: Stack,
}

/// Derivatives of each utility with respect to its own columns (normalised units).
#[derive(Clone, Debug, PartialEq)]
pub struct InputGradients {
    /// `per_alternative[j]` lists `(column index, dV_j/dx)` over alternative `j`'s columns,
    /// cost column first.
    pub per_alternative: Vec<Vec<(usize, f64)>>,
}

impl InputGradients {
    pub fn get(&self, alternative: usize, column: usize) -> Option<f64> {
        self.per_alternative.get(alternative)?.iter().find(|(c, _)| *c == column).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilityNetwork {
    spec: NetworkSpec,
    schema: AttributeSchema,
    n_columns: usize,
    blocks: Vec<BlockLayout>,
    params: Vec<f64>,
    alts: Vec<AltGraph>,
    fc: Option<Stack>,
    asc_offset: Option<usize>,
}

struct Builder<'a, R: Rng + ?Sized> {
    blocks: Vec<BlockLayout>,
    params: Vec<f64>,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn block(&mut self, out_dim: usize, in_dim: usize, tie_tag: Option<String>) -> usize {
        let offset = self.params.len();
        self.params.resize(offset + out_dim * in_dim + out_dim, 0.0);
        nncore::glorot_fill(&mut self.params[offset..offset + out_dim * in_dim], out_dim, in_dim, self.rng);
        self.blocks.push(BlockLayout { offset, out_dim, in_dim, tie_tag });
        self.blocks.len() - 1
    }

    fn stack_layers(&mut self, n_inputs: usize, n_outputs: usize, topology: &Topology, tag: Option<&str>) -> Vec<Layer> {
        let h = topology.nodes_per_layer;
        let mut layers = Vec::with_capacity(topology.hidden_layers + 1);
        let mut fan_in = n_inputs;
        for l in 0..topology.hidden_layers {
            let block = self.block(h, fan_in, tag.map(|t| format!("{t}/hidden{l}")));
            layers.push(Layer { block, activation: topology.activation });
            fan_in = h;
        }
        let block = self.block(n_outputs, fan_in, tag.map(|t| format!("{t}/output")));
        layers.push(Layer { block, activation: Activation::Identity });
        layers
    }
}

/// Tie tag prefix of the shared cost stack.
pub const SHARED_COST_TAG: &str = "shared_cost";

/// Assembles a network for `schema` with Glorot-initialised blocks and zero ASCs.
pub fn build_network<R: Rng + ?Sized>(variant: Variant, topology: Topology, schema: &AttributeSchema, use_asc: bool, rng: &mut R) -> Result<UtilityNetwork> {
    topology.validate()?;
    schema.validate()?;
    let j = schema.n_alternatives();
    if j < 2 {
        return Err(Error::Schema("a choice model needs at least two alternatives".into()));
    }
    let columns = schema.attribute_columns();
    let col = |name: &str| columns.iter().position(|c| c == name).expect("schema column");
    let mut b = Builder { blocks: Vec::new(), params: Vec::new(), rng };
    let mut alts = Vec::new();
    let mut fc = None;
    match variant {
        Variant::Ass | Variant::Asu => {
            let mut shared: Option<Vec<Layer>> = None;
            for alt in &schema.alternatives {
                let non_cost = if alt.non_cost_columns.is_empty() {
                    None
                } else {
                    let inputs: Vec<usize> = alt.non_cost_columns.iter().map(|c| col(c)).collect();
                    let layers = b.stack_layers(inputs.len(), 1, &topology, None);
                    Some(Stack { inputs, layers })
                };
                let layers = match (variant, &shared) {
                    (Variant::Ass, Some(l)) => l.clone(),
                    (Variant::Ass, None) => {
                        let l = b.stack_layers(1, 1, &topology, Some(SHARED_COST_TAG));
                        shared = Some(l.clone());
                        l
                    }
                    _ => b.stack_layers(1, 1, &topology, None),
                };
                alts.push(AltGraph { non_cost, cost: Stack { inputs: vec![col(&alt.cost_column)], layers } });
            }
        }
        Variant::Fc => {
            let inputs: Vec<usize> = (0..columns.len()).collect();
            let layers = b.stack_layers(inputs.len(), j, &topology, None);
            fc = Some(Stack { inputs, layers });
        }
    }
    let asc_offset = if use_asc {
        let o = b.params.len();
        b.params.resize(o + j - 1, 0.0);
        Some(o)
    } else {
        None
    };
    Ok(UtilityNetwork { spec: NetworkSpec { variant, topology, use_asc }, schema: schema.clone(), n_columns: columns.len(), blocks: b.blocks, params: b.params, alts, fc, asc_offset })
}

/// Reusable per-stack buffers for forward and backward passes.
#[derive(Clone, Debug, Default)]
struct StackBuf {
    x: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    upstream: Vec<f64>,
    dx: Vec<f64>,
}

/// Scratch space for one network; create once per worker and reuse.
#[derive(Clone, Debug)]
pub struct Workspace {
    non_cost: Vec<StackBuf>,
    cost: Vec<StackBuf>,
    fc: StackBuf,
    utilities: Vec<f64>,
    probs: Vec<f64>,
}

impl UtilityNetwork {
    pub fn spec(&self) -> NetworkSpec {
        self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn topology(&self) -> Topology {
        self.spec.topology
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn n_alternatives(&self) -> usize {
        self.schema.n_alternatives()
    }

    pub fn n_columns(&self) -> usize {
        self.n_columns
    }

    /// Number of free parameters, counting each tied block once.
    pub fn n_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), got: values.len() });
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    /// ASC of each alternative; the reference (first) alternative is always 0.
    pub fn ascs(&self) -> Vec<f64> {
        let j = self.n_alternatives();
        match self.asc_offset {
            Some(o) => std::iter::once(0.0).chain(self.params[o..o + j - 1].iter().copied()).collect(),
            None => vec![0.0; j],
        }
    }

    pub fn set_asc(&mut self, alternative: usize, value: f64) -> Result<()> {
        match self.asc_offset {
            Some(o) if alternative >= 1 && alternative < self.n_alternatives() => {
                self.params[o + alternative - 1] = value;
                Ok(())
            }
            _ => Err(Error::InvalidArgument(format!("alternative {alternative} has no free ASC"))),
        }
    }

    /// Copy of block `id` as a standalone [`ParameterBlock`].
    pub fn block(&self, id: usize) -> ParameterBlock {
        let l = &self.blocks[id];
        ParameterBlock { out_dim: l.out_dim, in_dim: l.in_dim, weights: self.params[l.weights()].to_vec(), bias: self.params[l.bias()].to_vec(), tie_tag: l.tie_tag.clone() }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Block ids of the cost stack of `alternative`, in layer order.
    pub fn cost_stack_blocks(&self, alternative: usize) -> Option<Vec<usize>> {
        self.alts.get(alternative).map(|a| a.cost.layers.iter().map(|l| l.block).collect())
    }

    /// Offset range of block `id` inside [`parameters`](Self::parameters).
    pub fn block_range(&self, id: usize) -> std::ops::Range<usize> {
        let l = &self.blocks[id];
        l.offset..l.offset + l.out_dim * l.in_dim + l.out_dim
    }

    /// Multiplies every utility by `factor` (output layers and ASCs).
    pub fn scale_utilities(&mut self, factor: f64) {
        let outputs: Vec<usize> = self
            .alts
            .iter()
            .flat_map(|a| a.non_cost.iter().chain(std::iter::once(&a.cost)))
            .chain(self.fc.iter())
            .map(|s| s.layers.last().unwrap().block)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for id in outputs {
            let r = self.block_range(id);
            self.params[r].iter_mut().for_each(|v| *v *= factor);
        }
        if let Some(o) = self.asc_offset {
            let j = self.n_alternatives();
            self.params[o..o + j - 1].iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn workspace(&self) -> Workspace {
        let buf = |s: &Stack| StackBuf {
            x: vec![0.0; s.inputs.len()],
            pre: s.layers.iter().map(|l| vec![0.0; self.blocks[l.block].out_dim]).collect(),
            post: s.layers.iter().map(|l| vec![0.0; self.blocks[l.block].out_dim]).collect(),
            delta: Vec::new(),
            upstream: Vec::new(),
            dx: Vec::new(),
        };
        let j = self.n_alternatives();
        Workspace {
            non_cost: self.alts.iter().map(|a| a.non_cost.as_ref().map(buf).unwrap_or_default()).collect(),
            cost: self.alts.iter().map(|a| buf(&a.cost)).collect(),
            fc: self.fc.as_ref().map(buf).unwrap_or_default(),
            utilities: vec![0.0; j],
            probs: vec![0.0; j],
        }
    }

    fn stack_forward(&self, stack: &Stack, buf: &mut StackBuf) {
        for (l, layer) in stack.layers.iter().enumerate() {
            let b = &self.blocks[layer.block];
            let (before, after) = buf.post.split_at_mut(l);
            let input: &[f64] = if l == 0 { &buf.x } else { &before[l - 1] };
            let pre = &mut buf.pre[l];
            nncore::affine(&self.params[b.weights()], &self.params[b.bias()], input, pre);
            for (y, &z) in after[0].iter_mut().zip(pre.iter()) {
                *y = layer.activation.apply(z);
            }
        }
    }

    /// Backpropagates `upstream` (gradient wrt the stack output) and adds parameter
    /// gradients into `grad` when given. With `want_dx`, the input gradient ends up
    /// in `buf.upstream`.
    fn stack_backward(&self, stack: &Stack, buf: &mut StackBuf, upstream: &[f64], mut grad: Option<&mut [f64]>, want_dx: bool) {
        buf.upstream.clear();
        buf.upstream.extend_from_slice(upstream);
        for l in (0..stack.layers.len()).rev() {
            let layer = stack.layers[l];
            let b = &self.blocks[layer.block];
            buf.delta.clear();
            buf.delta.extend(buf.upstream.iter().zip(buf.pre[l].iter().zip(&buf.post[l])).map(|(&u, (&z, &y))| u * layer.activation.derivative(z, y)));
            let input: &[f64] = if l == 0 { &buf.x } else { &buf.post[l - 1] };
            let need_dx = l > 0 || want_dx;
            buf.dx.resize(b.in_dim, 0.0);
            let w = &self.params[b.weights()];
            match grad.as_deref_mut() {
                Some(g) => {
                    let (gw, gb) = g[b.offset..b.offset + b.out_dim * b.in_dim + b.out_dim].split_at_mut(b.out_dim * b.in_dim);
                    nncore::accumulate_layer_grad(w, &buf.delta, input, gw, gb, need_dx.then_some(&mut buf.dx[..]));
                }
                None if need_dx => {
                    buf.dx.iter_mut().for_each(|v| *v = 0.0);
                    for (o, &d) in buf.delta.iter().enumerate() {
                        for (v, &wv) in buf.dx.iter_mut().zip(&w[o * b.in_dim..(o + 1) * b.in_dim]) {
                            *v += wv * d;
                        }
                    }
                }
                None => {}
            }
            if need_dx {
                std::mem::swap(&mut buf.upstream, &mut buf.dx);
            }
        }
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_columns {
            return Err(Error::Dimension { expected: self.n_columns, got: x.len() });
        }
        Ok(())
    }

    /// Forward pass into `ws.utilities`.
    fn forward(&self, x: &[f64], ws: &mut Workspace) {
        let ascs = self.asc_offset;
        match &self.fc {
            Some(stack) => {
                for (v, &c) in ws.fc.x.iter_mut().zip(&stack.inputs) {
                    *v = x[c];
                }
                self.stack_forward(stack, &mut ws.fc);
                ws.utilities.copy_from_slice(ws.fc.post.last().unwrap());
            }
            None => {
                for (j, alt) in self.alts.iter().enumerate() {
                    let mut v = 0.0;
                    if let Some(s) = &alt.non_cost {
                        let buf = &mut ws.non_cost[j];
                        for (t, &c) in buf.x.iter_mut().zip(&s.inputs) {
                            *t = x[c];
                        }
                        self.stack_forward(s, buf);
                        v += buf.post.last().unwrap()[0];
                    }
                    let buf = &mut ws.cost[j];
                    buf.x[0] = x[alt.cost.inputs[0]];
                    self.stack_forward(&alt.cost, buf);
                    v += buf.post.last().unwrap()[0];
                    ws.utilities[j] = v;
                }
            }
        }
        if let Some(o) = ascs {
            for j in 1..ws.utilities.len() {
                ws.utilities[j] += self.params[o + j - 1];
            }
        }
    }

    /// Deterministic utilities `V_j` of one normalised observation.
    pub fn utilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_row(x)?;
        let mut ws = self.workspace();
        self.forward(x, &mut ws);
        Ok(ws.utilities)
    }

    pub fn utilities_with(&self, x: &[f64], ws: &mut Workspace) -> Result<Vec<f64>> {
        self.check_row(x)?;
        self.forward(x, ws);
        Ok(ws.utilities.clone())
    }

    pub fn choice_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        nncore::softmax(&self.utilities(x)?)
    }

    /// Output of alternative `j`'s cost stack at normalised cost `c` (`g_j(c)`).
    pub fn cost_utility(&self, alternative: usize, c: f64) -> Result<f64> {
        let alt = self.alts.get(alternative).ok_or_else(|| Error::InvalidArgument(format!("no cost stack for alternative {alternative}")))?;
        let mut ws = self.workspace();
        let buf = &mut ws.cost[alternative];
        buf.x[0] = c;
        self.stack_forward(&alt.cost, buf);
        Ok(buf.post.last().unwrap()[0])
    }

    /// Exact `dV_j/dx_jk` for every alternative and each of its own columns.
    pub fn input_gradients(&self, x: &[f64]) -> Result<InputGradients> {
        self.check_row(x)?;
        let mut ws = self.workspace();
        self.input_gradients_with(x, &mut ws)
    }

    pub fn input_gradients_with(&self, x: &[f64], ws: &mut Workspace) -> Result<InputGradients> {
        self.check_row(x)?;
        self.forward(x, ws);
        let j_count = self.n_alternatives();
        let mut per_alternative = Vec::with_capacity(j_count);
        match &self.fc {
            Some(stack) => {
                let columns = self.schema.attribute_columns();
                for j in 0..j_count {
                    let mut e = vec![0.0; j_count];
                    e[j] = 1.0;
                    self.stack_backward(stack, &mut ws.fc, &e, None, true);
                    let alt = &self.schema.alternatives[j];
                    let own = std::iter::once(&alt.cost_column).chain(&alt.non_cost_columns);
                    per_alternative.push(
                        own.map(|name| {
                            let c = columns.iter().position(|n| n == name).unwrap();
                            (c, ws.fc.upstream[c])
                        })
                        .collect(),
                    );
                }
            }
            None => {
                for (j, alt) in self.alts.iter().enumerate() {
                    let mut entries = Vec::new();
                    let buf = &mut ws.cost[j];
                    self.stack_backward(&alt.cost, buf, &[1.0], None, true);
                    entries.push((alt.cost.inputs[0], buf.upstream[0]));
                    if let Some(s) = &alt.non_cost {
                        let buf = &mut ws.non_cost[j];
                        self.stack_backward(s, buf, &[1.0], None, true);
                        entries.extend(s.inputs.iter().copied().zip(buf.upstream.iter().copied()));
                    }
                    per_alternative.push(entries);
                }
            }
        }
        Ok(InputGradients { per_alternative })
    }

    /// Adds `d(-ln p_chosen)/dθ * weight` into `grad` and returns `ln p_chosen`.
    fn accumulate_sample(&self, x: &[f64], chosen: usize, weight: f64, ws: &mut Workspace, grad: &mut [f64]) -> f64 {
        self.forward(x, ws);
        let (lp, _) = nncore::chosen_log_prob(&ws.utilities, chosen);
        nncore::softmax_into(&ws.utilities, &mut ws.probs);
        let j_count = ws.probs.len();
        let mut dv = std::mem::take(&mut ws.probs);
        dv[chosen] -= 1.0;
        dv.iter_mut().for_each(|d| *d *= weight);
        match &self.fc {
            Some(stack) => self.stack_backward(stack, &mut ws.fc, &dv, Some(grad), false),
            None => {
                for (j, alt) in self.alts.iter().enumerate() {
                    if let Some(s) = &alt.non_cost {
                        self.stack_backward(s, &mut ws.non_cost[j], &dv[j..j + 1], Some(grad), false);
                    }
                    self.stack_backward(&alt.cost, &mut ws.cost[j], &dv[j..j + 1], Some(grad), false);
                }
            }
        }
        if let Some(o) = self.asc_offset {
            for j in 1..j_count {
                grad[o + j - 1] += dv[j];
            }
        }
        ws.probs = dv;
        lp
    }

    /// Mean cross-entropy over `rows` of `ds` and its gradient wrt all parameters.
    pub fn loss_and_gradient(&self, ds: &ChoiceDataset, rows: &[usize], ws: &mut Workspace, grad: &mut Vec<f64>) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        self.check_row(ds.row(rows[0]))?;
        grad.clear();
        grad.resize(self.params.len(), 0.0);
        let w = 1.0 / rows.len() as f64;
        let mut ll = 0.0;
        for &i in rows {
            ll += self.accumulate_sample(ds.row(i), ds.choices()[i], w, ws, grad);
        }
        Ok(-ll * w)
    }

    /// `sum_n ln p_{n, chosen}` over the whole dataset.
    pub fn log_likelihood(&self, ds: &ChoiceDataset) -> Result<f64> {
        let mut ws = self.workspace();
        let mut ll = 0.0;
        for (i, x) in ds.rows().enumerate() {
            self.check_row(x)?;
            self.forward(x, &mut ws);
            ll += nncore::chosen_log_prob(&ws.utilities, ds.choices()[i]).0;
        }
        Ok(ll)
    }

    /// Choice probabilities for every row.
    pub fn probabilities(&self, ds: &ChoiceDataset) -> Result<Vec<Vec<f64>>> {
        let mut ws = self.workspace();
        ds.rows()
            .map(|x| {
                self.check_row(x)?;
                self.forward(x, &mut ws);
                let mut p = vec![0.0; ws.utilities.len()];
                nncore::softmax_into(&ws.utilities, &mut p);
                Ok(p)
            })
            .collect()
    }

    /// Serialisable view: topology, activations, tie tags and row-major weights,
    /// in alternative order then layer order.
    pub fn to_document(&self) -> NetworkDocument {
        let columns = self.schema.attribute_columns();
        let stack_doc = |s: &Stack| StackDocument {
            inputs: s.inputs.iter().map(|&c| columns[c].clone()).collect(),
            layers: s
                .layers
                .iter()
                .map(|l| {
                    let b = self.block(l.block);
                    LayerDocument { activation: l.activation, tie_tag: b.tie_tag, out_dim: b.out_dim, in_dim: b.in_dim, weights: b.weights, bias: b.bias }
                })
                .collect(),
        };
        let ascs = self.ascs();
        NetworkDocument {
            spec: self.spec,
            schema: self.schema.clone(),
            alternatives: self
                .schema
                .alternatives
                .iter()
                .enumerate()
                .map(|(j, a)| AlternativeDocument {
                    name: a.name.clone(),
                    asc: ascs[j],
                    non_cost: self.alts.get(j).and_then(|g| g.non_cost.as_ref()).map(stack_doc),
                    cost: self.alts.get(j).map(|g| stack_doc(&g.cost)),
                })
                .collect(),
            fc: self.fc.as_ref().map(stack_doc),
        }
    }

    pub fn from_document(doc: &NetworkDocument) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut net = build_network(doc.spec.variant, doc.spec.topology, &doc.schema, doc.spec.use_asc, &mut rng)?;
        let mut filled = vec![false; net.blocks.len()];
        let mismatch = |what: &str| Error::Validation(format!("network document does not match its declared structure: {what}"));
        let mut fill = |net: &mut UtilityNetwork, stack: &Stack, d: &StackDocument| -> Result<()> {
            if d.layers.len() != stack.layers.len() {
                return Err(mismatch("layer count"));
            }
            for (layer, ld) in stack.layers.iter().zip(&d.layers) {
                let b = net.blocks[layer.block].clone();
                if ld.out_dim != b.out_dim || ld.in_dim != b.in_dim || ld.weights.len() != b.out_dim * b.in_dim || ld.bias.len() != b.out_dim {
                    return Err(mismatch("block shape"));
                }
                if ld.activation != layer.activation || ld.tie_tag != b.tie_tag {
                    return Err(mismatch("activation or tie tag"));
                }
                if filled[layer.block] {
                    if net.params[b.weights()] != ld.weights[..] || net.params[b.bias()] != ld.bias[..] {
                        return Err(mismatch("tied copies differ"));
                    }
                } else {
                    net.params[b.weights()].copy_from_slice(&ld.weights);
                    net.params[b.bias()].copy_from_slice(&ld.bias);
                    filled[layer.block] = true;
                }
            }
            Ok(())
        };
        if doc.alternatives.len() != net.n_alternatives() {
            return Err(mismatch("alternative count"));
        }
        let alts = net.alts.clone();
        for (j, ad) in doc.alternatives.iter().enumerate() {
            if let Some(g) = alts.get(j) {
                match (&g.non_cost, &ad.non_cost) {
                    (Some(s), Some(d)) => fill(&mut net, s, d)?,
                    (None, None) => {}
                    _ => return Err(mismatch("non-cost stack presence")),
                }
                fill(&mut net, &g.cost, ad.cost.as_ref().ok_or_else(|| mismatch("missing cost stack"))?)?;
            }
            if j > 0 && net.asc_offset.is_some() {
                net.set_asc(j, ad.asc)?;
            }
        }
        if let (Some(s), Some(d)) = (net.fc.clone(), &doc.fc) {
            fill(&mut net, &s, d)?;
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub activation: Activation,
    pub tie_tag: Option<String>,
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackDocument {
    pub inputs: Vec<String>,
    pub layers: Vec<LayerDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlternativeDocument {
    pub name: String,
    pub asc: f64,
    pub non_cost: Option<StackDocument>,
    pub cost: Option<StackDocument>,
}

/// JSON parameter file layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDocument {
    #[serde(flatten)]
    pub spec: NetworkSpec,
    pub schema: AttributeSchema,
    pub alternatives: Vec<AlternativeDocument>,
    pub fc: Option<StackDocument>,
}

/// Closed-form parameter count of a network built by [`build_network`].
pub fn expected_parameter_count(spec: &NetworkSpec, schema: &AttributeSchema) -> usize {
    let t = &spec.topology;
    let j = schema.n_alternatives();
    let asc = if spec.use_asc { j - 1 } else { 0 };
    let non_cost: usize = schema.alternatives.iter().filter(|a| !a.non_cost_columns.is_empty()).map(|a| t.stack_parameter_count(a.non_cost_columns.len(), 1)).sum();
    match spec.variant {
        Variant::Ass => non_cost + t.stack_parameter_count(1, 1) + asc,
        Variant::Asu => non_cost + j * t.stack_parameter_count(1, 1) + asc,
        Variant::Fc => t.stack_parameter_count(schema.attribute_columns().len(), j) + asc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AlternativeSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn fig1_schema() -> AttributeSchema {
        AttributeSchema::new(
            vec![AlternativeSpec::new("train", "TC1", &["TT1", "HE1"]), AlternativeSpec::new("sm", "TC2", &["TT2", "HE2"]), AlternativeSpec::new("car", "TC3", &["TT3"])],
            "choice",
            None,
        )
        .unwrap()
    }

    fn tanh(h: usize, n: usize) -> Topology {
        Topology::new(h, n, Activation::Tanh).unwrap()
    }

    #[test]
    fn fig1_configuration_ties_cost_stacks_only() {
        let schema = fig1_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = build_network(Variant::Ass, tanh(2, 4), &schema, true, &mut rng).unwrap();
        let cost: Vec<_> = (0..3).map(|j| net.cost_stack_blocks(j).unwrap()).collect();
        assert_eq!(cost[0], cost[1]);
        assert_eq!(cost[1], cost[2]);
        for id in &cost[0] {
            assert!(net.block(*id).tie_tag.as_deref().unwrap().starts_with(SHARED_COST_TAG));
        }
        // 3 non-cost stacks x 3 blocks + 1 shared cost stack x 3 blocks
        assert_eq!(net.n_blocks(), 12);
        let asu = build_network(Variant::Asu, tanh(2, 4), &schema, true, &mut rng).unwrap();
        assert_eq!(asu.n_blocks(), 18);
        assert!(net.n_parameters() < asu.n_parameters());
    }

    #[test]
    fn parameter_counts_match_formula() {
        let schema = fig1_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for variant in [Variant::Ass, Variant::Asu, Variant::Fc] {
            for (h, n) in [(1, 5), (2, 10), (1, 30)] {
                for asc in [false, true] {
                    let net = build_network(variant, tanh(h, n), &schema, asc, &mut rng).unwrap();
                    assert_eq!(net.n_parameters(), expected_parameter_count(&net.spec(), &schema));
                }
            }
        }
        // ASS 1x1: non-cost stacks (2*1+1+1+1) * 2 + (1+1+1+1) + (1*1+1+1+1) + ASCs 2
        let net = build_network(Variant::Ass, tanh(1, 1), &schema, true, &mut rng).unwrap();
        assert_eq!(net.n_parameters(), 5 + 5 + 4 + 4 + 2);
    }

    #[test]
    fn zero_parameters_give_zero_utilities() {
        let schema = fig1_schema();
        let mut net = build_network(Variant::Ass, tanh(1, 3), &schema, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let zeros = vec![0.0; net.n_parameters()];
        net.set_parameters(&zeros).unwrap();
        assert_eq!(net.utilities(&[0.3; 8]).unwrap(), vec![0.0; 3]);
        let p = net.choice_probabilities(&[0.3; 8]).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(net.utilities(&[0.3; 7]).is_err());
    }

    #[test]
    fn linear_degenerate_ass_has_constant_gradient() {
        let schema = AttributeSchema::new(vec![AlternativeSpec::new("a", "C1", &[]), AlternativeSpec::new("b", "C2", &[])], "y", None).unwrap();
        let topo = Topology::new(1, 1, Activation::Identity).unwrap();
        let mut net = build_network(Variant::Ass, topo, &schema, false, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        // hidden w=2, b=0.5; output w=-1.5, b=0.1 -> g(c) = -3c - 0.65
        net.set_parameters(&[2.0, 0.5, -1.5, 0.1]).unwrap();
        for x in [[0.0, 1.0], [0.25, 0.75], [0.9, 0.1]] {
            let u = net.utilities(&x).unwrap();
            assert!((u[0] - (-3.0 * x[0] - 0.65)).abs() < 1e-12);
            let g = net.input_gradients(&x).unwrap();
            assert_eq!(g.get(0, 0), Some(-3.0));
            assert_eq!(g.get(1, 1), Some(-3.0));
        }
    }

    #[test]
    fn ascs_shift_leaves_probabilities() {
        let schema = fig1_schema();
        let mut net = build_network(Variant::Ass, tanh(1, 3), &schema, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        net.set_asc(1, 0.4).unwrap();
        net.set_asc(2, -0.2).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let p = net.choice_probabilities(&x).unwrap();
        // Adding c to every utility: ASC_0 is fixed, so shift via output biases of all non-cost stacks.
        let u = net.utilities(&x).unwrap();
        let shifted: Vec<f64> = u.iter().map(|v| v + 3.0).collect();
        let q = nncore::softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(net.set_asc(0, 1.0).is_err());
    }

    #[test]
    fn document_round_trip() {
        let schema = fig1_schema();
        for variant in [Variant::Ass, Variant::Asu, Variant::Fc] {
            let mut net = build_network(variant, tanh(2, 3), &schema, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            net.set_asc(2, 0.25).unwrap();
            let json = net.to_json().unwrap();
            let back = UtilityNetwork::from_json(&json).unwrap();
            assert_eq!(back, net);
        }
        let net = build_network(Variant::Ass, tanh(1, 2), &schema, false, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut doc = net.to_document();
        doc.alternatives[1].cost.as_mut().unwrap().layers[0].weights[0] += 1.0;
        assert!(UtilityNetwork::from_document(&doc).is_err());
    }

    fn toy_dataset(schema: &AttributeSchema, n: usize, seed: u64) -> ChoiceDataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = schema.attribute_columns().len();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(0.05..0.95)).collect()).collect();
        let choices = (0..n).map(|_| rng.gen_range(0..schema.n_alternatives())).collect();
        ChoiceDataset::from_rows(schema.clone(), rows, choices, None).unwrap()
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let schema = fig1_schema();
        let ds = toy_dataset(&schema, 6, 9);
        let rows: Vec<usize> = (0..ds.len()).collect();
        for variant in [Variant::Ass, Variant::Asu, Variant::Fc] {
            for act in [Activation::Tanh, Activation::Relu] {
                let topo = Topology::new(2, 4, act).unwrap();
                let mut net = build_network(variant, topo, &schema, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
                net.set_asc(1, 0.3).unwrap();
                let mut ws = net.workspace();
                let mut grad = Vec::new();
                net.loss_and_gradient(&ds, &rows, &mut ws, &mut grad).unwrap();
                let base = net.parameters().to_vec();
                let h = 1e-6;
                for k in 0..base.len() {
                    let mut plus = base.clone();
                    plus[k] += h;
                    net.set_parameters(&plus).unwrap();
                    let fp = net.loss_and_gradient(&ds, &rows, &mut ws, &mut Vec::new()).unwrap();
                    let mut minus = base.clone();
                    minus[k] -= h;
                    net.set_parameters(&minus).unwrap();
                    let fm = net.loss_and_gradient(&ds, &rows, &mut ws, &mut Vec::new()).unwrap();
                    net.set_parameters(&base).unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    // relu kinks make a handful of coordinates non-differentiable
                    let tol = if act == Activation::Relu { 1e-4 } else { 1e-6 };
                    assert!((fd - grad[k]).abs() < tol * (1.0 + fd.abs()), "{variant:?} {act:?} param {k}: {fd} vs {}", grad[k]);
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let schema = fig1_schema();
        let x = [0.2, 0.7, 0.4, 0.55, 0.3, 0.9, 0.15, 0.6];
        for variant in [Variant::Ass, Variant::Asu, Variant::Fc] {
            let net = build_network(variant, tanh(2, 5), &schema, true, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            let g = net.input_gradients(&x).unwrap();
            for j in 0..3 {
                for c in 0..x.len() {
                    let h = 1e-6;
                    let mut xp = x;
                    xp[c] += h;
                    let mut xm = x;
                    xm[c] -= h;
                    let fd = (net.utilities(&xp).unwrap()[j] - net.utilities(&xm).unwrap()[j]) / (2.0 * h);
                    match g.get(j, c) {
                        Some(v) => assert!((v - fd).abs() < 1e-7, "{variant:?} alt {j} col {c}: {v} vs {fd}"),
                        // FC utilities also depend on other alternatives' columns
                        None if variant == Variant::Fc => {}
                        None => assert!(fd.abs() < 1e-12, "{variant:?} alt {j} col {c} missing but {fd}"),
                    }
                }
            }
        }
    }

    #[test]
    fn rum_regularity_other_alternatives_do_not_enter() {
        let schema = fig1_schema();
        for variant in [Variant::Ass, Variant::Asu] {
            let net = build_network(variant, tanh(1, 6), &schema, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let x = [0.2, 0.7, 0.4, 0.55, 0.3, 0.9, 0.15, 0.6];
            let mut y = x;
            y[3] = 0.05;
            y[4] = 0.95;
            let (u, v) = (net.utilities(&x).unwrap(), net.utilities(&y).unwrap());
            assert_eq!(u[0], v[0]);
            assert_eq!(u[2], v[2]);
            assert_ne!(u[1], v[1]);
        }
    }

    #[test]
    fn shared_cost_function_survives_optimisation() {
        let schema = fig1_schema();
        let ds = toy_dataset(&schema, 40, 1);
        let rows: Vec<usize> = (0..ds.len()).collect();
        let mut ass = build_network(Variant::Ass, tanh(2, 4), &schema, true, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut asu = build_network(Variant::Asu, tanh(2, 4), &schema, true, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        for net in [&mut ass, &mut asu] {
            let mut state = nncore::AdamState::new(net.n_parameters(), nncore::AdamConfig::default());
            let mut ws = net.workspace();
            let mut grad = Vec::new();
            for _ in 0..25 {
                net.loss_and_gradient(&ds, &rows, &mut ws, &mut grad).unwrap();
                nncore::adam_step(net.parameters_mut(), &grad, &mut state).unwrap();
            }
        }
        for c in [0.0, 0.3, 0.8, 1.0] {
            let g: Vec<f64> = (0..3).map(|j| ass.cost_utility(j, c).unwrap()).collect();
            assert_eq!(g[0], g[1]);
            assert_eq!(g[1], g[2]);
        }
        let doc = ass.to_document();
        assert!(UtilityNetwork::from_document(&doc).is_ok());
        assert_ne!(asu.cost_utility(0, 0.5).unwrap(), asu.cost_utility(1, 0.5).unwrap());
    }
}
