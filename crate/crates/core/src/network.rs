//! Tabular-softmax coagent networks and their asynchronous atomic-step dynamics.
//!
//! A coagent's local state is `(s, feedforward outputs of this step, recurrent
//! outputs of the previous step)`. Its parameter table has one softmax row per
//! local state, flattened mixed-radix in exactly that order: the (decision)
//! state is the most significant digit, then feedforward inputs, then
//! recurrent inputs, each in declared order.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::rng::sample_categorical;

/// Probability that a coagent executes (samples a fresh output) at an atomic step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExecutionFn {
    Always,
    Bernoulli { p: f64 },
    /// One probability per local-state row of the owning coagent.
    Table { probs: Vec<f64> },
    /// Executes iff the named feedforward input's output this step equals 1.
    Gated { source: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoagentSpec {
    pub id: usize,
    #[serde(default)]
    pub uses_state: bool,
    #[serde(default)]
    pub feedforward_inputs: Vec<usize>,
    #[serde(default)]
    pub recurrent_inputs: Vec<usize>,
    pub output_arity: usize,
    #[serde(default = "always")]
    pub execution: ExecutionFn,
    /// Distribution of the output at time −1; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_dist: Option<Vec<f64>>,
    /// When set, the coagent executes at atomic step 0 and emits this output
    /// deterministically (used to force the option-critic's initial option choice).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_initial_output: Option<usize>,
}

fn always() -> ExecutionFn {
    ExecutionFn::Always
}

impl CoagentSpec {
    pub fn new(id: usize, output_arity: usize) -> Self {
        Self {
            id,
            uses_state: false,
            feedforward_inputs: Vec::new(),
            recurrent_inputs: Vec::new(),
            output_arity,
            execution: ExecutionFn::Always,
            init_dist: None,
            forced_initial_output: None,
        }
    }

    pub fn with_state(mut self) -> Self {
        self.uses_state = true;
        self
    }

    pub fn feedforward(mut self, inputs: &[usize]) -> Self {
        self.feedforward_inputs = inputs.to_vec();
        self
    }

    pub fn recurrent(mut self, inputs: &[usize]) -> Self {
        self.recurrent_inputs = inputs.to_vec();
        self
    }

    pub fn execution(mut self, execution: ExecutionFn) -> Self {
        self.execution = execution;
        self
    }

    pub fn init(mut self, dist: Vec<f64>) -> Self {
        self.init_dist = Some(dist);
        self
    }

    pub fn forced_initial(mut self, output: usize) -> Self {
        self.forced_initial_output = Some(output);
        self
    }
}

/// Serializable description of a network, independent of any MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub coagents: Vec<CoagentSpec>,
    pub action_coagent: usize,
    #[serde(default = "one")]
    pub n_atomic: usize,
}

fn one() -> usize {
    1
}

/// Returns an execution order consistent with the feedforward edges
/// (ties broken by smallest id). Recurrent edges are exempt.
pub fn validate_topology(specs: &[CoagentSpec]) -> Result<Vec<usize>> {
    let m = specs.len();
    for spec in specs {
        for &j in spec.feedforward_inputs.iter().chain(&spec.recurrent_inputs) {
            if j >= m {
                return Err(Error::InvalidNetwork(format!("coagent {} reads unknown coagent {j}", spec.id)));
            }
        }
        if spec.feedforward_inputs.contains(&spec.id) {
            return Err(Error::Cycle(vec![spec.id]));
        }
    }
    let mut indegree: Vec<usize> = specs.iter().map(|s| s.feedforward_inputs.len()).collect();
    let mut done = vec![false; m];
    let mut order = Vec::with_capacity(m);
    while order.len() < m {
        let Some(next) = (0..m).find(|&i| !done[i] && indegree[i] == 0) else {
            return Err(Error::Cycle(find_cycle(specs, &done)));
        };
        done[next] = true;
        order.push(next);
        for (i, spec) in specs.iter().enumerate() {
            indegree[i] -= spec.feedforward_inputs.iter().filter(|&&j| j == next).count();
        }
    }
    Ok(order)
}

/// Walks predecessor edges among unscheduled nodes until one repeats.
fn find_cycle(specs: &[CoagentSpec], done: &[bool]) -> Vec<usize> {
    let start = (0..specs.len()).find(|&i| !done[i]).expect("some node is unscheduled");
    let mut path = vec![start];
    let mut cur = start;
    loop {
        let pred = *specs[cur]
            .feedforward_inputs
            .iter()
            .find(|&&j| !done[j])
            .expect("an unscheduled node has an unscheduled predecessor");
        if let Some(pos) = path.iter().position(|&v| v == pred) {
            let mut cycle = path[pos..].to_vec();
            cycle.reverse();
            return cycle;
        }
        path.push(pred);
        cur = pred;
    }
}

/// A decoded local state. `state` is the environment state index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalState {
    pub state: Option<usize>,
    pub feedforward: Vec<usize>,
    pub recurrent: Vec<usize>,
}

/// Parameter (or gradient) vector partitioned into one block per coagent.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    data: Vec<f64>,
    offsets: Vec<usize>,
}

/// Softmax logits `θ = (θ_1, …, θ_m)`.
pub type Params = BlockVector;
/// `∇J` laid out like [`Params`].
pub type GradientVector = BlockVector;

impl BlockVector {
    pub fn zeros(block_lengths: &[usize]) -> Self {
        let mut offsets = vec![0];
        for &len in block_lengths {
            offsets.push(offsets.last().unwrap() + len);
        }
        Self { data: vec![0.0; *offsets.last().unwrap()], offsets }
    }

    pub fn from_blocks(blocks: Vec<Vec<f64>>) -> Self {
        let lens: Vec<usize> = blocks.iter().map(Vec::len).collect();
        let mut v = Self::zeros(&lens);
        v.data = blocks.into_iter().flatten().collect();
        v
    }

    pub fn n_blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn block_offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn block_lengths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.offsets == other.offsets
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    /// Hash of the exact bit patterns, used to tag trajectories with the
    /// parameters they were sampled under.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.offsets.hash(&mut h);
        for x in &self.data {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `∂ ln softmax(row)_u / ∂ row = onehot(u) − softmax(row)`.
pub fn softmax_logprob_gradient(logits: &[f64], u: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g.iter_mut().for_each(|x| *x = -*x);
    g[u] += 1.0;
    g
}

/// Gradient of `ln π_i(x, u)`: nonzero only on one row of block `coagent`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGradient {
    pub coagent: usize,
    pub row: usize,
    pub values: Vec<f64>,
}

impl RowGradient {
    pub fn to_dense(&self, layout: &Params) -> GradientVector {
        let mut g = BlockVector::zeros(&layout.block_lengths());
        let arity = self.values.len();
        g.block_mut(self.coagent)[self.row * arity..(self.row + 1) * arity].copy_from_slice(&self.values);
        g
    }
}

#[derive(Debug, Clone)]
struct Layout {
    n_rows: usize,
    init: Vec<f64>,
}

/// A validated coagent network bound to the state space of one MDP.
#[derive(Debug, Clone)]
pub struct CoagentNetwork {
    specs: Vec<CoagentSpec>,
    action_coagent: usize,
    n_atomic: usize,
    order: Vec<usize>,
    layouts: Vec<Layout>,
    state_rows: Vec<Option<usize>>,
    decision_states: Vec<usize>,
    n_env_states: usize,
    n_actions: usize,
}

impl CoagentNetwork {
    pub fn new(spec: NetworkSpec, mdp: &TabularMdp) -> Result<Self> {
        let NetworkSpec { coagents: specs, action_coagent, n_atomic } = spec;
        let m = specs.len();
        if m == 0 {
            return Err(Error::InvalidNetwork("network has no coagents".into()));
        }
        if n_atomic == 0 {
            return Err(Error::InvalidNetwork("n_atomic must be at least 1".into()));
        }
        for (pos, s) in specs.iter().enumerate() {
            if s.id != pos {
                return Err(Error::InvalidNetwork(format!("coagent at position {pos} has id {}", s.id)));
            }
            if s.output_arity == 0 {
                return Err(Error::InvalidNetwork(format!("coagent {pos} has output arity 0")));
            }
        }
        let order = validate_topology(&specs)?;
        if action_coagent >= m {
            return Err(Error::InvalidNetwork(format!("action coagent {action_coagent} does not exist")));
        }
        if specs[action_coagent].output_arity != mdp.n_actions() {
            return Err(Error::InvalidNetwork(format!(
                "action coagent has arity {}, mdp has {} actions",
                specs[action_coagent].output_arity,
                mdp.n_actions()
            )));
        }
        let n_decision = mdp.n_decision_states();
        let mut layouts = Vec::with_capacity(m);
        for s in &specs {
            let mut n_rows: usize = if s.uses_state { n_decision } else { 1 };
            for &j in s.feedforward_inputs.iter().chain(&s.recurrent_inputs) {
                n_rows = n_rows
                    .checked_mul(specs[j].output_arity)
                    .ok_or(Error::TooLarge { size: usize::MAX, limit: usize::MAX })?;
            }
            let k = s.output_arity;
            let init = match &s.init_dist {
                None => vec![1.0 / k as f64; k],
                Some(d) => {
                    let sum: f64 = d.iter().sum();
                    if d.len() != k || (sum - 1.0).abs() > 1e-12 || d.iter().any(|&p| p < 0.0) {
                        return Err(Error::InvalidNetwork(format!("init_dist of coagent {} is not a distribution over {k} outputs", s.id)));
                    }
                    d.clone()
                }
            };
            match &s.execution {
                ExecutionFn::Always => {}
                ExecutionFn::Bernoulli { p } => {
                    if !(0.0..=1.0).contains(p) {
                        return Err(Error::InvalidNetwork(format!("execution probability {p} of coagent {}", s.id)));
                    }
                }
                ExecutionFn::Table { probs } => {
                    if probs.len() != n_rows || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                        return Err(Error::InvalidNetwork(format!(
                            "execution table of coagent {} needs {n_rows} probabilities in [0, 1]",
                            s.id
                        )));
                    }
                }
                ExecutionFn::Gated { source } => {
                    if !s.feedforward_inputs.contains(source) {
                        return Err(Error::InvalidNetwork(format!(
                            "gate source {source} of coagent {} is not one of its feedforward inputs",
                            s.id
                        )));
                    }
                    if specs[*source].output_arity < 2 {
                        return Err(Error::InvalidNetwork(format!("gate source {source} cannot output 1")));
                    }
                }
            }
            if let Some(u) = s.forced_initial_output {
                if u >= k {
                    return Err(Error::InvalidNetwork(format!("forced output {u} of coagent {} out of range", s.id)));
                }
            }
            layouts.push(Layout { n_rows, init });
        }
        let state_rows = (0..mdp.n_states()).map(|s| mdp.decision_index(s)).collect();
        let decision_states = (0..mdp.n_states()).filter(|&s| !mdp.is_terminal(s)).collect();
        Ok(Self {
            specs,
            action_coagent,
            n_atomic,
            order,
            layouts,
            state_rows,
            decision_states,
            n_env_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
        })
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            coagents: self.specs.clone(),
            action_coagent: self.action_coagent,
            n_atomic: self.n_atomic,
        }
    }

    pub fn n_coagents(&self) -> usize {
        self.specs.len()
    }

    pub fn coagent(&self, i: usize) -> &CoagentSpec {
        &self.specs[i]
    }

    pub fn action_coagent(&self) -> usize {
        self.action_coagent
    }

    pub fn n_atomic(&self) -> usize {
        self.n_atomic
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn arity(&self, i: usize) -> usize {
        self.specs[i].output_arity
    }

    pub fn n_rows(&self, i: usize) -> usize {
        self.layouts[i].n_rows
    }

    pub fn init_dist(&self, i: usize) -> &[f64] {
        &self.layouts[i].init
    }

    pub fn n_env_states(&self) -> usize {
        self.n_env_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// `Π_i |𝒰^i|`.
    pub fn n_joint_outputs(&self) -> usize {
        self.specs.iter().map(|s| s.output_arity).product()
    }

    pub fn block_lengths(&self) -> Vec<usize> {
        (0..self.n_coagents()).map(|i| self.n_rows(i) * self.arity(i)).collect()
    }

    pub fn n_params(&self) -> usize {
        self.block_lengths().iter().sum()
    }

    /// All-zero logits (uniform policies).
    pub fn zero_params(&self) -> Params {
        BlockVector::zeros(&self.block_lengths())
    }

    pub fn check_params(&self, params: &Params) -> Result<()> {
        if params.block_lengths() != self.block_lengths() {
            return Err(Error::InvalidParams(format!(
                "block lengths {:?}, network needs {:?}",
                params.block_lengths(),
                self.block_lengths()
            )));
        }
        if let Some(j) = params.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidParams(format!("parameter {j} is not finite")));
        }
        Ok(())
    }

    /// True when every coagent always executes, nothing is recurrent or
    /// forced, and the environment updates every atomic step.
    pub fn is_synchronous(&self) -> bool {
        self.n_atomic == 1
            && self.specs.iter().all(|s| {
                s.execution == ExecutionFn::Always && s.recurrent_inputs.is_empty() && s.forced_initial_output.is_none()
            })
    }

    pub fn has_forced_start(&self) -> bool {
        self.specs.iter().any(|s| s.forced_initial_output.is_some())
    }

    /// Row of coagent `i`'s table for the local state formed by state `s`,
    /// this step's outputs `cur` (only feedforward inputs are read) and the
    /// previous step's outputs `prev`. `None` at terminal states for
    /// state-reading coagents.
    #[inline]
    pub fn row(&self, i: usize, s: usize, cur: &[usize], prev: &[usize]) -> Option<usize> {
        self.row_with(i, s, |j| cur[j], |j| prev[j])
    }

    /// [`row`](Self::row) with the outputs supplied by accessors.
    #[inline]
    pub fn row_with(&self, i: usize, s: usize, cur: impl Fn(usize) -> usize, prev: impl Fn(usize) -> usize) -> Option<usize> {
        let spec = &self.specs[i];
        let mut r = if spec.uses_state { self.state_rows[s]? } else { 0 };
        for &j in &spec.feedforward_inputs {
            r = r * self.specs[j].output_arity + cur(j);
        }
        for &j in &spec.recurrent_inputs {
            r = r * self.specs[j].output_arity + prev(j);
        }
        Some(r)
    }

    pub fn encode(&self, i: usize, x: &LocalState) -> Result<usize> {
        let spec = &self.specs[i];
        let bad = || Error::Index(format!("local state {x:?} of coagent {i}"));
        if x.feedforward.len() != spec.feedforward_inputs.len() || x.recurrent.len() != spec.recurrent_inputs.len() {
            return Err(bad());
        }
        let mut r = match (spec.uses_state, x.state) {
            (true, Some(s)) if s < self.n_env_states => self.state_rows[s].ok_or_else(bad)?,
            (false, None) => 0,
            _ => return Err(bad()),
        };
        let inputs = spec.feedforward_inputs.iter().zip(&x.feedforward);
        for (&j, &u) in inputs.chain(spec.recurrent_inputs.iter().zip(&x.recurrent)) {
            if u >= self.specs[j].output_arity {
                return Err(bad());
            }
            r = r * self.specs[j].output_arity + u;
        }
        Ok(r)
    }

    pub fn decode(&self, i: usize, row: usize) -> Result<LocalState> {
        if row >= self.n_rows(i) {
            return Err(Error::Index(format!("row {row} of coagent {i}")));
        }
        let spec = &self.specs[i];
        let mut rest = row;
        let mut digit = |j: usize| {
            let a = self.specs[j].output_arity;
            let d = rest % a;
            rest /= a;
            d
        };
        let mut recurrent: Vec<usize> = spec.recurrent_inputs.iter().rev().map(|&j| digit(j)).collect();
        let mut feedforward: Vec<usize> = spec.feedforward_inputs.iter().rev().map(|&j| digit(j)).collect();
        recurrent.reverse();
        feedforward.reverse();
        let state = spec.uses_state.then(|| self.decision_states[rest]);
        Ok(LocalState { state, feedforward, recurrent })
    }

    /// Execution probability `β_i(x)`; gates read `cur`.
    #[inline]
    pub fn execution_prob(&self, i: usize, row: Option<usize>, cur: &[usize]) -> f64 {
        self.execution_prob_with(i, row, |j| cur[j])
    }

    #[inline]
    pub fn execution_prob_with(&self, i: usize, row: Option<usize>, cur: impl Fn(usize) -> usize) -> f64 {
        match &self.specs[i].execution {
            ExecutionFn::Always => 1.0,
            ExecutionFn::Bernoulli { p } => *p,
            ExecutionFn::Table { probs } => row.map_or(1.0, |r| probs[r]),
            ExecutionFn::Gated { source } => {
                if cur(*source) == 1 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `π_i(x, ·)` for an explicit local state.
    pub fn coagent_policy(&self, params: &Params, i: usize, x: &LocalState) -> Result<Vec<f64>> {
        let row = self.encode(i, x)?;
        let k = self.arity(i);
        Ok(softmax(&params.block(i)[row * k..(row + 1) * k]))
    }

    /// `∂ ln π_i(x, u) / ∂θ_i`, supported on row `x` of block `i`.
    pub fn logprob_gradient(&self, params: &Params, i: usize, x: &LocalState, u: usize) -> Result<RowGradient> {
        let row = self.encode(i, x)?;
        let k = self.arity(i);
        if u >= k {
            return Err(Error::Index(format!("output {u} of coagent {i}")));
        }
        let values = softmax_logprob_gradient(&params.block(i)[row * k..(row + 1) * k], u);
        Ok(RowGradient { coagent: i, row, values })
    }

    /// One atomic step: returns the execution bits and the new outputs.
    pub fn atomic_step<R: Rng + ?Sized>(
        &self,
        params: &Params,
        s: usize,
        u_prev: &[usize],
        rng: &mut R,
    ) -> Result<(Vec<bool>, Vec<usize>)> {
        self.check_params(params)?;
        if s >= self.n_env_states || u_prev.len() != self.n_coagents() {
            return Err(Error::Index(format!("state {s} / previous outputs {u_prev:?}")));
        }
        for (i, &u) in u_prev.iter().enumerate() {
            if u >= self.arity(i) {
                return Err(Error::Index(format!("previous output {u} of coagent {i}")));
            }
        }
        let tables = PolicyTables::new(self, params);
        let m = self.n_coagents();
        let (mut exec, mut out, mut rows) = (vec![false; m], vec![0; m], vec![None; m]);
        self.step_into(&tables, s, u_prev, false, rng, &mut exec, &mut out, &mut rows);
        Ok((exec, out))
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub(crate) fn step_into<R: Rng + ?Sized>(
        &self,
        tables: &PolicyTables,
        s: usize,
        prev: &[usize],
        first: bool,
        rng: &mut R,
        exec: &mut [bool],
        out: &mut [usize],
        rows: &mut [Option<usize>],
    ) {
        for &i in &self.order {
            let row = self.row(i, s, out, prev);
            rows[i] = row;
            if first {
                if let Some(u) = self.specs[i].forced_initial_output {
                    exec[i] = true;
                    out[i] = u;
                    continue;
                }
            }
            let p = self.execution_prob(i, row, out);
            let e = p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p);
            exec[i] = e;
            out[i] = if e { sample_categorical(tables.probs(i, row), rng) } else { prev[i] };
        }
    }

    /// Enumerates the exact law of one atomic step given `(s, U_{t−1})`,
    /// calling `f(E_t, U_t, probability)` for every outcome of positive mass.
    pub fn for_each_atomic_outcome(
        &self,
        tables: &PolicyTables,
        s: usize,
        prev: &[usize],
        first: bool,
        mut f: impl FnMut(&[bool], &[usize], f64),
    ) {
        let m = self.n_coagents();
        let mut exec = vec![false; m];
        let mut out = vec![0; m];
        self.enumerate_atomic(tables, s, prev, first, 0, 1.0, &mut exec, &mut out, &mut f);
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate_atomic(
        &self,
        tables: &PolicyTables,
        s: usize,
        prev: &[usize],
        first: bool,
        depth: usize,
        prob: f64,
        exec: &mut [bool],
        out: &mut [usize],
        f: &mut impl FnMut(&[bool], &[usize], f64),
    ) {
        if depth == self.order.len() {
            f(exec, out, prob);
            return;
        }
        let i = self.order[depth];
        let row = self.row(i, s, out, prev);
        if first {
            if let Some(u) = self.specs[i].forced_initial_output {
                exec[i] = true;
                out[i] = u;
                self.enumerate_atomic(tables, s, prev, first, depth + 1, prob, exec, out, f);
                return;
            }
        }
        let p = self.execution_prob(i, row, out);
        if p < 1.0 {
            exec[i] = false;
            out[i] = prev[i];
            self.enumerate_atomic(tables, s, prev, first, depth + 1, prob * (1.0 - p), exec, out, f);
        }
        if p > 0.0 {
            exec[i] = true;
            let probs = tables.probs(i, row);
            for (u, &q) in probs.iter().enumerate() {
                if q > 0.0 {
                    out[i] = u;
                    self.enumerate_atomic(tables, s, prev, first, depth + 1, prob * p * q, exec, out, f);
                }
            }
        }
    }

    /// Mixed-radix index of a joint output vector (coagent 0 most significant).
    pub fn encode_outputs(&self, u: &[usize]) -> usize {
        u.iter().zip(&self.specs).fold(0, |acc, (&x, s)| acc * s.output_arity + x)
    }

    pub fn decode_outputs(&self, mut index: usize, out: &mut [usize]) {
        for (i, s) in self.specs.iter().enumerate().rev() {
            out[i] = index % s.output_arity;
            index /= s.output_arity;
        }
    }

    /// `Π_i h^i_0(u_i)`.
    pub fn init_prob(&self, u: &[usize]) -> f64 {
        u.iter().enumerate().map(|(i, &x)| self.layouts[i].init[x]).product()
    }
}

/// Softmax probabilities for every row of every coagent, precomputed from
/// a parameter vector.
#[derive(Debug, Clone)]
pub struct PolicyTables {
    probs: Vec<Vec<f64>>,
    arity: Vec<usize>,
    uniform: Vec<Vec<f64>>,
}

impl PolicyTables {
    pub fn new(net: &CoagentNetwork, params: &Params) -> Self {
        let m = net.n_coagents();
        let mut probs = Vec::with_capacity(m);
        for i in 0..m {
            let k = net.arity(i);
            let block = params.block(i);
            let mut p = vec![0.0; block.len()];
            for (src, dst) in block.chunks(k).zip(p.chunks_mut(k)) {
                softmax_into(src, dst);
            }
            probs.push(p);
        }
        let arity: Vec<usize> = (0..m).map(|i| net.arity(i)).collect();
        let uniform = arity.iter().map(|&k| vec![1.0 / k as f64; k]).collect();
        Self { probs, arity, uniform }
    }

    /// Recomputes the tables in place after a parameter change.
    pub fn refresh(&mut self, net: &CoagentNetwork, params: &Params) {
        for (i, p) in self.probs.iter_mut().enumerate() {
            let k = net.arity(i);
            for (src, dst) in params.block(i).chunks(k).zip(p.chunks_mut(k)) {
                softmax_into(src, dst);
            }
        }
    }

    /// `π_i` at a row; uniform where the row is undefined (terminal states).
    #[inline]
    pub fn probs(&self, i: usize, row: Option<usize>) -> &[f64] {
        match row {
            Some(r) => &self.probs[i][r * self.arity[i]..(r + 1) * self.arity[i]],
            None => &self.uniform[i],
        }
    }
}

/// Per-atomic-step record of one episode, stored flat so buffers can be reused.
#[derive(Debug, Clone, Default)]
pub struct AtomicTrajectory {
    pub n_coagents: usize,
    pub n_atomic: usize,
    pub atomic_discount: f64,
    pub truncated: bool,
    /// Fingerprint of the parameters the episode was sampled under.
    pub fingerprint: u64,
    pub initial_outputs: Vec<usize>,
    states: Vec<usize>,
    executions: Vec<bool>,
    outputs: Vec<usize>,
    rows: Vec<Option<usize>>,
    actions: Vec<Option<usize>>,
    rewards: Vec<f64>,
}

impl AtomicTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, t: usize) -> usize {
        self.states[t]
    }

    pub fn executions(&self, t: usize) -> &[bool] {
        &self.executions[t * self.n_coagents..(t + 1) * self.n_coagents]
    }

    pub fn outputs(&self, t: usize) -> &[usize] {
        &self.outputs[t * self.n_coagents..(t + 1) * self.n_coagents]
    }

    pub fn rows(&self, t: usize) -> &[Option<usize>] {
        &self.rows[t * self.n_coagents..(t + 1) * self.n_coagents]
    }

    /// Environment action; `None` on atomic steps without an environment update.
    pub fn env_action(&self, t: usize) -> Option<usize> {
        self.actions[t]
    }

    pub fn reward(&self, t: usize) -> f64 {
        self.rewards[t]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Undiscounted sum of rewards.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    fn clear(&mut self) {
        self.truncated = false;
        self.states.clear();
        self.executions.clear();
        self.outputs.clear();
        self.rows.clear();
        self.actions.clear();
        self.rewards.clear();
    }

    /// Line-delimited record: a header, then `t s E U a r` per atomic step,
    /// with `E` as a bit string, `U` comma-separated and `a = -` on steps
    /// without an environment update.
    pub fn to_records(&self) -> String {
        let mut out = format!(
            "# n_atomic={} atomic_discount={} truncated={}\n",
            self.n_atomic, self.atomic_discount, self.truncated
        );
        for t in 0..self.len() {
            let e: String = self.executions(t).iter().map(|&b| if b { '1' } else { '0' }).collect();
            let u: Vec<String> = self.outputs(t).iter().map(usize::to_string).collect();
            let a = self.env_action(t).map_or("-".to_string(), |a| a.to_string());
            let _ = writeln!(out, "{t} {} {e} {} {a} {}", self.state(t), u.join(","), self.reward(t));
        }
        out
    }
}

/// Samples one episode. The environment updates on atomic steps `t` with
/// `t % n_atomic == 0`; other steps carry reward 0. Stops at a terminal
/// state or after `horizon` environment steps (flagged as truncated).
pub fn run_episode<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    net: &CoagentNetwork,
    params: &Params,
    horizon: usize,
    rng: &mut R,
) -> Result<AtomicTrajectory> {
    net.check_params(params)?;
    if net.n_env_states() != mdp.n_states() || net.n_actions() != mdp.n_actions() {
        return Err(Error::InvalidNetwork("network was built for a different mdp".into()));
    }
    let tables = PolicyTables::new(net, params);
    let mut traj = AtomicTrajectory::default();
    let mut scratch = EpisodeScratch::new(net);
    run_episode_into(mdp, net, &tables, params.fingerprint(), horizon, rng, &mut traj, &mut scratch);
    Ok(traj)
}

pub(crate) struct EpisodeScratch {
    prev: Vec<usize>,
    exec: Vec<bool>,
    out: Vec<usize>,
    rows: Vec<Option<usize>>,
}

impl EpisodeScratch {
    pub(crate) fn new(net: &CoagentNetwork) -> Self {
        let m = net.n_coagents();
        Self { prev: vec![0; m], exec: vec![false; m], out: vec![0; m], rows: vec![None; m] }
    }
}

/// Allocation-free episode sampler used by the batch estimators and training.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_episode_into<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    net: &CoagentNetwork,
    tables: &PolicyTables,
    fingerprint: u64,
    horizon: usize,
    rng: &mut R,
    traj: &mut AtomicTrajectory,
    scratch: &mut EpisodeScratch,
) {
    let m = net.n_coagents();
    let n = net.n_atomic();
    traj.clear();
    traj.n_coagents = m;
    traj.n_atomic = n;
    traj.atomic_discount = mdp.discount().powf(1.0 / n as f64);
    traj.fingerprint = fingerprint;
    for i in 0..m {
        scratch.prev[i] = sample_categorical(net.init_dist(i), rng);
    }
    traj.initial_outputs.clear();
    traj.initial_outputs.extend_from_slice(&scratch.prev);
    let mut s = mdp.sample_initial(rng);
    let mut t = 0;
    while !mdp.is_terminal(s) {
        if t == horizon * n {
            traj.truncated = true;
            log::debug!("episode truncated after {horizon} environment steps");
            break;
        }
        let EpisodeScratch { prev, exec, out, rows } = scratch;
        net.step_into(tables, s, prev, t == 0, rng, exec, out, rows);
        let (next, action, reward) = if t % n == 0 {
            let a = out[net.action_coagent()];
            let (next, r) = mdp.sample_unchecked(s, a, rng);
            (next, Some(a), r)
        } else {
            (s, None, 0.0)
        };
        traj.states.push(s);
        traj.executions.extend_from_slice(exec);
        traj.outputs.extend_from_slice(out);
        traj.rows.extend_from_slice(rows);
        traj.actions.push(action);
        traj.rewards.push(reward);
        prev.copy_from_slice(out);
        s = next;
        t += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_gridworld, GridworldSpec};
    use crate::rng::seeded;
    use rand::Rng;

    pub(crate) fn gridworld_net(p: f64) -> (TabularMdp, CoagentNetwork) {
        let mdp = build_gridworld(&GridworldSpec::default()).unwrap();
        let exec = ExecutionFn::Bernoulli { p };
        let spec = NetworkSpec {
            coagents: vec![
                CoagentSpec::new(0, 2).with_state().execution(exec.clone()),
                CoagentSpec::new(1, 2).with_state().execution(exec.clone()),
                CoagentSpec::new(2, 4).feedforward(&[0, 1]).execution(exec),
            ],
            action_coagent: 2,
            n_atomic: 1,
        };
        let net = CoagentNetwork::new(spec, &mdp).unwrap();
        (mdp, net)
    }

    #[test]
    fn topology_orders_and_cycles() {
        let chain = [CoagentSpec::new(0, 2), CoagentSpec::new(1, 2).feedforward(&[0]), CoagentSpec::new(2, 2).feedforward(&[1])];
        assert_eq!(validate_topology(&chain).unwrap(), vec![0, 1, 2]);
        let cyc = [CoagentSpec::new(0, 2).feedforward(&[1]), CoagentSpec::new(1, 2).feedforward(&[0])];
        match validate_topology(&cyc) {
            Err(Error::Cycle(c)) => {
                let mut c = c;
                c.sort();
                assert_eq!(c, vec![0, 1]);
            }
            other => panic!("expected cycle, got {other:?}"),
        }
        // recurrent edges may point backwards
        let rec = [CoagentSpec::new(0, 2).recurrent(&[1]), CoagentSpec::new(1, 2).feedforward(&[0])];
        assert_eq!(validate_topology(&rec).unwrap(), vec![0, 1]);
    }

    #[test]
    fn gridworld_network_layout() {
        let (_, net) = gridworld_net(0.5);
        assert_eq!(net.order(), &[0, 1, 2]);
        assert_eq!(net.block_lengths(), vec![18, 18, 16]);
        assert_eq!(net.n_params(), 52);
    }

    #[test]
    fn softmax_closed_forms() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let p = softmax(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert_eq!(softmax_logprob_gradient(&[0.0, 0.0], 0), vec![0.5, -0.5]);
        // large logits stay finite
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn local_state_round_trip() {
        let (_, net) = gridworld_net(0.5);
        for i in 0..3 {
            for row in 0..net.n_rows(i) {
                let x = net.decode(i, row).unwrap();
                assert_eq!(net.encode(i, &x).unwrap(), row);
            }
        }
        let x = LocalState { state: Some(9), feedforward: vec![], recurrent: vec![] };
        assert!(net.encode(0, &x).is_err());
    }

    #[test]
    fn frozen_network_never_changes_outputs() {
        let (_, net) = gridworld_net(0.0);
        let params = net.zero_params();
        let mut rng = seeded(1);
        for _ in 0..100 {
            let prev = [rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..4)];
            let (e, u) = net.atomic_step(&params, 4, &prev, &mut rng).unwrap();
            assert_eq!(e, vec![false; 3]);
            assert_eq!(u, prev.to_vec());
        }
    }

    #[test]
    fn always_executing_network_executes_every_coagent() {
        let (_, net) = gridworld_net(1.0);
        let params = net.zero_params();
        let mut rng = seeded(2);
        let (e, _) = net.atomic_step(&params, 0, &[0, 0, 0], &mut rng).unwrap();
        assert_eq!(e, vec![true; 3]);
    }

    #[test]
    fn atomic_law_sums_to_one() {
        let (_, net) = gridworld_net(0.5);
        let mut params = net.zero_params();
        let mut rng = seeded(5);
        params.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-2.0..2.0));
        let tables = PolicyTables::new(&net, &params);
        let mut total = 0.0;
        let mut count = 0;
        net.for_each_atomic_outcome(&tables, 3, &[1, 0, 2], false, |_, _, p| {
            total += p;
            count += 1;
        });
        assert!((total - 1.0).abs() < 1e-12);
        // each coagent: freeze or one of its outputs
        assert_eq!(count, 3 * 3 * 5);
    }

    #[test]
    fn output_persistence_in_trajectories() {
        let (mdp, net) = gridworld_net(0.5);
        let params = net.zero_params();
        let mut rng = seeded(11);
        for _ in 0..50 {
            let traj = run_episode(&mdp, &net, &params, 1000, &mut rng).unwrap();
            let mut prev = traj.initial_outputs.clone();
            for t in 0..traj.len() {
                for i in 0..3 {
                    if !traj.executions(t)[i] {
                        assert_eq!(traj.outputs(t)[i], prev[i]);
                    }
                }
                prev = traj.outputs(t).to_vec();
            }
        }
    }

    #[test]
    fn atomic_steps_zero_fill_rewards() {
        let (mdp, _) = gridworld_net(1.0);
        let spec = NetworkSpec { coagents: vec![CoagentSpec::new(0, 4).with_state()], action_coagent: 0, n_atomic: 3 };
        let net = CoagentNetwork::new(spec, &mdp).unwrap();
        let mut rng = seeded(4);
        let traj = run_episode(&mdp, &net, &net.zero_params(), 1000, &mut rng).unwrap();
        assert!((traj.atomic_discount.powi(3) - mdp.discount()).abs() < 1e-12);
        for t in 0..traj.len() {
            assert_eq!(traj.env_action(t).is_some(), t % 3 == 0);
            if t % 3 != 0 {
                assert_eq!(traj.reward(t), 0.0);
            }
        }
        assert!(traj.to_records().lines().count() == traj.len() + 1);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let (mdp, _) = gridworld_net(1.0);
        let bad_gate = NetworkSpec {
            coagents: vec![CoagentSpec::new(0, 2), CoagentSpec::new(1, 4).execution(ExecutionFn::Gated { source: 0 })],
            action_coagent: 1,
            n_atomic: 1,
        };
        assert!(CoagentNetwork::new(bad_gate, &mdp).is_err());
        let bad_arity = NetworkSpec { coagents: vec![CoagentSpec::new(0, 3)], action_coagent: 0, n_atomic: 1 };
        assert!(CoagentNetwork::new(bad_arity, &mdp).is_err());
        let bad_init = NetworkSpec { coagents: vec![CoagentSpec::new(0, 4).init(vec![0.5, 0.5, 0.5, 0.0])], action_coagent: 0, n_atomic: 1 };
        assert!(CoagentNetwork::new(bad_init, &mdp).is_err());
    }
}
