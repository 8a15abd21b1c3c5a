//! Synchronous acyclic policy networks, abstracted so that the same exact
//! machinery (joint laws, CoMDPs, sum-form gradients) runs on a plain
//! synchronous coagent network and on the reduction's paired network over
//! augmented states.

use crate::error::{Error, Result};
use crate::mdp::{PolicyTable, TabularMdp};
use crate::network::{CoagentNetwork, Params, PolicyTables};

/// A synchronous acyclic network: every node samples once per step from a
/// law that depends on the MDP state and on earlier nodes' outputs.
pub trait SyncPolicyNetwork {
    fn n_nodes(&self) -> usize;

    /// Topological order; nodes only read outputs of nodes earlier in it.
    fn order(&self) -> &[usize];

    fn arity(&self, node: usize) -> usize;

    /// Declared inputs of `node` (the `u_pre` part of its local state), in order.
    fn inputs(&self, node: usize) -> &[usize];

    /// Writes `node`'s output law given `state` and the outputs of the nodes
    /// before it in `outputs`.
    fn distribution(&self, node: usize, state: usize, outputs: &[usize], out: &mut [f64]);

    /// `Some((block, row))` when the law at this local state is the softmax of
    /// that parameter row; `None` when it does not depend on any parameter.
    fn softmax_row(&self, node: usize, state: usize, outputs: &[usize]) -> Option<(usize, usize)>;

    /// MDP action index produced by a full output vector.
    fn action(&self, outputs: &[usize]) -> usize;
}

/// How a node is treated during [`for_each_joint`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clamp {
    /// Sample from the node's law.
    Free,
    /// Restrict to one output, weighted by its probability (conditioning).
    Condition(usize),
    /// Force one output with weight 1 (intervention).
    Force(usize),
}

/// Enumerates every joint output vector of positive mass at `state`,
/// calling `f(outputs, probability)`.
pub fn for_each_joint<N: SyncPolicyNetwork + ?Sized>(
    net: &N,
    state: usize,
    clamps: &[Clamp],
    mut f: impl FnMut(&[usize], f64),
) {
    let n = net.n_nodes();
    let mut outputs = vec![0; n];
    let mut scratch: Vec<Vec<f64>> = net.order().iter().map(|&v| vec![0.0; net.arity(v)]).collect();
    recurse(net, state, clamps, 0, 1.0, &mut outputs, &mut scratch, &mut f);
}

#[allow(clippy::too_many_arguments)]
fn recurse<N: SyncPolicyNetwork + ?Sized>(
    net: &N,
    state: usize,
    clamps: &[Clamp],
    depth: usize,
    prob: f64,
    outputs: &mut [usize],
    scratch: &mut [Vec<f64>],
    f: &mut impl FnMut(&[usize], f64),
) {
    let order = net.order();
    if depth == order.len() {
        f(outputs, prob);
        return;
    }
    let node = order[depth];
    // scratch[0] belongs to this depth, the rest to deeper calls
    let (law, deeper) = scratch.split_first_mut().expect("one buffer per depth");
    if let Clamp::Force(u) = clamps[node] {
        outputs[node] = u;
        recurse(net, state, clamps, depth + 1, prob, outputs, deeper, f);
        return;
    }
    net.distribution(node, state, outputs, law);
    for u in 0..law.len() {
        let q = law[u];
        if q == 0.0 || matches!(clamps[node], Clamp::Condition(c) if c != u) {
            continue;
        }
        outputs[node] = u;
        recurse(net, state, clamps, depth + 1, prob * q, outputs, deeper, f);
    }
}

/// The joint action law `π(s, a)` of a synchronous network on `mdp`.
pub fn joint_policy<N: SyncPolicyNetwork + ?Sized>(net: &N, mdp: &TabularMdp) -> PolicyTable {
    let free = vec![Clamp::Free; net.n_nodes()];
    let mut table = PolicyTable::zeros(mdp.n_states(), mdp.n_actions());
    for s in 0..mdp.n_states() {
        for_each_joint(net, s, &free, |u, p| table.add(s, net.action(u), p));
    }
    table
}

/// A synchronous [`CoagentNetwork`] viewed as a [`SyncPolicyNetwork`] on its
/// own MDP.
pub struct SyncView<'a> {
    net: &'a CoagentNetwork,
    tables: PolicyTables,
    none: Vec<usize>,
}

impl<'a> SyncView<'a> {
    pub fn new(net: &'a CoagentNetwork, params: &Params) -> Result<Self> {
        if !net.is_synchronous() {
            return Err(Error::NotSynchronous);
        }
        net.check_params(params)?;
        Ok(Self { net, tables: PolicyTables::new(net, params), none: Vec::new() })
    }

    pub fn network(&self) -> &CoagentNetwork {
        self.net
    }
}

impl SyncPolicyNetwork for SyncView<'_> {
    fn n_nodes(&self) -> usize {
        self.net.n_coagents()
    }

    fn order(&self) -> &[usize] {
        self.net.order()
    }

    fn arity(&self, node: usize) -> usize {
        self.net.arity(node)
    }

    fn inputs(&self, node: usize) -> &[usize] {
        &self.net.coagent(node).feedforward_inputs
    }

    fn distribution(&self, node: usize, state: usize, outputs: &[usize], out: &mut [f64]) {
        let row = self.net.row(node, state, outputs, &self.none);
        out.copy_from_slice(self.tables.probs(node, row));
    }

    fn softmax_row(&self, node: usize, state: usize, outputs: &[usize]) -> Option<(usize, usize)> {
        self.net.row(node, state, outputs, &self.none).map(|r| (node, r))
    }

    fn action(&self, outputs: &[usize]) -> usize {
        outputs[self.net.action_coagent()]
    }
}
