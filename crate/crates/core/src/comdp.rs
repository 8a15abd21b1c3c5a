//! Conjugate MDPs: the environment as seen by one node of a synchronous
//! network, with the other nodes folded into the dynamics.
//!
//! For node `i` with declared inputs `u_pre`, local states are `(s, u_pre)`,
//! actions are the node's outputs, and
//!
//! ```text
//! P^i(x, u, x') = π^pre(x'.s, x'.u_pre) Σ_a P(x.s, a, x'.s) π^post(x, u, a)
//! R^i(x, u, x', r) = Σ_a P R π^post / Σ_a P π^post
//! d^i_0(x) = d_0(x.s) π^pre(x.s, x.u_pre)
//! ```
//!
//! Local states over terminal base states are terminal.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mdp::{MdpBuilder, PolicyTable, TabularMdp};
use crate::network::softmax_into;
pub use crate::report::{Check, Report};
use crate::sync::{for_each_joint, Clamp, SyncPolicyNetwork};

/// Cap on `|𝒮| · |𝒰^pre| · |𝒰^i|` for exact constructions.
pub const MAX_LOCAL_PAIRS: usize = 4_000_000;

/// `π^pre_i(s, u_pre)` and `π^post_i(x, u, a)` of one node.
#[derive(Debug, Clone)]
pub struct NetworkMarginals {
    pub n_states: usize,
    pub pre_size: usize,
    pub arity: usize,
    /// Indexed `s * pre_size + u_pre`.
    pub pre: Vec<f64>,
    /// Indexed `x * arity + u`; sparse over actions.
    pub post: Vec<Vec<(usize, f64)>>,
}

impl NetworkMarginals {
    pub fn pre(&self, s: usize, up: usize) -> f64 {
        self.pre[s * self.pre_size + up]
    }

    pub fn post(&self, x: usize, u: usize) -> &[(usize, f64)] {
        &self.post[x * self.arity + u]
    }
}

fn input_radices<N: SyncPolicyNetwork + ?Sized>(net: &N, node: usize) -> Vec<usize> {
    net.inputs(node).iter().map(|&j| net.arity(j)).collect()
}

fn encode_inputs<N: SyncPolicyNetwork + ?Sized>(net: &N, node: usize, outputs: &[usize]) -> usize {
    net.inputs(node).iter().fold(0, |acc, &j| acc * net.arity(j) + outputs[j])
}

/// Writes the digits of `up` into the input slots of `outputs`.
fn decode_inputs<N: SyncPolicyNetwork + ?Sized>(net: &N, node: usize, mut up: usize, outputs: &mut [usize]) {
    for &j in net.inputs(node).iter().rev() {
        outputs[j] = up % net.arity(j);
        up /= net.arity(j);
    }
}

fn check_size<N: SyncPolicyNetwork + ?Sized>(net: &N, mdp: &TabularMdp, node: usize) -> Result<usize> {
    if node >= net.n_nodes() {
        return Err(Error::Index(format!("node {node}")));
    }
    let pre_size: usize = input_radices(net, node).iter().product();
    let size = mdp.n_states().saturating_mul(pre_size).saturating_mul(net.arity(node));
    if size > MAX_LOCAL_PAIRS {
        return Err(Error::TooLarge { size, limit: MAX_LOCAL_PAIRS });
    }
    Ok(pre_size)
}

/// Exact `π^pre` and `π^post` of `node` by enumerating the whole network.
///
/// Where the conditioning event `(x, u)` has probability zero, `π^post` falls
/// back to intervening: the node's output (and, if `x` itself is impossible,
/// its inputs) are forced rather than conditioned on.
pub fn compute_marginals<N: SyncPolicyNetwork + ?Sized>(
    mdp: &TabularMdp,
    net: &N,
    node: usize,
) -> Result<NetworkMarginals> {
    let pre_size = check_size(net, mdp, node)?;
    let k = net.arity(node);
    let n = mdp.n_states();
    let mut pre = vec![0.0; n * pre_size];
    let mut post = vec![Vec::new(); n * pre_size * k];
    let free = vec![Clamp::Free; net.n_nodes()];
    let mut outputs = vec![0; net.n_nodes()];
    for s in 0..n {
        let mut joint: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); pre_size * k];
        for_each_joint(net, s, &free, |outs, p| {
            let up = encode_inputs(net, node, outs);
            pre[s * pre_size + up] += p;
            *joint[up * k + outs[node]].entry(net.action(outs)).or_insert(0.0) += p;
        });
        for up in 0..pre_size {
            for u in 0..k {
                let mut law: Vec<(usize, f64)> = std::mem::take(&mut joint[up * k + u]).into_iter().collect();
                let mut total: f64 = law.iter().map(|e| e.1).sum();
                if total == 0.0 {
                    let mut clamps = free.clone();
                    decode_inputs(net, node, up, &mut outputs);
                    let reachable = pre[s * pre_size + up] > 0.0;
                    for &j in net.inputs(node) {
                        clamps[j] = if reachable { Clamp::Condition(outputs[j]) } else { Clamp::Force(outputs[j]) };
                    }
                    clamps[node] = Clamp::Force(u);
                    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                    for_each_joint(net, s, &clamps, |outs, p| *acc.entry(net.action(outs)).or_insert(0.0) += p);
                    law = acc.into_iter().collect();
                    total = law.iter().map(|e| e.1).sum();
                }
                law.sort_by_key(|e| e.0);
                law.iter_mut().for_each(|e| e.1 /= total);
                post[(s * pre_size + up) * k + u] = law;
            }
        }
    }
    Ok(NetworkMarginals { n_states: n, pre_size, arity: k, pre, post })
}

/// The CoMDP of one node, with the node's own law at the parameters it was
/// built under (the same softmax rows serve both the network and the CoMDP).
#[derive(Debug, Clone)]
pub struct CoMdp {
    pub mdp: TabularMdp,
    pub node: usize,
    pub marginals: NetworkMarginals,
    /// Parameter block of the node's softmax rows, if it has any.
    pub block: Option<usize>,
    /// Per local state: softmax row, or `None` where the law is parameter-free.
    pub rows: Vec<Option<usize>>,
    /// Per local state: the node's law under the build-time parameters.
    pub laws: Vec<Vec<f64>>,
}

impl CoMdp {
    pub fn n_local_states(&self) -> usize {
        self.mdp.n_states()
    }

    pub fn pre_size(&self) -> usize {
        self.marginals.pre_size
    }

    pub fn local_state(&self, s: usize, up: usize) -> usize {
        s * self.marginals.pre_size + up
    }

    /// False where `R^i(x, u, x', ·)` is undefined (zero denominator).
    pub fn is_reward_defined(&self, base: &TabularMdp, x: usize, u: usize, x_next: usize) -> bool {
        let s = x / self.marginals.pre_size;
        let s2 = x_next / self.marginals.pre_size;
        self.marginals.post(x, u).iter().any(|&(a, p)| p * base.transition(s, a, s2) > 0.0)
    }

    /// `π_i` over local states for the given parameter block.
    pub fn policy(&self, block: &[f64]) -> PolicyTable {
        let k = self.marginals.arity;
        let rows = self
            .rows
            .iter()
            .zip(&self.laws)
            .map(|(row, law)| match row {
                Some(r) => {
                    let mut p = vec![0.0; k];
                    softmax_into(&block[r * k..(r + 1) * k], &mut p);
                    p
                }
                None => law.clone(),
            })
            .collect();
        PolicyTable::from_rows(rows).expect("softmax rows are distributions")
    }
}

/// Builds `M^i` for `node`.
pub fn build_comdp<N: SyncPolicyNetwork + ?Sized>(mdp: &TabularMdp, net: &N, node: usize) -> Result<CoMdp> {
    let marginals = compute_marginals(mdp, net, node)?;
    let pre_size = marginals.pre_size;
    let k = marginals.arity;
    let n = mdp.n_states();
    let nx = n * pre_size;
    let nr = mdp.reward_support().len();
    let mut b = MdpBuilder::new(nx, k, mdp.reward_support().to_vec(), mdp.discount());
    b.tolerance(1e-10).skip_absorbing_check();
    let mut init = vec![0.0; nx];
    let mut weight = vec![0.0; n];
    let mut reward = vec![0.0; n * nr];
    for s in 0..n {
        for up in 0..pre_size {
            let x = s * pre_size + up;
            init[x] = mdp.initial_dist()[s] * marginals.pre(s, up);
            if mdp.is_terminal(s) {
                b.terminal(x);
            }
            for u in 0..k {
                weight.iter_mut().for_each(|w| *w = 0.0);
                reward.iter_mut().for_each(|r| *r = 0.0);
                for &(a, pa) in marginals.post(x, u) {
                    for o in mdp.outcomes(s, a) {
                        weight[o.next] += pa * o.prob;
                        for (kk, r) in o.reward_probs.iter().enumerate() {
                            reward[o.next * nr + kk] += pa * o.prob * r;
                        }
                    }
                }
                for s2 in (0..n).filter(|&s2| weight[s2] > 0.0) {
                    let law: Vec<f64> = reward[s2 * nr..(s2 + 1) * nr].iter().map(|r| r / weight[s2]).collect();
                    for up2 in 0..pre_size {
                        let p = marginals.pre(s2, up2) * weight[s2];
                        if p > 0.0 {
                            b.transition(x, u, s2 * pre_size + up2, p, law.clone());
                        }
                    }
                }
            }
        }
    }
    b.initial(init);
    let comdp_mdp = b.build()?;

    let mut rows = Vec::with_capacity(nx);
    let mut laws = Vec::with_capacity(nx);
    let mut block = None;
    let mut outputs = vec![0; net.n_nodes()];
    for s in 0..n {
        for up in 0..pre_size {
            decode_inputs(net, node, up, &mut outputs);
            let mut law = vec![0.0; k];
            net.distribution(node, s, &outputs, &mut law);
            laws.push(law);
            let row = net.softmax_row(node, s, &outputs);
            if let Some((blk, _)) = row {
                block = Some(blk);
            }
            rows.push(row.map(|(_, r)| r));
        }
    }
    Ok(CoMdp { mdp: comdp_mdp, node, marginals, block, rows, laws })
}

/// `J_i(θ_i)` by linear solve on `M^i` and `∂J_i/∂θ_i` by the sum form
/// `Σ_x d(x) Σ_u ∂π_i(x, u)/∂θ_i Q_i(x, u)`.
pub fn comdp_objective_and_gradient(comdp: &CoMdp, block: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k = comdp.marginals.arity;
    let needed = comdp.rows.iter().flatten().map(|r| (r + 1) * k).max().unwrap_or(0);
    if block.len() < needed {
        return Err(Error::Layout(format!("parameter block has {} entries, rows need {needed}", block.len())));
    }
    let mdp = &comdp.mdp;
    let policy = comdp.policy(block);
    let chain = mdp.chain(&policy)?;
    let v = chain.values()?;
    let d = chain.occupancy(mdp.initial_dist())?;
    let j = mdp.initial_dist().iter().zip(&v).map(|(p, v)| p * v).sum();
    let mut grad = vec![0.0; block.len()];
    let gamma = mdp.discount();
    let mut q = vec![0.0; k];
    for x in 0..mdp.n_states() {
        let Some(r) = comdp.rows[x] else { continue };
        if d[x] == 0.0 || mdp.is_terminal(x) {
            continue;
        }
        for (u, qu) in q.iter_mut().enumerate() {
            *qu = mdp.outcomes(x, u).map(|o| o.prob * (o.mean_reward + gamma * v[o.next])).sum();
        }
        let pi = policy.row(x);
        let baseline: f64 = pi.iter().zip(&q).map(|(p, q)| p * q).sum();
        for u in 0..k {
            grad[r * k + u] += d[x] * pi[u] * (q[u] - baseline);
        }
    }
    Ok((j, grad))
}

/// Names of the checks produced by [`verify_comdp`], in order.
pub const CHECK_NAMES: [&str; 11] = [
    "stochasticity",
    "initial_local_law",
    "initial_state_marginal",
    "transition",
    "reward_law",
    "local_state_marginal",
    "state_marginal",
    "pre_conditional",
    "next_state_conditional",
    "pre_independence",
    "reward_marginal",
];

/// Real joint law at one state: `(u_pre, u) → [(a, p)]` and `Pr(u_pre | s)`.
struct RealLaw {
    pre: Vec<f64>,
    joint: BTreeMap<(usize, usize), Vec<(usize, f64)>>,
}

fn real_law<N: SyncPolicyNetwork + ?Sized>(net: &N, s: usize, node: usize, pre_size: usize) -> RealLaw {
    let free = vec![Clamp::Free; net.n_nodes()];
    let mut pre = vec![0.0; pre_size];
    let mut joint: BTreeMap<(usize, usize), BTreeMap<usize, f64>> = BTreeMap::new();
    for_each_joint(net, s, &free, |outs, p| {
        let up = encode_inputs(net, node, outs);
        pre[up] += p;
        *joint.entry((up, outs[node])).or_default().entry(net.action(outs)).or_insert(0.0) += p;
    });
    let joint = joint.into_iter().map(|(key, m)| (key, m.into_iter().collect())).collect();
    RealLaw { pre, joint }
}

/// Checks `M^i` against the exact laws of the real network: stochasticity,
/// the initial laws, the one-step conditionals of local transitions, rewards,
/// next states and next inputs, and the time-indexed local-state, state and
/// reward marginals for `t ≤ horizon`.
///
/// The one-step conditionals of the real process do not depend on `t` (it is
/// Markov in `S_t`), so each is checked once for every `(x, u)` that has
/// positive probability at some `t ≤ horizon`.
pub fn verify_comdp<N: SyncPolicyNetwork + ?Sized>(
    mdp: &TabularMdp,
    net: &N,
    comdp: &CoMdp,
    horizon: usize,
    tol: f64,
) -> Result<Report> {
    let node = comdp.node;
    let pre_size = comdp.pre_size();
    let k = comdp.marginals.arity;
    let n = mdp.n_states();
    let nr = mdp.reward_support().len();
    let cm = &comdp.mdp;
    if cm.n_states() != n * pre_size || cm.n_actions() != k {
        return Err(Error::InvalidMdp("CoMDP does not match the network".into()));
    }
    let real: Vec<RealLaw> = (0..n).map(|s| real_law(net, s, node, pre_size)).collect();
    let mut report = Report::default();

    // stochasticity of the tables
    let mut dev: f64 = (cm.initial_dist().iter().sum::<f64>() - 1.0).abs();
    for x in 0..cm.n_states() {
        for u in 0..k {
            let mut total = 0.0;
            for o in cm.outcomes(x, u) {
                total += o.prob;
                dev = dev.max((o.reward_probs.iter().sum::<f64>() - 1.0).abs());
            }
            dev = dev.max((total - 1.0).abs());
        }
    }
    report.push("stochasticity", dev, tol);

    let d0 = mdp.initial_dist();
    let mut dev_init: f64 = 0.0;
    let mut dev_init_s: f64 = 0.0;
    for s in 0..n {
        let mut sum = 0.0;
        for up in 0..pre_size {
            let x = comdp.local_state(s, up);
            sum += cm.initial_dist()[x];
            dev_init = dev_init.max((cm.initial_dist()[x] - d0[s] * real[s].pre[up]).abs());
        }
        dev_init_s = dev_init_s.max((sum - d0[s]).abs());
    }
    report.push("initial_local_law", dev_init, tol);
    report.push("initial_state_marginal", dev_init_s, tol);

    // time-indexed marginals, and which (x, u) pairs occur
    let mut p_s = d0.to_vec();
    let mut xi = cm.initial_dist().to_vec();
    let mut seen = vec![false; n * pre_size * k];
    let (mut dev_xm, mut dev_sm, mut dev_pc, mut dev_rm): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..=horizon {
        let mut real_r = vec![0.0; nr];
        let mut next_s = vec![0.0; n];
        for s in 0..n {
            let xs: f64 = (0..pre_size).map(|up| xi[comdp.local_state(s, up)]).sum();
            dev_sm = dev_sm.max((xs - p_s[s]).abs());
            for up in 0..pre_size {
                let x = comdp.local_state(s, up);
                dev_xm = dev_xm.max((xi[x] - p_s[s] * real[s].pre[up]).abs());
                if p_s[s] > 0.0 && xs > 0.0 {
                    dev_pc = dev_pc.max((xi[x] / xs - real[s].pre[up]).abs());
                }
            }
            if p_s[s] == 0.0 {
                continue;
            }
            for (&(up, u), law) in &real[s].joint {
                seen[(s * pre_size + up) * k + u] = true;
                for &(a, pa) in law {
                    for o in mdp.outcomes(s, a) {
                        let w = p_s[s] * pa * o.prob;
                        next_s[o.next] += w;
                        for (kk, r) in o.reward_probs.iter().enumerate() {
                            real_r[kk] += w * r;
                        }
                    }
                }
            }
        }
        let mut comdp_r = vec![0.0; nr];
        let mut next_xi = vec![0.0; xi.len()];
        for x in 0..xi.len() {
            if xi[x] == 0.0 {
                continue;
            }
            for u in 0..k {
                let pu = comdp.laws[x][u];
                if pu == 0.0 {
                    continue;
                }
                for o in cm.outcomes(x, u) {
                    let w = xi[x] * pu * o.prob;
                    next_xi[o.next] += w;
                    for (kk, r) in o.reward_probs.iter().enumerate() {
                        comdp_r[kk] += w * r;
                    }
                }
            }
        }
        dev_rm = real_r.iter().zip(&comdp_r).fold(dev_rm, |d, (a, b)| d.max((a - b).abs()));
        p_s = next_s;
        xi = next_xi;
    }

    // one-step conditionals given (x, u)
    let (mut dev_tr, mut dev_rw, mut dev_ns, mut dev_pi): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let mut real_next: BTreeMap<usize, (f64, Vec<f64>)> = BTreeMap::new();
    for s in 0..n {
        for (&(up, u), law) in &real[s].joint {
            if !seen[(s * pre_size + up) * k + u] {
                continue;
            }
            let x = comdp.local_state(s, up);
            let mass: f64 = law.iter().map(|e| e.1).sum();
            real_next.clear();
            for &(a, pa) in law {
                for o in mdp.outcomes(s, a) {
                    for up2 in 0..pre_size {
                        let w = pa * o.prob * real[o.next].pre[up2] / mass;
                        if w == 0.0 {
                            continue;
                        }
                        let e = real_next.entry(comdp.local_state(o.next, up2)).or_insert_with(|| (0.0, vec![0.0; nr]));
                        e.0 += w;
                        for (kk, r) in o.reward_probs.iter().enumerate() {
                            e.1[kk] += w * r;
                        }
                    }
                }
            }
            let comdp_next: BTreeMap<usize, (f64, &[f64])> =
                cm.outcomes(x, u).map(|o| (o.next, (o.prob, o.reward_probs))).collect();
            let mut keys: Vec<usize> = real_next.keys().chain(comdp_next.keys()).copied().collect();
            keys.sort_unstable();
            keys.dedup();
            let mut real_s2 = vec![0.0; n];
            let mut comdp_s2 = vec![0.0; n];
            for &x2 in &keys {
                let pr = real_next.get(&x2).map_or(0.0, |e| e.0);
                let pc = comdp_next.get(&x2).map_or(0.0, |e| e.0);
                dev_tr = dev_tr.max((pr - pc).abs());
                real_s2[x2 / pre_size] += pr;
                comdp_s2[x2 / pre_size] += pc;
                if let (Some((pr, rr)), Some((_, rc))) = (real_next.get(&x2), comdp_next.get(&x2)) {
                    for kk in 0..nr {
                        dev_rw = dev_rw.max((rr[kk] / pr - rc[kk]).abs());
                    }
                }
            }
            for s2 in 0..n {
                dev_ns = dev_ns.max((real_s2[s2] - comdp_s2[s2]).abs());
            }
            for &x2 in &keys {
                let s2 = x2 / pre_size;
                if real_s2[s2] > 0.0 && comdp_s2[s2] > 0.0 {
                    let pr = real_next.get(&x2).map_or(0.0, |e| e.0) / real_s2[s2];
                    let pc = comdp_next.get(&x2).map_or(0.0, |e| e.0) / comdp_s2[s2];
                    dev_pi = dev_pi.max((pr - pc).abs());
                    // the real next inputs depend on s' only
                    dev_pi = dev_pi.max((pr - real[s2].pre[x2 % pre_size]).abs());
                }
            }
        }
    }
    report.push("transition", dev_tr, tol);
    report.push("reward_law", dev_rw, tol);
    report.push("local_state_marginal", dev_xm, tol);
    report.push("state_marginal", dev_sm, tol);
    report.push("pre_conditional", dev_pc, tol);
    report.push("next_state_conditional", dev_ns, tol);
    report.push("pre_independence", dev_pi, tol);
    report.push("reward_marginal", dev_rm, tol);
    Ok(report)
}

/// Builds `M^i` and verifies it; see [`verify_comdp`].
pub fn verify_properties<N: SyncPolicyNetwork + ?Sized>(
    mdp: &TabularMdp,
    net: &N,
    node: usize,
    horizon: usize,
    tol: f64,
) -> Result<Report> {
    let comdp = build_comdp(mdp, net, node)?;
    verify_comdp(mdp, net, &comdp, horizon, tol)
}

/// Exact expectation of the truncated local update
/// `E[Σ_{t<H} γ^t G_t ∂ln π_i(X_t, U_t)/∂θ_i]` with `G_t` summed to `H`,
/// computed by forward state laws and backward finite-horizon values.
pub fn expected_local_update<N: SyncPolicyNetwork + ?Sized>(
    mdp: &TabularMdp,
    net: &N,
    node: usize,
    block_len: usize,
    horizon: usize,
) -> Result<Vec<f64>> {
    if node >= net.n_nodes() {
        return Err(Error::Index(format!("node {node}")));
    }
    let n = mdp.n_states();
    let gamma = mdp.discount();
    let free = vec![Clamp::Free; net.n_nodes()];
    let mut combos: Vec<Vec<(Vec<usize>, f64)>> = Vec::with_capacity(n);
    for s in 0..n {
        let mut list = Vec::new();
        for_each_joint(net, s, &free, |outs, p| list.push((outs.to_vec(), p)));
        combos.push(list);
    }
    // v[h][s]: expected sum of the next h rewards from s
    let mut v = vec![vec![0.0; n]];
    for h in 1..=horizon {
        let prev = &v[h - 1];
        let cur: Vec<f64> = (0..n)
            .map(|s| {
                combos[s]
                    .iter()
                    .map(|(outs, p)| {
                        let a = net.action(outs);
                        p * mdp.outcomes(s, a).map(|o| o.prob * (o.mean_reward + gamma * prev[o.next])).sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        v.push(cur);
    }
    let k = net.arity(node);
    let mut grad = vec![0.0; block_len];
    let mut dist = mdp.initial_dist().to_vec();
    let mut law = vec![0.0; k];
    for t in 0..horizon {
        let remaining = &v[horizon - t - 1];
        let mut next = vec![0.0; n];
        for s in 0..n {
            if dist[s] == 0.0 {
                continue;
            }
            for (outs, p) in &combos[s] {
                let a = net.action(outs);
                let mut g = 0.0;
                for o in mdp.outcomes(s, a) {
                    next[o.next] += dist[s] * p * o.prob;
                    g += o.prob * (o.mean_reward + gamma * remaining[o.next]);
                }
                if let Some((_, row)) = net.softmax_row(node, s, outs) {
                    net.distribution(node, s, outs, &mut law);
                    let w = gamma.powi(t as i32) * dist[s] * p * g;
                    for u in 0..k {
                        let score = f64::from(u8::from(u == outs[node])) - law[u];
                        grad[row * k + u] += w * score;
                    }
                }
            }
        }
        dist = next;
    }
    Ok(grad)
}
