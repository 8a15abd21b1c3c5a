//! Finite MDPs with distributional rewards, the gridworld environment,
//! episode sampling and exact policy evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::MarkovChain;
use crate::error::{Error, Result};
use crate::rng::sample_categorical;

/// Default cap on environment steps per sampled episode.
pub const DEFAULT_HORIZON: usize = 1000;

const PROB_TOL: f64 = 1e-12;

/// One `(next state, probability, reward distribution)` entry of `P(s, a, ·)`.
#[derive(Debug, Clone, Copy)]
pub struct Outcome<'a> {
    pub next: usize,
    pub prob: f64,
    /// Distribution over [`TabularMdp::reward_support`].
    pub reward_probs: &'a [f64],
    /// `Σ_r r · R(s, a, s', r)`.
    pub mean_reward: f64,
}

/// A finite MDP `(S, A, R, P, R, d0, γ)`.
///
/// Transitions are stored sparsely (only positive-probability successors), so
/// the same type carries both small environments and the large augmented
/// MDPs produced by the asynchronous reduction.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    reward_support: Vec<f64>,
    offsets: Vec<usize>,
    next: Vec<usize>,
    prob: Vec<f64>,
    reward_probs: Vec<f64>,
    mean_reward: Vec<f64>,
    initial: Vec<f64>,
    discount: f64,
    terminal: Vec<bool>,
    decision: Vec<Option<usize>>,
    n_decision: usize,
}

struct Entry {
    s: usize,
    a: usize,
    next: usize,
    prob: f64,
    rewards: Vec<f64>,
}

/// Incremental constructor for [`TabularMdp`]; `build` validates every invariant.
pub struct MdpBuilder {
    n_states: usize,
    n_actions: usize,
    reward_support: Vec<f64>,
    entries: Vec<Entry>,
    initial: Vec<f64>,
    discount: f64,
    terminal: Vec<bool>,
    check_absorbing: bool,
    tol: f64,
}

impl MdpBuilder {
    pub fn new(n_states: usize, n_actions: usize, reward_support: Vec<f64>, discount: f64) -> Self {
        Self {
            n_states,
            n_actions,
            reward_support,
            entries: Vec::new(),
            initial: vec![0.0; n_states],
            discount,
            terminal: vec![false; n_states],
            check_absorbing: true,
            tol: PROB_TOL,
        }
    }

    /// Tolerance for row sums; derived MDPs accumulate rounding in their tables.
    pub fn tolerance(&mut self, tol: f64) -> &mut Self {
        self.tol = tol;
        self
    }

    /// Adds `P(s, a, next) += prob` with the given reward distribution.
    pub fn transition(&mut self, s: usize, a: usize, next: usize, prob: f64, rewards: Vec<f64>) -> &mut Self {
        self.entries.push(Entry { s, a, next, prob, rewards });
        self
    }

    /// Adds a transition whose reward is a single support value.
    pub fn deterministic(&mut self, s: usize, a: usize, next: usize, prob: f64, reward: f64) -> &mut Self {
        let mut rewards = vec![0.0; self.reward_support.len()];
        match self.reward_support.iter().position(|&r| r == reward) {
            Some(k) => rewards[k] = 1.0,
            None => {
                self.reward_support.push(reward);
                for e in &mut self.entries {
                    e.rewards.push(0.0);
                }
                rewards.push(1.0);
            }
        }
        self.transition(s, a, next, prob, rewards)
    }

    pub fn initial(&mut self, dist: Vec<f64>) -> &mut Self {
        self.initial = dist;
        self
    }

    /// Marks `s` terminal. Actions without explicit transitions get a
    /// zero-reward self-loop; explicit ones must stay inside the terminal set.
    pub fn terminal(&mut self, s: usize) -> &mut Self {
        self.terminal[s] = true;
        self
    }

    /// Skips the discount-1 absorption check (used for derived MDPs whose
    /// absorption follows from the base MDP).
    pub fn skip_absorbing_check(&mut self) -> &mut Self {
        self.check_absorbing = false;
        self
    }

    pub fn build(mut self) -> Result<TabularMdp> {
        let (n, na) = (self.n_states, self.n_actions);
        if n == 0 || na == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::InvalidMdp(format!("discount {} outside [0, 1]", self.discount)));
        }
        if self.initial.len() != n {
            return Err(Error::InvalidMdp("initial distribution has the wrong length".into()));
        }
        if self.terminal.iter().any(|&t| t) && !self.reward_support.contains(&0.0) {
            self.reward_support.push(0.0);
            for e in &mut self.entries {
                e.rewards.push(0.0);
            }
        }
        let zero = self.reward_support.iter().position(|&r| r == 0.0);
        let nr = self.reward_support.len();
        for e in &self.entries {
            if e.s >= n || e.next >= n || e.a >= na {
                return Err(Error::Index(format!("transition ({}, {}, {})", e.s, e.a, e.next)));
            }
            if e.rewards.len() != nr {
                return Err(Error::InvalidMdp("reward distribution length mismatch".into()));
            }
            // the terminal set must be closed and reward-free
            if self.terminal[e.s] && e.prob > 0.0 {
                let free = zero.is_some_and(|z| e.rewards[z] == 1.0);
                if !self.terminal[e.next] || !free {
                    return Err(Error::InvalidMdp(format!(
                        "terminal state {} must stay terminal with zero reward",
                        e.s
                    )));
                }
            }
        }
        let mut explicit = vec![false; n * na];
        for e in &self.entries {
            explicit[e.s * na + e.a] = true;
        }
        for s in (0..n).filter(|&s| self.terminal[s]) {
            let mut rewards = vec![0.0; nr];
            rewards[zero.expect("zero reward inserted above")] = 1.0;
            for a in (0..na).filter(|&a| !explicit[s * na + a]) {
                self.entries.push(Entry { s, a, next: s, prob: 1.0, rewards: rewards.clone() });
            }
        }
        self.entries.sort_by_key(|e| (e.s * na + e.a, e.next));

        let mut offsets = Vec::with_capacity(n * na + 1);
        let mut next = Vec::with_capacity(self.entries.len());
        let mut prob = Vec::with_capacity(self.entries.len());
        let mut reward_probs = Vec::with_capacity(self.entries.len() * nr);
        let mut mean_reward = Vec::with_capacity(self.entries.len());
        let mut cursor = 0;
        offsets.push(0);
        for key in 0..n * na {
            // merge duplicate (s, a, s') entries by mixing their reward laws
            while cursor < self.entries.len() && self.entries[cursor].s * na + self.entries[cursor].a == key {
                let e = &self.entries[cursor];
                if e.prob < 0.0 {
                    return Err(Error::InvalidMdp(format!("negative probability at ({}, {}, {})", e.s, e.a, e.next)));
                }
                if e.prob == 0.0 {
                    cursor += 1;
                    continue;
                }
                let rsum: f64 = e.rewards.iter().sum();
                if (rsum - 1.0).abs() > self.tol || e.rewards.iter().any(|&p| p < 0.0) {
                    return Err(Error::InvalidMdp(format!(
                        "reward distribution at ({}, {}, {}) sums to {rsum}",
                        e.s, e.a, e.next
                    )));
                }
                let same = next.len() > offsets[key] && *next.last().unwrap() == e.next;
                if same {
                    let last = prob.len() - 1;
                    let old = prob[last];
                    let total = old + e.prob;
                    for k in 0..nr {
                        let slot = last * nr + k;
                        reward_probs[slot] = (reward_probs[slot] * old + e.rewards[k] * e.prob) / total;
                    }
                    prob[last] = total;
                } else {
                    next.push(e.next);
                    prob.push(e.prob);
                    reward_probs.extend_from_slice(&e.rewards);
                }
                cursor += 1;
            }
            let sum: f64 = prob[offsets[key]..].iter().sum();
            if (sum - 1.0).abs() > self.tol {
                return Err(Error::InvalidMdp(format!(
                    "P(s={}, a={}, ·) sums to {sum}",
                    key / na,
                    key % na
                )));
            }
            offsets.push(next.len());
        }
        for j in 0..prob.len() {
            let m = (0..nr).map(|k| reward_probs[j * nr + k] * self.reward_support[k]).sum();
            mean_reward.push(m);
        }

        let isum: f64 = self.initial.iter().sum();
        if (isum - 1.0).abs() > self.tol || self.initial.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidMdp(format!("initial distribution sums to {isum}")));
        }

        let mut decision = vec![None; n];
        let mut n_decision = 0;
        for s in 0..n {
            if !self.terminal[s] {
                decision[s] = Some(n_decision);
                n_decision += 1;
            }
        }

        let mdp = TabularMdp {
            n_states: n,
            n_actions: na,
            reward_support: self.reward_support,
            offsets,
            next,
            prob,
            reward_probs,
            mean_reward,
            initial: self.initial,
            discount: self.discount,
            terminal: self.terminal,
            decision,
            n_decision,
        };
        if mdp.discount == 1.0 && self.check_absorbing {
            if !mdp.terminal.iter().any(|&t| t) {
                return Err(Error::InvalidMdp("discount 1 requires at least one terminal state".into()));
            }
            mdp.chain(&PolicyTable::uniform(n, na))?.values()?;
        }
        Ok(mdp)
    }
}

impl TabularMdp {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn reward_support(&self) -> &[f64] {
        &self.reward_support
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    /// Index of `s` among the non-terminal ("decision") states, which are the
    /// only states a policy is ever queried in.
    pub fn decision_index(&self, s: usize) -> Option<usize> {
        self.decision[s]
    }

    pub fn n_decision_states(&self) -> usize {
        self.n_decision
    }

    pub fn outcomes(&self, s: usize, a: usize) -> impl Iterator<Item = Outcome<'_>> + '_ {
        let key = s * self.n_actions + a;
        let nr = self.reward_support.len();
        (self.offsets[key]..self.offsets[key + 1]).map(move |j| Outcome {
            next: self.next[j],
            prob: self.prob[j],
            reward_probs: &self.reward_probs[j * nr..(j + 1) * nr],
            mean_reward: self.mean_reward[j],
        })
    }

    /// Adds `delta` to the existing entry `P(s, a, next)` without
    /// renormalising. Meant for fault-injection checks of verifiers.
    pub fn perturb_transition(&mut self, s: usize, a: usize, next: usize, delta: f64) -> Result<()> {
        let key = s * self.n_actions + a;
        if key + 1 >= self.offsets.len() {
            return Err(Error::Index(format!("state-action ({s}, {a})")));
        }
        let j = (self.offsets[key]..self.offsets[key + 1])
            .find(|&j| self.next[j] == next)
            .ok_or_else(|| Error::Index(format!("no transition ({s}, {a}) -> {next}")))?;
        self.prob[j] += delta;
        Ok(())
    }

    /// `P(s, a, s')`.
    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.outcomes(s, a).find(|o| o.next == next).map_or(0.0, |o| o.prob)
    }

    /// `R(s, a, s', r_k)`; zero where `P(s, a, s') = 0`.
    pub fn reward_prob(&self, s: usize, a: usize, next: usize, k: usize) -> f64 {
        self.outcomes(s, a).find(|o| o.next == next).map_or(0.0, |o| o.reward_probs[k])
    }

    /// `E[R_t | S_t = s, A_t = a]`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.outcomes(s, a).map(|o| o.prob * o.mean_reward).sum()
    }

    pub fn n_entries(&self) -> usize {
        self.next.len()
    }

    /// The Markov reward chain induced by a stationary policy.
    pub fn chain(&self, policy: &PolicyTable) -> Result<MarkovChain> {
        policy.check_shape(self.n_states, self.n_actions)?;
        let mut chain = MarkovChain::new(self.n_states, self.discount, self.terminal.clone());
        for s in 0..self.n_states {
            if self.terminal[s] {
                chain.add_transition(s, s, 1.0);
                continue;
            }
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for o in self.outcomes(s, a) {
                    chain.add_transition(s, o.next, pa * o.prob);
                    chain.add_reward(s, pa * o.prob * o.mean_reward);
                }
            }
        }
        Ok(chain)
    }

    fn check_indices(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::Index(format!("state {s} >= {}", self.n_states)));
        }
        if a >= self.n_actions {
            return Err(Error::Index(format!("action {a} >= {}", self.n_actions)));
        }
        Ok(())
    }

    /// Index-unchecked sampler used by the rollout loops.
    #[inline]
    pub(crate) fn sample_unchecked<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (usize, f64) {
        let key = s * self.n_actions + a;
        let (lo, hi) = (self.offsets[key], self.offsets[key + 1]);
        let j = if hi - lo == 1 { lo } else { lo + sample_categorical(&self.prob[lo..hi], rng) };
        let nr = self.reward_support.len();
        let rp = &self.reward_probs[j * nr..(j + 1) * nr];
        let k = if nr == 1 {
            0
        } else if let Some(k) = rp.iter().position(|&p| p == 1.0) {
            k
        } else {
            sample_categorical(rp, rng)
        };
        (self.next[j], self.reward_support[k])
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial, rng)
    }
}

/// `s' ~ P(s, a, ·)`, `r ~ R(s, a, s', ·)`.
pub fn sample_step<R: Rng + ?Sized>(mdp: &TabularMdp, s: usize, a: usize, rng: &mut R) -> Result<(usize, f64)> {
    mdp.check_indices(s, a)?;
    Ok(mdp.sample_unchecked(s, a, rng))
}

/// A stationary policy table `π(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Point mass on `actions[s]` in every state.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self { n_states: actions.len(), n_actions, probs }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        let n_states = rows.len();
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for (s, row) in rows.into_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != n_actions || (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidMdp(format!("policy row {s} is not a distribution")));
            }
            probs.extend(row);
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub(crate) fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, probs: vec![0.0; n_states * n_actions] }
    }

    pub(crate) fn add(&mut self, s: usize, a: usize, p: f64) {
        self.probs[s * self.n_actions + a] += p;
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    fn check_shape(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.n_states != n_states || self.n_actions != n_actions {
            return Err(Error::InvalidMdp(format!(
                "policy is {}x{}, mdp is {}x{}",
                self.n_states, self.n_actions, n_states, n_actions
            )));
        }
        Ok(())
    }
}

/// Exact `v^π` by direct linear solve; terminal values are 0.
pub fn exact_state_values(mdp: &TabularMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    mdp.chain(policy)?.values()
}

/// Exact `J(π) = Σ_s d0(s) v^π(s)`.
pub fn exact_objective(mdp: &TabularMdp, policy: &PolicyTable) -> Result<f64> {
    let v = exact_state_values(mdp, policy)?;
    Ok(mdp.initial.iter().zip(&v).map(|(d, v)| d * v).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// Samples an episode of a flat policy until termination or `horizon` steps.
/// Returns the steps and whether the horizon truncated the episode.
pub fn sample_episode<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    horizon: usize,
    rng: &mut R,
) -> (Vec<EpisodeStep>, bool) {
    let mut s = mdp.sample_initial(rng);
    let mut steps = Vec::new();
    while !mdp.is_terminal(s) {
        if steps.len() == horizon {
            return (steps, true);
        }
        let a = sample_categorical(policy.row(s), rng);
        let (next, reward) = mdp.sample_unchecked(s, a, rng);
        steps.push(EpisodeStep { state: s, action: a, reward });
        s = next;
    }
    (steps, false)
}

/// Gridworld actions.
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

/// Parameters of the deterministic shortest-path gridworld. Cells are `(x, y)`
/// with `x < width`; cell `(x, y)` is state `y * width + x` and the absorbing
/// terminal is state `width * height`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    #[serde(default = "default_step_reward")]
    pub step_reward: f64,
    #[serde(default)]
    pub goal_reward: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

fn default_step_reward() -> f64 {
    -1.0
}

fn default_discount() -> f64 {
    1.0
}

impl Default for GridworldSpec {
    fn default() -> Self {
        Self {
            width: 3,
            height: 3,
            start: (0, 0),
            goal: (2, 2),
            step_reward: -1.0,
            goal_reward: 0.0,
            discount: 1.0,
        }
    }
}

impl GridworldSpec {
    pub fn cell_state(&self, (x, y): (usize, usize)) -> usize {
        y * self.width + x
    }

    pub fn terminal_state(&self) -> usize {
        self.width * self.height
    }

    /// Undiscounted return of a shortest path from start to goal.
    pub fn optimal_return(&self) -> f64 {
        let dist = self.start.0.abs_diff(self.goal.0) + self.start.1.abs_diff(self.goal.1);
        dist as f64 * self.step_reward + self.goal_reward
    }
}

/// Builds the gridworld: four deterministic moves, off-grid moves leave the
/// cell unchanged, every move costs `step_reward`, and the move that enters
/// the goal additionally earns `goal_reward` and lands in the terminal state.
pub fn build_gridworld(spec: &GridworldSpec) -> Result<TabularMdp> {
    let (w, h) = (spec.width, spec.height);
    if w * h < 2 {
        return Err(Error::InvalidMdp(format!("{w}x{h} grid needs at least two cells")));
    }
    for &(x, y) in [&spec.start, &spec.goal] {
        if x >= w || y >= h {
            return Err(Error::OutOfBounds { x, y, width: w, height: h });
        }
    }
    if spec.start == spec.goal {
        return Err(Error::InvalidMdp("start and goal coincide".into()));
    }
    let terminal = spec.terminal_state();
    let goal = spec.cell_state(spec.goal);
    let mut b = MdpBuilder::new(w * h + 1, 4, Vec::new(), spec.discount);
    for y in 0..h {
        for x in 0..w {
            let s = spec.cell_state((x, y));
            for a in 0..4 {
                let (nx, ny) = match a {
                    UP => (x, y.saturating_sub(1)),
                    DOWN => (x, (y + 1).min(h - 1)),
                    LEFT => (x.saturating_sub(1), y),
                    _ => ((x + 1).min(w - 1), y),
                };
                let target = spec.cell_state((nx, ny));
                if target == goal {
                    b.deterministic(s, a, terminal, 1.0, spec.step_reward + spec.goal_reward);
                } else {
                    b.deterministic(s, a, target, 1.0, spec.step_reward);
                }
            }
        }
    }
    let mut init = vec![0.0; w * h + 1];
    init[spec.cell_state(spec.start)] = 1.0;
    b.initial(init).terminal(terminal);
    b.build()
}
