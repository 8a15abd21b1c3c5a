//! Learning rules: the per-episode REINFORCE-style coagent update and an
//! episodic actor-critic with eligibility traces and one shared state-value
//! critic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::accumulate_trajectory_gradient;
use crate::mdp::{TabularMdp, DEFAULT_HORIZON};
use crate::network::{
    run_episode_into, AtomicTrajectory, BlockVector, CoagentNetwork, EpisodeScratch, Params, PolicyTables,
};
use crate::rng::{sample_categorical, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Reinforce,
    ActorCriticTraces,
}

/// Multiplier applied to every step size at episode `t` (counted from 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `a / (b + t)`: not summable, square summable.
    Harmonic { a: f64, b: f64 },
}

impl Schedule {
    pub fn factor(&self, episode: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Harmonic { a, b } => a / (b + episode as f64),
        }
    }
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// One step size per coagent.
    pub coagent_step_sizes: Vec<f64>,
    /// Critic step size; unused by REINFORCE.
    #[serde(default)]
    pub critic_step_size: f64,
    /// Trace decay; unused by REINFORCE.
    #[serde(default)]
    pub lambda: f64,
    pub episodes: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl TrainConfig {
    /// Actor-critic settings used for the 3×3 gridworld network.
    pub fn gridworld_actor_critic(episodes: usize, seed: u64) -> Self {
        Self {
            algorithm: Algorithm::ActorCriticTraces,
            coagent_step_sizes: vec![0.02842, 0.02842, 0.1598],
            critic_step_size: 0.024686,
            lambda: 0.8085,
            episodes,
            schedule: Schedule::Constant,
            seed,
            horizon: DEFAULT_HORIZON,
        }
    }

    pub fn validate(&self, net: &CoagentNetwork) -> Result<()> {
        if self.coagent_step_sizes.len() != net.n_coagents() {
            return Err(Error::Config(format!(
                "{} step sizes for {} coagents",
                self.coagent_step_sizes.len(),
                net.n_coagents()
            )));
        }
        // zero is allowed so single coagents can be held fixed
        if self.coagent_step_sizes.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config("coagent step sizes must be finite and non-negative".into()));
        }
        if self.algorithm == Algorithm::ActorCriticTraces {
            if !(self.critic_step_size.is_finite() && self.critic_step_size > 0.0) {
                return Err(Error::Config("critic step size must be positive".into()));
            }
            if !(0.0..=1.0).contains(&self.lambda) {
                return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
            }
        }
        if let Schedule::Harmonic { a, b } = self.schedule {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(Error::Config("harmonic schedule needs a > 0 and b > 0".into()));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// `θ_i += α_i Σ_t E^i_t γ^t G_t ∂ln π_i/∂θ_i` from one on-policy episode.
pub fn reinforce_update(
    net: &CoagentNetwork,
    params: &Params,
    trajectory: &AtomicTrajectory,
    step_sizes: &[f64],
) -> Result<Params> {
    net.check_params(params)?;
    if trajectory.fingerprint != params.fingerprint() {
        return Err(Error::OffPolicy { expected: params.fingerprint(), found: trajectory.fingerprint });
    }
    if step_sizes.len() != net.n_coagents() {
        return Err(Error::Config(format!("{} step sizes for {} coagents", step_sizes.len(), net.n_coagents())));
    }
    let tables = PolicyTables::new(net, params);
    let mut out = params.clone();
    reinforce_in_place(net, &tables, &mut out, trajectory, step_sizes, &mut Vec::new(), &mut Vec::new());
    Ok(out)
}

fn reinforce_in_place(
    net: &CoagentNetwork,
    tables: &PolicyTables,
    params: &mut Params,
    trajectory: &AtomicTrajectory,
    step_sizes: &[f64],
    returns: &mut Vec<f64>,
    grad: &mut Vec<f64>,
) {
    let offsets: Vec<usize> = (0..=net.n_coagents())
        .map(|i| if i < net.n_coagents() { params.block_offset(i) } else { params.len() })
        .collect();
    grad.clear();
    grad.resize(params.len(), 0.0);
    accumulate_trajectory_gradient(trajectory, net, tables, &offsets, returns, grad);
    for (i, &alpha) in step_sizes.iter().enumerate() {
        let lo = offsets[i];
        for (p, g) in params.block_mut(i).iter_mut().zip(&grad[lo..]) {
            *p += alpha * g;
        }
    }
}

/// Tabular state-value critic plus the eligibility traces of the critic and
/// of every coagent.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticState {
    pub values: Vec<f64>,
    pub critic_trace: Vec<f64>,
    pub traces: BlockVector,
}

impl CriticState {
    pub fn new(n_states: usize, net: &CoagentNetwork) -> Self {
        Self { values: vec![0.0; n_states], critic_trace: vec![0.0; n_states], traces: net.zero_params() }
    }

    /// Clears every trace; called at the start of each episode.
    pub fn reset_traces(&mut self) {
        self.critic_trace.iter_mut().for_each(|z| *z = 0.0);
        self.traces.as_mut_slice().iter_mut().for_each(|z| *z = 0.0);
    }
}

/// One atomic step of experience.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub state: usize,
    pub executions: Vec<bool>,
    pub rows: Vec<Option<usize>>,
    pub outputs: Vec<usize>,
    pub reward: f64,
    pub next_state: usize,
    pub next_terminal: bool,
    /// Whether this is the episode's first step (forced outputs are not sampled).
    pub first: bool,
}

/// Step sizes and decay rates in effect for one actor-critic step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub coagent_step_sizes: Vec<f64>,
    pub critic_step_size: f64,
    pub lambda: f64,
    /// Per-step discount (the atomic discount when `n_atomic > 1`).
    pub discount: f64,
}

/// One actor-critic update. Returns the TD error.
///
/// `δ = r + γ v(s') − v(s)` with `v(terminal) = 0`; the critic trace decays
/// by `γλ` and gains `∇v(s)`; each coagent trace decays by `γλ` and gains
/// `∂ln π_i/∂θ_i` only when the coagent executed; then `v += α_c δ z_c` and
/// `θ_i += α_i δ z_i`. Actor traces carry no extra `γ^t` weight.
pub fn actor_critic_step(
    net: &CoagentNetwork,
    tables: &PolicyTables,
    params: &mut Params,
    critic: &mut CriticState,
    record: &TransitionRecord,
    config: &StepConfig,
) -> f64 {
    let v_next = if record.next_terminal { 0.0 } else { critic.values[record.next_state] };
    let delta = record.reward + config.discount * v_next - critic.values[record.state];
    let decay = config.discount * config.lambda;
    critic.critic_trace.iter_mut().for_each(|z| *z *= decay);
    critic.critic_trace[record.state] += 1.0;
    critic.traces.scale(decay);
    for i in 0..net.n_coagents() {
        if !record.executions[i] || (record.first && net.coagent(i).forced_initial_output.is_some()) {
            continue;
        }
        let Some(row) = record.rows[i] else { continue };
        let k = net.arity(i);
        let z = &mut critic.traces.block_mut(i)[row * k..(row + 1) * k];
        for (zu, p) in z.iter_mut().zip(tables.probs(i, Some(row))) {
            *zu -= p;
        }
        z[record.outputs[i]] += 1.0;
    }
    let ac = config.critic_step_size * delta;
    for (v, z) in critic.values.iter_mut().zip(&critic.critic_trace) {
        *v += ac * z;
    }
    for i in 0..net.n_coagents() {
        let a = config.coagent_step_sizes[i] * delta;
        if a == 0.0 {
            continue;
        }
        let (p, z) = (params.block_mut(i), critic.traces.block(i));
        for (pj, zj) in p.iter_mut().zip(z) {
            *pj += a * zj;
        }
    }
    delta
}

/// Per-episode undiscounted returns and the final state of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub returns: Vec<f64>,
    pub truncated: usize,
    pub params: Params,
    pub critic: Option<Vec<f64>>,
}

impl TrainResult {
    /// Mean return over the last `n` episodes.
    pub fn final_mean(&self, n: usize) -> f64 {
        let tail = &self.returns[self.returns.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Trains from uniform (all-zero) parameters.
pub fn train(mdp: &TabularMdp, net: &CoagentNetwork, config: &TrainConfig) -> Result<TrainResult> {
    train_from(mdp, net, net.zero_params(), config, |_, _| {})
}

/// Trains from `init`, calling `hook(episodes_done, params)` before the
/// first episode and after every episode.
pub fn train_from(
    mdp: &TabularMdp,
    net: &CoagentNetwork,
    init: Params,
    config: &TrainConfig,
    mut hook: impl FnMut(usize, &Params),
) -> Result<TrainResult> {
    config.validate(net)?;
    net.check_params(&init)?;
    if net.n_env_states() != mdp.n_states() {
        return Err(Error::InvalidNetwork("network was built for a different mdp".into()));
    }
    let mut rng = seeded(config.seed);
    let mut params = init;
    let mut tables = PolicyTables::new(net, &params);
    let mut returns = Vec::with_capacity(config.episodes);
    let mut truncated = 0;
    hook(0, &params);
    match config.algorithm {
        Algorithm::Reinforce => {
            let mut traj = AtomicTrajectory::default();
            let mut scratch = EpisodeScratch::new(net);
            let (mut g, mut grad) = (Vec::new(), Vec::new());
            let mut steps = config.coagent_step_sizes.clone();
            for ep in 0..config.episodes {
                run_episode_into(mdp, net, &tables, params.fingerprint(), config.horizon, &mut rng, &mut traj, &mut scratch);
                truncated += usize::from(traj.truncated);
                returns.push(traj.total_reward());
                let f = config.schedule.factor(ep);
                steps.iter_mut().zip(&config.coagent_step_sizes).for_each(|(s, a)| *s = a * f);
                reinforce_in_place(net, &tables, &mut params, &traj, &steps, &mut g, &mut grad);
                tables.refresh(net, &params);
                hook(ep + 1, &params);
            }
            log_truncation(truncated, config.episodes);
            Ok(TrainResult { returns, truncated, params, critic: None })
        }
        Algorithm::ActorCriticTraces => {
            let mut critic = CriticState::new(mdp.n_states(), net);
            for ep in 0..config.episodes {
                let f = config.schedule.factor(ep);
                let step = StepConfig {
                    coagent_step_sizes: config.coagent_step_sizes.iter().map(|a| a * f).collect(),
                    critic_step_size: config.critic_step_size * f,
                    lambda: config.lambda,
                    discount: mdp.discount().powf(1.0 / net.n_atomic() as f64),
                };
                let (ret, cut) = actor_critic_episode(mdp, net, &mut params, &mut tables, &mut critic, &step, config.horizon, &mut rng);
                truncated += usize::from(cut);
                returns.push(ret);
                hook(ep + 1, &params);
            }
            log_truncation(truncated, config.episodes);
            Ok(TrainResult { returns, truncated, params, critic: Some(critic.values) })
        }
    }
}

fn log_truncation(truncated: usize, episodes: usize) {
    if truncated > 0 {
        log::warn!("{truncated} of {episodes} training episodes hit the horizon cap");
    }
}

/// Runs one episode, updating after every atomic step. With `n_atomic > 1`
/// the steps without an environment update are ordinary zero-reward TD steps.
#[allow(clippy::too_many_arguments)]
fn actor_critic_episode<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    net: &CoagentNetwork,
    params: &mut Params,
    tables: &mut PolicyTables,
    critic: &mut CriticState,
    step: &StepConfig,
    horizon: usize,
    rng: &mut R,
) -> (f64, bool) {
    let m = net.n_coagents();
    let n = net.n_atomic();
    critic.reset_traces();
    let mut prev: Vec<usize> = (0..m).map(|i| sample_categorical(net.init_dist(i), rng)).collect();
    let mut record = TransitionRecord {
        state: mdp.sample_initial(rng),
        executions: vec![false; m],
        rows: vec![None; m],
        outputs: vec![0; m],
        reward: 0.0,
        next_state: 0,
        next_terminal: false,
        first: true,
    };
    let mut total = 0.0;
    let mut t = 0;
    while !mdp.is_terminal(record.state) {
        if t == horizon * n {
            return (total, true);
        }
        record.first = t == 0;
        net.step_into(tables, record.state, &prev, record.first, rng, &mut record.executions, &mut record.outputs, &mut record.rows);
        let (next, reward) = if t % n == 0 {
            mdp.sample_unchecked(record.state, record.outputs[net.action_coagent()], rng)
        } else {
            (record.state, 0.0)
        };
        record.reward = reward;
        record.next_state = next;
        record.next_terminal = mdp.is_terminal(next);
        total += reward;
        actor_critic_step(net, tables, params, critic, &record, step);
        tables.refresh(net, params);
        prev.copy_from_slice(&record.outputs);
        record.state = next;
        t += 1;
    }
    (total, false)
}

/// Learning curves as CSV rows `trial,episode,return`.
pub fn curves_csv(curves: &[Vec<f64>]) -> String {
    let mut out = String::from("trial,episode,return\n");
    for (trial, c) in curves.iter().enumerate() {
        for (ep, r) in c.iter().enumerate() {
            out.push_str(&format!("{trial},{ep},{r}\n"));
        }
    }
    out
}
