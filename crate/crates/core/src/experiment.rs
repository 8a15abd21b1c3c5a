//! Config-driven experiments: gradient checks against the exact gradient,
//! learning curves, CoMDP and reduction verification suites, and the
//! option-critic gradient identities. Every output is a pure function of the
//! config (including its seed).

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comdp::{build_comdp, comdp_objective_and_gradient, verify_comdp};
use crate::error::{Error, Result};
use crate::fixtures::random_params;
use crate::gradients::{
    cosine_distance, estimate_gradient, exact_gradient_with, finite_difference_gradient, relative_error,
};
use crate::mdp::{build_gridworld, GridworldSpec, MdpBuilder, TabularMdp, DEFAULT_HORIZON};
use crate::network::{CoagentNetwork, NetworkSpec, Params};
use crate::option_critic::{build_option_critic, verify_option_critic, OPTION_POLICY};
use crate::reduction::{
    build_augmented_mdp, exact_network_objective, verify_behavior_equivalence, verify_marginal_equivalence,
    verify_objective_equivalence, SyncNetwork,
};
use crate::report::Report;
use crate::rng::derive_seed;
use crate::sync::{SyncPolicyNetwork, SyncView};
use crate::training::{curves_csv, train_from, Algorithm, Schedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Gradcheck,
    Train,
    ComdpVerify,
    ReduceVerify,
    OptionCritic,
}

/// One explicit transition `P(s, a, next) = prob` with its reward law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub s: usize,
    pub a: usize,
    pub next: usize,
    pub prob: f64,
    /// Distribution over `reward_support`.
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MdpConfig {
    Gridworld(GridworldSpec),
    Tables {
        n_states: usize,
        n_actions: usize,
        discount: f64,
        reward_support: Vec<f64>,
        transitions: Vec<TableEntry>,
        initial: Vec<f64>,
        #[serde(default)]
        terminal: Vec<usize>,
    },
    /// A seeded random MDP with rewards on `{-1, 0, 1}`.
    Random {
        n_states: usize,
        n_actions: usize,
        discount: f64,
        #[serde(default)]
        terminal: bool,
        seed: u64,
    },
}

impl MdpConfig {
    pub fn build(&self) -> Result<TabularMdp> {
        match self {
            MdpConfig::Gridworld(spec) => build_gridworld(spec),
            MdpConfig::Tables { n_states, n_actions, discount, reward_support, transitions, initial, terminal } => {
                let mut b = MdpBuilder::new(*n_states, *n_actions, reward_support.clone(), *discount);
                for e in transitions {
                    b.transition(e.s, e.a, e.next, e.prob, e.rewards.clone());
                }
                for &s in terminal {
                    if s >= *n_states {
                        return Err(Error::Config(format!("mdp.terminal: state {s} out of range")));
                    }
                    b.terminal(s);
                }
                b.initial(initial.clone());
                b.build()
            }
            MdpConfig::Random { n_states, n_actions, discount, terminal, seed } => {
                if *n_states < 2 || *n_actions == 0 {
                    return Err(Error::Config("mdp: random MDPs need ≥ 2 states and ≥ 1 action".into()));
                }
                crate::fixtures::random_mdp(*n_states, *n_actions, *discount, *terminal, *seed)
            }
        }
    }
}

/// Learning-rule settings; the seed comes from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub algorithm: Algorithm,
    pub coagent_step_sizes: Vec<f64>,
    #[serde(default)]
    pub critic_step_size: f64,
    #[serde(default)]
    pub lambda: f64,
    pub episodes: usize,
    #[serde(default = "constant")]
    pub schedule: Schedule,
}

fn constant() -> Schedule {
    Schedule::Constant
}

impl TrainSettings {
    pub fn to_config(&self, seed: u64, horizon: usize) -> TrainConfig {
        TrainConfig {
            algorithm: self.algorithm,
            coagent_step_sizes: self.coagent_step_sizes.clone(),
            critic_step_size: self.critic_step_size,
            lambda: self.lambda,
            episodes: self.episodes,
            schedule: self.schedule,
            seed,
            horizon,
        }
    }
}

fn default_trials() -> usize {
    1
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn default_scale() -> f64 {
    1.0
}

fn default_tolerance() -> f64 {
    1e-10
}

fn default_verify_horizon() -> usize {
    10
}

fn default_fd_step() -> f64 {
    1e-5
}

fn default_window() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub mdp: MdpConfig,
    /// Required for every experiment except `option-critic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    /// Option count for `option-critic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_options: Option<usize>,
    /// Learning rule for `train`, and for the warm-up episodes of `gradcheck`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSettings>,
    /// Episodes run with `train` before a `gradcheck` freezes the parameters.
    #[serde(default)]
    pub warmup_episodes: usize,
    /// Monte Carlo batch sizes (`gradcheck`, and the `option-critic` Monte Carlo check).
    #[serde(default)]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Half-width of the uniform random parameter draws of the verify suites.
    #[serde(default = "default_scale")]
    pub param_scale: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Horizon of the time-indexed marginal checks.
    #[serde(default = "default_verify_horizon")]
    pub verify_horizon: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Episodes averaged at the end of each learning curve in the summary.
    #[serde(default = "default_window")]
    pub final_window: usize,
    /// Output directory; the CLI's `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

/// Parses a JSON config, mapping errors to messages that name the field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    parse_config(&text)
}

/// Bundled configs by name.
pub const BUNDLED: [(&str, &str); 5] = [
    ("gridworld_gradcheck", include_str!("../configs/gridworld_gradcheck.json")),
    ("gridworld_train", include_str!("../configs/gridworld_train.json")),
    ("comdp_verify", include_str!("../configs/comdp_verify.json")),
    ("reduce_verify", include_str!("../configs/reduce_verify.json")),
    ("option_critic", include_str!("../configs/option_critic.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("{name}: {msg}")));
        if self.trials == 0 {
            return field("trials", "must be at least 1");
        }
        if self.horizon == 0 {
            return field("horizon", "must be positive");
        }
        if !(self.tolerance > 0.0) {
            return field("tolerance", "must be positive");
        }
        if !(self.fd_step > 0.0) {
            return field("fd_step", "must be positive");
        }
        if !(self.param_scale >= 0.0 && self.param_scale.is_finite()) {
            return field("param_scale", "must be finite and non-negative");
        }
        if self.batch_sizes.contains(&0) {
            return field("batch_sizes", "entries must be positive");
        }
        match self.experiment {
            ExperimentKind::OptionCritic => {
                if self.n_options.unwrap_or(0) == 0 {
                    return field("n_options", "required (≥ 1) for option-critic");
                }
            }
            _ => {
                if self.network.is_none() {
                    return field("network", "required for this experiment");
                }
            }
        }
        match self.experiment {
            ExperimentKind::Gradcheck => {
                if self.batch_sizes.is_empty() {
                    return field("batch_sizes", "required for gradcheck");
                }
                if self.warmup_episodes > 0 && self.train.is_none() {
                    return field("train", "required when warmup_episodes > 0");
                }
            }
            ExperimentKind::Train => {
                if self.train.is_none() {
                    return field("train", "required for train");
                }
                if self.final_window == 0 {
                    return field("final_window", "must be positive");
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Applies CLI overrides.
    pub fn with_overrides(mut self, trials: Option<usize>, seed: Option<u64>) -> Result<Self> {
        if let Some(t) = trials {
            self.trials = t;
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        self.validate()?;
        Ok(self)
    }

    fn network_for(&self, mdp: &TabularMdp) -> Result<CoagentNetwork> {
        let spec = self.network.clone().ok_or_else(|| Error::Config("network: missing".into()))?;
        let net = CoagentNetwork::new(spec, mdp)?;
        if let Some(t) = &self.train {
            if t.coagent_step_sizes.len() != net.n_coagents() {
                return Err(Error::Config(format!(
                    "train.coagent_step_sizes: {} entries for {} coagents",
                    t.coagent_step_sizes.len(),
                    net.n_coagents()
                )));
            }
        }
        Ok(net)
    }

    fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, trial as u64)
    }
}

/// Files produced by one run and whether every check passed.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// `(file name, contents)` in a fixed order.
    pub files: Vec<(String, String)>,
    pub passed: bool,
    /// Key-value summary lines, also written to `summary.txt`.
    pub summary: String,
}

/// Runs an experiment.
pub fn run(config: &ExperimentConfig) -> Result<Outcome> {
    config.validate()?;
    let mdp = config.mdp.build()?;
    match config.experiment {
        ExperimentKind::Gradcheck => gradcheck(config, &mdp),
        ExperimentKind::Train => train_curves(config, &mdp),
        ExperimentKind::ComdpVerify => comdp_suite(config, &mdp),
        ExperimentKind::ReduceVerify => reduce_suite(config, &mdp),
        ExperimentKind::OptionCritic => option_critic_suite(config, &mdp),
    }
}

/// Writes the outcome's files and a manifest into `dir`.
pub fn write_outcome(dir: &Path, config: &ExperimentConfig, outcome: &Outcome) -> Result<()> {
    let io = |source| Error::Io { path: dir.display().to_string(), source };
    fs::create_dir_all(dir).map_err(io)?;
    for (name, contents) in &outcome.files {
        fs::write(dir.join(name), contents).map_err(io)?;
    }
    fs::write(dir.join("manifest.json"), manifest(config, outcome)?).map_err(io)?;
    Ok(())
}

/// Run manifest: config echo, seed, library version and the output files.
pub fn manifest(config: &ExperimentConfig, outcome: &Outcome) -> Result<String> {
    let files: Vec<&str> = outcome.files.iter().map(|(n, _)| n.as_str()).collect();
    let value = serde_json::json!({
        "library": "coagent",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": config.experiment,
        "seed": config.seed,
        "trials": config.trials,
        "passed": outcome.passed,
        "files": files,
        "config": config,
    });
    serde_json::to_string_pretty(&value).map(|s| s + "\n").map_err(|e| Error::Config(e.to_string()))
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-trial cosine distances between batch estimates and the exact gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckTrial {
    pub exact_norm: f64,
    /// One entry per batch size: per-block distances.
    pub distances: Vec<Vec<f64>>,
    pub degenerate: usize,
    pub truncated: usize,
}

/// Warms up, freezes, and compares the ladder of Monte Carlo estimates with
/// the exact gradient for one trial.
pub fn gradcheck_trial(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    net: &CoagentNetwork,
    trial: usize,
) -> Result<GradcheckTrial> {
    let seed = config.trial_seed(trial);
    let mut params = net.zero_params();
    if config.warmup_episodes > 0 {
        let settings = config.train.as_ref().expect("validated");
        let mut tc = settings.to_config(derive_seed(seed, 0), config.horizon);
        tc.episodes = config.warmup_episodes;
        params = train_from(mdp, net, params, &tc, |_, _| {})?.params;
    }
    let aug = build_augmented_mdp(mdp, net)?;
    let (_, exact) = exact_gradient_with(&aug, net, &params)?;
    let estimates = estimate_gradient(mdp, net, &params, &config.batch_sizes, derive_seed(seed, 1), config.horizon)?;
    let mut distances = Vec::new();
    let mut degenerate = 0;
    for e in &estimates {
        let d = cosine_distance(&e.mean, &exact)?;
        degenerate += d.degenerate.iter().filter(|&&x| x).count();
        distances.push(d.blocks);
    }
    let truncated = estimates.last().map_or(0, |e| e.truncated);
    Ok(GradcheckTrial { exact_norm: exact.norm(), distances, degenerate, truncated })
}

fn gradcheck(config: &ExperimentConfig, mdp: &TabularMdp) -> Result<Outcome> {
    let net = config.network_for(mdp)?;
    let trials: Vec<GradcheckTrial> =
        (0..config.trials).map(|t| gradcheck_trial(config, mdp, &net, t)).collect::<Result<_>>()?;
    let mut ladder = config.batch_sizes.clone();
    ladder.sort_unstable();
    ladder.dedup();
    let mut csv = String::from("trial,batch_size,mean_distance,stderr\n");
    let mut blocks_csv = String::from("trial,batch_size,block,distance\n");
    let mut per_batch: Vec<Vec<f64>> = vec![Vec::new(); ladder.len()];
    let mut decreasing = 0;
    let mut degenerate = 0;
    for (t, trial) in trials.iter().enumerate() {
        degenerate += trial.degenerate;
        for (k, d) in trial.distances.iter().enumerate() {
            let (mean, se) = mean_and_stderr(d);
            csv.push_str(&format!("{t},{},{mean},{se}\n", ladder[k]));
            for (b, x) in d.iter().enumerate() {
                blocks_csv.push_str(&format!("{t},{},{b},{x}\n", ladder[k]));
            }
            per_batch[k].push(mean);
        }
        let first = mean_and_stderr(&trial.distances[0]).0;
        let last = mean_and_stderr(trial.distances.last().unwrap()).0;
        if last < first {
            decreasing += 1;
        }
    }
    let mut summary_csv = String::from("batch_size,mean_distance,stderr\n");
    let mut summary = String::new();
    for (k, xs) in per_batch.iter().enumerate() {
        let (mean, se) = mean_and_stderr(xs);
        summary_csv.push_str(&format!("{},{mean},{se}\n", ladder[k]));
        summary.push_str(&format!("mean_distance_{} {mean}\n", ladder[k]));
    }
    summary.push_str(&format!("trials {}\ntrials_decreasing {decreasing}\ndegenerate_blocks {degenerate}\n", config.trials));
    Ok(Outcome {
        files: vec![
            ("gradcheck.csv".into(), csv),
            ("gradcheck_blocks.csv".into(), blocks_csv),
            ("gradcheck_summary.csv".into(), summary_csv),
            ("summary.txt".into(), summary.clone()),
        ],
        passed: true,
        summary,
    })
}

fn train_curves(config: &ExperimentConfig, mdp: &TabularMdp) -> Result<Outcome> {
    let net = config.network_for(mdp)?;
    let settings = config.train.as_ref().expect("validated");
    let results: Vec<Vec<f64>> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let tc = settings.to_config(config.trial_seed(t), config.horizon);
            Ok(train_from(mdp, &net, net.zero_params(), &tc, |_, _| {})?.returns)
        })
        .collect::<Result<_>>()?;
    let episodes = settings.episodes;
    let mut mean_csv = String::from("episode,mean_return,stderr\n");
    let mut means = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let col: Vec<f64> = results.iter().map(|c| c[ep]).collect();
        let (m, se) = mean_and_stderr(&col);
        means.push(m);
        mean_csv.push_str(&format!("{ep},{m},{se}\n"));
    }
    let w = config.final_window.min(episodes.max(1));
    let final_mean = if episodes == 0 { f64::NAN } else { means[episodes - w..].iter().sum::<f64>() / w as f64 };
    let mut summary = format!("trials {}\nepisodes {episodes}\nfinal_window {w}\nfinal_mean_return {final_mean}\n", config.trials);
    if let MdpConfig::Gridworld(spec) = &config.mdp {
        let opt = spec.optimal_return();
        summary.push_str(&format!("optimal_return {opt}\nfinal_over_optimal {}\n", opt / final_mean));
    }
    Ok(Outcome {
        files: vec![
            ("curves.csv".into(), curves_csv(&results)),
            ("mean_curve.csv".into(), mean_csv),
            ("summary.txt".into(), summary.clone()),
        ],
        passed: true,
        summary,
    })
}

fn comdp_checks<N: SyncPolicyNetwork + ?Sized>(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    sync: &N,
    nodes: &[usize],
    params: &Params,
    exact: &[f64],
    j: f64,
    prefix: &str,
    report: &mut Report,
) -> Result<()> {
    let mut offset = 0;
    for (k, &node) in nodes.iter().enumerate() {
        let c = build_comdp(mdp, sync, node)?;
        let checks = verify_comdp(mdp, sync, &c, config.verify_horizon, config.tolerance)?;
        report.extend(&format!("{prefix}coagent{k}."), checks);
        let block = params.block(k);
        let (ji, gi) = comdp_objective_and_gradient(&c, block)?;
        report.push(&format!("{prefix}coagent{k}.objective"), (ji - j).abs(), config.tolerance);
        let dev = gi.iter().zip(&exact[offset..]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        report.push(&format!("{prefix}coagent{k}.local_gradient"), dev, config.tolerance);
        offset += block.len();
    }
    Ok(())
}

fn report_outcome(name: &str, report: Report) -> Outcome {
    let text = report.to_string();
    let failed = report.checks.iter().filter(|c| !c.pass).count();
    let summary = format!("checks {}\nfailed {failed}\n", report.checks.len());
    Outcome {
        files: vec![(format!("{name}.txt"), text), ("summary.txt".into(), summary.clone())],
        passed: report.all_pass(),
        summary,
    }
}

fn comdp_suite(config: &ExperimentConfig, mdp: &TabularMdp) -> Result<Outcome> {
    let net = config.network_for(mdp)?;
    let mut report = Report::default();
    let aug = if net.is_synchronous() { None } else { Some(build_augmented_mdp(mdp, &net)?) };
    for t in 0..config.trials {
        let params = random_params(&net, config.param_scale, config.trial_seed(t));
        let prefix = format!("trial{t}.");
        match &aug {
            None => {
                let view = SyncView::new(&net, &params)?;
                let (j, g) = crate::gradients::sum_form_gradient(mdp, &view, &net.block_lengths())?;
                let nodes: Vec<usize> = (0..net.n_coagents()).collect();
                comdp_checks(config, mdp, &view, &nodes, &params, g.as_slice(), j, &prefix, &mut report)?;
            }
            Some(aug) => {
                let sync = SyncNetwork::new(&net, aug, &params)?;
                let (j, g) = exact_gradient_with(aug, &net, &params)?;
                let nodes: Vec<usize> = (0..net.n_coagents()).map(|i| 2 * i + 1).collect();
                comdp_checks(config, aug.mdp(), &sync, &nodes, &params, g.as_slice(), j, &prefix, &mut report)?;
            }
        }
    }
    Ok(report_outcome("comdp_report", report))
}

fn reduce_suite(config: &ExperimentConfig, mdp: &TabularMdp) -> Result<Outcome> {
    let net = config.network_for(mdp)?;
    let aug = build_augmented_mdp(mdp, &net)?;
    let mut report = Report::default();
    let tol = config.tolerance;
    for t in 0..config.trials {
        let params = random_params(&net, config.param_scale, config.trial_seed(t));
        let sync = SyncNetwork::new(&net, &aug, &params)?;
        let p = format!("trial{t}.");
        report.push(&format!("{p}behavior"), verify_behavior_equivalence(&net, &sync, &params)?, tol);
        report.push(&format!("{p}objective"), verify_objective_equivalence(mdp, &net, &sync, &params)?.deviation, tol);
        let (ds, dr) = verify_marginal_equivalence(mdp, &net, &sync, &params, config.verify_horizon)?;
        report.push(&format!("{p}state_marginal"), ds, tol);
        report.push(&format!("{p}reward_marginal"), dr, tol);
        let (_, g) = exact_gradient_with(&aug, &net, &params)?;
        let fd = finite_difference_gradient(|q| exact_network_objective(mdp, &net, q), &params, config.fd_step)?;
        report.push(&format!("{p}gradient_vs_finite_difference"), relative_error(&g, &fd, 1e-12), 1e-6);
    }
    Ok(report_outcome("reduce_report", report))
}

fn option_critic_suite(config: &ExperimentConfig, mdp: &TabularMdp) -> Result<Outcome> {
    let oc = build_option_critic(mdp, config.n_options.expect("validated"))?;
    let mut report = Report::default();
    let mut mc = String::from("trial,episodes,coordinate,estimate,exact,stderr,z\n");
    for t in 0..config.trials {
        let params = random_params(&oc.net, config.param_scale, config.trial_seed(t));
        report.extend(&format!("trial{t}."), verify_option_critic(mdp, &oc, &params, config.tolerance)?);
        if config.batch_sizes.is_empty() {
            continue;
        }
        let aug = build_augmented_mdp(mdp, &oc.net)?;
        let (_, exact) = exact_gradient_with(&aug, &oc.net, &params)?;
        let ests = estimate_gradient(mdp, &oc.net, &params, &config.batch_sizes, derive_seed(config.trial_seed(t), 1), config.horizon)?;
        for e in &ests {
            let se = e.std_error();
            let off = e.mean.block_offset(OPTION_POLICY);
            let mut worst: f64 = 0.0;
            for (k, (&m, &x)) in e.mean.block(OPTION_POLICY).iter().zip(exact.block(OPTION_POLICY)).enumerate() {
                let s = se[off + k];
                let z = if s > 0.0 { (m - x) / s } else if m == x { 0.0 } else { f64::INFINITY };
                worst = worst.max(z.abs());
                mc.push_str(&format!("{t},{},{k},{m},{x},{s},{z}\n", e.episodes));
            }
            report.push(&format!("trial{t}.option_policy_mc_{}_max_abs_z", e.episodes), worst, 3.0);
        }
    }
    let mut out = report_outcome("option_critic_report", report);
    if !config.batch_sizes.is_empty() {
        out.files.insert(1, ("option_policy_mc.csv".into(), mc));
    }
    Ok(out)
}
