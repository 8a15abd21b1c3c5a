//! Option-critic as a three-coagent network, with the option-specific value
//! tables and the specialised forms of its policy gradient.
//!
//! Coagents:
//! - `TERMINATION` (β̂): reads `s_t` and, recurrently, the previous option;
//!   emits `e_t ∈ {0, 1}` where `e_t = 1` means "terminate and pick a new
//!   option". It always executes and is forced to `e_0 = 1`, so an option is
//!   chosen at the first step.
//! - `OPTION_POLICY` (π_Ω): reads `s_t` and `e_t`; executes only when `e_t = 1`.
//! - `INTRA_OPTION` (π_ω): reads `s_t` and the current option; emits the action.
//!
//! In the usual notation `β(x, 0)` is the termination probability and
//! `β(x, 1)` the continuation probability, so `β(x, u) = β̂(x, e = 1 − u)`.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gradients::{exact_gradient_with, mc_local_gradient};
use crate::mdp::TabularMdp;
use crate::network::{AtomicTrajectory, CoagentNetwork, CoagentSpec, ExecutionFn, NetworkSpec, Params, PolicyTables};
use crate::reduction::{build_augmented_mdp, AugmentedMdp, SyncNetwork};
use crate::report::Report;
use crate::sync::{for_each_joint, joint_policy, Clamp, SyncPolicyNetwork};

pub const TERMINATION: usize = 0;
pub const OPTION_POLICY: usize = 1;
pub const INTRA_OPTION: usize = 2;

// node ids of the policy nodes in the paired synchronous network
const E_NODE: usize = 2 * TERMINATION + 1;
const OMEGA_NODE: usize = 2 * OPTION_POLICY + 1;

/// An option-critic network and its option count.
#[derive(Debug, Clone)]
pub struct OptionCritic {
    pub net: CoagentNetwork,
    pub n_options: usize,
}

/// Builds the option-critic network for `mdp` with `n_options` options.
pub fn build_option_critic(mdp: &TabularMdp, n_options: usize) -> Result<OptionCritic> {
    if n_options == 0 {
        return Err(Error::InvalidNetwork("need at least one option".into()));
    }
    let spec = NetworkSpec {
        coagents: vec![
            CoagentSpec::new(TERMINATION, 2).with_state().recurrent(&[OPTION_POLICY]).forced_initial(1),
            CoagentSpec::new(OPTION_POLICY, n_options)
                .with_state()
                .feedforward(&[TERMINATION])
                .execution(ExecutionFn::Gated { source: TERMINATION }),
            CoagentSpec::new(INTRA_OPTION, mdp.n_actions()).with_state().feedforward(&[OPTION_POLICY]),
        ],
        action_coagent: INTRA_OPTION,
        n_atomic: 1,
    };
    Ok(OptionCritic { net: CoagentNetwork::new(spec, mdp)?, n_options })
}

/// Exact option-level quantities. Pairs `(s, ω)` are indexed `s * n_options + ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionValueTables {
    pub n_states: usize,
    pub n_options: usize,
    pub n_actions: usize,
    pub objective: f64,
    /// `Σ_t γ^t Pr(s_t, ω_t)` for the option in force at `t`.
    pub d_omega: Vec<f64>,
    /// `Σ_{t≥1} γ^t Pr(s_t, ω_{t−1})`: where termination decisions are made.
    pub d_beta: Vec<f64>,
    /// `Σ_t γ^t Pr(s_t, e_t = 1)`: where options are selected (including `t = 0`).
    pub d_select: Vec<f64>,
    /// `Q_U((s, ω), a)`, indexed `(s * n_options + ω) * n_actions + a`.
    pub q_u: Vec<f64>,
    pub q_omega: Vec<f64>,
    pub v_omega: Vec<f64>,
    pub a_omega: Vec<f64>,
    /// `Q_β((s, ω_prev), u)` with `u = 0` terminate, `u = 1` continue.
    pub q_beta: Vec<[f64; 2]>,
}

impl OptionValueTables {
    fn pair(&self, s: usize, w: usize) -> usize {
        s * self.n_options + w
    }
}

fn joint_index(oc: &OptionCritic, e: usize, w: usize, a: usize) -> usize {
    oc.net.encode_outputs(&[e, w, a])
}

/// Computes every table by linear solves on the augmented MDP.
pub fn exact_option_tables(mdp: &TabularMdp, oc: &OptionCritic, params: &Params) -> Result<OptionValueTables> {
    let aug = build_augmented_mdp(mdp, &oc.net)?;
    exact_option_tables_with(mdp, &aug, oc, params)
}

pub fn exact_option_tables_with(
    mdp: &TabularMdp,
    aug: &AugmentedMdp,
    oc: &OptionCritic,
    params: &Params,
) -> Result<OptionValueTables> {
    let net = &oc.net;
    let sync = SyncNetwork::new(net, aug, params)?;
    let am = aug.mdp();
    let chain = am.chain(&joint_policy(&sync, am))?;
    let v = chain.values()?;
    let d = chain.occupancy(am.initial_dist())?;
    let objective = am.initial_dist().iter().zip(&v).map(|(p, v)| p * v).sum();
    let (n, no, na) = (mdp.n_states(), oc.n_options, mdp.n_actions());
    let gamma = mdp.discount();
    let q_aug = |x: usize, act: usize| -> f64 { am.outcomes(x, act).map(|o| o.prob * (o.mean_reward + gamma * v[o.next])).sum() };

    let mut t = OptionValueTables {
        n_states: n,
        n_options: no,
        n_actions: na,
        objective,
        d_omega: vec![0.0; n * no],
        d_beta: vec![0.0; n * no],
        d_select: vec![0.0; n],
        q_u: vec![0.0; n * no * na],
        q_omega: vec![0.0; n * no],
        v_omega: vec![0.0; n],
        a_omega: vec![0.0; n * no],
        q_beta: vec![[0.0; 2]; n * no],
    };
    let free = vec![Clamp::Free; sync.n_nodes()];
    let mut prev = vec![0; 3];
    for x in 0..am.n_states() {
        if d[x] == 0.0 || am.is_terminal(x) {
            continue;
        }
        let (start, s, uj) = aug.decode_state(x);
        net.decode_outputs(uj, &mut prev);
        if !start {
            t.d_beta[s * no + prev[OPTION_POLICY]] += d[x];
        }
        for_each_joint(&sync, x, &free, |outs, p| {
            t.d_omega[s * no + outs[OMEGA_NODE]] += d[x] * p;
            if outs[E_NODE] == 1 {
                t.d_select[s] += d[x] * p;
            }
        });
    }

    // the future depends on the current option only, so any (e, a) stand-in works
    let tables = PolicyTables::new(net, params);
    for s in 0..n {
        for w in 0..no {
            let pair = s * no + w;
            for a in 0..na {
                t.q_u[pair * na + a] = mdp
                    .outcomes(s, a)
                    .map(|o| o.prob * (o.mean_reward + gamma * v[aug.state_index(false, o.next, joint_index(oc, 0, w, 0))]))
                    .sum();
            }
            let row = net.row_with(INTRA_OPTION, s, |_| w, |_| 0);
            let pi = tables.probs(INTRA_OPTION, row);
            t.q_omega[pair] = (0..na).map(|a| pi[a] * t.q_u[pair * na + a]).sum();
        }
        let row = net.row_with(OPTION_POLICY, s, |_| 1, |_| 0);
        let pi = tables.probs(OPTION_POLICY, row);
        t.v_omega[s] = (0..no).map(|w| pi[w] * t.q_omega[s * no + w]).sum();
        for w in 0..no {
            t.a_omega[s * no + w] = t.q_omega[s * no + w] - t.v_omega[s];
        }
    }

    // Q_β from the augmented action values, conditioning on β̂'s output
    let mut clamps = free.clone();
    for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
        for w in 0..no {
            let x = aug.state_index(false, s, joint_index(oc, 0, w, 0));
            for e in 0..2 {
                clamps[E_NODE] = Clamp::Force(e);
                let mut q = 0.0;
                for_each_joint(&sync, x, &clamps, |outs, p| q += p * q_aug(x, sync.action(outs)));
                t.q_beta[s * no + w][1 - e] = q;
            }
        }
    }
    Ok(t)
}

/// `Σ_x d_Ω(x) Σ_a ∂π_ω(x, a)/∂θ Q_U(x, a)`.
pub fn intra_option_gradient(tables: &OptionValueTables, oc: &OptionCritic, params: &Params) -> Vec<f64> {
    let net = &oc.net;
    let pt = PolicyTables::new(net, params);
    let na = tables.n_actions;
    let mut grad = vec![0.0; params.block(INTRA_OPTION).len()];
    for s in 0..tables.n_states {
        for w in 0..tables.n_options {
            let pair = tables.pair(s, w);
            let Some(row) = net.row_with(INTRA_OPTION, s, |_| w, |_| 0) else { continue };
            let pi = pt.probs(INTRA_OPTION, Some(row));
            let q = &tables.q_u[pair * na..(pair + 1) * na];
            let baseline: f64 = pi.iter().zip(q).map(|(p, q)| p * q).sum();
            for a in 0..na {
                grad[row * na + a] += tables.d_omega[pair] * pi[a] * (q[a] - baseline);
            }
        }
    }
    grad
}

/// Which expression of the termination gradient to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationForm {
    /// `Σ_x d(x) Σ_u ∂β(x, u)/∂ϑ Q_β(x, u)`.
    QBeta,
    /// `−Σ_x d(x) ∂β(x, 0)/∂ϑ A_Ω(x.s, x.ω)`.
    Advantage,
}

impl FromStr for TerminationForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qbeta" => Ok(Self::QBeta),
            "advantage" => Ok(Self::Advantage),
            other => Err(Error::Config(format!("unknown termination gradient form `{other}`"))),
        }
    }
}

/// `∂J/∂ϑ` in the requested form, weighted by where termination is decided
/// (`d_beta`: the state and the option in force when it arrived).
pub fn termination_gradient(
    tables: &OptionValueTables,
    oc: &OptionCritic,
    params: &Params,
    form: TerminationForm,
) -> Vec<f64> {
    let net = &oc.net;
    let pt = PolicyTables::new(net, params);
    let mut grad = vec![0.0; params.block(TERMINATION).len()];
    for s in 0..tables.n_states {
        for w in 0..tables.n_options {
            let pair = tables.pair(s, w);
            let Some(row) = net.row_with(TERMINATION, s, |_| 0, |_| w) else { continue };
            let b = pt.probs(TERMINATION, Some(row));
            let dx = tables.d_beta[pair];
            for k in 0..2 {
                // ∂β̂(e)/∂ϑ_k = β̂(e)(δ_ek − β̂(k))
                let db = |e: usize| b[e] * (f64::from(u8::from(e == k)) - b[k]);
                grad[row * 2 + k] += match form {
                    TerminationForm::QBeta => dx * (db(1) * tables.q_beta[pair][0] + db(0) * tables.q_beta[pair][1]),
                    TerminationForm::Advantage => -dx * db(1) * tables.a_omega[pair],
                };
            }
        }
    }
    grad
}

/// Exact `∂J/∂μ = Σ_s d_select(s) Σ_ω ∂π_Ω(s, ω)/∂μ Q_Ω(s, ω)`.
pub fn exact_option_policy_gradient(tables: &OptionValueTables, oc: &OptionCritic, params: &Params) -> Vec<f64> {
    let net = &oc.net;
    let pt = PolicyTables::new(net, params);
    let no = tables.n_options;
    let mut grad = vec![0.0; params.block(OPTION_POLICY).len()];
    for s in 0..tables.n_states {
        let Some(row) = net.row_with(OPTION_POLICY, s, |_| 1, |_| 0) else { continue };
        let pi = pt.probs(OPTION_POLICY, Some(row));
        let q = &tables.q_omega[s * no..(s + 1) * no];
        let baseline: f64 = pi.iter().zip(q).map(|(p, q)| p * q).sum();
        for w in 0..no {
            grad[row * no + w] += tables.d_select[s] * pi[w] * (q[w] - baseline);
        }
    }
    grad
}

/// Monte Carlo `∂J/∂μ` from on-policy trajectories: the coagent estimator of
/// the option policy, counting only steps where it executed.
pub fn option_policy_gradient(trajectories: &[AtomicTrajectory], oc: &OptionCritic, params: &Params) -> Result<Vec<f64>> {
    mc_local_gradient(trajectories, &oc.net, params, OPTION_POLICY)
}

/// Compares the specialised option-critic gradients with the generic exact
/// gradient, the two termination forms with each other, and the `Q_β`
/// tables with their closed forms.
pub fn verify_option_critic(mdp: &TabularMdp, oc: &OptionCritic, params: &Params, tol: f64) -> Result<Report> {
    let aug = build_augmented_mdp(mdp, &oc.net)?;
    let tables = exact_option_tables_with(mdp, &aug, oc, params)?;
    let (_, generic) = exact_gradient_with(&aug, &oc.net, params)?;
    let max_dev = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let qbeta = termination_gradient(&tables, oc, params, TerminationForm::QBeta);
    let adv = termination_gradient(&tables, oc, params, TerminationForm::Advantage);
    let mut report = Report::default();
    report.push("intra_option_vs_generic", max_dev(&intra_option_gradient(&tables, oc, params), generic.block(INTRA_OPTION)), tol);
    report.push("termination_qbeta_vs_generic", max_dev(&qbeta, generic.block(TERMINATION)), tol);
    report.push("termination_advantage_vs_generic", max_dev(&adv, generic.block(TERMINATION)), tol);
    report.push("termination_forms", max_dev(&qbeta, &adv), tol);
    report.push(
        "option_policy_vs_generic",
        max_dev(&exact_option_policy_gradient(&tables, oc, params), generic.block(OPTION_POLICY)),
        tol,
    );
    let (mut dev_c, mut dev_t): (f64, f64) = (0.0, 0.0);
    for s in (0..tables.n_states).filter(|&s| !mdp.is_terminal(s)) {
        for w in 0..tables.n_options {
            let pair = tables.pair(s, w);
            dev_t = dev_t.max((tables.q_beta[pair][0] - tables.v_omega[s]).abs());
            dev_c = dev_c.max((tables.q_beta[pair][1] - tables.q_omega[pair]).abs());
        }
    }
    report.push("q_beta_terminate_is_v_omega", dev_t, tol);
    report.push("q_beta_continue_is_q_omega", dev_c, tol);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_mdp, random_params};
    use crate::gradients::{exact_gradient, finite_difference_gradient, relative_error};
    use crate::mdp::{build_gridworld, GridworldSpec};
    use crate::network::run_episode;
    use crate::reduction::exact_network_objective;
    use crate::rng::seeded;

    fn grid() -> TabularMdp {
        build_gridworld(&GridworldSpec::default()).unwrap()
    }

    #[test]
    fn layout_and_order() {
        let oc = build_option_critic(&grid(), 2).unwrap();
        assert_eq!(oc.net.order(), &[0, 1, 2]);
        assert_eq!(oc.net.block_lengths(), vec![18 * 2, 18 * 2, 18 * 4]);
        assert!(build_option_critic(&grid(), 0).is_err());
        assert_eq!(oc.net.zero_params().max_abs(), 0.0);
    }

    #[test]
    fn specialised_gradients_match_generic_gradient() {
        let mdp = grid();
        let oc = build_option_critic(&mdp, 2).unwrap();
        for seed in 0..20 {
            let params = random_params(&oc.net, 1.5, seed);
            let report = verify_option_critic(&mdp, &oc, &params, 1e-10).unwrap();
            assert!(report.all_pass(), "seed {seed}\n{report}");
        }
    }

    #[test]
    fn generic_gradient_matches_finite_differences() {
        let mdp = grid();
        let oc = build_option_critic(&mdp, 2).unwrap();
        let params = random_params(&oc.net, 1.0, 3);
        let g = exact_gradient(&mdp, &oc.net, &params).unwrap();
        let fd = finite_difference_gradient(|p| exact_network_objective(&mdp, &oc.net, p), &params, 1e-5).unwrap();
        assert!(relative_error(&g, &fd, 1e-12) < 1e-6);
    }

    #[test]
    fn single_option_is_a_flat_policy() {
        let mdp = grid();
        let oc = build_option_critic(&mdp, 1).unwrap();
        let params = random_params(&oc.net, 1.0, 4);
        let tables = exact_option_tables(&mdp, &oc, &params).unwrap();
        assert!(tables.a_omega.iter().all(|a| a.abs() < 1e-12));
        let adv = termination_gradient(&tables, &oc, &params, TerminationForm::Advantage);
        assert!(adv.iter().all(|g| g.abs() < 1e-12));
        // same objective as the intra-option policy alone
        let flat = crate::mdp::PolicyTable::from_rows(
            (0..mdp.n_states())
                .map(|s| {
                    let row = oc.net.row_with(INTRA_OPTION, s, |_| 0, |_| 0);
                    PolicyTables::new(&oc.net, &params).probs(INTRA_OPTION, row).to_vec()
                })
                .collect(),
        )
        .unwrap();
        let j = crate::mdp::exact_objective(&mdp, &flat).unwrap();
        assert!((j - tables.objective).abs() < 1e-10);
    }

    #[test]
    fn never_terminating_beta_has_flat_termination_gradient() {
        let mdp = grid();
        let oc = build_option_critic(&mdp, 2).unwrap();
        let mut params = random_params(&oc.net, 1.0, 5);
        for r in params.block_mut(TERMINATION).chunks_mut(2) {
            r[0] = 30.0;
            r[1] = -30.0;
        }
        let tables = exact_option_tables(&mdp, &oc, &params).unwrap();
        let g = termination_gradient(&tables, &oc, &params, TerminationForm::QBeta);
        assert!(g.iter().all(|x| x.abs() < 1e-8), "{g:?}");
    }

    #[test]
    fn tables_are_consistent() {
        let mdp = random_mdp(4, 2, 0.9, false, 3).unwrap();
        let oc = build_option_critic(&mdp, 3).unwrap();
        let params = random_params(&oc.net, 1.0, 6);
        let t = exact_option_tables(&mdp, &oc, &params).unwrap();
        let mass: f64 = t.d_omega.iter().sum();
        assert!((mass - 10.0).abs() < 1e-9, "{mass}");
        let beta_mass: f64 = t.d_beta.iter().sum();
        assert!((beta_mass - 9.0).abs() < 1e-9, "{beta_mass}");
        let j: f64 = (0..4).map(|s| mdp.initial_dist()[s] * t.v_omega[s]).sum();
        assert!((j - t.objective).abs() < 1e-10);
        assert!("bogus".parse::<TerminationForm>().is_err());
    }

    #[test]
    fn forced_first_selection_and_delegation() {
        let mdp = grid();
        let oc = build_option_critic(&mdp, 2).unwrap();
        let params = random_params(&oc.net, 1.0, 7);
        let mut rng = seeded(1);
        let trajs: Vec<_> = (0..20).map(|_| run_episode(&mdp, &oc.net, &params, 1000, &mut rng).unwrap()).collect();
        for t in &trajs {
            assert_eq!(t.outputs(0)[TERMINATION], 1);
            assert!(t.executions(0)[OPTION_POLICY]);
        }
        let a = option_policy_gradient(&trajs, &oc, &params).unwrap();
        let b = mc_local_gradient(&trajs, &oc.net, &params, OPTION_POLICY).unwrap();
        assert_eq!(a, b);
    }
}
