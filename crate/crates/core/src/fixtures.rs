//! Bundled (MDP, network) pairs used by the checks, the experiments and the
//! tests.

use rand::Rng;

use crate::mdp::{build_gridworld, GridworldSpec, MdpBuilder, TabularMdp};
use crate::network::{CoagentNetwork, CoagentSpec, ExecutionFn, NetworkSpec, Params};
use crate::rng::seeded;
use crate::Result;

/// A named test problem.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub mdp: TabularMdp,
    pub net: CoagentNetwork,
}

/// The two-hidden-coagent network on the 3×3 gridworld: coagents 0 and 1 see
/// the state and emit one bit each, coagent 2 sees only those bits and picks
/// the action. Every coagent executes independently with probability `p`.
pub fn gridworld_network(exec_prob: f64) -> Result<Fixture> {
    let mdp = build_gridworld(&GridworldSpec::default())?;
    let exec = if exec_prob == 1.0 { ExecutionFn::Always } else { ExecutionFn::Bernoulli { p: exec_prob } };
    let spec = NetworkSpec {
        coagents: vec![
            CoagentSpec::new(0, 2).with_state().execution(exec.clone()),
            CoagentSpec::new(1, 2).with_state().execution(exec.clone()),
            CoagentSpec::new(2, 4).feedforward(&[0, 1]).execution(exec),
        ],
        action_coagent: 2,
        n_atomic: 1,
    };
    let net = CoagentNetwork::new(spec, &mdp)?;
    Ok(Fixture { name: "gridworld", mdp, net })
}

/// Same as [`gridworld_network`] but keeping the Bernoulli execution even at
/// `p = 1`, so the asynchronous code paths are exercised.
pub fn gridworld_network_async(exec_prob: f64) -> Result<Fixture> {
    let mut f = gridworld_network(0.5)?;
    let mut spec = f.net.spec();
    for c in &mut spec.coagents {
        c.execution = ExecutionFn::Bernoulli { p: exec_prob };
    }
    f.net = CoagentNetwork::new(spec, &f.mdp)?;
    Ok(f)
}

/// A small random MDP with stochastic transitions and rewards on
/// `{-1, 0, 1}`; with `terminal` the last state is absorbing.
pub fn random_mdp(n_states: usize, n_actions: usize, discount: f64, terminal: bool, seed: u64) -> Result<TabularMdp> {
    let mut rng = seeded(seed);
    let mut b = MdpBuilder::new(n_states, n_actions, vec![-1.0, 0.0, 1.0], discount);
    let live = if terminal { n_states - 1 } else { n_states };
    for s in 0..live {
        for a in 0..n_actions {
            let mut w: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>().powi(2)).collect();
            if terminal {
                // guarantee progress towards termination
                w[n_states - 1] += 0.2;
            }
            let total: f64 = w.iter().sum();
            for (s2, wi) in w.iter().enumerate() {
                let mut r = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                let rs: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= rs);
                b.transition(s, a, s2, wi / total, r.to_vec());
            }
        }
    }
    if terminal {
        b.terminal(n_states - 1);
    }
    let mut init = vec![0.0; n_states];
    for x in init.iter_mut().take(live) {
        *x = 1.0 / live as f64;
    }
    b.initial(init);
    b.build()
}

/// Synchronous acyclic networks with at most three coagents on MDPs with at
/// most ten states.
pub fn synchronous_fixtures() -> Result<Vec<Fixture>> {
    let grid = build_gridworld(&GridworldSpec::default())?;
    let mut out = Vec::new();

    let single = NetworkSpec { coagents: vec![CoagentSpec::new(0, 4).with_state()], action_coagent: 0, n_atomic: 1 };
    out.push(Fixture { name: "single", net: CoagentNetwork::new(single, &grid)?, mdp: grid.clone() });

    let chain = NetworkSpec {
        coagents: vec![CoagentSpec::new(0, 2).with_state(), CoagentSpec::new(1, 4).with_state().feedforward(&[0])],
        action_coagent: 1,
        n_atomic: 1,
    };
    out.push(Fixture { name: "chain", net: CoagentNetwork::new(chain, &grid)?, mdp: grid.clone() });

    out.push(Fixture { name: "gridworld_sync", ..gridworld_network(1.0)? });

    let small = random_mdp(5, 2, 0.9, false, 17)?;
    let diamond = NetworkSpec {
        coagents: vec![
            CoagentSpec::new(0, 2).with_state(),
            CoagentSpec::new(1, 3).feedforward(&[0]),
            CoagentSpec::new(2, 2).with_state().feedforward(&[0, 1]),
        ],
        action_coagent: 2,
        n_atomic: 1,
    };
    out.push(Fixture { name: "diamond", net: CoagentNetwork::new(diamond, &small)?, mdp: small });

    let episodic = random_mdp(6, 3, 1.0, true, 23)?;
    // the action coagent reads a stateless coin
    let coin = NetworkSpec {
        coagents: vec![CoagentSpec::new(0, 2), CoagentSpec::new(1, 3).with_state().feedforward(&[0])],
        action_coagent: 1,
        n_atomic: 1,
    };
    out.push(Fixture { name: "coin", net: CoagentNetwork::new(coin, &episodic)?, mdp: episodic });
    Ok(out)
}

/// Asynchronous / recurrent fixtures reducible to the augmented MDP.
pub fn asynchronous_fixtures() -> Result<Vec<Fixture>> {
    let mut out = vec![
        Fixture { name: "gridworld_0.5", ..gridworld_network(0.5)? },
        Fixture { name: "gridworld_0.25", ..gridworld_network(0.25)? },
        Fixture { name: "gridworld_bernoulli_1", ..gridworld_network_async(1.0)? },
    ];
    let small = random_mdp(4, 2, 0.9, false, 5)?;
    // a recurrent memory bit feeding the action coagent
    let memory = NetworkSpec {
        coagents: vec![
            CoagentSpec::new(0, 2).with_state().recurrent(&[1]).execution(ExecutionFn::Bernoulli { p: 0.6 }),
            CoagentSpec::new(1, 2).with_state().feedforward(&[0]),
        ],
        action_coagent: 1,
        n_atomic: 1,
    };
    out.push(Fixture { name: "memory", net: CoagentNetwork::new(memory, &small)?, mdp: small });
    Ok(out)
}

/// Parameters drawn uniformly from `[-scale, scale]`.
pub fn random_params(net: &CoagentNetwork, scale: f64, seed: u64) -> Params {
    let mut rng = seeded(seed);
    let mut p = net.zero_params();
    p.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-scale..=scale));
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let sync = synchronous_fixtures().unwrap();
        assert_eq!(sync.len(), 5);
        for f in &sync {
            assert!(f.net.is_synchronous(), "{}", f.name);
            assert!(f.net.n_coagents() <= 3 && f.mdp.n_states() <= 10, "{}", f.name);
        }
        for f in asynchronous_fixtures().unwrap() {
            assert!(!f.net.is_synchronous(), "{}", f.name);
        }
        assert_eq!(gridworld_network(0.5).unwrap().net.n_params(), 52);
    }
}
