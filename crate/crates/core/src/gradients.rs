//! Gradient machinery: Monte Carlo local-gradient estimators, exact
//! gradients through the reduction, central finite differences and cosine
//! distances.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdp::{TabularMdp, DEFAULT_HORIZON};
use crate::network::{
    run_episode_into, AtomicTrajectory, BlockVector, CoagentNetwork, EpisodeScratch, GradientVector, Params,
    PolicyTables,
};
use crate::reduction::{build_augmented_mdp, AugmentedMdp, SyncNetwork};
use crate::rng::{derive_seed, seeded};
use crate::sync::{for_each_joint, joint_policy, Clamp, SyncPolicyNetwork};

/// Episodes per deterministic work unit of the batch estimators.
pub const CHUNK: usize = 1000;

/// Adds one trajectory's `Σ_t E^i_t γ^t G_t ∂ln π_i/∂θ_i` for every coagent
/// into `out` (laid out like the parameters). The forced initial output of a
/// coagent is not sampled and contributes nothing.
pub fn accumulate_trajectory_gradient(
    traj: &AtomicTrajectory,
    net: &CoagentNetwork,
    tables: &PolicyTables,
    offsets: &[usize],
    returns: &mut Vec<f64>,
    out: &mut [f64],
) {
    let len = traj.len();
    returns.clear();
    returns.resize(len, 0.0);
    let gamma = traj.atomic_discount;
    let mut g = 0.0;
    for t in (0..len).rev() {
        g = traj.reward(t) + gamma * g;
        returns[t] = g;
    }
    let mut discount = 1.0;
    for t in 0..len {
        let w = discount * returns[t];
        discount *= gamma;
        if w == 0.0 {
            continue;
        }
        let exec = traj.executions(t);
        let outs = traj.outputs(t);
        let rows = traj.rows(t);
        for i in 0..net.n_coagents() {
            if !exec[i] || (t == 0 && net.coagent(i).forced_initial_output.is_some()) {
                continue;
            }
            let row = rows[i].expect("coagents never act in terminal states");
            let k = net.arity(i);
            let probs = tables.probs(i, Some(row));
            let base = offsets[i] + row * k;
            for (u, p) in probs.iter().enumerate() {
                out[base + u] -= w * p;
            }
            out[base + outs[i]] += w;
        }
    }
}

fn block_offsets(net: &CoagentNetwork) -> Vec<usize> {
    let mut offsets = vec![0];
    for len in net.block_lengths() {
        offsets.push(offsets.last().unwrap() + len);
    }
    offsets
}

/// Mean of the per-trajectory global estimates over a batch of on-policy
/// trajectories.
pub fn mc_global_gradient(
    trajectories: &[AtomicTrajectory],
    net: &CoagentNetwork,
    params: &Params,
) -> Result<GradientVector> {
    net.check_params(params)?;
    let expected = params.fingerprint();
    if let Some(t) = trajectories.iter().find(|t| t.fingerprint != expected) {
        return Err(Error::OffPolicy { expected, found: t.fingerprint });
    }
    let tables = PolicyTables::new(net, params);
    let offsets = block_offsets(net);
    let mut grad = net.zero_params();
    let mut returns = Vec::new();
    for t in trajectories {
        accumulate_trajectory_gradient(t, net, &tables, &offsets, &mut returns, grad.as_mut_slice());
    }
    if !trajectories.is_empty() {
        grad.scale(1.0 / trajectories.len() as f64);
    }
    Ok(grad)
}

/// Block `i` of [`mc_global_gradient`].
pub fn mc_local_gradient(
    trajectories: &[AtomicTrajectory],
    net: &CoagentNetwork,
    params: &Params,
    i: usize,
) -> Result<Vec<f64>> {
    if i >= net.n_coagents() {
        return Err(Error::Index(format!("coagent {i}")));
    }
    Ok(mc_global_gradient(trajectories, net, params)?.block(i).to_vec())
}

/// Batch Monte Carlo estimate with per-coordinate sample variances.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub episodes: usize,
    pub mean: GradientVector,
    /// Unbiased sample variance of the per-episode estimates.
    pub variance: Vec<f64>,
    pub truncated: usize,
}

impl GradientEstimate {
    /// Standard error of the mean, per coordinate.
    pub fn std_error(&self) -> Vec<f64> {
        self.variance.iter().map(|v| (v / self.episodes as f64).sqrt()).collect()
    }
}

struct ChunkSums {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    truncated: usize,
}

/// Streams `max(checkpoints)` episodes sampled under `params` (episode `e`
/// uses seed `derive_seed(seed, e)`) and returns the running estimate at each
/// checkpoint. Work is split into fixed chunks summed in order, so the
/// result is independent of the number of worker threads.
pub fn estimate_gradient(
    mdp: &TabularMdp,
    net: &CoagentNetwork,
    params: &Params,
    checkpoints: &[usize],
    seed: u64,
    horizon: usize,
) -> Result<Vec<GradientEstimate>> {
    net.check_params(params)?;
    let mut cps = checkpoints.to_vec();
    cps.sort_unstable();
    cps.dedup();
    if cps.first() == Some(&0) {
        return Err(Error::InvalidParams("batch sizes must be positive".into()));
    }
    let total = cps.last().copied().unwrap_or(0);
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < total {
        let next_cp = *cps.iter().find(|&&c| c > start).unwrap();
        let end = (start + CHUNK).min(next_cp);
        bounds.push((start, end));
        start = end;
    }
    let tables = PolicyTables::new(net, params);
    let offsets = block_offsets(net);
    let n = net.n_params();
    let fingerprint = params.fingerprint();
    let chunks: Vec<ChunkSums> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let mut sums = ChunkSums { sum: vec![0.0; n], sumsq: vec![0.0; n], truncated: 0 };
            let mut traj = AtomicTrajectory::default();
            let mut scratch = EpisodeScratch::new(net);
            let mut returns = Vec::new();
            let mut g = vec![0.0; n];
            for e in lo..hi {
                let mut rng = seeded(derive_seed(seed, e as u64));
                run_episode_into(mdp, net, &tables, fingerprint, horizon, &mut rng, &mut traj, &mut scratch);
                sums.truncated += usize::from(traj.truncated);
                g.iter_mut().for_each(|x| *x = 0.0);
                accumulate_trajectory_gradient(&traj, net, &tables, &offsets, &mut returns, &mut g);
                for j in 0..n {
                    sums.sum[j] += g[j];
                    sums.sumsq[j] += g[j] * g[j];
                }
            }
            sums
        })
        .collect();
    let mut out = Vec::with_capacity(cps.len());
    let mut sum = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    let mut truncated = 0;
    let mut cp = cps.iter().peekable();
    for (c, &(_, hi)) in chunks.iter().zip(&bounds) {
        for j in 0..n {
            sum[j] += c.sum[j];
            sumsq[j] += c.sumsq[j];
        }
        truncated += c.truncated;
        if cp.peek() == Some(&&hi) {
            cp.next();
            let m = hi as f64;
            let mut mean = net.zero_params();
            mean.as_mut_slice().iter_mut().zip(&sum).for_each(|(x, s)| *x = s / m);
            let variance = if hi > 1 {
                sum.iter().zip(&sumsq).map(|(s, q)| ((q - s * s / m) / (m - 1.0)).max(0.0)).collect()
            } else {
                vec![0.0; n]
            };
            out.push(GradientEstimate { episodes: hi, mean, variance, truncated });
        }
    }
    if truncated > 0 {
        log::warn!("{truncated} of {total} episodes hit the horizon cap");
    }
    Ok(out)
}

/// Single-checkpoint convenience wrapper around [`estimate_gradient`].
pub fn estimate_gradient_batch(
    mdp: &TabularMdp,
    net: &CoagentNetwork,
    params: &Params,
    episodes: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    Ok(estimate_gradient(mdp, net, params, &[episodes], seed, DEFAULT_HORIZON)?.remove(0))
}

/// Exact `J` and the sum-form gradient
/// `Σ_s d(s) Σ_outputs π(outputs | s) Q(s, a(outputs)) Σ_nodes ∂ln π_node`
/// of a synchronous network on `mdp`, with `d` the discounted occupancy
/// from `mdp`'s initial law. Parameter-free nodes contribute nothing.
pub fn sum_form_gradient<N: SyncPolicyNetwork + ?Sized>(
    mdp: &TabularMdp,
    net: &N,
    block_lengths: &[usize],
) -> Result<(f64, GradientVector)> {
    let policy = joint_policy(net, mdp);
    let chain = mdp.chain(&policy)?;
    let v = chain.values()?;
    let d = chain.occupancy(mdp.initial_dist())?;
    let j = mdp.initial_dist().iter().zip(&v).map(|(p, v)| p * v).sum();
    let mut grad = BlockVector::zeros(block_lengths);
    let gamma = mdp.discount();
    let free = vec![Clamp::Free; net.n_nodes()];
    let mut law = Vec::new();
    let mut q_cache: Vec<f64> = vec![f64::NAN; mdp.n_actions()];
    for s in 0..mdp.n_states() {
        if d[s] == 0.0 || mdp.is_terminal(s) {
            continue;
        }
        q_cache.iter_mut().for_each(|q| *q = f64::NAN);
        for_each_joint(net, s, &free, |outs, p| {
            let a = net.action(outs);
            if q_cache[a].is_nan() {
                q_cache[a] = mdp.outcomes(s, a).map(|o| o.prob * (o.mean_reward + gamma * v[o.next])).sum();
            }
            let w = d[s] * p * q_cache[a];
            for &node in net.order() {
                if let Some((blk, row)) = net.softmax_row(node, s, outs) {
                    let k = net.arity(node);
                    law.resize(k, 0.0);
                    net.distribution(node, s, outs, &mut law);
                    let target = &mut grad.block_mut(blk)[row * k..(row + 1) * k];
                    for u in 0..k {
                        target[u] -= w * law[u];
                    }
                    target[outs[node]] += w;
                }
            }
        });
    }
    Ok((j, grad))
}

/// Exact `J` and `∇J` through a prebuilt augmented MDP.
pub fn exact_gradient_with(aug: &AugmentedMdp, net: &CoagentNetwork, params: &Params) -> Result<(f64, GradientVector)> {
    let sync = SyncNetwork::new(net, aug, params)?;
    sum_form_gradient(aug.mdp(), &sync, &net.block_lengths())
}

/// Exact `∇J(θ)` for any (asynchronous, recurrent) network with
/// `n_atomic = 1`, computed on the augmented MDP.
pub fn exact_gradient(mdp: &TabularMdp, net: &CoagentNetwork, params: &Params) -> Result<GradientVector> {
    let aug = build_augmented_mdp(mdp, net)?;
    Ok(exact_gradient_with(&aug, net, params)?.1)
}

/// Central differences `(f(θ + h e_j) − f(θ − h e_j)) / 2h` per coordinate.
pub fn finite_difference_gradient(
    objective: impl Fn(&Params) -> Result<f64>,
    params: &Params,
    h: f64,
) -> Result<GradientVector> {
    if !(h > 0.0) {
        return Err(Error::InvalidParams(format!("step {h} must be positive")));
    }
    let mut grad = BlockVector::zeros(&params.block_lengths());
    let mut p = params.clone();
    for j in 0..params.len() {
        let x = params.as_slice()[j];
        p.as_mut_slice()[j] = x + h;
        let hi = objective(&p)?;
        p.as_mut_slice()[j] = x - h;
        let lo = objective(&p)?;
        p.as_mut_slice()[j] = x;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(j));
        }
        grad.as_mut_slice()[j] = (hi - lo) / (2.0 * h);
    }
    Ok(grad)
}

/// Cosine distance `1 − g1·g2 / (‖g1‖‖g2‖)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineDistance {
    pub blocks: Vec<f64>,
    /// Blocks where either vector has zero norm; their distance is set to 1.
    pub degenerate: Vec<bool>,
    /// Unweighted mean over blocks.
    pub mean: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        (1.0, true)
    } else {
        (1.0 - dot / (na * nb), false)
    }
}

/// Per-block cosine distances and their unweighted mean.
pub fn cosine_distance(g1: &GradientVector, g2: &GradientVector) -> Result<CosineDistance> {
    if !g1.same_layout(g2) {
        return Err(Error::Layout(format!("{:?} vs {:?}", g1.block_lengths(), g2.block_lengths())));
    }
    let (blocks, degenerate): (Vec<f64>, Vec<bool>) =
        (0..g1.n_blocks()).map(|i| cosine(g1.block(i), g2.block(i))).unzip();
    let mean = blocks.iter().sum::<f64>() / blocks.len().max(1) as f64;
    Ok(CosineDistance { blocks, degenerate, mean })
}

/// Cosine distance of the concatenated vectors.
pub fn cosine_distance_flat(g1: &GradientVector, g2: &GradientVector) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::Layout(format!("lengths {} vs {}", g1.len(), g2.len())));
    }
    Ok(cosine(g1.as_slice(), g2.as_slice()).0)
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &GradientVector, b: &GradientVector, floor: f64) -> f64 {
    let diff: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / b.norm().max(floor)
}

/// CSV rows `coordinate,block,value`.
pub fn gradient_csv(g: &GradientVector) -> String {
    let mut out = String::from("coordinate,block,value\n");
    for i in 0..g.n_blocks() {
        for (k, v) in g.block(i).iter().enumerate() {
            out.push_str(&format!("{},{i},{v:e}\n", g.block_offset(i) + k));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{gridworld_network, asynchronous_fixtures, random_params, synchronous_fixtures};
    use crate::reduction::exact_network_objective;
    use crate::rng::seeded;
    use crate::sync::SyncView;

    #[test]
    fn sum_form_matches_finite_differences() {
        for f in synchronous_fixtures().unwrap() {
            let params = random_params(&f.net, 1.0, 5);
            let view = SyncView::new(&f.net, &params).unwrap();
            let (_, g) = sum_form_gradient(&f.mdp, &view, &f.net.block_lengths()).unwrap();
            let fd = finite_difference_gradient(|p| exact_network_objective(&f.mdp, &f.net, p), &params, 1e-5).unwrap();
            assert!(relative_error(&g, &fd, 1e-12) < 1e-6, "{}", f.name);
            // the reduction gives the same gradient for synchronous networks
            let via = exact_gradient(&f.mdp, &f.net, &params).unwrap();
            assert!(relative_error(&via, &g, 1e-12) < 1e-10, "{}", f.name);
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences_for_async_networks() {
        for f in asynchronous_fixtures().unwrap() {
            let params = random_params(&f.net, 1.0, 8);
            let g = exact_gradient(&f.mdp, &f.net, &params).unwrap();
            let fd = finite_difference_gradient(|p| exact_network_objective(&f.mdp, &f.net, p), &params, 1e-5).unwrap();
            assert!(relative_error(&g, &fd, 1e-12) < 1e-6, "{}: {}", f.name, relative_error(&g, &fd, 1e-12));
        }
    }

    #[test]
    fn monte_carlo_estimate_is_unbiased() {
        let f = gridworld_network(0.5).unwrap();
        let params = random_params(&f.net, 0.5, 2);
        let exact = exact_gradient(&f.mdp, &f.net, &params).unwrap();
        let est = estimate_gradient(&f.mdp, &f.net, &params, &[3000, 30_000], 42, DEFAULT_HORIZON).unwrap();
        assert_eq!(est.len(), 2);
        let last = &est[1];
        for (j, se) in last.std_error().iter().enumerate() {
            let diff = last.mean.as_slice()[j] - exact.as_slice()[j];
            assert!(diff.abs() <= 5.0 * se + 1e-12, "coordinate {j}: diff {diff} se {se}");
        }
        let d_small = cosine_distance(&est[0].mean, &exact).unwrap().mean;
        let d_large = cosine_distance(&last.mean, &exact).unwrap().mean;
        assert!(d_large < d_small, "{d_large} vs {d_small}");
    }

    #[test]
    fn batch_estimates_are_deterministic_and_nested() {
        let f = gridworld_network(0.5).unwrap();
        let params = random_params(&f.net, 0.5, 3);
        let a = estimate_gradient(&f.mdp, &f.net, &params, &[1500, 2500], 9, 1000).unwrap();
        let again = estimate_gradient(&f.mdp, &f.net, &params, &[1500, 2500], 9, 1000).unwrap();
        assert_eq!(a[1].mean, again[1].mean);
        // prefixes see the same episodes; only the summation grouping differs
        let b = estimate_gradient(&f.mdp, &f.net, &params, &[1500], 9, 1000).unwrap();
        assert!(relative_error(&a[0].mean, &b[0].mean, 1e-12) < 1e-12);
        let c = estimate_gradient(&f.mdp, &f.net, &params, &[2500], 9, 1000).unwrap();
        assert!(relative_error(&a[1].mean, &c[0].mean, 1e-12) < 1e-12);
    }

    #[test]
    fn trajectory_batches_match_streaming_and_reject_off_policy() {
        let f = gridworld_network(0.5).unwrap();
        let params = random_params(&f.net, 0.5, 4);
        let trajs: Vec<_> = (0..50)
            .map(|e| {
                let mut rng = seeded(derive_seed(7, e));
                crate::network::run_episode(&f.mdp, &f.net, &params, DEFAULT_HORIZON, &mut rng).unwrap()
            })
            .collect();
        let g = mc_global_gradient(&trajs, &f.net, &params).unwrap();
        let s = estimate_gradient(&f.mdp, &f.net, &params, &[50], 7, DEFAULT_HORIZON).unwrap();
        assert!(relative_error(&g, &s[0].mean, 1e-12) < 1e-12);
        assert_eq!(mc_local_gradient(&trajs, &f.net, &params, 2).unwrap(), g.block(2).to_vec());
        let other = random_params(&f.net, 0.5, 5);
        assert!(matches!(mc_global_gradient(&trajs, &f.net, &other), Err(Error::OffPolicy { .. })));
    }

    #[test]
    fn cosine_distance_properties() {
        let a = BlockVector::from_blocks(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        let b = BlockVector::from_blocks(vec![vec![2.0, 0.0], vec![0.0, -1.0]]);
        let d = cosine_distance(&a, &b).unwrap();
        assert_eq!(d.blocks, vec![0.0, 2.0]);
        assert_eq!(d.mean, 1.0);
        let z = BlockVector::zeros(&[2, 2]);
        let d = cosine_distance(&a, &z).unwrap();
        assert_eq!(d.degenerate, vec![true, true]);
        assert!(cosine_distance_flat(&a, &a).unwrap().abs() < 1e-15);
        assert!(cosine_distance(&a, &BlockVector::zeros(&[4])).is_err());
    }

    #[test]
    fn finite_differences_of_a_quadratic() {
        let p = BlockVector::from_blocks(vec![vec![1.0, -2.0, 0.5]]);
        let g = finite_difference_gradient(|p| Ok(p.as_slice().iter().map(|x| x * x).sum()), &p, 1e-4).unwrap();
        for (a, b) in g.as_slice().iter().zip(p.as_slice()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
        let err = finite_difference_gradient(|p| Ok(if p.as_slice()[1] > -2.0 { f64::NAN } else { 0.0 }), &p, 1e-4);
        assert!(matches!(err, Err(Error::NonFinite(1))));
        assert!(gradient_csv(&p).lines().count() == 4);
    }
}
