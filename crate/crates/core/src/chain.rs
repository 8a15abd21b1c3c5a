//! Discounted Markov reward chains solved by direct LU factorisation.
//!
//! Every exact quantity in the crate (state values, objectives, discounted
//! occupancies) reduces to one of the two linear systems here, restricted to
//! the non-terminal states. Terminal states are absorbing with zero reward, so
//! their value and occupancy are pinned to zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A finite Markov chain with expected per-step rewards.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    rows: Vec<Vec<(usize, f64)>>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    discount: f64,
}

impl MarkovChain {
    pub fn new(n: usize, discount: f64, terminal: Vec<bool>) -> Self {
        assert_eq!(terminal.len(), n);
        Self {
            rows: vec![Vec::new(); n],
            reward: vec![0.0; n],
            terminal,
            discount,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// Accumulates transition mass `p` from `from` to `to`.
    pub fn add_transition(&mut self, from: usize, to: usize, p: f64) {
        if p == 0.0 {
            return;
        }
        let row = &mut self.rows[from];
        match row.iter_mut().find(|(j, _)| *j == to) {
            Some(entry) => entry.1 += p,
            None => row.push((to, p)),
        }
    }

    pub fn add_reward(&mut self, s: usize, r: f64) {
        self.reward[s] += r;
    }

    pub fn row(&self, s: usize) -> &[(usize, f64)] {
        &self.rows[s]
    }

    pub fn reward(&self, s: usize) -> f64 {
        self.reward[s]
    }

    fn transient(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let mut idx = vec![None; self.len()];
        let mut list = Vec::new();
        for s in 0..self.len() {
            if !self.terminal[s] {
                idx[s] = Some(list.len());
                list.push(s);
            }
        }
        (list, idx)
    }

    /// With discount 1 the system is singular iff some non-terminal state
    /// cannot reach a terminal state; report those states.
    fn check_absorbing(&self) -> Result<()> {
        if self.discount < 1.0 {
            return Ok(());
        }
        let n = self.len();
        let mut reaches = self.terminal.clone();
        let mut changed = true;
        while changed {
            changed = false;
            for s in 0..n {
                if !reaches[s] && self.rows[s].iter().any(|&(j, p)| p > 0.0 && reaches[j]) {
                    reaches[s] = true;
                    changed = true;
                }
            }
        }
        let stuck: Vec<usize> = (0..n).filter(|&s| !reaches[s]).collect();
        if stuck.is_empty() {
            Ok(())
        } else {
            Err(Error::NonAbsorbing { states: stuck })
        }
    }

    fn system(&self, list: &[usize], idx: &[Option<usize>]) -> DMatrix<f64> {
        let k = list.len();
        let mut a = DMatrix::<f64>::identity(k, k);
        for (row, &s) in list.iter().enumerate() {
            for &(j, p) in &self.rows[s] {
                if let Some(col) = idx[j] {
                    a[(row, col)] -= self.discount * p;
                }
            }
        }
        a
    }

    /// Solves `v = r + γ P v` with `v = 0` on terminal states.
    pub fn values(&self) -> Result<Vec<f64>> {
        self.check_absorbing()?;
        let (list, idx) = self.transient();
        let k = list.len();
        let mut v = vec![0.0; self.len()];
        if k == 0 {
            return Ok(v);
        }
        let a = self.system(&list, &idx);
        let b = DVector::from_iterator(k, list.iter().map(|&s| self.reward[s]));
        let x = a.lu().solve(&b).ok_or(Error::Singular(k))?;
        for (row, &s) in list.iter().enumerate() {
            v[s] = x[row];
        }
        Ok(v)
    }

    /// Discounted occupancy `d(s) = Σ_t γ^t Pr(S_t = s)` over non-terminal
    /// states, starting from `initial`.
    pub fn occupancy(&self, initial: &[f64]) -> Result<Vec<f64>> {
        self.check_absorbing()?;
        let (list, idx) = self.transient();
        let k = list.len();
        let mut d = vec![0.0; self.len()];
        if k == 0 {
            return Ok(d);
        }
        let a = self.system(&list, &idx).transpose();
        let b = DVector::from_iterator(k, list.iter().map(|&s| initial[s]));
        let x = a.lu().solve(&b).ok_or(Error::Singular(k))?;
        for (row, &s) in list.iter().enumerate() {
            d[s] = x[row];
        }
        Ok(d)
    }

    /// Max-norm residual of the Bellman identity for a candidate value vector.
    pub fn bellman_residual(&self, v: &[f64]) -> f64 {
        (0..self.len())
            .filter(|&s| !self.terminal[s])
            .map(|s| {
                let next: f64 = self.rows[s].iter().map(|&(j, p)| p * v[j]).sum();
                (self.reward[s] + self.discount * next - v[s]).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_self_loop() {
        let mut c = MarkovChain::new(1, 0.5, vec![false]);
        c.add_transition(0, 0, 1.0);
        c.add_reward(0, 1.0);
        let v = c.values().unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
        let d = c.occupancy(&[1.0]).unwrap();
        assert!((d[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn undiscounted_closed_class_is_reported() {
        // 0 -> terminal 2, but 1 loops forever.
        let mut c = MarkovChain::new(3, 1.0, vec![false, false, true]);
        c.add_transition(0, 2, 1.0);
        c.add_transition(1, 1, 1.0);
        c.add_transition(2, 2, 1.0);
        match c.values() {
            Err(Error::NonAbsorbing { states }) => assert_eq!(states, vec![1]),
            other => panic!("expected NonAbsorbing, got {other:?}"),
        }
    }

    #[test]
    fn absorbing_chain_values_and_residual() {
        let mut c = MarkovChain::new(3, 1.0, vec![false, false, true]);
        c.add_transition(0, 1, 0.5);
        c.add_transition(0, 0, 0.5);
        c.add_transition(1, 2, 1.0);
        c.add_reward(0, -1.0);
        c.add_reward(1, -1.0);
        let v = c.values().unwrap();
        assert!((v[1] + 1.0).abs() < 1e-12);
        assert!((v[0] + 3.0).abs() < 1e-12);
        assert!(c.bellman_residual(&v) < 1e-12);
    }
}
