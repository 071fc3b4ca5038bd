//! Environment construction: a seeded random ergodic MDP generator and two
//! named benchmark families (safe/risky portfolio, ring gridworld with a
//! hazard arc).

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{StationaryPolicy, TabularMdp};
use crate::rng::{rng_from_seed, RngCore};

/// Named environment family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Random,
    Portfolio,
    Gridworld,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Family::Random),
            "portfolio" => Ok(Family::Portfolio),
            "gridworld" => Ok(Family::Gridworld),
            other => Err(Error::SpecInvalid(format!(
                "unknown env family {other:?} (expected random | portfolio | gridworld)"
            ))),
        }
    }
}

/// Environment specification; `generate` is deterministic in all fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub family: Family,
    pub n_states: usize,
    pub n_actions: usize,
    pub seed: u64,
    /// Ergodicity mixing weight ε ∈ (0, 1]: transition rows are blended as
    /// (1−ε)·raw + ε·uniform (random and gridworld families).
    pub mix: f64,
    pub reward_scale: f64,
}

impl EnvSpec {
    pub fn new(family: Family, n_states: usize, n_actions: usize, seed: u64) -> Self {
        Self {
            family,
            n_states,
            n_actions,
            seed,
            mix: 0.05,
            reward_scale: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::SpecInvalid(format!(
                "n_states and n_actions must be positive, got {} and {}",
                self.n_states, self.n_actions
            )));
        }
        if !(self.mix > 0.0 && self.mix <= 1.0) {
            return Err(Error::SpecInvalid(format!(
                "mix must lie in (0, 1], got {}",
                self.mix
            )));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::SpecInvalid(format!(
                "reward_scale must be positive and finite, got {}",
                self.reward_scale
            )));
        }
        match self.family {
            Family::Portfolio => {
                if self.n_states != 3 || self.n_actions != 2 {
                    return Err(Error::SpecInvalid(format!(
                        "portfolio family is the fixed 3-state 2-action construction, got {}x{}",
                        self.n_states, self.n_actions
                    )));
                }
            }
            Family::Gridworld => {
                if self.n_states < 4 {
                    return Err(Error::SpecInvalid(format!(
                        "gridworld ring needs at least 4 cells, got {}",
                        self.n_states
                    )));
                }
                if self.n_actions != 2 {
                    return Err(Error::SpecInvalid(format!(
                        "gridworld has 2 actions (advance, hold), got {}",
                        self.n_actions
                    )));
                }
            }
            Family::Random => {}
        }
        Ok(())
    }
}

/// Builds the environment described by `spec`.
///
/// Every generated MDP is checked to have an irreducible, aperiodic chain
/// under the uniform policy with second-largest eigenvalue modulus below
/// 1 − 1e-6.
pub fn generate(spec: &EnvSpec) -> Result<TabularMdp> {
    spec.validate()?;
    let mdp = match spec.family {
        Family::Random => random_family(spec)?,
        Family::Portfolio => portfolio_family(spec)?,
        Family::Gridworld => gridworld_family(spec)?,
    };
    check_ergodic(&mdp)?;
    Ok(mdp)
}

fn random_family(spec: &EnvSpec) -> Result<TabularMdp> {
    let (n, m) = (spec.n_states, spec.n_actions);
    let mut rng = rng_from_seed(spec.seed);
    let uniform = 1.0 / n as f64;
    let mut p = Array3::zeros((n, m, n));
    for s in 0..n {
        for a in 0..m {
            // Dirichlet(1,...,1) row via normalized exponentials.
            let mut row: Vec<f64> = (0..n)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let total: f64 = row.iter().sum();
            for v in &mut row {
                *v = (1.0 - spec.mix) * (*v / total) + spec.mix * uniform;
            }
            let total: f64 = row.iter().sum();
            for (j, v) in row.iter().enumerate() {
                p[[s, a, j]] = v / total;
            }
        }
    }
    let mut r = Array2::zeros((n, m));
    for v in r.iter_mut() {
        *v = spec.reward_scale * (2.0 * rng.random::<f64>() - 1.0);
    }
    TabularMdp::new(p, r)
}

/// The safe/risky portfolio toy. State 0 is the decision state; states 1 and
/// 2 realize the risky payoff (high and low). Both actions are available
/// everywhere: action 0 (safe) moves to the decision state, action 1 (risky)
/// moves to high/low with probability ½ each. Rewards depend on the current
/// state only: 0.4 in the decision state, 1 in high, 0 in low, times
/// `reward_scale`. At α = 0.1 and scale 1 the constrained optimum plays risky
/// with long-run frequency q* solving 0.01q² − 0.26q + 0.1 = 0, giving
/// ρ* = 0.4 + 0.1·q* ≈ 0.43905.
fn portfolio_family(spec: &EnvSpec) -> Result<TabularMdp> {
    let mut p = Array3::zeros((3, 2, 3));
    for s in 0..3 {
        p[[s, 0, 0]] = 1.0;
        p[[s, 1, 1]] = 0.5;
        p[[s, 1, 2]] = 0.5;
    }
    let state_reward = [0.4, 1.0, 0.0];
    let mut r = Array2::zeros((3, 2));
    for s in 0..3 {
        for a in 0..2 {
            r[[s, a]] = spec.reward_scale * state_reward[s];
        }
    }
    TabularMdp::new(p, r)
}

/// Ring gridworld: action 0 advances one cell, action 1 holds. The last
/// quarter of the ring is a hazard arc with a high advance reward; elsewhere
/// advancing pays a modest reward and holding pays little. Rows are blended
/// toward uniform by `mix` so every policy induces an ergodic chain.
fn gridworld_family(spec: &EnvSpec) -> Result<TabularMdp> {
    let n = spec.n_states;
    let uniform = spec.mix / n as f64;
    let mut p = Array3::from_elem((n, 2, n), uniform);
    for s in 0..n {
        p[[s, 0, (s + 1) % n]] += 1.0 - spec.mix;
        p[[s, 1, s]] += 1.0 - spec.mix;
    }
    let hazard_start = n - n / 4;
    let mut r = Array2::zeros((n, 2));
    for s in 0..n {
        let hazard = s >= hazard_start;
        r[[s, 0]] = spec.reward_scale * if hazard { 1.0 } else { 0.25 };
        r[[s, 1]] = spec.reward_scale * if hazard { -0.2 } else { 0.1 };
    }
    TabularMdp::new(p, r)
}

/// Verifies the uniform-policy chain is irreducible and aperiodic and that
/// its second-largest eigenvalue modulus is below 1 − 1e-6.
fn check_ergodic(mdp: &TabularMdp) -> Result<()> {
    let n = mdp.n_states();
    let uniform = StationaryPolicy::uniform(n, mdp.n_actions());
    let p = mdp.chain_matrix(&uniform);

    let reach = |forward: bool| -> Vec<bool> {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(s) = stack.pop() {
            for j in 0..n {
                let edge = if forward { p[[s, j]] } else { p[[j, s]] };
                if edge > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen
    };
    if !(reach(true).iter().all(|&b| b) && reach(false).iter().all(|&b| b)) {
        return Err(Error::SpecInvalid(
            "uniform-policy chain is not irreducible".into(),
        ));
    }
    if !(0..n).any(|s| p[[s, s]] > 0.0) {
        return Err(Error::SpecInvalid(
            "uniform-policy chain has no self-transition; cannot certify aperiodicity".into(),
        ));
    }

    let slem = slem_estimate(&p, mdp)?;
    if !(slem < 1.0 - 1e-6) {
        return Err(Error::SpecInvalid(format!(
            "uniform-policy chain mixes too slowly: second eigenvalue modulus {slem:.9}"
        )));
    }
    Ok(())
}

/// Power-method estimate of the second-largest eigenvalue modulus of a
/// stochastic matrix: iterate the chain on a vector with the stationary
/// component projected out and measure the geometric decay rate.
fn slem_estimate(p: &Array2<f64>, mdp: &TabularMdp) -> Result<f64> {
    let n = p.nrows();
    let uniform = StationaryPolicy::uniform(n, mdp.n_actions());
    let nu = crate::mdp::stationary_distribution(mdp, &uniform)?;
    let mut rng = rng_from_seed(0x5eed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let project = |x: &mut Vec<f64>| {
        // Remove the stationary left eigenvector component: x ← x − (Σx)·ν.
        let s: f64 = x.iter().sum();
        for (xi, &ni) in x.iter_mut().zip(nu.iter()) {
            *xi -= s * ni;
        }
    };
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    project(&mut x);
    let n0 = norm(&x).max(1e-300);
    for v in &mut x {
        *v /= n0;
    }
    let mut rate: f64 = 0.0;
    let burn = 200;
    let window = 100;
    let mut current = x;
    let mut prev_norm = 1.0_f64;
    let mut rates = Vec::new();
    for it in 0..(burn + window) {
        // Left multiplication: row vector times P.
        let mut next = vec![0.0; n];
        for (i, &xi) in current.iter().enumerate() {
            if xi != 0.0 {
                for j in 0..n {
                    next[j] += xi * p[[i, j]];
                }
            }
        }
        project(&mut next);
        let nn = norm(&next);
        if nn < 1e-280 {
            return Ok(0.0);
        }
        if it >= burn {
            rates.push(nn / prev_norm);
        }
        prev_norm = 1.0;
        for v in &mut next {
            *v /= nn;
        }
        current = next;
    }
    if !rates.is_empty() {
        // Geometric mean absorbs oscillation from complex eigenvalue pairs.
        let log_mean = rates.iter().map(|r| r.max(1e-300).ln()).sum::<f64>() / rates.len() as f64;
        rate = log_mean.exp();
    }
    Ok(rate)
}
