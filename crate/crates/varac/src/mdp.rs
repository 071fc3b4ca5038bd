//! Tabular average-reward MDPs: exact evaluation and trajectory simulation.
//!
//! Exact quantities for a stationary policy are obtained from linear solves:
//! the stationary distribution from its fixed-point system and the
//! differential value functions from the Poisson equation with the
//! occupancy-weighted mean pinned to zero. Both solves are well posed exactly
//! when the induced chain is unichain, and degeneracy is surfaced as
//! [`Error::NonUnichain`].

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lu_solve;
use crate::rng::{rng_from_seed, sample_index, Rng, RngCore};

/// States above this size switch the stationary solve from dense LU to power
/// iteration.
const DENSE_SOLVE_MAX_STATES: usize = 200;
/// Convergence tolerance for the power-iteration fallback.
const POWER_ITER_TOL: f64 = 1e-12;
const POWER_ITER_MAX: usize = 2_000_000;
/// Row-stochasticity tolerance for transition tensors.
const ROW_SUM_TOL: f64 = 1e-12;
/// Row-stochasticity tolerance for policies (softmax output rounds at ~1e-15).
const POLICY_ROW_SUM_TOL: f64 = 1e-9;

/// A finite MDP with deterministic rewards `r[s][a]` and transition tensor
/// `P[s][a][s']`.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Array3<f64>,
    reward: Array2<f64>,
    reward_bound: f64,
}

impl TabularMdp {
    /// Validates and builds an MDP. Rows of `transition` must be probability
    /// distributions; rewards must be finite.
    pub fn new(transition: Array3<f64>, reward: Array2<f64>) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::DimensionMismatch(
                "MDP needs at least one state and one action".into(),
            ));
        }
        if n_next != n_states {
            return Err(Error::DimensionMismatch(format!(
                "transition tensor is [{n_states}][{n_actions}][{n_next}], successor axis must equal n_states"
            )));
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(Error::DimensionMismatch(format!(
                "reward is {:?}, expected [{n_states}][{n_actions}]",
                reward.dim()
            )));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let mut sum = 0.0;
                for s2 in 0..n_states {
                    let p = transition[[s, a, s2]];
                    if !p.is_finite() || p < 0.0 {
                        return Err(Error::SchemaViolation {
                            field: format!("transition[{s}][{a}][{s2}]"),
                            message: format!("entry {p} is not a probability"),
                        });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::SchemaViolation {
                        field: format!("transition[{s}][{a}]"),
                        message: format!("row sums to {sum:.17}, expected 1"),
                    });
                }
                if !reward[[s, a]].is_finite() {
                    return Err(Error::SchemaViolation {
                        field: format!("reward[{s}][{a}]"),
                        message: "entry is not finite".into(),
                    });
                }
            }
        }
        let reward_bound = reward.iter().fold(0.0f64, |m, &r| m.max(r.abs()));
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            reward_bound,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// M = max |r(s,a)|.
    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[[s, a]]
    }

    /// Dimension of the one-hot state-action embedding.
    pub fn embed_dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Index of (s,a) in the one-hot embedding.
    pub fn embed_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    /// Transition matrix of the chain induced by `pi`:
    /// `P_pi[s][s'] = Σ_a π(a|s) P[s][a][s']`.
    pub fn chain_matrix(&self, pi: &StationaryPolicy) -> Array2<f64> {
        let mut p = Array2::zeros((self.n_states, self.n_states));
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for s2 in 0..self.n_states {
                    p[[s, s2]] += w * self.transition[[s, a, s2]];
                }
            }
        }
        p
    }

    /// Expected reward per state under `pi`.
    fn reward_under(&self, pi: &StationaryPolicy, squared: bool) -> Array1<f64> {
        Array1::from_shape_fn(self.n_states, |s| {
            (0..self.n_actions)
                .map(|a| {
                    let r = self.reward[[s, a]];
                    pi.prob(s, a) * if squared { r * r } else { r }
                })
                .sum()
        })
    }
}

/// A stationary (possibly randomized) policy `π[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPolicy {
    probs: Array2<f64>,
}

impl StationaryPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (s, row) in probs.outer_iter().enumerate() {
            let mut sum = 0.0;
            for (a, &p) in row.iter().enumerate() {
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::SchemaViolation {
                        field: format!("policy[{s}][{a}]"),
                        message: format!("entry {p} is not a probability"),
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > POLICY_ROW_SUM_TOL {
                return Err(Error::SchemaViolation {
                    field: format!("policy[{s}]"),
                    message: format!("row sums to {sum:.17}, expected 1"),
                });
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::IndexOutOfRange(format!(
                    "action {a} in state {s}, n_actions = {n_actions}"
                )));
            }
            probs[[s, a]] = 1.0;
        }
        Self::new(probs)
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[[s, a]]
    }

    pub fn sample_action(&self, s: usize, rng: &mut Rng) -> usize {
        sample_index(self.probs.row(s).as_slice().expect("contiguous row"), rng)
    }
}

/// Exact policy-evaluation bundle: stationary distributions, long-run moments,
/// and the differential value functions of the reward and the squared reward.
#[derive(Debug, Clone)]
pub struct ExactEvaluation {
    /// Stationary state distribution ν.
    pub nu: Array1<f64>,
    /// Stationary state-action distribution σ[s][a] = π(a|s)ν(s).
    pub sigma: Array2<f64>,
    /// Long-run average reward ρ.
    pub rho: f64,
    /// Long-run average squared reward η.
    pub eta: f64,
    /// Long-run reward variance Λ = η − ρ².
    pub variance: f64,
    /// Differential action-value of the reward, normalized to E_σ[Q] = 0.
    pub q: Array2<f64>,
    /// Differential state-value of the reward, V(s) = ⟨Q(s,·), π(·|s)⟩.
    pub v: Array1<f64>,
    /// Differential action-value of the squared reward, E_σ[W] = 0.
    pub w: Array2<f64>,
    /// Differential state-value of the squared reward.
    pub u: Array1<f64>,
}

/// Stationary state distribution of the chain induced by `pi`.
///
/// Dense path: solves `(I − P_πᵀ + 1·1ᵀ) ν = 1`, whose unique solution for a
/// unichain transition matrix is the stationary distribution. Singularity of
/// that system means the fixed-point equation has a multi-dimensional solution
/// space, i.e. more than one recurrent class.
pub fn stationary_distribution(mdp: &TabularMdp, pi: &StationaryPolicy) -> Result<Array1<f64>> {
    check_policy_shape(mdp, pi)?;
    let p = mdp.chain_matrix(pi);
    let n = mdp.n_states();
    let nu = if n <= DENSE_SOLVE_MAX_STATES {
        let a = Array2::from_shape_fn((n, n), |(i, j)| {
            let eye = if i == j { 1.0 } else { 0.0 };
            eye - p[[j, i]] + 1.0
        });
        let b = Array1::ones(n);
        match lu_solve(&a, &b) {
            Ok(x) => x,
            Err(Error::SingularSolve(msg)) => {
                return Err(Error::NonUnichain(format!(
                    "stationary fixed-point system is rank-deficient ({msg})"
                )))
            }
            Err(e) => return Err(e),
        }
        .map(|&v| if v.abs() < 1e-13 { 0.0 } else { v })
        .to_owned()
    } else {
        // Power iteration on the lazy chain (I + P)/2, which shares ν with P
        // and is aperiodic by construction.
        let mut nu = Array1::from_elem(n, 1.0 / n as f64);
        let mut converged = false;
        for _ in 0..POWER_ITER_MAX {
            let mut next: Array1<f64> = Array1::zeros(n);
            for s in 0..n {
                let mass = nu[s] * 0.5;
                next[s] += mass;
                for s2 in 0..n {
                    next[s2] += mass * p[[s, s2]];
                }
            }
            let diff = (&next - &nu).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            nu = next;
            if diff < POWER_ITER_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonUnichain(
                "power iteration did not converge; chain may have multiple recurrent classes"
                    .into(),
            ));
        }
        nu
    };

    let total: f64 = nu.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::NonUnichain(format!(
            "stationary solve produced mass {total}"
        )));
    }
    let mut nu = nu / total;
    // Negative mass beyond rounding noise means the fixed point is not a
    // distribution, so the chain assumption is broken.
    if nu.iter().any(|&v| v < -1e-10) {
        return Err(Error::NonUnichain(
            "stationary solve produced negative mass".into(),
        ));
    }
    nu.mapv_inplace(|v| v.max(0.0));
    let total: f64 = nu.sum();
    nu /= total;

    let residual = residual_left_fixed_point(&p, &nu);
    if residual > 1e-10 {
        return Err(Error::NonUnichain(format!(
            "stationary residual {residual:.3e} exceeds 1e-10"
        )));
    }
    Ok(nu)
}

fn residual_left_fixed_point(p: &Array2<f64>, nu: &Array1<f64>) -> f64 {
    let n = p.nrows();
    let mut worst = 0.0f64;
    for s2 in 0..n {
        let mut acc = 0.0;
        for s in 0..n {
            acc += nu[s] * p[[s, s2]];
        }
        worst = worst.max((acc - nu[s2]).abs());
    }
    worst
}

/// Exact evaluation of every long-run quantity for `pi`.
///
/// V solves the Poisson equation `(I − P_π)V = r_π − ρ·1`; the solve uses the
/// bordered matrix `I − P_π + 1·νᵀ`, which pins E_ν[V] = 0 and is nonsingular
/// exactly for unichain chains. U is treated identically with squared rewards.
pub fn exact_evaluation(mdp: &TabularMdp, pi: &StationaryPolicy) -> Result<ExactEvaluation> {
    let nu = stationary_distribution(mdp, pi)?;
    let n = mdp.n_states();
    let p = mdp.chain_matrix(pi);

    let sigma = Array2::from_shape_fn((n, mdp.n_actions()), |(s, a)| nu[s] * pi.prob(s, a));
    let r_pi = mdp.reward_under(pi, false);
    let r2_pi = mdp.reward_under(pi, true);
    let rho: f64 = nu.dot(&r_pi);
    let eta: f64 = nu.dot(&r2_pi);
    let variance = eta - rho * rho;

    let bordered = Array2::from_shape_fn((n, n), |(i, j)| {
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - p[[i, j]] + nu[j]
    });
    let solve_poisson = |rhs: Array1<f64>| -> Result<Array1<f64>> {
        match lu_solve(&bordered, &rhs) {
            Ok(x) => Ok(x),
            Err(Error::SingularSolve(msg)) => Err(Error::SingularSolve(format!(
                "Poisson system with normalization row is rank-deficient ({msg})"
            ))),
            Err(e) => Err(e),
        }
    };
    let v = solve_poisson(&r_pi - rho)?;
    let u = solve_poisson(&r2_pi - eta)?;

    let q = Array2::from_shape_fn((n, mdp.n_actions()), |(s, a)| {
        let mut x = mdp.r(s, a) - rho;
        for s2 in 0..n {
            x += mdp.transition()[[s, a, s2]] * v[s2];
        }
        x
    });
    let w = Array2::from_shape_fn((n, mdp.n_actions()), |(s, a)| {
        let r = mdp.r(s, a);
        let mut x = r * r - eta;
        for s2 in 0..n {
            x += mdp.transition()[[s, a, s2]] * u[s2];
        }
        x
    });

    Ok(ExactEvaluation {
        nu,
        sigma,
        rho,
        eta,
        variance,
        q,
        v,
        w,
        u,
    })
}

/// One step of a rollout: `(s, a, r, s', a')` with `a'` the action the policy
/// takes in `s'` (it is also the `a` of the following step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub a_next: usize,
}

/// A single on-policy rollout of fixed length.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Rolls out `t_len` consecutive steps of the chain induced by `pi`, after
/// discarding `burn_in` steps from a uniformly drawn initial state. The
/// rollout is SARSA-chained: `s'_t = s_{t+1}` and `a'_t = a_{t+1}`.
pub fn sample_trajectory(
    mdp: &TabularMdp,
    pi: &StationaryPolicy,
    t_len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Trajectory> {
    check_policy_shape(mdp, pi)?;
    if t_len == 0 {
        return Err(Error::DimensionMismatch(
            "trajectory length must be at least 1".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut s = rng.random_range(0..mdp.n_states());
    let mut a = pi.sample_action(s, &mut rng);
    for _ in 0..burn_in {
        let s2 = sample_successor(mdp, s, a, &mut rng);
        let a2 = pi.sample_action(s2, &mut rng);
        s = s2;
        a = a2;
    }
    let mut steps = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let r = mdp.r(s, a);
        let s2 = sample_successor(mdp, s, a, &mut rng);
        let a2 = pi.sample_action(s2, &mut rng);
        steps.push(Step {
            s,
            a,
            r,
            s_next: s2,
            a_next: a2,
        });
        s = s2;
        a = a2;
    }
    Ok(Trajectory { steps, seed })
}

fn sample_successor(mdp: &TabularMdp, s: usize, a: usize, rng: &mut Rng) -> usize {
    let row = mdp.transition().slice(ndarray::s![s, a, ..]);
    sample_index(row.as_slice().expect("contiguous row"), rng)
}

/// Sample-average estimators of (ρ, η) from a trajectory.
pub fn estimate_rho_eta(traj: &Trajectory) -> (f64, f64) {
    let t = traj.len() as f64;
    let mut sum_r = 0.0;
    let mut sum_r2 = 0.0;
    for step in &traj.steps {
        sum_r += step.r;
        sum_r2 += step.r * step.r;
    }
    (sum_r / t, sum_r2 / t)
}

fn check_policy_shape(mdp: &TabularMdp, pi: &StationaryPolicy) -> Result<()> {
    if pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions() {
        return Err(Error::DimensionMismatch(format!(
            "policy is {}x{}, MDP is {}x{}",
            pi.n_states(),
            pi.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
}

impl TabularMdp {
    /// Parses the canonical JSON schema and validates every invariant.
    /// Syntax errors carry line/column; semantic errors name the field.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: MdpJson = serde_json::from_str(text).map_err(|e| Error::JsonSyntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if raw.n_states == 0 || raw.n_actions == 0 {
            return Err(Error::SchemaViolation {
                field: "n_states/n_actions".into(),
                message: "must be positive".into(),
            });
        }
        if raw.transition.len() != raw.n_states {
            return Err(Error::SchemaViolation {
                field: "transition".into(),
                message: format!(
                    "outer length {} != n_states {}",
                    raw.transition.len(),
                    raw.n_states
                ),
            });
        }
        for (s, per_action) in raw.transition.iter().enumerate() {
            if per_action.len() != raw.n_actions {
                return Err(Error::SchemaViolation {
                    field: format!("transition[{s}]"),
                    message: format!("length {} != n_actions {}", per_action.len(), raw.n_actions),
                });
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != raw.n_states {
                    return Err(Error::SchemaViolation {
                        field: format!("transition[{s}][{a}]"),
                        message: format!("length {} != n_states {}", row.len(), raw.n_states),
                    });
                }
            }
        }
        if raw.reward.len() != raw.n_states {
            return Err(Error::SchemaViolation {
                field: "reward".into(),
                message: format!(
                    "outer length {} != n_states {}",
                    raw.reward.len(),
                    raw.n_states
                ),
            });
        }
        for (s, row) in raw.reward.iter().enumerate() {
            if row.len() != raw.n_actions {
                return Err(Error::SchemaViolation {
                    field: format!("reward[{s}]"),
                    message: format!("length {} != n_actions {}", row.len(), raw.n_actions),
                });
            }
        }
        let transition = Array3::from_shape_fn(
            (raw.n_states, raw.n_actions, raw.n_states),
            |(s, a, s2)| raw.transition[s][a][s2],
        );
        let reward =
            Array2::from_shape_fn((raw.n_states, raw.n_actions), |(s, a)| raw.reward[s][a]);
        Self::new(transition, reward)
    }

    /// Serializes to the canonical JSON schema. The output is stable: loading
    /// it and serializing again reproduces the same bytes.
    pub fn to_json_string(&self) -> String {
        let raw = MdpJson {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transition: (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| {
                            (0..self.n_states)
                                .map(|s2| self.transition[[s, a, s2]])
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            reward: (0..self.n_states)
                .map(|s| (0..self.n_actions).map(|a| self.reward[[s, a]]).collect())
                .collect(),
        };
        serde_json::to_string(&raw).expect("serialization of plain numbers cannot fail")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json_str(&text)
    }
}
