//! Energy-based softmax policies and the closed-form policy improvement step.
//!
//! A policy is `π(a|s) ∝ exp(τ⁻¹ f(s,a))` for an energy `f` that is either a
//! plain table over state-action pairs (exact mode) or a ReLU network
//! evaluated on one-hot embeddings, anchored by subtracting the network's
//! output at initialization so the starting policy is exactly uniform.
//!
//! The improvement step solves, per state and in closed form,
//! `max_π ⟨(1+2λ̄ȳ)Q − λ̄W, π⟩ − β_k·KL(π ‖ π_prev)`,
//! whose unique maximizer is the softmax of
//! `β_k⁻¹(1+2λ̄ȳ)Q − β_k⁻¹λ̄W + τ_k⁻¹ f_prev`.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::mdp::{StationaryPolicy, TabularMdp};
use crate::neural::{embed, DeepNet};

/// Energy function backing a policy.
#[derive(Debug, Clone)]
pub enum Energy {
    /// Direct table `f[s][a]`.
    Table(Array2<f64>),
    /// Network energy `f(s,a) = net(x_sa) − baseline[s][a]`, where `baseline`
    /// caches the anchor network's outputs so the initial policy is uniform.
    Net {
        net: DeepNet,
        baseline: Array2<f64>,
    },
}

impl Energy {
    /// Zero table energy for an MDP shape.
    pub fn zero_table(n_states: usize, n_actions: usize) -> Self {
        Energy::Table(Array2::zeros((n_states, n_actions)))
    }

    /// Wraps a network, caching its current outputs as the baseline.
    pub fn anchored_net(mdp: &TabularMdp, net: DeepNet) -> Result<Self> {
        let baseline = net_outputs(mdp, &net)?;
        Ok(Energy::Net { net, baseline })
    }

    /// Energy value at one state-action pair.
    pub fn value(&self, mdp: &TabularMdp, s: usize, a: usize) -> Result<f64> {
        match self {
            Energy::Table(table) => Ok(table[[s, a]]),
            Energy::Net { net, baseline } => {
                let x = embed(mdp, s, a)?;
                Ok(net.forward(&x)? - baseline[[s, a]])
            }
        }
    }

    /// Materializes the full energy table.
    pub fn table(&self, mdp: &TabularMdp) -> Result<Array2<f64>> {
        match self {
            Energy::Table(table) => Ok(table.clone()),
            Energy::Net { net, baseline } => Ok(&net_outputs(mdp, net)? - baseline),
        }
    }
}

fn net_outputs(mdp: &TabularMdp, net: &DeepNet) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((mdp.n_states(), mdp.n_actions()));
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let x = embed(mdp, s, a)?;
            out[[s, a]] = net.forward(&x)?;
        }
    }
    Ok(out)
}

/// Softmax policy induced by an energy and a temperature.
#[derive(Debug, Clone)]
pub struct EnergyPolicy {
    pub energy: Energy,
    /// Temperature τ > 0.
    pub tau: f64,
}

impl EnergyPolicy {
    /// The uniform starting policy: zero table energy at temperature 1.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            energy: Energy::zero_table(n_states, n_actions),
            tau: 1.0,
        }
    }

    /// Action distribution at state `s`.
    pub fn probs(&self, mdp: &TabularMdp, s: usize) -> Result<Array1<f64>> {
        let logits: Array1<f64> = match &self.energy {
            Energy::Table(table) => table.row(s).mapv(|f| f / self.tau),
            Energy::Net { .. } => {
                let mut row = Array1::zeros(mdp.n_actions());
                for a in 0..mdp.n_actions() {
                    row[a] = self.energy.value(mdp, s, a)? / self.tau;
                }
                row
            }
        };
        softmax(&logits)
    }

    /// Materializes the policy for exact evaluation.
    pub fn to_stationary(&self, mdp: &TabularMdp) -> Result<StationaryPolicy> {
        let mut probs = Array2::zeros((mdp.n_states(), mdp.n_actions()));
        for s in 0..mdp.n_states() {
            let row = self.probs(mdp, s)?;
            for a in 0..mdp.n_actions() {
                probs[[s, a]] = row[a];
            }
        }
        StationaryPolicy::new(probs)
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax(logits: &Array1<f64>) -> Result<Array1<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEnergy(format!(
            "logits contain a non-finite value: {logits:?}"
        )));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = logits.mapv(|v| (v - max).exp());
    let total = out.sum();
    out /= total;
    Ok(out)
}

/// KL divergence Σ p log(p/q) with the convention 0·log 0 = 0.
pub fn kl(p: &Array1<f64>, q: &Array1<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "kl over distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q.iter()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::SupportViolation(format!(
                "q[{i}] = 0 while p[{i}] = {pi}"
            )));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// The actor's regression target at one state-action pair:
/// `τ_{k+1}·(β_k⁻¹(1+2λ̄ȳ)·Q − β_k⁻¹λ̄·W + τ_k⁻¹·f_prev)`.
///
/// `q_est`, `w_est`, `f_prev` are the critic and previous-energy values
/// already evaluated at the pair. The W coefficient is negative; the
/// improvement objective requires it even though one statement of the update
/// flips the sign.
#[allow(clippy::too_many_arguments)]
pub fn regression_target(
    q_est: f64,
    w_est: f64,
    f_prev: f64,
    lambda_bar: f64,
    y_bar: f64,
    beta_k: f64,
    tau_k: f64,
    tau_k1: f64,
) -> f64 {
    debug_assert!(beta_k > 0.0 && tau_k > 0.0 && tau_k1 > 0.0);
    tau_k1
        * ((1.0 + 2.0 * lambda_bar * y_bar) * q_est / beta_k - lambda_bar * w_est / beta_k
            + f_prev / tau_k)
}

/// Closed-form KL-regularized improvement at one state:
/// `π̂(·|s) ∝ exp(β_k⁻¹(1+2λ̄ȳ)Q(s,·) − β_k⁻¹λ̄W(s,·) + τ_k⁻¹f_prev(s,·))`.
#[allow(clippy::too_many_arguments)]
pub fn closed_form_improved_policy(
    q_row: &Array1<f64>,
    w_row: &Array1<f64>,
    f_prev_row: &Array1<f64>,
    lambda_bar: f64,
    y_bar: f64,
    beta_k: f64,
    tau_k: f64,
) -> Result<Array1<f64>> {
    if q_row.len() != w_row.len() || q_row.len() != f_prev_row.len() {
        return Err(Error::DimensionMismatch(format!(
            "rows of length {}, {}, {}",
            q_row.len(),
            w_row.len(),
            f_prev_row.len()
        )));
    }
    let coeff = (1.0 + 2.0 * lambda_bar * y_bar) / beta_k;
    let logits = Array1::from_shape_fn(q_row.len(), |a| {
        coeff * q_row[a] - lambda_bar * w_row[a] / beta_k + f_prev_row[a] / tau_k
    });
    softmax(&logits)
}
