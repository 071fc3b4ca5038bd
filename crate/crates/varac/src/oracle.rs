//! Ground-truth machinery: exact saddle-point search on small MDPs,
//! brute-force truncated-sum value oracles, exact identity verification
//! (performance difference, Fenchel), and density-ratio diagnostics.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::learner::lagrangian;
use crate::mdp::{exact_evaluation, stationary_distribution, StationaryPolicy, TabularMdp};

const MAX_POLICY_ITERATIONS: usize = 1000;
/// Enumeration guard: deterministic-policy searches bail out beyond this.
const MAX_ENUMERATION: f64 = 1e6;

/// Grid resolutions used by `saddle_search` and the resulting bracketing
/// gaps, emitted alongside the solution so downstream tolerances can account
/// for them.
#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub lambda_res: f64,
    pub y_res: f64,
    pub primal_res: f64,
    /// Coarsest gap |g(λ_{i+1}) − g(λ_i)| between neighboring dual grid
    /// evaluations.
    pub neighbor_gap: f64,
    /// g(λ*) − L(λ*, π*, y*): dual value at the grid arg-min minus the
    /// Lagrangian at the returned primal point (≈ 0 when a saddle exists;
    /// strictly positive when the constrained optimum is randomized).
    pub duality_gap: f64,
}

impl Certificate {
    /// Allowance under which the saddle inequalities are certified: the
    /// duality gap plus the y-grid snap error of the dual evaluations.
    pub fn slack(&self, n_cap: f64) -> f64 {
        self.duality_gap.max(0.0) + n_cap * self.y_res * self.y_res + 1e-9
    }
}

/// Output of `saddle_search`.
#[derive(Debug, Clone)]
pub struct SaddleSolution {
    /// Dual grid arg-min of g(λ) over [0, N].
    pub lambda_star: f64,
    /// Fenchel argmax, equal to ρ(π*).
    pub y_star: f64,
    /// Best constraint-feasible stationary policy found by the primal search.
    pub pi_star: StationaryPolicy,
    /// L(λ*, π*, y*).
    pub value: f64,
    pub certificate: Certificate,
}

impl SaddleSolution {
    pub fn to_json_string(&self) -> String {
        let rows: Vec<Vec<f64>> = self
            .pi_star
            .probs()
            .outer_iter()
            .map(|r| r.to_vec())
            .collect();
        let value = serde_json::json!({
            "lambda_star": self.lambda_star,
            "y_star": self.y_star,
            "pi_star": rows,
            "value": self.value,
            "certificate": self.certificate,
        });
        serde_json::to_string_pretty(&value).expect("serializable")
    }
}

/// Density-ratio diagnostics and identity residuals. `density_diagnostics`
/// fills the two ratio moments; the remaining fields are for callers that
/// also hold critic estimates (c_k, d_k are critic mean squared errors).
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub phi_star: f64,
    pub psi_star: f64,
    pub perf_diff_residual: Option<f64>,
    pub c_k: Option<f64>,
    pub d_k: Option<f64>,
}

/// Builds the modified-reward MDP with r̃ = (1+2λy)·r − λ·r².
fn modified_mdp(mdp: &TabularMdp, lambda: f64, y: f64) -> Result<TabularMdp> {
    let coef = 1.0 + 2.0 * lambda * y;
    let r_mod = mdp.reward().mapv(|r| coef * r - lambda * r * r);
    TabularMdp::new(mdp.transition().clone(), r_mod)
}

/// Exact solution of the inner maximization at fixed (λ, y): a deterministic
/// policy maximizing the long-run average of r̃ = (1+2λy)r − λr², found by
/// Howard policy iteration with ties broken toward the lowest action index.
/// Returns the policy and L(λ, π, y) = ρ̃(π) − λy² + λα.
pub fn inner_max_policy(
    mdp: &TabularMdp,
    lambda: f64,
    y: f64,
    alpha: f64,
) -> Result<(StationaryPolicy, f64)> {
    if lambda < 0.0 {
        return Err(Error::SpecInvalid(format!(
            "multiplier must be nonnegative, got {lambda}"
        )));
    }
    let tilde = modified_mdp(mdp, lambda, y)?;
    let n = tilde.n_states();
    let m = tilde.n_actions();
    let mut actions = vec![0usize; n];
    for _ in 0..MAX_POLICY_ITERATIONS {
        let pi = StationaryPolicy::deterministic(m, &actions)?;
        let eval = exact_evaluation(&tilde, &pi)?;
        let tol = 1e-12 * (1.0 + eval.q.iter().fold(0.0f64, |acc, v| acc.max(v.abs())));
        let mut next = vec![0usize; n];
        for s in 0..n {
            let row = eval.q.row(s);
            let best = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            next[s] = (0..m)
                .find(|&a| row[a] >= best - tol)
                .expect("nonempty action set");
        }
        if next == actions {
            let value = eval.rho - lambda * y * y + lambda * alpha;
            return Ok((pi, value));
        }
        actions = next;
    }
    Err(Error::InvariantViolation(
        "policy iteration did not converge".into(),
    ))
}

/// The dual function g(λ) = max over the y-grid of the inner maximum value.
fn dual_value(mdp: &TabularMdp, lambda: f64, alpha: f64, y_res: f64) -> Result<f64> {
    let m_bound = mdp.reward_bound();
    let mut best = f64::NEG_INFINITY;
    let steps = (2.0 * m_bound / y_res).ceil() as usize;
    for i in 0..=steps {
        let y = -m_bound + i as f64 * y_res;
        let (_, value) = inner_max_policy(mdp, lambda, y.min(m_bound), alpha)?;
        best = best.max(value);
    }
    Ok(best)
}

/// Long-run moments of a policy: (ρ, variance).
fn policy_moments(mdp: &TabularMdp, pi: &StationaryPolicy) -> Result<(f64, f64)> {
    let e = exact_evaluation(mdp, pi)?;
    Ok((e.rho, e.variance))
}

/// Best constraint-feasible stationary policy: maximize ρ(π) subject to
/// Λ(π) ≤ α. Exhaustive over deterministic policies, then (for two-action
/// MDPs) a per-state product grid over randomization levels at resolution
/// `res`, then shrinking coordinate refinement. Non-unichain candidates are
/// skipped.
fn best_feasible_policy(
    mdp: &TabularMdp,
    alpha: f64,
    res: f64,
) -> Result<(StationaryPolicy, f64, f64)> {
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let feas_tol = 1e-12;
    let mut best: Option<(StationaryPolicy, f64, f64)> = None;
    let consider = |pi: StationaryPolicy, rho: f64, var: f64, best: &mut Option<_>| {
        if var <= alpha + feas_tol
            && best
                .as_ref()
                .map(|(_, r, _): &(StationaryPolicy, f64, f64)| rho > *r)
                .unwrap_or(true)
        {
            *best = Some((pi, rho, var));
        }
    };

    if (m as f64).powi(n as i32) > MAX_ENUMERATION {
        return Err(Error::SpecInvalid(format!(
            "deterministic enumeration over {m}^{n} policies exceeds the desk-scale guard"
        )));
    }
    let total = m.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut actions = vec![0usize; n];
        for slot in actions.iter_mut() {
            *slot = c % m;
            c /= m;
        }
        let pi = StationaryPolicy::deterministic(m, &actions)?;
        match policy_moments(mdp, &pi) {
            Ok((rho, var)) => consider(pi, rho, var, &mut best),
            Err(Error::NonUnichain(_)) => continue,
            Err(e) => return Err(e),
        }
    }

    if m == 2 {
        let levels = (1.0 / res).round() as usize;
        let grid_points = (levels + 1).pow(n as u32);
        if (grid_points as f64) <= 2.0 * MAX_ENUMERATION {
            for code in 0..grid_points {
                let mut c = code;
                let mut probs = Array2::zeros((n, 2));
                for s in 0..n {
                    let p = (c % (levels + 1)) as f64 * res;
                    c /= levels + 1;
                    probs[[s, 0]] = 1.0 - p;
                    probs[[s, 1]] = p;
                }
                let pi = StationaryPolicy::new(probs)?;
                match policy_moments(mdp, &pi) {
                    Ok((rho, var)) => consider(pi, rho, var, &mut best),
                    Err(Error::NonUnichain(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        // Shrinking per-coordinate refinement around the incumbent.
        if let Some((pi0, _, _)) = &best {
            let mut current: Vec<f64> = (0..n).map(|s| pi0.prob(s, 1)).collect();
            let mut window = res;
            for _ in 0..60 {
                for s in 0..n {
                    let base = current[s];
                    let mut local_best = best.clone();
                    for cand in [
                        base - window,
                        base - window / 3.0,
                        base + window / 3.0,
                        base + window,
                    ] {
                        let p = cand.clamp(0.0, 1.0);
                        let mut probs = Array2::zeros((n, 2));
                        for (j, &pj) in current.iter().enumerate() {
                            probs[[j, 0]] = 1.0 - if j == s { p } else { pj };
                            probs[[j, 1]] = if j == s { p } else { pj };
                        }
                        let pi = StationaryPolicy::new(probs)?;
                        match policy_moments(mdp, &pi) {
                            Ok((rho, var)) => consider(pi, rho, var, &mut local_best),
                            Err(Error::NonUnichain(_)) => continue,
                            Err(e) => return Err(e),
                        }
                    }
                    if let Some((pi_new, _, _)) = &local_best {
                        current = (0..n).map(|j| pi_new.prob(j, 1)).collect();
                    }
                    best = local_best;
                }
                window *= 0.65;
            }
        }
    }

    best.ok_or_else(|| {
        Error::SpecInvalid(format!(
            "no feasible policy found for variance budget {alpha}"
        ))
    })
}

/// Grid-certified search for the constrained problem's saddle data.
///
/// The dual side evaluates g(λ) = max_y max_π L(λ, π, y) on a λ-grid over
/// [0, N] (exact inner maximization per grid point) and takes the arg-min.
/// The primal side searches stationary-policy mixtures for the best feasible
/// policy, since variance-constrained optima may be randomized while g only
/// sees deterministic policies; the certificate records the gap between the
/// two, and the saddle inequalities hold up to that gap.
pub fn saddle_search(
    mdp: &TabularMdp,
    alpha: f64,
    n_cap: f64,
    lambda_grid_res: f64,
    y_grid_res: f64,
) -> Result<SaddleSolution> {
    if !(lambda_grid_res > 0.0 && y_grid_res > 0.0) {
        return Err(Error::SpecInvalid(format!(
            "grid resolutions must be positive, got {lambda_grid_res} and {y_grid_res}"
        )));
    }
    let steps = (n_cap / lambda_grid_res).ceil() as usize;
    let mut g = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let lambda = (i as f64 * lambda_grid_res).min(n_cap);
        g.push((lambda, dual_value(mdp, lambda, alpha, y_grid_res)?));
    }
    let (lambda_star, g_star) = g
        .iter()
        .copied()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite dual values"))
        .expect("nonempty grid");
    let neighbor_gap = g
        .windows(2)
        .map(|w| (w[1].1 - w[0].1).abs())
        .fold(0.0f64, f64::max);

    let primal_res = 0.02;
    let (pi_star, rho_star, var_star) = best_feasible_policy(mdp, alpha, primal_res)?;
    let y_star = rho_star;
    let eval = exact_evaluation(mdp, &pi_star)?;
    let value = lagrangian(lambda_star, eval.rho, eval.eta, y_star, alpha);
    debug_assert!((value - (rho_star - lambda_star * (var_star - alpha))).abs() < 1e-9);

    Ok(SaddleSolution {
        lambda_star,
        y_star,
        pi_star,
        value,
        certificate: Certificate {
            lambda_res: lambda_grid_res,
            y_res: y_grid_res,
            primal_res,
            neighbor_gap,
            duality_gap: g_star - value,
        },
    })
}

/// Truncated-sum definition of the differential value:
/// `Σ_{t=0}^{T_trunc} E[g(r_t) − z | s_0 = s, a_0 = a]` by forward dynamic
/// programming on the state distribution, with z the exact long-run mean of
/// g(r) under π.
pub fn truncated_value_oracle(
    mdp: &TabularMdp,
    pi: &StationaryPolicy,
    squared: bool,
    t_trunc: usize,
) -> Result<Array2<f64>> {
    if t_trunc < 1 {
        return Err(Error::SpecInvalid("t_trunc must be at least 1".into()));
    }
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let e = exact_evaluation(mdp, pi)?;
    let z = if squared { e.eta } else { e.rho };
    let g = |r: f64| if squared { r * r } else { r };
    // Expected centered reward per state under π.
    let mut state_reward = Array1::zeros(n);
    for s in 0..n {
        let mut acc = 0.0;
        for a in 0..m {
            acc += pi.prob(s, a) * g(mdp.r(s, a));
        }
        state_reward[s] = acc - z;
    }
    let chain = mdp.chain_matrix(pi);
    let mut out = Array2::zeros((n, m));
    for s0 in 0..n {
        for a0 in 0..m {
            let mut total = g(mdp.r(s0, a0)) - z;
            // d holds the state distribution at time t ≥ 1.
            let mut d: Array1<f64> = mdp.transition().slice(ndarray::s![s0, a0, ..]).to_owned();
            for _t in 1..=t_trunc {
                total += d.dot(&state_reward);
                d = d.dot(&chain);
            }
            out[[s0, a0]] = total;
        }
    }
    Ok(out)
}

/// Residual of the performance-difference identity at (λ, y):
/// `[L(λ,π₁,y) − L(λ,π₂,y)] − E_{ν₁}[⟨(1+2λy)Q^{π₂} − λW^{π₂}, π₁ − π₂⟩]`.
pub fn verify_performance_difference(
    mdp: &TabularMdp,
    lambda: f64,
    y: f64,
    pi1: &StationaryPolicy,
    pi2: &StationaryPolicy,
) -> Result<f64> {
    let e1 = exact_evaluation(mdp, pi1)?;
    let e2 = exact_evaluation(mdp, pi2)?;
    let lhs = lagrangian(lambda, e1.rho, e1.eta, y, 0.0) - lagrangian(lambda, e2.rho, e2.eta, y, 0.0);
    let coef = 1.0 + 2.0 * lambda * y;
    let mut rhs = 0.0;
    for s in 0..mdp.n_states() {
        let mut inner = 0.0;
        for a in 0..mdp.n_actions() {
            inner += (coef * e2.q[[s, a]] - lambda * e2.w[[s, a]])
                * (pi1.prob(s, a) - pi2.prob(s, a));
        }
        rhs += e1.nu[s] * inner;
    }
    Ok((lhs - rhs).abs())
}

/// Exact density-ratio moments of eq-style diagnostics:
/// `φ* = E_{σ_k}[|π_ref/π_0 − π_k/π_0|²]^{1/2}` and
/// `ψ* = E_{σ_k}[|σ_ref/σ_k − ν_ref/ν_k|²]^{1/2}`.
pub fn density_diagnostics(
    mdp: &TabularMdp,
    pi_ref: &StationaryPolicy,
    pi_k: &StationaryPolicy,
    pi_0: &StationaryPolicy,
) -> Result<Diagnostics> {
    let nu_ref = stationary_distribution(mdp, pi_ref)?;
    let nu_k = stationary_distribution(mdp, pi_k)?;
    let mut phi_sq = 0.0;
    let mut psi_sq = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let sigma_k = nu_k[s] * pi_k.prob(s, a);
            if sigma_k == 0.0 {
                continue;
            }
            let p0 = pi_0.prob(s, a);
            if p0 == 0.0 {
                return Err(Error::DivisionBySupportZero(format!(
                    "pi_0({a}|{s}) = 0 under positive sigma_k weight"
                )));
            }
            let dphi = pi_ref.prob(s, a) / p0 - pi_k.prob(s, a) / p0;
            phi_sq += sigma_k * dphi * dphi;
            if nu_k[s] == 0.0 {
                return Err(Error::DivisionBySupportZero(format!(
                    "nu_k({s}) = 0 under positive sigma_k weight"
                )));
            }
            let sigma_ref = nu_ref[s] * pi_ref.prob(s, a);
            let dpsi = sigma_ref / sigma_k - nu_ref[s] / nu_k[s];
            psi_sq += sigma_k * dpsi * dpsi;
        }
    }
    Ok(Diagnostics {
        phi_star: phi_sq.sqrt(),
        psi_star: psi_sq.sqrt(),
        perf_diff_residual: None,
        c_k: None,
        d_k: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate, EnvSpec, Family};
    use crate::mdp::tests::random_ergodic_mdp;
    use crate::rng::{rng_from_seed, RngCore};
    use ndarray::{array, Array3};

    fn one_state_two_action() -> TabularMdp {
        let p = Array3::from_elem((1, 2, 1), 1.0);
        TabularMdp::new(p, array![[1.0, 0.0]]).unwrap()
    }

    #[test]
    fn inner_max_greedy_at_zero_lambda() {
        let mdp = one_state_two_action();
        let (pi, value) = inner_max_policy(&mdp, 0.0, 0.0, 0.1).unwrap();
        assert_eq!(pi.prob(0, 0), 1.0);
        assert!((value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inner_max_tie_breaks_to_lowest_action() {
        let mdp = one_state_two_action();
        // r̃ = r − r² = [0, 0]: tie; action 0 chosen; value = 0 + λα.
        let (pi, value) = inner_max_policy(&mdp, 1.0, 0.0, 0.3).unwrap();
        assert_eq!(pi.prob(0, 0), 1.0);
        assert!((value - 0.3).abs() < 1e-12);
    }

    #[test]
    fn inner_max_matches_exhaustive_enumeration() {
        let mdp = random_ergodic_mdp(4, 2, 0.05, 131);
        let alpha = 0.15;
        for (lambda, y) in [(0.0, 0.0), (0.5, 0.2), (1.5, -0.4), (3.0, 0.05)] {
            let (pi, value) = inner_max_policy(&mdp, lambda, y, alpha).unwrap();
            let mut brute = f64::NEG_INFINITY;
            for code in 0..16 {
                let actions: Vec<usize> = (0..4).map(|s| (code >> s) & 1).collect();
                let cand = StationaryPolicy::deterministic(2, &actions).unwrap();
                let e = exact_evaluation(&mdp, &cand).unwrap();
                brute = brute.max(lagrangian(lambda, e.rho, e.eta, y, alpha));
            }
            assert!(
                (value - brute).abs() <= 1e-10,
                "lambda {lambda} y {y}: {value} vs {brute}"
            );
            let e = exact_evaluation(&mdp, &pi).unwrap();
            assert!((lagrangian(lambda, e.rho, e.eta, y, alpha) - value).abs() < 1e-10);
        }
    }

    #[test]
    fn saddle_slack_constraint_gives_zero_lambda() {
        let mdp = random_ergodic_mdp(3, 2, 0.05, 137);
        // Rewards lie in [−1, 1], so every policy's variance is below 1.1.
        let alpha = 1.1;
        let sol = saddle_search(&mdp, alpha, 2.0, 0.02, 0.02).unwrap();
        assert_eq!(sol.lambda_star, 0.0);
        let (_, unconstrained) = inner_max_policy(&mdp, 0.0, 0.0, alpha).unwrap();
        let e = exact_evaluation(&mdp, &sol.pi_star).unwrap();
        assert!(
            (e.rho - unconstrained).abs() <= 1e-6,
            "{} vs {unconstrained}",
            e.rho
        );
        assert!(sol.certificate.duality_gap.abs() <= 1e-5);
    }

    #[test]
    fn saddle_search_solves_portfolio() {
        let mdp = generate(&EnvSpec::new(Family::Portfolio, 3, 2, 0)).unwrap();
        let sol = saddle_search(&mdp, 0.1, 2.0, 0.01, 0.01).unwrap();
        // Dual: g(λ) = max(0.44 + 0.1(λ−0.4), 0.44 − 0.15(λ−0.4)) has its
        // minimum at λ = 0.4 with value 0.44.
        assert!(
            (sol.lambda_star - 0.4).abs() <= 0.01 + 1e-12,
            "lambda {}",
            sol.lambda_star
        );
        // Primal: ρ* = 0.4 + 0.1·q* with q* = 13 − √159.
        let q_star = 13.0 - 159.0_f64.sqrt();
        let rho_star = 0.4 + 0.1 * q_star;
        let e = exact_evaluation(&mdp, &sol.pi_star).unwrap();
        assert!((e.rho - rho_star).abs() <= 1e-5, "rho {} vs {rho_star}", e.rho);
        assert!((sol.y_star - e.rho).abs() <= 1e-12);
        assert!(e.variance <= 0.1 + 1e-9);
        // The optimum saturates the budget, so the randomized primal sits a
        // small but strictly positive duality gap below g(λ*) = 0.44.
        assert!(
            sol.certificate.duality_gap > 5e-4 && sol.certificate.duality_gap < 2e-3,
            "gap {}",
            sol.certificate.duality_gap
        );
        assert!((sol.value - (rho_star)).abs() <= 1e-4, "value {}", sol.value);
        let json = sol.to_json_string();
        assert!(json.contains("lambda_star") && json.contains("certificate"));
    }

    #[test]
    fn saddle_matches_simplex_brute_force() {
        let mdp = random_ergodic_mdp(3, 2, 0.05, 139);
        let alpha = 0.05;
        for lambda in [0.0, 0.3, 0.8] {
            let g = dual_value(&mdp, lambda, alpha, 0.005).unwrap();
            // Hierarchical product-grid maximization of ρ − λ(Λ − α) over
            // stationary policies, refined to well below 1e-3 resolution.
            let mut best = f64::NEG_INFINITY;
            let mut best_p = vec![0.0; 3];
            let coarse = 20usize;
            for code in 0..(coarse + 1).pow(3) {
                let mut c = code;
                let mut probs = Array2::zeros((3, 2));
                let mut ps = vec![0.0; 3];
                for s in 0..3 {
                    let p = (c % (coarse + 1)) as f64 / coarse as f64;
                    c /= coarse + 1;
                    ps[s] = p;
                    probs[[s, 0]] = 1.0 - p;
                    probs[[s, 1]] = p;
                }
                let pi = StationaryPolicy::new(probs).unwrap();
                if let Ok(e) = exact_evaluation(&mdp, &pi) {
                    let v = e.rho - lambda * (e.variance - alpha);
                    if v > best {
                        best = v;
                        best_p = ps;
                    }
                }
            }
            let mut window = 0.05;
            for _ in 0..40 {
                for s in 0..3 {
                    for cand in [-window, -window / 3.0, window / 3.0, window] {
                        let p = (best_p[s] + cand).clamp(0.0, 1.0);
                        let mut ps = best_p.clone();
                        ps[s] = p;
                        let probs = array![
                            [1.0 - ps[0], ps[0]],
                            [1.0 - ps[1], ps[1]],
                            [1.0 - ps[2], ps[2]]
                        ];
                        let pi = StationaryPolicy::new(probs).unwrap();
                        if let Ok(e) = exact_evaluation(&mdp, &pi) {
                            let v = e.rho - lambda * (e.variance - alpha);
                            if v > best {
                                best = v;
                                best_p = ps;
                            }
                        }
                    }
                }
                window *= 0.7;
            }
            assert!(
                (g - best).abs() <= 1e-4,
                "lambda {lambda}: dual {g} vs brute {best}"
            );
        }
    }

    #[test]
    fn truncated_oracle_trivial_cases() {
        // Constant reward: all centered contributions vanish.
        let mdp = TabularMdp::new(
            Array3::from_elem((2, 2, 2), 0.5),
            array![[0.3, 0.3], [0.3, 0.3]],
        )
        .unwrap();
        let pi = StationaryPolicy::uniform(2, 2);
        let q = truncated_value_oracle(&mdp, &pi, false, 50).unwrap();
        for v in q.iter() {
            assert!(v.abs() < 1e-12);
        }
        // 1-state MDP: only t = 0 contributes.
        let mdp = TabularMdp::new(Array3::from_elem((1, 2, 1), 1.0), array![[0.9, 0.1]]).unwrap();
        let pi = StationaryPolicy::new(array![[0.25, 0.75]]).unwrap();
        let e = exact_evaluation(&mdp, &pi).unwrap();
        let q = truncated_value_oracle(&mdp, &pi, false, 1000).unwrap();
        for a in 0..2 {
            assert!((q[[0, a]] - (mdp.r(0, a) - e.rho)).abs() < 1e-9);
        }
        let w = truncated_value_oracle(&mdp, &pi, true, 1000).unwrap();
        for a in 0..2 {
            let r = mdp.r(0, a);
            assert!((w[[0, a]] - (r * r - e.eta)).abs() < 1e-9);
        }
    }

    #[test]
    fn truncated_oracle_matches_poisson_solution() {
        let mdp = random_ergodic_mdp(4, 2, 0.05, 149);
        let pi = StationaryPolicy::new(array![
            [0.7, 0.3],
            [0.2, 0.8],
            [0.5, 0.5],
            [0.9, 0.1]
        ])
        .unwrap();
        let e = exact_evaluation(&mdp, &pi).unwrap();
        let q = truncated_value_oracle(&mdp, &pi, false, 100_000).unwrap();
        let w = truncated_value_oracle(&mdp, &pi, true, 100_000).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                assert!(
                    (q[[s, a]] - e.q[[s, a]]).abs() <= 1e-6,
                    "q[{s}][{a}]: {} vs {}",
                    q[[s, a]],
                    e.q[[s, a]]
                );
                assert!(
                    (w[[s, a]] - e.w[[s, a]]).abs() <= 1e-6,
                    "w[{s}][{a}]: {} vs {}",
                    w[[s, a]],
                    e.w[[s, a]]
                );
            }
        }
    }

    #[test]
    fn performance_difference_identity() {
        let mdp = random_ergodic_mdp(4, 2, 0.05, 151);
        let pi = StationaryPolicy::new(array![
            [0.6, 0.4],
            [0.3, 0.7],
            [0.5, 0.5],
            [0.8, 0.2]
        ])
        .unwrap();
        // Identical policies: residual is exactly zero.
        let r = verify_performance_difference(&mdp, 0.7, 0.2, &pi, &pi).unwrap();
        assert_eq!(r, 0.0);

        // λ = 0 reduces to the plain average-reward difference form.
        let pi2 = StationaryPolicy::uniform(4, 2);
        let r = verify_performance_difference(&mdp, 0.0, 0.9, &pi, &pi2).unwrap();
        assert!(r <= 1e-10, "residual {r}");

        // Random (λ, y, π₁, π₂) probes.
        let mut rng = rng_from_seed(157);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let lambda = 5.0 * rng.random::<f64>();
            let y = 2.0 * rng.random::<f64>() - 1.0;
            let mut mk = || {
                let mut probs = Array2::zeros((4, 2));
                for s in 0..4 {
                    let p = 0.05 + 0.9 * rng.random::<f64>();
                    probs[[s, 0]] = p;
                    probs[[s, 1]] = 1.0 - p;
                }
                StationaryPolicy::new(probs).unwrap()
            };
            let p1 = mk();
            let p2 = mk();
            worst = worst.max(verify_performance_difference(&mdp, lambda, y, &p1, &p2).unwrap());
        }
        assert!(worst <= 1e-8, "max residual {worst}");
    }

    #[test]
    fn density_diagnostics_identities() {
        let mdp = random_ergodic_mdp(3, 2, 0.05, 163);
        let pi_0 = StationaryPolicy::uniform(3, 2);
        let pi_k = StationaryPolicy::new(array![[0.6, 0.4], [0.3, 0.7], [0.5, 0.5]]).unwrap();
        // Identical reference and current policy: both moments vanish.
        let d = density_diagnostics(&mdp, &pi_k, &pi_k, &pi_0).unwrap();
        assert!(d.phi_star.abs() < 1e-12 && d.psi_star.abs() < 1e-12);
        // Any strictly positive π_0 gives the same vanishing result.
        let skew = StationaryPolicy::new(array![[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]]).unwrap();
        let d = density_diagnostics(&mdp, &pi_k, &pi_k, &skew).unwrap();
        assert!(d.phi_star.abs() < 1e-12 && d.psi_star.abs() < 1e-12);
    }

    #[test]
    fn density_diagnostics_match_direct_summation() {
        let mdp = random_ergodic_mdp(4, 2, 0.05, 167);
        let pi_ref = StationaryPolicy::new(array![
            [0.7, 0.3],
            [0.4, 0.6],
            [0.25, 0.75],
            [0.55, 0.45]
        ])
        .unwrap();
        let pi_k = StationaryPolicy::new(array![
            [0.5, 0.5],
            [0.6, 0.4],
            [0.35, 0.65],
            [0.2, 0.8]
        ])
        .unwrap();
        let pi_0 = StationaryPolicy::uniform(4, 2);
        let d = density_diagnostics(&mdp, &pi_ref, &pi_k, &pi_0).unwrap();

        let nu_ref = stationary_distribution(&mdp, &pi_ref).unwrap();
        let nu_k = stationary_distribution(&mdp, &pi_k).unwrap();
        let mut phi = 0.0;
        let mut psi = 0.0;
        for s in 0..4 {
            for a in 0..2 {
                let w = nu_k[s] * pi_k.prob(s, a);
                let t1 = (pi_ref.prob(s, a) - pi_k.prob(s, a)) / pi_0.prob(s, a);
                phi += w * t1 * t1;
                let t2 = (nu_ref[s] * pi_ref.prob(s, a)) / w - nu_ref[s] / nu_k[s];
                psi += w * t2 * t2;
            }
        }
        assert!((d.phi_star - phi.sqrt()).abs() <= 1e-12);
        assert!((d.psi_star - psi.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn density_diagnostics_reject_zero_support() {
        let mdp = random_ergodic_mdp(3, 2, 0.05, 173);
        let pi_k = StationaryPolicy::new(array![[0.6, 0.4], [0.3, 0.7], [0.5, 0.5]]).unwrap();
        let pi_0 = StationaryPolicy::new(array![[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]]).unwrap();
        match density_diagnostics(&mdp, &pi_k, &pi_k, &pi_0) {
            Err(Error::DivisionBySupportZero(msg)) => assert!(msg.contains("pi_0")),
            other => panic!("expected support error, got {other:?}"),
        }
    }

    #[test]
    fn saddle_inequalities_hold_up_to_certificate() {
        let mdp = generate(&EnvSpec::new(Family::Portfolio, 3, 2, 0)).unwrap();
        let (alpha, n_cap) = (0.1, 2.0);
        let sol = saddle_search(&mdp, alpha, n_cap, 0.01, 0.01).unwrap();
        let slack = sol.certificate.slack(n_cap);
        let mut rng = rng_from_seed(179);
        let e_star = exact_evaluation(&mdp, &sol.pi_star).unwrap();
        for i in 0..1000 {
            // Max side: no (π, y) beats the solution value by more than the
            // certified slack at λ = λ*.
            let mut probs = Array2::zeros((3, 2));
            for s in 0..3 {
                let p = rng.random::<f64>();
                probs[[s, 0]] = p;
                probs[[s, 1]] = 1.0 - p;
            }
            let pi = StationaryPolicy::new(probs).unwrap();
            let y = 2.0 * rng.random::<f64>() - 1.0;
            if let Ok(e) = exact_evaluation(&mdp, &pi) {
                let l = lagrangian(sol.lambda_star, e.rho, e.eta, y, alpha);
                assert!(
                    l <= sol.value + slack + 1e-9,
                    "probe {i}: L {l} exceeds {} + {slack}",
                    sol.value
                );
            }
            // Min side: no λ drops L(λ, π*, y*) below the value by more than
            // the certified slack.
            let lambda = n_cap * rng.random::<f64>();
            let l = lagrangian(lambda, e_star.rho, e_star.eta, sol.y_star, alpha);
            assert!(
                l >= sol.value - slack - 1e-9,
                "probe {i}: L {l} under {} − {slack}",
                sol.value
            );
        }
    }

    #[test]
    fn dual_value_net_of_alpha_term_is_monotone() {
        // max_π [ρ − λΛ] is a pointwise maximum of affine functions of λ with
        // non-positive slopes, hence non-increasing; the +λα offset is
        // excluded since it re-adds slope +α.
        for mdp in [
            generate(&EnvSpec::new(Family::Portfolio, 3, 2, 0)).unwrap(),
            random_ergodic_mdp(3, 2, 0.05, 181),
        ] {
            let alpha = 0.1;
            let mut prev = f64::INFINITY;
            for i in 0..=40 {
                let lambda = i as f64 * 0.05;
                let g = dual_value(&mdp, lambda, alpha, 0.02).unwrap() - lambda * alpha;
                assert!(
                    g <= prev + 1e-9,
                    "lambda {lambda}: {g} above previous {prev}"
                );
                prev = g;
            }
        }
    }
}
