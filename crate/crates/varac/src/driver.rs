//! Outer loop of the saddle-point learner.
//!
//! One outer iteration keeps a fixed line order: set schedules, run TD for
//! both critics on the current batch, compute the multiplier step, regress
//! the actor against the pre-step multiplier, refresh the policy at the new
//! temperature, then resample and re-estimate the reward moments for the
//! next round. Per-iteration diagnostics are emitted under a pinned CSV
//! schema; exact-reference columns are filled when they are available for
//! the run mode.

use std::time::Instant;

use ndarray::Array2;

use crate::debug_invariants_enabled;
use crate::error::{Error, Result};
use crate::learner::{
    actor_sgd, lagrangian, td_policy_evaluation, update_lambda, update_y, Critic, LearnerConfig,
    RunMode, SaddleIterate, Schedule, TdKind,
};
use crate::mdp::{
    estimate_rho_eta, exact_evaluation, sample_trajectory, stationary_distribution,
    StationaryPolicy, TabularMdp, Trajectory,
};
use crate::neural::DeepNet;
use crate::oracle::{saddle_search, SaddleSolution};
use crate::policy::{kl, regression_target, Energy, EnergyPolicy};
use crate::rng::split;

/// Stream tags for deriving independent sub-seeds from the run seed.
const LANE_TRAJ: u64 = 1;
const LANE_ACTOR_A0: u64 = 2;
const LANE_ACTOR_INIT: u64 = 3;
const LANE_CRITIC_Q_INIT: u64 = 4;
const LANE_CRITIC_W_INIT: u64 = 5;

/// Stepsize and temperature schedule at outer iteration `k` of `k_outer`:
/// `τ_{k+1} = β√K/(k+1)`, `β_k = β√K`, `γ_k = γ√K`.
pub fn schedules(k: usize, k_outer: usize, beta: f64, gamma: f64) -> Schedule {
    debug_assert!(k < k_outer);
    debug_assert!(beta > 0.0 && gamma > 0.0);
    let root_k = (k_outer as f64).sqrt();
    Schedule {
        beta_k: beta * root_k,
        gamma_k: gamma * root_k,
        tau_next: beta * root_k / (k + 1) as f64,
    }
}

/// Column order of the per-iteration metrics CSV.
pub const CSV_HEADER: &str = "k,lambda,y,rho_hat,eta_hat,var_hat,lagrangian,exact_rho,exact_eta,\
                              exact_var,bellman_q_mse,bellman_w_mse,gap,kl_to_opt,wall_time_ms";

/// Diagnostics for one outer iteration. Row `k` describes the state the
/// iteration started from — (λ̄_k, ȳ_k, π_k) and the moment estimates for
/// π_k — together with the critics fitted during the iteration and the
/// iteration's wall time.
#[derive(Debug, Clone)]
pub struct IterationMetrics {
    pub k: usize,
    pub lambda_bar: f64,
    pub y_bar: f64,
    pub rho_hat: f64,
    pub eta_hat: f64,
    /// η̄ − ρ̄²; nonnegative up to float rounding because both moments come
    /// from the same sample (or are exact).
    pub var_hat: f64,
    /// L(λ̄_k, π_k, ȳ_k) from the run's own moment estimates.
    pub lagrangian_value: f64,
    pub exact_rho: Option<f64>,
    pub exact_eta: Option<f64>,
    pub exact_var: Option<f64>,
    /// Mean squared residual of the fitted Q critic against the exact
    /// Bellman operator of π_k.
    pub bellman_q_mse: f64,
    pub bellman_w_mse: f64,
    /// L(λ*, π*, y*) − L(λ̄_k, π_k, ȳ_k) with π_k's exact moments; present
    /// when a saddle oracle is supplied.
    pub gap: Option<f64>,
    /// ν*-weighted KL(π*(·|s) ‖ π_k(·|s)); exact mode with an oracle only.
    pub kl_to_opt: Option<f64>,
    pub wall_time_ms: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl IterationMetrics {
    /// One CSV line in `CSV_HEADER` order; absent columns are empty strings.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.lambda_bar,
            self.y_bar,
            self.rho_hat,
            self.eta_hat,
            self.var_hat,
            self.lagrangian_value,
            fmt_opt(self.exact_rho),
            fmt_opt(self.exact_eta),
            fmt_opt(self.exact_var),
            self.bellman_q_mse,
            self.bellman_w_mse,
            fmt_opt(self.gap),
            fmt_opt(self.kl_to_opt),
            self.wall_time_ms,
        )
    }

    /// Parses one data line in `CSV_HEADER` order (the inverse of
    /// `to_csv_row`); empty strings map to `None` for the optional columns.
    pub fn from_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 15 {
            return Err(Error::SchemaViolation {
                field: "csv_row".into(),
                message: format!("expected 15 columns, got {}", fields.len()),
            });
        }
        let req = |i: usize, name: &str| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| Error::SchemaViolation {
                field: name.into(),
                message: format!("not a float: {:?}", fields[i]),
            })
        };
        let opt = |i: usize, name: &str| -> Result<Option<f64>> {
            if fields[i].is_empty() {
                Ok(None)
            } else {
                req(i, name).map(Some)
            }
        };
        Ok(Self {
            k: fields[0].parse::<usize>().map_err(|_| Error::SchemaViolation {
                field: "k".into(),
                message: format!("not an index: {:?}", fields[0]),
            })?,
            lambda_bar: req(1, "lambda")?,
            y_bar: req(2, "y")?,
            rho_hat: req(3, "rho_hat")?,
            eta_hat: req(4, "eta_hat")?,
            var_hat: req(5, "var_hat")?,
            lagrangian_value: req(6, "lagrangian")?,
            exact_rho: opt(7, "exact_rho")?,
            exact_eta: opt(8, "exact_eta")?,
            exact_var: opt(9, "exact_var")?,
            bellman_q_mse: req(10, "bellman_q_mse")?,
            bellman_w_mse: req(11, "bellman_w_mse")?,
            gap: opt(12, "gap")?,
            kl_to_opt: opt(13, "kl_to_opt")?,
            wall_time_ms: req(14, "wall_time_ms")?,
        })
    }

    /// Finiteness of every recorded scalar plus the variance floor
    /// `var_hat ≥ −2M²ε` (M = reward bound, ε = machine epsilon).
    fn check(&self, reward_bound: f64) -> Result<()> {
        let scalars = [
            ("lambda", self.lambda_bar),
            ("y", self.y_bar),
            ("rho_hat", self.rho_hat),
            ("eta_hat", self.eta_hat),
            ("var_hat", self.var_hat),
            ("lagrangian", self.lagrangian_value),
            ("bellman_q_mse", self.bellman_q_mse),
            ("bellman_w_mse", self.bellman_w_mse),
            ("wall_time_ms", self.wall_time_ms),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(Error::InvariantViolation(format!(
                    "metrics row {}: {name} is not finite ({v})",
                    self.k
                )));
            }
        }
        let options = [
            ("exact_rho", self.exact_rho),
            ("exact_eta", self.exact_eta),
            ("exact_var", self.exact_var),
            ("gap", self.gap),
            ("kl_to_opt", self.kl_to_opt),
        ];
        for (name, v) in options {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::InvariantViolation(format!(
                        "metrics row {}: {name} is not finite ({v})",
                        self.k
                    )));
                }
            }
        }
        let floor = -2.0 * reward_bound * reward_bound * f64::EPSILON;
        if self.var_hat < floor {
            return Err(Error::InvariantViolation(format!(
                "metrics row {}: var_hat {} below floor {floor}",
                self.k, self.var_hat
            )));
        }
        Ok(())
    }
}

/// Renders the full metrics table with header and trailing newline.
pub fn metrics_to_csv(rows: &[IterationMetrics]) -> String {
    let mut out = String::with_capacity(CSV_HEADER.len() + 1 + rows.len() * 160);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_row());
        out.push('\n');
    }
    out
}

/// Stationary-weighted mean squared residual of `table` against the exact
/// Bellman operator for `pi`: residual = V̂(s,a) − (g(r) − z + E[V̂(s',a')]),
/// with g = identity or square and z the corresponding long-run average,
/// averaged under the stationary state-action distribution `sigma` of `pi`.
/// The weighting matches what TD itself minimizes — pairs the policy never
/// visits contribute nothing, exactly as they contribute no TD updates.
pub fn bellman_residual_mse(
    mdp: &TabularMdp,
    pi: &StationaryPolicy,
    table: &Array2<f64>,
    kind: TdKind,
    z: f64,
    sigma: &Array2<f64>,
) -> f64 {
    let n = mdp.n_states();
    let m = mdp.n_actions();
    // E[V̂(s',·) under π] per successor state, shared across (s,a).
    let mut v_under_pi = vec![0.0; n];
    for (s2, slot) in v_under_pi.iter_mut().enumerate() {
        for a2 in 0..m {
            *slot += pi.prob(s2, a2) * table[[s2, a2]];
        }
    }
    let mut total = 0.0;
    for s in 0..n {
        for a in 0..m {
            let mut cont = 0.0;
            for (s2, &v) in v_under_pi.iter().enumerate() {
                cont += mdp.transition()[[s, a, s2]] * v;
            }
            let r = mdp.r(s, a);
            let g = match kind {
                TdKind::Reward => r,
                TdKind::SquaredReward => r * r,
            };
            let residual = table[[s, a]] - (g - z + cont);
            total += sigma[[s, a]] * residual * residual;
        }
    }
    total
}

/// Everything a finished run hands back: the final primal-dual state, the
/// per-iteration metrics, and the total count of projected iterates that
/// failed the ball re-check (should be zero).
#[derive(Debug)]
pub struct RunOutput {
    pub final_iterate: SaddleIterate,
    pub metrics: Vec<IterationMetrics>,
    pub ball_violations: usize,
}

/// Full run with an internally computed saddle oracle (grid resolution 0.01
/// on both the multiplier and auxiliary axes) for the gap diagnostics.
pub fn varac_run(mdp: &TabularMdp, cfg: &LearnerConfig) -> Result<RunOutput> {
    let solution = saddle_search(mdp, cfg.alpha, cfg.n_cap, 0.01, 0.01)?;
    varac_run_with_oracle(mdp, cfg, Some(&solution))
}

/// Full run; `oracle` (if given) supplies L* and π* for the gap and KL
/// diagnostics but never influences the learner's own updates.
pub fn varac_run_with_oracle(
    mdp: &TabularMdp,
    cfg: &LearnerConfig,
    oracle: Option<&SaddleSolution>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let reward_bound = mdp.reward_bound();
    let oracle_data = match oracle {
        Some(sol) => {
            let nu_star = stationary_distribution(mdp, &sol.pi_star)?;
            Some((sol, nu_star))
        }
        None => None,
    };

    // θ_0 energy: identically zero, so π_0 is exactly uniform. The network
    // class achieves this by anchoring (reporting net − net-at-init), which
    // keeps gradients unchanged.
    let energy0 = match cfg.mode {
        RunMode::Dnn => Energy::anchored_net(
            mdp,
            DeepNet::init(
                mdp.embed_dim(),
                cfg.actor_net.width,
                cfg.actor_net.depth,
                cfg.actor_net.radius,
                split(cfg.seed, LANE_ACTOR_INIT),
            ),
        )?,
        _ => Energy::zero_table(n, m),
    };
    // Fixed starting parameters for every critic pass; TD restarts from
    // these each outer iteration rather than warm-starting.
    let critic_q0 = match cfg.mode {
        RunMode::Dnn => Critic::Net(DeepNet::init(
            mdp.embed_dim(),
            cfg.critic_q_net.width,
            cfg.critic_q_net.depth,
            cfg.critic_q_net.radius,
            split(cfg.seed, LANE_CRITIC_Q_INIT),
        )),
        _ => Critic::table_zeros(n, m),
    };
    let critic_w0 = match cfg.mode {
        RunMode::Dnn => Critic::Net(DeepNet::init(
            mdp.embed_dim(),
            cfg.critic_w_net.width,
            cfg.critic_w_net.depth,
            cfg.critic_w_net.radius,
            split(cfg.seed, LANE_CRITIC_W_INIT),
        )),
        _ => Critic::table_zeros(n, m),
    };

    let mut actor = EnergyPolicy {
        energy: energy0.clone(),
        tau: 1.0,
    };
    let sampled = cfg.mode != RunMode::Exact;
    let mut exact_cur = exact_evaluation(mdp, &actor.to_stationary(mdp)?)?;
    let mut traj: Option<Trajectory> = None;
    let (mut rho_bar, mut eta_bar) = if sampled {
        let t = sample_trajectory(
            mdp,
            &actor.to_stationary(mdp)?,
            cfg.t_inner,
            cfg.burn_in,
            split(split(cfg.seed, LANE_TRAJ), 0),
        )?;
        let moments = estimate_rho_eta(&t);
        traj = Some(t);
        moments
    } else {
        (exact_cur.rho, exact_cur.eta)
    };
    let mut lambda_bar = 0.0_f64;
    let mut y_bar = update_y(rho_bar);

    let mut metrics = Vec::with_capacity(cfg.k_outer);
    let mut ball_violations = 0usize;
    let mut critic_q = critic_q0.clone();
    let mut critic_w = critic_w0.clone();
    let mut last_schedule = schedules(0, cfg.k_outer, cfg.beta, cfg.gamma);

    for k in 0..cfg.k_outer {
        let started = Instant::now();
        let sched = schedules(k, cfg.k_outer, cfg.beta, cfg.gamma);

        // Critic passes for π_k, sharing the iteration's batch.
        let (q_k, w_k) = match cfg.mode {
            RunMode::Exact => (
                Critic::Table(exact_cur.q.clone()),
                Critic::Table(exact_cur.w.clone()),
            ),
            _ => {
                let tr = traj.as_ref().expect("sampled mode keeps a trajectory");
                let q_out = td_policy_evaluation(TdKind::Reward, mdp, tr, rho_bar, &critic_q0, cfg)?;
                let w_out =
                    td_policy_evaluation(TdKind::SquaredReward, mdp, tr, eta_bar, &critic_w0, cfg)?;
                ball_violations += q_out.ball_violations + w_out.ball_violations;
                (q_out.critic, w_out.critic)
            }
        };

        // Multiplier step, computed now but applied only after the actor has
        // consumed the pre-step (λ̄_k, ȳ_k).
        let lambda_next = update_lambda(
            lambda_bar,
            y_bar,
            rho_bar,
            eta_bar,
            cfg.alpha,
            sched.gamma_k,
            cfg.n_cap,
        );

        // Actor update and policy refresh at τ_{k+1}. The exact mode writes
        // the regression target itself (the minimizer over the table class);
        // sampled modes run projected SGD from θ_0.
        let new_energy = match cfg.mode {
            RunMode::Exact => {
                let f_prev = actor.energy.table(mdp)?;
                let mut f_next = Array2::zeros((n, m));
                for s in 0..n {
                    for a in 0..m {
                        f_next[[s, a]] = regression_target(
                            exact_cur.q[[s, a]],
                            exact_cur.w[[s, a]],
                            f_prev[[s, a]],
                            lambda_bar,
                            y_bar,
                            sched.beta_k,
                            actor.tau,
                            sched.tau_next,
                        );
                    }
                }
                Energy::Table(f_next)
            }
            _ => {
                let tr = traj.as_ref().expect("sampled mode keeps a trajectory");
                let out = actor_sgd(
                    mdp,
                    tr,
                    &actor,
                    &q_k,
                    &w_k,
                    lambda_bar,
                    y_bar,
                    &sched,
                    &energy0,
                    cfg,
                    split(split(cfg.seed, LANE_ACTOR_A0), k as u64),
                )?;
                ball_violations += out.ball_violations;
                out.energy
            }
        };

        // Row k diagnostics describe the pre-update state.
        let pi_k = actor.to_stationary(mdp)?;
        let q_table = q_k.to_table(mdp)?;
        let w_table = w_k.to_table(mdp)?;
        let bellman_q_mse = bellman_residual_mse(
            mdp,
            &pi_k,
            &q_table,
            TdKind::Reward,
            exact_cur.rho,
            &exact_cur.sigma,
        );
        let bellman_w_mse = bellman_residual_mse(
            mdp,
            &pi_k,
            &w_table,
            TdKind::SquaredReward,
            exact_cur.eta,
            &exact_cur.sigma,
        );
        let (gap, kl_to_opt) = match &oracle_data {
            Some((sol, nu_star)) => {
                let l_k = lagrangian(lambda_bar, exact_cur.rho, exact_cur.eta, y_bar, cfg.alpha);
                let kl_val = if cfg.mode == RunMode::Exact {
                    let mut acc = 0.0;
                    for s in 0..n {
                        let p_star = sol.pi_star.probs().row(s).to_owned();
                        let p_k = actor.probs(mdp, s)?;
                        acc += nu_star[s] * kl(&p_star, &p_k)?;
                    }
                    Some(acc)
                } else {
                    None
                };
                (Some(sol.value - l_k), kl_val)
            }
            None => (None, None),
        };
        let (exact_rho, exact_eta, exact_var) = if cfg.mode == RunMode::Exact {
            (
                Some(exact_cur.rho),
                Some(exact_cur.eta),
                Some(exact_cur.variance),
            )
        } else {
            (None, None, None)
        };
        let mut row = IterationMetrics {
            k,
            lambda_bar,
            y_bar,
            rho_hat: rho_bar,
            eta_hat: eta_bar,
            var_hat: eta_bar - rho_bar * rho_bar,
            lagrangian_value: lagrangian(lambda_bar, rho_bar, eta_bar, y_bar, cfg.alpha),
            exact_rho,
            exact_eta,
            exact_var,
            bellman_q_mse,
            bellman_w_mse,
            gap,
            kl_to_opt,
            wall_time_ms: 0.0,
        };

        // Advance: apply the multiplier step, refresh the policy, resample
        // under π_{k+1}, re-estimate the moments, and set ȳ_{k+1}.
        actor = EnergyPolicy {
            energy: new_energy,
            tau: sched.tau_next,
        };
        lambda_bar = lambda_next;
        let pi_next = actor.to_stationary(mdp)?;
        exact_cur = exact_evaluation(mdp, &pi_next)?;
        if sampled {
            let t = sample_trajectory(
                mdp,
                &pi_next,
                cfg.t_inner,
                cfg.burn_in,
                split(split(cfg.seed, LANE_TRAJ), k as u64 + 1),
            )?;
            let moments = estimate_rho_eta(&t);
            rho_bar = moments.0;
            eta_bar = moments.1;
            traj = Some(t);
        } else {
            rho_bar = exact_cur.rho;
            eta_bar = exact_cur.eta;
        }
        y_bar = update_y(rho_bar);

        if debug_invariants_enabled() {
            if !(0.0..=cfg.n_cap).contains(&lambda_bar) {
                return Err(Error::InvariantViolation(format!(
                    "multiplier {lambda_bar} escaped [0, {}] at iteration {k}",
                    cfg.n_cap
                )));
            }
            if y_bar.abs() > reward_bound * (1.0 + 1e-12) + 1e-12 {
                return Err(Error::InvariantViolation(format!(
                    "auxiliary variable {y_bar} exceeds the reward bound {reward_bound}"
                )));
            }
        }

        row.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        row.check(reward_bound)?;
        metrics.push(row);
        critic_q = q_k;
        critic_w = w_k;
        last_schedule = sched;
    }

    Ok(RunOutput {
        final_iterate: SaddleIterate {
            k: cfg.k_outer,
            lambda_bar,
            y_bar,
            actor,
            critic_q,
            critic_w,
            schedule: last_schedule,
        },
        metrics,
        ball_violations,
    })
}
