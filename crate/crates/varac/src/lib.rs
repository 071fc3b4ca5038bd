//! Variance-constrained actor-critic for tabular average-reward MDPs.
//!
//! The crate has two halves. The learner half implements the algorithm under
//! study: energy-based policies (tabular or over a ReLU network), TD(0)
//! critics for the differential values of the reward and the squared reward,
//! and a projected primal-dual loop that maximizes long-run average reward
//! subject to a cap on long-run reward variance. The oracle half computes the
//! same quantities exactly on tabular models — stationary distributions,
//! Poisson-equation value functions, and a grid-certified saddle point of the
//! constrained problem — so every stochastic component can be tested against
//! a closed-form reference.

pub mod driver;
pub mod envs;
pub mod error;
pub mod learner;
mod linalg;
pub mod mdp;
pub mod neural;
pub mod oracle;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};

/// Whether expensive runtime invariant checks are enabled via the
/// `VARAC_DEBUG_INVARIANTS=1` environment variable. Read once per process.
pub fn debug_invariants_enabled() -> bool {
    use std::sync::OnceLock;
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::env::var("VARAC_DEBUG_INVARIANTS").as_deref() == Ok("1"))
}
