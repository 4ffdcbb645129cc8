//! The lower level: exact finite-horizon values by backward dynamic
//! programming, the trajectory-sum policy gradient in exact and Monte-Carlo
//! modes, the K-step inner ascent loop, and a to-convergence oracle solver.
//!
//! Exact expectations run over an enumerated trajectory support rather than
//! occupancy recursions: the same enumeration engine then serves the Hessian
//! and mixed-Jacobian oracles with different integrands.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{sample_trajectory, TabularMdp, Trajectory};
use crate::policy::SoftmaxPolicy;
use crate::reward::LinearReward;

/// Expectation mode for gradient estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Exact expectation over the enumerated trajectory distribution.
    Exact,
    /// Sample mean over this many Monte-Carlo trajectories.
    MonteCarlo(usize),
}

/// Inner-loop configuration.
#[derive(Clone, Copy, Debug)]
pub struct LowerConfig {
    /// Ascent step size α_ℓ.
    pub step_size: f64,
    /// Inner iterations K per outer step.
    pub inner_iters: usize,
    pub mode: GradMode,
    /// Stopping tolerance on the gradient norm for the oracle solver.
    pub grad_tol: f64,
    pub max_oracle_iters: usize,
}

impl Default for LowerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            inner_iters: 50,
            mode: GradMode::Exact,
            grad_tol: 1e-8,
            max_oracle_iters: 5000,
        }
    }
}

/// Start-state convention for value computations.
#[derive(Clone, Copy, Debug)]
pub enum Start {
    /// Weight states by the MDP's initial distribution (the trajectory
    /// distribution's own convention; the default).
    InitialDist,
    /// Condition on a fixed start state.
    State(usize),
}

/// Exact value `E[Σ_{h=0}^{H-1} γ^h r_ν(s_h,a_h)]` at the given horizon,
/// computed by backward dynamic programming.
pub fn exact_value_at_horizon(
    mdp: &TabularMdp,
    reward: &LinearReward,
    policy: &SoftmaxPolicy,
    start: Start,
    horizon: usize,
) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::InvalidHorizon);
    }
    let s_count = mdp.num_states();
    let probs = policy.prob_table();
    // values[s] = V_h(s); runs h = H-1 … 0 with V_H ≡ 0.
    let mut values = vec![0.0f64; s_count];
    for _ in 0..horizon {
        let mut next = vec![0.0f64; s_count];
        for (s, slot) in next.iter_mut().enumerate() {
            let mut v = 0.0;
            for (a, &pa) in probs[s].iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let cont: f64 = mdp
                    .transition_row(s, a)
                    .iter()
                    .zip(values.iter())
                    .map(|(p, vn)| p * vn)
                    .sum();
                v += pa * (reward.value(s, a) + mdp.discount() * cont);
            }
            *slot = v;
        }
        values = next;
    }
    match start {
        Start::InitialDist => Ok(mdp
            .initial_dist()
            .iter()
            .zip(values.iter())
            .map(|(p, v)| p * v)
            .sum()),
        Start::State(s) => {
            if s >= s_count {
                return Err(Error::IndexOutOfRange {
                    what: "state",
                    index: s,
                    bound: s_count,
                });
            }
            Ok(values[s])
        }
    }
}

/// Exact lower-level value at the MDP's lower horizon.
pub fn exact_value(
    mdp: &TabularMdp,
    reward: &LinearReward,
    policy: &SoftmaxPolicy,
    start: Start,
) -> Result<f64> {
    exact_value_at_horizon(mdp, reward, policy, start, mdp.horizon_lower())
}

/// The policy-gradient integrand for one trajectory:
/// `Σ_h γ^h r(s_h,a_h) · Σ_{j≤h} ∇_θ log π(a_j|s_j)`.
/// `prefix` is a caller-provided scratch buffer.
fn accumulate_grad_integrand(
    out: &mut DVector<f64>,
    prefix: &mut DVector<f64>,
    weight: f64,
    tau: &Trajectory,
    reward: &LinearReward,
    discount: f64,
    scores: &[Vec<DVector<f64>>],
) {
    prefix.fill(0.0);
    for (h, &(s, a)) in tau.steps.iter().enumerate() {
        *prefix += &scores[s][a];
        let coeff = discount.powi(h as i32) * reward.value(s, a);
        if coeff != 0.0 {
            out.axpy(weight * coeff, prefix, 1.0);
        }
    }
}

/// `∇_θ V` at the lower horizon: exact enumeration or Monte-Carlo mean of
/// the trajectory-sum integrand.
pub fn policy_gradient<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    reward: &LinearReward,
    policy: &SoftmaxPolicy,
    cfg: &LowerConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let scores = policy.score_table();
    let horizon = mdp.horizon_lower();
    let mut grad = DVector::zeros(policy.dim());
    let mut prefix = DVector::zeros(policy.dim());
    match cfg.mode {
        GradMode::Exact => {
            let support = mdp.support(horizon)?;
            let weights = support.weights(policy);
            for (tau, &w) in support.trajectories.iter().zip(weights.iter()) {
                if w > 0.0 {
                    accumulate_grad_integrand(
                        &mut grad,
                        &mut prefix,
                        w,
                        tau,
                        reward,
                        mdp.discount(),
                        &scores,
                    );
                }
            }
        }
        GradMode::MonteCarlo(n) => {
            if n == 0 {
                return Err(Error::InvalidArgument(
                    "Monte-Carlo sample count must be positive".into(),
                ));
            }
            for _ in 0..n {
                let tau = sample_trajectory(mdp, policy, horizon, rng);
                accumulate_grad_integrand(
                    &mut grad,
                    &mut prefix,
                    1.0 / n as f64,
                    &tau,
                    reward,
                    mdp.discount(),
                    &scores,
                );
            }
        }
    }
    Ok(grad)
}

/// Result of a K-step inner loop.
#[derive(Clone, Debug)]
pub struct InnerRun {
    pub policy: SoftmaxPolicy,
    /// Gradient norm at each of the K steps, in order.
    pub grad_norms: Vec<f64>,
}

/// K ascent steps `θ ← θ + α_ℓ·∇_θ V`; returns the final policy and the
/// per-step gradient norms.
pub fn inner_loop<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    reward: &LinearReward,
    policy0: &SoftmaxPolicy,
    cfg: &LowerConfig,
    rng: &mut R,
) -> Result<InnerRun> {
    let mut policy = policy0.clone();
    let mut grad_norms = Vec::with_capacity(cfg.inner_iters);
    for k in 0..cfg.inner_iters {
        let grad = policy_gradient(mdp, reward, &policy, cfg, rng)?;
        grad_norms.push(grad.norm());
        let theta = policy.theta() + cfg.step_size * grad;
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteParameter {
                context: format!("inner loop step {k}"),
            });
        }
        policy = policy.with_theta(theta)?;
    }
    Ok(InnerRun { policy, grad_norms })
}

/// Output of the to-convergence oracle solver.
#[derive(Clone, Debug)]
pub struct LowerSolution {
    pub policy: SoftmaxPolicy,
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl LowerSolution {
    /// Converts a non-converged solve into an error carrying diagnostics.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                grad_norm: self.grad_norm,
                iterations: self.iterations,
            })
        }
    }
}

/// Runs exact policy-gradient ascent until `‖∇_θ V‖ ≤ grad_tol` or
/// `max_oracle_iters`; the oracle producing `θ*(ν)` for verification.
///
/// Steps along the exact gradient with a value-backtracking adaptive step
/// size (grow on accepted steps, halve on rejected ones). Constant steps
/// cannot reach tight tolerances here: as a softmax policy saturates, the
/// gradient norm under a fixed step decays only harmonically, while the
/// adaptive step keeps the decay geometric.
pub fn solve_lower_exact(
    mdp: &TabularMdp,
    reward: &LinearReward,
    policy0: &SoftmaxPolicy,
    cfg: &LowerConfig,
) -> Result<LowerSolution> {
    if cfg.mode != GradMode::Exact {
        return Err(Error::InvalidArgument(
            "solve_lower_exact requires exact gradient mode".into(),
        ));
    }
    const MAX_STEP: f64 = 1e15;
    const MIN_STEP: f64 = 1e-12;
    let mut rng = crate::rng::seed_stream(0, crate::rng::Stream::Sampling); // unused in exact mode
    let mut policy = policy0.clone();
    let mut value = exact_value(mdp, reward, &policy, Start::InitialDist)?;
    let mut step = cfg.step_size;
    let mut grad_norm = f64::INFINITY;
    for iteration in 0..=cfg.max_oracle_iters {
        let grad = policy_gradient(mdp, reward, &policy, cfg, &mut rng)?;
        grad_norm = grad.norm();
        if grad_norm <= cfg.grad_tol {
            return Ok(LowerSolution {
                policy,
                converged: true,
                grad_norm,
                iterations: iteration,
            });
        }
        if iteration == cfg.max_oracle_iters {
            break;
        }
        loop {
            let theta = policy.theta() + step * &grad;
            if theta.iter().all(|x| x.is_finite()) {
                let candidate = policy.with_theta(theta)?;
                let candidate_value = exact_value(mdp, reward, &candidate, Start::InitialDist)?;
                if candidate_value >= value {
                    policy = candidate;
                    value = candidate_value;
                    step = (step * 2.0).min(MAX_STEP);
                    break;
                }
            }
            step *= 0.5;
            if step < MIN_STEP {
                return Ok(LowerSolution {
                    policy,
                    converged: false,
                    grad_norm,
                    iterations: iteration,
                });
            }
        }
    }
    Ok(LowerSolution {
        policy,
        converged: false,
        grad_norm,
        iterations: cfg.max_oracle_iters,
    })
}
