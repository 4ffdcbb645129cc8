//! Parameterized reward models, alignment utilities, the Bradley-Terry
//! preference model, the preference log-likelihood, and the simulated
//! teacher.
//!
//! Two trajectory-return modes coexist deliberately: the preference model
//! scores trajectories by plain undiscounted reward sums, while the simulated
//! teacher weights step `h` of an `H`-step trajectory by `γ^(H-1-h)` (recent
//! steps matter most). Ops take the mode explicitly rather than guessing.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::Trajectory;
use crate::policy::FeatureTable;

/// Linear reward `r_ν(s,a) = ν·ψ(s,a)`.
#[derive(Clone, Debug)]
pub struct LinearReward {
    nu: DVector<f64>,
    features: FeatureTable,
}

impl LinearReward {
    pub fn new(nu: DVector<f64>, features: FeatureTable) -> Result<Self> {
        if nu.len() != features.dim() {
            return Err(Error::InvalidArgument(format!(
                "nu has dimension {}, reward features expect {}",
                nu.len(),
                features.dim()
            )));
        }
        if nu.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteParameter {
                context: "reward construction".into(),
            });
        }
        Ok(Self { nu, features })
    }

    /// All-zero reward over the given feature table.
    pub fn zero(features: FeatureTable) -> Self {
        let nu = DVector::zeros(features.dim());
        Self { nu, features }
    }

    pub fn nu(&self) -> &DVector<f64> {
        &self.nu
    }

    pub fn features(&self) -> &FeatureTable {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn with_nu(&self, nu: DVector<f64>) -> Result<Self> {
        Self::new(nu, self.features.clone())
    }

    pub fn value(&self, s: usize, a: usize) -> f64 {
        self.features
            .get(s, a)
            .iter()
            .zip(self.nu.iter())
            .map(|(f, n)| f * n)
            .sum()
    }

    /// `∇_ν r_ν(s,a) = ψ(s,a)`.
    pub fn grad_nu(&self, s: usize, a: usize) -> &[f64] {
        self.features.get(s, a)
    }

    /// Recorded magnitude bound `‖ν‖·max‖ψ‖` for this instance.
    pub fn bound(&self) -> f64 {
        self.nu.norm() * self.features.max_norm()
    }
}

/// How per-step rewards are aggregated into a trajectory return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReturnMode {
    /// Plain sum `Σ_h r(s_h,a_h)`; the preference-model convention.
    Undiscounted,
    /// Teacher weighting `Σ_h γ^(H-1-h)·r(s_h,a_h)`: the final step carries
    /// weight 1 and earlier steps decay backwards.
    ReverseDiscounted(f64),
}

/// Aggregated reward of one trajectory under the chosen mode.
pub fn trajectory_return(reward: &LinearReward, tau: &Trajectory, mode: ReturnMode) -> f64 {
    let h_total = tau.steps.len();
    tau.steps
        .iter()
        .enumerate()
        .map(|(h, &(s, a))| {
            let w = match mode {
                ReturnMode::Undiscounted => 1.0,
                ReturnMode::ReverseDiscounted(gamma) => gamma.powi((h_total - 1 - h) as i32),
            };
            w * reward.value(s, a)
        })
        .sum()
}

/// `∇_ν` of the undiscounted trajectory return: `Σ_h ψ(s_h,a_h)`.
pub fn trajectory_return_grad(reward: &LinearReward, tau: &Trajectory) -> DVector<f64> {
    let mut g = DVector::zeros(reward.dim());
    for &(s, a) in &tau.steps {
        g.iter_mut()
            .zip(reward.grad_nu(s, a))
            .for_each(|(gi, f)| *gi += f);
    }
    g
}

/// Bradley-Terry preference probability
/// `P(τ0 ≻ τ1) = exp(β·R0) / (exp(β·R0) + exp(β·R1))`,
/// computed as a stable logistic of `β·(R0 − R1)`.
pub fn bt_prob(return0: f64, return1: f64, beta: f64) -> f64 {
    debug_assert!(beta >= 0.0 && beta.is_finite());
    sigmoid(beta * (return0 - return1))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x), stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Simulated-human parameters: rationality `beta` (`f64::INFINITY` selects
/// the deterministic comparator) and the reverse-discount factor used for
/// the stochastic model's returns.
#[derive(Clone, Copy, Debug)]
pub struct TeacherParams {
    pub beta: f64,
    pub discount: f64,
}

impl TeacherParams {
    pub fn new(beta: f64, discount: f64) -> Result<Self> {
        if beta < 0.0 || beta.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "teacher beta must be non-negative, got {beta}"
            )));
        }
        if !(0.0..1.0).contains(&discount) && discount != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "teacher discount must lie in [0,1], got {discount}"
            )));
        }
        Ok(Self { beta, discount })
    }

    /// `h(y=1|τ0,τ1)`: probability the teacher prefers `τ0`.
    ///
    /// Finite `beta`: Bradley-Terry on reverse-discounted returns under the
    /// ground-truth reward. Infinite `beta`: 1/0 by comparing plain
    /// undiscounted sums, ½ on exact ties.
    pub fn prefer_first_prob(
        &self,
        tau0: &Trajectory,
        tau1: &Trajectory,
        true_reward: &LinearReward,
    ) -> f64 {
        if self.beta.is_infinite() {
            let r0 = trajectory_return(true_reward, tau0, ReturnMode::Undiscounted);
            let r1 = trajectory_return(true_reward, tau1, ReturnMode::Undiscounted);
            return if r0 > r1 {
                1.0
            } else if r0 < r1 {
                0.0
            } else {
                0.5
            };
        }
        let mode = ReturnMode::ReverseDiscounted(self.discount);
        let r0 = trajectory_return(true_reward, tau0, mode);
        let r1 = trajectory_return(true_reward, tau1, mode);
        bt_prob(r0, r1, self.beta)
    }
}

/// Draws a teacher label: `true` means `τ0` preferred (y = 1).
pub fn teacher_label<R: Rng + ?Sized>(
    tau0: &Trajectory,
    tau1: &Trajectory,
    true_reward: &LinearReward,
    teacher: &TeacherParams,
    rng: &mut R,
) -> bool {
    let p = teacher.prefer_first_prob(tau0, tau1, true_reward);
    rng.random::<f64>() < p
}

/// A labeled trajectory comparison; `label = true` means `τ0` preferred.
#[derive(Clone, Debug)]
pub struct PreferencePair {
    pub tau0: Trajectory,
    pub tau1: Trajectory,
    pub label: bool,
}

/// Learned-model preference probability for a pair: Bradley-Terry at unit
/// rationality on undiscounted returns. Rationality is a property of the
/// simulated human, not of the learned model, so no β appears here.
pub fn model_prefer_first_prob(reward: &LinearReward, pair: &PreferencePair) -> f64 {
    let r0 = trajectory_return(reward, &pair.tau0, ReturnMode::Undiscounted);
    let r1 = trajectory_return(reward, &pair.tau1, ReturnMode::Undiscounted);
    bt_prob(r0, r1, 1.0)
}

/// Mean preference log-likelihood of a batch:
/// `mean[ y·log P_ν(τ0≻τ1) + (1−y)·log P_ν(τ1≻τ0) ]`. Always ≤ 0.
pub fn pref_loglik(reward: &LinearReward, batch: &[PreferencePair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let total: f64 = batch
        .iter()
        .map(|pair| {
            let gap = trajectory_return(reward, &pair.tau0, ReturnMode::Undiscounted)
                - trajectory_return(reward, &pair.tau1, ReturnMode::Undiscounted);
            if pair.label {
                log_sigmoid(gap)
            } else {
                log_sigmoid(-gap)
            }
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// ν-gradient of [`pref_loglik`] on a frozen batch:
/// `mean[ y·∇R(τ0) + (1−y)·∇R(τ1) − ∇R(τ0)·P_ν(τ0≻τ1) − ∇R(τ1)·P_ν(τ1≻τ0) ]`.
pub fn pref_loglik_grad_term1(
    reward: &LinearReward,
    batch: &[PreferencePair],
) -> Result<DVector<f64>> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let mut g = DVector::zeros(reward.dim());
    for pair in batch {
        let p01 = model_prefer_first_prob(reward, pair);
        let y = if pair.label { 1.0 } else { 0.0 };
        let g0 = trajectory_return_grad(reward, &pair.tau0);
        let g1 = trajectory_return_grad(reward, &pair.tau1);
        g.axpy(y - p01, &g0, 1.0);
        g.axpy((1.0 - y) - (1.0 - p01), &g1, 1.0);
    }
    Ok(g / batch.len() as f64)
}

// ----------------------------------------------------------------------------
// Alignment-utility catalog
// ----------------------------------------------------------------------------

/// Trajectory utilities `U_ν(τ)` from a closed catalog, each with its exact
/// ν-gradient. The catalog is closed so registration-time gradient checks
/// are exhaustive.
#[derive(Clone, Debug)]
pub enum TrajectoryUtility {
    /// `U ≡ c`.
    Constant(f64),
    /// `U_ν(τ) = Σ_h γ^h · ν·ψ(s_h,a_h)`.
    DiscountedFeatureSum {
        features: FeatureTable,
        discount: f64,
    },
    /// ν-independent time-average of a per-state proximity weight:
    /// `U(τ) = (1/H)·Σ_h proximity[s_h]`.
    GoalProximity { proximity: Vec<f64> },
}

impl TrajectoryUtility {
    pub fn value(&self, tau: &Trajectory, nu: &DVector<f64>) -> f64 {
        match self {
            TrajectoryUtility::Constant(c) => *c,
            TrajectoryUtility::DiscountedFeatureSum { features, discount } => tau
                .steps
                .iter()
                .enumerate()
                .map(|(h, &(s, a))| {
                    let dot: f64 = features
                        .get(s, a)
                        .iter()
                        .zip(nu.iter())
                        .map(|(f, n)| f * n)
                        .sum();
                    discount.powi(h as i32) * dot
                })
                .sum(),
            TrajectoryUtility::GoalProximity { proximity } => {
                let sum: f64 = tau.steps.iter().map(|&(s, _)| proximity[s]).sum();
                sum / tau.steps.len() as f64
            }
        }
    }

    pub fn grad_nu(&self, tau: &Trajectory, nu: &DVector<f64>) -> DVector<f64> {
        match self {
            TrajectoryUtility::Constant(_) | TrajectoryUtility::GoalProximity { .. } => {
                DVector::zeros(nu.len())
            }
            TrajectoryUtility::DiscountedFeatureSum { features, discount } => {
                let mut g = DVector::zeros(nu.len());
                for (h, &(s, a)) in tau.steps.iter().enumerate() {
                    let w = discount.powi(h as i32);
                    g.iter_mut()
                        .zip(features.get(s, a))
                        .for_each(|(gi, f)| *gi += w * f);
                }
                g
            }
        }
    }
}

/// Reward-parameter regularizers `Z(ν)` with exact gradients.
#[derive(Clone, Copy, Debug)]
pub enum Regularizer {
    /// `Z ≡ 0`.
    Zero,
    /// `Z(ν) = −(weight/2)·‖ν‖²`.
    Quadratic { weight: f64 },
}

impl Regularizer {
    pub fn value(&self, nu: &DVector<f64>) -> f64 {
        match self {
            Regularizer::Zero => 0.0,
            Regularizer::Quadratic { weight } => -0.5 * weight * nu.norm_squared(),
        }
    }

    pub fn grad(&self, nu: &DVector<f64>) -> DVector<f64> {
        match self {
            Regularizer::Zero => DVector::zeros(nu.len()),
            Regularizer::Quadratic { weight } => nu * (-weight),
        }
    }
}

/// An upper-level objective specification: trajectory utility plus
/// regularizer.
#[derive(Clone, Debug)]
pub struct UtilitySpec {
    pub utility: TrajectoryUtility,
    pub regularizer: Regularizer,
}

const REGISTRATION_FD_TOL: f64 = 1e-6;

impl UtilitySpec {
    /// Registers a spec after checking both catalog gradients against central
    /// finite differences at the given probe point.
    pub fn validated(
        utility: TrajectoryUtility,
        regularizer: Regularizer,
        probe_tau: &Trajectory,
        probe_nu: &DVector<f64>,
    ) -> Result<Self> {
        let spec = Self {
            utility,
            regularizer,
        };
        let eps = 1e-5;
        let fd_util = crate::verify::fd_gradient(
            |nu| Ok(spec.utility.value(probe_tau, nu)),
            probe_nu,
            eps,
        )?;
        let an_util = spec.utility.grad_nu(probe_tau, probe_nu);
        let fd_reg = crate::verify::fd_gradient(|nu| Ok(spec.regularizer.value(nu)), probe_nu, eps)?;
        let an_reg = spec.regularizer.grad(probe_nu);
        let err = (fd_util - &an_util).amax().max((fd_reg - &an_reg).amax());
        if err > REGISTRATION_FD_TOL {
            return Err(Error::InvalidArgument(format!(
                "utility gradient fails its registration finite-difference check (error {err:.3e})"
            )));
        }
        Ok(spec)
    }
}

// ----------------------------------------------------------------------------
// Preference-batch text format
// ----------------------------------------------------------------------------

/// One pair per line: `y;s,a s,a …;s,a s,a …`.
pub fn pairs_to_text(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for pair in pairs {
        out.push(if pair.label { '1' } else { '0' });
        for tau in [&pair.tau0, &pair.tau1] {
            out.push(';');
            let steps: Vec<String> = tau.steps.iter().map(|(s, a)| format!("{s},{a}")).collect();
            out.push_str(&steps.join(" "));
        }
        out.push('\n');
    }
    out
}

/// Parses the format produced by [`pairs_to_text`].
pub fn pairs_from_text(text: &str) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(';').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                column: 1,
                message: format!("expected 3 `;`-separated fields, got {}", fields.len()),
            });
        }
        let label = match fields[0].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    column: 1,
                    message: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        let parse_traj = |field: &str, column: usize| -> Result<Trajectory> {
            let mut steps = Vec::new();
            for tok in field.split_whitespace() {
                let (s, a) = tok.split_once(',').ok_or(Error::Parse {
                    line: line_no,
                    column,
                    message: format!("bad step `{tok}`, expected `s,a`"),
                })?;
                let parse = |t: &str| -> Result<usize> {
                    t.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        column,
                        message: format!("bad index `{t}`"),
                    })
                };
                steps.push((parse(s)?, parse(a)?));
            }
            if steps.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    column,
                    message: "empty trajectory".into(),
                });
            }
            Ok(Trajectory::new(steps))
        };
        let tau0 = parse_traj(fields[1], 2)?;
        let tau1 = parse_traj(fields[2], 3)?;
        if tau0.horizon() != tau1.horizon() {
            return Err(Error::Parse {
                line: line_no,
                column: 2,
                message: format!(
                    "trajectories have different lengths ({} vs {})",
                    tau0.horizon(),
                    tau1.horizon()
                ),
            });
        }
        pairs.push(PreferencePair { tau0, tau1, label });
    }
    Ok(pairs)
}
