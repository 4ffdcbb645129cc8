//! Finite-horizon tabular MDPs, trajectory enumeration, exact trajectory
//! probabilities, and Monte-Carlo sampling.
//!
//! Horizon convention: a trajectory of horizon `H` is exactly the `H`
//! state-action pairs `(s_0,a_0),…,(s_{H-1},a_{H-1})`. The terminal state
//! `s_H` collects no reward and is marginalized out of trajectory
//! probabilities, so
//!
//! ```text
//! ρ(τ) = ρ(s_0) · ∏_{h=0}^{H-1} π(a_h|s_h) · ∏_{h=0}^{H-2} P(s_{h+1}|s_h,a_h)
//! ```

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::SoftmaxPolicy;
use crate::rng::sample_index;

/// Largest trajectory support that will be materialized as an explicit list.
pub const MAX_SUPPORT: u64 = 10_000_000;

const DIST_TOL: f64 = 1e-12;

/// A finite state/action MDP with dense transitions and fixed horizons for
/// the lower (policy optimization) and upper (evaluation) levels.
#[derive(Debug)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// Row-major `[s][a][s']`.
    transitions: Vec<f64>,
    initial_dist: Vec<f64>,
    discount: f64,
    horizon_lower: usize,
    horizon_upper: usize,
    /// Lazily built per-horizon supports; policy-independent, so shared
    /// across every gradient/Hessian evaluation on this MDP.
    support_cache: Mutex<BTreeMap<usize, Arc<TrajectorySupport>>>,
}

impl Clone for TabularMdp {
    fn clone(&self) -> Self {
        TabularMdp {
            num_states: self.num_states,
            num_actions: self.num_actions,
            transitions: self.transitions.clone(),
            initial_dist: self.initial_dist.clone(),
            discount: self.discount,
            horizon_lower: self.horizon_lower,
            horizon_upper: self.horizon_upper,
            support_cache: Mutex::new(self.support_cache.lock().unwrap().clone()),
        }
    }
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        initial_dist: Vec<f64>,
        discount: f64,
        horizon_lower: usize,
        horizon_upper: usize,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidArgument(
                "state and action counts must be positive".into(),
            ));
        }
        if transitions.len() != num_states * num_actions * num_states {
            return Err(Error::InvalidArgument(format!(
                "transition tensor has {} entries, expected {}",
                transitions.len(),
                num_states * num_actions * num_states
            )));
        }
        if initial_dist.len() != num_states {
            return Err(Error::InvalidArgument(format!(
                "initial distribution has {} entries, expected {}",
                initial_dist.len(),
                num_states
            )));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in (0,1), got {discount}"
            )));
        }
        if horizon_lower == 0 || horizon_upper == 0 {
            return Err(Error::InvalidHorizon);
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = &transitions[(s * num_actions + a) * num_states..][..num_states];
                check_distribution(row, &format!("transitions({s},{a},·)"))?;
            }
        }
        check_distribution(&initial_dist, "initial_dist")?;
        Ok(Self {
            num_states,
            num_actions,
            transitions,
            initial_dist,
            discount,
            horizon_lower,
            horizon_upper,
            support_cache: Mutex::new(BTreeMap::new()),
        })
    }

    /// The trajectory support at a horizon, built once and shared.
    pub fn support(&self, horizon: usize) -> Result<Arc<TrajectorySupport>> {
        if let Some(hit) = self.support_cache.lock().unwrap().get(&horizon) {
            return Ok(Arc::clone(hit));
        }
        let built = Arc::new(TrajectorySupport::build(self, horizon)?);
        self.support_cache
            .lock()
            .unwrap()
            .insert(horizon, Arc::clone(&built));
        Ok(built)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn horizon_lower(&self) -> usize {
        self.horizon_lower
    }

    pub fn horizon_upper(&self) -> usize {
        self.horizon_upper
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.num_actions + a) * self.num_states + next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transitions[(s * self.num_actions + a) * self.num_states..][..self.num_states]
    }

    /// Returns a copy with different horizons (used by oracles that probe
    /// horizons other than the instance defaults).
    pub fn with_horizons(&self, horizon_lower: usize, horizon_upper: usize) -> Result<Self> {
        if horizon_lower == 0 || horizon_upper == 0 {
            return Err(Error::InvalidHorizon);
        }
        let mut mdp = self.clone();
        mdp.horizon_lower = horizon_lower;
        mdp.horizon_upper = horizon_upper;
        Ok(mdp)
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.num_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                bound: self.num_states,
            });
        }
        Ok(())
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.num_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                bound: self.num_actions,
            });
        }
        Ok(())
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        // NaN fails this comparison too.
        if p.is_nan() || p < 0.0 {
            return Err(Error::InvalidDistribution {
                what: what.to_string(),
                detail: format!("negative or non-finite entry {p}"),
            });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidDistribution {
            what: what.to_string(),
            detail: format!("sums to {sum}, expected 1 within {DIST_TOL}"),
        });
    }
    Ok(())
}

/// An `H`-step state-action sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn new(steps: Vec<(usize, usize)>) -> Self {
        Self { steps }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        for &(s, a) in &self.steps {
            mdp.check_state(s)?;
            mdp.check_action(a)?;
        }
        Ok(())
    }
}

/// The structural support of the trajectory distribution at a fixed horizon:
/// every state-action sequence reachable through positive-probability
/// transitions from a positive-probability start state.
///
/// The support and the transition factor of each trajectory are independent
/// of the policy, so callers reuse one `TrajectorySupport` across many policy
/// evaluations and only recompute the policy factors.
#[derive(Clone, Debug)]
pub struct TrajectorySupport {
    pub horizon: usize,
    pub trajectories: Vec<Trajectory>,
    /// `ρ(s_0) · ∏_{h=0}^{H-2} P(s_{h+1}|s_h,a_h)` per trajectory.
    pub transition_factors: Vec<f64>,
}

impl TrajectorySupport {
    /// Enumerates the support in depth-first lexicographic order
    /// (states ascending, then actions ascending).
    pub fn build(mdp: &TabularMdp, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidHorizon);
        }
        let estimate = count_support(mdp, horizon);
        if estimate > MAX_SUPPORT as u128 {
            return Err(Error::SupportTooLarge {
                estimate,
                max: MAX_SUPPORT,
            });
        }
        let mut support = TrajectorySupport {
            horizon,
            trajectories: Vec::with_capacity(estimate as usize),
            transition_factors: Vec::with_capacity(estimate as usize),
        };
        let mut steps = Vec::with_capacity(horizon);
        for s0 in 0..mdp.num_states {
            let p0 = mdp.initial_dist[s0];
            if p0 > 0.0 {
                extend(mdp, horizon, s0, p0, &mut steps, &mut support);
            }
        }
        Ok(support)
    }

    /// Policy probability factor `∏_h π(a_h|s_h)` per trajectory, from a
    /// precomputed `[s][a]` action-probability table.
    pub fn policy_factor(&self, probs: &[Vec<f64>], traj: usize) -> f64 {
        self.trajectories[traj]
            .steps
            .iter()
            .map(|&(s, a)| probs[s][a])
            .product()
    }

    /// Full trajectory probabilities under the given policy.
    pub fn weights(&self, policy: &SoftmaxPolicy) -> Vec<f64> {
        let probs = policy.prob_table();
        self.weights_from_table(&probs)
    }

    pub fn weights_from_table(&self, probs: &[Vec<f64>]) -> Vec<f64> {
        (0..self.trajectories.len())
            .map(|i| self.transition_factors[i] * self.policy_factor(probs, i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

fn extend(
    mdp: &TabularMdp,
    horizon: usize,
    state: usize,
    prefix_prob: f64,
    steps: &mut Vec<(usize, usize)>,
    out: &mut TrajectorySupport,
) {
    let last_step = steps.len() == horizon - 1;
    for a in 0..mdp.num_actions {
        steps.push((state, a));
        if last_step {
            // Terminal transition marginalizes to 1.
            out.trajectories.push(Trajectory::new(steps.clone()));
            out.transition_factors.push(prefix_prob);
        } else {
            for next in 0..mdp.num_states {
                let p = mdp.transition(state, a, next);
                if p > 0.0 {
                    extend(mdp, horizon, next, prefix_prob * p, steps, out);
                }
            }
        }
        steps.pop();
    }
}

/// Exact support size without materializing it.
fn count_support(mdp: &TabularMdp, horizon: usize) -> u128 {
    // counts[s] = number of valid prefixes (s_0,a_0,…,s_h = s).
    let mut counts: Vec<u128> = mdp
        .initial_dist
        .iter()
        .map(|&p| u128::from(p > 0.0))
        .collect();
    for _ in 0..horizon - 1 {
        let mut next = vec![0u128; mdp.num_states];
        for s in 0..mdp.num_states {
            if counts[s] == 0 {
                continue;
            }
            for a in 0..mdp.num_actions {
                for (s2, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    if p > 0.0 {
                        next[s2] = next[s2].saturating_add(counts[s]);
                    }
                }
            }
        }
        counts = next;
        if counts.iter().any(|&c| c > MAX_SUPPORT as u128 * 2) {
            return u128::MAX;
        }
    }
    let final_states: u128 = counts.iter().fold(0u128, |acc, &c| acc.saturating_add(c));
    final_states.saturating_mul(mdp.num_actions as u128)
}

/// Every trajectory with strictly positive probability under
/// `ρ(τ;θ) = ρ(s_0)·∏ π_θ(a_h|s_h)·P(s_{h+1}|s_h,a_h)`, with its probability.
///
/// Probabilities sum to 1 within enumeration round-off.
pub fn enumerate_trajectories(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    horizon: usize,
) -> Result<Vec<(Trajectory, f64)>> {
    let support = mdp.support(horizon)?;
    let weights = support.weights(policy);
    Ok(support
        .trajectories
        .iter()
        .cloned()
        .zip(weights)
        .filter(|&(_, w)| w > 0.0)
        .collect())
}

/// Probability of one trajectory under the policy-induced distribution.
pub fn trajectory_prob(mdp: &TabularMdp, policy: &SoftmaxPolicy, tau: &Trajectory) -> Result<f64> {
    tau.validate(mdp)?;
    if tau.steps.is_empty() {
        return Err(Error::InvalidHorizon);
    }
    let mut prob = mdp.initial_dist[tau.steps[0].0];
    for (h, &(s, a)) in tau.steps.iter().enumerate() {
        prob *= policy.action_probs(s)[a];
        if h + 1 < tau.steps.len() {
            prob *= mdp.transition(s, a, tau.steps[h + 1].0);
        }
    }
    Ok(prob)
}

/// Draws one trajectory from `ρ(τ;θ)`. Deterministic given the RNG state.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    horizon: usize,
    rng: &mut R,
) -> Trajectory {
    let mut steps = Vec::with_capacity(horizon);
    if horizon == 0 {
        return Trajectory::new(steps);
    }
    let mut state = sample_index(rng, &mdp.initial_dist);
    for h in 0..horizon {
        let action = sample_index(rng, &policy.action_probs(state));
        steps.push((state, action));
        if h + 1 < horizon {
            state = sample_index(rng, mdp.transition_row(state, action));
        }
    }
    Trajectory::new(steps)
}

// ----------------------------------------------------------------------------
// Plain-text MDP format
// ----------------------------------------------------------------------------

/// Parses the plain-text MDP grammar:
///
/// ```text
/// states 3
/// actions 2
/// discount 0.9
/// horizon_lower 3
/// horizon_upper 3
/// initial 1 0 0
/// transition 0 0  0.5 0.5 0
/// transition 0 1  0 1 0
/// ...                       # one line per (state, action)
/// ```
///
/// Blank lines and `#` comments are ignored. Every `(s,a)` row is required.
pub fn mdp_from_text(text: &str) -> Result<TabularMdp> {
    let mut states: Option<usize> = None;
    let mut actions: Option<usize> = None;
    let mut discount: Option<f64> = None;
    let mut horizon_lower: Option<usize> = None;
    let mut horizon_upper: Option<usize> = None;
    let mut initial: Option<Vec<f64>> = None;
    let mut rows: Vec<(usize, usize, Vec<f64>, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let key = tokens.next().unwrap();
        let rest: Vec<&str> = tokens.collect();
        let parse_err = |column: usize, message: String| Error::Parse {
            line: line_no,
            column,
            message,
        };
        match key {
            "states" => states = Some(parse_one(&rest, line_no, "states")?),
            "actions" => actions = Some(parse_one(&rest, line_no, "actions")?),
            "discount" => discount = Some(parse_one(&rest, line_no, "discount")?),
            "horizon_lower" => horizon_lower = Some(parse_one(&rest, line_no, "horizon_lower")?),
            "horizon_upper" => horizon_upper = Some(parse_one(&rest, line_no, "horizon_upper")?),
            "initial" => {
                initial = Some(parse_floats(&rest, line_no)?);
            }
            "transition" => {
                if rest.len() < 2 {
                    return Err(parse_err(1, "transition needs `s a p0 p1 …`".into()));
                }
                let s: usize = rest[0]
                    .parse()
                    .map_err(|_| parse_err(2, format!("bad state index `{}`", rest[0])))?;
                let a: usize = rest[1]
                    .parse()
                    .map_err(|_| parse_err(3, format!("bad action index `{}`", rest[1])))?;
                let probs = parse_floats(&rest[2..], line_no)?;
                rows.push((s, a, probs, line_no));
            }
            other => {
                return Err(parse_err(1, format!("unknown key `{other}`")));
            }
        }
    }

    let missing = |what: &str| Error::Parse {
        line: 0,
        column: 0,
        message: format!("missing `{what}` line"),
    };
    let states = states.ok_or_else(|| missing("states"))?;
    let actions = actions.ok_or_else(|| missing("actions"))?;
    let discount = discount.ok_or_else(|| missing("discount"))?;
    let horizon_lower = horizon_lower.ok_or_else(|| missing("horizon_lower"))?;
    let horizon_upper = horizon_upper.ok_or_else(|| missing("horizon_upper"))?;
    let initial = initial.ok_or_else(|| missing("initial"))?;

    let mut transitions = vec![f64::NAN; states * actions * states];
    for (s, a, probs, line_no) in rows {
        if s >= states || a >= actions || probs.len() != states {
            return Err(Error::Parse {
                line: line_no,
                column: 1,
                message: format!(
                    "transition row ({s},{a}) inconsistent with {states} states / {actions} actions"
                ),
            });
        }
        transitions[(s * actions + a) * states..][..states].copy_from_slice(&probs);
    }
    if transitions.iter().any(|p| p.is_nan()) {
        return Err(Error::Parse {
            line: 0,
            column: 0,
            message: "missing transition rows (one per state-action pair required)".into(),
        });
    }
    TabularMdp::new(
        states,
        actions,
        transitions,
        initial,
        discount,
        horizon_lower,
        horizon_upper,
    )
}

/// Serializes an MDP in the grammar accepted by [`mdp_from_text`].
pub fn mdp_to_text(mdp: &TabularMdp) -> String {
    let mut out = String::new();
    out.push_str(&format!("states {}\n", mdp.num_states));
    out.push_str(&format!("actions {}\n", mdp.num_actions));
    out.push_str(&format!("discount {}\n", mdp.discount));
    out.push_str(&format!("horizon_lower {}\n", mdp.horizon_lower));
    out.push_str(&format!("horizon_upper {}\n", mdp.horizon_upper));
    out.push_str("initial");
    for p in &mdp.initial_dist {
        out.push_str(&format!(" {p}"));
    }
    out.push('\n');
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            out.push_str(&format!("transition {s} {a}"));
            for p in mdp.transition_row(s, a) {
                out.push_str(&format!(" {p}"));
            }
            out.push('\n');
        }
    }
    out
}

fn parse_one<T: std::str::FromStr>(rest: &[&str], line: usize, what: &str) -> Result<T> {
    if rest.len() != 1 {
        return Err(Error::Parse {
            line,
            column: 1,
            message: format!("`{what}` expects exactly one value"),
        });
    }
    rest[0].parse().map_err(|_| Error::Parse {
        line,
        column: 2,
        message: format!("bad `{what}` value `{}`", rest[0]),
    })
}

fn parse_floats(rest: &[&str], line: usize) -> Result<Vec<f64>> {
    rest.iter()
        .enumerate()
        .map(|(i, tok)| {
            tok.parse().map_err(|_| Error::Parse {
                line,
                column: i + 2,
                message: format!("bad number `{tok}`"),
            })
        })
        .collect()
}
