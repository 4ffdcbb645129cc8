//! Built-in environment generators, the standard test instances, and the
//! name registry used by the CLI.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::lower::{solve_lower_exact, Start};
use crate::mdp::TabularMdp;
use crate::policy::{FeatureTable, SoftmaxPolicy};
use crate::reward::{LinearReward, Regularizer, TrajectoryUtility, UtilitySpec};
use crate::rng::{seed_stream, Stream};

/// Everything a run needs: the MDP, the policy and reward feature maps, and
/// the hidden ground-truth reward the simulated teacher scores with.
#[derive(Clone, Debug)]
pub struct EnvBundle {
    pub name: String,
    pub mdp: TabularMdp,
    pub policy_features: FeatureTable,
    pub reward_features: FeatureTable,
    pub true_reward: LinearReward,
    /// Per-state goal-proximity weights, when the instance has goal geometry.
    pub proximity: Option<Vec<f64>>,
}

impl EnvBundle {
    pub fn uniform_policy(&self) -> SoftmaxPolicy {
        SoftmaxPolicy::uniform(self.policy_features.clone())
    }

    pub fn zero_reward(&self) -> LinearReward {
        LinearReward::zero(self.reward_features.clone())
    }

    pub fn reward(&self, nu: DVector<f64>) -> Result<LinearReward> {
        LinearReward::new(nu, self.reward_features.clone())
    }
}

/// A chain of `n` states; action 0 steps left, action 1 steps right,
/// saturating at the ends. Start state 0.
pub fn chain_mdp(n: usize, discount: f64, horizon_lower: usize, horizon_upper: usize) -> TabularMdp {
    assert!(n >= 2, "chain needs at least 2 states");
    let num_actions = 2;
    let mut transitions = vec![0.0; n * num_actions * n];
    for s in 0..n {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(n - 1);
        transitions[(s * num_actions) * n + left] = 1.0;
        transitions[(s * num_actions + 1) * n + right] = 1.0;
    }
    let mut initial = vec![0.0; n];
    initial[0] = 1.0;
    TabularMdp::new(
        n,
        num_actions,
        transitions,
        initial,
        discount,
        horizon_lower,
        horizon_upper,
    )
    .expect("chain construction is valid")
}

/// Grid geometry helpers shared by the maze generator and its instances.
fn grid_index(n: usize, row: usize, col: usize) -> usize {
    row * n + col
}

fn manhattan(n: usize, s: usize, t: usize) -> usize {
    let (r1, c1) = (s / n, s % n);
    let (r2, c2) = (t / n, t % n);
    r1.abs_diff(r2) + c1.abs_diff(c2)
}

/// An `n × n` maze with deterministic moves. Actions are
/// 0 = up, 1 = down, 2 = left, 3 = right; bumping into an edge or a wall
/// cell leaves the state unchanged. Start is the top-left corner.
pub fn gridworld_mdp(
    n: usize,
    walls: &[(usize, usize)],
    discount: f64,
    horizon_lower: usize,
    horizon_upper: usize,
) -> Result<TabularMdp> {
    if n < 2 {
        return Err(Error::InvalidArgument("grid needs n >= 2".into()));
    }
    let num_states = n * n;
    let num_actions = 4;
    let is_wall = |r: usize, c: usize| walls.iter().any(|&(wr, wc)| wr == r && wc == c);
    if is_wall(0, 0) {
        return Err(Error::InvalidArgument("start cell (0,0) is a wall".into()));
    }
    let mut transitions = vec![0.0; num_states * num_actions * num_states];
    for r in 0..n {
        for c in 0..n {
            let s = grid_index(n, r, c);
            for a in 0..num_actions {
                let (nr, nc) = match a {
                    0 => (r.wrapping_sub(1), c),
                    1 => (r + 1, c),
                    2 => (r, c.wrapping_sub(1)),
                    _ => (r, c + 1),
                };
                let target = if nr < n && nc < n && !is_wall(nr, nc) {
                    grid_index(n, nr, nc)
                } else {
                    s
                };
                transitions[(s * num_actions + a) * num_states + target] = 1.0;
            }
        }
    }
    let mut initial = vec![0.0; num_states];
    initial[0] = 1.0;
    TabularMdp::new(
        num_states,
        num_actions,
        transitions,
        initial,
        discount,
        horizon_lower,
        horizon_upper,
    )
}

/// Per-state proximity weights in `[0,1]`: 1 at the goal, decaying linearly
/// with Manhattan distance.
pub fn proximity_weights(n: usize, goal: usize) -> Vec<f64> {
    let max_dist = 2 * (n - 1);
    (0..n * n)
        .map(|s| 1.0 - manhattan(n, s, goal) as f64 / max_dist as f64)
        .collect()
}

/// Indicator feature table: each listed state contributes one feature that
/// is 1 on every action at that state.
fn state_indicator_features(num_states: usize, num_actions: usize, marked: &[usize]) -> FeatureTable {
    let dim = marked.len();
    let mut data = vec![0.0; num_states * num_actions * dim];
    for (k, &m) in marked.iter().enumerate() {
        for a in 0..num_actions {
            data[((m * num_actions) + a) * dim + k] = 1.0;
        }
    }
    FeatureTable::new(num_states, num_actions, dim, data).expect("indicator features are valid")
}

/// A feature table whose single feature is a per-state weight, constant in
/// the action.
fn state_weight_feature(num_states: usize, num_actions: usize, weights: &[f64]) -> Vec<f64> {
    let mut data = vec![0.0; num_states * num_actions];
    for s in 0..num_states {
        for a in 0..num_actions {
            data[s * num_actions + a] = weights[s];
        }
    }
    data
}

/// Standard utility instance: a 3×3 grid with a goal in the far corner.
///
/// Learned reward features: goal indicator and goal proximity. The upper
/// objective is goal occupancy with a quadratic prior on ν.
pub fn gridworld_goal() -> EnvBundle {
    let n = 3;
    let goal = grid_index(n, n - 1, n - 1);
    let mdp = gridworld_mdp(n, &[], 0.9, 6, 6).expect("valid grid");
    let num_states = mdp.num_states();
    let num_actions = mdp.num_actions();
    let policy_features = FeatureTable::tabular(num_states, num_actions);
    let prox = proximity_weights(n, goal);

    // ψ = [goal indicator, proximity]; both action-independent.
    let mut data = vec![0.0; num_states * num_actions * 2];
    for s in 0..num_states {
        for a in 0..num_actions {
            let base = (s * num_actions + a) * 2;
            data[base] = if s == goal { 1.0 } else { 0.0 };
            data[base + 1] = prox[s];
        }
    }
    let reward_features = FeatureTable::new(num_states, num_actions, 2, data).expect("valid");

    let true_features = FeatureTable::new(
        num_states,
        num_actions,
        1,
        state_weight_feature(
            num_states,
            num_actions,
            &(0..num_states)
                .map(|s| if s == goal { 1.0 } else { 0.0 })
                .collect::<Vec<_>>(),
        ),
    )
    .expect("valid");
    let true_reward =
        LinearReward::new(DVector::from_element(1, 1.0), true_features).expect("valid");

    EnvBundle {
        name: "gridworld-goal".into(),
        mdp,
        policy_features,
        reward_features,
        true_reward,
        proximity: Some(prox),
    }
}

/// The utility objective paired with [`gridworld_goal`]: goal occupancy plus
/// a quadratic prior.
pub fn gridworld_goal_objective(bundle: &EnvBundle) -> UtilitySpec {
    let proximity = bundle
        .proximity
        .clone()
        .expect("gridworld-goal has proximity weights");
    UtilitySpec {
        utility: TrajectoryUtility::GoalProximity { proximity },
        regularizer: Regularizer::Quadratic { weight: 0.1 },
    }
}

/// Standard exact-preference instance: two states, stay/switch actions,
/// hidden reward favoring state 1.
pub fn rlhf_two_state() -> EnvBundle {
    let num_states = 2;
    let num_actions = 2;
    // Action 0 stays, action 1 switches; deterministic.
    let mut transitions = vec![0.0; num_states * num_actions * num_states];
    for s in 0..num_states {
        transitions[(s * num_actions) * num_states + s] = 1.0;
        transitions[(s * num_actions + 1) * num_states + (1 - s)] = 1.0;
    }
    let mdp = TabularMdp::new(
        num_states,
        num_actions,
        transitions,
        vec![1.0, 0.0],
        0.9,
        3,
        3,
    )
    .expect("valid");
    let policy_features = FeatureTable::tabular(num_states, num_actions);
    let reward_features = state_indicator_features(num_states, num_actions, &[0, 1]);
    let true_reward = LinearReward::new(
        DVector::from_vec(vec![0.0, 1.0]),
        state_indicator_features(num_states, num_actions, &[0, 1]),
    )
    .expect("valid");
    EnvBundle {
        name: "rlhf-2state".into(),
        mdp,
        policy_features,
        reward_features,
        true_reward,
        proximity: None,
    }
}

/// Standard sampled-preference instance: a 3×3 grid whose hidden reward pays
/// only at the far-corner goal, while the learned reward also carries a
/// corridor feature on the cell just before the goal.
///
/// Under exploratory data the corridor visit predicts goal-reaching, so a
/// frozen-data reward fit keeps pumping the corridor weight; once it
/// overtakes the goal weight, camping in the corridor is optimal for the
/// learned reward and worthless under the hidden one, and the fresh data it
/// generates (identical tied pairs) carries no correction signal.
pub fn rlhf_gridworld() -> EnvBundle {
    let n = 3;
    let goal = grid_index(n, n - 1, n - 1);
    let corridor = grid_index(n, n - 2, n - 1);
    let mdp = gridworld_mdp(n, &[], 0.9, 6, 6).expect("valid grid");
    let num_states = mdp.num_states();
    let num_actions = mdp.num_actions();
    let policy_features = FeatureTable::tabular(num_states, num_actions);
    let reward_features = state_indicator_features(num_states, num_actions, &[goal, corridor]);
    let true_reward = LinearReward::new(
        DVector::from_element(1, 1.0),
        state_indicator_features(num_states, num_actions, &[goal]),
    )
    .expect("valid");
    EnvBundle {
        name: "rlhf-gridworld".into(),
        mdp,
        policy_features,
        reward_features,
        true_reward,
        proximity: Some(proximity_weights(n, goal)),
    }
}

/// A random dense instance for oracle sweeps: random transition rows and
/// initial distribution, tabular policy features, random 2-dimensional
/// reward features, and random parameters in `[-1, 1]`.
pub struct RandomInstance {
    pub mdp: TabularMdp,
    pub policy: SoftmaxPolicy,
    pub reward: LinearReward,
}

pub fn random_instance(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    seed: u64,
) -> RandomInstance {
    let mut rng = seed_stream(seed, Stream::InstanceGen);
    let mut transitions = vec![0.0; num_states * num_actions * num_states];
    for row in transitions.chunks_mut(num_states) {
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = rng.random::<f64>() + 1e-3;
            sum += *p;
        }
        let mut acc = 0.0;
        for p in row.iter_mut().take(num_states - 1) {
            *p /= sum;
            acc += *p;
        }
        row[num_states - 1] = 1.0 - acc;
    }
    let mut initial = vec![0.0; num_states];
    let mut sum = 0.0;
    for p in initial.iter_mut() {
        *p = rng.random::<f64>() + 1e-3;
        sum += *p;
    }
    let mut acc = 0.0;
    for p in initial.iter_mut().take(num_states - 1) {
        *p /= sum;
        acc += *p;
    }
    initial[num_states - 1] = 1.0 - acc;

    let mdp = TabularMdp::new(
        num_states,
        num_actions,
        transitions,
        initial,
        0.9,
        horizon,
        horizon,
    )
    .expect("random rows normalized");

    let policy_features = FeatureTable::tabular(num_states, num_actions);
    let theta = DVector::from_fn(policy_features.dim(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let policy = SoftmaxPolicy::new(theta, policy_features).expect("finite theta");

    let reward_dim = 2;
    let psi: Vec<f64> = (0..num_states * num_actions * reward_dim)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let reward_features =
        FeatureTable::new(num_states, num_actions, reward_dim, psi).expect("valid");
    let nu = DVector::from_fn(reward_dim, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let reward = LinearReward::new(nu, reward_features).expect("finite nu");

    RandomInstance {
        mdp,
        policy,
        reward,
    }
}

/// Expected true-reward return of a near-optimal policy under the hidden
/// reward: the oracle line in alignment plots. Solved by exact ascent; the
/// value error is O(final gradient norm).
pub fn oracle_return(bundle: &EnvBundle) -> Result<f64> {
    let cfg = crate::lower::LowerConfig {
        grad_tol: 1e-6,
        max_oracle_iters: 20_000,
        ..Default::default()
    };
    let solved = solve_lower_exact(
        &bundle.mdp,
        &bundle.true_reward,
        &bundle.uniform_policy(),
        &cfg,
    )?;
    crate::lower::exact_value(
        &bundle.mdp,
        &bundle.true_reward,
        &solved.policy,
        Start::InitialDist,
    )
}

/// Registry entry: name, summary, and accepted parameters.
pub struct EnvDescriptor {
    pub name: &'static str,
    pub summary: &'static str,
    pub params: &'static str,
}

/// Environments resolvable by name from the CLI.
pub fn env_registry() -> Vec<EnvDescriptor> {
    vec![
        EnvDescriptor {
            name: "gridworld-goal",
            summary: "3x3 grid, goal-occupancy utility objective (standard utility instance)",
            params: "(none)",
        },
        EnvDescriptor {
            name: "rlhf-2state",
            summary: "2-state stay/switch MDP for exact preference runs",
            params: "(none)",
        },
        EnvDescriptor {
            name: "rlhf-gridworld",
            summary: "3x3 grid with goal and corridor features, sampled preferences (standard RLHF instance)",
            params: "(none)",
        },
        EnvDescriptor {
            name: "chain",
            summary: "n-state left/right chain, goal at the far end",
            params: "n (states, default 4)",
        },
        EnvDescriptor {
            name: "gridworld",
            summary: "n x n maze, goal in the far corner",
            params: "size (default 3), walls (`r,c;r,c` list), horizon (default 4)",
        },
        EnvDescriptor {
            name: "file",
            summary: "MDP loaded from a plain-text spec; tabular features, zero hidden reward",
            params: "path (required)",
        },
    ]
}

/// Builds a bundle by registry name. Unknown keys in `params` are rejected.
pub fn build_env(name: &str, params: &BTreeMap<String, String>) -> Result<EnvBundle> {
    let get_usize = |key: &str, default: usize| -> Result<usize> {
        match params.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad `{key}` value `{v}`"))),
        }
    };
    let allow_keys = |allowed: &[&str]| -> Result<()> {
        for key in params.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "environment `{name}` does not accept parameter `{key}`"
                )));
            }
        }
        Ok(())
    };
    match name {
        "gridworld-goal" => {
            allow_keys(&[])?;
            Ok(gridworld_goal())
        }
        "rlhf-2state" => {
            allow_keys(&[])?;
            Ok(rlhf_two_state())
        }
        "rlhf-gridworld" => {
            allow_keys(&[])?;
            Ok(rlhf_gridworld())
        }
        "chain" => {
            allow_keys(&["n"])?;
            let n = get_usize("n", 4)?;
            let mdp = chain_mdp(n, 0.9, n, n);
            let policy_features = FeatureTable::tabular(n, 2);
            let goal = n - 1;
            let reward_features = state_indicator_features(n, 2, &[goal]);
            let true_reward = LinearReward::new(
                DVector::from_element(1, 1.0),
                state_indicator_features(n, 2, &[goal]),
            )?;
            Ok(EnvBundle {
                name: format!("chain-{n}"),
                mdp,
                policy_features,
                reward_features,
                true_reward,
                proximity: None,
            })
        }
        "gridworld" => {
            allow_keys(&["size", "walls", "horizon"])?;
            let n = get_usize("size", 3)?;
            let horizon = get_usize("horizon", 4)?;
            let walls = match params.get("walls") {
                None => Vec::new(),
                Some(spec) => parse_walls(spec)?,
            };
            let goal = grid_index(n, n - 1, n - 1);
            let mdp = gridworld_mdp(n, &walls, 0.9, horizon, horizon)?;
            let num_states = mdp.num_states();
            let num_actions = mdp.num_actions();
            let policy_features = FeatureTable::tabular(num_states, num_actions);
            let reward_features = state_indicator_features(num_states, num_actions, &[goal]);
            let true_reward = LinearReward::new(
                DVector::from_element(1, 1.0),
                state_indicator_features(num_states, num_actions, &[goal]),
            )?;
            Ok(EnvBundle {
                name: format!("gridworld-{n}"),
                mdp,
                policy_features,
                reward_features,
                true_reward,
                proximity: Some(proximity_weights(n, goal)),
            })
        }
        "file" => {
            allow_keys(&["path"])?;
            let path = params
                .get("path")
                .ok_or_else(|| Error::InvalidArgument("`file` env needs `path`".into()))?;
            let text = std::fs::read_to_string(path)?;
            let mdp = crate::mdp::mdp_from_text(&text)?;
            let num_states = mdp.num_states();
            let num_actions = mdp.num_actions();
            let policy_features = FeatureTable::tabular(num_states, num_actions);
            let reward_features = FeatureTable::tabular(num_states, num_actions);
            let true_reward = LinearReward::zero(FeatureTable::tabular(num_states, num_actions));
            Ok(EnvBundle {
                name: format!("file:{path}"),
                mdp,
                policy_features,
                reward_features,
                true_reward,
                proximity: None,
            })
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown environment `{other}`; see `list-envs`"
        ))),
    }
}

fn parse_walls(spec: &str) -> Result<Vec<(usize, usize)>> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|cell| {
            let (r, c) = cell.trim().split_once(',').ok_or_else(|| {
                Error::InvalidArgument(format!("bad wall `{cell}`, expected `r,c`"))
            })?;
            let parse = |t: &str| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad wall index `{t}`")))
            };
            Ok((parse(r)?, parse(c)?))
        })
        .collect()
}
