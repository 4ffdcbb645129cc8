//! The outer alignment loop: A-PARL, the naive preference baseline that
//! drops the implicit distribution term, run traces, and stationarity
//! summaries.
//!
//! Each recorded step `t` holds the state of iteration `t`: the reward
//! parameter ν_t, the inner-solved policy θ^K(ν_t), the surrogate upper
//! gradient at (ν_t, θ^K) with its term breakdown, the exact objective
//! value, and the true-reward alignment return. The reward update
//! `ν_{t+1} = ν_t + α_u·∇̃G` follows ascent on the upper objective; a trace
//! of a `T`-iteration run therefore has `T + 1` records, the last one
//! holding (ν_T, θ^K(ν_T)).

use std::time::Instant;

use nalgebra::DVector;

use crate::envs::EnvBundle;
use crate::error::{Error, Result};
use crate::hypergrad::{
    objective_value, upper_grad_rlhf, upper_grad_utility, ExactObjective, ImplicitSolveConfig,
    RlhfMode,
};
use crate::lower::{exact_value, inner_loop, LowerConfig, Start};
use crate::mdp::sample_trajectory;
use crate::policy::SoftmaxPolicy;
use crate::reward::{
    pref_loglik, teacher_label, LinearReward, PreferencePair, TeacherParams, UtilitySpec,
};
use crate::rng::{seed_stream, Stream};

/// Inner-iteration schedule across outer steps.
#[derive(Clone, Copy, Debug)]
pub enum KSchedule {
    Fixed(usize),
    /// `K(t) = t + 1`, the schedule used by the convergence argument.
    Linear,
}

impl KSchedule {
    fn at(&self, t: usize) -> usize {
        match self {
            KSchedule::Fixed(k) => *k,
            KSchedule::Linear => t + 1,
        }
    }
}

/// How preference data is obtained in RLHF runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RlhfData {
    /// Enumerate pairs and marginalize labels analytically; no dataset.
    Exact,
    /// Draw `pairs_per_iter` fresh pairs from the current policy each
    /// iteration, label them with the teacher, and append to a growing
    /// dataset.
    Sampled,
}

/// Upper objective selection for a run.
#[derive(Clone, Debug)]
pub enum ObjectiveSpec {
    Utility(UtilitySpec),
    Rlhf {
        teacher: TeacherParams,
        pairs_per_iter: usize,
        data: RlhfData,
    },
}

/// Full configuration of one outer-loop run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub outer_iters: usize,
    pub lower: LowerConfig,
    pub step_size_upper: f64,
    pub k_schedule: KSchedule,
    pub objective: ObjectiveSpec,
    pub implicit: ImplicitSolveConfig,
    pub seed: u64,
    pub nu0: DVector<f64>,
    pub theta0: DVector<f64>,
    /// Reset θ to θ0 at every outer iteration instead of warm-starting.
    pub cold_start: bool,
    /// Pairs preloaded into the dataset before any fresh draws
    /// (sampled-data runs only).
    pub initial_dataset: Vec<PreferencePair>,
}

/// One recorded outer iteration.
#[derive(Clone, Debug)]
pub struct IterRecord {
    pub iteration: usize,
    pub nu: DVector<f64>,
    pub theta: DVector<f64>,
    /// Gradient actually applied to ν (for the naive baseline this is the
    /// reward term only).
    pub grad_applied: DVector<f64>,
    /// Direct / reward-learning part of the upper gradient.
    pub term_direct: DVector<f64>,
    /// Implicit distribution part of the upper gradient. Recorded for the
    /// naive baseline too, even though it is not applied there.
    pub term_implicit: DVector<f64>,
    /// `‖grad_applied‖²`.
    pub grad_norm_sq: f64,
    /// Exact upper objective value at (ν_t, θ^K).
    pub objective: f64,
    /// Expected true-reward return of θ^K: the alignment metric.
    pub align_return: f64,
    /// Gradient norms of the K inner steps.
    pub inner_grad_norms: Vec<f64>,
    pub wall_ms: u64,
}

/// Trace of one run.
#[derive(Clone, Debug)]
pub struct RunTrace {
    pub method: &'static str,
    pub records: Vec<IterRecord>,
    /// The accumulated preference dataset (sampled-data runs only).
    pub dataset: Vec<PreferencePair>,
}

impl RunTrace {
    pub fn final_record(&self) -> &IterRecord {
        self.records.last().expect("trace always has records")
    }

    pub fn grad_norm_sq_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.grad_norm_sq).collect()
    }

    pub fn align_return_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.align_return).collect()
    }
}

/// Which gradient the outer update applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Aparl,
    NaiveRlhf,
}

/// Runs A-PARL: inner policy ascent, full surrogate upper gradient
/// (direct + implicit terms), ascent on ν.
pub fn run_aparl(bundle: &EnvBundle, cfg: &RunConfig) -> Result<RunTrace> {
    run_outer(bundle, cfg, Method::Aparl)
}

/// Runs the naive preference baseline: the identical loop, but the reward
/// update uses the frozen-data reward-learning term only; the implicit
/// distribution term is computed for the record and dropped from the update.
pub fn run_naive_rlhf(bundle: &EnvBundle, cfg: &RunConfig) -> Result<RunTrace> {
    if !matches!(cfg.objective, ObjectiveSpec::Rlhf { .. }) {
        return Err(Error::InvalidArgument(
            "the naive baseline is defined for the rlhf objective only".into(),
        ));
    }
    run_outer(bundle, cfg, Method::NaiveRlhf)
}

fn run_outer(bundle: &EnvBundle, cfg: &RunConfig, method: Method) -> Result<RunTrace> {
    let mdp = &bundle.mdp;
    let mut sampling_rng = seed_stream(cfg.seed, Stream::Sampling);
    let mut teacher_rng = seed_stream(cfg.seed, Stream::Teacher);
    let mut mc_rng = seed_stream(cfg.seed, Stream::McGradient);

    let theta0_policy = SoftmaxPolicy::new(cfg.theta0.clone(), bundle.policy_features.clone())?;
    let mut policy = theta0_policy.clone();
    let mut nu = cfg.nu0.clone();
    let mut dataset: Vec<PreferencePair> = cfg.initial_dataset.clone();

    let method_name = match method {
        Method::Aparl => "aparl",
        Method::NaiveRlhf => "naive",
    };
    let mut trace = RunTrace {
        method: method_name,
        records: Vec::with_capacity(cfg.outer_iters + 1),
        dataset: Vec::new(),
    };

    for t in 0..=cfg.outer_iters {
        let started = Instant::now();
        if cfg.cold_start {
            policy = theta0_policy.clone();
        }
        let reward = LinearReward::new(nu.clone(), bundle.reward_features.clone())?;

        let mut inner_cfg = cfg.lower;
        inner_cfg.inner_iters = cfg.k_schedule.at(t);
        let inner = inner_loop(mdp, &reward, &policy, &inner_cfg, &mut mc_rng)
            .map_err(|e| attach_trace(e, t, &trace))?;
        policy = inner.policy;

        let (term_direct, term_implicit, objective) = match &cfg.objective {
            ObjectiveSpec::Utility(spec) => {
                let grad = upper_grad_utility(mdp, &reward, &policy, spec, &cfg.implicit)
                    .map_err(|e| attach_trace(e, t, &trace))?;
                let value = objective_value(mdp, &reward, &policy, &ExactObjective::Utility(spec))
                    .map_err(|e| attach_trace(e, t, &trace))?;
                (&grad.term_direct + &grad.term_reg, grad.term_implicit, value)
            }
            ObjectiveSpec::Rlhf {
                teacher,
                pairs_per_iter,
                data,
            } => match data {
                RlhfData::Exact => {
                    let grad = upper_grad_rlhf(
                        mdp,
                        &reward,
                        &policy,
                        RlhfMode::Exact {
                            teacher,
                            true_reward: &bundle.true_reward,
                        },
                        &cfg.implicit,
                    )
                    .map_err(|e| attach_trace(e, t, &trace))?;
                    let value = objective_value(
                        mdp,
                        &reward,
                        &policy,
                        &ExactObjective::Rlhf {
                            teacher,
                            true_reward: &bundle.true_reward,
                        },
                    )
                    .map_err(|e| attach_trace(e, t, &trace))?;
                    (grad.term_reward, grad.term_implicit, value)
                }
                RlhfData::Sampled => {
                    collect_pairs(
                        bundle,
                        &policy,
                        teacher,
                        *pairs_per_iter,
                        &mut dataset,
                        &mut sampling_rng,
                        &mut teacher_rng,
                    );
                    let grad = upper_grad_rlhf(
                        mdp,
                        &reward,
                        &policy,
                        RlhfMode::Batch(&dataset),
                        &cfg.implicit,
                    )
                    .map_err(|e| attach_trace(e, t, &trace))?;
                    let value = pref_loglik(&reward, &dataset)
                        .map_err(|e| attach_trace(e, t, &trace))?;
                    (grad.term_reward, grad.term_implicit, value)
                }
            },
        };

        let grad_applied = match method {
            Method::Aparl => &term_direct + &term_implicit,
            Method::NaiveRlhf => term_direct.clone(),
        };
        let align_return = exact_value(mdp, &bundle.true_reward, &policy, Start::InitialDist)
            .map_err(|e| attach_trace(e, t, &trace))?;

        trace.records.push(IterRecord {
            iteration: t,
            nu: nu.clone(),
            theta: policy.theta().clone(),
            grad_norm_sq: grad_applied.norm_squared(),
            grad_applied: grad_applied.clone(),
            term_direct,
            term_implicit,
            objective,
            align_return,
            inner_grad_norms: inner.grad_norms,
            wall_ms: started.elapsed().as_millis() as u64,
        });

        if t < cfg.outer_iters {
            nu += cfg.step_size_upper * &grad_applied;
            if nu.iter().any(|x| !x.is_finite()) {
                return Err(Error::AbortedRun {
                    at_iteration: t,
                    partial: Box::new(trace),
                });
            }
        }
    }
    trace.dataset = dataset;
    Ok(trace)
}

fn attach_trace(e: Error, t: usize, trace: &RunTrace) -> Error {
    match e {
        Error::NonFiniteParameter { .. } => Error::AbortedRun {
            at_iteration: t,
            partial: Box::new(trace.clone()),
        },
        other => other,
    }
}

fn collect_pairs<R1: rand::Rng, R2: rand::Rng>(
    bundle: &EnvBundle,
    policy: &SoftmaxPolicy,
    teacher: &TeacherParams,
    pairs_per_iter: usize,
    dataset: &mut Vec<PreferencePair>,
    sampling_rng: &mut R1,
    teacher_rng: &mut R2,
) {
    let horizon = bundle.mdp.horizon_upper();
    for _ in 0..pairs_per_iter {
        let tau0 = sample_trajectory(&bundle.mdp, policy, horizon, sampling_rng);
        let tau1 = sample_trajectory(&bundle.mdp, policy, horizon, sampling_rng);
        let label = teacher_label(&tau0, &tau1, &bundle.true_reward, teacher, teacher_rng);
        dataset.push(PreferencePair { tau0, tau1, label });
    }
}

// ----------------------------------------------------------------------------
// Stationarity summaries
// ----------------------------------------------------------------------------

/// Running averages of the squared surrogate-gradient norm, plus a log-log
/// slope fitted to the raw series over the second half of the run.
#[derive(Clone, Debug)]
pub struct StationarityReport {
    /// `m_t = (1/(t+1))·Σ_{i≤t} g²_i` per record.
    pub running_means: Vec<f64>,
    /// OLS slope of `ln g²_t` against `ln t` (t = record index + 1) over the
    /// second half; NaN when fewer than two finite points exist.
    pub slope: f64,
}

pub fn stationarity_trace(trace: &RunTrace) -> Result<StationarityReport> {
    stationarity_from_series(&trace.grad_norm_sq_series())
}

/// Same summary from a raw `‖∇̃G‖²` series (entry `i` is step `i + 1`).
pub fn stationarity_from_series(series: &[f64]) -> Result<StationarityReport> {
    if series.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut running_means = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (i, &g) in series.iter().enumerate() {
        acc += g;
        running_means.push(acc / (i + 1) as f64);
    }
    let start = series.len() / 2;
    let points: Vec<(f64, f64)> = series
        .iter()
        .enumerate()
        .skip(start)
        .filter(|&(_, &g)| g > 0.0 && g.is_finite())
        .map(|(i, &g)| (((i + 1) as f64).ln(), g.ln()))
        .collect();
    let slope = if points.len() < 2 {
        f64::NAN
    } else {
        let n = points.len() as f64;
        let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
        let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
        let sxy: f64 = points
            .iter()
            .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
            .sum();
        sxy / sxx
    };
    Ok(StationarityReport {
        running_means,
        slope,
    })
}

// ----------------------------------------------------------------------------
// Trace CSV
// ----------------------------------------------------------------------------

/// Fixed trace schema: `iteration,nu_0..nu_{n-1},grad_norm_sq,objective,`
/// `align_return,term2_norm,wall_ms`.
///
/// `wall_ms` is written as 0 unless `timings` is set: real timings would
/// break byte-for-byte reproducibility of repeated runs.
pub fn trace_to_csv(trace: &RunTrace, timings: bool) -> String {
    let n = trace.records[0].nu.len();
    let mut out = String::from("iteration");
    for i in 0..n {
        out.push_str(&format!(",nu_{i}"));
    }
    out.push_str(",grad_norm_sq,objective,align_return,term2_norm,wall_ms\n");
    for r in &trace.records {
        out.push_str(&format!("{}", r.iteration));
        for x in r.nu.iter() {
            out.push_str(&format!(",{x}"));
        }
        let wall = if timings { r.wall_ms } else { 0 };
        out.push_str(&format!(
            ",{},{},{},{},{}\n",
            r.grad_norm_sq,
            r.objective,
            r.align_return,
            r.term_implicit.norm(),
            wall
        ));
    }
    out
}

/// A trace CSV read back for plotting: the columns the plot pipeline needs.
#[derive(Clone, Debug)]
pub struct ParsedTrace {
    pub iterations: Vec<usize>,
    pub align_return: Vec<f64>,
    pub grad_norm_sq: Vec<f64>,
    pub objective: Vec<f64>,
}

/// Parses a CSV produced by [`trace_to_csv`]; unknown columns are tolerated,
/// missing required ones are a [`Error::SchemaMismatch`].
pub fn trace_from_csv(text: &str) -> Result<ParsedTrace> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::SchemaMismatch {
        column: "iteration".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or(Error::SchemaMismatch {
                column: name.into(),
            })
    };
    let it_col = find("iteration")?;
    let align_col = find("align_return")?;
    let grad_col = find("grad_norm_sq")?;
    let obj_col = find("objective")?;
    let mut parsed = ParsedTrace {
        iterations: Vec::new(),
        align_return: Vec::new(),
        grad_norm_sq: Vec::new(),
        objective: Vec::new(),
    };
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let get = |col: usize, name: &str| -> Result<f64> {
            fields
                .get(col)
                .and_then(|f| f.parse().ok())
                .ok_or(Error::SchemaMismatch {
                    column: name.into(),
                })
        };
        parsed.iterations.push(get(it_col, "iteration")? as usize);
        parsed.align_return.push(get(align_col, "align_return")?);
        parsed.grad_norm_sq.push(get(grad_col, "grad_norm_sq")?);
        parsed.objective.push(get(obj_col, "objective")?);
    }
    Ok(parsed)
}
