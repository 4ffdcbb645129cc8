//! Flat `key = value` experiment configs with `[section]` headers.
//!
//! The format is deliberately plain text (no structured-markup dependency)
//! so configs diff cleanly and reproduce exactly. Unknown sections or keys
//! are errors that name the offender.

use std::collections::BTreeMap;

use parl::driver::{KSchedule, ObjectiveSpec, RlhfData, RunConfig};
use parl::envs::{build_env, EnvBundle};
use parl::error::{Error, Result};
use parl::hypergrad::{HessianMode, ImplicitSolveConfig};
use parl::lower::{GradMode, LowerConfig};
use parl::policy::params_from_line;
use parl::reward::{
    pairs_from_text, PreferencePair, Regularizer, TeacherParams, TrajectoryUtility, UtilitySpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Aparl,
    Naive,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Aparl => "aparl",
            Method::Naive => "naive",
        }
    }
}

/// A parsed experiment: environment, per-seed run configuration, methods.
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub bundle: EnvBundle,
    /// Run configuration with a placeholder seed; [`Self::run_config`]
    /// instantiates it per seed.
    base: RunConfig,
    pub timings: bool,
}

impl ExperimentConfig {
    pub fn run_config(&self, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        cfg
    }
}

struct RawSections {
    /// section -> key -> (value, line)
    map: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl RawSections {
    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.map
            .get_mut(section)
            .and_then(|sec| sec.remove(key))
            .map(|(v, _)| v)
    }

    fn leftovers(&self) -> Option<(String, String, usize)> {
        for (section, keys) in &self.map {
            if let Some((key, (_, line))) = keys.iter().next() {
                return Some((section.clone(), key.clone(), *line));
            }
        }
        None
    }
}

fn parse_sections(text: &str) -> Result<RawSections> {
    let mut map: BTreeMap<String, BTreeMap<String, (String, usize)>> = BTreeMap::new();
    let mut current = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let name = inner.strip_suffix(']').ok_or(Error::Parse {
                line: line_no,
                column: line.len(),
                message: "unterminated section header".into(),
            })?;
            current = name.trim().to_string();
            map.entry(current.clone()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::Parse {
            line: line_no,
            column: 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        if current.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                column: 1,
                message: "key outside any [section]".into(),
            });
        }
        let key = key.trim().to_string();
        let section = map.entry(current.clone()).or_default();
        if section
            .insert(key.clone(), (value.trim().to_string(), line_no))
            .is_some()
        {
            return Err(Error::Parse {
                line: line_no,
                column: 1,
                message: format!("duplicate key `{key}` in [{current}]"),
            });
        }
    }
    Ok(RawSections { map })
}

fn parse_value<T: std::str::FromStr>(raw: &str, what: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad `{what}` value `{raw}`")))
}

fn parse_beta(raw: &str) -> Result<f64> {
    if raw == "inf" || raw == "infinity" {
        return Ok(f64::INFINITY);
    }
    parse_value(raw, "beta")
}

/// Parses an experiment config from text.
pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    let mut raw = parse_sections(text)?;

    // [experiment]
    let name = raw
        .take("experiment", "name")
        .unwrap_or_else(|| "experiment".into());
    let seeds: Vec<u64> = match raw.take("experiment", "seeds") {
        None => vec![0],
        Some(v) => v
            .split_whitespace()
            .map(|tok| parse_value(tok, "seeds"))
            .collect::<Result<_>>()?,
    };
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("`seeds` must be non-empty".into()));
    }
    let methods: Vec<Method> = match raw.take("experiment", "methods") {
        None => vec![Method::Aparl],
        Some(v) => v
            .split_whitespace()
            .map(|tok| match tok {
                "aparl" => Ok(Method::Aparl),
                "naive" => Ok(Method::Naive),
                other => Err(Error::InvalidArgument(format!(
                    "unknown method `{other}` (expected aparl or naive)"
                ))),
            })
            .collect::<Result<_>>()?,
    };

    // [env]
    let kind = raw
        .take("env", "kind")
        .ok_or_else(|| Error::InvalidArgument("missing `kind` in [env]".into()))?;
    let mut env_params = BTreeMap::new();
    if let Some(section) = raw.map.get_mut("env") {
        for (key, (value, _)) in std::mem::take(section) {
            env_params.insert(key, value);
        }
    }
    let bundle = build_env(&kind, &env_params)?;

    // [lower]
    let lower = LowerConfig {
        step_size: raw
            .take("lower", "step_size")
            .map(|v| parse_value(&v, "step_size"))
            .transpose()?
            .unwrap_or(0.5),
        inner_iters: 0, // set from [run] k below
        mode: match raw.take("lower", "mode").as_deref() {
            None | Some("exact") => GradMode::Exact,
            Some(other) => match other.strip_prefix("monte-carlo:") {
                Some(n) => GradMode::MonteCarlo(parse_value(n, "monte-carlo sample count")?),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "bad lower mode `{other}` (expected exact or monte-carlo:N)"
                    )))
                }
            },
        },
        grad_tol: raw
            .take("lower", "grad_tol")
            .map(|v| parse_value(&v, "grad_tol"))
            .transpose()?
            .unwrap_or(1e-8),
        max_oracle_iters: raw
            .take("lower", "max_oracle_iters")
            .map(|v| parse_value(&v, "max_oracle_iters"))
            .transpose()?
            .unwrap_or(5000),
    };

    // [run]
    let outer_iters = raw
        .take("run", "outer_iters")
        .map(|v| parse_value(&v, "outer_iters"))
        .transpose()?
        .unwrap_or(0);
    let k: usize = raw
        .take("run", "k")
        .map(|v| parse_value(&v, "k"))
        .transpose()?
        .unwrap_or(50);
    let k_schedule = match raw.take("run", "k_schedule").as_deref() {
        None | Some("fixed") => KSchedule::Fixed(k),
        Some("linear") => KSchedule::Linear,
        Some(other) => {
            return Err(Error::InvalidArgument(format!(
                "bad k_schedule `{other}` (expected fixed or linear)"
            )))
        }
    };
    let step_size_upper = raw
        .take("run", "step_size_upper")
        .map(|v| parse_value(&v, "step_size_upper"))
        .transpose()?
        .unwrap_or(0.05);
    let cold_start = raw
        .take("run", "cold_start")
        .map(|v| parse_value(&v, "cold_start"))
        .transpose()?
        .unwrap_or(false);
    let timings = raw
        .take("run", "timings")
        .map(|v| parse_value(&v, "timings"))
        .transpose()?
        .unwrap_or(false);
    let implicit = ImplicitSolveConfig {
        damping: raw
            .take("run", "damping")
            .map(|v| parse_value(&v, "damping"))
            .transpose()?
            .unwrap_or(1e-6),
        hessian_mode: match raw.take("run", "hessian_mode").as_deref() {
            None | Some("exact") => HessianMode::Exact,
            Some("score-outer-omitted") => HessianMode::ScoreOuterOmitted,
            Some(other) => {
                return Err(Error::InvalidArgument(format!(
                    "bad hessian_mode `{other}`"
                )))
            }
        },
    };

    // [objective]
    let objective = match raw.take("objective", "kind").as_deref() {
        None | Some("rlhf") => {
            let beta = raw
                .take("objective", "beta")
                .map(|v| parse_beta(&v))
                .transpose()?
                .unwrap_or(5.0);
            let teacher_discount = raw
                .take("objective", "teacher_discount")
                .map(|v| parse_value(&v, "teacher_discount"))
                .transpose()?
                .unwrap_or(0.9);
            let pairs_per_iter = raw
                .take("objective", "pairs_per_iter")
                .map(|v| parse_value(&v, "pairs_per_iter"))
                .transpose()?
                .unwrap_or(20);
            let data = match raw.take("objective", "data").as_deref() {
                None | Some("sampled") => RlhfData::Sampled,
                Some("exact") => RlhfData::Exact,
                Some(other) => {
                    return Err(Error::InvalidArgument(format!("bad data mode `{other}`")))
                }
            };
            ObjectiveSpec::Rlhf {
                teacher: TeacherParams::new(beta, teacher_discount)?,
                pairs_per_iter,
                data,
            }
        }
        Some("utility") => {
            let utility = match raw.take("objective", "utility").as_deref() {
                None | Some("goal-proximity") => {
                    let proximity = bundle.proximity.clone().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "environment `{}` has no goal geometry for goal-proximity",
                            bundle.name
                        ))
                    })?;
                    TrajectoryUtility::GoalProximity { proximity }
                }
                Some(other) => match other.split_once(':') {
                    Some(("constant", c)) => {
                        TrajectoryUtility::Constant(parse_value(c, "constant utility")?)
                    }
                    Some(("feature-sum", g)) => TrajectoryUtility::DiscountedFeatureSum {
                        features: bundle.reward_features.clone(),
                        discount: parse_value(g, "feature-sum discount")?,
                    },
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "bad utility `{other}` (goal-proximity, constant:C, feature-sum:G)"
                        )))
                    }
                },
            };
            let regularizer = match raw.take("objective", "regularizer").as_deref() {
                None | Some("zero") => Regularizer::Zero,
                Some(other) => match other.split_once(':') {
                    Some(("quadratic", w)) => Regularizer::Quadratic {
                        weight: parse_value(w, "regularizer weight")?,
                    },
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "bad regularizer `{other}` (zero or quadratic:W)"
                        )))
                    }
                },
            };
            {
                // Registration-time gradient check of the catalog entry at a
                // probe point from this environment.
                let probe_tau = parl::mdp::Trajectory::new(vec![(0, 0); 3]);
                let probe_nu =
                    nalgebra::DVector::from_element(bundle.reward_features.dim(), 0.3);
                ObjectiveSpec::Utility(UtilitySpec::validated(
                    utility,
                    regularizer,
                    &probe_tau,
                    &probe_nu,
                )?)
            }
        }
        Some(other) => {
            return Err(Error::InvalidArgument(format!(
                "bad objective kind `{other}` (expected rlhf or utility)"
            )))
        }
    };
    if methods.contains(&Method::Naive) && !matches!(objective, ObjectiveSpec::Rlhf { .. }) {
        return Err(Error::InvalidArgument(
            "the naive method requires the rlhf objective".into(),
        ));
    }

    // [init]: `zeros`, inline decimals, or `file:<path>` checkpoints.
    let parse_init = |raw: Option<&str>, dim: usize| -> Result<nalgebra::DVector<f64>> {
        match raw {
            None | Some("zeros") => Ok(nalgebra::DVector::zeros(dim)),
            Some(spec) => match spec.strip_prefix("file:") {
                Some(path) => params_from_line(std::fs::read_to_string(path.trim())?.trim()),
                None => params_from_line(spec),
            },
        }
    };
    let nu0 = parse_init(
        raw.take("init", "nu0").as_deref(),
        bundle.reward_features.dim(),
    )?;
    let theta0 = parse_init(
        raw.take("init", "theta0").as_deref(),
        bundle.policy_features.dim(),
    )?;
    let initial_dataset: Vec<PreferencePair> = match raw.take("init", "dataset") {
        None => Vec::new(),
        Some(path) => pairs_from_text(&std::fs::read_to_string(path.trim())?)?,
    };
    if nu0.len() != bundle.reward_features.dim() {
        return Err(Error::InvalidArgument(format!(
            "nu0 has {} entries, environment expects {}",
            nu0.len(),
            bundle.reward_features.dim()
        )));
    }
    if theta0.len() != bundle.policy_features.dim() {
        return Err(Error::InvalidArgument(format!(
            "theta0 has {} entries, environment expects {}",
            theta0.len(),
            bundle.policy_features.dim()
        )));
    }

    // Any key we did not consume is a config error naming the key.
    if let Some((section, key, line)) = raw.leftovers() {
        return Err(Error::Parse {
            line,
            column: 1,
            message: format!("unknown key `{key}` in [{section}]"),
        });
    }

    let mut lower = lower;
    lower.inner_iters = k;
    Ok(ExperimentConfig {
        name,
        seeds,
        methods,
        bundle,
        base: RunConfig {
            outer_iters,
            lower,
            step_size_upper,
            k_schedule,
            objective,
            implicit,
            seed: 0,
            nu0,
            theta0,
            cold_start,
            initial_dataset,
        },
        timings,
    })
}
