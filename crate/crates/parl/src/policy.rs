//! Linear-softmax policies with analytic score and log-policy Hessian.
//!
//! `π_θ(a|s) ∝ exp(θ·φ(s,a))`. The score is `φ(s,a) − φ̂_s` with
//! `φ̂_s = Σ_a π_θ(a|s)·φ(s,a)`, and the log-policy Hessian is the negative
//! feature covariance `φ̂_s φ̂_s^T − Σ_a π_θ(a|s)·φ(s,a)φ(s,a)^T`, which is
//! the same for every action at a state.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense feature map `(s, a) → R^dim`.
#[derive(Clone, Debug)]
pub struct FeatureTable {
    num_states: usize,
    num_actions: usize,
    dim: usize,
    /// Row-major `[s][a][k]`.
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn new(num_states: usize, num_actions: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_states * num_actions * dim {
            return Err(Error::InvalidArgument(format!(
                "feature table has {} entries, expected {}",
                data.len(),
                num_states * num_actions * dim
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature table contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            num_states,
            num_actions,
            dim,
            data,
        })
    }

    /// One-hot features of dimension `num_states · num_actions`; the tabular
    /// special case where each `(s,a)` owns one coordinate.
    pub fn tabular(num_states: usize, num_actions: usize) -> Self {
        let dim = num_states * num_actions;
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self {
            num_states,
            num_actions,
            dim,
            data,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, s: usize, a: usize) -> &[f64] {
        &self.data[((s * self.num_actions) + a) * self.dim..][..self.dim]
    }

    pub fn vector(&self, s: usize, a: usize) -> DVector<f64> {
        DVector::from_column_slice(self.get(s, a))
    }

    /// Largest feature norm over all `(s,a)`; the recorded bound ζ₁.
    pub fn max_norm(&self) -> f64 {
        let mut best = 0.0f64;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let n = self.get(s, a).iter().map(|x| x * x).sum::<f64>().sqrt();
                best = best.max(n);
            }
        }
        best
    }
}

/// Softmax policy over a dense feature table.
///
/// Logits are max-shifted before exponentiation, so saturated parameters
/// (entries beyond ±50) are safe and simply pin the policy near a
/// deterministic one.
#[derive(Clone, Debug)]
pub struct SoftmaxPolicy {
    theta: DVector<f64>,
    features: FeatureTable,
}

impl SoftmaxPolicy {
    pub fn new(theta: DVector<f64>, features: FeatureTable) -> Result<Self> {
        if theta.len() != features.dim() {
            return Err(Error::InvalidArgument(format!(
                "theta has dimension {}, features expect {}",
                theta.len(),
                features.dim()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteParameter {
                context: "policy construction".into(),
            });
        }
        Ok(Self { theta, features })
    }

    /// The uniform policy (`θ = 0`).
    pub fn uniform(features: FeatureTable) -> Self {
        let theta = DVector::zeros(features.dim());
        Self { theta, features }
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn features(&self) -> &FeatureTable {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn with_theta(&self, theta: DVector<f64>) -> Result<Self> {
        Self::new(theta, self.features.clone())
    }

    pub fn logit(&self, s: usize, a: usize) -> f64 {
        self.features
            .get(s, a)
            .iter()
            .zip(self.theta.iter())
            .map(|(f, t)| f * t)
            .sum()
    }

    /// `π_θ(·|s)`, computed with max-subtraction.
    pub fn action_probs(&self, s: usize) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.features.num_actions())
            .map(|a| self.logit(s, a))
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Probability-weighted mean feature `φ̂_s`.
    fn mean_feature(&self, s: usize, probs: &[f64]) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim());
        for (a, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                mean.iter_mut()
                    .zip(self.features.get(s, a))
                    .for_each(|(m, f)| *m += p * f);
            }
        }
        mean
    }

    /// Score `∇_θ log π_θ(a|s) = φ(s,a) − φ̂_s`.
    pub fn score(&self, s: usize, a: usize) -> DVector<f64> {
        let probs = self.action_probs(s);
        let mut v = self.features.vector(s, a);
        v -= self.mean_feature(s, &probs);
        v
    }

    /// Log-policy Hessian `∇²_θ log π_θ(a|s) = φ̂_s φ̂_s^T − Σ_a π φφ^T`.
    ///
    /// Independent of the action, so it is keyed by state only.
    pub fn log_policy_hessian(&self, s: usize) -> DMatrix<f64> {
        let probs = self.action_probs(s);
        let mean = self.mean_feature(s, &probs);
        let mut h = &mean * mean.transpose();
        for (a, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                let f = self.features.get(s, a);
                for i in 0..self.dim() {
                    for j in 0..self.dim() {
                        h[(i, j)] -= p * f[i] * f[j];
                    }
                }
            }
        }
        h
    }

    /// `[s][a]` action-probability table.
    pub fn prob_table(&self) -> Vec<Vec<f64>> {
        (0..self.features.num_states())
            .map(|s| self.action_probs(s))
            .collect()
    }

    /// `[s][a]` score table.
    pub fn score_table(&self) -> Vec<Vec<DVector<f64>>> {
        let mut out = Vec::with_capacity(self.features.num_states());
        for s in 0..self.features.num_states() {
            let probs = self.action_probs(s);
            let mean = self.mean_feature(s, &probs);
            let row = (0..self.features.num_actions())
                .map(|a| {
                    let mut v = self.features.vector(s, a);
                    v -= &mean;
                    v
                })
                .collect();
            out.push(row);
        }
        out
    }

    /// Per-state log-policy Hessian table.
    pub fn log_hessian_table(&self) -> Vec<DMatrix<f64>> {
        (0..self.features.num_states())
            .map(|s| self.log_policy_hessian(s))
            .collect()
    }
}

/// One-line whitespace-separated decimal format for parameter vectors, used
/// by CLI checkpointing.
pub fn params_to_line(v: &DVector<f64>) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses the format produced by [`params_to_line`].
pub fn params_from_line(line: &str) -> Result<DVector<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            tok.parse().map_err(|_| Error::Parse {
                line: 1,
                column: i + 1,
                message: format!("bad number `{tok}`"),
            })
        })
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: "empty parameter line".into(),
        });
    }
    Ok(DVector::from_vec(vals))
}

#[cfg(test)]
mod tests {
    use nalgebra::DVector;
    use proptest::prelude::*;

    use super::*;
    use crate::rng::{seed_stream, Stream};
    use crate::verify::fd_gradient;
    use rand::Rng;

    fn random_policy(s: usize, a: usize, seed: u64) -> SoftmaxPolicy {
        let features = FeatureTable::tabular(s, a);
        let mut rng = seed_stream(seed, Stream::InstanceGen);
        let theta = DVector::from_fn(features.dim(), |_, _| rng.random::<f64>() * 4.0 - 2.0);
        SoftmaxPolicy::new(theta, features).unwrap()
    }

    #[test]
    fn zero_theta_is_uniform() {
        let policy = SoftmaxPolicy::uniform(FeatureTable::tabular(3, 2));
        for s in 0..3 {
            let probs = policy.action_probs(s);
            assert!((probs[0] - 0.5).abs() < 1e-15);
            assert!((probs[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn log_three_logit_gives_three_quarters() {
        let features = FeatureTable::tabular(1, 2);
        let theta = DVector::from_vec(vec![3.0f64.ln(), 0.0]);
        let policy = SoftmaxPolicy::new(theta, features).unwrap();
        let probs = policy.action_probs(0);
        assert!((probs[0] - 0.75).abs() < 1e-12);
        assert!((probs[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn score_at_zero_theta_is_plus_minus_half() {
        let policy = SoftmaxPolicy::uniform(FeatureTable::tabular(2, 2));
        let score = policy.score(1, 0);
        // Coordinates are (s,a) blocks: state 1 owns coordinates 2 and 3.
        assert!((score[2] - 0.5).abs() < 1e-15);
        assert!((score[3] + 0.5).abs() < 1e-15);
        assert_eq!(score[0], 0.0);
        assert_eq!(score[1], 0.0);
    }

    #[test]
    fn score_expectation_vanishes() {
        for seed in 0..100 {
            let policy = random_policy(3, 3, seed);
            let s = (seed % 3) as usize;
            let probs = policy.action_probs(s);
            let mut mean = DVector::zeros(policy.dim());
            for (a, &p) in probs.iter().enumerate() {
                mean.axpy(p, &policy.score(s, a), 1.0);
            }
            assert!(mean.amax() < 1e-12, "seed {seed}: residual {}", mean.amax());
        }
    }

    #[test]
    fn score_matches_finite_differences_of_log_prob() {
        let policy = random_policy(3, 2, 11);
        for (s, a) in [(0, 0), (1, 1), (2, 0)] {
            let score = policy.score(s, a);
            let fd = fd_gradient(
                |theta| {
                    let p = policy.with_theta(theta.clone())?;
                    Ok(p.action_probs(s)[a].ln())
                },
                policy.theta(),
                1e-5,
            )
            .unwrap();
            let rel = (&score - &fd).amax() / fd.amax().max(1e-12);
            assert!(rel <= 1e-6, "({s},{a}) relative error {rel}");
        }
    }

    #[test]
    fn hessian_at_zero_theta_is_negative_bernoulli_covariance() {
        let policy = SoftmaxPolicy::uniform(FeatureTable::tabular(2, 2));
        let h = policy.log_policy_hessian(0);
        // State 0 owns coordinates 0 and 1.
        assert!((h[(0, 0)] + 0.25).abs() < 1e-15);
        assert!((h[(0, 1)] - 0.25).abs() < 1e-15);
        assert!((h[(1, 0)] - 0.25).abs() < 1e-15);
        assert!((h[(1, 1)] + 0.25).abs() < 1e-15);
        // Other states' coordinates are untouched.
        assert_eq!(h[(2, 2)], 0.0);
    }

    #[test]
    fn hessian_is_symmetric_negative_semidefinite() {
        for seed in 0..20 {
            let policy = random_policy(3, 3, seed);
            for s in 0..3 {
                let h = policy.log_policy_hessian(s);
                assert!((&h - h.transpose()).amax() < 1e-14);
                let eigs = h.symmetric_eigen().eigenvalues;
                assert!(
                    eigs.iter().all(|&l| l <= 1e-10),
                    "seed {seed} state {s}: eigenvalue {:?}",
                    eigs
                );
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences_of_score() {
        let policy = random_policy(2, 3, 5);
        let (s, a) = (1, 2);
        let h = policy.log_policy_hessian(s);
        let d = policy.dim();
        let eps = 1e-5;
        for j in 0..d {
            let mut plus = policy.theta().clone();
            plus[j] += eps;
            let mut minus = policy.theta().clone();
            minus[j] -= eps;
            let sp = policy.with_theta(plus).unwrap().score(s, a);
            let sm = policy.with_theta(minus).unwrap().score(s, a);
            for i in 0..d {
                let fd = (sp[i] - sm[i]) / (2.0 * eps);
                assert!(
                    (h[(i, j)] - fd).abs() <= 1e-5,
                    "H[{i},{j}] = {} vs fd {fd}",
                    h[(i, j)]
                );
            }
        }
    }

    #[test]
    fn score_norm_is_bounded_by_twice_max_feature_norm() {
        for seed in 0..20 {
            let policy = random_policy(4, 3, seed + 100);
            let bound = 2.0 * policy.features().max_norm();
            for s in 0..4 {
                for a in 0..3 {
                    assert!(policy.score(s, a).norm() <= bound + 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_finite_theta_rejected() {
        let features = FeatureTable::tabular(1, 2);
        let theta = DVector::from_vec(vec![f64::NAN, 0.0]);
        assert!(matches!(
            SoftmaxPolicy::new(theta, features),
            Err(crate::error::Error::NonFiniteParameter { .. })
        ));
    }

    #[test]
    fn params_line_round_trip() {
        let v = DVector::from_vec(vec![1.5, -2.25, 0.0, 1e-9]);
        let line = params_to_line(&v);
        let back = params_from_line(&line).unwrap();
        assert_eq!(v, back);
        assert!(params_from_line("  ").is_err());
        assert!(params_from_line("1.0 oops").is_err());
    }

    proptest! {
        /// Probabilities always normalize, for any finite parameters.
        #[test]
        fn probs_normalize(theta in proptest::collection::vec(-30.0f64..30.0, 6)) {
            let policy =
                SoftmaxPolicy::new(DVector::from_vec(theta), FeatureTable::tabular(3, 2)).unwrap();
            for s in 0..3 {
                let total: f64 = policy.action_probs(s).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }

        /// Adding a constant to every logit at a state leaves the
        /// distribution unchanged.
        #[test]
        fn shift_invariance(
            theta in proptest::collection::vec(-20.0f64..20.0, 4),
            shift in -25.0f64..25.0,
        ) {
            let features = FeatureTable::tabular(2, 2);
            let policy = SoftmaxPolicy::new(DVector::from_vec(theta.clone()), features.clone()).unwrap();
            let mut shifted = theta.clone();
            // State 1 owns coordinates 2 and 3 of the tabular table.
            shifted[2] += shift;
            shifted[3] += shift;
            let shifted_policy =
                SoftmaxPolicy::new(DVector::from_vec(shifted), features).unwrap();
            let p = policy.action_probs(1);
            let q = shifted_policy.action_probs(1);
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
