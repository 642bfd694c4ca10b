//! Zeroing weights of a coded sample by three orderings, and the
//! accuracy-versus-fraction sweep over them.
//!
//! Each strategy induces a total order on the prunable coordinates (ties by
//! index); pruning a fraction `f` zeroes the first `⌊f n⌋` of that order, so
//! pruned sets are nested across fractions.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cli_io::Dataset;
use crate::gaussian::DiagonalGaussian;
use crate::nn::ModelSpec;
use crate::pipeline::{evaluate, PipelineError};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("standard deviation must be positive, got {0}")]
    Sigma(f64),
    #[error("KL-divergence pruning needs the posterior")]
    MissingPosterior,
    #[error("posterior has {found} coordinates, sample has {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("fractions must be strictly increasing")]
    Unsorted,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PruneKind {
    RandomUniform,
    AbsoluteValue,
    KLDivergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PruneStrategy {
    pub kind: PruneKind,
    /// Only read by [`PruneKind::RandomUniform`].
    pub seed: u64,
}

impl PruneStrategy {
    pub fn random(seed: u64) -> Self {
        Self { kind: PruneKind::RandomUniform, seed }
    }

    pub fn absolute() -> Self {
        Self { kind: PruneKind::AbsoluteValue, seed: 0 }
    }

    pub fn kl() -> Self {
        Self { kind: PruneKind::KLDivergence, seed: 0 }
    }

    pub fn all(seed: u64) -> [Self; 3] {
        [Self::random(seed), Self::absolute(), Self::kl()]
    }
}

impl fmt::Display for PruneStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.kind {
            PruneKind::RandomUniform => "random-uniform",
            PruneKind::AbsoluteValue => "absolute-value",
            PruneKind::KLDivergence => "kl-divergence",
        })
    }
}

/// `KL(N(mu, sigma^2) || delta_0)` up to an additive constant:
/// `log sigma + mu^2 / (2 sigma^2)`. Lower means closer to zero.
pub fn score_kl_to_delta(mu: f64, sigma: f64) -> Result<f64, PruneError> {
    if !(sigma > 0.0) {
        return Err(PruneError::Sigma(sigma));
    }
    Ok(sigma.ln() + mu * mu / (2.0 * sigma * sigma))
}

/// Prunable coordinates in the order `strategy` removes them.
pub fn prune_order(
    sample: &[f64],
    posterior: Option<&DiagonalGaussian>,
    strategy: PruneStrategy,
    prunable: &[bool],
) -> Result<Vec<usize>, PruneError> {
    let mut idx: Vec<usize> = (0..sample.len()).filter(|&i| prunable[i]).collect();
    match strategy.kind {
        PruneKind::RandomUniform => {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(strategy.seed));
        }
        PruneKind::AbsoluteValue => {
            idx.sort_by(|&a, &b| sample[a].abs().total_cmp(&sample[b].abs()).then(a.cmp(&b)));
        }
        PruneKind::KLDivergence => {
            let q = posterior.ok_or(PruneError::MissingPosterior)?;
            if q.len() != sample.len() {
                return Err(PruneError::Dimension { expected: sample.len(), found: q.len() });
            }
            let scores = idx
                .iter()
                .map(|&i| score_kl_to_delta(q.means[i], q.log_stds[i].exp()).map(|s| (s, i)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut scored = scores;
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            idx = scored.into_iter().map(|(_, i)| i).collect();
        }
    }
    Ok(idx)
}

fn check_fraction(f: f64) -> Result<(), PruneError> {
    if !(0.0..=1.0).contains(&f) {
        return Err(PruneError::Fraction(f));
    }
    Ok(())
}

fn zero_prefix(sample: &[f64], order: &[usize], fraction: f64) -> Vec<f64> {
    let k = (fraction * order.len() as f64).floor() as usize;
    let mut out = sample.to_vec();
    for &i in &order[..k] {
        out[i] = 0.0;
    }
    out
}

/// Zeroes `⌊fraction n⌋` of the coordinates marked `prunable`.
pub fn prune_masked(
    sample: &[f64],
    posterior: Option<&DiagonalGaussian>,
    strategy: PruneStrategy,
    fraction: f64,
    prunable: &[bool],
) -> Result<Vec<f64>, PruneError> {
    check_fraction(fraction)?;
    let order = prune_order(sample, posterior, strategy, prunable)?;
    Ok(zero_prefix(sample, &order, fraction))
}

/// [`prune_masked`] with every coordinate prunable.
pub fn prune(
    sample: &[f64],
    posterior: Option<&DiagonalGaussian>,
    strategy: PruneStrategy,
    fraction: f64,
) -> Result<Vec<f64>, PruneError> {
    prune_masked(sample, posterior, strategy, fraction, &vec![true; sample.len()])
}

/// `0, step, 2 step, ..., 1`.
pub fn fraction_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneCurve {
    pub strategy: PruneStrategy,
    /// `(fraction pruned, test accuracy)`.
    pub rows: Vec<(f64, f64)>,
}

impl PruneCurve {
    pub fn accuracy_at(&self, fraction: f64) -> Option<f64> {
        self.rows.iter().find(|r| (r.0 - fraction).abs() < 1e-12).map(|r| r.1)
    }
}

/// Accuracy of `sample` under each strategy at each fraction. Only
/// weight-matrix entries are pruned; biases are left alone.
pub fn prune_sweep(
    sample: &[f64],
    posterior: Option<&DiagonalGaussian>,
    strategies: &[PruneStrategy],
    fractions: &[f64],
    spec: &ModelSpec,
    data: &Dataset,
) -> Result<Vec<PruneCurve>, PruneError> {
    for &f in fractions {
        check_fraction(f)?;
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PruneError::Unsorted);
    }
    let prunable = spec.weight_mask();
    strategies
        .iter()
        .map(|&strategy| {
            let order = prune_order(sample, posterior, strategy, &prunable)?;
            let rows = fractions
                .par_iter()
                .map(|&f| {
                    let w = zero_prefix(sample, &order, f);
                    Ok((f, evaluate(spec, &w, data)?.accuracy))
                })
                .collect::<Result<Vec<_>, PruneError>>()?;
            Ok(PruneCurve { strategy, rows })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian1D;
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        assert_eq!(score_kl_to_delta(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(score_kl_to_delta(2.0, 1.0).unwrap(), 2.0);
        assert!((score_kl_to_delta(1.0, 0.5).unwrap() - 1.306853).abs() < 1e-6);
        assert!(matches!(score_kl_to_delta(1.0, 0.0), Err(PruneError::Sigma(_))));
    }

    #[test]
    fn prune_examples() {
        let s = [3.0, -0.1, 2.0];
        assert_eq!(prune(&s, None, PruneStrategy::absolute(), 1.0 / 3.0).unwrap(), vec![3.0, 0.0, 2.0]);
        assert_eq!(prune(&s, None, PruneStrategy::random(1), 0.0).unwrap(), s.to_vec());
        assert_eq!(prune(&s, None, PruneStrategy::random(1), 1.0).unwrap(), vec![0.0; 3]);
        assert!(matches!(prune(&s, None, PruneStrategy::kl(), 0.5), Err(PruneError::MissingPosterior)));
        assert!(matches!(prune(&s, None, PruneStrategy::absolute(), 1.5), Err(PruneError::Fraction(_))));
    }

    #[test]
    fn ties_break_by_index() {
        let s = [1.0, -1.0, 1.0, 0.5];
        let order = prune_order(&s, None, PruneStrategy::absolute(), &[true; 4]).unwrap();
        assert_eq!(order, vec![3, 0, 1, 2]);
    }

    #[test]
    fn masked_coordinates_survive() {
        let s = [0.1, 0.2, 0.3, 0.4];
        let out = prune_masked(&s, None, PruneStrategy::absolute(), 1.0, &[true, false, true, false]).unwrap();
        assert_eq!(out, vec![0.0, 0.2, 0.0, 0.4]);
    }

    fn posterior_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (prop::collection::vec(-3.0f64..3.0, n), prop::collection::vec(-4.0f64..1.0, n))
        })
    }

    proptest! {
        #[test]
        fn kl_argmin_is_density_argmax((means, log_stds) in posterior_strategy()) {
            let best_score = (0..means.len())
                .min_by(|&a, &b| {
                    let sa = score_kl_to_delta(means[a], log_stds[a].exp()).unwrap();
                    let sb = score_kl_to_delta(means[b], log_stds[b].exp()).unwrap();
                    sa.total_cmp(&sb).then(a.cmp(&b))
                })
                .unwrap();
            let best_density = (0..means.len())
                .max_by(|&a, &b| {
                    let da = Gaussian1D::new(means[a], log_stds[a]).log_density(0.0);
                    let db = Gaussian1D::new(means[b], log_stds[b]).log_density(0.0);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap();
            prop_assert_eq!(best_score, best_density);
        }

        #[test]
        fn pruned_sets_are_nested(
            sample in prop::collection::vec(-2.0f64..2.0, 1..60),
            seed in any::<u64>(),
            f1 in 0.0f64..1.0,
            df in 0.0f64..1.0,
        ) {
            let f2 = (f1 + df).min(1.0);
            let q = DiagonalGaussian::new(sample.iter().map(|v| v * 0.9).collect(), vec![-1.0; sample.len()]).unwrap();
            for strategy in PruneStrategy::all(seed) {
                let a = prune(&sample, Some(&q), strategy, f1).unwrap();
                let b = prune(&sample, Some(&q), strategy, f2).unwrap();
                for i in 0..sample.len() {
                    if a[i] == 0.0 && sample[i] != 0.0 {
                        prop_assert_eq!(b[i], 0.0);
                    }
                    if a[i] != 0.0 {
                        prop_assert_eq!(a[i], sample[i]);
                    }
                }
                let zeroed = a.iter().zip(&sample).filter(|(x, s)| **x == 0.0 && **s != 0.0).count();
                prop_assert!(zeroed <= (f1 * sample.len() as f64).floor() as usize);
            }
        }

        #[test]
        fn absolute_ordering_ignores_the_posterior(
            sample in prop::collection::vec(-2.0f64..2.0, 1..30),
            f in 0.0f64..=1.0,
        ) {
            let n = sample.len();
            let q1 = DiagonalGaussian::new(vec![0.0; n], vec![0.0; n]).unwrap();
            let q2 = DiagonalGaussian::new(vec![1.0; n], vec![-2.0; n]).unwrap();
            prop_assert_eq!(
                prune(&sample, Some(&q1), PruneStrategy::absolute(), f).unwrap(),
                prune(&sample, Some(&q2), PruneStrategy::absolute(), f).unwrap()
            );
        }
    }
}
