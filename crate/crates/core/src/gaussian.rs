//! Diagonal Gaussian algebra shared by the training and coding paths.
//!
//! All divergences are in nats. A Mean-KL weight is described by a mean
//! offset `tau` and a share of its block's KL budget; its variance is then
//! pinned by inverting the Gaussian KL through the principal branch of
//! Lambert W, so `KL(q || p)` equals the assigned share exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lambert_w::{lambert_w, Evaluation, WDomainPoint};

/// Clamp margin used when inverting `tanh` in [`tau_from_mean`].
pub const TAU_CLAMP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cannot take a softmax of an empty vector")]
    EmptyLogits,
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("weight {index}: |mu - nu| = {offset} violates the mean constraint bound {bound}")]
    MeanConstraint { index: usize, offset: f64, bound: f64 },
    #[error("weight {index}: recovered variance {variance} is not positive")]
    DegenerateVariance { index: usize, variance: f64 },
    #[error("block budget must be positive, got {0}")]
    Budget(f64),
}

/// Univariate normal stored as mean and log standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1D {
    pub mean: f64,
    pub log_std: f64,
}

impl Gaussian1D {
    pub fn new(mean: f64, log_std: f64) -> Self {
        Self { mean, log_std }
    }

    pub fn from_variance(mean: f64, variance: f64) -> Self {
        Self { mean, log_std: 0.5 * variance.ln() }
    }

    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }

    pub fn variance(&self) -> f64 {
        (2.0 * self.log_std).exp()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) * (-self.log_std).exp();
        -0.5 * z * z - self.log_std - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Mean-field Gaussian over a vector of weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub means: Vec<f64>,
    pub log_stds: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(means: Vec<f64>, log_stds: Vec<f64>) -> Result<Self, GaussianError> {
        if means.len() != log_stds.len() {
            return Err(GaussianError::DimensionMismatch { left: means.len(), right: log_stds.len() });
        }
        if let Some(i) = means.iter().chain(&log_stds).position(|v| !v.is_finite()) {
            return Err(GaussianError::NonFinite(i % means.len().max(1)));
        }
        Ok(Self { means, log_stds })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn marginal(&self, i: usize) -> Gaussian1D {
        Gaussian1D::new(self.means[i], self.log_stds[i])
    }

    pub fn slice(&self, start: usize, len: usize) -> DiagonalGaussian {
        DiagonalGaussian {
            means: self.means[start..start + len].to_vec(),
            log_stds: self.log_stds[start..start + len].to_vec(),
        }
    }
}

/// Mean-KL parameters for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanKLBlockParams {
    pub taus: Vec<f64>,
    pub quota_logits: Vec<f64>,
    /// Block budget in nats.
    pub kappa_block: f64,
}

/// Mean-Var parameters for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanVarBlockParams {
    pub means: Vec<f64>,
    pub log_stds: Vec<f64>,
}

impl From<MeanVarBlockParams> for DiagonalGaussian {
    fn from(p: MeanVarBlockParams) -> Self {
        DiagonalGaussian { means: p.means, log_stds: p.log_stds }
    }
}

/// `KL(q || p)` for univariate normals.
pub fn gauss_kl(q: Gaussian1D, p: Gaussian1D) -> f64 {
    let var_ratio = (2.0 * (q.log_std - p.log_std)).exp();
    let dz = (q.mean - p.mean) * (-p.log_std).exp();
    // log(rho/sigma) + (sigma^2 + (mu - nu)^2) / (2 rho^2) - 1/2
    (p.log_std - q.log_std) + 0.5 * (var_ratio + dz * dz) - 0.5
}

/// Softmax with max subtraction.
pub fn quotas_from_logits(logits: &[f64]) -> Result<Vec<f64>, GaussianError> {
    if logits.is_empty() {
        return Err(GaussianError::EmptyLogits);
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(GaussianError::NonFinite(i));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|g| (g - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `mu = nu + rho * sqrt(2 kappa_w) * tanh(tau)`.
pub fn mean_from_tau(tau: f64, kappa_w: f64, p: Gaussian1D) -> f64 {
    p.mean + p.std() * (2.0 * kappa_w).sqrt() * tau.tanh()
}

/// Inverse of [`mean_from_tau`], projecting means outside the admissible
/// ball to within [`TAU_CLAMP`] of its boundary first.
pub fn tau_from_mean(mu: f64, kappa_w: f64, p: Gaussian1D) -> f64 {
    let r = (mu - p.mean) / (p.std() * (2.0 * kappa_w).sqrt());
    r.clamp(-1.0 + TAU_CLAMP, 1.0 - TAU_CLAMP).atanh()
}

/// Variance of the Gaussian with mean `mu` whose KL from `p` is `kappa_w`.
///
/// Solves `sigma^2 = -rho^2 W(-exp(z^2 - 2 kappa_w - 1))` with
/// `z = (mu - nu) / rho`. The exponent is formed directly so the argument of
/// `W` never under- or overflows before the exponential.
pub fn var_from_mean_kl(mu: f64, kappa_w: f64, p: Gaussian1D, eval: Evaluation) -> Result<f64, GaussianError> {
    let rho = p.std();
    let z = (mu - p.mean) / rho;
    let bound = rho * (2.0 * kappa_w).sqrt();
    // A saturated tanh lands exactly on the boundary, where sigma = rho and
    // the KL is still kappa_w; only reject genuine violations.
    if !(kappa_w > 0.0) || (mu - p.mean).abs() > bound * (1.0 + 1e-12) || !z.is_finite() {
        return Err(GaussianError::MeanConstraint { index: 0, offset: (mu - p.mean).abs(), bound });
    }
    let exponent = (z * z - 2.0 * kappa_w - 1.0).min(-1.0);
    let x = WDomainPoint::new(-exponent.exp()).expect("exponent <= -1 keeps the argument in [-1/e, 0]");
    let w = lambert_w(x, eval);
    let variance = -rho * rho * w;
    if !(variance > 0.0) {
        return Err(GaussianError::DegenerateVariance { index: 0, variance });
    }
    Ok(variance)
}

/// Converts a Mean-KL block into explicit means and log standard deviations.
pub fn meankl_to_meanvar(
    params: &MeanKLBlockParams,
    p: &DiagonalGaussian,
    eval: Evaluation,
) -> Result<MeanVarBlockParams, GaussianError> {
    let n = params.taus.len();
    if params.quota_logits.len() != n {
        return Err(GaussianError::DimensionMismatch { left: n, right: params.quota_logits.len() });
    }
    if p.len() != n {
        return Err(GaussianError::DimensionMismatch { left: n, right: p.len() });
    }
    if !(params.kappa_block > 0.0) {
        return Err(GaussianError::Budget(params.kappa_block));
    }
    let quotas = quotas_from_logits(&params.quota_logits)?;
    let mut means = Vec::with_capacity(n);
    let mut log_stds = Vec::with_capacity(n);
    for (i, (&tau, &gamma)) in params.taus.iter().zip(&quotas).enumerate() {
        let prior = p.marginal(i);
        let kappa_w = gamma * params.kappa_block;
        let mu = mean_from_tau(tau, kappa_w, prior);
        let var = var_from_mean_kl(mu, kappa_w, prior, eval).map_err(|e| match e {
            GaussianError::MeanConstraint { offset, bound, .. } => GaussianError::MeanConstraint { index: i, offset, bound },
            GaussianError::DegenerateVariance { variance, .. } => GaussianError::DegenerateVariance { index: i, variance },
            other => other,
        })?;
        means.push(mu);
        log_stds.push(0.5 * var.ln());
    }
    Ok(MeanVarBlockParams { means, log_stds })
}

/// Sum of per-coordinate KL divergences.
pub fn block_kl(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64, GaussianError> {
    if q.len() != p.len() {
        return Err(GaussianError::DimensionMismatch { left: q.len(), right: p.len() });
    }
    Ok((0..q.len()).map(|i| gauss_kl(q.marginal(i), p.marginal(i))).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const N01: Gaussian1D = Gaussian1D { mean: 0.0, log_std: 0.0 };

    /// Midpoint-rule integral of q log(q/p) over [-8, 8].
    fn kl_quadrature(q: Gaussian1D, p: Gaussian1D) -> f64 {
        let n = 200_000;
        let (a, b) = (-8.0, 8.0);
        let h = (b - a) / n as f64;
        (0..n)
            .map(|i| {
                let x = a + (i as f64 + 0.5) * h;
                let lq = q.log_density(x);
                lq.exp() * (lq - p.log_density(x)) * h
            })
            .sum()
    }

    /// Solves s - ln s = c on (0, 1) by bisection, for the variance ratio.
    fn variance_ratio_bisection(c: f64) -> f64 {
        let (mut lo, mut hi) = (f64::MIN_POSITIVE, 1.0f64);
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if mid - mid.ln() > c {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-16 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn kl_examples() {
        assert_eq!(gauss_kl(N01, N01), 0.0);
        assert!((gauss_kl(Gaussian1D::new(1.0, 0.0), N01) - 0.5).abs() < 1e-15);
        let q = Gaussian1D::from_variance(0.0, 0.25);
        let oracle = kl_quadrature(q, N01);
        assert!((oracle - 0.318147).abs() < 1e-6);
        assert!((gauss_kl(q, N01) - oracle).abs() < 1e-8);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(quotas_from_logits(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-300.0, 0.0, 7.5, 1e3] {
            let q = quotas_from_logits(&[c; 4]).unwrap();
            assert!(q.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        let q = quotas_from_logits(&[3f64.ln(), 0.0]).unwrap();
        assert!((q[0] - 0.75).abs() < 1e-15 && (q[1] - 0.25).abs() < 1e-15);
        assert_eq!(quotas_from_logits(&[]), Err(GaussianError::EmptyLogits));
    }

    #[test]
    fn tanh_mean_map() {
        let p = Gaussian1D::new(0.3, -1.2);
        assert_eq!(mean_from_tau(0.0, 2.0, p), 0.3);
        assert!((mean_from_tau(0.549306, 0.5, N01) - 0.5).abs() < 1e-6);
        let m = mean_from_tau(50.0, 0.5, N01);
        assert!(m <= 1.0);
        assert!((m - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tau_inverse() {
        assert_eq!(tau_from_mean(0.0, 0.5, N01), 0.0);
        assert!((tau_from_mean(0.5, 0.5, N01) - 0.5f64.atanh()).abs() < 1e-12);
        let clamped = tau_from_mean(10.0, 0.5, N01);
        assert!((clamped - 7.254328619247669).abs() < 1e-6);
        assert!((mean_from_tau(clamped, 0.5, N01) - (1.0 - TAU_CLAMP)).abs() < 1e-12);
    }

    #[test]
    fn variance_examples_against_bisection() {
        // s = sigma^2 / rho^2 solves s - ln s = 2 kappa + 1 - z^2.
        let v = var_from_mean_kl(0.0, 0.5, N01, Evaluation::Refined).unwrap();
        let s = variance_ratio_bisection(2.0);
        assert!((v - s).abs() < 1e-12);
        assert!((v - 0.1586).abs() < 1e-4);
        assert!((gauss_kl(Gaussian1D::from_variance(0.0, v), N01) - 0.5).abs() < 1e-6);

        let v = var_from_mean_kl(0.0, 20.0, N01, Evaluation::Refined).unwrap();
        let s = variance_ratio_bisection(41.0);
        assert!(v > 0.0);
        assert!(((v - s) / s).abs() < 1e-9, "{v} vs {s}");
        assert!(((v - (-41.0f64).exp()) / v).abs() < 1e-12);

        let v = var_from_mean_kl(0.0, 1e-9, N01, Evaluation::Refined).unwrap();
        assert!((v - 1.0).abs() < 1e-3 && v < 1.0);
    }

    #[test]
    fn variance_rejects_constraint_violation() {
        let err = var_from_mean_kl(1.01, 0.5, N01, Evaluation::Refined).unwrap_err();
        assert!(matches!(err, GaussianError::MeanConstraint { .. }));
        // on the boundary the solution degenerates to sigma = rho
        assert_eq!(var_from_mean_kl(1.0, 0.5, N01, Evaluation::Refined).unwrap(), 1.0);
    }

    #[test]
    fn conversion_examples() {
        let p = DiagonalGaussian::new(vec![0.0], vec![0.0]).unwrap();
        let params = MeanKLBlockParams { taus: vec![0.0], quota_logits: vec![0.0], kappa_block: 0.5 };
        let out = meankl_to_meanvar(&params, &p, Evaluation::Refined).unwrap();
        assert_eq!(out.means, vec![0.0]);
        assert!(((2.0 * out.log_stds[0]).exp() - 0.1586).abs() < 1e-4);

        let p2 = DiagonalGaussian::new(vec![0.0; 2], vec![0.0; 2]).unwrap();
        let params = MeanKLBlockParams { taus: vec![0.0; 2], quota_logits: vec![0.0; 2], kappa_block: 1.0 };
        let out = meankl_to_meanvar(&params, &p2, Evaluation::Refined).unwrap();
        assert_eq!(out.means[0], out.means[1]);
        assert_eq!(out.log_stds[0], out.log_stds[1]);
        assert_eq!(out.log_stds[0], 0.5 * var_from_mean_kl(0.0, 0.5, N01, Evaluation::Refined).unwrap().ln());
    }

    #[test]
    fn conversion_reports_offending_weight() {
        let p = DiagonalGaussian::new(vec![0.0; 3], vec![0.0; 3]).unwrap();
        let params = MeanKLBlockParams { taus: vec![0.0; 3], quota_logits: vec![0.0; 2], kappa_block: 1.0 };
        assert!(matches!(meankl_to_meanvar(&params, &p, Evaluation::Refined), Err(GaussianError::DimensionMismatch { .. })));
        let params = MeanKLBlockParams { taus: vec![0.0; 3], quota_logits: vec![0.0; 3], kappa_block: 0.0 };
        assert_eq!(meankl_to_meanvar(&params, &p, Evaluation::Refined), Err(GaussianError::Budget(0.0)));
    }

    #[test]
    fn block_kl_examples() {
        let p = DiagonalGaussian::new(vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert_eq!(block_kl(&p, &p).unwrap(), 0.0);
        let q = DiagonalGaussian::new(vec![1.0, 0.0], vec![0.0, 0.5 * 0.25f64.ln()]).unwrap();
        let oracle = kl_quadrature(q.marginal(0), p.marginal(0)) + kl_quadrature(q.marginal(1), p.marginal(1));
        assert!((oracle - 0.818147).abs() < 1e-6);
        assert!((block_kl(&q, &p).unwrap() - oracle).abs() < 1e-8);
        let short = DiagonalGaussian::new(vec![0.0], vec![0.0]).unwrap();
        assert!(block_kl(&short, &p).is_err());
    }

    #[test]
    fn twenty_bit_block_meets_budget() {
        let kappa = 20.0 * std::f64::consts::LN_2;
        let n = 20;
        let p = DiagonalGaussian::new(vec![0.0; n], vec![-2.0; n]).unwrap();
        let params = MeanKLBlockParams {
            taus: (0..n).map(|i| (i as f64 - 10.0) * 0.3).collect(),
            quota_logits: (0..n).map(|i| (i as f64 * 0.7).sin()).collect(),
            kappa_block: kappa,
        };
        let q = meankl_to_meanvar(&params, &p, Evaluation::Refined).unwrap();
        assert!((block_kl(&q.into(), &p).unwrap() - 13.8629).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn constraint_holds_by_construction(
            taus in prop::collection::vec(-6.0f64..6.0, 1..24),
            shift in -50.0f64..50.0,
            kappa in 0.1f64..30.0,
            log_rho in -4.0f64..2.0,
            nu in -1.0f64..1.0,
        ) {
            let n = taus.len();
            let logits: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 * 0.4 + shift).collect();
            let p = DiagonalGaussian::new(vec![nu; n], vec![log_rho; n]).unwrap();
            let params = MeanKLBlockParams { taus, quota_logits: logits, kappa_block: kappa };
            let q = meankl_to_meanvar(&params, &p, Evaluation::Refined).unwrap();
            for (i, ls) in q.log_stds.iter().enumerate() {
                prop_assert!(*ls < p.log_stds[i]);
            }
            let q = DiagonalGaussian::from(q);
            prop_assert!((block_kl(&q, &p).unwrap() - kappa).abs() <= 1e-6);
        }

        #[test]
        fn quotas_form_a_simplex(logits in prop::collection::vec(-30.0f64..30.0, 1..50), c in -100.0f64..100.0) {
            let q = quotas_from_logits(&logits).unwrap();
            prop_assert!(q.iter().all(|&v| v > 0.0));
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|g| g + c).collect();
            let q2 = quotas_from_logits(&shifted).unwrap();
            for (a, b) in q.iter().zip(&q2) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn kl_is_nonnegative(m1 in -3.0f64..3.0, s1 in -3.0f64..3.0, m2 in -3.0f64..3.0, s2 in -3.0f64..3.0) {
            let kl = gauss_kl(Gaussian1D::new(m1, s1), Gaussian1D::new(m2, s2));
            prop_assert!(kl >= 0.0);
            if (m1 - m2).abs() > 1e-3 || (s1 - s2).abs() > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn tau_roundtrip(tau in -5.0f64..5.0, kappa in 0.01f64..10.0, log_rho in -3.0f64..1.0) {
            let p = Gaussian1D::new(0.2, log_rho);
            let back = tau_from_mean(mean_from_tau(tau, kappa, p), kappa, p);
            prop_assert!((back - tau).abs() <= 1e-9, "{} vs {}", back, tau);
        }
    }
}
