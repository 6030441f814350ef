//! Conditional linear–Gaussian interpolation paths and their closed-form velocities.
//!
//! Two conventions are supported:
//!
//! * `Flowse`: noisy at `t = 0`, clean at `t = 1`; `μ_t = t·x1 + (1−t)·y`,
//!   `σ_t = (1−t)·σ`, velocity `(x1 − x_t)/(1−t)`. Singular at `t → 1`, so `t` is
//!   restricted to `[0, 1−δ]`.
//! * `MeanFlow`: clean at `t = 0`, noisy at `t = 1`; `μ_t = (1−t)·x1 + t·y`,
//!   `σ_t = (1−t)·σ_min + t·σ_max`, velocity `(σ_max − σ_min)·z + (y − x1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::normal_tensor;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PathError {
    #[error("time {t} outside the valid range [{lo}, {hi}]")]
    Time { t: f64, lo: f64, hi: f64 },
    #[error("invalid path configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    Flowse,
    MeanFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub convention: Convention,
    /// Noise scale of the FlowSE path.
    pub sigma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// FlowSE keeps `t ≤ 1 − delta`.
    pub delta: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            convention: Convention::MeanFlow,
            sigma: 0.5,
            sigma_min: 1e-4,
            sigma_max: 0.5,
            delta: 0.03,
        }
    }
}

impl PathConfig {
    /// Checks the scale and guard parameters. Equal `sigma_min` and `sigma_max`
    /// (including both zero) are accepted: they give a deterministic path.
    pub fn validate(&self) -> Result<(), PathError> {
        let bad = |m: String| Err(PathError::Config(m));
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_min <= self.sigma_max) {
            return bad(format!(
                "need 0 <= sigma_min <= sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        Ok(())
    }

    /// Mean-flow path scale `σ_t = (1−t)·σ_min + t·σ_max`.
    pub fn sigma_at(&self, t: f64) -> f64 {
        (1.0 - t) * self.sigma_min + t * self.sigma_max
    }

    /// FlowSE path scale `σ_t = (1−t)·σ`.
    pub fn flowse_sigma_at(&self, t: f64) -> f64 {
        (1.0 - t) * self.sigma
    }

    /// Standard deviation of the noisy-side prior used to start inference.
    pub fn prior_sigma(&self, t_rev: f64) -> f64 {
        match self.convention {
            Convention::MeanFlow => self.sigma_at(t_rev),
            Convention::Flowse => self.sigma,
        }
    }
}

/// One draw from a conditional path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub t: f64,
    pub z: Tensor,
    pub mu_t: Tensor,
    pub sigma_t: f64,
    pub x_t: Tensor,
    pub v_t: Tensor,
}

fn check_time(t: f64, lo: f64, hi: f64) -> Result<(), PathError> {
    if !(t >= lo && t <= hi) {
        return Err(PathError::Time { t, lo, hi });
    }
    Ok(())
}

fn lerp(a: &Tensor, wa: f64, b: &Tensor, wb: f64) -> Result<Tensor, PathError> {
    Ok(a.zip_map(b, "path", |a, b| wa * a + wb * b)?)
}

impl PathSample {
    /// Mean-flow path point for a given noise draw `z`.
    pub fn mean_flow_with_noise(
        cfg: &PathConfig,
        x1: &Tensor,
        y: &Tensor,
        t: f64,
        z: Tensor,
    ) -> Result<Self, PathError> {
        check_time(t, 0.0, 1.0)?;
        let mu_t = lerp(x1, 1.0 - t, y, t)?;
        let sigma_t = cfg.sigma_at(t);
        let x_t = mu_t.zip_map(&z, "path", |m, z| m + sigma_t * z)?;
        let dsigma = cfg.sigma_max - cfg.sigma_min;
        let drift = y.sub(x1)?;
        let v_t = z.zip_map(&drift, "path", |z, d| dsigma * z + d)?;
        Ok(Self {
            t,
            z,
            mu_t,
            sigma_t,
            x_t,
            v_t,
        })
    }

    /// FlowSE path point for a given noise draw `z`.
    pub fn flowse_with_noise(
        cfg: &PathConfig,
        x1: &Tensor,
        y: &Tensor,
        t: f64,
        z: Tensor,
    ) -> Result<Self, PathError> {
        check_time(t, 0.0, 1.0 - cfg.delta)?;
        let mu_t = lerp(x1, t, y, 1.0 - t)?;
        let sigma_t = cfg.flowse_sigma_at(t);
        let x_t = mu_t.zip_map(&z, "path", |m, z| m + sigma_t * z)?;
        let inv = 1.0 / (1.0 - t);
        let v_t = x1.zip_map(&x_t, "path", |a, x| (a - x) * inv)?;
        Ok(Self {
            t,
            z,
            mu_t,
            sigma_t,
            x_t,
            v_t,
        })
    }
}

pub fn sample_path_mean_flow<R: Rng + ?Sized>(
    cfg: &PathConfig,
    x1: &Tensor,
    y: &Tensor,
    t: f64,
    rng: &mut R,
) -> Result<PathSample, PathError> {
    let z = normal_tensor(x1.shape(), rng);
    PathSample::mean_flow_with_noise(cfg, x1, y, t, z)
}

pub fn sample_path_flowse<R: Rng + ?Sized>(
    cfg: &PathConfig,
    x1: &Tensor,
    y: &Tensor,
    t: f64,
    rng: &mut R,
) -> Result<PathSample, PathError> {
    check_time(t, 0.0, 1.0 - cfg.delta)?;
    let z = normal_tensor(x1.shape(), rng);
    PathSample::flowse_with_noise(cfg, x1, y, t, z)
}

/// Draws a path sample under the configured convention.
pub fn sample_path<R: Rng + ?Sized>(
    cfg: &PathConfig,
    x1: &Tensor,
    y: &Tensor,
    t: f64,
    rng: &mut R,
) -> Result<PathSample, PathError> {
    match cfg.convention {
        Convention::MeanFlow => sample_path_mean_flow(cfg, x1, y, t, rng),
        Convention::Flowse => sample_path_flowse(cfg, x1, y, t, rng),
    }
}

/// Noisy-side starting point `y + σ(T_rev)·z` of the mean-flow path.
pub fn reverse_init<R: Rng + ?Sized>(
    cfg: &PathConfig,
    y: &Tensor,
    t_rev: f64,
    rng: &mut R,
) -> Result<Tensor, PathError> {
    if !(t_rev > 0.0 && t_rev <= 1.0) {
        return Err(PathError::Time {
            t: t_rev,
            lo: 0.0,
            hi: 1.0,
        });
    }
    prior_sample(y, cfg.sigma_at(t_rev), rng)
}

/// `y + sigma·z` with `z ~ N(0, I)`; returns `y` unchanged when `sigma == 0`.
pub fn prior_sample<R: Rng + ?Sized>(
    y: &Tensor,
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor, PathError> {
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let z = normal_tensor(y.shape(), rng);
    Ok(y.zip_map(&z, "prior", |y, z| y + sigma * z)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use proptest::prelude::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn pair() -> (Tensor, Tensor) {
        (
            vec_t(&[0.3, -1.2, 2.0, 0.0]),
            vec_t(&[1.0, 0.5, -0.25, 4.0]),
        )
    }

    #[test]
    fn mean_flow_endpoints() {
        let cfg = PathConfig::default();
        let (x1, y) = pair();
        let mut rng = stream(1, Domain::Verify, 0);
        let s0 = sample_path_mean_flow(&cfg, &x1, &y, 0.0, &mut rng).unwrap();
        assert_eq!(s0.mu_t, x1);
        assert_eq!(s0.sigma_t, cfg.sigma_min);
        let s1 = sample_path_mean_flow(&cfg, &x1, &y, 1.0, &mut rng).unwrap();
        assert_eq!(s1.mu_t, y);
        assert_eq!(s1.sigma_t, cfg.sigma_max);
    }

    #[test]
    fn zero_sigma_velocity_is_drift() {
        let cfg = PathConfig {
            sigma_min: 0.0,
            sigma_max: 0.0,
            ..PathConfig::default()
        };
        let (x1, y) = pair();
        let mut rng = stream(2, Domain::Verify, 0);
        for &t in &[0.0, 0.3, 0.9, 1.0] {
            let s = sample_path_mean_flow(&cfg, &x1, &y, t, &mut rng).unwrap();
            assert_eq!(s.v_t, y.sub(&x1).unwrap());
        }
    }

    #[test]
    fn flowse_start_and_zero_noise() {
        let cfg = PathConfig::default();
        let (x1, y) = pair();
        let mut rng = stream(3, Domain::Verify, 0);
        let s = sample_path_flowse(&cfg, &x1, &y, 0.0, &mut rng).unwrap();
        assert_eq!(s.mu_t, y);
        assert_eq!(s.sigma_t, cfg.sigma);

        let z = Tensor::zeros(x1.shape());
        let s = PathSample::flowse_with_noise(&cfg, &x1, &y, 0.0, z).unwrap();
        assert_eq!(s.v_t, x1.sub(&y).unwrap());
    }

    #[test]
    fn flowse_rejects_singular_times() {
        let cfg = PathConfig::default();
        let (x1, y) = pair();
        let mut rng = stream(4, Domain::Verify, 0);
        assert!(matches!(
            sample_path_flowse(&cfg, &x1, &y, 0.99, &mut rng),
            Err(PathError::Time { .. })
        ));
        assert!(sample_path_flowse(&cfg, &x1, &y, 0.97, &mut rng).is_ok());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = PathConfig::default();
        let mut rng = stream(5, Domain::Verify, 0);
        let r = sample_path_mean_flow(&cfg, &vec_t(&[1.0, 2.0]), &vec_t(&[1.0]), 0.5, &mut rng);
        assert!(matches!(r, Err(PathError::Tensor(_))));
    }

    #[test]
    fn config_validation() {
        assert!(PathConfig::default().validate().is_ok());
        let bad = PathConfig {
            sigma_min: 0.6,
            ..PathConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PathConfig {
            delta: 1.0,
            ..PathConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reverse_init_zero_sigma_is_identity() {
        let cfg = PathConfig {
            sigma_min: 0.0,
            sigma_max: 0.0,
            ..PathConfig::default()
        };
        let (_, y) = pair();
        let mut rng = stream(6, Domain::Verify, 0);
        assert_eq!(reverse_init(&cfg, &y, 1.0, &mut rng).unwrap(), y);
        assert!(reverse_init(&cfg, &y, 0.0, &mut rng).is_err());
    }

    #[test]
    fn reverse_init_moments() {
        let cfg = PathConfig::default();
        let t_rev = 0.8;
        let sigma = cfg.sigma_at(t_rev);
        let y = Tensor::full(&[100_000], 0.7);
        let mut rng = stream(7, Domain::Verify, 0);
        let x = reverse_init(&cfg, &y, t_rev, &mut rng).unwrap();
        let n = x.numel() as f64;
        let mean = x.sum() / n;
        let std = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 0.7).abs() < 4.0 * sigma / n.sqrt(), "mean {mean}");
        assert!((std / sigma - 1.0).abs() < 0.05, "std {std} vs {sigma}");
    }

    proptest! {
        #[test]
        fn flowse_velocity_forms_agree(seed in any::<u64>(), t in 0.0f64..0.97) {
            let cfg = PathConfig::default();
            let (x1, y) = pair();
            let mut rng = stream(seed, Domain::Verify, 1);
            let s = sample_path_flowse(&cfg, &x1, &y, t, &mut rng).unwrap();
            // (σ_t'/σ_t)(x_t − μ_t) + μ_t' with σ_t' = −σ and μ_t' = x1 − y.
            let ratio = -cfg.sigma / s.sigma_t;
            let lhs = s.x_t.zip_map(&s.mu_t, "t", |x, m| ratio * (x - m)).unwrap().add(&x1.sub(&y).unwrap()).unwrap();
            for (a, b) in lhs.data().iter().zip(s.v_t.data()) {
                prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
        }

        #[test]
        fn mean_flow_sample_invariants(seed in any::<u64>(), t in 0.0f64..=1.0) {
            let cfg = PathConfig::default();
            let (x1, y) = pair();
            let mut rng = stream(seed, Domain::Verify, 2);
            let s = sample_path_mean_flow(&cfg, &x1, &y, t, &mut rng).unwrap();
            // x_t = μ_t + σ_t z by construction.
            let rebuilt = s.mu_t.zip_map(&s.z, "t", |m, z| m + s.sigma_t * z).unwrap();
            prop_assert_eq!(&rebuilt, &s.x_t);
            // d/dt[(1−t)x1 + t y + ((1−t)σ_min + tσ_max) z], evaluated analytically.
            let ds = cfg.sigma_max - cfg.sigma_min;
            for i in 0..x1.numel() {
                let expect = ds * s.z.data()[i] + (y.data()[i] - x1.data()[i]);
                prop_assert_eq!(expect, s.v_t.data()[i]);
            }
        }

        #[test]
        fn conventions_mirror_each_other(t in 0.03f64..=1.0) {
            let cfg = PathConfig::default();
            let (x1, y) = pair();
            let z = Tensor::zeros(x1.shape());
            let mf = PathSample::mean_flow_with_noise(&cfg, &x1, &y, t, z.clone()).unwrap();
            let fs = PathSample::flowse_with_noise(&cfg, &x1, &y, 1.0 - t, z).unwrap();
            for (a, b) in mf.mu_t.data().iter().zip(fs.mu_t.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
