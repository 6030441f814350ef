//! Self-check suite built on exact oracles: the closed-form affine field, a
//! randomly initialised network and finite differences.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field::{
    finite_difference_total_derivative, AnalyticField, AverageField, FieldError, FieldNetwork,
    FieldQuery, NetworkConfig,
};
use crate::objective::{
    cfm_loss, mfse_loss, mfse_target_with, ObjectiveConfig, ObjectiveError, TargetMutation,
    TrainingBatch,
};
use crate::rng::{normal_tensor, stream, Domain};
use crate::sampler::{enhance_multi_step, euler_fm, SamplerError, SamplerSchedule};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Measured quantity compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{} {:<22} value={:.3e} tol={:.1e} ({:.3}s) {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.tolerance,
                c.seconds,
                c.detail
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Skip the network and Euler checks.
    pub quick: bool,
    /// Deliberate defect in the target, for exercising the suite itself.
    pub mutation: TargetMutation,
    pub seed: u64,
    pub network: NetworkConfig,
    pub dim: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            quick: false,
            mutation: TargetMutation::None,
            seed: 0,
            network: NetworkConfig::default(),
            dim: 514,
        }
    }
}

/// Affine field with distinct rates, including a zero rate.
pub fn reference_field() -> AnalyticField {
    AnalyticField::new(
        vec![0.8, -1.5, 0.0, 2.2],
        vec![0.3, -0.7, 1.0, 0.0],
        vec![-1.1, 0.4, 0.5, 2.0],
        vec![0.6, 0.0, -0.9, 1.3],
    )
    .expect("equal lengths")
}

/// Milder affine field used where step-size asymptotics must kick in early.
pub fn euler_reference_field() -> AnalyticField {
    AnalyticField::new(
        vec![0.5, -0.5, 0.3],
        vec![0.2, -0.4, 0.0],
        vec![-0.8, 0.5, 1.2],
        vec![0.3, -0.6, 0.9],
    )
    .expect("equal lengths")
}

/// Network with the given config whose zero-initialised head and biases are
/// replaced by Gaussian draws, so every path through the graph is active.
pub fn probe_network(cfg: &NetworkConfig, dim: usize, seed: u64) -> Result<FieldNetwork> {
    let mut net = FieldNetwork::new(cfg, dim, seed)?;
    let mut rng = stream(seed, Domain::Verify, 1);
    let names = crate::field::DifferentiableField::param_names(&net);
    for (name, p) in names
        .into_iter()
        .zip(crate::field::DifferentiableField::params_mut(&mut net))
    {
        if name.starts_with("head") || p.shape().len() == 1 {
            let fan_in = if p.shape().len() == 2 {
                p.shape()[0] as f64
            } else {
                1.0
            };
            *p = normal_tensor(p.shape(), &mut rng).scale(0.3 / fan_in.sqrt());
        }
    }
    Ok(net)
}

fn timed(
    name: &str,
    tolerance: f64,
    f: impl FnOnce() -> Result<(f64, bool, String)>,
) -> Result<CheckResult> {
    let start = Instant::now();
    let (value, passed, detail) = f()?;
    Ok(CheckResult {
        name: name.into(),
        passed,
        value,
        tolerance,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Rows of the 10×10×10 `(x, r, t)` grid with `r ≤ t`, on the reference field.
pub fn identity_grid(field: &AnalyticField) -> Result<TrainingBatch> {
    let d = AverageField::dim(field);
    let (mut xs, mut rs, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    for xi in 0..10 {
        for ri in 0..10 {
            for ti in 0..10 {
                let (r, t) = (ri as f64 / 9.0, ti as f64 / 9.0);
                if r > t {
                    continue;
                }
                let x = -2.0 + 4.0 * xi as f64 / 9.0;
                xs.extend((0..d).map(|k| x + 0.1 * k as f64));
                rs.push(r);
                ts.push(t);
            }
        }
    }
    let x = Tensor::new(vec![rs.len(), d], xs)?;
    let v = field.velocity_rows(&x, &ts)?;
    Ok(TrainingBatch::new(
        x.clone(),
        Tensor::zeros(x.shape()),
        v,
        rs,
        ts,
    )?)
}

/// `max |u − [v − (t−r)(v·∇ₓu + ∂ₜu)]|` via the training target with `c = 1` and no clipping.
pub fn identity_residual(field: &AnalyticField, mutation: TargetMutation) -> Result<f64> {
    let batch = identity_grid(field)?;
    let cfg = ObjectiveConfig {
        c: 1.0,
        jacobian_clip: f64::INFINITY,
        ..ObjectiveConfig::default()
    };
    let target = mfse_target_with(field, &batch, &cfg, mutation)?;
    let u = field.forward(&batch.query())?;
    Ok(u.sub(&target.values)?.max_abs())
}

/// Number of mismatches between diagonal targets and `v_t`, plus loss equality.
pub fn diagonal_mismatches<F: AverageField + ?Sized>(
    field: &F,
    batch: &TrainingBatch,
) -> Result<(usize, bool)> {
    let cfg = ObjectiveConfig::default();
    let target = mfse_target_with(field, batch, &cfg, TargetMutation::None)?;
    let bad = target
        .values
        .data()
        .iter()
        .zip(batch.v_t.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    let rep = mfse_loss(field, batch, &cfg, cfg.warmup_steps)?;
    let cfm = cfm_loss(field, batch)?;
    Ok((
        bad,
        rep.total.to_bits() == cfm.to_bits() && rep.cfm_loss.to_bits() == cfm.to_bits(),
    ))
}

fn diagonal_batch(d: usize, rows: usize, seed: u64) -> Result<TrainingBatch> {
    let mut rng = stream(seed, Domain::Verify, 2);
    let x = normal_tensor(&[rows, d], &mut rng);
    let y = normal_tensor(&[rows, d], &mut rng);
    let v = normal_tensor(&[rows, d], &mut rng);
    let t: Vec<f64> = (0..rows).map(|_| rng.gen()).collect();
    Ok(TrainingBatch::new(x, y, v, t.clone(), t)?)
}

/// Spread across `ns` and worst relative gap to the exact flow from 1 to 0.
pub fn grid_invariance(field: &AnalyticField, ns: &[usize], seed: u64) -> Result<(f64, f64)> {
    let d = AverageField::dim(field);
    let mut rng = stream(seed, Domain::Verify, 3);
    let init = normal_tensor(&[5, d], &mut rng);
    let y = Tensor::zeros(init.shape());
    let exact = field.flow(&init, 1.0, 0.0)?;
    let (mut spread, mut gap) = (0.0f64, 0.0f64);
    let mut first: Option<Tensor> = None;
    for &n in ns {
        let out = enhance_multi_step(
            field,
            &init,
            &y,
            &SamplerSchedule::displacement(1.0, 0.0, n)?,
        )?
        .state;
        for (a, b) in out.data().iter().zip(exact.data()) {
            gap = gap.max((a - b).abs() / b.abs().max(1.0));
        }
        match &first {
            None => first = Some(out),
            Some(f) => spread = spread.max(out.sub(f)?.max_abs()),
        }
    }
    Ok((spread, gap))
}

/// Observed order `log2(e(N) / e(2N))` of Euler on the instantaneous field.
pub fn euler_order(field: &AnalyticField, n: usize) -> Result<(f64, f64, f64)> {
    let d = AverageField::dim(field);
    let init = Tensor::new(vec![1, d], (0..d).map(|k| 0.5 - 0.3 * k as f64).collect())?;
    let y = Tensor::zeros(init.shape());
    let exact = field.flow(&init, 0.0, 1.0)?;
    let err = |n: usize| -> Result<f64> {
        let out = euler_fm(field, &init, &y, &SamplerSchedule::euler(n)?)?.state;
        Ok(out.sub(&exact)?.norm_l2() / exact.norm_l2())
    };
    let (e1, e2) = (err(n)?, err(2 * n)?);
    Ok(((e1 / e2).log2(), e1, e2))
}

/// Worst norm-wise relative JVP-vs-FD error over `queries` random rows, at step `h`.
pub fn jvp_fd_error(net: &FieldNetwork, queries: usize, h: f64, seed: u64) -> Result<f64> {
    let d = AverageField::dim(net);
    let mut rng = stream(seed, Domain::Verify, 4);
    let x = normal_tensor(&[queries, d], &mut rng);
    let y = normal_tensor(&[queries, d], &mut rng);
    let dx = normal_tensor(&[queries, d], &mut rng);
    let (mut r, mut t) = (Vec::new(), Vec::new());
    for _ in 0..queries {
        let tt: f64 = rng.gen_range(0.05..0.95);
        r.push(tt * rng.gen::<f64>());
        t.push(tt);
    }
    let q = FieldQuery::new(x, y, r, t)?;
    let (_, jv) = net.forward_with_jvp(&q, &dx, 1.0)?;
    let fd = finite_difference_total_derivative(net, &q, &dx, 1.0, h)?;
    let mut worst = 0.0f64;
    for i in 0..queries {
        let num: f64 = fd
            .row(i)
            .iter()
            .zip(jv.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = jv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(num / den.max(1e-300));
    }
    Ok(worst)
}

pub fn run_suite(opts: &VerifyOptions) -> Result<VerifyReport> {
    let field = reference_field();
    let mut checks = Vec::new();
    checks.push(timed("identity_residual", 1e-8, || {
        let r = identity_residual(&field, opts.mutation)?;
        Ok((r, r < 1e-8, "affine field, 10x10x10 grid".into()))
    })?);
    checks.push(timed("diagonal_equivalence", 0.0, || {
        let small = NetworkConfig {
            width: 16,
            blocks: 1,
            fourier_features: 4,
            fourier_scale: 16.0,
        };
        let net = probe_network(&small, 6, opts.seed)?;
        let (bad_a, loss_a) = diagonal_mismatches(&field, &diagonal_batch(4, 32, opts.seed)?)?;
        let (bad_n, loss_n) = diagonal_mismatches(&net, &diagonal_batch(6, 32, opts.seed)?)?;
        let bad = bad_a + bad_n;
        Ok((
            bad as f64,
            bad == 0 && loss_a && loss_n,
            format!("target==v_t bitwise, loss equality analytic={loss_a} network={loss_n}"),
        ))
    })?);
    checks.push(timed("grid_invariance", 1e-8, || {
        let (spread, gap) = grid_invariance(&field, &[1, 2, 4, 8], opts.seed)?;
        Ok((
            spread.max(gap),
            spread < 1e-8 && gap < 1e-8,
            format!("N in {{1,2,4,8}}: spread {spread:.2e}, vs exact flow {gap:.2e}"),
        ))
    })?);
    if opts.quick {
        return Ok(VerifyReport { checks });
    }
    checks.push(timed("euler_order", 0.1, || {
        let (order, e1, e2) = euler_order(&euler_reference_field(), 256)?;
        Ok((
            (order - 1.0).abs(),
            (0.9..=1.1).contains(&order),
            format!("order {order:.4} (errors {e1:.3e} -> {e2:.3e})"),
        ))
    })?);
    let net = probe_network(&opts.network, opts.dim, opts.seed)?;
    for (h, tol) in [(1e-3, 1e-3), (1e-4, 1e-4)] {
        checks.push(timed(&format!("jvp_vs_fd_h{h:.0e}"), tol, || {
            let e = jvp_fd_error(&net, 100, h, opts.seed)?;
            Ok((e, e < tol, format!("100 queries, dim {}", opts.dim)))
        })?);
    }
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes_and_is_fast() {
        let rep = run_suite(&VerifyOptions {
            quick: true,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(rep.checks.len(), 3);
        assert!(rep.passed(), "{}", rep.render());
        assert!(rep.checks.iter().map(|c| c.seconds).sum::<f64>() < 1.0);
    }

    #[test]
    fn sign_mutation_breaks_the_identity() {
        let rep = run_suite(&VerifyOptions {
            quick: true,
            mutation: TargetMutation::FlipSign,
            ..Default::default()
        })
        .unwrap();
        assert!(!rep.passed());
        assert!(!rep.checks[0].passed);
        assert!(rep.checks[0].value > 1e-3);
        assert!(rep.checks[1].passed && rep.checks[2].passed);
    }

    #[test]
    fn full_suite_passes() {
        let rep = run_suite(&VerifyOptions::default()).unwrap();
        assert_eq!(rep.checks.len(), 6);
        assert!(rep.passed(), "{}", rep.render());
        let back: VerifyReport =
            serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        let key = |r: &VerifyReport| {
            r.checks
                .iter()
                .map(|c| (c.name.clone(), c.passed))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&back), key(&rep));
    }
}
