//! Training targets, losses and the curriculum.
//!
//! Rows with `r = t` (the diagonal) regress the closed-form path velocity `v_t`.
//! Off-diagonal rows regress the first-order mean-flow target
//!
//! ```text
//! u_tgt = v_t − c·(t − r)·clip(v_t·∇ₓu + ∂ₜu)
//! ```
//!
//! where the bracket is one forward-mode pass of the current field and `clip`
//! caps its per-row ℓ2 norm. The target is a constant for differentiation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{AverageField, DifferentiableField, FieldError, FieldQuery};
use crate::tensor::{Graph, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid objective configuration: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("non-finite total derivative in row {row} (t={t}, r={r}, |v|={v_norm:.3e}, |x|={x_norm:.3e})")]
    NonFiniteJvp {
        row: usize,
        t: f64,
        r: f64,
        v_norm: f64,
        x_norm: f64,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// First-order correction coefficient.
    pub c: f64,
    pub mean_branch_weight_max: f64,
    pub span_exponent_start: f64,
    pub span_exponent_end: f64,
    /// Probability of drawing `r = t`.
    pub diagonal_fraction: f64,
    /// Per-row ℓ2 ceiling on the total-derivative term; `inf` disables clipping.
    pub jacobian_clip: f64,
    /// Steps over which the weight ramps and the exponent anneals.
    pub warmup_steps: u64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            c: 0.5,
            mean_branch_weight_max: 0.25,
            span_exponent_start: 8.0,
            span_exponent_end: 1.0,
            diagonal_fraction: 0.1,
            jacobian_clip: 10.0,
            warmup_steps: 5000,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ObjectiveError::Config(m));
        if !(self.c > 0.0 && self.c <= 1.0) {
            return bad(format!("c must lie in (0, 1], got {}", self.c));
        }
        if !(0.0..=1.0).contains(&self.diagonal_fraction) {
            return bad(format!(
                "diagonal_fraction must lie in [0, 1], got {}",
                self.diagonal_fraction
            ));
        }
        if !(self.mean_branch_weight_max >= 0.0 && self.mean_branch_weight_max.is_finite()) {
            return bad(format!(
                "bad mean_branch_weight_max {}",
                self.mean_branch_weight_max
            ));
        }
        if !(self.span_exponent_start > 0.0 && self.span_exponent_end > 0.0)
            || self.span_exponent_end > self.span_exponent_start
        {
            return bad(format!(
                "span exponent must anneal downward between positive values, got {} -> {}",
                self.span_exponent_start, self.span_exponent_end
            ));
        }
        if !(self.jacobian_clip > 0.0) {
            return bad(format!(
                "jacobian_clip must be > 0, got {}",
                self.jacobian_clip
            ));
        }
        Ok(())
    }

    fn progress(&self, step: u64) -> Option<f64> {
        if step >= self.warmup_steps {
            None
        } else {
            Some(step as f64 / self.warmup_steps as f64)
        }
    }

    /// Mean-branch weight: linear from 0 to the maximum over the warmup.
    pub fn mean_weight(&self, step: u64) -> f64 {
        match self.progress(step) {
            None => self.mean_branch_weight_max,
            Some(f) => self.mean_branch_weight_max * f,
        }
    }

    /// Span exponent: linear from start to end over the warmup.
    pub fn span_exponent(&self, step: u64) -> f64 {
        match self.progress(step) {
            None => self.span_exponent_end,
            Some(f) => {
                self.span_exponent_start + (self.span_exponent_end - self.span_exponent_start) * f
            }
        }
    }
}

/// Draws `(r, t)`: the diagonal with the configured probability, otherwise
/// `t ~ U(0,1)` and `r = t − t·ξ^p` with `ξ ~ U(0,1)`.
pub fn sample_times<R: Rng + ?Sized>(step: u64, cfg: &ObjectiveConfig, rng: &mut R) -> (f64, f64) {
    let diagonal = rng.gen::<f64>() < cfg.diagonal_fraction;
    let t: f64 = rng.gen();
    if diagonal {
        return (t, t);
    }
    let xi: f64 = rng.gen();
    let span = t * xi.powf(cfg.span_exponent(step));
    ((t - span).max(0.0), t)
}

/// Rows of on-path states with their velocity targets and time pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub x_t: Tensor,
    pub y: Tensor,
    pub v_t: Tensor,
    pub r: Vec<f64>,
    pub t: Vec<f64>,
}

impl TrainingBatch {
    pub fn new(x_t: Tensor, y: Tensor, v_t: Tensor, r: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        if v_t.shape() != x_t.shape() {
            return Err(ObjectiveError::Batch(format!(
                "v_t {:?} vs x_t {:?}",
                v_t.shape(),
                x_t.shape()
            )));
        }
        FieldQuery::new(x_t.clone(), y.clone(), r.clone(), t.clone())?;
        Ok(Self { x_t, y, v_t, r, t })
    }

    pub fn len(&self) -> usize {
        self.x_t.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn query(&self) -> FieldQuery {
        FieldQuery {
            x: self.x_t.clone(),
            y: self.y.clone(),
            r: self.r.clone(),
            t: self.t.clone(),
        }
    }

    /// Same states evaluated on the diagonal `r = t`.
    pub fn diagonal_query(&self) -> FieldQuery {
        FieldQuery {
            x: self.x_t.clone(),
            y: self.y.clone(),
            r: self.t.clone(),
            t: self.t.clone(),
        }
    }

    pub fn is_diagonal(&self, row: usize) -> bool {
        self.r[row] == self.t[row]
    }

    pub fn split_rows(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.is_diagonal(i))
    }

    pub fn all_finite(&self) -> bool {
        self.x_t.all_finite() && self.y.all_finite() && self.v_t.all_finite()
    }

    /// Summary used in diagnostics.
    pub fn describe(&self) -> String {
        format!(
            "rows={} |x_t|max={:.3e} |y|max={:.3e} |v_t|max={:.3e} finite={}",
            self.len(),
            self.x_t.max_abs(),
            self.y.max_abs(),
            self.v_t.max_abs(),
            self.all_finite()
        )
    }
}

/// Deliberate corruptions of the target, used to check that verification catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetMutation {
    #[default]
    None,
    /// Adds the correction instead of subtracting it.
    FlipSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub values: Tensor,
    /// Off-diagonal rows whose bracket was clipped.
    pub clipped: usize,
    pub off_diagonal: usize,
}

/// First-order mean-flow target for every row of `batch`.
pub fn mfse_target<F: AverageField + ?Sized>(
    field: &F,
    batch: &TrainingBatch,
    cfg: &ObjectiveConfig,
) -> Result<Target> {
    mfse_target_with(field, batch, cfg, TargetMutation::None)
}

pub fn mfse_target_with<F: AverageField + ?Sized>(
    field: &F,
    batch: &TrainingBatch,
    cfg: &ObjectiveConfig,
    mutation: TargetMutation,
) -> Result<Target> {
    let mut values = batch.v_t.clone();
    let (_, off) = batch.split_rows();
    if off.is_empty() {
        return Ok(Target {
            values,
            clipped: 0,
            off_diagonal: 0,
        });
    }
    let q = batch.query().gather(&off);
    let v = batch.v_t.gather_rows(&off);
    let (_, bracket) = field.forward_with_jvp(&q, &v, 1.0)?;
    let sign = match mutation {
        TargetMutation::None => -1.0,
        TargetMutation::FlipSign => 1.0,
    };
    let mut clipped = 0;
    for (k, &row) in off.iter().enumerate() {
        let b = bracket.row(k);
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            let l2 = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
            return Err(ObjectiveError::NonFiniteJvp {
                row,
                t: batch.t[row],
                r: batch.r[row],
                v_norm: l2(batch.v_t.row(row)),
                x_norm: l2(batch.x_t.row(row)),
            });
        }
        let scale = if norm > cfg.jacobian_clip {
            clipped += 1;
            cfg.jacobian_clip / norm
        } else {
            1.0
        };
        let coef = sign * cfg.c * (batch.t[row] - batch.r[row]) * scale;
        for (o, &bv) in values.row_mut(row).iter_mut().zip(b) {
            *o += coef * bv;
        }
    }
    Ok(Target {
        values,
        clipped,
        off_diagonal: off.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cfm_loss: f64,
    pub mfse_loss: f64,
    pub total: f64,
    pub mean_weight: f64,
    pub fraction_clipped: f64,
    pub mean_span: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.cfm_loss.is_finite() && self.mfse_loss.is_finite() && self.total.is_finite()
    }
}

/// Mean of squared differences over `rows`, summed in row order.
fn row_mse(pred: &Tensor, target: &Tensor, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for &i in rows {
        for (a, b) in pred.row(i).iter().zip(target.row(i)) {
            let d = a - b;
            acc += d * d;
        }
    }
    acc / (rows.len() * pred.cols()) as f64
}

/// Flow-matching loss `E‖u(x_t, t, t | y) − v_t‖²`.
pub fn cfm_loss<F: AverageField + ?Sized>(field: &F, batch: &TrainingBatch) -> Result<f64> {
    let u = field.forward(&batch.diagonal_query())?;
    let rows: Vec<usize> = (0..batch.len()).collect();
    Ok(row_mse(&u, &batch.v_t, &rows))
}

fn report(
    u: &Tensor,
    batch: &TrainingBatch,
    target: &Target,
    cfg: &ObjectiveConfig,
    step: u64,
) -> LossReport {
    let (diag, off) = batch.split_rows();
    let cfm = row_mse(u, &target.values, &diag);
    let mfse = row_mse(u, &target.values, &off);
    let w = cfg.mean_weight(step);
    let spans: f64 = batch.t.iter().zip(&batch.r).map(|(t, r)| t - r).sum();
    LossReport {
        cfm_loss: cfm,
        mfse_loss: mfse,
        total: cfm + w * mfse,
        mean_weight: w,
        fraction_clipped: if target.off_diagonal == 0 {
            0.0
        } else {
            target.clipped as f64 / target.off_diagonal as f64
        },
        mean_span: spans / batch.len().max(1) as f64,
    }
}

/// Combined loss: flow matching on diagonal rows plus the weighted mean-flow
/// branch on the others.
pub fn mfse_loss<F: AverageField + ?Sized>(
    field: &F,
    batch: &TrainingBatch,
    cfg: &ObjectiveConfig,
    step: u64,
) -> Result<LossReport> {
    let target = mfse_target(field, batch, cfg)?;
    let u = field.forward(&batch.query())?;
    Ok(report(&u, batch, &target, cfg, step))
}

/// Loss report and parameter gradients of `total`.
pub fn loss_and_grads<F: DifferentiableField>(
    field: &F,
    batch: &TrainingBatch,
    cfg: &ObjectiveConfig,
    step: u64,
    mutation: TargetMutation,
) -> Result<(LossReport, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(ObjectiveError::Batch("empty batch".into()));
    }
    let target = mfse_target_with(field, batch, cfg, mutation)?;
    let (diag, off) = batch.split_rows();
    let d = batch.x_t.cols();
    let w = cfg.mean_weight(step);
    let mut weights = Tensor::zeros(batch.x_t.shape());
    for (rows, scale) in [(&diag, 1.0), (&off, w)] {
        if rows.is_empty() {
            continue;
        }
        let per = scale / (rows.len() * d) as f64;
        for &i in rows.iter() {
            weights.row_mut(i).iter_mut().for_each(|v| *v = per);
        }
    }

    let mut g = Tape::new();
    let x = g.constant(batch.x_t.clone());
    let y = g.constant(batch.y.clone());
    let r = g.constant(Tensor::column(&batch.r));
    let t = g.constant(Tensor::column(&batch.t));
    let u = field.build(&mut g, &x, &y, &r, &t)?;
    let tgt = g.constant(target.values.clone());
    let tgt = g.stop_gradient(&tgt)?;
    let diff = g.sub(&u, &tgt)?;
    let sq = g.mul(&diff, &diff)?;
    let wt = g.constant(weights);
    let weighted = g.mul(&sq, &wt)?;
    let loss = g.sum(&weighted)?;

    let rep = report(g.value(&u), batch, &target, cfg, step);
    let grads = g
        .parameter_grads(loss, field.params().len())?
        .into_iter()
        .zip(field.params())
        .map(|(gr, p)| gr.unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((rep, grads))
}
