//! Average-velocity fields `u(x, r, t | y)`.
//!
//! A field is queried on a batch of rows: `x` and `y` are `[B, D]`, and every row
//! carries its own `(r, t)` with `0 ≤ r ≤ t ≤ 1`. Two kinds of implementation exist:
//!
//! * learned fields built from tensor primitives ([`DifferentiableField`]), which
//!   get plain evaluation, forward-mode total derivatives and reverse-mode
//!   gradients from one graph description;
//! * closed-form reference fields ([`AnalyticField`]) used as oracles.

mod analytic;
mod basis;
mod checkpoint;
mod network;

pub use analytic::{phi, AnalyticField};
pub use basis::LinearBasisField;
pub use checkpoint::{Checkpoint, CheckpointDtype, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{FieldNetwork, NetworkConfig};

use std::cell::Cell;

use thiserror::Error;

use crate::tensor::{Eval, Forward, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid query: {0}")]
    Query(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FieldError>;

/// A batch of evaluation points `(x, r, t, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldQuery {
    pub x: Tensor,
    pub y: Tensor,
    pub r: Vec<f64>,
    pub t: Vec<f64>,
}

impl FieldQuery {
    pub fn new(x: Tensor, y: Tensor, r: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        let q = Self::unchecked(x, y, r, t)?;
        for (i, (&r, &t)) in q.r.iter().zip(&q.t).enumerate() {
            if !(0.0 <= r && r <= t && t <= 1.0) {
                return Err(FieldError::Query(format!(
                    "row {i}: need 0 <= r <= t <= 1, got r={r} t={t}"
                )));
            }
        }
        Ok(q)
    }

    /// Same time pair on every row.
    pub fn uniform(x: Tensor, y: Tensor, r: f64, t: f64) -> Result<Self> {
        let b = x.rows();
        Self::new(x, y, vec![r; b], vec![t; b])
    }

    /// Shape checks only; times may leave `[0, 1]` (finite-difference probes).
    pub fn unchecked(x: Tensor, y: Tensor, r: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        if x.shape().len() != 2 || x.shape() != y.shape() {
            return Err(FieldError::Query(format!(
                "x {:?} and y {:?} must be equal [B, D] matrices",
                x.shape(),
                y.shape()
            )));
        }
        let b = x.rows();
        if r.len() != b || t.len() != b {
            return Err(FieldError::Query(format!(
                "{b} rows but {} r values and {} t values",
                r.len(),
                t.len()
            )));
        }
        Ok(Self { x, y, r, t })
    }

    pub fn batch(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn span(&self, i: usize) -> f64 {
        self.t[i] - self.r[i]
    }

    pub fn spans(&self) -> Vec<f64> {
        self.t.iter().zip(&self.r).map(|(t, r)| t - r).collect()
    }

    /// Rows `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.gather_rows(idx),
            y: self.y.gather_rows(idx),
            r: idx.iter().map(|&i| self.r[i]).collect(),
            t: idx.iter().map(|&i| self.t[i]).collect(),
        }
    }
}

/// Anything that can be evaluated as `u(x, r, t | y)`.
pub trait AverageField {
    fn dim(&self) -> usize;

    fn forward(&self, q: &FieldQuery) -> Result<Tensor>;

    /// `u(q)` and its directional derivative along `(dx, dt)` in `(x, t)`, with
    /// `r` and `y` held fixed. With `dx = v` and `dt = 1` this is the total
    /// derivative `v·∇ₓu + ∂ₜu`.
    fn forward_with_jvp(&self, q: &FieldQuery, dx: &Tensor, dt: f64) -> Result<(Tensor, Tensor)>;
}

/// Instantaneous velocity `v(x, t | y)` for forward Euler integration.
pub trait InstantaneousField {
    fn dim(&self) -> usize;

    fn velocity(&self, x: &Tensor, y: &Tensor, t: f64) -> Result<Tensor>;
}

/// A field expressed through tensor primitives, differentiable in every backend.
pub trait DifferentiableField {
    fn dim(&self) -> usize;

    /// Trainable tensors, addressed by slot index in [`DifferentiableField::build`].
    fn params(&self) -> &[Tensor];

    fn params_mut(&mut self) -> &mut [Tensor];

    fn param_names(&self) -> Vec<String>;

    /// Builds `u` from `x, y: [B, D]` and `r, t: [B, 1]`.
    fn build<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Value,
        y: &G::Value,
        r: &G::Value,
        t: &G::Value,
    ) -> std::result::Result<G::Value, TensorError>;

    fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let own = self.params_mut();
        if own.len() != params.len() {
            return Err(FieldError::Query(format!(
                "expected {} parameter tensors, got {}",
                own.len(),
                params.len()
            )));
        }
        for (dst, src) in own.iter_mut().zip(params) {
            if dst.shape() != src.shape() {
                return Err(FieldError::Query(format!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }
}

fn check_dim(q: &FieldQuery, dim: usize) -> Result<()> {
    if q.dim() != dim {
        return Err(FieldError::Query(format!(
            "field has dim {dim}, query has {}",
            q.dim()
        )));
    }
    Ok(())
}

impl<F: DifferentiableField> AverageField for F {
    fn dim(&self) -> usize {
        DifferentiableField::dim(self)
    }

    fn forward(&self, q: &FieldQuery) -> Result<Tensor> {
        check_dim(q, DifferentiableField::dim(self))?;
        let mut g = Eval;
        let r = Tensor::column(&q.r);
        let t = Tensor::column(&q.t);
        Ok(self.build(&mut g, &q.x, &q.y, &r, &t)?)
    }

    fn forward_with_jvp(&self, q: &FieldQuery, dx: &Tensor, dt: f64) -> Result<(Tensor, Tensor)> {
        check_dim(q, DifferentiableField::dim(self))?;
        let mut g = Forward;
        let x = g.seed(q.x.clone(), dx.clone())?;
        let y = g.constant(q.y.clone());
        let r = g.constant(Tensor::column(&q.r));
        let t = g.seed(Tensor::column(&q.t), Tensor::full(&[q.batch(), 1], dt))?;
        let out = self.build(&mut g, &x, &y, &r, &t)?;
        Ok(out.into_parts())
    }
}

/// Centred difference of `u` along `(dx, dt)`; `r` and `y` stay fixed.
pub fn finite_difference_total_derivative<F: AverageField + ?Sized>(
    field: &F,
    q: &FieldQuery,
    dx: &Tensor,
    dt: f64,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(FieldError::Query(format!("step h must be > 0, got {h}")));
    }
    let probe = |sign: f64| -> Result<Tensor> {
        let mut x = q.x.clone();
        x.axpy(sign * h, dx)?;
        let t = q.t.iter().map(|t| t + sign * h * dt).collect();
        field.forward(&FieldQuery::unchecked(x, q.y.clone(), q.r.clone(), t)?)
    };
    let plus = probe(1.0)?;
    let minus = probe(-1.0)?;
    let inv = 0.5 / h;
    Ok(plus.zip_map(&minus, "finite_difference", |a, b| (a - b) * inv)?)
}

/// Counts evaluations of the wrapped field.
#[derive(Debug)]
pub struct CountingField<F> {
    inner: F,
    calls: Cell<usize>,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn reset(&self) {
        self.calls.set(0);
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }

    fn tick(&self) {
        self.calls.set(self.calls.get() + 1);
    }
}

impl<F: AverageField> AverageField for CountingField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn forward(&self, q: &FieldQuery) -> Result<Tensor> {
        self.tick();
        self.inner.forward(q)
    }

    fn forward_with_jvp(&self, q: &FieldQuery, dx: &Tensor, dt: f64) -> Result<(Tensor, Tensor)> {
        self.tick();
        self.inner.forward_with_jvp(q, dx, dt)
    }
}

impl<F: InstantaneousField> InstantaneousField for CountingField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn velocity(&self, x: &Tensor, y: &Tensor, t: f64) -> Result<Tensor> {
        self.tick();
        self.inner.velocity(x, y, t)
    }
}

/// Runs an average field on its diagonal in reversed time, `v(x, s) = −u(x, 1−s, 1−s)`,
/// so ascending-grid Euler moves from the noisy end (`s = 0`) to the clean end.
#[derive(Debug)]
pub struct TimeReversed<'a, F: ?Sized>(pub &'a F);

impl<F: AverageField + ?Sized> InstantaneousField for TimeReversed<'_, F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn velocity(&self, x: &Tensor, y: &Tensor, s: f64) -> Result<Tensor> {
        let t = (1.0 - s).clamp(0.0, 1.0);
        let u = self
            .0
            .forward(&FieldQuery::uniform(x.clone(), y.clone(), t, t)?)?;
        Ok(u.scale(-1.0))
    }
}

#[cfg(test)]
mod tests;
