//! Closed-form reference field for affine dynamics `v(x, t) = a⊙x + b(t)`.
//!
//! `a` is a per-coordinate rate and `b(t) = b0 + b1·t + b2·t²`. Along a trajectory
//! the exact average velocity over `[r, t]` (with `Δ = t − r`, `w = −a·Δ`) is
//!
//! ```text
//! u = φ1(w)·(a⊙x + b(t)) − Δ·b'(t)·φ2(w) + 2·Δ²·b2·φ3(w)
//! ```
//!
//! where `φ_k(w) = Σ_m w^m / (m+k)!`. Every term is finite as `Δ → 0`, where
//! `u` reduces to `v`.

use super::{check_dim, AverageField, FieldError, FieldQuery, InstantaneousField, Result};
use crate::tensor::Tensor;

const SERIES_RADIUS: f64 = 1.0;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `φ_k(w) = Σ_{m≥0} w^m / (m+k)!`; `φ_0 = exp`.
pub fn phi(k: usize, w: f64) -> f64 {
    if w.abs() < SERIES_RADIUS {
        let mut term = 1.0 / factorial(k);
        let mut sum = term;
        for m in 1..60 {
            term *= w / (m + k) as f64;
            sum += term;
            if term.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        sum
    } else {
        let mut p = w.exp();
        for j in 0..k {
            p = (p - 1.0 / factorial(j)) / w;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticField {
    a: Vec<f64>,
    b0: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

impl AnalyticField {
    pub fn new(a: Vec<f64>, b0: Vec<f64>, b1: Vec<f64>, b2: Vec<f64>) -> Result<Self> {
        let d = a.len();
        if d == 0 || b0.len() != d || b1.len() != d || b2.len() != d {
            return Err(FieldError::Query(format!(
                "coefficient lengths {}, {}, {}, {} must match and be non-zero",
                d,
                b0.len(),
                b1.len(),
                b2.len()
            )));
        }
        Ok(Self { a, b0, b1, b2 })
    }

    /// From a full rate matrix; only diagonal matrices have a closed form here.
    pub fn from_matrix(a: &Tensor, b0: Vec<f64>, b1: Vec<f64>, b2: Vec<f64>) -> Result<Self> {
        let d = a.rows();
        if a.shape() != [d, d] {
            return Err(FieldError::Query(format!(
                "rate matrix must be square, got {:?}",
                a.shape()
            )));
        }
        for i in 0..d {
            for j in 0..d {
                if i != j && a.row(i)[j] != 0.0 {
                    return Err(FieldError::Unsupported(format!(
                        "non-diagonal rate matrix (entry {i},{j} = {})",
                        a.row(i)[j]
                    )));
                }
            }
        }
        Self::new((0..d).map(|i| a.row(i)[i]).collect(), b0, b1, b2)
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    fn b(&self, i: usize, t: f64) -> f64 {
        self.b0[i] + self.b1[i] * t + self.b2[i] * t * t
    }

    fn db(&self, i: usize, t: f64) -> f64 {
        self.b1[i] + 2.0 * self.b2[i] * t
    }

    fn v_scalar(&self, i: usize, x: f64, t: f64) -> f64 {
        self.a[i] * x + self.b(i, t)
    }

    /// `(u, ∂ₓu, ∂ₜu)` for one coordinate.
    fn u_scalar(&self, i: usize, x: f64, r: f64, t: f64) -> (f64, f64, f64) {
        let (a, b2) = (self.a[i], self.b2[i]);
        let d = t - r;
        let w = -a * d;
        let p = [phi(1, w), phi(2, w), phi(3, w), phi(4, w)];
        // dφ_k/dt = −a·(φ_k − k·φ_{k+1})
        let dp = |k: usize| -a * (p[k - 1] - k as f64 * p[k]);
        let (bt, dbt, v) = (self.b(i, t), self.db(i, t), self.v_scalar(i, x, t));
        let u = p[0] * v - d * dbt * p[1] + 2.0 * d * d * b2 * p[2];
        let du_dx = a * p[0];
        let du_dt = dp(1) * (a * x + bt) + p[0] * dbt
            - (dbt * p[1] + 2.0 * d * b2 * p[1] + d * dbt * dp(2))
            + 2.0 * b2 * (2.0 * d * p[2] + d * d * dp(3));
        (u, du_dx, du_dt)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.dim() {
            return Err(FieldError::Query(format!(
                "field has dim {}, state has shape {:?}",
                self.dim(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// `v(x, t)` row-wise with a per-row time.
    pub fn velocity_rows(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.check(x)?;
        let d = self.dim();
        let mut out = x.clone();
        for (row, &t) in t.iter().enumerate() {
            for (i, v) in out.row_mut(row).iter_mut().enumerate().take(d) {
                *v = self.v_scalar(i, *v, t);
            }
        }
        Ok(out)
    }

    /// Exact trajectory map: the state at time `to` of the trajectory that passes
    /// through `x` at time `from`.
    pub fn flow(&self, x: &Tensor, from: f64, to: f64) -> Result<Tensor> {
        self.check(x)?;
        let h = to - from;
        let mut out = x.clone();
        for row in 0..x.rows() {
            for (i, v) in out.row_mut(row).iter_mut().enumerate() {
                let w = self.a[i] * h;
                *v = w.exp() * *v
                    + h * phi(1, w) * self.b(i, from)
                    + h * h * phi(2, w) * self.db(i, from)
                    + 2.0 * h * h * h * phi(3, w) * self.b2[i];
            }
        }
        Ok(out)
    }

    /// Closed-form total derivative `du/dt = (v − u)/Δ` along the trajectory; only
    /// defined off the diagonal.
    pub fn total_derivative(&self, q: &FieldQuery) -> Result<Tensor> {
        let v = self.velocity_rows(&q.x, &q.t)?;
        let u = self.forward(q)?;
        let mut out = v.sub(&u)?;
        for row in 0..q.batch() {
            let d = q.span(row);
            if d <= 0.0 {
                return Err(FieldError::Query(format!("row {row} has zero span")));
            }
            out.row_mut(row).iter_mut().for_each(|v| *v /= d);
        }
        Ok(out)
    }
}

impl AverageField for AnalyticField {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn forward(&self, q: &FieldQuery) -> Result<Tensor> {
        check_dim(q, self.dim())?;
        let mut out = q.x.clone();
        for row in 0..q.batch() {
            let (r, t) = (q.r[row], q.t[row]);
            for (i, v) in out.row_mut(row).iter_mut().enumerate() {
                *v = self.u_scalar(i, *v, r, t).0;
            }
        }
        Ok(out)
    }

    fn forward_with_jvp(&self, q: &FieldQuery, dx: &Tensor, dt: f64) -> Result<(Tensor, Tensor)> {
        check_dim(q, self.dim())?;
        if dx.shape() != q.x.shape() {
            return Err(FieldError::Query(format!(
                "tangent shape {:?} vs state {:?}",
                dx.shape(),
                q.x.shape()
            )));
        }
        let mut u = q.x.clone();
        let mut tan = q.x.clone();
        for row in 0..q.batch() {
            let (r, t) = (q.r[row], q.t[row]);
            let xr = q.x.row(row);
            let dxr = dx.row(row);
            for i in 0..self.dim() {
                let (val, du_dx, du_dt) = self.u_scalar(i, xr[i], r, t);
                u.row_mut(row)[i] = val;
                tan.row_mut(row)[i] = du_dx * dxr[i] + du_dt * dt;
            }
        }
        Ok((u, tan))
    }
}

impl InstantaneousField for AnalyticField {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn velocity(&self, x: &Tensor, _y: &Tensor, t: f64) -> Result<Tensor> {
        self.velocity_rows(x, &vec![t; x.rows()])
    }
}
