use super::DifferentiableField;
use crate::tensor::{Graph, Tensor, TensorError};

/// Scalar field linear in its parameters:
/// `u = θ·[1, t, Δ, t², t·Δ, Δ², x]` with `Δ = t − r`.
///
/// Exact for affine dynamics with `a = 0` and quadratic `b(t)`, which makes its
/// optimum known in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBasisField {
    theta: [Tensor; 1],
}

impl LinearBasisField {
    pub const FEATURES: [&'static str; 7] = ["1", "t", "span", "t^2", "t*span", "span^2", "x"];

    pub fn new(theta: &[f64; 7]) -> Self {
        Self {
            theta: [Tensor::new(vec![7, 1], theta.to_vec()).expect("7 coefficients")],
        }
    }

    pub fn zeros() -> Self {
        Self::new(&[0.0; 7])
    }

    pub fn theta(&self) -> &[f64] {
        self.theta[0].data()
    }

    /// Coefficients of the exact average velocity for `v = b0 + b1·t + b2·t²`.
    pub fn exact_theta(b0: f64, b1: f64, b2: f64) -> [f64; 7] {
        [b0, b1, -0.5 * b1, b2, -b2, b2 / 3.0, 0.0]
    }
}

impl DifferentiableField for LinearBasisField {
    fn dim(&self) -> usize {
        1
    }

    fn params(&self) -> &[Tensor] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.theta
    }

    fn param_names(&self) -> Vec<String> {
        vec!["theta".into()]
    }

    fn build<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Value,
        _y: &G::Value,
        r: &G::Value,
        t: &G::Value,
    ) -> Result<G::Value, TensorError> {
        let rows = g.value(t).rows();
        let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
        let span = g.sub(t, r)?;
        let tt = g.mul(t, t)?;
        let ts = g.mul(t, &span)?;
        let ss = g.mul(&span, &span)?;
        let feats = g.concat(&[&ones, t, &span, &tt, &ts, &ss, x])?;
        let theta = g.parameter(0, &self.theta[0]);
        g.affine(&feats, &theta, None)
    }
}
