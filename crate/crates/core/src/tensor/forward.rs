//! Forward-mode propagation of directional derivatives.

use super::graph::{affine_value, eval_primitive, silu_grad};
use super::{Function, Graph, Primitive, Result, Tensor, TensorError};

/// A value paired with its directional derivative.
///
/// A missing tangent stands for an exactly-zero tangent of the primal's shape, so
/// constants and parameters never allocate one.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    primal: Tensor,
    tangent: Option<Tensor>,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dual",
                left: primal.shape().to_vec(),
                right: tangent.shape().to_vec(),
            });
        }
        Ok(Self {
            primal,
            tangent: Some(tangent),
        })
    }

    pub fn constant(primal: Tensor) -> Self {
        Self {
            primal,
            tangent: None,
        }
    }

    pub fn primal(&self) -> &Tensor {
        &self.primal
    }

    /// The tangent, materialising zeros for constants.
    pub fn tangent(&self) -> Tensor {
        match &self.tangent {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.primal.shape()),
        }
    }

    pub fn has_tangent(&self) -> bool {
        self.tangent.is_some()
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        let tangent = match self.tangent {
            Some(t) => t,
            None => Tensor::zeros(self.primal.shape()),
        };
        (self.primal, tangent)
    }
}

fn add_opt(a: Option<Tensor>, b: Option<Tensor>) -> Result<Option<Tensor>> {
    Ok(match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (Some(a), Some(b)) => Some(a.add(&b)?),
    })
}

/// Forward-mode backend.
#[derive(Debug, Default)]
pub struct Forward;

impl Forward {
    pub fn seed(&mut self, primal: Tensor, tangent: Tensor) -> Result<DualTensor> {
        DualTensor::new(primal, tangent)
    }
}

impl Graph for Forward {
    type Value = DualTensor;

    fn constant(&mut self, t: Tensor) -> DualTensor {
        DualTensor::constant(t)
    }

    fn parameter(&mut self, _slot: usize, t: &Tensor) -> DualTensor {
        DualTensor::constant(t.clone())
    }

    fn value<'a>(&'a self, v: &'a DualTensor) -> &'a Tensor {
        &v.primal
    }

    fn apply(&mut self, op: Primitive, args: &[&DualTensor]) -> Result<DualTensor> {
        if !op.is_differentiable() {
            return Err(TensorError::Unsupported {
                primitive: op.name(),
            });
        }
        let primals: Vec<&Tensor> = args.iter().map(|a| &a.primal).collect();
        let primal = eval_primitive(op, &primals)?;
        let tangent = match op {
            Primitive::Affine => {
                let (x, w) = (args[0], args[1]);
                let mut t = None;
                if let Some(dx) = &x.tangent {
                    t = Some(affine_value(dx, &w.primal, None)?);
                }
                if let Some(dw) = &w.tangent {
                    t = add_opt(t, Some(affine_value(&x.primal, dw, None)?))?;
                }
                if let Some(db) = args.get(2).and_then(|b| b.tangent.as_ref()) {
                    let mut rows = Vec::with_capacity(primal.numel());
                    for _ in 0..primal.rows() {
                        rows.extend_from_slice(db.data());
                    }
                    t = add_opt(t, Some(Tensor::new(primal.shape().to_vec(), rows)?))?;
                }
                t
            }
            Primitive::Add => add_opt(args[0].tangent.clone(), args[1].tangent.clone())?,
            Primitive::Sub => {
                let neg = args[1].tangent.as_ref().map(|t| t.scale(-1.0));
                add_opt(args[0].tangent.clone(), neg)?
            }
            Primitive::Mul => {
                let (a, b) = (args[0], args[1]);
                let ta = match &a.tangent {
                    Some(da) => Some(da.mul(&b.primal)?),
                    None => None,
                };
                let tb = match &b.tangent {
                    Some(db) => Some(a.primal.mul(db)?),
                    None => None,
                };
                add_opt(ta, tb)?
            }
            Primitive::Scale(c) => args[0].tangent.as_ref().map(|t| t.scale(c)),
            Primitive::Tanh => match &args[0].tangent {
                Some(d) => Some(primal.zip_map(d, "tanh", |y, d| (1.0 - y * y) * d)?),
                None => None,
            },
            Primitive::Silu => match &args[0].tangent {
                Some(d) => Some(args[0].primal.zip_map(d, "silu", |x, d| silu_grad(x) * d)?),
                None => None,
            },
            Primitive::Sin => match &args[0].tangent {
                Some(d) => Some(args[0].primal.zip_map(d, "sin", |x, d| x.cos() * d)?),
                None => None,
            },
            Primitive::Cos => match &args[0].tangent {
                Some(d) => Some(args[0].primal.zip_map(d, "cos", |x, d| -x.sin() * d)?),
                None => None,
            },
            Primitive::Sum => args[0].tangent.as_ref().map(|d| Tensor::scalar(d.sum())),
            Primitive::Mean => args[0]
                .tangent
                .as_ref()
                .map(|d| Tensor::scalar(d.sum() / d.numel().max(1) as f64)),
            Primitive::Concat => {
                if args.iter().all(|a| a.tangent.is_none()) {
                    None
                } else {
                    let parts: Vec<Tensor> = args.iter().map(|a| a.tangent()).collect();
                    let refs: Vec<&Tensor> = parts.iter().collect();
                    Some(Tensor::concat_cols(&refs)?)
                }
            }
            Primitive::Slice { start, len } => match &args[0].tangent {
                Some(d) => Some(d.slice_cols(start, len)?),
                None => None,
            },
            Primitive::StopGradient => None,
            Primitive::Abs => unreachable!("rejected above"),
        };
        Ok(DualTensor { primal, tangent })
    }
}

/// `(f(x), J_f(x)·dx)` by forward propagation.
pub fn jvp<F: Function>(f: &F, x: &Tensor, dx: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Forward;
    let input = g.seed(x.clone(), dx.clone())?;
    let out = f.apply(&mut g, &input)?;
    Ok(out.into_parts())
}
