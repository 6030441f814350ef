use super::{gemm, MatRef, Result, Tensor, TensorError};

/// The closed set of operations a differentiable program may use.
///
/// `Abs` is value-only: plain evaluation accepts it, both differentiation modes
/// reject it with [`TensorError::Unsupported`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// `x·w (+ b)`; `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    Affine,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Silu,
    Sin,
    Cos,
    Sum,
    Mean,
    /// Concatenation along the last axis.
    Concat,
    /// Contiguous columns of the last axis.
    Slice {
        start: usize,
        len: usize,
    },
    StopGradient,
    Abs,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Affine => "affine",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Tanh => "tanh",
            Primitive::Silu => "silu",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::StopGradient => "stop_gradient",
            Primitive::Abs => "abs",
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, Primitive::Abs)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn arity(op: Primitive, args: &[&Tensor], expected: usize) -> Result<()> {
    if args.len() != expected {
        return Err(TensorError::Arity {
            op: op.name(),
            expected,
            got: args.len(),
        });
    }
    Ok(())
}

pub(crate) fn affine_value(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (k, m) = match w.shape() {
        [k, m] => (*k, *m),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            })
        }
    };
    if x.shape().len() != 2 || x.cols() != k {
        return Err(TensorError::ShapeMismatch {
            op: "affine",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let n = x.rows();
    let mut out = match b {
        Some(b) => {
            if b.numel() != m {
                return Err(TensorError::ShapeMismatch {
                    op: "affine",
                    left: w.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut data = Vec::with_capacity(n * m);
            for _ in 0..n {
                data.extend_from_slice(b.data());
            }
            Tensor::new(vec![n, m], data)?
        }
        None => Tensor::zeros(&[n, m]),
    };
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    gemm(
        n,
        k,
        m,
        1.0,
        MatRef::row_major(x.data(), k),
        MatRef::row_major(w.data(), m),
        beta,
        out.data_mut(),
    );
    Ok(out)
}

/// Value of one primitive application; shared by every backend.
pub(crate) fn eval_primitive(op: Primitive, args: &[&Tensor]) -> Result<Tensor> {
    match op {
        Primitive::Affine => match args {
            [x, w] => affine_value(x, w, None),
            [x, w, b] => affine_value(x, w, Some(b)),
            _ => Err(TensorError::Arity {
                op: "affine",
                expected: 3,
                got: args.len(),
            }),
        },
        Primitive::Add => {
            arity(op, args, 2)?;
            args[0].add(args[1])
        }
        Primitive::Sub => {
            arity(op, args, 2)?;
            args[0].sub(args[1])
        }
        Primitive::Mul => {
            arity(op, args, 2)?;
            args[0].mul(args[1])
        }
        Primitive::Scale(c) => {
            arity(op, args, 1)?;
            Ok(args[0].scale(c))
        }
        Primitive::Tanh => {
            arity(op, args, 1)?;
            Ok(args[0].map(f64::tanh))
        }
        Primitive::Silu => {
            arity(op, args, 1)?;
            Ok(args[0].map(silu))
        }
        Primitive::Sin => {
            arity(op, args, 1)?;
            Ok(args[0].map(f64::sin))
        }
        Primitive::Cos => {
            arity(op, args, 1)?;
            Ok(args[0].map(f64::cos))
        }
        Primitive::Abs => {
            arity(op, args, 1)?;
            Ok(args[0].map(f64::abs))
        }
        Primitive::Sum => {
            arity(op, args, 1)?;
            Ok(Tensor::scalar(args[0].sum()))
        }
        Primitive::Mean => {
            arity(op, args, 1)?;
            let n = args[0].numel().max(1) as f64;
            Ok(Tensor::scalar(args[0].sum() / n))
        }
        Primitive::Concat => Tensor::concat_cols(args),
        Primitive::Slice { start, len } => {
            arity(op, args, 1)?;
            args[0].slice_cols(start, len)
        }
        Primitive::StopGradient => {
            arity(op, args, 1)?;
            Ok(args[0].clone())
        }
    }
}

/// A computation backend. Programs written against `Graph` run unchanged under
/// plain evaluation ([`Eval`]), forward-mode JVP ([`super::Forward`]) and the
/// reverse-mode tape ([`super::Tape`]).
pub trait Graph {
    type Value: Clone;

    /// An input that is held constant (zero tangent, no gradient).
    fn constant(&mut self, t: Tensor) -> Self::Value;

    /// A trainable tensor identified by `slot`.
    fn parameter(&mut self, slot: usize, t: &Tensor) -> Self::Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn apply(&mut self, op: Primitive, args: &[&Self::Value]) -> Result<Self::Value>;

    fn affine(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
    ) -> Result<Self::Value> {
        match b {
            Some(b) => self.apply(Primitive::Affine, &[x, w, b]),
            None => self.apply(Primitive::Affine, &[x, w]),
        }
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Sub, &[a, b])
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Mul, &[a, b])
    }

    fn scale(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value> {
        self.apply(Primitive::Scale(c), &[a])
    }

    fn tanh(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Tanh, &[a])
    }

    fn silu(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Silu, &[a])
    }

    fn sin(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Sin, &[a])
    }

    fn cos(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Cos, &[a])
    }

    fn sum(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Sum, &[a])
    }

    fn mean(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::Mean, &[a])
    }

    fn concat(&mut self, parts: &[&Self::Value]) -> Result<Self::Value> {
        self.apply(Primitive::Concat, parts)
    }

    fn slice(&mut self, a: &Self::Value, start: usize, len: usize) -> Result<Self::Value> {
        self.apply(Primitive::Slice { start, len }, &[a])
    }

    fn stop_gradient(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Primitive::StopGradient, &[a])
    }
}

/// A program of one tensor argument, generic over the backend.
pub trait Function {
    fn apply<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<G::Value>;
}

/// Plain evaluation, no derivative bookkeeping.
#[derive(Debug, Default)]
pub struct Eval;

impl Graph for Eval {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn parameter(&mut self, _slot: usize, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn apply(&mut self, op: Primitive, args: &[&Tensor]) -> Result<Tensor> {
        eval_primitive(op, args)
    }
}

pub fn eval<F: Function>(f: &F, x: &Tensor) -> Result<Tensor> {
    let mut g = Eval;
    let xv = g.constant(x.clone());
    f.apply(&mut g, &xv)
}
