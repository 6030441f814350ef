//! Reverse-mode gradient tape.

use std::collections::HashMap;

use super::graph::{eval_primitive, silu_grad};
use super::{gemm, Graph, MatRef, Primitive, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<Primitive>,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Records primitive applications so a scalar can be differentiated with respect
/// to every parameter that fed it. One tape per training step; not shared across
/// threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    slots: HashMap<usize, usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Option<Primitive>,
        parents: Vec<usize>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    /// A free variable that gradients are taken with respect to.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None, Vec::new(), true)
    }

    /// Back-propagates from `loss` and returns the gradient for each of `wrt`.
    /// Variables that do not influence the loss get zeros.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.backward(loss)?;
        wrt.iter()
            .map(|&v| {
                let node = self.node(v)?;
                Ok(grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape())))
            })
            .collect()
    }

    /// Gradients for every registered parameter slot, indexed by slot.
    pub fn parameter_grads(&self, loss: Var, n_slots: usize) -> Result<Vec<Option<Tensor>>> {
        let mut grads = self.backward(loss)?;
        let mut out = vec![None; n_slots];
        for (&slot, &idx) in &self.slots {
            if slot < n_slots {
                out[slot] = Some(
                    grads[idx]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape())),
                );
            }
        }
        Ok(out)
    }

    fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let (Some(op), true) = (node.op, node.requires_grad) else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let contributions = self.local_grads(node, op, &g)?;
            // Keep the gradient of intermediates that are also requested outputs.
            grads[i] = Some(g);
            for (parent, contrib) in node.parents.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[*parent].requires_grad {
                    continue;
                }
                match &mut grads[*parent] {
                    Some(acc) => acc.axpy(1.0, &contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(grads)
    }

    fn local_grads(&self, node: &Node, op: Primitive, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let parent = |k: usize| &self.nodes[node.parents[k]];
        let wants = |k: usize| self.nodes[node.parents[k]].requires_grad;
        Ok(match op {
            Primitive::Affine => {
                let (x, w) = (&parent(0).value, &parent(1).value);
                let (n, k, m) = (x.rows(), x.cols(), w.cols());
                let mut out = Vec::with_capacity(node.parents.len());
                out.push(if wants(0) {
                    let mut dx = Tensor::zeros(x.shape());
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        MatRef::row_major(g.data(), m),
                        MatRef::transposed(w.data(), m),
                        0.0,
                        dx.data_mut(),
                    );
                    Some(dx)
                } else {
                    None
                });
                out.push(if wants(1) {
                    let mut dw = Tensor::zeros(w.shape());
                    gemm(
                        k,
                        n,
                        m,
                        1.0,
                        MatRef::transposed(x.data(), k),
                        MatRef::row_major(g.data(), m),
                        0.0,
                        dw.data_mut(),
                    );
                    Some(dw)
                } else {
                    None
                });
                if node.parents.len() == 3 {
                    out.push(if wants(2) {
                        let b = &parent(2).value;
                        let mut db = vec![0.0; m];
                        for r in 0..n {
                            for (acc, v) in db.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        Some(Tensor::new(b.shape().to_vec(), db)?)
                    } else {
                        None
                    });
                }
                out
            }
            Primitive::Add => vec![Some(g.clone()), Some(g.clone())],
            Primitive::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
            Primitive::Mul => vec![
                if wants(0) {
                    Some(g.mul(&parent(1).value)?)
                } else {
                    None
                },
                if wants(1) {
                    Some(g.mul(&parent(0).value)?)
                } else {
                    None
                },
            ],
            Primitive::Scale(c) => vec![Some(g.scale(c))],
            Primitive::Tanh => vec![Some(
                node.value.zip_map(g, "tanh", |y, g| (1.0 - y * y) * g)?,
            )],
            Primitive::Silu => vec![Some(
                parent(0)
                    .value
                    .zip_map(g, "silu", |x, g| silu_grad(x) * g)?,
            )],
            Primitive::Sin => vec![Some(parent(0).value.zip_map(g, "sin", |x, g| x.cos() * g)?)],
            Primitive::Cos => vec![Some(
                parent(0).value.zip_map(g, "cos", |x, g| -x.sin() * g)?,
            )],
            Primitive::Sum => {
                let gv = g.item()?;
                vec![Some(Tensor::full(parent(0).value.shape(), gv))]
            }
            Primitive::Mean => {
                let p = &parent(0).value;
                let gv = g.item()? / p.numel().max(1) as f64;
                vec![Some(Tensor::full(p.shape(), gv))]
            }
            Primitive::Concat => {
                let mut start = 0;
                let mut out = Vec::with_capacity(node.parents.len());
                for k in 0..node.parents.len() {
                    let width = parent(k).value.cols();
                    out.push(if wants(k) {
                        Some(
                            g.slice_cols(start, width)?
                                .reshape(parent(k).value.shape().to_vec())?,
                        )
                    } else {
                        None
                    });
                    start += width;
                }
                out
            }
            Primitive::Slice { start, len } => {
                let p = &parent(0).value;
                let mut dp = Tensor::zeros(p.shape());
                for r in 0..p.rows() {
                    dp.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                vec![Some(dp)]
            }
            Primitive::StopGradient => vec![None],
            Primitive::Abs => {
                return Err(TensorError::Unsupported {
                    primitive: op.name(),
                })
            }
        })
    }
}

impl Graph for Tape {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None, Vec::new(), false)
    }

    fn parameter(&mut self, slot: usize, t: &Tensor) -> Var {
        if let Some(&idx) = self.slots.get(&slot) {
            return Var(idx);
        }
        let v = self.leaf(t.clone());
        self.slots.insert(slot, v.0);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn apply(&mut self, op: Primitive, args: &[&Var]) -> Result<Var> {
        if !op.is_differentiable() {
            return Err(TensorError::Unsupported {
                primitive: op.name(),
            });
        }
        let mut parents = Vec::with_capacity(args.len());
        for a in args {
            self.node(**a)?;
            parents.push(a.0);
        }
        let value = {
            let vals: Vec<&Tensor> = parents.iter().map(|&p| &self.nodes[p].value).collect();
            eval_primitive(op, &vals)?
        };
        let requires_grad = !matches!(op, Primitive::StopGradient)
            && parents.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(value, Some(op), parents, requires_grad))
    }
}
