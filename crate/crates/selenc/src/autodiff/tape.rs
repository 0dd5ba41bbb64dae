use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Primitive ops recorded on the tape. Variants hold the node ids of their
/// inputs; composites (conv2d, softmax, pooling) expand into these.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Pow(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    Sum(usize),
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    Gather(usize, Arc<Vec<usize>>),
    Scatter(usize, Arc<Vec<usize>>),
}

pub(crate) fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Pow(..) => "pow",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Relu(..) => "relu",
        Op::Abs(..) => "abs",
        Op::Sum(..) => "sum",
        Op::Reshape(..) => "reshape",
        Op::Transpose(..) => "transpose",
        Op::MatMul(..) => "matmul",
        Op::Gather(..) => "gather",
        Op::Scatter(..) => "scatter",
    }
}

pub(crate) struct Node {
    pub op: Op,
    pub value: Rc<Vec<f64>>,
    pub shape: Vec<usize>,
}

/// Wengert list. Cloning the handle shares the underlying list; each
/// computation gets its own tape that is dropped afterwards.
#[derive(Clone)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Records a leaf holding `data` and returns its handle. Variables and
    /// constants are both leaves; only the ids passed to `grad` matter.
    pub fn var(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.push(Op::Leaf, data, shape)
    }

    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.push(Op::Leaf, data, shape)
    }

    pub(crate) fn push(&self, op: Op, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "node data does not match shape"
        );
        let value = Rc::new(data);
        let id = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op,
                value: Rc::clone(&value),
                shape: shape.clone(),
            });
            nodes.len() - 1
        };
        Tensor {
            data: value,
            shape,
            node: Some((self.clone(), id)),
        }
    }

    pub(crate) fn node_value(&self, id: usize) -> (Rc<Vec<f64>>, Vec<usize>) {
        let nodes = self.nodes.borrow();
        (Rc::clone(&nodes[id].value), nodes[id].shape.clone())
    }

    pub(crate) fn node_shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn node_op(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    fn id_of(&self, t: &Tensor) -> Result<usize> {
        match &t.node {
            Some((tape, id)) if tape.same_tape(self) => Ok(*id),
            _ => Err(Error::NotOnTape),
        }
    }

    /// Scans every recorded value for NaN/Inf and reports the first offender.
    pub fn check_finite(&self) -> Result<()> {
        let nodes = self.nodes.borrow();
        for (id, node) in nodes.iter().enumerate() {
            if node.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: op_name(&node.op),
                    node: id,
                });
            }
        }
        Ok(())
    }

    /// Rebuilds a value as a tensor handle. Attached handles keep provenance
    /// so higher-order rules stay differentiable; detached ones are plain
    /// values for the first-order fast path.
    fn handle(&self, id: usize, attached: bool) -> Tensor {
        let (value, shape) = self.node_value(id);
        Tensor {
            data: value,
            shape,
            node: if attached {
                Some((self.clone(), id))
            } else {
                None
            },
        }
    }

    /// Materializes fresh data either as a tape constant (when the backward
    /// pass is itself being recorded) or as a detached tensor.
    fn lift(&self, data: Vec<f64>, shape: Vec<usize>, attached: bool) -> Tensor {
        if attached {
            self.constant(data, shape)
        } else {
            Tensor::detached(data, shape)
        }
    }

    fn accumulate(
        &self,
        adj: &mut [Option<Tensor>],
        id: usize,
        contrib: Tensor,
    ) {
        let shape = self.node_shape(id);
        let contrib = if contrib.shape() != shape.as_slice() {
            contrib.reshape(shape)
        } else {
            contrib
        };
        adj[id] = Some(match adj[id].take() {
            None => contrib,
            Some(prev) => prev.add(&contrib),
        });
    }

    /// Reduces a broadcast adjoint back to the operand's length. Scalar
    /// operands of elementwise ops receive the summed adjoint.
    fn reduce_for(&self, g: &Tensor, id: usize) -> Tensor {
        let target_len: usize = self.node_shape(id).iter().product();
        if g.len() == target_len {
            g.clone()
        } else {
            g.sum()
        }
    }

    /// Reverse pass from scalar `output` to each tensor in `wrt`.
    ///
    /// With `create_graph` the adjoint computation is recorded on this same
    /// tape, so the returned gradients can be differentiated again. Without
    /// it the pass runs detached and the tape does not grow.
    pub fn grad(
        &self,
        output: &Tensor,
        wrt: &[&Tensor],
        create_graph: bool,
    ) -> Result<Vec<Tensor>> {
        let out_id = self.id_of(output)?;
        if output.len() != 1 {
            return Err(Error::NotScalar {
                shape: output.shape().to_vec(),
            });
        }
        let wrt_ids: Vec<usize> = wrt
            .iter()
            .map(|t| self.id_of(t))
            .collect::<Result<Vec<_>>>()?;

        let span = out_id + 1;
        let mut adj: Vec<Option<Tensor>> = (0..span).map(|_| None).collect();
        adj[out_id] = Some(self.lift(vec![1.0], output.shape().to_vec(), create_graph));

        for id in (0..span).rev() {
            let Some(g) = adj[id].clone() else { continue };
            match self.node_op(id) {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let ga = self.reduce_for(&g, a);
                    let gb = self.reduce_for(&g, b);
                    self.accumulate(&mut adj, a, ga);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = self.reduce_for(&g, a);
                    let gb = self.reduce_for(&g, b).neg();
                    self.accumulate(&mut adj, a, ga);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Mul(a, b) => {
                    let ha = self.handle(a, create_graph);
                    let hb = self.handle(b, create_graph);
                    let ga = self.reduce_for(&g.mul(&hb), a);
                    let gb = self.reduce_for(&g.mul(&ha), b);
                    self.accumulate(&mut adj, a, ga);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Pow(a, e) => {
                    let ha = self.handle(a, create_graph);
                    let ga = g.mul(&ha.pow(e - 1.0).mul_scalar(e));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let out = self.handle(id, create_graph);
                    self.accumulate(&mut adj, a, g.mul(&out));
                }
                Op::Log(a) => {
                    let ha = self.handle(a, create_graph);
                    self.accumulate(&mut adj, a, g.mul(&ha.pow(-1.0)));
                }
                Op::Tanh(a) => {
                    let out = self.handle(id, create_graph);
                    let one_minus_sq = out.mul(&out).neg().add_scalar(1.0);
                    self.accumulate(&mut adj, a, g.mul(&one_minus_sq));
                }
                Op::Sigmoid(a) => {
                    let out = self.handle(id, create_graph);
                    let deriv = out.mul(&out.neg().add_scalar(1.0));
                    self.accumulate(&mut adj, a, g.mul(&deriv));
                }
                Op::Relu(a) => {
                    // Subgradient 0 at the kink; the mask is constant wrt x.
                    let (value, shape) = self.node_value(a);
                    let mask: Vec<f64> =
                        value.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                    let mask = self.lift(mask, shape, create_graph);
                    self.accumulate(&mut adj, a, g.mul(&mask));
                }
                Op::Abs(a) => {
                    let (value, shape) = self.node_value(a);
                    let sign: Vec<f64> = value
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let sign = self.lift(sign, shape, create_graph);
                    self.accumulate(&mut adj, a, g.mul(&sign));
                }
                Op::Sum(a) => {
                    let (_, shape) = self.node_value(a);
                    let len: usize = shape.iter().product();
                    let ones = self.lift(vec![1.0; len], shape, create_graph);
                    self.accumulate(&mut adj, a, ones.mul(&g));
                }
                Op::Reshape(a) => {
                    let shape = self.node_shape(a);
                    self.accumulate(&mut adj, a, g.reshape(shape));
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut adj, a, g.transpose());
                }
                Op::MatMul(a, b) => {
                    let ha = self.handle(a, create_graph);
                    let hb = self.handle(b, create_graph);
                    self.accumulate(&mut adj, a, g.matmul(&hb.transpose()));
                    self.accumulate(&mut adj, b, ha.transpose().matmul(&g));
                }
                Op::Gather(a, idx) => {
                    let (value, shape) = self.node_value(a);
                    let contrib = g.flatten().scatter(idx, value.len());
                    self.accumulate(&mut adj, a, contrib.reshape(shape));
                }
                Op::Scatter(a, idx) => {
                    let shape = self.node_shape(a);
                    let contrib = g.flatten().gather(idx);
                    self.accumulate(&mut adj, a, contrib.reshape(shape));
                }
            }
        }

        let grads = wrt_ids
            .into_iter()
            .map(|id| {
                if id < adj.len() {
                    if let Some(t) = adj[id].clone() {
                        return t;
                    }
                }
                let shape = self.node_shape(id);
                let len: usize = shape.iter().product();
                self.lift(vec![0.0; len], shape, create_graph)
            })
            .collect();
        Ok(grads)
    }
}

/// Re-attaches `inputs` as leaves on a fresh tape, runs `f`, and validates
/// every recorded intermediate for finiteness.
pub fn record<F>(inputs: &[Tensor], f: F) -> Result<(Tensor, Tape)>
where
    F: FnOnce(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let vars: Vec<Tensor> = inputs
        .iter()
        .map(|t| tape.var(t.data().to_vec(), t.shape().to_vec()))
        .collect();
    let out = f(&tape, &vars)?;
    tape.check_finite()?;
    Ok((out, tape))
}
