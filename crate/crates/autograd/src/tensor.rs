//! Reference-counted tensors with a dynamically recorded backward graph.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Gradient rule of a recorded operation.
///
/// `backward` receives the operation inputs, the forward output and the
/// gradient flowing into that output; it returns one entry per input, `None`
/// for inputs that do not take part in differentiation.
pub(crate) trait BackwardOp: Send + Sync {
    fn backward(&self, inputs: &[Tensor], out: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>>;
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    inputs: Vec<Tensor>,
    op: Option<Box<dyn BackwardOp>>,
}

/// A dense row-major `f32` tensor.
///
/// Cloning is cheap. A tensor produced from at least one input that requires
/// gradients records its inputs so that [`Tensor::backward`] can reach them.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f32>>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            inputs: Vec::new(),
            op: None,
        }))
    }

    /// Constant tensor (never receives gradients).
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::build(shape.to_vec(), Arc::new(data), false))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn variable(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::build(shape.to_vec(), Arc::new(data), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), Arc::new(vec![0.0; n]), false)
    }

    pub fn full(value: f32, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), Arc::new(vec![value; n]), false)
    }

    pub fn scalar(value: f32) -> Self {
        Self::build(Vec::new(), Arc::new(vec![value]), false)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: &[&Tensor],
        op: impl BackwardOp + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        if !requires_grad {
            return Self::build(shape, Arc::new(data), false);
        }
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            op: Some(Box::new(op)),
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn elem_count(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.0.shape
            ))),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), false)
    }

    /// Dimensions of a rank-4 NCHW tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::Shape(format!("expected NCHW tensor, got {s:?}"))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_len(self.data(), shape)?;
        let in_shape = self.0.shape.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            &[self],
            Reshape { _in_shape: in_shape },
        ))
    }

    /// Reverse-mode differentiation of a scalar tensor.
    ///
    /// Returns the gradients of every leaf variable reachable from `self`.
    pub fn backward(&self) -> Result<Gradients> {
        if self.elem_count() != 1 {
            return Err(Error::Shape(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f32>> = HashMap::new();
        let mut leaves = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    leaves.insert(node.id(), grad);
                }
                Some(op) => {
                    let input_grads = op.backward(&node.0.inputs, node, &grad);
                    for (input, g) in node.0.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    // Post-order DFS over the requires-grad subgraph, iterative to survive deep graphs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        if !self.requires_grad() {
            return order;
        }
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for input in &node.0.inputs {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }
}

fn check_len(data: &[f32], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!(
            "{} values do not fill shape {shape:?}",
            data.len()
        )));
    }
    Ok(())
}

struct Reshape {
    _in_shape: Vec<usize>,
}

impl BackwardOp for Reshape {
    fn backward(&self, _: &[Tensor], _: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(grad.to_vec())]
    }
}

/// Leaf gradients produced by [`Tensor::backward`], keyed by tensor id.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<usize, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
