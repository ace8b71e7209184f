//! Dense tensor nodes for the define-by-run autodiff graph.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Rc`) to a graph node holding
//! an f64 value buffer, a same-shape gradient accumulator and a record of
//! the primitive that produced it. Graphs are rebuilt on every forward pass
//! and freed when the last handle drops; long-lived parameters are plain
//! buffers outside the graph that get bound to fresh leaf nodes per forward
//! (see `net::ParamBinding`).

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct OpRecord {
    pub op: Op,
    pub parents: Vec<Tensor>,
}

pub(crate) struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<f64>>,
    pub op: Option<OpRecord>,
    pub requires_grad: bool,
    pub detached: bool,
    pub id: u64,
}

/// Handle to one node of the computation graph.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<RefCell<Node>>);

impl Tensor {
    fn new_node(node: Node) -> Tensor {
        Tensor(Rc::new(RefCell::new(node)))
    }

    /// Constant (non-differentiable) tensor.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::invalid(
                "from_vec",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor::new_node(Node {
            data,
            shape: shape.to_vec(),
            grad: None,
            op: None,
            requires_grad: false,
            detached: false,
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        }))
    }

    /// Leaf variable that collects gradient during backward.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.0.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[1]).expect("scalar")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape).expect("zeros")
    }

    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        op: Op,
        parents: Vec<Tensor>,
        detached: bool,
    ) -> Tensor {
        let requires_grad = !detached && parents.iter().any(|p| p.requires_grad());
        Tensor::new_node(Node {
            data,
            shape,
            grad: None,
            op: Some(OpRecord { op, parents }),
            requires_grad,
            detached,
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn is_detached(&self) -> bool {
        self.0.borrow().detached
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.borrow().id
    }

    /// Borrow the value buffer.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |n| n.data.as_slice())
    }

    pub fn data_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.0.borrow();
        assert_eq!(n.data.len(), 1, "item() on tensor of shape {:?}", n.shape);
        n.data[0]
    }

    /// Accumulated gradient; zeros if backward never touched this node.
    pub fn grad(&self) -> Vec<f64> {
        let n = self.0.borrow();
        match &n.grad {
            Some(g) => g.clone(),
            None => vec![0.0; n.data.len()],
        }
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut n = self.0.borrow_mut();
        let len = n.data.len();
        debug_assert_eq!(delta.len(), len);
        let g = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.borrow().data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .field("detached", &n.detached)
            .finish()
    }
}
