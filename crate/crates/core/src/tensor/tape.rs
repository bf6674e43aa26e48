use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identity of a value within one tape's computation record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

pub(crate) struct NodeEntry<S: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Arc<Vec<S>>,
    pub(crate) requires_grad: bool,
    /// False for leaves (vars and constants), true for op outputs.
    produced: bool,
}

struct RecordEntry<S: Scalar> {
    inputs: Vec<NodeId>,
    output: NodeId,
    rule: Box<dyn BackwardRule<S>>,
}

struct TapeInner<S: Scalar> {
    nodes: Vec<NodeEntry<S>>,
    records: Vec<RecordEntry<S>>,
    /// Persistent per-leaf gradient accumulators, parallel to `nodes`.
    grads: Vec<Option<Vec<S>>>,
}

/// Record of operations for one reverse-mode differentiation context.
/// Cheap to clone (shared handle); not Send — a tape stays on one thread.
pub struct Tape<S: Scalar>(Rc<RefCell<TapeInner<S>>>);

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape(Rc::clone(&self.0))
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            nodes: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
        })))
    }

    pub(crate) fn same_tape(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Registers a gradient-tracked leaf holding the same values as `t`.
    pub fn var(&self, t: &Tensor<S>) -> Tensor<S> {
        let id = self.push_node(t.shape().to_vec(), t.storage(), true, false);
        Tensor::from_parts(t.shape().to_vec(), t.storage(), Some((self.clone(), id)))
    }

    /// Registers an untracked value so backward rules can read it.
    pub(crate) fn constant(&self, t: &Tensor<S>) -> NodeId {
        self.push_node(t.shape().to_vec(), t.storage(), false, false)
    }

    pub(crate) fn output(&self, shape: Vec<usize>, value: Arc<Vec<S>>) -> NodeId {
        self.push_node(shape, value, true, true)
    }

    fn push_node(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<S>>,
        requires_grad: bool,
        produced: bool,
    ) -> NodeId {
        let mut inner = self.0.borrow_mut();
        let id = NodeId(inner.nodes.len());
        inner.nodes.push(NodeEntry {
            shape,
            value,
            requires_grad,
            produced,
        });
        inner.grads.push(None);
        id
    }

    pub(crate) fn record(
        &self,
        inputs: Vec<NodeId>,
        output: NodeId,
        rule: Box<dyn BackwardRule<S>>,
    ) {
        self.0.borrow_mut().records.push(RecordEntry {
            inputs,
            output,
            rule,
        });
    }

    pub fn num_records(&self) -> usize {
        self.0.borrow().records.len()
    }

    /// Propagates d(root)/d(node) to every tracked leaf, accumulating into
    /// any gradients already present from earlier backward calls.
    pub fn backward(&self, root: &Tensor<S>) -> Result<()> {
        let root_id = match &root.track {
            Some((tape, id)) if self.same_tape(tape) => *id,
            Some(_) => {
                return Err(Error::invalid("backward", "root tracked on a different tape"))
            }
            None => return Err(Error::invalid("backward", "root is not tracked on the tape")),
        };
        if root.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", root.shape()),
            ));
        }

        let inner = &mut *self.0.borrow_mut();
        let mut pass: Vec<Option<Vec<S>>> = inner.nodes.iter().map(|_| None).collect();
        pass[root_id.0] = Some(vec![S::one()]);

        let TapeInner { nodes, records, grads } = inner;
        for rec in records.iter().rev() {
            let Some(out_grad) = pass[rec.output.0].take() else {
                continue;
            };
            let out_value = Arc::clone(&nodes[rec.output.0].value);
            let mut ctx = BwdCtx {
                nodes,
                inputs: &rec.inputs,
                out_grad: &out_grad,
                out_value: &out_value,
                pass: &mut pass,
            };
            rec.rule.backward(&mut ctx);
        }

        for (i, node) in nodes.iter().enumerate() {
            if node.produced || !node.requires_grad {
                continue;
            }
            if let Some(g) = pass[i].take() {
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g.iter()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, t: &Tensor<S>) -> Option<Tensor<S>> {
        let (tape, id) = t.track.as_ref()?;
        if !self.same_tape(tape) {
            return None;
        }
        let inner = self.0.borrow();
        inner.grads[id.0].as_ref().map(|g| {
            Tensor::from_parts(inner.nodes[id.0].shape.clone(), Arc::new(g.clone()), None)
        })
    }

    pub fn zero_grads(&self) {
        for slot in self.0.borrow_mut().grads.iter_mut() {
            *slot = None;
        }
    }
}

/// Reverse rule for one recorded operation.
pub(crate) trait BackwardRule<S: Scalar> {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>);
}

/// View handed to backward rules: the output gradient plus read access to
/// recorded values and write access to the in-flight gradient buffers.
pub(crate) struct BwdCtx<'a, S: Scalar> {
    nodes: &'a [NodeEntry<S>],
    inputs: &'a [NodeId],
    pub(crate) out_grad: &'a [S],
    pub(crate) out_value: &'a [S],
    pass: &'a mut [Option<Vec<S>>],
}

impl<'a, S: Scalar> BwdCtx<'a, S> {
    pub(crate) fn input_value(&self, i: usize) -> &[S] {
        &self.nodes[self.inputs[i].0].value
    }

    pub(crate) fn input_shape(&self, i: usize) -> &[usize] {
        &self.nodes[self.inputs[i].0].shape
    }

    pub(crate) fn needs(&self, i: usize) -> bool {
        self.nodes[self.inputs[i].0].requires_grad
    }

    /// Adds `g` into input `i`'s gradient; takes ownership to avoid a copy
    /// when this is the first contribution.
    pub(crate) fn add_grad(&mut self, i: usize, g: Vec<S>) {
        let slot = &mut self.pass[self.inputs[i].0];
        match slot {
            Some(acc) => {
                debug_assert_eq!(acc.len(), g.len());
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    *a += *b;
                }
            }
            None => *slot = Some(g),
        }
    }
}
