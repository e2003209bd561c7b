use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `backward` receives the values of the op's inputs, its own output value and
/// the gradient flowing into that output, and returns one optional gradient per
/// input (in input order). `None` means "no contribution".
pub trait Backward<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    inputs: Vec<NodeId>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Constants captured by stop-gradient sites (quantization noise, clamp
/// offsets, calibration factors, mode masks) plus the sign patterns of kinked
/// ops. Replaying a log re-evaluates a graph as the function its analytic
/// gradient actually differentiates, which is what finite-difference checks need.
#[derive(Clone, Debug, Default)]
pub struct StopGradLog<T> {
    constants: Vec<Vec<T>>,
    kinks: Vec<Vec<i32>>,
}

impl<T> StopGradLog<T> {
    pub fn is_empty(&self) -> bool {
        self.constants.is_empty() && self.kinks.is_empty()
    }
}

enum StopMode<T> {
    Live,
    Record(StopGradLog<T>),
    Replay {
        log: StopGradLog<T>,
        constant: usize,
        kink: usize,
        crossed: bool,
        /// Follow the recorded branch patterns instead of reporting crossings.
        freeze: bool,
    },
}

/// Recorded computation graph with reverse-mode accumulation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    stop: StopMode<T>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), stop: StopMode::Live }
    }

    /// Tape that records every stop-gradient constant it produces.
    pub fn recording() -> Self {
        Tape { nodes: Vec::new(), stop: StopMode::Record(StopGradLog::default()) }
    }

    /// Tape that reuses the constants of an earlier recording, in order.
    pub fn replaying(log: StopGradLog<T>) -> Self {
        Tape {
            nodes: Vec::new(),
            stop: StopMode::Replay { log, constant: 0, kink: 0, crossed: false, freeze: false },
        }
    }

    /// Like [`Tape::replaying`], but piecewise ops also reuse the recorded
    /// branch patterns, so the graph evaluates the smooth branch the analytic
    /// gradient belongs to.
    pub fn replaying_frozen(log: StopGradLog<T>) -> Self {
        Tape {
            nodes: Vec::new(),
            stop: StopMode::Replay { log, constant: 0, kink: 0, crossed: false, freeze: true },
        }
    }

    /// Recorded constants (empty unless built with [`Tape::recording`]).
    pub fn take_log(&mut self) -> StopGradLog<T> {
        match std::mem::replace(&mut self.stop, StopMode::Live) {
            StopMode::Record(log) | StopMode::Replay { log, .. } => log,
            StopMode::Live => StopGradLog::default(),
        }
    }

    /// Whether branch patterns are recorded or checked at all.
    pub(crate) fn tracks_kinks(&self) -> bool {
        !matches!(self.stop, StopMode::Live)
    }

    pub(crate) fn is_replaying(&self) -> bool {
        matches!(self.stop, StopMode::Replay { .. })
    }

    /// True when a replayed evaluation landed on the other side of a kink
    /// than the recorded one.
    pub fn kink_crossed(&self) -> bool {
        matches!(self.stop, StopMode::Replay { crossed: true, .. })
    }

    /// Route a stop-gradient constant through the record/replay log.
    pub fn stop_gradient(&mut self, fresh: Vec<T>) -> Vec<T> {
        match &mut self.stop {
            StopMode::Live => fresh,
            StopMode::Record(log) => {
                log.constants.push(fresh.clone());
                fresh
            }
            StopMode::Replay { log, constant, .. } => {
                let recorded = log
                    .constants
                    .get(*constant)
                    .filter(|c| c.len() == fresh.len())
                    .cloned()
                    .expect("replayed graph diverged from the recorded one");
                *constant += 1;
                recorded
            }
        }
    }

    /// Report the branch pattern of a piecewise op (e.g. ReLU signs, floor
    /// indices). Returns the recorded pattern when the op must follow it
    /// (frozen replay), `None` when the op should use its own.
    pub fn note_kinks(&mut self, pattern: impl FnOnce() -> Vec<i32>) -> Option<Vec<i32>> {
        match &mut self.stop {
            StopMode::Live => None,
            StopMode::Record(log) => {
                log.kinks.push(pattern());
                None
            }
            StopMode::Replay { log, kink, crossed, freeze, .. } => {
                let i = *kink;
                *kink += 1;
                if *freeze {
                    let recorded = log.kinks.get(i).cloned().expect("replayed graph diverged from the recorded one");
                    return Some(recorded);
                }
                if log.kinks.get(i) != Some(&pattern()) {
                    *crossed = true;
                }
                None
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value, Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn scalar_constant(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Record an op. The node requires a gradient iff any input does.
    pub fn push_op(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<NodeId>,
        op: impl Backward<T> + 'static,
    ) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.push_node(value, inputs, op, requires_grad)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<NodeId>,
        op: Option<Box<dyn Backward<T>>>,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node { value, grad: None, inputs, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient, or `None` if nothing reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient as a tensor, zeros if nothing reached the node.
    pub fn grad_tensor(&self, id: NodeId) -> Tensor<T> {
        let shape = self.shape(id);
        match self.grad(id) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Accumulate d(root)/d(node) into every reachable node's gradient.
    ///
    /// Contributions are propagated in reverse tape order and summed in input
    /// order, so repeated runs are bit-identical. Gradients add onto whatever
    /// earlier calls left behind.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let numel = self.nodes[root.0].value.len();
        if numel != 1 {
            return Err(Error::NonScalarRoot(numel));
        }
        let mut local: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        local[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(grad) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let contributions = op.backward(&inputs, &node.value, &grad);
                debug_assert_eq!(contributions.len(), node.inputs.len(), "{}", op.name());
                for (input, contribution) in node.inputs.iter().zip(contributions) {
                    let Some(c) = contribution else { continue };
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(c.len(), self.nodes[input.0].value.len(), "{}", op.name());
                    match &mut local[input.0] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            local[i] = Some(grad);
        }

        for (node, g) in self.nodes.iter_mut().zip(local) {
            let Some(g) = g else { continue };
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
