use std::cell::RefCell;

use super::{ParameterStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a node on the tape that produced a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Given the upstream gradient and a per-input "needs gradient" mask, returns
/// one optional gradient per input.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>>>;

struct Node<S> {
    len: usize,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<S>>,
    param: Option<(String, String)>,
}

/// Linear record of a forward pass. Confined to the thread that created it.
pub struct Tape<S: Scalar = f32> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `value` as a trainable leaf owned by store `tag` under `name`.
    pub fn param(&self, tag: &str, name: &str, value: &Tensor<S>) -> Tensor<S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            len: value.len(),
            parents: Vec::new(),
            backward: None,
            param: Some((tag.to_string(), name.to_string())),
        });
        value.detach().with_node(NodeId(nodes.len() - 1))
    }

    /// Untagged leaf, for gradient checks against arbitrary inputs.
    pub fn leaf(&self, value: &Tensor<S>) -> Tensor<S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            len: value.len(),
            parents: Vec::new(),
            backward: None,
            param: None,
        });
        value.detach().with_node(NodeId(nodes.len() - 1))
    }

    pub(crate) fn push(&self, len: usize, parents: Vec<Option<usize>>, backward: BackwardFn<S>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            len,
            parents,
            backward: Some(backward),
            param: None,
        });
        NodeId(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`; returns, indexed by node, the
    /// gradient of every leaf the loss depends on.
    pub fn gradients(&self, loss: &Tensor<S>) -> Result<Vec<Option<Vec<S>>>> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node() else {
            return Ok(grads);
        };
        if root.0 >= nodes.len() {
            return Err(Error::Contract("loss was not recorded on this tape".into()));
        }
        grads[root.0] = Some(vec![S::one()]);
        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                let contributions = bw(&upstream, &needs);
                for (parent, contribution) in node.parents.iter().zip(contributions) {
                    let (Some(p), Some(g)) = (parent, contribution) else {
                        continue;
                    };
                    debug_assert_eq!(g.len(), nodes[*p].len);
                    match &mut grads[*p] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        slot => *slot = Some(g),
                    }
                }
            } else {
                // only leaf gradients are kept
                grads[idx] = Some(upstream);
            }
        }
        Ok(grads)
    }

    pub(crate) fn param_of(&self, node: usize) -> Option<(String, String)> {
        self.nodes.borrow()[node].param.clone()
    }
}

/// Backpropagates `loss` and accumulates into the gradient slots of `store`.
///
/// Parameters of `store` that never reached the tape keep a zero contribution.
pub fn backward<S: Scalar>(loss: &Tensor<S>, tape: &Tape<S>, store: &mut ParameterStore<S>) -> Result<()> {
    let grads = tape.gradients(loss)?;
    accumulate(tape, &grads, store);
    Ok(())
}

pub(crate) fn accumulate<S: Scalar>(tape: &Tape<S>, grads: &[Option<Vec<S>>], store: &mut ParameterStore<S>) {
    for (idx, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let Some((tag, name)) = tape.param_of(idx) else {
            continue;
        };
        if tag != store.tag() {
            continue;
        }
        if let Some(p) = store.get_mut(&name) {
            p.grad.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b);
        }
    }
}

/// Execution context for tensor operations.
#[derive(Clone, Copy)]
pub struct Ctx<'t, S: Scalar = f32> {
    tape: Option<&'t Tape<S>>,
}

impl<S: Scalar> Ctx<'static, S> {
    pub fn inference() -> Self {
        Ctx { tape: None }
    }
}

impl<'t, S: Scalar> Ctx<'t, S> {
    pub fn recording(tape: &'t Tape<S>) -> Self {
        Ctx { tape: Some(tape) }
    }

    pub fn tape(&self) -> Option<&'t Tape<S>> {
        self.tape
    }

    pub fn is_recording(&self) -> bool {
        self.tape.is_some()
    }

    /// Wraps an op result; records a node only if some input is tracked.
    pub(crate) fn record<F>(&self, shape: Vec<usize>, data: Vec<S>, inputs: &[&Tensor<S>], backward: F) -> Tensor<S>
    where
        F: Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>> + 'static,
    {
        let out = Tensor::raw(shape, data);
        let Some(tape) = self.tape else {
            return out;
        };
        if inputs.iter().all(|t| t.node().is_none()) {
            return out;
        }
        let parents = inputs.iter().map(|t| t.node().map(|n| n.0)).collect();
        let id = tape.push(out.len(), parents, Box::new(backward));
        out.with_node(id)
    }
}
