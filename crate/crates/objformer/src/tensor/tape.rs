//! Recording tape for reverse-mode differentiation.
//!
//! Every forward op appends a value slot and, when any input participates in
//! gradient computation, a backward rule. `backward` walks the slots in
//! reverse creation order, which is a topological order by construction, and
//! visits each rule exactly once.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

pub(crate) struct Slot<E> {
    pub data: Vec<E>,
    pub shape: Vec<usize>,
}

type BackwardFn<E> = Box<dyn Fn(&[E], &Tape<E>, &mut Grads<E>)>;

pub struct Tape<E: Element> {
    pub(crate) slots: Vec<Slot<E>>,
    nodes: Vec<Option<BackwardFn<E>>>,
    needs_grad: Vec<bool>,
}

/// Per-id gradient buffers produced by [`Tape::backward`].
pub struct Grads<E> {
    bufs: Vec<Option<Vec<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, id: TensorId) -> Option<&[E]> {
        self.bufs.get(id.0).and_then(|b| b.as_deref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Vec<E>> {
        self.bufs.get_mut(id.0).and_then(|b| b.take())
    }

    /// Accumulate into the buffer for `id`, creating it zero-filled on first use.
    pub(crate) fn accum(&mut self, id: TensorId, numel: usize, add: impl FnOnce(&mut [E])) {
        let buf = self.bufs[id.0].get_or_insert_with(|| vec![E::zero(); numel]);
        add(buf);
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { slots: Vec::new(), nodes: Vec::new(), needs_grad: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<E>,
        shape: Vec<usize>,
        needs_grad: bool,
        node: Option<BackwardFn<E>>,
    ) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = TensorId(self.slots.len());
        self.slots.push(Slot { data, shape });
        self.nodes.push(if needs_grad { node } else { None });
        self.needs_grad.push(needs_grad);
        id
    }

    /// Insert a value that does not participate in differentiation.
    pub fn constant(&mut self, data: Vec<E>, shape: &[usize]) -> Result<TensorId> {
        check_numel("Tape::constant", &data, shape)?;
        Ok(self.push(data, shape.to_vec(), false, None))
    }

    /// Insert a leaf that accumulates a gradient during backward.
    pub fn leaf(&mut self, data: Vec<E>, shape: &[usize]) -> Result<TensorId> {
        check_numel("Tape::leaf", &data, shape)?;
        Ok(self.push(data, shape.to_vec(), true, None))
    }

    /// Bind an owned tensor onto the tape, honoring its `requires_grad` flag.
    pub fn bind(&mut self, t: &Tensor<E>) -> TensorId {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad(), None)
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.slots[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.slots[id.0].data.len()
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.needs_grad[id.0]
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> E {
        debug_assert_eq!(self.numel(id), 1);
        self.slots[id.0].data[0]
    }

    pub(crate) fn record(
        &mut self,
        data: Vec<E>,
        shape: Vec<usize>,
        inputs: &[TensorId],
        node: BackwardFn<E>,
    ) -> TensorId {
        let needs = inputs.iter().any(|i| self.needs_grad[i.0]);
        self.push(data, shape, needs, Some(node))
    }

    /// Swap in a backward rule that needs to refer to the op's own output id.
    pub(crate) fn replace_node(&mut self, id: TensorId, node: BackwardFn<E>) {
        if self.needs_grad[id.0] {
            self.nodes[id.0] = Some(node);
        }
    }

    /// Reverse sweep from a scalar loss. Returns one gradient buffer per
    /// participating tensor; identical seeds give bit-identical results.
    pub fn backward(&self, loss: TensorId) -> Result<Grads<E>> {
        if self.numel(loss) != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads = Grads { bufs: (0..self.slots.len()).map(|_| None).collect() };
        grads.bufs[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].is_none() {
                continue;
            }
            let Some(g) = grads.bufs[i].take() else { continue };
            if let Some(node) = &self.nodes[i] {
                node(&g, self, &mut grads);
            }
            grads.bufs[i] = Some(g);
        }
        Ok(grads)
    }
}

pub(crate) fn check_numel<E>(op: &'static str, data: &[E], shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if data.len() != numel {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} implies {numel} values, got {}", data.len()),
        ));
    }
    Ok(())
}
