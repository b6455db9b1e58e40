use super::{Buffer, Tape, Tensor, Var};

/// Named trainable tensor with a persistent gradient buffer.
///
/// A forward pass binds the value onto a tape as a leaf (sharing the
/// payload); after backward the leaf gradient is folded into `grad` with
/// [`Param::absorb`].
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Option<Buffer>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut [f64] {
        self.value.data_mut()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn bind(&self, tape: &Tape) -> Var {
        tape.leaf(self.value.clone())
    }

    /// `grad += scale * leaf.grad`
    pub fn absorb(&mut self, leaf: &Var, scale: f64) {
        let n = self.value.numel();
        leaf.with_grad(|g| {
            let Some(g) = g else { return };
            let acc = self.grad.get_or_insert_with(|| Buffer::zeros(n));
            acc.iter_mut().zip(g).for_each(|(a, g)| *a += scale * g);
        });
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Plain gradient descent step; clears the gradient. Returns whether any
    /// entry moved.
    pub fn sgd_step(&mut self, lr: f64) -> bool {
        let Some(g) = self.grad.take() else {
            return false;
        };
        if g.iter().all(|v| *v == 0.0) {
            return false;
        }
        let mut moved = false;
        for (p, g) in self.value.data_mut().iter_mut().zip(g.iter()) {
            let next = *p - lr * g;
            moved |= next != *p;
            *p = next;
        }
        moved
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&mut self) -> Option<Buffer> {
        self.grad.take()
    }
}
