//! Named parameter traversal shared by checkpoints, optimizers and tape binding.

use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Visits every tensor of a parameter group under a stable dotted name.
///
/// `visit` and `visit_mut` must yield tensors in the same order that the
/// matching `bind` function records them on a [`Binder`].
pub trait Parameters<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

/// Records parameters on a tape in visit order.
pub struct Binder<'t, T: Scalar> {
    pub tape: &'t mut Tape<T>,
    vars: Vec<Var>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn new(tape: &'t mut Tape<T>) -> Self {
        Self {
            tape,
            vars: Vec::new(),
        }
    }

    pub fn bind(&mut self, t: &Tensor<T>) -> Var {
        let v = self.tape.leaf(t);
        self.vars.push(v);
        v
    }

    /// Bound variables in visit order.
    pub fn finish(self) -> Vec<Var> {
        self.vars
    }
}

pub fn count_where<T: Scalar, P: Parameters<T> + ?Sized>(p: &P, pred: impl Fn(&str, &Tensor<T>) -> bool) -> usize {
    let mut n = 0;
    p.visit(&mut |name, t| {
        if pred(name, t) {
            n += t.numel();
        }
    });
    n
}

pub fn names<T: Scalar, P: Parameters<T> + ?Sized>(p: &P) -> Vec<String> {
    let mut out = Vec::new();
    p.visit(&mut |name, _| out.push(name.to_string()));
    out
}
