use super::matrix::Matrix;

/// A value owning trainable tensors, visited in a fixed order.
///
/// The visit order defines the layout of gradients returned by
/// [`super::Graph::param_grads`] and of serialized checkpoints.
pub trait Parameterized {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix));

    fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        self.visit(&mut |m| out.push(m));
        out
    }

    fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |m| n += m.data().len());
        n
    }

    /// Plain gradient-descent step: `θ ← θ − lr·g` for each tensor.
    fn descend(&mut self, grads: &[Matrix], lr: f64) {
        let mut i = 0;
        self.visit_mut(&mut |m| {
            for (w, g) in m.data_mut().iter_mut().zip(grads[i].data()) {
                *w -= lr * g;
            }
            i += 1;
        });
    }
}

impl Parameterized for Matrix {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(self);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(self);
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        for item in self {
            item.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        for item in self {
            item.visit_mut(f);
        }
    }
}
