//! Hand-rolled NN primitives with explicit forward/backward passes.
//!
//! Everything runs in f64 with fixed reduction orders, so training is
//! bitwise reproducible and analytic gradients can be validated against
//! central finite differences. Layers return a cache from `forward` that
//! `backward` consumes; parameter gradients accumulate into [`Param::grad`]
//! until explicitly cleared.

pub mod act;
pub mod attention;
pub mod block;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod norm;

use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One learnable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn from_value(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::from_value(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Param::from_value(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// N(0, std^2) init; draws in row-major element order.
    pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite");
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng));
        Param::from_value(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        self.value.view().into_dimensionality::<Ix2>().expect("2d param")
    }

    /// 2D view of value with the given logical shape (for conv kernels).
    pub fn value_as2(&self, rows: usize, cols: usize) -> ndarray::CowArray<'_, f64, Ix2> {
        self.value.to_shape((rows, cols)).expect("reshape param value")
    }

    pub fn grad_as2_mut(&mut self, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
        self.grad
            .view_mut()
            .into_shape_with_order((rows, cols))
            .expect("reshape param grad")
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.len() == 0
    }
}

/// Callback type for parameter traversal. Traversal order is fixed by
/// construction, giving every parameter a stable canonical name.
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Param) + 'a;

pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor);
}

/// `prefix.child`, or just `child` at the root.
pub fn join(prefix: &str, child: &str) -> String {
    if prefix.is_empty() {
        child.to_string()
    } else {
        format!("{prefix}.{child}")
    }
}

/// Collect (name, grad clone) for every parameter.
pub fn collect_grads<M: Module>(m: &mut M) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |name, p| out.push((name.to_string(), p.grad.clone())));
    out
}

pub fn zero_grads<M: Module + ?Sized>(m: &mut M) {
    m.visit_params("", &mut |_, p| p.zero_grad());
}

pub fn param_count<M: Module>(m: &mut M) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, p| n += p.len());
    n
}

/// Row-wise softmax in place (stable: max-subtracted).
pub fn softmax_rows(x: &mut ndarray::Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward through row-wise softmax: given dL/dy and y = softmax(x),
/// dL/dx = (dy - sum(dy*y)) * y per row.
pub fn softmax_rows_backward(
    dy: &ndarray::Array2<f64>,
    y: &ndarray::Array2<f64>,
) -> ndarray::Array2<f64> {
    let mut dx = dy.clone();
    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
        for (d, y) in drow.iter_mut().zip(yrow.iter()) {
            *d = (*d - dot) * y;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_normalizes() {
        let mut x = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        // Monotone: bigger logit, bigger prob.
        assert!(x[[0, 2]] > x[[0, 1]] && x[[0, 1]] > x[[0, 0]]);
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let x0 = array![[0.3, -0.7, 1.2, 0.1]];
        let target = array![[0.1, 0.2, 0.3, 0.4]];
        // loss = sum(softmax(x) * target)
        let loss = |x: &ndarray::Array2<f64>| {
            let mut y = x.clone();
            softmax_rows(&mut y);
            (y * &target).sum()
        };
        let mut y = x0.clone();
        softmax_rows(&mut y);
        let dx = softmax_rows_backward(&target, &y);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x0.clone();
            xp[[0, i]] += h;
            let mut xm = x0.clone();
            xm[[0, i]] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[[0, i]]).abs() < 1e-8, "i={i}: {fd} vs {}", dx[[0, i]]);
        }
    }

    #[test]
    fn param_normal_is_deterministic() {
        let mut r1 = crate::rng::seeded(1, 0);
        let mut r2 = crate::rng::seeded(1, 0);
        let a = Param::normal(&[3, 4], 0.02, &mut r1);
        let b = Param::normal(&[3, 4], 0.02, &mut r2);
        assert_eq!(a.value, b.value);
        assert!(a.grad.iter().all(|&g| g == 0.0));
    }
}
