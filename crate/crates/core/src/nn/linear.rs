//! Dense layer: y = x W^T + b.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use super::{join, Module, Param, ParamVisitor};

#[derive(Debug, Clone)]
pub struct Linear {
    /// (out, in)
    pub w: Param,
    /// (out)
    pub b: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::normal(&[out_dim, in_dim], std, rng),
            b: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// x: (rows, in) -> (rows, out).
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        debug_assert_eq!(x.ncols(), self.in_dim);
        let mut y = x.dot(&self.w.view2().t());
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y += &b;
        (y, LinearCache { x: x.clone() })
    }

    /// Accumulates dW, db; returns dx.
    pub fn backward(&mut self, dy: &Array2<f64>, cache: &LinearCache) -> Array2<f64> {
        let dw = dy.t().dot(&cache.x);
        let mut gw = self.w.grad_as2_mut(self.out_dim, self.in_dim);
        gw += &dw;
        let db: Array1<f64> = dy.sum_axis(ndarray::Axis(0));
        let mut gb = self
            .b
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        gb += &db;
        dy.dot(&self.w.view2())
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_matches_hand_computation() {
        let mut rng = crate::rng::seeded(0, 0);
        let mut lin = Linear::new(2, 3, 0.0, &mut rng); // zero weights
        lin.w.value = array![[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]].into_dyn();
        lin.b.value = array![0.1, 0.2, 0.3].into_dyn();
        let x = array![[1.0, 1.0], [2.0, -1.0]];
        let (y, _) = lin.forward(&x);
        assert_eq!(y, array![[3.1, -0.8, 3.8], [0.1, 1.2, 5.8]]);
    }

    #[test]
    fn backward_matches_fd() {
        let mut rng = crate::rng::seeded(7, 0);
        let mut lin = Linear::new(3, 2, 0.5, &mut rng);
        let x = array![[0.2, -0.4, 1.0], [0.9, 0.1, -0.3]];
        // loss = sum(y^2)
        let (y, cache) = lin.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = lin.backward(&dy, &cache);

        let h = 1e-6;
        // dx check
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let lp: f64 = lin.forward(&xp).0.mapv(|v| v * v).sum();
                let lm: f64 = lin.forward(&xm).0.mapv(|v| v * v).sum();
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - dx[[r, c]]).abs() < 1e-6);
            }
        }
        // dW check
        for i in 0..2 {
            for j in 0..3 {
                let orig = lin.w.value[[i, j]];
                lin.w.value[[i, j]] = orig + h;
                let lp: f64 = lin.forward(&x).0.mapv(|v| v * v).sum();
                lin.w.value[[i, j]] = orig - h;
                let lm: f64 = lin.forward(&x).0.mapv(|v| v * v).sum();
                lin.w.value[[i, j]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - lin.w.grad[[i, j]]).abs() < 1e-6);
            }
        }
    }
}
