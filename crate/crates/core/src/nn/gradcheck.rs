//! Finite-difference gradient checking against analytic backprop.
//!
//! Central differences with step h; error is |a - f| / max(1e-6, |a|, |f|)
//! so near-zero gradients compare on an absolute scale.

use super::{Module, Param};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

fn set_param(module: &mut dyn Module, name: &str, index: usize, value: f64) {
    module.visit_params("", &mut |n: &str, p: &mut Param| {
        if n == name {
            p.value.as_slice_mut().expect("contiguous param")[index] = value;
        }
    });
}

fn get_param(module: &mut dyn Module, name: &str, index: usize) -> f64 {
    let mut out = f64::NAN;
    module.visit_params("", &mut |n: &str, p: &mut Param| {
        if n == name {
            out = p.value.as_slice().expect("contiguous param")[index];
        }
    });
    out
}

/// Check analytic parameter gradients of `module` against central
/// differences of `loss`. The caller must have already run backward so that
/// `grad` holds the analytic gradients for exactly one evaluation of `loss`.
///
/// `stride` subsamples parameters (1 = every entry); the subsample always
/// includes each tensor's first and last entry.
pub fn check_param_grads<M, F>(
    module: &mut M,
    loss: &mut F,
    h: f64,
    stride: usize,
) -> GradCheckReport
where
    M: Module,
    F: FnMut(&mut M) -> f64,
{
    let mut names: Vec<(String, usize)> = Vec::new();
    module.visit_params("", &mut |n: &str, p: &mut Param| {
        names.push((n.to_string(), p.len()));
    });
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (name, len) in names {
        let mut indices: Vec<usize> = (0..len).step_by(stride.max(1)).collect();
        if !indices.contains(&(len - 1)) {
            indices.push(len - 1);
        }
        // Snapshot analytic grads for this tensor.
        let mut analytic = Vec::new();
        module.visit_params("", &mut |n: &str, p: &mut Param| {
            if n == name {
                analytic = p.grad.as_slice().expect("contiguous grad").to_vec();
            }
        });
        for &idx in &indices {
            let orig = get_param(module, &name, idx);
            set_param(module, &name, idx, orig + h);
            let lp = loss(module);
            set_param(module, &name, idx, orig - h);
            let lm = loss(module);
            set_param(module, &name, idx, orig);
            let fd = (lp - lm) / (2.0 * h);
            let e = rel_err(analytic[idx], fd);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    report
}

/// Check an analytic input gradient against central differences of a loss
/// over the flattened input.
pub fn check_input_grad<F>(
    input: &mut [f64],
    analytic: &[f64],
    loss: &mut F,
    h: f64,
    stride: usize,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(input.len(), analytic.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: "input".to_string(),
        worst_index: 0,
        checked: 0,
    };
    let len = input.len();
    let mut indices: Vec<usize> = (0..len).step_by(stride.max(1)).collect();
    if !indices.contains(&(len - 1)) {
        indices.push(len - 1);
    }
    for idx in indices {
        let orig = input[idx];
        input[idx] = orig + h;
        let lp = loss(input);
        input[idx] = orig - h;
        let lm = loss(input);
        input[idx] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let e = rel_err(analytic[idx], fd);
        report.checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = idx;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::linear::Linear;
    use crate::nn::zero_grads;
    use ndarray::array;

    #[test]
    fn linear_passes_gradcheck() {
        let mut rng = crate::rng::seeded(41, 0);
        let mut lin = Linear::new(3, 2, 0.5, &mut rng);
        let x = array![[0.4, -1.2, 0.9], [2.2, 0.3, -0.6]];
        let (y, cache) = lin.forward(&x);
        let dy = y.mapv(|v| v); // loss = 0.5 sum y^2
        lin.backward(&dy, &cache);
        let xc = x.clone();
        let mut loss = |m: &mut Linear| {
            let (y, _) = m.forward(&xc);
            y.mapv(|v| v * v * 0.5).sum()
        };
        let report = check_param_grads(&mut lin, &mut loss, DEFAULT_STEP, 1);
        assert!(report.passes(DEFAULT_TOL), "max err {}", report.max_rel_err);
        assert!(report.checked >= 8);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut rng = crate::rng::seeded(42, 0);
        let mut lin = Linear::new(2, 2, 0.5, &mut rng);
        let x = array![[1.0, -0.5]];
        let (y, cache) = lin.forward(&x);
        lin.backward(&y.clone(), &cache);
        // Corrupt one gradient entry.
        zero_grads(&mut lin);
        lin.w.grad.as_slice_mut().unwrap()[0] = 123.0;
        let xc = x.clone();
        let mut loss = |m: &mut Linear| {
            let (y, _) = m.forward(&xc);
            y.mapv(|v| v * v * 0.5).sum()
        };
        let report = check_param_grads(&mut lin, &mut loss, DEFAULT_STEP, 1);
        assert!(!report.passes(DEFAULT_TOL));
        assert_eq!(report.worst_param, "w");
    }

    #[test]
    fn input_gradcheck_works() {
        let mut x: Vec<f64> = vec![0.5, -0.3, 1.1];
        // loss = sum sin(x); grad = cos(x)
        let analytic: Vec<f64> = x.iter().map(|v: &f64| v.cos()).collect();
        let mut loss = |x: &[f64]| x.iter().map(|v| v.sin()).sum::<f64>();
        let report = check_input_grad(&mut x, &analytic, &mut loss, 1e-5, 1);
        assert!(report.passes(1e-6));
    }
}
