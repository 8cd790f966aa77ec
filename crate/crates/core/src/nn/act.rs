//! Elementwise activations with closed-form derivatives.

use ndarray::{ArrayD, ArrayViewD};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

/// d/dx of [gelu].
pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_forward(x: &ArrayViewD<f64>) -> ArrayD<f64> {
    x.mapv(gelu)
}

/// dx = dy * gelu'(x); needs the pre-activation input.
pub fn gelu_backward(dy: &ArrayViewD<f64>, x: &ArrayViewD<f64>) -> ArrayD<f64> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(x, |d, &xi| *d *= gelu_grad(xi));
    dx
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn leaky_forward(x: &ArrayViewD<f64>) -> ArrayD<f64> {
    x.mapv(leaky_relu)
}

pub fn leaky_backward(dy: &ArrayViewD<f64>, x: &ArrayViewD<f64>) -> ArrayD<f64> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(x, |d, &xi| *d *= leaky_relu_grad(xi));
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        // gelu(1) under the tanh approximation.
        assert!((gelu(1.0) - 0.841192).abs() < 1e-6);
        assert!((gelu(-1.0) - (-0.158808)).abs() < 1e-6);
        // Large inputs saturate to identity / zero.
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        assert!(gelu(-10.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_grad_matches_fd() {
        let h = 1e-6;
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.1, 0.5, 1.0, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "at x={x}");
        }
    }

    #[test]
    fn leaky_relu_slope() {
        assert_eq!(leaky_relu(2.0), 2.0);
        assert_eq!(leaky_relu(-2.0), -0.02);
        assert_eq!(leaky_relu_grad(3.0), 1.0);
        assert_eq!(leaky_relu_grad(-3.0), 0.01);
    }
}
