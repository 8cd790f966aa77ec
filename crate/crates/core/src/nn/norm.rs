//! LayerNorm (over the channel axis) and InstanceNorm (per channel over
//! spatial positions). Same normalization math, different grouping.

use ndarray::{Array1, Array2, Array3, Axis};

use super::{join, Module, Param, ParamVisitor};

const EPS: f64 = 1e-5;

/// Normalize each 1D lane x to xhat = (x - mu) / sqrt(var + eps), writing
/// xhat over x; returns inv_std. Population variance.
fn normalize_lane(x: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + EPS).sqrt();
    for v in x.iter_mut() {
        *v = (*v - mu) * inv_std;
    }
    inv_std
}

/// Backward for one lane: given dy, xhat, inv_std and gamma, returns
/// dx into `dx`, and accumulates dgamma/dbeta.
fn lane_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: f64,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
    shared_affine: bool,
) {
    let n = dy.len() as f64;
    let mut mean_dyg = 0.0;
    let mut mean_dyg_xhat = 0.0;
    for i in 0..dy.len() {
        let g = if shared_affine { gamma[0] } else { gamma[i] };
        let dyg = dy[i] * g;
        mean_dyg += dyg;
        mean_dyg_xhat += dyg * xhat[i];
    }
    mean_dyg /= n;
    mean_dyg_xhat /= n;
    for i in 0..dy.len() {
        let g = if shared_affine { gamma[0] } else { gamma[i] };
        let dyg = dy[i] * g;
        dx[i] = inv_std * (dyg - mean_dyg - xhat[i] * mean_dyg_xhat);
        if shared_affine {
            dgamma[0] += dy[i] * xhat[i];
            dbeta[0] += dy[i];
        } else {
            dgamma[i] += dy[i] * xhat[i];
            dbeta[i] += dy[i];
        }
    }
}

// ============================================================================
// LayerNorm
// ============================================================================

/// Pre-norm transformer LayerNorm over the last axis of (rows, d) input.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: Param,
    pub b: Param,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm { g: Param::full(&[dim], 1.0), b: Param::zeros(&[dim]), dim }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        debug_assert_eq!(x.ncols(), self.dim);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            *s = normalize_lane(row.as_slice_mut().unwrap());
        }
        let g = self.g.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for i in 0..self.dim {
                row[i] = row[i] * g[i] + b[i];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, dy: &Array2<f64>, cache: &LayerNormCache) -> Array2<f64> {
        let mut dx = Array2::zeros(dy.raw_dim());
        let g = self.g.value.as_slice().unwrap().to_vec();
        let mut dg = vec![0.0; self.dim];
        let mut db = vec![0.0; self.dim];
        for (r, (dyr, xhr)) in dy.rows().into_iter().zip(cache.xhat.rows()).enumerate() {
            lane_backward(
                dyr.as_slice().unwrap(),
                xhr.as_slice().unwrap(),
                cache.inv_std[r],
                &g,
                &mut dg,
                &mut db,
                dx.row_mut(r).as_slice_mut().unwrap(),
                false,
            );
        }
        for i in 0..self.dim {
            self.g.grad[i] += dg[i];
            self.b.grad[i] += db[i];
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&join(prefix, "g"), &mut self.g);
        f(&join(prefix, "b"), &mut self.b);
    }
}

// ============================================================================
// InstanceNorm
// ============================================================================

/// Affine instance norm on (B, C, V) feature maps: each (b, c) lane is
/// normalized over its V spatial positions, then scaled by per-channel
/// gamma/beta.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub g: Param,
    pub b: Param,
    pub channels: usize,
}

pub struct InstanceNormCache {
    xhat: Array3<f64>,
    inv_std: Array2<f64>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        InstanceNorm { g: Param::full(&[channels], 1.0), b: Param::zeros(&[channels]), channels }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, InstanceNormCache) {
        let (bs, c, _v) = x.dim();
        debug_assert_eq!(c, self.channels);
        let mut xhat = x.clone();
        let mut inv_std = Array2::zeros((bs, c));
        for b in 0..bs {
            for ch in 0..c {
                let mut lane = xhat.index_axis_mut(Axis(0), b);
                let mut lane = lane.index_axis_mut(Axis(0), ch);
                inv_std[[b, ch]] = normalize_lane(lane.as_slice_mut().unwrap());
            }
        }
        let mut y = xhat.clone();
        for b in 0..bs {
            for ch in 0..c {
                let g = self.g.value[ch];
                let be = self.b.value[ch];
                for v in y.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), ch).iter_mut() {
                    *v = *v * g + be;
                }
            }
        }
        (y, InstanceNormCache { xhat, inv_std })
    }

    /// Recompute the affine output from the cached normalized tensor;
    /// cheaper than caching a second full-size array.
    pub fn affine_output(&self, cache: &InstanceNormCache) -> Array3<f64> {
        let (bs, c, _v) = cache.xhat.dim();
        let mut y = cache.xhat.clone();
        for b in 0..bs {
            for ch in 0..c {
                let g = self.g.value[ch];
                let be = self.b.value[ch];
                for v in y.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), ch).iter_mut() {
                    *v = *v * g + be;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array3<f64>, cache: &InstanceNormCache) -> Array3<f64> {
        let (bs, c, v) = dy.dim();
        let mut dx = Array3::zeros((bs, c, v));
        for b in 0..bs {
            for ch in 0..c {
                let dyr = dy.index_axis(Axis(0), b);
                let dyr = dyr.index_axis(Axis(0), ch);
                let xhr = cache.xhat.index_axis(Axis(0), b);
                let xhr = xhr.index_axis(Axis(0), ch);
                let gamma = [self.g.value[ch]];
                let mut dg = [0.0];
                let mut db = [0.0];
                let mut dxl = dx.index_axis_mut(Axis(0), b);
                let mut dxl = dxl.index_axis_mut(Axis(0), ch);
                lane_backward(
                    dyr.as_slice().unwrap(),
                    xhr.as_slice().unwrap(),
                    cache.inv_std[[b, ch]],
                    &gamma,
                    &mut dg,
                    &mut db,
                    dxl.as_slice_mut().unwrap(),
                    true,
                );
                self.g.grad[ch] += dg[0];
                self.b.grad[ch] += db[0];
            }
        }
        dx
    }
}

impl Module for InstanceNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&join(prefix, "g"), &mut self.g);
        f(&join(prefix, "b"), &mut self.b);
    }
}
