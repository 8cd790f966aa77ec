//! 3D convolution stack used by the segmentation decoder.
//!
//! Feature maps are (B, C, V) with V = z*y*x flattened x-fastest, spatial
//! dims carried alongside. Conv3d is stride-1 odd-kernel same-padding via
//! z-chunked im2col GEMM; the column buffer is rebuilt in backward instead
//! of cached, trading FLOPs for memory. ConvTranspose3d is kernel-2
//! stride-2, so each input voxel owns a disjoint 2x2x2 output block and
//! both directions reduce to one GEMM plus a scatter.

use ndarray::{s, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use super::act::{leaky_relu, leaky_relu_grad};
use super::norm::{InstanceNorm, InstanceNormCache};
use super::{join, Module, Param, ParamVisitor};

/// Column buffer cap in bytes; chunks of output z-slices are sized to fit.
const COL_BUDGET: usize = 24 << 20;

/// Batched feature map plus its spatial dims [z, y, x].
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub dims: [usize; 3],
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, dims: [usize; 3]) -> Self {
        debug_assert_eq!(data.dim().2, dims[0] * dims[1] * dims[2]);
        FeatureMap { data, dims }
    }

    pub fn zeros(batch: usize, channels: usize, dims: [usize; 3]) -> Self {
        FeatureMap {
            data: Array3::zeros((batch, channels, dims[0] * dims[1] * dims[2])),
            dims,
        }
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn voxels(&self) -> usize {
        self.data.dim().2
    }

    /// Concatenate along the channel axis; dims must match.
    pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
        assert_eq!(a.dims, b.dims);
        assert_eq!(a.batch(), b.batch());
        let data = ndarray::concatenate(Axis(1), &[a.data.view(), b.data.view()])
            .expect("channel concat");
        FeatureMap { data, dims: a.dims }
    }

    /// Split a channel-concatenated gradient back into the two parts.
    pub fn split_channels(&self, first: usize) -> (FeatureMap, FeatureMap) {
        let a = self.data.slice(s![.., ..first, ..]).to_owned();
        let b = self.data.slice(s![.., first.., ..]).to_owned();
        (FeatureMap::new(a, self.dims), FeatureMap::new(b, self.dims))
    }
}

// ============================================================================
// Conv3d: odd kernel, stride 1, same padding
// ============================================================================

#[derive(Debug, Clone)]
pub struct Conv3d {
    /// (Cout, Cin*k^3); column order is cin-major, then dz, dy, dx.
    pub w: Param,
    pub b: Param,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

pub struct Conv3dCache {
    x: Array3<f64>,
    dims: [usize; 3],
}

impl Conv3d {
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel");
        let fan_in = (cin * k * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Conv3d {
            w: Param::normal(&[cout, cin * k * k * k], std, rng),
            b: Param::zeros(&[cout]),
            cin,
            cout,
            k,
        }
    }

    fn cols(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn zslices_per_chunk(&self, dims: [usize; 3]) -> usize {
        let per_slice = dims[1] * dims[2] * self.cols() * 8;
        (COL_BUDGET / per_slice.max(1)).clamp(1, dims[0])
    }

    /// Fill rows [0, nz*Y*X) of `col` with patches for output z in
    /// [z0, z0+nz); out-of-bounds taps stay zero.
    fn im2col(
        &self,
        x: &Array3<f64>,
        b: usize,
        dims: [usize; 3],
        z0: usize,
        nz: usize,
        col: &mut Array2<f64>,
    ) {
        let [zd, yd, xd] = dims;
        let k = self.k as isize;
        let pad = k / 2;
        let xb = x.index_axis(Axis(0), b);
        col.slice_mut(s![..nz * yd * xd, ..]).fill(0.0);
        for cin in 0..self.cin {
            let plane = xb.index_axis(Axis(0), cin);
            let plane = plane.as_slice().unwrap();
            let cbase = cin * (k * k * k) as usize;
            for (zi, z) in (z0..z0 + nz).enumerate() {
                for dz in 0..k {
                    let sz = z as isize + dz - pad;
                    if sz < 0 || sz >= zd as isize {
                        continue;
                    }
                    for y in 0..yd {
                        for dy in 0..k {
                            let sy = y as isize + dy - pad;
                            if sy < 0 || sy >= yd as isize {
                                continue;
                            }
                            let src_row = ((sz as usize) * yd + sy as usize) * xd;
                            let dst_row = (zi * yd + y) * xd;
                            let coff = cbase + ((dz * k + dy) * k) as usize;
                            for dx in 0..k {
                                let shift = dx - pad;
                                let (xo_lo, xo_hi) = if shift < 0 {
                                    ((-shift) as usize, xd)
                                } else {
                                    (0, xd - shift as usize)
                                };
                                let c = coff + dx as usize;
                                for xo in xo_lo..xo_hi {
                                    let sx = (xo as isize + shift) as usize;
                                    col[[dst_row + xo, c]] = plane[src_row + sx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add rows [0, nz*Y*X) of `dcol` back into `dx[b]`.
    fn col2im_add(
        &self,
        dcol: &Array2<f64>,
        b: usize,
        dims: [usize; 3],
        z0: usize,
        nz: usize,
        dx: &mut Array3<f64>,
    ) {
        let [zd, yd, xd] = dims;
        let k = self.k as isize;
        let pad = k / 2;
        let mut xb = dx.index_axis_mut(Axis(0), b);
        for cin in 0..self.cin {
            let mut plane = xb.index_axis_mut(Axis(0), cin);
            let plane = plane.as_slice_mut().unwrap();
            let cbase = cin * (k * k * k) as usize;
            for (zi, z) in (z0..z0 + nz).enumerate() {
                for dz in 0..k {
                    let sz = z as isize + dz - pad;
                    if sz < 0 || sz >= zd as isize {
                        continue;
                    }
                    for y in 0..yd {
                        for dy in 0..k {
                            let sy = y as isize + dy - pad;
                            if sy < 0 || sy >= yd as isize {
                                continue;
                            }
                            let src_row = ((sz as usize) * yd + sy as usize) * xd;
                            let dst_row = (zi * yd + y) * xd;
                            let coff = cbase + ((dz * k + dy) * k) as usize;
                            for dx_k in 0..k {
                                let shift = dx_k - pad;
                                let (xo_lo, xo_hi) = if shift < 0 {
                                    ((-shift) as usize, xd)
                                } else {
                                    (0, xd - shift as usize)
                                };
                                let c = coff + dx_k as usize;
                                for xo in xo_lo..xo_hi {
                                    let sx = (xo as isize + shift) as usize;
                                    plane[src_row + sx] += dcol[[dst_row + xo, c]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, Conv3dCache) {
        debug_assert_eq!(x.channels(), self.cin);
        let dims = x.dims;
        let [zd, yd, xd] = dims;
        let bs = x.batch();
        let mut out = Array3::zeros((bs, self.cout, zd * yd * xd));
        let w = self.w.value_as2(self.cout, self.cols());
        let chunk = self.zslices_per_chunk(dims);
        let mut col = Array2::zeros((chunk * yd * xd, self.cols()));
        for b in 0..bs {
            let mut z0 = 0;
            while z0 < zd {
                let nz = chunk.min(zd - z0);
                let rows = nz * yd * xd;
                self.im2col(&x.data, b, dims, z0, nz, &mut col);
                let mut yc = w.dot(&col.slice(s![..rows, ..]).t());
                for (co, mut r) in yc.rows_mut().into_iter().enumerate() {
                    let bias = self.b.value[co];
                    r.mapv_inplace(|v| v + bias);
                }
                let start = z0 * yd * xd;
                out.slice_mut(s![b, .., start..start + rows]).assign(&yc);
                z0 += nz;
            }
        }
        let cache = Conv3dCache { x: x.data.clone(), dims };
        (FeatureMap::new(out, dims), cache)
    }

    pub fn backward(&mut self, dy: &FeatureMap, cache: &Conv3dCache) -> FeatureMap {
        let dims = cache.dims;
        let [zd, yd, xd] = dims;
        let bs = dy.batch();
        let mut dx = Array3::zeros(cache.x.raw_dim());
        let w = self.w.value_as2(self.cout, self.cols()).into_owned();
        let mut dw_acc = Array2::<f64>::zeros((self.cout, self.cols()));
        let chunk = self.zslices_per_chunk(dims);
        let mut col = Array2::zeros((chunk * yd * xd, self.cols()));
        for b in 0..bs {
            for co in 0..self.cout {
                self.b.grad[co] += dy.data.slice(s![b, co, ..]).sum();
            }
            let mut z0 = 0;
            while z0 < zd {
                let nz = chunk.min(zd - z0);
                let rows = nz * yd * xd;
                let start = z0 * yd * xd;
                self.im2col(&cache.x, b, dims, z0, nz, &mut col);
                let cview = col.slice(s![..rows, ..]);
                let dyc = dy.data.slice(s![b, .., start..start + rows]);
                dw_acc += &dyc.dot(&cview);
                let dcol = dyc.t().dot(&w);
                self.col2im_add(&dcol, b, dims, z0, nz, &mut dx);
                z0 += nz;
            }
        }
        let mut gw = self.w.grad_as2_mut(self.cout, self.cols());
        gw += &dw_acc;
        FeatureMap::new(dx, dims)
    }
}

impl Module for Conv3d {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

// ============================================================================
// ConvTranspose3d: kernel 2, stride 2 (doubles each spatial dim)
// ============================================================================

#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    /// (Cout*8, Cin); row index is cout*8 + ((dz*2+dy)*2+dx).
    pub w: Param,
    pub b: Param,
    pub cin: usize,
    pub cout: usize,
}

pub struct DeconvCache {
    x: Array3<f64>,
    dims: [usize; 3],
}

impl ConvTranspose3d {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / cin as f64).sqrt();
        ConvTranspose3d {
            w: Param::normal(&[cout * 8, cin], std, rng),
            b: Param::zeros(&[cout]),
            cin,
            cout,
        }
    }

    pub fn out_dims(dims: [usize; 3]) -> [usize; 3] {
        [dims[0] * 2, dims[1] * 2, dims[2] * 2]
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, DeconvCache) {
        debug_assert_eq!(x.channels(), self.cin);
        let [zd, yd, xd] = x.dims;
        let od = Self::out_dims(x.dims);
        let bs = x.batch();
        let v = zd * yd * xd;
        let w = self.w.value_as2(self.cout * 8, self.cin);
        let mut out = Array3::zeros((bs, self.cout, od[0] * od[1] * od[2]));
        for b in 0..bs {
            let xb = x.data.index_axis(Axis(0), b);
            let r = w.dot(&xb); // (Cout*8, V)
            let mut ob = out.index_axis_mut(Axis(0), b);
            for co in 0..self.cout {
                let bias = self.b.value[co];
                let mut plane = ob.index_axis_mut(Axis(0), co);
                let plane = plane.as_slice_mut().unwrap();
                for dz in 0..2usize {
                    for dyk in 0..2usize {
                        for dxk in 0..2usize {
                            let o = (dz * 2 + dyk) * 2 + dxk;
                            let rrow = r.row(co * 8 + o);
                            let rrow = rrow.as_slice().unwrap_or(&[]);
                            // r rows are contiguous because r is standard layout
                            debug_assert_eq!(rrow.len(), v);
                            let mut vi = 0;
                            for z in 0..zd {
                                let oz = 2 * z + dz;
                                for y in 0..yd {
                                    let oy = 2 * y + dyk;
                                    let obase = (oz * od[1] + oy) * od[2] + dxk;
                                    for xi in 0..xd {
                                        plane[obase + 2 * xi] = rrow[vi] + bias;
                                        vi += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let cache = DeconvCache { x: x.data.clone(), dims: x.dims };
        (FeatureMap::new(out, od), cache)
    }

    pub fn backward(&mut self, dy: &FeatureMap, cache: &DeconvCache) -> FeatureMap {
        let [zd, yd, xd] = cache.dims;
        let od = dy.dims;
        let bs = dy.batch();
        let v = zd * yd * xd;
        let w = self.w.value_as2(self.cout * 8, self.cin).into_owned();
        let mut dx = Array3::zeros(cache.x.raw_dim());
        let mut dw_acc = Array2::<f64>::zeros((self.cout * 8, self.cin));
        let mut dr = Array2::<f64>::zeros((self.cout * 8, v));
        for b in 0..bs {
            // Gather dR from the strided output positions.
            for co in 0..self.cout {
                let plane = dy.data.index_axis(Axis(0), b);
                let plane = plane.index_axis(Axis(0), co);
                let plane = plane.as_slice().unwrap();
                self.b.grad[co] += plane.iter().sum::<f64>();
                for dz in 0..2usize {
                    for dyk in 0..2usize {
                        for dxk in 0..2usize {
                            let o = (dz * 2 + dyk) * 2 + dxk;
                            let mut drr = dr.row_mut(co * 8 + o);
                            let drr = drr.as_slice_mut().unwrap();
                            let mut vi = 0;
                            for z in 0..zd {
                                let oz = 2 * z + dz;
                                for y in 0..yd {
                                    let oy = 2 * y + dyk;
                                    let obase = (oz * od[1] + oy) * od[2] + dxk;
                                    for xi in 0..xd {
                                        drr[vi] = plane[obase + 2 * xi];
                                        vi += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let xb = cache.x.index_axis(Axis(0), b);
            dw_acc += &dr.dot(&xb.t());
            let dxb = w.t().dot(&dr);
            dx.index_axis_mut(Axis(0), b).assign(&dxb);
        }
        let mut gw = self.w.grad_as2_mut(self.cout * 8, self.cin);
        gw += &dw_acc;
        FeatureMap::new(dx, cache.dims)
    }
}

impl Module for ConvTranspose3d {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

// ============================================================================
// Conv / Deconv units: op + InstanceNorm + LeakyReLU
// ============================================================================

/// Applies leaky backward given the normalized affine output recomputed from
/// the norm cache; leaky is sign-preserving so the pre-activation sign is all
/// that is needed.
fn leaky_backward_from(norm_out: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut d = dy.clone();
    d.zip_mut_with(norm_out, |g, &pre| *g *= leaky_relu_grad(pre));
    d
}

#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
}

pub struct ConvUnitCache {
    conv: Conv3dCache,
    norm: InstanceNormCache,
    dims: [usize; 3],
}

impl ConvUnit {
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvUnit { conv: Conv3d::new(cin, cout, k, rng), norm: InstanceNorm::new(cout) }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, ConvUnitCache) {
        let (y, conv_cache) = self.conv.forward(x);
        let (n, norm_cache) = self.norm.forward(&y.data);
        let act = n.mapv(leaky_relu);
        (
            FeatureMap::new(act, y.dims),
            ConvUnitCache { conv: conv_cache, norm: norm_cache, dims: y.dims },
        )
    }

    pub fn backward(&mut self, dy: &FeatureMap, cache: &ConvUnitCache) -> FeatureMap {
        let norm_out = self.norm.affine_output(&cache.norm);
        let dn = leaky_backward_from(&norm_out, &dy.data);
        let dconv = self.norm.backward(&dn, &cache.norm);
        self.conv.backward(&FeatureMap::new(dconv, cache.dims), &cache.conv)
    }
}

impl Module for ConvUnit {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

#[derive(Debug, Clone)]
pub struct DeconvUnit {
    pub deconv: ConvTranspose3d,
    pub norm: InstanceNorm,
}

pub struct DeconvUnitCache {
    deconv: DeconvCache,
    norm: InstanceNormCache,
    dims: [usize; 3],
}

impl DeconvUnit {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        DeconvUnit { deconv: ConvTranspose3d::new(cin, cout, rng), norm: InstanceNorm::new(cout) }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, DeconvUnitCache) {
        let (y, deconv_cache) = self.deconv.forward(x);
        let (n, norm_cache) = self.norm.forward(&y.data);
        let act = n.mapv(leaky_relu);
        (
            FeatureMap::new(act, y.dims),
            DeconvUnitCache { deconv: deconv_cache, norm: norm_cache, dims: y.dims },
        )
    }

    pub fn backward(&mut self, dy: &FeatureMap, cache: &DeconvUnitCache) -> FeatureMap {
        let norm_out = self.norm.affine_output(&cache.norm);
        let dn = leaky_backward_from(&norm_out, &dy.data);
        let ddeconv = self.norm.backward(&dn, &cache.norm);
        self.deconv.backward(&FeatureMap::new(ddeconv, cache.dims), &cache.deconv)
    }
}

impl Module for DeconvUnit {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.deconv.visit_params(&join(prefix, "deconv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}
