//! UNETR-style segmentation: transformer taps decoded by a convolutional
//! pyramid back to full resolution, two output channels (background,
//! foreground).
//!
//! Branch shapes, for encoder width D and token grid G (full res = 16G,
//! so the patch size is pinned to 16):
//!   deepest tap   -> conv unit D->128 at G
//!   tap 3         -> deconv unit D->64            (2G)
//!   tap 2         -> deconv D->32, deconv 32->32  (4G)
//!   tap 1         -> deconv D->16, x2 deconv 16->16 (8G)
//!   raw volume    -> conv unit 1->8 at full res
//! Trunk: four rounds of [deconv up, concat skip, conv unit] at widths
//! 64/32/16/8, then a 1x1x1 conv to 2 channels (no norm, no activation).

use ndarray::{s, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::nn::conv::{Conv3d, Conv3dCache, ConvUnit, ConvUnitCache, DeconvUnit, DeconvUnitCache, FeatureMap};
use crate::nn::{join, Module, ParamVisitor};
use crate::vit::{VitCache, VitConfig, VitEncoder};
use crate::volume::{patchify, unrank, Volume, VolumeKind};
use crate::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;
pub const PATCH: usize = 16;

/// (B, N, D) token stack to a (B, D, grid) feature map. Token rank and
/// flattened voxel rank share the same x-fastest order, so this is a pure
/// axis transpose.
pub fn tokens_to_map(tokens: &Array3<f64>, grid: [usize; 3]) -> FeatureMap {
    let (b, n, d) = tokens.dim();
    debug_assert_eq!(n, grid[0] * grid[1] * grid[2]);
    let data = tokens.view().permuted_axes([0, 2, 1]).to_owned();
    let data = Array3::from_shape_vec((b, d, n), data.iter().cloned().collect()).unwrap();
    // dims are [z, y, x] while grid arrives as [gx, gy, gz]
    FeatureMap::new(data, [grid[2], grid[1], grid[0]])
}

/// Inverse of [tokens_to_map].
pub fn map_to_tokens(map: &FeatureMap) -> Array3<f64> {
    let (b, d, n) = map.data.dim();
    let t = map.data.view().permuted_axes([0, 2, 1]).to_owned();
    Array3::from_shape_vec((b, n, d), t.iter().cloned().collect()).unwrap()
}

#[derive(Debug, Clone)]
pub struct UnetrHead {
    pub b12: ConvUnit,
    pub b9: DeconvUnit,
    pub b6_1: DeconvUnit,
    pub b6_2: DeconvUnit,
    pub b3_1: DeconvUnit,
    pub b3_2: DeconvUnit,
    pub b3_3: DeconvUnit,
    pub b0: ConvUnit,
    pub up1: DeconvUnit,
    pub s1: ConvUnit,
    pub up2: DeconvUnit,
    pub s2: ConvUnit,
    pub up3: DeconvUnit,
    pub s3: ConvUnit,
    pub up4: DeconvUnit,
    pub s4: ConvUnit,
    pub out: Conv3d,
}

pub struct UnetrCache {
    b12: ConvUnitCache,
    b9: DeconvUnitCache,
    b6_1: DeconvUnitCache,
    b6_2: DeconvUnitCache,
    b3_1: DeconvUnitCache,
    b3_2: DeconvUnitCache,
    b3_3: DeconvUnitCache,
    b0: ConvUnitCache,
    up1: DeconvUnitCache,
    s1: ConvUnitCache,
    up2: DeconvUnitCache,
    s2: ConvUnitCache,
    up3: DeconvUnitCache,
    s3: ConvUnitCache,
    up4: DeconvUnitCache,
    s4: ConvUnitCache,
    out: Conv3dCache,
}

impl UnetrHead {
    pub fn new(embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        UnetrHead {
            b12: ConvUnit::new(embed_dim, 128, 3, rng),
            b9: DeconvUnit::new(embed_dim, 64, rng),
            b6_1: DeconvUnit::new(embed_dim, 32, rng),
            b6_2: DeconvUnit::new(32, 32, rng),
            b3_1: DeconvUnit::new(embed_dim, 16, rng),
            b3_2: DeconvUnit::new(16, 16, rng),
            b3_3: DeconvUnit::new(16, 16, rng),
            b0: ConvUnit::new(1, 8, 3, rng),
            up1: DeconvUnit::new(128, 64, rng),
            s1: ConvUnit::new(128, 64, 3, rng),
            up2: DeconvUnit::new(64, 32, rng),
            s2: ConvUnit::new(64, 32, 3, rng),
            up3: DeconvUnit::new(32, 16, rng),
            s3: ConvUnit::new(32, 16, 3, rng),
            up4: DeconvUnit::new(16, 8, rng),
            s4: ConvUnit::new(16, 8, 3, rng),
            out: Conv3d::new(8, 2, 1, rng),
        }
    }

    /// `zs` are the four tap maps shallow-to-deep at the token grid; `raw`
    /// is the input volume as a 1-channel map at full resolution.
    pub fn forward(
        &self,
        zs: [&FeatureMap; 4],
        raw: &FeatureMap,
    ) -> (FeatureMap, UnetrCache) {
        let (f12, c12) = self.b12.forward(zs[3]);
        let (f9, c9) = self.b9.forward(zs[2]);
        let (t6, c6_1) = self.b6_1.forward(zs[1]);
        let (f6, c6_2) = self.b6_2.forward(&t6);
        let (t3a, c3_1) = self.b3_1.forward(zs[0]);
        let (t3b, c3_2) = self.b3_2.forward(&t3a);
        let (f3, c3_3) = self.b3_3.forward(&t3b);
        let (f0, c0) = self.b0.forward(raw);

        let (u1, cu1) = self.up1.forward(&f12);
        let (m1, cs1) = self.s1.forward(&FeatureMap::concat_channels(&u1, &f9));
        let (u2, cu2) = self.up2.forward(&m1);
        let (m2, cs2) = self.s2.forward(&FeatureMap::concat_channels(&u2, &f6));
        let (u3, cu3) = self.up3.forward(&m2);
        let (m3, cs3) = self.s3.forward(&FeatureMap::concat_channels(&u3, &f3));
        let (u4, cu4) = self.up4.forward(&m3);
        let (m4, cs4) = self.s4.forward(&FeatureMap::concat_channels(&u4, &f0));
        let (logits, cout) = self.out.forward(&m4);

        let cache = UnetrCache {
            b12: c12,
            b9: c9,
            b6_1: c6_1,
            b6_2: c6_2,
            b3_1: c3_1,
            b3_2: c3_2,
            b3_3: c3_3,
            b0: c0,
            up1: cu1,
            s1: cs1,
            up2: cu2,
            s2: cs2,
            up3: cu3,
            s3: cs3,
            up4: cu4,
            s4: cs4,
            out: cout,
        };
        (logits, cache)
    }

    /// Returns gradients for the four tap maps (shallow-to-deep); the raw
    /// branch ends at data so its gradient is dropped.
    pub fn backward(&mut self, dlogits: &FeatureMap, cache: &UnetrCache) -> [FeatureMap; 4] {
        let dm4 = self.out.backward(dlogits, &cache.out);
        let dcat4 = self.s4.backward(&dm4, &cache.s4);
        let (du4, df0) = dcat4.split_channels(8);
        let dm3 = self.up4.backward(&du4, &cache.up4);
        let dcat3 = self.s3.backward(&dm3, &cache.s3);
        let (du3, df3) = dcat3.split_channels(16);
        let dm2 = self.up3.backward(&du3, &cache.up3);
        let dcat2 = self.s2.backward(&dm2, &cache.s2);
        let (du2, df6) = dcat2.split_channels(32);
        let dm1 = self.up2.backward(&du2, &cache.up2);
        let dcat1 = self.s1.backward(&dm1, &cache.s1);
        let (du1, df9) = dcat1.split_channels(64);
        let df12 = self.up1.backward(&du1, &cache.up1);

        let dz12 = self.b12.backward(&df12, &cache.b12);
        let dz9 = self.b9.backward(&df9, &cache.b9);
        let dt6 = self.b6_2.backward(&df6, &cache.b6_2);
        let dz6 = self.b6_1.backward(&dt6, &cache.b6_1);
        let dt3b = self.b3_3.backward(&df3, &cache.b3_3);
        let dt3a = self.b3_2.backward(&dt3b, &cache.b3_2);
        let dz3 = self.b3_1.backward(&dt3a, &cache.b3_1);
        let _ = self.b0.backward(&df0, &cache.b0);
        [dz3, dz6, dz9, dz12]
    }

    /// Zero the final projection so every logit starts equal; argmax then
    /// resolves to background everywhere.
    pub fn zero_final_projection(&mut self) {
        self.out.w.value.fill(0.0);
        self.out.b.value.fill(0.0);
    }
}

impl Module for UnetrHead {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.b12.visit_params(&join(prefix, "b12"), f);
        self.b9.visit_params(&join(prefix, "b9"), f);
        self.b6_1.visit_params(&join(prefix, "b6_1"), f);
        self.b6_2.visit_params(&join(prefix, "b6_2"), f);
        self.b3_1.visit_params(&join(prefix, "b3_1"), f);
        self.b3_2.visit_params(&join(prefix, "b3_2"), f);
        self.b3_3.visit_params(&join(prefix, "b3_3"), f);
        self.b0.visit_params(&join(prefix, "b0"), f);
        self.up1.visit_params(&join(prefix, "up1"), f);
        self.s1.visit_params(&join(prefix, "s1"), f);
        self.up2.visit_params(&join(prefix, "up2"), f);
        self.s2.visit_params(&join(prefix, "s2"), f);
        self.up3.visit_params(&join(prefix, "up3"), f);
        self.s3.visit_params(&join(prefix, "s3"), f);
        self.up4.visit_params(&join(prefix, "up4"), f);
        self.s4.visit_params(&join(prefix, "s4"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }
}

// ============================================================================
// Full segmentation model
// ============================================================================

#[derive(Debug, Clone)]
pub struct SegModel {
    pub encoder: VitEncoder,
    pub head: UnetrHead,
}

pub struct SegCache {
    enc: VitCache,
    head: UnetrCache,
    taps: Vec<usize>,
}

impl SegModel {
    pub fn new(vit_cfg: VitConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if vit_cfg.patch_size != PATCH {
            return Err(Error::Config(format!(
                "segmentation decoder needs patch size {PATCH}, got {}",
                vit_cfg.patch_size
            )));
        }
        if vit_cfg.taps.len() != 4 {
            return Err(Error::Config(format!(
                "segmentation decoder needs exactly 4 taps, got {:?}",
                vit_cfg.taps
            )));
        }
        let embed_dim = vit_cfg.embed_dim;
        let encoder = VitEncoder::new(vit_cfg, rng)?;
        let head = UnetrHead::new(embed_dim, rng);
        Ok(SegModel { encoder, head })
    }

    fn grid(&self) -> [usize; 3] {
        self.encoder.cfg.grid
    }

    pub fn full_dims_zyx(&self) -> [usize; 3] {
        let g = self.grid();
        [g[2] * PATCH, g[1] * PATCH, g[0] * PATCH]
    }

    /// Tokens for one volume, validated against the configured grid.
    pub fn tokenize(&self, vol: &Volume) -> Result<Array2<f64>> {
        let seq = patchify(vol, PATCH)?;
        if seq.grid != self.grid() {
            return Err(Error::Shape(format!(
                "volume grid {:?} does not match model grid {:?}",
                seq.grid,
                self.grid()
            )));
        }
        Ok(seq.tokens)
    }

    /// Raw intensity map (B, 1, full res) from the volumes.
    fn raw_map(&self, vols: &[&Volume]) -> FeatureMap {
        let dims = self.full_dims_zyx();
        let v = dims[0] * dims[1] * dims[2];
        let mut data = Array3::zeros((vols.len(), 1, v));
        for (b, vol) in vols.iter().enumerate() {
            let src = vol.data.as_slice().unwrap();
            let mut dst = data.slice_mut(s![b, 0, ..]);
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = s as f64;
            }
        }
        FeatureMap::new(data, dims)
    }

    /// Logits (B, 2, full res voxels) for a batch of image volumes.
    pub fn forward(&self, vols: &[&Volume]) -> Result<(FeatureMap, SegCache)> {
        if vols.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let seqs: Vec<Array2<f64>> =
            vols.iter().map(|v| self.tokenize(v)).collect::<Result<_>>()?;
        let refs: Vec<&Array2<f64>> = seqs.iter().collect();
        let tokens = crate::vit::stack_tokens(&refs)?;
        let (taps, enc_cache) = self.encoder.encode_with_taps(&tokens)?;
        let tap_layers = self.encoder.cfg.taps.clone();
        let grid = self.grid();
        let maps: Vec<FeatureMap> =
            tap_layers.iter().map(|l| tokens_to_map(&taps[l], grid)).collect();
        let raw = self.raw_map(vols);
        let (logits, head_cache) =
            self.head.forward([&maps[0], &maps[1], &maps[2], &maps[3]], &raw);
        Ok((
            logits,
            SegCache { enc: enc_cache, head: head_cache, taps: tap_layers },
        ))
    }

    pub fn backward(&mut self, dlogits: &FeatureMap, cache: &SegCache) {
        let dmaps = self.head.backward(dlogits, &cache.head);
        let mut dtaps = BTreeMap::new();
        for (i, layer) in cache.taps.iter().enumerate() {
            dtaps.insert(*layer, map_to_tokens(&dmaps[i]));
        }
        self.encoder.taps_backward(&dtaps, &cache.enc);
    }

    /// Hard prediction for one image volume: argmax over the two logit
    /// channels, returned as a binary volume.
    pub fn predict(&self, vol: &Volume) -> Result<Volume> {
        let (logits, _) = self.forward(&[vol])?;
        let dims = logits.dims;
        let mut data = ndarray::Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
        let flat = data.as_slice_mut().unwrap();
        let bg = logits.data.slice(s![0, 0, ..]);
        let fg = logits.data.slice(s![0, 1, ..]);
        for (i, (b, f)) in bg.iter().zip(fg.iter()).enumerate() {
            flat[i] = if f > b { 1.0 } else { 0.0 };
        }
        Volume::new(data, vol.spacing, VolumeKind::Prediction)
    }
}

impl Module for SegModel {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

// ============================================================================
// Dice + cross-entropy loss
// ============================================================================

#[derive(Debug, Clone)]
pub struct SegLoss {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

/// Soft Dice (foreground softmax channel, per-sample then averaged) plus
/// voxel-mean cross-entropy, unit weights. Returns the loss parts and
/// d(total)/d(logits).
pub fn seg_loss(logits: &FeatureMap, labels: &Array2<f64>) -> Result<(SegLoss, FeatureMap)> {
    let (bs, ch, v) = logits.data.dim();
    if ch != 2 {
        return Err(Error::Shape(format!("expected 2 logit channels, got {ch}")));
    }
    if labels.dim() != (bs, v) {
        return Err(Error::Shape(format!(
            "labels {:?} do not match logits ({bs}, {v})",
            labels.dim()
        )));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Precondition("labels must be binary".into()));
    }

    let total_vox = (bs * v) as f64;
    let mut ce = 0.0;
    let mut dice_sum = 0.0;
    let mut dlogits = Array3::zeros((bs, ch, v));
    // Softmax foreground probability per voxel, stable two-class form.
    let mut p_fg = Array2::zeros((bs, v));
    for b in 0..bs {
        for i in 0..v {
            let z0 = logits.data[[b, 0, i]];
            let z1 = logits.data[[b, 1, i]];
            let m = z0.max(z1);
            let e0 = (z0 - m).exp();
            let e1 = (z1 - m).exp();
            let p1 = e1 / (e0 + e1);
            p_fg[[b, i]] = p1;
            let y = labels[[b, i]];
            // CE: -log p_y, mean over all voxels of the batch.
            let py = if y == 1.0 { p1 } else { 1.0 - p1 };
            ce -= py.max(1e-300).ln();
            // d(ce)/dz = (softmax - onehot) / total_vox
            dlogits[[b, 0, i]] = ((1.0 - p1) - (1.0 - y)) / total_vox;
            dlogits[[b, 1, i]] = (p1 - y) / total_vox;
        }
    }
    ce /= total_vox;

    for b in 0..bs {
        let pb = p_fg.row(b);
        let yb = labels.row(b);
        let inter: f64 = pb.iter().zip(yb.iter()).map(|(p, y)| p * y).sum();
        let psum: f64 = pb.sum();
        let ysum: f64 = yb.sum();
        let denom = psum + ysum + DICE_EPS;
        let d = (2.0 * inter + DICE_EPS) / denom;
        dice_sum += d;
        // d(1 - mean_b d_b)/dp1 = -(1/B) * [2y*denom - (2*inter+eps)] / denom^2
        let scale = -1.0 / bs as f64;
        for i in 0..v {
            let y = yb[i];
            let dd_dp = (2.0 * y * denom - (2.0 * inter + DICE_EPS)) / (denom * denom);
            let dl_dp = scale * dd_dp;
            // p1 = sigmoid(z1 - z0): dp1/dz1 = p1(1-p1), dp1/dz0 = -p1(1-p1)
            let p1 = pb[i];
            let sig = p1 * (1.0 - p1);
            dlogits[[b, 1, i]] += dl_dp * sig;
            dlogits[[b, 0, i]] -= dl_dp * sig;
        }
    }
    let dice_loss = 1.0 - dice_sum / bs as f64;
    let loss = SegLoss { total: dice_loss + ce, dice: dice_loss, ce };
    Ok((loss, FeatureMap::new(dlogits, logits.dims)))
}

/// Flatten label volumes to a (B, V) binary matrix.
pub fn labels_to_array(vols: &[&Volume]) -> Result<Array2<f64>> {
    if vols.is_empty() {
        return Err(Error::Precondition("empty label batch".into()));
    }
    let n = vols[0].data.len();
    let mut out = Array2::zeros((vols.len(), n));
    for (b, vol) in vols.iter().enumerate() {
        if vol.data.len() != n {
            return Err(Error::Shape("label volumes differ in size".into()));
        }
        let src = vol.data.as_slice().unwrap();
        for (d, &s) in out.row_mut(b).iter_mut().zip(src.iter()) {
            *d = s as f64;
        }
    }
    Ok(out)
}

/// Grid coordinates corresponding to token `k`, for callers assembling
/// coarse spatial summaries.
pub fn token_grid_coords(k: usize, grid: [usize; 3]) -> [usize; 3] {
    unrank(k, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::Array1;

    #[test]
    fn tokens_map_roundtrip() {
        let t = Array3::from_shape_fn((2, 24, 5), |(b, n, d)| (b * 1000 + n * 10 + d) as f64);
        let grid = [4, 3, 2]; // gx, gy, gz
        let m = tokens_to_map(&t, grid);
        assert_eq!(m.dims, [2, 3, 4]);
        assert_eq!(m.channels(), 5);
        let back = map_to_tokens(&m);
        assert_eq!(t, back);
        // Token rank k maps to voxel rank k under x-fastest order.
        assert_eq!(m.data[[1, 2, 7]], t[[1, 7, 2]]);
    }

    #[test]
    fn seg_loss_all_background_halves() {
        // Zero logits: p = 0.5 everywhere; CE = ln 2 exactly. Dice with no
        // foreground: d = eps / (V/2 + eps).
        let v = 8usize;
        let logits = FeatureMap::zeros(1, 2, [2, 2, 2]);
        let labels = Array2::zeros((1, v));
        let (loss, dlogits) = seg_loss(&logits, &labels).unwrap();
        assert!((loss.ce - (2.0f64).ln()).abs() < 1e-12);
        let d = DICE_EPS / (v as f64 * 0.5 + DICE_EPS);
        assert!((loss.dice - (1.0 - d)).abs() < 1e-12);
        assert!((loss.total - (loss.dice + loss.ce)).abs() < 1e-15);
        assert_eq!(dlogits.dims, [2, 2, 2]);
    }

    #[test]
    fn seg_loss_perfect_prediction_near_zero() {
        let v = 8usize;
        let mut logits = FeatureMap::zeros(1, 2, [2, 2, 2]);
        let mut labels = Array2::zeros((1, v));
        for i in 0..v {
            let y = if i % 2 == 0 { 1.0 } else { 0.0 };
            labels[[0, i]] = y;
            logits.data[[0, 1, i]] = if y == 1.0 { 30.0 } else { -30.0 };
        }
        let (loss, _) = seg_loss(&logits, &labels).unwrap();
        assert!(loss.ce < 1e-9);
        assert!(loss.dice < 1e-5);
    }

    #[test]
    fn seg_loss_rejects_nonbinary_labels() {
        let logits = FeatureMap::zeros(1, 2, [1, 1, 2]);
        let labels = ndarray::array![[0.0, 0.5]];
        assert!(seg_loss(&logits, &labels).is_err());
    }

    #[test]
    fn seg_loss_gradient_matches_fd() {
        let mut rng = seeded(71, 0);
        use rand::Rng;
        let dims = [2, 2, 2];
        let v = 8usize;
        let mut logits = FeatureMap::zeros(2, 2, dims);
        logits.data.mapv_inplace(|_| rng.gen_range(-1.5..1.5));
        let mut labels = Array2::zeros((2, v));
        for b in 0..2 {
            for i in 0..v {
                labels[[b, i]] = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
            }
        }
        let (_, dlogits) = seg_loss(&logits, &labels).unwrap();
        let h = 1e-6;
        for b in 0..2 {
            for c in 0..2 {
                for i in 0..v {
                    let mut lp = logits.clone();
                    lp.data[[b, c, i]] += h;
                    let mut lm = logits.clone();
                    lm.data[[b, c, i]] -= h;
                    let (p, _) = seg_loss(&lp, &labels).unwrap();
                    let (m, _) = seg_loss(&lm, &labels).unwrap();
                    let fd = (p.total - m.total) / (2.0 * h);
                    let a = dlogits.data[[b, c, i]];
                    assert!(
                        (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-4,
                        "dlogits[{b},{c},{i}]: fd={fd} analytic={a}"
                    );
                }
            }
        }
    }

    fn tiny_seg_cfg() -> VitConfig {
        VitConfig {
            patch_size: 16,
            grid: [1, 1, 1],
            embed_dim: 8,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            taps: vec![1, 2, 3, 4],
        }
    }

    fn toy_volume(fill: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let data = ndarray::Array3::from_shape_fn((16, 16, 16), |(z, y, x)| fill(z, y, x));
        Volume::new(data, [1.0, 1.0, 1.0], VolumeKind::Image).unwrap()
    }

    #[test]
    fn seg_model_shapes_and_predict() {
        let mut rng = seeded(72, 0);
        let model = SegModel::new(tiny_seg_cfg(), &mut rng).unwrap();
        let vol = toy_volume(|z, y, x| ((z + y + x) as f32 * 0.1).sin());
        let (logits, _) = model.forward(&[&vol]).unwrap();
        assert_eq!(logits.data.dim(), (1, 2, 4096));
        assert_eq!(logits.dims, [16, 16, 16]);
        let pred = model.predict(&vol).unwrap();
        assert_eq!(pred.kind, VolumeKind::Prediction);
        assert_eq!(pred.data.dim(), (16, 16, 16));
        assert!(pred.is_binary());
    }

    #[test]
    fn zeroed_final_projection_predicts_background() {
        let mut rng = seeded(73, 0);
        let mut model = SegModel::new(tiny_seg_cfg(), &mut rng).unwrap();
        model.head.zero_final_projection();
        let vol = toy_volume(|z, y, x| ((z * y + x) as f32 * 0.05).cos());
        let pred = model.predict(&vol).unwrap();
        assert!(pred.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_grid_rejected() {
        let mut rng = seeded(74, 0);
        let model = SegModel::new(tiny_seg_cfg(), &mut rng).unwrap();
        let data = ndarray::Array3::zeros((32, 16, 16));
        let vol = Volume::new(data, [1.0, 1.0, 1.0], VolumeKind::Image).unwrap();
        assert!(model.forward(&[&vol]).is_err());
    }

    #[test]
    fn non_multiple_of_patch_rejected() {
        let mut rng = seeded(75, 0);
        let model = SegModel::new(tiny_seg_cfg(), &mut rng).unwrap();
        let data = ndarray::Array3::zeros((15, 16, 16));
        let vol = Volume::new(data, [1.0, 1.0, 1.0], VolumeKind::Image).unwrap();
        assert!(model.forward(&[&vol]).is_err());
    }

    #[test]
    fn patch_size_pinned() {
        let mut rng = seeded(76, 0);
        let mut cfg = tiny_seg_cfg();
        cfg.patch_size = 8;
        assert!(SegModel::new(cfg, &mut rng).is_err());
        let mut cfg = tiny_seg_cfg();
        cfg.taps = vec![2, 4];
        assert!(SegModel::new(cfg, &mut rng).is_err());
    }

    #[test]
    fn seg_backward_runs_and_touches_encoder() {
        let mut rng = seeded(77, 0);
        let mut model = SegModel::new(tiny_seg_cfg(), &mut rng).unwrap();
        let vol = toy_volume(|z, y, x| ((z + 2 * y + 3 * x) as f32 * 0.07).sin());
        let mut label_data = ndarray::Array3::<f32>::zeros((16, 16, 16));
        label_data.slice_mut(s![4..10, 4..10, 4..10]).fill(1.0);
        let label = Volume::new(label_data, [1.0, 1.0, 1.0], VolumeKind::Label).unwrap();
        let (logits, cache) = model.forward(&[&vol]).unwrap();
        let labels = labels_to_array(&[&label]).unwrap();
        let (_, dlogits) = seg_loss(&logits, &labels).unwrap();
        model.backward(&dlogits, &cache);
        // Encoder embedding must receive nonzero gradient through the taps.
        let g: Array1<f64> =
            Array1::from_iter(model.encoder.embed.w.grad.iter().cloned());
        assert!(g.iter().any(|&v| v != 0.0));
        // Every head unit too.
        assert!(model.head.s4.conv.w.grad.iter().any(|&v| v != 0.0));
        assert!(model.head.b3_1.deconv.w.grad.iter().any(|&v| v != 0.0));
    }
}
