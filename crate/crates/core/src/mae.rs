//! Masked-autoencoder pretraining: token masking, the lightweight decoder,
//! and the masked reconstruction loss.
//!
//! The encoder sees only visible tokens. The decoder rebuilds the full
//! sequence by placing one shared learnable mask token at every masked slot,
//! adds its own position embeddings, runs a short transformer stack, and
//! predicts raw pixels per patch. The loss is the mean squared error over
//! all masked pixels pooled across the batch; visible positions contribute
//! exactly zero gradient.

use ndarray::{s, Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::block::{VitBlock, VitBlockCache};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::{join, Module, Param, ParamVisitor};
use crate::rng::sample_distinct;
use crate::vit::{VitCache, VitConfig, VitEncoder, INIT_STD};
use crate::volume::PatchSequence;
use crate::{Error, Result};

/// Which token slots a pretraining step hides. One plan is shared by every
/// volume in the step's batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_tokens: usize,
    /// Sorted ascending; disjoint from `visible`; never empty or full.
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskPlan {
    pub fn n_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.masked.is_empty() || self.visible.is_empty() {
            return Err(Error::Precondition(
                "mask plan must leave at least one masked and one visible token".into(),
            ));
        }
        if self.masked.len() + self.visible.len() != self.n_tokens {
            return Err(Error::Precondition("mask plan does not partition tokens".into()));
        }
        let mut seen = vec![false; self.n_tokens];
        for &list in &[&self.masked, &self.visible] {
            for w in list.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Precondition("mask plan lists must be sorted".into()));
                }
            }
            for &i in list {
                if i >= self.n_tokens || seen[i] {
                    return Err(Error::Precondition("mask plan indices invalid".into()));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Draw a mask plan: exactly round(ratio * n) tokens are hidden.
pub fn sample_mask(n_tokens: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(Error::Precondition(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let k = (ratio * n_tokens as f64).round() as usize;
    if k == 0 || k >= n_tokens {
        return Err(Error::Precondition(format!(
            "mask ratio {ratio} over {n_tokens} tokens leaves {k} masked; need 1..={}",
            n_tokens.saturating_sub(1)
        )));
    }
    let mut masked = sample_distinct(rng, n_tokens, k);
    masked.sort_unstable();
    let mut is_masked = vec![false; n_tokens];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..n_tokens).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { n_tokens, masked, visible })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaeConfig {
    pub mask_ratio: f64,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub dec_mlp_ratio: usize,
    /// Normalize each target patch to zero mean and unit variance before
    /// computing the loss.
    pub per_patch_norm: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            mask_ratio: 0.75,
            dec_dim: 96,
            dec_depth: 8,
            dec_heads: 4,
            dec_mlp_ratio: 4,
            per_patch_norm: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaeModel {
    pub encoder: VitEncoder,
    pub proj: Linear,
    pub mask_token: Param,
    pub dec_pos: Param,
    pub dec_blocks: Vec<VitBlock>,
    pub dec_norm: LayerNorm,
    pub head: Linear,
    pub cfg: MaeConfig,
}

pub struct MaeCache {
    enc: VitCache,
    proj: LinearCache,
    dec_blocks: Vec<VitBlockCache>,
    dec_norm: LayerNormCache,
    head: LinearCache,
    plan: MaskPlan,
    /// d(loss)/d(pred), zero at every visible position.
    pub dpred: Array3<f64>,
}

impl MaeModel {
    pub fn new(vit_cfg: VitConfig, cfg: MaeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.dec_dim == 0 || cfg.dec_heads == 0 || cfg.dec_dim % cfg.dec_heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} must be a positive multiple of heads {}",
                cfg.dec_dim, cfg.dec_heads
            )));
        }
        if cfg.dec_depth == 0 {
            return Err(Error::Config("decoder depth must be positive".into()));
        }
        let encoder = VitEncoder::new(vit_cfg, rng)?;
        let n = encoder.n_tokens();
        let enc_dim = encoder.cfg.embed_dim;
        let patch_dim = encoder.cfg.patch_dim();
        let proj = Linear::new(enc_dim, cfg.dec_dim, INIT_STD, rng);
        let mask_token = Param::normal(&[cfg.dec_dim], INIT_STD, rng);
        let dec_pos = Param::normal(&[n, cfg.dec_dim], INIT_STD, rng);
        let dec_blocks = (0..cfg.dec_depth)
            .map(|_| VitBlock::new(cfg.dec_dim, cfg.dec_heads, cfg.dec_mlp_ratio, INIT_STD, rng))
            .collect();
        let dec_norm = LayerNorm::new(cfg.dec_dim);
        let head = Linear::new(cfg.dec_dim, patch_dim, INIT_STD, rng);
        Ok(MaeModel { encoder, proj, mask_token, dec_pos, dec_blocks, dec_norm, head, cfg })
    }

    /// Forward plus loss; targets are the input tokens themselves.
    /// Returns predictions of shape (B, N, p^3) for every slot.
    pub fn forward(
        &self,
        tokens: &Array3<f64>,
        plan: &MaskPlan,
    ) -> Result<(f64, Array3<f64>, MaeCache)> {
        plan.validate()?;
        if plan.n_tokens != self.encoder.n_tokens() {
            return Err(Error::Shape(format!(
                "plan covers {} tokens, encoder expects {}",
                plan.n_tokens,
                self.encoder.n_tokens()
            )));
        }
        let (bs, n, _pd) = tokens.dim();
        let dd = self.cfg.dec_dim;

        let (enc_out, enc_cache) = self.encoder.encode(tokens, Some(&plan.visible))?;
        let nv = plan.visible.len();
        let enc_flat = enc_out.to_shape((bs * nv, self.encoder.cfg.embed_dim)).unwrap().to_owned();
        let (proj_out, proj_cache) = self.proj.forward(&enc_flat);

        // Rebuild the full-length sequence: projected tokens at visible
        // slots, the shared mask token at masked slots, plus decoder
        // position embeddings everywhere.
        let mut x = Array3::zeros((bs, n, dd));
        let mt = &self.mask_token.value;
        for b in 0..bs {
            for (i, &v) in plan.visible.iter().enumerate() {
                let row = proj_out.row(b * nv + i);
                x.slice_mut(s![b, v, ..]).assign(&row);
            }
            for &m in &plan.masked {
                let mut row = x.slice_mut(s![b, m, ..]);
                for (j, rv) in row.iter_mut().enumerate() {
                    *rv = mt[j];
                }
            }
        }
        let pos = self.dec_pos.value_as2(n, dd);
        for b in 0..bs {
            let mut xb = x.slice_mut(s![b, .., ..]);
            xb += &pos;
        }

        let mut dec_caches = Vec::with_capacity(self.dec_blocks.len());
        for blk in &self.dec_blocks {
            let (y, c) = blk.forward(&x);
            dec_caches.push(c);
            x = y;
        }
        let xf = x.to_shape((bs * n, dd)).unwrap().to_owned();
        let (xn, dec_norm_cache) = self.dec_norm.forward(&xf);
        let (pred_flat, head_cache) = self.head.forward(&xn);
        let pd = self.encoder.cfg.patch_dim();
        let pred = pred_flat.into_shape_with_order((bs, n, pd)).unwrap();

        let targets = self.targets_for(tokens);
        let (loss, dpred) = masked_mse(&pred, &targets, plan)?;
        let cache = MaeCache {
            enc: enc_cache,
            proj: proj_cache,
            dec_blocks: dec_caches,
            dec_norm: dec_norm_cache,
            head: head_cache,
            plan: plan.clone(),
            dpred,
        };
        Ok((loss, pred, cache))
    }

    /// Reconstruction targets; per-patch normalization is applied when
    /// configured.
    pub fn targets_for(&self, tokens: &Array3<f64>) -> Array3<f64> {
        if !self.cfg.per_patch_norm {
            return tokens.clone();
        }
        let mut t = tokens.clone();
        for mut patch in t.rows_mut() {
            let n = patch.len() as f64;
            let mu = patch.sum() / n;
            let var = patch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            patch.mapv_inplace(|v| (v - mu) * inv);
        }
        t
    }

    /// Accumulate parameter gradients for the loss computed by [Self::forward].
    pub fn backward(&mut self, cache: &MaeCache) {
        let (bs, n, pd) = cache.dpred.dim();
        let dd = self.cfg.dec_dim;
        let dflat = cache.dpred.to_shape((bs * n, pd)).unwrap().to_owned();
        let dxn = self.head.backward(&dflat, &cache.head);
        let dxf = self.dec_norm.backward(&dxn, &cache.dec_norm);
        let mut dx = dxf.into_shape_with_order((bs, n, dd)).unwrap();
        for i in (0..self.dec_blocks.len()).rev() {
            dx = self.dec_blocks[i].backward(&dx, &cache.dec_blocks[i]);
        }
        // Position embeddings receive gradient at every slot.
        {
            let mut pg = self.dec_pos.grad_as2_mut(n, dd);
            for b in 0..bs {
                pg += &dx.slice(s![b, .., ..]);
            }
        }
        // The shared mask token accumulates over every masked slot of every
        // batch item.
        for b in 0..bs {
            for &m in &cache.plan.masked {
                for j in 0..dd {
                    self.mask_token.grad[j] += dx[[b, m, j]];
                }
            }
        }
        // Visible slots flow back through the projection into the encoder.
        let nv = cache.plan.visible.len();
        let mut dproj = Array2::zeros((bs * nv, dd));
        for b in 0..bs {
            for (i, &v) in cache.plan.visible.iter().enumerate() {
                dproj.row_mut(b * nv + i).assign(&dx.slice(s![b, v, ..]));
            }
        }
        let denc_flat = self.proj.backward(&dproj, &cache.proj);
        let denc = denc_flat
            .into_shape_with_order((bs, nv, self.encoder.cfg.embed_dim))
            .unwrap();
        self.encoder.encode_backward(&denc, &cache.enc);
    }

    /// Reconstruct one volume's patch sequence: model predictions at masked
    /// slots, original content at visible slots.
    pub fn reconstruct(
        &self,
        seq: &PatchSequence,
        plan: &MaskPlan,
    ) -> Result<(Array2<f64>, f64)> {
        let tokens = crate::vit::stack_tokens(&[&seq.tokens])?;
        let (loss, pred, _) = self.forward(&tokens, plan)?;
        let mut out = seq.tokens.clone();
        for &m in &plan.masked {
            out.row_mut(m).assign(&pred.slice(s![0, m, ..]));
        }
        Ok((out, loss))
    }
}

impl Module for MaeModel {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.proj.visit_params(&join(prefix, "dec_proj"), f);
        f(&join(prefix, "mask_token"), &mut self.mask_token);
        f(&join(prefix, "dec_pos"), &mut self.dec_pos);
        for (i, blk) in self.dec_blocks.iter_mut().enumerate() {
            blk.visit_params(&join(prefix, &format!("dec_block{:02}", i + 1)), f);
        }
        self.dec_norm.visit_params(&join(prefix, "dec_norm"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

/// Mean squared error over masked pixels, pooled across the whole batch.
/// Also returns d(loss)/d(pred); rows at visible slots are exactly zero.
pub fn masked_mse(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    plan: &MaskPlan,
) -> Result<(f64, Array3<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let (bs, n, pd) = pred.dim();
    if n != plan.n_tokens {
        return Err(Error::Shape(format!(
            "plan covers {} tokens, tensors have {n}",
            plan.n_tokens
        )));
    }
    let count = (bs * plan.masked.len() * pd) as f64;
    let mut loss = 0.0;
    let mut dpred = Array3::zeros((bs, n, pd));
    for b in 0..bs {
        for &m in &plan.masked {
            for j in 0..pd {
                let e = pred[[b, m, j]] - target[[b, m, j]];
                loss += e * e;
                dpred[[b, m, j]] = 2.0 * e / count;
            }
        }
    }
    Ok((loss / count, dpred))
}

/// Masked reconstruction error of a model on one token batch, without
/// keeping any cache. Used for before/after comparisons.
pub fn masked_error(model: &MaeModel, tokens: &Array3<f64>, plan: &MaskPlan) -> Result<f64> {
    let (loss, _, _) = model.forward(tokens, plan)?;
    Ok(loss)
}

/// Per-slot mask indicator as a float vector, 1 at masked slots.
pub fn mask_indicator(plan: &MaskPlan) -> Array1<f64> {
    let mut m = Array1::zeros(plan.n_tokens);
    for &i in &plan.masked {
        m[i] = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, STREAM_MASK};

    fn tiny_vit() -> VitConfig {
        VitConfig {
            patch_size: 2,
            grid: [2, 2, 1],
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            taps: vec![2],
        }
    }

    fn tiny_mae() -> MaeConfig {
        MaeConfig {
            mask_ratio: 0.5,
            dec_dim: 6,
            dec_depth: 2,
            dec_heads: 2,
            dec_mlp_ratio: 2,
            per_patch_norm: false,
        }
    }

    fn toy_tokens(bs: usize, n: usize, p: usize) -> Array3<f64> {
        Array3::from_shape_fn((bs, n, p), |(b, i, j)| {
            ((b * 61 + i * 7 + j) as f64 * 0.311).cos()
        })
    }

    #[test]
    fn sample_mask_counts_exact() {
        let mut rng = seeded(7, STREAM_MASK);
        let plan = sample_mask(64, 0.75, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 48);
        assert_eq!(plan.visible.len(), 16);
        plan.validate().unwrap();
        // round() semantics, not floor: 0.5 over 7 tokens keeps 4 masked.
        let plan = sample_mask(7, 0.5, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 4);
    }

    #[test]
    fn sample_mask_rejects_degenerate() {
        let mut rng = seeded(8, STREAM_MASK);
        assert!(sample_mask(10, 0.01, &mut rng).is_err()); // rounds to 0
        assert!(sample_mask(10, 0.99, &mut rng).is_err()); // rounds to 10
        assert!(sample_mask(10, -0.1, &mut rng).is_err());
        assert!(sample_mask(10, 1.5, &mut rng).is_err());
        assert!(sample_mask(16, 0.75, &mut rng).is_ok());
    }

    #[test]
    fn sample_mask_deterministic_per_seed() {
        let a = sample_mask(64, 0.75, &mut seeded(5, STREAM_MASK)).unwrap();
        let b = sample_mask(64, 0.75, &mut seeded(5, STREAM_MASK)).unwrap();
        let c = sample_mask(64, 0.75, &mut seeded(6, STREAM_MASK)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn masked_mse_matches_hand_pool() {
        let plan = MaskPlan { n_tokens: 3, masked: vec![0, 2], visible: vec![1] };
        let pred = toy_tokens(2, 3, 4);
        let mut target = pred.clone();
        target[[0, 0, 1]] += 3.0; // masked slot
        target[[1, 2, 3]] -= 1.0; // masked slot
        target[[0, 1, 0]] += 100.0; // visible slot, must not matter
        let (loss, dpred) = masked_mse(&pred, &target, &plan).unwrap();
        // Pool: 2 batches x 2 masked x 4 pixels = 16 terms.
        let want = (9.0 + 1.0) / 16.0;
        assert!((loss - want).abs() < 1e-12);
        // Visible rows exactly zero.
        for b in 0..2 {
            for j in 0..4 {
                assert_eq!(dpred[[b, 1, j]], 0.0);
            }
        }
        assert!((dpred[[0, 0, 1]] - 2.0 * (-3.0) / 16.0).abs() < 1e-15);
    }

    #[test]
    fn forward_loss_zero_when_pred_equals_target() {
        let plan = MaskPlan { n_tokens: 2, masked: vec![0], visible: vec![1] };
        let pred = toy_tokens(1, 2, 4);
        let (loss, dpred) = masked_mse(&pred, &pred.clone(), &plan).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dpred.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_backward_matches_fd() {
        let mut rng = seeded(60, 0);
        let mut model = MaeModel::new(tiny_vit(), tiny_mae(), &mut rng).unwrap();
        let tokens = toy_tokens(1, 4, 8);
        let plan = MaskPlan { n_tokens: 4, masked: vec![1, 3], visible: vec![0, 2] };
        let (_, _, cache) = model.forward(&tokens, &plan).unwrap();
        model.backward(&cache);
        let tc = tokens.clone();
        let pc = plan.clone();
        let mut loss = |m: &mut MaeModel| {
            let (l, _, _) = m.forward(&tc, &pc).unwrap();
            l
        };
        let report = crate::nn::gradcheck::check_param_grads(&mut model, &mut loss, 1e-5, 53);
        assert!(
            report.passes(1e-3),
            "worst {} at {}: {}",
            report.worst_param,
            report.worst_index,
            report.max_rel_err
        );
    }

    #[test]
    fn mask_token_shared_across_slots() {
        let mut rng = seeded(61, 0);
        let mut model = MaeModel::new(tiny_vit(), tiny_mae(), &mut rng).unwrap();
        let tokens = toy_tokens(1, 4, 8);
        let plan = MaskPlan { n_tokens: 4, masked: vec![1, 3], visible: vec![0, 2] };
        let (_, pred1, _) = model.forward(&tokens, &plan).unwrap();
        model.mask_token.value[0] += 0.5;
        let (_, pred2, _) = model.forward(&tokens, &plan).unwrap();
        // Both masked slots must move; visible-slot predictions also shift
        // through attention, so check masked slots moved at all.
        for &m in &plan.masked {
            let delta: f64 = (0..8).map(|j| (pred1[[0, m, j]] - pred2[[0, m, j]]).abs()).sum();
            assert!(delta > 1e-9, "masked slot {m} did not react to mask token");
        }
    }

    #[test]
    fn reconstruct_keeps_visible_patches_verbatim() {
        let mut rng = seeded(62, 0);
        let model = MaeModel::new(tiny_vit(), tiny_mae(), &mut rng).unwrap();
        let vol_data = ndarray::Array3::from_shape_fn((2, 4, 4), |(z, y, x)| {
            (z * 16 + y * 4 + x) as f32
        });
        let vol =
            crate::volume::Volume::new(vol_data, [1.0, 1.0, 1.0], crate::volume::VolumeKind::Image)
                .unwrap();
        let seq = crate::volume::patchify(&vol, 2).unwrap();
        let plan = MaskPlan { n_tokens: 4, masked: vec![0, 2], visible: vec![1, 3] };
        let (recon, _) = model.reconstruct(&seq, &plan).unwrap();
        for &v in &plan.visible {
            for j in 0..8 {
                assert_eq!(recon[[v, j]], seq.tokens[[v, j]]);
            }
        }
        for &m in &plan.masked {
            let moved = (0..8).any(|j| recon[[m, j]] != seq.tokens[[m, j]]);
            assert!(moved);
        }
    }

    #[test]
    fn per_patch_norm_targets() {
        let mut rng = seeded(63, 0);
        let mut cfg = tiny_mae();
        cfg.per_patch_norm = true;
        let model = MaeModel::new(tiny_vit(), cfg, &mut rng).unwrap();
        let tokens = toy_tokens(1, 4, 8);
        let t = model.targets_for(&tokens);
        for row in t.rows() {
            let mu: f64 = row.sum() / 8.0;
            assert!(mu.abs() < 1e-12);
        }
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let mut rng = seeded(64, 0);
        let model = MaeModel::new(tiny_vit(), tiny_mae(), &mut rng).unwrap();
        let a = toy_tokens(1, 4, 8);
        let mut b = toy_tokens(1, 4, 8);
        b.mapv_inplace(|v| v * 0.7 + 0.1);
        let plan = MaskPlan { n_tokens: 4, masked: vec![0, 1], visible: vec![2, 3] };
        let mut ab = Array3::zeros((2, 4, 8));
        ab.slice_mut(s![0, .., ..]).assign(&a.slice(s![0, .., ..]));
        ab.slice_mut(s![1, .., ..]).assign(&b.slice(s![0, .., ..]));
        let mut ba = Array3::zeros((2, 4, 8));
        ba.slice_mut(s![0, .., ..]).assign(&b.slice(s![0, .., ..]));
        ba.slice_mut(s![1, .., ..]).assign(&a.slice(s![0, .., ..]));
        let (l1, _, _) = model.forward(&ab, &plan).unwrap();
        let (l2, _, _) = model.forward(&ba, &plan).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }
}
