//! 3D vision transformer over patch token sequences.
//!
//! The encoder owns a linear patch embedding, learnable per-token position
//! embeddings, a stack of pre-norm blocks, and a final LayerNorm. Two entry
//! points: [VitEncoder::encode] runs on a caller-chosen token subset and
//! applies the final norm (the reconstruction path); [VitEncoder::encode_with_taps]
//! runs on all tokens and returns raw block outputs at the tap layers (the
//! segmentation path), with no final norm.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::block::{VitBlock, VitBlockCache};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::{join, Module, Param, ParamVisitor};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VitConfig {
    pub patch_size: usize,
    /// Tokens per axis, [gx, gy, gz]; token rank is x-fastest.
    pub grid: [usize; 3],
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices whose outputs feed the decoder.
    pub taps: Vec<usize>,
}

impl VitConfig {
    pub fn n_tokens(&self) -> usize {
        self.grid[0] * self.grid[1] * self.grid[2]
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.grid.iter().any(|&g| g == 0) {
            return Err(Error::Config("patch size and grid dims must be positive".into()));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth and mlp_ratio must be positive".into()));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("taps must be non-empty".into()));
        }
        for w in self.taps.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config("taps must be strictly increasing".into()));
            }
        }
        let last = *self.taps.last().unwrap();
        if self.taps[0] < 1 || last > self.depth {
            return Err(Error::Config(format!(
                "taps must lie in 1..={}, got {:?}",
                self.depth, self.taps
            )));
        }
        if last != self.depth {
            return Err(Error::Config(format!(
                "deepest tap must be the final block {}, got {}",
                self.depth, last
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub cfg: VitConfig,
    pub embed: Linear,
    pub pos: Param,
    pub blocks: Vec<VitBlock>,
    pub final_norm: LayerNorm,
}

pub struct VitCache {
    embed_cache: LinearCache,
    block_caches: Vec<VitBlockCache>,
    keep: Vec<usize>,
    final_norm_cache: Option<LayerNormCache>,
    batch: usize,
    n_kept: usize,
}

impl VitCache {
    pub fn kept(&self) -> &[usize] {
        &self.keep
    }
}

fn flat2(x: &Array3<f64>) -> Array2<f64> {
    let (b, n, d) = x.dim();
    x.to_shape((b * n, d)).unwrap().to_owned()
}

fn unflat2(x: Array2<f64>, b: usize, n: usize) -> Array3<f64> {
    let d = x.ncols();
    x.into_shape_with_order((b, n, d)).unwrap()
}

impl VitEncoder {
    pub fn new(cfg: VitConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let embed = Linear::new(cfg.patch_dim(), cfg.embed_dim, INIT_STD, rng);
        let pos = Param::normal(&[cfg.n_tokens(), cfg.embed_dim], INIT_STD, rng);
        let blocks = (0..cfg.depth)
            .map(|_| VitBlock::new(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, INIT_STD, rng))
            .collect();
        let final_norm = LayerNorm::new(cfg.embed_dim);
        Ok(VitEncoder { cfg, embed, pos, blocks, final_norm })
    }

    pub fn n_tokens(&self) -> usize {
        self.cfg.n_tokens()
    }

    fn validate_tokens(&self, tokens: &Array3<f64>) -> Result<()> {
        let (_, n, p) = tokens.dim();
        if n != self.cfg.n_tokens() {
            return Err(Error::Shape(format!(
                "expected {} tokens, got {n}",
                self.cfg.n_tokens()
            )));
        }
        if p != self.cfg.patch_dim() {
            return Err(Error::Shape(format!(
                "expected patch dim {}, got {p}",
                self.cfg.patch_dim()
            )));
        }
        Ok(())
    }

    fn validate_keep(&self, keep: &[usize]) -> Result<()> {
        if keep.is_empty() {
            return Err(Error::Precondition("keep set must be non-empty".into()));
        }
        let n = self.cfg.n_tokens();
        for w in keep.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Precondition(
                    "keep indices must be strictly increasing".into(),
                ));
            }
        }
        if *keep.last().unwrap() >= n {
            return Err(Error::Precondition(format!(
                "keep index {} out of range for {n} tokens",
                keep.last().unwrap()
            )));
        }
        Ok(())
    }

    /// Embed the kept token subset and add the matching position embeddings.
    fn embed_selected(
        &self,
        tokens: &Array3<f64>,
        keep: &[usize],
    ) -> (Array3<f64>, LinearCache) {
        let (bs, _, p) = tokens.dim();
        let nk = keep.len();
        let mut sel = Array2::zeros((bs * nk, p));
        for b in 0..bs {
            for (i, &k) in keep.iter().enumerate() {
                sel.row_mut(b * nk + i).assign(&tokens.slice(s![b, k, ..]));
            }
        }
        let (e, cache) = self.embed.forward(&sel);
        let mut x = unflat2(e, bs, nk);
        let pos = self.pos.value_as2(self.cfg.n_tokens(), self.cfg.embed_dim);
        for b in 0..bs {
            for (i, &k) in keep.iter().enumerate() {
                let mut row = x.slice_mut(s![b, i, ..]);
                row += &pos.row(k);
            }
        }
        (x, cache)
    }

    fn check_finite(x: &Array3<f64>, layer: usize) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite activation after encoder block {layer}"
            )));
        }
        Ok(())
    }

    /// Run blocks over the kept tokens and apply the final norm.
    /// `keep = None` means the full token set.
    pub fn encode(
        &self,
        tokens: &Array3<f64>,
        keep: Option<&[usize]>,
    ) -> Result<(Array3<f64>, VitCache)> {
        self.validate_tokens(tokens)?;
        let all: Vec<usize> = (0..self.cfg.n_tokens()).collect();
        let keep: Vec<usize> = match keep {
            Some(k) => {
                self.validate_keep(k)?;
                k.to_vec()
            }
            None => all,
        };
        let (mut x, embed_cache) = self.embed_selected(tokens, &keep);
        let bs = tokens.dim().0;
        let nk = keep.len();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let (y, cache) = blk.forward(&x);
            Self::check_finite(&y, i + 1)?;
            block_caches.push(cache);
            x = y;
        }
        let (yf, fc) = self.final_norm.forward(&flat2(&x));
        let out = unflat2(yf, bs, nk);
        Ok((
            out,
            VitCache {
                embed_cache,
                block_caches,
                keep,
                final_norm_cache: Some(fc),
                batch: bs,
                n_kept: nk,
            },
        ))
    }

    /// Backward for [VitEncoder::encode]; accumulates parameter gradients.
    pub fn encode_backward(&mut self, dy: &Array3<f64>, cache: &VitCache) {
        let (bs, nk) = (cache.batch, cache.n_kept);
        let g = self
            .final_norm
            .backward(&flat2(dy), cache.final_norm_cache.as_ref().expect("encode cache"));
        let mut g = unflat2(g, bs, nk);
        for i in (0..self.blocks.len()).rev() {
            g = self.blocks[i].backward(&g, &cache.block_caches[i]);
        }
        self.embed_pos_backward(&g, cache);
    }

    /// Run blocks over the full token set; return raw outputs of tap layers.
    pub fn encode_with_taps(
        &self,
        tokens: &Array3<f64>,
    ) -> Result<(BTreeMap<usize, Array3<f64>>, VitCache)> {
        self.validate_tokens(tokens)?;
        let keep: Vec<usize> = (0..self.cfg.n_tokens()).collect();
        let (mut x, embed_cache) = self.embed_selected(tokens, &keep);
        let bs = tokens.dim().0;
        let nk = keep.len();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut taps = BTreeMap::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let (y, cache) = blk.forward(&x);
            Self::check_finite(&y, i + 1)?;
            block_caches.push(cache);
            x = y;
            if self.cfg.taps.contains(&(i + 1)) {
                taps.insert(i + 1, x.clone());
            }
        }
        Ok((
            taps,
            VitCache {
                embed_cache,
                block_caches,
                keep,
                final_norm_cache: None,
                batch: bs,
                n_kept: nk,
            },
        ))
    }

    /// Backward for [VitEncoder::encode_with_taps]; `dtaps` maps tap layer to
    /// the gradient of its output.
    pub fn taps_backward(&mut self, dtaps: &BTreeMap<usize, Array3<f64>>, cache: &VitCache) {
        let (bs, nk) = (cache.batch, cache.n_kept);
        let d = self.cfg.embed_dim;
        let mut g = Array3::zeros((bs, nk, d));
        for i in (0..self.blocks.len()).rev() {
            if let Some(dt) = dtaps.get(&(i + 1)) {
                g += dt;
            }
            g = self.blocks[i].backward(&g, &cache.block_caches[i]);
        }
        self.embed_pos_backward(&g, cache);
    }

    fn embed_pos_backward(&mut self, g: &Array3<f64>, cache: &VitCache) {
        let bs = cache.batch;
        let d = self.cfg.embed_dim;
        let n = self.cfg.n_tokens();
        {
            let mut pg = self.pos.grad_as2_mut(n, d);
            for b in 0..bs {
                for (i, &k) in cache.keep.iter().enumerate() {
                    let mut row = pg.row_mut(k);
                    row += &g.slice(s![b, i, ..]);
                }
            }
        }
        let _ = self.embed.backward(&flat2(g), &cache.embed_cache);
    }

    /// Attention weights of block `layer` (1-based) for one batch item and
    /// head, from a cache produced this forward pass.
    pub fn attention(cache: &VitCache, layer: usize, b: usize, h: usize) -> &Array2<f64> {
        cache.block_caches[layer - 1].attention(b, h)
    }
}

impl Module for VitEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.embed.visit_params(&join(prefix, "embed"), f);
        f(&join(prefix, "pos"), &mut self.pos);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_params(&join(prefix, &format!("block{:02}", i + 1)), f);
        }
        self.final_norm.visit_params(&join(prefix, "final_norm"), f);
    }
}

/// Stack per-volume token matrices into one (B, N, p^3) batch.
pub fn stack_tokens(seqs: &[&Array2<f64>]) -> Result<Array3<f64>> {
    if seqs.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let (n, p) = seqs[0].dim();
    let mut out = Array3::zeros((seqs.len(), n, p));
    for (b, s) in seqs.iter().enumerate() {
        if s.dim() != (n, p) {
            return Err(Error::Shape("token shapes differ across batch".into()));
        }
        out.index_axis_mut(Axis(0), b).assign(s);
    }
    Ok(out)
}
