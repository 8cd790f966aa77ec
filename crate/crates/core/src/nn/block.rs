//! Pre-norm transformer block: x1 = x + MHSA(LN(x)); y = x1 + MLP(LN(x1)).

use ndarray::{Array2, Array3, ArrayD, Ix2};
use rand_chacha::ChaCha8Rng;

use super::act::{gelu_backward, gelu_forward};
use super::attention::{AttnCache, MultiHeadAttention};
use super::linear::{Linear, LinearCache};
use super::norm::{LayerNorm, LayerNormCache};
use super::{join, Module, ParamVisitor};

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    c1: LinearCache,
    c2: LinearCache,
    pre_act: Array2<f64>,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Mlp { fc1: Linear::new(dim, hidden, std, rng), fc2: Linear::new(hidden, dim, std, rng) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let (h, c1) = self.fc1.forward(x);
        let a: ArrayD<f64> = gelu_forward(&h.view().into_dyn());
        let a2 = a.into_dimensionality::<Ix2>().unwrap();
        let (y, c2) = self.fc2.forward(&a2);
        (y, MlpCache { c1, c2, pre_act: h })
    }

    pub fn backward(&mut self, dy: &Array2<f64>, cache: &MlpCache) -> Array2<f64> {
        let da = self.fc2.backward(dy, &cache.c2);
        let dh = gelu_backward(&da.view().into_dyn(), &cache.pre_act.view().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        self.fc1.backward(&dh, &cache.c1)
    }
}

impl Module for Mlp {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub dim: usize,
}

pub struct VitBlockCache {
    n1: LayerNormCache,
    attn: AttnCache,
    n2: LayerNormCache,
    mlp: MlpCache,
    batch: usize,
    tokens: usize,
}

impl VitBlockCache {
    pub fn attention(&self, b: usize, h: usize) -> &Array2<f64> {
        self.attn.attention(b, h)
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

impl VitBlock {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        VitBlock {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, std, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, dim * mlp_ratio, std, rng),
            dim,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, VitBlockCache) {
        let (bs, n, _) = x.dim();
        let (xn, n1) = self.norm1.forward(&flat2(x));
        let (att, attn_cache) = self.attn.forward(&unflat2(xn, bs, n));
        let x1 = x + &att;
        let (x1n, n2) = self.norm2.forward(&flat2(&x1));
        let (m, mlp_cache) = self.mlp.forward(&x1n);
        let y = &x1 + &unflat2(m, bs, n);
        (y, VitBlockCache { n1, attn: attn_cache, n2, mlp: mlp_cache, batch: bs, tokens: n })
    }

    pub fn backward(&mut self, dy: &Array3<f64>, cache: &VitBlockCache) -> Array3<f64> {
        let (bs, n) = (cache.batch, cache.tokens);
        // y = x1 + mlp(norm2(x1))  =>  dx1 = dy + norm2_back(mlp_back(dy))
        let dm = self.mlp.backward(&flat2(dy), &cache.mlp);
        let dx1 = dy + &unflat2(self.norm2.backward(&dm, &cache.n2), bs, n);
        // x1 = x + attn(norm1(x))  =>  dx = dx1 + norm1_back(attn_back(dx1))
        let datt = self.attn.backward(&dx1, &cache.attn);
        let dx = &dx1 + &unflat2(self.norm1.backward(&flat2(&datt), &cache.n1), bs, n);
        dx
    }

    /// Zero the attention and MLP output projections; the block then acts as
    /// the identity on any input.
    pub fn zero_output_projections(&mut self) {
        self.attn.wo.w.value.fill(0.0);
        self.attn.wo.b.value.fill(0.0);
        self.mlp.fc2.w.value.fill(0.0);
        self.mlp.fc2.b.value.fill(0.0);
    }
}

impl Module for VitBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }
}
