//! Multi-head self-attention over (B, N, D) token stacks.

use ndarray::{s, Array2, Array3};
use rand_chacha::ChaCha8Rng;

use super::linear::{Linear, LinearCache};
use super::{join, softmax_rows, softmax_rows_backward, Module, ParamVisitor};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
}

pub struct AttnCache {
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    o_cache: LinearCache,
    /// Post-projection activations, flattened to (B*N, D).
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights, [b][h] -> (N, N).
    attn: Vec<Vec<Array2<f64>>>,
    batch: usize,
    tokens: usize,
}

impl AttnCache {
    /// Attention matrix for one (batch, head); rows sum to 1.
    pub fn attention(&self, b: usize, h: usize) -> &Array2<f64> {
        &self.attn[b][h]
    }
}

fn flatten(x: &Array3<f64>) -> Array2<f64> {
    let (b, n, d) = x.dim();
    x.to_shape((b * n, d)).unwrap().to_owned()
}

fn unflatten(x: Array2<f64>, b: usize, n: usize) -> Array3<f64> {
    let d = x.ncols();
    x.into_shape_with_order((b, n, d)).unwrap()
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim must divide evenly into heads");
        MultiHeadAttention {
            wq: Linear::new(dim, dim, std, rng),
            wk: Linear::new(dim, dim, std, rng),
            wv: Linear::new(dim, dim, std, rng),
            wo: Linear::new(dim, dim, std, rng),
            dim,
            heads,
            head_dim: dim / heads,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, AttnCache) {
        let (bs, n, d) = x.dim();
        debug_assert_eq!(d, self.dim);
        let flat = flatten(x);
        let (q, q_cache) = self.wq.forward(&flat);
        let (k, k_cache) = self.wk.forward(&flat);
        let (v, v_cache) = self.wv.forward(&flat);

        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut concat = Array2::<f64>::zeros((bs * n, d));
        let mut attn = Vec::with_capacity(bs);
        for b in 0..bs {
            let rows = b * n..(b + 1) * n;
            let qb = q.slice(s![rows.clone(), ..]);
            let kb = k.slice(s![rows.clone(), ..]);
            let vb = v.slice(s![rows.clone(), ..]);
            let mut heads_b = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let cols = h * self.head_dim..(h + 1) * self.head_dim;
                let qh = qb.slice(s![.., cols.clone()]);
                let kh = kb.slice(s![.., cols.clone()]);
                let vh = vb.slice(s![.., cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|v| v * scale);
                softmax_rows(&mut scores);
                let oh = scores.dot(&vh);
                concat.slice_mut(s![rows.clone(), cols]).assign(&oh);
                heads_b.push(scores);
            }
            attn.push(heads_b);
        }
        let (y, o_cache) = self.wo.forward(&concat);
        let cache = AttnCache {
            q_cache,
            k_cache,
            v_cache,
            o_cache,
            q,
            k,
            v,
            attn,
            batch: bs,
            tokens: n,
        };
        (unflatten(y, bs, n), cache)
    }

    pub fn backward(&mut self, dy: &Array3<f64>, cache: &AttnCache) -> Array3<f64> {
        let (bs, n) = (cache.batch, cache.tokens);
        let d = self.dim;
        let dflat = flatten(dy);
        let dconcat = self.wo.backward(&dflat, &cache.o_cache);

        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut dq = Array2::<f64>::zeros((bs * n, d));
        let mut dk = Array2::<f64>::zeros((bs * n, d));
        let mut dv = Array2::<f64>::zeros((bs * n, d));
        for b in 0..bs {
            let rows = b * n..(b + 1) * n;
            for h in 0..self.heads {
                let cols = h * self.head_dim..(h + 1) * self.head_dim;
                let doh = dconcat.slice(s![rows.clone(), cols.clone()]);
                let a = &cache.attn[b][h];
                let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
                let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
                let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
                let da = doh.dot(&vh.t());
                let dvh = a.t().dot(&doh);
                let ds = softmax_rows_backward(&da, a);
                let dqh = ds.dot(&kh).mapv(|v| v * scale);
                let dkh = ds.t().dot(&qh).mapv(|v| v * scale);
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&dqh);
                dk.slice_mut(s![rows.clone(), cols.clone()]).assign(&dkh);
                dv.slice_mut(s![rows.clone(), cols]).assign(&dvh);
            }
        }
        let mut dx = self.wq.backward(&dq, &cache.q_cache);
        dx += &self.wk.backward(&dk, &cache.k_cache);
        dx += &self.wv.backward(&dv, &cache.v_cache);
        unflatten(dx, bs, n)
    }
}

impl Module for MultiHeadAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.wq.visit_params(&join(prefix, "wq"), f);
        self.wk.visit_params(&join(prefix, "wk"), f);
        self.wv.visit_params(&join(prefix, "wv"), f);
        self.wo.visit_params(&join(prefix, "wo"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::collect_grads;
    use ndarray::Array3;

    fn toy_input(bs: usize, n: usize, d: usize) -> Array3<f64> {
        Array3::from_shape_fn((bs, n, d), |(b, i, j)| {
            ((b * 97 + i * 13 + j * 5) as f64 * 0.37).sin() * 0.8
        })
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = crate::rng::seeded(11, 0);
        let mha = MultiHeadAttention::new(8, 2, 0.2, &mut rng);
        let x = toy_input(2, 5, 8);
        let (_, cache) = mha.forward(&x);
        for b in 0..2 {
            for h in 0..2 {
                let a = cache.attention(b, h);
                assert_eq!(a.dim(), (5, 5));
                for row in a.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_exactly_one() {
        let mut rng = crate::rng::seeded(12, 0);
        let mha = MultiHeadAttention::new(8, 2, 0.2, &mut rng);
        let x = toy_input(1, 1, 8);
        let (_, cache) = mha.forward(&x);
        for h in 0..2 {
            assert_eq!(cache.attention(0, h)[[0, 0]], 1.0);
        }
    }

    #[test]
    fn backward_input_grad_matches_fd() {
        let mut rng = crate::rng::seeded(13, 0);
        let mut mha = MultiHeadAttention::new(6, 2, 0.3, &mut rng);
        let x = toy_input(2, 3, 6);
        let loss = |m: &MultiHeadAttention, x: &Array3<f64>| -> f64 {
            let (y, _) = m.forward(x);
            y.mapv(|v| v * v * 0.5).sum()
        };
        let (y, cache) = mha.forward(&x);
        let dx = mha.backward(&y.clone(), &cache);
        let h = 1e-5;
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..6 {
                    let mut xp = x.clone();
                    xp[[b, i, j]] += h;
                    let mut xm = x.clone();
                    xm[[b, i, j]] -= h;
                    let fd = (loss(&mha, &xp) - loss(&mha, &xm)) / (2.0 * h);
                    let a = dx[[b, i, j]];
                    assert!(
                        (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-6,
                        "dx[{b},{i},{j}]: fd={fd} analytic={a}"
                    );
                }
            }
        }
    }

    #[test]
    fn backward_param_grads_match_fd() {
        let mut rng = crate::rng::seeded(14, 0);
        let mut mha = MultiHeadAttention::new(6, 3, 0.3, &mut rng);
        let x = toy_input(1, 4, 6);
        let (y, cache) = mha.forward(&x);
        let dy = y.mapv(|v| v * 0.7 + 0.1);
        mha.backward(&dy, &cache);
        let grads = collect_grads(&mut mha);
        let h = 1e-5;
        // Loss matching dy: sum(0.35 y^2 + 0.1 y).
        let loss = |m: &MultiHeadAttention| -> f64 {
            let (y, _) = m.forward(&x);
            y.mapv(|v| 0.35 * v * v + 0.1 * v).sum()
        };
        for name in ["wq.w", "wk.b", "wv.w", "wo.w"] {
            let g = grads
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, g)| g.clone())
                .expect("param name present");
            // Probe three scattered entries per tensor.
            let len = g.len();
            for &idx in &[0usize, len / 2, len - 1] {
                let perturb = |m: &mut MultiHeadAttention, delta: f64| {
                    m.visit_params("", &mut |n: &str, p: &mut crate::nn::Param| {
                        if n == name {
                            p.value.as_slice_mut().unwrap()[idx] += delta;
                        }
                    });
                };
                perturb(&mut mha, h);
                let lp = loss(&mha);
                perturb(&mut mha, -2.0 * h);
                let lm = loss(&mha);
                perturb(&mut mha, h);
                let fd = (lp - lm) / (2.0 * h);
                let a = g.as_slice().unwrap()[idx];
                assert!(
                    (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-5,
                    "{name}[{idx}]: fd={fd} analytic={a}"
                );
            }
        }
    }
}
