//! Efficient self-attention blocks and the attention-regression losses.

use ac2d_tensor::{Conv2dSpec, Float, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{to_map, to_tokens, Builder, Conv, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    /// K/V spatial reduction; the upsample path restores the same factor.
    pub reduction: usize,
    pub mlp_ratio: usize,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.reduction == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("reduction and mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

/// `softmax(q kᵀ / sqrt(d))` and its product with `v`, for `[.., n, d]` inputs.
pub fn scaled_attention<'g, T: Float>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let d = *qs.last().unwrap();
    if ks.last() != Some(&d) {
        return Err(Error::Tensor(ac2d_tensor::TensorError::Dimension {
            op: "scaled_attention",
            msg: format!("query head dim {d} but key head dim {:?}", ks.last()),
        }));
    }
    if ks[ks.len() - 2] != vs[vs.len() - 2] {
        return Err(Error::Config("keys and values differ in token count".into()));
    }
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let a = q.matmul(k.transpose_last()?)?.scale(scale).softmax_lastdim()?;
    let out = a.matmul(v)?;
    Ok((a, out))
}

#[derive(Debug, Clone, Copy)]
pub struct Emsa2Block {
    pub cfg: BlockConfig,
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    reduce: Option<(Conv, LayerNorm)>,
    up: Conv,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Emsa2Block {
    pub fn new<T: Float, R: Rng>(b: &mut Builder<T, R>, name: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let r = cfg.reduction;
        Ok(b.scoped(name, |b| {
            let reduce = (r > 1).then(|| {
                let conv = Conv::new(b, "sr", c, 1, r + 1, Conv2dSpec::depthwise(r, r / 2, c));
                (conv, LayerNorm::new(b, "sr_norm", c))
            });
            Self {
                cfg,
                norm1: LayerNorm::new(b, "norm1", c),
                q: Linear::new(b, "q", c, c, true),
                k: Linear::new(b, "k", c, c, true),
                v: Linear::new(b, "v", c, c, true),
                reduce,
                up: Conv::new(b, "up", c * r * r, 1, 3, Conv2dSpec::depthwise(1, 1, c)),
                proj: Linear::new(b, "proj", c, c, true),
                norm2: LayerNorm::new(b, "norm2", c),
                fc1: Linear::new(b, "fc1", c, c * cfg.mlp_ratio, true),
                fc2: Linear::new(b, "fc2", c * cfg.mlp_ratio, c, true),
            }
        }))
    }

    /// Output projections of both residual branches, for tests that need them zeroed.
    pub fn residual_outputs(&self) -> [crate::nn::ParamId; 4] {
        [
            self.proj.weight,
            self.proj.bias.unwrap(),
            self.fc2.weight,
            self.fc2.bias.unwrap(),
        ]
    }

    /// `x` is `[B, h*w, C]`. Returns the block output and the attention
    /// weights `[B, heads, h*w, n_kv]`.
    pub fn forward<'g, T: Float>(
        &self,
        p: &[Var<'g, T>],
        x: Var<'g, T>,
        h: usize,
        w: usize,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = x.shape();
        let (batch, n, c) = (s[0], s[1], s[2]);
        if n != h * w || c != self.cfg.dim {
            return Err(Error::Config(format!(
                "block expects {h}x{w} tokens of width {}, got {s:?}",
                self.cfg.dim
            )));
        }
        let r = self.cfg.reduction;
        if h % r != 0 || w % r != 0 {
            return Err(Error::Config(format!("{h}x{w} grid is not divisible by reduction {r}")));
        }
        let (heads, d) = (self.cfg.heads, self.cfg.head_dim());
        let split = |t: Var<'g, T>, len: usize| -> Result<Var<'g, T>> {
            Ok(t.reshape(&[batch, len, heads, d])?.permute(&[0, 2, 1, 3])?)
        };

        let xn = self.norm1.forward(p, x)?;
        let q = split(self.q.forward(p, xn)?, n)?;
        let (kv_src, hr, wr) = match &self.reduce {
            Some((conv, norm)) => {
                let m = conv.forward(p, to_map(xn, h, w)?)?;
                let ms = m.shape();
                (norm.forward(p, to_tokens(m)?)?, ms[2], ms[3])
            }
            None => (xn, h, w),
        };
        if hr * r != h || wr * r != w {
            return Err(Error::Config(format!("reduced grid {hr}x{wr} does not upsample to {h}x{w}")));
        }
        let nr = hr * wr;
        let v_tokens = self.v.forward(p, kv_src)?;
        let k = split(self.k.forward(p, kv_src)?, nr)?;
        let v = split(v_tokens, nr)?;
        let (attn, out) = scaled_attention(q, k, v)?;
        let out = out.permute(&[0, 2, 1, 3])?.reshape(&[batch, n, c])?;

        let up = self.up.forward(p, to_map(v_tokens, hr, wr)?)?.pixel_shuffle(r)?;
        let sa = self.proj.forward(p, out.add(to_tokens(up)?)?)?;
        let x1 = x.add(sa)?;
        let hidden = self.fc1.forward(p, self.norm2.forward(p, x1)?)?.gelu();
        let y = x1.add(self.fc2.forward(p, hidden)?)?;
        Ok((y, attn))
    }
}

/// Mean over heads and query rows: `[B, k, n, n]` to `[B, n]`.
pub fn average_attention<'g, T: Float>(attn: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = attn.shape();
    if s.len() != 4 {
        return Err(Error::Config(format!("attention weights must be rank 4, got {s:?}")));
    }
    Ok(attn.reshape(&[s[0], s[1] * s[2], s[3]])?.mean_dim(1)?)
}

fn check_positive<T: Float>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::Numeric(format!("{what} has a nonpositive entry")));
    }
    Ok(())
}

/// KL regression of averaged attention onto priors. `avgs[j]` and `priors[j]`
/// are `[B, n]`; the result is scaled by `1/(m n)` and averaged over the batch.
pub fn attention_regression_loss<'g, T: Float>(avgs: &[Var<'g, T>], priors: &[Tensor<T>]) -> Result<Var<'g, T>> {
    if avgs.len() != priors.len() || avgs.is_empty() {
        return Err(Error::Config(format!(
            "{} attention maps for {} priors",
            avgs.len(),
            priors.len()
        )));
    }
    let m = avgs.len();
    let mut total: Option<Var<'g, T>> = None;
    for (a, g) in avgs.iter().zip(priors) {
        let av = a.value();
        if av.shape() != g.shape() {
            return Err(Error::Config(format!(
                "attention shape {:?} does not match prior shape {:?}",
                av.shape(),
                g.shape()
            )));
        }
        check_positive(&av, "averaged attention")?;
        check_positive(g, "prior map")?;
        let (batch, n) = (g.shape()[0], g.shape()[1]);
        let graph = a.graph();
        let g_log_g: T = g.data().iter().map(|&v| v * v.ln()).sum();
        let cross = a.ln().mul(graph.constant(g.clone()))?.sum();
        let term = cross.neg().add_scalar(g_log_g).scale(T::lit(1.0 / (batch * m * n) as f64));
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Per-channel variant: every attention row `[B, k, n, n]` is regressed onto
/// the prior and the per-row divergences are averaged.
pub fn channel_regression_loss<'g, T: Float>(attns: &[Var<'g, T>], priors: &[Tensor<T>]) -> Result<Var<'g, T>> {
    if attns.len() != priors.len() || attns.is_empty() {
        return Err(Error::Config(format!(
            "{} attention tensors for {} priors",
            attns.len(),
            priors.len()
        )));
    }
    let m = attns.len();
    let mut total: Option<Var<'g, T>> = None;
    for (a, g) in attns.iter().zip(priors) {
        let s = a.shape();
        if s.len() != 4 || g.shape() != [s[0], s[3]] || s[2] != s[3] {
            return Err(Error::Config(format!(
                "attention shape {s:?} does not match prior shape {:?}",
                g.shape()
            )));
        }
        check_positive(&a.value(), "attention")?;
        check_positive(g, "prior map")?;
        let (batch, rows, n) = (s[0], s[1] * s[2], s[3]);
        let graph = a.graph();
        let g_log_g: T = g.data().iter().map(|&v| v * v.ln()).sum();
        let la = a.reshape(&[batch, rows, n])?.permute(&[1, 0, 2])?.ln();
        let cross = la.mul(graph.constant(g.clone()))?.sum().scale(T::lit(1.0 / rows as f64));
        let term = cross.neg().add_scalar(g_log_g).scale(T::lit(1.0 / (batch * m * n) as f64));
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Plain KL divergence `Σ g ln(g/a)` of two distributions.
pub fn kl_divergence(g: &[f64], a: &[f64]) -> f64 {
    g.iter().zip(a).map(|(&p, &q)| p * (p / q).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use ac2d_tensor::Graph;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let g = Graph::<f64>::new();
        let mut r = rng();
        let q = g.constant(Tensor::randn(&[1, 4, 3], 1.0, &mut r));
        let row = Tensor::randn(&[1, 1, 3], 1.0, &mut r);
        let k = g.constant(Tensor::from_fn(&[1, 5, 3], |i| row.data()[i % 3]));
        let v = g.constant(Tensor::randn(&[1, 5, 2], 1.0, &mut r));
        let (a, _) = scaled_attention(q, k, v).unwrap();
        for &x in a.value().data() {
            assert!((x - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn three_token_oracle() {
        let g = Graph::<f64>::new();
        let qd = [0.3, -1.2, 0.8, 0.5, 0.1, -0.4];
        let kd = [1.0, 0.2, -0.7, 0.9, 0.4, 0.4];
        let vd = [2.0, -1.0, 0.5, 0.0, 1.5, 3.0];
        let t = |d: &[f64]| g.constant(Tensor::from_f64(&[3, 2], d).unwrap());
        let (a, out) = scaled_attention(t(&qd), t(&kd), t(&vd)).unwrap();
        let (a, out) = (a.value(), out.value());
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (qd[2 * i] * kd[2 * j] + qd[2 * i + 1] * kd[2 * j + 1]) / 2f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..3 {
                assert!((a.data()[3 * i + j] - logits[j].exp() / z).abs() < 1e-12);
            }
            for c in 0..2 {
                let o: f64 = (0..3).map(|j| logits[j].exp() / z * vd[2 * j + c]).sum();
                assert!((out.data()[2 * i + c] - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_dim_mismatch_is_rejected() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[2, 4]));
        assert!(scaled_attention(q, k, k).is_err());
    }

    fn block(cfg: BlockConfig) -> (ParamStore<f64>, Emsa2Block) {
        let mut store = ParamStore::default();
        let mut r = rng();
        let blk = Emsa2Block::new(&mut Builder::new(&mut store, &mut r), "blk", cfg).unwrap();
        (store, blk)
    }

    #[test]
    fn zeroed_outputs_make_the_block_an_identity() {
        for reduction in [1, 2] {
            let cfg = BlockConfig {
                dim: 8,
                heads: 2,
                reduction,
                mlp_ratio: 2,
            };
            let (mut store, blk) = block(cfg);
            for id in blk.residual_outputs() {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&shape);
            }
            let g = Graph::new();
            let p = store.bind(&g);
            let x = Tensor::randn(&[2, 16, 8], 1.0, &mut rng());
            let (y, a) = blk.forward(&p, g.constant(x.clone()), 4, 4).unwrap();
            assert_eq!(*y.value(), x);
            assert_eq!(a.shape(), vec![2, 2, 16, 16 / (reduction * reduction)]);
        }
    }

    #[test]
    fn reduction_one_preserves_shape() {
        let cfg = BlockConfig {
            dim: 8,
            heads: 4,
            reduction: 1,
            mlp_ratio: 4,
        };
        let (store, blk) = block(cfg);
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::randn(&[3, 9, 8], 1.0, &mut rng()));
        let (y, _) = blk.forward(&p, x, 3, 3).unwrap();
        assert_eq!(y.shape(), vec![3, 9, 8]);
    }

    #[test]
    fn token_grid_mismatch_is_rejected() {
        let cfg = BlockConfig {
            dim: 4,
            heads: 1,
            reduction: 1,
            mlp_ratio: 1,
        };
        let (store, blk) = block(cfg);
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::zeros(&[1, 10, 4]));
        assert!(matches!(blk.forward(&p, x, 3, 3), Err(Error::Config(_))));
    }

    #[test]
    fn kl_hand_example() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[0.25, 0.75]).unwrap());
        let prior = Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        let l = attention_regression_loss(&[a], &[prior]).unwrap().item();
        let expect = 0.5 * (0.5 * 2f64.ln() - 0.5 * 1.5f64.ln());
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 0.07192).abs() < 1e-5);
    }

    #[test]
    fn averaging_two_channels() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let avg = average_attention(a).unwrap();
        assert_eq!(avg.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn nonpositive_attention_is_numeric_error() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap());
        let prior = Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        assert!(matches!(
            attention_regression_loss(&[a], &[prior]),
            Err(Error::Numeric(_))
        ));
    }
}
