use super::config::ModelConfig;
use super::params::{init_params, LayerOffsets, ParamLayout};
use crate::attention::AttentionMask;
use crate::corpus::TokenId;
use crate::error::{invalid, Result};
use crate::linalg::{matmul, Matrix, Real};

/// Pre-norm decoder-style transformer whose attention pattern is supplied
/// per call. The output head is tied to the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<T>,
}

struct LayerCache<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    h: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention weights, indexed `[head][query]`, aligned with `keys[query]`.
    probs: Vec<Vec<Vec<T>>>,
    o: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    h2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Activations kept by [`Transformer::forward_train`] for the backward pass.
pub struct ForwardCache<T> {
    tokens: Vec<TokenId>,
    keys: Vec<Vec<usize>>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    inv_f: Vec<T>,
    hf: Vec<T>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<T: Real>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * u * u)
}

impl<T: Real> Transformer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let layout = ParamLayout::new(&config);
        let params = init_params(&config, &layout, seed);
        Ok(Transformer {
            config,
            layout,
            params,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.check()?;
        let layout = ParamLayout::new(&config);
        let params = vec![T::zero(); layout.total()];
        Ok(Transformer {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.check()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(invalid!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            ));
        }
        Ok(Transformer {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.layout.entry(name).map(|e| &self.params[e.range()])
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    fn check_inputs(&self, tokens: &[TokenId], mask: &AttentionMask) -> Result<()> {
        if tokens.len() != mask.len() {
            return Err(invalid!(
                "token count {} does not match mask size {}",
                tokens.len(),
                mask.len()
            ));
        }
        if tokens.len() > self.config.max_len {
            return Err(invalid!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(invalid!("token id {t} outside vocabulary of {}", self.config.vocab_size));
        }
        Ok(())
    }

    /// Logits of shape `L x vocab_size`.
    pub fn forward(&self, tokens: &[TokenId], mask: &AttentionMask) -> Result<Matrix<T>> {
        self.forward_train(tokens, mask).map(|(l, _)| l)
    }

    pub fn forward_train(
        &self,
        tokens: &[TokenId],
        mask: &AttentionMask,
    ) -> Result<(Matrix<T>, ForwardCache<T>)> {
        self.check_inputs(tokens, mask)?;
        let cfg = &self.config;
        let (n, d, v) = (tokens.len(), cfg.d_model, cfg.vocab_size);
        let p = &self.params;
        let lay = &self.layout;
        let keys: Vec<Vec<usize>> = (0..n).map(|q| mask.allowed_keys(q)).collect();

        let mut x = vec![T::zero(); n * d];
        for (i, &t) in tokens.iter().enumerate() {
            let te = &p[lay.tok_emb + t as usize * d..][..d];
            let pe = &p[lay.pos_emb + i * d..][..d];
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lo in &lay.layers {
            let (cache, out) = self.layer_forward(lo, x, &keys);
            layers.push(cache);
            x = out;
        }

        let (hf, inv_f) = self.rms_norm(&x, n, &p[lay.final_norm..][..d]);
        let mut logits = Matrix::zeros(n, v);
        matmul(&hf, false, &p[lay.tok_emb..][..v * d], true, &mut logits.data, n, d, v, false);
        Ok((
            logits,
            ForwardCache {
                tokens: tokens.to_vec(),
                keys,
                layers,
                x_final: x,
                inv_f,
                hf,
            },
        ))
    }

    fn rms_norm(&self, x: &[T], n: usize, gain: &[T]) -> (Vec<T>, Vec<T>) {
        let d = self.config.d_model;
        let eps = T::lit(self.config.norm_eps);
        let mut out = vec![T::zero(); n * d];
        let mut inv = vec![T::zero(); n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let ms = row.iter().map(|&a| a * a).sum::<T>() / T::lit(d as f64);
            let r = T::one() / (ms + eps).sqrt();
            inv[i] = r;
            for j in 0..d {
                out[i * d + j] = row[j] * r * gain[j];
            }
        }
        (out, inv)
    }

    fn rms_norm_backward(
        &self,
        x: &[T],
        inv: &[T],
        gain: &[T],
        dy: &[T],
        dx: &mut [T],
        dgain: &mut [T],
    ) {
        let d = self.config.d_model;
        let dd = T::lit(d as f64);
        for i in 0..inv.len() {
            let row = &x[i * d..(i + 1) * d];
            let dyr = &dy[i * d..(i + 1) * d];
            let r = inv[i];
            let mut dot = T::zero();
            for j in 0..d {
                dgain[j] += dyr[j] * row[j] * r;
                dot += dyr[j] * gain[j] * row[j];
            }
            let coef = dot * r * r * r / dd;
            for j in 0..d {
                dx[i * d + j] += dyr[j] * gain[j] * r - row[j] * coef;
            }
        }
    }

    /// Rotates every head of `x` in place; `sign = -1` applies the inverse.
    fn rope(&self, x: &mut [T], n: usize, sign: T) {
        let cfg = &self.config;
        let (d, hd) = (cfg.d_model, cfg.head_dim());
        let half = hd / 2;
        for i in 0..half {
            let freq = cfg.rope_base.powf(-2.0 * i as f64 / hd as f64);
            for pos in 0..n {
                let ang = pos as f64 * freq;
                let (s, c) = (T::lit(ang.sin()) * sign, T::lit(ang.cos()));
                for h in 0..cfg.n_heads {
                    let base = pos * d + h * hd + 2 * i;
                    let (a, b) = (x[base], x[base + 1]);
                    x[base] = a * c - b * s;
                    x[base + 1] = a * s + b * c;
                }
            }
        }
    }

    fn layer_forward(
        &self,
        lo: &LayerOffsets,
        x: Vec<T>,
        keys: &[Vec<usize>],
    ) -> (LayerCache<T>, Vec<T>) {
        let cfg = &self.config;
        let p = &self.params;
        let (n, d, f) = (keys.len(), cfg.d_model, cfg.d_ff);
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        let scale = T::one() / T::lit(hd as f64).sqrt();

        let (h, inv1) = self.rms_norm(&x, n, &p[lo.attn_norm..][..d]);
        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        matmul(&h, false, &p[lo.wq..][..d * d], false, &mut q, n, d, d, false);
        matmul(&h, false, &p[lo.wk..][..d * d], false, &mut k, n, d, d, false);
        matmul(&h, false, &p[lo.wv..][..d * d], false, &mut v, n, d, d, false);
        self.rope(&mut q, n, T::one());
        self.rope(&mut k, n, T::one());

        let mut o = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(nh);
        for hh in 0..nh {
            let off = hh * hd;
            let mut head_probs = Vec::with_capacity(n);
            for qi in 0..n {
                let qv = &q[qi * d + off..][..hd];
                let mut s: Vec<T> = keys[qi]
                    .iter()
                    .map(|&kj| {
                        let kv = &k[kj * d + off..][..hd];
                        qv.iter().zip(kv).map(|(&a, &b)| a * b).sum::<T>() * scale
                    })
                    .collect();
                let max = s.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for e in &mut s {
                    *e = (*e - max).exp();
                    z += *e;
                }
                for e in &mut s {
                    *e = *e / z;
                }
                let out = &mut o[qi * d + off..][..hd];
                for (&pk, &kj) in s.iter().zip(&keys[qi]) {
                    let vv = &v[kj * d + off..][..hd];
                    for t in 0..hd {
                        out[t] += pk * vv[t];
                    }
                }
                head_probs.push(s);
            }
            probs.push(head_probs);
        }

        let mut x_mid = x.clone();
        matmul(&o, false, &p[lo.wo..][..d * d], false, &mut x_mid, n, d, d, true);

        let (h2, inv2) = self.rms_norm(&x_mid, n, &p[lo.ffn_norm..][..d]);
        let mut u = vec![T::zero(); n * f];
        matmul(&h2, false, &p[lo.w1..][..d * f], false, &mut u, n, d, f, false);
        let g: Vec<T> = u.iter().map(|&a| gelu(a)).collect();
        let mut out = x_mid.clone();
        matmul(&g, false, &p[lo.w2..][..f * d], false, &mut out, n, f, d, true);

        (
            LayerCache {
                x_in: x,
                inv1,
                h,
                q,
                k,
                v,
                probs,
                o,
                x_mid,
                inv2,
                h2,
                u,
                g,
            },
            out,
        )
    }

    /// Accumulates `d(objective)/d(params)` into `grads` given the gradient
    /// with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Matrix<T>, grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len());
        let cfg = &self.config;
        let lay = &self.layout;
        let p = &self.params;
        let (n, d, v) = (cache.tokens.len(), cfg.d_model, cfg.vocab_size);
        assert_eq!((dlogits.rows, dlogits.cols), (n, v));

        // head: logits = hf * E^T
        matmul(&dlogits.data, true, &cache.hf, false, &mut grads[lay.tok_emb..][..v * d], v, n, d, true);
        let mut dhf = vec![T::zero(); n * d];
        matmul(&dlogits.data, false, &p[lay.tok_emb..][..v * d], false, &mut dhf, n, v, d, false);

        let mut dx = vec![T::zero(); n * d];
        self.rms_norm_backward(
            &cache.x_final,
            &cache.inv_f,
            &p[lay.final_norm..][..d],
            &dhf,
            &mut dx,
            &mut grads[lay.final_norm..][..d],
        );

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(lo, lc, &cache.keys, dx, grads);
        }

        for (i, &t) in cache.tokens.iter().enumerate() {
            for j in 0..d {
                grads[lay.tok_emb + t as usize * d + j] += dx[i * d + j];
                grads[lay.pos_emb + i * d + j] += dx[i * d + j];
            }
        }
    }

    fn layer_backward(
        &self,
        lo: &LayerOffsets,
        c: &LayerCache<T>,
        keys: &[Vec<usize>],
        dout: Vec<T>,
        grads: &mut [T],
    ) -> Vec<T> {
        let cfg = &self.config;
        let p = &self.params;
        let (n, d, f) = (keys.len(), cfg.d_model, cfg.d_ff);
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        let scale = T::one() / T::lit(hd as f64).sqrt();

        // feed-forward block
        matmul(&c.g, true, &dout, false, &mut grads[lo.w2..][..f * d], f, n, d, true);
        let mut dg = vec![T::zero(); n * f];
        matmul(&dout, false, &p[lo.w2..][..f * d], true, &mut dg, n, d, f, false);
        for (e, &u) in dg.iter_mut().zip(&c.u) {
            *e *= gelu_grad(u);
        }
        matmul(&c.h2, true, &dg, false, &mut grads[lo.w1..][..d * f], d, n, f, true);
        let mut dh2 = vec![T::zero(); n * d];
        matmul(&dg, false, &p[lo.w1..][..d * f], true, &mut dh2, n, f, d, false);
        let mut dx_mid = dout;
        {
            let mut dgain = vec![T::zero(); d];
            self.rms_norm_backward(&c.x_mid, &c.inv2, &p[lo.ffn_norm..][..d], &dh2, &mut dx_mid, &mut dgain);
            for j in 0..d {
                grads[lo.ffn_norm + j] += dgain[j];
            }
        }

        // attention block
        matmul(&c.o, true, &dx_mid, false, &mut grads[lo.wo..][..d * d], d, n, d, true);
        let mut do_ = vec![T::zero(); n * d];
        matmul(&dx_mid, false, &p[lo.wo..][..d * d], true, &mut do_, n, d, d, false);

        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        for hh in 0..nh {
            let off = hh * hd;
            for qi in 0..n {
                let pr = &c.probs[hh][qi];
                let dov = &do_[qi * d + off..][..hd];
                let mut dp: Vec<T> = Vec::with_capacity(pr.len());
                for (&pk, &kj) in pr.iter().zip(&keys[qi]) {
                    let vv = &c.v[kj * d + off..][..hd];
                    dp.push(dov.iter().zip(vv).map(|(&a, &b)| a * b).sum::<T>());
                    let dvv = &mut dv[kj * d + off..][..hd];
                    for t in 0..hd {
                        dvv[t] += pk * dov[t];
                    }
                }
                let dot: T = pr.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                for ((&pk, &dpk), &kj) in pr.iter().zip(&dp).zip(&keys[qi]) {
                    let ds = pk * (dpk - dot) * scale;
                    for t in 0..hd {
                        dq[qi * d + off + t] += ds * c.k[kj * d + off + t];
                        dk[kj * d + off + t] += ds * c.q[qi * d + off + t];
                    }
                }
            }
        }
        self.rope(&mut dq, n, -T::one());
        self.rope(&mut dk, n, -T::one());

        matmul(&c.h, true, &dq, false, &mut grads[lo.wq..][..d * d], d, n, d, true);
        matmul(&c.h, true, &dk, false, &mut grads[lo.wk..][..d * d], d, n, d, true);
        matmul(&c.h, true, &dv, false, &mut grads[lo.wv..][..d * d], d, n, d, true);
        let mut dh = vec![T::zero(); n * d];
        matmul(&dq, false, &p[lo.wq..][..d * d], true, &mut dh, n, d, d, true);
        matmul(&dk, false, &p[lo.wk..][..d * d], true, &mut dh, n, d, d, true);
        matmul(&dv, false, &p[lo.wv..][..d * d], true, &mut dh, n, d, d, true);

        let mut dx = dx_mid;
        let mut dgain = vec![T::zero(); d];
        self.rms_norm_backward(&c.x_in, &c.inv1, &p[lo.attn_norm..][..d], &dh, &mut dx, &mut dgain);
        for j in 0..d {
            grads[lo.attn_norm + j] += dgain[j];
        }
        dx
    }
}
