//! Tape-free incremental decoding with cached attention keys and values.
//! Every operation mirrors the tape forward pass step for step through the
//! shared kernels, so logits agree bit for bit with [`super::decode_step`].

use qrw_tensor::kernels::{gelu, gemm_acc};
use qrw_tensor::Tensor;

use super::adapter::{AdapterKey, Slot};
use super::transformer::{Attention, FeedForward, Linear, Norm};
use super::{encode, AdapterSet, BaseWeights, ModelError, Result};

const LN_EPS: f64 = 1e-5;

/// Cross-attention keys and values of one encoded source, per decoder
/// layer and head (`[src_len, head_dim]` each).
#[derive(Debug, Clone)]
pub struct CrossCache {
    k: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    len: usize,
}

/// Self-attention keys and values of the tokens fed so far.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    pos: usize,
    k: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

/// A base with optional adapters, run one token at a time.
#[derive(Debug, Clone, Copy)]
pub struct Incremental<'a> {
    base: &'a BaseWeights,
    adapters: Option<&'a AdapterSet>,
}

fn linear_rows(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * n];
    gemm_acc(x, w.data(), &mut out, rows, k, n);
    for (i, o) in out.iter_mut().enumerate() {
        *o += b.data()[i % n];
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Splits `[rows, heads * dh]` into per-head `[rows, dh]` blocks.
fn split_heads(x: &[f64], rows: usize, heads: usize, dh: usize) -> Vec<Vec<f64>> {
    (0..heads)
        .map(|h| {
            (0..rows)
                .flat_map(|r| x[r * heads * dh + h * dh..r * heads * dh + (h + 1) * dh].iter().copied())
                .collect()
        })
        .collect()
}

impl<'a> Incremental<'a> {
    pub fn new(base: &'a BaseWeights, adapters: Option<&'a AdapterSet>) -> Result<Self> {
        if let Some(a) = adapters {
            if !a.fits(base.config()) {
                return Err(ModelError::Config(format!(
                    "adapter set '{}' does not fit the base geometry",
                    a.label
                )));
            }
        }
        Ok(Self { base, adapters })
    }

    fn t(&self, id: qrw_tensor::ParamId) -> &'a Tensor {
        self.base.store().get(id)
    }

    fn linear(&self, x: &[f64], rows: usize, l: Linear) -> Vec<f64> {
        linear_rows(x, rows, self.t(l.w), self.t(l.b))
    }

    fn norm(&self, x: &[f64], n: Norm) -> Vec<f64> {
        let (g, b) = (self.t(n.g).data(), self.t(n.b).data());
        let d = g.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (i, x) in row.iter().enumerate() {
                let xhat = (x - mean) * is;
                out.push(xhat * g[i] + b[i]);
            }
        }
        out
    }

    fn adapter(&self, x: Vec<f64>, key: AdapterKey) -> Vec<f64> {
        let Some(set) = self.adapters else { return x };
        let a = set.get(key);
        let rows = x.len() / a.w_down.shape()[0];
        let h: Vec<f64> = linear_rows(&x, rows, a.w_down, a.b_down).into_iter().map(f64::tanh).collect();
        let u = linear_rows(&h, rows, a.w_up, a.b_up);
        add(&x, &u)
    }

    fn ffn(&self, x: &[f64], f: FeedForward) -> Vec<f64> {
        let h: Vec<f64> = self.linear(x, 1, f.up).into_iter().map(gelu).collect();
        self.linear(&h, 1, f.down)
    }

    /// Single-query attention over cached per-head keys and values.
    fn attend(&self, a: Attention, h: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], n_keys: usize) -> Vec<f64> {
        let cfg = self.base.config();
        let (heads, dh) = (cfg.n_heads, cfg.head_dim());
        let q = self.linear(h, 1, a.q);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = vec![0.0; cfg.d_model];
        for head in 0..heads {
            let qh = &q[head * dh..(head + 1) * dh];
            let kh = &keys[head];
            let mut s: Vec<f64> = (0..n_keys)
                .map(|j| {
                    let mut acc = 0.0;
                    for (p, &qv) in qh.iter().enumerate() {
                        if qv != 0.0 {
                            acc += qv * kh[j * dh + p];
                        }
                    }
                    acc * scale
                })
                .collect();
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in s.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in s.iter_mut() {
                *x /= z;
            }
            gemm_acc(&s, &values[head], &mut ctx[head * dh..(head + 1) * dh], 1, n_keys, dh);
        }
        self.linear(&ctx, 1, a.o)
    }

    /// Encodes `src` and precomputes cross-attention keys and values.
    pub fn prepare(&self, src: &[usize]) -> Result<CrossCache> {
        let states = encode(self.base, self.adapters, &[src.to_vec()])?;
        let cfg = self.base.config();
        let (heads, dh, len) = (cfg.n_heads, cfg.head_dim(), src.len());
        let mut k = Vec::new();
        let mut v = Vec::new();
        for layer in &self.base.layout.decoder {
            let kl = self.linear(states.data(), len, layer.cross_attn.k);
            let vl = self.linear(states.data(), len, layer.cross_attn.v);
            k.push(split_heads(&kl, len, heads, dh));
            v.push(split_heads(&vl, len, heads, dh));
        }
        Ok(CrossCache { k, v, len })
    }

    pub fn vocab_size(&self) -> usize {
        self.base.config().vocab_size
    }

    pub fn max_seq_len(&self) -> usize {
        self.base.config().max_seq_len
    }

    pub fn empty_cache(&self) -> DecoderCache {
        let cfg = self.base.config();
        let per_layer = || vec![vec![Vec::new(); cfg.n_heads]; cfg.n_dec_layers];
        DecoderCache {
            pos: 0,
            k: per_layer(),
            v: per_layer(),
        }
    }

    /// Feeds one token at the next position and returns the logits that
    /// follow it.
    pub fn step(&self, cross: &CrossCache, cache: &mut DecoderCache, token: usize) -> Result<Vec<f64>> {
        let cfg = self.base.config();
        if token >= cfg.vocab_size {
            return Err(ModelError::OovToken {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        if cache.pos >= cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: cache.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let layout = &self.base.layout;
        let tok = &self.t(layout.tok_embed).data()[token * d..(token + 1) * d];
        let pos = &self.t(layout.pos_embed).data()[cache.pos * d..(cache.pos + 1) * d];
        let mut y = add(tok, pos);
        cache.pos += 1;
        for (l, layer) in layout.decoder.iter().enumerate() {
            let key = |slot| AdapterKey {
                decoder: true,
                layer: l,
                slot,
            };
            let h = self.norm(&y, layer.ln_self);
            let k = self.linear(&h, 1, layer.self_attn.k);
            let v = self.linear(&h, 1, layer.self_attn.v);
            for head in 0..cfg.n_heads {
                cache.k[l][head].extend_from_slice(&k[head * dh..(head + 1) * dh]);
                cache.v[l][head].extend_from_slice(&v[head * dh..(head + 1) * dh]);
            }
            let a = self.attend(layer.self_attn, &h, &cache.k[l], &cache.v[l], cache.pos);
            y = self.adapter(add(&y, &a), key(Slot::SelfAttn));
            let h = self.norm(&y, layer.ln_cross);
            let c = self.attend(layer.cross_attn, &h, &cross.k[l], &cross.v[l], cross.len);
            y = self.adapter(add(&y, &c), key(Slot::CrossAttn));
            let h = self.norm(&y, layer.ln_ffn);
            let f = self.ffn(&h, layer.ffn);
            y = self.adapter(add(&y, &f), key(Slot::Ffn));
        }
        let y = self.norm(&y, layout.dec_norm);
        Ok(self.linear(&y, 1, layout.out))
    }
}
