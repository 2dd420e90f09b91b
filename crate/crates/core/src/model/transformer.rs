use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use qrw_tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

use super::adapter::{Adapter, AdapterKey, AdapterSet, Slot};
use super::{fingerprint_store, Fingerprint, ModelConfig, ModelError, Result, PAD};

const MASK_FILL: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub(super) struct Linear {
    pub(super) w: ParamId,
    pub(super) b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(super) struct Norm {
    pub(super) g: ParamId,
    pub(super) b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(super) struct Attention {
    pub(super) q: Linear,
    pub(super) k: Linear,
    pub(super) v: Linear,
    pub(super) o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(super) struct FeedForward {
    pub(super) up: Linear,
    pub(super) down: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(super) struct EncoderLayer {
    pub(super) ln_attn: Norm,
    pub(super) attn: Attention,
    pub(super) ln_ffn: Norm,
    pub(super) ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
pub(super) struct DecoderLayer {
    pub(super) ln_self: Norm,
    pub(super) self_attn: Attention,
    pub(super) ln_cross: Norm,
    pub(super) cross_attn: Attention,
    pub(super) ln_ffn: Norm,
    pub(super) ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub(super) struct Layout {
    pub(super) tok_embed: ParamId,
    pub(super) pos_embed: ParamId,
    pub(super) encoder: Vec<EncoderLayer>,
    pub(super) enc_norm: Norm,
    pub(super) decoder: Vec<DecoderLayer>,
    pub(super) dec_norm: Norm,
    pub(super) out: Linear,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Records parameter specs in allocation order; ids are positions.
#[derive(Default)]
struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn param(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.specs.push((name, shape.to_vec(), init));
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let std = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: self.param(format!("{name}.w"), &[fan_in, fan_out], Init::Normal(std)),
            b: self.param(format!("{name}.b"), &[fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.param(format!("{name}.g"), &[d], Init::Ones),
            b: self.param(format!("{name}.b"), &[d], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, f),
            down: self.linear(&format!("{name}.down"), f, d),
        }
    }
}

fn layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    let mut b = Builder::default();
    let tok_embed = b.param("embed.tok".into(), &[cfg.vocab_size, d], Init::Normal(0.5));
    let pos_embed = b.param("embed.pos".into(), &[cfg.max_seq_len, d], Init::Normal(0.5));
    let encoder = (0..cfg.n_enc_layers)
        .map(|l| EncoderLayer {
            ln_attn: b.norm(&format!("enc.{l}.ln_attn"), d),
            attn: b.attention(&format!("enc.{l}.attn"), d),
            ln_ffn: b.norm(&format!("enc.{l}.ln_ffn"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, f),
        })
        .collect();
    let enc_norm = b.norm("enc.ln_out", d);
    let decoder = (0..cfg.n_dec_layers)
        .map(|l| DecoderLayer {
            ln_self: b.norm(&format!("dec.{l}.ln_self"), d),
            self_attn: b.attention(&format!("dec.{l}.self_attn"), d),
            ln_cross: b.norm(&format!("dec.{l}.ln_cross"), d),
            cross_attn: b.attention(&format!("dec.{l}.cross_attn"), d),
            ln_ffn: b.norm(&format!("dec.{l}.ln_ffn"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, f),
        })
        .collect();
    let dec_norm = b.norm("dec.ln_out", d);
    let out = b.linear("out", d, cfg.vocab_size);
    let layout = Layout {
        tok_embed,
        pos_embed,
        encoder,
        enc_norm,
        decoder,
        dec_norm,
        out,
    };
    (layout, b)
}

/// Shared base parameters of the encoder-decoder.
#[derive(Debug, Clone)]
pub struct BaseWeights {
    config: ModelConfig,
    store: ParamStore,
    pub(super) layout: Layout,
}

impl BaseWeights {
    /// Randomly initialized base; every tensor requires grad.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in builder.specs {
            let t = match init {
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("valid std");
                    Tensor::from_fn(&shape, |_| n.sample(&mut rng))
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            };
            store.push(name, t.with_requires_grad(true));
        }
        Ok(Self {
            config: config.clone(),
            store,
            layout,
        })
    }

    /// Wraps loaded tensors, checking them against the layout for `config`.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = layout(config);
        if builder.specs.len() != store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} base tensors, found {}",
                builder.specs.len(),
                store.len()
            )));
        }
        for (i, (name, shape, _)) in builder.specs.iter().enumerate() {
            let id = ParamId(i);
            if store.name(id) != name || store.get(id).shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} does not match layout entry {name}",
                    store.name(id)
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint_store(&self.store)
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton {
            config: self.config.clone(),
            layout: self.layout.clone(),
        }
    }
}

/// Inverted dropout applied to embeddings and sublayer outputs.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

/// Right-padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl PaddedBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(ModelError::EmptyInput);
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * width];
        for (row, s) in ids.chunks_mut(width).zip(seqs) {
            row[..s.len()].copy_from_slice(s);
        }
        Ok(Self {
            ids,
            lens: seqs.iter().map(Vec::len).collect(),
            width,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }
}

/// Encoder output on a tape, with the source lengths for cross-attention masks.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub states: Var,
    pub lens: Vec<usize>,
    pub width: usize,
}

/// A base with an optional adapter set.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    pub base: &'a BaseWeights,
    pub adapters: Option<&'a AdapterSet>,
}

impl<'a> Model<'a> {
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

    /// Registers all parameters on `tape` as constants (no gradients).
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let constants = |store: &ParamStore, tape: &mut Tape| -> Vec<Var> {
            store
                .tensors()
                .iter()
                .map(|t| tape.constant(t.shape(), t.data().to_vec()).expect("tensor shape is consistent"))
                .collect()
        };
        let base_vars = constants(&self.base.store, tape);
        let adapter_vars = self.adapters.map(|a| constants(a.store(), tape));
        BoundModel::attach(self.base.skeleton(), base_vars, adapter_vars)
    }
}

/// Architecture description needed to run a forward pass over bound
/// variables.
#[derive(Debug, Clone)]
pub struct Skeleton {
    config: ModelConfig,
    layout: Layout,
}

impl Skeleton {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

/// A model whose parameters live on a tape.
#[derive(Debug)]
pub struct BoundModel {
    skel: Skeleton,
    pub base_vars: Vec<Var>,
    pub adapter_vars: Option<Vec<Var>>,
    pub dropout: Option<Dropout>,
}

fn attention_mask(b: usize, h: usize, lq: usize, lk: usize, key_lens: &[usize], causal: bool) -> Vec<bool> {
    let mut mask = Vec::with_capacity(b * h * lq * lk);
    for &kl in key_lens.iter().take(b) {
        for _ in 0..h {
            for i in 0..lq {
                mask.extend((0..lk).map(|j| j >= kl || (causal && j > i)));
            }
        }
    }
    mask
}

impl BoundModel {
    /// Builds a forward pass over caller-bound variables, in
    /// [`ParamStore`] order for the base and the adapter set.
    pub fn attach(skel: Skeleton, base_vars: Vec<Var>, adapter_vars: Option<Vec<Var>>) -> Self {
        Self {
            skel,
            base_vars,
            adapter_vars,
            dropout: None,
        }
    }

    fn cfg(&self) -> &ModelConfig {
        &self.skel.config
    }

    fn p(&self, id: ParamId) -> Var {
        self.base_vars[id.0]
    }

    fn linear(&self, t: &mut Tape, x: Var, l: Linear) -> Result<Var> {
        let y = t.matmul(x, self.p(l.w))?;
        Ok(t.add(y, self.p(l.b))?)
    }

    fn norm(&self, t: &mut Tape, x: Var, n: Norm) -> Result<Var> {
        Ok(t.layer_norm(x, Some(self.p(n.g)), Some(self.p(n.b)))?)
    }

    fn dropout(&mut self, t: &mut Tape, x: Var) -> Result<Var> {
        let Some(d) = self.dropout.as_mut().filter(|d| d.rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - d.rate);
        let n = t.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep })
            .collect();
        let shape = t.shape(x).to_vec();
        let m = t.constant(&shape, mask)?;
        Ok(t.mul(x, m)?)
    }

    fn adapter(&self, t: &mut Tape, x: Var, key: AdapterKey) -> Result<Var> {
        let Some(vars) = &self.adapter_vars else {
            return Ok(x);
        };
        let i = key.index(self.cfg().n_enc_layers);
        let v = &vars[4 * i..4 * i + 4];
        adapter_on_tape(t, x, [v[0], v[1], v[2], v[3]])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        t: &mut Tape,
        a: Attention,
        xq: Var,
        xkv: Var,
        key_lens: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let cfg = self.cfg();
        let (h, dh, d) = (cfg.n_heads, cfg.head_dim(), cfg.d_model);
        let (b, lq) = (t.shape(xq)[0], t.shape(xq)[1]);
        let lk = t.shape(xkv)[1];
        let q = self.linear(t, xq, a.q)?;
        let q = t.reshape(q, &[b, lq, h, dh])?;
        let q = t.permute(q, &[0, 2, 1, 3])?;
        let k = self.linear(t, xkv, a.k)?;
        let k = t.reshape(k, &[b, lk, h, dh])?;
        let k = t.permute(k, &[0, 2, 3, 1])?;
        let v = self.linear(t, xkv, a.v)?;
        let v = t.reshape(v, &[b, lk, h, dh])?;
        let v = t.permute(v, &[0, 2, 1, 3])?;
        let s = t.matmul(q, k)?;
        let s = t.scale(s, 1.0 / (dh as f64).sqrt());
        let mask = attention_mask(b, h, lq, lk, key_lens, causal);
        let s = t.masked_fill(s, &mask, MASK_FILL)?;
        let p = t.softmax(s, 3)?;
        let ctx = t.matmul(p, v)?;
        let ctx = t.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = t.reshape(ctx, &[b, lq, d])?;
        self.linear(t, ctx, a.o)
    }

    fn ffn(&self, t: &mut Tape, x: Var, f: FeedForward) -> Result<Var> {
        let h = self.linear(t, x, f.up)?;
        let h = t.gelu(h);
        self.linear(t, h, f.down)
    }

    fn embed(&mut self, t: &mut Tape, batch: &PaddedBatch) -> Result<Var> {
        let cfg = self.cfg();
        if batch.width > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: batch.width,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(ModelError::OovToken {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let shape = [batch.batch_size(), batch.width];
        let tok = t.embedding(self.p(self.skel.layout.tok_embed), &batch.ids, &shape)?;
        let positions: Vec<usize> = (0..batch.batch_size()).flat_map(|_| 0..batch.width).collect();
        let pos = t.embedding(self.p(self.skel.layout.pos_embed), &positions, &shape)?;
        let x = t.add(tok, pos)?;
        self.dropout(t, x)
    }

    /// Sublayer output, then dropout, residual add and the slot's adapter.
    fn residual(&mut self, t: &mut Tape, x: Var, sub: Var, key: AdapterKey) -> Result<Var> {
        let sub = self.dropout(t, sub)?;
        let y = t.add(x, sub)?;
        self.adapter(t, y, key)
    }

    pub fn encode(&mut self, t: &mut Tape, src: &PaddedBatch) -> Result<EncoderOutput> {
        let mut x = self.embed(t, src)?;
        let layers = self.skel.layout.encoder.clone();
        for (l, layer) in layers.iter().enumerate() {
            let key = |slot| AdapterKey {
                decoder: false,
                layer: l,
                slot,
            };
            let h = self.norm(t, x, layer.ln_attn)?;
            let a = self.attention(t, layer.attn, h, h, &src.lens, false)?;
            x = self.residual(t, x, a, key(Slot::SelfAttn))?;
            let h = self.norm(t, x, layer.ln_ffn)?;
            let f = self.ffn(t, h, layer.ffn)?;
            x = self.residual(t, x, f, key(Slot::Ffn))?;
        }
        let states = self.norm(t, x, self.skel.layout.enc_norm)?;
        Ok(EncoderOutput {
            states,
            lens: src.lens.clone(),
            width: src.width,
        })
    }

    /// Teacher-forced decoder pass; returns logits `[batch, len, |V|]`.
    pub fn decode(&mut self, t: &mut Tape, enc: &EncoderOutput, tgt_in: &PaddedBatch) -> Result<Var> {
        let mut y = self.embed(t, tgt_in)?;
        let layers = self.skel.layout.decoder.clone();
        for (l, layer) in layers.iter().enumerate() {
            let key = |slot| AdapterKey {
                decoder: true,
                layer: l,
                slot,
            };
            let h = self.norm(t, y, layer.ln_self)?;
            let a = self.attention(t, layer.self_attn, h, h, &tgt_in.lens, true)?;
            y = self.residual(t, y, a, key(Slot::SelfAttn))?;
            let h = self.norm(t, y, layer.ln_cross)?;
            let c = self.attention(t, layer.cross_attn, h, enc.states, &enc.lens, false)?;
            y = self.residual(t, y, c, key(Slot::CrossAttn))?;
            let h = self.norm(t, y, layer.ln_ffn)?;
            let f = self.ffn(t, h, layer.ffn)?;
            y = self.residual(t, y, f, key(Slot::Ffn))?;
        }
        let y = self.norm(t, y, self.skel.layout.dec_norm)?;
        self.linear(t, y, self.skel.layout.out)
    }

    /// Mean of encoder states over non-pad positions: `[batch, d_model]`.
    pub fn pooled(&self, t: &mut Tape, enc: &EncoderOutput) -> Result<Var> {
        pool_states(t, enc, self.cfg().d_model)
    }
}

/// Masked mean over positions of `[batch, width, d]` states.
pub fn pool_states(t: &mut Tape, enc: &EncoderOutput, d: usize) -> Result<Var> {
    let b = enc.lens.len();
    let mut w = vec![0.0; b * enc.width];
    for (row, &len) in w.chunks_mut(enc.width).zip(&enc.lens) {
        row[..len].fill(1.0 / len as f64);
    }
    let w = t.constant(&[b, 1, enc.width], w)?;
    let pooled = t.matmul(w, enc.states)?;
    Ok(t.reshape(pooled, &[b, d])?)
}

/// `x + W_up tanh(W_down x + b_down) + b_up` over the last axis.
fn adapter_on_tape(t: &mut Tape, x: Var, [wd, bd, wu, bu]: [Var; 4]) -> Result<Var> {
    let h = t.matmul(x, wd)?;
    let h = t.add(h, bd)?;
    let h = t.tanh(h);
    let u = t.matmul(h, wu)?;
    let u = t.add(u, bu)?;
    Ok(t.add(x, u)?)
}

/// Applies one adapter to a `[.., d_model]` tensor.
pub fn adapter_forward(a: &Adapter<'_>, x: &Tensor) -> Result<Tensor> {
    let d = a.w_down.shape()[0];
    if x.shape().last() != Some(&d) || x.shape().len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "adapter_forward",
            lhs: x.shape().to_vec(),
            rhs: a.w_down.shape().to_vec(),
        }
        .into());
    }
    let mut t = Tape::new();
    let xv = t.leaf(x);
    let vars = [t.leaf(a.w_down), t.leaf(a.b_down), t.leaf(a.w_up), t.leaf(a.b_up)];
    let y = adapter_on_tape(&mut t, xv, vars)?;
    Ok(t.to_tensor(y))
}

/// Encoder states `[batch, width, d_model]` for right-padded `src`.
pub fn encode(base: &BaseWeights, adapters: Option<&AdapterSet>, src: &[Vec<usize>]) -> Result<Tensor> {
    let mut t = Tape::new();
    let mut m = Model::new(base, adapters)?.bind(&mut t);
    let batch = PaddedBatch::new(src)?;
    let enc = m.encode(&mut t, &batch)?;
    Ok(t.to_tensor(enc.states))
}

/// Next-token logits `[batch, |V|]` after each prefix, given encoder states
/// from [`encode`] and the true source lengths.
pub fn decode_step(
    base: &BaseWeights,
    adapters: Option<&AdapterSet>,
    states: &Tensor,
    src_lens: &[usize],
    prefixes: &[Vec<usize>],
) -> Result<Tensor> {
    let mut t = Tape::new();
    let mut m = Model::new(base, adapters)?.bind(&mut t);
    let logits = step_logits(&mut t, &mut m, states, src_lens, prefixes)?;
    let v = base.config().vocab_size;
    Tensor::new(&[prefixes.len(), v], logits).map_err(Into::into)
}

/// Flat last-position logits for each prefix, row-major `[batch, |V|]`.
pub(crate) fn step_logits(
    t: &mut Tape,
    m: &mut BoundModel,
    states: &Tensor,
    src_lens: &[usize],
    prefixes: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let shape = states.shape();
    if shape.len() != 3 || shape[0] != prefixes.len() || src_lens.len() != prefixes.len() {
        return Err(TensorError::ShapeMismatch {
            op: "decode_step",
            lhs: shape.to_vec(),
            rhs: vec![prefixes.len(), src_lens.len()],
        }
        .into());
    }
    let s = t.leaf(states);
    let enc = EncoderOutput {
        states: s,
        lens: src_lens.to_vec(),
        width: shape[1],
    };
    let batch = PaddedBatch::new(prefixes)?;
    let logits = m.decode(t, &enc, &batch)?;
    let v = m.cfg().vocab_size;
    let all = t.value(logits);
    let mut out = Vec::with_capacity(prefixes.len() * v);
    for (b, &len) in batch.lens.iter().enumerate() {
        let off = (b * batch.width + len - 1) * v;
        out.extend_from_slice(&all[off..off + v]);
    }
    Ok(out)
}
