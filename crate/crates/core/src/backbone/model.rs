//! Encoder, causal decoder, and the interval-conditioned denoising decoder.
//!
//! The encoder sees context tokens followed by history patches with full
//! self-attention. The decoder runs causal self-attention over shifted target
//! embeddings (or learned queries) plus cross-attention into the encoder. The
//! denoiser turns noisy patches into velocities: each noisy patch is a query
//! that may only attend to decoder states at or before its own position.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::{HeadKind, VelocityField};
use crate::tensor::{CausalMask, ParamStore, Tape, Tensor, Var};

/// Number of sinusoid frequencies per time scalar.
pub const TIME_FREQUENCIES: usize = 8;
/// Width of the raw time feature vector: sin and cos for t, r and r - t.
pub const TIME_FEATURES: usize = 3 * 2 * TIME_FREQUENCIES;

/// Which patch stream an embedding belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    History,
    Target,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    norm_attn: usize,
    attn: Attention,
    norm_ff: usize,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    norm_self: usize,
    self_attn: Attention,
    norm_cross: usize,
    cross_attn: Attention,
    norm_ff: usize,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DenoiseBlock {
    norm_query: usize,
    norm_cond: usize,
    cross_attn: Attention,
    norm_ff: usize,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Denoiser {
    noisy_in: Linear,
    time_hidden: Linear,
    time_out: Linear,
    blocks: Vec<DenoiseBlock>,
    norm_out: usize,
    readout: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    hist_in: Linear,
    target_in: Option<Linear>,
    bos: Option<usize>,
    queries: Option<usize>,
    context: Option<usize>,
    enc_pos: usize,
    dec_pos: Option<usize>,
    encoder: Vec<EncoderBlock>,
    enc_norm: usize,
    decoder: Vec<DecoderBlock>,
    dec_norm: usize,
    denoiser: Option<Denoiser>,
    regression: Option<Linear>,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
    Normal,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal => {
                let dist = Normal::new(0.0, 0.02).expect("valid std");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Xavier => {
                let (fan_in, fan_out) = (shape[0], shape[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-a..a)).collect()
            }
        };
        self.store.push(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.w"), &[fan_in, fan_out], Init::Xavier),
            b: self.add(format!("{name}.b"), &[fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> usize {
        self.add(format!("{name}.g"), &[d], Init::Ones)
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ff(&mut self, name: &str, d: usize, mult: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, d * mult),
            down: self.linear(&format!("{name}.down"), d * mult, d),
        }
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, Layout) {
    let d = cfg.d_model;
    let p = cfg.patch_size;
    let mut b = Builder {
        store: ParamStore::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let hist_in = b.linear("embed.hist", p, d);
    let (target_in, bos, queries, dec_pos) = if cfg.autoregressive {
        let target_in = b.linear("embed.target", p, d);
        let bos = b.add("embed.bos".into(), &[1, d], Init::Normal);
        let pos = b.add("embed.dec_pos".into(), &[cfg.n_pred_patches(), d], Init::Normal);
        (Some(target_in), Some(bos), None, Some(pos))
    } else {
        let q = b.add("embed.queries".into(), &[cfg.n_pred_patches(), d], Init::Normal);
        (None, None, Some(q), None)
    };
    let context = (cfg.n_context_tokens > 0)
        .then(|| b.add("embed.context".into(), &[cfg.context_vocab, d], Init::Normal));
    let enc_pos = b.add("embed.enc_pos".into(), &[cfg.n_hist_patches(), d], Init::Normal);

    let encoder = (0..cfg.n_enc_layers)
        .map(|i| EncoderBlock {
            norm_attn: b.norm(&format!("enc.{i}.norm_attn"), d),
            attn: b.attention(&format!("enc.{i}.attn"), d),
            norm_ff: b.norm(&format!("enc.{i}.norm_ff"), d),
            ff: b.ff(&format!("enc.{i}.ff"), d, cfg.ff_mult),
        })
        .collect();
    let enc_norm = b.norm("enc.norm", d);

    let decoder = (0..cfg.n_dec_layers)
        .map(|i| DecoderBlock {
            norm_self: b.norm(&format!("dec.{i}.norm_self"), d),
            self_attn: b.attention(&format!("dec.{i}.self_attn"), d),
            norm_cross: b.norm(&format!("dec.{i}.norm_cross"), d),
            cross_attn: b.attention(&format!("dec.{i}.cross_attn"), d),
            norm_ff: b.norm(&format!("dec.{i}.norm_ff"), d),
            ff: b.ff(&format!("dec.{i}.ff"), d, cfg.ff_mult),
        })
        .collect();
    let dec_norm = b.norm("dec.norm", d);

    let (denoiser, regression) = if cfg.flow_head() {
        let noisy_in = b.linear("denoise.noisy_in", p, d);
        let time_hidden = b.linear("denoise.time.hidden", TIME_FEATURES, d);
        let time_out = b.linear("denoise.time.out", d, d);
        let blocks = (0..cfg.n_denoise_layers)
            .map(|i| DenoiseBlock {
                norm_query: b.norm(&format!("denoise.{i}.norm_query"), d),
                norm_cond: b.norm(&format!("denoise.{i}.norm_cond"), d),
                cross_attn: b.attention(&format!("denoise.{i}.cross_attn"), d),
                norm_ff: b.norm(&format!("denoise.{i}.norm_ff"), d),
                ff: b.ff(&format!("denoise.{i}.ff"), d, cfg.ff_mult),
            })
            .collect();
        let norm_out = b.norm("denoise.norm", d);
        let readout = b.linear("denoise.readout", d, p);
        (
            Some(Denoiser {
                noisy_in,
                time_hidden,
                time_out,
                blocks,
                norm_out,
                readout,
            }),
            None,
        )
    } else {
        (None, Some(b.linear("regress.readout", d, p)))
    };

    let layout = Layout {
        hist_in,
        target_in,
        bos,
        queries,
        context,
        enc_pos,
        dec_pos,
        encoder,
        enc_norm,
        decoder,
        dec_norm,
        denoiser,
        regression,
    };
    (b.store, layout)
}

/// Parameters bound onto one tape, indexed like the parameter store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars already on a tape, in parameter-store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<usize> for Bound {
    type Output = Var;

    fn index(&self, i: usize) -> &Var {
        &self.vars[i]
    }
}

/// Sinusoidal features of (t, r, r - t). Heads other than mean velocity
/// are conditioned on t alone, so their r slots are fed zeros.
pub fn time_features(t: f64, r: f64, head: HeadKind) -> Tensor {
    let (r, span) = if head == HeadKind::MeanVelocity {
        (r, r - t)
    } else {
        (0.0, 0.0)
    };
    let mut data = Vec::with_capacity(TIME_FEATURES);
    for s in [t, r, span] {
        for k in 0..TIME_FREQUENCIES {
            let w = PI * 2f64.powf(k as f64 / 2.0);
            data.push((w * s).sin());
            data.push((w * s).cos());
        }
    }
    Tensor::matrix(1, TIME_FEATURES, data).expect("feature width")
}

/// The full network with its parameters.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Backbone {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, seed);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Adopts existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (reference, layout) = build(&config, 0);
        if reference.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for i in 0..reference.len() {
            if reference.name(i) != params.name(i) || reference.get(i).shape() != params.get(i).shape() {
                return Err(Error::Config(format!(
                    "parameter {i}: expected '{}' {:?}, found '{}' {:?}",
                    reference.name(i),
                    reference.get(i).shape(),
                    params.name(i),
                    params.get(i).shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Number of scalar parameters for a configuration.
    pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
        config.validate()?;
        Ok(build(config, 0).0.num_scalars())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Index of the learned begin-of-sequence vector, if the decoder is autoregressive.
    pub fn bos_index(&self) -> Option<usize> {
        self.layout.bos
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .tensors()
                .iter()
                .map(|t| tape.param(t, requires_grad))
                .collect(),
        }
    }

    fn linear(&self, tape: &mut Tape<'_>, b: &Bound, l: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b[l.w])?;
        tape.add_bias(y, b[l.b])
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        a: Attention,
        query: Var,
        memory: Var,
        mask: Option<CausalMask>,
    ) -> Result<Var> {
        let q = self.linear(tape, b, a.q, query)?;
        let k = self.linear(tape, b, a.k, memory)?;
        let v = self.linear(tape, b, a.v, memory)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = match mask {
                Some(m) => tape.softmax_masked(scores, m),
                None => tape.softmax(scores),
            };
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        self.linear(tape, b, a.o, joined)
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, b: &Bound, f: FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(tape, b, f.up, x)?;
        let h = tape.gelu(h);
        self.linear(tape, b, f.down, h)
    }

    fn patches(&self, values: &[f64], n_patches: usize) -> Result<Tensor> {
        let p = self.config.patch_size;
        let mut data = values.to_vec();
        data.resize(n_patches * p, 0.0);
        Tensor::matrix(n_patches, p, data)
    }

    /// Projects a history window (length L) or target window (length H,
    /// right-padded) into patch embeddings plus positional embeddings.
    pub fn embed_patches(&self, tape: &mut Tape<'_>, b: &Bound, values: &[f64], stream: Stream) -> Result<Var> {
        match stream {
            Stream::History => {
                if values.len() != self.config.look_back {
                    return Err(Error::InvalidArgument(format!(
                        "history length {} != look_back {}",
                        values.len(),
                        self.config.look_back
                    )));
                }
                let x = self.patches(values, self.config.n_hist_patches())?;
                let x = tape.constant(x);
                let e = self.linear(tape, b, self.layout.hist_in, x)?;
                tape.add(e, b[self.layout.enc_pos])
            }
            Stream::Target => {
                if values.len() != self.config.horizon {
                    return Err(Error::InvalidArgument(format!(
                        "target length {} != horizon {}",
                        values.len(),
                        self.config.horizon
                    )));
                }
                self.embed_target_patches(tape, b, values, 0)
            }
        }
    }

    /// Embeds consecutive target patches starting at patch index `first`.
    /// `values` is right-padded with zeros to a whole number of patches.
    pub fn embed_target_patches(&self, tape: &mut Tape<'_>, b: &Bound, values: &[f64], first: usize) -> Result<Var> {
        let (lin, pos) = match (self.layout.target_in, self.layout.dec_pos) {
            (Some(l), Some(p)) => (l, p),
            _ => {
                return Err(Error::InvalidArgument(
                    "target embeddings need an autoregressive decoder".into(),
                ))
            }
        };
        let n = values.len().div_ceil(self.config.patch_size);
        if n == 0 || first + n > self.config.n_pred_patches() {
            return Err(Error::InvalidArgument(format!(
                "target patches {first}..{} exceed the {} patches of horizon {}",
                first + n,
                self.config.n_pred_patches(),
                self.config.horizon
            )));
        }
        let x = tape.constant(self.patches(values, n)?);
        let e = self.linear(tape, b, lin, x)?;
        let pos = tape.slice(b[pos], 0, first, first + n)?;
        tape.add(e, pos)
    }

    /// Bidirectional encoder over `[context tokens; history patches]`.
    pub fn encode(&self, tape: &mut Tape<'_>, b: &Bound, context: &[usize], hist: Var) -> Result<Var> {
        if context.len() != self.config.n_context_tokens {
            return Err(Error::InvalidArgument(format!(
                "expected {} context tokens, got {}",
                self.config.n_context_tokens,
                context.len()
            )));
        }
        let mut x = match self.layout.context {
            Some(table) => {
                let ctx = tape.embedding(b[table], context)?;
                tape.concat(&[ctx, hist], 0)?
            }
            None => hist,
        };
        for blk in &self.layout.encoder {
            let n = tape.rms_norm(x, b[blk.norm_attn])?;
            let a = self.attention(tape, b, blk.attn, n, n, None)?;
            x = tape.add(x, a)?;
            let n = tape.rms_norm(x, b[blk.norm_ff])?;
            let f = self.feed_forward(tape, b, blk.ff, n)?;
            x = tape.add(x, f)?;
        }
        tape.rms_norm(x, b[self.layout.enc_norm])
    }

    /// `[BOS; targets[..N-1]]`.
    pub fn shift_inputs(&self, tape: &mut Tape<'_>, b: &Bound, targets: Var) -> Result<Var> {
        let bos = self
            .layout
            .bos
            .ok_or_else(|| Error::InvalidArgument("shift_inputs needs an autoregressive decoder".into()))?;
        let n = tape.shape(targets)[0];
        if n <= 1 {
            return Ok(b[bos]);
        }
        let kept = tape.slice(targets, 0, 0, n - 1)?;
        tape.concat(&[b[bos], kept], 0)
    }

    /// Decoder input for training: shifted targets, or the learned queries
    /// when the decoder is not autoregressive (the targets are then unused).
    pub fn decoder_inputs(&self, tape: &mut Tape<'_>, b: &Bound, targets: &[f64]) -> Result<Var> {
        if let Some(q) = self.layout.queries {
            return Ok(b[q]);
        }
        let emb = self.embed_patches(tape, b, targets, Stream::Target)?;
        self.shift_inputs(tape, b, emb)
    }

    /// Learned decoder queries (non-autoregressive configuration).
    pub fn learned_queries(&self, b: &Bound) -> Option<Var> {
        self.layout.queries.map(|q| b[q])
    }

    /// Causal decoder: self-attention restricted to earlier positions, then
    /// cross-attention over every encoder state.
    pub fn decode(&self, tape: &mut Tape<'_>, b: &Bound, dec_in: Var, enc_out: Var) -> Result<Var> {
        let mut x = dec_in;
        for blk in &self.layout.decoder {
            let n = tape.rms_norm(x, b[blk.norm_self])?;
            let a = self.attention(tape, b, blk.self_attn, n, n, Some(CausalMask::new(0)))?;
            x = tape.add(x, a)?;
            let n = tape.rms_norm(x, b[blk.norm_cross])?;
            let c = self.attention(tape, b, blk.cross_attn, n, enc_out, None)?;
            x = tape.add(x, c)?;
            let n = tape.rms_norm(x, b[blk.norm_ff])?;
            let f = self.feed_forward(tape, b, blk.ff, n)?;
            x = tape.add(x, f)?;
        }
        tape.rms_norm(x, b[self.layout.dec_norm])
    }

    /// Velocity for noisy patches `offset..offset + n` given decoder states
    /// `cond` (at least `offset + n` rows). Query `i` sees `cond[..=offset + i]`.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise_velocity(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        noisy: Var,
        t: f64,
        r: f64,
        cond: Var,
        offset: usize,
    ) -> Result<Var> {
        let dn = self
            .layout
            .denoiser
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("regression head has no denoiser".into()))?;
        let head = self.config.head;
        let interval_ok = if head == HeadKind::MeanVelocity {
            (0.0..=1.0).contains(&t) && (t..=1.0).contains(&r)
        } else {
            (0.0..=1.0).contains(&t)
        };
        if !interval_ok {
            return Err(Error::InvalidArgument(format!(
                "denoise_velocity: need 0 <= t <= r <= 1, got t={t}, r={r}"
            )));
        }
        let shape = tape.shape(noisy).to_vec();
        if shape.len() != 2 || shape[1] != self.config.patch_size {
            return Err(Error::shape("denoise_velocity", &shape, &[0, self.config.patch_size]));
        }
        let n = shape[0];
        let cond_rows = tape.shape(cond)[0];
        if cond_rows < offset + n {
            return Err(Error::shape("denoise_velocity", &shape, tape.shape(cond)));
        }
        let cond = if cond_rows > offset + n {
            tape.slice(cond, 0, 0, offset + n)?
        } else {
            cond
        };

        let feats = tape.constant(time_features(t, r, head));
        let temb = self.linear(tape, b, dn.time_hidden, feats)?;
        let temb = tape.silu(temb);
        let temb = self.linear(tape, b, dn.time_out, temb)?;

        let h = self.linear(tape, b, dn.noisy_in, noisy)?;
        let h = tape.add_bias(h, temb)?;
        // Token j also carries its own aligned condition state.
        let aligned = if offset == 0 && cond_rows == n {
            cond
        } else {
            tape.slice(cond, 0, offset, offset + n)?
        };
        let mut h = tape.add(h, aligned)?;
        for blk in &dn.blocks {
            let q = tape.rms_norm(h, b[blk.norm_query])?;
            let kv = tape.rms_norm(cond, b[blk.norm_cond])?;
            let a = self.attention(tape, b, blk.cross_attn, q, kv, Some(CausalMask::new(offset)))?;
            h = tape.add(h, a)?;
            let nf = tape.rms_norm(h, b[blk.norm_ff])?;
            let f = self.feed_forward(tape, b, blk.ff, nf)?;
            h = tape.add(h, f)?;
        }
        let h = tape.rms_norm(h, b[dn.norm_out])?;
        self.linear(tape, b, dn.readout, h)
    }

    /// Direct patch regression from decoder states (flow head disabled).
    pub fn regress(&self, tape: &mut Tape<'_>, b: &Bound, z_dec_out: Var) -> Result<Var> {
        let l = self
            .layout
            .regression
            .ok_or_else(|| Error::InvalidArgument("model has no regression read-out".into()))?;
        self.linear(tape, b, l, z_dec_out)
    }

    /// Binds decoder states so the denoiser can be queried as a plain field.
    pub fn velocity_field(&self, cond: Tensor, offset: usize) -> PatchVelocity<'_> {
        PatchVelocity {
            model: self,
            cond,
            offset,
        }
    }
}

/// Denoiser with fixed decoder states, evaluated without gradients.
pub struct PatchVelocity<'m> {
    model: &'m Backbone,
    cond: Tensor,
    offset: usize,
}

impl VelocityField for PatchVelocity<'_> {
    fn velocity(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.model.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(self.cond.clone());
        let u = self.model.denoise_velocity(&mut tape, &b, xv, t, r, cv, self.offset)?;
        Ok(tape.value(u).clone())
    }
}
