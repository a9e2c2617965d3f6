use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::charset::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::image::LineImage;
use crate::nn::{
    add_into, log_softmax_rows, relu_backward, relu_inplace, sinusoidal_positions, AttentionCache, Conv2d, ConvCache,
    Embedding, Group, KeyMask, LayerNorm, LayerNormCache, Linear, MaxPool, MultiHeadAttention, Param, Real,
};

use super::config::ModelConfig;

/// A padded batch of line images, as normalized ink intensities `[B, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct ImageBatch<T> {
    pub pixels: Vec<T>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// Per-image width rounded up to the horizontal downscale factor.
    pub valid: Vec<usize>,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(images: &[&LineImage], height: usize, multiple: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Shape("empty image batch".into()));
        }
        for img in images {
            if img.height != height {
                return Err(Error::Shape(format!("image height {} != expected {height}", img.height)));
            }
            if img.width == 0 {
                return Err(Error::Shape("image has zero width".into()));
            }
        }
        let valid: Vec<usize> = images.iter().map(|i| i.padded_width(multiple)).collect();
        let width = *valid.iter().max().expect("non-empty");
        let mut pixels = vec![T::zero(); images.len() * height * width];
        for (b, img) in images.iter().enumerate() {
            for y in 0..height {
                for x in 0..img.width {
                    pixels[(b * height + y) * width + x] = T::lit(img.ink(x, y) as f64);
                }
            }
        }
        Ok(ImageBatch { pixels, batch: images.len(), height, width, valid })
    }
}

/// Encoder output: `memory` is `[batch * seq_len, hidden]`; only the first
/// `lens[b]` positions of each row block are valid.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub memory: Vec<T>,
    pub batch: usize,
    pub seq_len: usize,
    pub lens: Vec<usize>,
}

/// Which parts of the network need a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardScope {
    pub encoder: bool,
    pub backbone: bool,
}

impl BackwardScope {
    pub const FULL: BackwardScope = BackwardScope { encoder: true, backbone: true };
}

/// Result of a teacher-forced pass.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    /// Mean negative log-likelihood per target token (EOS included).
    pub loss: f64,
    /// Log-probabilities of each gold token, per line, EOS last.
    pub logprobs: Vec<Vec<f64>>,
}

/// Output of greedy decoding for one line.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Emitted token ids, including the terminating EOS when produced.
    pub tokens: Vec<u32>,
    /// Natural-log probability of each emitted token.
    pub per_token_logprob: Vec<f64>,
    /// Decoded characters (EOS stripped).
    pub text: String,
    /// Set when `max_decode_len` was reached before EOS.
    pub truncated: bool,
}

impl DecodeResult {
    /// Cumulative log-probability over every emitted token.
    pub fn confidence(&self) -> f64 {
        self.per_token_logprob.iter().sum()
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock<T> {
    ln1: LayerNorm<T>,
    attn: MultiHeadAttention<T>,
    ln2: LayerNorm<T>,
    ff1: Linear<T>,
    ff2: Linear<T>,
}

struct EncoderBlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    h2: Vec<T>,
    f1: Vec<T>,
}

impl<T: Real> EncoderBlock<T> {
    fn new(i: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.hidden_dim, cfg.ff_dim);
        let p = format!("encoder.{i}");
        EncoderBlock {
            ln1: LayerNorm::new(&format!("{p}.ln1"), Group::EncoderRest, d),
            attn: MultiHeadAttention::new(&format!("{p}.self_attn"), Group::EncoderMha, d, cfg.n_heads, rng),
            ln2: LayerNorm::new(&format!("{p}.ln2"), Group::EncoderRest, d),
            ff1: Linear::new(&format!("{p}.ff1"), Group::EncoderRest, d, f, rng),
            ff2: Linear::new(&format!("{p}.ff2"), Group::EncoderRest, f, d, rng),
        }
    }

    fn forward(&self, x: &[T], batch: usize, t: usize, lens: &[usize]) -> (Vec<T>, EncoderBlockCache<T>) {
        let rows = batch * t;
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h1, None, batch, t, t, &KeyMask::Lengths(lens.to_vec()));
        let mut x1 = x.to_vec();
        add_into(&mut x1, &a);
        let (h2, ln2) = self.ln2.forward(&x1);
        let mut f1 = self.ff1.forward(&h2, rows);
        relu_inplace(&mut f1);
        let f2 = self.ff2.forward(&f1, rows);
        add_into(&mut x1, &f2);
        (x1, EncoderBlockCache { ln1, attn, ln2, h2, f1 })
    }

    fn backward(&mut self, c: &EncoderBlockCache<T>, dy: Vec<T>, rows: usize) -> Vec<T> {
        let mut df1 = self.ff2.backward(&c.f1, &dy, rows, true).expect("dx");
        relu_backward(&c.f1, &mut df1);
        let dh2 = self.ff1.backward(&c.h2, &df1, rows, true).expect("dx");
        let mut dx1 = dy;
        add_into(&mut dx1, &self.ln2.backward(&c.ln2, &dh2));
        let (dh1, _) = self.attn.backward(&c.attn, &dx1, false);
        add_into(&mut dx1, &self.ln1.backward(&c.ln1, &dh1));
        dx1
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.ln1.params().into();
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.ln1.params_mut().into();
        v.extend(self.attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock<T> {
    ln1: LayerNorm<T>,
    self_attn: MultiHeadAttention<T>,
    ln2: LayerNorm<T>,
    cross_attn: MultiHeadAttention<T>,
    ln3: LayerNorm<T>,
    ff1: Linear<T>,
    ff2: Linear<T>,
}

struct DecoderBlockCache<T> {
    ln1: LayerNormCache<T>,
    self_attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    cross_attn: AttentionCache<T>,
    ln3: LayerNormCache<T>,
    h3: Vec<T>,
    f1: Vec<T>,
}

impl<T: Real> DecoderBlock<T> {
    fn new(i: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.hidden_dim, cfg.ff_dim);
        let p = format!("decoder.{i}");
        DecoderBlock {
            ln1: LayerNorm::new(&format!("{p}.ln1"), Group::DecoderRest, d),
            self_attn: MultiHeadAttention::new(&format!("{p}.self_attn"), Group::DecoderMha, d, cfg.n_heads, rng),
            ln2: LayerNorm::new(&format!("{p}.ln2"), Group::DecoderRest, d),
            cross_attn: MultiHeadAttention::new(&format!("{p}.cross_attn"), Group::DecoderMha, d, cfg.n_heads, rng),
            ln3: LayerNorm::new(&format!("{p}.ln3"), Group::DecoderRest, d),
            ff1: Linear::new(&format!("{p}.ff1"), Group::DecoderRest, d, f, rng),
            ff2: Linear::new(&format!("{p}.ff2"), Group::DecoderRest, f, d, rng),
        }
    }

    fn forward(&self, x: &[T], enc: &Encoded<T>, tq: usize) -> (Vec<T>, DecoderBlockCache<T>) {
        let b = enc.batch;
        let rows = b * tq;
        let (h1, ln1) = self.ln1.forward(x);
        let (a, self_attn) = self.self_attn.forward(&h1, None, b, tq, tq, &KeyMask::Causal);
        let mut x1 = x.to_vec();
        add_into(&mut x1, &a);
        let (h2, ln2) = self.ln2.forward(&x1);
        let (c, cross_attn) =
            self.cross_attn
                .forward(&h2, Some(&enc.memory), b, tq, enc.seq_len, &KeyMask::Lengths(enc.lens.clone()));
        add_into(&mut x1, &c);
        let (h3, ln3) = self.ln3.forward(&x1);
        let mut f1 = self.ff1.forward(&h3, rows);
        relu_inplace(&mut f1);
        add_into(&mut x1, &self.ff2.forward(&f1, rows));
        (x1, DecoderBlockCache { ln1, self_attn, ln2, cross_attn, ln3, h3, f1 })
    }

    fn backward(&mut self, c: &DecoderBlockCache<T>, dy: Vec<T>, rows: usize, need_mem: bool) -> (Vec<T>, Option<Vec<T>>) {
        let mut df1 = self.ff2.backward(&c.f1, &dy, rows, true).expect("dx");
        relu_backward(&c.f1, &mut df1);
        let dh3 = self.ff1.backward(&c.h3, &df1, rows, true).expect("dx");
        let mut dx = dy;
        add_into(&mut dx, &self.ln3.backward(&c.ln3, &dh3));
        let (dh2, dmem) = self.cross_attn.backward(&c.cross_attn, &dx, need_mem);
        add_into(&mut dx, &self.ln2.backward(&c.ln2, &dh2));
        let (dh1, _) = self.self_attn.backward(&c.self_attn, &dx, false);
        add_into(&mut dx, &self.ln1.backward(&c.ln1, &dh1));
        (dx, dmem)
    }

    /// One incremental step: `x` is `[batch, dim]` for position `pos`.
    fn step(&self, x: &mut [T], state: &mut StepState<T>, cross: &(Vec<T>, Vec<T>), enc: &Encoded<T>, pos: usize) {
        let b = enc.batch;
        let d = x.len() / b;
        let (h1, _) = self.ln1.forward(x);
        let (k, v) = self.self_attn.project_kv(&h1, b);
        for i in 0..b {
            let dst = (i * state.cap + pos) * d;
            state.k[dst..dst + d].copy_from_slice(&k[i * d..(i + 1) * d]);
            state.v[dst..dst + d].copy_from_slice(&v[i * d..(i + 1) * d]);
        }
        let lens = vec![pos + 1; b];
        let a = self.self_attn.attend_one(&h1, b, &state.k, &state.v, state.cap, &lens);
        add_into(x, &a);
        let (h2, _) = self.ln2.forward(x);
        let c = self.cross_attn.attend_one(&h2, b, &cross.0, &cross.1, enc.seq_len, &enc.lens);
        add_into(x, &c);
        let (h3, _) = self.ln3.forward(x);
        let mut f1 = self.ff1.forward(&h3, b);
        relu_inplace(&mut f1);
        add_into(x, &self.ff2.forward(&f1, b));
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.ln1.params().into();
        v.extend(self.self_attn.params());
        v.extend(self.ln2.params());
        v.extend(self.cross_attn.params());
        v.extend(self.ln3.params());
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.ln1.params_mut().into();
        v.extend(self.self_attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.cross_attn.params_mut());
        v.extend(self.ln3.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v
    }
}

struct StepState<T> {
    k: Vec<T>,
    v: Vec<T>,
    cap: usize,
}

struct ConvStep<T> {
    input: Vec<T>,
    cache: ConvCache<T>,
    h: usize,
    w: usize,
}

struct EncoderCache<T> {
    convs: Vec<ConvStep<T>>,
    flat: Vec<T>,
    feat_c: usize,
    feat_h: usize,
    blocks: Vec<EncoderBlockCache<T>>,
    norm: LayerNormCache<T>,
}

/// Convolutional backbone + transformer encoder-decoder line recognizer.
#[derive(Debug, Clone)]
pub struct OcrModel<T> {
    pub config: ModelConfig,
    convs: Vec<Conv2d<T>>,
    pools: Vec<Option<MaxPool>>,
    proj: Linear<T>,
    enc_blocks: Vec<EncoderBlock<T>>,
    enc_norm: LayerNorm<T>,
    embed: Embedding<T>,
    dec_blocks: Vec<DecoderBlock<T>>,
    dec_norm: LayerNorm<T>,
    head: Linear<T>,
}

impl<T: Real> OcrModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let mut convs = Vec::new();
        let mut pools = Vec::new();
        let mut c_in = 1;
        for (i, l) in config.conv.iter().enumerate() {
            convs.push(Conv2d::new(&format!("backbone.conv{i}"), Group::ConvBackbone, c_in, l.channels, &mut rng));
            pools.push((l.pool != (1, 1)).then_some(MaxPool { ph: l.pool.0, pw: l.pool.1 }));
            c_in = l.channels;
        }
        let proj = Linear::new("backbone.flatten_proj", Group::ConvBackbone, config.flat_dim(), d, &mut rng);
        let enc_blocks = (0..config.n_encoder_blocks).map(|i| EncoderBlock::new(i, &config, &mut rng)).collect();
        let enc_norm = LayerNorm::new("encoder.norm", Group::EncoderRest, d);
        let v = config.vocab.vocab_size();
        let embed = Embedding::new("decoder.embed", Group::EmbedAndHead, v, d, &mut rng);
        let dec_blocks = (0..config.n_decoder_blocks).map(|i| DecoderBlock::new(i, &config, &mut rng)).collect();
        let dec_norm = LayerNorm::new("decoder.norm", Group::DecoderRest, d);
        let head = Linear::with_bound("decoder.head", Group::EmbedAndHead, d, v, 0.05, &mut rng);
        Ok(OcrModel { config, convs, pools, proj, enc_blocks, enc_norm, embed, dec_blocks, dec_norm, head })
    }

    /// Every parameter tensor in canonical order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.extend(c.params());
        }
        v.extend(self.proj.params());
        for b in &self.enc_blocks {
            v.extend(b.params());
        }
        v.extend(self.enc_norm.params());
        v.push(&self.embed.table);
        for b in &self.dec_blocks {
            v.extend(b.params());
        }
        v.extend(self.dec_norm.params());
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.extend(c.params_mut());
        }
        v.extend(self.proj.params_mut());
        for b in &mut self.enc_blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.enc_norm.params_mut());
        v.push(&mut self.embed.table);
        for b in &mut self.dec_blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.dec_norm.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Copy of this model with another element type.
    pub fn cast<U: Real>(&self) -> OcrModel<U> {
        let mut out = OcrModel::<U>::new(self.config.clone(), 0).expect("config already validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    pub fn batch(&self, images: &[&LineImage]) -> Result<ImageBatch<T>> {
        ImageBatch::new(images, self.config.height, self.config.horizontal_downscale)
    }

    fn encode_impl(&self, batch: &ImageBatch<T>) -> Result<(Encoded<T>, EncoderCache<T>)> {
        if batch.height != self.config.height {
            return Err(Error::Shape(format!("image height {} != model height {}", batch.height, self.config.height)));
        }
        let bsz = batch.batch;
        let (mut h, mut w) = (batch.height, batch.width);
        let mut valid = batch.valid.clone();
        let mut x = batch.pixels.clone();
        let mut steps = Vec::with_capacity(self.convs.len());
        for (conv, pool) in self.convs.iter().zip(&self.pools) {
            let cache = conv.forward(&x, bsz, h, w, &valid, *pool);
            let next = cache.out.clone();
            steps.push(ConvStep { input: std::mem::replace(&mut x, next), cache, h, w });
            if let Some(p) = pool {
                h /= p.ph;
                w /= p.pw;
                valid.iter_mut().for_each(|v| *v /= p.pw);
            }
        }
        let c = self.convs.last().expect("non-empty backbone").c_out;
        let t = w;
        let flat_dim = c * h;
        let mut flat = vec![T::zero(); bsz * t * flat_dim];
        for b in 0..bsz {
            for ch in 0..c {
                for y in 0..h {
                    let src = &x[((b * c + ch) * h + y) * w..((b * c + ch) * h + y + 1) * w];
                    for (col, &v) in src.iter().enumerate() {
                        flat[(b * t + col) * flat_dim + ch * h + y] = v;
                    }
                }
            }
        }
        let d = self.config.hidden_dim;
        let mut hidden = self.proj.forward(&flat, bsz * t);
        let pe = sinusoidal_positions::<T>(t, d);
        for row in hidden.chunks_mut(t * d) {
            add_into(row, &pe);
        }
        let mut blocks = Vec::with_capacity(self.enc_blocks.len());
        for blk in &self.enc_blocks {
            let (out, cache) = blk.forward(&hidden, bsz, t, &valid);
            hidden = out;
            blocks.push(cache);
        }
        let (memory, norm) = self.enc_norm.forward(&hidden);
        let enc = Encoded { memory, batch: bsz, seq_len: t, lens: valid };
        Ok((enc, EncoderCache { convs: steps, flat, feat_c: c, feat_h: h, blocks, norm }))
    }

    /// Feature sequence for a batch of images.
    pub fn encode(&self, batch: &ImageBatch<T>) -> Result<Encoded<T>> {
        Ok(self.encode_impl(batch)?.0)
    }

    fn encoder_backward(&mut self, cache: EncoderCache<T>, dmem: Vec<T>, bsz: usize, t: usize, scope: BackwardScope) {
        let rows = bsz * t;
        let mut dx = self.enc_norm.backward(&cache.norm, &dmem);
        for (blk, c) in self.enc_blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = blk.backward(c, dx, rows);
        }
        if !scope.backbone {
            return;
        }
        let dflat = self.proj.backward(&cache.flat, &dx, rows, true).expect("dx");
        let (c, h) = (cache.feat_c, cache.feat_h);
        let w = t;
        let flat_dim = c * h;
        let mut dcur = vec![T::zero(); bsz * c * h * w];
        for b in 0..bsz {
            for ch in 0..c {
                for y in 0..h {
                    for col in 0..w {
                        dcur[((b * c + ch) * h + y) * w + col] = dflat[(b * t + col) * flat_dim + ch * h + y];
                    }
                }
            }
        }
        for (i, step) in cache.convs.into_iter().enumerate().rev() {
            let conv = &mut self.convs[i];
            let need_dx = i > 0;
            dcur = conv
                .backward(&step.input, &step.cache, &dcur, bsz, step.h, step.w, need_dx)
                .unwrap_or_default();
        }
    }

    fn decoder_inputs(&self, targets: &[Vec<u32>]) -> (Vec<u32>, Vec<u32>, usize) {
        let tq = targets.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
        let mut inp = Vec::with_capacity(targets.len() * tq);
        let mut gold = Vec::with_capacity(targets.len() * tq);
        for t in targets {
            inp.push(BOS);
            inp.extend_from_slice(t);
            inp.resize(inp.len() + tq - 1 - t.len(), PAD);
            gold.extend_from_slice(t);
            gold.push(EOS);
            gold.resize(gold.len() + tq - 1 - t.len(), PAD);
        }
        (inp, gold, tq)
    }

    fn check_targets(&self, targets: &[Vec<u32>], batch: usize) -> Result<()> {
        if targets.len() != batch {
            return Err(Error::Shape(format!("{} transcripts for {batch} images", targets.len())));
        }
        let v = self.config.vocab.vocab_size() as u32;
        if targets.iter().flatten().any(|&t| t >= v) {
            return Err(Error::Shape("transcript token outside the character vocabulary".into()));
        }
        Ok(())
    }

    /// Shared teacher-forced forward. Returns per-line log-probs, the loss and,
    /// when `train`, the gradient wrt logits plus decoder caches.
    fn decode_teacher_forced(
        &self,
        enc: &Encoded<T>,
        targets: &[Vec<u32>],
    ) -> (TeacherForced, Vec<T>, Vec<u32>, Vec<u32>, Vec<DecoderBlockCache<T>>, LayerNormCache<T>, Vec<T>, usize) {
        let d = self.config.hidden_dim;
        let v = self.config.vocab.vocab_size();
        let (inp, gold, tq) = self.decoder_inputs(targets);
        let mut x = self.embed.forward(&inp);
        let pe = sinusoidal_positions::<T>(tq, d);
        for row in x.chunks_mut(tq * d) {
            add_into(row, &pe);
        }
        let mut caches = Vec::with_capacity(self.dec_blocks.len());
        for blk in &self.dec_blocks {
            let (out, c) = blk.forward(&x, enc, tq);
            x = out;
            caches.push(c);
        }
        let (hn, norm) = self.dec_norm.forward(&x);
        let mut logp = self.head.forward(&hn, enc.batch * tq);
        log_softmax_rows(&mut logp, v);
        let mut per_line = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, t) in targets.iter().enumerate() {
            let lp: Vec<f64> = (0..=t.len())
                .map(|i| {
                    let r = b * tq + i;
                    logp[r * v + gold[r] as usize].to_f64().unwrap()
                })
                .collect();
            total -= lp.iter().sum::<f64>();
            count += lp.len();
            per_line.push(lp);
        }
        let tf = TeacherForced { loss: total / count as f64, logprobs: per_line };
        (tf, logp, inp, gold, caches, norm, hn, tq)
    }

    /// Teacher-forced loss without gradients.
    pub fn teacher_forced(&self, batch: &ImageBatch<T>, targets: &[Vec<u32>]) -> Result<TeacherForced> {
        self.check_targets(targets, batch.batch)?;
        let enc = self.encode(batch)?;
        Ok(self.decode_teacher_forced(&enc, targets).0)
    }

    /// Teacher-forced loss from precomputed encoder memory.
    pub fn teacher_forced_encoded(&self, enc: &Encoded<T>, targets: &[Vec<u32>]) -> Result<TeacherForced> {
        self.check_targets(targets, enc.batch)?;
        Ok(self.decode_teacher_forced(enc, targets).0)
    }

    /// Teacher-forced loss plus gradient accumulation into every parameter on
    /// the path selected by `scope`.
    pub fn loss_and_grad(&mut self, batch: &ImageBatch<T>, targets: &[Vec<u32>], scope: BackwardScope) -> Result<TeacherForced> {
        self.check_targets(targets, batch.batch)?;
        let (enc, enc_cache) = self.encode_impl(batch)?;
        let (tf, logp, inp, gold, caches, norm, hn, tq) = self.decode_teacher_forced(&enc, targets);
        let v = self.config.vocab.vocab_size();
        let rows = enc.batch * tq;
        let count: usize = targets.iter().map(|t| t.len() + 1).sum();
        let inv = T::lit(1.0 / count as f64);
        let mut dlogits = vec![T::zero(); rows * v];
        for r in 0..rows {
            if gold[r] == PAD {
                continue;
            }
            let src = &logp[r * v..(r + 1) * v];
            let dst = &mut dlogits[r * v..(r + 1) * v];
            for (g, &l) in dst.iter_mut().zip(src) {
                *g = l.exp() * inv;
            }
            dst[gold[r] as usize] -= inv;
        }
        let dhn = self.head.backward(&hn, &dlogits, rows, true).expect("dx");
        let mut dx = self.dec_norm.backward(&norm, &dhn);
        let mut dmem = scope.encoder.then(|| vec![T::zero(); enc.memory.len()]);
        for (blk, c) in self.dec_blocks.iter_mut().zip(&caches).rev() {
            let (d, dm) = blk.backward(c, dx, rows, scope.encoder);
            dx = d;
            if let (Some(acc), Some(dm)) = (dmem.as_mut(), dm) {
                add_into(acc, &dm);
            }
        }
        self.embed.backward(&inp, &dx);
        if let Some(dmem) = dmem {
            self.encoder_backward(enc_cache, dmem, enc.batch, enc.seq_len, scope);
        }
        Ok(tf)
    }

    /// Greedy autoregressive decoding with cached self-attention keys.
    pub fn greedy_decode(&self, batch: &ImageBatch<T>) -> Result<Vec<DecodeResult>> {
        self.greedy_decode_limited(batch, self.config.max_decode_len)
    }

    pub fn greedy_decode_limited(&self, batch: &ImageBatch<T>, max_len: usize) -> Result<Vec<DecodeResult>> {
        let enc = self.encode(batch)?;
        Ok(self.greedy_decode_encoded(&enc, max_len))
    }

    /// Greedy decoding from precomputed encoder memory.
    pub fn greedy_decode_encoded(&self, enc: &Encoded<T>, max_len: usize) -> Vec<DecodeResult> {
        let b = enc.batch;
        let d = self.config.hidden_dim;
        let v = self.config.vocab.vocab_size();
        let cross: Vec<(Vec<T>, Vec<T>)> =
            self.dec_blocks.iter().map(|blk| blk.cross_attn.project_kv(&enc.memory, b * enc.seq_len)).collect();
        let mut states: Vec<StepState<T>> = self
            .dec_blocks
            .iter()
            .map(|_| StepState { k: vec![T::zero(); b * max_len * d], v: vec![T::zero(); b * max_len * d], cap: max_len })
            .collect();
        let pe = sinusoidal_positions::<T>(max_len, d);
        let mut results: Vec<DecodeResult> = (0..b)
            .map(|_| DecodeResult { tokens: Vec::new(), per_token_logprob: Vec::new(), text: String::new(), truncated: false })
            .collect();
        let mut done = vec![false; b];
        let mut current = vec![BOS; b];
        for pos in 0..max_len {
            let mut x = self.embed.forward(&current);
            for row in x.chunks_mut(d) {
                add_into(row, &pe[pos * d..(pos + 1) * d]);
            }
            for ((blk, state), kv) in self.dec_blocks.iter().zip(states.iter_mut()).zip(&cross) {
                blk.step(&mut x, state, kv, enc, pos);
            }
            let (hn, _) = self.dec_norm.forward(&x);
            let mut logp = self.head.forward(&hn, b);
            log_softmax_rows(&mut logp, v);
            for i in 0..b {
                if done[i] {
                    current[i] = PAD;
                    continue;
                }
                let row = &logp[i * v..(i + 1) * v];
                let (best, lp) = row
                    .iter()
                    .enumerate()
                    .fold((0usize, T::neg_infinity()), |acc, (j, &l)| if l > acc.1 { (j, l) } else { acc });
                results[i].tokens.push(best as u32);
                results[i].per_token_logprob.push(lp.to_f64().unwrap().min(0.0));
                current[i] = best as u32;
                if best as u32 == EOS {
                    done[i] = true;
                }
            }
            if done.iter().all(|&x| x) {
                break;
            }
        }
        for (r, &fin) in results.iter_mut().zip(&done) {
            r.truncated = !fin;
            r.text = self.config.vocab.decode(&r.tokens);
        }
        results
    }
}
