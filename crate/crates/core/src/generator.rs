//! Score-to-frames generator: encoder, duration predictor, length regulator,
//! decoder and output heads.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frontend::{g2p_expand, note_midi_to_logf0, G2PTable, MusicalScore, PhonemeSequence, ScoreEmbedding};
use crate::layers::{sinusoid_table, Conv1d, ForwardCtx, LayerNorm, Linear};
use crate::numerics::{multi_head_self_attention, ParamStore, Params, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Shape of one sequence block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_units: usize,
    pub conv_kernel: usize,
}

/// A `[T, d] -> [T, d]` block of the encoder or decoder stack.
pub trait SequenceBlock<R: Real>: Send + Sync {
    fn kind(&self) -> &'static str;
    fn spec(&self) -> &BlockSpec;
    fn forward(&self, tape: &mut Tape<R>, p: Params<'_, R>, x: Var, ctx: &mut ForwardCtx) -> Result<Var>;
}

pub type BlockFactory<R> =
    fn(&BlockSpec, &mut ParamStore<R>, &str, &mut ChaCha8Rng) -> Result<Box<dyn SequenceBlock<R>>>;

/// Named block constructors, selected by `GeneratorConfig::block`.
pub struct BlockRegistry<R> {
    factories: BTreeMap<&'static str, BlockFactory<R>>,
}

impl<R: Real> Default for BlockRegistry<R> {
    fn default() -> Self {
        let mut r = BlockRegistry {
            factories: BTreeMap::new(),
        };
        r.register("convfft", ConvFftBlock::boxed);
        r.register("fft", FftBlock::boxed);
        r
    }
}

impl<R: Real> BlockRegistry<R> {
    pub fn register(&mut self, name: &'static str, factory: BlockFactory<R>) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(
        &self,
        name: &str,
        spec: &BlockSpec,
        store: &mut ParamStore<R>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn SequenceBlock<R>>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown block type {name:?}; registered: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        if spec.heads == 0 || spec.d_model % spec.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                spec.d_model, spec.heads
            )));
        }
        if spec.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv_kernel must be odd, got {}", spec.conv_kernel)));
        }
        f(spec, store, prefix, rng)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl Attention {
    fn init<R: Real>(store: &mut ParamStore<R>, prefix: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut proj = |n: &str, rng: &mut ChaCha8Rng| Linear::init(store, &format!("{prefix}.mhsa.{n}"), d, d, false, rng);
        Ok(Attention {
            wq: proj("wq", rng)?,
            wk: proj("wk", rng)?,
            wv: proj("wv", rng)?,
            wo: proj("wo", rng)?,
            heads,
        })
    }

    fn forward<R: Real>(&self, tape: &mut Tape<R>, p: Params<'_, R>, x: Var) -> Result<Var> {
        let wq = tape.param(p, self.wq.w);
        let wk = tape.param(p, self.wk.w);
        let wv = tape.param(p, self.wv.w);
        let wo = tape.param(p, self.wo.w);
        Ok(multi_head_self_attention(tape, x, self.heads, wq, wk, wv, wo)?.output)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn init<R: Real>(store: &mut ParamStore<R>, prefix: &str, d: usize, inner: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::init(store, &format!("{prefix}.ffn.inner"), d, inner, true, rng)?,
            outer: Linear::init(store, &format!("{prefix}.ffn.outer"), inner, d, true, rng)?,
        })
    }

    fn forward<R: Real>(&self, tape: &mut Tape<R>, p: Params<'_, R>, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, p, h)
    }
}

/// Self-attention block with residual convolution units fused into the
/// attention residual.
pub struct ConvFftBlock {
    spec: BlockSpec,
    attention: Attention,
    units: Vec<(Conv1d, Conv1d)>,
    norm_attn: LayerNorm,
    ffn: FeedForward,
    norm_ffn: LayerNorm,
}

impl ConvFftBlock {
    pub fn init<R: Real>(spec: &BlockSpec, store: &mut ParamStore<R>, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = spec.d_model;
        let attention = Attention::init(store, prefix, d, spec.heads, rng)?;
        let mut units = Vec::with_capacity(spec.conv_units);
        for i in 0..spec.conv_units {
            let a = Conv1d::init(store, &format!("{prefix}.conv{i}.a"), d, d, spec.conv_kernel, rng)?;
            let b = Conv1d::init(store, &format!("{prefix}.conv{i}.b"), d, d, spec.conv_kernel, rng)?;
            units.push((a, b));
        }
        Ok(ConvFftBlock {
            spec: *spec,
            attention,
            units,
            norm_attn: LayerNorm::init(store, &format!("{prefix}.ln1"), d)?,
            ffn: FeedForward::init(store, prefix, d, spec.ffn_dim, rng)?,
            norm_ffn: LayerNorm::init(store, &format!("{prefix}.ln2"), d)?,
        })
    }

    fn boxed<R: Real>(
        spec: &BlockSpec,
        store: &mut ParamStore<R>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn SequenceBlock<R>>> {
        Ok(Box::new(Self::init(spec, store, prefix, rng)?))
    }

    /// Sum of the increments of the sequential residual units, `[T, d]`.
    /// Equals the stack output minus its input.
    fn conv_increment<R: Real>(&self, tape: &mut Tape<R>, p: Params<'_, R>, x: Var) -> Result<Option<Var>> {
        if self.units.is_empty() {
            return Ok(None);
        }
        let mut h = tape.transpose(x)?;
        let mut total: Option<Var> = None;
        for (a, b) in &self.units {
            let u = a.forward(tape, p, h)?;
            let u = tape.relu(u);
            let u = b.forward(tape, p, u)?;
            h = tape.add(h, u)?;
            total = Some(match total {
                Some(t) => tape.add(t, u)?,
                None => u,
            });
        }
        Ok(Some(tape.transpose(total.expect("at least one unit"))?))
    }
}

impl<R: Real> SequenceBlock<R> for ConvFftBlock {
    fn kind(&self) -> &'static str {
        "convfft"
    }

    fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape<R>, p: Params<'_, R>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let width = *tape.shape(x).last().unwrap_or(&0);
        if tape.shape(x).len() != 2 || width != self.spec.d_model {
            return Err(Error::dim("convfft_block", tape.shape(x), &[self.spec.d_model]));
        }
        let attn = self.attention.forward(tape, p, x)?;
        let attn = ctx.dropout(tape, attn)?;
        let mut fused = tape.add(x, attn)?;
        if let Some(local) = self.conv_increment(tape, p, x)? {
            let local = ctx.dropout(tape, local)?;
            fused = tape.add(fused, local)?;
        }
        let y = self.norm_attn.forward(tape, p, fused)?;
        let f = self.ffn.forward(tape, p, y)?;
        let f = ctx.dropout(tape, f)?;
        let z = tape.add(y, f)?;
        self.norm_ffn.forward(tape, p, z)
    }
}

/// Plain feed-forward Transformer block: attention and FFN sublayers, each
/// with a residual connection and post-norm. Parameter names match
/// [`ConvFftBlock`] without conv units.
pub struct FftBlock {
    spec: BlockSpec,
    attention: Attention,
    norm_attn: LayerNorm,
    ffn: FeedForward,
    norm_ffn: LayerNorm,
}

impl FftBlock {
    pub fn init<R: Real>(spec: &BlockSpec, store: &mut ParamStore<R>, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = spec.d_model;
        let spec = BlockSpec { conv_units: 0, ..*spec };
        Ok(FftBlock {
            spec,
            attention: Attention::init(store, prefix, d, spec.heads, rng)?,
            norm_attn: LayerNorm::init(store, &format!("{prefix}.ln1"), d)?,
            ffn: FeedForward::init(store, prefix, d, spec.ffn_dim, rng)?,
            norm_ffn: LayerNorm::init(store, &format!("{prefix}.ln2"), d)?,
        })
    }

    fn boxed<R: Real>(
        spec: &BlockSpec,
        store: &mut ParamStore<R>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn SequenceBlock<R>>> {
        Ok(Box::new(Self::init(spec, store, prefix, rng)?))
    }
}

impl<R: Real> SequenceBlock<R> for FftBlock {
    fn kind(&self) -> &'static str {
        "fft"
    }

    fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape<R>, p: Params<'_, R>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.spec.d_model {
            return Err(Error::dim("fft_block", tape.shape(x), &[self.spec.d_model]));
        }
        let sub = self.attention.forward(tape, p, x)?;
        let sub = ctx.dropout(tape, sub)?;
        let res = tape.add(sub, x)?;
        let h = self.norm_attn.forward(tape, p, res)?;
        let sub = self.ffn.forward(tape, p, h)?;
        let sub = ctx.dropout(tape, sub)?;
        let res = tape.add(sub, h)?;
        self.norm_ffn.forward(tape, p, res)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Registered block type of both stacks.
    pub block: String,
    pub vocab: usize,
    pub d_phoneme: usize,
    pub d_duration: usize,
    pub d_pitch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub encoder_res_blocks: usize,
    pub decoder_res_blocks: usize,
    pub conv_kernel: usize,
    pub duration_channels: usize,
    pub mel_dim: usize,
    pub dropout: f64,
    pub max_frames: usize,
    pub positional_encoding: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            block: "convfft".into(),
            vocab: G2PTable::builtin().vocab(),
            d_phoneme: 128,
            d_duration: 128,
            d_pitch: 128,
            d_model: 384,
            heads: 2,
            ffn_dim: 1536,
            encoder_blocks: 6,
            decoder_blocks: 6,
            encoder_res_blocks: 2,
            decoder_res_blocks: 5,
            conv_kernel: 3,
            duration_channels: 256,
            mel_dim: 120,
            dropout: 0.1,
            max_frames: 4096,
            positional_encoding: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("d_phoneme", self.d_phoneme),
            ("d_duration", self.d_duration),
            ("d_pitch", self.d_pitch),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("conv_kernel", self.conv_kernel),
            ("duration_channels", self.duration_channels),
            ("mel_dim", self.mel_dim),
            ("max_frames", self.max_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    fn block_spec(&self, conv_units: usize) -> BlockSpec {
        BlockSpec {
            d_model: self.d_model,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            conv_units,
            conv_kernel: self.conv_kernel,
        }
    }
}

/// Per-frame generator outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFrames<R = f32> {
    /// `[T, mel_dim]` log-mel.
    pub mel: Tensor<R>,
    /// `[T]` voicing probability.
    pub vuv: Tensor<R>,
    /// `[T]` log Hz.
    pub logf0: Tensor<R>,
}

impl<R: Real> AcousticFrames<R> {
    pub fn frames(&self) -> usize {
        self.mel.shape()[0]
    }

    pub fn validate(&self, mel_dim: usize) -> Result<()> {
        let t = self.mel.shape()[0];
        if self.mel.shape() != [t, mel_dim] || self.vuv.shape() != [t] || self.logf0.shape() != [t] {
            return Err(Error::dim("acoustic_frames", self.mel.shape(), self.vuv.shape()));
        }
        if t == 0 {
            return Err(Error::Contract("acoustic frames are empty".into()));
        }
        if self.vuv.data().iter().any(|&v| !(R::zero()..=R::one()).contains(&v)) {
            return Err(Error::Contract("vuv outside [0, 1]".into()));
        }
        if !(self.mel.all_finite() && self.logf0.all_finite()) {
            return Err(Error::Contract("non-finite acoustic frames".into()));
        }
        Ok(())
    }
}

/// Decoder outputs recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub mel: Var,
    pub vuv: Var,
    pub logf0: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub frames: FrameVars,
    /// `[N]` predicted `log(frames + 1)` per phoneme.
    pub log_durations: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum DurationMode<'a> {
    /// Expand by the given per-phoneme frame counts.
    TeacherForced(&'a [u32]),
    FreeRunning,
}

/// Encode a frame count the way the duration predictor is trained.
pub fn encode_duration(frames: u32) -> f64 {
    (frames as f64 + 1.0).ln()
}

/// Inverse of [`encode_duration`], clamped to at least one frame.
pub fn decode_duration(log_pred: f64) -> u32 {
    let f = (log_pred.exp() - 1.0).round();
    if f.is_nan() || f < 1.0 {
        1
    } else {
        f.min(u32::MAX as f64) as u32
    }
}

/// Repeat row `n` of `h[N, d]` `frames[n]` times, in order.
pub fn length_regulate<R: Real>(tape: &mut Tape<R>, h: Var, frames: &[u32]) -> Result<Var> {
    let n = tape.shape(h)[0];
    if frames.len() != n {
        return Err(Error::dim("length_regulate", tape.shape(h), &[frames.len()]));
    }
    let index: Vec<usize> = frames
        .iter()
        .enumerate()
        .flat_map(|(i, &f)| std::iter::repeat(i).take(f as usize))
        .collect();
    if index.is_empty() {
        return Err(Error::Contract("length_regulate: durations sum to zero frames".into()));
    }
    tape.index_rows(h, index)
}

/// Note logF0 per frame, expanded by the same durations as the hidden states.
pub fn frame_pitch(seq: &PhonemeSequence, frames: &[u32]) -> Result<Vec<f64>> {
    if frames.len() != seq.len() {
        return Err(Error::dim("frame_pitch", &[seq.len()], &[frames.len()]));
    }
    let mut out = Vec::new();
    for (&m, &f) in seq.note_midi_per_phoneme.iter().zip(frames) {
        let lf0 = note_midi_to_logf0(m as i32)?;
        out.extend(std::iter::repeat(lf0).take(f as usize));
    }
    Ok(out)
}

struct DurationPredictor {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    head: Linear,
}

impl DurationPredictor {
    fn init<R: Real>(store: &mut ParamStore<R>, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.duration_channels;
        Ok(DurationPredictor {
            conv1: Conv1d::init(store, "duration.conv1", cfg.d_model, c, cfg.conv_kernel, rng)?,
            norm1: LayerNorm::init(store, "duration.ln1", c)?,
            conv2: Conv1d::init(store, "duration.conv2", c, c, cfg.conv_kernel, rng)?,
            norm2: LayerNorm::init(store, "duration.ln2", c)?,
            head: Linear::init(store, "duration.head", c, 1, true, rng)?,
        })
    }

    fn layer<R: Real>(
        tape: &mut Tape<R>,
        p: Params<'_, R>,
        conv: &Conv1d,
        norm: &LayerNorm,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let xt = tape.transpose(x)?;
        let y = conv.forward(tape, p, xt)?;
        let y = tape.relu(y);
        let y = tape.transpose(y)?;
        let y = norm.forward(tape, p, y)?;
        ctx.dropout(tape, y)
    }

    fn forward<R: Real>(&self, tape: &mut Tape<R>, p: Params<'_, R>, h: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let y = Self::layer(tape, p, &self.conv1, &self.norm1, h, ctx)?;
        let y = Self::layer(tape, p, &self.conv2, &self.norm2, y, ctx)?;
        let y = self.head.forward(tape, p, y)?;
        let n = tape.shape(y)[0];
        tape.reshape(y, [n])
    }
}

pub struct Generator<R: Real> {
    cfg: GeneratorConfig,
    embedding: ScoreEmbedding,
    input: Linear,
    encoder: Vec<Box<dyn SequenceBlock<R>>>,
    duration: DurationPredictor,
    decoder: Vec<Box<dyn SequenceBlock<R>>>,
    mel_head: Linear,
    vuv_head: Linear,
    logf0_head: Linear,
}

impl<R: Real> Generator<R> {
    pub fn init(cfg: &GeneratorConfig, store: &mut ParamStore<R>, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::init_with(cfg, &BlockRegistry::default(), store, rng)
    }

    pub fn init_with(
        cfg: &GeneratorConfig,
        registry: &BlockRegistry<R>,
        store: &mut ParamStore<R>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let embedding = ScoreEmbedding::init(store, "embed", cfg.vocab, (cfg.d_phoneme, cfg.d_duration, cfg.d_pitch), rng)?;
        let input = Linear::init(store, "encoder.input", embedding.width(), cfg.d_model, true, rng)?;
        let enc_spec = cfg.block_spec(cfg.encoder_res_blocks);
        let encoder = (0..cfg.encoder_blocks)
            .map(|i| registry.build(&cfg.block, &enc_spec, store, &format!("encoder.block{i}"), rng))
            .collect::<Result<Vec<_>>>()?;
        let duration = DurationPredictor::init(store, cfg, rng)?;
        let dec_spec = cfg.block_spec(cfg.decoder_res_blocks);
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| registry.build(&cfg.block, &dec_spec, store, &format!("decoder.block{i}"), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Generator {
            cfg: cfg.clone(),
            embedding,
            input,
            encoder,
            duration,
            decoder,
            mel_head: Linear::init(store, "head.mel", cfg.d_model, cfg.mel_dim, true, rng)?,
            vuv_head: Linear::init(store, "head.vuv", cfg.d_model, 1, true, rng)?,
            logf0_head: Linear::init(store, "head.logf0", cfg.d_model, 1, true, rng)?,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &ScoreEmbedding {
        &self.embedding
    }

    pub fn encoder_blocks(&self) -> &[Box<dyn SequenceBlock<R>>] {
        &self.encoder
    }

    pub fn decoder_blocks(&self) -> &[Box<dyn SequenceBlock<R>>] {
        &self.decoder
    }

    fn add_positions(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        if !self.cfg.positional_encoding {
            return Ok(x);
        }
        let (t, d) = (tape.shape(x)[0], tape.shape(x)[1]);
        let pe = tape.constant(sinusoid_table(t, d));
        tape.add(x, pe)
    }

    /// `[N, d_in] -> [N, d_model]`.
    pub fn encode(&self, tape: &mut Tape<R>, p: Params<'_, R>, embedded: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let width = self.embedding.width();
        if tape.shape(embedded).len() != 2 || tape.shape(embedded)[1] != width {
            return Err(Error::dim("encode", tape.shape(embedded), &[width]));
        }
        let mut h = self.input.forward(tape, p, embedded)?;
        h = self.add_positions(tape, h)?;
        for block in &self.encoder {
            h = block.forward(tape, p, h, ctx)?;
        }
        Ok(h)
    }

    /// `[N, d_model] -> [N]` predicted `log(frames + 1)`.
    pub fn predict_durations(&self, tape: &mut Tape<R>, p: Params<'_, R>, h: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        self.duration.forward(tape, p, h, ctx)
    }

    pub fn decode(
        &self,
        tape: &mut Tape<R>,
        p: Params<'_, R>,
        expanded: Var,
        frame_logf0: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<FrameVars> {
        let t = tape.shape(expanded)[0];
        if tape.shape(frame_logf0) != [t] {
            return Err(Error::dim("decode", tape.shape(expanded), tape.shape(frame_logf0)));
        }
        let mut h = self.add_positions(tape, expanded)?;
        for block in &self.decoder {
            h = block.forward(tape, p, h, ctx)?;
        }
        let mel = self.mel_head.forward(tape, p, h)?;
        let vuv = self.vuv_head.forward(tape, p, h)?;
        let vuv = tape.sigmoid(vuv);
        let vuv = tape.reshape(vuv, [t])?;
        let lf0 = self.logf0_head.forward(tape, p, h)?;
        let lf0 = tape.reshape(lf0, [t])?;
        let logf0 = tape.add(lf0, frame_logf0)?;
        Ok(FrameVars { mel, vuv, logf0 })
    }

    /// The full score-to-frames pipeline on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<R>,
        p: Params<'_, R>,
        seq: &PhonemeSequence,
        mode: DurationMode<'_>,
        ctx: &mut ForwardCtx,
    ) -> Result<GeneratorVars> {
        let embedded = self.embedding.embed_and_concat(tape, p, seq)?;
        let h = self.encode(tape, p, embedded, ctx)?;
        let log_durations = self.predict_durations(tape, p, h, ctx)?;
        let frames: Vec<u32> = match mode {
            DurationMode::TeacherForced(f) => f.to_vec(),
            DurationMode::FreeRunning => tape
                .value(log_durations)
                .data()
                .iter()
                .map(|v| decode_duration(v.as_f64()))
                .collect(),
        };
        let total: u64 = frames.iter().map(|&f| f as u64).sum();
        if total > self.cfg.max_frames as u64 {
            return Err(Error::Contract(format!(
                "{total} frames exceed max_frames {}",
                self.cfg.max_frames
            )));
        }
        let expanded = length_regulate(tape, h, &frames)?;
        let pitch = frame_pitch(seq, &frames)?;
        let t = pitch.len();
        let pitch = tape.constant(Tensor::new([t], pitch.into_iter().map(R::of_f64).collect())?);
        let frames = self.decode(tape, p, expanded, pitch, ctx)?;
        Ok(GeneratorVars { frames, log_durations })
    }

    /// Frame counts the duration predictor assigns to each phoneme.
    pub fn predict_frames(&self, store: &ParamStore<R>, seq: &PhonemeSequence) -> Result<Vec<u32>> {
        let mut tape = Tape::new();
        let p = Params::frozen(store);
        let mut ctx = ForwardCtx::inference();
        let embedded = self.embedding.embed_and_concat(&mut tape, p, seq)?;
        let h = self.encode(&mut tape, p, embedded, &mut ctx)?;
        let log_durations = self.predict_durations(&mut tape, p, h, &mut ctx)?;
        Ok(tape.value(log_durations).data().iter().map(|v| decode_duration(v.as_f64())).collect())
    }

    /// Inference from a score: no dropout, no gradient tracking.
    pub fn generate(
        &self,
        store: &ParamStore<R>,
        score: &MusicalScore,
        table: &G2PTable,
        mode: DurationMode<'_>,
    ) -> Result<AcousticFrames<R>> {
        let seq = g2p_expand(score, table)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, Params::frozen(store), &seq, mode, &mut ForwardCtx::inference())?;
        Ok(AcousticFrames {
            mel: tape.value(out.frames.mel).clone(),
            vuv: tape.value(out.frames.vuv).clone(),
            logf0: tape.value(out.frames.logf0).clone(),
        })
    }
}
