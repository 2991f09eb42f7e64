//! Multi-band discriminator: segment and detail critics over three
//! overlapping mel bands.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{Conv1d, Conv2d};
use crate::numerics::kernels::conv_out_len;
use crate::numerics::{ParamStore, Params, Real, Tape, Var};
use crate::{Error, Result};

pub const MEL_BINS: usize = 120;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    Mid,
    High,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Low, Band::Mid, Band::High];

    /// Half-open mel-bin range.
    pub fn range(self) -> (usize, usize) {
        match self {
            Band::Low => (0, 60),
            Band::Mid => (30, 90),
            Band::High => (60, 120),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::Mid => "mid",
            Band::High => "high",
        }
    }

    pub fn parse(name: &str) -> Option<Band> {
        Band::ALL.into_iter().find(|b| b.name() == name)
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Temporal clip length of a segment discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Window {
    Frames(usize),
    Full,
}

impl Window {
    pub fn name(self) -> String {
        match self {
            Window::Frames(n) => n.to_string(),
            Window::Full => "full".into(),
        }
    }
}

pub const SEGMENT_WINDOWS: [Window; 5] = [
    Window::Frames(200),
    Window::Frames(400),
    Window::Frames(600),
    Window::Frames(800),
    Window::Full,
];

/// Uniform-random clip `(start, len)` of `window` frames out of `frames`.
/// Windows at least as long as the input keep the whole input.
pub fn clip_segment(frames: usize, window: Window, rng: &mut impl Rng) -> (usize, usize) {
    match window {
        Window::Frames(w) if w < frames => (rng.gen_range(0..=frames - w), w),
        _ => (0, frames),
    }
}

/// Slice `mel[T, 120]` into the three band views `[T, 60]`.
pub fn split_bands<R: Real>(tape: &mut Tape<R>, mel: Var) -> Result<[Var; 3]> {
    let s = tape.shape(mel);
    if s.len() != 2 || s[1] != MEL_BINS {
        return Err(Error::dim("split_bands", s, &[MEL_BINS]));
    }
    let mut out = [mel; 3];
    for (o, band) in out.iter_mut().zip(Band::ALL) {
        let (lo, hi) = band.range();
        *o = tape.slice_cols(mel, lo, hi - lo)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Segment,
    Detail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Origin {
    pub band: Band,
    pub kind: Kind,
    /// Position among the band's discriminators of this kind.
    pub index: usize,
    /// Clip window, for segment discriminators.
    pub window: Option<Window>,
}

/// Realness maps and intermediate features of one sub-discriminator.
#[derive(Clone, Debug)]
pub struct Verdict {
    pub scores: Vec<Var>,
    pub features: Vec<Var>,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub segment: String,
    pub detail: String,
    pub use_sd: bool,
    pub use_dd: bool,
    pub sd_layers: usize,
    pub sd_channels: usize,
    pub sd_kernel: usize,
    pub dd_channels: usize,
    pub dd_layers: usize,
    pub dd_down_padding: (usize, usize),
    pub dd_out_padding: (usize, usize),
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            segment: "segment".into(),
            detail: "detail".into(),
            use_sd: true,
            use_dd: true,
            sd_layers: 10,
            sd_channels: 128,
            sd_kernel: 3,
            dd_channels: 32,
            dd_layers: 5,
            dd_down_padding: (2, 2),
            dd_out_padding: (0, 1),
        }
    }
}

/// A critic over one band `[T, bins]`.
pub trait SubDiscriminator<R: Real>: Send + Sync {
    fn kind(&self) -> Kind;
    /// Number of feature maps each forward returns.
    fn feature_layers(&self) -> usize;
    fn score_layers(&self) -> usize;
    /// Smallest frame count the critic accepts.
    fn min_frames(&self) -> usize;
    /// Returns `(scores, features)`.
    fn forward(&self, tape: &mut Tape<R>, p: Params<'_, R>, band: Var) -> Result<(Vec<Var>, Vec<Var>)>;
}

pub type SubFactory<R> = fn(
    &DiscriminatorConfig,
    usize,
    &mut ParamStore<R>,
    &str,
    &mut ChaCha8Rng,
) -> Result<Box<dyn SubDiscriminator<R>>>;

/// Named sub-discriminator constructors.
pub struct SubRegistry<R> {
    factories: BTreeMap<&'static str, SubFactory<R>>,
}

impl<R: Real> Default for SubRegistry<R> {
    fn default() -> Self {
        let mut r = SubRegistry {
            factories: BTreeMap::new(),
        };
        r.register("segment", SegmentDiscriminator::boxed);
        r.register("detail", DetailDiscriminator::boxed);
        r
    }
}

impl<R: Real> SubRegistry<R> {
    pub fn register(&mut self, name: &'static str, factory: SubFactory<R>) {
        self.factories.insert(name, factory);
    }

    pub fn build(
        &self,
        name: &str,
        cfg: &DiscriminatorConfig,
        bins: usize,
        store: &mut ParamStore<R>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn SubDiscriminator<R>>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown sub-discriminator {name:?}; registered: {}",
                self.factories.keys().copied().collect::<Vec<_>>().join(", ")
            ))
        })?;
        f(cfg, bins, store, prefix, rng)
    }
}

/// `[T, bins] -> [bins, T]` conv stack with a 1x1 score projection.
pub struct SegmentDiscriminator {
    layers: Vec<Conv1d>,
    score: Conv1d,
}

impl SegmentDiscriminator {
    pub fn init<R: Real>(
        cfg: &DiscriminatorConfig,
        bins: usize,
        store: &mut ParamStore<R>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.sd_layers == 0 || cfg.sd_kernel % 2 == 0 {
            return Err(Error::Config("segment discriminator needs layers and an odd kernel".into()));
        }
        let mut layers = Vec::with_capacity(cfg.sd_layers);
        for i in 0..cfg.sd_layers {
            let c_in = if i == 0 { bins } else { cfg.sd_channels };
            layers.push(Conv1d::init(store, &format!("{prefix}.conv{i}"), c_in, cfg.sd_channels, cfg.sd_kernel, rng)?);
        }
        let score = Conv1d::init(store, &format!("{prefix}.score"), cfg.sd_channels, 1, 1, rng)?;
        Ok(SegmentDiscriminator { layers, score })
    }

    fn boxed<R: Real>(
        cfg: &DiscriminatorConfig,
        bins: usize,
        store: &mut ParamStore<R>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn SubDiscriminator<R>>> {
        Ok(Box::new(Self::init(cfg, bins, store, prefix, rng)?))
    }

    pub fn layers(&self) -> &[Conv1d] {
        &self.layers
    }
}

impl<R: Real> SubDiscriminator<R> for SegmentDiscriminator {
    fn kind(&self) -> Kind {
        Kind::Segment
    }

    fn feature_layers(&self) -> usize {
        self.layers.len()
    }

    fn score_layers(&self) -> usize {
        1
    }

    fn min_frames(&self) -> usize {
        1
    }

    fn forward(&self, tape: &mut Tape<R>, p: Params<'_, R>, band: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut h = tape.transpose(band)?;
        let mut features = Vec::with_capacity(self.layers.len());
        for conv in &self.layers {
            let y = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(y, LEAKY_SLOPE);
            features.push(h);
        }
        let score = self.score.forward(tape, p, h)?;
        Ok((vec![score], features))
    }
}

/// One layer of the detail stack, as seen by shape propagation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    /// `[C, F, T]` output extent.
    pub out: [usize; 3],
}

/// PatchGAN-style 2-d critic: a stem conv, then alternating strided dilated
/// downsampling layers and `(1, 3)` output layers.
pub struct DetailDiscriminator {
    stem: Conv2d,
    down: Vec<Conv2d>,
    out: Vec<Conv2d>,
    bins: usize,
    channels: usize,
    min_frames: usize,
}

impl DetailDiscriminator {
    pub fn init<R: Real>(
        cfg: &DiscriminatorConfig,
        bins: usize,
        store: &mut ParamStore<R>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = cfg.dd_channels;
        let stem = Conv2d::init(store, &format!("{prefix}.stem"), 1, c, (3, 3), (1, 1), (1, 1), (1, 1), rng)?;
        let mut down = Vec::with_capacity(cfg.dd_layers);
        let mut out = Vec::with_capacity(cfg.dd_layers);
        for i in 0..cfg.dd_layers {
            down.push(Conv2d::init(
                store,
                &format!("{prefix}.down{i}"),
                c,
                c,
                (3, 3),
                (2, 2),
                (2, 2),
                cfg.dd_down_padding,
                rng,
            )?);
            out.push(Conv2d::init(
                store,
                &format!("{prefix}.out{i}"),
                c,
                c,
                (1, 3),
                (1, 1),
                (1, 1),
                cfg.dd_out_padding,
                rng,
            )?);
        }
        let mut dd = DetailDiscriminator {
            stem,
            down,
            out,
            bins,
            channels: c,
            min_frames: 0,
        };
        dd.min_frames = dd.find_min_frames()?;
        Ok(dd)
    }

    fn boxed<R: Real>(
        cfg: &DiscriminatorConfig,
        bins: usize,
        store: &mut ParamStore<R>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn SubDiscriminator<R>>> {
        Ok(Box::new(Self::init(cfg, bins, store, prefix, rng)?))
    }

    pub fn stem(&self) -> &Conv2d {
        &self.stem
    }

    pub fn down_layers(&self) -> &[Conv2d] {
        &self.down
    }

    pub fn out_layers(&self) -> &[Conv2d] {
        &self.out
    }

    /// Layers in execution order.
    fn stack(&self) -> Vec<(String, &Conv2d)> {
        let mut v = vec![("stem".to_string(), &self.stem)];
        for (i, (d, o)) in self.down.iter().zip(&self.out).enumerate() {
            v.push((format!("down{i}"), d));
            v.push((format!("out{i}"), o));
        }
        v
    }

    /// Propagate `[1, bins, frames]` through the stack without computing it.
    pub fn shapes(&self, frames: usize) -> Result<Vec<LayerShape>> {
        let (mut f, mut t) = (self.bins, frames);
        let mut out = Vec::new();
        for (name, l) in self.stack() {
            let nf = conv_out_len(f, l.kernel.0, l.stride.0, l.dilation.0, l.padding.0);
            let nt = conv_out_len(t, l.kernel.1, l.stride.1, l.dilation.1, l.padding.1);
            match (nf, nt) {
                (Some(nf), Some(nt)) if nf > 0 && nt > 0 => {
                    f = nf;
                    t = nt;
                }
                _ => {
                    return Err(Error::InputTooShort {
                        op: "detail_discriminator",
                        detail: format!("layer {name} receives {f}x{t}"),
                    })
                }
            }
            out.push(LayerShape { name, out: [self.channels, f, t] });
        }
        Ok(out)
    }

    fn find_min_frames(&self) -> Result<usize> {
        const SEARCH: usize = 1 << 14;
        (1..=SEARCH).find(|&t| self.shapes(t).is_ok()).ok_or_else(|| Error::Config(format!(
            "detail discriminator cannot process {} bins at any length up to {SEARCH} frames",
            self.bins
        )))
    }
}

impl<R: Real> SubDiscriminator<R> for DetailDiscriminator {
    fn kind(&self) -> Kind {
        Kind::Detail
    }

    fn feature_layers(&self) -> usize {
        1 + self.down.len()
    }

    fn score_layers(&self) -> usize {
        self.out.len()
    }

    fn min_frames(&self) -> usize {
        self.min_frames
    }

    fn forward(&self, tape: &mut Tape<R>, p: Params<'_, R>, band: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let (t, bins) = (tape.shape(band)[0], tape.shape(band)[1]);
        if bins != self.bins {
            return Err(Error::dim("detail_discriminator", tape.shape(band), &[self.bins]));
        }
        if t < self.min_frames {
            return Err(Error::InputTooShort {
                op: "detail_discriminator",
                detail: format!("{t} frames, minimum is {}", self.min_frames),
            });
        }
        let x = tape.transpose(band)?;
        let x = tape.reshape(x, [1, bins, t])?;
        let y = self.stem.forward(tape, p, x)?;
        let mut h = tape.leaky_relu(y, LEAKY_SLOPE);
        let mut features = vec![h];
        let mut scores = Vec::with_capacity(self.out.len());
        for (down, out) in self.down.iter().zip(&self.out) {
            let y = down.forward(tape, p, h)?;
            h = tape.leaky_relu(y, LEAKY_SLOPE);
            features.push(h);
            let s = out.forward(tape, p, h)?;
            scores.push(s);
            h = tape.leaky_relu(s, LEAKY_SLOPE);
        }
        Ok((scores, features))
    }
}

/// Clip offsets for every segment discriminator of one step, shared by the
/// real and generated inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipPlan {
    pub frames: usize,
    /// `(start, len)` per sub-discriminator, `None` for full-band critics.
    pub clips: Vec<Option<(usize, usize)>>,
}

struct Member<R: Real> {
    origin: Origin,
    critic: Box<dyn SubDiscriminator<R>>,
}

pub struct MultiBandDiscriminator<R: Real> {
    cfg: DiscriminatorConfig,
    members: Vec<Member<R>>,
}

impl<R: Real> MultiBandDiscriminator<R> {
    pub fn init(cfg: &DiscriminatorConfig, store: &mut ParamStore<R>, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::init_with(cfg, &SubRegistry::default(), store, rng)
    }

    /// One segment critic per window and one detail critic alongside each,
    /// for every band.
    pub fn init_with(
        cfg: &DiscriminatorConfig,
        registry: &SubRegistry<R>,
        store: &mut ParamStore<R>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut members = Vec::new();
        for band in Band::ALL {
            let (lo, hi) = band.range();
            for (i, window) in SEGMENT_WINDOWS.into_iter().enumerate() {
                if cfg.use_sd {
                    let prefix = format!("{band}.sd{}", window.name());
                    members.push(Member {
                        origin: Origin {
                            band,
                            kind: Kind::Segment,
                            index: i,
                            window: Some(window),
                        },
                        critic: registry.build(&cfg.segment, cfg, hi - lo, store, &prefix, rng)?,
                    });
                }
                if cfg.use_dd {
                    members.push(Member {
                        origin: Origin {
                            band,
                            kind: Kind::Detail,
                            index: i,
                            window: None,
                        },
                        critic: registry.build(&cfg.detail, cfg, hi - lo, store, &format!("{band}.dd{i}"), rng)?,
                    });
                }
            }
        }
        Ok(MultiBandDiscriminator { cfg: cfg.clone(), members })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn origins(&self) -> impl Iterator<Item = Origin> + '_ {
        self.members.iter().map(|m| m.origin)
    }

    pub fn critic(&self, origin: Origin) -> Option<&dyn SubDiscriminator<R>> {
        self.members.iter().find(|m| m.origin == origin).map(|m| m.critic.as_ref())
    }

    pub fn min_frames(&self) -> usize {
        self.members.iter().map(|m| m.critic.min_frames()).max().unwrap_or(1)
    }

    pub fn plan(&self, frames: usize, rng: &mut impl Rng) -> ClipPlan {
        ClipPlan {
            frames,
            clips: self
                .members
                .iter()
                .map(|m| m.origin.window.map(|w| clip_segment(frames, w, rng)))
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<R>, p: Params<'_, R>, mel: Var, plan: &ClipPlan) -> Result<Vec<Verdict>> {
        let t = tape.shape(mel)[0];
        if plan.frames != t || plan.clips.len() != self.members.len() {
            return Err(Error::Contract(format!(
                "clip plan for {} frames and {} critics applied to {t} frames and {} critics",
                plan.frames,
                plan.clips.len(),
                self.members.len()
            )));
        }
        if t < self.min_frames() {
            return Err(Error::InputTooShort {
                op: "multiband_forward",
                detail: format!("{t} frames, minimum is {}", self.min_frames()),
            });
        }
        let bands = split_bands(tape, mel)?;
        let mut verdicts = Vec::with_capacity(self.members.len());
        for (m, clip) in self.members.iter().zip(&plan.clips) {
            let band = bands[m.origin.band as usize];
            let input = match *clip {
                Some((start, len)) if len < t => tape.slice_rows(band, start, len)?,
                _ => band,
            };
            let (scores, features) = m.critic.forward(tape, p, input)?;
            verdicts.push(Verdict {
                scores,
                features,
                origin: m.origin,
            });
        }
        Ok(verdicts)
    }
}
