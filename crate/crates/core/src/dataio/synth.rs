//! Deterministic synthetic singing corpus with exact acoustic targets.
//!
//! Voiced frames are harmonic spectra of the sung pitch shaped by a
//! per-phoneme formant envelope; unvoiced frames are shaped noise. The high
//! band carries temporally correlated noise on top of the harmonics, so it
//! has fine structure a frame-wise regression cannot fully predict.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mel::{MelConfig, LOG_FLOOR};
use super::CorpusItem;
use crate::frontend::{g2p_expand, note_midi_to_logf0, G2PTable, MusicalScore, Syllable};
use crate::generator::AcousticFrames;
use crate::numerics::Tensor;
use crate::{Error, Result};

const UNVOICED: [&str; 13] = ["sil", "b", "d", "g", "k", "t", "p", "s", "sh", "x", "h", "f", "zh"];

/// Voicing class of a phoneme symbol: obstruents and silence are unvoiced.
pub fn is_voiced_phoneme(name: &str) -> bool {
    !UNVOICED.contains(&name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub syllables: (usize, usize),
    pub midi: (u8, u8),
    pub phoneme_frames: (u32, u32),
    pub mel: MelConfig,
    /// Peak vibrato deviation in semitones.
    pub vibrato_depth: f64,
    pub vibrato_hz: f64,
    /// Frames over which adjacent phoneme spectra are cross-faded.
    pub transition_frames: usize,
    /// Level of the correlated high-band noise relative to unit formant gain.
    pub noise_level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            syllables: (3, 8),
            midi: (50, 80),
            phoneme_frames: (6, 36),
            mel: MelConfig::default(),
            vibrato_depth: 0.3,
            vibrato_hz: 5.5,
            transition_frames: 4,
            noise_level: 0.02,
        }
    }
}

/// Deterministic per-phoneme spectral shape.
#[derive(Clone, Debug)]
struct Shape {
    voiced: bool,
    /// `(center Hz, bandwidth Hz, gain)`.
    peaks: Vec<(f64, f64, f64)>,
}

impl Shape {
    fn of(id: usize, name: &str) -> Shape {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + id as u64);
        let voiced = is_voiced_phoneme(name);
        let peaks = if voiced {
            vec![
                (rng.gen_range(300.0..900.0), rng.gen_range(80.0..160.0), 1.0),
                (rng.gen_range(900.0..2600.0), rng.gen_range(100.0..220.0), rng.gen_range(0.3..0.8)),
                (rng.gen_range(2400.0..3600.0), rng.gen_range(150.0..300.0), rng.gen_range(0.1..0.4)),
                (rng.gen_range(3600.0..5000.0), rng.gen_range(250.0..500.0), rng.gen_range(0.05..0.15)),
            ]
        } else {
            vec![
                (rng.gen_range(2500.0..9000.0), rng.gen_range(1000.0..4000.0), rng.gen_range(0.05..0.3)),
                (rng.gen_range(6000.0..14000.0), rng.gen_range(2000.0..6000.0), rng.gen_range(0.02..0.1)),
            ]
        };
        Shape { voiced, peaks }
    }

    fn envelope(&self, f: f64) -> f64 {
        let tilt = 0.03 * (-f / 3000.0).exp();
        self.peaks
            .iter()
            .map(|&(c, bw, g)| g * (-0.5 * ((f - c) / bw).powi(2)).exp())
            .sum::<f64>()
            + tilt
    }

    /// Linear mel energies of one frame.
    fn spectrum(&self, f0: f64, edges: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            *o = if self.voiced {
                // harmonic partials weighted by the triangular filter
                let first = (lo / f0).ceil().max(1.0) as usize;
                let mut e = 0.0;
                let mut h = first;
                while (h as f64) * f0 < hi {
                    let f = h as f64 * f0;
                    let w = if f <= c { (f - lo) / (c - lo) } else { (hi - f) / (hi - c) };
                    e += w.max(0.0) * self.envelope(f);
                    h += 1;
                }
                e
            } else {
                0.3 * self.envelope(c)
            };
        }
    }
}

/// `n_items` deterministic utterances drawn with `seed`; item `i` depends
/// only on `(seed, i)`.
pub fn synth_corpus(n_items: usize, seed: u64, table: &G2PTable) -> Result<Vec<CorpusItem>> {
    SynthConfig::default().generate(n_items, seed, table)
}

impl SynthConfig {
    pub fn generate(&self, n_items: usize, seed: u64, table: &G2PTable) -> Result<Vec<CorpusItem>> {
        if n_items == 0 {
            return Err(Error::Config("corpus needs at least one item".into()));
        }
        let lyrics: Vec<&str> = table.lyrics().collect();
        if lyrics.is_empty() {
            return Err(Error::Config("G2P table has an empty lexicon".into()));
        }
        (0..n_items).map(|i| self.item(i, seed, table, &lyrics)).collect()
    }

    fn item(&self, index: usize, seed: u64, table: &G2PTable, lyrics: &[&str]) -> Result<CorpusItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);

        let n_syl = rng.gen_range(self.syllables.0..=self.syllables.1);
        let mut syllables = Vec::with_capacity(n_syl);
        let mut durations = Vec::new();
        for _ in 0..n_syl {
            let lyric = lyrics[rng.gen_range(0..lyrics.len())];
            let n_ph = table.lookup(lyric).expect("lyric from table").len();
            let frames: Vec<u32> = (0..n_ph)
                .map(|_| rng.gen_range(self.phoneme_frames.0..=self.phoneme_frames.1))
                .collect();
            syllables.push(Syllable {
                lyric: lyric.to_string(),
                note_midi: rng.gen_range(self.midi.0..=self.midi.1),
                note_frames: frames.iter().sum(),
            });
            durations.extend(frames);
        }
        let score = MusicalScore::new(syllables);
        let seq = g2p_expand(&score, table)?;
        let t: usize = durations.iter().map(|&d| d as usize).sum();

        // per-frame phoneme index and note logF0 with glide and vibrato
        let phone_of: Vec<usize> = durations
            .iter()
            .enumerate()
            .flat_map(|(p, &d)| std::iter::repeat(p).take(d as usize))
            .collect();
        let (lf0_lo, lf0_hi) = (
            note_midi_to_logf0(self.midi.0 as i32)?,
            note_midi_to_logf0(self.midi.1 as i32)?,
        );
        let hop_s = self.mel.hop_length as f64 / self.mel.sample_rate as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let depth = self.vibrato_depth / 12.0 * std::f64::consts::LN_2;
        let mut logf0 = Vec::with_capacity(t);
        let mut glide = note_midi_to_logf0(seq.note_midi_per_phoneme[0] as i32)?;
        for (frame, &p) in phone_of.iter().enumerate() {
            let note = note_midi_to_logf0(seq.note_midi_per_phoneme[p] as i32)?;
            glide += 0.25 * (note - glide);
            let vib = depth * (std::f64::consts::TAU * self.vibrato_hz * frame as f64 * hop_s + phase).sin();
            logf0.push((glide + vib).clamp(lf0_lo, lf0_hi));
        }

        let shapes: Vec<Shape> = seq
            .phoneme_ids
            .iter()
            .map(|&id| Shape::of(id, table.phoneme(id)))
            .collect();
        let vuv: Vec<f32> = phone_of.iter().map(|&p| if shapes[p].voiced { 1.0 } else { 0.0 }).collect();

        let n_mels = self.mel.n_mels;
        let edges = self.mel.band_edges();
        let high_start = n_mels / 2;
        let mut noise_state = vec![0.0f64; n_mels];
        let mut own = vec![0.0; n_mels];
        let mut other = vec![0.0; n_mels];
        let mut mel = Vec::with_capacity(t * n_mels);
        let k = self.transition_frames as f64;
        let mut start = 0usize;
        let mut bounds = Vec::with_capacity(durations.len());
        for &d in &durations {
            bounds.push(start);
            start += d as usize;
        }
        for (frame, &p) in phone_of.iter().enumerate() {
            let f0 = logf0[frame].exp();
            shapes[p].spectrum(f0, &edges, &mut own);
            // cross-fade with the neighbour across the nearer boundary
            let pos = frame as f64 + 0.5;
            let begin = bounds[p] as f64;
            let end = begin + durations[p] as f64;
            let neighbour = if p > 0 && pos - begin < k {
                Some((p - 1, 0.5 * (1.0 - (pos - begin) / k)))
            } else if p + 1 < shapes.len() && end - pos < k {
                Some((p + 1, 0.5 * (1.0 - (end - pos) / k)))
            } else {
                None
            };
            if let Some((q, w)) = neighbour {
                shapes[q].spectrum(f0, &edges, &mut other);
                for (a, b) in own.iter_mut().zip(&other) {
                    *a = (1.0 - w) * *a + w * b;
                }
            }
            for (b, e) in own.iter().enumerate() {
                let mut e = *e;
                if b >= high_start {
                    let z: f64 = rng.gen_range(-1.0..1.0);
                    noise_state[b] = 0.8 * noise_state[b] + 0.6 * z;
                    e += self.noise_level * noise_state[b].exp();
                }
                mel.push(e.max(LOG_FLOOR).ln() as f32);
            }
        }

        let item = CorpusItem {
            id: format!("item{index:04}"),
            score,
            phoneme_durations: durations,
            target: AcousticFrames {
                mel: Tensor::new([t, n_mels], mel)?,
                vuv: Tensor::new([t], vuv)?,
                logf0: Tensor::new([t], logf0.into_iter().map(|v| v as f32).collect())?,
            },
        };
        item.validate(table)?;
        Ok(item)
    }
}
