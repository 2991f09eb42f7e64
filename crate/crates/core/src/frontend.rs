//! Musical score parsing, grapheme-to-phoneme expansion and input embeddings.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::de::{self, DeserializeSeed, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::numerics::{ParamId, ParamStore, Params, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MIDI_VOCAB: usize = 128;
/// Note durations are embedded as integer frame counts clamped to this cap.
pub const DURATION_CAP: usize = 512;
/// Phoneme id reserved for padding and silence.
pub const SILENCE_ID: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Syllable {
    pub lyric: String,
    pub note_midi: u8,
    pub note_frames: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MusicalScore {
    pub format_version: u32,
    pub syllables: Vec<Syllable>,
}

impl MusicalScore {
    pub fn new(syllables: Vec<Syllable>) -> Self {
        MusicalScore {
            format_version: FORMAT_VERSION,
            syllables,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score serializes")
    }

    pub fn from_json_str(text: &str, table: &G2PTable) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let score = ScoreSeed { table }.deserialize(&mut de)?;
        de.end()?;
        Ok(score)
    }
}

/// Read and validate a score file against the lexicon of `table`.
pub fn parse_score(path: impl AsRef<Path>, table: &G2PTable) -> Result<MusicalScore> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MusicalScore::from_json_str(&text, table)
}

// Validation runs inside deserialization so serde_json attaches the line and
// column of the offending syllable to every error.

struct ScoreSeed<'a> {
    table: &'a G2PTable,
}

impl<'de> DeserializeSeed<'de> for ScoreSeed<'_> {
    type Value = MusicalScore;

    fn deserialize<D: Deserializer<'de>>(self, d: D) -> std::result::Result<MusicalScore, D::Error> {
        d.deserialize_map(self)
    }
}

impl<'de> Visitor<'de> for ScoreSeed<'_> {
    type Value = MusicalScore;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a score object with \"format_version\" and \"syllables\"")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<MusicalScore, A::Error> {
        let mut version = None;
        let mut syllables = None;
        while let Some(key) = map.next_key::<String>()? {
            match key.as_str() {
                "format_version" => {
                    let v: u32 = map.next_value()?;
                    if v != FORMAT_VERSION {
                        return Err(de::Error::custom(format!(
                            "unsupported format_version {v}, expected {FORMAT_VERSION}"
                        )));
                    }
                    version = Some(v);
                }
                "syllables" => syllables = Some(map.next_value_seed(SyllablesSeed { table: self.table })?),
                other => return Err(de::Error::unknown_field(other, &["format_version", "syllables"])),
            }
        }
        let version = version.ok_or_else(|| de::Error::missing_field("format_version"))?;
        let syllables: Vec<Syllable> = syllables.ok_or_else(|| de::Error::missing_field("syllables"))?;
        if syllables.is_empty() {
            return Err(de::Error::custom("empty score"));
        }
        Ok(MusicalScore {
            format_version: version,
            syllables,
        })
    }
}

struct SyllablesSeed<'a> {
    table: &'a G2PTable,
}

impl<'de> DeserializeSeed<'de> for SyllablesSeed<'_> {
    type Value = Vec<Syllable>;

    fn deserialize<D: Deserializer<'de>>(self, d: D) -> std::result::Result<Vec<Syllable>, D::Error> {
        d.deserialize_seq(self)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSyllable {
    lyric: String,
    note_midi: i64,
    note_frames: i64,
}

impl<'de> Visitor<'de> for SyllablesSeed<'_> {
    type Value = Vec<Syllable>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a list of syllables")
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Vec<Syllable>, A::Error> {
        let mut out = Vec::new();
        while let Some(raw) = seq.next_element::<RawSyllable>()? {
            let i = out.len();
            if !(0..MIDI_VOCAB as i64).contains(&raw.note_midi) {
                return Err(de::Error::custom(format!(
                    "syllable {i}: midi out of range: {} not in [0, 127]",
                    raw.note_midi
                )));
            }
            if raw.note_frames < 1 || raw.note_frames > u32::MAX as i64 {
                return Err(de::Error::custom(format!(
                    "syllable {i}: note_frames must be at least 1, got {}",
                    raw.note_frames
                )));
            }
            if !self.table.lexicon.contains_key(&raw.lyric) {
                return Err(de::Error::custom(format!(
                    "syllable {i}: unknown lyric {:?}",
                    raw.lyric
                )));
            }
            out.push(Syllable {
                lyric: raw.lyric,
                note_midi: raw.note_midi as u8,
                note_frames: raw.note_frames as u32,
            });
        }
        Ok(out)
    }
}

/// Declarative grapheme-to-phoneme table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct G2PTable {
    phonemes: Vec<String>,
    ids: HashMap<String, usize>,
    lexicon: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct G2PFile {
    format_version: u32,
    phonemes: Vec<String>,
    lexicon: BTreeMap<String, Vec<String>>,
}

impl G2PTable {
    /// `phonemes[0]` is the reserved silence/padding symbol.
    pub fn new(phonemes: Vec<String>, lexicon: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if phonemes.len() < 2 {
            return Err(Error::Config("phoneme inventory needs at least 2 entries".into()));
        }
        let mut ids = HashMap::new();
        for (i, p) in phonemes.iter().enumerate() {
            if ids.insert(p.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate phoneme {p:?}")));
            }
        }
        let mut lex = BTreeMap::new();
        for (lyric, phs) in lexicon {
            if phs.is_empty() {
                return Err(Error::Config(format!("lyric {lyric:?} expands to no phonemes")));
            }
            let seq = phs
                .iter()
                .map(|p| {
                    ids.get(p)
                        .copied()
                        .ok_or_else(|| Error::Config(format!("lyric {lyric:?} uses unknown phoneme {p:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            lex.insert(lyric, seq);
        }
        Ok(G2PTable {
            phonemes,
            ids,
            lexicon: lex,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: G2PFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::parse(format!(
                "unsupported g2p format_version {}",
                file.format_version
            )));
        }
        Self::new(file.phonemes, file.lexicon)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        let file = G2PFile {
            format_version: FORMAT_VERSION,
            phonemes: self.phonemes.clone(),
            lexicon: self
                .lexicon
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|&i| self.phonemes[i].clone()).collect()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("table serializes")
    }

    /// A small pinyin-like table used by the synthetic corpus and the tests.
    pub fn builtin() -> Self {
        let phonemes = [
            "sil", "a", "o", "e", "i", "u", "ai", "ao", "an", "ang", "en", "ing", "ong", "l", "m", "n", "b", "d",
            "g", "r", "y", "w", "s", "sh", "x", "h", "f", "k", "t", "zh",
        ];
        let lexicon: [(&str, &[&str]); 24] = [
            ("a", &["a"]),
            ("o", &["o"]),
            ("ai", &["ai"]),
            ("an", &["an"]),
            ("la", &["l", "a"]),
            ("ma", &["m", "a"]),
            ("na", &["n", "a"]),
            ("ba", &["b", "a"]),
            ("da", &["d", "a"]),
            ("ge", &["g", "e"]),
            ("ri", &["r", "i"]),
            ("yi", &["y", "i"]),
            ("wo", &["w", "o"]),
            ("lai", &["l", "ai"]),
            ("mao", &["m", "ao"]),
            ("nan", &["n", "an"]),
            ("ming", &["m", "ing"]),
            ("long", &["l", "ong"]),
            ("shang", &["sh", "ang"]),
            ("xin", &["x", "i", "n"]),
            ("hen", &["h", "en"]),
            ("feng", &["f", "en", "g"]),
            ("kan", &["k", "an"]),
            ("zhong", &["zh", "ong"]),
        ];
        Self::new(
            phonemes.iter().map(|s| s.to_string()).collect(),
            lexicon
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
        .expect("builtin table is valid")
    }

    pub fn vocab(&self) -> usize {
        self.phonemes.len()
    }

    pub fn phoneme(&self, id: usize) -> &str {
        &self.phonemes[id]
    }

    pub fn phoneme_id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn lookup(&self, lyric: &str) -> Option<&[usize]> {
        self.lexicon.get(lyric).map(Vec::as_slice)
    }

    pub fn lyrics(&self) -> impl Iterator<Item = &str> {
        self.lexicon.keys().map(String::as_str)
    }
}

/// Per-phoneme model input after G2P; every phoneme carries its syllable's note.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub phoneme_ids: Vec<usize>,
    pub note_midi_per_phoneme: Vec<u8>,
    pub note_frames_per_phoneme: Vec<u32>,
}

impl PhonemeSequence {
    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }
}

pub fn g2p_expand(score: &MusicalScore, table: &G2PTable) -> Result<PhonemeSequence> {
    let mut seq = PhonemeSequence {
        phoneme_ids: Vec::new(),
        note_midi_per_phoneme: Vec::new(),
        note_frames_per_phoneme: Vec::new(),
    };
    for syl in &score.syllables {
        let phs = table
            .lookup(&syl.lyric)
            .ok_or_else(|| Error::Lookup(format!("lyric {:?} not in G2P table", syl.lyric)))?;
        for &p in phs {
            seq.phoneme_ids.push(p);
            seq.note_midi_per_phoneme.push(syl.note_midi);
            seq.note_frames_per_phoneme.push(syl.note_frames);
        }
    }
    Ok(seq)
}

/// Per-phoneme frame counts that split each syllable's note evenly, the
/// remainder going to its last phoneme.
pub fn split_note_frames(score: &MusicalScore, table: &G2PTable) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for (i, syl) in score.syllables.iter().enumerate() {
        let n = table
            .lookup(&syl.lyric)
            .ok_or_else(|| Error::Lookup(format!("lyric {:?} not in G2P table", syl.lyric)))?
            .len() as u32;
        if syl.note_frames < n {
            return Err(Error::Contract(format!(
                "syllable {i}: {} frames cannot cover {n} phonemes",
                syl.note_frames
            )));
        }
        let base = syl.note_frames / n;
        out.extend(std::iter::repeat(base).take(n as usize - 1));
        out.push(syl.note_frames - base * (n - 1));
    }
    Ok(out)
}

/// Natural log of the equal-tempered frequency of a MIDI note (A4 = 69 = 440 Hz).
pub fn note_midi_to_logf0(midi: i32) -> Result<f64> {
    if !(0..MIDI_VOCAB as i32).contains(&midi) {
        return Err(Error::Lookup(format!("midi {midi} out of range [0, 127]")));
    }
    Ok(440f64.ln() + (midi - 69) as f64 / 12.0 * std::f64::consts::LN_2)
}

/// Embedding tables for phoneme, note duration and note pitch.
#[derive(Clone, Debug)]
pub struct ScoreEmbedding {
    pub phoneme: ParamId,
    pub duration: ParamId,
    pub pitch: ParamId,
    pub dims: (usize, usize, usize),
}

impl ScoreEmbedding {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        vocab: usize,
        dims: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut table = |name: &str, rows: usize, d: usize, rng: &mut _| {
            // variance 1/d, the usual transformer embedding scale
            let bound = (3.0 / d as f64).sqrt();
            store.add(format!("{prefix}.{name}"), Tensor::uniform([rows, d], bound, rng))
        };
        Ok(ScoreEmbedding {
            phoneme: table("phoneme", vocab, dims.0, rng)?,
            duration: table("duration", DURATION_CAP + 1, dims.1, rng)?,
            pitch: table("pitch", MIDI_VOCAB, dims.2, rng)?,
            dims,
        })
    }

    pub fn width(&self) -> usize {
        self.dims.0 + self.dims.1 + self.dims.2
    }

    /// `[N, d_ph + d_dur + d_pitch]`: row `n` is the three lookups side by side.
    pub fn embed_and_concat<R: Real>(&self, tape: &mut Tape<R>, p: Params<'_, R>, seq: &PhonemeSequence) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::Contract("cannot embed an empty phoneme sequence".into()));
        }
        let ph = tape.param(p, self.phoneme);
        let dur = tape.param(p, self.duration);
        let pitch = tape.param(p, self.pitch);
        let e_ph = tape.index_rows(ph, seq.phoneme_ids.clone())?;
        let frames = seq
            .note_frames_per_phoneme
            .iter()
            .map(|&f| (f as usize).min(DURATION_CAP))
            .collect();
        let e_dur = tape.index_rows(dur, frames)?;
        let e_pitch = tape.index_rows(pitch, seq.note_midi_per_phoneme.iter().map(|&m| m as usize).collect())?;
        tape.concat_cols(&[e_ph, e_dur, e_pitch])
    }
}
