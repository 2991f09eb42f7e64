//! On-disk formats, audio input and the synthetic training corpus.

mod mel;
mod synth;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::frontend::{G2PTable, MusicalScore};
use crate::generator::AcousticFrames;
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

pub use mel::{extract_mel, hann, hz_to_mel, mel_to_hz, MelConfig, MelExtractor, LOG_FLOOR};
pub use synth::{is_voiced_phoneme, synth_corpus, SynthConfig};

pub const TENSOR_MAGIC: [u8; 4] = *b"XTEN";
pub const TENSOR_VERSION: u32 = 1;

pub fn encode_tensor<R: Real>(t: &Tensor<R>) -> Result<Vec<u8>> {
    if t.shape().contains(&0) {
        return Err(Error::Format(format!("cannot write tensor with a zero dimension {:?}", t.shape())));
    }
    if !t.all_finite() {
        return Err(Error::Format("cannot write non-finite tensor values".into()));
    }
    let mut out = Vec::with_capacity(12 + 4 * (t.rank() + t.numel()));
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let truncated = || Error::Format("tensor file is truncated".into());
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(truncated)
    };
    if bytes.get(..4).ok_or_else(truncated)? != TENSOR_MAGIC {
        return Err(Error::Format("not a tensor file (bad magic)".into()));
    }
    let version = word(4)?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let rank = word(8)? as usize;
    let dims = (0..rank).map(|i| word(12 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if dims.contains(&0) {
        return Err(Error::Format("tensor has a zero dimension".into()));
    }
    let start = 12 + 4 * rank;
    let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(truncated)?;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != numel.checked_mul(4).ok_or_else(truncated)? {
        return Err(if payload.len() < numel * 4 {
            truncated()
        } else {
            Error::Format("trailing bytes after tensor payload".into())
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor<R: Real>(path: impl AsRef<Path>, t: &Tensor<R>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Mono samples of a 48 kHz WAV file (16/24-bit PCM or 32-bit float).
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!("{}: expected mono audio, found {} channels", path.display(), spec.channels)));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::Format(format!(
            "{}: sample rate {} Hz, expected {expected_rate} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples: std::result::Result<Vec<f32>, hound::Error> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect(),
        (hound::SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = 1.0 / (1u32 << (bits - 1)) as f32;
            reader.samples::<i32>().map(|s| s.map(|v| v as f32 * scale)).collect()
        }
        (fmt, bits) => {
            return Err(Error::Format(format!("{}: unsupported sample format {fmt:?} {bits}-bit", path.display())))
        }
    };
    samples.map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// One training utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub score: MusicalScore,
    /// Frames per phoneme, in phoneme order.
    pub phoneme_durations: Vec<u32>,
    /// `vuv` holds 0/1 targets.
    pub target: AcousticFrames<f32>,
}

impl CorpusItem {
    pub fn validate(&self, table: &G2PTable) -> Result<()> {
        let seq = crate::frontend::g2p_expand(&self.score, table)?;
        if seq.len() != self.phoneme_durations.len() {
            return Err(Error::Contract(format!(
                "item {}: {} phonemes but {} durations",
                self.id,
                seq.len(),
                self.phoneme_durations.len()
            )));
        }
        let total: usize = self.phoneme_durations.iter().map(|&d| d as usize).sum();
        if total != self.target.frames() {
            return Err(Error::Contract(format!(
                "item {}: durations sum to {total}, target has {} frames",
                self.id,
                self.target.frames()
            )));
        }
        self.target.validate(self.target.mel.shape()[1])
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    score: serde_json::Value,
    durations: Vec<u32>,
    mel: String,
    vuv: String,
    logf0: String,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Write `manifest.jsonl` and three tensor files per item under `dir`.
pub fn save_corpus(dir: impl AsRef<Path>, items: &[CorpusItem]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for item in items {
        let file = |kind: &str| format!("{}.{kind}.xten", item.id);
        let line = ManifestLine {
            id: item.id.clone(),
            score: serde_json::to_value(&item.score).expect("score serializes"),
            durations: item.phoneme_durations.clone(),
            mel: file("mel"),
            vuv: file("vuv"),
            logf0: file("logf0"),
        };
        write_tensor(dir.join(&line.mel), &item.target.mel)?;
        write_tensor(dir.join(&line.vuv), &item.target.vuv)?;
        write_tensor(dir.join(&line.logf0), &item.target.logf0)?;
        manifest.push_str(&serde_json::to_string(&line).expect("manifest serializes"));
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    std::fs::File::create(&path)
        .and_then(|mut f| f.write_all(manifest.as_bytes()))
        .map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(dir: impl AsRef<Path>, table: &G2PTable) -> Result<Vec<CorpusItem>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at_line = |e: Error| match e {
            Error::Parse { column, message, .. } => Error::Parse {
                line: i + 1,
                column,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        };
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| at_line(e.into()))?;
        let score = MusicalScore::from_json_str(&entry.score.to_string(), table).map_err(at_line)?;
        let item = CorpusItem {
            id: entry.id,
            score,
            phoneme_durations: entry.durations,
            target: AcousticFrames {
                mel: read_tensor(dir.join(&entry.mel))?,
                vuv: read_tensor(dir.join(&entry.vuv))?,
                logf0: read_tensor(dir.join(&entry.logf0))?,
            },
        };
        item.validate(table)?;
        items.push(item);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_and_corruption() {
        let t = Tensor::new([2, 3], vec![1.0f32, -0.0, 3.5e-30, f32::MAX, -7.25, 0.1]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.shape(), t.shape());
        for cut in [0, 2, 5, 13, bytes.len() - 1] {
            assert!(matches!(decode_tensor(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(decode_tensor(&bad).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(decode_tensor(&v2).is_err());
        assert!(encode_tensor(&Tensor::<f32>::zeros([0, 3])).is_err());
    }
}
