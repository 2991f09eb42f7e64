mod common;

use common::{oracles, rng, short_corpus};
use proptest::prelude::*;
use rand::Rng;
use xis2::dataio::{
    decode_tensor, encode_tensor, extract_mel, load_corpus, read_tensor, read_wav, save_corpus, synth_corpus,
    write_tensor, MelConfig, MelExtractor, LOG_FLOOR, MANIFEST,
};
use xis2::discriminator::Band;
use xis2::eval::{band_variance, score, Prediction};
use xis2::frontend::{g2p_expand, note_midi_to_logf0, split_note_frames, G2PTable, MusicalScore, Syllable};
use xis2::numerics::Tensor;
use xis2::Error;

fn syl(lyric: &str, midi: u8, frames: u32) -> Syllable {
    Syllable {
        lyric: lyric.into(),
        note_midi: midi,
        note_frames: frames,
    }
}

#[test]
fn midi_to_log_frequency() {
    assert!((note_midi_to_logf0(69).unwrap() - 6.0868).abs() < 1e-4);
    assert!((note_midi_to_logf0(81).unwrap() - note_midi_to_logf0(69).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn note_frames_split_over_phonemes() {
    let table = G2PTable::builtin();
    let s = MusicalScore::new(vec![syl("ma", 60, 40), syl("la", 62, 40)]);
    assert_eq!(split_note_frames(&s, &table).unwrap(), [20, 20, 20, 20]);
    let s = MusicalScore::new(vec![syl("xin", 60, 40), syl("a", 62, 7)]);
    assert_eq!(split_note_frames(&s, &table).unwrap(), [13, 13, 14, 7]);
    let s = MusicalScore::new(vec![syl("xin", 60, 2)]);
    assert!(matches!(split_note_frames(&s, &table), Err(Error::Contract(_))));
}

#[test]
fn one_second_of_audio_is_197_frames() {
    let cfg = MelConfig::default();
    let mel = extract_mel(&vec![0.0; 48_000], &cfg).unwrap();
    assert_eq!(mel.shape(), [197, 120]);
    assert!(mel.data().iter().all(|&v| v == (LOG_FLOOR.ln() as f32)));
    assert!(matches!(extract_mel(&[0.0; 959], &cfg), Err(Error::InputTooShort { .. })));
}

#[test]
fn pure_tone_peaks_at_the_nearest_filter() {
    let cfg = MelConfig::default();
    let samples: Vec<f32> = (0..24_000)
        .map(|n| (0.5 * (std::f64::consts::TAU * 440.0 * n as f64 / 48_000.0).sin()) as f32)
        .collect();
    let mel = extract_mel(&samples, &cfg).unwrap();
    let argmax = |row: &[f32]| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let peaks: Vec<usize> = (0..mel.shape()[0]).map(|t| argmax(mel.row(t))).collect();
    assert!(peaks.iter().all(|&p| p == peaks[0]), "{peaks:?}");
    // the filter whose center is closest to 440 Hz
    let centers = cfg.centers();
    let nearest = (0..centers.len())
        .min_by(|&a, &b| (centers[a] - 440.0).abs().total_cmp(&(centers[b] - 440.0).abs()))
        .unwrap();
    assert!(peaks[0].abs_diff(nearest) <= 1, "peak {} nearest {nearest}", peaks[0]);
    assert!(mel.data().iter().all(|&v| v.is_finite() && v >= LOG_FLOOR.ln() as f32));
}

#[test]
fn filterbank_rows_are_positive_and_cover_the_spectrum() {
    let cfg = MelConfig::default();
    let fb = cfg.filterbank();
    let bins = cfg.n_fft / 2 + 1;
    assert_eq!(fb.shape(), [120, bins]);
    for m in 0..120 {
        assert!(fb.row(m).iter().sum::<f64>() > 0.0, "filter {m} is empty");
    }
    for k in 0..bins {
        let hz = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        if hz > cfg.fmin && hz < cfg.fmax {
            assert!((0..120).any(|m| fb.row(m)[k] > 0.0), "bin {k} ({hz} Hz) uncovered");
        }
    }
    let ex = MelExtractor::new(cfg).unwrap();
    assert_eq!(ex.filters(), &fb);
}

#[test]
fn wav_input_matches_direct_samples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 48_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    let ints: Vec<i16> = (0..4800).map(|n| ((n * 37 % 2000) as i16 - 1000) * 8).collect();
    for &s in &ints {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
    let read = read_wav(&path, 48_000).unwrap();
    assert_eq!(read.len(), ints.len());
    assert!(read.iter().zip(&ints).all(|(a, &b)| *a == b as f32 / 32768.0));
    assert!(matches!(read_wav(&path, 44_100), Err(Error::Format(_))));
    assert!(matches!(read_wav(dir.path().join("none.wav"), 48_000), Err(Error::Io { .. })));
}

#[test]
fn synthetic_corpus_is_deterministic_and_lawful() {
    let table = G2PTable::builtin();
    let a = synth_corpus(6, 11, &table).unwrap();
    assert_eq!(a, synth_corpus(6, 11, &table).unwrap());
    assert_ne!(a, synth_corpus(6, 12, &table).unwrap());
    // item i depends only on (seed, i)
    assert_eq!(a[..3], synth_corpus(3, 11, &table).unwrap()[..]);
    let (lo, hi) = (note_midi_to_logf0(50).unwrap() as f32, note_midi_to_logf0(80).unwrap() as f32);
    for item in &a {
        item.validate(&table).unwrap();
        let t = item.target.frames();
        assert_eq!(item.phoneme_durations.iter().sum::<u32>() as usize, t);
        assert!((3..=8).contains(&item.score.syllables.len()));
        for s in &item.score.syllables {
            assert!((50..=80).contains(&s.note_midi));
        }
        for (&f0, &v) in item.target.logf0.data().iter().zip(item.target.vuv.data()) {
            assert!(v == 0.0 || v == 1.0);
            if v == 1.0 {
                assert!(f0 >= lo - 1e-5 && f0 <= hi + 1e-5, "{f0}");
            }
        }
        // the high band is not constant within frames
        assert!(band_variance(&item.target.mel, Band::High) > 0.0);
    }
    assert!(matches!(synth_corpus(0, 1, &table), Err(Error::Config(_))));
}

#[test]
fn corpus_round_trips_through_disk() {
    let table = G2PTable::builtin();
    let items = short_corpus(3, 2);
    let dir = tempfile::tempdir().unwrap();
    save_corpus(dir.path(), &items).unwrap();
    assert_eq!(load_corpus(dir.path(), &table).unwrap(), items);
    let manifest = std::fs::read(dir.path().join(MANIFEST)).unwrap();
    let again = tempfile::tempdir().unwrap();
    save_corpus(again.path(), &items).unwrap();
    assert_eq!(std::fs::read(again.path().join(MANIFEST)).unwrap(), manifest);

    // a durations list that no longer sums to the frame count is rejected
    let text = String::from_utf8(manifest).unwrap();
    let broken = text.replacen("\"durations\":[", "\"durations\":[1,", 1);
    std::fs::write(dir.path().join(MANIFEST), broken).unwrap();
    assert!(load_corpus(dir.path(), &table).is_err());
}

#[test]
fn tensor_files_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.xten");
    let t = Tensor::new([3, 2], vec![0.5f32, -1.0, 2.0, 1e-30, -0.0, 7.0]).unwrap();
    write_tensor(&path, &t).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [3, 11, bytes.len() - 2] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))), "cut {cut}");
    }
    let nan = Tensor::new([1], vec![f32::NAN]).unwrap();
    assert!(write_tensor(&path, &nan).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensors_round_trip_bit_exactly(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let mut r = rng(seed);
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| f32::from_bits(r.gen::<u32>() & 0xBF7F_FFFF)).collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), &shape[..]);
        let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn score_json_round_trips(sylls in prop::collection::vec((0usize..24, 0u8..128, 1u32..500), 1..10)) {
        let table = G2PTable::builtin();
        let lyrics: Vec<&str> = table.lyrics().collect();
        let s = MusicalScore::new(sylls.iter().map(|&(l, m, f)| syl(lyrics[l % lyrics.len()], m, f)).collect());
        let back = MusicalScore::from_json_str(&s.to_json(), &table).unwrap();
        prop_assert_eq!(&back, &s);
        let seq = g2p_expand(&s, &table).unwrap();
        let per: usize = s.syllables.iter().map(|x| table.lookup(&x.lyric).unwrap().len()).sum();
        prop_assert_eq!(seq.len(), per);
    }

    #[test]
    fn band_variance_matches_two_pass_oracle(t in 1usize..20, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mel = Tensor::from_fn(vec![t, 120], |_| r.gen_range(-12.0f32..2.0));
        for band in Band::ALL {
            let (lo, hi) = band.range();
            let per_frame: Vec<f64> = (0..t)
                .map(|f| oracles::variance(&mel.row(f)[lo..hi].iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect();
            let expect = per_frame.iter().sum::<f64>() / t as f64;
            prop_assert!((band_variance(&mel, band) - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn constant_mel_has_zero_band_variance() {
    let mel = Tensor::new([9, 120], vec![-4.25f32; 9 * 120]).unwrap();
    for band in Band::ALL {
        assert_eq!(band_variance(&mel, band), 0.0);
    }
}

#[test]
fn targets_scored_as_predictions_are_perfect() {
    let items = short_corpus(4, 3);
    let preds: Vec<Prediction> = items
        .iter()
        .map(|it| Prediction {
            frames: it.target.clone(),
            durations: it.phoneme_durations.clone(),
        })
        .collect();
    let m = score(&preds, &items).unwrap();
    assert_eq!(m.mel_mse, 0.0);
    assert_eq!(m.vuv_accuracy, 1.0);
    assert_eq!(m.logf0_rmse, Some(0.0));
    assert_eq!(m.duration_mae, 0.0);
    assert_eq!(m.band_variance, m.target_band_variance);
    assert_eq!(score(&preds, &items).unwrap(), m);
    assert!(score(&[], &[]).is_err());
    assert!(score(&preds[1..], &items).is_err());
}

#[test]
fn metrics_count_errors_elementwise() {
    let items = short_corpus(2, 4);
    let preds: Vec<Prediction> = items
        .iter()
        .map(|it| {
            let mut frames = it.target.clone();
            frames.mel.data_mut().iter_mut().for_each(|v| *v += 0.5);
            frames.logf0.data_mut().iter_mut().for_each(|v| *v -= 0.25);
            frames.vuv.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
            Prediction {
                frames,
                durations: it.phoneme_durations.iter().map(|d| d + 2).collect(),
            }
        })
        .collect();
    let m = score(&preds, &items).unwrap();
    assert!((m.mel_mse - 0.25).abs() < 1e-9);
    assert!((m.logf0_rmse.unwrap() - 0.25).abs() < 1e-6);
    assert_eq!(m.vuv_accuracy, 0.0);
    assert_eq!(m.duration_mae, 2.0);
}
