//! Held-out metrics for a trained generator.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::CorpusItem;
use crate::discriminator::Band;
use crate::frontend::{g2p_expand, G2PTable};
use crate::generator::{AcousticFrames, DurationMode, Generator};
use crate::numerics::{ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub items: usize,
    /// Over all frames and bins.
    pub mel_mse: f64,
    /// Over frames the target marks voiced; `None` when there are none.
    pub logf0_rmse: Option<f64>,
    /// Voicing decisions thresholded at 0.5.
    pub vuv_accuracy: f64,
    /// Mean absolute error of the predicted per-phoneme frame counts.
    pub duration_mae: f64,
    /// Mean over frames of the variance across bins within each band
    /// (low, mid, high).
    pub band_variance: [f64; 3],
    /// The same statistic on the targets.
    pub target_band_variance: [f64; 3],
}

/// One item's predictions: teacher-forced frames and predicted durations.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub frames: AcousticFrames<f32>,
    pub durations: Vec<u32>,
}

/// Mean over frames of the within-frame variance of `mel[:, band]`.
pub fn band_variance(mel: &Tensor<f32>, band: Band) -> f64 {
    let (lo, hi) = band.range();
    let rows = mel.shape()[0];
    let total: f64 = (0..rows)
        .map(|r| {
            let row = &mel.row(r)[lo..hi];
            let n = row.len() as f64;
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
        })
        .sum();
    total / rows as f64
}

/// Score predictions against the items they were made for.
pub fn score(preds: &[Prediction], items: &[CorpusItem]) -> Result<EvalMetrics> {
    if items.is_empty() {
        return Err(Error::Config("no evaluation items".into()));
    }
    if preds.len() != items.len() {
        return Err(Error::Contract(format!("{} predictions for {} items", preds.len(), items.len())));
    }
    let n = items.len() as f64;
    let mut m = EvalMetrics {
        items: items.len(),
        ..Default::default()
    };
    let (mut mel_sq, mut mel_count) = (0.0, 0usize);
    let (mut f0_sq, mut voiced) = (0.0, 0usize);
    let (mut vuv_hits, mut frames) = (0usize, 0usize);
    let (mut dur_abs, mut phonemes) = (0.0, 0usize);
    for (p, it) in preds.iter().zip(items) {
        let (out, target) = (&p.frames, &it.target);
        if out.mel.shape() != target.mel.shape() {
            return Err(Error::dim("evaluate", out.mel.shape(), target.mel.shape()));
        }
        if p.durations.len() != it.phoneme_durations.len() {
            return Err(Error::Contract(format!(
                "item {}: {} predicted durations for {} phonemes",
                it.id,
                p.durations.len(),
                it.phoneme_durations.len()
            )));
        }
        for (a, b) in out.mel.data().iter().zip(target.mel.data()) {
            mel_sq += (*a as f64 - *b as f64).powi(2);
        }
        mel_count += out.mel.numel();
        let frame_iter = out.vuv.data().iter().zip(target.vuv.data()).zip(out.logf0.data().iter().zip(target.logf0.data()));
        for ((&pv, &tv), (&pf, &tf)) in frame_iter {
            let target_voiced = tv >= 0.5;
            vuv_hits += ((pv >= 0.5) == target_voiced) as usize;
            if target_voiced {
                f0_sq += (pf as f64 - tf as f64).powi(2);
                voiced += 1;
            }
        }
        frames += out.frames();
        for (&a, &b) in p.durations.iter().zip(&it.phoneme_durations) {
            dur_abs += (a as f64 - b as f64).abs();
        }
        phonemes += p.durations.len();
        for (i, band) in Band::ALL.into_iter().enumerate() {
            m.band_variance[i] += band_variance(&out.mel, band) / n;
            m.target_band_variance[i] += band_variance(&target.mel, band) / n;
        }
    }
    m.mel_mse = mel_sq / mel_count as f64;
    m.logf0_rmse = (voiced > 0).then(|| (f0_sq / voiced as f64).sqrt());
    m.vuv_accuracy = vuv_hits as f64 / frames as f64;
    m.duration_mae = dur_abs / phonemes as f64;
    Ok(m)
}

/// Teacher-forced predictions for every item, computed in parallel.
pub fn predict(
    generator: &Generator<f32>,
    store: &ParamStore<f32>,
    table: &G2PTable,
    items: &[CorpusItem],
) -> Result<Vec<Prediction>> {
    items
        .par_iter()
        .map(|it| {
            let frames = generator.generate(store, &it.score, table, DurationMode::TeacherForced(&it.phoneme_durations))?;
            let durations = generator.predict_frames(store, &g2p_expand(&it.score, table)?)?;
            Ok(Prediction { frames, durations })
        })
        .collect()
}

pub fn evaluate(
    generator: &Generator<f32>,
    store: &ParamStore<f32>,
    table: &G2PTable,
    items: &[CorpusItem],
) -> Result<EvalMetrics> {
    if items.is_empty() {
        return Err(Error::Config("no evaluation items".into()));
    }
    score(&predict(generator, store, table, items)?, items)
}
