//! Adversarial, acoustic and feature-matching objectives.

use serde::{Deserialize, Serialize};

use crate::discriminator::{Kind, Verdict};
use crate::generator::FrameVars;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Adversarial, acoustic and feature terms of the generator objective.
    pub lambda: [f64; 3],
    /// Mel, logF0, V/UV and duration terms of the acoustic loss.
    pub alpha: [f64; 4],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [0.1, 1.0, 1.0],
            alpha: [1.0, 0.01, 0.01, 0.1],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().chain(&self.alpha).all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }

    pub fn acoustic(&self, mel: f64, pitch: f64, vuv: f64, dur: f64) -> f64 {
        self.alpha[0] * mel + self.alpha[1] * pitch + self.alpha[2] * vuv + self.alpha[3] * dur
    }
}

fn verdict_mean<R: Real>(tape: &mut Tape<R>, v: &Verdict, target: f64) -> Result<Var> {
    if v.scores.is_empty() {
        return Err(Error::Contract(format!("verdict {:?} has no score maps", v.origin)));
    }
    let mut acc = None;
    for &s in &v.scores {
        let d = if target == 0.0 { s } else { tape.add_scalar(s, -target) };
        let sq = tape.square(d);
        let m = tape.mean(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    Ok(tape.scale(acc.expect("nonempty"), 1.0 / v.scores.len() as f64))
}

fn mean_over<R: Real>(tape: &mut Tape<R>, verdicts: &[Verdict], target: f64) -> Result<Var> {
    let mut acc = None;
    for v in verdicts {
        let m = verdict_mean(tape, v, target)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    let acc = acc.ok_or_else(|| Error::Contract("no verdicts".into()))?;
    Ok(tape.scale(acc, 1.0 / verdicts.len() as f64))
}

/// Least-squares generator loss: mean of `(1 - D(G))^2`. Each verdict
/// contributes the mean of its per-map means; verdicts are averaged.
pub fn adv_loss_generator<R: Real>(tape: &mut Tape<R>, fake: &[Verdict]) -> Result<Var> {
    mean_over(tape, fake, 1.0)
}

fn check_pairing<R: Real>(tape: &Tape<R>, real: &[Verdict], fake: &[Verdict], features: bool) -> Result<()> {
    if real.len() != fake.len() {
        return Err(Error::Contract(format!("{} real verdicts vs {} fake", real.len(), fake.len())));
    }
    for (r, f) in real.iter().zip(fake) {
        let (a, b) = if features { (&r.features, &f.features) } else { (&r.scores, &f.scores) };
        if r.origin != f.origin
            || a.len() != b.len()
            || a.iter().zip(b).any(|(&x, &y)| tape.shape(x) != tape.shape(y))
        {
            return Err(Error::Contract(format!(
                "verdict structure differs between real {:?} and fake {:?}",
                r.origin, f.origin
            )));
        }
    }
    Ok(())
}

/// Least-squares discriminator loss: mean `(1 - D(x))^2` over real verdicts
/// plus mean `D(G)^2` over fake verdicts.
pub fn adv_loss_discriminator<R: Real>(tape: &mut Tape<R>, real: &[Verdict], fake: &[Verdict]) -> Result<Var> {
    check_pairing(tape, real, fake, false)?;
    let r = mean_over(tape, real, 1.0)?;
    let f = mean_over(tape, fake, 0.0)?;
    tape.add(r, f)
}

/// Sum over every verdict and feature map of the mean absolute difference.
/// With `include_dd_stem = false` the first map of detail verdicts is skipped.
pub fn feature_loss<R: Real>(
    tape: &mut Tape<R>,
    real: &[Verdict],
    fake: &[Verdict],
    include_dd_stem: bool,
) -> Result<Var> {
    check_pairing(tape, real, fake, true)?;
    let mut acc = None;
    for (r, f) in real.iter().zip(fake) {
        let skip = usize::from(r.origin.kind == Kind::Detail && !include_dd_stem);
        for (&a, &b) in r.features.iter().zip(&f.features).skip(skip) {
            let d = tape.sub(a, b)?;
            let d = tape.abs(d);
            let m = tape.mean(d);
            acc = Some(match acc {
                Some(x) => tape.add(x, m)?,
                None => m,
            });
        }
    }
    Ok(acc.unwrap_or_else(|| tape.scalar(R::zero())))
}

/// Ground truth of one utterance, recorded on the tape as constants.
#[derive(Clone, Copy, Debug)]
pub struct TargetVars {
    pub mel: Var,
    /// `[T]` in {0, 1}.
    pub vuv: Var,
    pub logf0: Var,
    /// `[N]` `log(frames + 1)`.
    pub log_durations: Var,
}

impl TargetVars {
    pub fn record<R: Real>(
        tape: &mut Tape<R>,
        mel: &Tensor<R>,
        vuv: &Tensor<R>,
        logf0: &Tensor<R>,
        frames: &[u32],
    ) -> Result<Self> {
        let log_durations = Tensor::new(
            [frames.len()],
            frames.iter().map(|&f| R::of_f64(crate::generator::encode_duration(f))).collect(),
        )?;
        Ok(TargetVars {
            mel: tape.constant(mel.clone()),
            vuv: tape.constant(vuv.clone()),
            logf0: tape.constant(logf0.clone()),
            log_durations: tape.constant(log_durations),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AcousticTerms {
    pub mel: Var,
    pub pitch: Var,
    pub vuv: Var,
    pub dur: Var,
    /// Alpha-weighted sum of the four terms.
    pub total: Var,
}

fn mse<R: Real>(tape: &mut Tape<R>, op: &'static str, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(op, tape.shape(a), tape.shape(b)));
    }
    let d = tape.sub(a, b)?;
    let d = tape.square(d);
    Ok(tape.mean(d))
}

/// Mean squared logF0 error over frames whose target is voiced; zero when
/// no frame is voiced.
pub fn masked_logf0_mse<R: Real>(tape: &mut Tape<R>, pred: Var, target: Var, target_vuv: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) || tape.shape(pred) != tape.shape(target_vuv) {
        return Err(Error::dim("logf0_loss", tape.shape(pred), tape.shape(target)));
    }
    let mask: Vec<R> = tape
        .value(target_vuv)
        .data()
        .iter()
        .map(|&v| if v > R::of_f64(0.5) { R::one() } else { R::zero() })
        .collect();
    let voiced = mask.iter().filter(|&&m| m > R::zero()).count();
    if voiced == 0 {
        return Ok(tape.scalar(R::zero()));
    }
    let mask = tape.constant(Tensor::new([mask.len()], mask)?);
    let d = tape.sub(pred, target)?;
    let d = tape.square(d);
    let d = tape.mul(d, mask)?;
    let s = tape.sum(d);
    Ok(tape.scale(s, 1.0 / voiced as f64))
}

/// Binary cross-entropy of probabilities, clamped away from 0 and 1.
pub fn bce<R: Real>(tape: &mut Tape<R>, prob: Var, target: Var) -> Result<Var> {
    if tape.shape(prob) != tape.shape(target) {
        return Err(Error::dim("vuv_loss", tape.shape(prob), tape.shape(target)));
    }
    let p = tape.clamp(prob, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = tape.log(p);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let log_q = tape.log(q);
    let a = tape.mul(target, log_p)?;
    let not_t = tape.scale(target, -1.0);
    let not_t = tape.add_scalar(not_t, 1.0);
    let b = tape.mul(not_t, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

pub fn acoustic_loss<R: Real>(
    tape: &mut Tape<R>,
    pred: &FrameVars,
    pred_log_durations: Var,
    target: &TargetVars,
    w: &LossWeights,
) -> Result<AcousticTerms> {
    let mel = mse(tape, "mel_loss", pred.mel, target.mel)?;
    let pitch = masked_logf0_mse(tape, pred.logf0, target.logf0, target.vuv)?;
    let vuv = bce(tape, pred.vuv, target.vuv)?;
    let dur = mse(tape, "duration_loss", pred_log_durations, target.log_durations)?;
    let terms = [(mel, w.alpha[0]), (pitch, w.alpha[1]), (vuv, w.alpha[2]), (dur, w.alpha[3])];
    let mut total = tape.scale(terms[0].0, terms[0].1);
    for &(v, a) in &terms[1..] {
        let s = tape.scale(v, a);
        total = tape.add(total, s)?;
    }
    Ok(AcousticTerms {
        mel,
        pitch,
        vuv,
        dur,
        total,
    })
}

/// `lambda1 * adv + lambda2 * acoustic + lambda3 * feature`, with absent
/// adversarial terms contributing zero.
pub fn generator_objective<R: Real>(
    tape: &mut Tape<R>,
    adv_g: Option<Var>,
    acoustic: Var,
    feature: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = tape.scale(acoustic, w.lambda[1]);
    if let Some(a) = adv_g {
        let a = tape.scale(a, w.lambda[0]);
        total = tape.add(total, a)?;
    }
    if let Some(f) = feature {
        let f = tape.scale(f, w.lambda[2]);
        total = tape.add(total, f)?;
    }
    Ok(total)
}

/// Unweighted loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub adv_g: f64,
    pub adv_d: f64,
    pub mel: f64,
    pub pitch: f64,
    pub vuv: f64,
    pub dur: f64,
    pub feature: f64,
}

impl LossComponents {
    fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("mel", self.mel),
            ("pitch", self.pitch),
            ("vuv", self.vuv),
            ("dur", self.dur),
            ("feature", self.feature),
        ]
    }

    /// Componentwise mean.
    pub fn mean(items: &[LossComponents]) -> LossComponents {
        let n = items.len().max(1) as f64;
        let mut m = LossComponents::default();
        for c in items {
            m.adv_g += c.adv_g / n;
            m.adv_d += c.adv_d / n;
            m.mel += c.mel / n;
            m.pitch += c.pitch / n;
            m.vuv += c.vuv / n;
            m.dur += c.dur / n;
            m.feature += c.feature / n;
        }
        m
    }
}

/// One training-log line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub mel: f64,
    pub pitch: f64,
    pub vuv: f64,
    pub dur: f64,
    pub feature: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub lr: f64,
}

impl LossReport {
    pub fn acoustic(&self, w: &LossWeights) -> f64 {
        w.acoustic(self.mel, self.pitch, self.vuv, self.dur)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn total_losses(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    if let Some((name, v)) = c.fields().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Divergence(format!("loss term {name} is {v}")));
    }
    let acoustic = w.acoustic(c.mel, c.pitch, c.vuv, c.dur);
    Ok(LossReport {
        step: 0,
        adv_g: c.adv_g,
        adv_d: c.adv_d,
        mel: c.mel,
        pitch: c.pitch,
        vuv: c.vuv,
        dur: c.dur,
        feature: c.feature,
        total_g: w.lambda[0] * c.adv_g + w.lambda[1] * acoustic + w.lambda[2] * c.feature,
        total_d: c.adv_d,
        lr: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_components_recombine() {
        let w = LossWeights::default();
        assert!((w.acoustic(1.0, 1.0, 1.0, 1.0) - 1.12).abs() < 1e-12);
        let c = LossComponents {
            adv_g: 1.0,
            feature: 1.0,
            mel: 1.0,
            ..Default::default()
        };
        assert!((total_losses(&c, &w).unwrap().total_g - 2.1).abs() < 1e-12);
        let bad = LossComponents {
            pitch: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(total_losses(&bad, &w), Err(Error::Divergence(m)) if m.contains("pitch")));
    }

    #[test]
    fn bce_clamps_saturated_probabilities() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        let t = tape.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        let l = bce(&mut tape, p, t).unwrap();
        let v = tape.value(l).item();
        assert!(v >= 0.0 && v < 1e-6, "{v}");
        let t2 = tape.constant(Tensor::new([2], vec![0.0, 1.0]).unwrap());
        let l2 = bce(&mut tape, p, t2).unwrap();
        assert!((tape.value(l2).item() - (-(BCE_CLAMP.ln()))).abs() < 1e-6);
    }
}
