//! Brute-force loss oracles over plain nested vectors.

use rand::Rng;
use xis2::discriminator::{Band, Kind, Origin, Verdict};
use xis2::losses::BCE_CLAMP;
use xis2::numerics::{Tape, Tensor};

use super::{rand_tensor, rng};

/// Plain nested-vector verdict used by the brute-force oracles.
#[derive(Clone)]
pub struct RawVerdict {
    pub kind: Kind,
    pub scores: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

pub fn origin(kind: Kind, index: usize) -> Origin {
    Origin {
        band: Band::ALL[index % 3],
        kind,
        index,
        window: None,
    }
}

pub fn record(tape: &mut Tape<f64>, raw: &[RawVerdict]) -> Vec<Verdict> {
    raw.iter()
        .enumerate()
        .map(|(i, v)| Verdict {
            scores: v.scores.iter().map(|s| tape.constant(Tensor::new([s.len()], s.clone()).unwrap())).collect(),
            features: v.features.iter().map(|f| tape.constant(Tensor::new([f.len()], f.clone()).unwrap())).collect(),
            origin: origin(v.kind, i),
        })
        .collect()
}

/// Verdicts with uneven map counts and sizes; `like` fixes the structure.
pub fn random_verdicts(seed: u64, like: Option<&[RawVerdict]>) -> Vec<RawVerdict> {
    let mut r = rng(seed);
    let n = like.map_or_else(|| r.gen_range(1..7), |l| l.len());
    (0..n)
        .map(|i| {
            let shape = |r: &mut rand_chacha::ChaCha8Rng, maps: &[Vec<f64>]| -> Vec<usize> {
                if maps.is_empty() {
                    (0..r.gen_range(1..5)).map(|_| r.gen_range(1..9)).collect()
                } else {
                    maps.iter().map(Vec::len).collect()
                }
            };
            let (kind, s_shape, f_shape) = match like {
                Some(l) => (l[i].kind, shape(&mut r, &l[i].scores), shape(&mut r, &l[i].features)),
                None => {
                    let kind = if r.gen_bool(0.5) { Kind::Segment } else { Kind::Detail };
                    (kind, shape(&mut r, &[]), shape(&mut r, &[]))
                }
            };
            let mut fill = |dims: Vec<usize>| -> Vec<Vec<f64>> {
                dims.into_iter().map(|d| (0..d).map(|_| r.gen_range(-2.0..2.0)).collect()).collect()
            };
            RawVerdict {
                kind,
                scores: fill(s_shape),
                features: fill(f_shape),
            }
        })
        .collect()
}

pub fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn oracle_adv(raw: &[RawVerdict], target: f64) -> f64 {
    mean(raw.iter().map(|v| mean(v.scores.iter().map(|s| mean(s.iter().map(|x| (x - target).powi(2)))))))
}

pub fn oracle_feature(real: &[RawVerdict], fake: &[RawVerdict], include_stem: bool) -> f64 {
    let mut total = 0.0;
    for (r, f) in real.iter().zip(fake) {
        let skip = usize::from(r.kind == Kind::Detail && !include_stem);
        for (a, b) in r.features.iter().zip(&f.features).skip(skip) {
            total += mean(a.iter().zip(b).map(|(x, y)| (x - y).abs()));
        }
    }
    total
}

pub fn value(tape: &Tape<f64>, v: xis2::numerics::Var) -> f64 {
    tape.value(v).item()
}

pub struct Frames {
    pub mel: Tensor<f64>,
    pub vuv: Tensor<f64>,
    pub logf0: Tensor<f64>,
    pub log_dur: Tensor<f64>,
}

pub fn random_frames(seed: u64, t: usize, bins: usize, phonemes: usize, probabilities: bool) -> Frames {
    let mut r = rng(seed);
    let vuv = if probabilities {
        Tensor::from_fn(vec![t], |_| r.gen_range(0.0..1.0))
    } else {
        Tensor::from_fn(vec![t], |_| if r.gen_bool(0.6) { 1.0 } else { 0.0 })
    };
    Frames {
        mel: rand_tensor(&[t, bins], &mut r),
        vuv,
        logf0: Tensor::from_fn(vec![t], |_| r.gen_range(4.5..6.5)),
        log_dur: Tensor::from_fn(vec![phonemes], |_| r.gen_range(0.5..4.0)),
    }
}

pub fn oracle_bce(p: &[f64], t: &[f64]) -> f64 {
    -mean(p.iter().zip(t).map(|(&p, &t)| {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        t * p.ln() + (1.0 - t) * (1.0 - p).ln()
    }))
}

pub fn oracle_masked(p: &[f64], t: &[f64], vuv: &[f64]) -> f64 {
    let voiced: Vec<f64> = p.iter().zip(t).zip(vuv).filter(|(_, &v)| v > 0.5).map(|((a, b), _)| (a - b).powi(2)).collect();
    if voiced.is_empty() {
        0.0
    } else {
        voiced.iter().sum::<f64>() / voiced.len() as f64
    }
}

pub fn oracle_mse(a: &[f64], b: &[f64]) -> f64 {
    mean(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)))
}
