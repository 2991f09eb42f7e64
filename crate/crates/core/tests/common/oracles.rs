//! Straight-line reference implementations. Nothing here touches the tape.
#![allow(dead_code)]

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// `x[ci][t]`, `w[co][ci][k]`.
pub fn conv1d(x: &[f64], ci: usize, t: usize, w: &[f64], co: usize, k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize) {
    let t_out = (t + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; co * t_out];
    for o in 0..co {
        for s in 0..t_out {
            let mut acc = 0.0;
            for c in 0..ci {
                for j in 0..k {
                    let pos = (s * stride + j) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < t {
                        acc += w[(o * ci + c) * k + j] * x[c * t + pos as usize];
                    }
                }
            }
            y[o * t_out + s] = acc;
        }
    }
    (y, t_out)
}

/// `x[ci][f][t]`, `w[co][ci][kf][kt]`, dilated cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (ci, f, t): (usize, usize, usize),
    w: &[f64],
    (co, kf, kt): (usize, usize, usize),
    stride: (usize, usize),
    dilation: (usize, usize),
    pad: (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let f_out = (f + 2 * pad.0 - dilation.0 * (kf - 1) - 1) / stride.0 + 1;
    let t_out = (t + 2 * pad.1 - dilation.1 * (kt - 1) - 1) / stride.1 + 1;
    let mut y = vec![0.0; co * f_out * t_out];
    for o in 0..co {
        for a in 0..f_out {
            for b in 0..t_out {
                let mut acc = 0.0;
                for c in 0..ci {
                    for p in 0..kf {
                        for q in 0..kt {
                            let fi = (a * stride.0 + p * dilation.0) as isize - pad.0 as isize;
                            let ti = (b * stride.1 + q * dilation.1) as isize - pad.1 as isize;
                            if fi < 0 || ti < 0 || fi as usize >= f || ti as usize >= t {
                                continue;
                            }
                            acc += w[((o * ci + c) * kf + p) * kt + q] * x[(c * f + fi as usize) * t + ti as usize];
                        }
                    }
                }
                y[(o * f_out + a) * t_out + b] = acc;
            }
        }
    }
    (y, f_out, t_out)
}

/// Explicit `softmax(Q K^T / sqrt(d/h)) V` per head, concatenated, then `wo`.
pub fn attention(x: &[f64], t: usize, d: usize, heads: usize, wq: &[f64], wk: &[f64], wv: &[f64], wo: &[f64]) -> Vec<f64> {
    let q = matmul(x, wq, t, d, d);
    let k = matmul(x, wk, t, d, d);
    let v = matmul(x, wv, t, d, d);
    let dh = d / heads;
    let mut cat = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let mut scores = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                }
                scores[j] = s / (dh as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..t {
                    acc += (scores[j] - m).exp() / z * v[j * d + h * dh + c];
                }
                cat[i * d + h * dh + c] = acc;
            }
        }
    }
    matmul(&cat, wo, t, d, d)
}

/// Two-pass mean/variance layer norm over rows of width `d`.
pub fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for r in 0..x.len() / d {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            y[r * d + j] = (row[j] - mean) / (var + eps).sqrt() * gamma[j] + beta[j];
        }
    }
    y
}

pub fn length_regulate(h: &[Vec<f64>], frames: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (row, &n) in h.iter().zip(frames) {
        for _ in 0..n {
            out.push(row.clone());
        }
    }
    out
}

/// Population variance by the two-pass formula.
pub fn variance(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.len() as f64
}
