//! Parameterized building blocks shared by the generator and discriminator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::numerics::{ParamId, ParamStore, Params, Real, Tape, Tensor, Var};
use crate::Result;

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x . w + b` over rows of `x[N, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::uniform([d_in, d_out], xavier(d_in, d_out), rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros([d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: Params<'_, R>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(p, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 1-d convolution with per-channel bias over `x[C, T]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub padding: usize,
}

impl Conv1d {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = xavier(c_in * kernel, c_out * kernel);
        Ok(Conv1d {
            w: store.add(format!("{name}.w"), Tensor::uniform([c_out, c_in, kernel], bound, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros([c_out]))?,
            padding: kernel / 2,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: Params<'_, R>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.w);
        let b = tape.param(p, self.b);
        let y = tape.conv1d(x, w, 1, self.padding)?;
        tape.add_channel_bias(y, b)
    }
}

/// 2-d convolution with per-channel bias over `x[C, F, T]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        dilation: (usize, usize),
        padding: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let taps = kernel.0 * kernel.1;
        let bound = xavier(c_in * taps, c_out * taps);
        Ok(Conv2d {
            w: store.add(format!("{name}.w"), Tensor::uniform([c_out, c_in, kernel.0, kernel.1], bound, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros([c_out]))?,
            kernel,
            stride,
            dilation,
            padding,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: Params<'_, R>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.w);
        let b = tape.param(p, self.b);
        let y = tape.conv2d(x, w, self.stride, self.dilation, self.padding)?;
        tape.add_channel_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn init<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([d]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([d]))?,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: Params<'_, R>, x: Var) -> Result<Var> {
        let g = tape.param(p, self.gamma);
        let b = tape.param(p, self.beta);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// Fixed sinusoidal position table `[T, d]`.
pub fn sinusoid_table<R: Real>(t: usize, d: usize) -> Tensor<R> {
    Tensor::from_fn([t, d], |i| {
        let (pos, j) = (i / d, i % d);
        let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
        let angle = pos as f64 * freq;
        R::of_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Per-forward state: dropout rate and the mask stream.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn inference() -> Self {
        ForwardCtx { rate: 0.0, rng: None }
    }

    pub fn training(rate: f64, seed: u64) -> Self {
        ForwardCtx {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Real>(&mut self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = R::of_f64(1.0 / (1.0 - rate));
        let shape = tape.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < rate { R::zero() } else { keep });
        let mask = tape.constant(mask);
        tape.mul(x, mask)
    }
}
