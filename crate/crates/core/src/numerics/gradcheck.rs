//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamStore, Params, Tape, Tensor, Var};
use crate::Result;

/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding do not register as large relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Label of the entry with the largest relative error.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Smallest step [`central_difference`] will shrink to.
pub const MIN_STEP: f64 = 1e-8;

/// Central difference of `g(δ) = f(x + δ e_i)` at `δ = 0`.
///
/// Piecewise-smooth functions (ReLU, abs, clamp) give a wrong estimate when
/// kinks fall inside `[-h, h]`. The estimates at `h` and `h / 2` then
/// disagree by more than the `O(h²)` truncation and the rounding noise of a
/// smooth function, and the step is halved until they agree. The analytic
/// gradient plays no part in this.
pub fn central_difference(mut g: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let mut h = h;
    let (plus, minus) = (g(h)?, g(-h)?);
    let mut coarse = (plus - minus) / (2.0 * h);
    let magnitude = plus.abs().max(minus.abs());
    loop {
        let fine = (g(h / 2.0)? - g(-h / 2.0)?) / h;
        let rounding = 8.0 * f64::EPSILON * magnitude / h;
        let scale = coarse.abs().max(fine.abs()).max(REL_ERROR_FLOOR);
        if (coarse - fine).abs() <= 1e-6 * scale + rounding || h / 2.0 < MIN_STEP {
            return Ok(fine);
        }
        h /= 2.0;
        coarse = fine;
    }
}

fn eval(f: &impl Fn(&mut Tape<f64>, Var) -> Result<Var>, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item())
}

/// Compare the tape gradient of scalar `f` at `x` with central differences of step `h`.
pub fn grad_check(
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let numeric = central_difference(
            |d| {
                probe.data_mut()[i] = orig + d;
                eval(&f, &probe)
            },
            h,
        )?;
        probe.data_mut()[i] = orig;
        report.record(|| format!("x[{i}]"), analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Gradient check of a scalar function of every tensor in `store`.
///
/// With `per_param = Some(n)`, at most `n` randomly chosen entries of each
/// tensor are probed; every tensor is probed at least once.
pub fn grad_check_params(
    f: impl Fn(&mut Tape<f64>, Params<'_, f64>) -> Result<Var>,
    store: &ParamStore<f64>,
    h: f64,
    per_param: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let out = f(&mut tape, Params::tracked(store))?;
    tape.backward(out)?;
    let grads = tape.param_grads(store);

    let value_at = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, Params::frozen(s))?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < n => sample(rng, n, k.max(1)).into_vec(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = probe.get(id).data()[i];
            let numeric = central_difference(
                |d| {
                    probe.get_mut(id).data_mut()[i] = orig + d;
                    value_at(&probe)
                },
                h,
            )?;
            probe.get_mut(id).data_mut()[i] = orig;
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            report.record(|| format!("{}[{i}]", store.name(id)), analytic, numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_on_dyadic_inputs() {
        let x = Tensor::new([4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let r = grad_check(|t, v| Ok(t.sum(v)), &x, 2f64.powi(-16)).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn sum_of_squares_within_1e8() {
        let x = Tensor::new([3], vec![0.3, -1.7, 2.2]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.square(v);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }
}
