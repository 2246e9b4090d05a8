//! Thin layer wrappers: parameter handles plus a forward method.

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::Result;
use crate::optim::{BoundParams, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    /// Register `<prefix>/weight` (C_out, C_in, k, k) and `<prefix>/bias`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_seed: u64,
    ) -> Self {
        let weight = store.register(&format!("{prefix}/weight"), vec![c_out, c_in, k, k], init_seed);
        let bias = store.register(&format!("{prefix}/bias"), vec![c_out], init_seed);
        Conv2dLayer { weight, bias, stride, pad }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams<'_, T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let w = params.get(self.weight);
        let b = params.get(self.bias);
        tape.conv2d(x, &w, Some(&b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    /// Register `<prefix>/weight` (out, in) and `<prefix>/bias`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n_out: usize,
        n_in: usize,
        init_seed: u64,
    ) -> Self {
        let weight = store.register(&format!("{prefix}/weight"), vec![n_out, n_in], init_seed);
        let bias = store.register(&format!("{prefix}/bias"), vec![n_out], init_seed);
        LinearLayer { weight, bias }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams<'_, T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let w = params.get(self.weight);
        let b = params.get(self.bias);
        tape.linear(x, &w, Some(&b))
    }
}

// ── Loss composites built from tape primitives ───────────────────────

/// Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log, so
/// every logged loss stays finite.
pub const PROB_EPS: f64 = 1e-7;

/// log of probabilities, clamped away from 0 and 1.
pub fn clamped_log<T: Scalar>(tape: &mut Tape<T>, probs: &Tensor<T>) -> Result<Tensor<T>> {
    let clamped = tape.clamp(probs, T::of(PROB_EPS), T::of(1.0 - PROB_EPS))?;
    tape.log(&clamped)
}

/// Element-wise binary cross-entropy of probabilities against a constant
/// 0/1 label: `-log p` when the label is 1, `-log(1 - p)` when it is 0.
pub fn bce_with_constant_label<T: Scalar>(
    tape: &mut Tape<T>,
    probs: &Tensor<T>,
    label_is_one: bool,
) -> Result<Tensor<T>> {
    let p = if label_is_one {
        probs.clone()
    } else {
        let neg = tape.scale(probs, -T::one());
        tape.offset(&neg, T::one())
    };
    let logp = clamped_log(tape, &p)?;
    Ok(tape.scale(&logp, -T::one()))
}

/// Numerically-stable log-softmax of a rank-1 logit vector. The max shift is
/// a detached constant; it cancels exactly in the result and leaves the
/// gradient untouched.
pub fn log_softmax<T: Scalar>(tape: &mut Tape<T>, logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape().len() != 1 {
        return Err(crate::error::Error::shape(
            "log_softmax",
            format!("expected rank-1 logits, got {:?}", logits.shape()),
        ));
    }
    let max = logits
        .data()
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, v| a.max(v));
    let shifted = tape.offset(logits, -max);
    let exps = tape.exp(&shifted);
    let total = tape.sum(&exps);
    let log_total = tape.log(&total)?;
    tape.sub(&shifted, &log_total)
}

pub fn softmax<T: Scalar>(tape: &mut Tape<T>, logits: &Tensor<T>) -> Result<Tensor<T>> {
    let ls = log_softmax(tape, logits)?;
    Ok(tape.exp(&ls))
}

/// Element-wise smooth L1: `0.5 d^2` for |d| < 1, `|d| - 0.5` otherwise,
/// expressed as `0.5 d^2 - 0.5 relu(|d| - 1)^2` so it differentiates through
/// the existing primitives.
pub fn smooth_l1<T: Scalar>(tape: &mut Tape<T>, diff: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::of(0.5);
    let neg = tape.scale(diff, -T::one());
    let abs = {
        let rp = tape.relu(diff);
        let rn = tape.relu(&neg);
        tape.add(&rp, &rn)?
    };
    let sq = tape.mul(diff, diff)?;
    let half_sq = tape.scale(&sq, half);
    let shifted = tape.offset(&abs, -T::one());
    let excess = tape.relu(&shifted);
    let excess_sq = tape.mul(&excess, &excess)?;
    let half_excess_sq = tape.scale(&excess_sq, half);
    tape.sub(&half_sq, &half_excess_sq)
}

/// `sum(x * mask) / count` with a constant mask.
pub fn masked_mean<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    mask: &Tensor<T>,
    count: usize,
) -> Result<Tensor<T>> {
    debug_assert!(count > 0);
    let masked = tape.mul(x, mask)?;
    let total = tape.sum(&masked);
    Ok(tape.scale(&total, T::of(1.0 / count as f64)))
}
