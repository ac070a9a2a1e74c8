//! Training losses: response language modeling, sentiment classification,
//! cosine empathy forcing, and their weighted sum
//! `total = l_lm + alpha * l_sent + beta * l_sim`.

use candle_core::{DType, Tensor, D};
use candle_nn::ops::log_softmax;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum feature norm accepted by [`empathy_loss`].
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.4, beta: 0.4 }
    }
}

impl LossWeights {
    /// Pure response language modeling (no auxiliary terms).
    pub fn baseline() -> Self {
        LossWeights { alpha: 0.0, beta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0 && self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "loss weights must be finite and non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lm: f64,
    pub l_sent: f64,
    pub l_sim: f64,
    pub total: f64,
}

/// Summed token negative log-likelihood and the number of unmasked tokens.
/// `logits` is `[..., V]`, `targets` and `mask` share the leading shape.
pub fn token_nll_sum(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<(Tensor, usize)> {
    let vocab = logits.dim(D::Minus1)?;
    let logits = logits.reshape(((), vocab))?;
    let targets = targets.flatten_all()?.to_dtype(DType::U32)?;
    let mask = mask.flatten_all()?.to_dtype(logits.dtype())?;
    if targets.dim(0)? != logits.dim(0)? || mask.dim(0)? != logits.dim(0)? {
        return Err(Error::InvalidInput(format!(
            "logits rows {} do not match targets {} / mask {}",
            logits.dim(0)?,
            targets.dim(0)?,
            mask.dim(0)?
        )));
    }
    let count = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?.round() as usize;
    let picked = log_softmax(&logits, D::Minus1)?
        .gather(&targets.unsqueeze(1)?, 1)?
        .squeeze(1)?;
    let nll = (picked.neg()? * mask)?.sum_all()?;
    Ok((nll, count))
}

/// Mean per-token cross-entropy over unmasked positions.
pub fn lm_loss(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (nll, count) = token_nll_sum(logits, targets, mask)?;
    if count == 0 {
        return Err(Error::InvalidInput("lm loss over fully masked targets".into()));
    }
    Ok((nll / count as f64)?)
}

fn as_rows(t: &Tensor) -> Result<Tensor> {
    Ok(if t.rank() == 1 { t.unsqueeze(0)? } else { t.clone() })
}

/// Two-class cross-entropy averaged over the batch. `logits` is `[2]` or
/// `[B, 2]`; `labels` holds class indices (0 = positive, 1 = negative).
pub fn sentiment_loss(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let logits = as_rows(logits)?;
    let labels = labels.flatten_all()?.to_dtype(DType::U32)?;
    let picked = log_softmax(&logits, D::Minus1)?
        .gather(&labels.unsqueeze(1)?, 1)?
        .squeeze(1)?;
    Ok(picked.neg()?.mean_all()?)
}

/// `1 - cos(c, r)` averaged over the batch. Inputs are `[F]` or `[B, F]`.
/// Any feature vector with norm at or below [`NORM_EPS`] is an error.
pub fn empathy_loss(c: &Tensor, r: &Tensor) -> Result<Tensor> {
    let c = as_rows(c)?;
    let r = as_rows(r)?;
    if c.dims() != r.dims() {
        return Err(Error::InvalidInput(format!(
            "feature shapes differ: {:?} vs {:?}",
            c.dims(),
            r.dims()
        )));
    }
    let norm_c = c.sqr()?.sum(D::Minus1)?.sqrt()?;
    let norm_r = r.sqr()?.sum(D::Minus1)?.sqrt()?;
    let smallest = norm_c
        .min_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?
        .min(norm_r.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?);
    if smallest.is_nan() || smallest <= NORM_EPS {
        return Err(Error::DegenerateFeature {
            norm: smallest,
            eps: NORM_EPS,
        });
    }
    let cos = ((&c * &r)?.sum(D::Minus1)? / (norm_c * norm_r)?)?;
    Ok(cos.affine(-1.0, 1.0)?.clamp(0.0, 2.0)?.mean_all()?)
}

/// Weighted sum of already-computed component values.
pub fn total_loss(l_lm: f64, l_sent: f64, l_sim: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    if !(l_lm.is_finite() && l_sent.is_finite() && l_sim.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: 0,
            l_lm,
            l_sent,
            l_sim,
        });
    }
    Ok(LossBreakdown {
        l_lm,
        l_sent,
        l_sim,
        total: l_lm + weights.alpha * l_sent + weights.beta * l_sim,
    })
}

/// Differentiable total plus the logged breakdown.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Builds the backpropagated objective. Terms whose weight is zero are
/// left out of the graph, so `alpha = beta = 0` is exactly a language
/// modeling step; their values are still reported.
pub fn combine(l_lm: &Tensor, l_sent: &Tensor, l_sim: &Tensor, weights: &LossWeights) -> Result<CombinedLoss> {
    let value = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = total_loss(value(l_lm)?, value(l_sent)?, value(l_sim)?, weights)?;
    let mut total = l_lm.clone();
    if weights.alpha != 0.0 {
        total = (total + (l_sent * weights.alpha)?)?;
    }
    if weights.beta != 0.0 {
        total = (total + (l_sim * weights.beta)?)?;
    }
    Ok(CombinedLoss { total, breakdown })
}
