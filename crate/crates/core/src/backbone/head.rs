use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

/// Width of the sentiment feature space produced by the first head layer.
pub const FEATURE_DIM: usize = 300;
/// Number of polarity classes (0 = positive, 1 = negative).
pub const NUM_CLASSES: usize = 2;

const DENSE: &str = "sentiment_head.dense";
const OUT: &str = "sentiment_head.out_proj";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    #[default]
    Tanh,
    Relu,
    Gelu,
}

impl HeadActivation {
    fn apply(self, xs: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            HeadActivation::Tanh => xs.tanh(),
            HeadActivation::Relu => xs.relu(),
            HeadActivation::Gelu => xs.gelu(),
        }
    }
}

/// Two-layer polarity classifier: `hidden -> 300 -> 2`.
#[derive(Debug, Clone)]
pub struct SentimentHead {
    dense_w: Tensor,
    dense_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
    activation: HeadActivation,
}

pub(crate) fn init_params(hidden: usize, init: &mut Init<'_>) -> Result<()> {
    let b1 = (hidden as f64).powf(-0.5);
    init.uniform(&format!("{DENSE}.weight"), &[FEATURE_DIM, hidden], b1)?;
    init.uniform(&format!("{DENSE}.bias"), &[FEATURE_DIM], b1)?;
    let b2 = (FEATURE_DIM as f64).powf(-0.5);
    init.uniform(&format!("{OUT}.weight"), &[NUM_CLASSES, FEATURE_DIM], b2)?;
    init.uniform(&format!("{OUT}.bias"), &[NUM_CLASSES], b2)?;
    Ok(())
}

pub(crate) fn has_params(store: &ParamStore) -> bool {
    store.contains(&format!("{DENSE}.weight"))
}

impl SentimentHead {
    pub fn from_params(hidden: usize, store: &ParamStore, activation: HeadActivation) -> Result<Self> {
        Ok(SentimentHead {
            dense_w: store.tensor(&format!("{DENSE}.weight"), &[FEATURE_DIM, hidden])?,
            dense_b: store.tensor(&format!("{DENSE}.bias"), &[FEATURE_DIM])?,
            out_w: store.tensor(&format!("{OUT}.weight"), &[NUM_CLASSES, FEATURE_DIM])?,
            out_b: store.tensor(&format!("{OUT}.bias"), &[NUM_CLASSES])?,
            activation,
        })
    }

    pub fn from_tensors(
        dense_w: Tensor,
        dense_b: Tensor,
        out_w: Tensor,
        out_b: Tensor,
        activation: HeadActivation,
    ) -> Result<Self> {
        if dense_w.dim(0)? != FEATURE_DIM || out_w.dims() != [NUM_CLASSES, FEATURE_DIM] {
            return Err(Error::InvalidInput("sentiment head must map hidden -> 300 -> 2".into()));
        }
        Ok(SentimentHead {
            dense_w,
            dense_b,
            out_w,
            out_b,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dense_w.dims()[1]
    }

    /// First layer plus nonlinearity: `[B, hidden] -> [B, 300]`.
    pub fn features(&self, pooled: &Tensor) -> Result<Tensor> {
        let z = pooled.broadcast_matmul(&self.dense_w.t()?)?.broadcast_add(&self.dense_b)?;
        Ok(self.activation.apply(&z)?)
    }

    /// Second layer: `[B, 300] -> [B, 2]`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(features
            .broadcast_matmul(&self.out_w.t()?)?
            .broadcast_add(&self.out_b)?)
    }
}
