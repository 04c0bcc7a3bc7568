//! Shared feature trunk and the bank of hypernetwork experts.
//!
//! Each expert maps a query vector to a 1×1 classifier `w_j` over the
//! trunk's feature map; the classifier's logits are upsampled back to the
//! input resolution.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, Real, Var};
use crate::shape_encoder::{Conv, Mlp};
use crate::synth_data::Mask;

/// Encoder convs (stride 2) followed by refiner convs (stride 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrunkParams {
    pub encoder: [Conv; 2],
    pub refiner: [Conv; 2],
}

/// Feature map `F` at a quarter of the input resolution. ReLU follows every
/// conv except the last.
pub fn trunk_forward<T: Real>(g: &mut Graph<'_, T>, p: &TrunkParams, input: Var) -> Result<Var> {
    let (c, h, w) = g.value(input).chw()?;
    if c != 2 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::dim(format!(
            "trunk input must be 2×H×W with H, W divisible by 4, got {c}×{h}×{w}"
        )));
    }
    let convs: Vec<&Conv> = p.encoder.iter().chain(&p.refiner).collect();
    let mut x = input;
    for (i, conv) in convs.iter().enumerate() {
        x = conv.forward(g, x)?;
        if i + 1 < convs.len() {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertParams {
    pub hyper: Mlp,
    /// Scalar logit offset `b_j`.
    pub bias: ParamId,
}

/// `q = [e_m, mean-pool(F)]`.
pub fn expert_query<T: Real>(g: &mut Graph<'_, T>, e_m: Var, features: Var) -> Result<Var> {
    let pooled = g.mean_pool_spatial(features)?;
    g.concat(&[e_m, pooled])
}

/// Full-resolution logits (`1×H×W`) of one expert.
pub fn expert_forward<T: Real>(
    g: &mut Graph<'_, T>,
    p: &ExpertParams,
    query: Var,
    features: Var,
    upsample: usize,
) -> Result<Var> {
    let (c, h, w) = g.value(features).chw()?;
    let wj = p.hyper.forward(g, query)?;
    if g.value(wj).len() != c {
        return Err(Error::dim(format!(
            "expert emits {} weights for {c} feature channels",
            g.value(wj).len()
        )));
    }
    let row = g.reshape(wj, &[1, c])?;
    let flat = g.reshape(features, &[c, h * w])?;
    let low = g.matmul(row, flat)?;
    let b = g.param(p.bias);
    let low = g.add_scalar(low, b)?;
    let low = g.reshape(low, &[1, h, w])?;
    g.bilinear_upsample(low, upsample)
}

/// `Σ_j π_j · logits_j` over the selected experts. A single expert's logits
/// are scaled by its gate, which is exactly 1.
pub fn predict_amodal<T: Real>(g: &mut Graph<'_, T>, gate: Var, expert_logits: &[(usize, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(j, logits) in expert_logits {
        let pj = g.select(gate, j)?;
        let term = g.scale_by(logits, pj)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::config("no expert selected"))
}

/// Number of forward evaluations per expert.
#[derive(Debug, Default)]
pub struct ExpertCounter {
    counts: Vec<AtomicU64>,
}

impl ExpertCounter {
    pub fn new(experts: usize) -> Self {
        Self {
            counts: (0..experts).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn record(&self, expert: usize) {
        if let Some(c) = self.counts.get(expert) {
            c.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn counts(&self) -> Vec<u64> {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts().iter().sum()
    }

    pub fn reset(&self) {
        for c in &self.counts {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// Per-pixel amodal logits at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f32>,
}

impl MaskPrediction {
    pub fn probability(&self) -> Vec<f32> {
        self.logits
            .iter()
            .map(|&x| crate::numerics::ops::sigmoid_scalar(x))
            .collect()
    }

    /// Pixels with probability at least 0.5, i.e. logit ≥ 0.
    pub fn binary(&self) -> Mask {
        let p = self.probability();
        Mask::from_fn(self.height, self.width, |y, x| p[y * self.width + x] >= 0.5)
    }
}
