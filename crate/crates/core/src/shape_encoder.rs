//! Visible-mask embedding, the Gaussian shape distribution over a latent
//! space, and reparameterized sampling of the latent shape code.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Graph, ParamId, Real, Tensor, Var};

/// Weight and bias of one dense layer, `y = W·x + b` with `W` stored
/// `[out, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(w, x)?;
        g.add(y, b)
    }
}

/// 3×3 convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let k = g.param(self.kernels);
        let b = g.param(self.bias);
        g.conv2d(x, k, b, self.stride)
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, h)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeEncoderParams {
    /// Strided convs over the visible mask.
    pub embed: [Conv; 2],
    pub mu: Mlp,
    pub sigma: Mlp,
}

/// `e_m`: mean-pooled output of the mask conv stack, one value per channel.
pub fn embed_mask<T: Real>(g: &mut Graph<'_, T>, p: &ShapeEncoderParams, mask: Var) -> Result<Var> {
    let (_, h, w) = g.value(mask).chw()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::dim(format!("mask {h}×{w} is not divisible by 4")));
    }
    let mut x = mask;
    for conv in &p.embed {
        x = conv.forward(g, x)?;
        x = g.relu(x)?;
    }
    g.mean_pool_spatial(x)
}

/// Graph nodes of `(μ, σ_raw)`.
#[derive(Clone, Copy, Debug)]
pub struct DistributionVars {
    pub mu: Var,
    pub sigma_raw: Var,
}

pub fn encode_distribution<T: Real>(
    g: &mut Graph<'_, T>,
    p: &ShapeEncoderParams,
    e_m: Var,
) -> Result<DistributionVars> {
    let mu = p.mu.forward(g, e_m)?;
    let sigma_raw = p.sigma.forward(g, e_m)?;
    Ok(DistributionVars { mu, sigma_raw })
}

/// `l_o = μ + softplus(σ_raw) ⊙ η`. With `eta = None` the latent is `μ`
/// itself.
pub fn latent_var<T: Real>(g: &mut Graph<'_, T>, dist: DistributionVars, eta: Option<&[T]>) -> Result<Var> {
    let Some(eta) = eta else {
        return Ok(dist.mu);
    };
    if eta.len() != g.value(dist.mu).len() {
        return Err(Error::dim(format!(
            "eta has {} entries, latent has {}",
            eta.len(),
            g.value(dist.mu).len()
        )));
    }
    let std = g.softplus(dist.sigma_raw)?;
    let noise = g.constant(Tensor::vector(eta.to_vec()));
    let spread = g.mul(std, noise)?;
    g.add(dist.mu, spread)
}

/// Standard-normal noise vector of length `d`.
pub fn draw_eta<T: Real, R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<T> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Sample `η ~ N(0, I)`.
    Train,
    /// `η = 0`, so `l_o = μ`.
    #[default]
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDistribution<T = f32> {
    pub mu: Vec<T>,
    /// Pre-activation spread; the standard deviation is `softplus(sigma_raw)`.
    pub sigma_raw: Vec<T>,
}

impl<T: Real> ShapeDistribution<T> {
    pub fn effective_std(&self) -> Vec<T> {
        self.sigma_raw.iter().map(|&s| ops::softplus_scalar(s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentShape<T = f32> {
    pub l_o: Vec<T>,
    pub eta: Vec<T>,
}

/// Value-level reparameterized sample.
pub fn sample_latent<T: Real, R: Rng + ?Sized>(
    dist: &ShapeDistribution<T>,
    mode: LatentMode,
    rng: &mut R,
) -> Result<LatentShape<T>> {
    let d = dist.mu.len();
    if dist.sigma_raw.len() != d {
        return Err(Error::dim("mu and sigma_raw lengths differ"));
    }
    match mode {
        LatentMode::Infer => Ok(LatentShape {
            l_o: dist.mu.clone(),
            eta: vec![T::zero(); d],
        }),
        LatentMode::Train => {
            let eta = draw_eta::<T, R>(d, rng);
            let l_o = dist
                .mu
                .iter()
                .zip(dist.effective_std())
                .zip(&eta)
                .map(|((&m, s), &e)| m + s * e)
                .collect();
            Ok(LatentShape { l_o, eta })
        }
    }
}
