//! Diagonal Gaussian posteriors, the closed-form KL against N(0, I), and
//! the reparameterized sampling layer.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Diagonal Gaussian `N(mean, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f32>,
    pub log_var: Vec<f32>,
}

/// A point in latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z: Vec<f32>,
}

impl LatentGaussian {
    pub fn new(mean: Vec<f32>, log_var: Vec<f32>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::Shape(format!("mean {} vs log_var {}", mean.len(), log_var.len())));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent gaussian parameters".into()));
        }
        Ok(LatentGaussian { mean, log_var })
    }

    /// Build from standard deviations; every sigma must be positive.
    pub fn from_sigma(mean: Vec<f32>, sigma: &[f32]) -> Result<Self> {
        if let Some(s) = sigma.iter().find(|&&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Input(format!("sigma must be positive, got {s}")));
        }
        let log_var = sigma.iter().map(|s| 2.0 * s.ln()).collect();
        LatentGaussian::new(mean, log_var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sigma(&self) -> Vec<f32> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// Split a `[batch, 2d]` encoder output into one posterior per item.
    pub fn from_stats(stats: &Tensor) -> Result<Vec<LatentGaussian>> {
        let (b, two_d, _, _) = stats.dims4();
        if two_d % 2 != 0 {
            return Err(Error::Shape(format!("odd posterior width {two_d}")));
        }
        let d = two_d / 2;
        (0..b)
            .map(|i| {
                let item = stats.item(i);
                LatentGaussian::new(item[..d].to_vec(), item[d..].to_vec())
            })
            .collect()
    }
}

/// `½ Σ_d (μ_d² + σ_d² − ln σ_d² − 1)`.
pub fn kl_standard_normal(q: &LatentGaussian) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_var)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - lv - 1.0)
        })
        .sum()
}

/// Gradient of [`kl_standard_normal`] w.r.t. `(mean, log_var)`.
pub fn kl_standard_normal_grad(q: &LatentGaussian) -> (Vec<f32>, Vec<f32>) {
    let dm = q.mean.clone();
    let dlv = q.log_var.iter().map(|&lv| 0.5 * (lv.exp() - 1.0)).collect();
    (dm, dlv)
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(q: &LatentGaussian, eps: &[f32]) -> Result<LatentCode> {
    if eps.len() != q.dim() {
        return Err(Error::Shape(format!("noise dim {} vs latent dim {}", eps.len(), q.dim())));
    }
    let z = q
        .mean
        .iter()
        .zip(&q.log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(LatentCode { z })
}

/// Batched sampling layer over encoder output `stats = [μ | log σ²]`
/// (`[batch, 2d]`) and noise `eps` (`[batch, d]`).
pub fn reparameterize_batch(stats: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let (b, two_d, _, _) = stats.dims4();
    let d = two_d / 2;
    if eps.shape() != [b, d] {
        return Err(Error::Shape(format!("noise {:?} vs stats {:?}", eps.shape(), stats.shape())));
    }
    let mut z = Tensor::zeros(&[b, d]);
    for i in 0..b {
        let s = stats.item(i);
        let e = eps.item(i);
        for (k, zk) in z.item_mut(i).iter_mut().enumerate() {
            *zk = s[k] + (0.5 * s[d + k]).exp() * e[k];
        }
    }
    Ok(z)
}

/// Backward of [`reparameterize_batch`]: `∂z/∂μ = I`, `∂z/∂log σ² = ½ σ ε`.
pub fn reparameterize_backward(stats: &Tensor, eps: &Tensor, dz: &Tensor) -> Tensor {
    let (b, two_d, _, _) = stats.dims4();
    let d = two_d / 2;
    let mut g = Tensor::zeros_like(stats);
    for i in 0..b {
        let s = stats.item(i);
        let e = eps.item(i);
        let dzi = dz.item(i);
        let gi = g.item_mut(i);
        for k in 0..d {
            gi[k] = dzi[k];
            gi[d + k] = dzi[k] * 0.5 * (0.5 * s[d + k]).exp() * e[k];
        }
    }
    g
}

/// Per-item KL of a `[batch, 2d]` posterior batch and the gradient of
/// `weight · Σ_items KL` w.r.t. the stats.
pub fn kl_batch(stats: &Tensor, weight: f32) -> (Vec<f64>, Tensor) {
    let (b, two_d, _, _) = stats.dims4();
    let d = two_d / 2;
    let mut per_item = Vec::with_capacity(b);
    let mut g = Tensor::zeros_like(stats);
    for i in 0..b {
        let s = stats.item(i);
        let q = LatentGaussian {
            mean: s[..d].to_vec(),
            log_var: s[d..].to_vec(),
        };
        per_item.push(kl_standard_normal(&q));
        let (dm, dlv) = kl_standard_normal_grad(&q);
        let gi = g.item_mut(i);
        for k in 0..d {
            gi[k] = weight * dm[k];
            gi[d + k] = weight * dlv[k];
        }
    }
    (per_item, g)
}
