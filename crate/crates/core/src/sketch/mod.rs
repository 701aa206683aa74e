//! Sketch models: a VAE over label maps and its silhouette-conditioned
//! variant. Both share the strided-conv encoder and fractionally strided
//! decoder stacks built here.

mod cvae;
mod vae;

pub use cvae::{ConditionCode, ConditionalSketchVae};
pub use vae::SketchVae;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::LabelMap;
use crate::nn::{LayerSpec, NetworkBuilder, Src, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SketchConfig {
    pub resolution: usize,
    pub classes: usize,
    pub latent_dim: usize,
    /// Multiplies the per-pixel KL (KL of one sample divided by H·W).
    pub kl_weight: f32,
    /// Channels of the first conv; deeper layers double up to 4×.
    pub base_channels: usize,
}

impl Default for SketchConfig {
    fn default() -> Self {
        SketchConfig {
            resolution: 64,
            classes: 10,
            latent_dim: 64,
            kl_weight: 6.55,
            base_channels: 16,
        }
    }
}

/// Spatial side of the bottleneck.
pub(crate) const BOTTLENECK: usize = 4;

impl SketchConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 2 * BOTTLENECK || !r.is_power_of_two() {
            return Err(Error::Config(format!("resolution {r} must be a power of two ≥ 8")));
        }
        if !(2..=256).contains(&self.classes) {
            return Err(Error::Config(format!("classes {} out of 2..=256", self.classes)));
        }
        if self.latent_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config("latent_dim and base_channels must be positive".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!("kl_weight {} must be finite and ≥ 0", self.kl_weight)));
        }
        Ok(())
    }

    /// Number of stride-2 stages from the input down to the bottleneck.
    pub(crate) fn levels(&self) -> usize {
        (self.resolution / BOTTLENECK).trailing_zeros() as usize
    }

    pub(crate) fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }

    pub(crate) fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels() - 1)
    }

    pub(crate) fn plane(&self) -> usize {
        self.resolution * self.resolution
    }
}

/// Loss terms of one pass, in minimization form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    /// Mean per-pixel negative log-likelihood.
    pub recon_nll: f64,
    /// Mean per-sample KL divided by the pixel count.
    pub kl: f64,
    pub total: f64,
}

/// Stride-2 conv stack from `level` 0 onward: conv → (BN) → LReLU per
/// stage, no BN on stage 0. Starts at `from_level` so callers can splice
/// extra features in after stage 0.
pub(crate) fn down_stack(b: &mut NetworkBuilder, mut x: Src, cfg: &SketchConfig, from_level: usize) -> Result<Src> {
    for level in from_level..cfg.levels() {
        let cin = b.shape_of(x)[0];
        x = b.then(LayerSpec::conv(cin, cfg.channels(level), 4, 2, 1), x)?;
        if level > 0 {
            x = b.then(LayerSpec::BatchNorm { channels: cfg.channels(level) }, x)?;
        }
        x = b.then(LayerSpec::lrelu(), x)?;
    }
    Ok(x)
}

/// Flatten the bottleneck and project to `[μ | log σ²]`.
pub(crate) fn posterior_head(b: &mut NetworkBuilder, x: Src, latent: usize) -> Result<Src> {
    let n: usize = b.shape_of(x).iter().product();
    let flat = b.then(LayerSpec::Reshape { shape: vec![n] }, x)?;
    b.then(
        LayerSpec::Dense {
            in_features: n,
            out_features: 2 * latent,
        },
        flat,
    )
}

/// Project `z` to a bottleneck map: dense → reshape → BN → LReLU.
pub(crate) fn latent_to_map(b: &mut NetworkBuilder, z: Src, cfg: &SketchConfig) -> Result<Src> {
    let ch = cfg.bottleneck_channels();
    let n = ch * BOTTLENECK * BOTTLENECK;
    let x = b.then(
        LayerSpec::Dense {
            in_features: cfg.latent_dim,
            out_features: n,
        },
        z,
    )?;
    let x = b.then(
        LayerSpec::Reshape {
            shape: vec![ch, BOTTLENECK, BOTTLENECK],
        },
        x,
    )?;
    let x = b.then(LayerSpec::BatchNorm { channels: ch }, x)?;
    b.then(LayerSpec::lrelu(), x)
}

/// Fractionally strided stack from the bottleneck back to full resolution,
/// ending in `classes` logits.
pub(crate) fn up_stack(b: &mut NetworkBuilder, mut x: Src, cfg: &SketchConfig) -> Result<Src> {
    for level in (1..cfg.levels()).rev() {
        let cin = b.shape_of(x)[0];
        let cout = cfg.channels(level - 1);
        x = b.then(LayerSpec::conv_transpose(cin, cout, 4, 2, 1), x)?;
        x = b.then(LayerSpec::BatchNorm { channels: cout }, x)?;
        x = b.then(LayerSpec::lrelu(), x)?;
    }
    let cin = b.shape_of(x)[0];
    b.then(LayerSpec::conv_transpose(cin, cfg.classes, 4, 2, 1), x)
}

/// Stack one-hot encodings into `[batch, classes, h, w]`.
pub fn one_hot_batch(maps: &[&LabelMap], classes: usize) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(maps.len() * classes * w * h);
    for m in maps {
        if (m.width, m.height) != (w, h) {
            return Err(Error::Shape(format!("{}x{} map in a {w}x{h} batch", m.width, m.height)));
        }
        m.check_classes(classes)?;
        data.extend(m.one_hot(classes));
    }
    Tensor::from_vec(&[maps.len(), classes, h, w], data)
}

pub(crate) fn check_resolution(maps: &[&LabelMap], cfg: &SketchConfig) -> Result<()> {
    match maps.iter().find(|m| (m.width, m.height) != (cfg.resolution, cfg.resolution)) {
        Some(m) => Err(Error::Shape(format!(
            "{}x{} map for a {} px model",
            m.width, m.height, cfg.resolution
        ))),
        None => Ok(()),
    }
}

/// Labels of a batch, item-major, as `categorical_nll` expects.
pub(crate) fn flat_labels(maps: &[&LabelMap]) -> Vec<u8> {
    maps.iter().flat_map(|m| m.data.iter().copied()).collect()
}

/// Per-pixel argmax of `[batch, classes, h, w]` logits.
pub fn argmax_maps(logits: &Tensor) -> Vec<LabelMap> {
    let (b, _, h, w) = logits.dims4();
    (0..b).map(|i| LabelMap::argmax(w, h, logits.item(i))).collect()
}

/// Per-batch scalars shared by both sketch models.
pub(crate) fn batch_metrics(r: &ElboReport, logits: &Tensor, truth: &[u8]) -> crate::train::Metrics {
    let pred: Vec<u8> = argmax_maps(logits).into_iter().flat_map(|m| m.data).collect();
    crate::train::Metrics::from([
        ("recon_nll".into(), r.recon_nll),
        ("kl".into(), r.kl),
        ("total".into(), r.total),
        ("accuracy".into(), crate::train::pixel_accuracy(&pred, truth)),
    ])
}

/// Posterior means from `[batch, 2d]` stats.
pub(crate) fn means(stats: &Tensor) -> Tensor {
    let (b, two_d, _, _) = stats.dims4();
    let d = two_d / 2;
    let mut out = Tensor::zeros(&[b, d]);
    for i in 0..b {
        out.item_mut(i).copy_from_slice(&stats.item(i)[..d]);
    }
    out
}

/// Standard-normal `[n, d]` noise.
pub(crate) fn normal_noise<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(&[n, d], data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_levels_reach_four_by_four() {
        let c = SketchConfig::default();
        assert_eq!(c.levels(), 4);
        assert_eq!((0..4).map(|l| c.channels(l)).collect::<Vec<_>>(), [16, 32, 64, 64]);
    }

    #[test]
    fn bad_configs_rejected() {
        for c in [
            SketchConfig {
                resolution: 48,
                ..Default::default()
            },
            SketchConfig {
                classes: 1,
                ..Default::default()
            },
            SketchConfig {
                kl_weight: -1.0,
                ..Default::default()
            },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::from_vec(&[1, 3, 1, 2], vec![0.5, 0.1, 0.5, 0.9, 0.2, 0.9]).unwrap();
        let m = &argmax_maps(&t)[0];
        assert_eq!(m.data, [0, 1]);
    }
}
