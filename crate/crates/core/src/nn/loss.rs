//! Scalar objectives. Each returns the loss value (accumulated in `f64`)
//! together with its gradient w.r.t. the first argument.

use super::layers::Mode;
use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean per-pixel negative log-likelihood of `labels` under a per-pixel
/// categorical distribution given by `logits` (`[batch, classes, h, w]`).
///
/// `labels` holds `batch * h * w` class indices in item-major, row-major order.
pub fn categorical_nll(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let (b, c, h, w) = logits.dims4();
    let plane = h * w;
    if labels.len() != b * plane {
        return Err(Error::Shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let n = (b * plane) as f64;
    let mut grad = Tensor::zeros_like(logits);
    let mut total = 0.0f64;
    for i in 0..b {
        let x = logits.item(i);
        let g = grad.item_mut(i);
        for p in 0..plane {
            let mut max = f32::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(x[ch * plane + p]);
            }
            let mut sum = 0.0f64;
            for ch in 0..c {
                sum += ((x[ch * plane + p] - max) as f64).exp();
            }
            let log_z = max as f64 + sum.ln();
            let label = labels[i * plane + p] as usize;
            total += log_z - x[label * plane + p] as f64;
            for ch in 0..c {
                let prob = ((x[ch * plane + p] as f64 - log_z).exp()) as f32;
                g[ch * plane + p] = prob / n as f32;
            }
            g[label * plane + p] -= 1.0 / n as f32;
        }
    }
    Ok((total / n, grad))
}

/// Mean binary cross-entropy of `sigmoid(logits)` against a constant target.
pub fn bce_with_logits(logits: &Tensor, target: f32) -> (f64, Tensor) {
    let n = logits.len() as f64;
    let mut grad = Tensor::zeros_like(logits);
    let mut total = 0.0f64;
    for (g, &x) in grad.data_mut().iter_mut().zip(logits.data()) {
        let x64 = x as f64;
        // log(1 + e^x) computed without overflow.
        let softplus = x64.max(0.0) + (-x64.abs()).exp().ln_1p();
        total += softplus - target as f64 * x64;
        *g = ((super::layers::sigmoid(x) - target) as f64 / n) as f32;
    }
    (total / n, grad)
}

/// Mean absolute error and its (sub)gradient w.r.t. `pred`.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("l1: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros_like(pred);
    let mut total = 0.0f64;
    let step = (1.0 / n) as f32;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        total += d.abs() as f64;
        *g = if d > 0.0 {
            step
        } else if d < 0.0 {
            -step
        } else {
            0.0
        };
    }
    Ok((total / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    /// `½ [BCE(D(real), 1) + BCE(D(fake), 0)]`, averaged over patches.
    pub disc_loss: f64,
    /// Non-saturating generator loss `BCE(D(fake), 1)`.
    pub gen_loss: f64,
    /// Fraction of patches classified correctly (real > 0, fake < 0).
    pub disc_accuracy: f64,
}

/// Evaluate patch-discriminator losses. `real`/`fake` are full discriminator
/// inputs (conditioning channels included). Runs in train mode so the
/// numbers match what training optimizes; parameter gradients are untouched.
pub fn gan_losses(disc: &mut Network, real: &Tensor, fake: &Tensor) -> Result<GanLosses> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!("gan: {:?} vs {:?}", real.shape(), fake.shape())));
    }
    let real_logits = disc.forward(&[real], Mode::Train)?;
    let fake_logits = disc.forward(&[fake], Mode::Train)?;
    disc.clear_cache();
    let (real_loss, _) = bce_with_logits(&real_logits, 1.0);
    let (fake_loss, _) = bce_with_logits(&fake_logits, 0.0);
    let (gen_loss, _) = bce_with_logits(&fake_logits, 1.0);
    let correct = real_logits.data().iter().filter(|&&v| v > 0.0).count()
        + fake_logits.data().iter().filter(|&&v| v < 0.0).count();
    Ok(GanLosses {
        disc_loss: 0.5 * (real_loss + fake_loss),
        gen_loss,
        disc_accuracy: correct as f64 / (real_logits.len() + fake_logits.len()) as f64,
    })
}

/// Accumulate discriminator parameter gradients of `disc_loss`; returns it
/// along with the patch accuracy.
pub fn discriminator_backward(disc: &mut Network, real: &Tensor, fake: &Tensor) -> Result<(f64, f64)> {
    let real_logits = disc.forward(&[real], Mode::Train)?;
    let (real_loss, mut g) = bce_with_logits(&real_logits, 1.0);
    g.scale(0.5);
    disc.backward(&g)?;
    let fake_logits = disc.forward(&[fake], Mode::Train)?;
    let (fake_loss, mut g) = bce_with_logits(&fake_logits, 0.0);
    g.scale(0.5);
    disc.backward(&g)?;
    let correct = real_logits.data().iter().filter(|&&v| v > 0.0).count()
        + fake_logits.data().iter().filter(|&&v| v < 0.0).count();
    Ok((
        0.5 * (real_loss + fake_loss),
        correct as f64 / (real_logits.len() + fake_logits.len()) as f64,
    ))
}

/// Non-saturating generator loss and its gradient w.r.t. the discriminator
/// input `fake`. Discriminator parameter gradients are polluted; zero them
/// before the next discriminator update.
pub fn generator_adversarial(disc: &mut Network, fake: &Tensor) -> Result<(f64, Tensor)> {
    let logits = disc.forward(&[fake], Mode::Train)?;
    let (loss, g) = bce_with_logits(&logits, 1.0);
    let mut grads = disc.backward(&g)?;
    Ok((loss, grads.swap_remove(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::zeros(&[2, 10, 3, 3]);
        let labels: Vec<u8> = (0..18).map(|i| (i % 10) as u8).collect();
        let (loss, _) = categorical_nll(&logits, &labels).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-9);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let mut logits = Tensor::zeros(&[1, 4, 2, 2]);
        let labels = [0u8, 1, 2, 3];
        for (p, &l) in labels.iter().enumerate() {
            logits.data_mut()[l as usize * 4 + p] = 20.0;
        }
        let (loss, _) = categorical_nll(&logits, &labels).unwrap();
        assert!(loss <= 1e-8, "{loss}");
    }

    #[test]
    fn random_case_matches_sum_of_logs() {
        let logits = Tensor::from_vec(&[1, 3, 4, 4], (0..48).map(|v| ((v * 7919) % 97) as f32 / 20.0 - 2.0).collect()).unwrap();
        let labels: Vec<u8> = (0..16).map(|v| ((v * 5) % 3) as u8).collect();
        let (loss, _) = categorical_nll(&logits, &labels).unwrap();
        let mut oracle = 0.0f64;
        for p in 0..16 {
            let vals: Vec<f64> = (0..3).map(|c| logits.data()[c * 16 + p] as f64).collect();
            let denom: f64 = vals.iter().map(|v| v.exp()).sum();
            oracle += -(vals[labels[p] as usize].exp() / denom).ln();
        }
        assert!((loss - oracle / 16.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::zeros(&[1, 3, 1, 1]);
        assert!(categorical_nll(&logits, &[3]).is_err());
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let logits = Tensor::zeros(&[2, 1, 3, 3]);
        let (l1, _) = bce_with_logits(&logits, 1.0);
        let (l0, _) = bce_with_logits(&logits, 0.0);
        assert!((0.5 * (l0 + l1) - 2f64.ln()).abs() < 1e-12);
    }
}
