//! Central finite-difference verification of analytic gradients.
//!
//! Numeric derivatives only ever call the forward pass, so they stay
//! independent of the backward code they check.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::Mode;
use super::network::Network;
use super::tensor::Tensor;
use crate::error::Result;

/// Absolute floor on the denominator so that exactly-zero gradients (e.g.
/// a bias feeding batch norm) are compared in absolute terms.
pub const NORM_FLOOR: f64 = 1e-2;

/// `‖a − n‖ / max(‖a‖ + ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(NORM_FLOOR)
}

/// Central difference of `f` at `x[i]` with step `eps · max(|x[i]|, 1)`.
pub fn central_difference(x: &mut [f32], i: usize, eps: f32, f: &mut dyn FnMut(&[f32]) -> f64) -> f64 {
    let orig = x[i];
    let h = eps * orig.abs().max(1.0);
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    // Use the step actually representable in f32.
    let span = ((orig + h) as f64) - ((orig - h) as f64);
    (up - down) / span
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub coords: usize,
    /// `(‖a‖, ‖n‖, ‖a − n‖)` over the probed coordinates.
    pub norms: (f64, f64, f64),
}

impl TensorCheck {
    fn new(name: String, analytic: &[f64], numeric: &[f64]) -> Self {
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        TensorCheck {
            name,
            rel_err: relative_error(analytic, numeric),
            coords: analytic.len(),
            norms: (
                norm(&mut analytic.iter().copied()),
                norm(&mut numeric.iter().copied()),
                norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n)),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    /// Relative error of the concatenation of every probed coordinate.
    /// Coordinates whose true derivative vanishes (a bias feeding batch
    /// norm) carry pure f32 rounding noise, so this is the pass criterion.
    pub fn overall_rel_err(&self) -> f64 {
        let (mut a, mut n, mut d) = (0.0, 0.0, 0.0);
        for t in &self.tensors {
            a += t.norms.0 * t.norms.0;
            n += t.norms.1 * t.norms.1;
            d += t.norms.2 * t.norms.2;
        }
        d.sqrt() / (a.sqrt() + n.sqrt()).max(NORM_FLOOR)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn projected(out: &Tensor, proj: &[f32]) -> f64 {
    out.data().iter().zip(proj).map(|(&o, &p)| o as f64 * p as f64).sum()
}

/// Check every parameter and every input gradient of `net` for the scalar
/// `L = Σ output ⊙ R` with a fixed random projection `R`. At most
/// `max_coords` randomly chosen coordinates are probed per tensor.
pub fn check_network<R: Rng + ?Sized>(
    net: &mut Network,
    inputs: &[Tensor],
    mode: Mode,
    eps: f32,
    max_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = net.forward(&refs, mode)?;
    let proj: Vec<f32> = (0..out.len()).map(|_| StandardNormal.sample(rng)).collect();
    let proj_t = Tensor::from_vec(out.shape(), proj.clone())?;
    net.zero_grad();
    let input_grads = net.backward(&proj_t)?;

    let mut report = GradCheckReport { tensors: Vec::new() };

    let param_names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    for (pi, name) in param_names.iter().enumerate() {
        let (len, analytic_all) = {
            let params = net.params();
            (params[pi].1.value.len(), params[pi].1.grad.clone())
        };
        let picks = pick(len, max_coords, rng);
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            analytic.push(analytic_all[i] as f64);
            let mut values = net.params()[pi].1.value.clone();
            let mut eval = |v: &[f32]| -> f64 {
                net.params_mut()[pi].1.value.copy_from_slice(v);
                let y = net.forward(&refs, mode).expect("forward during gradcheck");
                projected(&y, &proj)
            };
            numeric.push(central_difference(&mut values, i, eps, &mut eval));
            net.params_mut()[pi].1.value.copy_from_slice(&values);
        }
        report.tensors.push(TensorCheck::new(name.clone(), &analytic, &numeric));
    }

    for (k, grad) in input_grads.iter().enumerate() {
        let picks = pick(inputs[k].len(), max_coords, rng);
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        let mut work: Vec<Tensor> = inputs.to_vec();
        for &i in &picks {
            analytic.push(grad.data()[i] as f64);
            let mut values = work[k].data().to_vec();
            let mut eval = |v: &[f32]| -> f64 {
                work[k].data_mut().copy_from_slice(v);
                let r: Vec<&Tensor> = work.iter().collect();
                let y = net.forward(&r, mode).expect("forward during gradcheck");
                projected(&y, &proj)
            };
            numeric.push(central_difference(&mut values, i, eps, &mut eval));
            work[k].data_mut().copy_from_slice(&values);
        }
        report.tensors.push(TensorCheck::new(format!("input{k}"), &analytic, &numeric));
    }
    net.clear_cache();
    Ok(report)
}

/// Check a scalar function of one vector against its analytic gradient.
pub fn check_scalar_fn(
    x: &[f32],
    analytic: &[f32],
    eps: f32,
    f: &mut dyn FnMut(&[f32]) -> f64,
) -> f64 {
    let mut work = x.to_vec();
    let numeric: Vec<f64> = (0..x.len()).map(|i| central_difference(&mut work, i, eps, f)).collect();
    let a: Vec<f64> = analytic.iter().map(|&v| v as f64).collect();
    relative_error(&a, &numeric)
}

fn pick<R: Rng + ?Sized>(len: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Outcome of one randomized family in [`gradient_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero so kinks (lrelu, |x|) are never crossed.
fn off_zero_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = uniform_tensor(shape, rng);
    t.data_mut().iter_mut().for_each(|v| {
        let mag = 0.05 + 1.5 * v.abs();
        *v = if *v < 0.0 { -mag } else { mag };
    });
    t
}

fn single_layer<R: Rng + ?Sized>(spec: super::LayerSpec, item: &[usize], rng: &mut R) -> Result<Network> {
    let mut b = super::NetworkBuilder::new(&[item]);
    let x = b.input(0);
    let y = b.then(spec, x)?;
    b.build(y, rng)
}

/// Randomized finite-difference checks over every layer kind and every
/// loss, `trials` instances each. Step size is `1e-3 · max(|x|, 1)`.
pub fn gradient_suite<R: Rng + ?Sized>(trials: usize, rng: &mut R) -> Result<Vec<SuiteEntry>> {
    use super::gaussian::{kl_batch, reparameterize_backward, reparameterize_batch};
    use super::layers::LayerSpec;
    use super::loss::{bce_with_logits, categorical_nll, generator_adversarial, l1_loss};

    const EPS: f32 = 1e-3;
    const COORDS: usize = 12;
    let mut out = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut(&mut R) -> Result<f64>| -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(f(rng)?);
        }
        out.push(SuiteEntry {
            name,
            trials,
            max_rel_err: worst,
        });
        Ok(())
    };

    run("conv", &mut |rng| {
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..5);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..=k / 2);
        let (h, w) = (rng.random_range(k.max(3)..8), rng.random_range(k.max(3)..8));
        let batch = rng.random_range(1..4);
        let mut net = single_layer(LayerSpec::conv(ci, co, k, stride, pad), &[ci, h, w], rng)?;
        randomize_params(&mut net, rng);
        let x = uniform_tensor(&[batch, ci, h, w], rng);
        Ok(check_network(&mut net, &[x], Mode::Train, EPS, COORDS, rng)?.overall_rel_err())
    })?;
    run("conv_transpose", &mut |rng| {
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(2..5);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..k / 2 + 1).min(k - 1);
        let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
        let batch = rng.random_range(1..4);
        let mut net = single_layer(LayerSpec::conv_transpose(ci, co, k, stride, pad), &[ci, h, w], rng)?;
        randomize_params(&mut net, rng);
        let x = uniform_tensor(&[batch, ci, h, w], rng);
        Ok(check_network(&mut net, &[x], Mode::Train, EPS, COORDS, rng)?.overall_rel_err())
    })?;
    run("batch_norm_train", &mut |rng| {
        let c = rng.random_range(1..4);
        let item: Vec<usize> = if rng.random_bool(0.5) {
            vec![c, rng.random_range(2..5), rng.random_range(2..5)]
        } else {
            vec![c]
        };
        let mut shape = vec![rng.random_range(2..5)];
        shape.extend_from_slice(&item);
        let mut net = single_layer(LayerSpec::BatchNorm { channels: c }, &item, rng)?;
        randomize_params(&mut net, rng);
        let x = uniform_tensor(&shape, rng);
        Ok(check_network(&mut net, &[x], Mode::Train, EPS, COORDS, rng)?.overall_rel_err())
    })?;
    run("batch_norm_eval", &mut |rng| {
        let c = rng.random_range(1..4);
        let item = vec![c, rng.random_range(2..5), rng.random_range(2..5)];
        let mut shape = vec![rng.random_range(1..4)];
        shape.extend_from_slice(&item);
        let mut net = single_layer(LayerSpec::BatchNorm { channels: c }, &item, rng)?;
        randomize_params(&mut net, rng);
        // Populate running statistics.
        net.forward(&[&uniform_tensor(&shape, rng)], Mode::Train)?;
        let x = uniform_tensor(&shape, rng);
        Ok(check_network(&mut net, &[x], Mode::Eval, EPS, COORDS, rng)?.overall_rel_err())
    })?;
    run("leaky_relu", &mut |rng| {
        let shape = [rng.random_range(1..4), rng.random_range(1..4), 3, 3];
        let mut net = single_layer(LayerSpec::lrelu(), &shape[1..], rng)?;
        let x = off_zero_tensor(&shape, rng);
        Ok(check_network(&mut net, &[x], Mode::Train, EPS, COORDS, rng)?.overall_rel_err())
    })?;
    run("sigmoid", &mut |rng| {
        let shape = [rng.random_range(1..4), rng.random_range(1..4), 3, 2];
        let mut net = single_layer(LayerSpec::Sigmoid, &shape[1..], rng)?;
        let x = uniform_tensor(&shape, rng);
        Ok(check_network(&mut net, &[x], Mode::Train, EPS, COORDS, rng)?.overall_rel_err())
    })?;
    run("softmax_channels", &mut |rng| {
        let shape = [rng.random_range(1..3), rng.random_range(2..6), 2, 3];
        let mut net = single_layer(LayerSpec::SoftmaxChannels, &shape[1..], rng)?;
        let x = uniform_tensor(&shape, rng);
        Ok(check_network(&mut net, &[x], Mode::Train, EPS, COORDS, rng)?.overall_rel_err())
    })?;
    run("dense", &mut |rng| {
        let (fi, fo, batch) = (rng.random_range(1..9), rng.random_range(1..6), rng.random_range(1..4));
        let mut net = single_layer(
            LayerSpec::Dense {
                in_features: fi,
                out_features: fo,
            },
            &[fi],
            rng,
        )?;
        randomize_params(&mut net, rng);
        let x = uniform_tensor(&[batch, fi], rng);
        Ok(check_network(&mut net, &[x], Mode::Train, EPS, COORDS, rng)?.overall_rel_err())
    })?;
    run("concat_reshape", &mut |rng| {
        let (ca, cb, h, w) = (rng.random_range(1..4), rng.random_range(1..4), 2, 3);
        let batch = rng.random_range(1..3);
        let mut b = super::NetworkBuilder::new(&[&[ca, h, w], &[cb, h, w]]);
        let (x0, x1) = (b.input(0), b.input(1));
        let cat = b.add(LayerSpec::Concat, &[x0, x1])?;
        let flat = b.then(
            LayerSpec::Reshape {
                shape: vec![(ca + cb) * h * w],
            },
            cat,
        )?;
        let mut net = b.build(flat, rng)?;
        let inputs = [uniform_tensor(&[batch, ca, h, w], rng), uniform_tensor(&[batch, cb, h, w], rng)];
        Ok(check_network(&mut net, &inputs, Mode::Train, EPS, COORDS, rng)?.overall_rel_err())
    })?;
    run("skip_network", &mut |rng| {
        let batch = rng.random_range(2..4);
        let mut b = super::NetworkBuilder::new(&[&[2, 8, 8]]);
        let x = b.input(0);
        let d1 = b.then(LayerSpec::conv(2, 3, 4, 2, 1), x)?;
        let n1 = b.then(LayerSpec::BatchNorm { channels: 3 }, d1)?;
        let a1 = b.then(LayerSpec::Sigmoid, n1)?;
        let u1 = b.then(LayerSpec::conv_transpose(3, 2, 4, 2, 1), a1)?;
        let cat = b.add(LayerSpec::Concat, &[u1, x])?;
        let o = b.then(LayerSpec::conv(4, 2, 3, 1, 1), cat)?;
        let s = b.then(LayerSpec::SoftmaxChannels, o)?;
        let mut net = b.build(s, rng)?;
        randomize_params(&mut net, rng);
        let input = uniform_tensor(&[batch, 2, 8, 8], rng);
        Ok(check_network(&mut net, &[input], Mode::Train, EPS, COORDS, rng)?.overall_rel_err())
    })?;

    run("categorical_nll", &mut |rng| {
        let (b, c, h, w) = (rng.random_range(1..3), rng.random_range(2..6), 3, 3);
        let logits = uniform_tensor(&[b, c, h, w], rng);
        let labels: Vec<u8> = (0..b * h * w).map(|_| rng.random_range(0..c) as u8).collect();
        let (_, grad) = categorical_nll(&logits, &labels)?;
        let shape = logits.shape().to_vec();
        Ok(check_scalar_fn(logits.data(), grad.data(), EPS, &mut |v| {
            categorical_nll(&Tensor::from_vec(&shape, v.to_vec()).expect("shape"), &labels)
                .expect("nll")
                .0
        }))
    })?;
    run("kl_standard_normal", &mut |rng| {
        let (b, d) = (rng.random_range(1..4), rng.random_range(1..6));
        let stats = uniform_tensor(&[b, 2 * d], rng);
        let (_, grad) = kl_batch(&stats, 1.0);
        Ok(check_scalar_fn(stats.data(), grad.data(), EPS, &mut |v| {
            let t = Tensor::from_vec(&[b, 2 * d], v.to_vec()).expect("shape");
            kl_batch(&t, 1.0).0.iter().sum()
        }))
    })?;
    run("reparameterize", &mut |rng| {
        let (b, d) = (rng.random_range(1..4), rng.random_range(1..6));
        let stats = uniform_tensor(&[b, 2 * d], rng);
        let eps = uniform_tensor(&[b, d], rng);
        let proj = uniform_tensor(&[b, d], rng);
        let grad = reparameterize_backward(&stats, &eps, &proj);
        Ok(check_scalar_fn(stats.data(), grad.data(), EPS, &mut |v| {
            let t = Tensor::from_vec(&[b, 2 * d], v.to_vec()).expect("shape");
            let z = reparameterize_batch(&t, &eps).expect("reparam");
            z.data().iter().zip(proj.data()).map(|(&a, &p)| a as f64 * p as f64).sum()
        }))
    })?;
    run("bce_with_logits", &mut |rng| {
        let x = uniform_tensor(&[rng.random_range(1..4), 1, 3, 3], rng);
        let target = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let (_, grad) = bce_with_logits(&x, target);
        let shape = x.shape().to_vec();
        Ok(check_scalar_fn(x.data(), grad.data(), EPS, &mut |v| {
            bce_with_logits(&Tensor::from_vec(&shape, v.to_vec()).expect("shape"), target).0
        }))
    })?;
    run("l1", &mut |rng| {
        let target = uniform_tensor(&[2, 3, 2, 2], rng);
        let mut pred = off_zero_tensor(&[2, 3, 2, 2], rng);
        pred.add_assign(&target);
        let (_, grad) = l1_loss(&pred, &target)?;
        Ok(check_scalar_fn(pred.data(), grad.data(), EPS, &mut |v| {
            l1_loss(&Tensor::from_vec(&[2, 3, 2, 2], v.to_vec()).expect("shape"), &target)
                .expect("l1")
                .0
        }))
    })?;
    run("gan_generator", &mut |rng| {
        let batch = rng.random_range(2..4);
        let mut b = super::NetworkBuilder::new(&[&[2, 8, 8]]);
        let x = b.input(0);
        // No batch norm here: it couples every logit to every input, so each
        // probe would carry rounding noise from the whole batch. Its own
        // family above covers it.
        let c1 = b.then(LayerSpec::conv(2, 3, 4, 2, 1), x)?;
        let a1 = b.then(LayerSpec::Sigmoid, c1)?;
        let c2 = b.then(LayerSpec::conv(3, 1, 3, 1, 1), a1)?;
        let mut disc = b.build(c2, rng)?;
        randomize_params(&mut disc, rng);
        let fake = uniform_tensor(&[batch, 2, 8, 8], rng);
        let (_, grad) = generator_adversarial(&mut disc, &fake)?;
        Ok(check_scalar_fn(fake.data(), grad.data(), EPS, &mut |v| {
            let t = Tensor::from_vec(&[batch, 2, 8, 8], v.to_vec()).expect("shape");
            let logits = disc.forward(&[&t], Mode::Train).expect("disc");
            bce_with_logits(&logits, 1.0).0
        }))
    })?;
    Ok(out)
}

/// Re-draw parameters at unit scale so gradient magnitudes are O(1).
fn randomize_params<R: Rng + ?Sized>(net: &mut Network, rng: &mut R) {
    for (_, p) in net.params_mut() {
        p.value.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}
