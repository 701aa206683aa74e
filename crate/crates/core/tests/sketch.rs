use figura_core::forge::{Dataset, ForgeConfig, LabelMap, PartSilhouette};
use figura_core::nn::{kl_standard_normal, AdamConfig, Tensor};
use figura_core::sketch::{ConditionalSketchVae, SketchConfig, SketchVae};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn corpus(n: usize, seed: u64) -> Dataset {
    Dataset::forge(&ForgeConfig::default(), n, seed, "").unwrap()
}

fn noise(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

#[test]
fn untrained_reconstruction_is_near_uniform() {
    let ds = corpus(4, 900);
    let maps: Vec<&LabelMap> = ds.records.iter().map(|r| &r.label).collect();
    let sils: Vec<&PartSilhouette> = ds.records.iter().map(|r| r.silhouette.as_ref().unwrap()).collect();
    let ln10 = 10f64.ln();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = noise(&mut rng, 4, 64);
        let vae = SketchVae::new(SketchConfig::default(), AdamConfig::default(), seed).unwrap();
        let r = vae.elbo_loss(&maps, &eps).unwrap();
        assert!((r.recon_nll - ln10).abs() <= 0.5, "vae seed {seed}: {}", r.recon_nll);
        let cvae = ConditionalSketchVae::new(SketchConfig::default(), AdamConfig::default(), seed).unwrap();
        let r = cvae.cvae_loss(&maps, &sils, &eps).unwrap();
        assert!((r.recon_nll - ln10).abs() <= 0.5, "cvae seed {seed}: {}", r.recon_nll);
    }
}

#[test]
fn total_is_recon_plus_weighted_kl() {
    let ds = corpus(3, 910);
    let maps: Vec<&LabelMap> = ds.records.iter().map(|r| &r.label).collect();
    let sils: Vec<&PartSilhouette> = ds.records.iter().map(|r| r.silhouette.as_ref().unwrap()).collect();
    let eps = noise(&mut ChaCha8Rng::seed_from_u64(1), 3, 64);
    let vae = SketchVae::new(SketchConfig::default(), AdamConfig::default(), 2).unwrap();
    let r = vae.elbo_loss(&maps, &eps).unwrap();
    // Independent KL: closed form per posterior, averaged, over the pixel count.
    let kl: f64 = vae.encode(&maps).unwrap().iter().map(kl_standard_normal).sum::<f64>() / 3.0 / 4096.0;
    assert!((r.kl - kl).abs() <= 1e-9);
    assert!((r.total - (r.recon_nll + 6.55 * kl)).abs() <= 1e-6);
    let cvae = ConditionalSketchVae::new(SketchConfig::default(), AdamConfig::default(), 2).unwrap();
    let r = cvae.cvae_loss(&maps, &sils, &eps).unwrap();
    let kl: f64 = cvae.encode(&maps, &sils).unwrap().iter().map(kl_standard_normal).sum::<f64>() / 3.0 / 4096.0;
    assert_eq!(r.kl, kl);
    assert!((r.total - (r.recon_nll + 6.55 * kl)).abs() <= 1e-6);
}

#[test]
fn cvae_kl_depends_only_on_the_posterior() {
    let ds = corpus(2, 920);
    let x = &ds.records[0].label;
    let eps = noise(&mut ChaCha8Rng::seed_from_u64(3), 1, 64);
    let cvae = ConditionalSketchVae::new(SketchConfig::default(), AdamConfig::default(), 4).unwrap();
    for rec in &ds.records {
        let y = rec.silhouette.as_ref().unwrap();
        let r = cvae.cvae_loss(&[x], &[y], &eps).unwrap();
        let q = &cvae.encode(&[x], &[y]).unwrap()[0];
        // The decoder-side code never enters the KL: it equals the closed
        // form of the posterior that the encoder produced.
        assert_eq!(r.kl, kl_standard_normal(q) / 4096.0);
    }
}

/// Finite differences through the sampling layer with frozen noise, on the
/// largest-gradient coordinate of 5 randomly chosen parameter tensors.
/// Biases that feed batch norm have an exactly zero gradient; those are
/// checked in absolute terms.
#[test]
fn end_to_end_gradient_spot_check() {
    let ds = corpus(2, 930);
    let maps: Vec<&LabelMap> = ds.records.iter().map(|r| &r.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let eps = noise(&mut rng, 2, 64);
    let mut vae = SketchVae::new(SketchConfig::default(), AdamConfig::default(), 5).unwrap();
    vae.zero_grad();
    vae.loss_and_grad(&maps, &eps).unwrap();
    let names: Vec<String> = vae.params_mut().into_iter().map(|(n, _)| n).collect();
    let h = 1e-3f32;
    let mut checked = 0;
    while checked < 5 {
        let t = rng.random_range(0..names.len());
        let (i, analytic, orig) = {
            let mut ps = vae.params_mut();
            let p = &mut ps[t].1;
            let i = (0..p.grad.len())
                .max_by(|&a, &b| p.grad[a].abs().total_cmp(&p.grad[b].abs()))
                .unwrap();
            (i, p.grad[i] as f64, p.value[i])
        };
        let mut eval_at = |v: f32| {
            vae.params_mut()[t].1.value[i] = v;
            vae.train_mode_total(&maps, &eps).unwrap()
        };
        let step = h * orig.abs().max(1.0);
        let up = eval_at(orig + step);
        let down = eval_at(orig - step);
        eval_at(orig);
        let numeric = (up - down) / ((orig + step) as f64 - (orig - step) as f64);
        if analytic.abs() < 1e-7 {
            assert!(numeric.abs() <= 1e-6, "{}[{i}]: numeric {numeric:e} for a zero gradient", names[t]);
            continue;
        }
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs());
        assert!(rel <= 1e-2, "{}[{i}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}", names[t]);
        checked += 1;
    }
}
