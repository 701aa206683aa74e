use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    argmax_maps, batch_metrics, check_resolution, down_stack, flat_labels, latent_to_map, means, normal_noise, one_hot_batch,
    posterior_head, up_stack, ElboReport, SketchConfig,
};
use crate::error::{Error, Result};
use crate::forge::{LabelMap, Record};
use crate::nn::{
    categorical_nll, kl_batch, reparameterize_backward, reparameterize_batch, Adam, AdamConfig, Checkpoint,
    LatentGaussian, Mode, Network, NetworkBuilder, Param, Src, Tensor,
};
use crate::train::{Metrics, Selection, Trainable};

pub(crate) const MODEL_TAG: &[u8] = b"sketch-vae";

/// Unconditional sketch VAE: `Enc_φ(x) → (μ, log σ²)`, `Dec_θ(z) → logits`.
#[derive(Debug, Clone)]
pub struct SketchVae {
    pub config: SketchConfig,
    encoder: Network,
    decoder: Network,
    opt: Adam,
}

impl SketchVae {
    pub fn new(config: SketchConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        adam.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.resolution;

        let mut b = NetworkBuilder::new(&[&[config.classes, r, r]]);
        let x = down_stack(&mut b, Src::Input(0), &config, 0)?;
        let stats = posterior_head(&mut b, x, config.latent_dim)?;
        let encoder = b.build(stats, &mut rng)?;

        let mut b = NetworkBuilder::new(&[&[config.latent_dim]]);
        let x = latent_to_map(&mut b, Src::Input(0), &config)?;
        let logits = up_stack(&mut b, x, &config)?;
        let decoder = b.build(logits, &mut rng)?;

        Ok(SketchVae {
            config,
            encoder,
            decoder,
            opt: Adam::new(adam),
        })
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.opt.steps()
    }

    /// `[batch, 2d]` posterior stats in inference mode.
    fn stats(&self, maps: &[&LabelMap]) -> Result<Tensor> {
        check_resolution(maps, &self.config)?;
        let x = one_hot_batch(maps, self.config.classes)?;
        let stats = self.encoder.infer(&[&x])?;
        stats.ensure_finite("posterior")?;
        Ok(stats)
    }

    pub fn encode(&self, maps: &[&LabelMap]) -> Result<Vec<LatentGaussian>> {
        LatentGaussian::from_stats(&self.stats(maps)?)
    }

    /// Posterior means as a `[batch, d]` tensor.
    pub fn encode_means(&self, maps: &[&LabelMap]) -> Result<Tensor> {
        Ok(means(&self.stats(maps)?))
    }

    /// Decoder logits for `[batch, d]` codes.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let logits = self.decoder.infer(&[z])?;
        logits.ensure_finite("decoder logits")?;
        Ok(logits)
    }

    pub fn decode_maps(&self, z: &Tensor) -> Result<Vec<LabelMap>> {
        Ok(argmax_maps(&self.decode(z)?))
    }

    /// Decode the posterior means.
    pub fn reconstruct(&self, maps: &[&LabelMap]) -> Result<Vec<LabelMap>> {
        self.decode_maps(&self.encode_means(maps)?)
    }

    fn report(&self, nll: f64, kls: &[f64]) -> ElboReport {
        let kl = kls.iter().sum::<f64>() / kls.len() as f64 / self.config.plane() as f64;
        ElboReport {
            recon_nll: nll,
            kl,
            total: nll + self.config.kl_weight as f64 * kl,
        }
    }

    /// Loss terms in inference mode for fixed noise `eps` (`[batch, d]`).
    pub fn elbo_loss(&self, maps: &[&LabelMap], eps: &Tensor) -> Result<ElboReport> {
        let stats = self.stats(maps)?;
        let z = reparameterize_batch(&stats, eps)?;
        let (nll, _) = categorical_nll(&self.decode(&z)?, &flat_labels(maps))?;
        let (kls, _) = kl_batch(&stats, 0.0);
        Ok(self.report(nll, &kls))
    }

    /// Train-mode forward and backward for fixed noise; parameter gradients
    /// accumulate. Returns the loss terms and the batch logits.
    pub fn loss_and_grad(&mut self, maps: &[&LabelMap], eps: &Tensor) -> Result<(ElboReport, Tensor)> {
        check_resolution(maps, &self.config)?;
        let x = one_hot_batch(maps, self.config.classes)?;
        let stats = self.encoder.forward(&[&x], Mode::Train)?;
        let z = reparameterize_batch(&stats, eps)?;
        let logits = self.decoder.forward(&[&z], Mode::Train)?;
        let (nll, g) = categorical_nll(&logits, &flat_labels(maps))?;
        let dz = self.decoder.backward(&g)?.swap_remove(0);
        let mut g_stats = reparameterize_backward(&stats, eps, &dz);
        let scale = self.config.kl_weight / (maps.len() * self.config.plane()) as f32;
        let (kls, g_kl) = kl_batch(&stats, scale);
        g_stats.add_assign(&g_kl);
        self.encoder.backward(&g_stats)?;
        Ok((self.report(nll, &kls), logits))
    }

    /// Train-mode loss only (no caches kept); used by gradient spot checks.
    pub fn train_mode_total(&mut self, maps: &[&LabelMap], eps: &Tensor) -> Result<f64> {
        let x = one_hot_batch(maps, self.config.classes)?;
        let stats = self.encoder.forward(&[&x], Mode::Train)?;
        let z = reparameterize_batch(&stats, eps)?;
        let logits = self.decoder.forward(&[&z], Mode::Train)?;
        self.encoder.clear_cache();
        self.decoder.clear_cache();
        let (nll, _) = categorical_nll(&logits, &flat_labels(maps))?;
        let (kls, _) = kl_batch(&stats, 0.0);
        Ok(self.report(nll, &kls).total)
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
    }

    /// Encoder then decoder parameters, with stable names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = self
            .encoder
            .params_mut()
            .into_iter()
            .map(|(n, p)| (format!("encoder.{n}"), p))
            .collect();
        out.extend(self.decoder.params_mut().into_iter().map(|(n, p)| (format!("decoder.{n}"), p)));
        out
    }

    /// `n` sketches from `z ~ N(0, I)`; the encoder is not used.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<LabelMap>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = normal_noise(&mut rng, n, self.config.latent_dim);
        self.decode_maps(&z)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_bytes("model", MODEL_TAG.to_vec());
        ck.put_bytes("config", serde_json::to_vec(&self.config).expect("config serializes"));
        ck.put_network("encoder", &self.encoder);
        ck.put_network("decoder", &self.decoder);
        ck.put_adam("adam", &self.opt);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get_bytes("model") != Some(MODEL_TAG) {
            return Err(Error::Input("checkpoint does not hold a sketch VAE".into()));
        }
        let config: SketchConfig = serde_json::from_slice(ck.get_bytes("config").unwrap_or_default())
            .map_err(|e| Error::Input(format!("checkpoint config: {e}")))?;
        let mut model = SketchVae::new(config, AdamConfig::default(), 0)?;
        model.restore(ck)?;
        Ok(model)
    }
}

fn labels_of<'a>(data: &[&'a Record]) -> Vec<&'a LabelMap> {
    data.iter().map(|r| &r.label).collect()
}

impl Trainable for SketchVae {
    fn train_batch(&mut self, data: &[&Record], rng: &mut ChaCha8Rng) -> Result<Metrics> {
        let maps = labels_of(data);
        let eps = normal_noise(rng, maps.len(), self.config.latent_dim);
        self.zero_grad();
        let (r, logits) = self.loss_and_grad(&maps, &eps)?;
        if !r.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {r:?}")));
        }
        let params = self
            .encoder
            .params_mut()
            .into_iter()
            .chain(self.decoder.params_mut())
            .map(|(_, p)| p);
        self.opt.step_params(params);
        Ok(batch_metrics(&r, &logits, &flat_labels(&maps)))
    }

    /// Reconstruction through the posterior mean.
    fn evaluate(&self, data: &[&Record]) -> Result<Metrics> {
        let maps = labels_of(data);
        let eps = Tensor::zeros(&[maps.len(), self.config.latent_dim]);
        let stats = self.stats(&maps)?;
        let z = reparameterize_batch(&stats, &eps)?;
        let logits = self.decode(&z)?;
        let truth = flat_labels(&maps);
        let (nll, _) = categorical_nll(&logits, &truth)?;
        let (kls, _) = kl_batch(&stats, 0.0);
        Ok(batch_metrics(&self.report(nll, &kls), &logits, &truth))
    }

    fn selection(&self) -> Selection {
        Selection {
            key: "accuracy",
            higher_is_better: true,
        }
    }

    fn checkpoint(&self) -> Checkpoint {
        self.to_checkpoint()
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_network("encoder", &mut self.encoder)?;
        ck.load_network("decoder", &mut self.decoder)?;
        if let Some(opt) = ck.load_adam("adam")? {
            self.opt = opt;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SketchConfig {
        SketchConfig {
            resolution: 16,
            latent_dim: 8,
            base_channels: 4,
            ..Default::default()
        }
    }

    fn figure16() -> LabelMap {
        let mut m = LabelMap::filled(16, 16, 0);
        for y in 3..13 {
            for x in 6..10 {
                m.set(x, y, if y < 6 { 3 } else { 4 });
            }
        }
        m
    }

    #[test]
    fn encode_has_latent_dim_and_is_deterministic() {
        let m = SketchVae::new(small(), AdamConfig::default(), 1).unwrap();
        let x = figure16();
        let q = m.encode(&[&x, &x]).unwrap();
        assert_eq!(q[0].dim(), 8);
        assert_eq!(q[0], q[1]);
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let m = SketchVae::new(small(), AdamConfig::default(), 1).unwrap();
        let x = LabelMap::filled(32, 32, 0);
        assert!(m.encode(&[&x]).is_err());
    }

    #[test]
    fn zero_kl_weight_total_is_recon() {
        let cfg = SketchConfig {
            kl_weight: 0.0,
            ..small()
        };
        let m = SketchVae::new(cfg, AdamConfig::default(), 2).unwrap();
        let x = LabelMap::filled(16, 16, 3);
        let eps = Tensor::filled(&[1, 8], 0.3);
        let r = m.elbo_loss(&[&x], &eps).unwrap();
        assert_eq!(r.total, r.recon_nll);
        assert!(r.kl > 0.0);
    }

    #[test]
    fn sample_zero_is_empty_and_seeded() {
        let m = SketchVae::new(small(), AdamConfig::default(), 3).unwrap();
        assert!(m.sample(0, 1).unwrap().is_empty());
        assert_eq!(m.sample(3, 9).unwrap(), m.sample(3, 9).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_preserves_decoding() {
        let mut m = SketchVae::new(small(), AdamConfig::default(), 4).unwrap();
        let x = figure16();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = Record {
            label: x.clone(),
            rgb: crate::forge::RgbImage::filled(16, 16, [0.0; 3]),
            silhouette: None,
        };
        m.train_batch(&[&rec, &rec], &mut rng).unwrap();
        let back = SketchVae::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.sample(2, 5).unwrap(), m.sample(2, 5).unwrap());
        assert_eq!(back.optimizer_steps(), 1);
    }
}
