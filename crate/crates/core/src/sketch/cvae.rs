use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    argmax_maps, batch_metrics, check_resolution, down_stack, flat_labels, latent_to_map, means, normal_noise,
    one_hot_batch, posterior_head, up_stack, ElboReport, SketchConfig,
};
use crate::error::{Error, Result};
use crate::forge::{part, LabelMap, PartSilhouette, Record};
use crate::nn::{
    categorical_nll, kl_batch, reparameterize_backward, reparameterize_batch, Adam, AdamConfig, Checkpoint,
    LatentGaussian, LayerSpec, Mode, Network, NetworkBuilder, Param, Src, Tensor,
};
use crate::train::{Metrics, Selection, Trainable};

const MODEL_TAG: &[u8] = b"sketch-cvae";

/// Deterministic silhouette embedding: the condition encoder's bottleneck map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCode {
    /// `[channels, h, w]`.
    pub shape: Vec<usize>,
    pub y: Vec<f32>,
}

/// Silhouette-conditioned sketch VAE.
///
/// `Cond_Φ` is split after its first layer: `cond_head` maps the one-hot
/// silhouette to first-layer features `f₁`, `cond_tail` continues to the
/// bottleneck code `y`. The data encoder concatenates `f₁` to its own
/// first-layer output; the decoder concatenates `y` to the projection of `z`.
#[derive(Debug, Clone)]
pub struct ConditionalSketchVae {
    pub config: SketchConfig,
    cond_head: Network,
    cond_tail: Network,
    encoder: Network,
    decoder: Network,
    opt: Adam,
}

/// Intermediate tensors of one train-mode pass.
struct Pass {
    stats: Tensor,
    logits: Tensor,
}

impl ConditionalSketchVae {
    pub fn new(config: SketchConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        adam.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.resolution;
        let c0 = config.channels(0);

        let mut b = NetworkBuilder::new(&[&[part::COUNT, r, r]]);
        let x = b.then(LayerSpec::conv(part::COUNT, c0, 4, 2, 1), b.input(0))?;
        let f1 = b.then(LayerSpec::lrelu(), x)?;
        let cond_head = b.build(f1, &mut rng)?;

        let mut b = NetworkBuilder::new(&[&[c0, r / 2, r / 2]]);
        let y = down_stack(&mut b, Src::Input(0), &config, 1)?;
        let cond_tail = b.build(y, &mut rng)?;
        let y_shape = cond_tail.output_item().to_vec();

        let mut b = NetworkBuilder::new(&[&[config.classes, r, r], &[c0, r / 2, r / 2]]);
        let x = b.then(LayerSpec::conv(config.classes, c0, 4, 2, 1), b.input(0))?;
        let x = b.then(LayerSpec::lrelu(), x)?;
        let x = b.add(LayerSpec::Concat, &[x, b.input(1)])?;
        let x = down_stack(&mut b, x, &config, 1)?;
        let stats = posterior_head(&mut b, x, config.latent_dim)?;
        let encoder = b.build(stats, &mut rng)?;

        let mut b = NetworkBuilder::new(&[&[config.latent_dim], &y_shape]);
        let x = latent_to_map(&mut b, Src::Input(0), &config)?;
        let x = b.add(LayerSpec::Concat, &[x, b.input(1)])?;
        let logits = up_stack(&mut b, x, &config)?;
        let decoder = b.build(logits, &mut rng)?;

        Ok(ConditionalSketchVae {
            config,
            cond_head,
            cond_tail,
            encoder,
            decoder,
            opt: Adam::new(adam),
        })
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.opt.steps()
    }

    fn silhouettes(&self, sils: &[&PartSilhouette]) -> Result<Tensor> {
        let maps: Vec<&LabelMap> = sils.iter().map(|s| s.map()).collect();
        check_resolution(&maps, &self.config)?;
        one_hot_batch(&maps, part::COUNT)
    }

    fn check_pairs(&self, maps: &[&LabelMap], sils: &[&PartSilhouette]) -> Result<()> {
        if maps.len() != sils.len() {
            return Err(Error::Shape(format!("{} sketches vs {} silhouettes", maps.len(), sils.len())));
        }
        check_resolution(maps, &self.config)
    }

    /// Inference-mode `(f₁, y)` for a silhouette batch.
    fn condition(&self, sils: &[&PartSilhouette]) -> Result<(Tensor, Tensor)> {
        let s = self.silhouettes(sils)?;
        let f1 = self.cond_head.infer(&[&s])?;
        let y = self.cond_tail.infer(&[&f1])?;
        y.ensure_finite("condition code")?;
        Ok((f1, y))
    }

    /// `y = Cond_Φ(Y)` plus the first-layer features (`[1, c, h/2, w/2]`).
    pub fn encode_condition(&self, sil: &PartSilhouette) -> Result<(ConditionCode, Tensor)> {
        let (f1, y) = self.condition(&[sil])?;
        Ok((
            ConditionCode {
                shape: self.cond_tail.output_item().to_vec(),
                y: y.into_vec(),
            },
            f1,
        ))
    }

    /// Spatial size of the data encoder's first-layer output.
    pub fn encoder_first_layer_item(&self) -> Vec<usize> {
        vec![self.config.channels(0), self.config.resolution / 2, self.config.resolution / 2]
    }

    fn stats(&self, maps: &[&LabelMap], f1: &Tensor) -> Result<Tensor> {
        let x = one_hot_batch(maps, self.config.classes)?;
        let stats = self.encoder.infer(&[&x, f1])?;
        stats.ensure_finite("posterior")?;
        Ok(stats)
    }

    /// z-posteriors `q(z | x, Y)`.
    pub fn encode(&self, maps: &[&LabelMap], sils: &[&PartSilhouette]) -> Result<Vec<LatentGaussian>> {
        self.check_pairs(maps, sils)?;
        let (f1, _) = self.condition(sils)?;
        LatentGaussian::from_stats(&self.stats(maps, &f1)?)
    }

    /// Logits of `Dec_θ(y, z)`.
    pub fn decode(&self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        let logits = self.decoder.infer(&[z, y])?;
        logits.ensure_finite("decoder logits")?;
        Ok(logits)
    }

    /// Decode fixed codes `z` (`[n, d]`) under silhouettes `sils` (one per row).
    pub fn decode_maps(&self, z: &Tensor, sils: &[&PartSilhouette]) -> Result<Vec<LabelMap>> {
        let (_, y) = self.condition(sils)?;
        Ok(argmax_maps(&self.decode(z, &y)?))
    }

    fn report(&self, nll: f64, kls: &[f64]) -> ElboReport {
        let kl = kls.iter().sum::<f64>() / kls.len() as f64 / self.config.plane() as f64;
        ElboReport {
            recon_nll: nll,
            kl,
            total: nll + self.config.kl_weight as f64 * kl,
        }
    }

    /// Loss terms in inference mode for fixed noise. The KL involves only
    /// the z-posterior.
    pub fn cvae_loss(&self, maps: &[&LabelMap], sils: &[&PartSilhouette], eps: &Tensor) -> Result<ElboReport> {
        self.check_pairs(maps, sils)?;
        let (f1, y) = self.condition(sils)?;
        let stats = self.stats(maps, &f1)?;
        let z = reparameterize_batch(&stats, eps)?;
        let (nll, _) = categorical_nll(&self.decode(&z, &y)?, &flat_labels(maps))?;
        let (kls, _) = kl_batch(&stats, 0.0);
        Ok(self.report(nll, &kls))
    }

    fn train_forward(&mut self, maps: &[&LabelMap], sils: &[&PartSilhouette], eps: &Tensor) -> Result<Pass> {
        self.check_pairs(maps, sils)?;
        let s = self.silhouettes(sils)?;
        let x = one_hot_batch(maps, self.config.classes)?;
        let f1 = self.cond_head.forward(&[&s], Mode::Train)?;
        let y = self.cond_tail.forward(&[&f1], Mode::Train)?;
        let stats = self.encoder.forward(&[&x, &f1], Mode::Train)?;
        let z = reparameterize_batch(&stats, eps)?;
        let logits = self.decoder.forward(&[&z, &y], Mode::Train)?;
        Ok(Pass { stats, logits })
    }

    /// Train-mode forward and backward; parameter gradients accumulate.
    pub fn loss_and_grad(
        &mut self,
        maps: &[&LabelMap],
        sils: &[&PartSilhouette],
        eps: &Tensor,
    ) -> Result<(ElboReport, Tensor)> {
        let Pass { stats, logits } = self.train_forward(maps, sils, eps)?;
        let (nll, g) = categorical_nll(&logits, &flat_labels(maps))?;
        let mut dec_grads = self.decoder.backward(&g)?;
        let dy = dec_grads.pop().expect("two inputs");
        let dz = dec_grads.pop().expect("two inputs");
        let mut g_stats = reparameterize_backward(&stats, eps, &dz);
        let scale = self.config.kl_weight / (maps.len() * self.config.plane()) as f32;
        let (kls, g_kl) = kl_batch(&stats, scale);
        g_stats.add_assign(&g_kl);
        let mut df1 = self.encoder.backward(&g_stats)?.pop().expect("two inputs");
        df1.add_assign(&self.cond_tail.backward(&dy)?[0]);
        self.cond_head.backward(&df1)?;
        Ok((self.report(nll, &kls), logits))
    }

    /// Train-mode total only (no caches kept); used by gradient spot checks.
    pub fn train_mode_total(&mut self, maps: &[&LabelMap], sils: &[&PartSilhouette], eps: &Tensor) -> Result<f64> {
        let Pass { stats, logits } = self.train_forward(maps, sils, eps)?;
        for net in self.networks_mut() {
            net.clear_cache();
        }
        let (nll, _) = categorical_nll(&logits, &flat_labels(maps))?;
        let (kls, _) = kl_batch(&stats, 0.0);
        Ok(self.report(nll, &kls).total)
    }

    fn networks_mut(&mut self) -> [&mut Network; 4] {
        [
            &mut self.cond_head,
            &mut self.cond_tail,
            &mut self.encoder,
            &mut self.decoder,
        ]
    }

    pub fn zero_grad(&mut self) {
        for net in self.networks_mut() {
            net.zero_grad();
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let names = ["cond_head", "cond_tail", "encoder", "decoder"];
        let mut out = Vec::new();
        for (prefix, net) in names.into_iter().zip(self.networks_mut()) {
            out.extend(net.params_mut().into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)));
        }
        out
    }

    /// `n` sketches for one silhouette; only `z` varies between them.
    pub fn sample_conditioned(&self, sil: &PartSilhouette, n: usize, seed: u64) -> Result<Vec<LabelMap>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let (code, _) = self.encode_condition(sil)?;
        let mut shape = vec![n];
        shape.extend(&code.shape);
        let y = Tensor::from_vec(&shape, code.y.repeat(n))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = normal_noise(&mut rng, n, self.config.latent_dim);
        Ok(argmax_maps(&self.decode(&z, &y)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_bytes("model", MODEL_TAG.to_vec());
        ck.put_bytes("config", serde_json::to_vec(&self.config).expect("config serializes"));
        ck.put_network("cond_head", &self.cond_head);
        ck.put_network("cond_tail", &self.cond_tail);
        ck.put_network("encoder", &self.encoder);
        ck.put_network("decoder", &self.decoder);
        ck.put_adam("adam", &self.opt);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get_bytes("model") != Some(MODEL_TAG) {
            return Err(Error::Input("checkpoint does not hold a conditional sketch VAE".into()));
        }
        let config: SketchConfig = serde_json::from_slice(ck.get_bytes("config").unwrap_or_default())
            .map_err(|e| Error::Input(format!("checkpoint config: {e}")))?;
        let mut model = ConditionalSketchVae::new(config, AdamConfig::default(), 0)?;
        model.restore(ck)?;
        Ok(model)
    }
}

fn pairs<'a>(data: &[&'a Record]) -> Result<(Vec<&'a LabelMap>, Vec<&'a PartSilhouette>)> {
    let sils = data
        .iter()
        .map(|r| {
            r.silhouette
                .as_ref()
                .ok_or_else(|| Error::Input("record without a silhouette".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((data.iter().map(|r| &r.label).collect(), sils))
}

impl Trainable for ConditionalSketchVae {
    fn train_batch(&mut self, data: &[&Record], rng: &mut ChaCha8Rng) -> Result<Metrics> {
        let (maps, sils) = pairs(data)?;
        let eps = normal_noise(rng, maps.len(), self.config.latent_dim);
        self.zero_grad();
        let (r, logits) = self.loss_and_grad(&maps, &sils, &eps)?;
        if !r.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {r:?}")));
        }
        let params = [
            &mut self.cond_head,
            &mut self.cond_tail,
            &mut self.encoder,
            &mut self.decoder,
        ]
        .into_iter()
        .flat_map(|net| net.params_mut())
        .map(|(_, p)| p);
        self.opt.step_params(params);
        Ok(batch_metrics(&r, &logits, &flat_labels(&maps)))
    }

    /// Reconstruction through the posterior mean.
    fn evaluate(&self, data: &[&Record]) -> Result<Metrics> {
        let (maps, sils) = pairs(data)?;
        self.check_pairs(&maps, &sils)?;
        let (f1, y) = self.condition(&sils)?;
        let stats = self.stats(&maps, &f1)?;
        let logits = self.decode(&means(&stats), &y)?;
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
        ck.load_network("cond_head", &mut self.cond_head)?;
        ck.load_network("cond_tail", &mut self.cond_tail)?;
        ck.load_network("encoder", &mut self.encoder)?;
        ck.load_network("decoder", &mut self.decoder)?;
        if let Some(opt) = ck.load_adam("adam")? {
            self.opt = opt;
        }
        Ok(())
    }
}
