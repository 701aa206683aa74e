use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::{LabelMap, Record, RgbImage};
use crate::nn::{categorical_nll, Adam, AdamConfig, Checkpoint, LayerSpec, Mode, Network, NetworkBuilder, Src, Tensor};
use crate::sketch::argmax_maps;
use crate::train::{fit, FitReport, Metrics, Selection, TrainConfig, Trainable};

const MODEL_TAG: &[u8] = b"segmenter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub resolution: usize,
    pub classes: usize,
    pub base_channels: usize,
    /// Stride-2 stages below the full-resolution stem.
    pub levels: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            resolution: 64,
            classes: 10,
            base_channels: 16,
            levels: 3,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Config("levels and base_channels must be positive".into()));
        }
        if self.resolution % (1 << self.levels) != 0 {
            return Err(Error::Config(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution, self.levels
            )));
        }
        if !(2..=256).contains(&self.classes) {
            return Err(Error::Config(format!("classes {} out of 2..=256", self.classes)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }
}

/// Small U-shaped segmenter: a 3×3 stem at full resolution, stride-2
/// stages down, transposed convs up with mirrored skips, 3×3 class head.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: SegConfig,
    net: Network,
    opt: Adam,
}

fn build(cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Result<Network> {
    let r = cfg.resolution;
    let mut b = NetworkBuilder::new(&[&[3, r, r]]);
    let x = b.then(LayerSpec::conv(3, cfg.channels(0), 3, 1, 1), Src::Input(0))?;
    let mut x = b.then(LayerSpec::lrelu(), x)?;
    let mut skips = vec![x];
    for level in 1..=cfg.levels {
        let cin = b.shape_of(x)[0];
        x = b.then(LayerSpec::conv(cin, cfg.channels(level), 4, 2, 1), x)?;
        x = b.then(LayerSpec::BatchNorm { channels: cfg.channels(level) }, x)?;
        x = b.then(LayerSpec::lrelu(), x)?;
        skips.push(x);
    }
    skips.pop();
    for level in (0..cfg.levels).rev() {
        let cin = b.shape_of(x)[0];
        x = b.then(LayerSpec::conv_transpose(cin, cfg.channels(level), 4, 2, 1), x)?;
        x = b.then(LayerSpec::BatchNorm { channels: cfg.channels(level) }, x)?;
        x = b.then(LayerSpec::lrelu(), x)?;
        let skip = skips.pop().expect("one skip per stage");
        x = b.add(LayerSpec::Concat, &[x, skip])?;
    }
    let cin = b.shape_of(x)[0];
    let out = b.then(LayerSpec::conv(cin, cfg.classes, 3, 1, 1), x)?;
    b.build(out, rng)
}

impl SegModel {
    pub fn new(config: SegConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        adam.validate()?;
        let net = build(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(SegModel {
            config,
            net,
            opt: Adam::new(adam),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    fn image_batch(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let r = self.config.resolution;
        let mut data = Vec::with_capacity(images.len() * 3 * r * r);
        for img in images {
            if (img.width, img.height) != (r, r) {
                return Err(Error::Shape(format!("{}x{} image for a {r} px segmenter", img.width, img.height)));
            }
            data.extend(img.planes());
        }
        Tensor::from_vec(&[images.len(), 3, r, r], data)
    }

    fn labels(&self, data: &[&Record]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(data.len() * self.config.resolution * self.config.resolution);
        for r in data {
            r.label.check_classes(self.config.classes)?;
            out.extend_from_slice(&r.label.data);
        }
        Ok(out)
    }

    /// Per-pixel argmax labels, inference mode.
    pub fn predict(&self, images: &[&RgbImage]) -> Result<Vec<LabelMap>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let logits = self.net.infer(&[&self.image_batch(chunk)?])?;
            logits.ensure_finite("segmenter logits")?;
            out.extend(argmax_maps(&logits));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_bytes("model", MODEL_TAG.to_vec());
        ck.put_bytes("config", serde_json::to_vec(&self.config).expect("config serializes"));
        ck.put_network("net", &self.net);
        ck.put_adam("adam", &self.opt);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get_bytes("model") != Some(MODEL_TAG) {
            return Err(Error::Input("checkpoint does not hold a segmenter".into()));
        }
        let config: SegConfig = serde_json::from_slice(ck.get_bytes("config").unwrap_or_default())
            .map_err(|e| Error::Input(format!("checkpoint config: {e}")))?;
        let mut model = SegModel::new(config, AdamConfig::default(), 0)?;
        model.restore(ck)?;
        Ok(model)
    }
}

impl Trainable for SegModel {
    fn train_batch(&mut self, data: &[&Record], _rng: &mut ChaCha8Rng) -> Result<Metrics> {
        let imgs: Vec<&RgbImage> = data.iter().map(|r| &r.rgb).collect();
        let x = self.image_batch(&imgs)?;
        let truth = self.labels(data)?;
        self.net.zero_grad();
        let logits = self.net.forward(&[&x], Mode::Train)?;
        let (nll, grad) = categorical_nll(&logits, &truth)?;
        if !nll.is_finite() {
            return Err(Error::NonFinite(format!("segmenter loss {nll}")));
        }
        self.net.backward(&grad)?;
        self.opt.step(&mut self.net);
        let pred: Vec<u8> = argmax_maps(&logits).into_iter().flat_map(|m| m.data).collect();
        Ok(Metrics::from([
            ("nll".into(), nll),
            ("accuracy".into(), crate::train::pixel_accuracy(&pred, &truth)),
        ]))
    }

    fn evaluate(&self, data: &[&Record]) -> Result<Metrics> {
        let imgs: Vec<&RgbImage> = data.iter().map(|r| &r.rgb).collect();
        let truth = self.labels(data)?;
        let logits = self.net.infer(&[&self.image_batch(&imgs)?])?;
        let (nll, _) = categorical_nll(&logits, &truth)?;
        let pred: Vec<u8> = argmax_maps(&logits).into_iter().flat_map(|m| m.data).collect();
        Ok(Metrics::from([
            ("nll".into(), nll),
            ("accuracy".into(), crate::train::pixel_accuracy(&pred, &truth)),
        ]))
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
        ck.load_network("net", &mut self.net)?;
        if let Some(opt) = ck.load_adam("adam")? {
            self.opt = opt;
        }
        Ok(())
    }
}

/// Train on `train`, keep the weights of the best validation accuracy.
pub fn train_segmenter(
    train: &[&Record],
    validation: &[&Record],
    config: SegConfig,
    cfg: &TrainConfig,
) -> Result<(SegModel, FitReport)> {
    let mut model = SegModel::new(config, cfg.adam, cfg.seed)?;
    let report = fit(&mut model, train, validation, cfg, 0, |_, _| Ok(()))?;
    if let Some(best) = &report.best {
        model.restore(best)?;
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SegConfig {
        SegConfig {
            resolution: 16,
            classes: 3,
            base_channels: 4,
            levels: 2,
        }
    }

    #[test]
    fn output_matches_input_resolution() {
        let m = SegModel::new(small(), AdamConfig::default(), 0).unwrap();
        assert_eq!(m.network().output_item(), vec![3, 16, 16]);
        let img = RgbImage::filled(16, 16, [0.5; 3]);
        let p = m.predict(&[&img]).unwrap();
        assert_eq!((p[0].width, p[0].height), (16, 16));
    }

    #[test]
    fn learns_color_to_class() {
        // Left half red is class 1, right half blue is class 2.
        let mut img = RgbImage::filled(16, 16, [0.0, 0.0, 1.0]);
        let mut label = LabelMap::filled(16, 16, 2);
        for y in 0..16 {
            for x in 0..8 {
                img.set_pixel(y * 16 + x, [1.0, 0.0, 0.0]);
                label.set(x, y, 1);
            }
        }
        let rec = Record {
            label,
            rgb: img,
            silhouette: None,
        };
        let data = vec![&rec; 4];
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            adam: AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        let (m, report) = train_segmenter(&data, &data, small(), &cfg).unwrap();
        assert!(report.best_value.unwrap() > 0.99, "{:?}", report.best_value);
        assert_eq!(m.predict(&[&rec.rgb]).unwrap()[0], rec.label);
    }

    #[test]
    fn bad_resolution_rejected() {
        let c = SegConfig {
            resolution: 18,
            ..small()
        };
        assert!(c.validate().is_err());
    }
}
