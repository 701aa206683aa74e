//! Sketch-to-image translation: a U-shaped generator with mirrored skip
//! connections, trained with an L1 term and a patch discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::{median_color_map, ClassPalette, ColorMap, LabelMap, Record, RgbImage};
use crate::nn::loss::{discriminator_backward, generator_adversarial};
use crate::nn::{l1_loss, Adam, AdamConfig, Checkpoint, LayerSpec, Mode, Network, NetworkBuilder, Src, Tensor};
use crate::train::{Metrics, Selection, Trainable};

const MODEL_TAG: &[u8] = b"portray";

/// How a sketch is presented to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Palette-rendered RGB sketch.
    ColorMap,
    /// Per-pixel class probabilities.
    ProbabilityMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortrayConfig {
    pub resolution: usize,
    pub palette: ClassPalette,
    pub input_mode: InputMode,
    /// Append a per-segment color map to the generator input.
    pub color_conditioning: bool,
    /// Mirrored encoder → decoder concatenations; off for the ablation.
    pub skip_connections: bool,
    pub base_channels: usize,
    pub disc_channels: usize,
    pub lambda_l1: f32,
    /// Zero disables the discriminator entirely.
    pub lambda_adv: f32,
}

impl Default for PortrayConfig {
    fn default() -> Self {
        PortrayConfig {
            resolution: 64,
            palette: ClassPalette::default(),
            input_mode: InputMode::ColorMap,
            color_conditioning: false,
            skip_connections: true,
            base_channels: 16,
            disc_channels: 16,
            lambda_l1: 100.0,
            lambda_adv: 1.0,
        }
    }
}

/// Generator bottleneck side.
const BOTTLENECK: usize = 4;

impl PortrayConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 2 * BOTTLENECK || !r.is_power_of_two() {
            return Err(Error::Config(format!("resolution {r} must be a power of two ≥ 8")));
        }
        if r < 16 {
            return Err(Error::Config(format!("resolution {r} is below the 16 px discriminator patch")));
        }
        self.palette.validate()?;
        if self.base_channels == 0 || self.disc_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let ok = |v: f32| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_l1) || !ok(self.lambda_adv) || self.lambda_l1 + self.lambda_adv == 0.0 {
            return Err(Error::Config(format!(
                "loss weights l1 {} adv {} must be ≥ 0 and not both zero",
                self.lambda_l1, self.lambda_adv
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.palette.len()
    }

    /// Channels of the sketch part of the input.
    pub fn sketch_channels(&self) -> usize {
        match self.input_mode {
            InputMode::ColorMap => 3,
            InputMode::ProbabilityMap => self.classes(),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.sketch_channels() + if self.color_conditioning { 3 } else { 0 }
    }

    fn levels(&self) -> usize {
        (self.resolution / BOTTLENECK).trailing_zeros() as usize
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }
}

/// Per-pixel class probabilities, channel-major `[classes, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub data: Vec<f32>,
}

impl ProbabilityMap {
    /// Every pixel must be a distribution (entries ≥ 0, sum 1 within 1e-5).
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        let plane = width * height;
        if data.len() != plane * classes {
            return Err(Error::Shape(format!(
                "{} values for {classes}x{height}x{width}",
                data.len()
            )));
        }
        for p in 0..plane {
            let mut sum = 0.0f64;
            for c in 0..classes {
                let v = data[c * plane + p];
                if !(v >= 0.0) {
                    return Err(Error::Input(format!("probability {v} at pixel {p}")));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Input(format!("pixel {p} sums to {sum}")));
            }
        }
        Ok(ProbabilityMap {
            width,
            height,
            classes,
            data,
        })
    }

    pub fn one_hot(m: &LabelMap, classes: usize) -> Self {
        ProbabilityMap {
            width: m.width,
            height: m.height,
            classes,
            data: m.one_hot(classes),
        }
    }
}

/// A sketch to be portrayed.
#[derive(Debug, Clone, Copy)]
pub enum Sketch<'a> {
    /// Hard labels; rendered or one-hot encoded to suit the model's mode.
    Labels(&'a LabelMap),
    /// Soft labels; probability-map models only.
    Probabilities(&'a ProbabilityMap),
}

impl Sketch<'_> {
    fn dims(&self) -> (usize, usize) {
        match self {
            Sketch::Labels(m) => (m.width, m.height),
            Sketch::Probabilities(p) => (p.width, p.height),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PortrayModel {
    pub config: PortrayConfig,
    generator: Network,
    discriminator: Network,
    g_opt: Adam,
    d_opt: Adam,
}

/// U-shaped generator. Encoder stage `i` halves the resolution; decoder
/// stage `i` doubles it and, with skips on, also reads encoder stage `i - 1`.
fn build_generator(cfg: &PortrayConfig, rng: &mut ChaCha8Rng) -> Result<Network> {
    let r = cfg.resolution;
    let mut b = NetworkBuilder::new(&[&[cfg.input_channels(), r, r]]);
    let mut x = Src::Input(0);
    let mut skips = Vec::new();
    for level in 0..cfg.levels() {
        let cin = b.shape_of(x)[0];
        x = b.then(LayerSpec::conv(cin, cfg.channels(level), 4, 2, 1), x)?;
        if level > 0 {
            x = b.then(LayerSpec::BatchNorm { channels: cfg.channels(level) }, x)?;
        }
        x = b.then(LayerSpec::lrelu(), x)?;
        skips.push(x);
    }
    skips.pop();
    for level in (1..cfg.levels()).rev() {
        let cin = b.shape_of(x)[0];
        let cout = cfg.channels(level - 1);
        x = b.then(LayerSpec::conv_transpose(cin, cout, 4, 2, 1), x)?;
        x = b.then(LayerSpec::BatchNorm { channels: cout }, x)?;
        x = b.then(LayerSpec::lrelu(), x)?;
        let skip = skips.pop().expect("one skip per decoder stage");
        if cfg.skip_connections {
            x = b.add(LayerSpec::Concat, &[x, skip])?;
        }
    }
    let cin = b.shape_of(x)[0];
    x = b.then(LayerSpec::conv_transpose(cin, 3, 4, 2, 1), x)?;
    let out = b.then(LayerSpec::Sigmoid, x)?;
    b.build(out, rng)
}

/// Patch discriminator over `[sketch input | rgb]`. Layers k2s2, k4s2, k3s1
/// give each output logit a 16×16 receptive field.
fn build_discriminator(cfg: &PortrayConfig, rng: &mut ChaCha8Rng) -> Result<Network> {
    let r = cfg.resolution;
    let d = cfg.disc_channels;
    let mut b = NetworkBuilder::new(&[&[cfg.input_channels() + 3, r, r]]);
    let x = b.then(LayerSpec::conv(cfg.input_channels() + 3, d, 2, 2, 0), Src::Input(0))?;
    let x = b.then(LayerSpec::lrelu(), x)?;
    let x = b.then(LayerSpec::conv(d, 2 * d, 4, 2, 1), x)?;
    let x = b.then(LayerSpec::BatchNorm { channels: 2 * d }, x)?;
    let x = b.then(LayerSpec::lrelu(), x)?;
    let out = b.then(LayerSpec::conv(2 * d, 1, 3, 1, 1), x)?;
    b.build(out, rng)
}

fn adv_enabled(cfg: &PortrayConfig) -> bool {
    cfg.lambda_adv > 0.0
}

impl PortrayModel {
    pub fn new(config: PortrayConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        adam.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = build_generator(&config, &mut rng)?;
        let discriminator = build_discriminator(&config, &mut rng)?;
        Ok(PortrayModel {
            config,
            generator,
            discriminator,
            g_opt: Adam::new(adam),
            d_opt: Adam::new(adam),
        })
    }

    pub fn generator(&self) -> &Network {
        &self.generator
    }

    pub fn discriminator(&self) -> &Network {
        &self.discriminator
    }

    /// Sketch channels for one item, channel-major.
    fn sketch_planes(&self, s: Sketch) -> Result<Vec<f32>> {
        let r = self.config.resolution;
        if s.dims() != (r, r) {
            let (w, h) = s.dims();
            return Err(Error::Shape(format!("{w}x{h} sketch for a {r} px model")));
        }
        match (self.config.input_mode, s) {
            (InputMode::ColorMap, Sketch::Labels(m)) => {
                m.check_classes(self.config.classes())?;
                Ok(self.config.palette.render(m).planes())
            }
            (InputMode::ProbabilityMap, Sketch::Labels(m)) => {
                m.check_classes(self.config.classes())?;
                Ok(m.one_hot(self.config.classes()))
            }
            (InputMode::ProbabilityMap, Sketch::Probabilities(p)) if p.classes == self.config.classes() => {
                Ok(p.data.clone())
            }
            (InputMode::ProbabilityMap, Sketch::Probabilities(p)) => Err(Error::Input(format!(
                "{}-class probability map for a {}-class model",
                p.classes,
                self.config.classes()
            ))),
            (InputMode::ColorMap, Sketch::Probabilities(_)) => Err(Error::Input(
                "probability map given to a color-map model".into(),
            )),
        }
    }

    /// Generator input batch.
    pub fn input_batch(&self, sketches: &[Sketch], colors: Option<&[&ColorMap]>) -> Result<Tensor> {
        let r = self.config.resolution;
        match (self.config.color_conditioning, colors) {
            (true, None) => return Err(Error::Input("color-conditioned model needs a color map".into())),
            (false, Some(_)) => return Err(Error::Input("model was trained without color conditioning".into())),
            (true, Some(c)) if c.len() != sketches.len() => {
                return Err(Error::Shape(format!("{} sketches vs {} color maps", sketches.len(), c.len())));
            }
            _ => {}
        }
        let mut data = Vec::with_capacity(sketches.len() * self.config.input_channels() * r * r);
        for (i, s) in sketches.iter().enumerate() {
            data.extend(self.sketch_planes(*s)?);
            if let Some(c) = colors {
                let img = c[i].image();
                if (img.width, img.height) != (r, r) {
                    return Err(Error::Shape(format!("{}x{} color map", img.width, img.height)));
                }
                data.extend(img.planes());
            }
        }
        Tensor::from_vec(&[sketches.len(), self.config.input_channels(), r, r], data)
    }

    fn to_images(&self, out: &Tensor) -> Vec<RgbImage> {
        let (b, _, h, w) = out.dims4();
        (0..b).map(|i| RgbImage::from_planes(w, h, out.item(i))).collect()
    }

    /// Inference-mode RGB for a batch of inputs.
    pub fn colorize_batch(&self, sketches: &[Sketch], colors: Option<&[&ColorMap]>) -> Result<Vec<RgbImage>> {
        if sketches.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.input_batch(sketches, colors)?;
        let out = self.generator.infer(&[&x])?;
        out.ensure_finite("generator output")?;
        Ok(self.to_images(&out))
    }

    pub fn colorize(&self, sketch: Sketch, colors: Option<&ColorMap>) -> Result<RgbImage> {
        let colors = colors.map(|c| vec![c]);
        Ok(self.colorize_batch(&[sketch], colors.as_deref())?.swap_remove(0))
    }

    /// Portray `labels` with a requested color per class; every foreground
    /// class present needs an entry.
    pub fn colorize_with_colors(&self, labels: &LabelMap, colors: &[Option<[f32; 3]>]) -> Result<RgbImage> {
        for c in labels.histogram(self.config.classes()).iter().enumerate().skip(1).filter(|(_, &n)| n > 0) {
            if colors.get(c.0).copied().flatten().is_none() {
                return Err(Error::Input(format!(
                    "no color requested for class {}",
                    self.config.palette.names[c.0]
                )));
            }
        }
        let cm = ColorMap::from_class_colors(labels, colors);
        self.colorize(Sketch::Labels(labels), Some(&cm))
    }

    /// Training inputs: hard labels plus, when conditioning, the per-segment
    /// median colors of the target image.
    fn record_inputs(&self, data: &[&Record]) -> Result<(Tensor, Tensor)> {
        let sketches: Vec<Sketch> = data.iter().map(|r| Sketch::Labels(&r.label)).collect();
        let x = if self.config.color_conditioning {
            let cms = data
                .iter()
                .map(|r| median_color_map(&r.rgb, &r.label))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ColorMap> = cms.iter().collect();
            self.input_batch(&sketches, Some(&refs))?
        } else {
            self.input_batch(&sketches, None)?
        };
        let r = self.config.resolution;
        let mut target = Vec::with_capacity(data.len() * 3 * r * r);
        for rec in data {
            if (rec.rgb.width, rec.rgb.height) != (r, r) {
                return Err(Error::Shape(format!("{}x{} image", rec.rgb.width, rec.rgb.height)));
            }
            target.extend(rec.rgb.planes());
        }
        Ok((x, Tensor::from_vec(&[data.len(), 3, r, r], target)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_bytes("model", MODEL_TAG.to_vec());
        ck.put_bytes("config", serde_json::to_vec(&self.config).expect("config serializes"));
        ck.put_network("generator", &self.generator);
        ck.put_network("discriminator", &self.discriminator);
        ck.put_adam("g_adam", &self.g_opt);
        ck.put_adam("d_adam", &self.d_opt);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get_bytes("model") != Some(MODEL_TAG) {
            return Err(Error::Input("checkpoint does not hold a portray model".into()));
        }
        let config: PortrayConfig = serde_json::from_slice(ck.get_bytes("config").unwrap_or_default())
            .map_err(|e| Error::Input(format!("checkpoint config: {e}")))?;
        let mut model = PortrayModel::new(config, AdamConfig::default(), 0)?;
        model.restore(ck)?;
        Ok(model)
    }
}

impl Trainable for PortrayModel {
    /// One discriminator update (when enabled) on the current fakes, then
    /// one generator update on `λ_L1 · L1 + λ_adv · adversarial`.
    fn train_batch(&mut self, data: &[&Record], _rng: &mut ChaCha8Rng) -> Result<Metrics> {
        let (x, target) = self.record_inputs(data)?;
        self.generator.zero_grad();
        let fake = self.generator.forward(&[&x], Mode::Train)?;
        fake.ensure_finite("generator output")?;
        let (l1, g_l1) = l1_loss(&fake, &target)?;
        let mut grad = g_l1;
        grad.scale(self.config.lambda_l1);
        let mut m = Metrics::from([("l1".to_string(), l1)]);
        let mut total = self.config.lambda_l1 as f64 * l1;
        if adv_enabled(&self.config) {
            let real_in = Tensor::concat_channels(&x, &target)?;
            let fake_in = Tensor::concat_channels(&x, &fake)?;
            self.discriminator.zero_grad();
            let (d_loss, d_acc) = discriminator_backward(&mut self.discriminator, &real_in, &fake_in)?;
            self.d_opt.step(&mut self.discriminator);
            let (adv, g_in) = generator_adversarial(&mut self.discriminator, &fake_in)?;
            let (_, mut g_adv) = g_in.split_channels(self.config.input_channels())?;
            g_adv.scale(self.config.lambda_adv);
            grad.add_assign(&g_adv);
            total += self.config.lambda_adv as f64 * adv;
            m.insert("disc_loss".into(), d_loss);
            m.insert("disc_accuracy".into(), d_acc);
            m.insert("gen_adv".into(), adv);
        }
        m.insert("gen_total".into(), total);
        self.generator.backward(&grad)?;
        self.g_opt.step(&mut self.generator);
        Ok(m)
    }

    fn evaluate(&self, data: &[&Record]) -> Result<Metrics> {
        let (x, target) = self.record_inputs(data)?;
        let fake = self.generator.infer(&[&x])?;
        fake.ensure_finite("generator output")?;
        let (l1, _) = l1_loss(&fake, &target)?;
        let mut m = Metrics::from([("l1".to_string(), l1)]);
        if adv_enabled(&self.config) {
            let real = self.discriminator.infer(&[&Tensor::concat_channels(&x, &target)?])?;
            let fake = self.discriminator.infer(&[&Tensor::concat_channels(&x, &fake)?])?;
            let correct = real.data().iter().filter(|&&v| v > 0.0).count()
                + fake.data().iter().filter(|&&v| v < 0.0).count();
            m.insert(
                "disc_accuracy".into(),
                correct as f64 / (real.len() + fake.len()) as f64,
            );
        }
        Ok(m)
    }

    fn selection(&self) -> Selection {
        Selection {
            key: "l1",
            higher_is_better: false,
        }
    }

    fn checkpoint(&self) -> Checkpoint {
        self.to_checkpoint()
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_network("generator", &mut self.generator)?;
        ck.load_network("discriminator", &mut self.discriminator)?;
        if let Some(o) = ck.load_adam("g_adam")? {
            self.g_opt = o;
        }
        if let Some(o) = ck.load_adam("d_adam")? {
            self.d_opt = o;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn small(mode: InputMode, colors: bool) -> PortrayConfig {
        PortrayConfig {
            resolution: 32,
            input_mode: mode,
            color_conditioning: colors,
            base_channels: 4,
            disc_channels: 4,
            ..Default::default()
        }
    }

    fn block() -> LabelMap {
        let mut m = LabelMap::filled(32, 32, 0);
        for y in 8..24 {
            for x in 12..20 {
                m.set(x, y, 4);
            }
        }
        m
    }

    /// Input pixels that move one interior patch logit, found by perturbing
    /// a row and a column through it in inference mode.
    #[test]
    fn discriminator_patches_see_sixteen_pixels() {
        let cfg = PortrayConfig {
            resolution: 64,
            ..small(InputMode::ColorMap, false)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = build_discriminator(&cfg, &mut rng).unwrap();
        // Positive weights so no contribution cancels by accident.
        for (_, p) in d.params_mut() {
            p.value.iter_mut().for_each(|v| *v = v.abs() + 0.01);
        }
        let base = Tensor::filled(&[1, 6, 64, 64], 0.5);
        let out = d.infer(&[&base]).unwrap();
        assert_eq!(out.shape(), [1, 1, 16, 16]);
        let probe = 8 * 16 + 8;
        let moves = |x: usize, y: usize| {
            let mut t = base.clone();
            t.data_mut()[y * 64 + x] = 3.0;
            d.infer(&[&t]).unwrap().data()[probe] != out.data()[probe]
        };
        let xs: Vec<usize> = (0..64).filter(|&x| moves(x, 33)).collect();
        let ys: Vec<usize> = (0..64).filter(|&y| moves(33, y)).collect();
        assert_eq!(xs.len(), 16, "{xs:?}");
        assert_eq!(ys.len(), 16, "{ys:?}");
        assert_eq!(xs.last().unwrap() - xs[0], 15);
    }

    #[test]
    fn skips_change_the_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let with = build_generator(&small(InputMode::ColorMap, false), &mut rng).unwrap();
        let without = build_generator(
            &PortrayConfig {
                skip_connections: false,
                ..small(InputMode::ColorMap, false)
            },
            &mut rng,
        )
        .unwrap();
        let concats = |n: &Network| n.specs().filter(|s| matches!(s, LayerSpec::Concat)).count();
        assert_eq!(concats(&with), 2);
        assert_eq!(concats(&without), 0);
        assert!(with.param_count() > without.param_count());
    }

    #[test]
    fn output_in_unit_range_and_deterministic() {
        let m = PortrayModel::new(small(InputMode::ColorMap, false), AdamConfig::default(), 1).unwrap();
        let s = block();
        let a = m.colorize(Sketch::Labels(&s), None).unwrap();
        assert!(a.in_unit_range());
        assert_eq!(a, m.colorize(Sketch::Labels(&s), None).unwrap());
    }

    #[test]
    fn mode_mismatches_are_errors() {
        let s = block();
        let p = ProbabilityMap::one_hot(&s, 10);
        let cm = PortrayModel::new(small(InputMode::ColorMap, false), AdamConfig::default(), 1).unwrap();
        assert!(cm.colorize(Sketch::Probabilities(&p), None).is_err());
        let colors = ColorMap(RgbImage::filled(32, 32, [0.5; 3]));
        assert!(cm.colorize(Sketch::Labels(&s), Some(&colors)).is_err());
        let pm = PortrayModel::new(small(InputMode::ProbabilityMap, false), AdamConfig::default(), 1).unwrap();
        // Hard labels and their one-hot probability map are the same input.
        assert_eq!(
            pm.colorize(Sketch::Labels(&s), None).unwrap(),
            pm.colorize(Sketch::Probabilities(&p), None).unwrap()
        );
    }

    #[test]
    fn probability_maps_must_normalize() {
        assert!(ProbabilityMap::new(1, 1, 2, vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityMap::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(ProbabilityMap::new(1, 1, 2, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn missing_requested_color_is_an_error() {
        let m = PortrayModel::new(small(InputMode::ColorMap, true), AdamConfig::default(), 1).unwrap();
        let s = block();
        let mut colors = vec![None; 10];
        assert!(m.colorize_with_colors(&s, &colors).is_err());
        colors[4] = Some([1.0, 0.0, 0.0]);
        let img = m.colorize_with_colors(&s, &colors).unwrap();
        assert_eq!(img, m.colorize_with_colors(&s, &colors).unwrap());
    }

    #[test]
    fn training_step_is_finite_and_checkpoints() {
        let mut m = PortrayModel::new(small(InputMode::ColorMap, true), AdamConfig::default(), 2).unwrap();
        let rec = Record {
            label: block(),
            rgb: RgbImage::filled(32, 32, [0.2, 0.4, 0.6]),
            silhouette: None,
        };
        let metrics = m.train_batch(&[&rec, &rec], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for key in ["l1", "disc_loss", "disc_accuracy", "gen_adv", "gen_total"] {
            assert!(metrics[key].is_finite(), "{key}");
        }
        let back = PortrayModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        let colors = ColorMap(RgbImage::filled(32, 32, [0.1; 3]));
        assert_eq!(
            back.colorize(Sketch::Labels(&rec.label), Some(&colors)).unwrap(),
            m.colorize(Sketch::Labels(&rec.label), Some(&colors)).unwrap()
        );
    }
}
