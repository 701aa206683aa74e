//! Run configuration: a TOML document, `--set section.key=value`
//! overrides, then dedicated flags. Unknown keys are rejected.

use std::path::Path;

use figura_core::eval::SegConfig;
use figura_core::forge::ForgeConfig;
use figura_core::portray::PortrayConfig;
use figura_core::sketch::SketchConfig;
use figura_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Samples written by `forge`.
    pub count: usize,
    /// Seed of the first forged sample.
    pub seed: u64,
    /// Share of a dataset held out (from its end) for validation or testing.
    pub holdout_fraction: f64,
    pub forge: ForgeConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            count: 2000,
            seed: 0,
            holdout_fraction: 0.1,
            forge: ForgeConfig::default(),
        }
    }
}

fn segmenter_training() -> TrainConfig {
    TrainConfig {
        epochs: 25,
        patience: Some(6),
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub vae: TrainConfig,
    pub cvae: TrainConfig,
    pub portray: TrainConfig,
    pub segmenter: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            vae: TrainConfig::default(),
            cvae: TrainConfig::default(),
            portray: TrainConfig {
                epochs: 10,
                ..Default::default()
            },
            segmenter: segmenter_training(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { n: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkSection {
    /// Principal component index, 0 = most variance.
    pub component: usize,
    /// Half-width of the walk in standard deviations.
    pub extent: f64,
    /// Odd, so the PCA mean is the middle frame.
    pub steps: usize,
    /// Corpus rows used; 0 means the whole corpus.
    pub corpus_limit: usize,
}

impl Default for WalkSection {
    fn default() -> Self {
        WalkSection {
            component: 0,
            extent: 1.0,
            steps: 9,
            corpus_limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Seed for synthetic dataset generation.
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub sketch: SketchConfig,
    pub portray: PortrayConfig,
    pub segmenter: SegConfig,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub walk: WalkSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            sketch: SketchConfig::default(),
            portray: PortrayConfig::default(),
            segmenter: SegConfig::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            walk: WalkSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parse `value` as TOML if it is a valid TOML value, else as a string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Apply `section.key=value` to a TOML table, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(usage(format!("bad override key `{path}`")));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| usage(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Load `path` (or defaults), then apply overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| figura_core::Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: figura_core::Error| usage(e.to_string());
        self.data.forge.validate().map_err(bad)?;
        self.sketch.validate().map_err(bad)?;
        self.portray.validate().map_err(bad)?;
        self.segmenter.validate().map_err(bad)?;
        for t in [&self.train.vae, &self.train.cvae, &self.train.portray, &self.train.segmenter] {
            t.validate().map_err(bad)?;
        }
        let r = self.data.forge.resolution;
        for (name, v) in [
            ("sketch", self.sketch.resolution),
            ("portray", self.portray.resolution),
            ("segmenter", self.segmenter.resolution),
        ] {
            if v != r {
                return Err(usage(format!("{name}.resolution {v} differs from data.forge.resolution {r}")));
            }
        }
        let c = self.data.forge.palette.len();
        if self.sketch.classes != c || self.segmenter.classes != c || self.portray.palette != self.data.forge.palette {
            return Err(usage(format!("class counts and palettes must match the {c}-class data palette")));
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(usage("data.holdout_fraction must be in [0, 1)"));
        }
        if self.walk.steps % 2 == 0 {
            return Err(usage(format!(
                "walk.steps {} must be odd so the mean is the middle frame",
                self.walk.steps
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, first 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Records held out from the end of a dataset of `n`.
    pub fn holdout(&self, n: usize) -> usize {
        ((n as f64 * self.data.holdout_fraction).round() as usize).min(n.saturating_sub(1))
    }
}
