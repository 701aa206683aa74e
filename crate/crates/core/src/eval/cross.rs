use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{reconstruction_metrics, SegModel};
use crate::error::{Error, Result};
use crate::forge::{LabelMap, Record, RgbImage};

/// Where a segmenter's training or test data came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    FullSynthetic,
    SyntheticTexture,
    Real,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::FullSynthetic, Source::SyntheticTexture, Source::Real];

    pub fn label(self) -> &'static str {
        match self {
            Source::FullSynthetic => "Synth. full",
            Source::SyntheticTexture => "Synth. text.",
            Source::Real => "Real",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCell {
    /// Mean per-class IoU.
    pub iou: f64,
    pub accuracy: f64,
}

/// `cells[train][test]`, both indexed in [`Source::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub sources: [Source; 3],
    pub cells: [[CrossCell; 3]; 3],
}

/// Score a segmenter against labeled images.
pub fn score(model: &SegModel, data: &[&Record]) -> Result<CrossCell> {
    let imgs: Vec<&RgbImage> = data.iter().map(|r| &r.rgb).collect();
    let preds = model.predict(&imgs)?;
    let pred_refs: Vec<&LabelMap> = preds.iter().collect();
    let gts: Vec<&LabelMap> = data.iter().map(|r| &r.label).collect();
    let m = reconstruction_metrics(&pred_refs, &gts, model.config.classes)?;
    Ok(CrossCell {
        iou: m.iou,
        accuracy: m.pixel_accuracy,
    })
}

/// Every model against every held-out test set.
pub fn cross_evaluate(
    models: &BTreeMap<Source, SegModel>,
    tests: &BTreeMap<Source, Vec<&Record>>,
) -> Result<CrossMatrix> {
    let mut cells = [[CrossCell { iou: 0.0, accuracy: 0.0 }; 3]; 3];
    for (i, s) in Source::ALL.iter().enumerate() {
        let model = models
            .get(s)
            .ok_or_else(|| Error::Input(format!("no model trained on {}", s.label())))?;
        for (j, t) in Source::ALL.iter().enumerate() {
            let data = tests
                .get(t)
                .filter(|d| !d.is_empty())
                .ok_or_else(|| Error::Input(format!("no test data for {}", t.label())))?;
            cells[i][j] = score(model, data)?;
        }
    }
    Ok(CrossMatrix {
        sources: Source::ALL,
        cells,
    })
}

impl CrossMatrix {
    pub fn cell(&self, train: Source, test: Source) -> CrossCell {
        let idx = |s| Source::ALL.iter().position(|&x| x == s).expect("known source");
        self.cells[idx(train)][idx(test)]
    }

    /// True when every row's diagonal accuracy is at least each other entry.
    pub fn diagonal_dominant(&self) -> bool {
        (0..3).all(|i| (0..3).all(|j| self.cells[i][i].accuracy >= self.cells[i][j].accuracy))
    }

    /// Rows are training sources, columns test sources, each cell `IoU / acc`.
    pub fn table(&self) -> String {
        let mut s = format!("{:<14}", "train \\ test");
        for t in &self.sources {
            write!(s, "  {:>15}", t.label()).expect("string write");
        }
        s.push('\n');
        for (i, r) in self.sources.iter().enumerate() {
            write!(s, "{:<14}", r.label()).expect("string write");
            for c in &self.cells[i] {
                write!(s, "  {:>7.3} / {:>5.3}", c.iou, c.accuracy).expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominance_checks_rows() {
        let c = |a| CrossCell { iou: 0.0, accuracy: a };
        let mut m = CrossMatrix {
            sources: Source::ALL,
            cells: [[c(0.9), c(0.5), c(0.5)], [c(0.5), c(0.9), c(0.5)], [c(0.5), c(0.5), c(0.9)]],
        };
        assert!(m.diagonal_dominant());
        m.cells[2][0] = c(0.95);
        assert!(!m.diagonal_dominant());
        assert_eq!(m.cell(Source::Real, Source::FullSynthetic).accuracy, 0.95);
        assert_eq!(m.table().lines().count(), 4);
    }

    #[test]
    fn missing_source_named() {
        let err = cross_evaluate(&BTreeMap::new(), &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("Synth. full"));
    }
}
