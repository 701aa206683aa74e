//! Procedural paired data: label maps, part silhouettes, textured images and
//! per-segment color maps of articulated 2-D figures, plus mask hygiene.

mod background;
mod dataset;
mod figure;
mod morph;
mod raster;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use background::{composite_background, median_color_map};
pub use dataset::{
    load_dataset, read_indexed_png, read_rgb_png, write_dataset, write_indexed_png, write_rgb_png, Dataset, DatasetKind,
    Manifest, Record,
};
pub use figure::{generate_sample, render_part_silhouette, ForgedSample, FigurePose};
pub use morph::{close_binary, clean_mask, inject_holes, mask_iou, Mask};

/// Class indices of the default palette.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const HAIR: u8 = 2;
    pub const FACE: u8 = 3;
    pub const TOP: u8 = 4;
    pub const BOTTOM: u8 = 5;
    pub const LEFT_SHOE: u8 = 6;
    pub const RIGHT_SHOE: u8 = 7;
    pub const HAT: u8 = 8;
    pub const BAG: u8 = 9;
}

/// Silhouette part indices. "Left" is the figure's own left, which appears
/// on the image's right since figures face the viewer.
pub mod part {
    pub const BACKGROUND: u8 = 0;
    pub const HEAD: u8 = 1;
    pub const TORSO: u8 = 2;
    pub const LEFT_ARM: u8 = 3;
    pub const RIGHT_ARM: u8 = 4;
    pub const LEFT_LEG: u8 = 5;
    pub const RIGHT_LEG: u8 = 6;
    pub const COUNT: usize = 7;
    pub const NAMES: [&str; COUNT] = ["background", "head", "torso", "left-arm", "right-arm", "left-leg", "right-leg"];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPalette {
    pub names: Vec<String>,
    pub colors: Vec<[u8; 3]>,
}

impl Default for ClassPalette {
    fn default() -> Self {
        let entries: [(&str, [u8; 3]); 10] = [
            ("background", [0, 0, 0]),
            ("skin", [255, 200, 160]),
            ("hair", [110, 60, 20]),
            ("face", [255, 130, 200]),
            ("top", [220, 30, 40]),
            ("bottom", [40, 60, 220]),
            ("left-shoe", [250, 240, 40]),
            ("right-shoe", [40, 220, 90]),
            ("hat", [150, 40, 230]),
            ("bag", [40, 230, 230]),
        ];
        ClassPalette {
            names: entries.iter().map(|(n, _)| n.to_string()).collect(),
            colors: entries.iter().map(|(_, c)| *c).collect(),
        }
    }
}

impl ClassPalette {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.colors.len() {
            return Err(Error::Config(format!(
                "palette has {} names but {} colors",
                self.names.len(),
                self.colors.len()
            )));
        }
        if self.names.first().map(String::as_str) != Some("background") {
            return Err(Error::Config("palette index 0 must be background".into()));
        }
        if self.len() > 256 {
            return Err(Error::Config("palette exceeds 256 classes".into()));
        }
        for i in 0..self.len() {
            for j in 0..i {
                if self.colors[i] == self.colors[j] {
                    return Err(Error::Config(format!(
                        "classes {} and {} share color {:?}",
                        self.names[j], self.names[i], self.colors[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn color(&self, class: u8) -> [f32; 3] {
        let c = self.colors[class as usize];
        [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]
    }

    /// Render a label map with the palette's exact colors.
    pub fn render(&self, m: &LabelMap) -> RgbImage {
        let mut data = Vec::with_capacity(m.data.len() * 3);
        for &l in &m.data {
            data.extend_from_slice(&self.color(l));
        }
        RgbImage {
            width: m.width,
            height: m.height,
            data,
        }
    }
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        LabelMap {
            width,
            height,
            data: vec![class; width * height],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!("{} labels for {width}x{height}", data.len())));
        }
        Ok(LabelMap { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Fails if any index is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= classes) {
            Some(v) => Err(Error::Input(format!("label {v} out of range for {classes} classes"))),
            None => Ok(()),
        }
    }

    pub fn foreground(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v != 0).collect(),
        }
    }

    pub fn class_mask(&self, class: u8) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &v in &self.data {
            if (v as usize) < classes {
                h[v as usize] += 1;
            }
        }
        h
    }

    /// Channel-major one-hot planes, `classes × height × width`.
    pub fn one_hot(&self, classes: usize) -> Vec<f32> {
        let plane = self.data.len();
        let mut out = vec![0.0; classes * plane];
        for (p, &v) in self.data.iter().enumerate() {
            out[v as usize * plane + p] = 1.0;
        }
        out
    }

    /// Per-pixel argmax over channel-major scores; ties go to the lowest index.
    pub fn argmax(width: usize, height: usize, scores: &[f32]) -> Self {
        let plane = width * height;
        let classes = scores.len() / plane;
        let data = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..classes {
                    if scores[c * plane + p] > scores[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap { width, height, data }
    }
}

/// Six-part body map over indices `0..7` (see [`part`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSilhouette(pub LabelMap);

impl PartSilhouette {
    pub fn new(map: LabelMap) -> Result<Self> {
        map.check_classes(part::COUNT)?;
        Ok(PartSilhouette(map))
    }

    pub fn map(&self) -> &LabelMap {
        &self.0
    }

    pub fn foreground(&self) -> Mask {
        self.0.foreground()
    }
}

/// Interleaved `height × width × 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RgbImage { width, height, data }
    }

    pub fn pixel(&self, p: usize) -> [f32; 3] {
        [self.data[3 * p], self.data[3 * p + 1], self.data[3 * p + 2]]
    }

    pub fn set_pixel(&mut self, p: usize, rgb: [f32; 3]) {
        self.data[3 * p..3 * p + 3].copy_from_slice(&rgb);
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Channel-major planes, `3 × height × width`.
    pub fn planes(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = self.data[3 * p + c];
            }
        }
        out
    }

    pub fn from_planes(width: usize, height: usize, planes: &[f32]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[3 * p + c] = planes[c * plane + p];
            }
        }
        RgbImage { width, height, data }
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn mean_abs_diff(&self, other: &RgbImage) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Quantize to 8 bits per channel (round to nearest).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Self {
        RgbImage {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }
}

/// Per-segment constant color image; background is black.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorMap(pub RgbImage);

impl ColorMap {
    pub fn image(&self) -> &RgbImage {
        &self.0
    }

    /// Paint every pixel of class `c` with `colors[c]`; classes without an
    /// entry, and background, are black.
    pub fn from_class_colors(m: &LabelMap, colors: &[Option<[f32; 3]>]) -> Self {
        let mut img = RgbImage::filled(m.width, m.height, [0.0; 3]);
        for (p, &l) in m.data.iter().enumerate() {
            if l != 0 {
                if let Some(Some(c)) = colors.get(l as usize) {
                    img.set_pixel(p, *c);
                }
            }
        }
        ColorMap(img)
    }
}

/// Settings for the procedural figure generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    /// Square canvas side in pixels.
    pub resolution: usize,
    pub palette: ClassPalette,
    /// How far (pixels at 64 px resolution, scaled linearly) garments and
    /// accessories may reach beyond the body silhouette.
    pub garment_overhang: f32,
    /// Standard deviation of per-pixel texture noise.
    pub texture_noise: f32,
    /// Structuring-element side for the hygiene pass applied to every sample.
    pub clean_kernel: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            resolution: 64,
            palette: ClassPalette::default(),
            garment_overhang: 2.0,
            texture_noise: 0.015,
            clean_kernel: 7,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        self.palette.validate()?;
        if self.resolution < 32 {
            return Err(Error::Config(format!("resolution {} below 32", self.resolution)));
        }
        if self.palette.len() < 5 {
            return Err(Error::Config(format!("palette needs at least 5 classes, has {}", self.palette.len())));
        }
        if ClassPalette::default().names.iter().zip(&self.palette.names).any(|(a, b)| a != b)
            || self.palette.len() < ClassPalette::default().len()
        {
            return Err(Error::Config(
                "the figure generator needs the default class names as a prefix of the palette".into(),
            ));
        }
        if !(self.garment_overhang >= 0.0 && self.garment_overhang.is_finite()) {
            return Err(Error::Config("garment_overhang must be finite and non-negative".into()));
        }
        if !(self.texture_noise >= 0.0 && self.texture_noise < 0.5) {
            return Err(Error::Config("texture_noise must be in [0, 0.5)".into()));
        }
        if self.clean_kernel == 0 || self.clean_kernel % 2 == 0 {
            return Err(Error::Config(format!("clean_kernel {} must be odd", self.clean_kernel)));
        }
        Ok(())
    }

    /// Pixels per reference pixel at 64 px resolution.
    pub fn unit(&self) -> f32 {
        self.resolution as f32 / 64.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_palette_is_valid() {
        let p = ClassPalette::default();
        p.validate().unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!(p.index_of("left-shoe"), Some(class::LEFT_SHOE));
    }

    #[test]
    fn duplicate_colors_rejected() {
        let mut p = ClassPalette::default();
        p.colors[3] = p.colors[4];
        assert!(p.validate().is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        // Three classes over a 2x1 map: pixel 0 scores (0.5, 0.5, 0.2),
        // pixel 1 scores (0.1, 0.9, 0.9).
        let scores = [0.5, 0.1, 0.5, 0.9, 0.2, 0.9];
        let m = LabelMap::argmax(2, 1, &scores);
        assert_eq!(m.data, vec![0, 1]);
    }

    #[test]
    fn planes_round_trip() {
        let img = RgbImage {
            width: 2,
            height: 1,
            data: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        };
        let back = RgbImage::from_planes(2, 1, &img.planes());
        assert_eq!(back, img);
    }
}
