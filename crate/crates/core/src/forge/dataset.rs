//! On-disk dataset layout: `manifest.json` plus per-sample lossless rasters
//! `NNNN_label.png` (palette-indexed), `NNNN_rgb.png` and, for forged data,
//! `NNNN_sil.png` (indexed, 7 entries).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_sample, part, ClassPalette, ForgeConfig, LabelMap, PartSilhouette, RgbImage};
use crate::error::{Error, Result};

/// Where the samples came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Forged,
    FullSynthetic,
    SyntheticTexture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub count: usize,
    pub resolution: usize,
    pub palette: ClassPalette,
    /// Per-sample generator seeds.
    pub seeds: Vec<u64>,
    pub silhouettes: bool,
    /// Hash of the configuration that produced the data.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: LabelMap,
    pub rgb: RgbImage,
    pub silhouette: Option<PartSilhouette>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<Record>,
}

impl Dataset {
    /// Forge `count` samples with seeds `base_seed, base_seed + 1, ...`.
    pub fn forge(cfg: &ForgeConfig, count: usize, base_seed: u64, config_hash: &str) -> Result<Self> {
        cfg.validate()?;
        let seeds: Vec<u64> = (0..count as u64).map(|i| base_seed.wrapping_add(i)).collect();
        let records = seeds
            .iter()
            .map(|&s| {
                generate_sample(s, cfg).map(|f| Record {
                    label: f.label,
                    rgb: f.rgb,
                    silhouette: Some(f.silhouette),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest: Manifest {
                kind: DatasetKind::Forged,
                count,
                resolution: cfg.resolution,
                palette: cfg.palette.clone(),
                seeds,
                silhouettes: true,
                config_hash: config_hash.to_string(),
            },
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.manifest.palette.len()
    }

    /// Split into `(first, rest)` at `at`, keeping manifests consistent.
    pub fn split(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.len());
        let part = |range: std::ops::Range<usize>| {
            let mut manifest = self.manifest.clone();
            manifest.count = range.len();
            manifest.seeds = self.manifest.seeds.get(range.clone()).map(<[u64]>::to_vec).unwrap_or_default();
            Dataset {
                manifest,
                records: self.records[range].to_vec(),
            }
        };
        (part(0..at), part(at..self.len()))
    }
}

fn sample_path(dir: &Path, i: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{i:04}_{suffix}.png"))
}

/// Silhouette preview colors, one per part index.
const PART_COLORS: [[u8; 3]; part::COUNT] = [
    [0, 0, 0],
    [240, 200, 60],
    [200, 60, 60],
    [60, 160, 220],
    [60, 90, 200],
    [80, 200, 100],
    [40, 130, 60],
];

fn encoder<'a>(file: BufWriter<File>, w: usize, h: usize, hash: &str) -> png::Encoder<'a, BufWriter<File>> {
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_depth(png::BitDepth::Eight);
    if !hash.is_empty() {
        // Only fails for invalid keywords, and this one is fixed.
        enc.add_text_chunk("config-hash".into(), hash.into()).expect("valid keyword");
    }
    enc
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("png: {e}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Write an 8-bit palette-indexed PNG whose indices are the labels.
pub fn write_indexed_png(path: &Path, m: &LabelMap, colors: &[[u8; 3]], hash: &str) -> Result<()> {
    let mut enc = encoder(create(path)?, m.width, m.height, hash);
    enc.set_color(png::ColorType::Indexed);
    enc.set_palette(colors.iter().flatten().copied().collect::<Vec<u8>>());
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(&m.data).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

pub fn write_rgb_png(path: &Path, img: &RgbImage, hash: &str) -> Result<()> {
    let mut enc = encoder(create(path)?, img.width, img.height, hash);
    enc.set_color(png::ColorType::Rgb);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(&img.to_u8()).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

fn read_png(path: &Path, expect: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "png: image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != expect || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("expected 8-bit {expect:?}, found {:?} {:?}", info.bit_depth, info.color_type),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn read_indexed_png(path: &Path) -> Result<LabelMap> {
    let (w, h, data) = read_png(path, png::ColorType::Indexed)?;
    LabelMap::new(w, h, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let (w, h, data) = read_png(path, png::ColorType::Rgb)?;
    Ok(RgbImage::from_u8(w, h, &data))
}

/// Write manifest and rasters; `dir` is created if missing.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = &ds.manifest.config_hash;
    for (i, r) in ds.records.iter().enumerate() {
        write_indexed_png(&sample_path(dir, i, "label"), &r.label, &ds.manifest.palette.colors, hash)?;
        write_rgb_png(&sample_path(dir, i, "rgb"), &r.rgb, hash)?;
        if let Some(sil) = &r.silhouette {
            write_indexed_png(&sample_path(dir, i, "sil"), sil.map(), &PART_COLORS, hash)?;
        }
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.palette.validate().map_err(|e| Error::format(&path, e.to_string()))?;
    let res = manifest.resolution;
    let check = |p: &Path, w: usize, h: usize| {
        if (w, h) != (res, res) {
            Err(Error::format(p, format!("{w}x{h} raster in a {res} px dataset")))
        } else {
            Ok(())
        }
    };
    let mut records = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let lp = sample_path(dir, i, "label");
        let label = read_indexed_png(&lp)?;
        check(&lp, label.width, label.height)?;
        label
            .check_classes(manifest.palette.len())
            .map_err(|e| Error::format(&lp, e.to_string()))?;
        let rp = sample_path(dir, i, "rgb");
        let rgb = read_rgb_png(&rp)?;
        check(&rp, rgb.width, rgb.height)?;
        let silhouette = if manifest.silhouettes {
            let sp = sample_path(dir, i, "sil");
            let m = read_indexed_png(&sp)?;
            check(&sp, m.width, m.height)?;
            Some(PartSilhouette::new(m).map_err(|e| Error::format(&sp, e.to_string()))?)
        } else {
            None
        };
        records.push(Record { label, rgb, silhouette });
    }
    Ok(Dataset { manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_for_labels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::forge(&ForgeConfig::default(), 3, 40, "abc123").unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        for (a, b) in back.records.iter().zip(&ds.records) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.silhouette, b.silhouette);
            assert!(a.rgb.mean_abs_diff(&b.rgb).unwrap() <= 0.5 / 255.0 + 1e-6);
        }
        let files = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 3 * 3 + 1);
    }

    #[test]
    fn missing_manifest_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("manifest.json"), "{err}");
    }

    #[test]
    fn split_keeps_counts() {
        let ds = Dataset::forge(&ForgeConfig::default(), 5, 0, "").unwrap();
        let (a, b) = ds.split(2);
        assert_eq!((a.len(), a.manifest.count, b.len(), b.manifest.seeds.len()), (2, 2, 3, 3));
    }
}
