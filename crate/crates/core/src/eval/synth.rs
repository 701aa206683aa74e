use crate::error::{Error, Result};
use crate::forge::{composite_background, Dataset, DatasetKind, LabelMap, Manifest, Record};
use crate::portray::{PortrayModel, Sketch};
use crate::sketch::SketchVae;

const CHUNK: usize = 32;

fn check_portray(portray: &PortrayModel) -> Result<()> {
    if portray.config.color_conditioning {
        return Err(Error::Input("synthetic data needs a portray model without color conditioning".into()));
    }
    Ok(())
}

/// Portray each label map and composite a seeded background behind it;
/// sample `i` uses background seed `seed + i`.
fn render(portray: &PortrayModel, labels: Vec<LabelMap>, seed: u64) -> Result<(Vec<Record>, Vec<u64>)> {
    let seeds: Vec<u64> = (0..labels.len() as u64).map(|i| seed.wrapping_add(i)).collect();
    let mut records = Vec::with_capacity(labels.len());
    for (k, chunk) in labels.chunks(CHUNK).enumerate() {
        let sketches: Vec<Sketch> = chunk.iter().map(Sketch::Labels).collect();
        let imgs = portray.colorize_batch(&sketches, None)?;
        for (j, (img, label)) in imgs.iter().zip(chunk).enumerate() {
            let rgb = composite_background(img, label, seeds[k * CHUNK + j])?;
            records.push(Record {
                label: label.clone(),
                rgb,
                silhouette: None,
            });
        }
    }
    Ok((records, seeds))
}

fn manifest(kind: DatasetKind, portray: &PortrayModel, seeds: Vec<u64>, config_hash: &str) -> Manifest {
    Manifest {
        kind,
        count: seeds.len(),
        resolution: portray.config.resolution,
        palette: portray.config.palette.clone(),
        seeds,
        silhouettes: false,
        config_hash: config_hash.to_string(),
    }
}

/// `n` sketches sampled from the VAE as labels, their portrayals on a
/// procedural background as images.
pub fn generate_synthetic_dataset(
    sketch: &SketchVae,
    portray: &PortrayModel,
    n: usize,
    seed: u64,
    config_hash: &str,
) -> Result<Dataset> {
    check_portray(portray)?;
    if sketch.config.resolution != portray.config.resolution || sketch.config.classes != portray.config.classes() {
        return Err(Error::Input("sketch and portray models disagree on resolution or classes".into()));
    }
    let mut labels = Vec::with_capacity(n);
    for (k, start) in (0..n).step_by(CHUNK).enumerate() {
        let len = CHUNK.min(n - start);
        labels.extend(sketch.sample(len, seed.wrapping_add((k as u64) << 32))?);
    }
    let (records, seeds) = render(portray, labels, seed)?;
    Ok(Dataset {
        manifest: manifest(DatasetKind::FullSynthetic, portray, seeds, config_hash),
        records,
    })
}

/// The labels of `real` paired with portrayed textures on a procedural
/// background.
pub fn make_texture_dataset(real: &Dataset, portray: &PortrayModel, seed: u64, config_hash: &str) -> Result<Dataset> {
    check_portray(portray)?;
    let labels = real.records.iter().map(|r| r.label.clone()).collect();
    let (records, seeds) = render(portray, labels, seed)?;
    Ok(Dataset {
        manifest: manifest(DatasetKind::SyntheticTexture, portray, seeds, config_hash),
        records,
    })
}
