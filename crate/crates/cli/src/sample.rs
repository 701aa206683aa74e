use std::collections::BTreeMap;
use std::path::Path;

use figura_core::forge::{
    composite_background, generate_sample, read_indexed_png, write_indexed_png, write_rgb_png, LabelMap,
    PartSilhouette, RgbImage,
};
use figura_core::portray::{PortrayModel, Sketch};
use figura_core::sketch::{ConditionalSketchVae, SketchVae};
use serde_json::json;

use crate::output::{ensure_dir, load_checkpoint, require, JsonlLog};
use crate::{CliError, RunConfig, SampleArgs, SampleMode};

const PART_PREVIEW: [[u8; 3]; 7] = [
    [0, 0, 0],
    [240, 200, 60],
    [200, 60, 60],
    [60, 160, 220],
    [60, 90, 200],
    [80, 200, 100],
    [40, 130, 60],
];

fn silhouette(cfg: &RunConfig, args: &SampleArgs) -> Result<PartSilhouette, CliError> {
    match (&args.silhouette, args.pose_seed) {
        (Some(p), None) => {
            let m = read_indexed_png(p)?;
            Ok(PartSilhouette::new(m).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?)
        }
        (None, Some(seed)) => Ok(generate_sample(seed, &cfg.data.forge)?.silhouette),
        (Some(_), Some(_)) => Err(CliError::Usage("give either --silhouette or --pose-seed".into())),
        (None, None) => Err(CliError::Usage("pose mode needs --silhouette or --pose-seed".into())),
    }
}

fn load_portray(path: &Path) -> Result<PortrayModel, CliError> {
    Ok(PortrayModel::from_checkpoint(&load_checkpoint(path)?)?)
}

/// Parse `[{class-name: [r, g, b]}, ...]` into per-class color lists.
fn color_sets(path: &Path, cfg: &RunConfig) -> Result<Vec<Vec<Option<[f32; 3]>>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| figura_core::Error::io(path, e))?;
    let sets: Vec<BTreeMap<String, [f32; 3]>> =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let palette = &cfg.data.forge.palette;
    sets.iter()
        .map(|set| {
            let mut colors = vec![None; palette.len()];
            for (name, rgb) in set {
                let idx = palette
                    .index_of(name)
                    .ok_or_else(|| CliError::Data(format!("{}: unknown class `{name}`", path.display())))?;
                if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(CliError::Data(format!("{}: color of `{name}` outside [0, 1]", path.display())));
                }
                colors[idx as usize] = Some(*rgb);
            }
            Ok(colors)
        })
        .collect()
}

pub fn sample(cfg: RunConfig, args: SampleArgs) -> Result<(), CliError> {
    cfg.validate()?;
    let n = args.n.unwrap_or(cfg.sample.n);
    let seed = args.seed.unwrap_or(cfg.sample.seed);
    let hash = cfg.hash();
    let palette = cfg.data.forge.palette.clone();
    let mode_name = format!("{:?}", args.mode).to_lowercase();

    // Load everything before touching the output directory.
    let portray = args.portray.as_deref().map(load_portray).transpose()?;
    let mut extra = serde_json::Map::new();
    let (sketches, images): (Vec<LabelMap>, Vec<RgbImage>) = match args.mode {
        SampleMode::Unconditional | SampleMode::Full | SampleMode::Pose => {
            let full = args.mode == SampleMode::Full;
            let pose = args.mode == SampleMode::Pose || (full && (args.silhouette.is_some() || args.pose_seed.is_some()));
            let sketches = if pose {
                let ck = load_checkpoint(require(&args.cvae, "cvae", &mode_name)?)?;
                let model = ConditionalSketchVae::from_checkpoint(&ck)?;
                let sil = silhouette(&cfg, &args)?;
                ensure_dir(&args.out)?;
                write_indexed_png(&args.out.join("silhouette.png"), sil.map(), &PART_PREVIEW, &hash)?;
                model.sample_conditioned(&sil, n, seed)?
            } else {
                let ck = load_checkpoint(require(&args.vae, "vae", &mode_name)?)?;
                SketchVae::from_checkpoint(&ck)?.sample(n, seed)?
            };
            let images = match (&portray, full) {
                (Some(p), _) => {
                    let refs: Vec<Sketch> = sketches.iter().map(Sketch::Labels).collect();
                    let mut imgs = Vec::with_capacity(n);
                    for chunk in refs.chunks(32) {
                        imgs.extend(p.colorize_batch(chunk, None)?);
                    }
                    if full {
                        imgs = imgs
                            .iter()
                            .zip(&sketches)
                            .enumerate()
                            .map(|(i, (img, m))| composite_background(img, m, seed.wrapping_add(i as u64)))
                            .collect::<figura_core::Result<_>>()?;
                    }
                    imgs
                }
                (None, true) => return Err(CliError::Usage("full mode needs --portray".into())),
                (None, false) => sketches.iter().map(|m| palette.render(m)).collect(),
            };
            (sketches, images)
        }
        SampleMode::Color => {
            let p = portray
                .as_ref()
                .ok_or_else(|| CliError::Usage("color mode needs --portray".into()))?;
            let sketch_path = require(&args.sketch, "sketch", "color mode")?;
            let sketch = read_indexed_png(sketch_path)?;
            let sets = color_sets(require(&args.colors, "colors", "color mode")?, &cfg)?;
            let images = sets
                .iter()
                .map(|c| p.colorize_with_colors(&sketch, c))
                .collect::<figura_core::Result<Vec<_>>>()
                .map_err(|e| CliError::Data(e.to_string()))?;
            extra.insert("color_sets".into(), json!(sets.len()));
            (vec![sketch], images)
        }
    };
    ensure_dir(&args.out)?;
    for (i, m) in sketches.iter().enumerate() {
        write_indexed_png(&args.out.join(format!("sketch_{i:04}.png")), m, &palette.colors, &hash)?;
    }
    for (i, img) in images.iter().enumerate() {
        write_rgb_png(&args.out.join(format!("image_{i:04}.png")), img, &hash)?;
    }
    let mut log = JsonlLog::open(&args.out.join("log.jsonl"), false, &cfg, &format!("sample {mode_name}"))?;
    log.line(&json!({
        "event": "done",
        "sketches": sketches.len(),
        "images": images.len(),
        "seed": seed,
        "extra": extra,
    }))
}
