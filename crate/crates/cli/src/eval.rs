use std::collections::BTreeMap;

use figura_core::eval::{
    cross_evaluate, generate_synthetic_dataset, make_texture_dataset, reconstruction_metrics, train_segmenter,
    ClassMetrics, SegModel, Source,
};
use figura_core::forge::{load_dataset, write_indexed_png, write_rgb_png, Dataset, LabelMap, PartSilhouette, Record};
use figura_core::latent::{contact_sheet, distinct_maps, encode_corpus, LatentExplorer};
use figura_core::nn::{Checkpoint, Tensor};
use figura_core::portray::PortrayModel;
use figura_core::sketch::{ConditionalSketchVae, SketchVae};
use serde_json::json;

use crate::output::{ensure_dir, load_checkpoint, write_json, write_text, JsonlLog};
use crate::{CliError, EvalCommand, RunConfig, WalkArgs};

pub fn walk(mut cfg: RunConfig, args: WalkArgs) -> Result<(), CliError> {
    if let Some(s) = args.steps {
        cfg.walk.steps = s;
    }
    if let Some(e) = args.extent {
        cfg.walk.extent = e;
    }
    if let Some(c) = args.component {
        cfg.walk.component = c;
    }
    cfg.validate()?;
    if !(cfg.walk.extent >= 0.0 && cfg.walk.extent.is_finite()) {
        return Err(CliError::Usage("walk extent must be finite and non-negative".into()));
    }
    let model = SketchVae::from_checkpoint(&load_checkpoint(&args.vae)?)?;
    if !args.corpus.join("manifest.json").exists() {
        return Err(CliError::Data(format!("corpus {} has no manifest.json", args.corpus.display())));
    }
    let corpus = load_dataset(&args.corpus)?;
    let limit = match cfg.walk.corpus_limit {
        0 => corpus.len(),
        l => l.min(corpus.len()),
    };
    let maps: Vec<&LabelMap> = corpus.records[..limit].iter().map(|r| &r.label).collect();
    let explorer = LatentExplorer::fit(encode_corpus(&model, &maps)?)?;
    let frames = explorer.walk(&model, cfg.walk.component, cfg.walk.extent, cfg.walk.steps)?;
    let hash = cfg.hash();
    let palette = &cfg.data.forge.palette;
    ensure_dir(&args.out)?;
    for (i, f) in frames.iter().enumerate() {
        write_indexed_png(&args.out.join(format!("frame_{i:02}.png")), f, &palette.colors, &hash)?;
    }
    write_rgb_png(&args.out.join("sheet.png"), &contact_sheet(&frames, palette, 2)?, &hash)?;
    let summary = json!({
        "config_hash": hash,
        "corpus_rows": limit,
        "component": cfg.walk.component,
        "extent": cfg.walk.extent,
        "steps": cfg.walk.steps,
        "distinct_frames": distinct_maps(&frames),
        "variance_ratios": explorer.basis.ratios.iter().take(10).collect::<Vec<_>>(),
    });
    write_json(&args.out.join("walk.json"), &summary)?;
    let mut log = JsonlLog::open(&args.out.join("log.jsonl"), false, &cfg, "walk")?;
    log.line(&json!({"event": "done", "frames": frames.len()}))
}

fn require_dataset(path: &std::path::Path) -> Result<Dataset, CliError> {
    if !path.join("manifest.json").exists() {
        return Err(CliError::Data(format!("dataset {} has no manifest.json", path.display())));
    }
    Ok(load_dataset(path)?)
}

fn write_metrics(out: &std::path::Path, cfg: &RunConfig, m: &ClassMetrics, what: &str) -> Result<(), CliError> {
    ensure_dir(out)?;
    write_json(
        &out.join("metrics.json"),
        &json!({"config_hash": cfg.hash(), "metrics": m}),
    )?;
    write_text(
        &out.join("metrics.txt"),
        &format!("# config {}\n{}", cfg.hash(), m.table(&cfg.data.forge.palette.names)),
    )?;
    let mut log = JsonlLog::open(&out.join("log.jsonl"), false, cfg, what)?;
    log.line(&json!({"event": "done", "pixel_accuracy": m.pixel_accuracy}))
}

/// Reconstruct through the posterior mean of whichever sketch model `ck` holds.
fn reconstruct(ck: &Checkpoint, data: &Dataset) -> Result<Vec<LabelMap>, CliError> {
    let maps: Vec<&LabelMap> = data.records.iter().map(|r| &r.label).collect();
    let mut out = Vec::with_capacity(maps.len());
    if let Ok(vae) = SketchVae::from_checkpoint(ck) {
        for chunk in maps.chunks(32) {
            out.extend(vae.reconstruct(chunk)?);
        }
        return Ok(out);
    }
    let cvae = ConditionalSketchVae::from_checkpoint(ck)
        .map_err(|_| CliError::Data("checkpoint holds neither a sketch VAE nor a CVAE".into()))?;
    let sils = data
        .records
        .iter()
        .map(|r| r.silhouette.as_ref())
        .collect::<Option<Vec<&PartSilhouette>>>()
        .ok_or_else(|| CliError::Data("the CVAE needs a dataset with silhouettes".into()))?;
    for (chunk, sil) in maps.chunks(32).zip(sils.chunks(32)) {
        let q = cvae.encode(chunk, sil)?;
        let d = cvae.config.latent_dim;
        let z = Tensor::from_vec(&[q.len(), d], q.iter().flat_map(|g| g.mean.iter().copied()).collect())?;
        out.extend(cvae.decode_maps(&z, sil)?);
    }
    Ok(out)
}

pub fn eval(cfg: RunConfig, what: EvalCommand) -> Result<(), CliError> {
    cfg.validate()?;
    let classes = cfg.data.forge.palette.len();
    match what {
        EvalCommand::Reconstruction { model, data, out } => {
            let data = require_dataset(&data)?;
            let ck = load_checkpoint(&model)?;
            let preds = reconstruct(&ck, &data)?;
            let p: Vec<&LabelMap> = preds.iter().collect();
            let g: Vec<&LabelMap> = data.records.iter().map(|r| &r.label).collect();
            let m = reconstruction_metrics(&p, &g, classes)?;
            write_metrics(&out, &cfg, &m, "eval reconstruction")
        }
        EvalCommand::Compare { pred, truth, out } => {
            let pred = require_dataset(&pred)?;
            let truth = require_dataset(&truth)?;
            let p: Vec<&LabelMap> = pred.records.iter().map(|r| &r.label).collect();
            let g: Vec<&LabelMap> = truth.records.iter().map(|r| &r.label).collect();
            let m = reconstruction_metrics(&p, &g, classes)?;
            write_metrics(&out, &cfg, &m, "eval compare")
        }
        EvalCommand::Cross { real, vae, portray, out } => {
            let real = require_dataset(&real)?;
            let vae = SketchVae::from_checkpoint(&load_checkpoint(&vae)?)?;
            let portray = PortrayModel::from_checkpoint(&load_checkpoint(&portray)?)?;
            ensure_dir(&out)?;
            let mut log = JsonlLog::open(&out.join("log.jsonl"), false, &cfg, "eval cross")?;
            let m = cross_matrix(&cfg, &real, &vae, &portray, &mut |line| log.line(&line))?;
            write_json(&out.join("cross.json"), &json!({"config_hash": cfg.hash(), "matrix": m}))?;
            write_text(&out.join("cross.txt"), &format!("# config {}\n{}", cfg.hash(), m.table()))?;
            log.line(&json!({"event": "done", "diagonal_dominant": m.diagonal_dominant()}))
        }
    }
}

/// Build the three sources from `real`, train one segmenter per source on
/// its leading part and score all on every held-out tail.
pub fn cross_matrix(
    cfg: &RunConfig,
    real: &Dataset,
    vae: &SketchVae,
    portray: &PortrayModel,
    log: &mut dyn FnMut(serde_json::Value) -> Result<(), CliError>,
) -> Result<figura_core::eval::CrossMatrix, CliError> {
    let hash = cfg.hash();
    let seed = cfg.eval.seed;
    let full = generate_synthetic_dataset(vae, portray, real.len(), seed, &hash)?;
    let texture = make_texture_dataset(real, portray, seed.wrapping_add(1 << 40), &hash)?;
    let holdout = cfg.holdout(real.len()).max(1);
    let sets = [(Source::FullSynthetic, &full), (Source::SyntheticTexture, &texture), (Source::Real, real)];
    let mut models = BTreeMap::new();
    let mut tests: BTreeMap<Source, Vec<&Record>> = BTreeMap::new();
    for (source, ds) in sets {
        let recs: Vec<&Record> = ds.records.iter().collect();
        let (train, test) = recs.split_at(recs.len() - holdout);
        // Early stopping looks at a slice of the training part, never the test tail.
        let val_len = (train.len() / 10).max(1);
        let (fit_part, val_part) = train.split_at(train.len() - val_len);
        let (model, report): (SegModel, _) = train_segmenter(fit_part, val_part, cfg.segmenter.clone(), &cfg.train.segmenter)?;
        log(json!({
            "event": "segmenter",
            "source": source,
            "epochs": report.records.len(),
            "best_epoch": report.best_epoch,
            "best_validation_accuracy": report.best_value,
        }))?;
        models.insert(source, model);
        tests.insert(source, test.to_vec());
    }
    Ok(cross_evaluate(&models, &tests)?)
}
