use std::path::Path;

use figura_core::eval::SegModel;
use figura_core::forge::{load_dataset, write_dataset, Dataset, Record};
use figura_core::nn::Checkpoint;
use figura_core::portray::{InputMode, PortrayModel};
use figura_core::sketch::{ConditionalSketchVae, SketchVae};
use figura_core::train::{fit, TrainConfig, Trainable};
use serde_json::json;

use crate::output::{ensure_dir, load_checkpoint, stamp, JsonlLog};
use crate::{CliError, InputModeArg, Module, RunConfig, TrainArgs};

pub fn forge(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = Dataset::forge(&cfg.data.forge, cfg.data.count, cfg.data.seed, &cfg.hash())?;
    write_dataset(out, &ds)?;
    let mut log = JsonlLog::open(&out.join("log.jsonl"), false, cfg, "forge")?;
    log.line(&json!({"event": "done", "count": ds.len()}))
}

/// What the trainer needs beyond [`Trainable`].
trait CliModel: Trainable + Sized {
    const NAME: &'static str;
    fn create(cfg: &RunConfig, t: &TrainConfig) -> figura_core::Result<Self>;
    fn load(ck: &Checkpoint) -> figura_core::Result<Self>;
    fn matches(&self, cfg: &RunConfig) -> bool;
}

impl CliModel for SketchVae {
    const NAME: &'static str = "vae";
    fn create(cfg: &RunConfig, t: &TrainConfig) -> figura_core::Result<Self> {
        SketchVae::new(cfg.sketch.clone(), t.adam, t.seed)
    }
    fn load(ck: &Checkpoint) -> figura_core::Result<Self> {
        SketchVae::from_checkpoint(ck)
    }
    fn matches(&self, cfg: &RunConfig) -> bool {
        self.config == cfg.sketch
    }
}

impl CliModel for ConditionalSketchVae {
    const NAME: &'static str = "cvae";
    fn create(cfg: &RunConfig, t: &TrainConfig) -> figura_core::Result<Self> {
        ConditionalSketchVae::new(cfg.sketch.clone(), t.adam, t.seed)
    }
    fn load(ck: &Checkpoint) -> figura_core::Result<Self> {
        ConditionalSketchVae::from_checkpoint(ck)
    }
    fn matches(&self, cfg: &RunConfig) -> bool {
        self.config == cfg.sketch
    }
}

impl CliModel for PortrayModel {
    const NAME: &'static str = "portray";
    fn create(cfg: &RunConfig, t: &TrainConfig) -> figura_core::Result<Self> {
        PortrayModel::new(cfg.portray.clone(), t.adam, t.seed)
    }
    fn load(ck: &Checkpoint) -> figura_core::Result<Self> {
        PortrayModel::from_checkpoint(ck)
    }
    fn matches(&self, cfg: &RunConfig) -> bool {
        self.config == cfg.portray
    }
}

impl CliModel for SegModel {
    const NAME: &'static str = "segmenter";
    fn create(cfg: &RunConfig, t: &TrainConfig) -> figura_core::Result<Self> {
        SegModel::new(cfg.segmenter.clone(), t.adam, t.seed)
    }
    fn load(ck: &Checkpoint) -> figura_core::Result<Self> {
        SegModel::from_checkpoint(ck)
    }
    fn matches(&self, cfg: &RunConfig) -> bool {
        self.config == cfg.segmenter
    }
}

fn section<'a>(cfg: &'a mut RunConfig, m: Module) -> &'a mut TrainConfig {
    match m {
        Module::Vae => &mut cfg.train.vae,
        Module::Cvae => &mut cfg.train.cvae,
        Module::Portray => &mut cfg.train.portray,
        Module::Segmenter => &mut cfg.train.segmenter,
    }
}

pub fn train(mut cfg: RunConfig, args: TrainArgs) -> Result<(), CliError> {
    let t = section(&mut cfg, args.module);
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.adam.lr = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(m) = args.input_mode {
        cfg.portray.input_mode = match m {
            InputModeArg::ColorMap => InputMode::ColorMap,
            InputModeArg::ProbabilityMap => InputMode::ProbabilityMap,
        };
    }
    if args.color_conditioning {
        cfg.portray.color_conditioning = true;
    }
    if let Some(v) = args.lambda_adv {
        cfg.portray.lambda_adv = v;
    }
    if args.no_skip {
        cfg.portray.skip_connections = false;
    }
    cfg.validate()?;
    let data = load_dataset(&args.data)?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{}: empty dataset", args.data.display())));
    }
    if args.module == Module::Cvae && !data.manifest.silhouettes {
        return Err(CliError::Data(format!("{}: the CVAE needs silhouettes", args.data.display())));
    }
    match args.module {
        Module::Vae => run::<SketchVae>(&cfg, &data, &args),
        Module::Cvae => run::<ConditionalSketchVae>(&cfg, &data, &args),
        Module::Portray => run::<PortrayModel>(&cfg, &data, &args),
        Module::Segmenter => run::<SegModel>(&cfg, &data, &args),
    }
}

fn json_entry(ck: &Checkpoint, name: &str) -> Option<serde_json::Value> {
    ck.get_bytes(name).and_then(|b| serde_json::from_slice(b).ok())
}

/// Train (or resume) and write `last.ckpt` after every epoch and
/// `model.ckpt` whenever validation improves.
fn run<M: CliModel>(cfg: &RunConfig, data: &Dataset, args: &TrainArgs) -> Result<(), CliError> {
    let t = match args.module {
        Module::Vae => &cfg.train.vae,
        Module::Cvae => &cfg.train.cvae,
        Module::Portray => &cfg.train.portray,
        Module::Segmenter => &cfg.train.segmenter,
    };
    ensure_dir(&args.out)?;
    let last_path = args.out.join("last.ckpt");
    let best_path = args.out.join("model.ckpt");
    let (mut model, start, mut best_value) = if args.resume {
        let ck = load_checkpoint(&last_path)?;
        let model = M::load(&ck)?;
        if !model.matches(cfg) {
            return Err(CliError::Usage(format!(
                "{}: model settings differ from the current configuration",
                last_path.display()
            )));
        }
        let epoch = json_entry(&ck, "run.epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let best = json_entry(&ck, "run.best_value").and_then(|v| v.as_f64());
        (model, epoch, best)
    } else {
        (M::create(cfg, t)?, 0, None)
    };
    let holdout = cfg.holdout(data.len());
    let records: Vec<&Record> = data.records.iter().collect();
    let (train, validation) = records.split_at(records.len() - holdout);
    let mut log = JsonlLog::open(&args.out.join("log.jsonl"), args.resume, cfg, &format!("train {}", M::NAME))?;
    let selection = model.selection();
    let report = fit(&mut model, train, validation, t, start, |rec, m| {
        let score = rec.validation.get(selection.key).or_else(|| rec.train.get(selection.key)).copied();
        let improved = match (score, best_value) {
            (Some(s), Some(b)) => {
                if selection.higher_is_better {
                    s > b
                } else {
                    s < b
                }
            }
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best_value = score;
            let mut ck = m.checkpoint();
            stamp(&mut ck, cfg);
            ck.save(&best_path)?;
        }
        let mut ck = m.checkpoint();
        stamp(&mut ck, cfg);
        ck.put_bytes("run.epoch", rec.epoch.to_string().into_bytes());
        ck.put_bytes("run.best_value", serde_json::to_vec(&best_value).expect("serializes"));
        ck.save(&last_path)?;
        // Wall time stays out of the log so reruns are byte-identical.
        let record = json!({"epoch": rec.epoch, "train": rec.train, "validation": rec.validation});
        log.line(&json!({"event": "epoch", "record": record, "improved": improved}))
            .map_err(|e| figura_core::Error::Input(e.to_string()))
    })?;
    if report.records.is_empty() && !last_path.exists() {
        // Zero epochs from scratch: still leave a usable checkpoint.
        let mut ck = model.checkpoint();
        stamp(&mut ck, cfg);
        ck.put_bytes("run.epoch", b"0".to_vec());
        ck.put_bytes("run.best_value", b"null".to_vec());
        ck.save(&last_path)?;
        let mut ck = model.checkpoint();
        stamp(&mut ck, cfg);
        ck.save(&best_path)?;
    }
    log.line(&json!({
        "event": "done",
        "epochs_run": report.records.len(),
        "stopped_early": report.stopped_early,
        "best_value": best_value,
    }))
}
