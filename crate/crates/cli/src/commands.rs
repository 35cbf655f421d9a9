use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use occflow::config::ExperimentConfig;
use occflow::inference::{ensemble, tta_predict, PredictionArchive};
use occflow::metrics::evaluate;
use occflow::model::Prediction;
use occflow::scenario::{derive_ground_truth, generate_scenario, save_scenario};
use occflow::training::{Checkpoint, Dataset, Trainer};
use occflow::{Error, Result};

use crate::layout::{self, DataManifest, ManifestEntry};
use crate::{ConfigArgs, Split};

/// Datasets up to this size keep their rasters in memory.
const CACHE_LIMIT: usize = 64;

pub fn gen_data(args: &ConfigArgs, seed: Option<u64>, out: &Path, force: bool) -> Result<()> {
    let mut cfg = layout::resolve(args, None)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    cfg.data.generator.validate()?;
    let d = &cfg.data;
    if d.n_train + d.n_val == 0 {
        warn!("no scenarios requested; writing the manifest only");
    }
    layout::ensure_empty_dir(out, force)?;
    let write_split = |split: Split, seeds: Vec<u64>| -> Result<Vec<ManifestEntry>> {
        if !seeds.is_empty() {
            fs::create_dir_all(out.join(split.dir()))?;
        }
        seeds
            .into_iter()
            .map(|seed| {
                let s = generate_scenario(seed, &d.generator)?;
                let file = format!("{}/{}.json", split.dir(), s.id);
                save_scenario(out.join(&file), &s)?;
                Ok(ManifestEntry { id: s.id, seed, file })
            })
            .collect()
    };
    let train = write_split(Split::Train, d.train_seeds())?;
    let val = write_split(Split::Val, d.val_seeds())?;
    info!("wrote {} training and {} validation scenarios to {}", train.len(), val.len(), out.display());
    let manifest = DataManifest { version: 1, data: d.clone(), train, val };
    fs::write(out.join(layout::MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn dataset(data: &Path, split: Split, cfg: &ExperimentConfig, with_sparse: bool) -> Result<Dataset> {
    let scenarios = layout::load_split(data, split)?;
    let cache = scenarios.len() <= CACHE_LIMIT;
    Dataset::from_scenarios(scenarios, &cfg.raster, with_sparse, cache)
}

pub fn train(args: &ConfigArgs, data: &Path, seed: Option<u64>, out: &Path, force: bool, dry_run: bool) -> Result<()> {
    let mut cfg = layout::resolve(args, None)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let mut trainer = Trainer::new(&cfg)?;
    let train = dataset(data, Split::Train, &cfg, trainer.model.needs_sparse())?;
    if train.is_empty() {
        return Err(Error::Data(format!("{} has no training scenarios", data.display())));
    }
    let val = if cfg.swa.enabled { Some(dataset(data, Split::Val, &cfg, trainer.model.needs_sparse())?) } else { None };
    if val.as_ref().is_some_and(|v| v.is_empty()) {
        return Err(Error::Data("weight averaging needs validation scenarios".into()));
    }
    let total = trainer.total_steps(train.len());
    if dry_run {
        println!(
            "dry run: config valid, {} training scenarios, {} parameters, {total} steps planned, 0 executed",
            train.len(),
            trainer.params.num_scalars()
        );
        return Ok(());
    }
    layout::ensure_empty_dir(out, force)?;
    fs::write(out.join(layout::CONFIG), cfg.to_toml()?)?;
    trainer.log_to(out.join(layout::METRICS))?;
    info!("training {} parameters for {total} steps", trainer.params.num_scalars());
    trainer.fit(&train, |_, r| {
        if r.step % 10 == 0 || r.step as usize == total {
            info!("step {}/{total} lr {:.3e} loss {:.4} grad_norm {:.3}", r.step, r.lr, r.loss.total, r.grad_norm);
        }
    })?;
    if let Some(val) = &val {
        let o = trainer.fit_swa(&train, val)?;
        info!("weight averaging kept {} of {} snapshots, {} = {:.4}", o.kept.len(), o.candidate_scores.len(), cfg.swa.selection_metric, o.score);
    }
    trainer.checkpoint().save(out.join(layout::CHECKPOINT))?;
    info!("saved {}", out.join(layout::CHECKPOINT).display());
    Ok(())
}

pub enum Source {
    Model(PathBuf),
    Ensemble(Vec<PathBuf>, Vec<f64>),
    GroundTruth,
}

pub struct PredictArgs {
    pub cfg: ConfigArgs,
    pub data: PathBuf,
    pub split: Split,
    pub source: Source,
    pub tta_weight: f64,
    pub batch_size: usize,
    pub out: PathBuf,
    pub force: bool,
}

struct Member {
    preds: BTreeMap<String, Prediction>,
    grid: occflow::raster::GridSpec,
    waypoints: usize,
    fingerprint: String,
}

fn predict_member(args: &PredictArgs, dir: &Path) -> Result<Member> {
    let (saved, ck) = layout::model_dir(dir)?;
    let cfg = layout::resolve(&args.cfg, Some(saved))?;
    let mut trainer = Trainer::new(&cfg)?;
    let report = trainer.restore(&Checkpoint::load(&ck)?, false)?;
    if !report.unexpected.is_empty() {
        warn!("{}: ignored {} unexpected checkpoint entries", ck.display(), report.unexpected.len());
    }
    let data = dataset(&args.data, args.split, &cfg, trainer.model.needs_sparse())?;
    let bs = args.batch_size.max(1);
    let mut preds = BTreeMap::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(bs) {
        let inputs = chunk.iter().map(|&i| data.inputs(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = inputs.iter().map(|c| c.as_ref()).collect();
        let out = tta_predict(|x| trainer.model.predict(&trainer.params, x), &refs, args.tta_weight)?;
        for (&i, p) in chunk.iter().zip(out) {
            preds.insert(data.samples[i].id().to_string(), p);
        }
    }
    Ok(Member { preds, grid: trainer.model.output_grid(), waypoints: cfg.model.waypoints, fingerprint: trainer.fingerprint() })
}

fn ground_truth_member(args: &PredictArgs) -> Result<Member> {
    let cfg = layout::resolve(&args.cfg, None)?;
    cfg.raster.validate()?;
    let grid = cfg.raster.output_grid()?;
    let preds = layout::load_split(&args.data, args.split)?
        .iter()
        .map(|s| Ok((s.id.clone(), Prediction::from_ground_truth(&derive_ground_truth(s, &grid)?))))
        .collect::<Result<_>>()?;
    Ok(Member { preds, grid, waypoints: cfg.data.generator.horizon.n_future_waypoints, fingerprint: "ground-truth".into() })
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    layout::ensure_new_file(&args.out, args.force)?;
    if args.tta_weight != 0.0 && matches!(args.source, Source::GroundTruth) {
        return Err(Error::Config("--tta does not apply to --ground-truth".into()));
    }
    let member = match &args.source {
        Source::GroundTruth => ground_truth_member(args)?,
        Source::Model(dir) => predict_member(args, dir)?,
        Source::Ensemble(dirs, weights) => {
            let weights = if weights.is_empty() { vec![1.0 / dirs.len() as f64; dirs.len()] } else { weights.clone() };
            if weights.len() != dirs.len() {
                return Err(Error::Config(format!("{} ensemble members with {} weights", dirs.len(), weights.len())));
            }
            let members = dirs.iter().map(|d| predict_member(args, d)).collect::<Result<Vec<_>>>()?;
            let first = &members[0];
            if members.iter().any(|m| m.grid != first.grid || m.waypoints != first.waypoints) {
                return Err(Error::Config("ensemble members predict on different grids or horizons".into()));
            }
            let mut preds = BTreeMap::new();
            for id in first.preds.keys() {
                let parts: Vec<Prediction> = members.iter().map(|m| m.preds[id].clone()).collect();
                preds.insert(id.clone(), ensemble(&parts, &weights)?);
            }
            let fingerprint = members.iter().map(|m| m.fingerprint.as_str()).collect::<Vec<_>>().join("+");
            Member { preds, grid: first.grid, waypoints: first.waypoints, fingerprint }
        }
    };
    let n = member.preds.len();
    let parts = member.fingerprint.split('+').map(String::from).collect();
    PredictionArchive::new(member.grid, member.waypoints, parts, member.preds)?.export(&args.out)?;
    info!("wrote {n} predictions to {}", args.out.display());
    Ok(())
}

pub fn eval(pred: &Path, data: &Path, split: Split, thresholds: usize, per_waypoint: bool, out: Option<&Path>) -> Result<()> {
    let archive = PredictionArchive::import(pred, None)?;
    let gts = layout::load_split(data, split)?
        .iter()
        .map(|s| Ok((s.id.clone(), derive_ground_truth(s, &archive.grid)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let report = evaluate(&archive.predictions, &gts, thresholds)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    let text = report.to_text(per_waypoint);
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, &text)?;
    }
    Ok(())
}
