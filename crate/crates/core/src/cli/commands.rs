//! The four commands behind the `scenehoi` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::datagen::{generate_split, load_annotations, statistics, write_annotations, Header, Scene, Statistics};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, longtail_groups_with, parse_records, records_to_string, MetricsReport, PredicateGroups, Records};
use crate::features::Image;
use crate::matchloss::{Checkpoint, Trainer, CSV_HEADER};
use crate::model::{Model, ModelConfig};

pub const LOSS_LOG: &str = "loss.csv";
pub const LATEST_CHECKPOINT: &str = "checkpoint.ckpt";
pub const EVAL_REPORT: &str = "eval.json";
pub const PREDICTIONS: &str = "predictions.tsv";

/// Metrics plus the digests that identify what produced them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub config_digest: String,
    pub data_digests: Vec<(String, String)>,
    pub step: u64,
    pub split: String,
    pub metrics: MetricsReport,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file {} does not exist", path.display())))
    }
}

fn check_header(header: &Header, model: &ModelConfig, path: &Path) -> Result<()> {
    let expected = (model.object_classes, model.relation_classes, model.action_classes);
    let got = (header.object_classes, header.relation_classes, header.action_classes);
    if expected != got {
        return Err(Error::Config(format!(
            "{}: class counts {got:?} do not match the model's {expected:?}",
            path.display()
        )));
    }
    Ok(())
}

/// Loads a split and checks it against the model configuration.
pub fn load_split(path: &Path, model: &ModelConfig) -> Result<Vec<Scene>> {
    let (header, scenes) = load_annotations(path)?;
    check_header(&header, model, path)?;
    for s in &scenes {
        if s.image.height != model.image_size || s.image.width != model.image_size {
            return Err(Error::Config(format!(
                "{}: scene {} is {}x{}, the model expects {}x{}",
                path.display(),
                s.index,
                s.image.height,
                s.image.width,
                model.image_size,
                model.image_size
            )));
        }
    }
    Ok(scenes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenSummary {
    pub files: Vec<(PathBuf, String)>,
    pub statistics: Vec<(String, Statistics)>,
    /// Head/body/tail partition from training predicate counts.
    pub groups: PredicateGroups,
}

/// Writes the train, val and test annotation files. Scene indices are
/// contiguous across splits.
pub fn cmd_gen(cfg: &RunConfig) -> Result<GenSummary> {
    let header = cfg.gen.header();
    let mut start = 0u64;
    let mut summary = GenSummary { files: Vec::new(), statistics: Vec::new(), groups: PredicateGroups::default() };
    let targets = [("train", &cfg.data.train), ("val", &cfg.data.val), ("test", &cfg.data.test)];
    for ((split, path), &count) in targets.into_iter().zip(&cfg.data.splits) {
        let scenes = generate_split(&cfg.gen, start, count, split)?;
        start += count as u64;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_annotations(path, &scenes, &header, cfg.data.storage)?;
        summary.files.push((path.clone(), file_digest(path)?));
        let stats = statistics(&scenes);
        if split == "train" {
            let mut counts: std::collections::BTreeMap<usize, usize> =
                (0..cfg.gen.relation_classes).map(|p| (p, 0)).collect();
            counts.extend(&stats.predicates);
            summary.groups = longtail_groups_with(&counts, cfg.eval.settings.groups);
        }
        summary.statistics.push((split.to_string(), stats));
    }
    Ok(summary)
}

fn metrics_for(model: &Model, scenes: &[Scene], train: &[Scene], cfg: &RunConfig) -> Result<(Records, MetricsReport)> {
    let mut records = Records::default();
    for s in scenes {
        let p = model.predict(&s.image, s.index)?;
        records.rel.insert(s.index, p.rel);
        records.hoi.extend(p.hoi);
    }
    let metrics = evaluate(&records, scenes, train, &cfg.eval.settings)?;
    Ok((records, metrics))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub reports: Vec<PathBuf>,
    pub checkpoint: PathBuf,
}

/// Trains under the run configuration. With `resume`, continues from the
/// latest checkpoint in the output directory when one exists.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    require(&cfg.data.train, "training")?;
    let train = load_split(&cfg.data.train, &cfg.model)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset(cfg.data.train.display().to_string()));
    }
    let (report_split, report_path) =
        if cfg.data.val.is_file() { ("val", &cfg.data.val) } else { ("train", &cfg.data.train) };
    let report_scenes = load_split(report_path, &cfg.model)?;
    let data_digests = vec![
        ("train".to_string(), file_digest(&cfg.data.train)?),
        (report_split.to_string(), file_digest(report_path)?),
    ];

    let out = &cfg.output_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;

    let model = Model::new(cfg.model.clone(), cfg.seed())?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let latest = out.join(LATEST_CHECKPOINT);
    let log_path = out.join(LOSS_LOG);
    let mut log_text = format!("{CSV_HEADER}\n");
    if resume && latest.is_file() {
        trainer.restore(&Checkpoint::read(&latest)?)?;
        // keep rows written before the checkpoint
        if let Ok(old) = fs::read_to_string(&log_path) {
            for row in old.lines().skip(1) {
                let step: Option<u64> = row.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < trainer.step) {
                    log_text.push_str(row);
                    log_text.push('\n');
                }
            }
        }
    }
    write_file(&log_path, &log_text)?;
    let mut log = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let total = trainer.total_steps(&train);
    let mut reports = Vec::new();
    let config_digest = cfg.model.digest();
    trainer.run(&train, |tr, plan, row| {
        writeln!(log, "{}", row.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        if plan.epoch_end {
            let ck = tr.checkpoint();
            ck.write(&ckpt_dir.join(format!("epoch-{:04}.ckpt", plan.epoch)))?;
            ck.write(&latest)?;
        }
        let stage_end = plan.step + 1 == total || tr.config.plan(plan.step + 1, train.len()).stage != plan.stage;
        if stage_end {
            let (_, metrics) = metrics_for(&tr.model, &report_scenes, &train, cfg)?;
            let report = Report {
                config_digest: config_digest.clone(),
                data_digests: data_digests.clone(),
                step: tr.step,
                split: report_split.to_string(),
                metrics,
            };
            let path = out.join(format!("report-stage{}.json", plan.stage));
            write_file(&path, &report.to_json())?;
            reports.push(path);
        }
        Ok(())
    })?;
    if !latest.is_file() {
        trainer.checkpoint().write(&latest)?;
    }
    Ok(TrainSummary { steps: trainer.step, reports, checkpoint: latest })
}

/// Loads a checkpoint after checking it was written for this model config.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Model, u64)> {
    require(checkpoint, "checkpoint")?;
    let ck = Checkpoint::read(checkpoint)?;
    ck.expect_digest(&cfg.model.digest())?;
    let mut trainer = Trainer::new(Model::new(cfg.model.clone(), cfg.seed())?, cfg.train.clone())?;
    trainer.restore(&ck)?;
    Ok((trainer.model, ck.step))
}

/// Scores the test split, either with the checkpointed model or with
/// externally produced prediction records. Writes `eval.json` and, for
/// model predictions, `predictions.tsv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, records: Option<&Path>) -> Result<Report> {
    require(&cfg.data.test, "test")?;
    require(&cfg.data.train, "training")?;
    let test = load_split(&cfg.data.test, &cfg.model)?;
    let train = load_split(&cfg.data.train, &cfg.model)?;
    let data_digests =
        vec![("train".to_string(), file_digest(&cfg.data.train)?), ("test".to_string(), file_digest(&cfg.data.test)?)];
    let (metrics, step) = match (checkpoint, records) {
        (_, Some(path)) => {
            require(path, "records")?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            (evaluate(&parse_records(&text)?, &test, &train, &cfg.eval.settings)?, 0)
        }
        (Some(path), None) => {
            let (model, step) = load_model(cfg, path)?;
            let (recs, metrics) = metrics_for(&model, &test, &train, cfg)?;
            write_file(&cfg.output_dir.join(PREDICTIONS), &records_to_string(&recs))?;
            (metrics, step)
        }
        (None, None) => return Err(Error::Config("eval needs a checkpoint or a records file".into())),
    };
    let report = Report { config_digest: cfg.model.digest(), data_digests, step, split: "test".into(), metrics };
    write_file(&cfg.output_dir.join(EVAL_REPORT), &report.to_json())?;
    Ok(report)
}

/// Top-`k` relation and interaction records for one image file.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, image: &Path, image_id: u64, k: usize) -> Result<String> {
    let (model, _) = load_model(cfg, checkpoint)?;
    let img = Image::load(image)?;
    if img.height != cfg.model.image_size || img.width != cfg.model.image_size {
        return Err(Error::Image(format!(
            "{} is {}x{}, the model expects {}x{}",
            image.display(),
            img.height,
            img.width,
            cfg.model.image_size,
            cfg.model.image_size
        )));
    }
    let p = model.predict(&img, image_id)?;
    let mut records = Records::default();
    records.rel.insert(image_id, p.rel.into_iter().take(k).collect());
    records.hoi = p.hoi.into_iter().take(k).collect();
    Ok(records_to_string(&records))
}
