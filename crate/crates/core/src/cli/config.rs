//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{GenConfig, ImageStorage};
use crate::error::{Error, Result};
use crate::evalkit::EvalSettings;
use crate::matchloss::TrainConfig;
use crate::model::{Ablation, ModelConfig, SemanticSource};
use crate::relnet::{ClassifierInit, VlMode};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ROOT_ENV: &str = "SCENEHOI_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    /// Scene counts written by `gen` for train, val and test.
    pub splits: [usize; 3],
    pub storage: ImageStorage,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/train.jsonl"),
            val: PathBuf::from("data/val.jsonl"),
            test: PathBuf::from("data/test.jsonl"),
            splits: [100, 20, 40],
            storage: ImageStorage::Render,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub settings: EvalSettings,
    /// Records printed per task by `predict`.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { settings: EvalSettings::standard(), top_k: 10 }
    }
}

/// Everything a command needs. The top-level seed drives data generation,
/// weight initialization and the training order; the `seed` fields inside
/// `gen` and `train` are overwritten by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values; `None` and `false` leave the file value alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub learning_rate: Option<f64>,
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub variant: Option<String>,
    pub no_hss: bool,
    pub hss_discrete: bool,
    pub hss_wordvec: bool,
    pub no_vl: bool,
    pub vl_mode: Option<VlMode>,
    pub no_fetr: bool,
    pub no_qutr: bool,
    pub no_r2itr: bool,
    pub relq: bool,
    pub classifier_init: Option<ClassifierInit>,
    pub hoi_only: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(r) = self.learning_rate {
            cfg.train.learning_rate = r;
        }
        if let Some(e) = self.stage1_epochs {
            cfg.train.stage1_epochs = e;
        }
        if let Some(e) = self.stage2_epochs {
            cfg.train.stage2_epochs = e;
        }
        let a = &mut cfg.model.ablation;
        if let Some(v) = &self.variant {
            *a = Ablation::variant(v)?;
        }
        let semantic_flags = [self.no_hss, self.hss_discrete, self.hss_wordvec].iter().filter(|&&f| f).count();
        if semantic_flags > 1 {
            return Err(Error::Config("--no-hss, --hss-discrete and --hss-wordvec are mutually exclusive".into()));
        }
        if self.no_hss {
            a.semantic = SemanticSource::None;
        }
        if self.hss_discrete {
            a.semantic = SemanticSource::OneHot;
        }
        if self.hss_wordvec {
            a.semantic = SemanticSource::WordVector;
        }
        if self.no_vl {
            a.alignment = false;
        }
        if let Some(m) = self.vl_mode {
            a.alignment_mode = m;
        }
        if self.no_fetr {
            a.feature_transfer = false;
        }
        if self.no_qutr {
            a.query_transfer = false;
        }
        if self.no_r2itr {
            a.r2i_transfer = false;
        }
        if self.relq {
            a.relation_queries_for_hoi = true;
        }
        if let Some(c) = self.classifier_init {
            a.classifier_init = c;
        }
        if self.hoi_only {
            cfg.train.mode = crate::matchloss::TrainMode::HoiOnly;
            a.hoi_stop_grad = true;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Defaults, then the file, then the output-root environment variable,
    /// then flags. The result is validated.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Self::default(),
        };
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                cfg.output_dir = PathBuf::from(root);
            }
        }
        overrides.apply(&mut cfg)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Propagates the seed and validates every section.
    pub fn resolve(&mut self) -> Result<()> {
        let seed = self.seed.ok_or_else(|| Error::Config("a seed is required (set `seed` or pass --seed)".into()))?;
        self.gen.seed = seed;
        self.train.seed = seed;
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.gen.object_classes != self.model.object_classes
            || self.gen.relation_classes != self.model.relation_classes
            || self.gen.action_classes != self.model.action_classes
        {
            return Err(Error::Config("gen and model class counts differ".into()));
        }
        if self.gen.image_size != self.model.image_size {
            return Err(Error::Config("gen and model image sizes differ".into()));
        }
        if !(self.eval.settings.iou_threshold > 0.0 && self.eval.settings.iou_threshold <= 1.0) {
            return Err(Error::Config("iou_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config has a seed")
    }

    pub fn warnings(&self) -> Vec<String> {
        self.model.ablation.warnings()
    }
}
