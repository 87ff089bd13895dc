//! Two-stage training: scene-graph steps first, then round-robin scene-graph
//! and interaction steps with the rates shifted toward the interaction branch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::{scene_loss, total_loss_value, LossTerms, LossWeights, Task};
use super::optim::{AdamW, AdamWConfig, Moments};
use crate::datagen::Scene;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Param, ParamGroup, ParamId};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Scene-graph stage followed by alternating joint training.
    #[default]
    Joint,
    /// Interaction steps only, with the scene-graph path frozen.
    HoiOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub mode: TrainMode,
    /// Probability of a horizontal flip per step.
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 20,
            stage2_epochs: 10,
            learning_rate: 1e-3,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            mode: TrainMode::Joint,
            flip_prob: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must be in [0, 1]".into()));
        }
        if self.loss.unmatched < 0.0 {
            return Err(Error::Config("unmatched weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate of a parameter in a stage. Teacher-initialized
    /// classifiers never exceed a tenth of the base rate.
    pub fn rate(&self, stage: u8, param: &Param) -> f64 {
        let r = self.learning_rate;
        let rate = match (self.mode, stage, param.group) {
            (TrainMode::HoiOnly, _, ParamGroup::Hoi) => r,
            (TrainMode::HoiOnly, _, _) => 0.0,
            (_, 1, ParamGroup::Backbone) => r / 10.0,
            (_, 1, ParamGroup::Sgg) => r,
            (_, 1, ParamGroup::Hoi) => 0.0,
            (_, _, ParamGroup::Hoi) => r,
            (_, _, _) => r / 10.0,
        };
        if param.teacher_init {
            rate.min(r / 10.0)
        } else {
            rate
        }
    }

    pub fn total_steps(&self, scenes: usize) -> u64 {
        let n = scenes as u64;
        match self.mode {
            TrainMode::Joint => (self.stage1_epochs as u64 + 2 * self.stage2_epochs as u64) * n,
            TrainMode::HoiOnly => self.stage2_epochs as u64 * n,
        }
    }

    /// What step `step` does. Depends only on the seed and the step index.
    pub fn plan(&self, step: u64, scenes: usize) -> StepPlan {
        let n = scenes as u64;
        let s1 = self.stage1_epochs as u64 * n;
        match self.mode {
            TrainMode::Joint if step < s1 => {
                let (epoch, pos) = (step / n, step % n);
                StepPlan {
                    step,
                    stage: 1,
                    epoch,
                    task: Task::Sgg,
                    scene: permutation(self.seed, 0, epoch, scenes)[pos as usize],
                    epoch_end: pos + 1 == n,
                }
            }
            TrainMode::Joint => {
                let k = step - s1;
                let (local, pos) = (k / (2 * n), k % (2 * n));
                let task = if pos % 2 == 0 { Task::Sgg } else { Task::Hoi };
                StepPlan {
                    step,
                    stage: 2,
                    epoch: self.stage1_epochs as u64 + local,
                    task,
                    scene: permutation(self.seed, 1 + pos % 2, local, scenes)[(pos / 2) as usize],
                    epoch_end: pos + 1 == 2 * n,
                }
            }
            TrainMode::HoiOnly => {
                let (epoch, pos) = (step / n, step % n);
                StepPlan {
                    step,
                    stage: 2,
                    epoch,
                    task: Task::Hoi,
                    scene: permutation(self.seed, 2, epoch, scenes)[pos as usize],
                    epoch_end: pos + 1 == n,
                }
            }
        }
    }
}

/// Scene order for one epoch of one data stream.
pub fn permutation(seed: u64, stream: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 48) ^ epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepPlan {
    pub step: u64,
    pub stage: u8,
    pub epoch: u64,
    pub task: Task,
    pub scene: usize,
    /// Last step of its epoch.
    pub epoch_end: bool,
}

/// One row of the loss log. Absent terms are recorded as zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub stage: u8,
    pub task: Task,
    pub total: f64,
    pub seg: f64,
    pub align: f64,
    pub rel: f64,
    pub hoi: f64,
}

pub const CSV_HEADER: &str = "step,stage,task,total,seg,align,rel,hoi";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.stage,
            self.task.name(),
            self.total,
            self.seg,
            self.align,
            self.rel,
            self.hoi
        )
    }
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Steps completed.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.mode == TrainMode::HoiOnly && !model.config.ablation.hoi_stop_grad {
            return Err(Error::Config("hoi-only training requires hoi_stop_grad".into()));
        }
        let optimizer = AdamW::new(config.optimizer);
        Ok(Self { model, optimizer, config, step: 0 })
    }

    pub fn total_steps(&self, scenes: &[Scene]) -> u64 {
        self.config.total_steps(scenes.len())
    }

    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream((1 << 63) | step);
        rng
    }

    /// Loss terms and parameter gradients for one scene under a training
    /// context seeded with `dropout_seed`.
    pub fn gradients(
        &self,
        scene: &Scene,
        task: Task,
        dropout_seed: u64,
    ) -> Result<(LossTerms<f64>, BTreeMap<ParamId, Tensor>)> {
        let mut ctx = Ctx::train(&self.model.store, self.model.config.dropout, dropout_seed);
        let loss = scene_loss(&self.model, &mut ctx, scene, task, &self.config.loss)?;
        let mut grads = ctx.tape.backward(loss.total)?;
        let bound: Vec<(ParamId, crate::numeric::Var)> = ctx.bound_params().collect();
        let out = bound
            .into_iter()
            .filter_map(|(id, leaf)| grads.take(leaf).map(|g| (id, g)))
            .collect();
        Ok((loss.terms, out))
    }

    /// Runs the next planned step.
    pub fn train_step(&mut self, scenes: &[Scene]) -> Result<(StepPlan, StepLog)> {
        if scenes.is_empty() {
            return Err(Error::EmptyDataset("training set".into()));
        }
        let plan = self.config.plan(self.step, scenes.len());
        let mut rng = self.step_rng(plan.step);
        let flip = rng.gen::<f64>() < self.config.flip_prob;
        let dropout_seed = rng.gen::<u64>();
        let scene = if flip { scenes[plan.scene].flipped() } else { scenes[plan.scene].clone() };
        let (terms, grads) = self.gradients(&scene, plan.task, dropout_seed)?;
        let Self { model, optimizer, config, .. } = self;
        optimizer.step(&mut model.store, &grads, |p| config.rate(plan.stage, p));
        self.step += 1;
        let log = StepLog {
            step: plan.step,
            stage: plan.stage,
            task: plan.task,
            total: total_loss_value(&terms, &self.config.loss),
            seg: terms.seg.unwrap_or(0.0),
            align: terms.align.unwrap_or(0.0),
            rel: terms.rel.unwrap_or(0.0),
            hoi: terms.hoi.unwrap_or(0.0),
        };
        Ok((plan, log))
    }

    /// Trains from the current step to the end of the schedule, calling
    /// `on_step` after every update.
    pub fn run(
        &mut self,
        scenes: &[Scene],
        mut on_step: impl FnMut(&Trainer, &StepPlan, &StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        if scenes.is_empty() {
            return Err(Error::EmptyDataset("training set".into()));
        }
        let total = self.total_steps(scenes);
        let mut logs = Vec::new();
        while self.step < total {
            let (plan, log) = self.train_step(scenes)?;
            on_step(self, &plan, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Mean eval-mode objective over scenes, scene-graph plus interaction.
    pub fn evaluate_loss(&self, scenes: &[Scene]) -> Result<f64> {
        if scenes.is_empty() {
            return Err(Error::EmptyDataset("evaluation set".into()));
        }
        let mut sum = 0.0;
        for scene in scenes {
            for task in [Task::Sgg, Task::Hoi] {
                let mut ctx = Ctx::eval(&self.model.store);
                let l = scene_loss(&self.model, &mut ctx, scene, task, &self.config.loss)?;
                sum += ctx.tape.value(l.total).item();
            }
        }
        Ok(sum / scenes.len() as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut blobs = Vec::new();
        for (id, p) in self.model.store.iter() {
            blobs.push((p.name.clone(), p.value.clone()));
            if let Some(st) = self.optimizer.state.get(&id) {
                blobs.push((format!("{}#m", p.name), st.m.clone()));
                blobs.push((format!("{}#v", p.name), st.v.clone()));
                blobs.push((format!("{}#t", p.name), Tensor::scalar(st.steps as f64)));
            }
        }
        Checkpoint { digest: self.model.config.digest(), step: self.step, blobs }
    }

    /// Loads parameters, optimizer state and the step counter.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.expect_digest(&self.model.config.digest())?;
        let blobs: BTreeMap<&str, &Tensor> = ck.blobs.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut state = BTreeMap::new();
        let ids: Vec<ParamId> = self.model.store.ids().collect();
        for id in ids {
            let p = self.model.store.get_mut(id);
            let value = blobs.get(p.name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing {}", p.name)))?;
            if value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", p.name)));
            }
            p.value = (*value).clone();
            let key = |s: &str| format!("{}#{s}", p.name);
            if let (Some(m), Some(v), Some(t)) =
                (blobs.get(key("m").as_str()), blobs.get(key("v").as_str()), blobs.get(key("t").as_str()))
            {
                state.insert(id, Moments { m: (*m).clone(), v: (*v).clone(), steps: t.item() as u64 });
            }
        }
        self.optimizer.state = state;
        self.step = ck.step;
        Ok(())
    }

    /// Digest of a parameter group, for checking which groups moved.
    pub fn group_digest(&self, group: ParamGroup) -> String {
        self.model.group_digest(group)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, GenConfig};
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            object_classes: 4,
            relation_classes: 3,
            action_classes: 2,
            image_size: 16,
            stem_channels: 8,
            embed_width: 4,
            heads: 2,
            ffn_expansion: 2,
            reduce_layers: 2,
            seg_layers: 1,
            encoder_layers: 1,
            relation_decoder_layers: 1,
            r2i_layers: 1,
            feature_transfer_layers: 1,
            query_transfer_layers: 1,
            hoi_decoder_layers: 1,
            relation_queries: 5,
            hoi_queries: 5,
            ..ModelConfig::default()
        }
    }

    fn scenes() -> Vec<Scene> {
        let g = GenConfig {
            object_classes: 4,
            relation_classes: 3,
            action_classes: 2,
            image_size: 16,
            human_fraction: 0.6,
            seed: 3,
            ..GenConfig::default()
        };
        generate_split(&g, 0, 3, "train").unwrap()
    }

    #[test]
    fn plan_covers_each_scene_once_per_epoch() {
        let cfg = TrainConfig { stage1_epochs: 2, stage2_epochs: 1, ..Default::default() };
        let plans: Vec<StepPlan> = (0..cfg.total_steps(5)).map(|s| cfg.plan(s, 5)).collect();
        assert_eq!(plans.len(), 20);
        let mut first: Vec<usize> = plans[..5].iter().map(|p| p.scene).collect();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert!(plans[..10].iter().all(|p| p.stage == 1 && p.task == Task::Sgg));
        let tasks: Vec<Task> = plans[10..].iter().map(|p| p.task).collect();
        assert!(tasks.chunks(2).all(|c| c == [Task::Sgg, Task::Hoi]));
        let mut hoi: Vec<usize> = plans[10..].iter().filter(|p| p.task == Task::Hoi).map(|p| p.scene).collect();
        hoi.sort_unstable();
        assert_eq!(hoi, vec![0, 1, 2, 3, 4]);
        assert_eq!(plans.iter().filter(|p| p.epoch_end).count(), 3);
    }

    #[test]
    fn rates_follow_stage_and_mode() {
        let cfg = TrainConfig { learning_rate: 1.0, ..Default::default() };
        let p = |group, teacher_init| Param { name: String::new(), value: Tensor::scalar(0.0), group, teacher_init };
        assert_eq!(cfg.rate(1, &p(ParamGroup::Backbone, false)), 0.1);
        assert_eq!(cfg.rate(1, &p(ParamGroup::Sgg, false)), 1.0);
        assert_eq!(cfg.rate(1, &p(ParamGroup::Hoi, false)), 0.0);
        assert_eq!(cfg.rate(2, &p(ParamGroup::Sgg, false)), 0.1);
        assert_eq!(cfg.rate(2, &p(ParamGroup::Hoi, false)), 1.0);
        assert_eq!(cfg.rate(2, &p(ParamGroup::Hoi, true)), 0.1);
        let hoi_only = TrainConfig { mode: TrainMode::HoiOnly, ..cfg };
        assert_eq!(hoi_only.rate(2, &p(ParamGroup::Sgg, false)), 0.0);
        assert_eq!(hoi_only.rate(2, &p(ParamGroup::Backbone, false)), 0.0);
    }

    #[test]
    fn stage_one_never_reaches_interaction_parameters() {
        let scenes = scenes();
        let trainer = Trainer::new(Model::new(tiny(), 1).unwrap(), TrainConfig::default()).unwrap();
        let (_, grads) = trainer.gradients(&scenes[0], Task::Sgg, 0).unwrap();
        for id in trainer.model.group_params(ParamGroup::Hoi) {
            let norm = grads.get(&id).map_or(0.0, |g| g.norm());
            assert_eq!(norm, 0.0, "{}", trainer.model.store.get(id).name);
        }
        let mut trainer = trainer;
        trainer.config.stage2_epochs = 0;
        let before = trainer.group_digest(ParamGroup::Hoi);
        let sgg_before = trainer.group_digest(ParamGroup::Sgg);
        trainer.config.stage1_epochs = 1;
        trainer.run(&scenes, |_, _, _| Ok(())).unwrap();
        assert_eq!(before, trainer.group_digest(ParamGroup::Hoi));
        assert_ne!(sgg_before, trainer.group_digest(ParamGroup::Sgg));
    }

    #[test]
    fn resume_reproduces_next_step_bit_for_bit() {
        let scenes = scenes();
        let cfg = TrainConfig { stage1_epochs: 1, stage2_epochs: 1, seed: 9, ..Default::default() };
        let mut a = Trainer::new(Model::new(tiny(), 4).unwrap(), cfg.clone()).unwrap();
        for _ in 0..4 {
            a.train_step(&scenes).unwrap();
        }
        let ck = Checkpoint::from_bytes(&a.checkpoint().to_bytes()).unwrap();
        let next_a: Vec<StepLog> = (0..3).map(|_| a.train_step(&scenes).unwrap().1).collect();
        let mut b = Trainer::new(Model::new(tiny(), 99).unwrap(), cfg).unwrap();
        b.restore(&ck).unwrap();
        let next_b: Vec<StepLog> = (0..3).map(|_| b.train_step(&scenes).unwrap().1).collect();
        for (x, y) in next_a.iter().zip(&next_b) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn restore_refuses_other_config() {
        let a = Trainer::new(Model::new(tiny(), 1).unwrap(), TrainConfig::default()).unwrap();
        let other = ModelConfig { relation_queries: 6, ..tiny() };
        let mut b = Trainer::new(Model::new(other, 1).unwrap(), TrainConfig::default()).unwrap();
        assert!(matches!(b.restore(&a.checkpoint()), Err(Error::DigestMismatch { .. })));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut t = Trainer::new(Model::new(tiny(), 1).unwrap(), TrainConfig::default()).unwrap();
        assert!(matches!(t.run(&[], |_, _, _| Ok(())), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn csv_row_format() {
        let log = StepLog { step: 3, stage: 2, task: Task::Hoi, total: 1.5, seg: 0.0, align: 0.0, rel: 0.0, hoi: 1.5 };
        assert_eq!(log.csv_row(), "3,2,hoi,1.5,0,0,0,1.5");
        assert_eq!(CSV_HEADER.split(',').count(), log.csv_row().split(',').count());
    }
}
