#![allow(dead_code)]

use std::path::Path;

use scenehoi::cli::RunConfig;
use scenehoi::datagen::{GenConfig, Scene};
use scenehoi::evalkit::{Candidate, HoiDetection, Records};
use scenehoi::matchloss::TrainConfig;
use scenehoi::model::ModelConfig;

/// Model used by the overfit and benchmark runs.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        stem_channels: 16,
        embed_width: 16,
        reduce_layers: 2,
        seg_layers: 2,
        encoder_layers: 1,
        relation_decoder_layers: 1,
        r2i_layers: 1,
        feature_transfer_layers: 1,
        query_transfer_layers: 1,
        hoi_decoder_layers: 1,
        relation_queries: 10,
        hoi_queries: 10,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// 500 steps on 4 scenes: 75 scene-graph epochs then 25 alternating epochs.
pub fn overfit_train() -> TrainConfig {
    TrainConfig { stage1_epochs: 75, stage2_epochs: 25, learning_rate: 2e-3, ..TrainConfig::default() }
}

pub fn overfit_gen(seed: u64) -> GenConfig {
    GenConfig { seed, human_fraction: 0.6, ..GenConfig::default() }
}

/// A run that finishes in about a second, with data under `dir`.
pub fn quick_run(dir: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed: Some(seed), output_dir: dir.join("out"), ..RunConfig::default() };
    cfg.data.train = dir.join("data/train.jsonl");
    cfg.data.val = dir.join("data/val.jsonl");
    cfg.data.test = dir.join("data/test.jsonl");
    cfg.data.splits = [6, 3, 4];
    cfg.gen.human_fraction = 0.6;
    cfg.model = ModelConfig { relation_queries: 6, hoi_queries: 6, embed_width: 8, stem_channels: 8, ..small_model() };
    cfg.train = TrainConfig { stage1_epochs: 2, stage2_epochs: 1, learning_rate: 2e-3, ..TrainConfig::default() };
    cfg.resolve().unwrap();
    cfg
}

/// Predictions that reproduce every ground truth with confidence 1.
pub fn oracle_records(scenes: &[Scene]) -> Records {
    let mut r = Records::default();
    for s in scenes {
        let cands = s
            .rel_targets()
            .iter()
            .enumerate()
            .map(|(q, t)| Candidate {
                query: q,
                subj_box: t.subj_box,
                subj_label: t.subj_label,
                subj_score: 1.0,
                predicate: t.predicate,
                rel_score: 1.0,
                obj_box: t.obj_box,
                obj_label: t.obj_label,
                obj_score: 1.0,
                score: 1.0,
            })
            .collect();
        r.rel.insert(s.index, cands);
        for (q, t) in s.hoi_targets().iter().enumerate() {
            r.hoi.push(HoiDetection {
                image: s.index,
                query: q,
                human_box: t.human_box,
                human_score: 1.0,
                action: t.action,
                act_score: 1.0,
                obj_box: t.obj_box,
                obj_label: t.obj_label,
                obj_score: 1.0,
                score: 1.0,
            });
        }
    }
    r
}
