//! Two-stage training on four scenes until the model memorizes them.

use scenehoi::datagen::{generate_split, GenConfig};
use scenehoi::evalkit::{evaluate, EvalSettings, Records};
use scenehoi::matchloss::{TrainConfig, Trainer};
use scenehoi::model::{Model, ModelConfig};

fn main() -> scenehoi::Result<()> {
    let scenes = generate_split(&GenConfig { seed: 1, human_fraction: 0.6, ..GenConfig::default() }, 0, 4, "train")?;
    let model_cfg = ModelConfig {
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
    };
    let train_cfg = TrainConfig { stage1_epochs: 75, stage2_epochs: 25, learning_rate: 2e-3, ..TrainConfig::default() };
    let mut trainer = Trainer::new(Model::new(model_cfg, 0)?, train_cfg)?;
    println!("initial loss {:.4}", trainer.evaluate_loss(&scenes)?);
    trainer.run(&scenes, |_, plan, log| {
        if plan.epoch_end && plan.epoch % 10 == 9 {
            println!("epoch {:>3} stage {} step {:>4} loss {:.4}", plan.epoch, plan.stage, log.step, log.total);
        }
        Ok(())
    })?;
    println!("final loss {:.4}", trainer.evaluate_loss(&scenes)?);

    let mut records = Records::default();
    for s in &scenes {
        let p = trainer.model.predict(&s.image, s.index)?;
        records.rel.insert(s.index, p.rel);
        records.hoi.extend(p.hoi);
    }
    let m = evaluate(&records, &scenes, &scenes, &EvalSettings::standard())?;
    println!("R@100 {:.3}  mAP_role {:.3}", m.constrained.recall[&100], m.map_role.map);
    Ok(())
}
