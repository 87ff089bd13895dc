//! Builds every named model variant and reports how many parameters the
//! joint loss actually reaches in each.

use scenehoi::datagen::{generate_split, GenConfig};
use scenehoi::matchloss::{joint_loss, LossWeights};
use scenehoi::model::{Ablation, Model, ModelConfig};
use scenehoi::nn::Ctx;

fn main() -> scenehoi::Result<()> {
    let base = ModelConfig { embed_width: 16, stem_channels: 8, relation_queries: 8, hoi_queries: 8, ..ModelConfig::default() };
    let gen = GenConfig { seed: 2, human_fraction: 0.8, ..GenConfig::default() };
    let scene = generate_split(&gen, 0, 20, "train")?.into_iter().find(|s| !s.hois.is_empty()).expect("an interaction");
    println!("{:<14} {:>8} {:>10} {:>8}", "variant", "tensors", "values", "reached");
    for name in Ablation::VARIANTS {
        let ablation = Ablation::variant(name)?;
        for w in ablation.warnings() {
            println!("  warning: {w}");
        }
        let model = Model::new(ModelConfig { ablation, ..base.clone() }, 0)?;
        let mut ctx = Ctx::eval(&model.store);
        let loss = joint_loss(&model, &mut ctx, &scene, &LossWeights::default())?.total;
        let reached = ctx.tape.reachable_leaves(loss);
        let live = ctx.bound_params().filter(|(_, v)| reached.contains(v)).count();
        println!("{name:<14} {:>8} {:>10} {:>8}", model.store.len(), model.store.num_values(), live);
    }
    Ok(())
}
