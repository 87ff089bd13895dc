//! One forward pass through the full model, printing the shape of every
//! stage and the top-ranked outputs.

use scenehoi::datagen::{generate_scene, GenConfig};
use scenehoi::model::{Model, ModelConfig};
use scenehoi::nn::Ctx;

fn main() -> scenehoi::Result<()> {
    let cfg = ModelConfig::default();
    let scene = generate_scene(&GenConfig { seed: 3, ..GenConfig::default() }, 0)?;
    let model = Model::new(cfg.clone(), 0)?;
    println!("{} parameter tensors, {} values", model.store.len(), model.store.num_values());

    let mut ctx = Ctx::eval(&model.store);
    let out = model.forward(&mut ctx, &scene.image, true)?;
    let t = &ctx.tape;
    println!("feature grid {:?}", out.grid);
    println!("encoded sequence {:?}", t.shape(out.encoded.var));
    println!("relation subject boxes {:?}", t.shape(out.rel.subj_box));
    println!("relation predicate logits {:?}", t.shape(out.rel.rel_logits));
    if let Some(hoi) = &out.hoi {
        println!("interaction action logits {:?}", t.shape(hoi.act_logits));
    }
    if let Some(mem) = out.hoi_memory {
        println!("interaction memory {:?}", t.shape(mem));
    }

    let p = model.predict(&scene.image, scene.index)?;
    for c in p.rel.iter().take(3) {
        println!("rel   query {:>3} {}-{}-{} score {:.4}", c.query, c.subj_label, c.predicate, c.obj_label, c.score);
    }
    for d in p.hoi.iter().take(3) {
        println!("hoi   query {:>3} action {} object {} score {:.4}", d.query, d.action, d.obj_label, d.score);
    }
    Ok(())
}
