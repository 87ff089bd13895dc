mod common;

use std::collections::BTreeMap;

use scenehoi::datagen::{generate_scene, GenConfig, Scene};
use scenehoi::features::{cell_argmax, seg_loss_from_logits};
use scenehoi::geometry::{downsample_target, rasterize_boxes, SegTarget};
use scenehoi::matchloss::{AdamW, AdamWConfig};
use scenehoi::model::{ForwardOutputs, Model};
use scenehoi::nn::{Ctx, ParamId};
use scenehoi::numeric::{Tensor, Var};

use common::small_model;

fn scene() -> Scene {
    generate_scene(&GenConfig { seed: 12, min_objects: 3, max_objects: 3, ..GenConfig::default() }, 0).unwrap()
}

fn cell_target(model: &Model, scene: &Scene, grid: (usize, usize)) -> SegTarget {
    let full = rasterize_boxes(
        &scene.boxes(),
        &scene.labels(),
        scene.image.height,
        scene.image.width,
        model.config.object_classes,
    )
    .unwrap();
    downsample_target(&full, grid.0, grid.1).unwrap()
}

/// Trains the parameters whose names start with `prefix` on one scene with a
/// single loss picked from the forward outputs. Returns the loss before each
/// step.
fn fit(
    model: &mut Model,
    scene: &Scene,
    steps: usize,
    prefix: &str,
    rate: f64,
    pick: impl Fn(&mut Ctx, &ForwardOutputs) -> Var,
) -> Vec<f64> {
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let mut losses = Vec::new();
    for _ in 0..steps {
        let grads: BTreeMap<ParamId, Tensor> = {
            let mut ctx = Ctx::eval(&model.store);
            let out = model.forward(&mut ctx, &scene.image, false).unwrap();
            let loss = pick(&mut ctx, &out);
            losses.push(ctx.tape.value(loss).item());
            let mut g = ctx.tape.backward(loss).unwrap();
            let bound: Vec<_> = ctx.bound_params().collect();
            bound
                .into_iter()
                .filter(|(id, _)| model.store.get(*id).name.starts_with(prefix))
                .filter_map(|(id, leaf)| g.take(leaf).map(|t| (id, t)))
                .collect()
        };
        opt.step(&mut model.store, &grads, |_| rate);
    }
    losses
}

#[test]
fn segmentation_head_overfits_one_scene() {
    let scene = scene();
    let mut model = Model::new(small_model(), 0).unwrap();
    let grid = (model.config.grid(), model.config.grid());
    let target = cell_target(&model, &scene, grid);
    let losses = fit(&mut model, &scene, 200, "", 5e-3, |ctx, out| {
        seg_loss_from_logits(ctx, out.seg_logits.unwrap(), &target).unwrap()
    });
    assert!(losses[199] < 0.1 * losses[0], "seg loss {} -> {}", losses[0], losses[199]);

    let mut ctx = Ctx::eval(&model.store);
    let out = model.forward(&mut ctx, &scene.image, false).unwrap();
    let scores = ctx.tape.value(out.seg_logits.unwrap()).map(|x| 1.0 / (1.0 + (-x).exp()));
    let picks = cell_argmax(&scores);
    let correct = picks
        .iter()
        .enumerate()
        .filter(|(cell, &c)| target.get(cell / target.width(), cell % target.width(), c))
        .count();
    let share = correct as f64 / picks.len() as f64;
    assert!(share >= 0.95, "{correct} of {} cells", picks.len());
}

/// The image features stay fixed so the hard semantic map cannot switch
/// underneath the encoder.
#[test]
fn alignment_loss_descends_on_one_image() {
    let scene = scene();
    let mut model = Model::new(small_model(), 0).unwrap();
    let losses = fit(&mut model, &scene, 100, "encoder", 1e-4, |_, out| out.align.unwrap());
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises as f64 <= 0.05 * (losses.len() - 1) as f64, "{rises} rises in {:?}", losses);
    assert!(losses[99] < 0.5 * losses[0], "{:?}", losses);
}
