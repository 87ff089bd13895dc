//! Match costs, set losses and the combined training objective.

use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian, Assignment, CostMatrix};
use crate::datagen::{HoiTarget, RelTarget, Scene};
use crate::error::{Error, Result};
use crate::features::seg_loss_from_logits;
use crate::geometry::{box_giou, box_l1, boxes_tensor, downsample_target, giou_rows, l1_rows, rasterize_boxes, BBox};
use crate::hoinet::{HoiOutputs, HoiTuple};
use crate::model::Model;
use crate::nn::Ctx;
use crate::numeric::{Tape, Tensor, Var};
use crate::relnet::{RelOutputs, RelTuple};

/// Weights of the matching cost terms and of the auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Box regression (L1 + GIoU) weight.
    pub boxes: f64,
    /// Subject and object class weight.
    pub classes: f64,
    /// Predicate or action class weight.
    pub predicate: f64,
    /// Segmentation loss weight.
    pub seg: f64,
    /// Vision-language alignment loss weight.
    pub align: f64,
    /// Classification weight of unmatched queries toward the background class.
    pub unmatched: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { boxes: 1.0, classes: 2.0, predicate: 4.0, seg: 2.0, align: 4.0, unmatched: 0.1 }
    }
}

/// `L1 + (1 - GIoU)` between two boxes.
pub fn box_pair_cost(pred: &BBox, gt: &BBox) -> f64 {
    box_l1(pred, gt) + 1.0 - box_giou(pred, gt)
}

/// Matching cost of one relation prediction against one ground truth. Class
/// terms are negative probabilities of the true class.
pub fn tuple_match_cost(pred: &RelTuple, gt: &RelTarget, w: &LossWeights) -> f64 {
    let boxes = box_pair_cost(&pred.subj_box, &gt.subj_box) + box_pair_cost(&pred.obj_box, &gt.obj_box);
    let classes = -pred.subj_scores[gt.subj_label] - pred.obj_scores[gt.obj_label];
    w.boxes * boxes + w.classes * classes - w.predicate * pred.rel_scores[gt.predicate]
}

/// Interaction variant: the human probability replaces the subject class term.
pub fn hoi_match_cost(pred: &HoiTuple, gt: &HoiTarget, w: &LossWeights) -> f64 {
    let boxes = box_pair_cost(&pred.human_box, &gt.human_box) + box_pair_cost(&pred.obj_box, &gt.obj_box);
    let classes = -pred.human_score - pred.obj_scores[gt.obj_label];
    w.boxes * boxes + w.classes * classes - w.predicate * pred.act_scores[gt.action]
}

pub fn rel_cost_matrix(preds: &[RelTuple], gts: &[RelTarget], w: &LossWeights) -> Result<CostMatrix> {
    CostMatrix::from_fn(gts.len(), preds.len(), |g, p| tuple_match_cost(&preds[p], &gts[g], w))
}

pub fn hoi_cost_matrix(preds: &[HoiTuple], gts: &[HoiTarget], w: &LossWeights) -> Result<CostMatrix> {
    CostMatrix::from_fn(gts.len(), preds.len(), |g, p| hoi_match_cost(&preds[p], &gts[g], w))
}

/// Summed `L1 + 1 - GIoU` over rows of two `[n, 4]` box tensors.
pub fn box_loss_rows(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let n = tape.shape(pred)[0] as f64;
    let l1 = l1_rows(tape, pred, target)?;
    let giou = giou_rows(tape, pred, target)?;
    let l1 = tape.sum(l1)?;
    let giou = tape.sum(giou)?;
    let d = tape.sub(l1, giou)?;
    let n = tape.scalar(n);
    tape.add(d, n)
}

/// Weighted mean cross-entropy with one target class per row.
fn weighted_ce(tape: &mut Tape, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let (n, c) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Ok(tape.scalar(0.0));
    }
    let mut t = vec![0.0; n * c];
    for q in 0..n {
        t[q * c + targets[q]] = weights[q] / total;
    }
    let ls = tape.log_softmax(logits)?;
    let t = tape.constant(Tensor::new(vec![n, c], t)?);
    let prod = tape.mul(ls, t)?;
    let s = tape.sum(prod)?;
    tape.neg(s)
}

/// Weighted mean binary cross-entropy on `[n, 1]` logits.
fn weighted_bce(tape: &mut Tape, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
    let n = targets.len();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Ok(tape.scalar(0.0));
    }
    // softplus(z) - y z, with softplus(z) = relu(z) + log(1 + exp(-|z|))
    let pos = tape.relu(logits)?;
    let a = tape.abs(logits)?;
    let na = tape.neg(a)?;
    let e = tape.exp(na)?;
    let one = tape.scalar(1.0);
    let e1 = tape.add(e, one)?;
    let lg = tape.log(e1)?;
    let sp = tape.add(pos, lg)?;
    let y = tape.constant(Tensor::new(vec![n, 1], targets.to_vec())?);
    let zy = tape.mul(logits, y)?;
    let per = tape.sub(sp, zy)?;
    let w = tape.constant(Tensor::new(vec![n, 1], weights.iter().map(|x| x / total).collect())?);
    let weighted = tape.mul(per, w)?;
    tape.sum(weighted)
}

/// Matched-pair box loss normalized by the number of ground truths.
fn matched_box_loss(tape: &mut Tape, pred: Var, gt_boxes: &[BBox], pairs: &[(usize, usize)], count: usize) -> Result<Option<Var>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let rows = tape.gather_rows(pred, pairs.iter().map(|&(_, p)| p).collect())?;
    let target = tape.constant(boxes_tensor(&pairs.iter().map(|&(g, _)| gt_boxes[g]).collect::<Vec<_>>()));
    let l = box_loss_rows(tape, rows, target)?;
    Ok(Some(tape.scale(l, 1.0 / count.max(1) as f64)?))
}

fn class_targets(matched: &[Option<usize>], background: usize, label: impl Fn(usize) -> usize) -> Vec<usize> {
    matched.iter().map(|m| m.map_or(background, &label)).collect()
}

fn query_weights(matched: &[Option<usize>], unmatched: f64) -> Vec<f64> {
    matched.iter().map(|m| if m.is_some() { 1.0 } else { unmatched }).collect()
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Option<Var>)]) -> Result<Var> {
    let mut scaled = Vec::new();
    for &(w, t) in terms {
        if let Some(t) = t {
            scaled.push(tape.scale(t, w)?);
        }
    }
    Ok(match tape.add_all(&scaled)? {
        Some(v) => v,
        None => tape.scalar(0.0),
    })
}

/// A set loss together with the matching it was computed under.
#[derive(Clone, Debug)]
pub struct SetLoss {
    pub loss: Var,
    pub assignment: Assignment,
}

/// Hungarian-matched relation loss. Matched queries get box and class terms;
/// unmatched queries are pushed toward the background and non-relation
/// classes with the reduced `unmatched` weight.
pub fn rel_set_loss(tape: &mut Tape, out: &RelOutputs, gts: &[RelTarget], w: &LossWeights) -> Result<SetLoss> {
    let preds = out.tuples(tape);
    if gts.len() > preds.len() {
        return Err(Error::TooManyTargets { targets: gts.len(), predictions: preds.len() });
    }
    let assignment = hungarian(&rel_cost_matrix(&preds, gts, w)?)?;
    let matched = assignment.matched_gt(preds.len());
    let pairs = assignment.by_prediction();
    let weights = query_weights(&matched, w.unmatched);
    let obj_bg = tape.shape(out.subj_logits)[1] - 1;
    let rel_bg = tape.shape(out.rel_logits)[1] - 1;

    let subj_boxes: Vec<BBox> = gts.iter().map(|g| g.subj_box).collect();
    let obj_boxes: Vec<BBox> = gts.iter().map(|g| g.obj_box).collect();
    let box_s = matched_box_loss(tape, out.subj_box, &subj_boxes, &pairs, gts.len())?;
    let box_o = matched_box_loss(tape, out.obj_box, &obj_boxes, &pairs, gts.len())?;
    let ce_s = weighted_ce(tape, out.subj_logits, &class_targets(&matched, obj_bg, |g| gts[g].subj_label), &weights)?;
    let ce_o = weighted_ce(tape, out.obj_logits, &class_targets(&matched, obj_bg, |g| gts[g].obj_label), &weights)?;
    let ce_r = weighted_ce(tape, out.rel_logits, &class_targets(&matched, rel_bg, |g| gts[g].predicate), &weights)?;
    let loss = weighted_sum(
        tape,
        &[(w.boxes, box_s), (w.boxes, box_o), (w.classes, Some(ce_s)), (w.classes, Some(ce_o)), (w.predicate, Some(ce_r))],
    )?;
    Ok(SetLoss { loss, assignment })
}

/// Interaction counterpart of [`rel_set_loss`]; the human score is a binary
/// target, positive for matched queries.
pub fn hoi_set_loss(tape: &mut Tape, out: &HoiOutputs, gts: &[HoiTarget], w: &LossWeights) -> Result<SetLoss> {
    let preds = out.tuples(tape);
    if gts.len() > preds.len() {
        return Err(Error::TooManyTargets { targets: gts.len(), predictions: preds.len() });
    }
    let assignment = hungarian(&hoi_cost_matrix(&preds, gts, w)?)?;
    let matched = assignment.matched_gt(preds.len());
    let pairs = assignment.by_prediction();
    let weights = query_weights(&matched, w.unmatched);
    let obj_bg = tape.shape(out.obj_logits)[1] - 1;
    let act_bg = tape.shape(out.act_logits)[1] - 1;

    let human_boxes: Vec<BBox> = gts.iter().map(|g| g.human_box).collect();
    let obj_boxes: Vec<BBox> = gts.iter().map(|g| g.obj_box).collect();
    let box_h = matched_box_loss(tape, out.human_box, &human_boxes, &pairs, gts.len())?;
    let box_o = matched_box_loss(tape, out.obj_box, &obj_boxes, &pairs, gts.len())?;
    let human_t: Vec<f64> = matched.iter().map(|m| if m.is_some() { 1.0 } else { 0.0 }).collect();
    let bce_h = weighted_bce(tape, out.human_logit, &human_t, &weights)?;
    let ce_o = weighted_ce(tape, out.obj_logits, &class_targets(&matched, obj_bg, |g| gts[g].obj_label), &weights)?;
    let ce_a = weighted_ce(tape, out.act_logits, &class_targets(&matched, act_bg, |g| gts[g].action), &weights)?;
    let loss = weighted_sum(
        tape,
        &[(w.boxes, box_h), (w.boxes, box_o), (w.classes, Some(bce_h)), (w.classes, Some(ce_o)), (w.predicate, Some(ce_a))],
    )?;
    Ok(SetLoss { loss, assignment })
}

/// Loss components of one step; absent terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<T> {
    pub seg: Option<T>,
    pub align: Option<T>,
    pub rel: Option<T>,
    pub hoi: Option<T>,
}

impl<T> Default for LossTerms<T> {
    fn default() -> Self {
        Self { seg: None, align: None, rel: None, hoi: None }
    }
}

/// `seg_w * seg + align_w * align + rel + hoi` on the tape.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms<Var>, w: &LossWeights) -> Result<Var> {
    weighted_sum(tape, &[(w.seg, terms.seg), (w.align, terms.align), (1.0, terms.rel), (1.0, terms.hoi)])
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(terms: &LossTerms<f64>, w: &LossWeights) -> f64 {
    w.seg * terms.seg.unwrap_or(0.0) + w.align * terms.align.unwrap_or(0.0) + terms.rel.unwrap_or(0.0) + terms.hoi.unwrap_or(0.0)
}

/// Which annotations a training step consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sgg,
    Hoi,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sgg => "sgg",
            Task::Hoi => "hoi",
        }
    }
}

/// Objective for one scene and its component values.
#[derive(Clone, Debug)]
pub struct SceneLoss {
    pub total: Var,
    pub terms: LossTerms<f64>,
    /// Unweighted term handles on the tape.
    pub vars: LossTerms<Var>,
}

/// Forward pass plus loss. Scene-graph steps use segmentation, alignment and
/// relation terms; interaction steps use only the interaction term.
pub fn scene_loss(model: &Model, ctx: &mut Ctx, scene: &Scene, task: Task, w: &LossWeights) -> Result<SceneLoss> {
    match task {
        Task::Sgg => loss_with(model, ctx, scene, true, false, w),
        Task::Hoi => loss_with(model, ctx, scene, false, true, w),
    }
}

/// All four terms from a single forward pass.
pub fn joint_loss(model: &Model, ctx: &mut Ctx, scene: &Scene, w: &LossWeights) -> Result<SceneLoss> {
    loss_with(model, ctx, scene, true, true, w)
}

fn loss_with(model: &Model, ctx: &mut Ctx, scene: &Scene, sgg: bool, hoi: bool, w: &LossWeights) -> Result<SceneLoss> {
    let out = model.forward(ctx, &scene.image, hoi)?;
    let mut vars = LossTerms::default();
    if sgg {
        if let Some(logits) = out.seg_logits {
            let full = rasterize_boxes(
                &scene.boxes(),
                &scene.labels(),
                scene.image.height,
                scene.image.width,
                model.config.object_classes,
            )?;
            let target = downsample_target(&full, out.grid.0, out.grid.1)?;
            vars.seg = Some(seg_loss_from_logits(ctx, logits, &target)?);
        }
        vars.align = out.align;
        vars.rel = Some(rel_set_loss(&mut ctx.tape, &out.rel, &scene.rel_targets(), w)?.loss);
    }
    if hoi {
        let h = out.hoi.as_ref().expect("interaction branch requested");
        vars.hoi = Some(hoi_set_loss(&mut ctx.tape, h, &scene.hoi_targets(), w)?.loss);
    }
    let total = total_loss(&mut ctx.tape, &vars, w)?;
    let value = |v: Option<Var>| v.map(|v| ctx.tape.value(v).item());
    let terms = LossTerms { seg: value(vars.seg), align: value(vars.align), rel: value(vars.rel), hoi: value(vars.hoi) };
    Ok(SceneLoss { total, terms, vars })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_difference_grad;

    fn bbox(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn one_hot(n: usize, k: usize) -> Vec<f64> {
        (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    fn target() -> RelTarget {
        RelTarget {
            subj_box: bbox(0.3, 0.3, 0.2, 0.2),
            subj_label: 1,
            predicate: 2,
            obj_box: bbox(0.6, 0.7, 0.3, 0.2),
            obj_label: 0,
        }
    }

    fn exact(t: &RelTarget) -> RelTuple {
        RelTuple {
            subj_box: t.subj_box,
            subj_scores: one_hot(4, t.subj_label),
            rel_scores: one_hot(4, t.predicate),
            obj_box: t.obj_box,
            obj_scores: one_hot(4, t.obj_label),
            hidden_s: vec![],
            hidden_r: vec![],
            hidden_o: vec![],
        }
    }

    #[test]
    fn saturated_cost_is_minimum() {
        let w = LossWeights::default();
        let t = target();
        let c = tuple_match_cost(&exact(&t), &t, &w);
        assert!((c - (2.0 * -2.0 + 4.0 * -1.0)).abs() < 1e-12);
    }

    #[test]
    fn relation_probability_difference() {
        let w = LossWeights::default();
        let t = target();
        let mut a = exact(&t);
        let mut b = exact(&t);
        a.rel_scores = vec![0.1, 0.0, 0.9, 0.0];
        b.rel_scores = vec![0.9, 0.0, 0.1, 0.0];
        let d = tuple_match_cost(&b, &t, &w) - tuple_match_cost(&a, &t, &w);
        assert!((d - 3.2).abs() < 1e-12, "{d}");
    }

    #[test]
    fn box_loss_gradient_matches_finite_differences() {
        let gt = bbox(0.4, 0.5, 0.3, 0.2);
        let pred = vec![0.45, 0.42, 0.25, 0.33];
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 4], pred.clone()).unwrap());
        let t = tape.constant(boxes_tensor(&[gt]));
        let l = box_loss_rows(&mut tape, p, t).unwrap();
        assert!((tape.value(l).item() - box_pair_cost(&BBox::unchecked(pred[0], pred[1], pred[2], pred[3]), &gt)).abs() < 1e-12);
        let g = tape.backward(l).unwrap().get(p).unwrap().clone();
        let fd = finite_difference_grad(
            |x| {
                let x = x.data();
                box_pair_cost(&BBox::unchecked(x[0], x[1], x[2], x[3]), &gt)
            },
            &Tensor::new(vec![4], pred).unwrap(),
            1e-6,
        );
        for i in 0..4 {
            assert!((g.data()[i] - fd.data()[i]).abs() < 1e-6, "{i}: {} vs {}", g.data()[i], fd.data()[i]);
        }
    }

    #[test]
    fn total_of_unit_terms_is_eight() {
        let w = LossWeights::default();
        let ones = LossTerms { seg: Some(1.0), align: Some(1.0), rel: Some(1.0), hoi: Some(1.0) };
        assert_eq!(total_loss_value(&ones, &w), 8.0);
        let mut tape = Tape::new();
        let one = tape.scalar(1.0);
        let vars = LossTerms { seg: Some(one), align: Some(one), rel: Some(one), hoi: Some(one) };
        let t = total_loss(&mut tape, &vars, &w).unwrap();
        assert_eq!(tape.value(t).item(), 8.0);
        let sgg_only = LossTerms { hoi: None, ..ones };
        assert_eq!(total_loss_value(&sgg_only, &w), 7.0);
    }

    #[test]
    fn weighted_ce_matches_manual() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap());
        let l = weighted_ce(&mut tape, logits, &[1, 2], &[1.0, 0.1]).unwrap();
        let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let a = lse(&[1.0, 2.0, 0.5]) - 2.0;
        let b = lse(&[-1.0, 0.0, 3.0]) - 3.0;
        let expect = (a + 0.1 * b) / 1.1;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn weighted_bce_matches_manual() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![2, 1], vec![2.0, -30.0]).unwrap());
        let l = weighted_bce(&mut tape, z, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = (-(sig(2.0)).ln() - (1.0 - sig(-30.0)).ln()) / 2.0;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
    }
}
