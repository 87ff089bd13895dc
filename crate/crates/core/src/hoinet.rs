//! Relation-to-interaction transfer and interaction decoding.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{Ctx, Init, LayerNorm, Linear, Mlp, ParamGroup, ParamStore};
use crate::numeric::{Tape, Var};
use crate::relnet::{box_forward, box_head, boxes_of, class_head, softmax_rows, RelOutputs};
use crate::transformer::{decode, Decoder, EncodedSequence, Encoder, MultiHeadAttention, PosMode, StackConfig};

/// One decoded interaction: human box and human-ness, action distribution,
/// object box and object distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiTuple {
    pub human_box: BBox,
    pub human_score: f64,
    pub act_scores: Vec<f64>,
    pub obj_box: BBox,
    pub obj_scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct HoiOutputs {
    pub hidden: Var,
    pub human_box: Var,
    /// `[n, 1]` pre-sigmoid human-ness.
    pub human_logit: Var,
    pub act_logits: Var,
    pub obj_box: Var,
    pub obj_logits: Var,
}

impl HoiOutputs {
    pub fn tuples(&self, tape: &Tape) -> Vec<HoiTuple> {
        let human_box = boxes_of(tape.value(self.human_box));
        let obj_box = boxes_of(tape.value(self.obj_box));
        let human = tape.value(self.human_logit);
        let act = softmax_rows(tape.value(self.act_logits));
        let obj = softmax_rows(tape.value(self.obj_logits));
        (0..human_box.len())
            .map(|q| HoiTuple {
                human_box: human_box[q],
                human_score: crate::numeric::sigmoid(human.data()[q]),
                act_scores: act[q].clone(),
                obj_box: obj_box[q],
                obj_scores: obj[q].clone(),
            })
            .collect()
    }
}

/// Projection of the concatenated subject/predicate/object head activations
/// followed by a self-attention stack over the relation queries.
#[derive(Clone, Debug)]
pub struct RelationToInteraction {
    pub project: Linear,
    pub encoder: Encoder,
}

impl RelationToInteraction {
    pub fn new(store: &mut ParamStore, init: &mut Init, hidden: usize, cfg: StackConfig, pos_mode: PosMode) -> Result<Self> {
        Ok(Self {
            project: Linear::new(store, init, "r2i.project", 3 * hidden, cfg.width, ParamGroup::Hoi),
            encoder: Encoder::new(store, init, "r2i.encoder", cfg, pos_mode, ParamGroup::Hoi)?,
        })
    }
}

/// `[n_rel, d]` interaction-flavored relation features. With `stop_grad` the
/// head activations are cut from the graph first.
pub fn r2i_transform(
    module: &RelationToInteraction,
    ctx: &mut Ctx,
    rel: &RelOutputs,
    pos: Var,
    stop_grad: bool,
) -> Result<Var> {
    let mut parts = [rel.hidden_s, rel.hidden_r, rel.hidden_o];
    let hidden = module.project.fan_in / 3;
    for p in &mut parts {
        if ctx.tape.shape(*p).get(1) != Some(&hidden) {
            return Err(Error::ShapeMismatch { op: "r2i_transform", left: ctx.tape.shape(*p).to_vec(), right: vec![hidden] });
        }
        if stop_grad {
            *p = ctx.tape.detach(*p);
        }
    }
    let joined = ctx.tape.concat(&parts, 1)?;
    let projected = module.project.forward(ctx, joined)?;
    module.encoder.forward(ctx, projected, pos)
}

/// Stacked cross-attention layers without residual connections; used for the
/// feature transfer, where the output must be built from the attended values.
#[derive(Clone, Debug)]
pub struct FeatureTransfer {
    pub layers: Vec<(LayerNorm, MultiHeadAttention)>,
}

impl FeatureTransfer {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: StackConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| {
                let name = format!("feature_transfer.{i}");
                Ok((
                    LayerNorm::new(store, &format!("{name}.norm"), cfg.width, ParamGroup::Hoi),
                    MultiHeadAttention::new(store, init, &format!("{name}.attn"), cfg.width, cfg.heads, ParamGroup::Hoi)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Cell rows of the encoder output (global token dropped) attend into the
/// transferred relation features. Returns `[h * w, d]`.
pub fn feature_transfer(
    module: &FeatureTransfer,
    ctx: &mut Ctx,
    encoded: &EncodedSequence,
    r2i: Var,
    r2i_pos: Var,
) -> Result<Var> {
    let width = ctx.tape.shape(encoded.var)[1];
    if ctx.tape.shape(r2i).get(1) != Some(&width) {
        return Err(Error::ShapeMismatch {
            op: "feature_transfer",
            left: ctx.tape.shape(encoded.var).to_vec(),
            right: ctx.tape.shape(r2i).to_vec(),
        });
    }
    let rows = encoded.cells + 1;
    let mut x = ctx.tape.slice(encoded.var, 0, 1, rows)?;
    let pos = ctx.tape.slice(encoded.pos, 0, 1, rows)?;
    let keys = ctx.tape.add(r2i, r2i_pos)?;
    for (norm, attn) in &module.layers {
        let n = norm.forward(ctx, x)?;
        let q = ctx.tape.add(n, pos)?;
        x = attn.forward(ctx, q, keys, r2i)?;
    }
    Ok(x)
}

/// Residual cross-attention from interaction queries into relation queries.
#[derive(Clone, Debug)]
pub struct QueryTransfer {
    pub layers: Vec<(LayerNorm, MultiHeadAttention)>,
}

impl QueryTransfer {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: StackConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| {
                let name = format!("query_transfer.{i}");
                Ok((
                    LayerNorm::new(store, &format!("{name}.norm"), cfg.width, ParamGroup::Hoi),
                    MultiHeadAttention::new(store, init, &format!("{name}.attn"), cfg.width, cfg.heads, ParamGroup::Hoi)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

pub fn query_transfer(module: &QueryTransfer, ctx: &mut Ctx, hoi_queries: Var, rel_queries: Var, pos: Var) -> Result<Var> {
    if ctx.tape.shape(hoi_queries).get(1) != ctx.tape.shape(rel_queries).get(1) {
        return Err(Error::ShapeMismatch {
            op: "query_transfer",
            left: ctx.tape.shape(hoi_queries).to_vec(),
            right: ctx.tape.shape(rel_queries).to_vec(),
        });
    }
    let mut x = hoi_queries;
    for (norm, attn) in &module.layers {
        let n = norm.forward(ctx, x)?;
        let q = ctx.tape.add(n, pos)?;
        let a = attn.forward(ctx, q, rel_queries, rel_queries)?;
        x = ctx.tape.add(x, a)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct InteractionHeads {
    pub human_box: Mlp,
    pub human_score: Mlp,
    pub action_class: Mlp,
    pub obj_box: Mlp,
    pub obj_class: Mlp,
}

impl InteractionHeads {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        width: usize,
        hidden: usize,
        object_classes: usize,
        action_classes: usize,
    ) -> Self {
        let g = ParamGroup::Hoi;
        Self {
            human_box: box_head(store, init, "hoi_head.human_box", width, g),
            human_score: class_head(store, init, "hoi_head.human_score", width, hidden, 1, g),
            action_class: class_head(store, init, "hoi_head.action_class", width, hidden, action_classes + 1, g),
            obj_box: box_head(store, init, "hoi_head.obj_box", width, g),
            obj_class: class_head(store, init, "hoi_head.obj_class", width, hidden, object_classes + 1, g),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, hidden: Var) -> Result<HoiOutputs> {
        Ok(HoiOutputs {
            hidden,
            human_box: box_forward(&self.human_box, ctx, hidden)?,
            human_logit: self.human_score.forward(ctx, hidden)?,
            act_logits: self.action_class.forward(ctx, hidden)?,
            obj_box: box_forward(&self.obj_box, ctx, hidden)?,
            obj_logits: self.obj_class.forward(ctx, hidden)?,
        })
    }
}

pub fn predict_hois(
    decoder: &Decoder,
    heads: &InteractionHeads,
    ctx: &mut Ctx,
    memory: Var,
    memory_pos: Var,
    queries: Var,
    query_pos: Var,
) -> Result<HoiOutputs> {
    let hidden = decode(decoder, ctx, memory, memory_pos, queries, query_pos)?;
    heads.forward(ctx, hidden)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_param_gradients;
    use crate::numeric::Tensor;
    use crate::relnet::RelationHeads;
    use crate::transformer::{positional_encoding, position_rows};

    fn stack(layers: usize) -> StackConfig {
        StackConfig { width: 8, heads: 2, expansion: 2, layers }
    }

    fn rel_outputs(ctx: &mut Ctx, heads: &RelationHeads, hidden: &Tensor) -> RelOutputs {
        let h = ctx.tape.constant(hidden.clone());
        heads.forward(ctx, h).unwrap()
    }

    fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
        Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn r2i_shape_and_equivariance() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let heads = RelationHeads::new(&mut store, &mut init, 8, 8, 4, 3);
        let r2i = RelationToInteraction::new(&mut store, &mut init, 8, stack(3), PosMode::PerLayer).unwrap();
        let table = positional_encoding(101, 8).unwrap();
        let pos = Tensor::new(vec![100, 8], table.data()[8..].to_vec()).unwrap();
        let hidden = init.uniform(vec![100, 8], 1.0);
        let run = |hidden: &Tensor, pos: &Tensor| {
            let mut ctx = Ctx::eval(&store);
            let rel = rel_outputs(&mut ctx, &heads, hidden);
            let p = ctx.tape.constant(pos.clone());
            let out = r2i_transform(&r2i, &mut ctx, &rel, p, false).unwrap();
            ctx.tape.value(out).clone()
        };
        let base = run(&hidden, &pos);
        assert_eq!(base.shape(), &[100, 8]);
        let perm: Vec<usize> = (0..100).map(|i| (i * 37 + 11) % 100).collect();
        let moved = run(&permute(&hidden, &perm), &permute(&pos, &perm));
        assert!(moved.max_abs_diff(&permute(&base, &perm)) < 1e-10);
    }

    #[test]
    fn r2i_projection_gradient() {
        let mut store = ParamStore::new();
        let mut init = Init::new(2);
        let heads = RelationHeads::new(&mut store, &mut init, 8, 8, 4, 3);
        let r2i = RelationToInteraction::new(&mut store, &mut init, 8, stack(1), PosMode::PerLayer).unwrap();
        let hidden = init.uniform(vec![3, 8], 1.0);
        let weights = init.uniform(vec![3, 8], 1.0);
        let table = positional_encoding(4, 8).unwrap();
        let ids = [r2i.project.weight, r2i.project.bias.unwrap()];
        let errs = check_param_gradients(&store, &ids, 1e-6, |ctx| {
            let rel = rel_outputs(ctx, &heads, &hidden);
            let pos = position_rows(ctx, &table, 1, 3)?;
            let out = r2i_transform(&r2i, ctx, &rel, pos, false)?;
            let w = ctx.tape.constant(weights.clone());
            let p = ctx.tape.mul(out, w)?;
            ctx.tape.sum(p)
        })
        .unwrap();
        for (name, err) in errs {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn stop_grad_cuts_relation_heads() {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let heads = RelationHeads::new(&mut store, &mut init, 8, 8, 4, 3);
        let r2i = RelationToInteraction::new(&mut store, &mut init, 8, stack(1), PosMode::PerLayer).unwrap();
        let hidden = init.uniform(vec![3, 8], 1.0);
        for stop in [false, true] {
            let mut ctx = Ctx::eval(&store);
            let rel = rel_outputs(&mut ctx, &heads, &hidden);
            let pos = ctx.tape.constant(Tensor::zeros(vec![3, 8]));
            let out = r2i_transform(&r2i, &mut ctx, &rel, pos, stop).unwrap();
            let loss = ctx.tape.sum(out).unwrap();
            let reached = ctx.tape.reachable_leaves(loss);
            let head_leaf = ctx.p(heads.rel_class.layers[0].weight);
            assert_eq!(reached.contains(&head_leaf), !stop);
        }
    }

    fn encoded(ctx: &mut Ctx, cells: &Tensor, table: &Tensor) -> EncodedSequence {
        let n = cells.rows();
        let mut rows = vec![vec![0.0; cells.last_dim()]];
        rows.extend((0..n).map(|r| cells.row(r).to_vec()));
        let var = ctx.tape.constant(Tensor::from_rows(&rows).unwrap());
        let pos = position_rows(ctx, table, 0, n + 1).unwrap();
        EncodedSequence { var, cells: n, pos }
    }

    #[test]
    fn feature_transfer_rows_and_convexity() {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let ft = FeatureTransfer::new(&mut store, &mut init, stack(2)).unwrap();
        let table = positional_encoding(17, 8).unwrap();
        let cells = init.uniform(vec![16, 8], 1.0);
        let v = init.uniform(vec![1, 8], 1.0);
        let same = Tensor::from_rows(&vec![v.data().to_vec(); 5]).unwrap();
        let mut ctx = Ctx::eval(&store);
        let enc = encoded(&mut ctx, &cells, &table);
        let r = ctx.tape.constant(same);
        let rpos = position_rows(&mut ctx, &table, 1, 5).unwrap();
        let out = feature_transfer(&ft, &mut ctx, &enc, r, rpos).unwrap();
        let value = ctx.tape.value(out);
        assert_eq!(value.shape(), &[16, 8]);
        for row in 1..16 {
            for c in 0..8 {
                assert!((value.at2(row, c) - value.at2(0, c)).abs() < 1e-12);
            }
        }
        let bad = ctx.tape.constant(Tensor::zeros(vec![5, 6]));
        assert!(feature_transfer(&ft, &mut ctx, &enc, bad, rpos).is_err());
    }

    #[test]
    fn feature_transfer_gradient_wrt_relation_features() {
        let mut store = ParamStore::new();
        let mut init = Init::new(5);
        let ft = FeatureTransfer::new(&mut store, &mut init, stack(2)).unwrap();
        let r = store.add("r2i", init.uniform(vec![4, 8], 1.0), ParamGroup::Hoi);
        let table = positional_encoding(5, 8).unwrap();
        let cells = init.uniform(vec![4, 8], 1.0);
        let weights = init.uniform(vec![4, 8], 1.0);
        let errs = check_param_gradients(&store, &[r], 1e-6, |ctx| {
            let enc = encoded(ctx, &cells, &table);
            let rv = ctx.p(r);
            let rpos = position_rows(ctx, &table, 1, 4)?;
            let out = feature_transfer(&ft, ctx, &enc, rv, rpos)?;
            let w = ctx.tape.constant(weights.clone());
            let p = ctx.tape.mul(out, w)?;
            ctx.tape.sum(p)
        })
        .unwrap();
        assert!(errs[0].1 < 1e-4, "{errs:?}");
    }

    #[test]
    fn query_transfer_shape_and_constant_shift() {
        let mut store = ParamStore::new();
        let mut init = Init::new(6);
        let qt = QueryTransfer::new(&mut store, &mut init, stack(2)).unwrap();
        let table = positional_encoding(101, 8).unwrap();
        let hoi = init.uniform(vec![100, 8], 1.0);
        let mut ctx = Ctx::eval(&store);
        let h = ctx.tape.constant(hoi.clone());
        let rel = ctx.tape.constant(init.uniform(vec![100, 8], 1.0));
        let pos = position_rows(&mut ctx, &table, 1, 100).unwrap();
        let out = query_transfer(&qt, &mut ctx, h, rel, pos).unwrap();
        assert_eq!(ctx.tape.shape(out), &[100, 8]);

        // a single layer with identical relation rows adds the same vector everywhere
        let mut store = ParamStore::new();
        let one = QueryTransfer::new(&mut store, &mut init, stack(1)).unwrap();
        let v = init.uniform(vec![1, 8], 1.0);
        let mut ctx = Ctx::eval(&store);
        let h = ctx.tape.constant(hoi.clone());
        let rel = ctx.tape.constant(Tensor::from_rows(&vec![v.data().to_vec(); 7]).unwrap());
        let pos = position_rows(&mut ctx, &table, 1, 100).unwrap();
        let out = query_transfer(&one, &mut ctx, h, rel, pos).unwrap();
        let value = ctx.tape.value(out);
        let shift: Vec<f64> = (0..8).map(|c| value.at2(0, c) - hoi.at2(0, c)).collect();
        for r in 0..100 {
            for c in 0..8 {
                assert!((value.at2(r, c) - hoi.at2(r, c) - shift[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interaction_tuples() {
        let mut store = ParamStore::new();
        let mut init = Init::new(7);
        let dec = Decoder::new(&mut store, &mut init, "hoi_dec", stack(1), PosMode::PerLayer, ParamGroup::Hoi).unwrap();
        let heads = InteractionHeads::new(&mut store, &mut init, 8, 8, 10, 29);
        let table = positional_encoding(101, 8).unwrap();
        let mut ctx = Ctx::eval(&store);
        let memory = ctx.tape.constant(init.uniform(vec![16, 8], 1.0));
        let mpos = position_rows(&mut ctx, &table, 1, 16).unwrap();
        let q = ctx.tape.constant(init.uniform(vec![100, 8], 1.0));
        let qpos = position_rows(&mut ctx, &table, 1, 100).unwrap();
        let out = predict_hois(&dec, &heads, &mut ctx, memory, mpos, q, qpos).unwrap();
        let tuples = out.tuples(&ctx.tape);
        assert_eq!(tuples.len(), 100);
        for t in tuples {
            assert_eq!(t.act_scores.len(), 30);
            assert!(t.human_score > 0.0 && t.human_score < 1.0);
            assert!((t.obj_scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
