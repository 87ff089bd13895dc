//! Relation decoding into subject/predicate/object tuples, classifier
//! initialization from teacher tables, and the image-level alignment loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TeacherEmbedder;
use crate::geometry::BBox;
use crate::nn::{Ctx, Init, Mlp, ParamGroup, ParamStore};
use crate::numeric::{Tape, Tensor, Var};
use crate::transformer::{decode, Decoder, EncodedSequence};

/// How the final classification layers start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInit {
    Random,
    /// Weight columns copied from a frozen class-embedding table.
    #[default]
    Teacher,
}

/// Which encoder feature is pulled toward the teacher image embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlMode {
    /// The global token at row 0 of the encoder output.
    #[default]
    Cls,
    /// The mean of the aggregated cell features fed to the encoder.
    Pool,
}

impl std::str::FromStr for VlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(VlMode::Cls),
            "pool" => Ok(VlMode::Pool),
            other => Err(Error::Config(format!("unknown alignment mode `{other}` (expected cls or pool)"))),
        }
    }
}

impl std::str::FromStr for ClassifierInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(ClassifierInit::Random),
            "teacher" => Ok(ClassifierInit::Teacher),
            other => Err(Error::Config(format!("unknown classifier init `{other}` (expected random or teacher)"))),
        }
    }
}

/// One decoded relation with class distributions and the hidden activations
/// of the three classification heads.
#[derive(Clone, Debug, PartialEq)]
pub struct RelTuple {
    pub subj_box: BBox,
    pub subj_scores: Vec<f64>,
    pub rel_scores: Vec<f64>,
    pub obj_box: BBox,
    pub obj_scores: Vec<f64>,
    pub hidden_s: Vec<f64>,
    pub hidden_r: Vec<f64>,
    pub hidden_o: Vec<f64>,
}

/// Tape handles for every query's head outputs. Logits are pre-softmax.
#[derive(Clone, Copy, Debug)]
pub struct RelOutputs {
    pub hidden: Var,
    pub subj_box: Var,
    pub subj_logits: Var,
    pub rel_logits: Var,
    pub obj_box: Var,
    pub obj_logits: Var,
    pub hidden_s: Var,
    pub hidden_r: Var,
    pub hidden_o: Var,
}

pub(crate) fn softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub(crate) fn boxes_of(t: &Tensor) -> Vec<BBox> {
    (0..t.rows())
        .map(|r| {
            let b = t.row(r);
            BBox::unchecked(b[0], b[1], b[2], b[3])
        })
        .collect()
}

impl RelOutputs {
    pub fn queries(&self, tape: &Tape) -> usize {
        tape.shape(self.subj_box)[0]
    }

    pub fn tuples(&self, tape: &Tape) -> Vec<RelTuple> {
        let subj_box = boxes_of(tape.value(self.subj_box));
        let obj_box = boxes_of(tape.value(self.obj_box));
        let subj = softmax_rows(tape.value(self.subj_logits));
        let rel = softmax_rows(tape.value(self.rel_logits));
        let obj = softmax_rows(tape.value(self.obj_logits));
        let (hs, hr, ho) = (tape.value(self.hidden_s), tape.value(self.hidden_r), tape.value(self.hidden_o));
        (0..subj_box.len())
            .map(|q| RelTuple {
                subj_box: subj_box[q],
                subj_scores: subj[q].clone(),
                rel_scores: rel[q].clone(),
                obj_box: obj_box[q],
                obj_scores: obj[q].clone(),
                hidden_s: hs.row(q).to_vec(),
                hidden_r: hr.row(q).to_vec(),
                hidden_o: ho.row(q).to_vec(),
            })
            .collect()
    }
}

/// Box regressor: three layers ending in a sigmoid so boxes land in the unit
/// square.
pub fn box_head(store: &mut ParamStore, init: &mut Init, name: &str, width: usize, group: ParamGroup) -> Mlp {
    Mlp::new(store, init, name, &[width, width, width, 4], group)
}

/// Two-layer classifier whose penultimate activation is exposed.
pub fn class_head(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    width: usize,
    hidden: usize,
    classes: usize,
    group: ParamGroup,
) -> Mlp {
    Mlp::new(store, init, name, &[width, hidden, classes], group)
}

pub fn box_forward(head: &Mlp, ctx: &mut Ctx, h: Var) -> Result<Var> {
    let raw = head.forward(ctx, h)?;
    ctx.tape.sigmoid(raw)
}

#[derive(Clone, Debug)]
pub struct RelationHeads {
    pub subj_box: Mlp,
    pub subj_class: Mlp,
    pub rel_class: Mlp,
    pub obj_box: Mlp,
    pub obj_class: Mlp,
}

impl RelationHeads {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        width: usize,
        hidden: usize,
        object_classes: usize,
        relation_classes: usize,
    ) -> Self {
        let g = ParamGroup::Sgg;
        Self {
            subj_box: box_head(store, init, "rel_head.subj_box", width, g),
            subj_class: class_head(store, init, "rel_head.subj_class", width, hidden, object_classes + 1, g),
            rel_class: class_head(store, init, "rel_head.rel_class", width, hidden, relation_classes + 1, g),
            obj_box: box_head(store, init, "rel_head.obj_box", width, g),
            obj_class: class_head(store, init, "rel_head.obj_class", width, hidden, object_classes + 1, g),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, hidden: Var) -> Result<RelOutputs> {
        let subj_box = box_forward(&self.subj_box, ctx, hidden)?;
        let (subj_logits, hidden_s) = self.subj_class.forward_with_hidden(ctx, hidden)?;
        let (rel_logits, hidden_r) = self.rel_class.forward_with_hidden(ctx, hidden)?;
        let obj_box = box_forward(&self.obj_box, ctx, hidden)?;
        let (obj_logits, hidden_o) = self.obj_class.forward_with_hidden(ctx, hidden)?;
        Ok(RelOutputs { hidden, subj_box, subj_logits, rel_logits, obj_box, obj_logits, hidden_s, hidden_r, hidden_o })
    }
}

/// Decodes the relation queries against the encoder output and applies the
/// five heads.
pub fn predict_relations(
    decoder: &Decoder,
    heads: &RelationHeads,
    ctx: &mut Ctx,
    encoded: &EncodedSequence,
    queries: Var,
    query_pos: Var,
) -> Result<RelOutputs> {
    let hidden = decode(decoder, ctx, encoded.var, encoded.pos, queries, query_pos)?;
    heads.forward(ctx, hidden)
}

/// L1 distance between the teacher image embedding `[1, d]` and the selected
/// encoder feature.
pub fn vl_alignment_loss(
    ctx: &mut Ctx,
    encoded: &EncodedSequence,
    aggregated: Var,
    teacher_image: &Tensor,
    mode: VlMode,
) -> Result<Var> {
    let feature = match mode {
        VlMode::Cls => ctx.tape.slice(encoded.var, 0, 0, 1)?,
        VlMode::Pool => {
            let width = ctx.tape.shape(aggregated)[1];
            let mean = ctx.tape.mean_axis(aggregated, 0)?;
            ctx.tape.reshape(mean, vec![1, width])?
        }
    };
    if ctx.tape.shape(feature) != teacher_image.shape() {
        return Err(Error::ShapeMismatch {
            op: "vl_alignment_loss",
            left: ctx.tape.shape(feature).to_vec(),
            right: teacher_image.shape().to_vec(),
        });
    }
    let target = ctx.tape.constant(teacher_image.clone());
    let diff = ctx.tape.sub(feature, target)?;
    let abs = ctx.tape.abs(diff)?;
    ctx.tape.sum(abs)
}

/// Sets the final layer of a classification head. Teacher mode copies class
/// row `c` of the table into weight column `c`, zeroes the bias, and marks the
/// weights for the reduced learning rate. Random mode leaves the seeded
/// initialization untouched.
pub fn init_classifier(store: &mut ParamStore, head: &Mlp, mode: ClassifierInit, teacher: &TeacherEmbedder) -> Result<()> {
    let last = head.last();
    if mode == ClassifierInit::Random {
        return Ok(());
    }
    if teacher.rows() != last.fan_out {
        return Err(Error::ClassCountMismatch { head: last.fan_out, table: teacher.rows() });
    }
    if teacher.width() != last.fan_in {
        return Err(Error::ShapeMismatch {
            op: "init_classifier",
            left: vec![last.fan_in, last.fan_out],
            right: teacher.table().shape().to_vec(),
        });
    }
    let (rows, cols) = (last.fan_in, last.fan_out);
    let mut w = Tensor::zeros(vec![rows, cols]);
    for c in 0..cols {
        for (i, &v) in teacher.row(c).iter().enumerate() {
            w.data_mut()[i * cols + c] = v;
        }
    }
    let weight = store.get_mut(last.weight);
    weight.value = w;
    weight.teacher_init = true;
    if let Some(b) = last.bias {
        let bias = store.get_mut(b);
        bias.value = Tensor::zeros(vec![cols]);
        bias.teacher_init = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    use super::*;
    use crate::transformer::{encode, positional_encoding, position_rows, Encoder, PosMode, StackConfig};

    fn stack(layers: usize) -> StackConfig {
        StackConfig { width: 8, heads: 2, expansion: 2, layers }
    }

    #[test]
    fn relation_tuples_shapes_and_ranges() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let enc = Encoder::new(&mut store, &mut init, "enc", stack(1), PosMode::PerLayer, ParamGroup::Sgg).unwrap();
        let dec = Decoder::new(&mut store, &mut init, "dec", stack(1), PosMode::PerLayer, ParamGroup::Sgg).unwrap();
        let heads = RelationHeads::new(&mut store, &mut init, 8, 8, 150, 50);
        let q = store.add("queries", init.uniform(vec![100, 8], 1.0), ParamGroup::Sgg);
        let table = positional_encoding(101, 8).unwrap();
        let cells = init.uniform(vec![16, 8], 1.0);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(cells);
        let encoded = encode(&enc, &mut ctx, x, &table).unwrap();
        let qv = ctx.p(q);
        let qpos = position_rows(&mut ctx, &table, 1, 100).unwrap();
        let out = predict_relations(&dec, &heads, &mut ctx, &encoded, qv, qpos).unwrap();
        let tuples = out.tuples(&ctx.tape);
        assert_eq!(tuples.len(), 100);
        for t in &tuples {
            assert_eq!(t.rel_scores.len(), 51);
            assert_eq!(t.subj_scores.len(), 151);
            for s in [&t.subj_scores, &t.rel_scores, &t.obj_scores] {
                assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            for b in [t.subj_box, t.obj_box] {
                assert!(b.to_array().iter().all(|v| *v > 0.0 && *v < 1.0));
            }
            assert_eq!(t.hidden_r.len(), 8);
        }
    }

    #[test]
    fn alignment_loss_examples() {
        let store = ParamStore::new();
        let mut ctx = Ctx::eval(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq: Vec<f64> = (0..5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq = Tensor::new(vec![5, 6], seq).unwrap();
        let var = ctx.tape.constant(seq.clone());
        let pos = ctx.tape.constant(Tensor::zeros(vec![5, 6]));
        let encoded = EncodedSequence { var, cells: 4, pos };
        let agg = ctx.tape.constant(Tensor::new(vec![4, 6], seq.data()[6..].to_vec()).unwrap());

        let same = Tensor::new(vec![1, 6], seq.row(0).to_vec()).unwrap();
        let l = vl_alignment_loss(&mut ctx, &encoded, agg, &same, VlMode::Cls).unwrap();
        assert_eq!(ctx.tape.value(l).item(), 0.0);

        let shifted = same.map(|v| v + 1.0);
        let l = vl_alignment_loss(&mut ctx, &encoded, agg, &shifted, VlMode::Cls).unwrap();
        assert!((ctx.tape.value(l).item() - 6.0).abs() < 1e-12);

        for _ in 0..20 {
            let t = Tensor::new(vec![1, 6], (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let l = vl_alignment_loss(&mut ctx, &encoded, agg, &t, VlMode::Pool).unwrap();
            let mut oracle = 0.0;
            for c in 0..6 {
                let mean = (1..5).map(|r| seq.at2(r, c)).sum::<f64>() / 4.0;
                oracle += (mean - t.data()[c]).abs();
            }
            assert!((ctx.tape.value(l).item() - oracle).abs() < 1e-12);
        }
        assert!("mean".parse::<VlMode>().is_err());
        assert_eq!("pool".parse::<VlMode>().unwrap(), VlMode::Pool);
    }

    #[test]
    fn teacher_classifier_initialization() {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let head = class_head(&mut store, &mut init, "cls", 8, 8, 5, ParamGroup::Sgg);
        let teacher = TeacherEmbedder::new(4, 8, 9);
        init_classifier(&mut store, &head, ClassifierInit::Teacher, &teacher).unwrap();
        let w = &store.get(head.last().weight).value;
        for c in 0..5 {
            for i in 0..8 {
                assert_eq!(w.at2(i, c), teacher.row(c)[i]);
            }
        }
        assert!(store.get(head.last().weight).teacher_init);
        // a feature equal to row c scores highest at c
        for c in 0..4 {
            let logits: Vec<f64> = (0..5).map(|k| (0..8).map(|i| teacher.row(c)[i] * w.at2(i, k)).sum()).collect();
            let best = (0..5).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
            assert_eq!(best, c);
        }
        let wrong = TeacherEmbedder::new(6, 8, 9);
        assert!(matches!(
            init_classifier(&mut store, &head, ClassifierInit::Teacher, &wrong),
            Err(Error::ClassCountMismatch { head: 5, table: 7 })
        ));
    }

    #[test]
    fn random_initialization_is_reproducible() {
        let digest = || {
            let mut store = ParamStore::new();
            let head = class_head(&mut store, &mut Init::new(12), "cls", 8, 8, 5, ParamGroup::Sgg);
            init_classifier(&mut store, &head, ClassifierInit::Random, &TeacherEmbedder::new(4, 8, 0)).unwrap();
            hex::encode(Sha256::digest(store.get(head.last().weight).value.to_le_bytes()))
        };
        assert_eq!(digest(), digest());
    }
}
