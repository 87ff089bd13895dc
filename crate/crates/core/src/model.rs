//! The full pipeline: stem, semantic-spatial features, encoder, relation
//! decoder, relation-to-interaction transfer and interaction decoder, with
//! the ablation switches wired in.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalkit::{hoi_detections, rank_triples, role::sort_detections, Candidate, Constraint, HoiDetection};
use crate::features::{
    build_semantic_map, one_hot_semantic_map, Aggregator, ChannelReducer, FeatureMap, Image, SegHead, Stem,
    TeacherEmbedder, STEM_STRIDE,
};
use crate::hoinet::{
    feature_transfer, predict_hois, query_transfer, r2i_transform, FeatureTransfer, HoiOutputs, InteractionHeads,
    QueryTransfer, RelationToInteraction,
};
use crate::nn::{Ctx, Init, ParamGroup, ParamId, ParamStore};
use crate::numeric::{Tensor, Var};
use crate::relnet::{
    init_classifier, predict_relations, vl_alignment_loss, ClassifierInit, RelOutputs, RelationHeads, VlMode,
};
use crate::transformer::{
    encode, position_rows, positional_encoding, Decoder, EncodedSequence, Encoder, PosMode, StackConfig,
};

/// Source of the per-cell semantic embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticSource {
    /// Frozen teacher class embeddings.
    #[default]
    Teacher,
    /// No segmentation head and no semantic branch.
    None,
    /// One-hot class indicators.
    OneHot,
    /// A second frozen table standing in for generic word vectors.
    WordVector,
}

/// Wiring switches for the ablation variants. The default is the full model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub semantic: SemanticSource,
    pub alignment: bool,
    pub alignment_mode: VlMode,
    pub feature_transfer: bool,
    pub r2i_transfer: bool,
    pub query_transfer: bool,
    /// Decode interactions from the relation queries instead of their own.
    pub relation_queries_for_hoi: bool,
    pub classifier_init: ClassifierInit,
    /// Cut interaction-loss gradients from the relation heads and queries.
    pub hoi_stop_grad: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            semantic: SemanticSource::Teacher,
            alignment: true,
            alignment_mode: VlMode::Cls,
            feature_transfer: true,
            r2i_transfer: true,
            query_transfer: true,
            relation_queries_for_hoi: false,
            classifier_init: ClassifierInit::Teacher,
            hoi_stop_grad: false,
        }
    }
}

impl Ablation {
    /// Named variants accepted on the command line.
    pub const VARIANTS: [&'static str; 10] = [
        "full",
        "no-hss",
        "hss-discrete",
        "hss-wordvec",
        "no-vl",
        "vl-pool",
        "no-fetr",
        "no-qutr",
        "no-r2itr",
        "relq",
    ];

    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "full" => {}
            "no-hss" => a.semantic = SemanticSource::None,
            "hss-discrete" => a.semantic = SemanticSource::OneHot,
            "hss-wordvec" => a.semantic = SemanticSource::WordVector,
            "no-vl" => a.alignment = false,
            "vl-pool" => a.alignment_mode = VlMode::Pool,
            "no-fetr" => a.feature_transfer = false,
            "no-qutr" => a.query_transfer = false,
            "no-r2itr" => a.r2i_transfer = false,
            "relq" => a.relation_queries_for_hoi = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected one of {})",
                    Self::VARIANTS.join(", ")
                )))
            }
        }
        Ok(a)
    }

    /// Combinations that are accepted but where some switch has no effect.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.alignment && self.alignment_mode != VlMode::Cls {
            out.push("alignment_mode is ignored when alignment is disabled".to_string());
        }
        if !self.r2i_transfer && !self.feature_transfer {
            out.push("feature_transfer has no effect when r2i_transfer is disabled".to_string());
        }
        if self.relation_queries_for_hoi && !self.query_transfer {
            out.push("query_transfer has no effect when relation queries are reused".to_string());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub object_classes: usize,
    pub relation_classes: usize,
    pub action_classes: usize,
    /// Square input side in pixels; must be a multiple of the stem stride.
    pub image_size: usize,
    pub stem_channels: usize,
    /// Teacher/semantic embedding width; the model width is twice this.
    pub embed_width: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub reduce_layers: usize,
    pub seg_layers: usize,
    pub encoder_layers: usize,
    pub relation_decoder_layers: usize,
    pub r2i_layers: usize,
    pub feature_transfer_layers: usize,
    pub query_transfer_layers: usize,
    pub hoi_decoder_layers: usize,
    pub relation_queries: usize,
    pub hoi_queries: usize,
    pub dropout: f64,
    pub pos_mode: PosMode,
    pub teacher_seed: u64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            object_classes: 8,
            relation_classes: 6,
            action_classes: 4,
            image_size: 32,
            stem_channels: 32,
            embed_width: 32,
            heads: 4,
            ffn_expansion: 4,
            reduce_layers: 5,
            seg_layers: 5,
            encoder_layers: 6,
            relation_decoder_layers: 6,
            r2i_layers: 3,
            feature_transfer_layers: 2,
            query_transfer_layers: 2,
            hoi_decoder_layers: 6,
            relation_queries: 100,
            hoi_queries: 100,
            dropout: 0.1,
            pos_mode: PosMode::PerLayer,
            teacher_seed: 2024,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        2 * self.embed_width
    }

    pub fn grid(&self) -> usize {
        self.image_size / STEM_STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % STEM_STRIDE != 0 {
            return fail(format!("image_size {} must be a positive multiple of {STEM_STRIDE}", self.image_size));
        }
        if self.object_classes < 2 {
            return fail("object_classes must be at least 2".into());
        }
        if self.relation_classes == 0 || self.action_classes == 0 {
            return fail("relation_classes and action_classes must be positive".into());
        }
        if self.heads == 0 || self.width() % self.heads != 0 {
            return fail(format!("model width {} is not divisible by {} heads", self.width(), self.heads));
        }
        if self.embed_width % 2 != 0 || self.embed_width == 0 {
            return fail("embed_width must be positive and even".into());
        }
        if self.relation_queries == 0 || self.hoi_queries == 0 {
            return fail("query counts must be positive".into());
        }
        if self.ablation.relation_queries_for_hoi && self.hoi_queries != self.relation_queries {
            return fail("reusing relation queries requires hoi_queries == relation_queries".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)".into());
        }
        if self.reduce_layers == 0 {
            return fail("reduce_layers must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form; embedded in checkpoints and
    /// reports.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn stack(&self, layers: usize) -> StackConfig {
        StackConfig { width: self.width(), heads: self.heads, expansion: self.ffn_expansion, layers }
    }
}

/// Ranked outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub image: u64,
    pub rel: Vec<Candidate>,
    pub hoi: Vec<HoiDetection>,
}

/// Everything produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    pub seg_logits: Option<Var>,
    pub grid: (usize, usize),
    pub aggregated: Var,
    pub encoded: EncodedSequence,
    pub align: Option<Var>,
    pub rel: RelOutputs,
    pub hoi: Option<HoiOutputs>,
    /// Rows of the memory the interaction decoder attended to.
    pub hoi_memory: Option<Var>,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stem: Stem,
    pub reducer: ChannelReducer,
    pub seg_head: Option<SegHead>,
    pub aggregator: Aggregator,
    pub encoder: Encoder,
    pub rel_decoder: Decoder,
    pub rel_heads: RelationHeads,
    pub rel_queries: ParamId,
    pub hoi_queries: Option<ParamId>,
    pub r2i: Option<RelationToInteraction>,
    pub feature_transfer: Option<FeatureTransfer>,
    pub query_transfer: Option<QueryTransfer>,
    pub hoi_decoder: Decoder,
    pub hoi_heads: InteractionHeads,
    pub object_teacher: TeacherEmbedder,
    pub word_vectors: Option<TeacherEmbedder>,
    positions: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let a = &c.ablation;
        let d = c.width();
        let ew = c.embed_width;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let stem = Stem::new(&mut store, &mut init, c.stem_channels);
        let reducer = ChannelReducer::new(&mut store, &mut init, c.stem_channels, ew, c.reduce_layers);
        let seg_head = (a.semantic != SemanticSource::None)
            .then(|| SegHead::new(&mut store, &mut init, ew, c.object_classes, c.seg_layers));
        let semantic_input = match a.semantic {
            SemanticSource::Teacher => Some((ew, "semantic")),
            SemanticSource::OneHot => Some((c.object_classes + 1, "semantic_onehot")),
            SemanticSource::WordVector => Some((ew, "semantic_wordvec")),
            SemanticSource::None => None,
        };
        let aggregator = Aggregator::new(&mut store, &mut init, ew, semantic_input);
        let encoder = Encoder::new(&mut store, &mut init, "encoder", c.stack(c.encoder_layers), c.pos_mode, ParamGroup::Sgg)?;
        let rel_decoder = Decoder::new(
            &mut store,
            &mut init,
            "rel_decoder",
            c.stack(c.relation_decoder_layers),
            c.pos_mode,
            ParamGroup::Sgg,
        )?;
        let rel_heads = RelationHeads::new(&mut store, &mut init, d, d, c.object_classes, c.relation_classes);
        let rel_queries = store.add("rel_queries", init.uniform(vec![c.relation_queries, d], 1.0), ParamGroup::Sgg);

        let hoi_queries = (!a.relation_queries_for_hoi)
            .then(|| store.add("hoi_queries", init.uniform(vec![c.hoi_queries, d], 1.0), ParamGroup::Hoi));
        let r2i = if a.r2i_transfer {
            Some(RelationToInteraction::new(&mut store, &mut init, d, c.stack(c.r2i_layers), c.pos_mode)?)
        } else {
            None
        };
        let feature_transfer = if a.r2i_transfer && a.feature_transfer {
            Some(FeatureTransfer::new(&mut store, &mut init, c.stack(c.feature_transfer_layers))?)
        } else {
            None
        };
        let query_transfer = if a.query_transfer && !a.relation_queries_for_hoi {
            Some(QueryTransfer::new(&mut store, &mut init, c.stack(c.query_transfer_layers))?)
        } else {
            None
        };
        let hoi_decoder =
            Decoder::new(&mut store, &mut init, "hoi_decoder", c.stack(c.hoi_decoder_layers), c.pos_mode, ParamGroup::Hoi)?;
        let hoi_heads = InteractionHeads::new(&mut store, &mut init, d, d, c.object_classes, c.action_classes);

        let ts = c.teacher_seed;
        let object_teacher = TeacherEmbedder::new(c.object_classes, ew, ts);
        let word_vectors =
            (a.semantic == SemanticSource::WordVector).then(|| TeacherEmbedder::new(c.object_classes, ew, ts ^ 0x9e37_79b9));
        if a.classifier_init == ClassifierInit::Teacher {
            let objects = TeacherEmbedder::new(c.object_classes, d, ts.wrapping_add(1));
            let relations = TeacherEmbedder::new(c.relation_classes, d, ts.wrapping_add(2));
            let actions = TeacherEmbedder::new(c.action_classes, d, ts.wrapping_add(3));
            init_classifier(&mut store, &rel_heads.subj_class, ClassifierInit::Teacher, &objects)?;
            init_classifier(&mut store, &rel_heads.obj_class, ClassifierInit::Teacher, &objects)?;
            init_classifier(&mut store, &rel_heads.rel_class, ClassifierInit::Teacher, &relations)?;
            init_classifier(&mut store, &hoi_heads.obj_class, ClassifierInit::Teacher, &objects)?;
            init_classifier(&mut store, &hoi_heads.action_class, ClassifierInit::Teacher, &actions)?;
        }
        let grid = c.grid();
        let len = (grid * grid).max(c.relation_queries).max(c.hoi_queries) + 1;
        let positions = positional_encoding(len, d)?;
        Ok(Self {
            config,
            store,
            stem,
            reducer,
            seg_head,
            aggregator,
            encoder,
            rel_decoder,
            rel_heads,
            rel_queries,
            hoi_queries,
            r2i,
            feature_transfer,
            query_transfer,
            hoi_decoder,
            hoi_heads,
            object_teacher,
            word_vectors,
            positions,
        })
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    /// Target for the alignment loss, `[1, d]`.
    pub fn teacher_image_embedding(&self, image: &Image) -> Tensor {
        self.object_teacher.image_embedding(image, self.config.width())
    }

    /// Runs the pipeline; the interaction branch only when `with_hoi`.
    pub fn forward(&self, ctx: &mut Ctx, image: &Image, with_hoi: bool) -> Result<ForwardOutputs> {
        let c = &self.config;
        let a = &c.ablation;
        if image.height != c.image_size || image.width != c.image_size {
            return Err(Error::Image(format!(
                "expected {0}x{0} image, got {1}x{2}",
                c.image_size, image.height, image.width
            )));
        }
        let v = self.stem.forward(ctx, image)?;
        let v = self.reducer.forward(ctx, v)?;
        let (seg_logits, semantic) = match &self.seg_head {
            Some(head) => {
                let logits = head.logits(ctx, v)?;
                let scores = ctx.tape.value(logits).map(crate::numeric::sigmoid);
                let map = match a.semantic {
                    SemanticSource::Teacher => build_semantic_map(&scores, &self.object_teacher)?,
                    SemanticSource::WordVector => {
                        build_semantic_map(&scores, self.word_vectors.as_ref().expect("word vectors"))?
                    }
                    SemanticSource::OneHot => one_hot_semantic_map(&scores),
                    SemanticSource::None => unreachable!("no head without semantics"),
                };
                (Some(logits), Some(ctx.tape.constant(map)))
            }
            None => (None, None),
        };
        let FeatureMap { var: aggregated, height, width } = self.aggregator.forward(ctx, v, semantic)?;
        let encoded = encode(&self.encoder, ctx, aggregated, &self.positions)?;
        let align = if a.alignment {
            let target = self.teacher_image_embedding(image);
            Some(vl_alignment_loss(ctx, &encoded, aggregated, &target, a.alignment_mode)?)
        } else {
            None
        };
        let rel_q = ctx.p(self.rel_queries);
        let rel_pos = position_rows(ctx, &self.positions, 1, c.relation_queries)?;
        let rel = predict_relations(&self.rel_decoder, &self.rel_heads, ctx, &encoded, rel_q, rel_pos)?;

        let (hoi, hoi_memory) = if with_hoi {
            let (memory, memory_pos) = self.hoi_memory(ctx, &encoded, &rel, rel_pos)?;
            let hoi_pos = position_rows(ctx, &self.positions, 1, c.hoi_queries)?;
            let rel_q_for_hoi = if a.hoi_stop_grad { ctx.tape.detach(rel_q) } else { rel_q };
            let queries = match (self.hoi_queries, &self.query_transfer) {
                (None, _) => rel_q_for_hoi,
                (Some(q), Some(qt)) => {
                    let q = ctx.p(q);
                    query_transfer(qt, ctx, q, rel_q_for_hoi, hoi_pos)?
                }
                (Some(q), None) => ctx.p(q),
            };
            let out = predict_hois(&self.hoi_decoder, &self.hoi_heads, ctx, memory, memory_pos, queries, hoi_pos)?;
            (Some(out), Some(memory))
        } else {
            (None, None)
        };
        Ok(ForwardOutputs { seg_logits, grid: (height, width), aggregated, encoded, align, rel, hoi, hoi_memory })
    }

    fn hoi_memory(&self, ctx: &mut Ctx, encoded: &EncodedSequence, rel: &RelOutputs, rel_pos: Var) -> Result<(Var, Var)> {
        let Some(r2i) = &self.r2i else {
            return Ok((encoded.var, encoded.pos));
        };
        let transferred = r2i_transform(r2i, ctx, rel, rel_pos, self.config.ablation.hoi_stop_grad)?;
        match &self.feature_transfer {
            Some(ft) => {
                let memory = feature_transfer(ft, ctx, encoded, transferred, rel_pos)?;
                let pos = position_rows(ctx, &self.positions, 1, encoded.cells)?;
                Ok((memory, pos))
            }
            None => Ok((transferred, rel_pos)),
        }
    }

    /// Eval-mode inference: every relation candidate (all predicates) and
    /// every interaction detection for one image, both ranked.
    pub fn predict(&self, image: &Image, image_id: u64) -> Result<Prediction> {
        let mut ctx = Ctx::eval(&self.store);
        let out = self.forward(&mut ctx, image, true)?;
        let rel = rank_triples(&out.rel.tuples(&ctx.tape), Constraint::Unconstrained);
        let hoi_tuples = out.hoi.expect("interaction branch requested").tuples(&ctx.tape);
        let mut hoi = hoi_detections(image_id, &hoi_tuples);
        sort_detections(&mut hoi);
        Ok(Prediction { image: image_id, rel, hoi })
    }

    /// Parameters of one learning-rate group.
    pub fn group_params(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// SHA-256 over the values of one parameter group.
    pub fn group_digest(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter().filter(|(_, p)| p.group == group) {
            h.update(p.name.as_bytes());
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
