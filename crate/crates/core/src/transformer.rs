//! Multi-head attention, pre-norm encoder and decoder stacks, and the
//! sinusoidal position table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, Mlp, ParamGroup, ParamStore};
use crate::numeric::{Tensor, Var};

/// Where position rows enter the stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    /// Added to queries and keys of every attention layer.
    #[default]
    PerLayer,
    /// Added once to the input sequence.
    AtInput,
}

/// Sinusoidal table with row 0 left at zero for the global token.
pub fn positional_encoding(len: usize, width: usize) -> Result<Tensor> {
    if width % 2 != 0 {
        return Err(Error::Indivisible { what: "positional encoding", width, by: 2 });
    }
    let mut out = Tensor::zeros(vec![len, width]);
    for pos in 1..len {
        for j in 0..width / 2 {
            let freq = 10000f64.powf(2.0 * j as f64 / width as f64);
            let angle = pos as f64 / freq;
            out.data_mut()[pos * width + 2 * j] = angle.sin();
            out.data_mut()[pos * width + 2 * j + 1] = angle.cos();
        }
    }
    Ok(out)
}

/// Rows `start..start + len` of a position table as a tape constant.
pub fn position_rows(ctx: &mut Ctx, table: &Tensor, start: usize, len: usize) -> Result<Var> {
    if start + len > table.rows() {
        return Err(Error::ShapeMismatch { op: "position_rows", left: table.shape().to_vec(), right: vec![start + len] });
    }
    let width = table.last_dim();
    let data = table.data()[start * width..(start + len) * width].to_vec();
    Ok(ctx.tape.constant(Tensor::new(vec![len, width], data)?))
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        width: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Indivisible { what: "attention width", width, by: heads });
        }
        Ok(Self {
            heads,
            query: Linear::new(store, init, &format!("{name}.query"), width, width, group),
            key: Linear::without_bias(store, init, &format!("{name}.key"), width, width, group),
            value: Linear::new(store, init, &format!("{name}.value"), width, width, group),
            output: Linear::new(store, init, &format!("{name}.output"), width, width, group),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, q, k, v)?.0)
    }

    /// Output and the per-head attention matrices `[L_q, L_k]`.
    pub fn forward_with_weights(&self, ctx: &mut Ctx, q: Var, k: Var, v: Var) -> Result<(Var, Vec<Var>)> {
        let width = self.query.fan_out;
        for x in [q, k, v] {
            if ctx.tape.shape(x).last() != Some(&width) {
                return Err(Error::ShapeMismatch {
                    op: "multi_head_attention",
                    left: ctx.tape.shape(x).to_vec(),
                    right: vec![width],
                });
            }
        }
        let head_width = width / self.heads;
        let qp = self.query.forward(ctx, q)?;
        let kp = self.key.forward(ctx, k)?;
        let vp = self.value.forward(ctx, v)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * head_width, (h + 1) * head_width);
            let qh = ctx.tape.cols(qp, a, b)?;
            let kh = ctx.tape.cols(kp, a, b)?;
            let vh = ctx.tape.cols(vp, a, b)?;
            let kt = ctx.tape.transpose(kh)?;
            let scores = ctx.tape.matmul(qh, kt)?;
            let scores = ctx.tape.scale(scores, 1.0 / (head_width as f64).sqrt())?;
            let attn = ctx.tape.softmax(scores)?;
            weights.push(attn);
            let attn = ctx.dropout(attn)?;
            outs.push(ctx.tape.matmul(attn, vh)?);
        }
        let joined = ctx.tape.concat(&outs, 1)?;
        Ok((self.output.forward(ctx, joined)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize, expansion: usize, group: ParamGroup) -> Self {
        Self { mlp: Mlp::new(store, init, name, &[width, width * expansion, width], group) }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.mlp.forward(ctx, x)
    }
}

fn add_pos(ctx: &mut Ctx, x: Var, pos: Option<Var>) -> Result<Var> {
    match pos {
        Some(p) => ctx.tape.add(x, p),
        None => Ok(x),
    }
}

fn residual(ctx: &mut Ctx, x: Var, update: Var) -> Result<Var> {
    let update = ctx.dropout(update)?;
    ctx.tape.add(x, update)
}

/// Shared shape of every stack in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub width: usize,
    pub heads: usize,
    pub expansion: usize,
    pub layers: usize,
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: StackConfig, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), cfg.width, group),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), cfg.width, cfg.heads, group)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), cfg.width, group),
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), cfg.width, cfg.expansion, group),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, pos: Option<Var>) -> Result<Var> {
        let n = self.norm_attn.forward(ctx, x)?;
        let qk = add_pos(ctx, n, pos)?;
        let a = self.attn.forward(ctx, qk, qk, n)?;
        let x = residual(ctx, x, a)?;
        let n = self.norm_ffn.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, n)?;
        residual(ctx, x, f)
    }
}

/// Stack of self-attention blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub pos_mode: PosMode,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: StackConfig,
        pos_mode: PosMode,
        group: ParamGroup,
    ) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(store, init, &format!("{name}.{i}"), cfg, group))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, pos_mode })
    }

    /// Runs the stack over `x` with position rows `pos` of the same shape.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, pos: Var) -> Result<Var> {
        let (mut x, layer_pos) = match self.pos_mode {
            PosMode::AtInput => (ctx.tape.add(x, pos)?, None),
            PosMode::PerLayer => (x, Some(pos)),
        };
        for block in &self.blocks {
            x = block.forward(ctx, x, layer_pos)?;
        }
        Ok(x)
    }
}

/// Sequence features with the global token at row 0.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSequence {
    pub var: Var,
    /// Rows excluding the global token.
    pub cells: usize,
    /// Position rows used for the sequence (row 0 is zero).
    pub pos: Var,
}

/// Flattened cells with the global average prepended, position rows added and
/// run through the encoder stack.
pub fn encode(encoder: &Encoder, ctx: &mut Ctx, cells: Var, table: &Tensor) -> Result<EncodedSequence> {
    let n = ctx.tape.shape(cells)[0];
    let global = ctx.tape.mean_axis(cells, 0)?;
    let width = ctx.tape.shape(cells)[1];
    let global = ctx.tape.reshape(global, vec![1, width])?;
    let seq = ctx.tape.concat(&[global, cells], 0)?;
    let pos = position_rows(ctx, table, 0, n + 1)?;
    let var = encoder.forward(ctx, seq, pos)?;
    Ok(EncodedSequence { var, cells: n, pos })
}

/// Pre-norm block: self-attention over queries, cross-attention into memory,
/// feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: StackConfig, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), cfg.width, group),
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), cfg.width, cfg.heads, group)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), cfg.width, group),
            cross_attn: MultiHeadAttention::new(store, init, &format!("{name}.cross_attn"), cfg.width, cfg.heads, group)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), cfg.width, group),
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), cfg.width, cfg.expansion, group),
        })
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        query_pos: Option<Var>,
        memory: Var,
        memory_pos: Option<Var>,
    ) -> Result<Var> {
        let n = self.norm_self.forward(ctx, x)?;
        let qk = add_pos(ctx, n, query_pos)?;
        let a = self.self_attn.forward(ctx, qk, qk, n)?;
        let x = residual(ctx, x, a)?;
        let n = self.norm_cross.forward(ctx, x)?;
        let q = add_pos(ctx, n, query_pos)?;
        let k = add_pos(ctx, memory, memory_pos)?;
        let c = self.cross_attn.forward(ctx, q, k, memory)?;
        let x = residual(ctx, x, c)?;
        let n = self.norm_ffn.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, n)?;
        residual(ctx, x, f)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub pos_mode: PosMode,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: StackConfig,
        pos_mode: PosMode,
        group: ParamGroup,
    ) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|i| DecoderBlock::new(store, init, &format!("{name}.{i}"), cfg, group))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.width, group);
        Ok(Self { blocks, norm, pos_mode })
    }

    pub fn width(&self) -> usize {
        self.norm.width
    }
}

/// One hidden vector per query after attending into `memory`.
pub fn decode(
    decoder: &Decoder,
    ctx: &mut Ctx,
    memory: Var,
    memory_pos: Var,
    queries: Var,
    query_pos: Var,
) -> Result<Var> {
    let width = decoder.width();
    for x in [memory, queries] {
        if ctx.tape.shape(x).get(1) != Some(&width) {
            return Err(Error::ShapeMismatch { op: "decode", left: ctx.tape.shape(x).to_vec(), right: vec![width] });
        }
    }
    let (mut x, qpos, memory, mpos) = match decoder.pos_mode {
        PosMode::AtInput => (ctx.tape.add(queries, query_pos)?, None, ctx.tape.add(memory, memory_pos)?, None),
        PosMode::PerLayer => (queries, Some(query_pos), memory, Some(memory_pos)),
    };
    for block in &decoder.blocks {
        x = block.forward(ctx, x, qpos, memory, mpos)?;
    }
    decoder.norm.forward(ctx, x)
}
