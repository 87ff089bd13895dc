//! Convolutional stem, box-segmentation head, frozen teacher embeddings and
//! the semantic-spatial aggregation that feeds the encoder.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::SegTarget;
use crate::nn::{Conv2d, Ctx, Init, LayerNorm, Linear, ParamGroup, ParamStore};
use crate::numeric::{Tensor, Var};

/// Total downsampling factor of [`Stem`].
pub const STEM_STRIDE: usize = 8;

/// RGB raster with channel values in `[0, 1]`, stored row-major `[h, w, 3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::DataLength { shape: vec![height, width, 3], got: pixels.len() });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * self.width + col) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let o = (row * self.width + col) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// `[h * w, 3]` cell-major tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height * self.width, 3], self.pixels.clone()).expect("image shape")
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        let mut acc = [0.0; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        acc.map(|v| v / n)
    }

    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set_pixel(r, self.width - 1 - c, self.pixel(r, c));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.pixels().flat_map(|p| p.0.map(|c| f64::from(c) / 255.0)).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Image("buffer size".into()))?;
        buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Cell features laid out `[height * width, channels]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Frozen class-embedding table with a zero background row, plus a fixed
/// image-embedding map. Nothing here is ever trained.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherEmbedder {
    table: Tensor,
    seed: u64,
}

impl TeacherEmbedder {
    /// `classes` foreground rows followed by the zero background row. Rows are
    /// Gram-Schmidt orthonormalized while they fit in `width` dimensions, and
    /// merely unit-normalized beyond that.
    pub fn new(classes: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(classes + 1);
        while rows.len() < classes {
            let mut v: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if rows.len() < width {
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
        rows.push(vec![0.0; width]);
        Self { table: Tensor::from_rows(&rows).expect("rectangular"), seed }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn rows(&self) -> usize {
        self.table.rows()
    }

    pub fn width(&self) -> usize {
        self.table.last_dim()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.table.row(class)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.table.to_le_bytes()))
    }

    /// Fixed linear map of the image's mean color into `width` dimensions.
    pub fn image_embedding(&self, image: &Image, width: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_1a6e);
        let map: Vec<f64> = (0..3 * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gap = image.mean_color();
        let out = (0..width).map(|j| (0..3).map(|c| gap[c] * map[c * width + j]).sum()).collect();
        Tensor::new(vec![1, width], out).expect("shape")
    }

    /// Flat binary: `rows`, `cols`, `seed` as little-endian `u64`, then the
    /// table as little-endian `f64` in row-major order.
    pub fn export(&self, mut out: impl Write) -> std::io::Result<()> {
        for v in [self.rows() as u64, self.width() as u64, self.seed] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in self.table.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn import(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|e| Error::io("<teacher table>", e))?;
        if bytes.len() < 24 {
            return Err(Error::Parse { line: 0, message: "teacher table header truncated".into() });
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
        let (rows, cols, seed) = (word(0) as usize, word(1) as usize, word(2));
        let body = &bytes[24..];
        if body.len() != rows * cols * 8 {
            return Err(Error::DataLength { shape: vec![rows, cols], got: body.len() / 8 });
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { table: Tensor::new(vec![rows, cols], data)?, seed })
    }
}

/// Three stride-2 3x3 convolutions, `3 -> 16 -> 32 -> channels`.
#[derive(Clone, Debug)]
pub struct Stem {
    pub convs: Vec<Conv2d>,
}

impl Stem {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize) -> Self {
        let widths = [3, 16, 32, channels];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(store, init, &format!("stem.{i}"), w[0], w[1], 3, 2, ParamGroup::Backbone))
            .collect();
        Self { convs }
    }

    pub fn forward(&self, ctx: &mut Ctx, image: &Image) -> Result<FeatureMap> {
        backbone_extract(self, ctx, image)
    }
}

pub fn backbone_extract(stem: &Stem, ctx: &mut Ctx, image: &Image) -> Result<FeatureMap> {
    if image.height % STEM_STRIDE != 0 || image.width % STEM_STRIDE != 0 || image.height == 0 || image.width == 0 {
        return Err(Error::IndivisibleImage { height: image.height, width: image.width, stride: STEM_STRIDE });
    }
    let mut x = ctx.tape.constant(image.to_tensor());
    let (mut h, mut w) = (image.height, image.width);
    for conv in &stem.convs {
        let (y, ho, wo) = conv.forward(ctx, x, h, w)?;
        x = ctx.tape.gelu(y)?;
        (h, w) = (ho, wo);
    }
    Ok(FeatureMap { var: x, height: h, width: w })
}

/// Successive 1x1 convolutions from the stem width down to the embedding width.
#[derive(Clone, Debug)]
pub struct ChannelReducer {
    pub convs: Vec<Linear>,
}

impl ChannelReducer {
    pub fn new(store: &mut ParamStore, init: &mut Init, input: usize, output: usize, layers: usize) -> Self {
        let convs = (0..layers)
            .map(|i| {
                let fan_in = if i == 0 { input } else { output };
                Linear::new(store, init, &format!("reduce.{i}"), fan_in, output, ParamGroup::Sgg)
            })
            .collect();
        Self { convs }
    }

    pub fn forward(&self, ctx: &mut Ctx, v: FeatureMap) -> Result<FeatureMap> {
        reduce_channels(self, ctx, v)
    }
}

/// GELU sits between layers, not after the last one.
pub fn reduce_channels(reducer: &ChannelReducer, ctx: &mut Ctx, v: FeatureMap) -> Result<FeatureMap> {
    let mut x = v.var;
    for (i, conv) in reducer.convs.iter().enumerate() {
        if i > 0 {
            x = ctx.tape.gelu(x)?;
        }
        x = conv.forward(ctx, x)?;
    }
    Ok(FeatureMap { var: x, ..v })
}

/// Five 3x3 conv + layer-norm + GELU stages and a 1x1 classifier over the
/// object classes plus background.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub convs: Vec<(Conv2d, LayerNorm)>,
    pub classifier: Linear,
}

impl SegHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, width: usize, classes: usize, layers: usize) -> Self {
        let convs = (0..layers)
            .map(|i| {
                let conv = Conv2d::new(store, init, &format!("seg.{i}"), width, width, 3, 1, ParamGroup::Sgg);
                let norm = LayerNorm::new(store, &format!("seg.{i}.norm"), width, ParamGroup::Sgg);
                (conv, norm)
            })
            .collect();
        let classifier = Linear::new(store, init, "seg.classifier", width, classes + 1, ParamGroup::Sgg);
        Self { convs, classifier }
    }

    /// Pre-sigmoid scores `[cells, classes + 1]`.
    pub fn logits(&self, ctx: &mut Ctx, v: FeatureMap) -> Result<Var> {
        let mut x = v.var;
        for (conv, norm) in &self.convs {
            let (y, _, _) = conv.forward(ctx, x, v.height, v.width)?;
            let y = norm.forward(ctx, y)?;
            x = ctx.tape.gelu(y)?;
        }
        self.classifier.forward(ctx, x)
    }
}

/// Per-cell, per-class box-segmentation scores in `(0, 1)`.
pub fn predict_bbseg(head: &SegHead, ctx: &mut Ctx, v: FeatureMap) -> Result<Var> {
    let logits = head.logits(ctx, v)?;
    ctx.tape.sigmoid(logits)
}

fn check_target(ctx: &Ctx, scores: Var, target: &SegTarget) -> Result<Tensor> {
    let t = target.to_tensor();
    if ctx.tape.shape(scores) != t.shape() {
        return Err(Error::ShapeMismatch {
            op: "seg_loss",
            left: ctx.tape.shape(scores).to_vec(),
            right: t.shape().to_vec(),
        });
    }
    Ok(t)
}

/// Binary cross-entropy summed over channels and averaged over cells, taking
/// probabilities. Scores are clamped away from 0 and 1 inside the logarithm.
pub fn seg_loss(ctx: &mut Ctx, scores: Var, target: &SegTarget) -> Result<Var> {
    let t = check_target(ctx, scores, target)?;
    let cells = t.rows() as f64;
    let tape = &mut ctx.tape;
    let lo = tape.scalar(1e-12);
    let hi = tape.scalar(1.0 - 1e-12);
    let s = tape.maximum(scores, lo)?;
    let s = tape.minimum(s, hi)?;
    let one = tape.scalar(1.0);
    let y = tape.constant(t);
    let not_y = tape.sub(one, y)?;
    let not_s = tape.sub(one, s)?;
    let ls = tape.log(s)?;
    let lns = tape.log(not_s)?;
    let a = tape.mul(y, ls)?;
    let b = tape.mul(not_y, lns)?;
    let ab = tape.add(a, b)?;
    let total = tape.sum(ab)?;
    tape.scale(total, -1.0 / cells)
}

/// Same loss computed from logits with the overflow-free softplus form
/// `max(z, 0) - z y + ln(1 + e^{-|z|})`.
pub fn seg_loss_from_logits(ctx: &mut Ctx, logits: Var, target: &SegTarget) -> Result<Var> {
    let t = check_target(ctx, logits, target)?;
    let cells = t.rows() as f64;
    let tape = &mut ctx.tape;
    let y = tape.constant(t);
    let pos = tape.relu(logits)?;
    let zy = tape.mul(logits, y)?;
    let abs = tape.abs(logits)?;
    let neg = tape.neg(abs)?;
    let e = tape.exp(neg)?;
    let one = tape.scalar(1.0);
    let e1 = tape.add(one, e)?;
    let soft = tape.log(e1)?;
    let a = tape.sub(pos, zy)?;
    let elem = tape.add(a, soft)?;
    let total = tape.sum(elem)?;
    tape.scale(total, 1.0 / cells)
}

/// Per-cell argmax over channels, lowest index on ties.
pub fn cell_argmax(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Each cell takes the teacher row of its highest-scoring class. The result is
/// a plain value; no gradient flows back into the scores.
pub fn build_semantic_map(scores: &Tensor, teacher: &TeacherEmbedder) -> Result<Tensor> {
    if scores.last_dim() != teacher.rows() {
        return Err(Error::ClassCountMismatch { head: scores.last_dim(), table: teacher.rows() });
    }
    let width = teacher.width();
    let mut data = Vec::with_capacity(scores.rows() * width);
    for class in cell_argmax(scores) {
        data.extend_from_slice(teacher.row(class));
    }
    Tensor::new(vec![scores.rows(), width], data)
}

/// One-hot version of the semantic map: the argmax class indicator, with the
/// background cells left all-zero.
pub fn one_hot_semantic_map(scores: &Tensor) -> Tensor {
    let classes = scores.last_dim();
    let mut out = Tensor::zeros(vec![scores.rows(), classes]);
    for (r, class) in cell_argmax(scores).into_iter().enumerate() {
        if class + 1 < classes {
            out.data_mut()[r * classes + class] = 1.0;
        }
    }
    out
}

/// Two 1x1 projections whose outputs are concatenated along channels. Without
/// a semantic branch the visual projection alone produces the full width.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub visual: Linear,
    pub semantic: Option<Linear>,
}

impl Aggregator {
    /// `semantic_input` is `None` when the semantic map is disabled; `name`
    /// distinguishes the semantic projection variants.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        width: usize,
        semantic_input: Option<(usize, &str)>,
    ) -> Self {
        match semantic_input {
            Some((input, name)) => Self {
                visual: Linear::new(store, init, "aggregate.visual", width, width, ParamGroup::Sgg),
                semantic: Some(Linear::new(store, init, &format!("aggregate.{name}"), input, width, ParamGroup::Sgg)),
            },
            None => Self {
                visual: Linear::new(store, init, "aggregate.visual", width, 2 * width, ParamGroup::Sgg),
                semantic: None,
            },
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, v: FeatureMap, e: Option<Var>) -> Result<FeatureMap> {
        aggregate(self, ctx, v, e)
    }
}

pub fn aggregate(agg: &Aggregator, ctx: &mut Ctx, v: FeatureMap, e: Option<Var>) -> Result<FeatureMap> {
    let visual = agg.visual.forward(ctx, v.var)?;
    let var = match (&agg.semantic, e) {
        (Some(proj), Some(e)) => {
            if ctx.tape.shape(e)[0] != v.cells() {
                return Err(Error::ShapeMismatch {
                    op: "aggregate",
                    left: ctx.tape.shape(v.var).to_vec(),
                    right: ctx.tape.shape(e).to_vec(),
                });
            }
            let semantic = proj.forward(ctx, e)?;
            ctx.tape.concat(&[visual, semantic], 1)?
        }
        (None, _) => visual,
        (Some(_), None) => return Err(Error::Config("aggregator expects a semantic map".into())),
    };
    Ok(FeatureMap { var, ..v })
}
