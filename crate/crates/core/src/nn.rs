//! Parameter storage and the small set of layers the model is built from.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numeric::{Tape, Tensor, Var};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Convolutional stem.
    Backbone,
    /// Everything on the scene-graph path above the stem.
    Sgg,
    /// Relation-to-interaction transfer, interaction decoder and heads.
    Hoi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Classifier weights seeded from teacher embeddings train at a reduced rate.
    pub teacher_init: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, group, teacher_init: false });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("shape")
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(vec![fan_in, fan_out], bound)
    }
}

/// Forward-pass context: a tape, lazily bound parameters, and the train/eval
/// switch for dropout.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'a> Ctx<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(store: &'a ParamStore, dropout: f64, seed: u64) -> Self {
        Self { train: true, dropout, rng: ChaCha8Rng::seed_from_u64(seed), ..Self::eval(store) }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Tape variable for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters that were used during the forward pass, with their leaves.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn param_of_leaf(&self, leaf: Var) -> Option<ParamId> {
        self.bound.iter().position(|v| *v == Some(leaf)).map(ParamId)
    }

    /// Inverted dropout; identity in eval mode.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        self.tape.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup) -> Self {
        let weight = store.add(format!("{name}.weight"), init.glorot(fan_in, fan_out), group);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]), group);
        Self { weight, bias: Some(bias), fan_in, fan_out }
    }

    pub fn without_bias(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup) -> Self {
        let weight = store.add(format!("{name}.weight"), init.glorot(fan_in, fan_out), group);
        Self { weight, bias: None, fan_in, fan_out }
    }

    /// `x W + b` for `x: [n, fan_in]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, group: ParamGroup) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(vec![width]), group);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![width]), group);
        Self { gamma, beta, width, eps: 1e-5 }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = ctx.tape.layer_norm(x, self.eps)?;
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        let y = ctx.tape.mul(n, g)?;
        ctx.tape.add(y, b)
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, widths: &[usize], group: ParamGroup) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.{i}"), w[0], w[1], group))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_with_hidden(ctx, x)?.0)
    }

    /// Output together with the activation feeding the last layer.
    pub fn forward_with_hidden(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if i == last {
                let out = layer.forward(ctx, h)?;
                return Ok((out, h));
            }
            let y = layer.forward(ctx, h)?;
            h = ctx.tape.gelu(y)?;
        }
        unreachable!("mlp has at least one layer")
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

/// 2-D convolution over `[h * w, c]` cell features, as im2col + matmul.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub linear: Linear,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
    ) -> Self {
        let linear = Linear::new(store, init, name, kernel * kernel * in_ch, out_ch, group);
        Self { kernel, stride, pad: kernel / 2, linear }
    }

    pub fn out_size(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.pad - self.kernel) / self.stride + 1,
            (width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, height: usize, width: usize) -> Result<(Var, usize, usize)> {
        let (ho, wo) = self.out_size(height, width);
        let cols = if self.kernel == 1 && self.stride == 1 {
            x
        } else {
            ctx.tape.im2col(x, height, width, self.kernel, self.stride, self.pad)?
        };
        Ok((self.linear.forward(ctx, cols)?, ho, wo))
    }
}

/// Loss value and gradients for every parameter the loss touched.
pub fn param_gradients(
    store: &ParamStore,
    loss_fn: impl Fn(&mut Ctx) -> Result<Var>,
) -> Result<(f64, BTreeMap<ParamId, Tensor>)> {
    let mut ctx = Ctx::eval(store);
    let loss = loss_fn(&mut ctx)?;
    let value = ctx.tape.value(loss).item();
    let mut grads = ctx.tape.backward(loss)?;
    let bound: Vec<(ParamId, Var)> = ctx.bound_params().collect();
    let out = bound
        .into_iter()
        .map(|(id, leaf)| (id, grads.take(leaf).expect("bound parameter is a tracked leaf")))
        .collect();
    Ok((value, out))
}

/// Denominator floor for gradient comparisons, so parameters whose true
/// gradient is zero are judged by absolute error.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Compares tape gradients against central finite differences for the given
/// parameters. Returns `(name, relative error)` per parameter.
pub fn check_param_gradients(
    store: &ParamStore,
    ids: &[ParamId],
    eps: f64,
    loss_fn: impl Fn(&mut Ctx) -> Result<Var>,
) -> Result<Vec<(String, f64)>> {
    let (_, analytic) = param_gradients(store, &loss_fn)?;
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let base = store.get(id).value.clone();
        let zeros = Tensor::zeros(base.shape().to_vec());
        let grad = analytic.get(&id).unwrap_or(&zeros);
        let mut numeric = Tensor::zeros(base.shape().to_vec());
        for k in 0..base.numel() {
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.get_mut(id).value.data_mut()[k] = v;
                let mut ctx = Ctx::eval(&probe);
                let loss = loss_fn(&mut ctx)?;
                Ok(ctx.tape.value(loss).item())
            };
            let x = base.data()[k];
            let plus = eval_at(x + eps)?;
            let minus = eval_at(x - eps)?;
            eval_at(x)?;
            numeric.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        let err = crate::numeric::relative_error(grad, &numeric, GRADIENT_CHECK_FLOOR);
        out.push((store.get(id).name.clone(), err));
    }
    Ok(out)
}
