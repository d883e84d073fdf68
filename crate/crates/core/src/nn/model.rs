use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::attention::AttentionTape;
use super::{AdapterGrad, AdapterTarget, AdapterView, CrossAttentionBlock, GradMode, LinearLayer, Projection};
use crate::error::{Error, Result};
use crate::scalar::{silu, silu_grad, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Dense,
    Attention,
}

/// Architecture descriptor. Two models with equal descriptors accept each other's adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sample_dim: usize,
    /// The hidden state is `tokens * channels` wide and attends as `tokens` rows.
    pub tokens: usize,
    pub channels: usize,
    pub cond_tokens: usize,
    pub cond_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub vocab_size: usize,
    pub blocks: Vec<BlockKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sample_dim: 2,
            tokens: 4,
            channels: 16,
            cond_tokens: 2,
            cond_dim: 16,
            attn_dim: 16,
            heads: 2,
            time_dim: 16,
            vocab_size: 4,
            blocks: vec![
                BlockKind::Dense,
                BlockKind::Attention,
                BlockKind::Dense,
                BlockKind::Attention,
                BlockKind::Dense,
            ],
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.tokens * self.channels
    }

    pub fn attention_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| **b == BlockKind::Attention).count()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.sample_dim", self.sample_dim),
            ("model.tokens", self.tokens),
            ("model.channels", self.channels),
            ("model.cond_tokens", self.cond_tokens),
            ("model.cond_dim", self.cond_dim),
            ("model.attn_dim", self.attn_dim),
            ("model.heads", self.heads),
            ("model.time_dim", self.time_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !self.attn_dim.is_multiple_of(self.heads) {
            return Err(Error::config("model.heads", "must divide model.attn_dim"));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("model.time_dim", "must be even"));
        }
        if self.attention_blocks() < 2 {
            return Err(Error::config("model.blocks", "needs at least two attention blocks"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("model.vocab_size", "needs the empty token and at least one other"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block<T> {
    Dense(LinearLayer<T>),
    Attention(CrossAttentionBlock<T>),
}

/// Conditional noise-prediction network `eps(x_t, c, t)`.
///
/// Condition id 0 is the empty token; its embedding is fixed at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel<T> {
    config: ModelConfig,
    embedding: Tensor<T>,
    input: LinearLayer<T>,
    time: LinearLayer<T>,
    blocks: Vec<Block<T>>,
    head: LinearLayer<T>,
}

/// Sinusoidal timestep features of width `dim`.
pub fn sinusoidal_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push(T::lit((t as f64 * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push(T::lit((t as f64 * freq).cos()));
    }
    out
}

#[derive(Debug, Clone)]
enum BlockTape<T> {
    Dense { h_in: Vec<T>, pre: Vec<T> },
    Attention(AttentionTape<T>),
}

/// Forward intermediates of one denoiser call. Consumed by exactly one backward pass.
#[derive(Debug)]
pub struct GradientTape<'a, T> {
    model: &'a DenoiserModel<T>,
    view: Option<&'a AdapterView<'a, T>>,
    mode: GradMode,
    cond_id: usize,
    x: Vec<T>,
    temb: Vec<T>,
    pre0: Vec<T>,
    blocks: Vec<BlockTape<T>>,
    h_final: Vec<T>,
    consumed: bool,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// Same-shaped container of model parameter gradients; `None` in adapter-only mode.
    pub model: Option<DenoiserModel<T>>,
    /// One entry per term of the attached view, in view order.
    pub adapters: Vec<AdapterGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Names of every gradient entry.
    pub fn keys(&self) -> Vec<String> {
        let mut keys: Vec<String> =
            self.model.as_ref().map(|m| m.params().into_iter().map(|(k, _)| k).collect()).unwrap_or_default();
        for (i, a) in self.adapters.iter().enumerate() {
            keys.push(format!("adapter.{i}.{}.p", a.target));
            keys.push(format!("adapter.{i}.{}.q", a.target));
        }
        keys
    }

    /// Adds `other` into `self`. Both must come from the same model and view layout.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if let (Some(a), Some(b)) = (self.model.as_mut(), other.model.as_ref()) {
            for ((_, dst), (_, src)) in a.params_mut().into_iter().zip(b.params()) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *d + *s;
                }
            }
        }
        for (a, b) in self.adapters.iter_mut().zip(&other.adapters) {
            for (d, s) in a.p.iter_mut().zip(&b.p) {
                *d = *d + *s;
            }
            for (d, s) in a.q.iter_mut().zip(&b.q) {
                *d = *d + *s;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        if let Some(m) = self.model.as_mut() {
            for (_, p) in m.params_mut() {
                p.iter_mut().for_each(|v| *v = *v * s);
            }
        }
        for a in &mut self.adapters {
            a.p.iter_mut().chain(a.q.iter_mut()).for_each(|v| *v = *v * s);
        }
    }

    pub fn all_finite(&self) -> bool {
        let model_ok = self
            .model
            .as_ref()
            .map(|m| m.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite())))
            .unwrap_or(true);
        model_ok && self.adapters.iter().all(|a| a.p.iter().chain(&a.q).all(|v| v.is_finite()))
    }
}

impl<T: Scalar> DenoiserModel<T> {
    pub const NULL_CONDITION: usize = 0;

    /// Fresh model: weights normal with std `1/sqrt(fan_in)`, embeddings standard normal.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let hidden = config.hidden();
        let row = config.cond_tokens * config.cond_dim;
        let embedding = Tensor::from_fn(config.vocab_size, row, |i, _| {
            let z: f64 = StandardNormal.sample(rng);
            if i == Self::NULL_CONDITION {
                T::zero()
            } else {
                T::lit(z)
            }
        });
        let input = LinearLayer::init("input", hidden, config.sample_dim, true, rng);
        let time = LinearLayer::init("time", hidden, config.time_dim, true, rng);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (i, kind) in config.blocks.iter().enumerate() {
            blocks.push(match kind {
                BlockKind::Dense => {
                    Block::Dense(LinearLayer::init(format!("blocks.{i}.dense"), hidden, hidden, true, rng))
                }
                BlockKind::Attention => Block::Attention(CrossAttentionBlock::init(
                    &format!("blocks.{i}"),
                    config.tokens,
                    config.channels,
                    config.cond_tokens,
                    config.cond_dim,
                    config.attn_dim,
                    config.heads,
                    rng,
                )?),
            });
        }
        let head = LinearLayer::init("head", config.sample_dim, hidden, true, rng);
        Ok(Self { config, embedding, input, time, blocks, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sample_dim(&self) -> usize {
        self.config.sample_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embedding: Tensor::zeros(self.embedding.shape().to_vec()),
            input: self.input.zeros_like(),
            time: self.time.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Dense(l) => Block::Dense(l.zeros_like()),
                    Block::Attention(a) => Block::Attention(a.zeros_like()),
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// All parameters in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, &[T])> {
        let mut out = vec![("embedding".to_string(), self.embedding.data())];
        out.extend(self.input.params());
        out.extend(self.time.params());
        for b in &self.blocks {
            match b {
                Block::Dense(l) => out.extend(l.params()),
                Block::Attention(a) => {
                    for p in Projection::ALL {
                        out.extend(a.projection(p).params());
                    }
                }
            }
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = vec![("embedding".to_string(), self.embedding.data_mut())];
        out.extend(self.input.params_mut());
        out.extend(self.time.params_mut());
        for b in &mut self.blocks {
            match b {
                Block::Dense(l) => out.extend(l.params_mut()),
                Block::Attention(a) => {
                    let CrossAttentionBlock { w_q, w_k, w_v, w_out, .. } = a;
                    out.extend(w_q.params_mut());
                    out.extend(w_k.params_mut());
                    out.extend(w_v.params_mut());
                    out.extend(w_out.params_mut());
                }
            }
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Rebuilds a model from a descriptor and parameter arrays in `params()` order.
    pub fn from_params(config: ModelConfig, arrays: Vec<Vec<T>>) -> Result<Self> {
        let mut model = Self::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let slots = model.params_mut();
        if slots.len() != arrays.len() {
            return Err(Error::Dimension {
                what: "parameter array count".into(),
                expected: slots.len(),
                got: arrays.len(),
            });
        }
        for ((name, dst), src) in slots.into_iter().zip(arrays) {
            if dst.len() != src.len() {
                return Err(Error::Dimension {
                    what: format!("parameter {name}"),
                    expected: dst.len(),
                    got: src.len(),
                });
            }
            dst.copy_from_slice(&src);
        }
        Ok(model)
    }

    /// Shape `(m, n)` of an adaptable matrix.
    pub fn target_shape(&self, target: AdapterTarget) -> Option<(usize, usize)> {
        self.layer(target).map(|l| (l.out_dim(), l.in_dim()))
    }

    pub fn layer(&self, target: AdapterTarget) -> Option<&LinearLayer<T>> {
        match target {
            AdapterTarget::Input => Some(&self.input),
            AdapterTarget::Head => Some(&self.head),
            AdapterTarget::Dense { block } => match self.blocks.get(block)? {
                Block::Dense(l) => Some(l),
                _ => None,
            },
            AdapterTarget::Attention { block, proj } => match self.blocks.get(block)? {
                Block::Attention(a) => Some(a.projection(proj)),
                _ => None,
            },
        }
    }

    /// Mutable access to one matrix (used by dense-patch oracles and tests).
    pub fn layer_mut(&mut self, target: AdapterTarget) -> Option<&mut LinearLayer<T>> {
        match target {
            AdapterTarget::Input => Some(&mut self.input),
            AdapterTarget::Head => Some(&mut self.head),
            AdapterTarget::Dense { block } => match self.blocks.get_mut(block)? {
                Block::Dense(l) => Some(l),
                _ => None,
            },
            AdapterTarget::Attention { block, proj } => match self.blocks.get_mut(block)? {
                Block::Attention(a) => Some(a.projection_mut(proj)),
                _ => None,
            },
        }
    }

    /// Cross-attention projections, optionally restricted to `projections`.
    pub fn attention_targets(&self, projections: &[Projection]) -> Vec<AdapterTarget> {
        let mut out = Vec::new();
        for (block, b) in self.blocks.iter().enumerate() {
            if let Block::Attention(_) = b {
                for proj in Projection::ALL {
                    if projections.contains(&proj) {
                        out.push(AdapterTarget::Attention { block, proj });
                    }
                }
            }
        }
        out
    }

    /// Every linear matrix except the timestep projection.
    pub fn all_targets(&self) -> Vec<AdapterTarget> {
        let mut out = vec![AdapterTarget::Input];
        for (block, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Dense(_) => out.push(AdapterTarget::Dense { block }),
                Block::Attention(_) => {
                    out.extend(Projection::ALL.iter().map(|&proj| AdapterTarget::Attention { block, proj }))
                }
            }
        }
        out.push(AdapterTarget::Head);
        out
    }

    /// Validates every term of a view against the matrix it targets.
    pub fn check_view(&self, view: &AdapterView<'_, T>) -> Result<()> {
        for term in view.terms() {
            let layer = self.layer(term.target).ok_or_else(|| Error::TargetMismatch(term.target.to_string()))?;
            layer.check_terms(view, term.target)?;
        }
        Ok(())
    }

    fn check_inputs(&self, x: &[T], cond_id: usize) -> Result<()> {
        if x.len() != self.config.sample_dim {
            return Err(Error::Dimension {
                what: "denoiser input".into(),
                expected: self.config.sample_dim,
                got: x.len(),
            });
        }
        if cond_id >= self.config.vocab_size {
            return Err(Error::UnknownCondition(cond_id));
        }
        Ok(())
    }

    /// Predicted noise for `x_t` under condition `cond_id` at timestep `t`.
    pub fn forward(&self, x: &[T], cond_id: usize, t: usize, view: Option<&AdapterView<'_, T>>) -> Result<Vec<T>> {
        self.check_inputs(x, cond_id)?;
        if let Some(v) = view {
            self.check_view(v)?;
        }
        Ok(self.run(x, cond_id, t, view, None))
    }

    /// Forward pass that records a tape for one backward pass in `mode`.
    pub fn forward_train<'a>(
        &'a self,
        x: &[T],
        cond_id: usize,
        t: usize,
        view: Option<&'a AdapterView<'a, T>>,
        mode: GradMode,
    ) -> Result<(Vec<T>, GradientTape<'a, T>)> {
        self.check_inputs(x, cond_id)?;
        if let Some(v) = view {
            self.check_view(v)?;
        }
        let mut tape = GradientTape {
            model: self,
            view,
            mode,
            cond_id,
            x: x.to_vec(),
            temb: Vec::new(),
            pre0: Vec::new(),
            blocks: Vec::with_capacity(self.blocks.len()),
            h_final: Vec::new(),
            consumed: false,
        };
        let y = self.run(x, cond_id, t, view, Some(&mut tape));
        Ok((y, tape))
    }

    fn run(
        &self,
        x: &[T],
        cond_id: usize,
        t: usize,
        view: Option<&AdapterView<'_, T>>,
        mut tape: Option<&mut GradientTape<'_, T>>,
    ) -> Vec<T> {
        let hidden = self.config.hidden();
        let temb: Vec<T> = sinusoidal_embedding(t, self.config.time_dim);
        let mut pre0 = vec![T::zero(); hidden];
        self.input.apply(x, view, AdapterTarget::Input, &mut pre0);
        let mut tpart = vec![T::zero(); hidden];
        self.time.apply(&temb, None, AdapterTarget::Input, &mut tpart);
        for (a, b) in pre0.iter_mut().zip(&tpart) {
            *a = *a + *b;
        }
        let mut h: Vec<T> = pre0.iter().map(|a| silu(*a)).collect();
        let cond = self.embedding.row(cond_id);
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Dense(layer) => {
                    let mut pre = vec![T::zero(); hidden];
                    layer.apply(&h, view, AdapterTarget::Dense { block: i }, &mut pre);
                    let next: Vec<T> = h.iter().zip(&pre).map(|(hi, a)| *hi + silu(*a)).collect();
                    if let Some(tp) = tape.as_deref_mut() {
                        tp.blocks.push(BlockTape::Dense { h_in: h, pre });
                    }
                    h = next;
                }
                Block::Attention(attn) => {
                    let (next, at) = attn.forward_taped(&h, cond, view, i);
                    if let Some(tp) = tape.as_deref_mut() {
                        tp.blocks.push(BlockTape::Attention(at));
                    }
                    h = next;
                }
            }
        }
        let mut out = vec![T::zero(); self.config.sample_dim];
        self.head.apply(&h, view, AdapterTarget::Head, &mut out);
        if let Some(tp) = tape {
            tp.temb = temb;
            tp.pre0 = pre0;
            tp.h_final = h;
        }
        out
    }
}

impl<'a, T: Scalar> GradientTape<'a, T> {
    pub fn mode(&self) -> GradMode {
        self.mode
    }

    /// Backpropagates `loss_grad` (dL/d output). Fails if the tape was already used.
    pub fn backward(&mut self, loss_grad: &[T]) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let model = self.model;
        if loss_grad.len() != model.config.sample_dim {
            return Err(Error::Dimension {
                what: "loss gradient".into(),
                expected: model.config.sample_dim,
                got: loss_grad.len(),
            });
        }
        self.consumed = true;
        let view = self.view;
        let full = self.mode == GradMode::Full;
        let mut grads = full.then(|| model.zeros_like());
        let mut adapter_grads: Vec<AdapterGrad<T>> = view
            .map(|v| {
                v.terms()
                    .iter()
                    .map(|t| AdapterGrad {
                        target: t.target,
                        p: vec![T::zero(); t.p.len()],
                        q: vec![T::zero(); t.q.len()],
                    })
                    .collect()
            })
            .unwrap_or_default();

        let hidden = model.config.hidden();
        let mut g_h = vec![T::zero(); hidden];
        model.head.backward(
            &self.h_final,
            loss_grad,
            view,
            AdapterTarget::Head,
            Some(&mut g_h),
            grads.as_mut().map(|g| &mut g.head),
            &mut adapter_grads,
        );
        let embed_grad = full && self.cond_id != DenoiserModel::<T>::NULL_CONDITION;
        for (i, bt) in self.blocks.iter().enumerate().rev() {
            let g_block = grads.as_mut().map(|g| &mut g.blocks[i]);
            match (bt, &model.blocks[i]) {
                (BlockTape::Dense { h_in, pre }, Block::Dense(layer)) => {
                    let g_pre: Vec<T> = g_h.iter().zip(pre).map(|(g, a)| *g * silu_grad(*a)).collect();
                    let mut dx = g_h.clone();
                    let gl = match g_block {
                        Some(Block::Dense(l)) => Some(l),
                        _ => None,
                    };
                    layer.backward(
                        h_in,
                        &g_pre,
                        view,
                        AdapterTarget::Dense { block: i },
                        Some(&mut dx),
                        gl,
                        &mut adapter_grads,
                    );
                    g_h = dx;
                }
                (BlockTape::Attention(at), Block::Attention(attn)) => {
                    let ga = match g_block {
                        Some(Block::Attention(a)) => Some(a),
                        _ => None,
                    };
                    let (dx, dcond) = attn.backward(at, &g_h, view, i, ga, &mut adapter_grads, embed_grad);
                    for (g, d) in g_h.iter_mut().zip(&dx) {
                        *g = *g + *d;
                    }
                    if let (Some(dc), Some(g)) = (dcond, grads.as_mut()) {
                        let row = dc.len();
                        let dst = &mut g.embedding.data_mut()[self.cond_id * row..(self.cond_id + 1) * row];
                        for (d, s) in dst.iter_mut().zip(&dc) {
                            *d = *d + *s;
                        }
                    }
                }
                _ => unreachable!("tape recorded by this model"),
            }
        }
        let g_pre0: Vec<T> = g_h.iter().zip(&self.pre0).map(|(g, a)| *g * silu_grad(*a)).collect();
        model.input.backward(
            &self.x,
            &g_pre0,
            view,
            AdapterTarget::Input,
            None,
            grads.as_mut().map(|g| &mut g.input),
            &mut adapter_grads,
        );
        if let Some(g) = grads.as_mut() {
            model.time.backward(&self.temb, &g_pre0, None, AdapterTarget::Input, None, Some(&mut g.time), &mut []);
        }
        Ok(Gradients { model: grads, adapters: adapter_grads })
    }
}
