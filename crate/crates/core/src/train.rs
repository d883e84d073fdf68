//! Base-model pretraining on biased data and self-discovering adapter training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    orthogonality_loss, orthogonality_penalty, orthogonality_random_baseline, AdapterBank, AdapterLayout,
    AttributeAdapter, OrthPairing, Placement,
};
use crate::diffusion::{ldm_loss, q_sample, reverse_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{AdapterView, DenoiserModel, GradMode, ModelConfig, Projection};
use crate::rng::{derive_seed, normal_vec, seeded};
use crate::world::{AttributeSpec, ConditionVocab, SyntheticWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_floor: f64,
    /// Probability of replacing a caption with the empty token.
    pub cond_dropout: f64,
    pub heldout: usize,
    pub log_every: usize,
    /// Run seed whose weight initialisation is reused; the data stream still follows the
    /// run's own seed. Absent means the run seed.
    pub init_seed: Option<u64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iters: 30_000,
            batch: 64,
            lr: 2e-3,
            lr_floor: 0.05,
            cond_dropout: 0.1,
            heldout: 256,
            log_every: 500,
            init_seed: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::config("pretrain.iters", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("pretrain.batch", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::config("pretrain.lr_floor", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::config("pretrain.cond_dropout", "must lie in [0, 1)"));
        }
        if self.log_every == 0 {
            return Err(Error::config("pretrain.log_every", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PretrainLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: DenoiserModel<f64>,
    pub curve: Vec<PretrainLogRow>,
}

/// Plain Adam over every model parameter.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &DenoiserModel<f64>) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
        Self {
            m: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            v: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut DenoiserModel<f64>, grads: &DenoiserModel<f64>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, ((_, p), (_, g))) in model.params_mut().into_iter().zip(grads.params()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Draws a training caption for a sample with category combination `combo` from `group`:
/// the empty token with probability `dropout`, otherwise uniformly the group token or one
/// of the sample's category tokens.
pub fn draw_caption(
    world: &SyntheticWorld,
    group: &str,
    combo: &[usize],
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    if rng.random::<f64>() < dropout {
        return Ok(DenoiserModel::<f64>::NULL_CONDITION);
    }
    let pick = rng.random_range(0..=combo.len());
    if pick == combo.len() {
        world.group_id(group)
    } else {
        let attr = &world.attributes()[pick];
        world.category_id(&attr.name, combo[pick])
    }
}

/// Model configuration matching `world`'s sample size and vocabulary.
pub fn model_config_for(world: &SyntheticWorld, mut arch: ModelConfig) -> ModelConfig {
    arch.sample_dim = world.dim();
    arch.vocab_size = world.vocab().len();
    arch
}

/// Trains a denoiser on the biased mixture of every group in `world`. When `init` is given,
/// training continues from it instead of a fresh initialisation.
pub fn pretrain_base(
    world: &SyntheticWorld,
    arch: ModelConfig,
    sched: &NoiseSchedule<f64>,
    cfg: &PretrainConfig,
    init: Option<DenoiserModel<f64>>,
    init_seed: u64,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let arch = model_config_for(world, arch);
    let mut model = match init {
        Some(m) => {
            if m.config() != &arch {
                return Err(Error::ArchitectureMismatch(
                    "initial model does not match the configured architecture".into(),
                ));
            }
            m
        }
        None => DenoiserModel::init(arch, &mut seeded(derive_seed(init_seed, 10, 0)))?,
    };
    let groups: Vec<String> = world.spec().groups.iter().map(|g| g.name.clone()).collect();
    let mut rng = seeded(derive_seed(seed, 11, 0));
    let steps = sched.steps();

    let draw = |rng: &mut crate::rng::StdRng| -> Result<(Vec<f64>, usize, usize, Vec<f64>)> {
        let group = &groups[rng.random_range(0..groups.len())];
        let ds = world.sample_dataset(group, 1, rng)?;
        let cond = draw_caption(world, group, &ds.labels[0], cfg.cond_dropout, rng)?;
        let t = rng.random_range(0..steps);
        let eps = normal_vec(rng, world.dim());
        Ok((ds.samples[0].clone(), cond, t, eps))
    };
    let mut held_rng = seeded(derive_seed(seed, 12, 0));
    let heldout: Vec<_> = (0..cfg.heldout).map(|_| draw(&mut held_rng)).collect::<Result<_>>()?;
    let heldout_loss = |m: &DenoiserModel<f64>| -> Result<f64> {
        let mut total = 0.0;
        for (x0, c, t, eps) in &heldout {
            let zt = q_sample(x0, *t, eps, sched)?;
            let pred = m.forward(&zt, *c, *t, None)?;
            total += pred.iter().zip(eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>();
        }
        Ok(total / heldout.len().max(1) as f64)
    };

    let mut adam = Adam::new(&model);
    let mut curve = vec![PretrainLogRow { step: 0, train_loss: f64::NAN, heldout_loss: heldout_loss(&model)? }];
    let mut window = 0.0;
    let mut window_n = 0usize;
    for step in 1..=cfg.iters {
        let mut grads = model.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let (x0, c, t, eps) = draw(&mut rng)?;
            let mut l = ldm_loss(&model, &x0, c, t, &eps, sched)?;
            loss += l.loss;
            let g = l.tape.backward(&l.output_grad)?;
            let gm = g.model.expect("full-mode gradients");
            for ((_, d), (_, s)) in grads.params_mut().into_iter().zip(gm.params()) {
                for (a, b) in d.iter_mut().zip(s) {
                    *a += *b;
                }
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "pretraining loss".into(), step });
        }
        for (_, p) in grads.params_mut() {
            p.iter_mut().for_each(|v| *v *= inv);
        }
        let progress = (step - 1) as f64 / cfg.iters.max(2).saturating_sub(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let lr = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cosine);
        adam.step(&mut model, &grads, lr);
        window += loss;
        window_n += 1;
        if step % cfg.log_every == 0 || step == cfg.iters {
            let row =
                PretrainLogRow { step, train_loss: window / window_n as f64, heldout_loss: heldout_loss(&model)? };
            log::info!("pretrain step {step}: train {:.4} heldout {:.4}", row.train_loss, row.heldout_loss);
            curve.push(row);
            window = 0.0;
            window_n = 0;
        }
    }
    Ok(PretrainOutcome { model, curve })
}

/// Hyperparameters of adapter training for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Guidance composition strength.
    pub eta: f64,
    /// Orthogonality weight.
    pub gamma: f64,
    pub lr: f64,
    pub iters: usize,
    /// Adapter strength in training forwards and, by default, at generation.
    pub alpha_scale: f64,
    pub batch: usize,
    /// Timestep range as fractions of the schedule length.
    pub t_range: [f64; 2],
    /// Group token `g_t` whose latents are debiased.
    pub group: String,
    pub q_init_std: f64,
    /// Number of frozen-model trajectories that latents are drawn from.
    pub pool: usize,
    pub placement: Placement,
    pub projections: Vec<Projection>,
    pub pairing: OrthPairing,
    /// Keep earlier banks active (frozen, uniformly selected) while training a later
    /// attribute, both for latent discovery and inside the target and the loss.
    pub compose_prior: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            gamma: 0.1,
            lr: 0.03,
            iters: 1000,
            alpha_scale: 1.0,
            batch: 32,
            t_range: [0.05, 0.95],
            group: "worker".into(),
            q_init_std: 1.0,
            pool: 512,
            placement: Placement::CrossAttention,
            projections: Projection::ALL.to_vec(),
            pairing: OrthPairing::Positional,
            compose_prior: true,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(format!("train.{k}"), m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", "must be positive");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.iters == 0 {
            return bad("iters", "must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if self.pool == 0 {
            return bad("pool", "must be at least 1");
        }
        if !self.alpha_scale.is_finite() {
            return bad("alpha_scale", "must be finite");
        }
        let [lo, hi] = self.t_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("t_range", "must satisfy 0 <= lo <= hi <= 1");
        }
        if self.projections.is_empty() && self.placement == Placement::CrossAttention {
            return bad("projections", "at least one projection is required");
        }
        if self.log_every == 0 {
            return bad("log_every", "must be at least 1");
        }
        Ok(())
    }

    /// Inclusive timestep index range for a schedule of `steps` steps.
    pub fn timesteps(&self, steps: usize) -> (usize, usize) {
        let last = steps.saturating_sub(1);
        let lo = ((self.t_range[0] * steps as f64).round() as usize).min(last);
        let hi = ((self.t_range[1] * steps as f64).round() as usize).min(last);
        (lo, hi.max(lo))
    }
}

/// Latents `X_t` drawn from the frozen model itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfDiscoveryBatch {
    pub latents: Vec<Vec<f64>>,
    pub timesteps: Vec<usize>,
    pub group: usize,
    /// Per element, the category chosen in each composed prior bank; empty when none are.
    pub prior_choice: Vec<Vec<usize>>,
}

impl SelfDiscoveryBatch {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// For each element: a fresh `N(0, I)` draw is denoised under `group` (no guidance, no
/// adapters) down to a timestep drawn uniformly from `t_range` (inclusive), and `(z_t, t)` is
/// emitted.
pub fn self_discover_latents(
    model: &DenoiserModel<f64>,
    group: usize,
    sched: &NoiseSchedule<f64>,
    batch: usize,
    t_range: (usize, usize),
    rng: &mut impl Rng,
) -> Result<SelfDiscoveryBatch> {
    let (lo, hi) = t_range;
    if hi >= sched.steps() || lo > hi {
        return Err(Error::Timestep { t: hi, steps: sched.steps() });
    }
    let mut out = SelfDiscoveryBatch {
        latents: Vec::with_capacity(batch),
        timesteps: Vec::with_capacity(batch),
        group,
        prior_choice: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let t = rng.random_range(lo..=hi);
        let mut z = reverse_diffuse(model, model.sample_dim(), group, sched, 1.0, None, t + 1, false, rng)?;
        out.latents.push(z.pop().expect("one latent"));
        out.timesteps.push(t);
        out.prior_choice.push(Vec::new());
    }
    Ok(out)
}

/// Rank-1 terms of the prior adapters picked by `choice`, one index per bank.
pub fn prior_view<'a>(prior: &'a [AdapterBank<f64>], choice: &[usize], alpha: f64) -> AdapterView<'a, f64> {
    AdapterView::merge(prior.iter().zip(choice).map(|(b, &i)| b.adapters[i].view(alpha)))
}

/// Full frozen-model trajectories under `group`; `latents[k][i]` is the input of step
/// `steps - 1 - i`, and the last entry is the final sample.
#[derive(Debug, Clone)]
pub struct LatentPool {
    trajectories: Vec<Vec<Vec<f64>>>,
    choices: Vec<Vec<usize>>,
    group: usize,
    steps: usize,
}

impl LatentPool {
    pub fn build(
        model: &DenoiserModel<f64>,
        group: usize,
        sched: &NoiseSchedule<f64>,
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build_with_prior(model, group, sched, size, &[], 0.0, rng)
    }

    /// Like [`LatentPool::build`], but each trajectory runs under a uniformly drawn selection
    /// from every bank in `prior`, applied at strength `alpha`.
    pub fn build_with_prior(
        model: &DenoiserModel<f64>,
        group: usize,
        sched: &NoiseSchedule<f64>,
        size: usize,
        prior: &[AdapterBank<f64>],
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut trajectories = Vec::with_capacity(size);
        let mut choices = Vec::with_capacity(size);
        for _ in 0..size {
            let choice: Vec<usize> = prior.iter().map(|b| rng.random_range(0..b.len())).collect();
            let view = prior_view(prior, &choice, alpha);
            let view = (!view.is_empty()).then_some(view);
            trajectories.push(reverse_diffuse(
                model,
                model.sample_dim(),
                group,
                sched,
                1.0,
                view.as_ref(),
                0,
                true,
                rng,
            )?);
            choices.push(choice);
        }
        Ok(Self { trajectories, choices, group, steps: sched.steps() })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Latent entering step `t` of trajectory `k`.
    pub fn latent(&self, k: usize, t: usize) -> &[f64] {
        &self.trajectories[k][self.steps - 1 - t]
    }

    /// Uniform trajectory and uniform `t` in the inclusive range.
    pub fn draw(&self, batch: usize, t_range: (usize, usize), rng: &mut impl Rng) -> SelfDiscoveryBatch {
        let mut out = SelfDiscoveryBatch {
            latents: Vec::with_capacity(batch),
            timesteps: Vec::with_capacity(batch),
            group: self.group,
            prior_choice: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let k = rng.random_range(0..self.len());
            let t = rng.random_range(t_range.0..=t_range.1);
            out.latents.push(self.latent(k, t).to_vec());
            out.timesteps.push(t);
            out.prior_choice.push(self.choices[k].clone());
        }
        out
    }
}

/// `eps_g + eta (eps_d - eps_g)` from two frozen forwards.
pub fn guidance_target(
    model: &DenoiserModel<f64>,
    x: &[f64],
    group: usize,
    category: usize,
    t: usize,
    eta: f64,
) -> Result<Vec<f64>> {
    let eg = model.forward(x, group, t, None)?;
    let ed = model.forward(x, category, t, None)?;
    Ok(eg.iter().zip(&ed).map(|(g, d)| g + eta * (d - g)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLoss {
    pub guidance: f64,
    pub orth: f64,
    pub total: f64,
}

/// Loss and gradients of the adapter in category `slot` without updating it.
pub fn adapter_loss_and_grad(
    model: &DenoiserModel<f64>,
    adapter: &AttributeAdapter<f64>,
    slot: usize,
    layout: &AdapterLayout,
    prior: &[AdapterBank<f64>],
    batch: &SelfDiscoveryBatch,
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(StepLoss, Vec<(Vec<f64>, Vec<f64>)>)> {
    let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
        adapter.pairs.iter().map(|p| (vec![0.0; p.p.len()], vec![0.0; p.q.len()])).collect();
    let n = batch.len().max(1) as f64;
    let mut guidance = 0.0;
    for (i, ((x, t), target)) in batch.latents.iter().zip(&batch.timesteps).zip(targets).enumerate() {
        let fixed = match batch.prior_choice.get(i) {
            Some(c) if !c.is_empty() => prior_view(prior, c, cfg.alpha_scale),
            _ => AdapterView::empty(),
        };
        let skip = fixed.len();
        let view = AdapterView::merge([fixed, adapter.view(cfg.alpha_scale)]);
        let (y, mut tape) = model.forward_train(x, batch.group, *t, Some(&view), GradMode::AdapterOnly)?;
        let mut g = Vec::with_capacity(y.len());
        for (a, b) in y.iter().zip(target) {
            let r = a - b;
            guidance += r * r;
            g.push(2.0 * r / n);
        }
        let out = tape.backward(&g)?;
        for ((dp, dq), ag) in grads.iter_mut().zip(&out.adapters[skip..]) {
            dp.iter_mut().zip(&ag.p).for_each(|(a, b)| *a += b);
            dq.iter_mut().zip(&ag.q).for_each(|(a, b)| *a += b);
        }
    }
    guidance /= n;
    let mut orth = 0.0;
    if !prior.is_empty() {
        let (value, og) = orthogonality_penalty(prior, adapter, layout, slot, cfg.pairing)?;
        orth = value;
        if cfg.gamma > 0.0 {
            for ((dp, dq), (op, oq)) in grads.iter_mut().zip(og) {
                dp.iter_mut().zip(op).for_each(|(a, b)| *a += cfg.gamma * b);
                dq.iter_mut().zip(oq).for_each(|(a, b)| *a += cfg.gamma * b);
            }
        }
    }
    Ok((StepLoss { guidance, orth, total: guidance + cfg.gamma * orth }, grads))
}

/// Targets for every element of `batch`. Elements that carry a prior selection start from
/// the prior-adapted group prediction: `eps_g^prior + eta (eps_d - eps_g)`.
pub fn batch_targets(
    model: &DenoiserModel<f64>,
    batch: &SelfDiscoveryBatch,
    prior: &[AdapterBank<f64>],
    category: usize,
    eta: f64,
    alpha: f64,
) -> Result<Vec<Vec<f64>>> {
    batch
        .latents
        .iter()
        .zip(&batch.timesteps)
        .enumerate()
        .map(|(i, (x, t))| {
            let mut target = guidance_target(model, x, batch.group, category, *t, eta)?;
            if let Some(c) = batch.prior_choice.get(i).filter(|c| !c.is_empty()) {
                let adapted = model.forward(x, batch.group, *t, Some(&prior_view(prior, c, alpha)))?;
                let plain = model.forward(x, batch.group, *t, None)?;
                for ((v, a), p) in target.iter_mut().zip(adapted).zip(plain) {
                    *v += a - p;
                }
            }
            Ok(target)
        })
        .collect()
}

/// One gradient-descent update of `adapter` only. Returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn adapter_train_step(
    model: &DenoiserModel<f64>,
    adapter: &mut AttributeAdapter<f64>,
    slot: usize,
    layout: &AdapterLayout,
    prior: &[AdapterBank<f64>],
    batch: &SelfDiscoveryBatch,
    category: usize,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLoss> {
    let targets = batch_targets(model, batch, prior, category, cfg.eta, cfg.alpha_scale)?;
    let (loss, grads) = adapter_loss_and_grad(model, adapter, slot, layout, prior, batch, &targets, cfg)?;
    let finite = loss.total.is_finite() && grads.iter().all(|(p, q)| p.iter().chain(q).all(|v| v.is_finite()));
    if !finite {
        return Err(Error::NonFinite {
            what: format!("adapter gradient for `{}` (loss {:?})", adapter.category, loss),
            step,
        });
    }
    for (pair, (dp, dq)) in adapter.pairs.iter_mut().zip(grads) {
        pair.p.iter_mut().zip(dp).for_each(|(a, b)| *a -= cfg.lr * b);
        pair.q.iter_mut().zip(dq).for_each(|(a, b)| *a -= cfg.lr * b);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub category: String,
    pub step: usize,
    pub guidance: f64,
    pub orth: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedBank {
    pub bank: AdapterBank<f64>,
    pub curve: Vec<CurveRow>,
    /// Cross-bank orthogonality against the prior banks after training.
    pub orth: f64,
    /// Same metric with every vector replaced by a random one of equal norm.
    pub orth_baseline: f64,
}

/// Trains one adapter per category of `attribute`, sequentially, against the frozen `model`.
pub fn train_attribute(
    model: &DenoiserModel<f64>,
    vocab: &ConditionVocab,
    sched: &NoiseSchedule<f64>,
    attribute: &AttributeSpec,
    prior: &[AdapterBank<f64>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedBank> {
    cfg.validate()?;
    attribute.validate()?;
    let layout = AdapterLayout::for_model(model, cfg.placement, &cfg.projections)?;
    for b in prior {
        if b.layout != layout {
            return Err(Error::IncongruentBanks(format!("prior bank `{}` adapts different matrices", b.attribute)));
        }
    }
    let group = vocab.id(&cfg.group)?;
    let t_range = cfg.timesteps(sched.steps());
    let composed: &[AdapterBank<f64>] = if cfg.compose_prior { prior } else { &[] };
    let pool = LatentPool::build_with_prior(
        model,
        group,
        sched,
        cfg.pool,
        composed,
        cfg.alpha_scale,
        &mut seeded(derive_seed(seed, 20, 0)),
    )?;
    let mut init_rng = seeded(derive_seed(seed, 21, 0));
    let mut bank =
        AdapterBank::new(&attribute.name, &attribute.categories, layout.clone(), cfg.q_init_std, &mut init_rng)?;
    let mut curve = Vec::new();
    for slot in 0..bank.len() {
        let category = vocab.id(&ConditionVocab::category_token(&attribute.name, &attribute.categories[slot]))?;
        let mut rng = seeded(derive_seed(seed, 22, slot as u64));
        let adapter = &mut bank.adapters[slot];
        for step in 0..cfg.iters {
            let batch = pool.draw(cfg.batch, t_range, &mut rng);
            let loss = adapter_train_step(model, adapter, slot, &layout, prior, &batch, category, cfg, step)?;
            if step % cfg.log_every == 0 || step + 1 == cfg.iters {
                curve.push(CurveRow {
                    category: attribute.categories[slot].clone(),
                    step,
                    guidance: loss.guidance,
                    orth: loss.orth,
                    total: loss.total,
                });
            }
        }
        log::info!(
            "trained adapter {}:{} (final guidance loss {:.5})",
            attribute.name,
            attribute.categories[slot],
            curve.last().map(|r| r.guidance).unwrap_or(f64::NAN)
        );
    }
    let (orth, orth_baseline) = if prior.is_empty() {
        (0.0, 0.0)
    } else {
        let mut rng = seeded(derive_seed(seed, 23, 0));
        (
            orthogonality_loss(prior, &bank, cfg.pairing)?,
            orthogonality_random_baseline(prior, &bank, cfg.pairing, 32, &mut rng)?,
        )
    };
    Ok(TrainedBank { bank, curve, orth, orth_baseline })
}
