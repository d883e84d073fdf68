//! DDPM schedule, forward noising, the denoising objective, classifier-free guidance and
//! the ancestral sampler.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{AdapterView, DenoiserModel, GradMode, GradientTape};
use crate::rng::normal_vec;
use crate::scalar::Scalar;

/// Anything that predicts noise `eps(x_t, c, t)`.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, x: &[T], cond: usize, t: usize, view: Option<&AdapterView<'_, T>>) -> Result<Vec<T>>;

    fn null_condition(&self) -> usize {
        DenoiserModel::<T>::NULL_CONDITION
    }
}

impl<T: Scalar> NoisePredictor<T> for DenoiserModel<T> {
    fn predict(&self, x: &[T], cond: usize, t: usize, view: Option<&AdapterView<'_, T>>) -> Result<Vec<T>> {
        self.forward(x, cond, t, view)
    }
}

/// Wraps a closure `(x, cond, t) -> eps` as a predictor; adapters are ignored.
pub struct FnPredictor<F>(pub F);

impl<T: Scalar, F: Fn(&[T], usize, usize) -> Vec<T>> NoisePredictor<T> for FnPredictor<F> {
    fn predict(&self, x: &[T], cond: usize, t: usize, _view: Option<&AdapterView<'_, T>>) -> Result<Vec<T>> {
        Ok((self.0)(x, cond, t))
    }
}

/// Linear-beta DDPM schedule. Index `t` runs over `0..steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("schedule.steps", "must be at least 2"));
        }
        if !(beta_max < 1.0 && beta_max > 0.0) {
            return Err(Error::config(
                "schedule.beta_max",
                format!("need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"),
            ));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max) {
            return Err(Error::config(
                "schedule.beta_min",
                format!("need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"),
            ));
        }
        let mut betas = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut running = 1.0f64;
        for t in 0..steps {
            let beta = beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64;
            running *= 1.0 - beta;
            betas.push(T::lit(beta));
            alphas.push(T::lit(1.0 - beta));
            alpha_bars.push(T::lit(running));
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Timestep { t, steps: self.steps() });
        }
        Ok(())
    }

    /// Reverse-step standard deviation `sqrt(beta_t (1 - abar_{t-1}) / (1 - abar_t))`, zero at `t = 0`.
    pub fn posterior_sigma(&self, t: usize) -> T {
        if t == 0 {
            return T::zero();
        }
        let one = T::one();
        (self.betas[t] * (one - self.alpha_bars[t - 1]) / (one - self.alpha_bars[t])).sqrt()
    }

    /// Posterior mean step `x_t -> x_{t-1}` given a noise estimate, plus `sigma_t * noise`.
    pub fn reverse_step(&self, x: &[T], eps: &[T], t: usize, noise: Option<&[T]>) -> Vec<T> {
        let one = T::one();
        let coef = self.betas[t] / (one - self.alpha_bars[t]).sqrt();
        let inv_sqrt_alpha = one / self.alphas[t].sqrt();
        let sigma = self.posterior_sigma(t);
        x.iter()
            .zip(eps)
            .enumerate()
            .map(|(i, (xi, ei))| {
                let mean = (*xi - coef * *ei) * inv_sqrt_alpha;
                match noise {
                    Some(z) if t > 0 => mean + sigma * z[i],
                    _ => mean,
                }
            })
            .collect()
    }
}

/// Convenience constructor mirroring the operation name.
pub fn make_schedule<T: Scalar>(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule<T>> {
    NoiseSchedule::linear(steps, beta_min, beta_max)
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`
pub fn q_sample<T: Scalar>(x0: &[T], t: usize, eps: &[T], sched: &NoiseSchedule<T>) -> Result<Vec<T>> {
    sched.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Dimension { what: "q_sample noise".into(), expected: x0.len(), got: eps.len() });
    }
    let ab = sched.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * *x + b * *e).collect())
}

/// Squared-error denoising loss with its tape and the output gradient to feed `backward`.
pub struct LdmLoss<'a, T> {
    pub loss: T,
    pub output_grad: Vec<T>,
    pub tape: GradientTape<'a, T>,
}

/// `|| eps - eps_theta(q_sample(x0, t, eps), c, t) ||^2`, recorded for full-model gradients.
pub fn ldm_loss<'a, T: Scalar>(
    model: &'a DenoiserModel<T>,
    x0: &[T],
    cond: usize,
    t: usize,
    eps: &[T],
    sched: &NoiseSchedule<T>,
) -> Result<LdmLoss<'a, T>> {
    let zt = q_sample(x0, t, eps, sched)?;
    let (pred, tape) = model.forward_train(&zt, cond, t, None, GradMode::Full)?;
    let mut loss = T::zero();
    let mut output_grad = Vec::with_capacity(pred.len());
    for (p, e) in pred.iter().zip(eps) {
        let r = *p - *e;
        loss = loss + r * r;
        output_grad.push(r + r);
    }
    Ok(LdmLoss { loss, output_grad, tape })
}

/// Loss value only, for arbitrary predictors.
pub fn ldm_objective<T: Scalar, P: NoisePredictor<T>>(
    predictor: &P,
    x0: &[T],
    cond: usize,
    t: usize,
    eps: &[T],
    sched: &NoiseSchedule<T>,
) -> Result<T> {
    let zt = q_sample(x0, t, eps, sched)?;
    let pred = predictor.predict(&zt, cond, t, None)?;
    Ok(pred.iter().zip(eps).map(|(p, e)| (*p - *e) * (*p - *e)).sum())
}

/// Classifier-free guided noise `eps_u + scale (eps_c - eps_u)`.
pub fn cfg_epsilon<T: Scalar, P: NoisePredictor<T>>(
    predictor: &P,
    z: &[T],
    cond: usize,
    t: usize,
    guidance_scale: T,
    view: Option<&AdapterView<'_, T>>,
) -> Result<Vec<T>> {
    if guidance_scale == T::one() {
        return predictor.predict(z, cond, t, view);
    }
    let uncond = predictor.predict(z, predictor.null_condition(), t, view)?;
    if guidance_scale == T::zero() {
        return Ok(uncond);
    }
    let c = predictor.predict(z, cond, t, view)?;
    Ok(uncond.iter().zip(&c).map(|(u, c)| *u + guidance_scale * (*c - *u)).collect())
}

/// Reverse-diffusion path from `z_T` to `z_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory<T> {
    /// `latents[0]` is the initial draw, `latents[steps]` the final sample.
    pub latents: Vec<Vec<T>>,
    pub cond: usize,
    pub guidance_scale: T,
}

impl<T: Scalar> SampleTrajectory<T> {
    pub fn final_sample(&self) -> &[T] {
        self.latents.last().expect("non-empty trajectory")
    }
}

/// Runs reverse steps from a fresh `N(0, I)` draw at index `steps - 1` down to and
/// including index `stop`. Returns the visited latents when `record` is set, else only the last.
#[allow(clippy::too_many_arguments)]
pub fn reverse_diffuse<T: Scalar, P: NoisePredictor<T>>(
    predictor: &P,
    dim: usize,
    cond: usize,
    sched: &NoiseSchedule<T>,
    guidance_scale: T,
    view: Option<&AdapterView<'_, T>>,
    stop: usize,
    record: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<T>>> {
    let steps = sched.steps();
    let mut x: Vec<T> = normal_vec(rng, dim);
    let mut out = Vec::with_capacity(if record { steps + 1 } else { 1 });
    if record {
        out.push(x.clone());
    }
    for t in (stop..steps).rev() {
        let eps = cfg_epsilon(predictor, &x, cond, t, guidance_scale, view)?;
        let noise: Option<Vec<T>> = (t > 0).then(|| normal_vec(rng, dim));
        x = sched.reverse_step(&x, &eps, t, noise.as_deref());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: t });
        }
        if record {
            out.push(x.clone());
        }
    }
    if !record {
        out.push(x);
    }
    Ok(out)
}

/// Full ancestral DDPM sampling with classifier-free guidance.
pub fn sample<T: Scalar, P: NoisePredictor<T>>(
    predictor: &P,
    dim: usize,
    cond: usize,
    sched: &NoiseSchedule<T>,
    guidance_scale: T,
    view: Option<&AdapterView<'_, T>>,
    rng: &mut impl Rng,
) -> Result<SampleTrajectory<T>> {
    let latents = reverse_diffuse(predictor, dim, cond, sched, guidance_scale, view, 0, true, rng)?;
    Ok(SampleTrajectory { latents, cond, guidance_scale })
}

/// Final sample only; same random stream as [`sample`].
#[allow(clippy::too_many_arguments)]
pub fn sample_final<T: Scalar, P: NoisePredictor<T>>(
    predictor: &P,
    dim: usize,
    cond: usize,
    sched: &NoiseSchedule<T>,
    guidance_scale: T,
    view: Option<&AdapterView<'_, T>>,
    rng: &mut impl Rng,
) -> Result<Vec<T>> {
    let mut v = reverse_diffuse(predictor, dim, cond, sched, guidance_scale, view, 0, false, rng)?;
    Ok(v.pop().expect("one latent"))
}
