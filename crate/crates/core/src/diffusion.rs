//! Conditional denoising diffusion: noise schedule, forward noising, the
//! noise-prediction loss, and DDPM / DDIM samplers.
//!
//! Step indices are 1-based (`1..=T`); `alpha_bar(0) == 1` closes the final
//! reverse step.

use candle_core::{DType, Tensor};
use candle_nn::VarMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ResidualBackbone};
use crate::error::{Error, Result};
use crate::nn::{
    all_finite, gaussian_vec, mse, rng_from_seed, tensor_from_f64, ParamStore, Parameterized,
};
use crate::skeleton::{ConditionEmbedder, SkeletonEmbedder};
use crate::train::{adam, epoch_batches, ensure_finite_loss, scalar, select_rows, vars_of, LossHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linearly spaced betas from `beta_min` to `beta_max` inclusive; `T == 1`
/// yields the singleton `[beta_min]`.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs T >= 1".into()));
    }
    if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        let span = (beta_max - beta_min) / (steps - 1) as f64;
        (0..steps)
            .map(|i| {
                if i == steps - 1 {
                    beta_max
                } else {
                    beta_min + span * i as f64
                }
            })
            .collect()
    };
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    for b in &betas {
        let prev = *alpha_bars.last().expect("non-empty");
        alpha_bars.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule {
        beta_min,
        beta_max,
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                what: "diffusion step",
                index: t,
                len: self.steps(),
            });
        }
        Ok(())
    }

    /// `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Validation(format!(
            "{what}: shape {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps` for a single step shared by
/// the whole tensor.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    check_same_shape(x0, eps, "forward_noise")?;
    let ab = sched.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Per-row coefficient column `(B, 1, ..., 1)` matching `like`'s rank.
fn row_coefficients(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let mut dims = vec![values.len()];
    dims.extend(std::iter::repeat(1).take(like.rank() - 1));
    tensor_from_f64(values, &dims, like.dtype())
}

/// Batched forward noising with one step per leading-axis row.
pub fn forward_noise_rows(
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape(x0, eps, "forward_noise")?;
    if x0.rank() == 0 || x0.dim(0)? != steps.len() {
        return Err(Error::Validation(format!(
            "{} steps for leading dimension {:?}",
            steps.len(),
            x0.dims().first()
        )));
    }
    for &t in steps {
        sched.check_step(t)?;
    }
    let a = row_coefficients(steps.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect(), x0)?;
    let s = row_coefficients(
        steps.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect(),
        x0,
    )?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Noise predictor `eps_theta(x_t, t, c)`; `c` is an already-embedded
/// condition batch `(B, E)`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, steps: &[usize], c: &Tensor) -> Result<Tensor>;
}

/// Mean squared error between `eps` and the predictor's output on the
/// forward-noised input.
pub fn ddpm_loss(
    denoiser: &dyn NoisePredictor,
    x0: &Tensor,
    c: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = forward_noise_rows(x0, steps, eps, sched)?;
    let pred = denoiser.predict_noise(&x_t, steps, c)?;
    check_same_shape(&pred, eps, "ddpm_loss prediction")?;
    mse(&pred, eps)
}

/// Independent gaussian streams, one per batch row; identical seeds give
/// identical draws.
pub struct RowNoise {
    rngs: Vec<ChaCha8Rng>,
    shape: Vec<usize>,
    dtype: DType,
}

impl RowNoise {
    pub fn new(seeds: &[u64], shape: &[usize], dtype: DType) -> Self {
        Self {
            rngs: seeds.iter().map(|&s| rng_from_seed(s)).collect(),
            shape: shape.to_vec(),
            dtype,
        }
    }

    pub fn rows(&self) -> usize {
        self.rngs.len()
    }

    /// Draws a `(rows, shape...)` standard-normal tensor.
    pub fn draw(&mut self) -> Result<Tensor> {
        let per_row: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(per_row * self.rngs.len());
        for rng in &mut self.rngs {
            data.extend(gaussian_vec(rng, per_row));
        }
        let mut dims = vec![self.rngs.len()];
        dims.extend(&self.shape);
        tensor_from_f64(data, &dims, self.dtype)
    }
}

fn check_batch(c: &Tensor, seeds: &[u64]) -> Result<usize> {
    let b = c.dim(0)?;
    if b != seeds.len() {
        return Err(Error::Validation(format!(
            "{} seeds for a condition batch of {b}",
            seeds.len()
        )));
    }
    Ok(b)
}

fn divergence_check(x: &Tensor, stage: &str, step: usize) -> Result<()> {
    if all_finite(x)? {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: stage.to_string(),
            step,
            detail: "non-finite sample".into(),
        })
    }
}

/// Ancestral DDPM sampling from `x_T ~ N(0, I)`; one seed per condition row.
/// `shape` is the per-sample signal shape.
pub fn ddpm_sample(
    denoiser: &dyn NoisePredictor,
    c: &Tensor,
    sched: &NoiseSchedule,
    shape: &[usize],
    seeds: &[u64],
) -> Result<Tensor> {
    let b = check_batch(c, seeds)?;
    let mut noise = RowNoise::new(seeds, shape, c.dtype());
    let mut x = noise.draw()?;
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; b];
        let eps = denoiser.predict_noise(&x, &ts, c)?;
        check_same_shape(&eps, &x, "ddpm_sample prediction")?;
        let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let mean = ((&x - (eps * coef)?)? / sched.alpha(t).sqrt())?;
        x = if t > 1 {
            let sigma = ((1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t))).sqrt()
                * sched.beta(t).sqrt();
            (mean + (noise.draw()? * sigma)?)?
        } else {
            mean
        };
        divergence_check(&x, "ddpm_sample", t)?;
    }
    Ok(x)
}

/// Uniformly spaced descending subsequence of `1..=T` of length `T_S`,
/// starting at `T` and ending at 1.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!(
            "DDIM needs 1 <= T_S <= T, got T_S = {steps}, T = {total}"
        )));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .rev()
        .map(|i| 1 + (span * i as f64).round() as usize)
        .collect())
}

/// DDIM sampling from seeded initial noise.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample(
    denoiser: &dyn NoisePredictor,
    c: &Tensor,
    sched: &NoiseSchedule,
    shape: &[usize],
    steps: usize,
    eta: f64,
    seeds: &[u64],
) -> Result<Tensor> {
    check_batch(c, seeds)?;
    let mut noise = RowNoise::new(seeds, shape, c.dtype());
    let x_t = noise.draw()?;
    ddim_sample_from(denoiser, c, sched, &x_t, steps, eta, &mut noise)
}

/// DDIM trajectory from a given `x_T`. With `eta == 0` `noise` is never
/// drawn from and the result is a deterministic function of `x_T`.
pub fn ddim_sample_from(
    denoiser: &dyn NoisePredictor,
    c: &Tensor,
    sched: &NoiseSchedule,
    x_t: &Tensor,
    steps: usize,
    eta: f64,
    noise: &mut RowNoise,
) -> Result<Tensor> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("eta must be >= 0, got {eta}")));
    }
    let b = c.dim(0)?;
    if x_t.dim(0)? != b {
        return Err(Error::Validation("initial noise / condition batch mismatch".into()));
    }
    let taus = ddim_timesteps(sched.steps(), steps)?;
    let mut x = x_t.clone();
    for (i, &t) in taus.iter().enumerate() {
        let prev = taus.get(i + 1).copied().unwrap_or(0);
        let ab_t = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(prev);
        let eps = denoiser.predict_noise(&x, &vec![t; b], c)?;
        check_same_shape(&eps, &x, "ddim_sample prediction")?;
        let x0_pred = ((&x - (&eps * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?;
        // Strided steps use the effective beta 1 - abar_t / abar_prev.
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = ((x0_pred * ab_prev.sqrt())? + (eps * dir)?)?;
        if sigma > 0.0 {
            next = (next + (noise.draw()? * sigma)?)?;
        }
        x = next;
        divergence_check(&x, "ddim_sample", t)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    Ddpm,
    Ddim { steps: usize, eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub bone_count: usize,
    pub embed_width: usize,
    pub backbone: BackboneConfig,
    pub signal_len: usize,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl DiffusionConfig {
    pub fn signal_shape(&self) -> [usize; 2] {
        [self.backbone.channels, self.signal_len]
    }
}

/// The residual backbone with a step embedding, as a noise predictor.
#[derive(Debug, Clone)]
pub struct Denoiser {
    backbone: ResidualBackbone,
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &Tensor, steps: &[usize], c: &Tensor) -> Result<Tensor> {
        self.backbone.forward(x_t, Some(steps), c)
    }
}

/// Skeleton embedder plus denoiser, sharing one parameter map
/// (`embedder.*`, `denoiser.*`).
pub struct DiffusionModel {
    cfg: DiffusionConfig,
    vars: VarMap,
    embedder: SkeletonEmbedder,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
}

impl DiffusionModel {
    pub fn new(cfg: &DiffusionConfig, seed: u64, dtype: DType) -> Result<Self> {
        if cfg.backbone.cond_width != cfg.embed_width {
            return Err(Error::Config(
                "backbone condition width must equal the embedding width".into(),
            ));
        }
        if cfg.signal_len == 0 {
            return Err(Error::Config("signal length must be positive".into()));
        }
        let schedule = build_schedule(cfg.steps, cfg.beta_min, cfg.beta_max)?;
        let mut ps = ParamStore::new(seed, dtype);
        let embedder = SkeletonEmbedder::build(&mut ps, "embedder", cfg.bone_count, cfg.embed_width)?;
        let backbone = ResidualBackbone::new(&mut ps, "denoiser", &cfg.backbone, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            vars: ps.into_varmap(),
            embedder,
            denoiser: Denoiser { backbone },
            schedule,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn embedder(&self) -> &SkeletonEmbedder {
        &self.embedder
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Samples one signal per row of the embedded condition batch.
    pub fn sample(&self, c: &Tensor, sampler: Sampler, seeds: &[u64]) -> Result<Tensor> {
        let shape = self.cfg.signal_shape();
        match sampler {
            Sampler::Ddpm => ddpm_sample(&self.denoiser, c, &self.schedule, &shape, seeds),
            Sampler::Ddim { steps, eta } => {
                ddim_sample(&self.denoiser, c, &self.schedule, &shape, steps, eta, seeds)
            }
        }
    }
}

impl Parameterized for DiffusionModel {
    fn varmap(&self) -> &VarMap {
        &self.vars
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Trains embedder and denoiser jointly on `(signals (N, C, L), skeletons
/// (N, 6K))`. Returns per-epoch mean loss.
pub fn train_diffusion(
    model: &DiffusionModel,
    signals: &Tensor,
    skeletons: &Tensor,
    cfg: &GenTrainConfig,
) -> Result<LossHistory> {
    let mut history = LossHistory::new(&["loss"]);
    let n = signals.dim(0)?;
    if skeletons.dim(0)? != n {
        return Err(Error::Validation("signal / skeleton count mismatch".into()));
    }
    if cfg.epochs == 0 || n == 0 {
        return Ok(history);
    }
    let mut opt = adam(vars_of(&model.vars), cfg.lr)?;
    let mut rng = rng_from_seed(cfg.seed);
    let shape = model.cfg.signal_shape();
    let t_max = model.schedule.steps();
    let mut step_count = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(n, cfg.batch_size, cfg.seed, epoch);
        for rows in &batches {
            let x0 = select_rows(signals, rows)?;
            let h = select_rows(skeletons, rows)?;
            let c = model.embedder.embed(&h)?;
            let ts: Vec<usize> = (0..rows.len()).map(|_| rng.random_range(1..=t_max)).collect();
            let seeds: Vec<u64> = (0..rows.len()).map(|_| rng.random()).collect();
            let eps = RowNoise::new(&seeds, &shape, x0.dtype()).draw()?;
            let loss = ddpm_loss(&model.denoiser, &x0, &c, &ts, &eps, &model.schedule)?;
            let value = scalar(&loss)?;
            ensure_finite_loss(value, "train_diffusion", epoch, step_count)?;
            crate::train::step(&mut opt, &loss)?;
            total += value * rows.len() as f64;
            step_count += 1;
        }
        history.push(vec![total / n as f64]);
        log::debug!("diffusion epoch {} loss {:.6}", epoch + 1, total / n as f64);
    }
    Ok(history)
}
