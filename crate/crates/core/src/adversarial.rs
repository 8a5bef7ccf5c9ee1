//! Conditional Wasserstein GAN with gradient penalty.
//!
//! The critic is a single convolution over the signal concatenated with the
//! channel-broadcast skeleton condition, followed by a linear head over the
//! flattened activations. Its input gradient has a closed form, which lets
//! the penalty term stay differentiable in the critic parameters without
//! second-order autograd.

use candle_core::{DType, Tensor};
use candle_nn::VarMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ResidualBackbone};
use crate::diffusion::RowNoise;
use crate::error::{Error, Result};
use crate::nn::{conv_transpose_same, leaky_relu, rng_from_seed, tensor_from_f64, Conv1d, Linear, ParamStore, Parameterized, LEAKY_SLOPE};
use crate::skeleton::{ConditionEmbedder, SkeletonEmbedder};
use crate::train::{adam_with, ensure_finite_loss, epoch_batches, scalar, select_rows, vars_with_prefix, LossHistory};

pub const DISC_FILTERS: usize = 64;
pub const DISC_KERNEL: usize = 3;

/// A critic `f(x, c)` with a per-sample scalar score and its gradient with
/// respect to the signal.
pub trait Critic {
    /// `(B,)` scores.
    fn score(&self, x: &Tensor, c: &Tensor) -> Result<Tensor>;
    /// `(B, C, L)` gradient of each row's score with respect to its signal;
    /// differentiable in the critic's parameters.
    fn input_gradient(&self, x: &Tensor, c: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    channels: usize,
    len: usize,
    conv: Conv1d,
    head: Linear,
}

impl Discriminator {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        len: usize,
        cond_width: usize,
    ) -> Result<Self> {
        Ok(Self {
            channels,
            len,
            conv: Conv1d::new(ps, &format!("{name}.conv"), channels + cond_width, DISC_FILTERS, DISC_KERNEL, 1)?,
            head: Linear::new(ps, &format!("{name}.head"), DISC_FILTERS * len, 1)?,
        })
    }

    fn check(&self, x: &Tensor, c: &Tensor) -> Result<()> {
        let (b, ch, l) = x.dims3()?;
        if ch != self.channels || l != self.len || c.dim(0)? != b {
            return Err(Error::Validation(format!(
                "critic expects ({}, {}) signals with matching conditions, got {:?} / {:?}",
                self.channels,
                self.len,
                x.dims(),
                c.dims()
            )));
        }
        Ok(())
    }

    fn pre_activation(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        self.check(x, c)?;
        let cond = c.unsqueeze(2)?.broadcast_as((c.dim(0)?, c.dim(1)?, self.len))?;
        let input = Tensor::cat(&[x, &cond.contiguous()?], 1)?;
        self.conv.forward(&input)
    }
}

impl Critic for Discriminator {
    fn score(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let a = leaky_relu(&self.pre_activation(x, c)?)?;
        let out = self.head.forward(&a.flatten_from(1)?)?;
        Ok(out.squeeze(1)?)
    }

    fn input_gradient(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let pre = self.pre_activation(x, c)?;
        let slope = pre
            .ge(0.0)?
            .to_dtype(pre.dtype())?
            .affine(1.0 - LEAKY_SLOPE, LEAKY_SLOPE)?
            .detach();
        let (b, f, l) = pre.dims3()?;
        let head_w = self.head_weight().reshape((1, f, l))?;
        let upstream = slope.broadcast_mul(&head_w)?;
        let w_sig = self.conv.weight().narrow(1, 0, self.channels)?;
        let g = conv_transpose_same(&upstream, &w_sig)?;
        debug_assert_eq!(g.dims(), &[b, self.channels, l]);
        Ok(g)
    }
}

impl Discriminator {
    fn head_weight(&self) -> Tensor {
        self.head.weight().clone()
    }
}

/// Mean of `-f(x_real) + f(x_fake)` plus `gp_weight` times the mean squared
/// deviation of the critic's input-gradient norm from 1, evaluated at
/// `mix * x_real + (1 - mix) * x_fake` (one `mix` per row).
pub fn critic_loss(
    critic: &dyn Critic,
    x_real: &Tensor,
    x_fake: &Tensor,
    c: &Tensor,
    gp_weight: f64,
    mix: &[f64],
) -> Result<Tensor> {
    if x_real.dims() != x_fake.dims() {
        return Err(Error::Validation(format!(
            "real / fake shapes differ: {:?} vs {:?}",
            x_real.dims(),
            x_fake.dims()
        )));
    }
    let b = x_real.dim(0)?;
    let wasserstein = (critic.score(x_fake, c)? - critic.score(x_real, c)?)?.mean_all()?;
    if gp_weight == 0.0 {
        return Ok(wasserstein);
    }
    if mix.len() != b {
        return Err(Error::Validation(format!("{} mix weights for batch {b}", mix.len())));
    }
    let u = tensor_from_f64(mix.to_vec(), &[b, 1, 1], x_real.dtype())?;
    let interp = (x_real.broadcast_mul(&u)? + x_fake.broadcast_mul(&u.affine(-1.0, 1.0)?)?)?;
    let g = critic.input_gradient(&interp.detach(), c)?;
    let norm = g.sqr()?.flatten_from(1)?.sum(1)?.sqrt()?;
    let penalty = (norm - 1.0)?.sqr()?.mean_all()?;
    Ok((wasserstein + (penalty * gp_weight)?)?)
}

/// Mean of `-f(x_fake, c)`.
pub fn generator_loss(critic: &dyn Critic, x_fake: &Tensor, c: &Tensor) -> Result<Tensor> {
    Ok(critic.score(x_fake, c)?.neg()?.mean_all()?)
}

/// `g(z, c)`: the residual backbone without step embedding, driven by noise.
#[derive(Debug, Clone)]
pub struct Generator {
    backbone: ResidualBackbone,
}

impl Generator {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        Ok(Self {
            backbone: ResidualBackbone::new(ps, name, cfg, false)?,
        })
    }

    pub fn forward(&self, z: &Tensor, c: &Tensor) -> Result<Tensor> {
        self.backbone.forward(z, None, c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CganConfig {
    pub bone_count: usize,
    pub embed_width: usize,
    pub backbone: BackboneConfig,
    pub signal_len: usize,
}

impl CganConfig {
    pub fn signal_shape(&self) -> [usize; 2] {
        [self.backbone.channels, self.signal_len]
    }
}

/// Embedder, generator and discriminator in one parameter map (`embedder.*`,
/// `generator.*`, `discriminator.*`). The discriminator is conditioned on the
/// raw flattened skeleton so that only generator updates shape the embedder.
pub struct Cgan {
    cfg: CganConfig,
    vars: VarMap,
    embedder: SkeletonEmbedder,
    generator: Generator,
    discriminator: Discriminator,
}

impl Cgan {
    pub fn new(cfg: &CganConfig, seed: u64, dtype: DType) -> Result<Self> {
        if cfg.backbone.cond_width != cfg.embed_width {
            return Err(Error::Config(
                "backbone condition width must equal the embedding width".into(),
            ));
        }
        let mut ps = ParamStore::new(seed, dtype);
        let embedder = SkeletonEmbedder::build(&mut ps, "embedder", cfg.bone_count, cfg.embed_width)?;
        let generator = Generator::new(&mut ps, "generator", &cfg.backbone)?;
        let discriminator = Discriminator::new(
            &mut ps,
            "discriminator",
            cfg.backbone.channels,
            cfg.signal_len,
            6 * cfg.bone_count,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            vars: ps.into_varmap(),
            embedder,
            generator,
            discriminator,
        })
    }

    pub fn config(&self) -> &CganConfig {
        &self.cfg
    }

    pub fn embedder(&self) -> &SkeletonEmbedder {
        &self.embedder
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    /// `x = g(z, c)` with `z` drawn from one seeded stream per row of the
    /// embedded condition batch.
    pub fn sample(&self, c: &Tensor, seeds: &[u64]) -> Result<Tensor> {
        cgan_sample(&self.generator, c, &self.cfg.signal_shape(), seeds)
    }
}

impl Parameterized for Cgan {
    fn varmap(&self) -> &VarMap {
        &self.vars
    }
}

pub fn cgan_sample(gen: &Generator, c: &Tensor, shape: &[usize], seeds: &[u64]) -> Result<Tensor> {
    if c.dim(0)? != seeds.len() {
        return Err(Error::Validation(format!(
            "{} seeds for a condition batch of {}",
            seeds.len(),
            c.dim(0)?
        )));
    }
    let z = RowNoise::new(seeds, shape, c.dtype()).draw()?;
    gen.forward(&z, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CganTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub n_critic: usize,
    pub gp_weight: f64,
    pub seed: u64,
}

impl Default for CganTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 128,
            lr_gen: 2e-4,
            lr_disc: 1e-4,
            n_critic: 5,
            gp_weight: 10.0,
            seed: 0,
        }
    }
}

/// Alternating critic / generator updates: for every batch, `n_critic`
/// critic steps (fresh noise and interpolation each) then one generator step.
/// History columns: mean critic loss, mean generator loss, and the critic and
/// generator update counts of the epoch.
pub fn cgan_train(
    model: &Cgan,
    signals: &Tensor,
    skeletons: &Tensor,
    cfg: &CganTrainConfig,
) -> Result<LossHistory> {
    let mut history = LossHistory::new(&["critic", "generator", "critic_updates", "generator_updates"]);
    let n = signals.dim(0)?;
    if skeletons.dim(0)? != n {
        return Err(Error::Validation("signal / skeleton count mismatch".into()));
    }
    if cfg.epochs == 0 || n == 0 {
        return Ok(history);
    }
    let mut opt_g = adam_with(
        vars_with_prefix(&model.vars, &["embedder.", "generator."]),
        cfg.lr_gen,
        0.5,
        0.9,
    )?;
    let mut opt_d = adam_with(vars_with_prefix(&model.vars, &["discriminator."]), cfg.lr_disc, 0.5, 0.9)?;
    let mut rng = rng_from_seed(cfg.seed);
    let shape = model.cfg.signal_shape();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut d_total, mut g_total) = (0.0, 0.0);
        let (mut d_updates, mut g_updates) = (0usize, 0usize);
        for rows in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let x_real = select_rows(signals, &rows)?;
            let h = select_rows(skeletons, &rows)?;
            for _ in 0..cfg.n_critic {
                let seeds: Vec<u64> = (0..rows.len()).map(|_| rng.random()).collect();
                let mix: Vec<f64> = (0..rows.len()).map(|_| rng.random::<f64>()).collect();
                let c = model.embedder.embed(&h)?.detach();
                let x_fake = cgan_sample(&model.generator, &c, &shape, &seeds)?.detach();
                let loss = critic_loss(&model.discriminator, &x_real, &x_fake, &h, cfg.gp_weight, &mix)?;
                let value = scalar(&loss)?;
                ensure_finite_loss(value, "cgan_train critic", epoch, step)?;
                crate::train::step(&mut opt_d, &loss)?;
                d_total += value;
                d_updates += 1;
            }
            let seeds: Vec<u64> = (0..rows.len()).map(|_| rng.random()).collect();
            let c = model.embedder.embed(&h)?;
            let x_fake = cgan_sample(&model.generator, &c, &shape, &seeds)?;
            let loss = generator_loss(&model.discriminator, &x_fake, &h)?;
            let value = scalar(&loss)?;
            ensure_finite_loss(value, "cgan_train generator", epoch, step)?;
            crate::train::step(&mut opt_g, &loss)?;
            g_total += value;
            g_updates += 1;
            step += 1;
        }
        history.push(vec![
            d_total / d_updates.max(1) as f64,
            g_total / g_updates.max(1) as f64,
            d_updates as f64,
            g_updates as f64,
        ]);
        log::debug!("cgan epoch {} critic {:.5} generator {:.5}", epoch + 1, d_total, g_total);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_vec, to_f64_vec, zero_all};
    use approx::assert_relative_eq;

    fn randn(dims: &[usize], seed: u64) -> Tensor {
        let n = dims.iter().product();
        tensor_from_f64(gaussian_vec(&mut rng_from_seed(seed), n), dims, DType::F64).unwrap()
    }

    struct SumCritic;
    impl Critic for SumCritic {
        fn score(&self, x: &Tensor, _: &Tensor) -> Result<Tensor> {
            Ok(x.flatten_from(1)?.sum(1)?)
        }
        fn input_gradient(&self, x: &Tensor, _: &Tensor) -> Result<Tensor> {
            Ok(x.ones_like()?)
        }
    }

    fn toy() -> CganConfig {
        CganConfig {
            bone_count: 2,
            embed_width: 4,
            backbone: BackboneConfig {
                channels: 3,
                filters: [4, 4, 4],
                kernels: [3, 3, 3],
                cond_width: 4,
            },
            signal_len: 6,
        }
    }

    #[test]
    fn sum_critic_closed_form() {
        let real = randn(&[4, 3, 6], 1);
        let fake = randn(&[4, 3, 6], 2);
        let c = randn(&[4, 2], 3);
        let mix = [0.1, 0.5, 0.9, 0.3];
        let l0 = scalar(&critic_loss(&SumCritic, &real, &fake, &c, 0.0, &mix).unwrap()).unwrap();
        let sr: f64 = to_f64_vec(&real).unwrap().iter().sum();
        let sf: f64 = to_f64_vec(&fake).unwrap().iter().sum();
        assert_relative_eq!(l0, (sf - sr) / 4.0, max_relative = 1e-12);
        let l = scalar(&critic_loss(&SumCritic, &real, &fake, &c, 10.0, &mix).unwrap()).unwrap();
        let gp = (18f64.sqrt() - 1.0).powi(2);
        assert_relative_eq!(l, l0 + 10.0 * gp, max_relative = 1e-12);
    }

    #[test]
    fn identical_inputs_cancel_wasserstein_term() {
        let model = Cgan::new(&toy(), 1, DType::F64).unwrap();
        let x = randn(&[3, 3, 6], 4);
        let h = randn(&[3, 12], 5);
        let l = scalar(&critic_loss(model.discriminator(), &x, &x, &h, 0.0, &[0.0; 3]).unwrap()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn analytic_input_gradient_matches_finite_differences() {
        let model = Cgan::new(&toy(), 2, DType::F64).unwrap();
        let d = model.discriminator();
        let x = randn(&[1, 3, 6], 6);
        let h = randn(&[1, 12], 7);
        let g = to_f64_vec(&d.input_gradient(&x, &h).unwrap()).unwrap();
        let base = to_f64_vec(&x).unwrap();
        let step = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += step;
            let mut m = base.clone();
            m[i] -= step;
            let fp = scalar(&d.score(&tensor_from_f64(p, &[1, 3, 6], DType::F64).unwrap(), &h).unwrap().sum_all().unwrap()).unwrap();
            let fm = scalar(&d.score(&tensor_from_f64(m, &[1, 3, 6], DType::F64).unwrap(), &h).unwrap().sum_all().unwrap()).unwrap();
            assert_relative_eq!(g[i], (fp - fm) / (2.0 * step), epsilon = 1e-7, max_relative = 1e-5);
        }
    }

    #[test]
    fn critic_scores_are_per_sample() {
        let model = Cgan::new(&toy(), 3, DType::F64).unwrap();
        let s = model.discriminator().score(&randn(&[5, 3, 6], 1), &randn(&[5, 12], 2)).unwrap();
        assert_eq!(s.dims(), &[5]);
        assert!(model.discriminator().score(&randn(&[5, 2, 6], 1), &randn(&[5, 12], 2)).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_shaped() {
        let model = Cgan::new(&toy(), 4, DType::F64).unwrap();
        let c = model.embedder().embed(&randn(&[2, 12], 1)).unwrap();
        let a = model.sample(&c, &[5, 6]).unwrap();
        let b = model.sample(&c, &[5, 6]).unwrap();
        assert_eq!(a.dims(), &[2, 3, 6]);
        assert_eq!(to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
    }

    #[test]
    fn zero_weight_generator_is_constant() {
        let model = Cgan::new(&toy(), 5, DType::F64).unwrap();
        zero_all(model.varmap()).unwrap();
        let head_bias = crate::nn::sorted_vars(model.varmap())
            .into_iter()
            .find(|(k, _)| k == "generator.head.bias")
            .unwrap()
            .1;
        head_bias
            .set(&tensor_from_f64(vec![0.5, -1.0, 2.0], &[3], DType::F64).unwrap())
            .unwrap();
        let c = randn(&[2, 4], 8);
        let out = to_f64_vec(&model.sample(&c, &[1, 2]).unwrap()).unwrap();
        for (i, v) in out.iter().enumerate() {
            let ch = (i / 6) % 3;
            assert_eq!(*v, [0.5, -1.0, 2.0][ch]);
        }
    }

    #[test]
    fn alternation_counts() {
        let model = Cgan::new(&toy(), 6, DType::F64).unwrap();
        let cfg = CganTrainConfig {
            epochs: 2,
            batch_size: 4,
            n_critic: 3,
            seed: 1,
            ..Default::default()
        };
        let h = cgan_train(&model, &randn(&[10, 3, 6], 1), &randn(&[10, 12], 2), &cfg).unwrap();
        assert_eq!(h.column("critic_updates").unwrap(), vec![9.0, 9.0]);
        assert_eq!(h.column("generator_updates").unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn zero_epochs_is_noop() {
        let model = Cgan::new(&toy(), 7, DType::F64).unwrap();
        let before = model.fingerprint().unwrap();
        let cfg = CganTrainConfig { epochs: 0, ..Default::default() };
        let h = cgan_train(&model, &randn(&[4, 3, 6], 1), &randn(&[4, 12], 2), &cfg).unwrap();
        assert!(h.is_empty());
        assert_eq!(model.fingerprint().unwrap(), before);
    }
}
