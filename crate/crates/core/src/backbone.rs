//! Residual 1-D convolutional backbone shared by the diffusion noise predictor
//! and the adversarial generator.
//!
//! Three blocks of two length-preserving convolutions (LeakyReLU after each),
//! with an additive residual path. Before every block a learned projection of
//! the condition vector (plus the step embedding, for diffusion) is
//! broadcast-added over the length axis. A 1x1 linear head maps back to the
//! signal's channel count.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sinusoidal_embedding, Conv1d, Linear, ParamStore};

pub const TIME_EMBED_WIDTH: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Signal channel count (rows of an RF sample).
    pub channels: usize,
    pub filters: [usize; 3],
    pub kernels: [usize; 3],
    /// Width of the condition vector produced by the skeleton embedder.
    pub cond_width: usize,
}

impl BackboneConfig {
    pub fn full_size(channels: usize, cond_width: usize) -> Self {
        Self {
            channels,
            filters: [256, 512, 256],
            kernels: [11, 7, 5],
            cond_width,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    cond: Linear,
    conv_a: Conv1d,
    conv_b: Conv1d,
    skip: Option<Conv1d>,
}

#[derive(Debug, Clone)]
pub struct ResidualBackbone {
    cfg: BackboneConfig,
    time: Option<Linear>,
    blocks: Vec<Block>,
    head: Conv1d,
}

impl ResidualBackbone {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &BackboneConfig,
        with_time: bool,
    ) -> Result<Self> {
        if cfg.channels == 0 || cfg.cond_width == 0 || cfg.filters.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        let time = if with_time {
            Some(Linear::new(
                ps,
                &format!("{name}.time"),
                TIME_EMBED_WIDTH,
                cfg.cond_width,
            )?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(3);
        let mut in_ch = cfg.channels;
        for (i, (&f, &k)) in cfg.filters.iter().zip(&cfg.kernels).enumerate() {
            let p = format!("{name}.block{i}");
            let skip = if in_ch != f {
                Some(Conv1d::new(ps, &format!("{p}.skip"), in_ch, f, 1, 1)?)
            } else {
                None
            };
            blocks.push(Block {
                cond: Linear::new(ps, &format!("{p}.cond"), cfg.cond_width, in_ch)?,
                conv_a: Conv1d::new(ps, &format!("{p}.conv_a"), in_ch, f, k, 1)?,
                conv_b: Conv1d::new(ps, &format!("{p}.conv_b"), f, f, k, 1)?,
                skip,
            });
            in_ch = f;
        }
        let head = Conv1d::new(ps, &format!("{name}.head"), in_ch, cfg.channels, 1, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            time,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `x`: `(batch, channels, length)`; `c`: `(batch, cond_width)`;
    /// `steps` must be given iff the backbone was built with a time embedding.
    pub fn forward(&self, x: &Tensor, steps: Option<&[usize]>, c: &Tensor) -> Result<Tensor> {
        let (b, ch, _) = x.dims3()?;
        if ch != self.cfg.channels {
            return Err(Error::Validation(format!(
                "backbone expects {} channels, got {ch}",
                self.cfg.channels
            )));
        }
        let (cb, cw) = c.dims2()?;
        if cb != b || cw != self.cfg.cond_width {
            return Err(Error::Validation(format!(
                "condition shape ({cb}, {cw}) does not match batch {b} / width {}",
                self.cfg.cond_width
            )));
        }
        let cond = match (&self.time, steps) {
            (Some(lin), Some(ts)) => {
                if ts.len() != b {
                    return Err(Error::Validation(format!(
                        "{} steps for a batch of {b}",
                        ts.len()
                    )));
                }
                let emb = sinusoidal_embedding(ts, TIME_EMBED_WIDTH, x.dtype())?;
                (c + lin.forward(&emb)?)?
            }
            (None, None) => c.clone(),
            (Some(_), None) => {
                return Err(Error::Validation("diffusion backbone needs steps".into()))
            }
            (None, Some(_)) => {
                return Err(Error::Validation("generator backbone takes no steps".into()))
            }
        };
        let mut h = x.clone();
        for block in &self.blocks {
            let shift = block.cond.forward(&cond)?.unsqueeze(2)?;
            let input = h.broadcast_add(&shift)?;
            let mut y = leaky_relu(&block.conv_a.forward(&input)?)?;
            y = leaky_relu(&block.conv_b.forward(&y)?)?;
            let residual = match &block.skip {
                Some(s) => s.forward(&input)?,
                None => input,
            };
            h = (y + residual)?;
        }
        self.head.forward(&h)
    }
}
