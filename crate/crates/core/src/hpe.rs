//! Encoder-decoder pose estimator with counterfactual regularization.
//!
//! The encoder is a length-preserving 1-D U-Net whose output `v` has the
//! signal's shape, so it can be pulled toward the aggregated counterfactual
//! representation `r`. The decoder runs two self-attention streams over `v`:
//! one with time steps as tokens and one with channels as tokens.

use candle_core::{DType, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{Aggregator, TargetStore};
use crate::error::{Error, Result};
use crate::nn::{
    adaptive_pool_matrix, check_finite, leaky_relu, mse, restore, snapshot, to_f64_vec, Conv1d,
    ConvTranspose1d, LayerNorm, Linear, ParamStore, Parameterized, SelfAttention,
};
use crate::skeleton::Pose;
use crate::train::{
    adam, ensure_finite_loss, epoch_batches, scalar, select_rows, vars_with_prefix, LossHistory,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub filters: usize,
    pub down_kernels: [usize; 3],
    pub up_kernels: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub width: usize,
    pub heads: usize,
    pub kernels: Vec<usize>,
    pub dilations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Time-token stream.
    pub stream_a: StreamConfig,
    /// Channel-token stream (transposed input).
    pub stream_b: StreamConfig,
    /// Adaptive pooling size along each stream's token axis.
    pub pool: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HpeConfig {
    pub channels: usize,
    pub len: usize,
    pub joints: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl HpeConfig {
    pub fn full_size(channels: usize, len: usize, joints: usize) -> Self {
        Self {
            channels,
            len,
            joints,
            encoder: EncoderConfig {
                filters: 256,
                down_kernels: [7, 5, 3],
                up_kernels: [3, 5, 7],
            },
            decoder: DecoderConfig {
                stream_a: StreamConfig {
                    width: 256,
                    heads: 8,
                    kernels: vec![9, 7, 5, 3, 9, 7, 5, 3],
                    dilations: vec![2, 1, 2, 1, 2, 1, 2, 1],
                },
                stream_b: StreamConfig {
                    width: 128,
                    heads: 4,
                    kernels: vec![3, 3, 3, 3],
                    dilations: vec![1, 1, 1, 1],
                },
                pool: 64,
                hidden: 512,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    down: [Conv1d; 3],
    up: [ConvTranspose1d; 3],
    head: Conv1d,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, cfg: &EncoderConfig) -> Result<Self> {
        let f = cfg.filters;
        let [k1, k2, k3] = cfg.down_kernels;
        let [u1, u2, u3] = cfg.up_kernels;
        Ok(Self {
            down: [
                Conv1d::new(ps, &format!("{name}.conv1"), channels, f, k1, 1)?,
                Conv1d::new(ps, &format!("{name}.conv2"), f, f, k2, 1)?,
                Conv1d::new(ps, &format!("{name}.conv3"), f, f, k3, 1)?,
            ],
            up: [
                ConvTranspose1d::new(ps, &format!("{name}.deconv1"), f, f, u1)?,
                ConvTranspose1d::new(ps, &format!("{name}.deconv2"), f, f, u2)?,
                ConvTranspose1d::new(ps, &format!("{name}.deconv3"), f, f, u3)?,
            ],
            head: Conv1d::new(ps, &format!("{name}.head"), f, channels, 1, 1)?,
        })
    }

    /// `(B, C, L) -> (B, C, L)`; skips feed conv3 -> deconv1, conv2 ->
    /// deconv2, conv1 -> deconv3 additively.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let e1 = leaky_relu(&self.down[0].forward(x)?)?;
        let e2 = leaky_relu(&self.down[1].forward(&e1)?)?;
        let e3 = leaky_relu(&self.down[2].forward(&e2)?)?;
        let d1 = (leaky_relu(&self.up[0].forward(&e3)?)? + &e3)?;
        let d2 = (leaky_relu(&self.up[1].forward(&d1)?)? + &e2)?;
        let d3 = (leaky_relu(&self.up[2].forward(&d2)?)? + &e1)?;
        self.head.forward(&d3)
    }
}

#[derive(Debug, Clone)]
struct AttentionBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    conv: Conv1d,
}

impl AttentionBlock {
    /// `(B, T, D) -> (B, T, D)` plus attention weights.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, weights) = self.attn.forward(&self.norm1.forward(x)?)?;
        let x = (x + a)?;
        let h = self.norm2.forward(&x)?.transpose(1, 2)?.contiguous()?;
        let c = leaky_relu(&self.conv.forward(&h)?)?.transpose(1, 2)?;
        Ok(((x + c)?, weights))
    }
}

#[derive(Debug, Clone)]
struct Stream {
    input: Linear,
    blocks: Vec<AttentionBlock>,
    pool: Tensor,
}

impl Stream {
    fn new(ps: &mut ParamStore, name: &str, features: usize, tokens: usize, pool: usize, cfg: &StreamConfig) -> Result<Self> {
        if cfg.kernels.len() != cfg.dilations.len() {
            return Err(Error::Config(format!(
                "{name}: {} kernels but {} dilations",
                cfg.kernels.len(),
                cfg.dilations.len()
            )));
        }
        let mut blocks = Vec::with_capacity(cfg.kernels.len());
        for (i, (&k, &d)) in cfg.kernels.iter().zip(&cfg.dilations).enumerate() {
            let p = format!("{name}.block{i}");
            blocks.push(AttentionBlock {
                norm1: LayerNorm::new(ps, &format!("{p}.norm1"), cfg.width)?,
                attn: SelfAttention::new(ps, &format!("{p}.attn"), cfg.width, cfg.heads)?,
                norm2: LayerNorm::new(ps, &format!("{p}.norm2"), cfg.width)?,
                conv: Conv1d::new(ps, &format!("{p}.conv"), cfg.width, cfg.width, k, d)?,
            });
        }
        Ok(Self {
            input: Linear::new(ps, &format!("{name}.input"), features, cfg.width)?,
            blocks,
            pool: adaptive_pool_matrix(tokens, pool, ps.dtype())?,
        })
    }

    /// `(B, T, F)` tokens -> `(B, width * pool)`.
    fn forward(&self, tokens: &Tensor, layer: &mut usize, check: bool, maps: &mut Vec<Tensor>) -> Result<Tensor> {
        let mut h = self.input.forward(tokens)?;
        for block in &self.blocks {
            let (out, weights) = block.forward(&h)?;
            *layer += 1;
            if check {
                check_finite(&out, *layer, "attention block")?;
            }
            maps.push(weights);
            h = out;
        }
        let pooled = h.transpose(1, 2)?.contiguous()?.broadcast_matmul(&self.pool)?;
        Ok(pooled.flatten_from(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    joints: usize,
    stream_a: Stream,
    stream_b: Stream,
    fc1: Linear,
    fc2: Linear,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, len: usize, joints: usize, cfg: &DecoderConfig) -> Result<Self> {
        let stream_a = Stream::new(ps, &format!("{name}.stream_a"), channels, len, cfg.pool, &cfg.stream_a)?;
        let stream_b = Stream::new(ps, &format!("{name}.stream_b"), len, channels, cfg.pool, &cfg.stream_b)?;
        let flat = cfg.pool * (cfg.stream_a.width + cfg.stream_b.width);
        Ok(Self {
            joints,
            stream_a,
            stream_b,
            fc1: Linear::new(ps, &format!("{name}.fc1"), flat, cfg.hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), cfg.hidden, 3 * joints)?,
        })
    }

    /// `(B, C, L) -> (B, N, 3)`, the attention maps of every block, in
    /// stream order. With `check`, a non-finite activation is reported with
    /// its layer index.
    pub fn forward_with_attention(&self, v: &Tensor, check: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let mut layer = 0;
        let mut maps = Vec::new();
        let a = self.stream_a.forward(&v.transpose(1, 2)?.contiguous()?, &mut layer, check, &mut maps)?;
        let b = self.stream_b.forward(v, &mut layer, check, &mut maps)?;
        let h = leaky_relu(&self.fc1.forward(&Tensor::cat(&[a, b], 1)?)?)?;
        layer += 1;
        if check {
            check_finite(&h, layer, "head fc1")?;
        }
        let out = self.fc2.forward(&h)?;
        layer += 1;
        if check {
            check_finite(&out, layer, "head fc2")?;
        }
        let b = out.dim(0)?;
        Ok((out.reshape((b, self.joints, 3))?, maps))
    }

    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(v, false)?.0)
    }
}

/// Encoder, decoder and difference aggregator in one parameter map
/// (`encoder.*`, `decoder.*`, `aggregator.*`).
pub struct HpeModel {
    cfg: HpeConfig,
    vars: VarMap,
    encoder: Encoder,
    decoder: Decoder,
    aggregator: Aggregator,
    bone_count: usize,
}

impl HpeModel {
    /// `bone_count` sizes the aggregator; the regularization target shape is
    /// `(K, C, L)` and must match the encoder output.
    pub fn new(cfg: &HpeConfig, bone_count: usize, seed: u64, dtype: DType) -> Result<Self> {
        if cfg.channels == 0 || cfg.len == 0 || cfg.joints == 0 || cfg.encoder.filters == 0 {
            return Err(Error::Config("pose estimator dimensions must be positive".into()));
        }
        let mut ps = ParamStore::new(seed, dtype);
        let encoder = Encoder::new(&mut ps, "encoder", cfg.channels, &cfg.encoder)?;
        let decoder = Decoder::new(&mut ps, "decoder", cfg.channels, cfg.len, cfg.joints, &cfg.decoder)?;
        let aggregator = Aggregator::build(&mut ps, "aggregator", bone_count)?;
        Ok(Self {
            cfg: cfg.clone(),
            vars: ps.into_varmap(),
            encoder,
            decoder,
            aggregator,
            bone_count,
        })
    }

    pub fn config(&self) -> &HpeConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    /// Shape of the per-sample regularization target `(K, C, L)`.
    pub fn target_shape(&self) -> [usize; 3] {
        [self.bone_count, self.cfg.channels, self.cfg.len]
    }

    fn check_signal(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 3 || dims[1] != self.cfg.channels || dims[2] != self.cfg.len {
            return Err(Error::Validation(format!(
                "expected signals of shape (B, {}, {}), got {dims:?}",
                self.cfg.channels, self.cfg.len
            )));
        }
        Ok(())
    }

    /// `v = f_en(x)`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_signal(x)?;
        self.encoder.forward(x)
    }

    /// `(B, C, L) -> (B, N, 3)` with layer-indexed finiteness checks.
    pub fn decode(&self, v: &Tensor) -> Result<Tensor> {
        self.check_signal(v)?;
        Ok(self.decoder.forward_with_attention(v, true)?.0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let v = self.encode(x)?;
        let y = self.decoder.forward(&v)?;
        Ok((v, y))
    }

    /// `ŷ = f_de(f_en(x))` as a `(B, N, 3)` tensor.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    pub fn infer_poses(&self, x: &Tensor) -> Result<Vec<Pose>> {
        let y = self.infer(x)?;
        let n = self.cfg.joints;
        to_f64_vec(&y)?
            .chunks(3 * n)
            .map(Pose::from_flat)
            .collect()
    }
}

impl Parameterized for HpeModel {
    fn varmap(&self) -> &VarMap {
        &self.vars
    }
}

/// `MSE(ŷ, y) + λ · MSE(v, r)`.
pub fn combined_loss(y_hat: &Tensor, y: &Tensor, v: &Tensor, r: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let pose = mse(y_hat, y)?;
    if lambda == 0.0 {
        return Ok(pose);
    }
    Ok((pose + (mse(v, r)? * lambda)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpeTrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Whether the aggregator receives gradient updates.
    pub train_aggregator: bool,
}

impl Default for HpeTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 1e-4,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            train_aggregator: true,
        }
    }
}

/// Signals `(N, C, L)` with poses `(N, J, 3)` and sample ids.
#[derive(Debug, Clone)]
pub struct PoseData {
    pub ids: Vec<String>,
    pub signals: Tensor,
    pub poses: Tensor,
}

impl PoseData {
    pub fn new(ids: Vec<String>, signals: Tensor, poses: Tensor) -> Result<Self> {
        let n = ids.len();
        if signals.dim(0)? != n || poses.dim(0)? != n {
            return Err(Error::Validation(format!(
                "{n} ids for {} signals and {} poses",
                signals.dim(0)?,
                poses.dim(0)?
            )));
        }
        Ok(Self { ids, signals, poses })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct HpeTrainOutcome {
    /// Columns: train total loss, train pose loss, train regularization
    /// loss, validation pose loss.
    pub history: LossHistory,
    /// 1-based epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
}

fn pose_loss(model: &HpeModel, data: &PoseData, batch: usize) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for start in (0..n).step_by(batch.max(1)) {
        let rows: Vec<usize> = (start..(start + batch).min(n)).collect();
        let x = select_rows(&data.signals, &rows)?;
        let y = select_rows(&data.poses, &rows)?;
        let (_, y_hat) = model.forward(&x)?;
        total += scalar(&mse(&y_hat, &y)?)? * rows.len() as f64;
    }
    Ok(total / n as f64)
}

/// Trains on `train`, keeping the parameters of the epoch with the lowest
/// validation pose loss. With `lambda > 0` every training sample needs a
/// row in `targets`.
pub fn train_hpe(
    model: &HpeModel,
    train: &PoseData,
    validation: &PoseData,
    targets: Option<&TargetStore>,
    cfg: &HpeTrainConfig,
) -> Result<HpeTrainOutcome> {
    let mut history = LossHistory::new(&["train_loss", "train_pose", "train_cr", "val_pose"]);
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    let target_rows = if cfg.lambda > 0.0 {
        let store = targets.ok_or_else(|| {
            Error::Dependency("lambda > 0 needs a regularization target store".into())
        })?;
        if store.shape != model.target_shape() {
            return Err(Error::Dependency(format!(
                "target store shape {:?} does not match the model's {:?}",
                store.shape,
                model.target_shape()
            )));
        }
        let rows = train
            .ids
            .iter()
            .map(|id| {
                store.index_of(id).ok_or_else(|| {
                    Error::Dependency(format!("no regularization target for sample {id}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some((store, rows))
    } else {
        None
    };
    if cfg.epochs == 0 || train.is_empty() {
        return Ok(HpeTrainOutcome { history, best_epoch: 0 });
    }
    let mut prefixes = vec!["encoder.", "decoder."];
    if cfg.train_aggregator {
        prefixes.push("aggregator.");
    }
    let mut opt = adam(vars_with_prefix(&model.vars, &prefixes), cfg.lr)?;
    let dtype = train.signals.dtype();
    let mut best: Option<(f64, usize, crate::nn::Snapshot)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut tot, mut pose_tot, mut cr_tot) = (0.0, 0.0, 0.0);
        for rows in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let x = select_rows(&train.signals, &rows)?;
            let y = select_rows(&train.poses, &rows)?;
            let (v, y_hat) = model.forward(&x)?;
            let pose = mse(&y_hat, &y)?;
            let (loss, cr_value) = match &target_rows {
                Some((store, map)) => {
                    let idx: Vec<usize> = rows.iter().map(|&i| map[i]).collect();
                    let r = model.aggregator.forward(&store.batch(&idx, dtype)?)?;
                    let cr = mse(&v, &r)?;
                    let value = scalar(&cr)?;
                    ((&pose + (cr * cfg.lambda)?)?, value)
                }
                None => (pose.clone(), 0.0),
            };
            let value = scalar(&loss)?;
            ensure_finite_loss(value, "train_hpe", epoch, step)?;
            crate::train::step(&mut opt, &loss)?;
            let w = rows.len() as f64;
            tot += value * w;
            pose_tot += scalar(&pose)? * w;
            cr_tot += cr_value * w;
            step += 1;
        }
        let n = train.len() as f64;
        let val = pose_loss(model, validation, cfg.batch_size.max(64))?;
        history.push(vec![tot / n, pose_tot / n, cr_tot / n, val]);
        log::debug!("hpe epoch {} loss {:.6} val {:.6}", epoch + 1, tot / n, val);
        let score = if val.is_nan() { tot / n } else { val };
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch + 1, snapshot(&model.vars)?));
        }
    }
    let (_, best_epoch, snap) = best.expect("at least one epoch ran");
    restore(&model.vars, &snap)?;
    Ok(HpeTrainOutcome { history, best_epoch })
}
