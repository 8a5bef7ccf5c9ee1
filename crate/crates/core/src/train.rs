//! Shared training plumbing: optimizer construction, seeded batching, and
//! loss history records.

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{rng_from_seed, sorted_vars};

/// Plain Adam (decoupled weight decay disabled).
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    adam_with(vars, lr, 0.9, 0.999)
}

pub fn adam_with(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr,
        beta1,
        beta2,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(AdamW::new(vars, params)?)
}

pub fn vars_of(map: &candle_nn::VarMap) -> Vec<Var> {
    sorted_vars(map).into_iter().map(|(_, v)| v).collect()
}

/// Vars whose names start with one of the prefixes.
pub fn vars_with_prefix(map: &candle_nn::VarMap, prefixes: &[&str]) -> Vec<Var> {
    sorted_vars(map)
        .into_iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .map(|(_, v)| v)
        .collect()
}

/// Index batches for one epoch, shuffled with a per-epoch seed.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

pub fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    let idx = Tensor::new(idx.as_slice(), t.device())?;
    Ok(t.index_select(&idx, 0)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

pub fn ensure_finite_loss(value: f64, stage: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: stage.to_string(),
            step,
            detail: format!("non-finite loss {value} in epoch {epoch}"),
        })
    }
}

pub fn step(opt: &mut AdamW, loss: &Tensor) -> Result<()> {
    opt.backward_step(loss)?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    /// One row per epoch; column meaning is given by `columns`.
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossHistory {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("epoch,{}\n", self.columns.join(","));
        for (e, row) in self.rows.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
            s.push_str(&format!("{},{}\n", e + 1, vals.join(",")));
        }
        s
    }
}
