//! Dataset layouts, on-disk format, split protocols, normalization and the
//! additive RF simulator.

mod convert;
mod format;
mod normalize;
mod simulator;
mod split;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpe::PoseData;
use crate::nn::tensor_from_f64;
use crate::skeleton::{Pose, SkeletonMap};

pub use convert::{import_mmwave_points, import_uwb_amplitude_phase, parse_matrix_text};
pub use format::{load_dataset, read_blob, write_blob, write_dataset, BlobRecord, Dataset, BLOB_MAGIC, MANIFEST_HEADER};
pub use normalize::{fit_normalization, NormalizationRecord};
pub use simulator::{
    build_synthetic_benchmark, read_truth, sample_pose, simulate_rf, truth_contributions, BenchmarkPaths, BenchmarkSpec, Domain,
    SimulatedSample, SimulatorConfig, SimulatorGenerator, SimulatorParams,
};
pub use split::{choose_held_out, holdout_counts, make_splits, HoldoutCounts, SplitMode, SplitSpec, Splits};

/// Maximum mmWave points per sample; shorter clouds are zero-padded.
pub const MMWAVE_MAX_POINTS: usize = 493;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Wifi,
    Uwb,
    Mmwave,
    Synthetic,
}

impl Source {
    /// Fixed `(channels, length)` signal shape and joint count; `None` for
    /// synthetic data, whose shape is declared by its manifest.
    pub fn layout(self) -> Option<([usize; 2], usize)> {
        match self {
            Source::Wifi => Some(([60, 180], 14)),
            Source::Uwb => Some(([70, 40], 19)),
            Source::Mmwave => Some(([5, MMWAVE_MAX_POINTS], 17)),
            Source::Synthetic => None,
        }
    }

    pub fn skeleton(self) -> SkeletonMap {
        match self {
            Source::Wifi => SkeletonMap::wifi(),
            Source::Uwb => SkeletonMap::uwb(),
            Source::Mmwave => SkeletonMap::mmwave(),
            Source::Synthetic => SkeletonMap::synthetic(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Source::Wifi => "wifi",
            Source::Uwb => "uwb",
            Source::Mmwave => "mmwave",
            Source::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wifi" => Ok(Source::Wifi),
            "uwb" => Ok(Source::Uwb),
            "mmwave" => Ok(Source::Mmwave),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(Error::Config(format!(
                "unknown source `{other}` (expected wifi, uwb, mmwave or synthetic)"
            ))),
        }
    }
}

/// One RF observation with its pose label and domain tags.
#[derive(Debug, Clone, PartialEq)]
pub struct RFSample {
    pub id: String,
    pub subject: String,
    pub environment: String,
    /// Row-major `(channels, length)`.
    pub signal: Vec<f32>,
    pub shape: [usize; 2],
    pub pose: Pose,
    /// Columns holding real data; the rest are zero padding.
    pub valid_len: usize,
}

impl RFSample {
    pub fn new(
        id: impl Into<String>,
        subject: impl Into<String>,
        environment: impl Into<String>,
        signal: Vec<f32>,
        shape: [usize; 2],
        pose: Pose,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            subject: subject.into(),
            environment: environment.into(),
            signal,
            shape,
            pose,
            valid_len: shape[1],
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("id", &self.id), ("subject", &self.subject), ("environment", &self.environment)] {
            if v.is_empty() || v.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!(
                    "sample {what} `{v}` must be non-empty without whitespace"
                )));
            }
        }
        if self.signal.len() != self.shape[0] * self.shape[1] {
            return Err(Error::Validation(format!(
                "sample {}: {} values for shape {:?}",
                self.id,
                self.signal.len(),
                self.shape
            )));
        }
        if self.valid_len > self.shape[1] {
            return Err(Error::Validation(format!("sample {}: valid length exceeds shape", self.id)));
        }
        if self.signal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("sample {}: non-finite signal", self.id)));
        }
        Ok(())
    }

    /// Checks the signal shape and joint count against a source's layout.
    pub fn check_layout(&self, shape: [usize; 2], joints: usize) -> Result<()> {
        if self.shape != shape || self.pose.joint_count() != joints {
            return Err(Error::Validation(format!(
                "sample {}: signal {:?} / {} joints, expected {:?} / {joints}",
                self.id,
                self.shape,
                self.pose.joint_count(),
                shape
            )));
        }
        Ok(())
    }
}

/// Stacks samples into model-ready tensors.
pub fn to_pose_data(samples: &[&RFSample], dtype: DType) -> Result<PoseData> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Validation("no samples".into()))?;
    let shape = first.shape;
    let joints = first.pose.joint_count();
    let mut sig = Vec::with_capacity(samples.len() * shape[0] * shape[1]);
    let mut pose = Vec::with_capacity(samples.len() * joints * 3);
    for s in samples {
        s.check_layout(shape, joints)?;
        sig.extend(s.signal.iter().map(|&v| v as f64));
        pose.extend(s.pose.flat());
    }
    let n = samples.len();
    PoseData::new(
        samples.iter().map(|s| s.id.clone()).collect(),
        tensor_from_f64(sig, &[n, shape[0], shape[1]], dtype)?,
        tensor_from_f64(pose, &[n, joints, 3], dtype)?,
    )
}

/// `(C, L)` tensor of one sample's signal.
pub fn signal_tensor(sample: &RFSample, dtype: DType) -> Result<Tensor> {
    crate::nn::tensor_from_f32(sample.signal.clone(), &sample.shape, dtype)
}
