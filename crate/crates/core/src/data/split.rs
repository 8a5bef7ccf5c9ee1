//! Random and cross-domain split protocols.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{RFSample, Source};
use crate::error::{Error, Result};
use crate::nn::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Random,
    CrossSubject,
    CrossEnvironment,
}

impl SplitMode {
    pub fn name(self) -> &'static str {
        match self {
            SplitMode::Random => "random",
            SplitMode::CrossSubject => "cross-subject",
            SplitMode::CrossEnvironment => "cross-environment",
        }
    }

    /// Domain tag a cross mode holds out; `None` for random splits.
    pub fn tag(self, s: &RFSample) -> Option<&str> {
        match self {
            SplitMode::Random => None,
            SplitMode::CrossSubject => Some(&s.subject),
            SplitMode::CrossEnvironment => Some(&s.environment),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitMode::Random),
            "cross-subject" => Ok(SplitMode::CrossSubject),
            "cross-environment" => Ok(SplitMode::CrossEnvironment),
            other => Err(Error::Config(format!(
                "unknown split mode `{other}` (expected random, cross-subject or cross-environment)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Subjects or environments forming the test split in cross modes.
    pub held_out: Vec<String>,
    /// Validation and test fractions for random mode.
    pub random_fractions: (f64, f64),
    /// Fraction of the remaining training pool used for validation in cross modes.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// 80/10/10.
    pub fn random(seed: u64) -> Self {
        Self {
            mode: SplitMode::Random,
            held_out: Vec::new(),
            random_fractions: (0.1, 0.1),
            validation_fraction: 0.1,
            seed,
        }
    }

    pub fn cross(mode: SplitMode, held_out: Vec<String>, seed: u64) -> Self {
        Self {
            mode,
            held_out,
            ..Self::random(seed)
        }
    }
}

/// Sample indices per partition, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn fraction_count(n: usize, f: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Config(format!("split fraction {f} outside [0, 1]")));
    }
    Ok((n as f64 * f).floor() as usize)
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

pub fn make_splits(samples: &[RFSample], spec: &SplitSpec) -> Result<Splits> {
    let mut rng = rng_from_seed(spec.seed);
    match spec.mode {
        SplitMode::Random => {
            if !spec.held_out.is_empty() {
                return Err(Error::Config("random splits take no held-out ids".into()));
            }
            let n = samples.len();
            let (fv, ft) = spec.random_fractions;
            let (nv, nt) = (fraction_count(n, fv)?, fraction_count(n, ft)?);
            if nv + nt > n {
                return Err(Error::Config("validation and test fractions exceed 1".into()));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            Ok(Splits {
                validation: sorted(idx[..nv].to_vec()),
                test: sorted(idx[nv..nv + nt].to_vec()),
                train: sorted(idx[nv + nt..].to_vec()),
            })
        }
        mode => {
            if spec.held_out.is_empty() {
                return Err(Error::Config(format!("{mode} split needs held-out ids")));
            }
            let present: BTreeSet<&str> = samples.iter().filter_map(|s| mode.tag(s)).collect();
            let held: BTreeSet<&str> = spec.held_out.iter().map(String::as_str).collect();
            if let Some(missing) = held.iter().find(|id| !present.contains(*id)) {
                return Err(Error::Config(format!("held-out id `{missing}` does not occur in the data ({mode})")));
            }
            let (test, mut pool): (Vec<usize>, Vec<usize>) =
                (0..samples.len()).partition(|&i| mode.tag(&samples[i]).is_some_and(|t| held.contains(t)));
            let nv = fraction_count(pool.len(), spec.validation_fraction)?;
            pool.shuffle(&mut rng);
            Ok(Splits {
                validation: sorted(pool[..nv].to_vec()),
                train: sorted(pool[nv..].to_vec()),
                test,
            })
        }
    }
}

/// Numbers of distinct subjects or environments on each side of a cross split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HoldoutCounts {
    pub train: usize,
    pub test: usize,
}

/// Train/test inventories of the three RF datasets; `None` for random mode
/// and synthetic data.
pub fn holdout_counts(source: Source, mode: SplitMode) -> Option<HoldoutCounts> {
    let (train, test) = match (source, mode) {
        (Source::Wifi, SplitMode::CrossSubject) => (6, 1),
        (Source::Wifi, SplitMode::CrossEnvironment) => (2, 1),
        (Source::Uwb, SplitMode::CrossSubject) => (5, 1),
        (Source::Uwb, SplitMode::CrossEnvironment) => (1, 1),
        (Source::Mmwave, SplitMode::CrossSubject) => (32, 8),
        (Source::Mmwave, SplitMode::CrossEnvironment) => (3, 1),
        _ => return None,
    };
    Some(HoldoutCounts { train, test })
}

/// Draws `counts.test` held-out ids after checking the data holds exactly
/// `counts.train + counts.test` distinct ids.
pub fn choose_held_out(samples: &[RFSample], mode: SplitMode, counts: HoldoutCounts, seed: u64) -> Result<Vec<String>> {
    if mode == SplitMode::Random {
        return Err(Error::Config("random splits hold nothing out".into()));
    }
    let ids: Vec<&str> = samples
        .iter()
        .filter_map(|s| mode.tag(s))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.len() != counts.train + counts.test || counts.test == 0 {
        return Err(Error::Config(format!(
            "{mode} split expects {} train + {} test ids, data has {}",
            counts.train,
            counts.test,
            ids.len()
        )));
    }
    let mut chosen: Vec<String> = ids
        .choose_multiple(&mut rng_from_seed(seed), counts.test)
        .map(|s| s.to_string())
        .collect();
    chosen.sort();
    Ok(chosen)
}
