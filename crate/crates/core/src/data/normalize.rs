//! Per-channel standardization fitted on the training split.
//!
//! Statistics cover valid columns only; padding columns stay zero.

use std::fs;
use std::path::Path;

use super::RFSample;
use crate::error::{Error, Result};

const RECORD_HEADER: &str = "# cfpose normalization v1";

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationRecord {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at `epsilon`.
    pub std: Vec<f64>,
    pub epsilon: f64,
}

/// Fits per-channel mean and standard deviation over `train`.
pub fn fit_normalization(train: &[&RFSample], epsilon: f64) -> Result<NormalizationRecord> {
    let first = train
        .first()
        .ok_or_else(|| Error::Validation("normalization needs a non-empty train split".into()))?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("normalization epsilon must be positive, got {epsilon}")));
    }
    let [c, l] = first.shape;
    let mut sum = vec![0.0f64; c];
    let mut count = vec![0usize; c];
    for s in train {
        if s.shape != first.shape {
            return Err(Error::Validation(format!("sample {} has shape {:?}, expected {:?}", s.id, s.shape, first.shape)));
        }
        for ch in 0..c {
            sum[ch] += s.signal[ch * l..ch * l + s.valid_len].iter().map(|&v| v as f64).sum::<f64>();
            count[ch] += s.valid_len;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect();
    let mut sq = vec![0.0f64; c];
    for s in train {
        for ch in 0..c {
            sq[ch] += s.signal[ch * l..ch * l + s.valid_len]
                .iter()
                .map(|&v| (v as f64 - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    let std = sq
        .iter()
        .zip(&count)
        .enumerate()
        .map(|(ch, (q, &n))| {
            let sd = if n == 0 { 0.0 } else { (q / n as f64).sqrt() };
            if sd < epsilon {
                log::warn!("channel {ch} has standard deviation {sd:.3e}; flooring at {epsilon:.1e}");
                epsilon
            } else {
                sd
            }
        })
        .collect();
    Ok(NormalizationRecord { mean, std, epsilon })
}

impl NormalizationRecord {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, sample: &mut RFSample) -> Result<()> {
        let [c, l] = sample.shape;
        if c != self.channels() {
            return Err(Error::Validation(format!(
                "sample {} has {c} channels, normalization record has {}",
                sample.id,
                self.channels()
            )));
        }
        for ch in 0..c {
            for v in &mut sample.signal[ch * l..ch * l + sample.valid_len] {
                *v = ((*v as f64 - self.mean[ch]) / self.std[ch]) as f32;
            }
        }
        Ok(())
    }

    pub fn apply_all(&self, samples: &mut [RFSample]) -> Result<()> {
        samples.iter_mut().try_for_each(|s| self.apply(s))
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        format!(
            "{RECORD_HEADER}\nchannels {}\nepsilon {:e}\nmean {}\nstd {}\n",
            self.channels(),
            self.epsilon,
            join(&self.mean),
            join(&self.std)
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let (mut channels, mut epsilon, mut mean, mut std) = (None, None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let floats = || -> Result<Vec<f64>> {
                rest.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| err(i + 1, format!("{key}: {e}"))))
                    .collect()
            };
            match key {
                "channels" => channels = Some(rest.trim().parse::<usize>().map_err(|e| err(i + 1, e.to_string()))?),
                "epsilon" => epsilon = Some(rest.trim().parse::<f64>().map_err(|e| err(i + 1, e.to_string()))?),
                "mean" => mean = Some(floats()?),
                "std" => std = Some(floats()?),
                other => return Err(err(i + 1, format!("unknown key `{other}`"))),
            }
        }
        let (Some(c), Some(epsilon), Some(mean), Some(std)) = (channels, epsilon, mean, std) else {
            return Err(err(0, "record needs channels, epsilon, mean and std".into()));
        };
        if mean.len() != c || std.len() != c {
            return Err(err(0, format!("expected {c} means and deviations")));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(err(0, "deviations must be positive".into()));
        }
        Ok(Self { mean, std, epsilon })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_vec, rng_from_seed};
    use crate::skeleton::Pose;
    use approx::assert_relative_eq;

    fn sample(id: usize, signal: Vec<f32>, shape: [usize; 2]) -> RFSample {
        RFSample::new(format!("x{id}"), "s", "e", signal, shape, Pose::new(vec![[0.0; 3]]).unwrap()).unwrap()
    }

    fn random_samples(n: usize, seed: u64, shift: f64) -> Vec<RFSample> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let g = gaussian_vec(&mut rng, 3 * 5);
                let sig = g.iter().enumerate().map(|(j, v)| (v * (1.0 + (j / 5) as f64) + shift + (j / 5) as f64) as f32).collect();
                sample(i, sig, [3, 5])
            })
            .collect()
    }

    #[test]
    fn constant_channel_becomes_zero() {
        let s = vec![sample(0, vec![2.0, 2.0, 1.0, 3.0], [2, 2]), sample(1, vec![2.0, 2.0, 5.0, 7.0], [2, 2])];
        let rec = fit_normalization(&s.iter().collect::<Vec<_>>(), 1e-6).unwrap();
        assert_eq!(rec.std[0], 1e-6);
        let mut t = s.clone();
        rec.apply_all(&mut t).unwrap();
        assert_eq!(&t[0].signal[..2], &[0.0, 0.0]);
    }

    #[test]
    fn train_moments_are_standard() {
        let mut train = random_samples(40, 1, 0.0);
        let rec = fit_normalization(&train.iter().collect::<Vec<_>>(), 1e-8).unwrap();
        rec.apply_all(&mut train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = train.iter().flat_map(|s| s.signal[ch * 5..ch * 5 + 5].iter().map(|&v| v as f64)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert_relative_eq!(m, 0.0, epsilon = 1e-5);
            assert_relative_eq!(v.sqrt(), 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn test_split_reuses_train_statistics() {
        let train = random_samples(30, 2, 0.0);
        let mut test = random_samples(10, 3, 4.0);
        let raw = test.clone();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norm.txt");
        fit_normalization(&train.iter().collect::<Vec<_>>(), 1e-8).unwrap().save(&path).unwrap();
        let rec = NormalizationRecord::load(&path).unwrap();
        rec.apply_all(&mut test).unwrap();
        for (s, r) in test.iter().zip(&raw) {
            for i in 0..15 {
                let ch = i / 5;
                let want = (r.signal[i] as f64 - rec.mean[ch]) / rec.std[ch];
                assert_relative_eq!(s.signal[i] as f64, want, epsilon = 1e-5);
            }
        }
        // a shifted test set keeps its shift under train statistics
        let m: f64 = test.iter().map(|s| s.signal[0] as f64).sum::<f64>() / 10.0;
        assert!(m > 1.0, "{m}");
    }

    #[test]
    fn padding_is_excluded_and_untouched() {
        let mut s = sample(0, vec![1.0, 3.0, 0.0, 2.0, 6.0, 0.0], [2, 3]);
        s.valid_len = 2;
        let rec = fit_normalization(&[&s], 1e-8).unwrap();
        assert_eq!(rec.mean, vec![2.0, 4.0]);
        rec.apply(&mut s).unwrap();
        assert_eq!(s.signal, vec![-1.0, 1.0, 0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_train_and_bad_records_fail() {
        assert!(matches!(fit_normalization(&[], 1e-6), Err(Error::Validation(_))));
        let p = Path::new("n.txt");
        assert!(matches!(NormalizationRecord::parse("channels 2\nepsilon 1\nmean 0\nstd 1 1\n", p), Err(Error::Parse { .. })));
    }
}
