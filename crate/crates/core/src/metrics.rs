//! Pose error metrics. Poses are in meters; every metric is reported in
//! millimeters.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::Pose;

const MM_PER_M: f64 = 1000.0;

fn check_pair(y_hat: &Pose, y: &Pose) -> Result<()> {
    if y_hat.joint_count() != y.joint_count() {
        return Err(Error::Validation(format!(
            "prediction has {} joints, label has {}",
            y_hat.joint_count(),
            y.joint_count()
        )));
    }
    if y.joint_count() == 0 {
        return Err(Error::Validation("empty pose".into()));
    }
    Ok(())
}

fn vec3(p: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

/// Mean Euclidean joint distance.
pub fn mpjpe(y_hat: &Pose, y: &Pose) -> Result<f64> {
    check_pair(y_hat, y)?;
    let total: f64 = y_hat
        .joints()
        .iter()
        .zip(y.joints())
        .map(|(a, b)| (vec3(a) - vec3(b)).norm())
        .sum();
    Ok(MM_PER_M * total / y.joint_count() as f64)
}

/// Mean absolute per-coordinate error.
pub fn mpjdle(y_hat: &Pose, y: &Pose) -> Result<f64> {
    check_pair(y_hat, y)?;
    let total: f64 = y_hat
        .joints()
        .iter()
        .zip(y.joints())
        .flat_map(|(a, b)| (0..3).map(move |j| (a[j] - b[j]).abs()))
        .sum();
    Ok(MM_PER_M * total / (3 * y.joint_count()) as f64)
}

/// Similarity transform `x -> scale * R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.rotation * vec3(p) * self.scale + self.translation;
        [v.x, v.y, v.z]
    }
}

/// Least-squares similarity (or rigid, when `with_scale` is false) transform
/// taking `y_hat` onto `y`, with a proper rotation.
pub fn procrustes_fit(y_hat: &Pose, y: &Pose, with_scale: bool) -> Result<Similarity> {
    check_pair(y_hat, y)?;
    let n = y.joint_count();
    if n < 3 {
        return Err(Error::Alignment(format!("need at least 3 joints, got {n}")));
    }
    let xs: Vec<Vector3<f64>> = y_hat.joints().iter().map(vec3).collect();
    let ys: Vec<Vector3<f64>> = y.joints().iter().map(vec3).collect();
    let mu_x = xs.iter().sum::<Vector3<f64>>() / n as f64;
    let mu_y = ys.iter().sum::<Vector3<f64>>() / n as f64;
    let var_x = xs.iter().map(|x| (x - mu_x).norm_squared()).sum::<f64>() / n as f64;
    let scale_ref = ys.iter().map(|v| v.norm_squared()).sum::<f64>() / n as f64;
    if var_x <= 1e-24 * scale_ref.max(1.0) {
        return Err(Error::Alignment("prediction has zero spread".into()));
    }
    let mut cov = Matrix3::zeros();
    for (x, v) in xs.iter().zip(&ys) {
        cov += (v - mu_y) * (x - mu_x).transpose();
    }
    cov /= n as f64;
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Alignment("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Alignment("SVD failed".into()))?;
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_x
    } else {
        1.0
    };
    let translation = mu_y - rotation * mu_x * scale;
    Ok(Similarity {
        rotation,
        translation,
        scale,
    })
}

pub fn procrustes_align(y_hat: &Pose, y: &Pose, with_scale: bool) -> Result<Pose> {
    let tf = procrustes_fit(y_hat, y, with_scale)?;
    Pose::new(y_hat.joints().iter().map(|p| tf.apply(p)).collect())
}

pub fn pa_mpjpe(y_hat: &Pose, y: &Pose, with_scale: bool) -> Result<f64> {
    mpjpe(&procrustes_align(y_hat, y, with_scale)?, y)
}

/// Empirical CDF: one `(threshold, fraction <= threshold)` row per distinct
/// value, ascending, ending at fraction 1.
pub fn error_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Validation("CDF of an empty sequence".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("CDF input contains non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    Ok(out)
}

pub fn cdf_csv(cdf: &[(f64, f64)]) -> String {
    let mut s = String::from("mpjpe_mm,fraction\n");
    for (t, f) in cdf {
        s.push_str(&format!("{t:.6},{f:.6}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpjdle: f64,
}

pub fn sample_metrics(id: &str, y_hat: &Pose, y: &Pose, pa_scale: bool) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.to_string(),
        mpjpe: mpjpe(y_hat, y)?,
        pa_mpjpe: pa_mpjpe(y_hat, y, pa_scale)?,
        mpjdle: mpjdle(y_hat, y)?,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpjdle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub mean: MetricSummary,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("no predictions to evaluate".into()));
        }
        let col = |f: fn(&SampleMetrics) -> f64| mean_std(&samples.iter().map(f).collect::<Vec<_>>()).0;
        let mean = MetricSummary {
            mpjpe: col(|s| s.mpjpe),
            pa_mpjpe: col(|s| s.pa_mpjpe),
            mpjdle: col(|s| s.mpjdle),
        };
        Ok(Self { samples, mean })
    }

    pub fn cdf(&self) -> Result<Vec<(f64, f64)>> {
        error_cdf(&self.samples.iter().map(|s| s.mpjpe).collect::<Vec<_>>())
    }

    pub fn per_sample_csv(&self) -> String {
        let mut s = String::from("id,mpjpe_mm,pa_mpjpe_mm,mpjdle_mm\n");
        for m in &self.samples {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", m.id, m.mpjpe, m.pa_mpjpe, m.mpjdle));
        }
        s
    }

    pub fn summary_table(&self) -> String {
        format!(
            "metric      mean_mm\nMPJPE       {:.3}\nPA-MPJPE    {:.3}\nMPJDLE      {:.3}\n",
            self.mean.mpjpe, self.mean.pa_mpjpe, self.mean.mpjdle
        )
    }
}
