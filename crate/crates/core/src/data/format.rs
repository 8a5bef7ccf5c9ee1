//! Canonical on-disk layout.
//!
//! A dataset directory holds `manifest.txt` and one blob per sample.
//!
//! ```text
//! # cfpose manifest v1
//! source wifi
//! signal_shape 60 180
//! joints 14
//! sample <id> <subject> <environment> <blob path relative to the manifest>
//! ```
//!
//! A blob is a sequence of records, each a 16-byte header of four
//! little-endian `u32` (`magic`, `rows`, `cols`, `valid_cols`) followed by
//! `rows * cols` little-endian `f32` values in row-major order. Sample blobs
//! hold the signal record then the `(joints, 3)` pose record.

use std::fs;
use std::path::{Path, PathBuf};

use super::{RFSample, Source};
use crate::error::{Error, Result};
use crate::skeleton::Pose;

pub const MANIFEST_HEADER: &str = "# cfpose manifest v1";
pub const BLOB_MAGIC: u32 = u32::from_le_bytes(*b"CFB1");

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub source: Source,
    pub shape: [usize; 2],
    pub joints: usize,
    pub samples: Vec<RFSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobRecord {
    pub rows: usize,
    pub cols: usize,
    pub valid_cols: usize,
    pub data: Vec<f32>,
}

pub fn write_blob(path: &Path, records: &[BlobRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        if r.data.len() != r.rows * r.cols {
            return Err(Error::Validation(format!(
                "blob record has {} values for {}x{}",
                r.data.len(),
                r.rows,
                r.cols
            )));
        }
        for v in [BLOB_MAGIC, r.rows as u32, r.cols as u32, r.valid_cols as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<Vec<BlobRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        if bytes.len() - at < 16 {
            return Err(bad(format!("truncated record header at byte {at}")));
        }
        if word(at) != BLOB_MAGIC {
            return Err(bad(format!("bad record magic at byte {at}")));
        }
        let (rows, cols, valid) = (word(at + 4) as usize, word(at + 8) as usize, word(at + 12) as usize);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| bad("record size overflow".into()))?;
        let end = at + 16 + 4 * n;
        if end > bytes.len() {
            return Err(bad(format!("record at byte {at} needs {n} values, file is truncated")));
        }
        if valid > cols {
            return Err(bad(format!("valid column count {valid} exceeds {cols}")));
        }
        let data = bytes[at + 16..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(BlobRecord {
            rows,
            cols,
            valid_cols: valid,
            data,
        });
        at = end;
    }
    Ok(out)
}

fn parse_usize(tok: Option<&str>, path: &Path, line: usize, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("expected an integer {what}"),
    })
}

/// Pads `(rows, cols)` data with zero columns up to `target` columns.
fn pad_columns(data: &[f32], rows: usize, cols: usize, target: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * target];
    for r in 0..rows {
        out[r * target..r * target + cols].copy_from_slice(&data[r * cols..(r + 1) * cols]);
    }
    out
}

fn load_sample(
    blob: &Path,
    ids: [&str; 3],
    source: Source,
    shape: [usize; 2],
    joints: usize,
) -> Result<RFSample> {
    let records = read_blob(blob)?;
    let [signal, pose] = records.as_slice() else {
        return Err(Error::Parse {
            path: blob.to_path_buf(),
            line: 0,
            msg: format!("expected 2 records (signal, pose), found {}", records.len()),
        });
    };
    let padded = source == Source::Mmwave && signal.cols <= shape[1];
    if signal.rows != shape[0] || !(signal.cols == shape[1] || padded) {
        return Err(Error::Validation(format!(
            "{}: signal is {}x{}, {source} expects {}x{}",
            blob.display(),
            signal.rows,
            signal.cols,
            shape[0],
            shape[1]
        )));
    }
    if pose.rows != joints || pose.cols != 3 {
        return Err(Error::Validation(format!(
            "{}: pose is {}x{}, {source} expects {joints}x3",
            blob.display(),
            pose.rows,
            pose.cols
        )));
    }
    let valid_len = signal.valid_cols.min(signal.cols);
    let data = if signal.cols < shape[1] {
        pad_columns(&signal.data, signal.rows, signal.cols, shape[1])
    } else {
        signal.data.clone()
    };
    let pose = Pose::from_flat(&pose.data.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
    let sample = RFSample {
        id: ids[0].to_string(),
        subject: ids[1].to_string(),
        environment: ids[2].to_string(),
        signal: data,
        shape,
        pose,
        valid_len,
    };
    sample.validate()?;
    Ok(sample)
}

/// Reads and validates every sample listed in `root/manifest.txt`.
pub fn load_dataset(source: Source, root: &Path) -> Result<Dataset> {
    let path = root.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::Dependency(format!("dataset manifest {} not found", path.display()))
        }
        _ => Error::io(&path, e),
    })?;
    let mut declared: Option<Source> = None;
    let mut shape: Option<[usize; 2]> = None;
    let mut joints: Option<usize> = None;
    let mut entries: Vec<(usize, [String; 3], PathBuf)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let key = toks.next().expect("non-empty line");
        let err = |msg: String| Error::Parse {
            path: path.clone(),
            line: lineno,
            msg,
        };
        match key {
            "source" => {
                let name = toks.next().ok_or_else(|| err("missing source name".into()))?;
                declared = Some(name.parse().map_err(|_| err(format!("unknown source `{name}`")))?);
            }
            "signal_shape" => {
                shape = Some([
                    parse_usize(toks.next(), &path, lineno, "channel count")?,
                    parse_usize(toks.next(), &path, lineno, "length")?,
                ]);
            }
            "joints" => joints = Some(parse_usize(toks.next(), &path, lineno, "joint count")?),
            "sample" => {
                let f: Vec<&str> = toks.by_ref().take(4).collect();
                if f.len() != 4 {
                    return Err(err("sample lines need id, subject, environment, blob".into()));
                }
                entries.push((lineno, [f[0].into(), f[1].into(), f[2].into()], root.join(f[3])));
            }
            other => return Err(err(format!("unknown key `{other}`"))),
        }
        if toks.next().is_some() {
            return Err(err("trailing fields".into()));
        }
    }
    let missing = |what: &str| Error::Parse {
        path: path.clone(),
        line: 0,
        msg: format!("manifest lacks a `{what}` line"),
    };
    let declared = declared.ok_or_else(|| missing("source"))?;
    if declared != source {
        return Err(Error::Validation(format!(
            "{} declares source {declared}, expected {source}",
            path.display()
        )));
    }
    let shape = shape.ok_or_else(|| missing("signal_shape"))?;
    let joints = joints.ok_or_else(|| missing("joints"))?;
    if let Some((want, want_joints)) = source.layout() {
        if shape != want || joints != want_joints {
            return Err(Error::Validation(format!(
                "{}: {source} samples are {}x{} with {want_joints} joints, manifest declares {}x{} / {joints}",
                path.display(),
                want[0],
                want[1],
                shape[0],
                shape[1]
            )));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for (lineno, ids, _) in &entries {
        if !seen.insert(ids[0].as_str()) {
            return Err(Error::Parse {
                path: path.clone(),
                line: *lineno,
                msg: format!("duplicate sample id `{}`", ids[0]),
            });
        }
    }
    // Blobs are read in parallel; results keep manifest order.
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let per = entries.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<RFSample>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = entries
            .chunks(per)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|(_, ids, blob)| load_sample(blob, [&ids[0], &ids[1], &ids[2]], source, shape, joints))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
    });
    let mut samples = Vec::with_capacity(entries.len());
    for part in parts {
        samples.extend(part?);
    }
    Ok(Dataset {
        source,
        shape,
        joints,
        samples,
    })
}

/// Writes `manifest.txt` and `blobs/<id>.bin` under `root`.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = format!(
        "{MANIFEST_HEADER}\nsource {}\nsignal_shape {} {}\njoints {}\n",
        dataset.source, dataset.shape[0], dataset.shape[1], dataset.joints
    );
    for s in &dataset.samples {
        s.validate()?;
        s.check_layout(dataset.shape, dataset.joints)?;
        let rel = format!("blobs/{}.bin", s.id);
        write_blob(
            &root.join(&rel),
            &[
                BlobRecord {
                    rows: s.shape[0],
                    cols: s.shape[1],
                    valid_cols: s.valid_len,
                    data: s.signal.clone(),
                },
                BlobRecord {
                    rows: s.pose.joint_count(),
                    cols: 3,
                    valid_cols: 3,
                    data: s.pose.flat().iter().map(|&v| v as f32).collect(),
                },
            ],
        )?;
        manifest.push_str(&format!("sample {} {} {} {rel}\n", s.id, s.subject, s.environment));
    }
    let path = root.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, shape: [usize; 2], joints: usize, fill: f32) -> RFSample {
        let pose = Pose::new((0..joints).map(|j| [j as f64 * 0.5, 0.25, -1.0]).collect()).unwrap();
        RFSample::new(id, "s1", "e1", vec![fill; shape[0] * shape[1]], shape, pose).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = sample("a", [3, 4], 2, 1.5);
        a.signal[5] = -2.25;
        let ds = Dataset {
            source: Source::Synthetic,
            shape: [3, 4],
            joints: 2,
            samples: vec![a, sample("b", [3, 4], 2, 0.0)],
        };
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(Source::Synthetic, dir.path()).unwrap(), ds);
        assert!(matches!(load_dataset(Source::Wifi, dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn mmwave_clouds_are_padded() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            source: Source::Mmwave,
            shape: [5, 493],
            joints: 17,
            samples: vec![],
        };
        write_dataset(dir.path(), &ds).unwrap();
        let pose: Vec<f32> = (0..51).map(|i| i as f32).collect();
        write_blob(
            &dir.path().join("blobs/p.bin"),
            &[
                BlobRecord { rows: 5, cols: 7, valid_cols: 7, data: vec![1.0; 35] },
                BlobRecord { rows: 17, cols: 3, valid_cols: 3, data: pose },
            ],
        )
        .unwrap();
        let manifest = dir.path().join("manifest.txt");
        let mut text = fs::read_to_string(&manifest).unwrap();
        text.push_str("sample p s1 e1 blobs/p.bin\n");
        fs::write(&manifest, text).unwrap();
        let loaded = load_dataset(Source::Mmwave, dir.path()).unwrap();
        let s = &loaded.samples[0];
        assert_eq!((s.shape, s.valid_len), ([5, 493], 7));
        assert_eq!(s.signal.iter().filter(|&&v| v == 1.0).count(), 35);
        assert_eq!(s.signal[493 + 6], 1.0);
        assert_eq!(s.signal[493 + 7], 0.0);
    }

    #[test]
    fn malformed_files_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.txt");
        fs::write(&manifest, "source wifi\nsignal_shape 60 x\n").unwrap();
        match load_dataset(Source::Wifi, dir.path()) {
            Err(Error::Parse { path, line, .. }) => {
                assert_eq!(path, manifest);
                assert_eq!(line, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let blob = dir.path().join("bad.bin");
        fs::write(&blob, [1u8, 2, 3]).unwrap();
        assert!(matches!(read_blob(&blob), Err(Error::Parse { path, .. }) if path == blob));
        assert!(matches!(load_dataset(Source::Wifi, &dir.path().join("none")), Err(Error::Dependency(_))));
    }
}
