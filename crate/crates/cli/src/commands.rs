//! The five pipeline commands.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use cfpose_core::adversarial::{cgan_train, Cgan, CganConfig, CganTrainConfig};
use cfpose_core::backbone::BackboneConfig;
use cfpose_core::checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint};
use cfpose_core::counterfactual::{
    build_regularization_targets, DiffusionGenerator, Frozen, SeedPolicy, SignalGenerator, TargetInput, TargetStore,
};
use cfpose_core::data::{
    build_synthetic_benchmark, choose_held_out, fit_normalization, holdout_counts, load_dataset, make_splits,
    signal_tensor, to_pose_data, BenchmarkSpec, NormalizationRecord, RFSample, SimulatorParams, Source, SplitMode,
    SplitSpec,
};
use cfpose_core::diffusion::{train_diffusion, DiffusionConfig, DiffusionModel, GenTrainConfig, Sampler};
use cfpose_core::hpe::{
    train_hpe, DecoderConfig, EncoderConfig, HpeConfig, HpeModel, HpeTrainConfig, StreamConfig,
};
use cfpose_core::metrics::{cdf_csv, error_cdf, mean_std, sample_metrics, MetricReport};
use cfpose_core::nn::Parameterized;
use cfpose_core::skeleton::{joints_to_skeleton, skeleton_batch, ConditionEmbedder, SkeletonMap, SkeletonVectors};
use cfpose_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{GenKind, RunConfig, Size};

const DTYPE: DType = DType::F32;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loaded samples, normalized with train statistics, and their splits.
pub struct Prepared {
    pub samples: Vec<RFSample>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub skeleton: SkeletonMap,
    pub shape: [usize; 2],
}

impl Prepared {
    pub fn rows(&self, idx: &[usize]) -> Vec<&RFSample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn skeletons(&self, idx: &[usize]) -> Result<Vec<SkeletonVectors>> {
        idx.iter().map(|&i| joints_to_skeleton(&self.samples[i].pose, &self.skeleton)).collect()
    }
}

/// Reads `root/manifest.txt`, or the `train/` + `test/` benchmark layout whose
/// test environments become the default cross-environment hold-out.
fn load_samples(cfg: &RunConfig) -> Result<(Vec<RFSample>, [usize; 2], Vec<String>)> {
    let root = &cfg.data_root;
    if root.join("manifest.txt").exists() {
        let ds = load_dataset(cfg.source, root)?;
        return Ok((ds.samples, ds.shape, Vec::new()));
    }
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    if train_dir.join("manifest.txt").exists() && test_dir.join("manifest.txt").exists() {
        let train = load_dataset(cfg.source, &train_dir)?;
        let test = load_dataset(cfg.source, &test_dir)?;
        if train.shape != test.shape {
            return Err(Error::Validation("train and test signal shapes differ".into()));
        }
        let mut envs: Vec<String> = test.samples.iter().map(|s| s.environment.clone()).collect();
        envs.sort();
        envs.dedup();
        let mut samples = train.samples;
        samples.extend(test.samples);
        return Ok((samples, train.shape, envs));
    }
    Err(Error::Dependency(format!(
        "no dataset under {} (expected manifest.txt or train/ and test/)",
        root.display()
    )))
}

/// With `reuse_normalization` the record saved by training is applied
/// instead of fitting a new one.
pub fn prepare(cfg: &RunConfig, reuse_normalization: bool) -> Result<Prepared> {
    let (mut samples, shape, default_held_out) = load_samples(cfg)?;
    let skeleton = match &cfg.skeleton {
        Some(p) => SkeletonMap::load(p, samples.first().map(|s| s.pose.joint_count()))?,
        None => cfg.source.skeleton(),
    };
    let spec = match cfg.split {
        SplitMode::Random => SplitSpec::random(cfg.split_seed),
        mode => {
            let held = if !cfg.held_out.is_empty() {
                cfg.held_out.clone()
            } else if mode == SplitMode::CrossEnvironment && !default_held_out.is_empty() {
                default_held_out
            } else if let Some(counts) = holdout_counts(cfg.source, mode) {
                choose_held_out(&samples, mode, counts, cfg.split_seed)?
            } else {
                return Err(Error::Config(format!("{mode} split on {} data needs data.held_out", cfg.source)));
            };
            SplitSpec::cross(mode, held, cfg.split_seed)
        }
    };
    let splits = make_splits(&samples, &spec)?;
    if cfg.normalize {
        let path = cfg.normalization_path();
        let record = if reuse_normalization {
            if !path.exists() {
                return Err(Error::Dependency(format!("normalization record {} not found", path.display())));
            }
            NormalizationRecord::load(&path)?
        } else {
            let train: Vec<&RFSample> = splits.train.iter().map(|&i| &samples[i]).collect();
            let record = fit_normalization(&train, cfg.epsilon)?;
            fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
                path: cfg.out.clone(),
                source: e,
            })?;
            record.save(&path)?;
            record
        };
        record.apply_all(&mut samples)?;
    }
    log::info!(
        "{} samples: {} train / {} validation / {} test",
        samples.len(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );
    Ok(Prepared {
        samples,
        train: splits.train,
        validation: splits.validation,
        test: splits.test,
        skeleton,
        shape,
    })
}

fn backbone(cfg: &RunConfig, channels: usize) -> BackboneConfig {
    match cfg.gen_size {
        Size::Full => BackboneConfig::full_size(channels, cfg.embed_width),
        Size::Toy => BackboneConfig {
            channels,
            filters: [16, 32, 16],
            kernels: [5, 3, 3],
            cond_width: cfg.embed_width,
        },
    }
}

fn diffusion_config(cfg: &RunConfig, k: usize, shape: [usize; 2]) -> DiffusionConfig {
    DiffusionConfig {
        bone_count: k,
        embed_width: cfg.embed_width,
        backbone: backbone(cfg, shape[0]),
        signal_len: shape[1],
        steps: cfg.steps,
        beta_min: cfg.beta_min,
        beta_max: cfg.beta_max,
    }
}

fn cgan_config(cfg: &RunConfig, k: usize, shape: [usize; 2]) -> CganConfig {
    CganConfig {
        bone_count: k,
        embed_width: cfg.embed_width,
        backbone: backbone(cfg, shape[0]),
        signal_len: shape[1],
    }
}

fn kind_tag(kind: GenKind) -> &'static str {
    match kind {
        GenKind::Ddpm | GenKind::Ddim => "diffusion",
        GenKind::Cgan => "cgan",
    }
}

pub fn train_gen(cfg: &RunConfig) -> Result<PathBuf> {
    let p = prepare(cfg, false)?;
    if p.train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let data = to_pose_data(&p.rows(&p.train), DTYPE)?;
    let skeletons = skeleton_batch(&p.skeletons(&p.train)?, DTYPE)?;
    let k = p.skeleton.bone_count();
    let path = cfg.generator_path();
    let (history, model_desc, model): (_, _, Box<dyn Parameterized>) = match cfg.gen_model {
        GenKind::Ddpm | GenKind::Ddim => {
            let mc = diffusion_config(cfg, k, p.shape);
            let model = DiffusionModel::new(&mc, cfg.gen_seed, DTYPE)?;
            let tc = GenTrainConfig {
                epochs: cfg.gen_epochs,
                batch_size: cfg.gen_batch,
                lr: cfg.gen_lr,
                seed: cfg.gen_seed,
            };
            let h = train_diffusion(&model, &data.signals, &skeletons, &tc)?;
            (h, serde_json::to_value(&mc), Box::new(model))
        }
        GenKind::Cgan => {
            let mc = cgan_config(cfg, k, p.shape);
            let model = Cgan::new(&mc, cfg.gen_seed, DTYPE)?;
            let tc = CganTrainConfig {
                epochs: cfg.gen_epochs,
                batch_size: cfg.gen_batch,
                lr_gen: cfg.lr_gen,
                lr_disc: cfg.lr_disc,
                n_critic: cfg.n_critic,
                gp_weight: cfg.gp_weight,
                seed: cfg.gen_seed,
            };
            let h = cgan_train(&model, &data.signals, &skeletons, &tc)?;
            (h, serde_json::to_value(&mc), Box::new(model))
        }
    };
    let desc = model_desc.map_err(|e| Error::Validation(e.to_string()))?;
    save_checkpoint(&path, kind_tag(cfg.gen_model), &cfg.gen_hash(), desc, model.as_ref())?;
    write(&cfg.out.join("generator_loss.csv"), &history.to_csv())?;
    write(&cfg.out.join("config.txt"), &cfg.to_text())?;
    log::info!("generator checkpoint {}", path.display());
    Ok(path)
}

/// A trained generator restored from its checkpoint.
pub enum LoadedGenerator {
    Diffusion(DiffusionModel, Sampler),
    Cgan(Cgan),
}

impl LoadedGenerator {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let path = cfg.generator_path();
        let header = read_checkpoint_header(&path)?;
        let bad = |e: serde_json::Error| Error::Dependency(format!("{}: {e}", path.display()));
        let expected = Some(cfg.gen_hash());
        match cfg.gen_model {
            GenKind::Ddpm | GenKind::Ddim => {
                let mc: DiffusionConfig = serde_json::from_value(header.model).map_err(bad)?;
                let model = DiffusionModel::new(&mc, 0, DTYPE)?;
                load_checkpoint(&path, "diffusion", expected.as_deref(), &model)?;
                let sampler = match cfg.gen_model {
                    GenKind::Ddim => Sampler::Ddim {
                        steps: cfg.ddim_steps,
                        eta: cfg.eta,
                    },
                    _ => Sampler::Ddpm,
                };
                Ok(Self::Diffusion(model, sampler))
            }
            GenKind::Cgan => {
                let mc: CganConfig = serde_json::from_value(header.model).map_err(bad)?;
                let model = Cgan::new(&mc, 0, DTYPE)?;
                load_checkpoint(&path, "cgan", expected.as_deref(), &model)?;
                Ok(Self::Cgan(model))
            }
        }
    }

    fn parts(&self) -> (Box<dyn SignalGenerator + '_>, &dyn ConditionEmbedder, &dyn Parameterized) {
        match self {
            Self::Diffusion(m, s) => (
                Box::new(DiffusionGenerator { model: m, sampler: *s }),
                m.embedder(),
                m,
            ),
            Self::Cgan(m) => (Box::new(m), m.embedder(), m),
        }
    }
}

pub fn synth_cf(cfg: &RunConfig) -> Result<PathBuf> {
    let generator = LoadedGenerator::load(cfg)?;
    let p = prepare(cfg, false)?;
    let (gen, embedder, params) = generator.parts();
    let frozen = Frozen::new(params)?;
    let skeletons = p.skeletons(&p.train)?;
    let signals = p
        .train
        .iter()
        .map(|&i| signal_tensor(&p.samples[i], DTYPE))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<TargetInput> = p
        .train
        .iter()
        .zip(&skeletons)
        .zip(&signals)
        .map(|((&i, h), x)| TargetInput {
            id: &p.samples[i].id,
            skeleton: h,
            signal: Some(x),
        })
        .collect();
    let policy = SeedPolicy {
        seed: cfg.cf_seed,
        noise: cfg.cf_noise,
        base: cfg.cf_base,
    };
    let store =
        build_regularization_targets(gen.as_ref(), embedder, &frozen, &inputs, policy, &cfg.cf_hash(), cfg.cf_chunk, DTYPE)?;
    let path = cfg.store_path();
    store.save(&path)?;
    log::info!("{} regularization targets in {}", store.len(), path.display());
    Ok(path)
}

pub fn hpe_config(cfg: &RunConfig, shape: [usize; 2], joints: usize) -> HpeConfig {
    match cfg.hpe_size {
        Size::Full => HpeConfig::full_size(shape[0], shape[1], joints),
        Size::Toy => HpeConfig {
            channels: shape[0],
            len: shape[1],
            joints,
            encoder: EncoderConfig {
                filters: 16,
                down_kernels: [7, 5, 3],
                up_kernels: [3, 5, 7],
            },
            decoder: DecoderConfig {
                stream_a: StreamConfig {
                    width: 16,
                    heads: 2,
                    kernels: vec![3, 3],
                    dilations: vec![2, 1],
                },
                stream_b: StreamConfig {
                    width: 16,
                    heads: 2,
                    kernels: vec![3],
                    dilations: vec![1],
                },
                pool: 8,
                hidden: 64,
            },
        },
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HpeDesc {
    config: HpeConfig,
    bone_count: usize,
    lambda: f64,
    seed: u64,
}

fn report(model: &HpeModel, p: &Prepared, idx: &[usize], pa_scale: bool) -> Result<MetricReport> {
    if idx.is_empty() {
        return Err(Error::Validation("no samples to evaluate".into()));
    }
    let rows = p.rows(idx);
    let mut metrics = Vec::with_capacity(rows.len());
    for part in rows.chunks(256) {
        let data = to_pose_data(part, DTYPE)?;
        let preds = model.infer_poses(&data.signals)?;
        for (y_hat, s) in preds.iter().zip(part) {
            metrics.push(sample_metrics(&s.id, y_hat, &s.pose, pa_scale)?);
        }
    }
    MetricReport::from_samples(metrics)
}

/// One row of the sweep summary.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda: f64,
    pub mpjpe: Vec<f64>,
    pub pa_mpjpe: Vec<f64>,
    pub mpjdle: Vec<f64>,
}

fn fmt_ms(v: &[f64]) -> String {
    let (m, s) = mean_std(v);
    format!("{m:.2}±{s:.2}")
}

pub fn sweep_table(rows: &[SweepRow]) -> (String, String) {
    let mut csv = String::from("lambda,runs,mpjpe_mean,mpjpe_std,pa_mpjpe_mean,pa_mpjpe_std,mpjdle_mean,mpjdle_std\n");
    let mut table = format!("{:>7} {:>5} {:>18} {:>18} {:>18}\n", "lambda", "runs", "MPJPE (mm)", "PA-MPJPE (mm)", "MPJDLE (mm)");
    for r in rows {
        let cols: Vec<(f64, f64)> = [&r.mpjpe, &r.pa_mpjpe, &r.mpjdle].iter().map(|v| mean_std(v)).collect();
        csv.push_str(&format!("{},{}", r.lambda, r.mpjpe.len()));
        for (m, s) in &cols {
            csv.push_str(&format!(",{m},{s}"));
        }
        csv.push('\n');
        table.push_str(&format!(
            "{:>7} {:>5} {:>18} {:>18} {:>18}\n",
            r.lambda,
            r.mpjpe.len(),
            fmt_ms(&r.mpjpe),
            fmt_ms(&r.pa_mpjpe),
            fmt_ms(&r.mpjdle)
        ));
    }
    (csv, table)
}

pub fn train_hpe_cmd(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let lambdas = cfg.lambdas();
    let store = if lambdas.iter().any(|&l| l > 0.0) {
        let store = TargetStore::load(&cfg.store_path())?;
        let gen = read_checkpoint_header(&cfg.generator_path())?;
        store.check_provenance(&gen.fingerprint, &cfg.cf_hash())?;
        Some(store)
    } else {
        None
    };
    let p = prepare(cfg, false)?;
    let joints = p.skeleton.joint_count();
    let train = to_pose_data(&p.rows(&p.train), DTYPE)?;
    let validation = if p.validation.is_empty() {
        None
    } else {
        Some(to_pose_data(&p.rows(&p.validation), DTYPE)?)
    };
    let hc = hpe_config(cfg, p.shape, joints);
    let mut rows = Vec::new();
    for &lambda in &lambdas {
        let mut row = SweepRow {
            lambda,
            mpjpe: vec![],
            pa_mpjpe: vec![],
            mpjdle: vec![],
        };
        for r in 0..cfg.repeats {
            let seed = cfg.hpe_seed + r as u64;
            let model = HpeModel::new(&hc, p.skeleton.bone_count(), seed, DTYPE)?;
            let tc = HpeTrainConfig {
                lambda,
                lr: cfg.hpe_lr,
                epochs: cfg.hpe_epochs,
                batch_size: cfg.hpe_batch,
                seed,
                train_aggregator: cfg.train_aggregator,
            };
            let val = validation.clone().unwrap_or_else(|| train.clone());
            let outcome = train_hpe(&model, &train, &val, store.as_ref(), &tc)?;
            let path = cfg.hpe_path(lambda, seed);
            let desc = HpeDesc {
                config: hc.clone(),
                bone_count: p.skeleton.bone_count(),
                lambda,
                seed,
            };
            let desc = serde_json::to_value(&desc).map_err(|e| Error::Validation(e.to_string()))?;
            save_checkpoint(&path, "hpe", &cfg.hpe_hash(), desc, &model)?;
            write(&path.with_extension("loss.csv"), &outcome.history.to_csv())?;
            if !p.test.is_empty() {
                let rep = report(&model, &p, &p.test, cfg.pa_scale)?;
                row.mpjpe.push(rep.mean.mpjpe);
                row.pa_mpjpe.push(rep.mean.pa_mpjpe);
                row.mpjdle.push(rep.mean.mpjdle);
                log::info!("lambda {lambda} seed {seed}: MPJPE {:.2} mm (best epoch {})", rep.mean.mpjpe, outcome.best_epoch);
            }
        }
        rows.push(row);
    }
    let (csv, table) = sweep_table(&rows);
    write(&cfg.out.join("hpe_summary.csv"), &csv)?;
    write(&cfg.out.join("config.txt"), &cfg.to_text())?;
    print!("{table}");
    Ok(rows)
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<MetricReport> {
    let path = cfg
        .eval_checkpoint
        .clone()
        .unwrap_or_else(|| cfg.hpe_path(cfg.lambda, cfg.hpe_seed));
    let header = read_checkpoint_header(&path)?;
    let desc: HpeDesc = serde_json::from_value(header.model)
        .map_err(|e| Error::Dependency(format!("{}: {e}", path.display())))?;
    let model = HpeModel::new(&desc.config, desc.bone_count, desc.seed, DTYPE)?;
    load_checkpoint(&path, "hpe", Some(&cfg.hpe_hash()), &model)?;
    let p = prepare(cfg, true)?;
    if p.test.is_empty() {
        return Err(Error::Validation("test split is empty; nothing to evaluate".into()));
    }
    let rep = report(&model, &p, &p.test, cfg.pa_scale)?;
    let dir = cfg.out.join("eval");
    write(&dir.join("per_sample.csv"), &rep.per_sample_csv())?;
    write(&dir.join("summary.txt"), &rep.summary_table())?;
    for (name, values) in [
        ("mpjpe", rep.samples.iter().map(|s| s.mpjpe).collect::<Vec<_>>()),
        ("pa_mpjpe", rep.samples.iter().map(|s| s.pa_mpjpe).collect()),
        ("mpjdle", rep.samples.iter().map(|s| s.mpjdle).collect()),
    ] {
        write(&dir.join(format!("cdf_{name}.csv")), &cdf_csv(&error_cdf(&values)?))?;
    }
    print!("{}", rep.summary_table());
    Ok(rep)
}

pub fn simulate_cmd(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.source != Source::Synthetic {
        return Err(Error::Config("simulate writes synthetic data; set data.source = synthetic".into()));
    }
    let params = SimulatorParams {
        channels: cfg.sim_channels,
        len: cfg.sim_len,
        density: cfg.sim_density,
        region: cfg.sim_region,
        domain_rank: cfg.sim_domain_rank,
        domain_blocks: cfg.sim_domain_blocks,
        domain_scale: cfg.sim_domain_scale,
        jitter: cfg.sim_jitter,
        noise: cfg.sim_noise,
    };
    let mut spec = BenchmarkSpec::two_domain(params, cfg.sim_train, cfg.sim_test, cfg.sim_seed);
    spec.train_domains = cfg.sim_domains.clone();
    spec.test_domain = cfg.sim_test_domain.clone();
    let paths = build_synthetic_benchmark(&spec, &cfg.data_root)?;
    log::info!("synthetic benchmark in {}", paths.root.display());
    Ok(paths.root)
}
