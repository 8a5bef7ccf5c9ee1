//! Additive RF simulator: `x = sum_k W_k vec(h_k) + d + noise`.
//!
//! Each bone owns a sparse projection `W_k` of shape `(C*L, 6)` supported on
//! a random rectangular region of the signal, so bones touch overlapping but
//! distinct channels and columns. Each domain adds a smooth offset `d` built
//! from a few shared piecewise-constant channel patterns; per-sample jitter
//! scales `d` by `1 + jitter * g` with `g ~ N(0, 1)`.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::VarMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::{write_blob, write_dataset, BlobRecord, Dataset};
use super::{read_blob, RFSample, Source};
use crate::counterfactual::SignalGenerator;
use crate::error::{Error, Result};
use crate::nn::{derive_seed, gaussian_vec, rng_from_seed, tensor_from_f64, to_f64_vec, Parameterized};
use crate::skeleton::{joints_to_skeleton, Pose, SkeletonMap};

/// Knobs for drawing a random simulator world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorParams {
    pub channels: usize,
    pub len: usize,
    /// Probability that an entry inside a bone's region is non-zero.
    pub density: f64,
    /// Fraction of channels and of columns spanned by each bone's region.
    pub region: f64,
    /// Number of shared offset patterns mixed into each domain offset.
    pub domain_rank: usize,
    /// Piecewise-constant blocks along the length axis of each pattern.
    pub domain_blocks: usize,
    pub domain_scale: f64,
    pub jitter: f64,
    pub noise: f64,
}

impl SimulatorParams {
    pub fn toy(channels: usize, len: usize) -> Self {
        Self {
            channels,
            len,
            density: 0.5,
            region: 0.5,
            domain_rank: 1,
            domain_blocks: 4,
            domain_scale: 2.0,
            jitter: 0.5,
            noise: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.len == 0 {
            return Err(Error::Config("simulator signal shape must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.density) || !(self.region > 0.0 && self.region <= 1.0) {
            return Err(Error::Config("density must lie in [0, 1] and region in (0, 1]".into()));
        }
        if self.domain_blocks == 0 || self.domain_blocks > self.len {
            return Err(Error::Config(format!(
                "domain_blocks must lie in 1..={}",
                self.len
            )));
        }
        for (name, v) in [("domain_scale", self.domain_scale), ("jitter", self.jitter), ("noise", self.noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    /// Row-major `(C, L)` offset.
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfigFile {
    shape: [usize; 2],
    joints: usize,
    bones: Vec<(usize, usize)>,
    projections: Vec<Vec<f64>>,
    domains: Vec<Domain>,
    noise: f64,
    jitter: f64,
}

/// A fully specified simulator world.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatorConfig {
    shape: [usize; 2],
    skeleton: SkeletonMap,
    projections: Vec<Vec<f64>>,
    domains: Vec<Domain>,
    noise: f64,
    jitter: f64,
}

impl SimulatorConfig {
    /// `projections[k]` is row-major `(C*L, 6)`.
    pub fn new(
        shape: [usize; 2],
        skeleton: SkeletonMap,
        projections: Vec<Vec<f64>>,
        domains: Vec<Domain>,
        noise: f64,
        jitter: f64,
    ) -> Result<Self> {
        let size = shape[0] * shape[1];
        if size == 0 {
            return Err(Error::Config("simulator signal shape must be non-empty".into()));
        }
        if projections.len() != skeleton.bone_count() {
            return Err(Error::Config(format!(
                "{} projections for {} bones",
                projections.len(),
                skeleton.bone_count()
            )));
        }
        if let Some(k) = projections.iter().position(|w| w.len() != size * 6) {
            return Err(Error::Config(format!("projection {k} is not ({size}, 6)")));
        }
        if domains.is_empty() {
            return Err(Error::Config("simulator needs at least one domain".into()));
        }
        for d in &domains {
            if d.offset.len() != size {
                return Err(Error::Config(format!("domain `{}` offset is not {size} long", d.name)));
            }
            if d.name.is_empty() || d.name.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid domain name `{}`", d.name)));
            }
        }
        for (name, v) in [("noise", noise), ("jitter", jitter)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(Self {
            shape,
            skeleton,
            projections,
            domains,
            noise,
            jitter,
        })
    }

    /// Draws a world from `params` with one offset per named domain.
    pub fn generate(params: &SimulatorParams, skeleton: SkeletonMap, domains: &[&str], seed: u64) -> Result<Self> {
        params.validate()?;
        let (c, l) = (params.channels, params.len);
        let mut rng = rng_from_seed(seed);
        let rc = ((c as f64 * params.region).round() as usize).clamp(1, c);
        let rl = ((l as f64 * params.region).round() as usize).clamp(1, l);
        let scale = 1.0 / 6f64.sqrt();
        let mut projections = Vec::with_capacity(skeleton.bone_count());
        for _ in 0..skeleton.bone_count() {
            let c0 = rng.random_range(0..=c - rc);
            let t0 = rng.random_range(0..=l - rl);
            let mut w = vec![0.0; c * l * 6];
            for ch in 0..c {
                for t in 0..l {
                    let inside = (c0..c0 + rc).contains(&ch) && (t0..t0 + rl).contains(&t);
                    let keep = rng.random::<f64>() < params.density;
                    let row = &mut w[(ch * l + t) * 6..(ch * l + t + 1) * 6];
                    for v in row.iter_mut() {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        if inside && keep {
                            *v = g * scale;
                        }
                    }
                }
            }
            projections.push(w);
        }
        let patterns: Vec<Vec<f64>> = (0..params.domain_rank)
            .map(|_| {
                let base = gaussian_vec(&mut rng, c * params.domain_blocks);
                let mut p = vec![0.0; c * l];
                for ch in 0..c {
                    for t in 0..l {
                        p[ch * l + t] = base[ch * params.domain_blocks + t * params.domain_blocks / l];
                    }
                }
                p
            })
            .collect();
        let domains = domains
            .iter()
            .map(|name| {
                let mut offset = vec![0.0; c * l];
                for p in &patterns {
                    let a: f64 = StandardNormal.sample(&mut rng);
                    for (o, v) in offset.iter_mut().zip(p) {
                        *o += params.domain_scale * a * v;
                    }
                }
                Domain {
                    name: name.to_string(),
                    offset,
                }
            })
            .collect();
        Self::new([c, l], skeleton, projections, domains, params.noise, params.jitter)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn skeleton(&self) -> &SkeletonMap {
        &self.skeleton
    }

    pub fn bone_count(&self) -> usize {
        self.projections.len()
    }

    pub fn projection(&self, k: usize) -> &[f64] {
        &self.projections[k]
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown simulator domain `{name}`")))
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `W_k vec(h_k)` for a 6-vector bone.
    pub fn bone_contribution(&self, k: usize, bone: &[f64]) -> Vec<f64> {
        self.projections[k]
            .chunks_exact(6)
            .map(|row| row.iter().zip(bone).map(|(w, h)| w * h).sum())
            .collect()
    }

    /// Renders flattened skeleton vectors `(6K)` in `domain` with the
    /// offset jitter and noise drawn from `seed`.
    pub fn render(&self, flat: &[f64], domain: usize, seed: u64) -> Result<SimulatedSample> {
        let k = self.bone_count();
        if flat.len() != 6 * k {
            return Err(Error::Config(format!(
                "skeleton vectors have {} values, simulator expects {}",
                flat.len(),
                6 * k
            )));
        }
        let d = self.domains.get(domain).ok_or(Error::Index {
            what: "domain",
            index: domain,
            len: self.domains.len(),
        })?;
        let mut rng = rng_from_seed(seed);
        let g: f64 = StandardNormal.sample(&mut rng);
        let eps = gaussian_vec(&mut rng, self.shape[0] * self.shape[1]);
        let offset: Vec<f64> = d.offset.iter().map(|v| v * (1.0 + self.jitter * g)).collect();
        let noise: Vec<f64> = eps.iter().map(|e| e * self.noise).collect();
        let contributions: Vec<Vec<f64>> = (0..k)
            .map(|b| self.bone_contribution(b, &flat[6 * b..6 * b + 6]))
            .collect();
        let signal = (0..offset.len())
            .map(|i| contributions.iter().map(|c| c[i]).sum::<f64>() + offset[i] + noise[i])
            .collect();
        Ok(SimulatedSample {
            shape: self.shape,
            domain: d.name.clone(),
            signal,
            contributions,
            offset,
            noise,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ConfigFile {
            shape: self.shape,
            joints: self.skeleton.joint_count(),
            bones: self.skeleton.bones().to_vec(),
            projections: self.projections.clone(),
            domains: self.domains.clone(),
            noise: self.noise,
            jitter: self.jitter,
        };
        let text = serde_json::to_string(&file)
            .map_err(|e| Error::Validation(format!("serializing simulator world: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: ConfigFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let skeleton = SkeletonMap::new(f.bones, f.joints)?;
        Self::new(f.shape, skeleton, f.projections, f.domains, f.noise, f.jitter)
    }
}

/// One simulated observation with its additive decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    pub shape: [usize; 2],
    pub domain: String,
    /// Row-major `(C, L)`.
    pub signal: Vec<f64>,
    /// `K` row-major `(C, L)` terms `W_k vec(h_k)`.
    pub contributions: Vec<Vec<f64>>,
    /// Jittered domain offset actually applied.
    pub offset: Vec<f64>,
    pub noise: Vec<f64>,
}

impl SimulatedSample {
    pub fn to_sample(&self, id: &str, subject: &str, pose: Pose) -> Result<RFSample> {
        RFSample::new(
            id,
            subject,
            &self.domain,
            self.signal.iter().map(|&v| v as f32).collect(),
            self.shape,
            pose,
        )
    }

    /// Sidecar records: contributions `(K, C*L)`, offset and noise `(1, C*L)`.
    pub fn write_truth(&self, path: &Path) -> Result<()> {
        let n = self.signal.len();
        let rec = |rows: usize, data: Vec<f32>| BlobRecord {
            rows,
            cols: n,
            valid_cols: n,
            data,
        };
        write_blob(
            path,
            &[
                rec(self.contributions.len(), self.contributions.iter().flatten().map(|&v| v as f32).collect()),
                rec(1, self.offset.iter().map(|&v| v as f32).collect()),
                rec(1, self.noise.iter().map(|&v| v as f32).collect()),
            ],
        )
    }
}

/// Ground truth sidecar contents: `(contributions (K x C*L), offset, noise)`.
pub fn read_truth(path: &Path) -> Result<(Vec<Vec<f32>>, Vec<f32>, Vec<f32>)> {
    let records = read_blob(path)?;
    let [contrib, offset, noise] = records.as_slice() else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("expected 3 truth records, found {}", records.len()),
        });
    };
    let per_bone = contrib.data.chunks_exact(contrib.cols.max(1)).map(<[f32]>::to_vec).collect();
    Ok((per_bone, offset.data.clone(), noise.data.clone()))
}

fn normal(rng: &mut dyn rand::RngCore) -> f64 {
    StandardNormal.sample(rng)
}

/// Random pose: root `N(0, 0.2^2)` per axis; every bone a `0.3`-long step in
/// a uniformly random direction, expanded breadth-first from joint 0.
pub fn sample_pose(map: &SkeletonMap, rng: &mut dyn rand::RngCore) -> Pose {
    let n = map.joint_count();
    let mut joints = vec![[0.0f64; 3]; n];
    let mut placed = vec![false; n];
    let random_step = |rng: &mut dyn rand::RngCore| -> [f64; 3] {
        loop {
            let v: [f64; 3] = std::array::from_fn(|_| normal(rng));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.map(|x| 0.3 * x / norm);
            }
        }
    };
    for root in 0..n {
        if placed[root] {
            continue;
        }
        let base: [f64; 3] = std::array::from_fn(|_| 0.2 * normal(&mut *rng));
        joints[root] = base;
        placed[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(j) = queue.pop_front() {
            for &(a, b) in map.bones() {
                let next = if a == j { b } else if b == j { a } else { continue };
                if placed[next] {
                    continue;
                }
                let step = random_step(rng);
                joints[next] = std::array::from_fn(|i| joints[j][i] + step[i]);
                placed[next] = true;
                queue.push_back(next);
            }
        }
    }
    Pose::new(joints).expect("finite joints")
}

/// Simulates `pose` in `domain`; deterministic given `seed`.
pub fn simulate_rf(cfg: &SimulatorConfig, pose: &Pose, domain: usize, seed: u64) -> Result<SimulatedSample> {
    let h = joints_to_skeleton(pose, cfg.skeleton()).map_err(|e| Error::Config(e.to_string()))?;
    cfg.render(&h.flatten(), domain, seed)
}

/// Perfect generator stub: renders raw flattened skeleton conditions
/// (identity embedding) through the simulator of one domain. It has no
/// trainable parameters.
#[derive(Clone)]
pub struct SimulatorGenerator {
    pub config: SimulatorConfig,
    pub domain: usize,
    vars: VarMap,
}

impl SimulatorGenerator {
    pub fn new(config: SimulatorConfig, domain: usize) -> Result<Self> {
        config.domains().get(domain).ok_or(Error::Index {
            what: "domain",
            index: domain,
            len: config.domains().len(),
        })?;
        Ok(Self {
            config,
            domain,
            vars: VarMap::new(),
        })
    }
}

impl Parameterized for SimulatorGenerator {
    fn varmap(&self) -> &VarMap {
        &self.vars
    }
}

impl SignalGenerator for SimulatorGenerator {
    fn signal_shape(&self) -> [usize; 2] {
        self.config.shape()
    }

    fn generate(&self, c: &Tensor, seeds: &[u64]) -> Result<Tensor> {
        let (b, w) = c.dims2()?;
        if b != seeds.len() {
            return Err(Error::Validation("one seed per condition row required".into()));
        }
        let flat = to_f64_vec(c)?;
        let mut out = Vec::with_capacity(b * self.config.shape[0] * self.config.shape[1]);
        for (row, &seed) in flat.chunks_exact(w).zip(seeds) {
            out.extend(self.config.render(row, self.domain, seed)?.signal);
        }
        let [ch, len] = self.config.shape();
        tensor_from_f64(out, &[b, ch, len], c.dtype())
    }
}

/// Sizes and seeds of a synthetic cross-domain benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub params: SimulatorParams,
    pub train_domains: Vec<String>,
    pub test_domain: String,
    /// Total training samples, split as evenly as possible over domains.
    pub train_size: usize,
    pub test_size: usize,
    pub world_seed: u64,
    pub sample_seed: u64,
}

impl BenchmarkSpec {
    /// Two training domains `A`, `B` and held-out domain `Z`.
    pub fn two_domain(params: SimulatorParams, train_size: usize, test_size: usize, world_seed: u64) -> Self {
        Self {
            params,
            train_domains: vec!["A".into(), "B".into()],
            test_domain: "Z".into(),
            train_size,
            test_size,
            world_seed,
            sample_seed: derive_seed(world_seed, "samples"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkPaths {
    pub root: PathBuf,
    pub world: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

impl BenchmarkPaths {
    pub fn at(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            world: root.join("world.json"),
            train: root.join("train"),
            test: root.join("test"),
        }
    }

    /// Sidecar holding the additive decomposition of one sample.
    pub fn truth(split_dir: &Path, id: &str) -> PathBuf {
        split_dir.join("truth").join(format!("{id}.bin"))
    }
}

fn write_split(
    cfg: &SimulatorConfig,
    dir: &Path,
    plan: &[(usize, usize)],
    sample_seed: u64,
) -> Result<()> {
    let mut samples = Vec::new();
    for &(domain, count) in plan {
        let name = &cfg.domains()[domain].name;
        for i in 0..count {
            let id = format!("{name}_{i:05}");
            let mut rng = rng_from_seed(derive_seed(sample_seed, &format!("pose/{id}")));
            let pose = sample_pose(cfg.skeleton(), &mut rng);
            let sim = simulate_rf(cfg, &pose, domain, derive_seed(sample_seed, &format!("render/{id}")))?;
            sim.write_truth(&BenchmarkPaths::truth(dir, &id))?;
            samples.push(sim.to_sample(&id, "sim", pose)?);
        }
    }
    write_dataset(
        dir,
        &Dataset {
            source: Source::Synthetic,
            shape: cfg.shape(),
            joints: cfg.skeleton().joint_count(),
            samples,
        },
    )
}

/// Writes `world.json`, `train/` (training domains) and `test/` (held-out
/// domain) manifests with per-sample truth sidecars under `truth/`.
pub fn build_synthetic_benchmark(spec: &BenchmarkSpec, root: &Path) -> Result<BenchmarkPaths> {
    if spec.train_domains.is_empty() {
        return Err(Error::Config("benchmark needs at least one training domain".into()));
    }
    let mut names: Vec<&str> = spec.train_domains.iter().map(String::as_str).collect();
    names.push(&spec.test_domain);
    let unique: std::collections::HashSet<_> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(Error::Config("benchmark domain names must be distinct".into()));
    }
    let cfg = SimulatorConfig::generate(&spec.params, SkeletonMap::synthetic(), &names, spec.world_seed)?;
    let paths = BenchmarkPaths::at(root);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    cfg.save(&paths.world)?;
    let d = spec.train_domains.len();
    let plan: Vec<(usize, usize)> = (0..d)
        .map(|i| (i, spec.train_size / d + usize::from(i < spec.train_size % d)))
        .collect();
    write_split(&cfg, &paths.train, &plan, spec.sample_seed)?;
    write_split(&cfg, &paths.test, &[(d, spec.test_size)], spec.sample_seed)?;
    Ok(paths)
}

/// Per-bone contributions of a batch of samples as `(B, K, C, L)`, read from
/// the truth sidecars next to a benchmark split.
pub fn truth_contributions(split_dir: &Path, ids: &[&str], dtype: DType) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    for id in ids {
        let (per_bone, offset, _) = read_truth(&BenchmarkPaths::truth(split_dir, id))?;
        let d = (per_bone.len(), offset.len());
        if *dims.get_or_insert(d) != d {
            return Err(Error::Validation(format!("truth sidecar for `{id}` has a different shape")));
        }
        data.extend(per_bone.iter().flatten().map(|&v| v as f64));
    }
    let (k, n) = dims.ok_or_else(|| Error::Validation("no ids".into()))?;
    tensor_from_f64(data, &[ids.len(), k, n], dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn world(noise: f64) -> SimulatorConfig {
        let mut p = SimulatorParams::toy(4, 8);
        p.noise = noise;
        p.jitter = 0.0;
        SimulatorConfig::generate(&p, SkeletonMap::synthetic(), &["A", "B"], 3).unwrap()
    }

    fn pose(seed: u64) -> Pose {
        sample_pose(&SkeletonMap::synthetic(), &mut rng_from_seed(seed))
    }

    #[test]
    fn sparse_projections_respect_regions() {
        let cfg = world(0.0);
        for k in 0..cfg.bone_count() {
            let w = cfg.projection(k);
            let nz = w.iter().filter(|&&v| v != 0.0).count();
            // region is 2x4 of a 4x8 signal, six weights per entry
            assert!(nz > 0 && nz <= 2 * 4 * 6, "bone {k}: {nz}");
        }
    }

    #[test]
    fn single_bone_without_offset_or_noise() {
        let w: Vec<f64> = (0..2 * 3 * 6).map(|i| i as f64 * 0.1 - 1.0).collect();
        let map = SkeletonMap::new(vec![(0, 1)], 2).unwrap();
        let cfg = SimulatorConfig::new(
            [2, 3],
            map,
            vec![w.clone()],
            vec![Domain { name: "A".into(), offset: vec![0.0; 6] }],
            0.0,
            0.0,
        )
        .unwrap();
        let p = Pose::new(vec![[0.1, 0.2, 0.3], [-0.4, 0.5, 0.6]]).unwrap();
        let sim = simulate_rf(&cfg, &p, 0, 9).unwrap();
        let h = [0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
        for (i, v) in sim.signal.iter().enumerate() {
            let want: f64 = (0..6).map(|j| w[i * 6 + j] * h[j]).sum();
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn domain_difference_is_offset_difference() {
        let cfg = world(0.0);
        let p = pose(1);
        let a = simulate_rf(&cfg, &p, 0, 5).unwrap();
        let b = simulate_rf(&cfg, &p, 1, 5).unwrap();
        for i in 0..a.signal.len() {
            let want = cfg.domains()[0].offset[i] - cfg.domains()[1].offset[i];
            assert_relative_eq!(a.signal[i] - b.signal[i], want, epsilon = 1e-12);
        }
        assert_ne!(cfg.domains()[0].offset, cfg.domains()[1].offset);
    }

    #[test]
    fn zeroing_a_bone_subtracts_its_contribution() {
        let cfg = world(0.3);
        let h = joints_to_skeleton(&pose(2), cfg.skeleton()).unwrap();
        let full = cfg.render(&h.flatten(), 0, 11).unwrap();
        for k in 0..cfg.bone_count() {
            let cut = crate::skeleton::manipulate_remove_bone(&h, k).unwrap();
            let removed = cfg.render(&cut.flatten(), 0, 11).unwrap();
            for i in 0..full.signal.len() {
                assert_relative_eq!(
                    full.signal[i] - full.contributions[k][i],
                    removed.signal[i],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = world(0.2);
        let p = pose(4);
        assert_eq!(simulate_rf(&cfg, &p, 0, 1).unwrap(), simulate_rf(&cfg, &p, 0, 1).unwrap());
        assert_ne!(simulate_rf(&cfg, &p, 0, 1).unwrap().noise, simulate_rf(&cfg, &p, 0, 2).unwrap().noise);
    }

    #[test]
    fn shape_inconsistencies_are_config_errors() {
        let cfg = world(0.0);
        let bad = Pose::new(vec![[0.0; 3]; 3]).unwrap();
        assert!(matches!(simulate_rf(&cfg, &bad, 0, 0), Err(Error::Config(_))));
        let map = SkeletonMap::new(vec![(0, 1)], 2).unwrap();
        assert!(matches!(
            SimulatorConfig::new([2, 2], map, vec![vec![0.0; 5]], vec![], 0.0, 0.0),
            Err(Error::Config(_))
        ));
        let mut p = SimulatorParams::toy(4, 8);
        p.noise = -1.0;
        assert!(matches!(
            SimulatorConfig::generate(&p, SkeletonMap::synthetic(), &["A"], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sampled_bones_have_fixed_length() {
        let map = SkeletonMap::synthetic();
        let p = pose(7);
        for &(a, b) in map.bones() {
            let d: f64 = (0..3).map(|i| (p.joints()[a][i] - p.joints()[b][i]).powi(2)).sum();
            assert_relative_eq!(d.sqrt(), 0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn benchmark_round_trip_and_reconstruction() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BenchmarkSpec::two_domain(SimulatorParams::toy(4, 8), 7, 3, 1);
        let paths = build_synthetic_benchmark(&spec, dir.path()).unwrap();
        let train = load_dataset(Source::Synthetic, &paths.train).unwrap();
        let test = load_dataset(Source::Synthetic, &paths.test).unwrap();
        assert_eq!((train.samples.len(), test.samples.len()), (7, 3));
        assert_eq!(train.samples.iter().filter(|s| s.environment == "A").count(), 4);
        assert!(test.samples.iter().all(|s| s.environment == "Z"));
        let world = SimulatorConfig::load(&paths.world).unwrap();
        assert_eq!(world.domains().len(), 3);
        for s in &train.samples {
            let (per_bone, offset, noise) = read_truth(&BenchmarkPaths::truth(&paths.train, &s.id)).unwrap();
            for i in 0..s.signal.len() {
                let sum: f64 = per_bone.iter().map(|c| c[i] as f64).sum();
                let rest = s.signal[i] as f64 - offset[i] as f64 - noise[i] as f64;
                assert_relative_eq!(sum, rest, epsilon = 1e-4);
            }
        }
        let ids: Vec<&str> = train.samples.iter().map(|s| s.id.as_str()).collect();
        let t = truth_contributions(&paths.train, &ids, DType::F64).unwrap();
        assert_eq!(t.dims(), &[7, 5, 32]);
    }

    #[test]
    fn stub_generator_matches_simulator() {
        let cfg = world(0.1);
        let p = pose(3);
        let h = joints_to_skeleton(&p, cfg.skeleton()).unwrap();
        let gen = SimulatorGenerator::new(cfg.clone(), 1).unwrap();
        let out = gen.generate(&h.to_tensor(DType::F64).unwrap(), &[42]).unwrap();
        assert_eq!(out.dims(), &[1, 4, 8]);
        assert_eq!(to_f64_vec(&out).unwrap(), simulate_rf(&cfg, &p, 1, 42).unwrap().signal);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn affine_in_skeleton_vectors(
            a in proptest::collection::vec(-1.0f64..1.0, 30),
            b in proptest::collection::vec(-1.0f64..1.0, 30),
            t in -2.0f64..2.0,
            seed in 0u64..100,
        ) {
            let cfg = world(0.2);
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
            let fa = cfg.render(&a, 0, seed).unwrap().signal;
            let fb = cfg.render(&b, 0, seed).unwrap().signal;
            let fm = cfg.render(&mix, 0, seed).unwrap().signal;
            for i in 0..fa.len() {
                prop_assert!((fm[i] - (t * fa[i] + (1.0 - t) * fb[i])).abs() < 1e-10);
            }
        }
    }
}
