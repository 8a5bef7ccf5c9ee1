//! Counterfactual synthesis and difference aggregation.
//!
//! For a skeleton `h` the frozen generator produces the full synthesis `x̂`
//! and one synthesis per zeroed bone. Differences `r_k = x̂ - x̄_k` remove any
//! condition-independent signal structure; a linear map over the bone axis
//! aggregates them into `r`.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::adversarial::Cgan;
use crate::diffusion::{DiffusionModel, Sampler};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, tensor_from_f32, to_f32_vec, ParamStore, Parameterized};
use crate::skeleton::{manipulate_remove_bone, skeleton_batch, ConditionEmbedder, SkeletonVectors};

/// A conditional signal generator driven by seeded noise.
pub trait SignalGenerator {
    /// Per-sample signal shape `[C, L]`.
    fn signal_shape(&self) -> [usize; 2];
    /// One signal per row of the embedded condition batch `c`.
    fn generate(&self, c: &Tensor, seeds: &[u64]) -> Result<Tensor>;
}

impl<T: SignalGenerator + ?Sized> SignalGenerator for &T {
    fn signal_shape(&self) -> [usize; 2] {
        (**self).signal_shape()
    }

    fn generate(&self, c: &Tensor, seeds: &[u64]) -> Result<Tensor> {
        (**self).generate(c, seeds)
    }
}

/// A diffusion model paired with the sampler used for synthesis.
pub struct DiffusionGenerator<'a> {
    pub model: &'a DiffusionModel,
    pub sampler: Sampler,
}

impl SignalGenerator for DiffusionGenerator<'_> {
    fn signal_shape(&self) -> [usize; 2] {
        self.model.config().signal_shape()
    }

    fn generate(&self, c: &Tensor, seeds: &[u64]) -> Result<Tensor> {
        self.model.sample(c, self.sampler, seeds)
    }
}

impl SignalGenerator for Cgan {
    fn signal_shape(&self) -> [usize; 2] {
        self.config().signal_shape()
    }

    fn generate(&self, c: &Tensor, seeds: &[u64]) -> Result<Tensor> {
        self.sample(c, seeds)
    }
}

/// Read-only view of a trained model whose parameters must not change while
/// it is in use.
pub struct Frozen<'a> {
    model: &'a dyn Parameterized,
    fingerprint: String,
}

impl<'a> Frozen<'a> {
    pub fn new(model: &'a dyn Parameterized) -> Result<Self> {
        Ok(Self {
            fingerprint: model.fingerprint()?,
            model,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Errors if any parameter changed since freezing.
    pub fn verify(&self) -> Result<()> {
        let now = self.model.fingerprint()?;
        if now != self.fingerprint {
            return Err(Error::Contract(format!(
                "frozen parameters were modified (fingerprint {} -> {now})",
                self.fingerprint
            )));
        }
        Ok(())
    }
}

/// Elementwise `x_full - x_removed`.
pub fn signal_difference(x_full: &Tensor, x_removed: &Tensor) -> Result<Tensor> {
    if x_full.dims() != x_removed.dims() {
        return Err(Error::Validation(format!(
            "difference of shapes {:?} and {:?}",
            x_full.dims(),
            x_removed.dims()
        )));
    }
    Ok((x_full - x_removed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoisePolicy {
    /// One noise draw shared by the full synthesis and every counterfactual.
    Shared,
    /// An independent draw per synthesis.
    Independent,
}

#[derive(Debug, Clone)]
pub struct CounterfactualSet {
    /// `(C, L)` synthesis under the complete skeleton.
    pub full: Tensor,
    /// `(K, C, L)`; row `k` is the synthesis with bone `k` removed.
    pub removed: Tensor,
    pub seed: u64,
}

impl CounterfactualSet {
    pub fn bone_count(&self) -> usize {
        self.removed.dim(0).unwrap_or(0)
    }

    /// `(K, C, L)` differences against the full synthesis.
    pub fn differences(&self) -> Result<Tensor> {
        let full = self.full.unsqueeze(0)?.broadcast_as(self.removed.dims())?;
        signal_difference(&full.contiguous()?, &self.removed)
    }

    /// `(K, C, L)` differences against an observed signal instead of `x̂`.
    pub fn differences_from(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims() != self.full.dims() {
            return Err(Error::Validation(format!(
                "observed signal {:?} vs synthesis {:?}",
                x.dims(),
                self.full.dims()
            )));
        }
        let full = x.unsqueeze(0)?.broadcast_as(self.removed.dims())?;
        signal_difference(&full.contiguous()?, &self.removed)
    }
}

fn row_seeds(seed: u64, count: usize, policy: NoisePolicy) -> Vec<u64> {
    match policy {
        NoisePolicy::Shared => vec![seed; count],
        NoisePolicy::Independent => (0..count)
            .map(|i| derive_seed(seed, &format!("synthesis{i}")))
            .collect(),
    }
}

/// The `K + 1` skeletons of one counterfactual set: `h` followed by `h`
/// with each bone removed in turn.
pub fn counterfactual_skeletons(h: &SkeletonVectors) -> Result<Vec<SkeletonVectors>> {
    if h.removed_mask().iter().any(|&m| m) {
        return Err(Error::Validation(
            "counterfactual synthesis needs a complete skeleton".into(),
        ));
    }
    let mut out = Vec::with_capacity(h.bone_count() + 1);
    out.push(h.clone());
    for k in 0..h.bone_count() {
        out.push(manipulate_remove_bone(h, k)?);
    }
    Ok(out)
}

/// Synthesizes `x̂` and the `K` single-bone counterfactuals for several
/// skeletons in one generator call.
pub fn synthesize_counterfactual_sets(
    gen: &dyn SignalGenerator,
    embedder: &dyn ConditionEmbedder,
    skeletons: &[SkeletonVectors],
    seeds: &[u64],
    policy: NoisePolicy,
    dtype: DType,
) -> Result<Vec<CounterfactualSet>> {
    if skeletons.len() != seeds.len() {
        return Err(Error::Validation("one seed per skeleton required".into()));
    }
    if skeletons.is_empty() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    let mut row_seed = Vec::new();
    for (h, &seed) in skeletons.iter().zip(seeds) {
        let set = counterfactual_skeletons(h)?;
        row_seed.extend(row_seeds(seed, set.len(), policy));
        rows.extend(set);
    }
    let c = embedder.embed(&skeleton_batch(&rows, dtype)?)?;
    let out = gen.generate(&c, &row_seed)?;
    let [ch, len] = gen.signal_shape();
    if out.dims() != [rows.len(), ch, len] {
        return Err(Error::Validation(format!(
            "generator returned {:?}, expected ({}, {ch}, {len})",
            out.dims(),
            rows.len()
        )));
    }
    let mut sets = Vec::with_capacity(skeletons.len());
    let mut offset = 0;
    for (h, &seed) in skeletons.iter().zip(seeds) {
        let k = h.bone_count();
        sets.push(CounterfactualSet {
            full: out.get(offset)?,
            removed: out.narrow(0, offset + 1, k)?,
            seed,
        });
        offset += k + 1;
    }
    Ok(sets)
}

pub fn synthesize_counterfactual_set(
    gen: &dyn SignalGenerator,
    embedder: &dyn ConditionEmbedder,
    h: &SkeletonVectors,
    seed: u64,
    policy: NoisePolicy,
    dtype: DType,
) -> Result<CounterfactualSet> {
    let mut sets = synthesize_counterfactual_sets(gen, embedder, std::slice::from_ref(h), &[seed], policy, dtype)?;
    Ok(sets.remove(0))
}

/// Learnable linear map over the stacked bone axis: `r = sum_k w_k r_k + b`.
pub struct Aggregator {
    vars: VarMap,
    weight: Tensor,
    bias: Tensor,
}

impl Aggregator {
    /// Starts as the per-bone average (`w_k = 1/K`, `b = 0`).
    pub fn new(bone_count: usize, dtype: DType) -> Result<Self> {
        let mut ps = ParamStore::new(0, dtype);
        let this = Self::build(&mut ps, "aggregator", bone_count)?;
        Ok(Self {
            vars: ps.into_varmap(),
            ..this
        })
    }

    /// Registers the aggregator's parameters in a shared store.
    pub fn build(ps: &mut ParamStore, name: &str, bone_count: usize) -> Result<Self> {
        if bone_count == 0 {
            return Err(Error::Config("aggregator needs K > 0".into()));
        }
        let weight = ps.constant(&format!("{name}.weight"), &[bone_count], 1.0 / bone_count as f64)?;
        let bias = ps.zeros(&format!("{name}.bias"), &[1])?;
        Ok(Self {
            vars: VarMap::new(),
            weight,
            bias,
        })
    }

    pub fn bone_count(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// `(B, K, C, L) -> (B, C, L)`.
    pub fn forward(&self, per_bone: &Tensor) -> Result<Tensor> {
        let (b, k, c, l) = per_bone.dims4()?;
        if k != self.bone_count() {
            return Err(Error::Validation(format!(
                "aggregator has {} weights, got {k} differences",
                self.bone_count()
            )));
        }
        let flat = per_bone.reshape((b, k, c * l))?.transpose(1, 2)?;
        let r = flat.broadcast_matmul(&self.weight.reshape((k, 1))?)?;
        Ok(r.broadcast_add(&self.bias)?.reshape((b, c, l))?)
    }
}

impl Parameterized for Aggregator {
    fn varmap(&self) -> &VarMap {
        &self.vars
    }
}

#[derive(Debug, Clone)]
pub struct AggregatedRepresentation {
    /// `(K, C, L)`.
    pub per_bone: Tensor,
    /// `(C, L)`.
    pub aggregate: Tensor,
}

/// Stacks `K` equally shaped differences and applies the aggregator.
pub fn aggregate_differences(per_bone: &[Tensor], agg: &Aggregator) -> Result<AggregatedRepresentation> {
    let first = per_bone
        .first()
        .ok_or_else(|| Error::Validation("no differences to aggregate".into()))?;
    if per_bone.iter().any(|t| t.dims() != first.dims()) || first.rank() != 2 {
        return Err(Error::Validation("differences must share one (C, L) shape".into()));
    }
    let stacked = Tensor::stack(per_bone, 0)?;
    let aggregate = agg.forward(&stacked.unsqueeze(0)?)?.squeeze(0)?;
    Ok(AggregatedRepresentation {
        per_bone: stacked,
        aggregate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DifferenceBase {
    /// `r_k = x̂ - x̄_k`.
    Synthesized,
    /// `r_k = x - x̄_k` with the observed signal.
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPolicy {
    pub seed: u64,
    pub noise: NoisePolicy,
    pub base: DifferenceBase,
}

impl SeedPolicy {
    pub fn sample_seed(&self, sample_id: &str) -> u64 {
        derive_seed(self.seed, sample_id)
    }
}

/// One training sample's input to target construction.
pub struct TargetInput<'a> {
    pub id: &'a str,
    pub skeleton: &'a SkeletonVectors,
    /// `(C, L)`; required for [`DifferenceBase::Observed`].
    pub signal: Option<&'a Tensor>,
}

/// Per-sample per-bone differences for a training split, tagged with the
/// generator and configuration they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStore {
    pub generator_fingerprint: String,
    pub config_hash: String,
    pub policy: SeedPolicy,
    /// `[K, C, L]`.
    pub shape: [usize; 3],
    pub ids: Vec<String>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

const STORE_MAGIC: &[u8; 8] = b"CFTSTOR1";

impl TargetStore {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn per_sample(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    /// `(K, C, L)` differences of sample `i`.
    pub fn differences(&self, i: usize, dtype: DType) -> Result<Tensor> {
        if i >= self.len() {
            return Err(Error::Index {
                what: "target store sample",
                index: i,
                len: self.len(),
            });
        }
        let n = self.per_sample();
        tensor_from_f32(self.data[i * n..(i + 1) * n].to_vec(), &self.shape, dtype)
    }

    /// `(B, K, C, L)` differences for the given samples.
    pub fn batch(&self, rows: &[usize], dtype: DType) -> Result<Tensor> {
        let n = self.per_sample();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &i in rows {
            if i >= self.len() {
                return Err(Error::Index {
                    what: "target store sample",
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        let [k, c, l] = self.shape;
        tensor_from_f32(data, &[rows.len(), k, c, l], dtype)
    }

    /// Errors unless the store was built from the expected generator and
    /// configuration.
    pub fn check_provenance(&self, generator_fingerprint: &str, config_hash: &str) -> Result<()> {
        if self.generator_fingerprint != generator_fingerprint || self.config_hash != config_hash {
            return Err(Error::Dependency(format!(
                "target store was built for generator {} / config {}, expected {generator_fingerprint} / {config_hash}",
                self.generator_fingerprint, self.config_hash
            )));
        }
        Ok(())
    }

    /// Layout: magic, little-endian u64 header length, JSON header, then the
    /// little-endian f32 payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(self).map_err(|e| Error::Validation(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + header.len() + 4 * self.data.len());
        buf.extend_from_slice(STORE_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Dependency(format!("target store {} not found", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let parse = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: msg.to_string(),
        };
        if buf.len() < 16 || &buf[..8] != STORE_MAGIC {
            return Err(parse("not a target store"));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
        let header = buf.get(16..16 + hlen).ok_or_else(|| parse("truncated header"))?;
        let mut store: TargetStore =
            serde_json::from_slice(header).map_err(|e| parse(&e.to_string()))?;
        let payload = &buf[16 + hlen..];
        let expected = store.len() * store.per_sample() * 4;
        if payload.len() != expected {
            return Err(parse(&format!("payload has {} bytes, expected {expected}", payload.len())));
        }
        store.data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(store)
    }
}

/// Synthesizes counterfactual differences for every sample, `chunk` samples
/// per generator call. Fails with a contract error if the frozen model's
/// parameters change during the run.
#[allow(clippy::too_many_arguments)]
pub fn build_regularization_targets(
    gen: &dyn SignalGenerator,
    embedder: &dyn ConditionEmbedder,
    frozen: &Frozen<'_>,
    samples: &[TargetInput<'_>],
    policy: SeedPolicy,
    config_hash: &str,
    chunk: usize,
    dtype: DType,
) -> Result<TargetStore> {
    frozen.verify()?;
    let [c, l] = gen.signal_shape();
    let k = samples.first().map(|s| s.skeleton.bone_count()).unwrap_or(0);
    let mut store = TargetStore {
        generator_fingerprint: frozen.fingerprint().to_string(),
        config_hash: config_hash.to_string(),
        policy,
        shape: [k, c, l],
        ids: Vec::with_capacity(samples.len()),
        data: Vec::with_capacity(samples.len() * k * c * l),
    };
    for part in samples.chunks(chunk.max(1)) {
        let skeletons: Vec<SkeletonVectors> = part.iter().map(|s| s.skeleton.clone()).collect();
        if skeletons.iter().any(|h| h.bone_count() != k) {
            return Err(Error::Validation("samples disagree on bone count".into()));
        }
        let seeds: Vec<u64> = part.iter().map(|s| policy.sample_seed(s.id)).collect();
        let sets = synthesize_counterfactual_sets(gen, embedder, &skeletons, &seeds, policy.noise, dtype)?;
        for (s, set) in part.iter().zip(sets) {
            let diffs = match policy.base {
                DifferenceBase::Synthesized => set.differences()?,
                DifferenceBase::Observed => {
                    let x = s.signal.ok_or_else(|| {
                        Error::Validation(format!("sample {} has no observed signal", s.id))
                    })?;
                    set.differences_from(&x.to_dtype(set.full.dtype())?)?
                }
            };
            store.ids.push(s.id.to_string());
            store.data.extend(to_f32_vec(&diffs)?);
        }
        frozen.verify()?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_vec, rng_from_seed, set_param, tensor_from_f64, to_f64_vec};
    use crate::skeleton::{joints_to_skeleton, IdentityEmbedder, Pose, SkeletonMap};
    use approx::assert_relative_eq;

    /// `g(z, c) = c` reshaped to `(1, 6K)` plus a condition-independent offset.
    struct EchoGenerator {
        width: usize,
        offset: f64,
    }

    impl SignalGenerator for EchoGenerator {
        fn signal_shape(&self) -> [usize; 2] {
            [1, self.width]
        }

        fn generate(&self, c: &Tensor, _: &[u64]) -> Result<Tensor> {
            Ok((c.unsqueeze(1)? + self.offset)?)
        }
    }

    fn skeleton(seed: u64, map: &SkeletonMap) -> SkeletonVectors {
        let mut rng = rng_from_seed(seed);
        let pose = Pose::from_flat(&gaussian_vec(&mut rng, 3 * map.joint_count())).unwrap();
        joints_to_skeleton(&pose, map).unwrap()
    }

    #[test]
    fn difference_algebra() {
        let a = tensor_from_f64(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], DType::F64).unwrap();
        let b = tensor_from_f64(vec![0.5, -2.0, 1.0, 8.0], &[2, 2], DType::F64).unwrap();
        assert_eq!(to_f64_vec(&signal_difference(&a, &a).unwrap()).unwrap(), vec![0.0; 4]);
        let ab = to_f64_vec(&signal_difference(&a, &b).unwrap()).unwrap();
        let ba = to_f64_vec(&signal_difference(&b, &a).unwrap()).unwrap();
        assert!(ab.iter().zip(&ba).all(|(x, y)| *x == -*y));
        assert!(signal_difference(&a, &a.reshape(4).unwrap()).is_err());
    }

    #[test]
    fn removing_a_bone_changes_only_its_coordinates() {
        let map = SkeletonMap::synthetic();
        let k = map.bone_count();
        let h = skeleton(1, &map);
        let gen = EchoGenerator { width: 6 * k, offset: 3.5 };
        let set = synthesize_counterfactual_set(&gen, &IdentityEmbedder::new(k), &h, 9, NoisePolicy::Shared, DType::F64).unwrap();
        assert_eq!(set.bone_count(), k);
        let full = to_f64_vec(&set.full).unwrap();
        let flat = h.flatten();
        for bone in 0..k {
            let diff = to_f64_vec(&set.differences().unwrap().get(bone).unwrap()).unwrap();
            for (i, d) in diff.iter().enumerate() {
                if i / 6 == bone {
                    assert_eq!(*d, full[i] - 3.5);
                    assert_relative_eq!(*d, flat[i], epsilon = 1e-14);
                } else {
                    assert_eq!(*d, 0.0);
                }
            }
        }
    }

    #[test]
    fn single_bone_set_has_two_signals() {
        let map = SkeletonMap::new(vec![(0, 1)], 2).unwrap();
        let h = skeleton(2, &map);
        let gen = EchoGenerator { width: 6, offset: 0.0 };
        let set = synthesize_counterfactual_set(&gen, &IdentityEmbedder::new(1), &h, 0, NoisePolicy::Shared, DType::F64).unwrap();
        assert_eq!(set.removed.dims(), &[1, 1, 6]);
        assert_eq!(to_f64_vec(&set.removed).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn incomplete_skeleton_is_rejected() {
        let map = SkeletonMap::synthetic();
        let h = manipulate_remove_bone(&skeleton(3, &map), 1).unwrap();
        let gen = EchoGenerator { width: 30, offset: 0.0 };
        assert!(synthesize_counterfactual_set(&gen, &IdentityEmbedder::new(5), &h, 0, NoisePolicy::Shared, DType::F64).is_err());
    }

    #[test]
    fn aggregator_arithmetic() {
        let agg = Aggregator::new(3, DType::F64).unwrap();
        set_param(agg.varmap(), "aggregator.weight", &Tensor::ones(3, DType::F64, &candle_core::Device::Cpu).unwrap()).unwrap();
        let v = tensor_from_f64(vec![1.0, -2.0, 0.5, 4.0], &[2, 2], DType::F64).unwrap();
        let rep = aggregate_differences(&[v.clone(), v.clone(), v.clone()], &agg).unwrap();
        assert_eq!(to_f64_vec(&rep.aggregate).unwrap(), vec![3.0, -6.0, 1.5, 12.0]);
        assert!(aggregate_differences(&[], &agg).is_err());
        assert!(aggregate_differences(&[v.clone(), v.reshape(4).unwrap(), v], &agg).is_err());
    }

    #[test]
    fn default_aggregator_averages() {
        let agg = Aggregator::new(4, DType::F64).unwrap();
        let mut rng = rng_from_seed(5);
        let parts: Vec<Tensor> = (0..4)
            .map(|_| tensor_from_f64(gaussian_vec(&mut rng, 6), &[2, 3], DType::F64).unwrap())
            .collect();
        let rep = aggregate_differences(&parts, &agg).unwrap();
        let vals: Vec<Vec<f64>> = parts.iter().map(|p| to_f64_vec(p).unwrap()).collect();
        for (i, r) in to_f64_vec(&rep.aggregate).unwrap().iter().enumerate() {
            let mean = vals.iter().map(|v| v[i]).sum::<f64>() / 4.0;
            assert_relative_eq!(*r, mean, epsilon = 1e-14);
        }
    }

    #[test]
    fn frozen_detects_mutation() {
        let agg = Aggregator::new(2, DType::F64).unwrap();
        let frozen = Frozen::new(&agg).unwrap();
        frozen.verify().unwrap();
        set_param(agg.varmap(), "aggregator.bias", &tensor_from_f64(vec![1.0], &[1], DType::F64).unwrap()).unwrap();
        assert!(matches!(frozen.verify(), Err(Error::Contract(_))));
    }

    #[test]
    fn store_round_trip_and_determinism() {
        let map = SkeletonMap::synthetic();
        let hs: Vec<SkeletonVectors> = (0..3).map(|i| skeleton(10 + i, &map)).collect();
        let ids = ["a", "b", "c"];
        let inputs: Vec<TargetInput> = ids
            .iter()
            .zip(&hs)
            .map(|(id, h)| TargetInput { id, skeleton: h, signal: None })
            .collect();
        let gen = EchoGenerator { width: 30, offset: 1.0 };
        let anchor = Aggregator::new(1, DType::F64).unwrap();
        let frozen = Frozen::new(&anchor).unwrap();
        let policy = SeedPolicy { seed: 4, noise: NoisePolicy::Shared, base: DifferenceBase::Synthesized };
        let emb = IdentityEmbedder::new(5);
        let store = build_regularization_targets(&gen, &emb, &frozen, &inputs, policy, "cfg", 2, DType::F64).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.batch(&[0, 2], DType::F64).unwrap().dims(), &[2, 5, 1, 30]);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        store.save(&p1).unwrap();
        build_regularization_targets(&gen, &emb, &frozen, &inputs, policy, "cfg", 1, DType::F64)
            .unwrap()
            .save(&p2)
            .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = TargetStore::load(&p1).unwrap();
        assert_eq!(back, store);
        back.check_provenance(frozen.fingerprint(), "cfg").unwrap();
        assert!(matches!(back.check_provenance(frozen.fingerprint(), "other"), Err(Error::Dependency(_))));
        assert!(matches!(TargetStore::load(&dir.path().join("missing")), Err(Error::Dependency(_))));
        let empty = build_regularization_targets(&gen, &emb, &frozen, &[], policy, "cfg", 2, DType::F64).unwrap();
        assert!(empty.is_empty());
    }
}
