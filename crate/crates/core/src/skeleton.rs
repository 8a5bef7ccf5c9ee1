//! Joint labels in bone form: skeleton maps, skeleton vectors, per-bone
//! counterfactual removal, and the perceptron that embeds skeletons into the
//! generators' condition space.

use std::collections::HashSet;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::VarMap;

use crate::error::{Error, Result};
use crate::nn::{tensor_from_f64, Linear, ParamStore, Parameterized};

pub const WIFI_SKELETON: &str = include_str!("../data/skeletons/wifi14_v1.txt");
pub const UWB_SKELETON: &str = include_str!("../data/skeletons/uwb19_v1.txt");
pub const MMWAVE_SKELETON: &str = include_str!("../data/skeletons/mmwave17_v1.txt");
pub const SYNTHETIC_SKELETON: &str = include_str!("../data/skeletons/synthetic6_v1.txt");

/// Bones as `(parent, child)` joint-index pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonMap {
    bones: Vec<(usize, usize)>,
    joint_count: usize,
}

impl SkeletonMap {
    pub fn new(bones: Vec<(usize, usize)>, joint_count: usize) -> Result<Self> {
        if bones.is_empty() {
            return Err(Error::Validation("skeleton map has no bones".into()));
        }
        let mut seen = HashSet::new();
        for &(a, b) in &bones {
            if a >= joint_count || b >= joint_count {
                return Err(Error::Validation(format!(
                    "bone ({a}, {b}) references a joint outside 0..{joint_count}"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("bone ({a}, {b}) is a self-loop")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Validation(format!("duplicate bone ({a}, {b})")));
            }
        }
        if !bones_connected(&bones, joint_count) {
            return Err(Error::Validation(
                "skeleton map is not a single connected component".into(),
            ));
        }
        Ok(Self { bones, joint_count })
    }

    /// Parses the text format: one `parent child` pair per line, `#` starts a
    /// comment. The joint count defaults to the largest index plus one.
    pub fn parse(text: &str, joint_count: Option<usize>) -> Result<Self> {
        Self::parse_named(text, joint_count, Path::new("<skeleton>"))
    }

    fn parse_named(text: &str, joint_count: Option<usize>, path: &Path) -> Result<Self> {
        let mut bones = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(parse_err(format!("expected `parent child`, got `{line}`")));
            }
            let a = fields[0]
                .parse::<usize>()
                .map_err(|e| parse_err(format!("bad joint index `{}`: {e}", fields[0])))?;
            let b = fields[1]
                .parse::<usize>()
                .map_err(|e| parse_err(format!("bad joint index `{}`: {e}", fields[1])))?;
            bones.push((a, b));
        }
        let max_idx = bones.iter().map(|&(a, b)| a.max(b)).max();
        let n = match (joint_count, max_idx) {
            (Some(n), _) => n,
            (None, Some(m)) => m + 1,
            (None, None) => 0,
        };
        Self::new(bones, n)
    }

    pub fn load(path: &Path, joint_count: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_named(&text, joint_count, path)
    }

    pub fn wifi() -> Self {
        Self::parse(WIFI_SKELETON, Some(14)).expect("bundled WiFi skeleton is valid")
    }

    pub fn uwb() -> Self {
        Self::parse(UWB_SKELETON, Some(19)).expect("bundled UWB skeleton is valid")
    }

    pub fn mmwave() -> Self {
        Self::parse(MMWAVE_SKELETON, Some(17)).expect("bundled mmWave skeleton is valid")
    }

    pub fn synthetic() -> Self {
        Self::parse(SYNTHETIC_SKELETON, Some(6)).expect("bundled synthetic skeleton is valid")
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# cfpose skeleton map v1\n");
        for (a, b) in &self.bones {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }
}

fn bones_connected(bones: &[(usize, usize)], joint_count: usize) -> bool {
    let mut parent: Vec<usize> = (0..joint_count).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in bones {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let touched: HashSet<usize> = bones.iter().flat_map(|&(a, b)| [a, b]).collect();
    let roots: HashSet<usize> = touched.iter().map(|&j| find(&mut parent, j)).collect();
    roots.len() <= 1
}

/// Joint coordinates in meters, one `[x, y, z]` row per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    joints: Vec<[f64; 3]>,
}

impl Pose {
    pub fn new(joints: Vec<[f64; 3]>) -> Result<Self> {
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose contains non-finite coordinates".into()));
        }
        Ok(Self { joints })
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::Validation(format!(
                "pose needs a multiple of 3 values, got {}",
                values.len()
            )));
        }
        Self::new(values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }
}

/// `K x 2 x 3` bone endpoint tensor with the counterfactual removal mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonVectors {
    vectors: Vec<[[f64; 3]; 2]>,
    removed_mask: Vec<bool>,
}

impl SkeletonVectors {
    pub fn vectors(&self) -> &[[[f64; 3]; 2]] {
        &self.vectors
    }

    pub fn removed_mask(&self) -> &[bool] {
        &self.removed_mask
    }

    pub fn bone_count(&self) -> usize {
        self.vectors.len()
    }

    /// Row-major flattening: bone, endpoint, coordinate. Width `6K`.
    pub fn flatten(&self) -> Vec<f64> {
        self.vectors.iter().flatten().flatten().copied().collect()
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        tensor_from_f64(self.flatten(), &[1, 6 * self.bone_count()], dtype)
    }
}

/// Stacks skeletons into a `(batch, 6K)` condition-input tensor.
pub fn skeleton_batch(skeletons: &[SkeletonVectors], dtype: DType) -> Result<Tensor> {
    let k = skeletons
        .first()
        .map(|s| s.bone_count())
        .ok_or_else(|| Error::Validation("empty skeleton batch".into()))?;
    if skeletons.iter().any(|s| s.bone_count() != k) {
        return Err(Error::Validation("skeleton batch has ragged bone counts".into()));
    }
    let data: Vec<f64> = skeletons.iter().flat_map(|s| s.flatten()).collect();
    tensor_from_f64(data, &[skeletons.len(), 6 * k], dtype)
}

pub fn joints_to_skeleton(pose: &Pose, map: &SkeletonMap) -> Result<SkeletonVectors> {
    if pose.joint_count() != map.joint_count() {
        return Err(Error::MapMismatch(format!(
            "pose has {} joints, skeleton map expects {}",
            pose.joint_count(),
            map.joint_count()
        )));
    }
    let vectors = map
        .bones()
        .iter()
        .map(|&(a, b)| [pose.joints()[a], pose.joints()[b]])
        .collect::<Vec<_>>();
    let removed_mask = vec![false; vectors.len()];
    Ok(SkeletonVectors {
        vectors,
        removed_mask,
    })
}

/// Zero-fills bone `k`; the input is left untouched.
pub fn manipulate_remove_bone(h: &SkeletonVectors, k: usize) -> Result<SkeletonVectors> {
    if k >= h.bone_count() {
        return Err(Error::Index {
            what: "bone",
            index: k,
            len: h.bone_count(),
        });
    }
    let mut out = h.clone();
    out.vectors[k] = [[0.0; 3]; 2];
    out.removed_mask[k] = true;
    Ok(out)
}

/// Maps flattened skeleton vectors `(batch, 6K)` to condition vectors.
pub trait ConditionEmbedder {
    fn input_width(&self) -> usize;
    fn output_width(&self) -> usize;
    fn embed(&self, flat: &Tensor) -> Result<Tensor>;

    fn check_input(&self, flat: &Tensor) -> Result<()> {
        let (_, w) = flat.dims2()?;
        if w != self.input_width() {
            return Err(Error::Config(format!(
                "embedder expects width {}, got {w}",
                self.input_width()
            )));
        }
        Ok(())
    }
}

/// Two linear layers, each followed by SiLU.
pub struct SkeletonEmbedder {
    /// Empty when the embedder was registered in a shared store.
    vars: VarMap,
    dtype: DType,
    fc1: Linear,
    fc2: Linear,
}

impl SkeletonEmbedder {
    pub fn new(bone_count: usize, width: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut ps = ParamStore::new(seed, dtype);
        let this = Self::build(&mut ps, "embedder", bone_count, width)?;
        Ok(Self {
            vars: ps.into_varmap(),
            ..this
        })
    }

    /// Registers the embedder's parameters in a shared store.
    pub fn build(ps: &mut ParamStore, name: &str, bone_count: usize, width: usize) -> Result<Self> {
        if bone_count == 0 || width == 0 {
            return Err(Error::Config("embedder needs K > 0 and width > 0".into()));
        }
        Ok(Self {
            vars: VarMap::new(),
            dtype: ps.dtype(),
            fc1: Linear::new(ps, &format!("{name}.fc1"), 6 * bone_count, width)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), width, width)?,
        })
    }

    pub fn embed_skeleton(&self, h: &SkeletonVectors) -> Result<Tensor> {
        self.embed(&h.to_tensor(self.dtype)?)
    }
}

impl ConditionEmbedder for SkeletonEmbedder {
    fn input_width(&self) -> usize {
        self.fc1.in_dim()
    }

    fn output_width(&self) -> usize {
        self.fc2.out_dim()
    }

    fn embed(&self, flat: &Tensor) -> Result<Tensor> {
        self.check_input(flat)?;
        let h = self.fc1.forward(flat)?.silu()?;
        Ok(self.fc2.forward(&h)?.silu()?)
    }
}

impl Parameterized for SkeletonEmbedder {
    fn varmap(&self) -> &VarMap {
        &self.vars
    }
}

/// Passes flattened skeleton vectors through unchanged (conditioning on raw
/// bone coordinates, without a learned embedding).
#[derive(Debug, Clone, Copy)]
pub struct IdentityEmbedder {
    width: usize,
}

impl IdentityEmbedder {
    pub fn new(bone_count: usize) -> Self {
        Self {
            width: 6 * bone_count,
        }
    }
}

impl ConditionEmbedder for IdentityEmbedder {
    fn input_width(&self) -> usize {
        self.width
    }

    fn output_width(&self) -> usize {
        self.width
    }

    fn embed(&self, flat: &Tensor) -> Result<Tensor> {
        self.check_input(flat)?;
        Ok(flat.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{rng_from_seed, set_param, to_f64_vec, zero_all};
    use proptest::prelude::*;
    use rand::Rng;

    fn pose(rows: &[[f64; 3]]) -> Pose {
        Pose::new(rows.to_vec()).unwrap()
    }

    #[test]
    fn single_bone_identity() {
        let map = SkeletonMap::new(vec![(0, 1)], 2).unwrap();
        let h = joints_to_skeleton(&pose(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), &map).unwrap();
        assert_eq!(h.vectors(), &[[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]]);
        assert_eq!(h.removed_mask(), &[false]);
    }

    #[test]
    fn bundled_maps_have_documented_sizes() {
        let cases = [
            (SkeletonMap::wifi(), 14, 13),
            (SkeletonMap::uwb(), 19, 18),
            (SkeletonMap::mmwave(), 17, 16),
            (SkeletonMap::synthetic(), 6, 5),
        ];
        for (map, n, k) in cases {
            assert_eq!(map.joint_count(), n);
            assert_eq!(map.bone_count(), k);
        }
        let p = Pose::new(vec![[0.1, 0.2, 0.3]; 14]).unwrap();
        let h = joints_to_skeleton(&p, &SkeletonMap::wifi()).unwrap();
        assert_eq!(h.flatten().len(), 13 * 2 * 3);
    }

    #[test]
    fn map_validation() {
        assert!(SkeletonMap::new(vec![(0, 2)], 2).is_err());
        assert!(SkeletonMap::new(vec![(1, 1)], 2).is_err());
        assert!(SkeletonMap::new(vec![(0, 1), (1, 0)], 2).is_err());
        assert!(SkeletonMap::new(vec![(0, 1), (2, 3)], 4).is_err());
        assert!(SkeletonMap::parse("0 1\n1 x\n", None).is_err());
        let m = SkeletonMap::parse("# c\n0 1 # tail\n\n1 2\n", None).unwrap();
        assert_eq!(m.joint_count(), 3);
        assert_eq!(SkeletonMap::parse(&m.to_text(), None).unwrap(), m);
    }

    #[test]
    fn pose_mismatch_and_nonfinite() {
        let map = SkeletonMap::new(vec![(0, 1)], 2).unwrap();
        let p = pose(&[[0.0; 3]; 3]);
        assert!(matches!(joints_to_skeleton(&p, &map), Err(Error::MapMismatch(_))));
        assert!(Pose::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn removal_examples() {
        let map = SkeletonMap::new(vec![(0, 1)], 2).unwrap();
        let h = joints_to_skeleton(&pose(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), &map).unwrap();
        let r = manipulate_remove_bone(&h, 0).unwrap();
        assert_eq!(r.vectors(), &[[[0.0; 3]; 2]]);
        assert_eq!(r.removed_mask(), &[true]);
        assert!(matches!(
            manipulate_remove_bone(&h, 1),
            Err(Error::Index { .. })
        ));

        let map3 = SkeletonMap::new(vec![(0, 1), (1, 2), (2, 3)], 4).unwrap();
        let p = pose(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 1.0, 0.0], [4.0, 1.0, 1.0]]);
        let h3 = joints_to_skeleton(&p, &map3).unwrap();
        let r3 = manipulate_remove_bone(&h3, 1).unwrap();
        assert_eq!(r3.vectors()[0], h3.vectors()[0]);
        assert_eq!(r3.vectors()[2], h3.vectors()[2]);
        assert_eq!(r3.vectors()[1], [[0.0; 3]; 2]);
        assert_eq!(manipulate_remove_bone(&r3, 1).unwrap(), r3);
        // input untouched
        assert_eq!(h3.removed_mask(), &[false, false, false]);
    }

    #[test]
    fn zero_embedder_outputs_silu_of_bias_chain() {
        let emb = SkeletonEmbedder::new(2, 4, 0, DType::F64).unwrap();
        zero_all(emb.varmap()).unwrap();
        let b1 = [0.5, -1.0, 2.0, 0.0];
        let b2 = [1.0, 0.25, -0.5, 3.0];
        set_param(emb.varmap(), "embedder.fc1.bias", &Tensor::new(&b1, &candle_core::Device::Cpu).unwrap()).unwrap();
        set_param(emb.varmap(), "embedder.fc2.bias", &Tensor::new(&b2, &candle_core::Device::Cpu).unwrap()).unwrap();
        let zero = Tensor::zeros((1, 12), DType::F64, &candle_core::Device::Cpu).unwrap();
        let out = to_f64_vec(&emb.embed(&zero).unwrap()).unwrap();
        let silu = |x: f64| x / (1.0 + (-x).exp());
        // second layer weights are zero, so only its bias survives
        for (o, b) in out.iter().zip(b2) {
            assert!((o - silu(b)).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_width_is_fixed_and_removed_bone_is_invisible() {
        let map = SkeletonMap::synthetic();
        let emb = SkeletonEmbedder::new(map.bone_count(), 16, 3, DType::F64).unwrap();
        let mut rng = rng_from_seed(4);
        let mut rows: Vec<[f64; 3]> = (0..6).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let a = joints_to_skeleton(&Pose::new(rows.clone()).unwrap(), &map).unwrap();
        // joint 3 only touches bone 2
        rows[3] = [9.0, -9.0, 4.0];
        let b = joints_to_skeleton(&Pose::new(rows).unwrap(), &map).unwrap();
        let ea = emb.embed_skeleton(&manipulate_remove_bone(&a, 2).unwrap()).unwrap();
        let eb = emb.embed_skeleton(&manipulate_remove_bone(&b, 2).unwrap()).unwrap();
        assert_eq!(ea.dims(), &[1, 16]);
        assert_eq!(to_f64_vec(&ea).unwrap(), to_f64_vec(&eb).unwrap());
        assert_eq!(emb.embed_skeleton(&a).unwrap().dims(), ea.dims());
    }

    #[test]
    fn embedder_rejects_wrong_width() {
        let emb = SkeletonEmbedder::new(2, 4, 0, DType::F64).unwrap();
        let x = Tensor::zeros((1, 6), DType::F64, &candle_core::Device::Cpu).unwrap();
        assert!(matches!(emb.embed(&x), Err(Error::Config(_))));
    }

    fn random_tree(n: usize, seed: u64) -> SkeletonMap {
        let mut rng = rng_from_seed(seed);
        let bones = (1..n).map(|c| (rng.random_range(0..c), c)).collect();
        SkeletonMap::new(bones, n).unwrap()
    }

    proptest! {
        #[test]
        fn gather_matches_index_loop(n in 2usize..20, seed in 0u64..1000) {
            let map = random_tree(n, seed);
            let mut rng = rng_from_seed(seed + 1);
            let rows: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let h = joints_to_skeleton(&Pose::new(rows.clone()).unwrap(), &map).unwrap();
            let flat = h.flatten();
            let mut idx = 0;
            for &(a, b) in map.bones() {
                for joint in [a, b] {
                    for j in 0..3 {
                        prop_assert_eq!(flat[idx], rows[joint][j]);
                        idx += 1;
                    }
                }
            }
            // every touched joint is recoverable from some endpoint
            for (k, &(a, b)) in map.bones().iter().enumerate() {
                prop_assert_eq!(h.vectors()[k][0], rows[a]);
                prop_assert_eq!(h.vectors()[k][1], rows[b]);
            }
        }

        #[test]
        fn removal_is_local(n in 2usize..12, seed in 0u64..1000, pick in 0usize..64) {
            let map = random_tree(n, seed);
            let mut rng = rng_from_seed(seed);
            let rows: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let h = joints_to_skeleton(&Pose::new(rows).unwrap(), &map).unwrap();
            let k = pick % map.bone_count();
            let r = manipulate_remove_bone(&h, k).unwrap();
            for i in 0..map.bone_count() {
                if i == k {
                    prop_assert_eq!(r.vectors()[i], [[0.0; 3]; 2]);
                    prop_assert!(r.removed_mask()[i]);
                } else {
                    prop_assert_eq!(r.vectors()[i], h.vectors()[i]);
                    prop_assert!(!r.removed_mask()[i]);
                }
            }
        }
    }
}
