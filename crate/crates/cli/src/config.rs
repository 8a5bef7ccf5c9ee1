//! Run configuration: a flat `section.key = value` file overridden by flags.
//! Inside a `[section]` block, dotted keys stay fully qualified.
//!
//! Every key has a default, a flag (`section.key` becomes `--section-key`)
//! and belongs to one section. Each pipeline stage hashes the sections it
//! depends on; `paths.*` never enters a hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cfpose_core::counterfactual::{DifferenceBase, NoisePolicy};
use cfpose_core::data::{Source, SplitMode};
use cfpose_core::{Error, Result};
use sha2::{Digest, Sha256};

pub const DATA_ROOT_ENV: &str = "CFPOSE_DATA_ROOT";

/// `(key, default, help)`. An empty default means unset.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("paths.data", "", "dataset root (default: $CFPOSE_DATA_ROOT, else ./data)"),
    ("paths.out", "runs/default", "directory for artifacts of this run"),
    ("data.source", "synthetic", "wifi | uwb | mmwave | synthetic"),
    ("data.skeleton", "", "skeleton map file overriding the bundled topology"),
    ("data.split", "random", "random | cross-subject | cross-environment"),
    ("data.held_out", "", "comma-separated held-out subjects or environments"),
    ("data.split_seed", "0", "seed for splits and held-out selection"),
    ("data.normalize", "true", "per-channel standardization fitted on train"),
    ("data.epsilon", "1e-6", "standard deviation floor"),
    ("gen.model", "ddpm", "ddpm | ddim | cgan"),
    ("gen.size", "full", "full | toy architecture"),
    ("gen.embed_width", "128", "skeleton embedding width"),
    ("gen.steps", "1000", "diffusion steps T"),
    ("gen.beta_min", "1e-5", "first beta of the linear schedule"),
    ("gen.beta_max", "1e-1", "last beta of the linear schedule"),
    ("gen.ddim_steps", "100", "DDIM synthesis steps T_S"),
    ("gen.eta", "0", "DDIM variance factor"),
    ("gen.lr", "1e-4", "diffusion learning rate"),
    ("gen.lr_gen", "2e-4", "CGAN generator learning rate"),
    ("gen.lr_disc", "1e-4", "CGAN discriminator learning rate"),
    ("gen.n_critic", "5", "CGAN critic steps per generator step"),
    ("gen.gp_weight", "10", "CGAN gradient penalty weight"),
    ("gen.epochs", "1000", "generator training epochs"),
    ("gen.batch_size", "128", "generator batch size"),
    ("gen.seed", "0", "generator initialization and training seed"),
    ("cf.noise", "shared", "shared | independent noise across a counterfactual set"),
    ("cf.base", "synthesized", "synthesized | observed difference base"),
    ("cf.seed", "0", "synthesis seed"),
    ("cf.chunk", "64", "samples per generator call"),
    ("hpe.size", "full", "full | toy architecture"),
    ("hpe.lambda", "1.0", "regularization weight"),
    ("hpe.lambdas", "", "comma-separated lambda sweep, e.g. 0,0.2,0.4,0.6,0.8,1"),
    ("hpe.lr", "1e-4", "encoder-decoder learning rate"),
    ("hpe.epochs", "200", "encoder-decoder epochs"),
    ("hpe.batch_size", "32", "encoder-decoder batch size"),
    ("hpe.seed", "0", "first repetition seed"),
    ("hpe.repeats", "1", "repetitions with seeds seed..seed+repeats"),
    ("hpe.train_aggregator", "true", "update aggregator weights"),
    ("eval.checkpoint", "", "model to evaluate (default: the hpe.lambda / hpe.seed run)"),
    ("eval.pa_scale", "true", "allow scale in Procrustes alignment"),
    ("sim.channels", "16", "simulated channels"),
    ("sim.len", "32", "simulated length"),
    ("sim.train_size", "2000", "training samples over the training domains"),
    ("sim.test_size", "500", "held-out domain samples"),
    ("sim.domains", "A,B", "training domain names"),
    ("sim.test_domain", "Z", "held-out domain name"),
    ("sim.density", "0.5", "non-zero probability inside a bone region"),
    ("sim.region", "0.5", "bone region fraction per axis"),
    ("sim.domain_rank", "1", "offset patterns per domain"),
    ("sim.domain_blocks", "4", "piecewise-constant blocks per pattern"),
    ("sim.domain_scale", "2.0", "offset scale"),
    ("sim.jitter", "0.5", "per-sample offset jitter"),
    ("sim.noise", "0.1", "additive noise level"),
    ("sim.seed", "0", "world seed"),
];

pub fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

/// Parses a config file. `[section]` lines prefix the keys that follow.
pub fn parse_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
        _ => Error::Config(format!("reading {}: {e}", path.display())),
    })?;
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = format!("{}.", name.trim());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
        let k = k.trim();
        let key = if k.contains('.') { k.to_string() } else { format!("{section}{k}") };
        if !KEYS.iter().any(|(name, _, _)| *name == key) {
            return Err(err(format!("unknown key `{key}`")));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenKind {
    Ddpm,
    Ddim,
    Cgan,
}

impl FromStr for GenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(GenKind::Ddpm),
            "ddim" => Ok(GenKind::Ddim),
            "cgan" => Ok(GenKind::Cgan),
            other => Err(Error::Config(format!("unknown generator `{other}` (expected ddpm, ddim or cgan)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Size {
    Full,
    Toy,
}

impl FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Size::Full),
            "toy" => Ok(Size::Toy),
            other => Err(Error::Config(format!("unknown size `{other}` (expected full or toy)"))),
        }
    }
}

/// Merged, typed and validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub data_root: PathBuf,
    pub out: PathBuf,
    pub source: Source,
    pub skeleton: Option<PathBuf>,
    pub split: SplitMode,
    pub held_out: Vec<String>,
    pub split_seed: u64,
    pub normalize: bool,
    pub epsilon: f64,
    pub gen_model: GenKind,
    pub gen_size: Size,
    pub embed_width: usize,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub ddim_steps: usize,
    pub eta: f64,
    pub gen_lr: f64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub n_critic: usize,
    pub gp_weight: f64,
    pub gen_epochs: usize,
    pub gen_batch: usize,
    pub gen_seed: u64,
    pub cf_noise: NoisePolicy,
    pub cf_base: DifferenceBase,
    pub cf_seed: u64,
    pub cf_chunk: usize,
    pub hpe_size: Size,
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    pub hpe_lr: f64,
    pub hpe_epochs: usize,
    pub hpe_batch: usize,
    pub hpe_seed: u64,
    pub repeats: usize,
    pub train_aggregator: bool,
    pub eval_checkpoint: Option<PathBuf>,
    pub pa_scale: bool,
    pub sim_channels: usize,
    pub sim_len: usize,
    pub sim_train: usize,
    pub sim_test: usize,
    pub sim_domains: Vec<String>,
    pub sim_test_domain: String,
    pub sim_density: f64,
    pub sim_region: f64,
    pub sim_domain_rank: usize,
    pub sim_domain_blocks: usize,
    pub sim_domain_scale: f64,
    pub sim_jitter: f64,
    pub sim_noise: f64,
    pub sim_seed: u64,
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn parse<T: FromStr>(values: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = &values[key];
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for {key} (--{})", flag_name(key))))
}

fn positive(v: f64, key: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("{key} must be positive, got {v}")))
    }
}

fn at_least_one(v: usize, key: &str) -> Result<usize> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(Error::Config(format!("{key} must be >= 1")))
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`; later layers win.
    pub fn resolve(file: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        if let Some(f) = file {
            values.extend(parse_file(f)?);
        }
        for (k, v) in overrides {
            if !values.contains_key(k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            values.insert(k.clone(), v.clone());
        }
        if values["paths.data"].is_empty() {
            let root = std::env::var(DATA_ROOT_ENV).unwrap_or_else(|_| "data".into());
            values.insert("paths.data".into(), root);
        }
        Self::from_values(values)
    }

    fn from_values(values: BTreeMap<String, String>) -> Result<Self> {
        let v = &values;
        let s = |k: &str| v[k].clone();
        let noise = match v["cf.noise"].as_str() {
            "shared" => NoisePolicy::Shared,
            "independent" => NoisePolicy::Independent,
            o => return Err(Error::Config(format!("cf.noise must be shared or independent, got `{o}`"))),
        };
        let base = match v["cf.base"].as_str() {
            "synthesized" => DifferenceBase::Synthesized,
            "observed" => DifferenceBase::Observed,
            o => return Err(Error::Config(format!("cf.base must be synthesized or observed, got `{o}`"))),
        };
        let lambdas = list(&v["hpe.lambdas"])
            .iter()
            .map(|l| l.parse::<f64>().map_err(|_| Error::Config(format!("invalid lambda `{l}` in hpe.lambdas"))))
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            data_root: PathBuf::from(s("paths.data")),
            out: PathBuf::from(s("paths.out")),
            source: parse(v, "data.source")?,
            skeleton: Some(s("data.skeleton")).filter(|p| !p.is_empty()).map(PathBuf::from),
            split: parse(v, "data.split")?,
            held_out: list(&v["data.held_out"]),
            split_seed: parse(v, "data.split_seed")?,
            normalize: parse(v, "data.normalize")?,
            epsilon: positive(parse(v, "data.epsilon")?, "data.epsilon")?,
            gen_model: parse(v, "gen.model")?,
            gen_size: parse(v, "gen.size")?,
            embed_width: at_least_one(parse(v, "gen.embed_width")?, "gen.embed_width")?,
            steps: at_least_one(parse(v, "gen.steps")?, "gen.steps")?,
            beta_min: parse(v, "gen.beta_min")?,
            beta_max: parse(v, "gen.beta_max")?,
            ddim_steps: at_least_one(parse(v, "gen.ddim_steps")?, "gen.ddim_steps")?,
            eta: parse(v, "gen.eta")?,
            gen_lr: positive(parse(v, "gen.lr")?, "gen.lr")?,
            lr_gen: positive(parse(v, "gen.lr_gen")?, "gen.lr_gen")?,
            lr_disc: positive(parse(v, "gen.lr_disc")?, "gen.lr_disc")?,
            n_critic: at_least_one(parse(v, "gen.n_critic")?, "gen.n_critic")?,
            gp_weight: parse(v, "gen.gp_weight")?,
            gen_epochs: parse(v, "gen.epochs")?,
            gen_batch: at_least_one(parse(v, "gen.batch_size")?, "gen.batch_size")?,
            gen_seed: parse(v, "gen.seed")?,
            cf_noise: noise,
            cf_base: base,
            cf_seed: parse(v, "cf.seed")?,
            cf_chunk: at_least_one(parse(v, "cf.chunk")?, "cf.chunk")?,
            hpe_size: parse(v, "hpe.size")?,
            lambda: parse(v, "hpe.lambda")?,
            lambdas,
            hpe_lr: positive(parse(v, "hpe.lr")?, "hpe.lr")?,
            hpe_epochs: parse(v, "hpe.epochs")?,
            hpe_batch: at_least_one(parse(v, "hpe.batch_size")?, "hpe.batch_size")?,
            hpe_seed: parse(v, "hpe.seed")?,
            repeats: at_least_one(parse(v, "hpe.repeats")?, "hpe.repeats")?,
            train_aggregator: parse(v, "hpe.train_aggregator")?,
            eval_checkpoint: Some(s("eval.checkpoint")).filter(|p| !p.is_empty()).map(PathBuf::from),
            pa_scale: parse(v, "eval.pa_scale")?,
            sim_channels: at_least_one(parse(v, "sim.channels")?, "sim.channels")?,
            sim_len: at_least_one(parse(v, "sim.len")?, "sim.len")?,
            sim_train: parse(v, "sim.train_size")?,
            sim_test: parse(v, "sim.test_size")?,
            sim_domains: list(&v["sim.domains"]),
            sim_test_domain: s("sim.test_domain"),
            sim_density: parse(v, "sim.density")?,
            sim_region: parse(v, "sim.region")?,
            sim_domain_rank: parse(v, "sim.domain_rank")?,
            sim_domain_blocks: parse(v, "sim.domain_blocks")?,
            sim_domain_scale: parse(v, "sim.domain_scale")?,
            sim_jitter: parse(v, "sim.jitter")?,
            sim_noise: parse(v, "sim.noise")?,
            sim_seed: parse(v, "sim.seed")?,
            values,
        };
        if !(0.0 < cfg.beta_min && cfg.beta_min < cfg.beta_max && cfg.beta_max < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < beta_min < beta_max < 1, got [{}, {}]",
                cfg.beta_min, cfg.beta_max
            )));
        }
        if cfg.ddim_steps > cfg.steps {
            return Err(Error::Config("gen.ddim_steps cannot exceed gen.steps".into()));
        }
        if !(cfg.eta >= 0.0 && cfg.eta.is_finite()) || !(cfg.gp_weight >= 0.0 && cfg.gp_weight.is_finite()) {
            return Err(Error::Config("gen.eta and gen.gp_weight must be >= 0".into()));
        }
        if cfg.lambdas().iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("lambda values must be >= 0".into()));
        }
        Ok(cfg)
    }

    /// Lambdas to train: the sweep if given, else the single `hpe.lambda`.
    pub fn lambdas(&self) -> Vec<f64> {
        if self.lambdas.is_empty() {
            vec![self.lambda]
        } else {
            self.lambdas.clone()
        }
    }

    /// Hash over the given sections, in key order.
    pub fn hash(&self, sections: &[&str]) -> String {
        self.hash_except(sections, &[])
    }

    fn hash_except(&self, sections: &[&str], skip: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if sections.iter().any(|s| k.starts_with(&format!("{s}."))) && !skip.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Training-time identity of the generator: DDPM and DDIM share one
    /// trained model, so sampler keys are left out.
    pub fn gen_hash(&self) -> String {
        let family = match self.gen_model {
            GenKind::Ddpm | GenKind::Ddim => "diffusion",
            GenKind::Cgan => "cgan",
        };
        let base = self.hash_except(&["data", "gen"], &["gen.model", "gen.ddim_steps", "gen.eta"]);
        format!("{}{}", &base[..8], &hex::encode(Sha256::digest(family.as_bytes()))[..8])
    }

    pub fn cf_hash(&self) -> String {
        self.hash(&["data", "gen", "cf"])
    }

    /// Shared by every run of a sweep: lambda and seed are recorded per
    /// checkpoint instead.
    pub fn hpe_hash(&self) -> String {
        self.hash_except(
            &["data", "gen", "cf", "hpe"],
            &["hpe.lambda", "hpe.lambdas", "hpe.seed", "hpe.repeats"],
        )
    }

    /// Resolved configuration as a config file.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn generator_path(&self) -> PathBuf {
        self.out.join("generator.ckpt")
    }

    pub fn store_path(&self) -> PathBuf {
        self.out.join("targets.cfstore")
    }

    pub fn normalization_path(&self) -> PathBuf {
        self.out.join("normalization.txt")
    }

    pub fn hpe_path(&self, lambda: f64, seed: u64) -> PathBuf {
        self.out.join("hpe").join(format!("lambda{lambda}_seed{seed}.ckpt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_match_full_size_setup() {
        let c = RunConfig::resolve(None, &BTreeMap::new()).unwrap();
        assert_eq!((c.steps, c.beta_min, c.beta_max), (1000, 1e-5, 1e-1));
        assert_eq!((c.ddim_steps, c.eta), (100, 0.0));
        assert_eq!((c.gen_lr, c.lr_gen, c.lr_disc), (1e-4, 2e-4, 1e-4));
        assert_eq!((c.gen_epochs, c.gen_batch), (1000, 128));
        assert_eq!((c.lambda, c.hpe_lr, c.hpe_epochs, c.hpe_batch), (1.0, 1e-4, 200, 32));
    }

    #[test]
    fn flags_override_file_and_sections_prefix_keys() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        fs::write(&f, "# run\n[hpe]\nlambda = 0.4\nepochs = 3\n\ngen.model = cgan\n").unwrap();
        let c = RunConfig::resolve(Some(&f), &overrides(&[("hpe.epochs", "7")])).unwrap();
        assert_eq!((c.lambda, c.hpe_epochs), (0.4, 7));
        assert_eq!(c.gen_model, GenKind::Cgan);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        fs::write(&f, "gen.nope = 1\n").unwrap();
        assert!(matches!(RunConfig::resolve(Some(&f), &BTreeMap::new()), Err(Error::Parse { .. })));
        for (k, v) in [("gen.model", "vae"), ("gen.beta_max", "2"), ("hpe.lambda", "-1"), ("data.split", "x")] {
            let r = RunConfig::resolve(None, &overrides(&[(k, v)]));
            assert!(matches!(r, Err(Error::Config(_))), "{k}={v}");
        }
    }

    #[test]
    fn stage_hashes_track_their_sections() {
        let a = RunConfig::resolve(None, &BTreeMap::new()).unwrap();
        let b = RunConfig::resolve(None, &overrides(&[("hpe.lr", "5e-4")])).unwrap();
        let c = RunConfig::resolve(None, &overrides(&[("paths.out", "elsewhere"), ("hpe.lambda", "0.2")])).unwrap();
        let d = RunConfig::resolve(None, &overrides(&[("gen.model", "ddim"), ("gen.ddim_steps", "50")])).unwrap();
        let e = RunConfig::resolve(None, &overrides(&[("gen.model", "cgan")])).unwrap();
        assert_eq!(a.gen_hash(), b.gen_hash());
        assert_eq!(a.cf_hash(), b.cf_hash());
        assert_ne!(a.hpe_hash(), b.hpe_hash());
        assert_eq!(a.hpe_hash(), c.hpe_hash());
        assert_eq!(a.gen_hash(), d.gen_hash());
        assert_ne!(a.cf_hash(), d.cf_hash());
        assert_ne!(a.gen_hash(), e.gen_hash());
    }
}
