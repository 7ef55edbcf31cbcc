//! Run configuration: one JSON document, overridable with `--set key=value`
//! and the `GKNN_SEED` environment variable.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gknn_core::decode::{DecodeConfig, Mode};
use gknn_core::knnprob::{Hyperparams, MetaKTrainConfig};
use gknn_core::model::{ModelDims, ModelHyper};
use gknn_core::selector::{LossMode, SelectorTrainConfig};
use gknn_core::toygen::{DomainSpec, SamplerSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "GKNN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub shared_fraction: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub sampler: SamplerSpec,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            name: "general".into(),
            src_vocab: 200,
            tgt_vocab: 200,
            shared_fraction: 0.8,
            min_len: 6,
            max_len: 16,
            train: 4000,
            valid: 1000,
            test: 400,
            sampler: SamplerSpec::default(),
        }
    }
}

impl DomainConfig {
    fn shifted_default() -> Self {
        Self {
            name: "shifted".into(),
            train: 4200,
            ..Self::default()
        }
    }

    pub fn spec(&self, seed: u64) -> DomainSpec {
        DomainSpec {
            name: self.name.clone(),
            src_vocab: self.src_vocab,
            tgt_vocab: self.tgt_vocab,
            shared_fraction: self.shared_fraction,
            min_len: self.min_len,
            max_len: self.max_len,
            train: self.train,
            valid: self.valid,
            test: self.test,
            seed,
            sampler: self.sampler.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_sentences: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let h = ModelHyper::default();
        Self {
            embed: 32,
            hidden: 64,
            epochs: h.epochs,
            lr: h.lr,
            batch_sentences: h.batch_sentences,
            init_scale: h.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaKConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_tokens: usize,
}

impl Default for MetaKConfig {
    fn default() -> Self {
        let d = MetaKTrainConfig::default();
        Self {
            hidden: d.hidden,
            epochs: d.epochs,
            lr: d.lr,
            batch_tokens: d.batch_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    /// d′; null means d.
    pub hidden: Option<usize>,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_tokens: usize,
    pub grad_clip: Option<f64>,
    pub loss: LossMode,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        let d = SelectorTrainConfig::default();
        Self {
            hidden: d.hidden,
            tau: d.tau,
            lr: d.lr,
            epochs: d.epochs,
            batch_tokens: d.batch_tokens,
            grad_clip: d.grad_clip,
            loss: d.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam: usize,
    /// null means `2 · |source| + 8`.
    pub max_len: Option<usize>,
    /// Mode used by `translate`.
    pub mode: Mode,
    pub surviving_only: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            beam: 4,
            max_len: None,
            mode: Mode::Gated,
            surviving_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub repeats: usize,
    pub modes: Vec<Mode>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            repeats: 3,
            modes: vec![Mode::Pure, Mode::Vanilla, Mode::Adaptive, Mode::Gated],
        }
    }
}

/// Artifact directories, relative to the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpora: PathBuf,
    pub checkpoints: PathBuf,
    pub datastore: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpora: "data".into(),
            checkpoints: "checkpoints".into(),
            datastore: "datastore".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub general: DomainConfig,
    pub shifted: DomainConfig,
    pub model: ModelConfig,
    pub knn: Hyperparams,
    pub meta_k: MetaKConfig,
    pub selector: SelectorConfig,
    pub decode: DecodeSection,
    pub benchmark: BenchmarkConfig,
    pub futile_top_n: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            general: DomainConfig::default(),
            shifted: DomainConfig::shifted_default(),
            model: ModelConfig::default(),
            knn: Hyperparams::default(),
            meta_k: MetaKConfig::default(),
            selector: SelectorConfig::default(),
            decode: DecodeSection::default(),
            benchmark: BenchmarkConfig::default(),
            futile_top_n: 8,
            paths: Paths::default(),
        }
    }
}

/// Component seeds, all derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub general: u64,
    pub shifted: u64,
    pub model: u64,
    pub meta_k: u64,
    pub selector: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        // splitmix64 finaliser over (seed, stream)
        let mix = |stream: u64| {
            let mut z = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        };
        Self {
            general: mix(1),
            shifted: mix(2),
            model: mix(3),
            meta_k: mix(4),
            selector: mix(5),
        }
    }
}

impl RunConfig {
    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    pub fn general_spec(&self) -> DomainSpec {
        self.general.spec(self.seeds().general)
    }

    pub fn shifted_spec(&self) -> DomainSpec {
        self.shifted.spec(self.seeds().shifted)
    }

    pub fn model_hyper(&self) -> ModelHyper {
        ModelHyper {
            epochs: self.model.epochs,
            lr: self.model.lr,
            batch_sentences: self.model.batch_sentences,
            init_scale: self.model.init_scale,
            seed: self.seeds().model,
        }
    }

    pub fn model_dims(&self, src_vocab: usize, tgt_vocab: usize) -> ModelDims {
        ModelDims {
            src_vocab,
            tgt_vocab,
            embed: self.model.embed,
            hidden: self.model.hidden,
        }
    }

    pub fn meta_k_train(&self) -> MetaKTrainConfig {
        MetaKTrainConfig {
            hidden: self.meta_k.hidden,
            epochs: self.meta_k.epochs,
            lr: self.meta_k.lr,
            batch_tokens: self.meta_k.batch_tokens,
            seed: self.seeds().meta_k,
        }
    }

    pub fn selector_train(&self) -> SelectorTrainConfig {
        SelectorTrainConfig {
            hidden: self.selector.hidden,
            tau: self.selector.tau,
            lr: self.selector.lr,
            epochs: self.selector.epochs,
            batch_tokens: self.selector.batch_tokens,
            mode: self.selector.loss,
            grad_clip: self.selector.grad_clip,
            seed: self.seeds().selector,
        }
    }

    pub fn decode_config(&self, mode: Mode) -> DecodeConfig {
        DecodeConfig {
            mode,
            beam: self.decode.beam,
            max_len: self.decode.max_len,
            hyper: self.knn,
            surviving_only: self.decode.surviving_only,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.general_spec().validate()?;
        self.shifted_spec().validate()?;
        self.knn.validate()?;
        self.decode_config(self.decode.mode).validate()?;
        if self.benchmark.repeats == 0 {
            bail!("benchmark.repeats must be >= 1");
        }
        if self.selector.mode_needs_tau() && !(self.selector.tau > 0.0) {
            bail!("selector.tau must be > 0 for joint training");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

impl SelectorConfig {
    fn mode_needs_tau(&self) -> bool {
        self.loss == LossMode::Joint
    }
}

/// A config plus the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub root: PathBuf,
}

impl Resolved {
    pub fn corpora_dir(&self) -> PathBuf {
        self.root.join(&self.config.paths.corpora)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join(&self.config.paths.checkpoints)
    }

    pub fn datastore_dir(&self) -> PathBuf {
        self.root.join(&self.config.paths.datastore)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join(&self.config.paths.reports)
    }
}

/// Loads `path` (or the defaults when `None`), applies `--set` overrides, then
/// `GKNN_SEED`. Precedence: flag > environment seed > file > default.
pub fn load(path: Option<&Path>, sets: &[String], env_seed: Option<String>) -> Result<Resolved> {
    let (base, root) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let cfg: RunConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            let root = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, root)
        }
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    let mut value = serde_json::to_value(&base)?;
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
        value["seed"] = Value::from(seed);
    }
    for set in sets {
        apply_set(&mut value, set)?;
    }
    let config: RunConfig = serde_json::from_value(value).context("applying --set overrides")?;
    config.validate().context("invalid configuration")?;
    Ok(Resolved {
        config,
        root: if root.as_os_str().is_empty() { PathBuf::from(".") } else { root },
    })
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when it
/// parses, otherwise taken as a string.
pub fn apply_set(root: &mut Value, set: &str) -> Result<()> {
    let Some((key, raw)) = set.split_once('=') else {
        bail!("--set expects key=value, got {set:?}");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("--set {key}: {} is not an object", parts[..i].join("."));
        };
        if !map.contains_key(*part) {
            bail!("--set {key}: unknown field {part:?}");
        }
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}
