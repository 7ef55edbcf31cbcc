//! On-disk formats: TSV corpora, vocabulary and checkpoint JSON, the binary
//! datastore with its JSON sidecar, hypothesis files and stage manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gknn_core::datastore::{Datastore, DatastoreMeta};
use gknn_core::toygen::{corpus_from_tsv, corpus_to_tsv, SentencePair, Vocabulary};
use gknn_core::TokenId;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::pipeline::Stage;

pub fn checksum_hex(c: u64) -> String {
    format!("{c:016x}")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Fails with a pointer to the stage that produces `path` when it is absent.
pub fn require(path: &Path, producer: Stage) -> Result<()> {
    if !path.exists() {
        bail!(
            "missing {}; run `gknn {}` first",
            path.display(),
            producer.name()
        );
    }
    Ok(())
}

/// Where every stage reads and writes.
#[derive(Debug, Clone)]
pub struct Layout {
    corpora: PathBuf,
    checkpoints: PathBuf,
    datastore: PathBuf,
    reports: PathBuf,
}

impl Layout {
    pub fn new(r: &Resolved) -> Self {
        Self {
            corpora: r.corpora_dir(),
            checkpoints: r.checkpoints_dir(),
            datastore: r.datastore_dir(),
            reports: r.reports_dir(),
        }
    }

    pub fn corpus(&self, domain: &str, split: &str) -> PathBuf {
        self.corpora.join(format!("{domain}.{split}.tsv"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.corpora.join("vocab.json")
    }

    pub fn mapping(&self) -> PathBuf {
        self.corpora.join("mapping.json")
    }

    pub fn model(&self) -> PathBuf {
        self.checkpoints.join("model.json")
    }

    pub fn model_curve(&self) -> PathBuf {
        self.checkpoints.join("model.curve.csv")
    }

    pub fn meta_k(&self) -> PathBuf {
        self.checkpoints.join("meta_k.json")
    }

    pub fn meta_k_curve(&self) -> PathBuf {
        self.checkpoints.join("meta_k.curve.csv")
    }

    pub fn selector(&self, loss: &str) -> PathBuf {
        self.checkpoints.join(format!("selector.{loss}.json"))
    }

    pub fn selector_curve(&self, loss: &str) -> PathBuf {
        self.checkpoints.join(format!("selector.{loss}.curve.csv"))
    }

    pub fn selector_eval(&self, loss: &str) -> PathBuf {
        self.checkpoints.join(format!("selector.{loss}.eval.json"))
    }

    pub fn datastore(&self, domain: &str) -> PathBuf {
        self.datastore.join(format!("{domain}.bin"))
    }

    pub fn hypotheses(&self, name: &str) -> PathBuf {
        self.reports.join("hypotheses").join(format!("{name}.txt"))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.reports.join(file)
    }

    /// Manifests sit next to the stage's primary artifact.
    pub fn manifest(&self, stage: Stage) -> PathBuf {
        let dir = match stage {
            Stage::GenData => &self.corpora,
            Stage::TrainModel | Stage::TrainMetaK | Stage::TrainSelector => &self.checkpoints,
            Stage::BuildDatastore => &self.datastore,
            Stage::Translate | Stage::Benchmark | Stage::MeasureRedundancy | Stage::FutileTokens => &self.reports,
        };
        dir.join(format!("{}.manifest.json", stage.name()))
    }
}

pub fn write_corpus(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    write_bytes(path, corpus_to_tsv(pairs).as_bytes())
}

pub fn read_corpus(path: &Path) -> Result<Vec<SentencePair>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    corpus_from_tsv(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabFile {
    pub source: Vocabulary,
    pub target: Vocabulary,
}

/// JSON wrapper for trained parameters, tied to the model they were trained
/// against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub model_checksum: String,
    pub params: T,
}

impl<T: DeserializeOwned> Checkpoint<T> {
    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let c: Self = read_json(path)?;
        if c.kind != kind {
            bail!("{} holds a {} checkpoint, expected {kind}", path.display(), c.kind);
        }
        Ok(c)
    }
}

/// Fails when an artifact was produced against a different model.
pub fn check_model(artifact: &Path, found: &str, expected: u64, rebuild: Stage) -> Result<()> {
    let expected = checksum_hex(expected);
    if found != expected {
        bail!(
            "{} was produced with model {found} but the current model is {expected}; rerun `gknn {}`",
            artifact.display(),
            rebuild.name()
        );
    }
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn write_datastore(path: &Path, ds: &Datastore) -> Result<Vec<PathBuf>> {
    write_bytes(path, &ds.encode())?;
    let meta = sidecar(path);
    write_json(&meta, &ds.meta)?;
    Ok(vec![path.to_path_buf(), meta])
}

pub fn read_datastore(path: &Path) -> Result<Datastore> {
    let meta: DatastoreMeta = read_json(&sidecar(path))?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Datastore::decode(&bytes, meta).with_context(|| format!("decoding {}", path.display()))
}

/// One hypothesis per line, tokens separated by single spaces.
pub fn write_hypotheses(path: &Path, hyps: &[Vec<TokenId>], vocab: &Vocabulary) -> Result<()> {
    let mut text = String::new();
    for h in hyps {
        text.push_str(&vocab.decode(h).join(" "));
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

/// Reads whitespace-tokenized source sentences; unknown tokens map to UNK.
pub fn read_sources(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| {
            let toks: Vec<&str> = l.split_whitespace().collect();
            vocab.encode(&toks)
        })
        .collect())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {e}"))?;
    write_bytes(path, &bytes)
}

/// Audit record written by every stage. No timestamps, so reruns with the
/// same inputs produce the same manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub model_checksum: Option<String>,
    /// Output path (relative to the config root) → SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null", default)]
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(stage: Stage, r: &Resolved, model_checksum: Option<u64>) -> Self {
        Self {
            stage: stage.name().into(),
            config_hash: r.config.hash(),
            seed: r.config.seed,
            model_checksum: model_checksum.map(checksum_hex),
            outputs: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn add_output(&mut self, root: &Path, path: &Path) -> Result<()> {
        let key = path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned();
        self.outputs.insert(key, sha256_file(path)?);
        Ok(())
    }
}
