//! The nine workbench stages. Each reads its prerequisites from disk, writes
//! its artifacts and finishes with a manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use gknn_core::datastore::{build_datastore, Datastore};
use gknn_core::decode::{translate_corpus, Components, CorpusTranslation, Mode};
use gknn_core::evalbench::{corpus_bleu, futile_token_ranking, redundancy_ratio, revision_outcomes, TimingReport};
use gknn_core::knnprob::{meta_k_examples, train_meta_k, MetaKNet};
use gknn_core::model::{train_model, ToyModel};
use gknn_core::selector::{evaluate, selector_examples, train_selector, Gate, LossMode, Selector};
use gknn_core::toygen::{build_vocabs, encode_corpus, generate_domain_pair, EncodedPair, Split};
use gknn_core::TokenId;
use log::info;
use serde_json::json;

use crate::artifacts::{self as io, Checkpoint, Layout, Manifest, VocabFile};
use crate::clock::WallClock;
use crate::config::Resolved;
use crate::report::{BenchmarkReport, CurveRow, FutileRow, ModeRow, RedundancyReport, SelectorSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    GenData,
    TrainModel,
    BuildDatastore,
    TrainMetaK,
    TrainSelector,
    Translate,
    Benchmark,
    MeasureRedundancy,
    FutileTokens,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::TrainModel,
        Stage::BuildDatastore,
        Stage::TrainMetaK,
        Stage::TrainSelector,
        Stage::Translate,
        Stage::Benchmark,
        Stage::MeasureRedundancy,
        Stage::FutileTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainModel => "train-model",
            Stage::BuildDatastore => "build-datastore",
            Stage::TrainMetaK => "train-meta-k",
            Stage::TrainSelector => "train-selector",
            Stage::Translate => "translate",
            Stage::Benchmark => "benchmark",
            Stage::MeasureRedundancy => "measure-redundancy",
            Stage::FutileTokens => "futile-tokens",
        }
    }
}

pub fn loss_name(mode: LossMode) -> &'static str {
    match mode {
        LossMode::Joint => "joint",
        LossMode::CeOnly => "ce_only",
    }
}

/// Resolved config plus file layout; the handle every stage takes.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub resolved: Resolved,
    pub layout: Layout,
}

/// Frozen components loaded from disk, all checked against one model.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub model: ToyModel,
    pub datastore: Option<Datastore>,
    pub selector: Option<Selector>,
    pub meta_k: Option<MetaKNet>,
}

impl Loaded {
    pub fn components(&self) -> Components<'_> {
        Components {
            model: &self.model,
            datastore: self.datastore.as_ref(),
            selector: self.selector.as_ref(),
            meta_k: self.meta_k.as_ref(),
        }
    }
}

fn needs_datastore(mode: Mode) -> bool {
    !matches!(mode, Mode::Pure | Mode::Forced(Gate::Skip))
}

impl Workspace {
    pub fn new(resolved: Resolved) -> Self {
        let layout = Layout::new(&resolved);
        Self { resolved, layout }
    }

    pub fn config(&self) -> &crate::RunConfig {
        &self.resolved.config
    }

    fn manifest(&self, stage: Stage, model: Option<&ToyModel>) -> Manifest {
        Manifest::new(stage, &self.resolved, model.map(ToyModel::checksum))
    }

    fn finish(&self, mut m: Manifest, outputs: &[PathBuf]) -> Result<Manifest> {
        for p in outputs {
            m.add_output(&self.resolved.root, p)?;
        }
        let stage = Stage::ALL
            .into_iter()
            .find(|s| s.name() == m.stage)
            .expect("manifest stage is a known stage");
        io::write_json(&self.layout.manifest(stage), &m)?;
        Ok(m)
    }

    pub fn vocab(&self) -> Result<VocabFile> {
        let p = self.layout.vocab();
        io::require(&p, Stage::GenData)?;
        io::read_json(&p)
    }

    pub fn split(&self, vocab: &VocabFile, shifted: bool, split: Split) -> Result<Vec<EncodedPair>> {
        let domain = if shifted { &self.config().shifted.name } else { &self.config().general.name };
        let p = self.layout.corpus(domain, split.name());
        io::require(&p, Stage::GenData)?;
        Ok(encode_corpus(&io::read_corpus(&p)?, &vocab.source, &vocab.target))
    }

    pub fn model(&self) -> Result<ToyModel> {
        let p = self.layout.model();
        io::require(&p, Stage::TrainModel)?;
        let c: Checkpoint<ToyModel> = Checkpoint::read(&p, "model")?;
        let model = c.params;
        io::check_model(&p, &c.model_checksum, model.checksum(), Stage::TrainModel)?;
        model.require_frozen()?;
        Ok(model)
    }

    pub fn datastore(&self, model: &ToyModel) -> Result<Datastore> {
        let p = self.layout.datastore(&self.config().shifted.name);
        io::require(&p, Stage::BuildDatastore)?;
        let ds = io::read_datastore(&p)?;
        io::check_model(&p, &io::checksum_hex(ds.meta.model_checksum), model.checksum(), Stage::BuildDatastore)?;
        ensure!(
            ds.dim() == model.hidden_dim(),
            "{} has key dimension {} but the model's hidden size is {}; rerun `gknn build-datastore`",
            p.display(),
            ds.dim(),
            model.hidden_dim()
        );
        Ok(ds)
    }

    pub fn selector(&self, model: &ToyModel, loss: LossMode) -> Result<Selector> {
        let p = self.layout.selector(loss_name(loss));
        io::require(&p, Stage::TrainSelector)?;
        let c: Checkpoint<Selector> = Checkpoint::read(&p, "selector")?;
        io::check_model(&p, &c.model_checksum, model.checksum(), Stage::TrainSelector)?;
        ensure!(
            c.params.input_dim() == model.hidden_dim(),
            "{} expects {}-dim features but the model produces {}",
            p.display(),
            c.params.input_dim(),
            model.hidden_dim()
        );
        Ok(c.params)
    }

    pub fn meta_k(&self, model: &ToyModel) -> Result<MetaKNet> {
        let p = self.layout.meta_k();
        io::require(&p, Stage::TrainMetaK)?;
        let c: Checkpoint<MetaKNet> = Checkpoint::read(&p, "meta_k")?;
        io::check_model(&p, &c.model_checksum, model.checksum(), Stage::TrainMetaK)?;
        ensure!(
            c.params.k_max == self.config().knn.k_max_adaptive,
            "{} was trained with K_max = {} but knn.k_max_adaptive = {}; rerun `gknn train-meta-k`",
            p.display(),
            c.params.k_max,
            self.config().knn.k_max_adaptive
        );
        Ok(c.params)
    }

    /// Loads exactly what `modes` need, in pipeline order so the first missing
    /// stage is the one reported.
    pub fn load_for(&self, modes: &[Mode]) -> Result<Loaded> {
        let model = self.model()?;
        let datastore = match modes.iter().any(|&m| needs_datastore(m)) {
            true => Some(self.datastore(&model)?),
            false => None,
        };
        let meta_k = match modes.contains(&Mode::Adaptive) {
            true => Some(self.meta_k(&model)?),
            false => None,
        };
        let selector = match modes.contains(&Mode::Gated) {
            true => Some(self.selector(&model, self.config().selector.loss)?),
            false => None,
        };
        Ok(Loaded { model, datastore, selector, meta_k })
    }
}

pub fn gen_data(ws: &Workspace) -> Result<Manifest> {
    let cfg = ws.config();
    let pair = generate_domain_pair(&cfg.general_spec(), &cfg.shifted_spec())?;
    let mut outputs = Vec::new();
    for corpus in [&pair.general, &pair.shifted] {
        for split in Split::ALL {
            let p = ws.layout.corpus(&corpus.name, split.name());
            io::write_corpus(&p, corpus.split(split))?;
            outputs.push(p);
        }
    }
    let (source, target) = build_vocabs([&pair.general.train[..], &pair.shifted.train[..]]);
    let vocab = VocabFile { source, target };
    io::write_json(&ws.layout.vocab(), &vocab)?;
    io::write_json(&ws.layout.mapping(), &pair.mapping)?;
    outputs.push(ws.layout.vocab());
    outputs.push(ws.layout.mapping());
    let datastore_entries: usize = pair.shifted.train.iter().map(|p| p.target.len() + 1).sum();
    info!(
        "gen-data: {} + {} sentence pairs, {} divergent source tokens",
        pair.general.train.len() + pair.general.valid.len() + pair.general.test.len(),
        pair.shifted.train.len() + pair.shifted.valid.len() + pair.shifted.test.len(),
        pair.mapping.divergent_count()
    );
    let mut m = ws.manifest(Stage::GenData, None);
    m.details = json!({
        "divergent_tokens": pair.mapping.divergent_count(),
        "source_vocab": vocab.source.len(),
        "target_vocab": vocab.target.len(),
        "datastore_entries": datastore_entries,
    });
    ws.finish(m, &outputs)
}

pub fn train_model_stage(ws: &Workspace) -> Result<Manifest> {
    let vocab = ws.vocab()?;
    let train = ws.split(&vocab, false, Split::Train)?;
    let dims = ws.config().model_dims(vocab.source.len(), vocab.target.len());
    let (model, log) = train_model(&train, dims, &ws.config().model_hyper())?;
    let model = model.freeze();
    let acc_general = model.token_accuracy(&ws.split(&vocab, false, Split::Valid)?)?;
    let acc_shifted = model.token_accuracy(&ws.split(&vocab, true, Split::Valid)?)?;
    info!("train-model: valid token accuracy {acc_general:.4} (general), {acc_shifted:.4} (shifted)");
    let checksum = io::checksum_hex(model.checksum());
    let path = ws.layout.model();
    let mut m = ws.manifest(Stage::TrainModel, Some(&model));
    io::write_json(&path, &Checkpoint { kind: "model".into(), model_checksum: checksum, params: model })?;
    let curve: Vec<CurveRow> = log
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(i, &loss)| CurveRow { epoch: i + 1, loss })
        .collect();
    io::write_csv(&ws.layout.model_curve(), &curve)?;
    m.details = json!({ "valid_accuracy_general": acc_general, "valid_accuracy_shifted": acc_shifted });
    ws.finish(m, &[path, ws.layout.model_curve()])
}

pub fn build_datastore_stage(ws: &Workspace) -> Result<Manifest> {
    let vocab = ws.vocab()?;
    let model = ws.model()?;
    let train = ws.split(&vocab, true, Split::Train)?;
    let ds = build_datastore(&model, &train, &ws.config().shifted.name)?;
    info!("build-datastore: {} entries of dimension {}", ds.len(), ds.dim());
    let outputs = io::write_datastore(&ws.layout.datastore(&ws.config().shifted.name), &ds)?;
    let mut m = ws.manifest(Stage::BuildDatastore, Some(&model));
    m.details = json!({ "entries": ds.len(), "dim": ds.dim() });
    ws.finish(m, &outputs)
}

pub fn train_meta_k_stage(ws: &Workspace) -> Result<Manifest> {
    let vocab = ws.vocab()?;
    let model = ws.model()?;
    let ds = ws.datastore(&model)?;
    let valid = ws.split(&vocab, true, Split::Valid)?;
    let hyper = ws.config().knn;
    let examples = meta_k_examples(&valid, &model, &ds, &hyper)?;
    let (net, curve) = train_meta_k(&examples, hyper.k_max_adaptive, &ws.config().meta_k_train())?;
    info!("train-meta-k: final loss {:.4}", curve.last().copied().unwrap_or(f64::NAN));
    let path = ws.layout.meta_k();
    io::write_json(
        &path,
        &Checkpoint { kind: "meta_k".into(), model_checksum: io::checksum_hex(model.checksum()), params: net },
    )?;
    let rows: Vec<CurveRow> = curve.iter().enumerate().map(|(i, &loss)| CurveRow { epoch: i + 1, loss }).collect();
    io::write_csv(&ws.layout.meta_k_curve(), &rows)?;
    let m = ws.manifest(Stage::TrainMetaK, Some(&model));
    ws.finish(m, &[path, ws.layout.meta_k_curve()])
}

pub fn train_selector_stage(ws: &Workspace) -> Result<Manifest> {
    let vocab = ws.vocab()?;
    let model = ws.model()?;
    let ds = ws.datastore(&model)?;
    let hyper = ws.config().knn;
    let valid = selector_examples(&model, &ds, &ws.split(&vocab, true, Split::Valid)?, &hyper)?;
    let test = selector_examples(&model, &ds, &ws.split(&vocab, true, Split::Test)?, &hyper)?;
    let cfg = ws.config().selector_train();
    let (sel, log) = train_selector(&valid, &cfg)?;
    let (l1, l2, report) = evaluate(&sel, &test)?;
    let summary = SelectorSummary::from(&report);
    info!(
        "train-selector ({}): test precision {:?} recall {:?} retrieving ratio {:.3}",
        loss_name(cfg.mode),
        summary.precision,
        summary.recall,
        summary.retrieving_ratio
    );
    let name = loss_name(cfg.mode);
    let path = ws.layout.selector(name);
    io::write_json(
        &path,
        &Checkpoint { kind: "selector".into(), model_checksum: io::checksum_hex(model.checksum()), params: sel },
    )?;
    io::write_csv(&ws.layout.selector_curve(name), &log.epochs)?;
    io::write_json(&ws.layout.selector_eval(name), &json!({ "split": "test", "l1": l1, "l2": l2, "metrics": summary }))?;
    let mut m = ws.manifest(Stage::TrainSelector, Some(&model));
    m.details = json!({ "loss": name, "degenerate_batches": log.degenerate_batches });
    ws.finish(m, &[path, ws.layout.selector_curve(name), ws.layout.selector_eval(name)])
}

fn decode(ws: &Workspace, loaded: &Loaded, mode: Mode, sources: &[Vec<TokenId>]) -> Result<CorpusTranslation> {
    let srcs: Vec<&[TokenId]> = sources.iter().map(Vec::as_slice).collect();
    let clock = WallClock::start();
    Ok(translate_corpus(&loaded.components(), &ws.config().decode_config(mode), &srcs, &clock)?)
}

/// Decodes `input` (whitespace-tokenized source lines), or the shifted test
/// split when `None`, with the configured mode.
pub fn translate_stage(ws: &Workspace, input: Option<&Path>, output: Option<&Path>) -> Result<Manifest> {
    let vocab = ws.vocab()?;
    let mode = ws.config().decode.mode;
    let loaded = ws.load_for(&[mode])?;
    let (sources, refs) = match input {
        Some(p) => (io::read_sources(p, &vocab.source)?, None),
        None => {
            let test = ws.split(&vocab, true, Split::Test)?;
            let refs: Vec<Vec<TokenId>> = test.iter().map(|p| p.target.clone()).collect();
            (test.into_iter().map(|p| p.source).collect(), Some(refs))
        }
    };
    let out = decode(ws, &loaded, mode, &sources)?;
    let path = output.map_or_else(|| ws.layout.report(&format!("translate.{}.txt", mode.name())), Path::to_path_buf);
    io::write_hypotheses(&path, &out.hypotheses, &vocab.target)?;
    let mut m = ws.manifest(Stage::Translate, Some(&loaded.model));
    let bleu = refs.map(|r| corpus_bleu(&out.hypotheses, &r)).transpose()?;
    m.details = json!({ "mode": mode.name(), "bleu": bleu, "timing": out.timing });
    ws.finish(m, &[path])
}

/// Decodes the shifted test split `benchmark.repeats` times per mode and
/// writes the comparison report.
pub fn benchmark_stage(ws: &Workspace) -> Result<(Manifest, BenchmarkReport)> {
    let cfg = ws.config();
    let modes = &cfg.benchmark.modes;
    ensure!(!modes.is_empty(), "benchmark.modes is empty");
    let vocab = ws.vocab()?;
    let loaded = ws.load_for(modes)?;
    let test = ws.split(&vocab, true, Split::Test)?;
    let sources: Vec<Vec<TokenId>> = test.iter().map(|p| p.source.clone()).collect();
    let refs: Vec<Vec<TokenId>> = test.iter().map(|p| p.target.clone()).collect();
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for &mode in modes {
        let mut runs: Vec<TimingReport> = Vec::new();
        let mut first: Option<CorpusTranslation> = None;
        for _ in 0..cfg.benchmark.repeats {
            let out = decode(ws, &loaded, mode, &sources)?;
            runs.push(out.timing);
            match &first {
                Some(f) if f.hypotheses != out.hypotheses => {
                    bail!("{} decoding is not deterministic across repeats", mode.name())
                }
                Some(_) => {}
                None => first = Some(out),
            }
        }
        let out = first.expect("repeats >= 1");
        let timing = TimingReport::average(&runs)?;
        let bleu = corpus_bleu(&out.hypotheses, &refs)?;
        let path = ws.layout.hypotheses(mode.name());
        io::write_hypotheses(&path, &out.hypotheses, &vocab.target)?;
        let selector = match (mode, &loaded.selector, &loaded.datastore) {
            (Mode::Gated, Some(sel), Some(ds)) => {
                let ex = selector_examples(&loaded.model, ds, &test, &cfg.knn)?;
                Some(SelectorSummary::from(&evaluate(sel, &ex)?.2))
            }
            _ => None,
        };
        info!(
            "benchmark: {:<16} BLEU {:6.2}  total {:.2}s  overhead {:.2}s",
            mode.name(),
            bleu,
            timing.total_seconds,
            timing.knn_overhead_seconds
        );
        rows.push(ModeRow {
            mode: mode.name().into(),
            bleu,
            retrieval_rate: if timing.steps == 0 { 0.0 } else { timing.retrieval_calls as f64 / timing.steps as f64 },
            timing,
            selector,
            hypotheses: path.strip_prefix(&ws.resolved.root).unwrap_or(&path).to_string_lossy().into_owned(),
        });
        outputs.push(path);
    }
    let mut report = BenchmarkReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        model_checksum: io::checksum_hex(loaded.model.checksum()),
        sentences: sources.len(),
        repeats: cfg.benchmark.repeats,
        rows,
        gated_vs_vanilla: None,
    };
    report.compare();
    let json_path = ws.layout.report("benchmark.json");
    let text_path = ws.layout.report("benchmark.txt");
    io::write_json(&json_path, &report)?;
    io::write_bytes(&text_path, report.render().as_bytes())?;
    outputs.push(json_path);
    outputs.push(text_path);
    let m = ws.manifest(Stage::Benchmark, Some(&loaded.model));
    Ok((ws.finish(m, &outputs)?, report))
}

fn outcomes(ws: &Workspace) -> Result<(ToyModel, Vec<gknn_core::evalbench::RevisionOutcome>, VocabFile)> {
    let vocab = ws.vocab()?;
    let model = ws.model()?;
    let ds = ws.datastore(&model)?;
    let test = ws.split(&vocab, true, Split::Test)?;
    let out = revision_outcomes(&model, &ds, &test, &ws.config().knn)?;
    Ok((model, out, vocab))
}

pub fn measure_redundancy_stage(ws: &Workspace) -> Result<(Manifest, RedundancyReport)> {
    let (model, out, _) = outcomes(ws)?;
    let hyper = ws.config().knn;
    let report = RedundancyReport {
        domain: ws.config().shifted.name.clone(),
        split: "test".into(),
        positions: out.len(),
        unchanged: out.iter().filter(|o| o.unchanged()).count(),
        ratio: redundancy_ratio(&out)?,
        lambda: hyper.lambda,
        temperature: hyper.temperature,
        k: hyper.k,
    };
    info!("measure-redundancy: {:.4} of {} positions unchanged", report.ratio, report.positions);
    let path = ws.layout.report("redundancy.json");
    io::write_json(&path, &report)?;
    let m = ws.manifest(Stage::MeasureRedundancy, Some(&model));
    Ok((ws.finish(m, &[path])?, report))
}

pub fn futile_tokens_stage(ws: &Workspace) -> Result<Manifest> {
    let (model, out, vocab) = outcomes(ws)?;
    let rows: Vec<FutileRow> = futile_token_ranking(&out, ws.config().futile_top_n)
        .into_iter()
        .enumerate()
        .map(|(i, f)| FutileRow {
            rank: i + 1,
            token: vocab.target.token(f.token).to_string(),
            id: f.token,
            futile: f.futile,
            occurrences: f.occurrences,
        })
        .collect();
    let path = ws.layout.report("futile_tokens.csv");
    io::write_csv(&path, &rows)?;
    let m = ws.manifest(Stage::FutileTokens, Some(&model));
    ws.finish(m, &[path])
}

/// Extra inputs only `translate` takes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

pub fn run(stage: Stage, ws: &Workspace, opts: &RunOptions) -> Result<Manifest> {
    if stage != Stage::Translate && (opts.input.is_some() || opts.output.is_some()) {
        bail!("--input/--output apply to translate only");
    }
    let m = match stage {
        Stage::GenData => gen_data(ws),
        Stage::TrainModel => train_model_stage(ws),
        Stage::BuildDatastore => build_datastore_stage(ws),
        Stage::TrainMetaK => train_meta_k_stage(ws),
        Stage::TrainSelector => train_selector_stage(ws),
        Stage::Translate => translate_stage(ws, opts.input.as_deref(), opts.output.as_deref()),
        Stage::Benchmark => benchmark_stage(ws).map(|(m, _)| m),
        Stage::MeasureRedundancy => measure_redundancy_stage(ws).map(|(m, _)| m),
        Stage::FutileTokens => futile_tokens_stage(ws),
    };
    m.with_context(|| format!("{} failed", stage.name()))
}

/// Stages of the default end-to-end run, in dependency order.
pub const PIPELINE: [Stage; 8] = [
    Stage::GenData,
    Stage::TrainModel,
    Stage::BuildDatastore,
    Stage::TrainMetaK,
    Stage::TrainSelector,
    Stage::MeasureRedundancy,
    Stage::FutileTokens,
    Stage::Benchmark,
];
