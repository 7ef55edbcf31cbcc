//! Metrics: corpus BLEU, redundancy of retrieval, gate confusion counts,
//! timing aggregation, and the futile-retrieval token ranking.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datastore::Datastore;
use crate::error::{bail, Result};
use crate::knnprob::{interpolate, knn_distribution, Hyperparams};
use crate::model::ToyModel;
use crate::numerics::argmax;
use crate::selector::{Gate, GateDecision, GateLabel};
use crate::toygen::EncodedPair;
use crate::TokenId;

const MAX_ORDER: usize = 4;

/// Token-level corpus BLEU in [0, 100]: clipped 1..4-gram precisions with
/// uniform weights and the brevity penalty.
pub fn corpus_bleu<S: AsRef<[T]>, T: Ord + Clone>(hyps: &[S], refs: &[S]) -> Result<f64> {
    if hyps.len() != refs.len() {
        bail!(Input, "{} hypotheses for {} references", hyps.len(), refs.len());
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 || matches.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_prec: f64 = (0..MAX_ORDER)
        .map(|i| libm::log(matches[i] as f64 / totals[i] as f64))
        .sum::<f64>()
        / MAX_ORDER as f64;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    Ok(100.0 * bp * libm::exp(log_prec))
}

fn ngram_counts<T: Ord + Clone>(s: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Confusion counts with "requires retrieval" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl SelectorReport {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// Fraction of tokens routed to retrieval.
    pub fn retrieving_ratio(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.fp) as f64 / self.total() as f64
        }
    }

    /// Fraction of tokens whose label is "retrieve"; the precision of an
    /// always-retrieve gate.
    pub fn base_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.fn_) as f64 / self.total() as f64
        }
    }
}

pub fn selector_metrics(decisions: &[GateDecision], labels: &[GateLabel]) -> Result<SelectorReport> {
    if decisions.len() != labels.len() {
        bail!(Input, "{} decisions for {} labels", decisions.len(), labels.len());
    }
    let mut r = SelectorReport::default();
    for (&d, &l) in decisions.iter().zip(labels) {
        match (d, l) {
            (Gate::Retrieve, Gate::Retrieve) => r.tp += 1,
            (Gate::Retrieve, Gate::Skip) => r.fp += 1,
            (Gate::Skip, Gate::Skip) => r.tn += 1,
            (Gate::Skip, Gate::Retrieve) => r.fn_ += 1,
        }
    }
    Ok(r)
}

/// Fraction of decisions that retrieve.
pub fn retrieving_ratio(decisions: &[GateDecision]) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    decisions.iter().filter(|&&d| d == Gate::Retrieve).count() as f64 / decisions.len() as f64
}

/// One teacher-forced position's argmax before and after kNN revision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionOutcome {
    pub gold: TokenId,
    pub mt_argmax: TokenId,
    pub combined_argmax: TokenId,
}

impl RevisionOutcome {
    pub fn unchanged(&self) -> bool {
        self.mt_argmax == self.combined_argmax
    }
}

/// Teacher-forced argmax of `p_MT` and of the interpolated distribution at
/// every position of `corpus`.
pub fn revision_outcomes(
    model: &ToyModel,
    ds: &Datastore,
    corpus: &[EncodedPair],
    hyper: &Hyperparams,
) -> Result<Vec<RevisionOutcome>> {
    hyper.validate()?;
    let vocab = model.dims.tgt_vocab;
    let mut out = Vec::new();
    for pair in corpus {
        for rec in model.teacher_forced_pass(pair)? {
            let nb = ds.knn_search(&rec.hidden, hyper.k)?;
            let mt_argmax = argmax(&rec.probs) as TokenId;
            let combined_argmax = if nb.is_empty() {
                mt_argmax
            } else {
                let knn = knn_distribution(&nb, hyper.temperature, vocab)?;
                argmax(&interpolate(&rec.probs, &knn, hyper.lambda)?) as TokenId
            };
            out.push(RevisionOutcome {
                gold: rec.gold,
                mt_argmax,
                combined_argmax,
            });
        }
    }
    Ok(out)
}

/// Fraction of positions whose argmax survives kNN revision.
pub fn redundancy_ratio(outcomes: &[RevisionOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        bail!(Input, "redundancy of an empty corpus");
    }
    Ok(outcomes.iter().filter(|o| o.unchanged()).count() as f64 / outcomes.len() as f64)
}

pub fn measure_redundancy(
    model: &ToyModel,
    ds: &Datastore,
    corpus: &[EncodedPair],
    hyper: &Hyperparams,
) -> Result<f64> {
    if corpus.is_empty() {
        bail!(Input, "redundancy of an empty corpus");
    }
    redundancy_ratio(&revision_outcomes(model, ds, corpus, hyper)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FutileToken {
    pub token: TokenId,
    /// Positions with this gold token where retrieval left the argmax as is.
    pub futile: usize,
    pub occurrences: usize,
}

/// Gold tokens ranked by futile-retrieval count (descending), then by id.
pub fn futile_token_ranking(outcomes: &[RevisionOutcome], top_n: usize) -> Vec<FutileToken> {
    let mut by_token: BTreeMap<TokenId, (usize, usize)> = BTreeMap::new();
    for o in outcomes {
        let e = by_token.entry(o.gold).or_insert((0, 0));
        e.0 += o.unchanged() as usize;
        e.1 += 1;
    }
    let mut out: Vec<FutileToken> = by_token
        .into_iter()
        .map(|(token, (futile, occurrences))| FutileToken {
            token,
            futile,
            occurrences,
        })
        .collect();
    out.sort_by(|a, b| b.futile.cmp(&a.futile).then(a.token.cmp(&b.token)));
    out.truncate(top_n);
    out
}

pub fn futile_token_report(
    model: &ToyModel,
    ds: &Datastore,
    corpus: &[EncodedPair],
    hyper: &Hyperparams,
    top_n: usize,
) -> Result<Vec<FutileToken>> {
    Ok(futile_token_ranking(&revision_outcomes(model, ds, corpus, hyper)?, top_n))
}

/// Wall-clock accounting for one decoding run, or the mean of several.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub total_seconds: f64,
    pub model_seconds: f64,
    /// Gate + retrieval + distribution revision.
    pub knn_overhead_seconds: f64,
    pub tokens: usize,
    pub steps: usize,
    pub retrieval_calls: usize,
    pub runs: usize,
}

impl TimingReport {
    pub fn tokens_per_second(&self) -> f64 {
        if self.total_seconds > 0.0 {
            self.tokens as f64 / self.total_seconds
        } else {
            0.0
        }
    }

    /// Field-wise mean; counts must agree across runs (decoding is
    /// deterministic).
    pub fn average(runs: &[TimingReport]) -> Result<TimingReport> {
        let Some(first) = runs.first() else {
            bail!(Input, "no runs to average");
        };
        if runs
            .iter()
            .any(|r| r.tokens != first.tokens || r.retrieval_calls != first.retrieval_calls || r.steps != first.steps)
        {
            bail!(Contract, "repeated runs disagree on token or retrieval counts");
        }
        let n = runs.len() as f64;
        let mean = |f: fn(&TimingReport) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Ok(TimingReport {
            total_seconds: mean(|r| r.total_seconds),
            model_seconds: mean(|r| r.model_seconds),
            knn_overhead_seconds: mean(|r| r.knn_overhead_seconds),
            tokens: first.tokens,
            steps: first.steps,
            retrieval_calls: first.retrieval_calls,
            runs: runs.iter().map(|r| r.runs.max(1)).sum(),
        })
    }
}

/// `100 · (gated − vanilla) / vanilla`; negative means a reduction.
pub fn overhead_change_percent(vanilla: f64, gated: f64) -> Option<f64> {
    (vanilla > 0.0).then(|| 100.0 * (gated - vanilla) / vanilla)
}

/// Table cell such as `1.23 (-40.3%)`.
pub fn format_with_change(value: f64, change: Option<f64>) -> String {
    match change {
        Some(c) => alloc::format!("{value:.2} ({c:+.1}%)"),
        None => alloc::format!("{value:.2}"),
    }
}
