//! Benchmark and evaluation reports: JSON documents plus aligned text tables.

use std::fmt::Write as _;

use gknn_core::evalbench::{format_with_change, overhead_change_percent, SelectorReport, TimingReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorSummary {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub retrieving_ratio: f64,
    pub base_rate: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl From<&SelectorReport> for SelectorSummary {
    fn from(r: &SelectorReport) -> Self {
        Self {
            precision: r.precision(),
            recall: r.recall(),
            retrieving_ratio: r.retrieving_ratio(),
            base_rate: r.base_rate(),
            tp: r.tp,
            fp: r.fp,
            tn: r.tn,
            fn_: r.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: String,
    pub bleu: f64,
    /// Mean over the repeated runs.
    pub timing: TimingReport,
    /// Retrieval calls per decoding step.
    pub retrieval_rate: f64,
    /// Teacher-forced selector metrics on the same split (gated rows only).
    pub selector: Option<SelectorSummary>,
    pub hypotheses: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatedVsVanilla {
    pub retrieval_call_ratio: f64,
    pub overhead_change_percent: Option<f64>,
    pub total_change_percent: Option<f64>,
    /// (gated − pure) / (vanilla − pure) BLEU; absent without a pure row or
    /// when vanilla does not beat pure.
    pub bleu_gain_retained: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config_hash: String,
    pub seed: u64,
    pub model_checksum: String,
    pub sentences: usize,
    pub repeats: usize,
    pub rows: Vec<ModeRow>,
    pub gated_vs_vanilla: Option<GatedVsVanilla>,
}

impl BenchmarkReport {
    pub fn row(&self, mode: &str) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Fills `gated_vs_vanilla` from the rows.
    pub fn compare(&mut self) {
        let (Some(v), Some(g)) = (self.row("vanilla"), self.row("gated")) else {
            self.gated_vs_vanilla = None;
            return;
        };
        let retained = self.row("pure").and_then(|p| {
            let gain = v.bleu - p.bleu;
            (gain > 0.0).then(|| (g.bleu - p.bleu) / gain)
        });
        let ratio = if v.timing.retrieval_calls == 0 {
            0.0
        } else {
            g.timing.retrieval_calls as f64 / v.timing.retrieval_calls as f64
        };
        self.gated_vs_vanilla = Some(GatedVsVanilla {
            retrieval_call_ratio: ratio,
            overhead_change_percent: overhead_change_percent(
                v.timing.knn_overhead_seconds,
                g.timing.knn_overhead_seconds,
            ),
            total_change_percent: overhead_change_percent(v.timing.total_seconds, g.timing.total_seconds),
            bleu_gain_retained: retained,
        });
    }

    /// Time, quality and selector tables as plain text.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let vanilla = self.row("vanilla").map(|r| r.timing);
        let _ = writeln!(
            s,
            "Time in seconds ({} sentences, mean of {} runs)",
            self.sentences, self.repeats
        );
        let _ = writeln!(
            s,
            "{:<16} {:>16} {:>16} {:>10} {:>10} {:>16}",
            "mode", "total", "kNN overhead", "model", "tokens/s", "retrieval calls"
        );
        for r in &self.rows {
            let t = &r.timing;
            let (total, over) = match (vanilla, r.mode.as_str()) {
                (Some(v), "gated") => (
                    format_with_change(t.total_seconds, overhead_change_percent(v.total_seconds, t.total_seconds)),
                    format_with_change(
                        t.knn_overhead_seconds,
                        overhead_change_percent(v.knn_overhead_seconds, t.knn_overhead_seconds),
                    ),
                ),
                _ => (format_with_change(t.total_seconds, None), format_with_change(t.knn_overhead_seconds, None)),
            };
            let _ = writeln!(
                s,
                "{:<16} {:>16} {:>16} {:>10.2} {:>10.1} {:>16}",
                r.mode,
                total,
                over,
                t.model_seconds,
                t.tokens_per_second(),
                format!("{}/{}", t.retrieval_calls, t.steps)
            );
        }
        let pure = self.row("pure").map(|r| r.bleu);
        let _ = writeln!(s, "\nBLEU");
        let _ = writeln!(s, "{:<16} {:>8} {:>10}", "mode", "BLEU", "vs pure");
        for r in &self.rows {
            let delta = pure.map_or_else(String::new, |p| format!("{:+.2}", r.bleu - p));
            let _ = writeln!(s, "{:<16} {:>8.2} {:>10}", r.mode, r.bleu, delta);
        }
        let selectors: Vec<_> = self.rows.iter().filter_map(|r| r.selector.map(|x| (&r.mode, x))).collect();
        if !selectors.is_empty() {
            let _ = writeln!(s, "\nSelector");
            let _ = writeln!(
                s,
                "{:<16} {:>10} {:>10} {:>16} {:>10}",
                "mode", "precision", "recall", "retrieving ratio", "base rate"
            );
            for (mode, x) in selectors {
                let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
                let _ = writeln!(
                    s,
                    "{:<16} {:>10} {:>10} {:>16.3} {:>10.3}",
                    mode,
                    opt(x.precision),
                    opt(x.recall),
                    x.retrieving_ratio,
                    x.base_rate
                );
            }
        }
        if let Some(c) = &self.gated_vs_vanilla {
            let _ = writeln!(s, "\nGated vs vanilla: retrieval calls x{:.3}", c.retrieval_call_ratio);
            if let Some(k) = c.bleu_gain_retained {
                let _ = writeln!(s, "BLEU gain over pure retained: {:.1}%", 100.0 * k);
            }
        }
        s
    }
}

/// Teacher-forced redundancy measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub domain: String,
    pub split: String,
    pub positions: usize,
    pub unchanged: usize,
    pub ratio: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutileRow {
    pub rank: usize,
    pub token: String,
    pub id: u32,
    pub futile: usize,
    pub occurrences: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub loss: f64,
}
