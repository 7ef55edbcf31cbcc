//! Decoding: one gated step, greedy and beam search, and corpus translation
//! with per-region timing.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datastore::Datastore;
use crate::error::{bail, Result};
use crate::evalbench::TimingReport;
use crate::knnprob::{interpolate, knn_distribution, meta_k_combine, Hyperparams, MetaKNet};
use crate::model::{SourceContext, ToyModel};
use crate::numerics::{argmax, softmax_unchecked};
use crate::selector::{Gate, Selector};
use crate::{TokenId, BOS, EOS, PAD};

/// Monotonic time source in nanoseconds.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

/// Clock that never advances; for runs where timing is irrelevant.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_ns(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pure,
    Vanilla,
    Adaptive,
    Gated,
    /// Gate replaced by a constant decision.
    Forced(Gate),
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pure => "pure",
            Mode::Vanilla => "vanilla",
            Mode::Adaptive => "adaptive",
            Mode::Gated => "gated",
            Mode::Forced(Gate::Retrieve) => "forced-retrieve",
            Mode::Forced(Gate::Skip) => "forced-skip",
        }
    }
}

/// Frozen pieces a decoding mode may need.
#[derive(Debug, Clone, Copy)]
pub struct Components<'a> {
    pub model: &'a ToyModel,
    pub datastore: Option<&'a Datastore>,
    pub selector: Option<&'a Selector>,
    pub meta_k: Option<&'a MetaKNet>,
}

impl<'a> Components<'a> {
    pub fn new(model: &'a ToyModel) -> Self {
        Self {
            model,
            datastore: None,
            selector: None,
            meta_k: None,
        }
    }

    /// Checks that everything `mode` needs is present.
    pub fn check(&self, mode: Mode) -> Result<()> {
        let needs_ds = !matches!(mode, Mode::Pure | Mode::Forced(Gate::Skip));
        if needs_ds && self.datastore.is_none() {
            bail!(Config, "{} decoding needs a datastore", mode.name());
        }
        if mode == Mode::Gated && self.selector.is_none() {
            bail!(Config, "gated decoding needs a trained selector");
        }
        if mode == Mode::Adaptive && self.meta_k.is_none() {
            bail!(Config, "adaptive decoding needs a trained Meta-k network");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: Mode,
    pub beam: usize,
    /// Fixed cap on generated tokens; `None` uses `2 · |source| + 8`.
    pub max_len: Option<usize>,
    pub hyper: Hyperparams,
    /// Report only the steps on the returned hypothesis instead of every
    /// evaluated step.
    pub surviving_only: bool,
}

impl DecodeConfig {
    pub fn new(mode: Mode, hyper: Hyperparams) -> Self {
        Self {
            mode,
            beam: 4,
            max_len: None,
            hyper,
            surviving_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            bail!(Parameter, "beam must be >= 1");
        }
        if self.max_len == Some(0) {
            bail!(Parameter, "max length must be >= 1");
        }
        self.hyper.validate()
    }

    pub fn max_len_for(&self, source_len: usize) -> usize {
        self.max_len.unwrap_or(2 * source_len + 8)
    }
}

/// Nanoseconds spent in each instrumented region of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTimes {
    pub model_ns: u64,
    pub gate_ns: u64,
    pub retrieval_ns: u64,
    pub mix_ns: u64,
}

impl StepTimes {
    pub fn overhead_ns(&self) -> u64 {
        self.gate_ns + self.retrieval_ns + self.mix_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub decision: Option<Gate>,
    pub retrieved: bool,
    /// Argmax of the step's final distribution; on surviving-path traces, the
    /// token the hypothesis actually appended.
    pub token: TokenId,
    pub times: StepTimes,
}

/// Final distribution for the next token after `prefix` (which starts with
/// BOS), following the gate where the mode has one.
pub fn decode_step(
    comp: &Components,
    mode: Mode,
    hyper: &Hyperparams,
    ctx: &SourceContext,
    prefix: &[TokenId],
    clock: &dyn Clock,
) -> Result<(Vec<f32>, StepTrace)> {
    comp.check(mode)?;
    let mut times = StepTimes::default();
    let t0 = clock.now_ns();
    let act = comp.model.step(ctx, prefix)?;
    let p_mt = softmax_unchecked(&act.logits);
    times.model_ns = clock.now_ns().saturating_sub(t0);

    let decision = match mode {
        Mode::Pure | Mode::Vanilla | Mode::Adaptive => None,
        Mode::Forced(g) => Some(g),
        Mode::Gated => {
            let t = clock.now_ns();
            let sel = comp.selector.expect("checked");
            let g = sel.decide(&act.hidden)?;
            times.gate_ns = clock.now_ns().saturating_sub(t);
            Some(g)
        }
    };
    let retrieve = match mode {
        Mode::Pure => false,
        Mode::Vanilla | Mode::Adaptive => true,
        Mode::Gated | Mode::Forced(_) => decision == Some(Gate::Retrieve),
    };

    let p_final = if retrieve {
        let ds = comp.datastore.expect("checked");
        let k = if mode == Mode::Adaptive { hyper.k_max_adaptive } else { hyper.k };
        let t = clock.now_ns();
        let nb = if ds.is_empty() { Default::default() } else { ds.knn_search(&act.hidden, k)? };
        times.retrieval_ns = clock.now_ns().saturating_sub(t);
        let t = clock.now_ns();
        let vocab = p_mt.len();
        let p = if nb.is_empty() {
            p_mt
        } else if mode == Mode::Adaptive {
            meta_k_combine(comp.meta_k.expect("checked"), &p_mt, &nb, hyper.temperature, vocab)?
        } else {
            interpolate(&p_mt, &knn_distribution(&nb, hyper.temperature, vocab)?, hyper.lambda)?
        };
        times.mix_ns = clock.now_ns().saturating_sub(t);
        p
    } else {
        p_mt
    };
    let trace = StepTrace {
        decision,
        retrieved: retrieve,
        token: argmax(&p_final) as TokenId,
        times,
    };
    Ok((p_final, trace))
}

/// PAD and BOS are never generated.
fn can_emit(t: usize) -> bool {
    t != PAD as usize && t != BOS as usize
}

fn best_emittable(p: &[f32]) -> TokenId {
    let mut best = None;
    for (t, &v) in p.iter().enumerate() {
        if can_emit(t) && best.map_or(true, |(_, b)| v > b) {
            best = Some((t, v));
        }
    }
    best.map_or(EOS, |(t, _)| t as TokenId)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    /// Generated tokens without BOS/EOS.
    pub tokens: Vec<TokenId>,
    /// Length-normalized log-probability of the returned hypothesis.
    pub score: f64,
    /// Normalized scores of every completed hypothesis, best first.
    pub final_scores: Vec<f64>,
    pub traces: Vec<StepTrace>,
}

/// Argmax decoding.
pub fn greedy(comp: &Components, cfg: &DecodeConfig, src: &[TokenId], clock: &dyn Clock) -> Result<Translation> {
    cfg.validate()?;
    comp.check(cfg.mode)?;
    let ctx = comp.model.encode_source(src)?;
    let max_len = cfg.max_len_for(src.len());
    let mut prefix = vec![BOS];
    let mut logp = 0.0f64;
    let mut traces = Vec::new();
    while prefix.len() <= max_len {
        let (p, mut trace) = decode_step(comp, cfg.mode, &cfg.hyper, &ctx, &prefix, clock)?;
        let t = best_emittable(&p);
        logp += libm::log(p[t as usize] as f64);
        trace.token = t;
        traces.push(trace);
        prefix.push(t);
        if t == EOS {
            break;
        }
    }
    let score = logp / (prefix.len() - 1) as f64;
    let tokens = strip(&prefix);
    Ok(Translation {
        tokens,
        score,
        final_scores: vec![score],
        traces,
    })
}

fn strip(prefix: &[TokenId]) -> Vec<TokenId> {
    prefix[1..].iter().copied().filter(|&t| t != EOS).collect()
}

#[derive(Clone)]
struct Hyp {
    prefix: Vec<TokenId>,
    logp: f64,
    path: Vec<StepTrace>,
}

impl Hyp {
    fn normalized(&self) -> f64 {
        self.logp / (self.prefix.len() - 1) as f64
    }
}

/// Beam search over cumulative log-probability. Each step keeps the `beam`
/// best (hypothesis, token) extensions, ties broken by hypothesis then token
/// index; extensions ending in EOS are set aside. Search stops once `beam`
/// hypotheses have finished or the length cap is hit. The result is the
/// finished hypothesis with the best length-normalized score (EOS counts
/// toward the length). With `beam = 1` this is exactly [`greedy`].
pub fn beam_search(comp: &Components, cfg: &DecodeConfig, src: &[TokenId], clock: &dyn Clock) -> Result<Translation> {
    cfg.validate()?;
    comp.check(cfg.mode)?;
    let ctx = comp.model.encode_source(src)?;
    let max_len = cfg.max_len_for(src.len());
    let mut live = vec![Hyp {
        prefix: vec![BOS],
        logp: 0.0,
        path: Vec::new(),
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    let mut evaluated = Vec::new();
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    while !live.is_empty() && finished.len() < cfg.beam {
        if live[0].prefix.len() > max_len {
            finished.append(&mut live);
            break;
        }
        cands.clear();
        let mut step_traces = Vec::with_capacity(live.len());
        for (h, hyp) in live.iter().enumerate() {
            let (p, trace) = decode_step(comp, cfg.mode, &cfg.hyper, &ctx, &hyp.prefix, clock)?;
            evaluated.push(trace);
            step_traces.push(trace);
            for (t, &v) in p.iter().enumerate() {
                if can_emit(t) && v > 0.0 {
                    cands.push((hyp.logp + libm::log(v as f64), h, t));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam);
        for &(logp, h, t) in cands.iter().take(cfg.beam) {
            let parent = &live[h];
            let mut prefix = parent.prefix.clone();
            prefix.push(t as TokenId);
            let mut path = parent.path.clone();
            path.push(StepTrace {
                token: t as TokenId,
                ..step_traces[h]
            });
            let hyp = Hyp { prefix, logp, path };
            if t as TokenId == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    // stable: equal scores keep completion order
    finished.sort_by(|a, b| b.normalized().total_cmp(&a.normalized()));
    let Some(best) = finished.first() else {
        bail!(Contract, "beam search produced no hypothesis");
    };
    Ok(Translation {
        tokens: strip(&best.prefix),
        score: best.normalized(),
        final_scores: finished.iter().map(Hyp::normalized).collect(),
        traces: if cfg.surviving_only { best.path.clone() } else { evaluated },
    })
}

/// Per-corpus decoding output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusTranslation {
    pub hypotheses: Vec<Vec<TokenId>>,
    pub timing: TimingReport,
    /// Gate decisions of every counted step, in decoding order.
    pub decisions: Vec<Gate>,
}

/// Decodes each source in order (single-threaded) and aggregates the step
/// traces into a [`TimingReport`].
pub fn translate_corpus(
    comp: &Components,
    cfg: &DecodeConfig,
    sources: &[&[TokenId]],
    clock: &dyn Clock,
) -> Result<CorpusTranslation> {
    cfg.validate()?;
    comp.check(cfg.mode)?;
    let start = clock.now_ns();
    let mut hypotheses = Vec::with_capacity(sources.len());
    let mut traces = Vec::new();
    for src in sources {
        let t = beam_search(comp, cfg, src, clock)?;
        hypotheses.push(t.tokens);
        traces.extend(t.traces);
    }
    let total_ns = clock.now_ns().saturating_sub(start);
    let ns = |v: u64| v as f64 * 1e-9;
    let timing = TimingReport {
        total_seconds: ns(total_ns),
        model_seconds: ns(traces.iter().map(|t| t.times.model_ns).sum()),
        knn_overhead_seconds: ns(traces.iter().map(|t| t.times.overhead_ns()).sum()),
        tokens: hypotheses.iter().map(|h| h.len() + 1).sum(),
        steps: traces.len(),
        retrieval_calls: traces.iter().filter(|t| t.retrieved).count(),
        runs: 1,
    };
    Ok(CorpusTranslation {
        hypotheses,
        timing,
        decisions: traces.iter().filter_map(|t| t.decision).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::DatastoreMeta;
    use crate::model::ModelDims;
    use core::cell::Cell;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn setup() -> (ToyModel, Datastore, Selector) {
        let dims = ModelDims { src_vocab: 12, tgt_vocab: 10, embed: 4, hidden: 6 };
        let model = ToyModel::new(dims, 0.5, 3).freeze();
        let mut rng = crate::rng_from_seed(4);
        let mut ds = Datastore::new(6, DatastoreMeta::default());
        for _ in 0..50 {
            let key: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ds.push(&key, rng.gen_range(4..10)).unwrap();
        }
        let sel = Selector::new(6, 6, 8);
        (model, ds, sel)
    }

    fn comps<'a>(m: &'a ToyModel, ds: &'a Datastore, sel: &'a Selector) -> Components<'a> {
        Components { model: m, datastore: Some(ds), selector: Some(sel), meta_k: None }
    }

    fn hyper() -> Hyperparams {
        Hyperparams { lambda: 0.7, temperature: 1.0, k: 4, k_max_adaptive: 2 }
    }

    #[test]
    fn forced_skip_is_bitwise_p_mt() {
        let (m, ds, sel) = setup();
        let c = comps(&m, &ds, &sel);
        let ctx = m.encode_source(&[4, 5, 6]).unwrap();
        let (p, tr) = decode_step(&c, Mode::Forced(Gate::Skip), &hyper(), &ctx, &[BOS, 5], &NullClock).unwrap();
        let (_, p_mt) = m.forward(&[4, 5, 6], &[BOS, 5]).unwrap();
        assert_eq!(p, p_mt);
        assert!(!tr.retrieved);
    }

    #[test]
    fn forced_retrieve_is_interpolation_and_matches_vanilla() {
        let (m, ds, sel) = setup();
        let c = comps(&m, &ds, &sel);
        let h = hyper();
        let ctx = m.encode_source(&[4, 5, 6]).unwrap();
        let (p, tr) = decode_step(&c, Mode::Forced(Gate::Retrieve), &h, &ctx, &[BOS], &NullClock).unwrap();
        let (hid, p_mt) = m.forward(&[4, 5, 6], &[BOS]).unwrap();
        let nb = ds.knn_search(&hid, h.k).unwrap();
        let expected = interpolate(&p_mt, &knn_distribution(&nb, h.temperature, 10).unwrap(), h.lambda).unwrap();
        assert_eq!(p, expected);
        assert!(tr.retrieved);
        let (pv, _) = decode_step(&c, Mode::Vanilla, &h, &ctx, &[BOS], &NullClock).unwrap();
        assert_eq!(p, pv);
    }

    #[test]
    fn empty_datastore_falls_back_to_model() {
        let (m, _, sel) = setup();
        let empty = Datastore::new(6, DatastoreMeta::default());
        let c = comps(&m, &empty, &sel);
        let ctx = m.encode_source(&[4]).unwrap();
        let (p, _) = decode_step(&c, Mode::Vanilla, &hyper(), &ctx, &[BOS], &NullClock).unwrap();
        assert_eq!(p, m.forward(&[4], &[BOS]).unwrap().1);
    }

    #[test]
    fn missing_components_are_config_errors() {
        let (m, ds, _) = setup();
        let c = Components { datastore: Some(&ds), ..Components::new(&m) };
        let ctx = m.encode_source(&[4]).unwrap();
        for mode in [Mode::Gated, Mode::Adaptive] {
            assert!(matches!(decode_step(&c, mode, &hyper(), &ctx, &[BOS], &NullClock), Err(crate::Error::Config(_))));
        }
        let bare = Components::new(&m);
        assert!(matches!(decode_step(&bare, Mode::Vanilla, &hyper(), &ctx, &[BOS], &NullClock), Err(crate::Error::Config(_))));
        assert!(decode_step(&bare, Mode::Pure, &hyper(), &ctx, &[BOS], &NullClock).is_ok());
    }

    #[test]
    fn beam_one_equals_greedy() {
        let (m, ds, sel) = setup();
        let c = comps(&m, &ds, &sel);
        for mode in [Mode::Pure, Mode::Vanilla, Mode::Gated] {
            let cfg = DecodeConfig { beam: 1, ..DecodeConfig::new(mode, hyper()) };
            for src in [&[4u32, 5, 6][..], &[7, 8], &[11, 10, 9, 4, 4]] {
                let b = beam_search(&c, &cfg, src, &NullClock).unwrap();
                let g = greedy(&c, &cfg, src, &NullClock).unwrap();
                assert_eq!(b.tokens, g.tokens);
                assert!((b.score - g.score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beam_scores_sorted_and_length_capped() {
        let (m, ds, sel) = setup();
        let c = comps(&m, &ds, &sel);
        let cfg = DecodeConfig { beam: 3, max_len: Some(5), ..DecodeConfig::new(Mode::Vanilla, hyper()) };
        let t = beam_search(&c, &cfg, &[4, 5, 6], &NullClock).unwrap();
        assert!(t.final_scores.windows(2).all(|w| w[0] >= w[1]));
        assert!(t.tokens.len() <= 5);
        assert_eq!(t.score, t.final_scores[0]);
    }

    #[test]
    fn surviving_only_traces_follow_output() {
        let (m, ds, sel) = setup();
        let c = comps(&m, &ds, &sel);
        let cfg = DecodeConfig { beam: 3, surviving_only: true, ..DecodeConfig::new(Mode::Gated, hyper()) };
        let t = beam_search(&c, &cfg, &[4, 5, 6], &NullClock).unwrap();
        let toks: Vec<TokenId> = t.traces.iter().map(|s| s.token).filter(|&x| x != EOS).collect();
        assert_eq!(toks, t.tokens);
        let all = beam_search(&c, &DecodeConfig { surviving_only: false, ..cfg }, &[4, 5, 6], &NullClock).unwrap();
        assert!(all.traces.len() >= t.traces.len());
    }

    #[test]
    fn corpus_counts_and_mode_equivalences() {
        let (m, ds, sel) = setup();
        let c = comps(&m, &ds, &sel);
        let srcs: Vec<Vec<TokenId>> = vec![vec![4, 5, 6], vec![7, 8], vec![9, 10, 11, 4]];
        let refs: Vec<&[TokenId]> = srcs.iter().map(|s| s.as_slice()).collect();
        let run = |mode| translate_corpus(&c, &DecodeConfig::new(mode, hyper()), &refs, &NullClock).unwrap();
        let pure = run(Mode::Pure);
        let vanilla = run(Mode::Vanilla);
        let gated = run(Mode::Gated);
        assert_eq!(pure.timing.retrieval_calls, 0);
        assert_eq!(pure.timing.knn_overhead_seconds, 0.0);
        assert_eq!(vanilla.timing.retrieval_calls, vanilla.timing.steps);
        let retrieves = gated.decisions.iter().filter(|&&d| d == Gate::Retrieve).count();
        assert_eq!(gated.timing.retrieval_calls, retrieves);
        assert_eq!(run(Mode::Forced(Gate::Retrieve)).hypotheses, vanilla.hypotheses);
        assert_eq!(run(Mode::Forced(Gate::Skip)).hypotheses, pure.hypotheses);
    }

    struct TickClock(Cell<u64>);

    impl Clock for TickClock {
        fn now_ns(&self) -> u64 {
            let v = self.0.get() + 1;
            self.0.set(v);
            v
        }
    }

    #[test]
    fn timing_buckets_bounded_by_total() {
        let (m, ds, sel) = setup();
        let c = comps(&m, &ds, &sel);
        let srcs = [&[4u32, 5][..], &[6, 7, 8]];
        let out = translate_corpus(&c, &DecodeConfig::new(Mode::Vanilla, hyper()), &srcs, &TickClock(Cell::new(0))).unwrap();
        let t = out.timing;
        assert!(t.knn_overhead_seconds > 0.0);
        assert!(t.knn_overhead_seconds + t.model_seconds <= t.total_seconds);
    }

    proptest! {
        #[test]
        fn step_output_normalized_in_every_mode(src in prop::collection::vec(4u32..12, 1..6), y in prop::collection::vec(3u32..10, 0..4)) {
            let (m, ds, sel) = setup();
            let meta: MetaKNet = MetaKNet::new(2, 4, 1);
            let c = Components { meta_k: Some(&meta), ..comps(&m, &ds, &sel) };
            let ctx = m.encode_source(&src).unwrap();
            let mut prefix = vec![BOS];
            prefix.extend(y);
            for mode in [Mode::Pure, Mode::Vanilla, Mode::Adaptive, Mode::Gated, Mode::Forced(Gate::Retrieve)] {
                let (p, _) = decode_step(&c, mode, &hyper(), &ctx, &prefix, &NullClock).unwrap();
                let s: f64 = p.iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
