//! End-to-end acceptance run: one PASS/FAIL line per criterion. Exits non-zero
//! when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use gknn::artifacts::read_json;
use gknn::pipeline::{Workspace, PIPELINE};
use gknn::report::{BenchmarkReport, RedundancyReport};
use gknn_core::datastore::{Datastore, DatastoreMeta, Neighbor, NeighborSet};
use gknn_core::decode::{decode_step, Components, Mode, NullClock};
use gknn_core::evalbench::{corpus_bleu, revision_outcomes};
use gknn_core::knnprob::{interpolate, knn_distribution, meta_k_combine, Hyperparams, MetaKNet};
use gknn_core::model::{ModelDims, ToyModel};
use gknn_core::numerics::{argmax, finite_diff_grad, max_relative_error, squared_l2, GumbelSample};
use gknn_core::selector::{selector_forward, selector_loss, Gate, GatePath, LossMode, Selector, SelectorExample};
use gknn_core::toygen::Split;
use gknn_core::{rng_from_seed, Rng, TokenId, BOS, EOS};
use rand::Rng as _;

const BIN: &str = env!("CARGO_BIN_EXE_gknn");

fn gknn(dir: &Path, stage: &str, sets: &[&str]) -> Result<()> {
    let mut cmd = Command::new(BIN);
    cmd.arg(stage).arg("--config").arg(dir.join("config.json"));
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    let out = cmd.env_remove("GKNN_SEED").env("RUST_LOG", "warn").output()?;
    if !out.status.success() {
        bail!("gknn {stage} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn pipeline(dir: &Path) -> Result<Duration> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), "{}\n")?;
    let t = Instant::now();
    for stage in PIPELINE {
        gknn(dir, stage.name(), &[])?;
    }
    Ok(t.elapsed())
}

fn workspace(dir: &Path) -> Result<Workspace> {
    Ok(Workspace::new(gknn::load(Some(&dir.join("config.json")), &[], None)?))
}

fn within_one(p: &[f32], tol: f64) -> Result<()> {
    let s: f64 = p.iter().map(|&x| x as f64).sum();
    ensure!((s - 1.0).abs() <= tol, "sum {s}");
    ensure!(p.iter().all(|&x| x >= 0.0 && x.is_finite()), "negative or non-finite entry");
    Ok(())
}

fn random_ds(rng: &mut Rng, n: usize, d: usize, vocab: u32) -> Datastore {
    let mut ds = Datastore::new(d, DatastoreMeta::default());
    for _ in 0..n {
        let key: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ds.push(&key, rng.gen_range(0..vocab)).unwrap();
    }
    ds
}

fn random_logits(rng: &mut Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn softmax64(x: &[f32]) -> Vec<f32> {
    let m = x.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = x.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| (v / s) as f32).collect()
}

fn random_neighbors(rng: &mut Rng, max: usize, vocab: u32) -> NeighborSet {
    let n = rng.gen_range(1..=max);
    let scale = [1.0f32, 100.0, 1e4][rng.gen_range(0..3)];
    let mut entries: Vec<Neighbor> = (0..n)
        .map(|i| Neighbor { distance: rng.gen_range(0.0..scale), value: rng.gen_range(0..vocab), index: i as u32 })
        .collect();
    entries.sort_by(|a, b| a.rank_cmp(b));
    NeighborSet { entries }
}

/// Exhaustive scan: every distance, stable sort by (distance, row).
fn oracle(ds: &Datastore, q: &[f32], k: usize) -> Vec<(f32, u32)> {
    let mut all: Vec<(f32, u32)> = (0..ds.len()).map(|i| (squared_l2(ds.key(i), q), i as u32)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

fn c1_exact_knn() -> Result<String> {
    let mut rng = rng_from_seed(101);
    let mut ds = random_ds(&mut rng, 9_990, 64, 500);
    // duplicated keys force exact distance ties
    for i in 0..10 {
        let key = ds.key(i * 7).to_vec();
        ds.push(&key, 1000 + i as u32).unwrap();
    }
    let t = Instant::now();
    for qi in 0..100 {
        let q: Vec<f32> = if qi % 10 == 0 {
            ds.key(qi * 7 / 10).to_vec()
        } else {
            (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let got: Vec<(f32, u32)> = ds.knn_search(&q, 8)?.entries.iter().map(|n| (n.distance, n.index)).collect();
        let want = oracle(&ds, &q, 8);
        ensure!(got.len() == 8 && got.iter().zip(&want).all(|(a, b)| a.0.to_bits() == b.0.to_bits() && a.1 == b.1), "query {qi}: {got:?} != {want:?}");
        for n in &ds.knn_search(&q, 8)?.entries {
            ensure!(n.value == ds.values()[n.index as usize], "value mismatch at row {}", n.index);
        }
    }
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(10), "took {el:?}");
    Ok(format!("100 queries, N = {}, d = 64, K = 8, identical incl. ties, {:.2?}", ds.len(), el))
}

fn c2_normalisation() -> Result<String> {
    const N: usize = 10_000;
    const TOL: f64 = 1e-6;
    let mut rng = rng_from_seed(202);
    let vocab = 60u32;
    let mut worst: f64 = 0.0;
    let mut track = |p: &[f32]| -> Result<()> {
        within_one(p, TOL)?;
        let s: f64 = p.iter().map(|&x| x as f64).sum();
        worst = worst.max((s - 1.0).abs());
        Ok(())
    };
    for i in 0..N {
        let nb = random_neighbors(&mut rng, 16, vocab);
        let t = [0.5, 10.0, 100.0][i % 3];
        track(&knn_distribution(&nb, t, vocab as usize)?).with_context(|| format!("knn_distribution #{i}"))?;
    }
    for i in 0..N {
        let p_mt = softmax64(&random_logits(&mut rng, vocab as usize, 8.0));
        let p_knn = knn_distribution(&random_neighbors(&mut rng, 8, vocab), 10.0, vocab as usize)?;
        track(&interpolate(&p_mt, &p_knn, rng.gen_range(0.0..=1.0))?).with_context(|| format!("interpolate #{i}"))?;
    }
    for i in 0..N {
        let net: MetaKNet = MetaKNet::new(4, 8, i as u64);
        let p_mt = softmax64(&random_logits(&mut rng, vocab as usize, 8.0));
        let nb = random_neighbors(&mut rng, 4, vocab);
        track(&meta_k_combine(&net, &p_mt, &nb, 10.0, vocab as usize)?).with_context(|| format!("meta_k_combine #{i}"))?;
    }
    let sel: Selector = Selector::new(16, 12, 3);
    for i in 0..N {
        let f = random_logits(&mut rng, 16, [1.0, 10.0, 100.0][i % 3]);
        track(&selector_forward(&sel, &f)?).with_context(|| format!("selector_forward #{i}"))?;
    }
    let dims = ModelDims { src_vocab: 30, tgt_vocab: vocab as usize, embed: 8, hidden: 16 };
    let model: ToyModel = ToyModel::new(dims, 0.5, 5).freeze();
    let ds = random_ds(&mut rng, 400, 16, vocab);
    let net: MetaKNet = MetaKNet::new(4, 8, 6);
    let comp = Components { model: &model, datastore: Some(&ds), selector: Some(&sel), meta_k: Some(&net) };
    let modes = [Mode::Pure, Mode::Vanilla, Mode::Adaptive, Mode::Gated, Mode::Forced(Gate::Retrieve), Mode::Forced(Gate::Skip)];
    for i in 0..N {
        let src: Vec<TokenId> = (0..rng.gen_range(1..12)).map(|_| rng.gen_range(4..30)).collect();
        let ctx = model.encode_source(&src)?;
        let mut prefix = vec![BOS];
        prefix.extend((0..rng.gen_range(0..10)).map(|_| rng.gen_range(4..vocab)));
        let hyper = Hyperparams { lambda: rng.gen_range(0.0..=1.0), temperature: [1.0, 10.0, 100.0][i % 3], ..Default::default() };
        let (p, _) = decode_step(&comp, modes[i % modes.len()], &hyper, &ctx, &prefix, &NullClock)?;
        track(&p).with_context(|| format!("decode_step #{i}"))?;
    }
    Ok(format!("5 x {N} calls, worst |sum - 1| = {worst:.2e}"))
}

fn c3_gradients() -> Result<String> {
    let t = Instant::now();
    let mut worst = [0.0f64; 2];
    for b in 0..20u64 {
        let mut rng = rng_from_seed(300 + b);
        let (d, h, n) = (8, 6, rng.gen_range(4..16));
        let sel: Selector<f64> = Selector::new(d, h, b);
        let batch: Vec<SelectorExample> = (0..n)
            .map(|_| SelectorExample {
                features: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                label: if rng.gen_bool(0.4) { Gate::Retrieve } else { Gate::Skip },
                p_mt_gold: rng.gen_range(0.01..1.0),
                p_comb_gold: rng.gen_range(0.01..1.0),
            })
            .collect();
        let refs: Vec<&SelectorExample> = batch.iter().collect();
        let noise: Vec<[GumbelSample; 2]> = (0..n).map(|_| [GumbelSample::draw(&mut rng), GumbelSample::draw(&mut rng)]).collect();
        for (slot, mode) in [LossMode::CeOnly, LossMode::Joint].into_iter().enumerate() {
            let (_, g) = selector_loss(&sel, &refs, &noise, 0.1, mode, GatePath::Soft)?;
            let numeric = finite_diff_grad(
                |p| {
                    let mut s = sel.clone();
                    s.set_flat_params(p).unwrap();
                    selector_loss(&s, &refs, &noise, 0.1, mode, GatePath::Soft).unwrap().0.total
                },
                &sel.flat_params(),
                1e-6,
            )?;
            let e = max_relative_error(&g.flat_params(), &numeric, 1e-6);
            worst[slot] = worst[slot].max(e);
        }
    }
    let el = t.elapsed();
    ensure!(worst[0] < 1e-3 && worst[1] < 1e-3, "relative errors L1 {:.2e}, joint {:.2e}", worst[0], worst[1]);
    ensure!(el < Duration::from_secs(60), "took {el:?}");
    Ok(format!("20 batches, max rel err L1 {:.2e}, joint (soft, tau 0.1) {:.2e}, {el:.2?}", worst[0], worst[1]))
}

fn c4_mode_equivalence(dir: &Path) -> Result<String> {
    let forced = |gate: &str, out: &str| -> Result<PathBuf> {
        let p = dir.join(out);
        let mode = format!("decode.mode={{\"forced\":\"{gate}\"}}");
        let out_path = p.to_string_lossy().into_owned();
        let mut cmd = Command::new(BIN);
        cmd.args(["translate", "--config"]).arg(dir.join("config.json")).args(["--set", &mode, "--output", &out_path]);
        let o = cmd.env_remove("GKNN_SEED").env("RUST_LOG", "warn").output()?;
        ensure!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        Ok(p)
    };
    let all = fs::read(forced("retrieve", "forced_retrieve.txt")?)?;
    let none = fs::read(forced("skip", "forced_skip.txt")?)?;
    let vanilla = fs::read(dir.join("reports/hypotheses/vanilla.txt"))?;
    let pure = fs::read(dir.join("reports/hypotheses/pure.txt"))?;
    ensure!(all == vanilla, "force-all differs from vanilla");
    ensure!(none == pure, "force-none differs from pure");
    let lines = vanilla.iter().filter(|&&b| b == b'\n').count();
    Ok(format!("force-all == vanilla, force-none == pure on {lines} test sentences"))
}

fn c5_redundancy(dir: &Path) -> Result<String> {
    let r: RedundancyReport = read_json(&dir.join("reports/redundancy.json"))?;
    ensure!((0.55..=0.95).contains(&r.ratio), "redundancy {} outside [0.55, 0.95]", r.ratio);

    let ws = workspace(dir)?;
    let vocab = ws.vocab()?;
    let model = ws.model()?;
    let ds = ws.datastore(&model)?;
    let test = ws.split(&vocab, true, Split::Test)?;
    let hyper = ws.config().knn;
    let zero = revision_outcomes(&model, &ds, &test, &Hyperparams { lambda: 0.0, ..hyper })?;
    ensure!(zero.iter().all(|o| o.unchanged()), "lambda = 0 changed some argmax");

    // brute-force recount of the first 50 positions
    let mut slice = Vec::new();
    'outer: for pair in &test {
        let mut prefix = vec![BOS];
        for gold in pair.target.iter().copied().chain([EOS]) {
            if slice.len() == 50 {
                break 'outer;
            }
            let (hidden, p) = model.forward(&pair.source, &prefix)?;
            let mut d: Vec<(f64, usize)> = (0..ds.len())
                .map(|i| (ds.key(i).iter().zip(&hidden).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>(), i))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let top = &d[..hyper.k.min(d.len())];
            let z: f64 = top.iter().map(|(x, _)| (-(x - top[0].0) / hyper.temperature).exp()).sum();
            let mut comb: Vec<f64> = p.iter().map(|&x| (1.0 - hyper.lambda) * x as f64).collect();
            for (x, i) in top {
                comb[ds.values()[*i] as usize] += hyper.lambda * (-(x - top[0].0) / hyper.temperature).exp() / z;
            }
            let best = comb.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
            slice.push(best == argmax(&p));
            prefix.push(gold);
        }
    }
    let lib = revision_outcomes(&model, &ds, &test[..10.min(test.len())], &hyper)?;
    ensure!(lib.len() >= 50, "need 50 positions");
    let lib_flags: Vec<bool> = lib[..50].iter().map(|o| o.unchanged()).collect();
    ensure!(lib_flags == slice, "recount disagrees with the library on the 50-position slice");
    let count = slice.iter().filter(|&&u| u).count();
    Ok(format!("ratio {:.4} ({} positions), lambda = 0 gives 1.0, 50-position recount {count}/50 matches", r.ratio, r.positions))
}

fn c6_domain_adaptation(b: &BenchmarkReport) -> Result<String> {
    let bleu = |m: &str| b.row(m).map(|r| r.bleu).with_context(|| format!("no {m} row"));
    let (p, v, a) = (bleu("pure")?, bleu("vanilla")?, bleu("adaptive")?);
    ensure!(v >= p + 5.0, "vanilla {v:.2} < pure {p:.2} + 5");
    ensure!(a >= v - 0.5, "adaptive {a:.2} < vanilla {v:.2} - 0.5");
    Ok(format!("BLEU pure {p:.2}, vanilla {v:.2}, adaptive {a:.2}"))
}

fn c7_efficiency(b: &BenchmarkReport) -> Result<String> {
    let c = b.gated_vs_vanilla.context("no gated/vanilla comparison")?;
    let over = c.overhead_change_percent.context("vanilla overhead is zero")?;
    let kept = c.bleu_gain_retained.context("no BLEU gain to retain")?;
    ensure!(c.retrieval_call_ratio <= 0.7, "retrieval calls x{:.3}", c.retrieval_call_ratio);
    ensure!(over <= -20.0, "overhead change {over:+.1}%");
    ensure!(kept >= 0.85, "retained {:.1}% of the BLEU gain", 100.0 * kept);
    ensure!(b.repeats >= 3, "timings averaged over {} runs", b.repeats);
    Ok(format!(
        "retrieval calls x{:.3}, overhead {over:+.1}% (mean of {} runs), BLEU gain retained {:.1}%",
        c.retrieval_call_ratio,
        b.repeats,
        100.0 * kept
    ))
}

fn c8_selector(b: &BenchmarkReport) -> Result<String> {
    let s = b.row("gated").and_then(|r| r.selector).context("no gated selector metrics")?;
    let (p, r) = (s.precision.context("precision undefined")?, s.recall.context("recall undefined")?);
    ensure!(p >= s.base_rate + 0.05, "precision {p:.3} < base rate {:.3} + 0.05", s.base_rate);
    ensure!(r >= 0.7, "recall {r:.3}");
    ensure!((0.3..=0.7).contains(&s.retrieving_ratio), "retrieving ratio {:.3}", s.retrieving_ratio);
    Ok(format!("precision {p:.3} (base rate {:.3}), recall {r:.3}, retrieving ratio {:.3}", s.base_rate, s.retrieving_ratio))
}

fn c9_ablation(dir: &Path, b: &BenchmarkReport) -> Result<String> {
    gknn(dir, "train-selector", &["selector.loss=ce_only"])?;
    let out = dir.join("gated_ce_only.txt");
    let o = Command::new(BIN)
        .args(["translate", "--config"])
        .arg(dir.join("config.json"))
        .args(["--set", "selector.loss=ce_only", "--set", "decode.mode=gated", "--output"])
        .arg(&out)
        .env_remove("GKNN_SEED")
        .env("RUST_LOG", "warn")
        .output()?;
    ensure!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = read_json(&dir.join("reports/translate.manifest.json"))?;
    let ce_bleu = m["details"]["bleu"].as_f64().context("translate manifest lacks BLEU")?;
    let metrics = |loss: &str| -> Result<(f64, f64)> {
        let v: serde_json::Value = read_json(&dir.join(format!("checkpoints/selector.{loss}.eval.json")))?;
        let m = &v["metrics"];
        Ok((m["retrieving_ratio"].as_f64().context("ratio")?, m["recall"].as_f64().context("recall")?))
    };
    let (jr, jc) = metrics("joint")?;
    let (cr, cc) = metrics("ce_only")?;
    let jb = b.row("gated").context("no gated row")?.bleu;
    ensure!(cr < jr, "ce_only ratio {cr:.3} >= joint {jr:.3}");
    ensure!(cc < jc, "ce_only recall {cc:.3} >= joint {jc:.3}");
    ensure!(ce_bleu < jb, "ce_only gated BLEU {ce_bleu:.2} >= joint {jb:.2}");
    Ok(format!(
        "ratio {cr:.3} < {jr:.3}, recall {cc:.3} < {jc:.3}, gated BLEU {ce_bleu:.2} < {jb:.2} (ce_only < joint)"
    ))
}

fn c10_bleu() -> Result<String> {
    let r: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4, 5]];
    let same = corpus_bleu(&r, &r)?;
    let disjoint = corpus_bleu(&[vec![6u32, 7, 8, 9, 10]], &r)?;
    let overlap = corpus_bleu(&[vec![1u32, 2, 3, 4, 9]], &r)?;
    ensure!((same - 100.0).abs() < 1e-9, "identical {same}");
    ensure!(disjoint == 0.0, "disjoint {disjoint}");
    ensure!((overlap - 66.87).abs() <= 0.01, "overlap {overlap}");
    Ok(format!("identical {same:.2}, disjoint {disjoint:.2}, 4/5 overlap {overlap:.4}"))
}

fn hypothesis_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir.join("reports/hypotheses"))? {
        let e = e?;
        out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?);
    }
    Ok(out)
}

fn c11_pipeline(first: &Path, first_time: Duration, second: &Path) -> Result<String> {
    ensure!(first_time < Duration::from_secs(600), "pipeline took {first_time:?}");
    let t2 = pipeline(second)?;
    let (a, b) = (hypothesis_files(first)?, hypothesis_files(second)?);
    ensure!(!a.is_empty() && a == b, "hypotheses differ between runs");
    ensure!(first.join("reports/benchmark.txt").exists(), "no benchmark table");
    Ok(format!(
        "{} hypotheses files byte-identical across 2 runs; pipeline {:.0?} and {:.0?}",
        a.len(),
        first_time,
        t2
    ))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, r: Result<String>| {
        match r {
            Ok(msg) => println!("PASS [{id:>2}] {name}: {msg}"),
            Err(e) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name}: {e:#}");
            }
        }
    };
    report(1, "exact kNN vs exhaustive oracle", c1_exact_knn());
    report(2, "distributions sum to one", c2_normalisation());
    report(3, "gradient checks", c3_gradients());
    report(10, "BLEU oracle", c10_bleu());

    let tmp = tempfile::tempdir().expect("tempdir");
    let run_a = tmp.path().join("a");
    let timed = pipeline(&run_a);
    let bench: Result<BenchmarkReport> = timed
        .as_ref()
        .map_err(|e| anyhow::anyhow!("pipeline failed: {e:#}"))
        .and_then(|_| read_json(&run_a.join("reports/benchmark.json")));
    let with_bench = |f: &dyn Fn(&BenchmarkReport) -> Result<String>| match &bench {
        Ok(b) => f(b),
        Err(e) => Err(anyhow::anyhow!("{e:#}")),
    };
    report(4, "mode equivalence", with_bench(&|_| c4_mode_equivalence(&run_a)));
    report(5, "redundancy", with_bench(&|_| c5_redundancy(&run_a)));
    report(6, "domain adaptation", with_bench(&c6_domain_adaptation));
    report(7, "gated efficiency", with_bench(&c7_efficiency));
    report(8, "selector quality", with_bench(&c8_selector));
    report(9, "ce_only ablation", with_bench(&|b| c9_ablation(&run_a, b)));
    report(
        11,
        "pipeline reproducibility",
        match &timed {
            Ok(t) => c11_pipeline(&run_a, *t, &tmp.path().join("b")),
            Err(e) => Err(anyhow::anyhow!("{e:#}")),
        },
    );
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
