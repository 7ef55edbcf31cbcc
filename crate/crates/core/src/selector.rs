//! The retrieval gate: a bias-free two-layer network over the decoder hidden
//! state, trained with class-weighted cross-entropy plus the translation loss
//! of the gated mixture (straight-through Gumbel-softmax).

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datastore::Datastore;
use crate::error::{bail, Result};
use crate::evalbench::{selector_metrics, SelectorReport};
use crate::knnprob::{knn_probability, Hyperparams};
use crate::model::ToyModel;
use crate::numerics::{argmax, gumbel_softmax, log_softmax_unchecked, softmax_backward, softmax_unchecked, Adam, GumbelSample, Matrix, Real};
use crate::toygen::EncodedPair;

/// Gate outcome. `Retrieve` is class 0, `Skip` class 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Retrieve,
    Skip,
}

pub type GateDecision = Gate;
/// Per-position training label: `Skip` iff the model's argmax is already gold.
pub type GateLabel = Gate;

impl Gate {
    pub fn index(self) -> usize {
        match self {
            Gate::Retrieve => 0,
            Gate::Skip => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Gate::Retrieve
        } else {
            Gate::Skip
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selector<T = f32> {
    /// d × d′
    pub w1: Matrix<T>,
    /// d′ × 2
    pub w2: Matrix<T>,
}

impl<T: Real> Selector<T> {
    pub fn new(d: usize, d_hidden: usize, seed: u64) -> Self {
        let mut rng = crate::rng_from_seed(seed);
        let s1 = libm::sqrt(6.0 / (d + d_hidden) as f64);
        let s2 = libm::sqrt(6.0 / (d_hidden + 2) as f64);
        Self {
            w1: Matrix::random(d, d_hidden, s1, &mut rng),
            w2: Matrix::random(d_hidden, 2, s2, &mut rng),
        }
    }

    pub fn zeros(d: usize, d_hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(d, d_hidden),
            w2: Matrix::zeros(d_hidden, 2),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn cast<U: Real>(&self) -> Selector<U> {
        Selector {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
        }
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.w1.as_slice().iter().chain(self.w2.as_slice()).copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let n1 = self.w1.as_slice().len();
        let n2 = self.w2.as_slice().len();
        if flat.len() != n1 + n2 {
            bail!(Dimension, "expected {} parameters, got {}", n1 + n2, flat.len());
        }
        self.w1.as_mut_slice().copy_from_slice(&flat[..n1]);
        self.w2.as_mut_slice().copy_from_slice(&flat[n1..]);
        Ok(())
    }

    fn check_input(&self, f: &[T]) -> Result<()> {
        if f.len() != self.input_dim() {
            bail!(Dimension, "selector expects {} features, got {}", self.input_dim(), f.len());
        }
        if self.w2.rows() != self.hidden_dim() || self.w2.cols() != 2 {
            bail!(Dimension, "W2 must be {}x2", self.hidden_dim());
        }
        Ok(())
    }

    /// Hidden activation and the two logits.
    fn activations(&self, f: &[T]) -> (Vec<T>, Vec<T>) {
        let act: Vec<T> = self.w1.matvec_t(f).into_iter().map(T::relu).collect();
        let logits = self.w2.matvec_t(&act);
        (act, logits)
    }

    /// `softmax(W2ᵀ ReLU(W1ᵀ f))`.
    pub fn forward(&self, f: &[T]) -> Result<[T; 2]> {
        self.check_input(f)?;
        let p = softmax_unchecked(&self.activations(f).1);
        Ok([p[0], p[1]])
    }

    /// Argmax of [`Selector::forward`]; an exact tie retrieves.
    pub fn decide(&self, f: &[T]) -> Result<Gate> {
        Ok(decide_from_probs(self.forward(f)?))
    }
}

/// Convenience alias for [`Selector::forward`].
pub fn selector_forward<T: Real>(sel: &Selector<T>, f: &[T]) -> Result<[T; 2]> {
    sel.forward(f)
}

pub fn decide_from_probs<T: Real>(p: [T; 2]) -> Gate {
    if p[1] > p[0] {
        Gate::Skip
    } else {
        Gate::Retrieve
    }
}

/// Teacher-forced gate labels in corpus order.
pub fn make_labels(model: &ToyModel, corpus: &[EncodedPair]) -> Result<Vec<GateLabel>> {
    let mut out = Vec::new();
    for pair in corpus {
        for rec in model.teacher_forced_pass(pair)? {
            out.push(label_for(&rec.probs, rec.gold));
        }
    }
    Ok(out)
}

fn label_for(probs: &[f32], gold: crate::TokenId) -> GateLabel {
    if argmax(probs) as crate::TokenId == gold {
        Gate::Skip
    } else {
        Gate::Retrieve
    }
}

/// One teacher-forced position with everything the loss needs. The model and
/// datastore are frozen, so gold probabilities are computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorExample {
    pub features: Vec<f32>,
    pub label: GateLabel,
    /// `p_MT(gold)`
    pub p_mt_gold: f64,
    /// `p_combined(gold)` with the K-neighbour interpolation.
    pub p_comb_gold: f64,
}

pub fn selector_examples(
    model: &ToyModel,
    ds: &Datastore,
    corpus: &[EncodedPair],
    hyper: &Hyperparams,
) -> Result<Vec<SelectorExample>> {
    hyper.validate()?;
    let mut out = Vec::new();
    for pair in corpus {
        for rec in model.teacher_forced_pass(pair)? {
            let p_mt_gold = rec.probs[rec.gold as usize] as f64;
            let nb = ds.knn_search(&rec.hidden, hyper.k)?;
            let p_comb_gold = if nb.is_empty() {
                p_mt_gold
            } else {
                let l = hyper.lambda as f32;
                let knn = knn_probability(&nb, hyper.temperature, rec.gold) as f32;
                (l * knn + (1.0 - l) * rec.probs[rec.gold as usize]) as f64
            };
            out.push(SelectorExample {
                label: label_for(&rec.probs, rec.gold),
                features: rec.hidden,
                p_mt_gold,
                p_comb_gold,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    CeOnly,
    Joint,
}

/// How the gate enters the translation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatePath {
    /// Hard one-hot forward, relaxed gradient backward.
    StraightThrough,
    /// Relaxed sample in both passes; the loss is then smooth.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub batch_tokens: usize,
    pub n_neg: usize,
}

impl LossBreakdown {
    /// `N_neg = 0` or `N_neg = B`: one class weight is zero.
    pub fn degenerate(&self) -> bool {
        self.n_neg == 0 || self.n_neg == self.batch_tokens
    }
}

const MIX_FLOOR: f64 = 1e-12;

/// Batch loss and gradient. `noise` holds two Gumbel samples per example and
/// is ignored in `CeOnly` mode.
pub fn selector_loss<T: Real>(
    sel: &Selector<T>,
    batch: &[&SelectorExample],
    noise: &[[GumbelSample; 2]],
    tau: f64,
    mode: LossMode,
    path: GatePath,
) -> Result<(LossBreakdown, Selector<T>)> {
    let b = batch.len();
    if b == 0 {
        bail!(Training, "empty selector batch");
    }
    if mode == LossMode::Joint {
        if !(tau > 0.0) {
            bail!(Parameter, "tau must be > 0, got {tau}");
        }
        if noise.len() != b {
            bail!(Dimension, "{} noise pairs for {b} examples", noise.len());
        }
    }
    let n_neg = batch.iter().filter(|e| e.label == Gate::Skip).count();
    let w_retrieve = T::from_f64(n_neg as f64 / b as f64);
    let w_skip = T::from_f64(1.0 - n_neg as f64 / b as f64);
    let inv_b = T::from_f64(1.0 / b as f64);

    let mut grads = Selector::zeros(sel.input_dim(), sel.hidden_dim());
    let (mut l1, mut l2) = (0.0f64, 0.0f64);
    for (i, ex) in batch.iter().enumerate() {
        let f: Vec<T> = ex.features.iter().map(|&v| T::from_f32(v)).collect();
        sel.check_input(&f)?;
        let (act, logits) = sel.activations(&f);
        let logp = log_softmax_unchecked(&logits);
        let p: Vec<T> = logp.iter().map(|v| v.exp()).collect();

        let c = ex.label.index();
        let w = if c == 0 { w_retrieve } else { w_skip };
        l1 -= (w * logp[c]).to_f64();
        // d(-w log p_c)/dz = w (p - e_c)
        let mut dz: Vec<T> = p.iter().map(|&pi| w * pi).collect();
        dz[c] -= w;

        if mode == LossMode::Joint {
            let y = gumbel_softmax(&logp, tau, &noise[i])?;
            let gate = match path {
                GatePath::Soft => y.clone(),
                GatePath::StraightThrough => {
                    let mut h = vec![T::ZERO; 2];
                    h[decide_from_probs([y[0], y[1]]).index()] = T::ONE;
                    h
                }
            };
            let q = [T::from_f64(ex.p_comb_gold), T::from_f64(ex.p_mt_gold)];
            let mix = gate[0] * q[0] + gate[1] * q[1];
            let floored = mix.to_f64() < MIX_FLOOR;
            let mix = mix.max(T::from_f64(MIX_FLOOR));
            l2 -= mix.ln().to_f64();
            if !floored {
                let dgate = [-q[0] / mix, -q[1] / mix];
                // y = softmax((log p + g) / τ)
                let ds = softmax_backward(&y, &dgate);
                let tau_t = T::from_f64(tau);
                let dlogp: Vec<T> = ds.iter().map(|&v| v / tau_t).collect();
                let sum = dlogp[0] + dlogp[1];
                for k in 0..2 {
                    dz[k] += dlogp[k] - p[k] * sum;
                }
            }
        }

        dz.iter_mut().for_each(|v| *v = *v * inv_b);
        grads.w2.add_outer(&act, &dz, T::ONE);
        let mut dact = sel.w2.matvec(&dz);
        for (d, &a) in dact.iter_mut().zip(&act) {
            if !(a > T::ZERO) {
                *d = T::ZERO;
            }
        }
        grads.w1.add_outer(&f, &dact, T::ONE);
    }
    let bf = b as f64;
    Ok((
        LossBreakdown {
            l1,
            l2,
            total: l1 / bf + l2 / bf,
            batch_tokens: b,
            n_neg,
        },
        grads,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorTrainConfig {
    /// d′; `None` uses the input dimension.
    pub hidden: Option<usize>,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_tokens: usize,
    pub mode: LossMode,
    /// Global L2-norm bound on each batch gradient; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            tau: 0.1,
            lr: 1e-4,
            epochs: 100,
            batch_tokens: 32,
            mode: LossMode::Joint,
            grad_clip: Some(1.0),
            seed: 29,
        }
    }
}

/// Per-epoch summary on the training (valid) split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub loss: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub retrieving_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorTrainLog {
    pub epochs: Vec<EpochMetrics>,
    /// Batches where one class weight vanished.
    pub degenerate_batches: usize,
}

/// Adam over shuffled token batches; deterministic per `cfg.seed`.
pub fn train_selector(examples: &[SelectorExample], cfg: &SelectorTrainConfig) -> Result<(Selector, SelectorTrainLog)> {
    if examples.is_empty() {
        bail!(Training, "no selector training examples");
    }
    if cfg.batch_tokens == 0 {
        bail!(Parameter, "batch_tokens must be >= 1");
    }
    let d = examples[0].features.len();
    let mut sel: Selector = Selector::new(d, cfg.hidden.unwrap_or(d), cfg.seed);
    let mut adam = Adam::new(&[sel.w1.as_slice().len(), sel.w2.as_slice().len()], cfg.lr);
    let mut rng = crate::rng_from_seed(cfg.seed ^ 0x5e1e);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = SelectorTrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
        degenerate_batches: 0,
    };
    let mut batch = Vec::with_capacity(cfg.batch_tokens);
    let mut noise = Vec::with_capacity(cfg.batch_tokens);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_tokens) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &examples[i]));
            noise.clear();
            if cfg.mode == LossMode::Joint {
                for _ in chunk {
                    noise.push([GumbelSample::draw(&mut rng), GumbelSample::draw(&mut rng)]);
                }
            }
            let (br, mut g) = selector_loss(&sel, &batch, &noise, cfg.tau, cfg.mode, GatePath::StraightThrough)?;
            log.degenerate_batches += br.degenerate() as usize;
            if let Some(c) = cfg.grad_clip {
                clip_norm(&mut g, c);
            }
            let (w1, w2) = (&mut sel.w1, &mut sel.w2);
            adam.step(&mut [w1.as_mut_slice(), w2.as_mut_slice()], &[g.w1.as_slice(), g.w2.as_slice()])?;
        }
        let (l1, l2, report) = evaluate(&sel, examples)?;
        log.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            l1,
            l2,
            loss: l1 + l2,
            precision: report.precision(),
            recall: report.recall(),
            retrieving_ratio: report.retrieving_ratio(),
        });
    }
    Ok((sel, log))
}

/// Rescales `g` so its global L2 norm is at most `max_norm`.
pub fn clip_norm<T: Real>(g: &mut Selector<T>, max_norm: f64) {
    let sq: f64 = g.w1.as_slice().iter().chain(g.w2.as_slice()).map(|v| v.to_f64() * v.to_f64()).sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        g.w1.as_mut_slice().iter_mut().chain(g.w2.as_mut_slice()).for_each(|v| *v = *v * s);
    }
}

/// Mean L1 (whole-set class weights), mean L2 under the argmax gate, and the
/// confusion report.
pub fn evaluate(sel: &Selector, examples: &[SelectorExample]) -> Result<(f64, f64, SelectorReport)> {
    if examples.is_empty() {
        bail!(Training, "no examples to evaluate");
    }
    let n = examples.len() as f64;
    let n_neg = examples.iter().filter(|e| e.label == Gate::Skip).count() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    let mut decisions = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        let p = sel.forward(&ex.features)?;
        let gate = decide_from_probs(p);
        let (w, pc) = match ex.label {
            Gate::Retrieve => (n_neg / n, p[0]),
            Gate::Skip => (1.0 - n_neg / n, p[1]),
        };
        l1 -= w * (pc as f64).max(MIX_FLOOR).ln();
        let q = match gate {
            Gate::Retrieve => ex.p_comb_gold,
            Gate::Skip => ex.p_mt_gold,
        };
        l2 -= q.max(MIX_FLOOR).ln();
        decisions.push(gate);
        labels.push(ex.label);
    }
    Ok((l1 / n, l2 / n, selector_metrics(&decisions, &labels)?))
}
