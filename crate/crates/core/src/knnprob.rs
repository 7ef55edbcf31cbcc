//! Neighbour sets to vocabulary distributions: the temperature softmax over
//! negative distances, linear interpolation with the model distribution, and
//! the Meta-k combiner of the adaptive variant.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datastore::{Datastore, NeighborSet};
use crate::error::{bail, Result};
use crate::model::ToyModel;
use crate::numerics::{softmax_backward, softmax_unchecked, Adam, Matrix, Real};
use crate::toygen::EncodedPair;
use crate::TokenId;

/// Distance fed to Meta-k for neighbour slots that do not exist.
pub const MISSING_DISTANCE: f32 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub lambda: f64,
    pub temperature: f64,
    pub k: usize,
    pub k_max_adaptive: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainPreset {
    It,
    Koran,
    Law,
    Medical,
}

impl Hyperparams {
    pub fn preset(domain: DomainPreset) -> Self {
        let (lambda, temperature) = match domain {
            DomainPreset::It => (0.7, 10.0),
            DomainPreset::Koran => (0.8, 100.0),
            DomainPreset::Law => (0.8, 10.0),
            DomainPreset::Medical => (0.8, 10.0),
        };
        Self {
            lambda,
            temperature,
            k: 8,
            k_max_adaptive: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            bail!(Parameter, "lambda must be in [0, 1], got {}", self.lambda);
        }
        if !(self.temperature > 0.0) {
            bail!(Parameter, "temperature must be > 0, got {}", self.temperature);
        }
        if self.k == 0 || self.k_max_adaptive == 0 {
            bail!(Parameter, "K and K_max must be >= 1");
        }
        Ok(())
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::preset(DomainPreset::It)
    }
}

/// Softmax of `-d_j / T` over the neighbours, scattered into vocabulary
/// slots by value (repeated values add up).
pub fn knn_distribution(nb: &NeighborSet, temperature: f64, vocab: usize) -> Result<Vec<f32>> {
    if nb.is_empty() {
        bail!(Undefined, "kNN distribution of an empty neighbour set");
    }
    if !(temperature > 0.0) {
        bail!(Parameter, "temperature must be > 0, got {temperature}");
    }
    if let Some(n) = nb.entries.iter().find(|n| n.value as usize >= vocab) {
        bail!(Input, "neighbour value {} outside vocabulary of {vocab}", n.value);
    }
    let mut out = vec![0.0f32; vocab];
    for (n, w) in nb.entries.iter().zip(neighbor_weights(nb, temperature)) {
        out[n.value as usize] += w as f32;
    }
    Ok(out)
}

/// Per-neighbour softmax weights, in f64.
fn neighbor_weights(nb: &NeighborSet, temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = nb
        .entries
        .iter()
        .map(|n| -(n.distance as f64) / temperature)
        .collect();
    softmax_unchecked(&logits)
}

/// Probability the kNN distribution assigns to `token`.
pub fn knn_probability(nb: &NeighborSet, temperature: f64, token: TokenId) -> f64 {
    nb.entries
        .iter()
        .zip(neighbor_weights(nb, temperature))
        .filter(|(n, _)| n.value == token)
        .map(|(_, w)| w)
        .sum()
}

/// `λ · p_knn + (1 − λ) · p_mt`.
pub fn interpolate(p_mt: &[f32], p_knn: &[f32], lambda: f64) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&lambda) {
        bail!(Parameter, "lambda must be in [0, 1], got {lambda}");
    }
    if p_mt.len() != p_knn.len() {
        bail!(Dimension, "distributions of length {} and {}", p_mt.len(), p_knn.len());
    }
    let l = lambda as f32;
    let m = 1.0 - l;
    Ok(p_mt
        .iter()
        .zip(p_knn)
        .map(|(&a, &b)| l * b + m * a)
        .collect())
}

/// Meta-k: `2K` features (distances, running duplicate counts) through one
/// ReLU layer to `K + 1` mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaKNet<T = f32> {
    pub k_max: usize,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Input features for Meta-k.
///
/// Slot `j` holds the distance of neighbour `j` and the number of neighbours
/// among ranks `1..=j` whose value equals neighbour `j`'s value. Missing
/// neighbours get [`MISSING_DISTANCE`] and a zero count.
pub fn meta_k_features(nb: &NeighborSet, k_max: usize) -> Vec<f32> {
    let mut f = vec![0.0f32; 2 * k_max];
    for j in 0..k_max {
        match nb.entries.get(j) {
            Some(n) => {
                f[j] = n.distance;
                f[k_max + j] = nb.entries[..=j].iter().filter(|m| m.value == n.value).count() as f32;
            }
            None => f[j] = MISSING_DISTANCE,
        }
    }
    f
}

impl<T: Real> MetaKNet<T> {
    pub fn new(k_max: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = crate::rng_from_seed(seed);
        let s1 = libm::sqrt(6.0 / (2 * k_max + hidden) as f64);
        let s2 = libm::sqrt(6.0 / (hidden + k_max + 1) as f64);
        Self {
            k_max,
            w1: Matrix::random(hidden, 2 * k_max, s1, &mut rng),
            b1: vec![T::ZERO; hidden],
            w2: Matrix::random(k_max + 1, hidden, s2, &mut rng),
            b2: vec![T::ZERO; k_max + 1],
        }
    }

    pub fn cast<U: Real>(&self) -> MetaKNet<U> {
        let v = |x: &[T]| x.iter().map(|a| U::from_f64(a.to_f64())).collect::<Vec<U>>();
        MetaKNet {
            k_max: self.k_max,
            w1: self.w1.cast(),
            b1: v(&self.b1),
            w2: self.w2.cast(),
            b2: v(&self.b2),
        }
    }

    fn tensors(&self) -> [&[T]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut [T]; 4] {
        [self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2]
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|t| t.len()).sum();
        if flat.len() != total {
            bail!(Dimension, "expected {total} parameters, got {}", flat.len());
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn hidden_pre(&self, features: &[T]) -> Vec<T> {
        let mut pre = self.w1.matvec(features);
        for (p, &b) in pre.iter_mut().zip(&self.b1) {
            *p += b;
        }
        pre
    }

    fn logits(&self, act: &[T]) -> Vec<T> {
        let mut z = self.w2.matvec(act);
        for (p, &b) in z.iter_mut().zip(&self.b2) {
            *p += b;
        }
        z
    }

    /// Mixture weights: index 0 for the model, `j` for the top-`j` kNN
    /// distribution.
    pub fn weights(&self, features: &[T]) -> Result<Vec<T>> {
        if features.len() != 2 * self.k_max {
            bail!(Dimension, "Meta-k expects {} features, got {}", 2 * self.k_max, features.len());
        }
        let act: Vec<T> = self.hidden_pre(features).into_iter().map(T::relu).collect();
        Ok(softmax_unchecked(&self.logits(&act)))
    }

    /// NLL of the gold token for one example, with gradient accumulated into
    /// `grads` (scaled by `scale`).
    fn loss_and_grad_one(&self, ex: &MetaKExample, scale: T, grads: &mut MetaKNet<T>) -> f64 {
        let x: Vec<T> = ex.features.iter().map(|&v| T::from_f32(v)).collect();
        let pre = self.hidden_pre(&x);
        let act: Vec<T> = pre.iter().map(|v| v.relu()).collect();
        let w = softmax_unchecked(&self.logits(&act));
        let q: Vec<T> = ex.gold_probs.iter().map(|&v| T::from_f64(v)).collect();
        let mix = mix_floor(w.iter().zip(&q).fold(T::ZERO, |a, (&wi, &qi)| a + wi * qi));
        let dw: Vec<T> = q.iter().map(|&qi| -qi / mix * scale).collect();
        let dz = softmax_backward(&w, &dw);
        grads.w2.add_outer(&dz, &act, T::ONE);
        for (g, &d) in grads.b2.iter_mut().zip(&dz) {
            *g += d;
        }
        let mut dpre = self.w2.matvec_t(&dz);
        for (d, &p) in dpre.iter_mut().zip(&pre) {
            if !(p > T::ZERO) {
                *d = T::ZERO;
            }
        }
        grads.w1.add_outer(&dpre, &x, T::ONE);
        for (g, &d) in grads.b1.iter_mut().zip(&dpre) {
            *g += d;
        }
        -mix.ln().to_f64()
    }

    /// Mean NLL over `batch` and its gradient.
    pub fn loss_and_grad(&self, batch: &[MetaKExample]) -> Result<(f64, MetaKNet<T>)> {
        if batch.is_empty() {
            bail!(Training, "empty Meta-k batch");
        }
        let mut grads = self.clone();
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::ZERO);
        }
        let scale = T::from_f64(1.0 / batch.len() as f64);
        let total: f64 = batch
            .iter()
            .map(|ex| self.loss_and_grad_one(ex, scale, &mut grads))
            .sum();
        Ok((total / batch.len() as f64, grads))
    }

    pub fn loss(&self, batch: &[MetaKExample]) -> Result<f64> {
        if batch.is_empty() {
            bail!(Training, "empty Meta-k batch");
        }
        let mut total = 0.0;
        for ex in batch {
            let x: Vec<T> = ex.features.iter().map(|&v| T::from_f32(v)).collect();
            let w = self.weights(&x)?;
            let mix = w
                .iter()
                .zip(&ex.gold_probs)
                .fold(T::ZERO, |a, (&wi, &qi)| a + wi * T::from_f64(qi));
            total -= mix_floor(mix).ln().to_f64();
        }
        Ok(total / batch.len() as f64)
    }
}

fn mix_floor<T: Real>(v: T) -> T {
    v.max(T::from_f64(1e-12))
}

/// The kNN distribution over the `j` nearest neighbours, for `j = 1..=k_max`.
/// Slots beyond the available neighbours reuse the full set.
fn prefix_distributions(nb: &NeighborSet, k_max: usize, temperature: f64, vocab: usize) -> Result<Vec<Vec<f32>>> {
    (1..=k_max)
        .map(|j| knn_distribution(&nb.truncated(j.min(nb.len())), temperature, vocab))
        .collect()
}

/// `w_0 · p_mt + Σ_j w_j · p_{kNN, top-j}`.
pub fn meta_k_combine(net: &MetaKNet, p_mt: &[f32], nb: &NeighborSet, temperature: f64, vocab: usize) -> Result<Vec<f32>> {
    if nb.is_empty() {
        return Ok(p_mt.to_vec());
    }
    if nb.len() > net.k_max {
        bail!(Parameter, "{} neighbours exceed Meta-k's K_max of {}", nb.len(), net.k_max);
    }
    if p_mt.len() != vocab {
        bail!(Dimension, "model distribution has {} entries, vocabulary {vocab}", p_mt.len());
    }
    let w = net.weights(&meta_k_features(nb, net.k_max))?;
    combine_with_weights(&w, p_mt, nb, temperature, vocab)
}

/// Mixes `p_mt` and the prefix kNN distributions with explicit weights.
pub fn combine_with_weights(w: &[f32], p_mt: &[f32], nb: &NeighborSet, temperature: f64, vocab: usize) -> Result<Vec<f32>> {
    let k_max = w.len().saturating_sub(1);
    if nb.is_empty() {
        return Ok(p_mt.to_vec());
    }
    let mut out: Vec<f32> = p_mt.iter().map(|&p| w[0] * p).collect();
    for (j, dist) in prefix_distributions(nb, k_max, temperature, vocab)?.iter().enumerate() {
        let wj = w[j + 1];
        for (o, &d) in out.iter_mut().zip(dist) {
            *o += wj * d;
        }
    }
    Ok(out)
}

/// Precomputed inputs of one teacher-forced position for Meta-k training.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaKExample {
    pub features: Vec<f32>,
    /// Gold-token probability under `p_mt`, then under each top-`j` kNN
    /// distribution.
    pub gold_probs: Vec<f64>,
}

pub fn meta_k_examples(
    corpus: &[EncodedPair],
    model: &ToyModel,
    ds: &Datastore,
    hyper: &Hyperparams,
) -> Result<Vec<MetaKExample>> {
    model.require_frozen()?;
    let k_max = hyper.k_max_adaptive;
    let mut out = Vec::new();
    for pair in corpus {
        for rec in model.teacher_forced_pass(pair)? {
            let nb = ds.knn_search(&rec.hidden, k_max)?;
            let mut gold_probs = Vec::with_capacity(k_max + 1);
            gold_probs.push(rec.probs[rec.gold as usize] as f64);
            for j in 1..=k_max {
                if nb.is_empty() {
                    gold_probs.push(0.0);
                } else {
                    gold_probs.push(knn_probability(&nb.truncated(j), hyper.temperature, rec.gold));
                }
            }
            out.push(MetaKExample {
                features: meta_k_features(&nb, k_max),
                gold_probs,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaKTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_tokens: usize,
    pub seed: u64,
}

impl Default for MetaKTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 20,
            lr: 1e-3,
            batch_tokens: 64,
            seed: 23,
        }
    }
}

/// Minimizes the teacher-forced NLL of the Meta-k mixture with Adam.
pub fn train_meta_k(
    examples: &[MetaKExample],
    k_max: usize,
    cfg: &MetaKTrainConfig,
) -> Result<(MetaKNet, Vec<f64>)> {
    if examples.is_empty() {
        bail!(Training, "no Meta-k training examples");
    }
    if cfg.batch_tokens == 0 {
        bail!(Parameter, "batch_tokens must be >= 1");
    }
    let mut net: MetaKNet = MetaKNet::new(k_max, cfg.hidden, cfg.seed);
    let shapes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes, cfg.lr);
    let mut rng = crate::rng_from_seed(cfg.seed ^ 0x6d6b);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_tokens);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_tokens) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let (_, g) = net.loss_and_grad(&batch)?;
            let gt = g.tensors();
            adam.step(&mut net.tensors_mut(), &gt)?;
        }
        curve.push(net.loss(examples)?);
    }
    Ok((net, curve))
}
