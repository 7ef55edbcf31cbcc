//! The frozen next-token model.
//!
//! A two-layer feed-forward predictor over a fixed context: the mean source
//! embedding, a three-token source window at the aligned position, and the
//! two previous target tokens. The second layer's output is the decoder
//! hidden state used as retrieval key and query.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{argmax, log_softmax_unchecked, softmax_unchecked, Adam, Matrix, Real};
use crate::toygen::EncodedPair;
use crate::{rng_from_seed, TokenId, BOS, EOS, PAD};

/// Number of embedding slots concatenated into the first layer's input.
pub const CONTEXT_SLOTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel<T = f32> {
    pub dims: ModelDims,
    pub src_embed: Matrix<T>,
    pub tgt_embed: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    pub w_out: Matrix<T>,
    pub b_out: Vec<T>,
    pub frozen: bool,
}

/// Per-sentence source features, computed once per sentence.
#[derive(Debug, Clone)]
pub struct SourceContext<T = f32> {
    tokens: Vec<TokenId>,
    mean: Vec<T>,
}

impl<T: Real> SourceContext<T> {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }
}

/// Activations of one forward step, kept for backprop.
#[derive(Debug, Clone)]
pub struct StepActivations<T = f32> {
    pub window: [TokenId; 3],
    pub history: [TokenId; 2],
    pub input: Vec<T>,
    pub pre1: Vec<T>,
    pub act1: Vec<T>,
    pub hidden: Vec<T>,
    pub logits: Vec<T>,
}

/// One teacher-forced position: hidden state, model distribution, gold token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub hidden: Vec<f32>,
    pub probs: Vec<f32>,
    pub gold: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch_sentences: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 2e-3,
            batch_sentences: 16,
            init_scale: 0.1,
            seed: 17,
        }
    }
}

/// Source window token at position `pos` (may be out of range).
fn window_token(src: &[TokenId], pos: isize) -> TokenId {
    if pos < 0 {
        BOS
    } else if (pos as usize) < src.len() {
        src[pos as usize]
    } else if pos as usize == src.len() {
        EOS
    } else {
        PAD
    }
}

impl<T: Real> ToyModel<T> {
    pub fn new(dims: ModelDims, init_scale: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let in_dim = CONTEXT_SLOTS * dims.embed;
        // embeddings use init_scale; dense layers use Glorot-uniform bounds
        let glorot = |fan_in: usize, fan_out: usize| libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        Self {
            dims,
            src_embed: Matrix::random(dims.src_vocab, dims.embed, init_scale, &mut rng),
            tgt_embed: Matrix::random(dims.tgt_vocab, dims.embed, init_scale, &mut rng),
            w1: Matrix::random(dims.hidden, in_dim, glorot(in_dim, dims.hidden), &mut rng),
            b1: vec![T::ZERO; dims.hidden],
            w2: Matrix::random(dims.hidden, dims.hidden, glorot(dims.hidden, dims.hidden), &mut rng),
            b2: vec![T::ZERO; dims.hidden],
            w_out: Matrix::random(dims.tgt_vocab, dims.hidden, glorot(dims.hidden, dims.tgt_vocab), &mut rng),
            b_out: vec![T::ZERO; dims.tgt_vocab],
            frozen: false,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.dims.hidden
    }

    pub fn cast<U: Real>(&self) -> ToyModel<U> {
        let v = |x: &[T]| x.iter().map(|a| U::from_f64(a.to_f64())).collect::<Vec<U>>();
        ToyModel {
            dims: self.dims,
            src_embed: self.src_embed.cast(),
            tgt_embed: self.tgt_embed.cast(),
            w1: self.w1.cast(),
            b1: v(&self.b1),
            w2: self.w2.cast(),
            b2: v(&self.b2),
            w_out: self.w_out.cast(),
            b_out: v(&self.b_out),
            frozen: self.frozen,
        }
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// FNV-1a over the shape and every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for d in [self.dims.src_vocab, self.dims.tgt_vocab, self.dims.embed, self.dims.hidden] {
            h.write(&(d as u64).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                h.write(&v.to_f64().to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn tensors(&self) -> [&[T]; 8] {
        [
            self.src_embed.as_slice(),
            self.tgt_embed.as_slice(),
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.w_out.as_slice(),
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [T]; 8] {
        [
            self.src_embed.as_mut_slice(),
            self.tgt_embed.as_mut_slice(),
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.w_out.as_mut_slice(),
            &mut self.b_out,
        ]
    }

    pub fn encode_source(&self, src: &[TokenId]) -> Result<SourceContext<T>> {
        if src.is_empty() {
            bail!(Input, "empty source sentence");
        }
        if let Some(&bad) = src.iter().find(|&&t| t as usize >= self.dims.src_vocab) {
            bail!(Input, "source token {bad} outside vocabulary of {}", self.dims.src_vocab);
        }
        let mut mean = vec![T::ZERO; self.dims.embed];
        for &t in src {
            for (m, &e) in mean.iter_mut().zip(self.src_embed.row(t as usize)) {
                *m += e;
            }
        }
        let n = T::from_f64(src.len() as f64);
        mean.iter_mut().for_each(|m| *m = *m / n);
        Ok(SourceContext {
            tokens: src.to_vec(),
            mean,
        })
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<()> {
        if prefix.first() != Some(&BOS) {
            bail!(Input, "decoder prefix must start with BOS");
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t as usize >= self.dims.tgt_vocab) {
            bail!(Input, "target token {bad} outside vocabulary of {}", self.dims.tgt_vocab);
        }
        Ok(())
    }

    /// Full forward step for a validated context.
    pub fn step(&self, ctx: &SourceContext<T>, prefix: &[TokenId]) -> Result<StepActivations<T>> {
        self.check_prefix(prefix)?;
        Ok(self.step_unchecked(ctx, prefix))
    }

    pub(crate) fn step_unchecked(&self, ctx: &SourceContext<T>, prefix: &[TokenId]) -> StepActivations<T> {
        let e = self.dims.embed;
        let pos = prefix.len() as isize - 1;
        let window = [
            window_token(&ctx.tokens, pos - 1),
            window_token(&ctx.tokens, pos),
            window_token(&ctx.tokens, pos + 1),
        ];
        let prev1 = prefix[prefix.len() - 1];
        let prev2 = if prefix.len() >= 2 { prefix[prefix.len() - 2] } else { PAD };
        let history = [prev1, prev2];

        let mut input = Vec::with_capacity(CONTEXT_SLOTS * e);
        input.extend_from_slice(&ctx.mean);
        for &w in &window {
            input.extend_from_slice(self.src_embed.row(w as usize));
        }
        for &y in &history {
            input.extend_from_slice(self.tgt_embed.row(y as usize));
        }

        let mut pre1 = self.w1.matvec(&input);
        for (p, &b) in pre1.iter_mut().zip(&self.b1) {
            *p += b;
        }
        let act1: Vec<T> = pre1.iter().map(|v| v.relu()).collect();
        let mut hidden = self.w2.matvec(&act1);
        for (h, &b) in hidden.iter_mut().zip(&self.b2) {
            *h += b;
        }
        let mut logits = self.w_out.matvec(&hidden);
        for (l, &b) in logits.iter_mut().zip(&self.b_out) {
            *l += b;
        }
        StepActivations {
            window,
            history,
            input,
            pre1,
            act1,
            hidden,
            logits,
        }
    }

    /// Hidden state and next-token distribution for `(src, prefix)`.
    pub fn forward(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<(Vec<T>, Vec<T>)> {
        let ctx = self.encode_source(src)?;
        let act = self.step(&ctx, prefix)?;
        let p = softmax_unchecked(&act.logits);
        Ok((act.hidden, p))
    }

    /// Accumulates `scale · ∂(-log p(gold))/∂θ` into `grads` and returns the
    /// loss of this step.
    pub(crate) fn backward_step(
        &self,
        ctx: &SourceContext<T>,
        act: &StepActivations<T>,
        gold: TokenId,
        scale: T,
        grads: &mut ToyModel<T>,
    ) -> f64 {
        let e = self.dims.embed;
        let logp = log_softmax_unchecked(&act.logits);
        let loss = -logp[gold as usize].to_f64();
        let mut dlogits: Vec<T> = logp.iter().map(|&l| l.exp() * scale).collect();
        dlogits[gold as usize] -= scale;

        grads.w_out.add_outer(&dlogits, &act.hidden, T::ONE);
        for (g, &d) in grads.b_out.iter_mut().zip(&dlogits) {
            *g += d;
        }
        let dh = self.w_out.matvec_t(&dlogits);
        grads.w2.add_outer(&dh, &act.act1, T::ONE);
        for (g, &d) in grads.b2.iter_mut().zip(&dh) {
            *g += d;
        }
        let mut dpre1 = self.w2.matvec_t(&dh);
        for (d, &p) in dpre1.iter_mut().zip(&act.pre1) {
            if !(p > T::ZERO) {
                *d = T::ZERO;
            }
        }
        grads.w1.add_outer(&dpre1, &act.input, T::ONE);
        for (g, &d) in grads.b1.iter_mut().zip(&dpre1) {
            *g += d;
        }
        let dinput = self.w1.matvec_t(&dpre1);

        let n = T::from_f64(ctx.tokens.len() as f64);
        let dmean = &dinput[..e];
        for &t in &ctx.tokens {
            for (g, &d) in grads.src_embed.row_mut(t as usize).iter_mut().zip(dmean) {
                *g += d / n;
            }
        }
        for (slot, &w) in act.window.iter().enumerate() {
            let d = &dinput[(1 + slot) * e..(2 + slot) * e];
            for (g, &v) in grads.src_embed.row_mut(w as usize).iter_mut().zip(d) {
                *g += v;
            }
        }
        for (slot, &y) in act.history.iter().enumerate() {
            let d = &dinput[(4 + slot) * e..(5 + slot) * e];
            for (g, &v) in grads.tgt_embed.row_mut(y as usize).iter_mut().zip(d) {
                *g += v;
            }
        }
        loss
    }

    fn zeroed(&self) -> ToyModel<T> {
        let mut g = self.clone();
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::ZERO);
        }
        g
    }

    /// Mean teacher-forced NLL over `pairs` and its gradient.
    pub fn loss_and_grad(&self, pairs: &[EncodedPair]) -> Result<(f64, ToyModel<T>)> {
        let mut grads = self.zeroed();
        let steps: usize = pairs.iter().map(|p| p.target.len() + 1).sum();
        if steps == 0 {
            bail!(Training, "no target positions in batch");
        }
        let scale = T::from_f64(1.0 / steps as f64);
        let mut total = 0.0;
        for pair in pairs {
            let ctx = self.encode_source(&pair.source)?;
            let mut prefix = Vec::with_capacity(pair.target.len() + 2);
            prefix.push(BOS);
            for gold in pair.target.iter().copied().chain(core::iter::once(EOS)) {
                self.check_prefix(&prefix)?;
                let act = self.step_unchecked(&ctx, &prefix);
                total += self.backward_step(&ctx, &act, gold, scale, &mut grads);
                prefix.push(gold);
            }
        }
        Ok((total / steps as f64, grads))
    }

    /// Mean teacher-forced NLL over `pairs`.
    pub fn loss(&self, pairs: &[EncodedPair]) -> Result<f64> {
        let mut total = 0.0;
        let mut steps = 0usize;
        for pair in pairs {
            let ctx = self.encode_source(&pair.source)?;
            let mut prefix = vec![BOS];
            for gold in pair.target.iter().copied().chain(core::iter::once(EOS)) {
                let act = self.step(&ctx, &prefix)?;
                total -= log_softmax_unchecked(&act.logits)[gold as usize].to_f64();
                steps += 1;
                prefix.push(gold);
            }
        }
        if steps == 0 {
            bail!(Training, "no target positions");
        }
        Ok(total / steps as f64)
    }

    /// Flattened parameters, for gradient checks.
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
}

impl ToyModel<f32> {
    /// Teacher-forced pass over one pair: `m + 1` records for an `m`-token
    /// target (the last one predicts EOS).
    pub fn teacher_forced_pass(&self, pair: &EncodedPair) -> Result<Vec<StepRecord>> {
        self.require_frozen()?;
        let ctx = self.encode_source(&pair.source)?;
        let mut prefix = vec![BOS];
        let mut out = Vec::with_capacity(pair.target.len() + 1);
        for gold in pair.target.iter().copied().chain(core::iter::once(EOS)) {
            let act = self.step(&ctx, &prefix)?;
            out.push(StepRecord {
                probs: softmax_unchecked(&act.logits),
                hidden: act.hidden,
                gold,
            });
            prefix.push(gold);
        }
        Ok(out)
    }

    pub fn require_frozen(&self) -> Result<()> {
        if !self.frozen {
            bail!(Contract, "model must be frozen before it is used for retrieval");
        }
        Ok(())
    }

    /// Fraction of teacher-forced positions where `argmax p_MT` is the gold token.
    pub fn token_accuracy(&self, pairs: &[EncodedPair]) -> Result<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for pair in pairs {
            for rec in self.teacher_forced_pass(pair)? {
                hits += (argmax(&rec.probs) as TokenId == rec.gold) as usize;
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
    }
}

/// Per-epoch training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Trains a fresh model on `corpus` with teacher-forced cross-entropy and
/// returns it frozen.
pub fn train_model(
    corpus: &[EncodedPair],
    dims: ModelDims,
    hyper: &ModelHyper,
) -> Result<(ToyModel<f32>, TrainLog)> {
    let model = ToyModel::new(dims, hyper.init_scale, hyper.seed);
    train_model_from(model, corpus, hyper)
}

pub fn train_model_from(
    mut model: ToyModel<f32>,
    corpus: &[EncodedPair],
    hyper: &ModelHyper,
) -> Result<(ToyModel<f32>, TrainLog)> {
    if model.frozen {
        bail!(Contract, "cannot train a frozen model");
    }
    if corpus.is_empty() {
        bail!(Training, "empty training corpus");
    }
    if hyper.batch_sentences == 0 {
        bail!(Parameter, "batch_sentences must be >= 1");
    }
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes, hyper.lr);
    let mut rng = rng_from_seed(hyper.seed ^ 0x7472_6169_6e);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = TrainLog::default();
    let mut batch: Vec<EncodedPair> = Vec::with_capacity(hyper.batch_sentences);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(hyper.batch_sentences) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| corpus[i].clone()));
            let steps: usize = batch.iter().map(|p| p.target.len() + 1).sum();
            let (loss, grads) = model.loss_and_grad(&batch)?;
            epoch_loss += loss * steps as f64;
            epoch_steps += steps;
            let g = grads.tensors();
            let mut p = model.tensors_mut();
            adam.step(&mut p, &g)?;
        }
        let mean = epoch_loss / epoch_steps.max(1) as f64;
        if !mean.is_finite() {
            bail!(Training, "{}", format!("loss diverged at epoch {}", log.epoch_loss.len() + 1));
        }
        log.epoch_loss.push(mean);
    }
    Ok((model.freeze(), log))
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
