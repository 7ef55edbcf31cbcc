//! Synthetic multi-domain parallel corpora.
//!
//! The "language" is a token-level substitution followed by a sentence-initial
//! inversion (the first two tokens swap places). Two domains share one source
//! distribution; a `shared_fraction` of the source vocabulary translates the
//! same way in both, the rest translates differently in the shifted domain.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::{rng_from_seed, TokenId, BOS, EOS, NUM_SPECIALS, PAD, UNK};

/// Shape of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Fraction of the source vocabulary whose translation is domain-invariant.
    pub shared_fraction: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerSpec,
}

/// Per-position token sampler: a mixture of a filler band (the most frequent
/// shared tokens), a uniform draw over the domain-divergent band, and a
/// Zipfian draw over the remaining shared content tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub zipf_exponent: f64,
    pub filler_tokens: usize,
    pub filler_rate: f64,
    pub divergent_rate: f64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            zipf_exponent: 1.0,
            filler_tokens: 8,
            filler_rate: 0.35,
            divergent_rate: 0.35,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            bail!(Spec, "{}: shared_fraction {} outside [0, 1]", self.name, self.shared_fraction);
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            bail!(Spec, "{}: bad length range [{}, {}]", self.name, self.min_len, self.max_len);
        }
        if self.src_vocab == 0 || self.tgt_vocab < self.src_vocab {
            bail!(
                Spec,
                "{}: need 0 < src_vocab <= tgt_vocab, got {} and {}",
                self.name,
                self.src_vocab,
                self.tgt_vocab
            );
        }
        let s = &self.sampler;
        if s.filler_rate < 0.0 || s.divergent_rate < 0.0 || s.filler_rate + s.divergent_rate > 1.0 {
            bail!(Spec, "{}: sampler rates must be >= 0 and sum to <= 1", self.name);
        }
        Ok(())
    }

    pub fn total_sentences(&self) -> usize {
        self.train + self.valid + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl SentencePair {
    /// One line of the corpus file: tokens space-separated, sides split by TAB.
    pub fn to_tsv_line(&self) -> String {
        let mut line = self.source.join(" ");
        line.push('\t');
        line.push_str(&self.target.join(" "));
        line
    }

    pub fn parse_tsv_line(line: &str) -> Result<Self> {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let Some((src, tgt)) = line.split_once('\t') else {
            bail!(Format, "corpus line has no TAB separator");
        };
        if tgt.contains('\t') {
            bail!(Format, "corpus line has more than one TAB");
        }
        let source: Vec<String> = src.split_whitespace().map(str::to_string).collect();
        let target: Vec<String> = tgt.split_whitespace().map(str::to_string).collect();
        if source.is_empty() || target.is_empty() {
            bail!(Format, "corpus line has an empty side");
        }
        Ok(Self { source, target })
    }
}

pub fn corpus_to_tsv(pairs: &[SentencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.to_tsv_line());
        out.push('\n');
    }
    out
}

pub fn corpus_from_tsv(text: &str) -> Result<Vec<SentencePair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            SentencePair::parse_tsv_line(l)
                .map_err(|e| crate::Error::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Train/valid/test splits of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub name: String,
    pub train: Vec<SentencePair>,
    pub valid: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

impl DomainCorpus {
    pub fn split(&self, split: Split) -> &[SentencePair] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Word-level translation tables of the two domains, indexed by source rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingTables {
    pub general: Vec<usize>,
    pub shifted: Vec<usize>,
    /// Source ranks whose translation differs between the domains.
    pub divergent: Vec<usize>,
}

impl MappingTables {
    pub fn divergent_count(&self) -> usize {
        self.general
            .iter()
            .zip(&self.shifted)
            .filter(|(a, b)| a != b)
            .count()
    }
}

pub fn source_token(rank: usize) -> String {
    format!("s{rank}")
}

pub fn target_token(index: usize) -> String {
    format!("t{index}")
}

/// The generated pair of domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub mapping: MappingTables,
    pub general: DomainCorpus,
    pub shifted: DomainCorpus,
}

/// Applies a word mapping and the sentence-initial inversion.
pub fn translate(source_ranks: &[usize], mapping: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = source_ranks.iter().map(|&r| mapping[r]).collect();
    if out.len() >= 2 {
        out.swap(0, 1);
    }
    out
}

struct PositionSampler {
    filler: Option<WeightedIndex<f64>>,
    filler_ranks: Vec<usize>,
    content: Option<WeightedIndex<f64>>,
    content_ranks: Vec<usize>,
    divergent_ranks: Vec<usize>,
    band: WeightedIndex<f64>,
}

impl PositionSampler {
    fn new(src_vocab: usize, shared: usize, s: &SamplerSpec) -> Result<Self> {
        let n_filler = s.filler_tokens.min(shared);
        let filler_ranks: Vec<usize> = (0..n_filler).collect();
        let content_ranks: Vec<usize> = (n_filler..shared).collect();
        let divergent_ranks: Vec<usize> = (shared..src_vocab).collect();
        let zipf = |ranks: &[usize]| -> Option<WeightedIndex<f64>> {
            if ranks.is_empty() {
                return None;
            }
            WeightedIndex::new(ranks.iter().map(|&r| libm::pow(r as f64 + 1.0, -s.zipf_exponent))).ok()
        };
        let mut band = [s.filler_rate, s.divergent_rate, 1.0 - s.filler_rate - s.divergent_rate];
        if filler_ranks.is_empty() {
            band[0] = 0.0;
        }
        if divergent_ranks.is_empty() {
            band[1] = 0.0;
        }
        if content_ranks.is_empty() {
            band[2] = 0.0;
        }
        if band.iter().all(|&w| w <= 0.0) {
            // degenerate rates: fall back to whichever band is populated
            if !filler_ranks.is_empty() {
                band[0] = 1.0;
            } else if !divergent_ranks.is_empty() {
                band[1] = 1.0;
            } else {
                band[2] = 1.0;
            }
        }
        let band = WeightedIndex::new(band)
            .map_err(|e| crate::Error::Spec(format!("sampler band weights: {e}")))?;
        Ok(Self {
            filler: zipf(&filler_ranks),
            filler_ranks,
            content: zipf(&content_ranks),
            content_ranks,
            divergent_ranks,
            band,
        })
    }

    fn sample(&self, rng: &mut crate::Rng) -> usize {
        match self.band.sample(rng) {
            0 => self.filler_ranks[self.filler.as_ref().map_or(0, |d| d.sample(rng))],
            1 => *self.divergent_ranks.choose(rng).expect("non-empty divergent band"),
            _ => self.content_ranks[self.content.as_ref().map_or(0, |d| d.sample(rng))],
        }
    }
}

fn build_mapping(general: &DomainSpec, shifted: &DomainSpec) -> Result<MappingTables> {
    let v = general.src_vocab;
    let shared = shared_count(v, shifted.shared_fraction);
    let divergent: Vec<usize> = (shared..v).collect();
    if divergent.len() == 1 {
        bail!(Spec, "a single divergent token cannot be remapped within the vocabulary; adjust shared_fraction");
    }
    let mut rng = rng_from_seed(general.seed ^ 0x6d61_7070_696e_6731);
    let mut targets: Vec<usize> = (0..general.tgt_vocab).collect();
    targets.shuffle(&mut rng);
    let general_map: Vec<usize> = targets[..v].to_vec();

    // cyclic shift over a shuffled ordering of the divergent band
    let mut rng = rng_from_seed(shifted.seed ^ 0x6d61_7070_696e_6732);
    let mut order = divergent.clone();
    order.shuffle(&mut rng);
    let mut shifted_map = general_map.clone();
    for (i, &r) in order.iter().enumerate() {
        let donor = order[(i + 1) % order.len()];
        shifted_map[r] = general_map[donor];
    }
    Ok(MappingTables {
        general: general_map,
        shifted: shifted_map,
        divergent,
    })
}

/// Number of shared source tokens for a vocabulary of `v` tokens.
pub fn shared_count(v: usize, shared_fraction: f64) -> usize {
    let divergent = libm::round((1.0 - shared_fraction) * v as f64) as usize;
    v - divergent.min(v)
}

fn generate_corpus(
    spec: &DomainSpec,
    sampler: &PositionSampler,
    mapping: &[usize],
    seen: &mut BTreeSet<Vec<usize>>,
    salt: u64,
) -> Result<DomainCorpus> {
    let mut rng = rng_from_seed(spec.seed ^ salt);
    let mut splits: [Vec<SentencePair>; 3] = Default::default();
    let counts = [spec.train, spec.valid, spec.test];
    for (split, &count) in splits.iter_mut().zip(&counts) {
        let mut attempts = 0usize;
        while split.len() < count {
            attempts += 1;
            if attempts > 100 * count + 1000 {
                bail!(Spec, "{}: could not draw {} distinct sentences", spec.name, count);
            }
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let src: Vec<usize> = (0..len).map(|_| sampler.sample(&mut rng)).collect();
            if !seen.insert(src.clone()) {
                continue;
            }
            let tgt = translate(&src, mapping);
            split.push(SentencePair {
                source: src.iter().map(|&r| source_token(r)).collect(),
                target: tgt.iter().map(|&t| target_token(t)).collect(),
            });
        }
    }
    let [train, valid, test] = splits;
    Ok(DomainCorpus {
        name: spec.name.clone(),
        train,
        valid,
        test,
    })
}

/// Generates the general (reference) domain and the shifted domain.
///
/// The shifted spec's `shared_fraction` decides how many source tokens get a
/// domain-specific translation. Source sentences never repeat across any
/// split of either domain.
pub fn generate_domain_pair(general: &DomainSpec, shifted: &DomainSpec) -> Result<DomainPair> {
    general.validate()?;
    shifted.validate()?;
    if general.src_vocab != shifted.src_vocab || general.tgt_vocab != shifted.tgt_vocab {
        bail!(
            Spec,
            "domains must share vocabulary sizes ({}x{} vs {}x{})",
            general.src_vocab,
            general.tgt_vocab,
            shifted.src_vocab,
            shifted.tgt_vocab
        );
    }
    let mapping = build_mapping(general, shifted)?;
    let shared = shared_count(general.src_vocab, shifted.shared_fraction);
    let mut seen = BTreeSet::new();
    let sampler_a = PositionSampler::new(general.src_vocab, shared, &general.sampler)?;
    let corpus_a = generate_corpus(general, &sampler_a, &mapping.general, &mut seen, 0xa)?;
    let sampler_b = PositionSampler::new(shifted.src_vocab, shared, &shifted.sampler)?;
    let corpus_b = generate_corpus(shifted, &sampler_b, &mapping.shifted, &mut seen, 0xb)?;
    Ok(DomainPair {
        mapping,
        general: corpus_a,
        shifted: corpus_b,
    })
}

/// Bidirectional token/id map with PAD, BOS, EOS, UNK at ids 0..3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = crate::Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

impl Vocabulary {
    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIAL_NAMES.iter().map(|s| s.to_string()).collect())
            .expect("specials are distinct")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_NAMES {
            bail!(Format, "vocabulary must start with {:?}", SPECIAL_NAMES);
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                bail!(Format, "duplicate vocabulary token {t:?}");
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(SPECIAL_NAMES[UNK as usize], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Decodes ids, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }
}

/// Ids 0..3 are the specials; other tokens follow by descending frequency,
/// ties broken lexicographically.
pub fn build_vocab<'a, I>(tokens: I) -> Vocabulary
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens {
        if SPECIAL_NAMES.contains(&t) {
            continue;
        }
        *counts.entry(t).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    // BTreeMap iteration is lexicographic, and the sort is stable
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    let mut vocab = Vocabulary::specials_only();
    vocab
        .tokens
        .extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    vocab.reindex();
    vocab
}

/// Source and target vocabularies of a set of corpora.
pub fn build_vocabs<'a, I>(corpora: I) -> (Vocabulary, Vocabulary)
where
    I: IntoIterator<Item = &'a [SentencePair]> + Clone,
{
    let src = build_vocab(
        corpora
            .clone()
            .into_iter()
            .flat_map(|c| c.iter().flat_map(|p| p.source.iter().map(String::as_str))),
    );
    let tgt = build_vocab(
        corpora
            .into_iter()
            .flat_map(|c| c.iter().flat_map(|p| p.target.iter().map(String::as_str))),
    );
    (src, tgt)
}

/// A sentence pair mapped to ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

pub fn encode_corpus(pairs: &[SentencePair], src: &Vocabulary, tgt: &Vocabulary) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| EncodedPair {
            source: src.encode(&p.source),
            target: tgt.encode(&p.target),
        })
        .collect()
}

/// Fraction of source positions holding one of the `n` most frequent source
/// tokens of the corpus.
pub fn top_token_coverage(pairs: &[SentencePair], n: usize) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total = 0usize;
    for p in pairs {
        for t in &p.source {
            *counts.entry(t.as_str()).or_default() += 1;
            total += 1;
        }
    }
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable_by(|a, b| b.cmp(a));
    if total == 0 {
        return 0.0;
    }
    c.iter().take(n).sum::<usize>() as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn spec(name: &str, rho: f64, seed: u64) -> DomainSpec {
        DomainSpec {
            name: name.to_string(),
            src_vocab: 200,
            tgt_vocab: 200,
            shared_fraction: rho,
            min_len: 4,
            max_len: 12,
            train: 200,
            valid: 50,
            test: 50,
            seed,
            sampler: SamplerSpec::default(),
        }
    }

    #[test]
    fn full_sharing_means_no_shift() {
        let pair = generate_domain_pair(&spec("a", 1.0, 1), &spec("b", 1.0, 2)).unwrap();
        assert_eq!(pair.mapping.divergent_count(), 0);
        for p in &pair.shifted.train {
            let ranks: Vec<usize> = p.source.iter().map(|t| t[1..].parse().unwrap()).collect();
            let expected: Vec<String> = translate(&ranks, &pair.mapping.general)
                .into_iter()
                .map(target_token)
                .collect();
            assert_eq!(p.target, expected);
        }
    }

    #[test]
    fn zero_sharing_shifts_every_token() {
        let pair = generate_domain_pair(&spec("a", 0.0, 1), &spec("b", 0.0, 2)).unwrap();
        assert_eq!(pair.mapping.divergent_count(), 200);
    }

    #[test]
    fn divergent_count_by_enumeration() {
        let pair = generate_domain_pair(&spec("a", 0.8, 1), &spec("b", 0.8, 2)).unwrap();
        let m = &pair.mapping;
        let mut count = 0;
        for r in 0..200 {
            if m.general[r] != m.shifted[r] {
                count += 1;
            }
        }
        assert_eq!(count, 40);
        assert_eq!(m.divergent.len(), 40);
    }

    #[test]
    fn mismatched_vocab_sizes_rejected() {
        let mut b = spec("b", 0.8, 2);
        b.src_vocab = 100;
        b.tgt_vocab = 100;
        assert!(matches!(
            generate_domain_pair(&spec("a", 0.8, 1), &b),
            Err(crate::Error::Spec(_))
        ));
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = spec("a", 1.5, 1);
        assert!(s.validate().is_err());
        s.shared_fraction = 0.5;
        s.min_len = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_domain_pair(&spec("a", 0.8, 1), &spec("b", 0.8, 2)).unwrap();
        let b = generate_domain_pair(&spec("a", 0.8, 1), &spec("b", 0.8, 2)).unwrap();
        for split in Split::ALL {
            assert_eq!(
                corpus_to_tsv(a.shifted.split(split)),
                corpus_to_tsv(b.shifted.split(split))
            );
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let pair = generate_domain_pair(&spec("a", 0.8, 1), &spec("b", 0.8, 2)).unwrap();
        let mut all = BTreeSet::new();
        let mut n = 0;
        for c in [&pair.general, &pair.shifted] {
            for split in Split::ALL {
                for p in c.split(split) {
                    all.insert(p.clone());
                    n += 1;
                }
            }
        }
        assert_eq!(all.len(), n);
    }

    #[test]
    fn filler_tokens_cover_a_third_of_positions() {
        let pair = generate_domain_pair(&spec("a", 0.8, 1), &spec("b", 0.8, 2)).unwrap();
        assert!(top_token_coverage(&pair.shifted.train, 8) >= 0.30);
    }

    #[test]
    fn reordering_swaps_first_two() {
        assert_eq!(translate(&[0, 1, 2], &[10, 11, 12]), vec![11, 10, 12]);
        assert_eq!(translate(&[2], &[10, 11, 12]), vec![12]);
    }

    #[test]
    fn vocab_frequency_order() {
        let v = build_vocab("a a b".split(' '));
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
    }

    #[test]
    fn vocab_empty_corpus() {
        assert_eq!(build_vocab(core::iter::empty()).len(), 4);
    }

    #[test]
    fn vocab_lexicographic_tie_break() {
        let v = build_vocab("b a".split(' '));
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
    }

    #[test]
    fn vocab_roundtrip_and_unknown() {
        let v = build_vocab("x y y".split(' '));
        assert_eq!(v.encode(&["y", "x", "zz"]), vec![4, 5, UNK]);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS]), vec!["y".to_string(), "x".to_string()]);
        let back = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn tsv_roundtrip_and_errors() {
        let p = SentencePair {
            source: vec!["s1".into(), "s2".into()],
            target: vec!["t9".into()],
        };
        assert_eq!(SentencePair::parse_tsv_line(&p.to_tsv_line()).unwrap(), p);
        assert!(SentencePair::parse_tsv_line("no tab here").is_err());
        assert!(SentencePair::parse_tsv_line("a\t").is_err());
        assert!(corpus_from_tsv("s1\tt1\nbroken\n").is_err());
    }
}
