//! Key-value datastore of decoder hidden states and exact / clustered
//! nearest-neighbour search over it.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::ToyModel;
use crate::numerics::{squared_l2, squared_l2_bounded};
use crate::toygen::EncodedPair;
use crate::TokenId;

pub const MAGIC: [u8; 4] = *b"KNDS";
pub const FORMAT_VERSION: u32 = 1;
/// magic, version, d, reserved (keeps N and the key block 8-byte aligned), N
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatastoreMeta {
    pub domain: String,
    pub model_checksum: u64,
}

/// `N × d` keys with one target token per key.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<TokenId>,
    pub meta: DatastoreMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Squared L2 distance to the query.
    pub distance: f32,
    pub value: TokenId,
    pub index: u32,
}

impl Neighbor {
    /// Ascending distance, then ascending row index.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
    }
}

/// Neighbours sorted by [`Neighbor::rank_cmp`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub entries: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncated(&self, k: usize) -> NeighborSet {
        NeighborSet {
            entries: self.entries[..k.min(self.entries.len())].to_vec(),
        }
    }
}

/// Bounded sorted buffer keeping the best `k` neighbours seen so far.
struct TopK {
    k: usize,
    items: Vec<Neighbor>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn worst_distance(&self) -> f32 {
        if self.items.len() < self.k {
            f32::INFINITY
        } else {
            self.items[self.k - 1].distance
        }
    }

    #[inline]
    fn offer(&mut self, n: Neighbor) {
        if self.items.len() == self.k {
            let worst = &self.items[self.k - 1];
            if n.rank_cmp(worst) != Ordering::Less {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .partition_point(|x| x.rank_cmp(&n) == Ordering::Less);
        self.items.insert(pos, n);
    }

    fn finish(self) -> NeighborSet {
        NeighborSet { entries: self.items }
    }
}

impl Datastore {
    pub fn new(dim: usize, meta: DatastoreMeta) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
            meta,
        }
    }

    pub fn from_parts(dim: usize, keys: Vec<f32>, values: Vec<TokenId>, meta: DatastoreMeta) -> Result<Self> {
        if dim == 0 && !values.is_empty() {
            bail!(Dimension, "zero-dimensional keys");
        }
        if keys.len() != dim * values.len() {
            bail!(
                Dimension,
                "{} key floats do not form {} rows of dimension {}",
                keys.len(),
                values.len(),
                dim
            );
        }
        Ok(Self { dim, keys, values, meta })
    }

    pub fn push(&mut self, key: &[f32], value: TokenId) -> Result<()> {
        if key.len() != self.dim {
            bail!(Dimension, "key of length {} in a {}-d datastore", key.len(), self.dim);
        }
        self.keys.extend_from_slice(key);
        self.values.push(value);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, row: usize) -> &[f32] {
        &self.keys[row * self.dim..(row + 1) * self.dim]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[TokenId] {
        &self.values
    }

    fn check_query(&self, q: &[f32], k: usize) -> Result<()> {
        if k == 0 {
            bail!(Parameter, "K must be >= 1");
        }
        if q.len() != self.dim {
            bail!(Dimension, "query of length {} against {}-d keys", q.len(), self.dim);
        }
        Ok(())
    }

    /// Exact top-`k` by squared L2; ties go to the lower row index.
    pub fn knn_search(&self, q: &[f32], k: usize) -> Result<NeighborSet> {
        self.check_query(q, k)?;
        let mut top = TopK::new(k);
        for (row, key) in self.keys.chunks_exact(self.dim.max(1)).enumerate() {
            if let Some(d) = squared_l2_bounded(q, key, top.worst_distance()) {
                top.offer(Neighbor {
                    distance: d,
                    value: self.values[row],
                    index: row as u32,
                });
            }
        }
        Ok(top.finish())
    }

    /// Serializes to the `KNDS` binary layout (metadata is stored separately).
    pub fn encode(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * self.dim + 4 * n);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for v in &self.keys {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], meta: DatastoreMeta) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            bail!(Format, "datastore file shorter than its {HEADER_LEN}-byte header");
        }
        if bytes[..4] != MAGIC {
            bail!(Format, "bad magic {:?}", &bytes[..4]);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            bail!(Format, "unsupported datastore version {version}");
        }
        let dim = u32_at(8) as usize;
        if u32_at(12) != 0 {
            bail!(Format, "reserved header field is not zero");
        }
        let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let expected = (n as u128) * (4 * dim as u128 + 4) + HEADER_LEN as u128;
        if bytes.len() as u128 != expected {
            bail!(
                Format,
                "datastore of {n} x {dim} needs {expected} bytes, file has {}",
                bytes.len()
            );
        }
        let n = n as usize;
        let key_end = HEADER_LEN + 4 * n * dim;
        let keys = bytes[HEADER_LEN..key_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = bytes[key_end..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(dim, keys, values, meta)
    }
}

/// One entry per teacher-forced step (EOS included) of every pair.
pub fn build_datastore(model: &ToyModel, corpus: &[EncodedPair], domain: &str) -> Result<Datastore> {
    model.require_frozen()?;
    let mut ds = Datastore::new(
        model.hidden_dim(),
        DatastoreMeta {
            domain: domain.into(),
            model_checksum: model.checksum(),
        },
    );
    let total: usize = corpus.iter().map(|p| p.target.len() + 1).sum();
    ds.keys.reserve(total * ds.dim);
    ds.values.reserve(total);
    for pair in corpus {
        for rec in model.teacher_forced_pass(pair)? {
            ds.push(&rec.hidden, rec.gold)?;
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub n_clusters: usize,
    pub max_iters: usize,
    /// Upper bound on training points per centroid.
    pub sample_per_cluster: usize,
    pub seed: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            n_clusters: 64,
            max_iters: 50,
            sample_per_cluster: 256,
            seed: 5,
        }
    }
}

/// Inverted-file index: k-means centroids and per-centroid row lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredIndex {
    dim: usize,
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
}

fn nearest_centroid(centroids: &[f32], dim: usize, x: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(x, cent);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

impl ClusteredIndex {
    pub fn build(ds: &Datastore, params: &ClusterParams) -> Result<Self> {
        if params.n_clusters == 0 {
            bail!(Parameter, "n_clusters must be >= 1");
        }
        let dim = ds.dim();
        let n = ds.len();
        let k = params.n_clusters.min(n.max(1));
        let mut rng = crate::rng_from_seed(params.seed);
        let mut centroids = vec![0.0f32; params.n_clusters * dim];
        if n > 0 {
            let sample_n = n.min(params.sample_per_cluster.max(1) * k);
            let sample_rows: Vec<usize> = {
                let mut s = sample(&mut rng, n, sample_n).into_vec();
                s.sort_unstable();
                s
            };
            let init: Vec<usize> = sample(&mut rng, sample_rows.len(), k).into_vec();
            for (c, &i) in init.iter().enumerate() {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(ds.key(sample_rows[i]));
            }
            let active = &mut centroids[..k * dim];
            let mut assign = vec![usize::MAX; sample_rows.len()];
            for _ in 0..params.max_iters {
                let mut changed = false;
                for (slot, &row) in sample_rows.iter().enumerate() {
                    let c = nearest_centroid(active, dim, ds.key(row));
                    if assign[slot] != c {
                        assign[slot] = c;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
                let mut sums = vec![0.0f64; k * dim];
                let mut counts = vec![0usize; k];
                for (slot, &row) in sample_rows.iter().enumerate() {
                    let c = assign[slot];
                    counts[c] += 1;
                    for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(ds.key(row)) {
                        *s += v as f64;
                    }
                }
                for c in 0..k {
                    // empty clusters keep their previous centroid
                    if counts[c] == 0 {
                        continue;
                    }
                    for (dst, &s) in active[c * dim..(c + 1) * dim]
                        .iter_mut()
                        .zip(&sums[c * dim..(c + 1) * dim])
                    {
                        *dst = (s / counts[c] as f64) as f32;
                    }
                }
            }
            // surplus clusters (n < n_clusters) duplicate centroid 0 and stay empty
            for c in k..params.n_clusters {
                let (head, tail) = centroids.split_at_mut(c * dim);
                tail[..dim].copy_from_slice(&head[..dim]);
            }
        }
        let mut lists = vec![Vec::new(); params.n_clusters];
        for row in 0..n {
            let c = nearest_centroid(&centroids[..k * dim], dim, ds.key(row));
            lists[c].push(row as u32);
        }
        Ok(Self { dim, centroids, lists })
    }

    pub fn n_clusters(&self) -> usize {
        self.lists.len()
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    /// Scans the member lists of the `n_probe` nearest centroids.
    pub fn search(&self, ds: &Datastore, q: &[f32], k: usize, n_probe: usize) -> Result<NeighborSet> {
        ds.check_query(q, k)?;
        if n_probe == 0 || n_probe > self.n_clusters() {
            bail!(
                Parameter,
                "n_probe must be in 1..={}, got {n_probe}",
                self.n_clusters()
            );
        }
        if ds.dim() != self.dim {
            bail!(Dimension, "index built for {}-d keys, datastore is {}-d", self.dim, ds.dim());
        }
        let mut cent: Vec<(f32, usize)> = self
            .centroids
            .chunks_exact(self.dim.max(1))
            .enumerate()
            .map(|(c, v)| (squared_l2(q, v), c))
            .collect();
        cent.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut top = TopK::new(k);
        for &(_, c) in &cent[..n_probe] {
            for &row in &self.lists[c] {
                if let Some(d) = squared_l2_bounded(q, ds.key(row as usize), top.worst_distance()) {
                    top.offer(Neighbor {
                        distance: d,
                        value: ds.values[row as usize],
                        index: row,
                    });
                }
            }
        }
        Ok(top.finish())
    }
}

/// Fraction of `exact` rows also present in `approx`.
pub fn recall(exact: &NeighborSet, approx: &NeighborSet) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let hits = exact
        .entries
        .iter()
        .filter(|e| approx.entries.iter().any(|a| a.index == e.index))
        .count();
    hits as f64 / exact.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn meta() -> DatastoreMeta {
        DatastoreMeta {
            domain: "t".into(),
            model_checksum: 9,
        }
    }

    fn random_store(n: usize, d: usize, seed: u64) -> Datastore {
        let mut rng = crate::rng_from_seed(seed);
        let keys = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let values = (0..n).map(|_| rng.gen_range(4..50)).collect();
        Datastore::from_parts(d, keys, values, meta()).unwrap()
    }

    /// Sorts every row by (distance, index).
    fn exhaustive(ds: &Datastore, q: &[f32], k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = (0..ds.len())
            .map(|r| Neighbor {
                distance: squared_l2(q, ds.key(r)),
                value: ds.values()[r],
                index: r as u32,
            })
            .collect();
        all.sort_by(|a, b| a.rank_cmp(b));
        all.truncate(k);
        all
    }

    #[test]
    fn self_match_comes_first() {
        let ds = random_store(100, 8, 1);
        let nb = ds.knn_search(ds.key(17), 3).unwrap();
        assert_eq!(nb.entries[0].distance, 0.0);
        assert_eq!(nb.entries[0].index, 17);
        assert_eq!(nb.entries[0].value, ds.values()[17]);
    }

    #[test]
    fn k_larger_than_n_returns_all_sorted() {
        let ds = random_store(5, 4, 2);
        let nb = ds.knn_search(&[0.0; 4], 10).unwrap();
        assert_eq!(nb.len(), 5);
        assert!(nb.entries.windows(2).all(|w| w[0].rank_cmp(&w[1]) == Ordering::Less));
    }

    #[test]
    fn empty_store_gives_empty_set() {
        let ds = Datastore::new(4, meta());
        assert!(ds.knn_search(&[0.0; 4], 8).unwrap().is_empty());
    }

    #[test]
    fn bad_queries_rejected() {
        let ds = random_store(5, 4, 2);
        assert!(matches!(ds.knn_search(&[0.0; 3], 1), Err(crate::Error::Dimension(_))));
        assert!(matches!(ds.knn_search(&[0.0; 4], 0), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn ties_break_by_row_index() {
        let keys = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        let ds = Datastore::from_parts(2, keys, vec![4, 5, 6, 7], meta()).unwrap();
        let nb = ds.knn_search(&[0.0, 0.0], 3).unwrap();
        let rows: Vec<u32> = nb.entries.iter().map(|n| n.index).collect();
        assert_eq!(rows, vec![0, 1, 2]);
    }

    #[test]
    fn matches_exhaustive_scan_with_duplicates() {
        let mut ds = random_store(500, 6, 3);
        // plant exact duplicates so ties actually occur
        for r in 0..50 {
            let k = ds.key(r).to_vec();
            ds.push(&k, 7).unwrap();
        }
        let mut rng = crate::rng_from_seed(4);
        for _ in 0..30 {
            let q: Vec<f32> = if rng.gen_bool(0.5) {
                ds.key(rng.gen_range(0..50)).to_vec()
            } else {
                (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            for k in [1, 8, 64] {
                assert_eq!(ds.knn_search(&q, k).unwrap().entries, exhaustive(&ds, &q, k));
            }
        }
    }

    #[test]
    fn encode_decode_roundtrip_and_size() {
        let ds = random_store(37, 5, 5);
        let bytes = ds.encode();
        assert_eq!(bytes.len(), 24 + 4 * 37 * 5 + 4 * 37);
        let back = Datastore::decode(&bytes, meta()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn decode_rejects_corruption() {
        let ds = random_store(10, 3, 6);
        let bytes = ds.encode();
        assert!(matches!(Datastore::decode(&bytes[..bytes.len() - 1], meta()), Err(crate::Error::Format(_))));
        assert!(matches!(Datastore::decode(&bytes[..10], meta()), Err(crate::Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Datastore::decode(&bad, meta()).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Datastore::decode(&bad, meta()).is_err());
        let mut bad = bytes;
        bad[16] = 11;
        assert!(Datastore::decode(&bad, meta()).is_err());
    }

    #[test]
    fn full_probe_equals_exact() {
        let ds = random_store(2000, 8, 7);
        for n_clusters in [1, 16] {
            let idx = ClusteredIndex::build(&ds, &ClusterParams { n_clusters, ..Default::default() }).unwrap();
            assert_eq!(idx.list_sizes().iter().sum::<usize>(), 2000);
            let mut rng = crate::rng_from_seed(8);
            for _ in 0..20 {
                let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                assert_eq!(
                    idx.search(&ds, &q, 8, n_clusters).unwrap(),
                    ds.knn_search(&q, 8).unwrap()
                );
            }
        }
    }

    #[test]
    fn recall_monotone_in_probe() {
        let ds = random_store(3000, 8, 9);
        let idx = ClusteredIndex::build(&ds, &ClusterParams { n_clusters: 16, ..Default::default() }).unwrap();
        let mut rng = crate::rng_from_seed(10);
        let queries: Vec<Vec<f32>> = (0..50)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut prev = 0.0;
        for probe in [1, 2, 4, 8, 16] {
            let r: f64 = queries
                .iter()
                .map(|q| recall(&ds.knn_search(q, 8).unwrap(), &idx.search(&ds, q, 8, probe).unwrap()))
                .sum::<f64>()
                / queries.len() as f64;
            assert!(r >= prev);
            prev = r;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn probe_out_of_range() {
        let ds = random_store(100, 4, 11);
        let idx = ClusteredIndex::build(&ds, &ClusterParams { n_clusters: 4, ..Default::default() }).unwrap();
        assert!(matches!(idx.search(&ds, &[0.0; 4], 2, 5), Err(crate::Error::Parameter(_))));
        assert!(ClusteredIndex::build(&ds, &ClusterParams { n_clusters: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn more_clusters_than_rows() {
        let ds = random_store(3, 4, 12);
        let idx = ClusteredIndex::build(&ds, &ClusterParams { n_clusters: 8, ..Default::default() }).unwrap();
        assert_eq!(idx.search(&ds, &[0.0; 4], 2, 8).unwrap(), ds.knn_search(&[0.0; 4], 2).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn search_equals_exhaustive_fuzz(seed in 0u64..1000, n in 1usize..300, k in 1usize..64) {
            let ds = random_store(n, 4, seed);
            let q = ds.key(0).iter().map(|v| v * 0.5).collect::<Vec<f32>>();
            let nb = ds.knn_search(&q, k).unwrap();
            proptest::prop_assert_eq!(&nb.entries, &exhaustive(&ds, &q, k));
            proptest::prop_assert!(nb.entries.iter().all(|e| e.distance >= 0.0));
        }
    }
}
