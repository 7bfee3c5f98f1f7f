//! p-stable (Gaussian) locality-sensitive hashing.
//!
//! A point is mapped by `L` hash families of `k` functions
//! `h(v) = floor((a·v + b) / r)` each. Every `k`-signature is reduced to a
//! table slot `H1` and a fingerprint `H2` by integer linear combinations
//! modulo the prime `C = 2^32 - 5`; a query retrieves the entries of its slot
//! whose fingerprint matches its own.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::{self, Neighbor};
use crate::rng::{self, Rng};
use crate::scalar::{dot_f64, Scalar};
use crate::serial::{BinReader, BinWriter};
use crate::vecdata::Dataset;

/// `2^32 - 5`.
pub const PRIME: u64 = 4_294_967_291;

pub const E2LX_MAGIC: &[u8; 4] = b"E2LX";
pub const E2LX_VERSION: u16 = 1;
/// Fixed bytes before the first family in an E2LX blob.
pub const E2LX_HEADER_LEN: u64 = 4 + 2 + 4 + 4 + 4 + 8 + 8 + 8;

/// `h(v) = floor((a·v + b) / r)` with `a ~ N(0, I)` and `b ~ U(0, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StableHashFunction {
    a: Vec<f64>,
    b: f64,
    width: f64,
}

impl StableHashFunction {
    pub fn new(a: Vec<f64>, b: f64, width: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::InvalidConfig("projection must have positive dimension".into()));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidConfig(format!("width must be positive, got {width}")));
        }
        if !(b > 0.0 && b < width) {
            return Err(Error::InvalidConfig(format!("offset {b} not in (0, {width})")));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("non-finite projection".into()));
        }
        Ok(Self { a, b, width })
    }

    pub fn sample(dim: usize, width: f64, rng: &mut Rng) -> Self {
        let a = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let b = loop {
            let b = rng.random::<f64>() * width;
            if b > 0.0 {
                break b;
            }
        };
        Self { a, b, width }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn projection(&self) -> &[f64] {
        &self.a
    }

    pub fn offset(&self) -> f64 {
        self.b
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn hash<T: Scalar>(&self, v: &[T]) -> Result<i64> {
        Error::check_dim(self.a.len(), v.len())?;
        Ok(self.hash_unchecked(v))
    }

    #[inline]
    pub(crate) fn hash_unchecked<T: Scalar>(&self, v: &[T]) -> i64 {
        ((dot_f64(&self.a, v) + self.b) / self.width).floor() as i64
    }
}

/// `g(v) = (h_1(v), ..., h_k(v))`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashFamily {
    functions: Vec<StableHashFunction>,
}

impl HashFamily {
    pub fn new(functions: Vec<StableHashFunction>) -> Result<Self> {
        let Some(first) = functions.first() else {
            return Err(Error::InvalidConfig("hash family needs k >= 1 functions".into()));
        };
        if functions
            .iter()
            .any(|f| f.dim() != first.dim() || f.width() != first.width())
        {
            return Err(Error::InvalidConfig(
                "functions of a family must share dimension and width".into(),
            ));
        }
        Ok(Self { functions })
    }

    pub fn sample(dim: usize, k: usize, width: f64, rng: &mut Rng) -> Self {
        let functions = (0..k)
            .map(|_| StableHashFunction::sample(dim, width, rng))
            .collect();
        Self { functions }
    }

    pub fn functions(&self) -> &[StableHashFunction] {
        &self.functions
    }

    pub fn k(&self) -> usize {
        self.functions.len()
    }

    pub fn dim(&self) -> usize {
        self.functions[0].dim()
    }

    pub fn hash<T: Scalar>(&self, v: &[T]) -> Result<Vec<i64>> {
        Error::check_dim(self.dim(), v.len())?;
        let mut out = vec![0; self.k()];
        self.hash_into(v, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn hash_into<T: Scalar>(&self, v: &[T], out: &mut [i64]) {
        for (o, f) in out.iter_mut().zip(&self.functions) {
            *o = f.hash_unchecked(v);
        }
    }
}

/// Draws `tables` families; family `j` comes from stream `j` of `seed`.
pub fn sample_families(dim: usize, tables: usize, k: usize, width: f64, seed: u64) -> Vec<HashFamily> {
    (0..tables)
        .map(|j| HashFamily::sample(dim, k, width, &mut rng::stream(seed, j as u64)))
        .collect()
}

/// Slot hash `H1` and fingerprint `H2` over a `k`-signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketHasher {
    r1: Vec<u64>,
    r2: Vec<u64>,
    table_len: u64,
}

#[inline]
fn residue(x: i64) -> u64 {
    x.rem_euclid(PRIME as i64) as u64
}

#[inline]
fn mod_combination(coeffs: &[u64], x: &[i64]) -> u64 {
    // coeffs and residues are < 2^32, so each product fits in u64
    coeffs
        .iter()
        .zip(x)
        .fold(0u64, |acc, (&c, &xi)| (acc + c * residue(xi) % PRIME) % PRIME)
}

impl BucketHasher {
    pub fn new(r1: Vec<u64>, r2: Vec<u64>, table_len: u64) -> Result<Self> {
        if r1.len() != r2.len() || r1.is_empty() {
            return Err(Error::InvalidConfig("bucket coefficients must have equal length k >= 1".into()));
        }
        if table_len == 0 {
            return Err(Error::InvalidConfig("table length must be positive".into()));
        }
        if r1.iter().chain(&r2).any(|&c| c == 0 || c >= PRIME) {
            return Err(Error::InvalidConfig("bucket coefficients must lie in [1, C-1]".into()));
        }
        Ok(Self { r1, r2, table_len })
    }

    pub fn sample(k: usize, table_len: u64, rng: &mut Rng) -> Self {
        let r1 = (0..k).map(|_| rng.random_range(1..PRIME)).collect();
        let r2 = (0..k).map(|_| rng.random_range(1..PRIME)).collect();
        Self { r1, r2, table_len }
    }

    pub fn k(&self) -> usize {
        self.r1.len()
    }

    pub fn table_len(&self) -> u64 {
        self.table_len
    }

    pub fn slot_coefficients(&self) -> &[u64] {
        &self.r1
    }

    pub fn fingerprint_coefficients(&self) -> &[u64] {
        &self.r2
    }

    /// `(H1, H2)` with `H1 in [0, T)` and `H2 in [0, C)`.
    pub fn bucket_hash(&self, x: &[i64]) -> Result<(u64, u64)> {
        if x.len() != self.k() {
            return Err(Error::ShapeMismatch(format!(
                "signature has {} values, hasher expects {}",
                x.len(),
                self.k()
            )));
        }
        Ok(self.bucket_hash_unchecked(x))
    }

    #[inline]
    pub(crate) fn bucket_hash_unchecked(&self, x: &[i64]) -> (u64, u64) {
        let h1 = mod_combination(&self.r1, x) % self.table_len;
        let h2 = mod_combination(&self.r2, x);
        (h1, h2)
    }
}

pub fn sample_hashers(tables: usize, k: usize, table_len: u64, seed: u64) -> Vec<BucketHasher> {
    (0..tables)
        .map(|j| BucketHasher::sample(k, table_len, &mut rng::stream(seed, j as u64)))
        .collect()
}

/// One hash table: for each slot, `(fingerprint, id)` entries sorted by
/// fingerprint then id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashTable {
    offsets: Vec<u32>,
    fingerprints: Vec<u64>,
    ids: Vec<u32>,
}

impl HashTable {
    /// Builds from `(H1, H2, id)` triples.
    pub fn from_entries(table_len: u64, mut entries: Vec<(u64, u64, u32)>) -> Result<Self> {
        if entries.iter().any(|&(h1, h2, _)| h1 >= table_len || h2 >= PRIME) {
            return Err(Error::Format("hash table entry out of range".into()));
        }
        entries.sort_unstable();
        let mut offsets = vec![0u32; table_len as usize + 1];
        for &(h1, _, _) in &entries {
            offsets[h1 as usize + 1] += 1;
        }
        for i in 1..offsets.len() {
            offsets[i] += offsets[i - 1];
        }
        Ok(Self {
            offsets,
            fingerprints: entries.iter().map(|e| e.1).collect(),
            ids: entries.iter().map(|e| e.2).collect(),
        })
    }

    pub fn table_len(&self) -> u64 {
        (self.offsets.len() - 1) as u64
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids stored at `slot` under fingerprint `fingerprint`.
    pub fn lookup(&self, slot: u64, fingerprint: u64) -> &[u32] {
        let Some(&start) = self.offsets.get(slot as usize) else {
            return &[];
        };
        let (start, end) = (start as usize, self.offsets[slot as usize + 1] as usize);
        let fps = &self.fingerprints[start..end];
        let lo = fps.partition_point(|&f| f < fingerprint);
        let hi = fps.partition_point(|&f| f <= fingerprint);
        &self.ids[start + lo..start + hi]
    }

    /// `(H1, H2, id)` in sorted order.
    pub fn entries(&self) -> impl Iterator<Item = (u64, u64, u32)> + '_ {
        self.offsets.windows(2).enumerate().flat_map(move |(slot, w)| {
            (w[0] as usize..w[1] as usize).map(move |i| (slot as u64, self.fingerprints[i], self.ids[i]))
        })
    }

    /// Slot directory plus 12 bytes per entry.
    pub fn size_bytes(&self) -> u64 {
        self.offsets.len() as u64 * 4 + self.ids.len() as u64 * (8 + 4)
    }
}

/// `L` bucket hashers and their tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSet {
    hashers: Vec<BucketHasher>,
    tables: Vec<HashTable>,
}

impl TableSet {
    /// `signatures[j]` holds the `k`-signatures of every row for table `j`
    /// (row-major, `n * k`).
    pub fn build(hashers: Vec<BucketHasher>, signatures: &[Vec<i64>], ids: &[u32]) -> Result<Self> {
        if hashers.len() != signatures.len() {
            return Err(Error::ShapeMismatch("one signature block per table expected".into()));
        }
        let tables = hashers
            .par_iter()
            .zip(signatures)
            .map(|(h, sig)| {
                if sig.len() != ids.len() * h.k() {
                    return Err(Error::ShapeMismatch("signature block has wrong length".into()));
                }
                let entries = sig
                    .chunks_exact(h.k())
                    .zip(ids)
                    .map(|(s, &id)| {
                        let (h1, h2) = h.bucket_hash_unchecked(s);
                        (h1, h2, id)
                    })
                    .collect();
                HashTable::from_entries(h.table_len(), entries)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { hashers, tables })
    }

    pub fn hashers(&self) -> &[BucketHasher] {
        &self.hashers
    }

    pub fn tables(&self) -> &[HashTable] {
        &self.tables
    }

    pub fn total_entries(&self) -> usize {
        self.tables.iter().map(HashTable::len).sum()
    }

    /// Deduplicated ids whose `(H1, H2)` matches in at least one table.
    /// `signatures` is the `L * k` query signature, table-major.
    pub fn candidate_ids(&self, signatures: &[i64]) -> Vec<u32> {
        let mut out = Vec::new();
        for ((h, t), sig) in self
            .hashers
            .iter()
            .zip(&self.tables)
            .zip(signatures.chunks_exact(self.k().max(1)))
        {
            let (h1, h2) = h.bucket_hash_unchecked(sig);
            out.extend_from_slice(t.lookup(h1, h2));
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn k(&self) -> usize {
        self.hashers.first().map_or(0, BucketHasher::k)
    }

    pub fn coefficient_bytes(&self) -> u64 {
        self.hashers.iter().map(|h| 2 * h.k() as u64 * 8).sum()
    }

    pub fn table_bytes(&self) -> u64 {
        self.tables.iter().map(HashTable::size_bytes).sum()
    }

    pub(crate) fn write<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        for h in &self.hashers {
            for &c in h.r1.iter().chain(&h.r2) {
                w.u64(c)?;
            }
        }
        for t in &self.tables {
            w.u64(t.len() as u64)?;
            for (h1, h2, id) in t.entries() {
                w.u32(h1 as u32)?;
                w.u64(h2)?;
                w.u32(id)?;
            }
        }
        Ok(())
    }

    pub(crate) fn read<R: Read, T: Scalar>(
        r: &mut BinReader<R>,
        tables: usize,
        k: usize,
        table_len: u64,
        dataset: &Dataset<T>,
    ) -> Result<Self> {
        let mut hashers = Vec::with_capacity(tables);
        for _ in 0..tables {
            let at = r.offset();
            let coeffs = (0..2 * k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let (r1, r2) = coeffs.split_at(k);
            let h = BucketHasher::new(r1.to_vec(), r2.to_vec(), table_len)
                .map_err(|e| Error::parse(crate::error::Location::Byte(at), e.to_string()))?;
            hashers.push(h);
        }
        let mut out = Vec::with_capacity(tables);
        for _ in 0..tables {
            let count = r.u64()? as usize;
            let mut entries = Vec::with_capacity(count.min(1 << 26));
            let mut prev = None;
            for _ in 0..count {
                let at = r.offset();
                let e = (r.u32()? as u64, r.u64()?, r.u32()?);
                if e.0 >= table_len || e.1 >= PRIME {
                    return Err(Error::parse(crate::error::Location::Byte(at), "hash value out of range"));
                }
                if dataset.row_of_id(e.2).is_none() {
                    return Err(Error::parse(
                        crate::error::Location::Byte(at),
                        format!("id {} is not in the dataset", e.2),
                    ));
                }
                if prev.is_some_and(|p| p >= e) {
                    return Err(Error::parse(crate::error::Location::Byte(at), "table entries not sorted"));
                }
                prev = Some(e);
                entries.push(e);
            }
            out.push(HashTable::from_entries(table_len, entries)?);
        }
        Ok(Self { hashers, tables: out })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct E2lshParams {
    /// Number of tables `L`.
    pub tables: usize,
    /// Functions per family `k`.
    pub k: usize,
    /// Segment width `r`.
    pub width: f64,
    /// Table length `T`; the number of indexed points when `None`.
    pub table_len: Option<u64>,
}

impl Default for E2lshParams {
    fn default() -> Self {
        Self {
            tables: 30,
            k: 10,
            width: 4.0,
            table_len: None,
        }
    }
}

impl E2lshParams {
    pub fn validate(&self) -> Result<()> {
        if self.tables == 0 || self.k == 0 {
            return Err(Error::InvalidConfig("L and k must be positive".into()));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::InvalidConfig(format!("width must be positive, got {}", self.width)));
        }
        if self.table_len == Some(0) {
            return Err(Error::InvalidConfig("table length must be positive".into()));
        }
        Ok(())
    }
}

/// Multi-table E2LSH index over a shared dataset.
#[derive(Debug, Clone)]
pub struct E2lshIndex<T = f32> {
    params: E2lshParams,
    table_len: u64,
    families: Vec<HashFamily>,
    tables: TableSet,
    dataset: Arc<Dataset<T>>,
}

impl<T: Scalar> E2lshIndex<T> {
    /// Families come from streams of `seed`, bucket hashers from streams of
    /// a seed derived from it.
    pub fn build(dataset: Arc<Dataset<T>>, params: E2lshParams, seed: u64) -> Result<Self> {
        params.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidDataset("cannot index an empty dataset".into()));
        }
        let table_len = params.table_len.unwrap_or(dataset.len() as u64);
        let families = sample_families(dataset.dim(), params.tables, params.k, params.width, seed);
        let hashers = sample_hashers(params.tables, params.k, table_len, rng::derive_seed(seed, 0));
        let signatures: Vec<Vec<i64>> = families
            .par_iter()
            .map(|g| {
                let mut sig = vec![0i64; dataset.len() * params.k];
                for (row, out) in dataset.rows().zip(sig.chunks_exact_mut(params.k)) {
                    g.hash_into(row, out);
                }
                sig
            })
            .collect();
        let tables = TableSet::build(hashers, &signatures, dataset.ids())?;
        Ok(Self {
            params: E2lshParams {
                table_len: Some(table_len),
                ..params
            },
            table_len,
            families,
            tables,
            dataset,
        })
    }

    pub fn params(&self) -> E2lshParams {
        self.params
    }

    pub fn table_len(&self) -> u64 {
        self.table_len
    }

    pub fn families(&self) -> &[HashFamily] {
        &self.families
    }

    pub fn table_set(&self) -> &TableSet {
        &self.tables
    }

    pub fn dataset(&self) -> &Arc<Dataset<T>> {
        &self.dataset
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    /// Table-major `L * k` signature of `q`.
    pub fn signature<Q: Scalar>(&self, q: &[Q]) -> Result<Vec<i64>> {
        Error::check_dim(self.dim(), q.len())?;
        let k = self.params.k;
        let mut sig = vec![0i64; self.families.len() * k];
        for (g, out) in self.families.iter().zip(sig.chunks_exact_mut(k)) {
            g.hash_into(q, out);
        }
        Ok(sig)
    }

    /// Signatures of every row, hashing one function at a time.
    pub fn hash_all<Q: Scalar>(&self, points: &Dataset<Q>) -> Result<Vec<i64>> {
        Error::check_dim(self.dim(), points.dim())?;
        let k = self.params.k;
        let width = self.families.len() * k;
        let mut out = vec![0i64; points.len() * width];
        for (row, sig) in points.rows().zip(out.chunks_exact_mut(width)) {
            for (g, o) in self.families.iter().zip(sig.chunks_exact_mut(k)) {
                g.hash_into(row, o);
            }
        }
        Ok(out)
    }

    /// Dataset rows colliding with `q` in at least one table.
    pub fn candidates<Q: Scalar>(&self, q: &[Q]) -> Result<Vec<usize>> {
        let sig = self.signature(q)?;
        Ok(ids_to_rows(&self.dataset, self.tables.candidate_ids(&sig)))
    }

    /// Up to `topk` candidates ordered by `(distance, id)`.
    pub fn query<Q: Scalar>(&self, q: &[Q], topk: usize) -> Result<Vec<Neighbor>> {
        let rows = self.candidates(q)?;
        Ok(knn::rank_rows(&self.dataset, q, rows, topk))
    }

    /// Projection and offset bytes (`f64`) plus bucket coefficients.
    pub fn coefficient_bytes(&self) -> u64 {
        let functions = (self.params.tables * self.params.k) as u64;
        functions * (self.dim() as u64 + 1) * 8 + self.tables.coefficient_bytes()
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<u64> {
        let mut w = BinWriter::new(writer);
        w.bytes(E2LX_MAGIC)?;
        w.u16(E2LX_VERSION)?;
        w.u32(self.dim() as u32)?;
        w.u32(self.params.tables as u32)?;
        w.u32(self.params.k as u32)?;
        w.f64(self.params.width)?;
        w.u64(self.table_len)?;
        w.u64(self.dataset.len() as u64)?;
        for g in &self.families {
            for f in g.functions() {
                for &x in f.projection() {
                    w.f64(x)?;
                }
                w.f64(f.offset())?;
            }
        }
        self.tables.write(&mut w)?;
        Ok(w.bytes_written())
    }

    /// Reads an index written by [`E2lshIndex::write_to`] for `dataset`.
    pub fn read_from<R: Read>(reader: R, dataset: Arc<Dataset<T>>) -> Result<Self> {
        let mut r = BinReader::new(reader);
        r.magic(E2LX_MAGIC)?;
        r.version(E2LX_VERSION)?;
        let dim = r.u32()? as usize;
        let tables = r.u32()? as usize;
        let k = r.u32()? as usize;
        let width = r.finite_f64()?;
        let table_len = r.u64()?;
        let n_points = r.u64()?;
        Error::check_dim(dim, dataset.dim())?;
        if n_points != dataset.len() as u64 {
            return Err(Error::Format(format!(
                "index covers {n_points} points but dataset has {}",
                dataset.len()
            )));
        }
        let params = E2lshParams {
            tables,
            k,
            width,
            table_len: Some(table_len),
        };
        params.validate().map_err(|e| r.error(e.to_string()))?;
        let mut families = Vec::with_capacity(tables);
        for _ in 0..tables {
            let mut functions = Vec::with_capacity(k);
            for _ in 0..k {
                let at = r.offset();
                let a = (0..dim).map(|_| r.finite_f64()).collect::<Result<Vec<_>>>()?;
                let b = r.finite_f64()?;
                let f = StableHashFunction::new(a, b, width)
                    .map_err(|e| Error::parse(crate::error::Location::Byte(at), e.to_string()))?;
                functions.push(f);
            }
            families.push(HashFamily::new(functions)?);
        }
        let table_set = TableSet::read(&mut r, tables, k, table_len, &dataset)?;
        r.finish()?;
        Ok(Self {
            params,
            table_len,
            families,
            tables: table_set,
            dataset,
        })
    }
}

pub(crate) fn ids_to_rows<T: Scalar>(ds: &Dataset<T>, ids: Vec<u32>) -> Vec<usize> {
    ids.into_iter().filter_map(|id| ds.row_of_id(id)).collect()
}
