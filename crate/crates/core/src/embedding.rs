//! Unit-norm text embeddings, cosine similarity, and the on-disk vector store.
//!
//! The bundled [`HashedEncoder`] is a deterministic character-trigram
//! feature hasher. It lets the whole pipeline run without a neural model;
//! vectors from a real encoder are imported through the store file instead.
//!
//! Store file layout:
//!
//! ```text
//! dim=<d> count=<n>
//! <text>\t<f1> <f2> ... <fd>
//! ```

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MIN_HASH_DIM: usize = 8;

/// Renormalize loaded vectors whose norm is further than this from 1.
const RENORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// The basis vector `e_index` of dimension `dim`.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        EmbeddingVector(v)
    }

    /// L2-normalize `values`. All-zero input maps to `e_0`.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("zero-length vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite vector component".into()));
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Ok(Self::basis(values.len(), 0));
        }
        Ok(EmbeddingVector(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl std::ops::Neg for &EmbeddingVector {
    type Output = EmbeddingVector;

    fn neg(self) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|v| -v).collect())
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of two unit vectors: their dot product, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot(a.as_slice(), b.as_slice()))
}

/// Dot product clamped to [-1, 1]; callers guarantee equal lengths.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc.clamp(-1.0, 1.0)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Signed character-trigram feature hashing.
///
/// The text is lowercased and padded with one `#` on each side. Each
/// character trigram is hashed (FNV-1a 64 over its UTF-8 bytes) into bucket
/// `hash % dim` with sign `+1` when bit 63 is clear, `-1` otherwise. The
/// accumulated vector is L2-normalized; texts without features map to `e_0`.
pub fn embed_hashed(text: &str, dim: usize) -> Result<EmbeddingVector> {
    if dim < MIN_HASH_DIM {
        return Err(Error::Config(format!(
            "hashed encoder dim must be >= {MIN_HASH_DIM}, got {dim}"
        )));
    }
    let mut chars: Vec<char> = Vec::with_capacity(text.len() + 2);
    chars.push('#');
    chars.extend(text.to_lowercase().chars());
    chars.push('#');

    let mut acc = vec![0.0f64; dim];
    let mut buf = String::with_capacity(12);
    for w in chars.windows(3) {
        buf.clear();
        buf.extend(w);
        let h = fnv1a64(buf.as_bytes());
        let bucket = (h % dim as u64) as usize;
        acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    EmbeddingVector::normalized(acc)
}

/// Anything that can turn a surface string into a unit vector.
pub trait Encoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Cow<'_, EmbeddingVector>>;
}

#[derive(Debug, Clone, Copy)]
pub struct HashedEncoder {
    dim: usize,
}

impl HashedEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < MIN_HASH_DIM {
            return Err(Error::Config(format!(
                "hashed encoder dim must be >= {MIN_HASH_DIM}, got {dim}"
            )));
        }
        Ok(HashedEncoder { dim })
    }
}

impl Encoder for HashedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Cow<'_, EmbeddingVector>> {
        embed_hashed(text, self.dim).map(Cow::Owned)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: BTreeMap<String, EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("store dim must be positive".into()));
        }
        Ok(EmbeddingStore {
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<&EmbeddingVector> {
        self.entries.get(text)
    }

    pub fn contains(&self, text: &str) -> bool {
        self.entries.contains_key(text)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Insert or replace a vector. Returns the previous one, if any.
    pub fn insert(&mut self, text: impl Into<String>, v: EmbeddingVector) -> Result<Option<EmbeddingVector>> {
        let text = text.into();
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        if text.contains('\t') || text.contains('\n') {
            return Err(Error::Invalid(format!("store key {text:?} contains a tab or newline")));
        }
        Ok(self.entries.insert(text, v))
    }
}

/// Strict lookup: a store used directly as an encoder fails on unknown text.
impl Encoder for EmbeddingStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Cow<'_, EmbeddingVector>> {
        self.get(text)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::MissingEmbedding(text.to_string()))
    }
}

/// Store lookup with optional fall back to the hashed encoder on a miss.
#[derive(Debug, Clone)]
pub struct StoreEncoder {
    store: EmbeddingStore,
    fallback: Option<HashedEncoder>,
}

impl StoreEncoder {
    pub fn new(store: EmbeddingStore, fallback: bool) -> Result<Self> {
        let fallback = if fallback {
            Some(HashedEncoder::new(store.dim())?)
        } else {
            None
        };
        Ok(StoreEncoder { store, fallback })
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}

impl Encoder for StoreEncoder {
    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn encode(&self, text: &str) -> Result<Cow<'_, EmbeddingVector>> {
        match (self.store.get(text), &self.fallback) {
            (Some(v), _) => Ok(Cow::Borrowed(v)),
            (None, Some(h)) => h.encode(text),
            (None, None) => Err(Error::MissingEmbedding(text.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedStore {
    pub store: EmbeddingStore,
    /// Rows whose norm was off by more than 1e-4 and got renormalized.
    pub renormalized: usize,
}

pub fn load_store<R: BufRead>(reader: R) -> Result<LoadedStore> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::parse(1, "missing header"))??;
    let (dim, count) = parse_header(&header)?;
    let mut store = EmbeddingStore::new(dim).map_err(|e| Error::parse(1, e.to_string()))?;
    let mut renormalized = 0;
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (text, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(lineno, "expected <text><TAB><values>"))?;
        let values = values
            .split_ascii_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::parse(lineno, format!("bad float {s:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(Error::parse(
                lineno,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(lineno, "non-finite value"));
        }
        let norm = l2_norm(&values);
        let v = if (norm - 1.0).abs() > RENORM_TOLERANCE {
            log::warn!("line {lineno}: renormalizing vector for {text:?} (norm {norm})");
            renormalized += 1;
            EmbeddingVector::normalized(values)?
        } else {
            EmbeddingVector(values)
        };
        if store.insert(text, v)?.is_some() {
            return Err(Error::parse(lineno, format!("duplicate key {text:?}")));
        }
        rows += 1;
    }
    if rows != count {
        return Err(Error::parse(1, format!("header declares {count} rows, found {rows}")));
    }
    Ok(LoadedStore { store, renormalized })
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let mut dim = None;
    let mut count = None;
    for field in line.split_ascii_whitespace() {
        match field.split_once('=') {
            Some(("dim", v)) => dim = v.parse::<usize>().ok(),
            Some(("count", v)) => count = v.parse::<usize>().ok(),
            _ => return Err(Error::parse(1, format!("unexpected header field {field:?}"))),
        }
    }
    match (dim, count) {
        (Some(d), Some(c)) if d > 0 => Ok((d, c)),
        _ => Err(Error::parse(
            1,
            format!("header must be `dim=<d> count=<n>`, got {line:?}"),
        )),
    }
}

/// Write the store in key order. Floats use shortest round-trip formatting.
pub fn save_store<W: Write>(store: &EmbeddingStore, mut writer: W) -> Result<()> {
    writeln!(writer, "dim={} count={}", store.dim, store.len())?;
    for (text, v) in &store.entries {
        write!(writer, "{text}\t")?;
        for (i, x) in v.0.iter().enumerate() {
            if i > 0 {
                write!(writer, " ")?;
            }
            write!(writer, "{x:?}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

/// Embed every distinct text with `encoder`.
pub fn embed_all<S: AsRef<str> + Sync>(texts: &[S], encoder: &dyn Encoder) -> Result<EmbeddingStore> {
    let mut distinct: Vec<&str> = texts.iter().map(AsRef::as_ref).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let vectors: Vec<EmbeddingVector> = distinct
        .par_iter()
        .map(|t| encoder.encode(t).map(Cow::into_owned))
        .collect::<Result<_>>()?;
    let mut store = EmbeddingStore::new(encoder.dim())?;
    for (t, v) in distinct.into_iter().zip(vectors) {
        store.insert(t, v)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn hashed_is_deterministic_and_case_blind() {
        let a = embed_hashed("Famotidine", 64).unwrap();
        assert_eq!(a, embed_hashed("Famotidine", 64).unwrap());
        assert_eq!(embed_hashed("abc", 32).unwrap(), embed_hashed("ABC", 32).unwrap());
    }

    #[test]
    fn empty_text_is_e0() {
        assert_eq!(embed_hashed("", 16).unwrap(), EmbeddingVector::basis(16, 0));
        assert_eq!(embed_hashed("x", 16).unwrap().norm(), 1.0);
    }

    #[test]
    fn hashed_matches_manual_trigrams() {
        // "ab" -> "#ab#" -> trigrams "#ab", "ab#"
        let dim = 16;
        let mut want = vec![0.0; dim];
        for g in ["#ab", "ab#"] {
            let h = fnv1a64(g.as_bytes());
            want[(h % dim as u64) as usize] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let want = EmbeddingVector::normalized(want).unwrap();
        assert_eq!(embed_hashed("AB", dim).unwrap(), want);
    }

    #[test]
    fn small_dim_rejected() {
        assert!(matches!(embed_hashed("x", 7), Err(Error::Config(_))));
        assert!(HashedEncoder::new(4).is_err());
    }

    #[test]
    fn cosine_identities() {
        let v = embed_hashed("delirium", 32).unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &-&v).unwrap() + 1.0).abs() < 1e-12);
        let e0 = EmbeddingVector::basis(8, 0);
        let e1 = EmbeddingVector::basis(8, 1);
        assert_eq!(cosine(&e0, &e1).unwrap(), 0.0);
        assert!(matches!(
            cosine(&e0, &EmbeddingVector::basis(9, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn random_unit(rng: &mut impl Rng, dim: usize) -> EmbeddingVector {
        EmbeddingVector::normalized((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn cosine_matches_dot_oracle() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let a = random_unit(&mut rng, 24);
            let b = random_unit(&mut rng, 24);
            let oracle: f64 = (0..24).map(|i| a.as_slice()[i] * b.as_slice()[i]).sum();
            let got = cosine(&a, &b).unwrap();
            assert!((got - oracle).abs() < 1e-9);
            assert_eq!(got, cosine(&b, &a).unwrap());
        }
    }

    #[test]
    fn store_round_trip() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let mut store = EmbeddingStore::new(12).unwrap();
        for i in 0..50 {
            store.insert(format!("name {i}"), random_unit(&mut rng, 12)).unwrap();
        }
        let mut buf = Vec::new();
        save_store(&store, &mut buf).unwrap();
        let loaded = load_store(buf.as_slice()).unwrap();
        assert_eq!(loaded.renormalized, 0);
        for k in store.keys() {
            let a = store.get(k).unwrap().as_slice();
            let b = loaded.store.get(k).unwrap().as_slice();
            let delta = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(delta < 1e-6);
        }
    }

    #[test]
    fn store_load_errors() {
        let short = format!("dim=16 count=1\nx\t{}\n", vec!["0.25"; 15].join(" "));
        assert!(load_store(short.as_bytes()).is_err());
        assert!(load_store("dim=2 count=1\nx\t1 NaN\n".as_bytes()).is_err());
        assert!(load_store("dim=2 count=1\nx\t1 inf\n".as_bytes()).is_err());
        assert!(load_store("dim=2 count=2\nx\t1 0\nx\t0 1\n".as_bytes()).is_err());
        assert!(load_store("dim=2 count=3\nx\t1 0\n".as_bytes()).is_err());
        assert!(load_store("dims=2 count=1\nx\t1 0\n".as_bytes()).is_err());
        assert!(load_store("".as_bytes()).is_err());
    }

    #[test]
    fn store_load_renormalizes() {
        let loaded = load_store("dim=2 count=2\nx\t2 0\ny\t0 1\n".as_bytes()).unwrap();
        assert_eq!(loaded.renormalized, 1);
        assert_eq!(loaded.store.get("x").unwrap().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn embed_all_dedups_and_reports_misses() {
        let h = HashedEncoder::new(16).unwrap();
        let s = embed_all(&["a", "b", "c"], &h).unwrap();
        assert_eq!(s.len(), 3);
        let s = embed_all(&["a", "a", "b"], &h).unwrap();
        assert_eq!(s.len(), 2);

        let mut base = EmbeddingStore::new(16).unwrap();
        base.insert("a", embed_hashed("a", 16).unwrap()).unwrap();
        let strict = StoreEncoder::new(base.clone(), false).unwrap();
        match embed_all(&["a", "zeta"], &strict) {
            Err(Error::MissingEmbedding(k)) => assert_eq!(k, "zeta"),
            other => panic!("expected missing-key error, got {other:?}"),
        }
        let lenient = StoreEncoder::new(base, true).unwrap();
        let s = embed_all(&["a", "zeta"], &lenient).unwrap();
        assert_eq!(s.get("zeta").unwrap(), &embed_hashed("zeta", 16).unwrap());
    }

    proptest! {
        #[test]
        fn hashed_vectors_are_unit(text in "\\PC{0,40}", dim in 8usize..300) {
            let v = embed_hashed(&text, dim).unwrap();
            prop_assert!((v.norm() - 1.0).abs() <= 1e-6);
            prop_assert_eq!(v.dim(), dim);
            prop_assert_eq!(v, embed_hashed(&text, dim).unwrap());
        }
    }
}
