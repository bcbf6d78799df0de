//! Exact proposition-level vector index with sentence/document score
//! propagation and a compact binary file format.
//!
//! File layout, little-endian:
//!
//! ```text
//! magic        4 bytes "PIDX"
//! version      u32
//! dim          u32
//! count        u64
//! meta_len     u32
//! metadata     meta_len bytes of UTF-8 JSON
//! count × {
//!     doc_id u64, sentence_id u64, prop_id u64
//!     mask_len u32
//!     mask bits, ceil(mask_len / 8) bytes, least significant bit first
//!     vector   dim × f32
//! }
//! ```
//!
//! Total size is `24 + meta_len + Σ (28 + ceil(mask_len / 8) + 4·dim)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::BinaryMask;
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"PIDX";
pub const INDEX_VERSION: u32 = 1;
/// Fixed bytes before the metadata blob.
pub const HEADER_BYTES: u64 = 24;
/// Key (3 × u64) plus the mask length prefix.
pub const ENTRY_FIXED_BYTES: u64 = 28;
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_OVER_RETRIEVAL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PropKey {
    pub doc_id: u64,
    pub sentence_id: u64,
    pub prop_id: u64,
}

impl PropKey {
    pub fn new(doc_id: u64, sentence_id: u64, prop_id: u64) -> Self {
        Self {
            doc_id,
            sentence_id,
            prop_id,
        }
    }

    pub fn group(&self, level: Level) -> GroupKey {
        match level {
            Level::Proposition => GroupKey {
                doc_id: self.doc_id,
                sentence_id: Some(self.sentence_id),
                prop_id: Some(self.prop_id),
            },
            Level::Sentence => GroupKey {
                doc_id: self.doc_id,
                sentence_id: Some(self.sentence_id),
                prop_id: None,
            },
            Level::Document => GroupKey {
                doc_id: self.doc_id,
                sentence_id: None,
                prop_id: None,
            },
        }
    }
}

/// Retrieval granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[serde(rename = "prop")]
    Proposition,
    Sentence,
    #[serde(rename = "doc")]
    Document,
}

/// A proposition key truncated to the requested level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub doc_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prop_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropEntry {
    pub key: PropKey,
    pub mask: BinaryMask,
    pub vector: Vec<f32>,
}

fn norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

impl PropEntry {
    pub fn new(key: PropKey, mask: BinaryMask, vector: Vec<f32>) -> Result<Self> {
        let n = norm_f32(&vector);
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "vector for {key:?} has norm {n}, expected 1"
            )));
        }
        Ok(Self { key, mask, vector })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub key: PropKey,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupHit {
    pub key: GroupKey,
    pub score: f64,
}

/// Descending score, then ascending key.
fn rank_order<K: Ord>(a: (f64, &K), b: (f64, &K)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropIndex {
    dim: usize,
    metadata: serde_json::Value,
    entries: Vec<PropEntry>,
    by_key: HashMap<PropKey, usize>,
}

impl PropIndex {
    pub fn new(dim: usize, metadata: serde_json::Value) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("index dimension must be >= 1".into()));
        }
        Ok(Self {
            dim,
            metadata,
            entries: Vec::new(),
            by_key: HashMap::new(),
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

    pub fn metadata(&self) -> &serde_json::Value {
        &self.metadata
    }

    pub fn entries(&self) -> &[PropEntry] {
        &self.entries
    }

    pub fn get(&self, key: &PropKey) -> Option<&PropEntry> {
        self.by_key.get(key).map(|&i| &self.entries[i])
    }

    pub fn add(&mut self, entry: PropEntry) -> Result<()> {
        if entry.vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector of dim {} for index of dim {}",
                entry.vector.len(),
                self.dim
            )));
        }
        if self.by_key.contains_key(&entry.key) {
            return Err(Error::DuplicateKey(format!("{:?}", entry.key)));
        }
        self.by_key.insert(entry.key, self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    fn check_query(&self, query: &[f32]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::Shape(format!(
                "query of dim {} for index of dim {}",
                query.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Exact top-k by cosine (dot product of unit vectors, accumulated in f64).
    pub fn search_topk(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        self.check_query(query)?;
        let mut hits: Vec<SearchHit> = self
            .entries
            .iter()
            .map(|e| SearchHit {
                key: e.key,
                score: e
                    .vector
                    .iter()
                    .zip(query)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum(),
            })
            .collect();
        let cmp = |a: &SearchHit, b: &SearchHit| rank_order((a.score, &a.key), (b.score, &b.key));
        let k = k.min(hits.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, cmp);
            hits.truncate(k);
        }
        hits.sort_by(cmp);
        Ok(hits)
    }

    /// Top-k groups at `level`, exact with respect to the group-max rule.
    ///
    /// Starts from `over_retrieval × k` propositions and keeps doubling until
    /// the k-th group's score is strictly above every proposition not yet
    /// retrieved, so no unseen proposition could change the answer.
    pub fn search_level(
        &self,
        query: &[f32],
        level: Level,
        k: usize,
        over_retrieval: usize,
    ) -> Result<Vec<GroupHit>> {
        if level == Level::Proposition {
            return Ok(propagate_scores(&self.search_topk(query, k)?, level, k));
        }
        let mut m = k.saturating_mul(over_retrieval.max(1)).max(1);
        loop {
            let hits = self.search_topk(query, m)?;
            let groups = propagate_scores(&hits, level, usize::MAX);
            let exhausted = hits.len() == self.len();
            let certified = groups.len() >= k
                && hits
                    .last()
                    .is_some_and(|last| groups[k - 1].score > last.score);
            if exhausted || certified || k == 0 {
                let mut groups = groups;
                groups.truncate(k);
                return Ok(groups);
            }
            m = m.saturating_mul(2);
        }
    }

    /// Bytes occupied by vectors alone.
    pub fn vector_payload_bytes(&self) -> u64 {
        4 * self.dim as u64 * self.entries.len() as u64
    }

    fn metadata_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.metadata)?)
    }

    /// File size implied by the documented layout.
    pub fn expected_file_size(&self) -> Result<u64> {
        let per_dim = 4 * self.dim as u64;
        Ok(HEADER_BYTES
            + self.metadata_bytes()?.len() as u64
            + self
                .entries
                .iter()
                .map(|e| ENTRY_FIXED_BYTES + e.mask.len().div_ceil(8) as u64 + per_dim)
                .sum::<u64>())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = self.metadata_bytes()?;
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&u32_of(self.dim)?.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        w.write_all(&u32_of(meta.len())?.to_le_bytes())?;
        w.write_all(&meta)?;
        for e in &self.entries {
            for id in [e.key.doc_id, e.key.sentence_id, e.key.prop_id] {
                w.write_all(&id.to_le_bytes())?;
            }
            w.write_all(&u32_of(e.mask.len())?.to_le_bytes())?;
            w.write_all(&pack_bits(e.mask.bits()))?;
            for v in &e.vector {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Reader { buf, pos: 0 };
        if c.take(4)? != INDEX_MAGIC {
            return Err(Error::Format("not a proposition index (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let dim = c.u32()? as usize;
        let count = c.u64()?;
        let meta_len = c.u32()? as usize;
        let metadata = serde_json::from_slice(c.take(meta_len)?)?;
        let mut index = Self::new(dim, metadata).map_err(|e| Error::Format(e.to_string()))?;
        for _ in 0..count {
            let key = PropKey::new(c.u64()?, c.u64()?, c.u64()?);
            let mask_len = c.u32()? as usize;
            let bits = unpack_bits(c.take(mask_len.div_ceil(8))?, mask_len)?;
            let mask = BinaryMask::new(bits)?;
            let raw = c.take(4 * dim)?;
            let vector = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            index
                .add(PropEntry::new(key, mask, vector)?)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if c.pos != buf.len() {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Group-max propagation: each group scores as its best member; the top `k`
/// groups are returned, ties by key.
pub fn propagate_scores(hits: &[SearchHit], level: Level, k: usize) -> Vec<GroupHit> {
    let mut best: BTreeMap<GroupKey, f64> = BTreeMap::new();
    for h in hits {
        best.entry(h.key.group(level))
            .and_modify(|s| *s = s.max(h.score))
            .or_insert(h.score);
    }
    let mut out: Vec<GroupHit> = best
        .into_iter()
        .map(|(key, score)| GroupHit { key, score })
        .collect();
    out.sort_by(|a, b| rank_order((a.score, &a.key), (b.score, &b.key)));
    out.truncate(k);
    out
}

/// `d_full / d_bottleneck`.
pub fn compression_ratio(d_full: usize, d_bottleneck: usize) -> Result<f64> {
    if d_full == 0 || d_bottleneck == 0 {
        return Err(Error::InvalidArgument(
            "embedding dimensions must be >= 1".into(),
        ));
    }
    Ok(d_full as f64 / d_bottleneck as f64)
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], len: usize) -> Result<Vec<u8>> {
    let bits: Vec<u8> = (0..len).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
    let used = len % 8;
    if used != 0 && bytes[len / 8] >> used != 0 {
        return Err(Error::Format("stray bits after mask".into()));
    }
    Ok(bits)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated index file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Deterministic unit vectors for tests and benchmarks.
pub fn random_unit_vectors(count: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                break v.iter().map(|x| (x / n) as f32).collect();
            }
        })
        .collect()
}
