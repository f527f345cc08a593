//! Nearest-neighbor retrieval over the training split.
//!
//! Each training sample contributes an entry holding a saliency embedding
//! (average-pooled, flattened, L2-normalized), its layout and that layout's
//! feature from the frozen layout encoder. Queries are an exact cosine scan.
//!
//! # File format
//!
//! All integers little-endian.
//!
//! ```text
//! header   magic "RALFDB" | u16 version (1) | u8 kind (0 saliency, 1 random)
//!          | u32 E | u32 d_F | u32 t_max | 16 bytes F stamp (ASCII hex)
//!          | u64 count
//! record   64 bytes id (UTF-8, zero padded) | E × f32 embedding
//!          | d_F × f32 layout feature | u32 T
//!          | t_max × (u32 category | 4 × f64 cx, cy, w, h)   unused slots zero
//! ```

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedSample, Element, Layout, SaliencyMap};
use crate::encoders::{LayoutEncoder, LayoutFeature};
use crate::{Error, Result};

pub const DEFAULT_GRID: usize = 16;
const MAGIC: &[u8; 6] = b"RALFDB";
const VERSION: u16 = 1;
const ID_BYTES: usize = 64;
const STAMP_BYTES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Saliency,
    Random,
}

impl EmbeddingKind {
    fn code(self) -> u8 {
        match self {
            EmbeddingKind::Saliency => 0,
            EmbeddingKind::Random => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(EmbeddingKind::Saliency),
            1 => Ok(EmbeddingKind::Random),
            other => Err(Error::DatabaseFormat(format!("unknown embedding kind {other}"))),
        }
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliency" => Ok(EmbeddingKind::Saliency),
            "random" => Ok(EmbeddingKind::Random),
            other => Err(Error::Config(format!("unknown embedding kind {other:?}"))),
        }
    }
}

/// Average-pools `saliency` onto a `grid × grid` lattice (cell edges at
/// `floor(k·H/grid)`), flattens row-major and L2-normalizes. An all-zero
/// map gives `(1, 0, …, 0)`.
pub fn embed_saliency(saliency: &SaliencyMap, grid: usize) -> Vec<f32> {
    let grid = grid.max(1);
    let (h, w) = (saliency.height, saliency.width);
    let mut out = vec![0f64; grid * grid];
    for gy in 0..grid {
        let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
        for gx in 0..grid {
            let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
            let n = (y1 - y0) * (x1 - x0);
            if n == 0 {
                continue;
            }
            let mut s = 0f64;
            for y in y0..y1 {
                s += saliency.values[y * w + x0..y * w + x1].iter().map(|&v| v as f64).sum::<f64>();
            }
            out[gy * grid + gx] = s / n as f64;
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        let mut unit = vec![0f32; grid * grid];
        unit[0] = 1.0;
        return unit;
    }
    out.iter().map(|v| (v / norm) as f32).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatabaseEntry {
    pub sample_id: String,
    pub sim_embedding: Vec<f32>,
    pub layout_feature: LayoutFeature,
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalDatabase {
    pub kind: EmbeddingKind,
    pub embedding_dim: usize,
    pub feature_dim: usize,
    pub max_elements: usize,
    pub stamp: String,
    pub entries: Vec<DatabaseEntry>,
}

/// One retrieval result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f32,
}

/// Heap item ordered so the worst kept neighbor is on top.
struct Candidate<'a> {
    sim: f32,
    id: &'a str,
    index: usize,
}

impl Candidate<'_> {
    /// Better neighbors compare as `Less`.
    fn rank(&self, other: &Self) -> Ordering {
        other.sim.total_cmp(&self.sim).then_with(|| self.id.cmp(other.id))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank(other)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RetrievalDatabase {
    /// One entry per sample; layout features come from the frozen encoder.
    pub fn build(samples: &[AnnotatedSample], kind: EmbeddingKind, encoder: &LayoutEncoder, grid: usize) -> Result<Self> {
        let stamp = encoder.stamp()?.to_string();
        let mut seen = HashSet::new();
        let mut max_elements = 0;
        let mut entries = Vec::with_capacity(samples.len());
        for s in samples {
            if !seen.insert(s.id.as_str()) {
                return Err(crate::data::DataError::DuplicateId(s.id.clone()).into());
            }
            if s.id.len() > ID_BYTES {
                return Err(Error::Config(format!("sample id {:?} longer than {ID_BYTES} bytes", s.id)));
            }
            max_elements = max_elements.max(s.layout.len());
            entries.push(DatabaseEntry {
                sample_id: s.id.clone(),
                sim_embedding: embed_saliency(&s.saliency, grid),
                layout_feature: encoder.encode_layout(&s.layout)?,
                layout: s.layout.clone(),
            });
        }
        Ok(Self {
            kind,
            embedding_dim: grid.max(1) * grid.max(1),
            feature_dim: encoder.config().dim,
            max_elements: max_elements.max(1),
            stamp,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.sample_id == id)
    }

    /// Fails unless the database was built with this exact frozen encoder.
    pub fn check_stamp(&self, encoder: &LayoutEncoder) -> Result<()> {
        let found = encoder.stamp()?;
        if found != self.stamp {
            return Err(Error::StampMismatch {
                expected: self.stamp.clone(),
                found: found.to_string(),
            });
        }
        Ok(())
    }

    /// Exact top-`k` by cosine similarity, best first, ties by ascending id.
    pub fn query_knn(&self, query: &[f32], k: usize, exclude_id: Option<&str>) -> Result<Vec<Neighbor>> {
        if query.len() != self.embedding_dim {
            return Err(Error::Config(format!(
                "query embedding has length {}, database uses {}",
                query.len(),
                self.embedding_dim
            )));
        }
        let excluded = exclude_id.map_or(0, |id| self.entries.iter().filter(|e| e.sample_id == id).count());
        let available = self.entries.len() - excluded;
        if k > available {
            return Err(Error::DatabaseTooSmall { needed: k, available });
        }
        let qn = dot(query, query).sqrt();
        let qn = if qn > 0.0 { qn } else { 1.0 };
        let mut heap: BinaryHeap<Candidate<'_>> = BinaryHeap::with_capacity(k + 1);
        for (index, e) in self.entries.iter().enumerate() {
            if Some(e.sample_id.as_str()) == exclude_id {
                continue;
            }
            let c = Candidate {
                sim: dot(query, &e.sim_embedding) / qn,
                id: &e.sample_id,
                index,
            };
            if heap.len() < k {
                heap.push(c);
            } else if let Some(worst) = heap.peek() {
                if c < *worst {
                    heap.pop();
                    heap.push(c);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                index: c.index,
                similarity: c.sim,
            })
            .collect())
    }

    /// `k` distinct entries drawn uniformly, optionally never `exclude_id`.
    pub fn random_retrieve(&self, k: usize, exclude_id: Option<&str>, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let pool: Vec<usize> = (0..self.entries.len())
            .filter(|&i| Some(self.entries[i].sample_id.as_str()) != exclude_id)
            .collect();
        if k > pool.len() {
            return Err(Error::DatabaseTooSmall {
                needed: k,
                available: pool.len(),
            });
        }
        Ok(sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
    }

    /// Indices of the `k` retrieved entries for a sample, following the
    /// database kind.
    pub fn retrieve(
        &self,
        saliency: &SaliencyMap,
        k: usize,
        exclude_id: Option<&str>,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        match self.kind {
            EmbeddingKind::Saliency => {
                let grid = (self.embedding_dim as f64).sqrt().round() as usize;
                let q = embed_saliency(saliency, grid);
                Ok(self.query_knn(&q, k, exclude_id)?.into_iter().map(|n| n.index).collect())
            }
            EmbeddingKind::Random => self.random_retrieve(k, exclude_id, rng),
        }
    }

    fn record_len(&self) -> usize {
        ID_BYTES + 4 * self.embedding_dim + 4 * self.feature_dim + 4 + self.max_elements * (4 + 32)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + self.entries.len() * self.record_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        for v in [self.embedding_dim, self.feature_dim, self.max_elements] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let stamp = self.stamp.as_bytes();
        if stamp.len() != STAMP_BYTES {
            return Err(Error::DatabaseFormat(format!("stamp {:?} is not {STAMP_BYTES} bytes", self.stamp)));
        }
        out.extend_from_slice(stamp);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            let mut id = [0u8; ID_BYTES];
            id[..e.sample_id.len()].copy_from_slice(e.sample_id.as_bytes());
            out.extend_from_slice(&id);
            if e.sim_embedding.len() != self.embedding_dim || e.layout_feature.dim() != self.feature_dim {
                return Err(Error::DatabaseFormat(format!("entry {} has inconsistent lengths", e.sample_id)));
            }
            for v in e.sim_embedding.iter().chain(&e.layout_feature.0) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if e.layout.len() > self.max_elements {
                return Err(Error::DatabaseFormat(format!("entry {} exceeds {} elements", e.sample_id, self.max_elements)));
            }
            out.extend_from_slice(&(e.layout.len() as u32).to_le_bytes());
            for slot in 0..self.max_elements {
                match e.layout.elements.get(slot) {
                    Some(el) => {
                        out.extend_from_slice(&el.category.to_le_bytes());
                        for c in el.bbox.coords() {
                            out.extend_from_slice(&c.to_le_bytes());
                        }
                    }
                    None => out.extend_from_slice(&[0u8; 36]),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::DatabaseFormat("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::DatabaseFormat(format!("unsupported version {version}")));
        }
        let kind = EmbeddingKind::from_code(r.take(1)?[0])?;
        let embedding_dim = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let max_elements = r.u32()? as usize;
        let stamp = String::from_utf8(r.take(STAMP_BYTES)?.to_vec())
            .map_err(|_| Error::DatabaseFormat("stamp is not UTF-8".into()))?;
        let count = u64::from_le_bytes(r.array()?) as usize;
        let mut db = Self {
            kind,
            embedding_dim,
            feature_dim,
            max_elements,
            stamp,
            entries: Vec::new(),
        };
        if bytes.len() != r.pos + count * db.record_len() {
            return Err(Error::DatabaseFormat(format!(
                "expected {} bytes for {count} records, found {}",
                r.pos + count * db.record_len(),
                bytes.len()
            )));
        }
        for _ in 0..count {
            let raw = r.take(ID_BYTES)?;
            let end = raw.iter().position(|&b| b == 0).unwrap_or(ID_BYTES);
            let sample_id = String::from_utf8(raw[..end].to_vec())
                .map_err(|_| Error::DatabaseFormat("sample id is not UTF-8".into()))?;
            let sim_embedding = (0..embedding_dim).map(|_| r.f32()).collect::<Result<_>>()?;
            let feature = (0..feature_dim).map(|_| r.f32()).collect::<Result<_>>()?;
            let t = r.u32()? as usize;
            if t > max_elements {
                return Err(Error::DatabaseFormat(format!("record {sample_id} claims {t} elements")));
            }
            let mut elements = Vec::with_capacity(t);
            for slot in 0..max_elements {
                let category = r.u32()?;
                let c: Vec<f64> = (0..4).map(|_| r.f64()).collect::<Result<_>>()?;
                if slot < t {
                    elements.push(Element::new(category, c[0], c[1], c[2], c[3]));
                }
            }
            db.entries.push(DatabaseEntry {
                sample_id,
                sim_embedding,
                layout_feature: LayoutFeature(feature),
                layout: Layout::new(elements),
            });
        }
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::DatabaseFormat(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, emb: Vec<f32>) -> DatabaseEntry {
        DatabaseEntry {
            sample_id: id.into(),
            sim_embedding: emb,
            layout_feature: LayoutFeature(vec![0.5, -0.5]),
            layout: Layout::new(vec![Element::new(1, 0.5, 0.5, 0.2, 0.1)]),
        }
    }

    fn small_db() -> RetrievalDatabase {
        RetrievalDatabase {
            kind: EmbeddingKind::Saliency,
            embedding_dim: 2,
            feature_dim: 2,
            max_elements: 3,
            stamp: "0123456789abcdef".into(),
            entries: vec![
                entry("a", vec![1.0, 0.0]),
                entry("b", vec![0.0, 1.0]),
                entry("c", vec![0.6, 0.8]),
                entry("d", vec![0.6, 0.8]),
            ],
        }
    }

    #[test]
    fn uniform_saliency_grid_two() {
        let e = embed_saliency(&SaliencyMap::filled(8, 6, 0.5), 2);
        assert_eq!(e, vec![0.5; 4]);
        let zero = embed_saliency(&SaliencyMap::filled(8, 6, 0.0), 3);
        assert_eq!(zero[0], 1.0);
        assert!(zero[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_does_not_change_embedding() {
        let vals: Vec<f32> = (0..48).map(|i| (i % 7) as f32 / 7.0).collect();
        let a = embed_saliency(&SaliencyMap::new(8, 6, vals.clone()), 4);
        let b = embed_saliency(&SaliencyMap::new(8, 6, vals.iter().map(|v| v * 2.0).collect()), 4);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!((a.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn knn_self_and_leave_one_out() {
        let db = small_db();
        let top = db.query_knn(&[1.0, 0.0], 1, None).unwrap();
        assert_eq!(top[0].index, 0);
        let next = db.query_knn(&[1.0, 0.0], 1, Some("a")).unwrap();
        assert_eq!(db.entries[next[0].index].sample_id, "c");
        let all = db.query_knn(&[0.6, 0.8], 4, None).unwrap();
        let ids: Vec<&str> = all.iter().map(|n| db.entries[n.index].sample_id.as_str()).collect();
        assert_eq!(ids, ["c", "d", "b", "a"]);
        assert!(matches!(db.query_knn(&[1.0, 0.0], 4, Some("a")), Err(Error::DatabaseTooSmall { .. })));
    }

    #[test]
    fn random_retrieve_full_permutation_and_seeded() {
        let db = small_db();
        let mut got = db.random_retrieve(4, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3]);
        let a = db.random_retrieve(2, Some("b"), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = db.random_retrieve(2, Some("b"), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains(&1));
        assert!(db.random_retrieve(5, None, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn bytes_roundtrip_and_corruption() {
        let db = small_db();
        let bytes = db.to_bytes().unwrap();
        assert_eq!(RetrievalDatabase::from_bytes(&bytes).unwrap(), db);
        assert!(RetrievalDatabase::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RetrievalDatabase::from_bytes(&bad).is_err());
    }
}
