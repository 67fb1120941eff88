//! Persistent cache of per-image proposal embeddings.
//!
//! Proposals are extracted once; afterwards every concept query costs one
//! inner product per cached proposal and never touches feature grids.
//!
//! File layout (little-endian, no padding):
//!
//! ```text
//! magic "WDUC" | version u32 = 1 | dim u32 | record count u64
//! per record:   id length u16 | id bytes (UTF-8) | proposal count u32
//! per proposal: x1 y1 x2 y2 f32 | objectness f32 | dim x f32 embedding
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, FormatError, Result};
use crate::geometry::{Rect, Scored};
use crate::probe::{propose_with_embeddings, AnchorConfig, ObjectnessProbe};
use crate::synthworld::Corpus;
use crate::{BBox32, ScoredBox};

pub const MAGIC: [u8; 4] = *b"WDUC";
pub const VERSION: u32 = 1;

const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox32,
    pub objectness: f32,
    pub embedding: Vec<f32>,
}

/// Borrowed view of one cached proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalRef<'a> {
    pub bbox: BBox32,
    pub objectness: f32,
    pub embedding: &'a [f32],
}

/// Proposals of one image, stored column-wise, sorted by descending objectness.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCacheRecord {
    image_id: String,
    dim: usize,
    boxes: Vec<BBox32>,
    objectness: Vec<f32>,
    embeddings: Vec<f32>,
}

impl ImageCacheRecord {
    pub fn new(image_id: impl Into<String>, dim: usize, proposals: Vec<Proposal>) -> Result<Self> {
        let image_id = image_id.into();
        let invalid = |m: String| Error::Format(FormatError::InvalidRecord(format!("{image_id}: {m}")));
        if image_id.len() > u16::MAX as usize {
            return Err(invalid("image id longer than 65535 bytes".into()));
        }
        let mut rec = ImageCacheRecord {
            image_id: image_id.clone(),
            dim,
            boxes: Vec::with_capacity(proposals.len()),
            objectness: Vec::with_capacity(proposals.len()),
            embeddings: Vec::with_capacity(proposals.len() * dim),
        };
        for (i, p) in proposals.into_iter().enumerate() {
            if p.embedding.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: p.embedding.len() });
            }
            p.bbox.validate().map_err(|e| invalid(format!("proposal {i}: {e}")))?;
            if !(0.0..=1.0).contains(&p.objectness) {
                return Err(invalid(format!("proposal {i}: objectness {} outside [0, 1]", p.objectness)));
            }
            if rec.objectness.last().is_some_and(|&prev| p.objectness > prev) {
                return Err(invalid(format!("proposal {i}: not sorted by descending objectness")));
            }
            let n = p.embedding.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(invalid(format!("proposal {i}: embedding norm {n}")));
            }
            rec.boxes.push(p.bbox);
            rec.objectness.push(p.objectness);
            rec.embeddings.extend_from_slice(&p.embedding);
        }
        Ok(rec)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn len(&self) -> usize {
        self.objectness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objectness.is_empty()
    }

    pub fn boxes(&self) -> &[BBox32] {
        &self.boxes
    }

    pub fn objectness(&self) -> &[f32] {
        &self.objectness
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn proposal(&self, i: usize) -> ProposalRef<'_> {
        ProposalRef { bbox: self.boxes[i], objectness: self.objectness[i], embedding: self.embedding(i) }
    }

    pub fn iter(&self) -> impl Iterator<Item = ProposalRef<'_>> {
        (0..self.len()).map(|i| self.proposal(i))
    }

    /// Inner product of `query` with every proposal, in cache order.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        self.embeddings.chunks_exact(self.dim).map(|e| dot(e, query)).collect()
    }

    /// Same record under a different id (used to build scaled stores for benchmarks).
    pub fn renamed(&self, image_id: impl Into<String>) -> Self {
        ImageCacheRecord { image_id: image_id.into(), ..self.clone() }
    }

    /// Leading `n` proposals.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        ImageCacheRecord {
            image_id: self.image_id.clone(),
            dim: self.dim,
            boxes: self.boxes[..n].to_vec(),
            objectness: self.objectness[..n].to_vec(),
            embeddings: self.embeddings[..n * self.dim].to_vec(),
        }
    }
}

/// f32 storage, f64 accumulation, strictly sequential summation order.
#[inline]
pub fn dot(embedding: &[f32], query: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (e, q) in embedding.iter().zip(query) {
        acc += f64::from(*e) * q;
    }
    acc
}

/// Scores of one image for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores<'a> {
    pub image_id: &'a str,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<ImageCacheRecord>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, records: Vec<ImageCacheRecord>) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::Config(format!("invalid store dim {dim}")));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.dim != dim {
                return Err(Error::DimMismatch { expected: dim, got: r.dim });
            }
            if index.insert(r.image_id.clone(), i).is_some() {
                return Err(Error::Format(FormatError::InvalidRecord(format!(
                    "duplicate image id `{}`",
                    r.image_id
                ))));
            }
        }
        Ok(EmbeddingStore { dim, records, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[ImageCacheRecord] {
        &self.records
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageCacheRecord> {
        self.index.get(image_id).map(|&i| &self.records[i])
    }

    pub fn total_proposals(&self) -> usize {
        self.records.iter().map(ImageCacheRecord::len).sum()
    }

    /// Cached boxes with their objectness, per image, for recall evaluation.
    pub fn proposal_map(&self) -> BTreeMap<String, Vec<ScoredBox>> {
        self.records
            .iter()
            .map(|r| {
                let v = r.iter().map(|p| Scored::new(p.bbox.cast(), f64::from(p.objectness))).collect();
                (r.image_id.clone(), v)
            })
            .collect()
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, got: query.len() });
        }
        Ok(())
    }

    /// Inner product of `query` with every cached proposal, grouped per image.
    pub fn score_query(&self, query: &[f64]) -> Result<Vec<ImageScores<'_>>> {
        self.check_query(query)?;
        Ok(self
            .records
            .iter()
            .map(|r| ImageScores { image_id: &r.image_id, scores: r.scores(query) })
            .collect())
    }

    /// Parallel over records; each dot product is computed exactly as in [`Self::score_query`].
    pub fn score_query_par(&self, query: &[f64]) -> Result<Vec<ImageScores<'_>>> {
        self.check_query(query)?;
        Ok(self
            .records
            .par_iter()
            .map(|r| ImageScores { image_id: &r.image_id, scores: r.scores(query) })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per_prop = 4 * (5 + self.dim);
        let mut out = Vec::with_capacity(20 + self.total_proposals() * per_prop + self.records.len() * 16);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.image_id.len() as u16).to_le_bytes());
            out.extend_from_slice(r.image_id.as_bytes());
            out.extend_from_slice(&(r.len() as u32).to_le_bytes());
            for p in r.iter() {
                for v in p.bbox.to_array() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&p.objectness.to_le_bytes());
                for v in p.embedding {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic).into());
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let dim = c.u32("dim")? as usize;
        if dim == 0 {
            return Err(FormatError::InvalidRecord("dim is zero".into()).into());
        }
        let n_records = c.u64("record count")?;
        let mut records = Vec::new();
        for ri in 0..n_records {
            let what = |f: &str| format!("record {ri} of {n_records}: {f}");
            let id_len = c.u16(&what("id length"))? as usize;
            let id = std::str::from_utf8(c.take(id_len, &what("id"))?)
                .map_err(|_| FormatError::InvalidRecord(what("id is not UTF-8")))?
                .to_string();
            let n = c.u32(&what("proposal count"))? as usize;
            let mut proposals = Vec::with_capacity(n.min(1 << 16));
            for pi in 0..n {
                let loc = what(&format!("proposal {pi}"));
                let mut f = [0f32; 5];
                for v in f.iter_mut() {
                    *v = c.f32(&loc)?;
                }
                let embedding = (0..dim).map(|_| c.f32(&loc)).collect::<Result<Vec<f32>>>()?;
                let bbox = Rect { x1: f[0], y1: f[1], x2: f[2], y2: f[3] };
                proposals.push(Proposal { bbox, objectness: f[4], embedding });
            }
            records.push(ImageCacheRecord::new(id, dim, proposals)?);
        }
        if c.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - c.pos).into());
        }
        Self::new(dim, records)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated(format!("{what} at byte {}", self.pos)).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    EmbeddingStore::from_bytes(&bytes)
}

fn to_unit_f32(e: &[f64]) -> Vec<f32> {
    let v: Vec<f32> = e.iter().map(|&x| x as f32).collect();
    let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    v.iter().map(|&x| (f64::from(x) / n) as f32).collect()
}

/// Runs the probe over every scene and caches the top-`k` proposals after NMS.
/// Images are processed in parallel; record order equals corpus order.
pub fn build_store(corpus: &Corpus, probe: &ObjectnessProbe, anchors: &AnchorConfig) -> Result<EmbeddingStore> {
    let dim = corpus.dim();
    if probe.dim() != dim {
        return Err(Error::Config(format!("probe dim {} does not match corpus dim {dim}", probe.dim())));
    }
    if anchors.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let records = corpus
        .scenes
        .par_iter()
        .map(|s| {
            let raw = propose_with_embeddings(&s.grids, probe, anchors)?;
            let proposals = raw
                .into_iter()
                .map(|p| Proposal {
                    bbox: p.scored.bbox.cast(),
                    objectness: p.scored.score as f32,
                    embedding: to_unit_f32(&p.embedding),
                })
                .collect();
            ImageCacheRecord::new(s.image_id.clone(), dim, proposals)
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingStore::new(dim, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn small_store() -> EmbeddingStore {
        let bx = |x: f32| Rect { x1: x, y1: 0.0, x2: x + 1.0, y2: 1.0 };
        let r1 = ImageCacheRecord::new(
            "a",
            3,
            vec![
                Proposal { bbox: bx(0.0), objectness: 0.9, embedding: unit(&[1.0, 0.0, 0.0]) },
                Proposal { bbox: bx(1.0), objectness: 0.4, embedding: unit(&[1.0, 1.0, 0.0]) },
            ],
        )
        .unwrap();
        let r2 = ImageCacheRecord::new("b", 3, vec![]).unwrap();
        EmbeddingStore::new(3, vec![r1, r2]).unwrap()
    }

    #[test]
    fn record_invariants_enforced() {
        let bx = Rect { x1: 0.0f32, y1: 0.0, x2: 1.0, y2: 1.0 };
        let p = |o: f32, e: Vec<f32>| Proposal { bbox: bx, objectness: o, embedding: e };
        assert!(ImageCacheRecord::new("x", 2, vec![p(0.1, vec![1.0, 0.0]), p(0.2, vec![1.0, 0.0])]).is_err());
        assert!(ImageCacheRecord::new("x", 2, vec![p(0.1, vec![2.0, 0.0])]).is_err());
        assert!(ImageCacheRecord::new("x", 2, vec![p(1.5, vec![1.0, 0.0])]).is_err());
        assert!(matches!(
            ImageCacheRecord::new("x", 2, vec![p(0.5, vec![1.0])]),
            Err(Error::DimMismatch { .. })
        ));
        let r = ImageCacheRecord::new("x", 2, vec![]).unwrap();
        assert!(EmbeddingStore::new(2, vec![r.clone(), r]).is_err());
    }

    #[test]
    fn self_and_orthogonal_queries() {
        let s = small_store();
        let q: Vec<f64> = s.records()[0].embedding(1).iter().map(|&x| f64::from(x)).collect();
        let out = s.score_query(&q).unwrap();
        assert!((out[0].scores[1] - 1.0).abs() < 1e-4);
        assert!(out[1].scores.is_empty());
        let z = s.score_query(&[0.0, 0.0, 1.0]).unwrap();
        assert!(z[0].scores.iter().all(|v| v.abs() < 1e-4));
        assert!(matches!(s.score_query(&[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn byte_round_trip_and_corruption() {
        let s = small_store();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"WDUC");
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap(), s);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(Error::Format(FormatError::BadMagic(_)))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            EmbeddingStore::from_bytes(&bad),
            Err(Error::Format(FormatError::UnsupportedVersion(2)))
        ));
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(EmbeddingStore::from_bytes(&extra), Err(Error::Format(FormatError::TrailingBytes(1)))));
    }

    #[test]
    fn declared_record_count_must_be_present() {
        let s = small_store();
        let mut bytes = s.to_bytes();
        bytes[12..20].copy_from_slice(&3u64.to_le_bytes());
        match EmbeddingStore::from_bytes(&bytes) {
            Err(Error::Format(FormatError::Truncated(m))) => assert!(m.contains("record 2 of 3"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let s = small_store();
        let b = s.to_bytes();
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        // record "a": 2 + 1 + 4 bytes, then 2 proposals x (5 + 3) x 4 bytes; record "b": 2 + 1 + 4
        assert_eq!(b.len(), 20 + 7 + 2 * 32 + 7);
    }
}
