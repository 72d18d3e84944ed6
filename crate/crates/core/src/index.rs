//! The exemplar index: labeled embeddings of font-rendered characters or
//! words, searched exactly by cosine similarity.
//!
//! # File format
//!
//! All integers little-endian:
//!
//! ```text
//! magic            b"EFXI"
//! version          u32
//! dim              u32
//! count            u64
//! fingerprint      u32 length + UTF-8
//! count × entry:
//!   label          u32 length + UTF-8
//!   font_id        u32 length + UTF-8
//!   vector         dim × f32
//! crc32            u32 over every preceding byte
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::encoder::{dot, Embedding, Encoder, EncoderError};
use crate::render::{render_exemplar, FontFace, RenderError};

pub const MAGIC: &[u8; 4] = b"EFXI";
pub const FORMAT_VERSION: u32 = 1;

// Stored vectors must be unit length to this tolerance.
const UNIT_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index has no entries")]
    EmptyIndex,
    #[error("query dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index was built with encoder {index}, but queried with encoder {encoder}")]
    FingerprintMismatch { index: String, encoder: String },
    #[error("invalid exemplar: {0}")]
    InvalidEntry(String),
    #[error("corrupt index file: {0}")]
    CorruptIndex(String),
    #[error("index format version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("index I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub label: String,
    pub font_id: String,
    pub embedding: Embedding,
}

/// One retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub label: String,
    pub font_id: String,
    pub similarity: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarIndex {
    dim: usize,
    encoder_fingerprint: String,
    entries: Vec<Exemplar>,
}

/// Result ordering: similarity descending, then label by code point, then
/// font id, then insertion order.
fn rank(a: (f32, &Exemplar, usize), b: (f32, &Exemplar, usize)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.label.cmp(&b.1.label))
        .then_with(|| a.1.font_id.cmp(&b.1.font_id))
        .then(a.2.cmp(&b.2))
}

struct Candidate<'a> {
    sim: f32,
    entry: &'a Exemplar,
    pos: usize,
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate<'_> {}
impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
// Better candidates compare as smaller, so the max-heap top is the worst kept.
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank(
            (self.sim, self.entry, self.pos),
            (other.sim, other.entry, other.pos),
        )
    }
}

impl ExemplarIndex {
    pub fn from_entries(
        dim: usize,
        encoder_fingerprint: impl Into<String>,
        entries: Vec<Exemplar>,
    ) -> Result<Self, IndexError> {
        if entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        for (i, e) in entries.iter().enumerate() {
            if e.label.is_empty() {
                return Err(IndexError::InvalidEntry(format!("entry {i} has an empty label")));
            }
            if e.embedding.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    got: e.embedding.dim(),
                });
            }
        }
        Ok(Self {
            dim,
            encoder_fingerprint: encoder_fingerprint.into(),
            entries,
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

    pub fn entries(&self) -> &[Exemplar] {
        &self.entries
    }

    pub fn encoder_fingerprint(&self) -> &str {
        &self.encoder_fingerprint
    }

    /// Fails unless `encoder` is the one this index was built with.
    pub fn ensure_encoder(&self, encoder: &Encoder) -> Result<(), IndexError> {
        if encoder.fingerprint() != self.encoder_fingerprint {
            return Err(IndexError::FingerprintMismatch {
                index: self.encoder_fingerprint.clone(),
                encoder: encoder.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    fn check_query(&self, q: &Embedding, k: usize) -> Result<(), IndexError> {
        if q.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: q.dim(),
            });
        }
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        Ok(())
    }

    /// Exact top-`k` entries by cosine similarity, best first. `k` larger
    /// than the index returns every entry.
    pub fn query(&self, q: &Embedding, k: usize) -> Result<Vec<Neighbor>, IndexError> {
        self.check_query(q, k)?;
        let mut heap: BinaryHeap<Candidate<'_>> = BinaryHeap::with_capacity(k + 1);
        for (pos, entry) in self.entries.iter().enumerate() {
            let cand = Candidate {
                sim: dot(q.as_slice(), entry.embedding.as_slice()),
                entry,
                pos,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                label: c.entry.label.clone(),
                font_id: c.entry.font_id.clone(),
                similarity: c.sim,
            })
            .collect())
    }

    /// Top-`k` distinct labels; each label scores the best similarity over
    /// its exemplars (fonts), reported with the font that achieved it.
    pub fn query_labels(&self, q: &Embedding, k: usize) -> Result<Vec<Neighbor>, IndexError> {
        self.check_query(q, k)?;
        let mut best: HashMap<&str, (f32, usize)> = HashMap::new();
        for (pos, entry) in self.entries.iter().enumerate() {
            let sim = dot(q.as_slice(), entry.embedding.as_slice());
            best.entry(entry.label.as_str())
                .and_modify(|cur| {
                    let cand = (sim, &self.entries[pos], pos);
                    let held = (cur.0, &self.entries[cur.1], cur.1);
                    if rank(cand, held) == Ordering::Less {
                        *cur = (sim, pos);
                    }
                })
                .or_insert((sim, pos));
        }
        let mut ranked: Vec<(f32, usize)> = best.into_values().collect();
        ranked.sort_by(|a, b| rank((a.0, &self.entries[a.1], a.1), (b.0, &self.entries[b.1], b.1)));
        ranked.truncate(k);
        Ok(ranked
            .into_iter()
            .map(|(sim, pos)| Neighbor {
                label: self.entries[pos].label.clone(),
                font_id: self.entries[pos].font_id.clone(),
                similarity: sim,
            })
            .collect())
    }

    /// Groups of distinct labels whose embeddings are bit-identical. Such
    /// labels cannot be told apart by retrieval.
    pub fn identical_label_groups(&self) -> Vec<Vec<String>> {
        let mut groups: BTreeMap<Vec<u32>, Vec<String>> = BTreeMap::new();
        for e in &self.entries {
            let key = e.embedding.as_slice().iter().map(|v| v.to_bits()).collect();
            let labels = groups.entry(key).or_default();
            if !labels.contains(&e.label) {
                labels.push(e.label.clone());
            }
        }
        let mut out: Vec<Vec<String>> = groups
            .into_values()
            .filter(|g| g.len() > 1)
            .map(|mut g| {
                g.sort();
                g
            })
            .collect();
        out.sort();
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.entries.len() * (self.dim * 4 + 16));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        put_str(&mut buf, &self.encoder_fingerprint);
        for e in &self.entries {
            put_str(&mut buf, &e.label);
            put_str(&mut buf, &e.font_id);
            for v in e.embedding.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let corrupt = |m: &str| IndexError::CorruptIndex(m.to_string());
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes.len() < 4 + 4 + 4 + 8 + 4 + 4 {
            return Err(corrupt("truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }

        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(IndexError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(corrupt("zero dimension"));
        }
        let count = r.u64()?;
        let fingerprint = r.string()?;
        // Each entry needs at least 8 bytes of lengths plus the vector.
        let min_entry = 8u64 + dim as u64 * 4;
        if count.saturating_mul(min_entry) > (body.len() - r.pos) as u64 {
            return Err(corrupt("entry count exceeds file size"));
        }
        let mut entries = Vec::with_capacity(count as usize);
        for i in 0..count {
            let label = r.string()?;
            let font_id = r.string()?;
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
            }
            let embedding = Embedding::from_unit(vector, UNIT_TOL)
                .ok_or_else(|| IndexError::CorruptIndex(format!("entry {i} is not unit length")))?;
            if label.is_empty() {
                return Err(IndexError::CorruptIndex(format!("entry {i} has an empty label")));
            }
            entries.push(Exemplar {
                label,
                font_id,
                embedding,
            });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after entries"));
        }
        Self::from_entries(dim, fingerprint, entries).map_err(|e| match e {
            IndexError::EmptyIndex => corrupt("no entries"),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| IndexError::CorruptIndex("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, IndexError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| IndexError::CorruptIndex("invalid UTF-8".into()))
    }
}

/// A (label, font) pair that was left out of an index build.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedExemplar {
    pub label: String,
    pub font_id: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct BuildOutput {
    pub index: ExemplarIndex,
    pub skipped: Vec<SkippedExemplar>,
    /// Labels whose renders embed bit-identically; see
    /// [`ExemplarIndex::identical_label_groups`].
    pub collisions: Vec<Vec<String>>,
}

/// Renders every label in every font on a `canvas × canvas` tile and embeds
/// it. Pairs whose label the font cannot draw are skipped. Entries are ordered
/// by label, then font.
pub fn build_index(
    encoder: &Encoder,
    labels: &[String],
    fonts: &[PathBuf],
    canvas: u32,
) -> Result<BuildOutput, IndexError> {
    let faces = fonts
        .iter()
        .map(|p| FontFace::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    build_index_with_faces(encoder, labels, &faces, canvas)
}

pub fn build_index_with_faces(
    encoder: &Encoder,
    labels: &[String],
    faces: &[FontFace],
    canvas: u32,
) -> Result<BuildOutput, IndexError> {
    let mut entries = Vec::with_capacity(labels.len() * faces.len());
    let mut skipped = Vec::new();
    for label in labels {
        if label.is_empty() {
            return Err(IndexError::InvalidEntry("empty label".into()));
        }
        for face in faces {
            match render_exemplar(face, label, canvas) {
                Ok(crop) => entries.push(Exemplar {
                    label: label.clone(),
                    font_id: face.id().to_string(),
                    embedding: encoder.embed(&crop)?,
                }),
                Err(e @ RenderError::MissingGlyph { .. }) => skipped.push(SkippedExemplar {
                    label: label.clone(),
                    font_id: face.id().to_string(),
                    reason: e.to_string(),
                }),
                Err(e) => return Err(e.into()),
            }
        }
    }
    let index = ExemplarIndex::from_entries(encoder.dim(), encoder.fingerprint(), entries)?;
    let collisions = index.identical_label_groups();
    for group in &collisions {
        tracing::warn!(labels = ?group, "labels have identical embeddings and cannot be distinguished");
    }
    Ok(BuildOutput {
        index,
        skipped,
        collisions,
    })
}

/// Alphanumeric label set `0-9A-Za-z`, one label per character.
pub fn alphanumeric_labels() -> Vec<String> {
    ('0'..='9')
        .chain('A'..='Z')
        .chain('a'..='z')
        .map(String::from)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::test_fonts;

    fn unit(v: &[f32]) -> Embedding {
        Embedding::normalize(v)
    }

    fn ex(label: &str, font: &str, v: &[f32]) -> Exemplar {
        Exemplar {
            label: label.into(),
            font_id: font.into(),
            embedding: unit(v),
        }
    }

    fn orthogonal() -> ExemplarIndex {
        ExemplarIndex::from_entries(
            3,
            "fp",
            vec![
                ex("a", "f", &[1.0, 0.0, 0.0]),
                ex("b", "f", &[0.0, 1.0, 0.0]),
                ex("c", "f", &[0.0, 0.0, 1.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn query_orthogonal() {
        let idx = orthogonal();
        let res = idx.query(&unit(&[0.0, 1.0, 0.0]), 3).unwrap();
        let sims: Vec<f32> = res.iter().map(|n| n.similarity).collect();
        assert_eq!(sims, vec![1.0, 0.0, 0.0]);
        assert_eq!(res[0].label, "b");
        // ties at 0.0 broken by label
        assert_eq!(res[1].label, "a");
        assert_eq!(res[2].label, "c");
    }

    #[test]
    fn query_single_entry() {
        let idx = ExemplarIndex::from_entries(2, "fp", vec![ex("x", "f", &[3.0, 4.0])]).unwrap();
        let q = unit(&[1.0, 1.0]);
        let res = idx.query(&q, 1).unwrap();
        assert_eq!(res.len(), 1);
        assert_eq!(res[0].label, "x");
        assert_eq!(res[0].similarity, q.cosine(&idx.entries()[0].embedding));
    }

    #[test]
    fn query_errors() {
        let idx = orthogonal();
        assert!(matches!(
            idx.query(&unit(&[1.0, 0.0]), 1),
            Err(IndexError::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(matches!(idx.query(&unit(&[1.0, 0.0, 0.0]), 0), Err(IndexError::InvalidK)));
        assert_eq!(idx.query(&unit(&[1.0, 0.0, 0.0]), 10).unwrap().len(), 3);
    }

    #[test]
    fn font_tie_break() {
        let idx = ExemplarIndex::from_entries(
            2,
            "fp",
            vec![ex("a", "zz", &[1.0, 0.0]), ex("a", "aa", &[1.0, 0.0])],
        )
        .unwrap();
        let res = idx.query(&unit(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(res[0].font_id, "aa");
    }

    #[test]
    fn query_labels_dedups_fonts() {
        let idx = ExemplarIndex::from_entries(
            2,
            "fp",
            vec![
                ex("a", "f1", &[1.0, 0.0]),
                ex("a", "f2", &[0.9, 0.1]),
                ex("b", "f1", &[0.0, 1.0]),
            ],
        )
        .unwrap();
        let res = idx.query_labels(&unit(&[0.8, 0.2]), 5).unwrap();
        let labels: Vec<&str> = res.iter().map(|n| n.label.as_str()).collect();
        assert_eq!(labels, vec!["a", "b"]);
        assert_eq!(res[0].font_id, "f2");
    }

    #[test]
    fn empty_index_rejected() {
        assert!(matches!(
            ExemplarIndex::from_entries(3, "fp", vec![]),
            Err(IndexError::EmptyIndex)
        ));
    }

    #[test]
    fn serialization_round_trip_and_corruption() {
        let idx = orthogonal();
        let bytes = idx.to_bytes();
        assert_eq!(&bytes[..4], b"EFXI");
        let back = ExemplarIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);

        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(ExemplarIndex::from_bytes(&bytes[..cut]), Err(IndexError::CorruptIndex(_))),
                "cut at {cut}"
            );
        }

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(ExemplarIndex::from_bytes(&bad_magic), Err(IndexError::CorruptIndex(_))));

        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(ExemplarIndex::from_bytes(&flipped), Err(IndexError::CorruptIndex(_))));
    }

    #[test]
    fn version_mismatch_detected() {
        let mut bytes = orthogonal().to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            ExemplarIndex::from_bytes(&bytes),
            Err(IndexError::VersionMismatch { found: 7, supported: 1 })
        ));
    }

    #[test]
    fn build_counts() {
        let enc = Encoder::stub();
        let labels = alphanumeric_labels();
        assert_eq!(labels.len(), 62);

        let one = build_index(&enc, &labels, &[test_fonts::sans()], 32).unwrap();
        assert_eq!(one.index.len(), 62);
        assert!(one.skipped.is_empty());

        let two = build_index(&enc, &labels, &[test_fonts::sans(), test_fonts::serif_no_qz()], 32)
            .unwrap();
        assert_eq!(two.index.len(), 122);
        let skipped: Vec<&str> = two.skipped.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(skipped, vec!["Q", "Z"]);
        // label order, then font order
        assert_eq!(two.index.entries()[0].label, "0");
        assert_eq!(two.index.entries()[0].font_id, "DejaVuSans-ascii");
        assert_eq!(two.index.entries()[1].font_id, "DejaVuSerif-noQZ");
        assert_eq!(two.index.encoder_fingerprint(), enc.fingerprint());
    }

    #[test]
    fn build_without_fonts_is_empty() {
        let err = build_index(&Encoder::stub(), &alphanumeric_labels(), &[], 32).unwrap_err();
        assert!(matches!(err, IndexError::EmptyIndex));
    }

    #[test]
    fn build_is_deterministic() {
        let enc = Encoder::stub();
        let labels: Vec<String> = ["the", "cat", "a"].iter().map(|s| s.to_string()).collect();
        let a = build_index(&enc, &labels, &[test_fonts::sans()], 48).unwrap();
        let b = build_index(&enc, &labels, &[test_fonts::sans()], 48).unwrap();
        assert_eq!(a.index.to_bytes(), b.index.to_bytes());
    }

    #[test]
    fn identical_labels_flagged() {
        let idx = ExemplarIndex::from_entries(
            2,
            "fp",
            vec![ex("l", "f", &[1.0, 0.0]), ex("I", "f", &[1.0, 0.0]), ex("o", "f", &[0.0, 1.0])],
        )
        .unwrap();
        assert_eq!(idx.identical_label_groups(), vec![vec!["I".to_string(), "l".to_string()]]);
    }

    #[test]
    fn encoder_mismatch_detected() {
        let idx = orthogonal();
        assert!(matches!(
            idx.ensure_encoder(&Encoder::stub()),
            Err(IndexError::FingerprintMismatch { .. })
        ));
    }
}
