//! Reference bank ingestion, near-duplicate suppression and exact similarity ranking.
//!
//! A bank is described by a JSON-Lines manifest. Each record carries either an
//! inline `embedding` array or a `row` index into a little-endian binary matrix
//! (`CTBANK01` header, `u32` count, `u32` dim, row-major `f32` payload). A
//! manifest must not mix the two styles.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Magic bytes at the start of every binary embedding matrix.
pub const MATRIX_MAGIC: &[u8; 8] = b"CTBANK01";

/// Default near-duplicate threshold.
pub const DEFAULT_TAU_DUP: f64 = 0.99;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("line {line}: zero-norm embedding for {id:?}")]
    ZeroNorm { line: usize, id: String },
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("invalid embedding matrix {path}: {reason}")]
    BadMatrix { path: PathBuf, reason: String },
    #[error("manifest mixes inline embeddings and row references (line {line})")]
    MixedEmbeddingStyles { line: usize },
    #[error("manifest uses row references but no embedding matrix was supplied")]
    MissingMatrix,
    #[error("vector dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("tau_dup must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("bank is empty")]
    Empty,
}

/// A validated embedding vector: finite components, non-zero norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, BankError> {
        if values.is_empty() {
            return Err(BankError::InvalidEmbedding("empty vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(BankError::InvalidEmbedding(format!(
                "non-finite component at index {i}"
            )));
        }
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(BankError::InvalidEmbedding("zero-norm vector".into()));
        }
        Ok(Self { values, norm })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

impl Serialize for Embedding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.values.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let values = Vec::<f32>::deserialize(d)?;
        Embedding::new(values).map_err(serde::de::Error::custom)
    }
}

/// Cosine similarity in 64-bit precision, clamped to `[-1, 1]`.
///
/// The result is exactly symmetric in its arguments.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, BankError> {
    if a.dim() != b.dim() {
        return Err(BankError::Dimension(a.dim(), b.dim()));
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &Embedding, b: &Embedding) -> f64 {
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    (dot / (a.norm * b.norm)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub id: String,
    pub doc_id: String,
    pub caption: String,
    pub modality: Option<String>,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub manifest_path: PathBuf,
    /// Hex SHA-256 over the manifest bytes followed by the matrix bytes, if any.
    pub digest: String,
}

#[derive(Debug, Clone)]
pub struct ReferenceBank {
    entries: Vec<BankEntry>,
    dimension: usize,
    provenance: Provenance,
}

/// One suppressed entry: `(dropped_id, against_id, similarity)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub dropped_id: String,
    pub against_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Ranked<'a> {
    pub entry: &'a BankEntry,
    pub similarity: f64,
    /// 1-based; rank 1 is the most similar entry.
    pub rank: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    #[serde(default)]
    doc_id: Option<String>,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    modality: Option<String>,
    #[serde(default)]
    embedding: Option<Vec<f32>>,
    #[serde(default)]
    row: Option<usize>,
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    id: &'a str,
    doc_id: &'a str,
    caption: &'a str,
    modality: Option<&'a str>,
    row: usize,
}

impl ReferenceBank {
    /// Builds a bank from already-validated entries.
    pub fn from_entries(
        entries: Vec<BankEntry>,
        provenance: Provenance,
    ) -> Result<Self, BankError> {
        let dimension = entries.first().ok_or(BankError::Empty)?.embedding.dim();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.embedding.dim() != dimension {
                return Err(BankError::DimensionMismatch {
                    line: i + 1,
                    expected: dimension,
                    found: e.embedding.dim(),
                });
            }
            if let Some(first) = seen.insert(e.id.as_str(), i + 1) {
                return Err(BankError::DuplicateId {
                    id: e.id.clone(),
                    first_line: first,
                    second_line: i + 1,
                });
            }
        }
        Ok(Self {
            entries,
            dimension,
            provenance,
        })
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Writes the bank as a row-referencing manifest plus binary matrix.
    pub fn write(&self, manifest_path: &Path, matrix_path: &Path) -> Result<(), BankError> {
        let mut manifest = Vec::new();
        for (row, e) in self.entries.iter().enumerate() {
            let rec = ManifestOut {
                id: &e.id,
                doc_id: &e.doc_id,
                caption: &e.caption,
                modality: e.modality.as_deref(),
                row,
            };
            serde_json::to_writer(&mut manifest, &rec).expect("manifest record serializes");
            manifest.push(b'\n');
        }
        fs::write(manifest_path, manifest).map_err(|source| BankError::Io {
            path: manifest_path.to_owned(),
            source,
        })?;
        let rows: Vec<&[f32]> = self.entries.iter().map(|e| e.embedding.values()).collect();
        write_matrix(matrix_path, self.dimension, &rows)
    }
}

/// Loads a manifest (and optional binary matrix) in manifest order. No dedup.
pub fn load_bank(
    manifest_path: &Path,
    embeddings_path: Option<&Path>,
) -> Result<ReferenceBank, BankError> {
    let manifest_bytes = fs::read(manifest_path).map_err(|source| BankError::Io {
        path: manifest_path.to_owned(),
        source,
    })?;
    let text = String::from_utf8(manifest_bytes.clone()).map_err(|e| BankError::Malformed {
        line: 0,
        reason: format!("manifest is not UTF-8: {e}"),
    })?;

    let mut hasher = Sha256::new();
    hasher.update(&manifest_bytes);

    let matrix = match embeddings_path {
        Some(p) => {
            let bytes = fs::read(p).map_err(|source| BankError::Io {
                path: p.to_owned(),
                source,
            })?;
            hasher.update(&bytes);
            Some(parse_matrix(p, &bytes)?)
        }
        None => None,
    };

    let mut entries = Vec::new();
    let mut lines_of: Vec<usize> = Vec::new();
    let mut inline_style: Option<bool> = None;
    let mut first_line_of: HashMap<String, usize> = HashMap::new();
    let mut dimension: Option<usize> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(raw).map_err(|e| BankError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        if rec.id.is_empty() {
            return Err(BankError::Malformed {
                line,
                reason: "empty id".into(),
            });
        }
        if let Some(first) = first_line_of.get(&rec.id) {
            return Err(BankError::DuplicateId {
                id: rec.id,
                first_line: *first,
                second_line: line,
            });
        }
        let values = match (rec.embedding, rec.row) {
            (Some(_), Some(_)) => {
                return Err(BankError::Malformed {
                    line,
                    reason: "record has both embedding and row".into(),
                })
            }
            (None, None) => {
                return Err(BankError::Malformed {
                    line,
                    reason: "record has neither embedding nor row".into(),
                })
            }
            (Some(v), None) => {
                if inline_style == Some(false) {
                    return Err(BankError::MixedEmbeddingStyles { line });
                }
                inline_style = Some(true);
                v
            }
            (None, Some(row)) => {
                if inline_style == Some(true) {
                    return Err(BankError::MixedEmbeddingStyles { line });
                }
                inline_style = Some(false);
                let m = matrix.as_ref().ok_or(BankError::MissingMatrix)?;
                m.row(row)
                    .ok_or_else(|| BankError::Malformed {
                        line,
                        reason: format!("row {row} out of range (matrix has {} rows)", m.count),
                    })?
                    .to_vec()
            }
        };
        let expected = *dimension.get_or_insert(values.len());
        if values.len() != expected {
            return Err(BankError::DimensionMismatch {
                line,
                expected,
                found: values.len(),
            });
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(BankError::ZeroNorm { line, id: rec.id });
        }
        let embedding = Embedding::new(values).map_err(|e| BankError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        // A source without document provenance degrades to one document per image.
        let doc_id = rec
            .doc_id
            .filter(|d| !d.is_empty())
            .unwrap_or_else(|| rec.id.clone());
        let modality = rec
            .modality
            .map(|m| m.trim().to_uppercase())
            .filter(|m| !m.is_empty());
        first_line_of.insert(rec.id.clone(), line);
        lines_of.push(line);
        entries.push(BankEntry {
            id: rec.id,
            doc_id,
            caption: rec.caption.unwrap_or_default(),
            modality,
            embedding,
        });
    }

    if entries.is_empty() {
        return Err(BankError::Empty);
    }
    let provenance = Provenance {
        manifest_path: manifest_path.to_owned(),
        digest: hex::encode(hasher.finalize()),
    };
    ReferenceBank::from_entries(entries, provenance)
}

/// Greedy single-pass near-duplicate suppression in bank order.
///
/// An entry is kept iff its similarity to every already-kept entry is `<= tau_dup`.
/// Each drop names the first kept entry (in retention order) that exceeded the threshold.
pub fn deduplicate(
    bank: &ReferenceBank,
    tau_dup: f64,
) -> Result<(ReferenceBank, Vec<DropRecord>), BankError> {
    if !(tau_dup > 0.0 && tau_dup <= 1.0) {
        return Err(BankError::BadThreshold(tau_dup));
    }
    let mut kept: Vec<&BankEntry> = Vec::with_capacity(bank.len());
    let mut dropped = Vec::new();
    for entry in &bank.entries {
        let hit = kept.iter().find_map(|k| {
            let s = cosine_unchecked(&entry.embedding, &k.embedding);
            (s > tau_dup).then_some((k, s))
        });
        match hit {
            Some((k, s)) => dropped.push(DropRecord {
                dropped_id: entry.id.clone(),
                against_id: k.id.clone(),
                similarity: s,
            }),
            None => kept.push(entry),
        }
    }
    let deduped = ReferenceBank {
        entries: kept.into_iter().cloned().collect(),
        dimension: bank.dimension,
        provenance: bank.provenance.clone(),
    };
    Ok((deduped, dropped))
}

/// Ranks `pool` by descending similarity to `query`; ties go to the smaller id.
pub fn rank_entries<'a>(
    pool: &[&'a BankEntry],
    query: &Embedding,
) -> Result<Vec<Ranked<'a>>, BankError> {
    if pool.is_empty() {
        return Err(BankError::Empty);
    }
    let mut scored = Vec::with_capacity(pool.len());
    for &entry in pool {
        let similarity = cosine_similarity(query, &entry.embedding)?;
        scored.push((entry, similarity));
    }
    scored.sort_by(|a, b| rank_order(a.1, &a.0.id, b.1, &b.0.id));
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (entry, similarity))| Ranked {
            entry,
            similarity,
            rank: i + 1,
        })
        .collect())
}

pub fn rank_by_similarity<'a>(
    bank: &'a ReferenceBank,
    query: &Embedding,
) -> Result<Vec<Ranked<'a>>, BankError> {
    let pool: Vec<&BankEntry> = bank.entries.iter().collect();
    rank_entries(&pool, query)
}

fn rank_order(sa: f64, ida: &str, sb: f64, idb: &str) -> Ordering {
    sb.total_cmp(&sa).then_with(|| ida.cmp(idb))
}

/// Parsed `CTBANK01` matrix.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub count: usize,
    pub dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> Option<&[f32]> {
        (i < self.count).then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }
}

pub fn read_matrix(path: &Path) -> Result<EmbeddingMatrix, BankError> {
    let bytes = fs::read(path).map_err(|source| BankError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_matrix(path, &bytes)
}

fn parse_matrix(path: &Path, bytes: &[u8]) -> Result<EmbeddingMatrix, BankError> {
    let bad = |reason: String| BankError::BadMatrix {
        path: path.to_owned(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(bad(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MATRIX_MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("count x dim overflows".into()))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbeddingMatrix { count, dim, data })
}

pub fn write_matrix(path: &Path, dim: usize, rows: &[&[f32]]) -> Result<(), BankError> {
    let io = |source| BankError::Io {
        path: path.to_owned(),
        source,
    };
    let mut buf = Vec::with_capacity(16 + rows.len() * dim * 4);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in rows {
        if r.len() != dim {
            return Err(BankError::Dimension(dim, r.len()));
        }
        for v in *r {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn entry(id: &str, v: &[f32]) -> BankEntry {
        BankEntry {
            id: id.into(),
            doc_id: format!("doc-{id}"),
            caption: String::new(),
            modality: None,
            embedding: emb(v),
        }
    }

    fn bank(entries: Vec<BankEntry>) -> ReferenceBank {
        ReferenceBank::from_entries(
            entries,
            Provenance {
                manifest_path: PathBuf::from("mem"),
                digest: String::new(),
            },
        )
        .unwrap()
    }

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(
            cosine_similarity(&emb(&[1., 0.]), &emb(&[1., 0.])).unwrap(),
            1.0
        );
        assert_eq!(
            cosine_similarity(&emb(&[1., 0.]), &emb(&[0., 1.])).unwrap(),
            0.0
        );
        let s = cosine_similarity(&emb(&[1., 1.]), &emb(&[1., 0.])).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(matches!(
            cosine_similarity(&emb(&[1., 0.]), &emb(&[1., 0., 0.])),
            Err(BankError::Dimension(2, 3))
        ));
    }

    #[test]
    fn embedding_rejects_bad_values() {
        assert!(Embedding::new(vec![0.0, 0.0]).is_err());
        assert!(Embedding::new(vec![f32::NAN, 1.0]).is_err());
        assert!(Embedding::new(vec![f32::INFINITY]).is_err());
        assert!(Embedding::new(vec![]).is_err());
    }

    #[test]
    fn load_inline_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            &dir,
            "m.jsonl",
            r#"{"id":"a","doc_id":"d1","caption":"ct chest","modality":"ct","embedding":[1,0,0,0]}
{"id":"b","doc_id":"d1","caption":"","modality":null,"embedding":[0,1,0,0]}
{"id":"c","doc_id":"","caption":"x","modality":null,"embedding":[0,0,1,1]}
"#,
        );
        let b = load_bank(&p, None).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.dimension(), 4);
        assert_eq!(b.entries()[0].modality.as_deref(), Some("CT"));
        // missing doc_id falls back to the entry id
        assert_eq!(b.entries()[2].doc_id, "c");
        assert_eq!(b.provenance().digest.len(), 64);
    }

    #[test]
    fn load_reports_duplicate_id_with_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            &dir,
            "m.jsonl",
            r#"{"id":"img1","doc_id":"d","caption":"","modality":null,"embedding":[1,0]}
{"id":"img2","doc_id":"d","caption":"","modality":null,"embedding":[0,1]}
{"id":"img1","doc_id":"d","caption":"","modality":null,"embedding":[1,1]}
"#,
        );
        let err = load_bank(&p, None).unwrap_err();
        match &err {
            BankError::DuplicateId {
                id,
                first_line,
                second_line,
            } => {
                assert_eq!(id, "img1");
                assert_eq!((*first_line, *second_line), (1, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("img1"));
    }

    #[test]
    fn load_rejects_zero_norm_and_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            &dir,
            "z.jsonl",
            r#"{"id":"z","doc_id":"d","caption":"","modality":null,"embedding":[0,0,0,0]}"#,
        );
        assert!(matches!(
            load_bank(&p, None),
            Err(BankError::ZeroNorm { line: 1, .. })
        ));
        let p = write_tmp(
            &dir,
            "d.jsonl",
            "{\"id\":\"a\",\"doc_id\":\"d\",\"caption\":\"\",\"modality\":null,\"embedding\":[1,0]}\n\
             {\"id\":\"b\",\"doc_id\":\"d\",\"caption\":\"\",\"modality\":null,\"embedding\":[1,0,0]}\n",
        );
        assert!(matches!(
            load_bank(&p, None),
            Err(BankError::DimensionMismatch { line: 2, .. })
        ));
        let p = write_tmp(&dir, "bad.jsonl", "{\"id\":\"a\"\n");
        assert!(matches!(
            load_bank(&p, None),
            Err(BankError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn load_row_manifest_and_reject_mixed_styles() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("e.bin");
        write_matrix(&mp, 2, &[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        let p = write_tmp(
            &dir,
            "m.jsonl",
            "{\"id\":\"a\",\"doc_id\":\"d\",\"caption\":\"\",\"modality\":null,\"row\":1}\n\
             {\"id\":\"b\",\"doc_id\":\"d\",\"caption\":\"\",\"modality\":null,\"row\":0}\n",
        );
        let b = load_bank(&p, Some(&mp)).unwrap();
        assert_eq!(b.entries()[0].embedding.values(), &[0.0, 2.0]);
        assert!(matches!(load_bank(&p, None), Err(BankError::MissingMatrix)));

        let p = write_tmp(
            &dir,
            "mixed.jsonl",
            "{\"id\":\"a\",\"doc_id\":\"d\",\"caption\":\"\",\"modality\":null,\"row\":1}\n\
             {\"id\":\"b\",\"doc_id\":\"d\",\"caption\":\"\",\"modality\":null,\"embedding\":[1,0]}\n",
        );
        assert!(matches!(
            load_bank(&p, Some(&mp)),
            Err(BankError::MixedEmbeddingStyles { line: 2 })
        ));
    }

    #[test]
    fn matrix_header_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "x.bin", "NOTABANKxxxxxxxx");
        assert!(matches!(read_matrix(&p), Err(BankError::BadMatrix { .. })));
        let mp = dir.path().join("ok.bin");
        write_matrix(&mp, 3, &[&[1.0, 2.0, 3.0]]).unwrap();
        let bytes = fs::read(&mp).unwrap();
        assert_eq!(&bytes[..8], b"CTBANK01");
        assert_eq!(&bytes[8..16], &[1, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 12);
    }

    #[test]
    fn written_bank_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let b = bank(vec![entry("a", &[1.0, 0.5]), entry("b", &[-0.25, 2.0])]);
        let (m, e) = (dir.path().join("m.jsonl"), dir.path().join("e.bin"));
        b.write(&m, &e).unwrap();
        let r = load_bank(&m, Some(&e)).unwrap();
        assert_eq!(r.entries(), b.entries());
    }

    #[test]
    fn dedup_exact_duplicate() {
        let b = bank(vec![
            entry("e1", &[1., 0.]),
            entry("e2", &[1., 0.]),
            entry("e3", &[0., 1.]),
        ]);
        let (kept, dropped) = deduplicate(&b, 0.99).unwrap();
        let ids: Vec<_> = kept.entries().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["e1", "e3"]);
        assert_eq!(
            dropped,
            vec![DropRecord {
                dropped_id: "e2".into(),
                against_id: "e1".into(),
                similarity: 1.0
            }]
        );
    }

    #[test]
    fn dedup_keeps_orthogonal() {
        let b = bank(vec![entry("e1", &[1., 0.]), entry("e2", &[0., 1.])]);
        let (kept, dropped) = deduplicate(&b, 0.99).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(dropped.is_empty());
    }

    #[test]
    fn dedup_chain_checks_only_retained() {
        // angles chosen so that s(e1,e2)=s(e2,e3)=0.995 and s(e1,e3)=cos(2*acos(0.995))
        let th = 0.995f64.acos();
        let e1 = [1.0f32, 0.0];
        let e2 = [th.cos() as f32, th.sin() as f32];
        let e3 = [(2. * th).cos() as f32, (2. * th).sin() as f32];
        let b = bank(vec![entry("e1", &e1), entry("e2", &e2), entry("e3", &e3)]);
        let s13 = cosine_similarity(&emb(&e1), &emb(&e3)).unwrap();
        assert!(s13 < 0.99 && s13 > 0.97, "{s13}");
        let (kept, dropped) = deduplicate(&b, 0.99).unwrap();
        let ids: Vec<_> = kept.entries().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["e1", "e3"]);
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].against_id, "e1");
    }

    #[test]
    fn dedup_rejects_bad_threshold() {
        let b = bank(vec![entry("e1", &[1., 0.])]);
        assert!(deduplicate(&b, 0.0).is_err());
        assert!(deduplicate(&b, 1.5).is_err());
        assert!(deduplicate(&b, 1.0).is_ok());
    }

    #[test]
    fn ranking_examples() {
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let b = bank(vec![
            entry("a", &[1., 0.]),
            entry("b", &[0., 1.]),
            entry("c", &[h, h]),
        ]);
        let r = rank_by_similarity(&b, &emb(&[1., 0.])).unwrap();
        let ids: Vec<_> = r.iter().map(|x| (x.entry.id.as_str(), x.rank)).collect();
        assert_eq!(ids, [("a", 1), ("c", 2), ("b", 3)]);
        assert!((r[1].similarity - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);

        let b = bank(vec![entry("y", &[1., 1.]), entry("x", &[1., -1.])]);
        let r = rank_by_similarity(&b, &emb(&[1., 0.])).unwrap();
        assert_eq!(r[0].entry.id, "x");
        assert_eq!(r[0].similarity, r[1].similarity);

        let b = bank(vec![entry("only", &[3., 4.])]);
        let r = rank_by_similarity(&b, &emb(&[1., 0.])).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].rank, 1);

        assert!(matches!(
            rank_entries(&[], &emb(&[1., 0.])),
            Err(BankError::Empty)
        ));
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-10.0f32..10.0, dim)
            .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(a in vec_strategy(6), b in vec_strategy(6), c in 0.01f32..100.0) {
            let (ea, eb) = (emb(&a), emb(&b));
            prop_assert_eq!(cosine_unchecked(&ea, &eb), cosine_unchecked(&eb, &ea));
            let scaled: Vec<f32> = a.iter().map(|x| x * c).collect();
            let s = cosine_unchecked(&ea, &emb(&scaled));
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        #[test]
        fn dedup_invariants(vs in prop::collection::vec(vec_strategy(3), 1..40), tau in 0.5f64..1.0) {
            let entries = vs.iter().enumerate().map(|(i, v)| entry(&format!("e{i:03}"), v)).collect();
            let b = bank(entries);
            let (kept, dropped) = deduplicate(&b, tau).unwrap();
            prop_assert_eq!(kept.len() + dropped.len(), b.len());
            for (i, x) in kept.entries().iter().enumerate() {
                for y in &kept.entries()[i + 1..] {
                    prop_assert!(cosine_unchecked(&x.embedding, &y.embedding) <= tau);
                }
            }
            let (again, dropped_again) = deduplicate(&kept, tau).unwrap();
            prop_assert!(dropped_again.is_empty());
            prop_assert_eq!(again.len(), kept.len());
        }

        #[test]
        fn ranking_is_sorted_permutation(vs in prop::collection::vec(vec_strategy(4), 1..30), q in vec_strategy(4)) {
            let entries = vs.iter().enumerate().map(|(i, v)| entry(&format!("e{i:03}"), v)).collect();
            let b = bank(entries);
            let r = rank_by_similarity(&b, &emb(&q)).unwrap();
            prop_assert_eq!(r.len(), b.len());
            let mut ids: Vec<_> = r.iter().map(|x| x.entry.id.clone()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), b.len());
            for w in r.windows(2) {
                prop_assert!(w[0].similarity >= w[1].similarity);
                prop_assert_eq!(w[1].rank, w[0].rank + 1);
            }
        }
    }
}
