//! Sharded on-disk embedding store.
//!
//! Layout of a store directory:
//!
//! * `shard-NNNNN.bin`: magic `HBE1`, `u16` version, `u32` dim, `u64` row
//!   count, then `rows * dim` little-endian `f32` values, row-major.
//! * `shard-NNNNN.meta.jsonl`: one metadata object per vector row.
//! * `manifest.json`: written last; its presence marks a committed dataset.
//!
//! Every shard file's CRC-32C is recorded in the manifest and verified on open.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::ModalityKind;
use crate::rng::{shuffle, SplitMix64};
use crate::vector::EmbeddingVector;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SHARD_MAGIC: &[u8; 4] = b"HBE1";
pub const FORMAT_VERSION: u16 = 1;
pub const SHARD_HEADER_LEN: usize = 4 + 2 + 4 + 8;
pub const DEFAULT_SHARD_ROWS: usize = 65_536;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no dataset at {0} (manifest.json missing)")]
    NoDataset(PathBuf),
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
    #[error("record {record_id:?} has dim {got}, store dim is {expected}")]
    DimMismatch {
        record_id: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate record id {0:?}")]
    DuplicateRecordId(String),
    #[error("checksum mismatch in {file}: manifest {expected:08x}, file {actual:08x}")]
    ChecksumMismatch {
        file: String,
        expected: u32,
        actual: u32,
    },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("truncated shard data: {0}")]
    TruncatedShard(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub record_id: String,
    pub patient_id: String,
    pub project_id: String,
    pub modality: ModalityKind,
    pub model_id: String,
    pub vector: EmbeddingVector,
    pub label: Option<String>,
}

/// The per-row metadata persisted in the JSONL sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub record_id: String,
    pub patient_id: String,
    pub project_id: String,
    pub modality: ModalityKind,
    pub model_id: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub meta_file: String,
    pub row_count: u64,
    pub crc32c: u32,
    pub meta_crc32c: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub format_version: u32,
    pub modality: ModalityKind,
    pub model_id: String,
    pub dim: usize,
    pub record_count: u64,
    pub shards: Vec<ShardEntry>,
    pub label_map: BTreeMap<String, u32>,
}

/// Store-wide properties fixed at creation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub modality: ModalityKind,
    pub model_id: String,
    pub dim: usize,
}

struct OpenShard {
    bin_path: PathBuf,
    meta_path: PathBuf,
    bin: BufWriter<File>,
    meta: BufWriter<File>,
    rows: u64,
}

/// Streaming shard writer. Rows land in arrival order; the manifest is only
/// written by [`StoreWriter::finish`].
pub struct StoreWriter {
    dir: PathBuf,
    header: StoreHeader,
    shard_rows: usize,
    current: Option<OpenShard>,
    shards: Vec<ShardEntry>,
    ids: HashSet<String>,
    labels: BTreeSet<String>,
    count: u64,
}

impl StoreWriter {
    /// Prepares `dir`, removing any previous manifest, shards and index.
    pub fn create(dir: impl AsRef<Path>, header: StoreHeader, shard_rows: usize) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        if shard_rows == 0 {
            return Err(StoreError::InvalidArgument("shard_rows must be >= 1".into()));
        }
        if header.dim == 0 {
            return Err(StoreError::InvalidArgument("dim must be >= 1".into()));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        // Manifest goes first so a crash never leaves it pointing at new shards.
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            fs::remove_file(&manifest).map_err(io_err(&manifest))?;
        }
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if (name.starts_with("shard-") && (name.ends_with(".bin") || name.ends_with(".meta.jsonl")))
                || name == crate::index::HNSW_FILE
            {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        Ok(Self {
            dir,
            header,
            shard_rows,
            current: None,
            shards: Vec::new(),
            ids: HashSet::new(),
            labels: BTreeSet::new(),
            count: 0,
        })
    }

    pub fn push(&mut self, record: &EmbeddingRecord) -> Result<(), StoreError> {
        if record.vector.dim() != self.header.dim {
            return Err(StoreError::DimMismatch {
                record_id: record.record_id.clone(),
                expected: self.header.dim,
                got: record.vector.dim(),
            });
        }
        if !self.ids.insert(record.record_id.clone()) {
            return Err(StoreError::DuplicateRecordId(record.record_id.clone()));
        }
        if self.current.is_none() {
            self.open_shard()?;
        }
        let shard = self.current.as_mut().expect("open shard");
        let mut buf = Vec::with_capacity(record.vector.dim() * 4);
        for v in record.vector.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        shard.bin.write_all(&buf).map_err(io_err(&shard.bin_path))?;
        let meta = RecordMeta {
            record_id: record.record_id.clone(),
            patient_id: record.patient_id.clone(),
            project_id: record.project_id.clone(),
            modality: record.modality,
            model_id: record.model_id.clone(),
            label: record.label.clone(),
        };
        let mut line = serde_json::to_vec(&meta).expect("meta serializes");
        line.push(b'\n');
        shard.meta.write_all(&line).map_err(io_err(&shard.meta_path))?;
        shard.rows += 1;
        if let Some(l) = &record.label {
            self.labels.insert(l.clone());
        }
        self.count += 1;
        if shard.rows as usize == self.shard_rows {
            self.close_shard()?;
        }
        Ok(())
    }

    fn open_shard(&mut self) -> Result<(), StoreError> {
        let n = self.shards.len();
        let bin_path = self.dir.join(format!("shard-{n:05}.bin"));
        let meta_path = self.dir.join(format!("shard-{n:05}.meta.jsonl"));
        let mut bin = BufWriter::new(File::create(&bin_path).map_err(io_err(&bin_path))?);
        let meta = BufWriter::new(File::create(&meta_path).map_err(io_err(&meta_path))?);
        let mut header = Vec::with_capacity(SHARD_HEADER_LEN);
        header.extend_from_slice(SHARD_MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&(self.header.dim as u32).to_le_bytes());
        header.extend_from_slice(&0u64.to_le_bytes());
        bin.write_all(&header).map_err(io_err(&bin_path))?;
        self.current = Some(OpenShard {
            bin_path,
            meta_path,
            bin,
            meta,
            rows: 0,
        });
        Ok(())
    }

    fn close_shard(&mut self) -> Result<(), StoreError> {
        let Some(shard) = self.current.take() else {
            return Ok(());
        };
        let OpenShard {
            bin_path,
            meta_path,
            bin,
            meta,
            rows,
        } = shard;
        let mut bin = bin.into_inner().map_err(|e| io_err(&bin_path)(e.into_error()))?;
        bin.seek(SeekFrom::Start(10)).map_err(io_err(&bin_path))?;
        bin.write_all(&rows.to_le_bytes()).map_err(io_err(&bin_path))?;
        bin.sync_all().map_err(io_err(&bin_path))?;
        let meta = meta.into_inner().map_err(|e| io_err(&meta_path)(e.into_error()))?;
        meta.sync_all().map_err(io_err(&meta_path))?;
        drop((bin, meta));
        let crc = crc32c::crc32c(&fs::read(&bin_path).map_err(io_err(&bin_path))?);
        let meta_crc = crc32c::crc32c(&fs::read(&meta_path).map_err(io_err(&meta_path))?);
        self.shards.push(ShardEntry {
            file: file_name(&bin_path),
            meta_file: file_name(&meta_path),
            row_count: rows,
            crc32c: crc,
            meta_crc32c: meta_crc,
        });
        Ok(())
    }

    /// Closes the last shard and commits the manifest (atomic rename).
    pub fn finish(mut self) -> Result<CohortManifest, StoreError> {
        self.close_shard()?;
        let manifest = CohortManifest {
            format_version: u32::from(FORMAT_VERSION),
            modality: self.header.modality,
            model_id: self.header.model_id.clone(),
            dim: self.header.dim,
            record_count: self.count,
            shards: std::mem::take(&mut self.shards),
            label_map: self
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.clone(), i as u32))
                .collect(),
        };
        let tmp = self.dir.join("manifest.json.tmp");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&tmp, json).map_err(io_err(&tmp))?;
        let dest = self.dir.join(MANIFEST_FILE);
        fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
        Ok(manifest)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap().to_string_lossy().into_owned()
}

/// Writes `records` into a fresh store at `out_dir`.
pub fn write_shards<I>(
    records: I,
    out_dir: impl AsRef<Path>,
    header: StoreHeader,
    shard_rows: usize,
) -> Result<CohortManifest, StoreError>
where
    I: IntoIterator<Item = EmbeddingRecord>,
{
    let mut w = StoreWriter::create(out_dir, header, shard_rows)?;
    for r in records {
        w.push(&r)?;
    }
    w.finish()
}

/// A verified, fully loaded store.
#[derive(Debug, Clone)]
pub struct Store {
    dir: PathBuf,
    manifest: CohortManifest,
    meta: Vec<RecordMeta>,
    vectors: Vec<f32>,
    by_id: HashMap<String, usize>,
}

/// Opens and verifies a store: version, checksums, then row counts.
pub fn open_store(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
    let dir = dir.as_ref().to_path_buf();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(StoreError::NoDataset(dir));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CohortManifest = serde_json::from_str(&text).map_err(|e| StoreError::Malformed {
        what: MANIFEST_FILE.into(),
        detail: e.to_string(),
    })?;
    if manifest.format_version != u32::from(FORMAT_VERSION) {
        return Err(StoreError::VersionUnsupported(manifest.format_version));
    }
    let dim = manifest.dim;
    let mut meta: Vec<RecordMeta> = Vec::with_capacity(manifest.record_count as usize);
    let mut vectors = Vec::with_capacity(manifest.record_count as usize * dim);
    let mut total = 0u64;
    for shard in &manifest.shards {
        let bin_path = dir.join(&shard.file);
        let meta_path = dir.join(&shard.meta_file);
        let bin = fs::read(&bin_path).map_err(io_err(&bin_path))?;
        let meta_bytes = fs::read(&meta_path).map_err(io_err(&meta_path))?;
        verify_crc(&shard.file, shard.crc32c, &bin)?;
        verify_crc(&shard.meta_file, shard.meta_crc32c, &meta_bytes)?;

        if bin.len() < SHARD_HEADER_LEN {
            return Err(StoreError::TruncatedShard(format!("{}: header incomplete", shard.file)));
        }
        if &bin[0..4] != SHARD_MAGIC {
            return Err(StoreError::Malformed {
                what: shard.file.clone(),
                detail: "bad magic".into(),
            });
        }
        let version = u16::from_le_bytes([bin[4], bin[5]]);
        if version != FORMAT_VERSION {
            return Err(StoreError::VersionUnsupported(u32::from(version)));
        }
        let shard_dim = u32::from_le_bytes(bin[6..10].try_into().unwrap()) as usize;
        if shard_dim != dim {
            return Err(StoreError::Malformed {
                what: shard.file.clone(),
                detail: format!("dim {shard_dim} disagrees with manifest dim {dim}"),
            });
        }
        let rows = u64::from_le_bytes(bin[10..18].try_into().unwrap());
        if rows != shard.row_count {
            return Err(StoreError::TruncatedShard(format!(
                "{}: header has {rows} rows, manifest {}",
                shard.file, shard.row_count
            )));
        }
        let body = &bin[SHARD_HEADER_LEN..];
        if body.len() as u64 != rows * dim as u64 * 4 {
            return Err(StoreError::TruncatedShard(format!(
                "{}: {} payload bytes for {rows} rows of dim {dim}",
                shard.file,
                body.len()
            )));
        }
        vectors.extend(
            body.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        let meta_text = std::str::from_utf8(&meta_bytes).map_err(|e| StoreError::Malformed {
            what: shard.meta_file.clone(),
            detail: e.to_string(),
        })?;
        let before = meta.len();
        for line in meta_text.lines().filter(|l| !l.is_empty()) {
            meta.push(serde_json::from_str(line).map_err(|e| StoreError::Malformed {
                what: shard.meta_file.clone(),
                detail: e.to_string(),
            })?);
        }
        if (meta.len() - before) as u64 != rows {
            return Err(StoreError::TruncatedShard(format!(
                "{}: {} metadata rows for {rows} vectors",
                shard.meta_file,
                meta.len() - before
            )));
        }
        total += rows;
    }
    if total != manifest.record_count {
        return Err(StoreError::TruncatedShard(format!(
            "manifest record_count {} but shards hold {total} rows",
            manifest.record_count
        )));
    }
    let by_id = meta
        .iter()
        .enumerate()
        .map(|(i, m)| (m.record_id.clone(), i))
        .collect();
    Ok(Store {
        dir,
        manifest,
        meta,
        vectors,
        by_id,
    })
}

fn verify_crc(file: &str, expected: u32, bytes: &[u8]) -> Result<(), StoreError> {
    let actual = crc32c::crc32c(bytes);
    if actual != expected {
        return Err(StoreError::ChecksumMismatch {
            file: file.to_string(),
            expected,
            actual,
        });
    }
    Ok(())
}

impl Store {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &CohortManifest {
        &self.manifest
    }

    pub fn record_count(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn meta(&self, i: usize) -> &RecordMeta {
        &self.meta[i]
    }

    pub fn metas(&self) -> &[RecordMeta] {
        &self.meta
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim()..(i + 1) * self.dim()]
    }

    /// All vectors, row-major.
    pub fn matrix(&self) -> &[f32] {
        &self.vectors
    }

    pub fn find(&self, record_id: &str) -> Option<usize> {
        self.by_id.get(record_id).copied()
    }

    pub fn record(&self, i: usize) -> EmbeddingRecord {
        let m = &self.meta[i];
        EmbeddingRecord {
            record_id: m.record_id.clone(),
            patient_id: m.patient_id.clone(),
            project_id: m.project_id.clone(),
            modality: m.modality,
            model_id: m.model_id.clone(),
            vector: EmbeddingVector::new(self.vector(i).to_vec())
                .expect("stored vectors are finite"),
            label: m.label.clone(),
        }
    }

    /// Record indices in manifest order, or in a SplitMix64 Fisher-Yates
    /// permutation when `shuffle_seed` is given, cut into `batch_size`
    /// batches (the last may be short).
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Batches<'_> {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        let mut order: Vec<usize> = (0..self.record_count()).collect();
        if let Some(seed) = shuffle_seed {
            shuffle(&mut order, &mut SplitMix64::new(seed));
        }
        Batches {
            store: self,
            order,
            pos: 0,
            batch_size,
        }
    }
}

pub struct Batches<'a> {
    store: &'a Store,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            store: self.store,
            indices,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    store: &'a Store,
    pub indices: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn record_ids(&self) -> Vec<&'a str> {
        self.indices.iter().map(|&i| self.store.meta(i).record_id.as_str()).collect()
    }

    pub fn vectors(&self) -> Vec<&'a [f32]> {
        self.indices.iter().map(|&i| self.store.vector(i)).collect()
    }

    /// Integer labels via the manifest label map.
    pub fn labels(&self) -> Vec<Option<u32>> {
        self.indices
            .iter()
            .map(|&i| {
                self.store
                    .meta(i)
                    .label
                    .as_ref()
                    .and_then(|l| self.store.manifest().label_map.get(l).copied())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, dim: usize) -> EmbeddingRecord {
        EmbeddingRecord {
            record_id: format!("R{i:04}"),
            patient_id: format!("P{}", i / 2),
            project_id: if i % 3 == 0 { "A".into() } else { "B".into() },
            modality: ModalityKind::ClinicalText,
            model_id: "m".into(),
            vector: EmbeddingVector::new((0..dim).map(|d| (i * dim + d) as f32 * 0.25 - 3.0).collect()).unwrap(),
            label: Some(if i % 3 == 0 { "A".into() } else { "B".into() }),
        }
    }

    fn header(dim: usize) -> StoreHeader {
        StoreHeader {
            modality: ModalityKind::ClinicalText,
            model_id: "m".into(),
            dim,
        }
    }

    #[test]
    fn shard_sizes_follow_ceiling_division() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_shards((0..10).map(|i| rec(i, 3)), dir.path(), header(3), 4).unwrap();
        let rows: Vec<u64> = m.shards.iter().map(|s| s.row_count).collect();
        assert_eq!(rows, vec![4, 4, 2]);
        assert_eq!(m.record_count, 10);
        assert_eq!(m.label_map.get("A"), Some(&0));
        assert_eq!(m.label_map.get("B"), Some(&1));
        let bin = fs::read(dir.path().join("shard-00002.bin")).unwrap();
        assert_eq!(&bin[..4], b"HBE1");
        assert_eq!(bin.len(), SHARD_HEADER_LEN + 2 * 3 * 4);
    }

    #[test]
    fn empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_shards(std::iter::empty(), dir.path(), header(8), 4).unwrap();
        assert_eq!(m.record_count, 0);
        assert!(m.shards.is_empty());
        let s = open_store(dir.path()).unwrap();
        assert_eq!(s.dim(), 8);
        assert!(s.is_empty());
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..25).map(|i| rec(i, 5)).collect();
        write_shards(recs.clone(), dir.path(), header(5), 7).unwrap();
        let s = open_store(dir.path()).unwrap();
        assert_eq!(s.record_count(), 25);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(&s.record(i), r);
            assert_eq!(s.find(&r.record_id), Some(i));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_shards(vec![rec(0, 3), rec(1, 4)], dir.path(), header(3), 4).unwrap_err();
        assert!(matches!(err, StoreError::DimMismatch { .. }));
        let err = write_shards(vec![rec(0, 3), rec(0, 3)], dir.path(), header(3), 4).unwrap_err();
        assert!(matches!(err, StoreError::DuplicateRecordId(_)));
        assert!(StoreWriter::create(dir.path(), header(3), 0).is_err());
        // aborted writes never leave a manifest behind
        assert!(matches!(open_store(dir.path()), Err(StoreError::NoDataset(_))));
    }

    #[test]
    fn flipped_byte_is_checksum_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_shards((0..6).map(|i| rec(i, 4)), dir.path(), header(4), 4).unwrap();
        let p = dir.path().join("shard-00001.bin");
        let mut b = fs::read(&p).unwrap();
        b[SHARD_HEADER_LEN + 3] ^= 0x01;
        fs::write(&p, b).unwrap();
        assert!(matches!(open_store(dir.path()), Err(StoreError::ChecksumMismatch { .. })));
    }

    #[test]
    fn corrupt_metadata_is_checksum_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_shards((0..3).map(|i| rec(i, 2)), dir.path(), header(2), 4).unwrap();
        let p = dir.path().join("shard-00000.meta.jsonl");
        let mut b = fs::read(&p).unwrap();
        b[5] ^= 0x20;
        fs::write(&p, b).unwrap();
        assert!(matches!(open_store(dir.path()), Err(StoreError::ChecksumMismatch { .. })));
    }

    fn edit_manifest(dir: &Path, f: impl FnOnce(&mut CohortManifest)) {
        let p = dir.join(MANIFEST_FILE);
        let mut m: CohortManifest = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        f(&mut m);
        fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
    }

    #[test]
    fn count_disagreement_is_truncated_shard() {
        let dir = tempfile::tempdir().unwrap();
        write_shards((0..6).map(|i| rec(i, 4)), dir.path(), header(4), 4).unwrap();
        edit_manifest(dir.path(), |m| m.record_count = 7);
        assert!(matches!(open_store(dir.path()), Err(StoreError::TruncatedShard(_))));
    }

    #[test]
    fn truncated_file_with_matching_checksum_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_shards((0..6).map(|i| rec(i, 4)), dir.path(), header(4), 4).unwrap();
        let p = dir.path().join("shard-00000.bin");
        let mut b = fs::read(&p).unwrap();
        b.truncate(b.len() - 16);
        let crc = crc32c::crc32c(&b);
        fs::write(&p, b).unwrap();
        edit_manifest(dir.path(), |m| m.shards[0].crc32c = crc);
        assert!(matches!(open_store(dir.path()), Err(StoreError::TruncatedShard(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_shards((0..2).map(|i| rec(i, 2)), dir.path(), header(2), 4).unwrap();
        edit_manifest(dir.path(), |m| m.format_version = 9);
        assert!(matches!(open_store(dir.path()), Err(StoreError::VersionUnsupported(9))));
    }

    #[test]
    fn batching_and_shuffling() {
        let dir = tempfile::tempdir().unwrap();
        write_shards((0..10).map(|i| rec(i, 2)), dir.path(), header(2), 3).unwrap();
        let s = open_store(dir.path()).unwrap();
        let seq: Vec<Vec<usize>> = s.batches(4, None).map(|b| b.indices).collect();
        assert_eq!(seq, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);

        let a: Vec<_> = s.batches(3, Some(11)).flat_map(|b| b.record_ids()).collect();
        let b: Vec<_> = s.batches(3, Some(11)).flat_map(|b| b.record_ids()).collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        let manifest_order: Vec<_> = s.batches(10, None).flat_map(|b| b.record_ids()).collect();
        assert_eq!(sorted, manifest_order);
        assert_ne!(a, manifest_order);

        let first = s.batches(4, None).next().unwrap();
        assert_eq!(first.labels()[0], Some(0));
        assert_eq!(first.vectors()[1], s.vector(1));
    }

    #[test]
    fn rewriting_replaces_old_shards() {
        let dir = tempfile::tempdir().unwrap();
        write_shards((0..10).map(|i| rec(i, 2)), dir.path(), header(2), 2).unwrap();
        write_shards((0..3).map(|i| rec(i, 2)), dir.path(), header(2), 2).unwrap();
        let shards = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".bin"))
            .count();
        assert_eq!(shards, 2);
        assert_eq!(open_store(dir.path()).unwrap().record_count(), 3);
    }
}
