//! Clinical text normalization, sliding-window chunking and document pooling.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::embedder::{Embedder, Fragment};
use crate::pipeline::PipelineError;
use crate::vector::{pool, EmbeddingVector};

pub const DEFAULT_CHUNK_SIZE: usize = 512;
pub const DEFAULT_OVERLAP: usize = 64;

/// Half-open token range `[start_token, end_token)` and its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub start_token: usize,
    pub end_token: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.chunk_size == 0 || self.overlap >= self.chunk_size {
            return Err(PipelineError::InvalidConfig(format!(
                "need chunk_size >= 1 and overlap < chunk_size (got {} / {})",
                self.chunk_size, self.overlap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentEmbedding {
    pub asset_id: String,
    pub chunk_vectors: Vec<(ChunkSpec, EmbeddingVector)>,
    pub pooled: EmbeddingVector,
}

/// NFC, then every whitespace run (CR and LF included) becomes one space,
/// with the ends trimmed.
pub fn normalize_text(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for word in nfc.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

pub fn tokenize(normalized: &str) -> Vec<&str> {
    normalized.split_whitespace().collect()
}

/// Token ranges of the sliding window. Window `i` starts at
/// `i * (chunk_size - overlap)`; the last window ends at `n_tokens`.
pub fn chunk_ranges(
    n_tokens: usize,
    chunk_size: usize,
    overlap: usize,
) -> Result<Vec<(usize, usize)>, PipelineError> {
    TextConfig {
        chunk_size,
        overlap,
    }
    .validate()?;
    let stride = chunk_size - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n_tokens {
        let end = (start + chunk_size).min(n_tokens);
        out.push((start, end));
        if end == n_tokens {
            break;
        }
        start += stride;
    }
    Ok(out)
}

pub fn chunk(tokens: &[&str], chunk_size: usize, overlap: usize) -> Result<Vec<ChunkSpec>, PipelineError> {
    Ok(chunk_ranges(tokens.len(), chunk_size, overlap)?
        .into_iter()
        .map(|(s, e)| ChunkSpec {
            start_token: s,
            end_token: e,
            text: tokens[s..e].join(" "),
        })
        .collect())
}

/// Renders a flat record as `key: value` lines in key order.
pub fn render_tabular(row: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in row {
        out.push_str(k);
        out.push_str(": ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Reads a text asset. `.json` files holding a flat object are treated as
/// tabular EHR rows and rendered with [`render_tabular`].
pub fn load_document(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| PipelineError::Decode(format!("{}: invalid UTF-8: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Decode(format!("{}: {e}", path.display())))?;
        let row = obj
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, v)
            })
            .collect();
        return Ok(render_tabular(&row));
    }
    Ok(text)
}

pub fn process_document_text(
    asset_id: &str,
    raw: &str,
    embedder: &dyn Embedder,
    config: &TextConfig,
    label_hint: Option<&str>,
) -> Result<DocumentEmbedding, PipelineError> {
    config.validate()?;
    let normalized = normalize_text(raw);
    let tokens = tokenize(&normalized);
    if tokens.is_empty() {
        return Err(PipelineError::EmptyDocument(asset_id.to_string()));
    }
    let chunks = chunk(&tokens, config.chunk_size, config.overlap)?;
    let ids: Vec<String> = (0..chunks.len()).map(|i| format!("{asset_id}#c{i:03}")).collect();
    let fragments: Vec<Fragment<'_>> = chunks
        .iter()
        .zip(&ids)
        .map(|(c, id)| Fragment::new(id, c.text.as_bytes()).with_hint(label_hint))
        .collect();
    let vectors = embedder.embed_batch(&fragments)?;
    let pooled = pool(&vectors).expect("at least one chunk");
    Ok(DocumentEmbedding {
        asset_id: asset_id.to_string(),
        chunk_vectors: chunks.into_iter().zip(vectors).collect(),
        pooled,
    })
}

pub fn process_document(
    asset_id: &str,
    path: &Path,
    embedder: &dyn Embedder,
    config: &TextConfig,
    label_hint: Option<&str>,
) -> Result<DocumentEmbedding, PipelineError> {
    let raw = load_document(path)?;
    process_document_text(asset_id, &raw, embedder, config, label_hint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ModalityKind;
    use crate::embedder::HashEmbedder;
    use proptest::prelude::*;

    /// Independent reference: walk start indices until the document is covered.
    fn reference_starts(n: usize, size: usize, overlap: usize) -> Vec<usize> {
        let mut starts = vec![0];
        let mut s = 0;
        while s + size < n {
            s += size - overlap;
            starts.push(s);
        }
        starts
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("A  b\r\nc "), "A b c");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("already fine"), "already fine");
        // decomposed e + combining acute composes to U+00E9
        assert_eq!(normalize_text("caf\u{0065}\u{0301}"), "caf\u{00e9}");
        assert_eq!(normalize_text("\t x\u{00a0}y \n"), "x y");
    }

    #[test]
    fn chunk_examples() {
        assert_eq!(reference_starts(1200, 512, 64), vec![0, 448, 896]);
        let r = chunk_ranges(1200, 512, 64).unwrap();
        assert_eq!(r, vec![(0, 512), (448, 960), (896, 1200)]);
        assert_eq!(chunk_ranges(10, 512, 64).unwrap(), vec![(0, 10)]);
        assert_eq!(chunk_ranges(512, 512, 64).unwrap(), vec![(0, 512)]);
        assert!(chunk_ranges(0, 512, 64).unwrap().is_empty());
    }

    #[test]
    fn invalid_overlap() {
        assert!(matches!(chunk_ranges(10, 4, 4), Err(PipelineError::InvalidConfig(_))));
        assert!(matches!(chunk_ranges(10, 0, 0), Err(PipelineError::InvalidConfig(_))));
    }

    #[test]
    fn chunk_text_joins_tokens() {
        let toks = ["a", "b", "c", "d", "e"];
        let c = chunk(&toks, 3, 1).unwrap();
        let texts: Vec<_> = c.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["a b c", "c d e"]);
    }

    #[test]
    fn render_sorted() {
        let row: BTreeMap<String, String> = [("stage", "II"), ("age", "61")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        assert_eq!(render_tabular(&row), "age: 61\nstage: II\n");
    }

    fn note(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn document_examples() {
        let e = HashEmbedder::new(32, ModalityKind::ClinicalText);
        let cfg = TextConfig::default();
        let single = process_document_text("D", "short note here", &e, &cfg, None).unwrap();
        assert_eq!(single.chunk_vectors.len(), 1);
        for (a, b) in single.pooled.as_slice().iter().zip(single.chunk_vectors[0].1.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }

        let mangled = process_document_text("D", "  short\r\n\tnote   here \n", &e, &cfg, None).unwrap();
        assert_eq!(mangled, single);

        let long = process_document_text("D", &note(1200), &e, &cfg, None).unwrap();
        assert_eq!(long.chunk_vectors.len(), 3);
        let starts: Vec<_> = long.chunk_vectors.iter().map(|(c, _)| c.start_token).collect();
        assert_eq!(starts, vec![0, 448, 896]);
    }

    #[test]
    fn empty_document_is_flagged() {
        let e = HashEmbedder::new(8, ModalityKind::ClinicalText);
        assert!(matches!(
            process_document_text("D", " \n\t ", &e, &TextConfig::default(), None),
            Err(PipelineError::EmptyDocument(_))
        ));
    }

    #[test]
    fn loads_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, [0xff, 0xfe, 0x41]).unwrap();
        assert!(matches!(load_document(&bad), Err(PipelineError::Decode(_))));
        let row = dir.path().join("row.json");
        std::fs::write(&row, r#"{"stage": "IIA", "age": 61}"#).unwrap();
        assert_eq!(load_document(&row).unwrap(), "age: 61\nstage: IIA\n");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,64}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn chunks_cover_with_fixed_stride(n in 1usize..3000, size in 1usize..600, ov in 0usize..600) {
            prop_assume!(ov < size);
            let r = chunk_ranges(n, size, ov).unwrap();
            let starts: Vec<_> = r.iter().map(|c| c.0).collect();
            prop_assert_eq!(&starts, &reference_starts(n, size, ov));
            let mut covered = vec![false; n];
            for (i, &(s, e)) in r.iter().enumerate() {
                prop_assert_eq!(s, i * (size - ov));
                prop_assert!(s < e && e - s <= size);
                covered[s..e].iter_mut().for_each(|c| *c = true);
            }
            prop_assert!(covered.iter().all(|&c| c));
            prop_assert_eq!(r.last().unwrap().1, n);
        }
    }
}
