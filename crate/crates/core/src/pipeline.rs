//! Corpus-level driver: runs one modality pipeline over every matching asset
//! and writes fragment and pooled stores.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ModalityKind, RawAsset};
use crate::embedder::{EmbedError, Embedder};
use crate::pathology::{process_slide, PathologyConfig};
use crate::store::{CohortManifest, EmbeddingRecord, StoreError, StoreHeader, StoreWriter};
use crate::text::{process_document, TextConfig};
use crate::vector::EmbeddingVector;
use crate::volume::{process_volume, VolumeConfig};

pub const FRAGMENTS_DIR: &str = "fragments";
pub const POOLED_DIR: &str = "pooled";
pub const FLAGGED_FILE: &str = "flagged.json";

/// Assets processed concurrently before their rows are flushed in order.
const WAVE: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("no tile of {0} passes the tissue threshold")]
    NoTissue(String),
    #[error("document {0} has no tokens after normalization")]
    EmptyDocument(String),
    #[error("volume data is {got} bytes, header implies {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid window {lo}:{hi} (need lo < hi)")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("embedder modality is {embedder:?}, pipeline needs {pipeline:?}")]
    WrongModality {
        embedder: ModalityKind,
        pipeline: ModalityKind,
    },
    #[error("asset {asset_id}: {source}")]
    Asset {
        asset_id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for the per-asset rejections that are flagged instead of aborting.
    pub fn is_flag(&self) -> bool {
        matches!(self, PipelineError::NoTissue(_) | PipelineError::EmptyDocument(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "snake_case")]
pub enum ModalityConfig {
    ClinicalText(TextConfig),
    PathologyImage(PathologyConfig),
    RadiologyVolume(VolumeConfig),
}

impl ModalityConfig {
    pub fn kind(&self) -> ModalityKind {
        match self {
            ModalityConfig::ClinicalText(_) => ModalityKind::ClinicalText,
            ModalityConfig::PathologyImage(_) => ModalityKind::PathologyImage,
            ModalityConfig::RadiologyVolume(_) => ModalityKind::RadiologyVolume,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedAsset {
    pub asset_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedSummary {
    pub fragments: CohortManifest,
    pub pooled: CohortManifest,
    pub flagged: Vec<FlaggedAsset>,
}

/// Fragment vectors (in pipeline order) and the pooled vector of one asset.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetEmbedding {
    pub asset_id: String,
    pub fragments: Vec<(String, EmbeddingVector)>,
    pub pooled: EmbeddingVector,
}

fn parse_extra_f64(asset: &RawAsset, key: &str) -> Result<Option<f64>, PipelineError> {
    asset
        .extra
        .get(key)
        .map(|v| {
            v.trim().parse::<f64>().map_err(|_| {
                PipelineError::InvalidConfig(format!("asset {}: {key} = {v:?} is not a number", asset.asset_id))
            })
        })
        .transpose()
}

/// Runs the configured pipeline on a single asset.
pub fn embed_asset(
    corpus: &Corpus,
    asset: &RawAsset,
    config: &ModalityConfig,
    embedder: &dyn Embedder,
    label_hint: Option<&str>,
) -> Result<AssetEmbedding, PipelineError> {
    let path = corpus.resolve(asset);
    let id = asset.asset_id.as_str();
    let tagged = |tag: char, index: usize| format!("{id}#{tag}{index:03}");
    Ok(match config {
        ModalityConfig::ClinicalText(cfg) => {
            let doc = process_document(id, &path, embedder, cfg, label_hint)?;
            AssetEmbedding {
                asset_id: doc.asset_id,
                fragments: doc
                    .chunk_vectors
                    .into_iter()
                    .enumerate()
                    .map(|(i, (_, v))| (tagged('c', i), v))
                    .collect(),
                pooled: doc.pooled,
            }
        }
        ModalityConfig::PathologyImage(cfg) => {
            let slide = process_slide(id, &path, embedder, cfg, label_hint)?;
            AssetEmbedding {
                asset_id: slide.asset_id,
                fragments: slide
                    .tile_vectors
                    .into_iter()
                    .map(|(t, v)| (tagged('t', t.index as usize), v))
                    .collect(),
                pooled: slide.pooled,
            }
        }
        ModalityConfig::RadiologyVolume(cfg) => {
            let mut cfg = *cfg;
            if let Some(lo) = parse_extra_f64(asset, "window_lo")? {
                cfg.window_lo = lo;
            }
            if let Some(hi) = parse_extra_f64(asset, "window_hi")? {
                cfg.window_hi = hi;
            }
            let scan = process_volume(id, &path, embedder, &cfg, label_hint)?;
            AssetEmbedding {
                asset_id: scan.asset_id,
                fragments: scan
                    .slice_vectors
                    .into_iter()
                    .map(|(s, v)| (tagged('s', s.index), v))
                    .collect(),
                pooled: scan.pooled,
            }
        }
    })
}

/// Embeds every asset of the configured modality and writes
/// `<out>/fragments`, `<out>/pooled` and `<out>/flagged.json`.
///
/// Assets are processed in parallel; rows are written in corpus order, so
/// output bytes do not depend on the thread count. Records are labelled with
/// the patient's project, which is also passed as the embedder's label hint.
/// Assets with no tissue or no text are flagged; any other failure aborts.
pub fn embed_corpus(
    corpus: &Corpus,
    config: &ModalityConfig,
    embedder: &dyn Embedder,
    out_dir: &Path,
    shard_rows: usize,
) -> Result<EmbedSummary, PipelineError> {
    let kind = config.kind();
    let info = embedder.info().clone();
    if info.modality != kind {
        return Err(PipelineError::WrongModality {
            embedder: info.modality,
            pipeline: kind,
        });
    }
    if let ModalityConfig::ClinicalText(cfg) = config {
        cfg.validate()?;
    }
    let header = StoreHeader {
        modality: kind,
        model_id: info.model_id.clone(),
        dim: info.dim,
    };
    let mut fragments = StoreWriter::create(out_dir.join(FRAGMENTS_DIR), header.clone(), shard_rows)?;
    let mut pooled = StoreWriter::create(out_dir.join(POOLED_DIR), header, shard_rows)?;
    let mut flagged = Vec::new();

    let assets: Vec<&RawAsset> = corpus.assets_of(kind).collect();
    for wave in assets.chunks(WAVE) {
        let results: Vec<Result<AssetEmbedding, PipelineError>> = wave
            .par_iter()
            .map(|asset| {
                let project = corpus.patient(&asset.patient_id).map(|p| p.project_id.as_str());
                embed_asset(corpus, asset, config, embedder, project)
            })
            .collect();
        for (asset, result) in wave.iter().zip(results) {
            let embedded = match result {
                Ok(e) => e,
                Err(e) if e.is_flag() => {
                    log::warn!("flagged {}: {e}", asset.asset_id);
                    flagged.push(FlaggedAsset {
                        asset_id: asset.asset_id.clone(),
                        reason: e.to_string(),
                    });
                    continue;
                }
                Err(e) => {
                    return Err(PipelineError::Asset {
                        asset_id: asset.asset_id.clone(),
                        source: Box::new(e),
                    })
                }
            };
            let patient = corpus.patient(&asset.patient_id).expect("validated corpus");
            let record = |record_id: String, vector: EmbeddingVector| EmbeddingRecord {
                record_id,
                patient_id: patient.patient_id.clone(),
                project_id: patient.project_id.clone(),
                modality: kind,
                model_id: info.model_id.clone(),
                vector,
                label: Some(patient.project_id.clone()),
            };
            for (fid, v) in embedded.fragments {
                fragments.push(&record(fid, v))?;
            }
            pooled.push(&record(embedded.asset_id, embedded.pooled))?;
        }
    }

    let flagged_path = out_dir.join(FLAGGED_FILE);
    std::fs::write(
        &flagged_path,
        serde_json::to_string_pretty(&flagged).expect("flagged list serializes"),
    )
    .map_err(|e| PipelineError::io(&flagged_path, e))?;
    Ok(EmbedSummary {
        fragments: fragments.finish()?,
        pooled: pooled.finish()?,
        flagged,
    })
}
