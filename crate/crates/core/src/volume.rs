//! CT volume loading, axial slicing, intensity windowing and scan pooling.
//!
//! A volume is a raw little-endian `f32` voxel file (`z`-major, then `y`,
//! then `x`) with a JSON header sidecar at `<file>.json`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{Embedder, Fragment};
use crate::pipeline::PipelineError;
use crate::vector::{pool, EmbeddingVector};

pub const DEFAULT_WINDOW: (f64, f64) = (-1000.0, 400.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Voxel spacing (z, y, x) in millimetres.
    pub spacing: [f64; 3],
    pub intensity_units: String,
}

impl VolumeHeader {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(PipelineError::Decode("volume dimensions must be positive".into()));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(PipelineError::Decode("voxel spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn voxel_count(&self) -> usize {
        self.depth * self.slice_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceSpec {
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeConfig {
    pub window_lo: f64,
    pub window_hi: f64,
    /// Optional nearest-neighbour resize of each slice to `n x n`.
    pub resize: Option<usize>,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            window_lo: DEFAULT_WINDOW.0,
            window_hi: DEFAULT_WINDOW.1,
            resize: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanEmbedding {
    pub asset_id: String,
    pub slice_vectors: Vec<(SliceSpec, EmbeddingVector)>,
    pub pooled: EmbeddingVector,
}

/// Maps `v` to `round_half_up(255 * clamp((v - lo) / (hi - lo), 0, 1))`.
/// NaN voxels map to 0.
pub fn window_slice(values: &[f32], lo: f64, hi: f64) -> Result<Vec<u8>, PipelineError> {
    if !(lo < hi) {
        return Err(PipelineError::InvalidWindow { lo, hi });
    }
    let span = hi - lo;
    Ok(values
        .iter()
        .map(|&v| {
            let t = ((f64::from(v) - lo) / span).clamp(0.0, 1.0);
            (255.0 * t + 0.5).floor() as u8
        })
        .collect())
}

/// Nearest-neighbour resample of a `width x height` raster to `size x size`.
pub fn resize_nearest(pixels: &[u8], width: usize, height: usize, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = y * height / size;
        for x in 0..size {
            let sx = x * width / size;
            out.push(pixels[sy * width + sx]);
        }
    }
    out
}

pub fn sidecar_path(volume: &Path) -> PathBuf {
    let mut s = volume.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Reads header and voxels; the voxel file must hold exactly
/// `depth * height * width` f32 values.
pub fn load_volume(path: &Path) -> Result<(VolumeHeader, Vec<f32>), PipelineError> {
    let header_path = sidecar_path(path);
    let header_text =
        std::fs::read_to_string(&header_path).map_err(|e| PipelineError::io(&header_path, e))?;
    let header: VolumeHeader = serde_json::from_str(&header_text)
        .map_err(|e| PipelineError::Decode(format!("{}: {e}", header_path.display())))?;
    header.validate()?;
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let expected = header.voxel_count() * 4;
    if bytes.len() != expected {
        return Err(PipelineError::ShapeMismatch {
            expected,
            got: bytes.len(),
        });
    }
    let voxels = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header, voxels))
}

pub fn write_volume(path: &Path, header: &VolumeHeader, voxels: &[f32]) -> std::io::Result<()> {
    assert_eq!(voxels.len(), header.voxel_count());
    let mut bytes = Vec::with_capacity(voxels.len() * 4);
    for v in voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(header).expect("header serializes"),
    )
}

/// Windowed (and optionally resized) raster of one axial slice.
pub fn slice_raster(
    header: &VolumeHeader,
    voxels: &[f32],
    index: usize,
    config: &VolumeConfig,
) -> Result<Vec<u8>, PipelineError> {
    let n = header.slice_len();
    let windowed = window_slice(&voxels[index * n..(index + 1) * n], config.window_lo, config.window_hi)?;
    Ok(match config.resize {
        Some(size) => resize_nearest(&windowed, header.width, header.height, size),
        None => windowed,
    })
}

/// Sorts slice vectors by index and pools them.
pub fn assemble_scan(
    asset_id: &str,
    mut slice_vectors: Vec<(SliceSpec, EmbeddingVector)>,
) -> Option<ScanEmbedding> {
    slice_vectors.sort_by_key(|(s, _)| *s);
    let pooled = pool(slice_vectors.iter().map(|(_, v)| v))?;
    Some(ScanEmbedding {
        asset_id: asset_id.to_string(),
        slice_vectors,
        pooled,
    })
}

pub fn process_volume_data(
    asset_id: &str,
    header: &VolumeHeader,
    voxels: &[f32],
    embedder: &dyn Embedder,
    config: &VolumeConfig,
    label_hint: Option<&str>,
) -> Result<ScanEmbedding, PipelineError> {
    header.validate()?;
    if voxels.len() != header.voxel_count() {
        return Err(PipelineError::ShapeMismatch {
            expected: header.voxel_count() * 4,
            got: voxels.len() * 4,
        });
    }
    if let Some(0) = config.resize {
        return Err(PipelineError::InvalidConfig("resize target must be positive".into()));
    }
    let rasters: Vec<Vec<u8>> = (0..header.depth)
        .into_par_iter()
        .map(|i| slice_raster(header, voxels, i, config))
        .collect::<Result<_, _>>()?;
    let ids: Vec<String> = (0..header.depth).map(|i| format!("{asset_id}#s{i:03}")).collect();
    let fragments: Vec<Fragment<'_>> = rasters
        .iter()
        .zip(&ids)
        .map(|(r, id)| Fragment::new(id, r).with_hint(label_hint))
        .collect();
    let vectors = embedder.embed_batch(&fragments)?;
    let slices = vectors
        .into_iter()
        .enumerate()
        .map(|(index, v)| (SliceSpec { index }, v))
        .collect();
    Ok(assemble_scan(asset_id, slices).expect("depth >= 1"))
}

pub fn process_volume(
    asset_id: &str,
    path: &Path,
    embedder: &dyn Embedder,
    config: &VolumeConfig,
    label_hint: Option<&str>,
) -> Result<ScanEmbedding, PipelineError> {
    let (header, voxels) = load_volume(path)?;
    process_volume_data(asset_id, &header, &voxels, embedder, config, label_hint)
}
