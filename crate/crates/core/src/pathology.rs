//! Whole-slide raster tiling, tissue detection and slide-level pooling.

use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{Embedder, Fragment};
use crate::pipeline::PipelineError;
use crate::vector::{pool, EmbeddingVector};

pub const DEFAULT_TILE_SIZE: u32 = 512;
pub const DEFAULT_TAU: f64 = 0.10;

/// One grid tile. `index` is its row-major position in the full grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub index: u32,
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub tissue_fraction: f64,
}

/// A pixel is tissue when its HSV saturation exceeds `saturation_min` and
/// its value stays below `value_max` (white glass and black pen both fail).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueRule {
    pub saturation_min: f64,
    pub value_max: f64,
}

impl Default for TissueRule {
    fn default() -> Self {
        Self {
            saturation_min: 0.08,
            value_max: 0.98,
        }
    }
}

impl TissueRule {
    #[inline]
    pub fn is_tissue(&self, [r, g, b]: [u8; 3]) -> bool {
        let max = r.max(g).max(b);
        if max == 0 {
            return false;
        }
        let min = r.min(g).min(b);
        let saturation = f64::from(max - min) / f64::from(max);
        let value = f64::from(max) / 255.0;
        saturation > self.saturation_min && value < self.value_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathologyConfig {
    pub tile_size: u32,
    /// Minimum tissue fraction for a tile to be embedded.
    pub tau: f64,
    pub rule: TissueRule,
}

impl Default for PathologyConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            tau: DEFAULT_TAU,
            rule: TissueRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideEmbedding {
    pub asset_id: String,
    pub tile_vectors: Vec<(TileSpec, EmbeddingVector)>,
    pub pooled: EmbeddingVector,
}

/// Non-overlapping `tile_size` tiles in row-major order; partial edge strips
/// are dropped.
pub fn tile_grid(width: u32, height: u32, tile_size: u32) -> Vec<TileSpec> {
    assert!(tile_size >= 1, "tile_size must be positive");
    let cols = width / tile_size;
    let rows = height / tile_size;
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| TileSpec {
            index: r * cols + c,
            x: c * tile_size,
            y: r * tile_size,
            size: tile_size,
            tissue_fraction: 0.0,
        })
        .collect()
}

/// Fraction of tissue pixels in a packed RGB buffer.
pub fn tissue_fraction(rgb: &[u8], rule: &TissueRule) -> f64 {
    let n = rgb.len() / 3;
    if n == 0 {
        return 0.0;
    }
    let hits = rgb
        .chunks_exact(3)
        .filter(|p| rule.is_tissue([p[0], p[1], p[2]]))
        .count();
    hits as f64 / n as f64
}

/// Copies a tile's pixels as row-major packed RGB.
pub fn tile_pixels(image: &RgbImage, tile: &TileSpec) -> Vec<u8> {
    let width = image.width() as usize;
    let raw = image.as_raw();
    let size = tile.size as usize;
    let mut out = Vec::with_capacity(size * size * 3);
    for row in tile.y as usize..tile.y as usize + size {
        let start = (row * width + tile.x as usize) * 3;
        out.extend_from_slice(&raw[start..start + size * 3]);
    }
    out
}

/// Decodes a PNG or binary PPM raster to RGB8.
pub fn load_raster(path: &Path) -> Result<RgbImage, PipelineError> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| PipelineError::Decode(format!("{}: {e}", path.display())))?
        .with_guessed_format()
        .map_err(|e| PipelineError::Decode(format!("{}: {e}", path.display())))?;
    match reader.format() {
        Some(image::ImageFormat::Png) | Some(image::ImageFormat::Pnm) => {}
        other => {
            return Err(PipelineError::Decode(format!(
                "{}: unsupported raster format {other:?}",
                path.display()
            )))
        }
    }
    let img = reader
        .decode()
        .map_err(|e| PipelineError::Decode(format!("{}: {e}", path.display())))?;
    Ok(img.into_rgb8())
}

/// Grid tiles whose tissue fraction reaches `tau`, with their pixel payloads,
/// in grid order.
pub fn select_tiles(image: &RgbImage, config: &PathologyConfig) -> Vec<(TileSpec, Vec<u8>)> {
    tile_grid(image.width(), image.height(), config.tile_size)
        .into_par_iter()
        .filter_map(|mut tile| {
            let pixels = tile_pixels(image, &tile);
            tile.tissue_fraction = tissue_fraction(&pixels, &config.rule);
            (tile.tissue_fraction >= config.tau).then_some((tile, pixels))
        })
        .collect()
}

pub fn process_slide_image(
    asset_id: &str,
    image: &RgbImage,
    embedder: &dyn Embedder,
    config: &PathologyConfig,
    label_hint: Option<&str>,
) -> Result<SlideEmbedding, PipelineError> {
    let kept = select_tiles(image, config);
    if kept.is_empty() {
        return Err(PipelineError::NoTissue(asset_id.to_string()));
    }
    let ids: Vec<String> = kept
        .iter()
        .map(|(t, _)| format!("{asset_id}#t{:03}", t.index))
        .collect();
    let fragments: Vec<Fragment<'_>> = kept
        .iter()
        .zip(&ids)
        .map(|((_, px), id)| Fragment::new(id, px).with_hint(label_hint))
        .collect();
    let vectors = embedder.embed_batch(&fragments)?;
    let pooled = pool(&vectors).expect("non-empty");
    Ok(SlideEmbedding {
        asset_id: asset_id.to_string(),
        tile_vectors: kept.into_iter().map(|(t, _)| t).zip(vectors).collect(),
        pooled,
    })
}

pub fn process_slide(
    asset_id: &str,
    path: &Path,
    embedder: &dyn Embedder,
    config: &PathologyConfig,
    label_hint: Option<&str>,
) -> Result<SlideEmbedding, PipelineError> {
    let image = load_raster(path)?;
    process_slide_image(asset_id, &image, embedder, config, label_hint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ModalityKind;
    use crate::embedder::HashEmbedder;
    use crate::vector::mean_pool;
    use image::Rgb;
    use proptest::prelude::*;

    const PINK: [u8; 3] = [230, 150, 190];
    const WHITE: [u8; 3] = [255, 255, 255];

    fn reference_fraction(rgb: &[u8], s_min: f64, v_max: f64) -> f64 {
        let mut hits = 0;
        let mut total = 0;
        for p in rgb.chunks(3) {
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let mx = r.max(g).max(b);
            let mn = r.min(g).min(b);
            let s = if mx == 0.0 { 0.0 } else { (mx - mn) / mx };
            let v = mx / 255.0;
            if s > s_min && v < v_max {
                hits += 1;
            }
            total += 1;
        }
        hits as f64 / total as f64
    }

    #[test]
    fn grid_examples() {
        let tiles = tile_grid(1536, 1024, 512);
        assert_eq!(tiles.len(), 6);
        let xy: Vec<_> = tiles.iter().map(|t| (t.x, t.y)).collect();
        assert_eq!(
            xy,
            vec![(0, 0), (512, 0), (1024, 0), (0, 512), (512, 512), (1024, 512)]
        );
        assert!(tile_grid(511, 511, 512).is_empty());
        let one = tile_grid(512, 512, 512);
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].x, one[0].y), (0, 0));
    }

    #[test]
    fn fraction_examples() {
        let rule = TissueRule::default();
        let white = WHITE.repeat(16 * 16);
        assert_eq!(tissue_fraction(&white, &rule), 0.0);
        let black = [0u8; 3].repeat(16 * 16);
        assert_eq!(tissue_fraction(&black, &rule), 0.0);

        let mut half = Vec::new();
        for _row in 0..16 {
            for col in 0..16 {
                half.extend_from_slice(if col < 8 { &PINK } else { &WHITE });
            }
        }
        let expected = reference_fraction(&half, 0.08, 0.98);
        assert_eq!(expected, 0.5);
        assert_eq!(tissue_fraction(&half, &rule), expected);
    }

    #[test]
    fn threshold_edges() {
        let rule = TissueRule::default();
        // value exactly 250/255 = 0.980.. is not below 0.98
        assert!(!rule.is_tissue([250, 100, 100]));
        assert!(rule.is_tissue([249, 100, 100]));
        // grey has zero saturation
        assert!(!rule.is_tissue([128, 128, 128]));
    }

    fn slide_with_mask(cols: u32, rows: u32, tile: u32, mask: &[bool]) -> RgbImage {
        RgbImage::from_fn(cols * tile + tile / 3, rows * tile + 7, |x, y| {
            let (c, r) = (x / tile, y / tile);
            let tissue = c < cols && r < rows && mask[(r * cols + c) as usize];
            Rgb(if tissue { PINK } else { WHITE })
        })
    }

    #[test]
    fn keeps_exactly_masked_tiles() {
        let mask = [true, false, true, true, false, true];
        let img = slide_with_mask(3, 2, 32, &mask);
        let cfg = PathologyConfig {
            tile_size: 32,
            ..Default::default()
        };
        let e = HashEmbedder::new(16, ModalityKind::PathologyImage);
        let slide = process_slide_image("S1", &img, &e, &cfg, None).unwrap();
        let kept: Vec<u32> = slide.tile_vectors.iter().map(|(t, _)| t.index).collect();
        assert_eq!(kept, vec![0, 2, 3, 5]);
        assert!((slide.pooled.norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn identical_tiles_pool_to_the_tile_vector() {
        let img = slide_with_mask(2, 2, 16, &[true; 4]);
        let cfg = PathologyConfig {
            tile_size: 16,
            ..Default::default()
        };
        let e = HashEmbedder::new(32, ModalityKind::PathologyImage);
        let slide = process_slide_image("S", &img, &e, &cfg, None).unwrap();
        let tile_vec = &slide.tile_vectors[0].1;
        for (a, b) in slide.pooled.as_slice().iter().zip(tile_vec.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blank_slide_is_no_tissue() {
        let img = slide_with_mask(2, 2, 16, &[false; 4]);
        let cfg = PathologyConfig {
            tile_size: 16,
            ..Default::default()
        };
        let e = HashEmbedder::new(8, ModalityKind::PathologyImage);
        assert!(matches!(
            process_slide_image("S", &img, &e, &cfg, None),
            Err(PipelineError::NoTissue(_))
        ));
    }

    #[test]
    fn removing_rejected_tiles_keeps_pooled() {
        // A sparse tile (below tau) present or absent yields the same slide vector.
        let cfg = PathologyConfig {
            tile_size: 16,
            ..Default::default()
        };
        let e = HashEmbedder::new(16, ModalityKind::PathologyImage);
        let with_sparse = RgbImage::from_fn(48, 16, |x, y| {
            Rgb(match x / 16 {
                0 | 1 => PINK,
                _ if x % 16 == 0 && y < 4 => PINK,
                _ => WHITE,
            })
        });
        let without = RgbImage::from_fn(48, 16, |x, _| Rgb(if x < 32 { PINK } else { WHITE }));
        let a = process_slide_image("S", &with_sparse, &e, &cfg, None).unwrap();
        let b = process_slide_image("S", &without, &e, &cfg, None).unwrap();
        assert!(a.pooled.bit_eq(&b.pooled));
    }

    #[test]
    fn png_and_ppm_decode() {
        let dir = tempfile::tempdir().unwrap();
        let img = slide_with_mask(1, 1, 8, &[true]);
        let png = dir.path().join("s.png");
        let ppm = dir.path().join("s.ppm");
        img.save(&png).unwrap();
        img.save(&ppm).unwrap();
        assert_eq!(load_raster(&png).unwrap(), img);
        assert_eq!(load_raster(&ppm).unwrap(), img);
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not an image").unwrap();
        assert!(matches!(load_raster(&bad), Err(PipelineError::Decode(_))));
    }

    proptest! {
        #[test]
        fn grid_is_disjoint_and_covers(w in 1u32..600, h in 1u32..600, t in 1u32..200) {
            let tiles = tile_grid(w, h, t);
            prop_assert_eq!(tiles.len() as u32, (w / t) * (h / t));
            let mut seen = vec![false; (w * h) as usize];
            for tile in &tiles {
                prop_assert!(tile.x + tile.size <= w && tile.y + tile.size <= h);
                for y in tile.y..tile.y + t {
                    for x in tile.x..tile.x + t {
                        let i = (y * w + x) as usize;
                        prop_assert!(!seen[i]);
                        seen[i] = true;
                    }
                }
            }
            let covered = seen.iter().filter(|&&s| s).count() as u64;
            prop_assert_eq!(covered, u64::from(w / t) * u64::from(h / t) * u64::from(t) * u64::from(t));
        }

        #[test]
        fn fraction_is_permutation_invariant(
            pixels in proptest::collection::vec(any::<[u8; 3]>(), 1..200),
            seed in any::<u64>(),
        ) {
            let rule = TissueRule::default();
            let flat: Vec<u8> = pixels.iter().flatten().copied().collect();
            let mut shuffled = pixels.clone();
            crate::rng::shuffle(&mut shuffled, &mut crate::rng::SplitMix64::new(seed));
            let flat2: Vec<u8> = shuffled.iter().flatten().copied().collect();
            prop_assert_eq!(tissue_fraction(&flat, &rule), tissue_fraction(&flat2, &rule));
            prop_assert_eq!(tissue_fraction(&flat, &rule), reference_fraction(&flat, 0.08, 0.98));
        }

        #[test]
        fn pooled_mean_ignores_tile_order(seed in any::<u64>(), n in 1usize..12) {
            let e = HashEmbedder::new(24, ModalityKind::PathologyImage);
            let vecs: Vec<_> = (0..n)
                .map(|i| e.embed(&Fragment::new("t", format!("{seed}-{i}").as_bytes())).unwrap())
                .collect();
            let mut perm = vecs.clone();
            crate::rng::shuffle(&mut perm, &mut crate::rng::SplitMix64::new(seed));
            let a = mean_pool(&vecs).unwrap();
            let b = mean_pool(&perm).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
