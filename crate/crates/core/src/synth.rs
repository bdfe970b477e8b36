//! Seeded synthetic corpora: notes, tile-patterned slides and CT-like volumes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ModalityKind, PatientRecord, RawAsset, TCGA_PROJECT_COUNTS};
use crate::rng::SplitMix64;
use crate::text::{chunk_ranges, normalize_text, tokenize, TextConfig};
use crate::volume::{write_volume, VolumeHeader};

pub const CORPUS_FILE: &str = "corpus.json";
pub const REPORT_FILE: &str = "synth-report.json";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image encoding failed for {path}: {detail}")]
    Encode { path: PathBuf, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How patients are spread over projects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SynthProfile {
    /// Patient `i` joins project `i % n_projects`; projects are `PROJ-00`, `PROJ-01`, ...
    #[default]
    Even,
    /// The 33 TCGA projects with sizes proportional to their cohort counts.
    Tcga,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Ignored by the TCGA profile, which always has 33 projects.
    pub n_projects: usize,
    /// Assets of each enabled modality per patient.
    pub assets_per_patient: usize,
    pub seed: u64,
    pub profile: SynthProfile,
    pub modalities: Vec<ModalityKind>,
    /// Edge length of one slide tile in pixels.
    pub tile_px: u32,
    /// In-plane size of each volume slice.
    pub volume_px: usize,
    pub note_tokens: (usize, usize),
    /// Chunking assumed when counting expected text fragments.
    pub text: TextConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 60,
            n_projects: 3,
            assets_per_patient: 1,
            seed: 1,
            profile: SynthProfile::Even,
            modalities: ModalityKind::ALL.to_vec(),
            tile_px: 512,
            volume_px: 32,
            note_tokens: (40, 1200),
            text: TextConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub config: SynthConfig,
    pub patients: usize,
    pub per_project: BTreeMap<String, usize>,
    /// Assets per modality, keyed by modality name.
    pub assets: BTreeMap<String, usize>,
    /// Fragment rows each modality should yield with matching embed settings
    /// (tile size = `tile_px`, tau 0.10, the recorded text chunking).
    pub expected_fragments: BTreeMap<String, usize>,
}

/// Largest-remainder apportionment of `n` over `weights`, at least `min`
/// per class.
pub fn apportion(n: usize, weights: &[usize], min: usize) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    assert!(total > 0 && n >= min * weights.len());
    let mut counts: Vec<usize> = weights.iter().map(|&w| (n * w / total).max(min)).collect();
    let mut assigned: usize = counts.iter().sum();
    let mut by_remainder: Vec<usize> = (0..weights.len()).collect();
    by_remainder.sort_by_key(|&i| (std::cmp::Reverse((n * weights[i]) % total), i));
    let mut k = 0;
    while assigned < n {
        counts[by_remainder[k % weights.len()]] += 1;
        assigned += 1;
        k += 1;
    }
    while assigned > n {
        // Trim the largest classes first.
        let i = (0..counts.len())
            .filter(|&i| counts[i] > min)
            .max_by_key(|&i| (counts[i], std::cmp::Reverse(i)))
            .expect("n >= min * classes");
        counts[i] -= 1;
        assigned -= 1;
    }
    counts
}

fn project_names_and_sizes(config: &SynthConfig) -> Result<Vec<(String, usize)>, SynthError> {
    match config.profile {
        SynthProfile::Even => {
            if config.n_projects < 2 {
                return Err(SynthError::InvalidArgument("need at least 2 projects".into()));
            }
            if config.n_patients < config.n_projects {
                return Err(SynthError::InvalidArgument("need at least one patient per project".into()));
            }
            Ok((0..config.n_projects)
                .map(|p| {
                    let size = config.n_patients / config.n_projects
                        + usize::from(p < config.n_patients % config.n_projects);
                    (format!("PROJ-{p:02}"), size)
                })
                .collect())
        }
        SynthProfile::Tcga => {
            let min = 2;
            if config.n_patients < min * TCGA_PROJECT_COUNTS.len() {
                return Err(SynthError::InvalidArgument(format!(
                    "tcga profile needs at least {} patients",
                    min * TCGA_PROJECT_COUNTS.len()
                )));
            }
            let weights: Vec<usize> = TCGA_PROJECT_COUNTS.iter().map(|&(_, c)| c).collect();
            let counts = apportion(config.n_patients, &weights, min);
            Ok(TCGA_PROJECT_COUNTS
                .iter()
                .zip(counts)
                .map(|(&(name, _), c)| (name.to_string(), c))
                .collect())
        }
    }
}

const SHARED_WORDS: &[&str] = &[
    "patient", "presents", "with", "history", "of", "and", "the", "mass", "noted", "on", "imaging", "biopsy",
    "shows", "tumor", "margin", "lymph", "node", "no", "evidence", "follow-up", "recommended", "stage",
    "grade", "pathology", "report", "clinical", "impression", "specimen", "received", "in", "formalin",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "to", "va", "zi", "pe", "do", "sa", "fi", "gu", "ho", "ja", "be",
];

fn project_vocabulary(project_index: usize) -> Vec<String> {
    let mut rng = SplitMix64::new(0x766f_6361_6200 ^ project_index as u64);
    (0..24)
        .map(|_| {
            let n = 2 + rng.next_below(3) as usize;
            (0..n)
                .map(|_| SYLLABLES[rng.next_below(SYLLABLES.len() as u64) as usize])
                .collect::<String>()
                + "oma"
        })
        .collect()
}

fn synth_note(rng: &mut SplitMix64, vocab: &[String], attributes: &BTreeMap<String, String>, tokens: (usize, usize)) -> String {
    let (lo, hi) = tokens;
    let n = lo + rng.next_below((hi - lo + 1) as u64) as usize;
    let mut out = String::new();
    for i in 0..n {
        let word: &str = if rng.next_below(3) == 0 {
            &vocab[rng.next_below(vocab.len() as u64) as usize]
        } else {
            SHARED_WORDS[rng.next_below(SHARED_WORDS.len() as u64) as usize]
        };
        out.push_str(word);
        out.push(if i % 13 == 12 { '\n' } else { ' ' });
    }
    out.push_str("\n\n");
    out.push_str(&crate::text::render_tabular(attributes));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TileKind {
    Full,
    /// Left half tissue.
    Half,
    /// One pixel in 25 is tissue (4%, below the 10% threshold).
    Sparse,
    Blank,
}

impl TileKind {
    fn kept(self) -> bool {
        matches!(self, TileKind::Full | TileKind::Half)
    }

    fn is_tissue_px(self, x: u32, y: u32, size: u32) -> bool {
        match self {
            TileKind::Full => true,
            TileKind::Half => x < size / 2,
            TileKind::Sparse => (y * size + x) % 25 == 0,
            TileKind::Blank => false,
        }
    }
}

/// Saturation at least 40/240 and value at most 240/255.
fn tissue_px(rng: &mut SplitMix64) -> Rgb<u8> {
    Rgb([
        200 + rng.next_below(41) as u8,
        100 + rng.next_below(61) as u8,
        150 + rng.next_below(51) as u8,
    ])
}

/// Near-white with saturation below 4/245.
fn background_px(rng: &mut SplitMix64) -> Rgb<u8> {
    let base = 245 + rng.next_below(7) as u8;
    Rgb([base, base + rng.next_below(4) as u8, base + rng.next_below(4) as u8])
}

/// Synthetic slide and the number of tiles a tau = 0.10 filter keeps.
/// At least one tile is always tissue.
pub fn synth_slide(rng: &mut SplitMix64, tile_px: u32) -> (RgbImage, usize) {
    let cols = 2 + rng.next_below(3) as u32;
    let rows = 1 + rng.next_below(3) as u32;
    let margin_x = rng.next_below(u64::from(tile_px / 2).max(1)) as u32;
    let margin_y = rng.next_below(u64::from(tile_px / 2).max(1)) as u32;
    let mut kinds: Vec<TileKind> = (0..cols * rows)
        .map(|_| match rng.next_below(4) {
            0 => TileKind::Full,
            1 => TileKind::Half,
            2 => TileKind::Sparse,
            _ => TileKind::Blank,
        })
        .collect();
    if !kinds.iter().any(|k| k.kept()) {
        let i = rng.next_below(kinds.len() as u64) as usize;
        kinds[i] = TileKind::Full;
    }
    let width = cols * tile_px + margin_x;
    let height = rows * tile_px + margin_y;
    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let (tx, ty) = (x / tile_px, y / tile_px);
            // The dropped edge strips carry tissue to prove they are ignored.
            let tissue = if tx >= cols || ty >= rows {
                true
            } else {
                kinds[(ty * cols + tx) as usize].is_tissue_px(x % tile_px, y % tile_px, tile_px)
            };
            let px = if tissue { tissue_px(rng) } else { background_px(rng) };
            img.put_pixel(x, y, px);
        }
    }
    (img, kinds.iter().filter(|k| k.kept()).count())
}

/// Soft-tissue cylinder in air with a denser core; values in HU.
pub fn synth_volume(rng: &mut SplitMix64, px: usize) -> (VolumeHeader, Vec<f32>) {
    let depth = 4 + rng.next_below(5) as usize;
    let header = VolumeHeader {
        depth,
        height: px,
        width: px,
        spacing: [2.5, 0.7, 0.7],
        intensity_units: "HU".into(),
    };
    let c = (px as f64 - 1.0) / 2.0;
    let r = px as f64 * (0.3 + 0.15 * rng.next_f64());
    let mut voxels = Vec::with_capacity(header.voxel_count());
    for z in 0..depth {
        let core = r * (0.2 + 0.3 * (z as f64 / depth as f64));
        for y in 0..px {
            for x in 0..px {
                let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                let base = if d < core {
                    300.0
                } else if d < r {
                    40.0
                } else {
                    -1000.0
                };
                voxels.push((base + 20.0 * rng.next_gaussian()) as f32);
            }
        }
    }
    (header, voxels)
}

/// Writes `corpus.json`, the asset files and `synth-report.json` into `out_dir`.
pub fn synth_corpus(out_dir: &Path, config: &SynthConfig) -> Result<SynthReport, SynthError> {
    if config.assets_per_patient == 0 {
        return Err(SynthError::InvalidArgument("assets_per_patient must be >= 1".into()));
    }
    if config.tile_px == 0 || config.volume_px == 0 {
        return Err(SynthError::InvalidArgument("tile_px and volume_px must be >= 1".into()));
    }
    let (lo, hi) = config.note_tokens;
    if lo == 0 || lo > hi {
        return Err(SynthError::InvalidArgument("note_tokens must satisfy 1 <= lo <= hi".into()));
    }
    config
        .text
        .validate()
        .map_err(|e| SynthError::InvalidArgument(e.to_string()))?;
    let projects = project_names_and_sizes(config)?;

    let mut modalities = config.modalities.clone();
    modalities.sort();
    modalities.dedup();
    for m in &modalities {
        let sub = out_dir.join(subdir(*m));
        std::fs::create_dir_all(&sub).map_err(io_err(&sub))?;
    }

    let mut rng = SplitMix64::new(config.seed);
    let mut patients = Vec::with_capacity(config.n_patients);
    let mut project_of = Vec::with_capacity(config.n_patients);
    match config.profile {
        SynthProfile::Even => {
            for i in 0..config.n_patients {
                project_of.push(i % projects.len());
            }
        }
        SynthProfile::Tcga => {
            for (p, (_, size)) in projects.iter().enumerate() {
                project_of.extend(std::iter::repeat(p).take(*size));
            }
        }
    }
    for (i, &p) in project_of.iter().enumerate() {
        let mut attributes = BTreeMap::new();
        attributes.insert("age".to_string(), (25 + rng.next_below(60)).to_string());
        attributes.insert(
            "sex".to_string(),
            if rng.next_below(2) == 0 { "F" } else { "M" }.to_string(),
        );
        attributes.insert(
            "stage".to_string(),
            ["I", "II", "III", "IV"][rng.next_below(4) as usize].to_string(),
        );
        patients.push(PatientRecord {
            patient_id: format!("P{i:05}"),
            project_id: projects[p].0.clone(),
            attributes,
        });
    }

    let vocabularies: Vec<Vec<String>> = (0..projects.len()).map(project_vocabulary).collect();
    let mut assets = Vec::new();
    let mut expected: BTreeMap<String, usize> = modalities.iter().map(|m| (m.as_str().to_string(), 0)).collect();
    for (patient, &p) in patients.iter().zip(&project_of) {
        for k in 0..config.assets_per_patient {
            for &m in &modalities {
                let tag = match m {
                    ModalityKind::ClinicalText => 'N',
                    ModalityKind::PathologyImage => 'S',
                    ModalityKind::RadiologyVolume => 'V',
                };
                let asset_id = format!("{}-{tag}{k}", patient.patient_id);
                let mut extra = BTreeMap::new();
                let (rel, fragments) = match m {
                    ModalityKind::ClinicalText => {
                        let rel = format!("{}/{asset_id}.txt", subdir(m));
                        let note = synth_note(&mut rng, &vocabularies[p], &patient.attributes, config.note_tokens);
                        let n_tokens = tokenize(&normalize_text(&note)).len();
                        let chunks = chunk_ranges(n_tokens, config.text.chunk_size, config.text.overlap)
                            .expect("validated chunking")
                            .len();
                        write_file(&out_dir.join(&rel), note.as_bytes())?;
                        (rel, chunks)
                    }
                    ModalityKind::PathologyImage => {
                        let rel = format!("{}/{asset_id}.png", subdir(m));
                        let (img, kept) = synth_slide(&mut rng, config.tile_px);
                        let path = out_dir.join(&rel);
                        img.save_with_format(&path, image::ImageFormat::Png)
                            .map_err(|e| SynthError::Encode {
                                path: path.clone(),
                                detail: e.to_string(),
                            })?;
                        (rel, kept)
                    }
                    ModalityKind::RadiologyVolume => {
                        let rel = format!("{}/{asset_id}.raw", subdir(m));
                        let (header, voxels) = synth_volume(&mut rng, config.volume_px);
                        if rng.next_below(4) == 0 {
                            extra.insert("window_lo".to_string(), "-160".to_string());
                            extra.insert("window_hi".to_string(), "240".to_string());
                        }
                        let path = out_dir.join(&rel);
                        write_volume(&path, &header, &voxels).map_err(io_err(&path))?;
                        (rel, header.depth)
                    }
                };
                *expected.get_mut(m.as_str()).expect("modality key") += fragments;
                assets.push(RawAsset {
                    asset_id,
                    patient_id: patient.patient_id.clone(),
                    kind: m,
                    uri: rel.into(),
                    extra,
                });
            }
        }
    }

    let corpus = Corpus::new(patients, assets, out_dir).expect("generated corpus is valid");
    write_file(&out_dir.join(CORPUS_FILE), corpus.to_json_string().as_bytes())?;
    let report = SynthReport {
        config: config.clone(),
        patients: corpus.patients().len(),
        per_project: projects.into_iter().collect(),
        assets: modalities
            .iter()
            .map(|m| (m.as_str().to_string(), corpus.assets_of(*m).count()))
            .collect(),
        expected_fragments: expected,
    };
    write_file(
        &out_dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&report).expect("report serializes").as_bytes(),
    )?;
    Ok(report)
}

fn subdir(kind: ModalityKind) -> &'static str {
    match kind {
        ModalityKind::ClinicalText => "notes",
        ModalityKind::PathologyImage => "slides",
        ModalityKind::RadiologyVolume => "volumes",
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}
