//! Patients, assets and the JSON corpus description they are ingested from.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read corpus file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("asset references unknown patient {0:?}")]
    DanglingReference(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("invalid record: {0}")]
    Invalid(String),
}

/// The three modalities this pipeline understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    ClinicalText,
    PathologyImage,
    RadiologyVolume,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 3] = [
        ModalityKind::ClinicalText,
        ModalityKind::PathologyImage,
        ModalityKind::RadiologyVolume,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityKind::ClinicalText => "clinical_text",
            ModalityKind::PathologyImage => "pathology_image",
            ModalityKind::RadiologyVolume => "radiology_volume",
        }
    }

    /// Suffix letter used in fragment record ids (`S1#t004`).
    pub fn fragment_tag(self) -> char {
        match self {
            ModalityKind::ClinicalText => 'c',
            ModalityKind::PathologyImage => 't',
            ModalityKind::RadiologyVolume => 's',
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModalityKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModalityKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CorpusError::Invalid(format!("unknown modality {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub project_id: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAsset {
    pub asset_id: String,
    pub patient_id: String,
    pub kind: ModalityKind,
    pub uri: PathBuf,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct CorpusFile {
    patients: Vec<PatientRecord>,
    assets: Vec<RawAsset>,
}

/// A validated, immutable corpus. Asset URIs that are relative resolve
/// against `base_dir` (the directory holding the corpus file).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    patients: Vec<PatientRecord>,
    assets: Vec<RawAsset>,
    patient_index: HashMap<String, usize>,
    base_dir: PathBuf,
}

impl Corpus {
    /// Validates ids and references and builds the corpus.
    pub fn new(
        patients: Vec<PatientRecord>,
        assets: Vec<RawAsset>,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self, CorpusError> {
        let mut patient_index = HashMap::with_capacity(patients.len());
        for (i, p) in patients.iter().enumerate() {
            if p.patient_id.is_empty() {
                return Err(CorpusError::Invalid("empty patient_id".into()));
            }
            if p.project_id.is_empty() {
                return Err(CorpusError::Invalid(format!(
                    "patient {:?} has empty project_id",
                    p.patient_id
                )));
            }
            if patient_index.insert(p.patient_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(p.patient_id.clone()));
            }
        }
        let mut seen = HashSet::with_capacity(assets.len());
        for a in &assets {
            if a.asset_id.is_empty() {
                return Err(CorpusError::Invalid("empty asset_id".into()));
            }
            if !seen.insert(a.asset_id.as_str()) {
                return Err(CorpusError::DuplicateId(a.asset_id.clone()));
            }
            if !patient_index.contains_key(&a.patient_id) {
                return Err(CorpusError::DanglingReference(a.patient_id.clone()));
            }
        }
        Ok(Self {
            patients,
            assets,
            patient_index,
            base_dir: base_dir.into(),
        })
    }

    pub fn from_json_str(json: &str, base_dir: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let file: CorpusFile = serde_json::from_str(json)?;
        Self::new(file.patients, file.assets, base_dir)
    }

    pub fn to_json_string(&self) -> String {
        let file = CorpusFile {
            patients: self.patients.clone(),
            assets: self.assets.clone(),
        };
        serde_json::to_string_pretty(&file).expect("corpus serializes")
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn assets(&self) -> &[RawAsset] {
        &self.assets
    }

    pub fn assets_of(&self, kind: ModalityKind) -> impl Iterator<Item = &RawAsset> {
        self.assets.iter().filter(move |a| a.kind == kind)
    }

    pub fn patient(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.patient_index.get(patient_id).map(|&i| &self.patients[i])
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Absolute (or base-relative) location of an asset's file.
    pub fn resolve(&self, asset: &RawAsset) -> PathBuf {
        if asset.uri.is_absolute() {
            asset.uri.clone()
        } else {
            self.base_dir.join(&asset.uri)
        }
    }
}

/// Reads and validates a corpus description file.
pub fn ingest_corpus(manifest_file: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = manifest_file.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Corpus::from_json_str(&text, base)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub per_project_counts: BTreeMap<String, usize>,
    pub total_patients: usize,
}

/// Patient counts per project, keyed in ascending project order.
pub fn summarize_cohort(corpus: &Corpus) -> CohortSummary {
    let mut per_project_counts = BTreeMap::new();
    for p in corpus.patients() {
        *per_project_counts.entry(p.project_id.clone()).or_insert(0) += 1;
    }
    CohortSummary {
        total_patients: per_project_counts.values().sum(),
        per_project_counts,
    }
}

/// Patient counts per TCGA project used in the released multimodal dataset.
pub const TCGA_PROJECT_COUNTS: [(&str, usize); 33] = [
    ("TCGA-ACC", 92),
    ("TCGA-BLCA", 412),
    ("TCGA-BRCA", 1098),
    ("TCGA-CESC", 307),
    ("TCGA-CHOL", 51),
    ("TCGA-COAD", 461),
    ("TCGA-DLBC", 58),
    ("TCGA-ESCA", 185),
    ("TCGA-GBM", 617),
    ("TCGA-HNSC", 528),
    ("TCGA-KICH", 113),
    ("TCGA-KIRC", 537),
    ("TCGA-KIRP", 291),
    ("TCGA-LAML", 200),
    ("TCGA-LGG", 516),
    ("TCGA-LIHC", 377),
    ("TCGA-LUAD", 585),
    ("TCGA-LUSC", 504),
    ("TCGA-MESO", 87),
    ("TCGA-OV", 608),
    ("TCGA-PAAD", 185),
    ("TCGA-PCPG", 179),
    ("TCGA-PRAD", 500),
    ("TCGA-READ", 172),
    ("TCGA-SARC", 261),
    ("TCGA-SKCM", 470),
    ("TCGA-STAD", 443),
    ("TCGA-TGCT", 263),
    ("TCGA-THCA", 507),
    ("TCGA-THYM", 124),
    ("TCGA-UCEC", 560),
    ("TCGA-UCS", 57),
    ("TCGA-UVM", 80),
];

#[cfg(test)]
mod tests {
    use super::*;

    fn patient(id: &str, project: &str) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            project_id: project.into(),
            attributes: BTreeMap::new(),
        }
    }

    fn asset(id: &str, patient: &str, kind: ModalityKind) -> RawAsset {
        RawAsset {
            asset_id: id.into(),
            patient_id: patient.into(),
            kind,
            uri: format!("{id}.bin").into(),
            extra: BTreeMap::new(),
        }
    }

    const SMALL: &str = r#"{
        "patients": [
            {"patient_id": "P1", "project_id": "TCGA-BRCA", "attributes": {"age": "54"}},
            {"patient_id": "P2", "project_id": "TCGA-ACC", "attributes": {}}
        ],
        "assets": [
            {"asset_id": "N1", "patient_id": "P1", "kind": "clinical_text", "uri": "notes/n1.txt", "extra": {}},
            {"asset_id": "S1", "patient_id": "P1", "kind": "pathology_image", "uri": "slides/s1.png", "extra": {}},
            {"asset_id": "V1", "patient_id": "P2", "kind": "radiology_volume", "uri": "/abs/v1.f32", "extra": {"window_lo": "-160"}}
        ]
    }"#;

    #[test]
    fn parses_small_corpus() {
        let c = Corpus::from_json_str(SMALL, "/data").unwrap();
        assert_eq!(c.patients().len(), 2);
        assert_eq!(c.assets().len(), 3);
        assert_eq!(c.resolve(&c.assets()[0]), PathBuf::from("/data/notes/n1.txt"));
        assert_eq!(c.resolve(&c.assets()[2]), PathBuf::from("/abs/v1.f32"));
        assert_eq!(c.patient("P2").unwrap().project_id, "TCGA-ACC");
    }

    #[test]
    fn dangling_patient_is_rejected() {
        let err = Corpus::new(
            vec![patient("P1", "A")],
            vec![asset("X", "P9", ModalityKind::ClinicalText)],
            "",
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::DanglingReference(ref p) if p == "P9"));
    }

    #[test]
    fn duplicates_are_rejected() {
        let err = Corpus::new(vec![patient("P1", "A"), patient("P1", "B")], vec![], "").unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(_)));
        let err = Corpus::new(
            vec![patient("P1", "A")],
            vec![
                asset("X", "P1", ModalityKind::ClinicalText),
                asset("X", "P1", ModalityKind::PathologyImage),
            ],
            "",
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(ref id) if id == "X"));
    }

    #[test]
    fn empty_ids_are_rejected() {
        assert!(Corpus::new(vec![patient("", "A")], vec![], "").is_err());
        assert!(Corpus::new(vec![patient("P1", "")], vec![], "").is_err());
    }

    #[test]
    fn unknown_modality_is_a_parse_error() {
        let json = r#"{"patients":[{"patient_id":"P1","project_id":"A"}],
            "assets":[{"asset_id":"G","patient_id":"P1","kind":"genomics","uri":"g.vcf"}]}"#;
        assert!(matches!(
            Corpus::from_json_str(json, "").unwrap_err(),
            CorpusError::Parse(_)
        ));
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(
            Corpus::from_json_str("{\"patients\": [", "").unwrap_err(),
            CorpusError::Parse(_)
        ));
    }

    #[test]
    fn roundtrip_through_json() {
        let c = Corpus::from_json_str(SMALL, "/data").unwrap();
        let again = Corpus::from_json_str(&c.to_json_string(), "/data").unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn summary_counts() {
        let empty = Corpus::new(vec![], vec![], "").unwrap();
        assert_eq!(summarize_cohort(&empty), CohortSummary::default());

        let c = Corpus::new(
            vec![patient("1", "A"), patient("2", "A"), patient("3", "B")],
            vec![],
            "",
        )
        .unwrap();
        let s = summarize_cohort(&c);
        assert_eq!(s.per_project_counts.get("A"), Some(&2));
        assert_eq!(s.per_project_counts.get("B"), Some(&1));
        assert_eq!(s.total_patients, 3);
    }

    #[test]
    fn modality_strings() {
        for k in ModalityKind::ALL {
            assert_eq!(k.as_str().parse::<ModalityKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert!("genomics".parse::<ModalityKind>().is_err());
    }
}
