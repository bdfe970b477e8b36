use mmembed_core::corpus::{ingest_corpus, ModalityKind};
use mmembed_core::embedder::HashEmbedder;
use mmembed_core::index::{ExactIndex, HnswIndex, HnswParams, IndexError, Metric, HNSW_FILE};
use mmembed_core::pipeline::{embed_corpus, ModalityConfig, FRAGMENTS_DIR, POOLED_DIR};
use mmembed_core::store::open_store;
use mmembed_core::synth::{synth_corpus, SynthConfig, CORPUS_FILE};
use mmembed_core::text::TextConfig;

fn text_cohort(dir: &std::path::Path) -> std::path::PathBuf {
    let corpus_dir = dir.join("corpus");
    let config = SynthConfig {
        n_patients: 30,
        modalities: vec![ModalityKind::ClinicalText],
        note_tokens: (40, 900),
        seed: 9,
        ..SynthConfig::default()
    };
    synth_corpus(&corpus_dir, &config).unwrap();
    let corpus = ingest_corpus(corpus_dir.join(CORPUS_FILE)).unwrap();
    let out = dir.join("text");
    let embedder = HashEmbedder::new(48, ModalityKind::ClinicalText).with_label_hint(1.0);
    embed_corpus(&corpus, &ModalityConfig::ClinicalText(TextConfig::default()), &embedder, &out, 7).unwrap();
    out
}

#[test]
fn pooled_store_has_one_unit_vector_per_patient() {
    let tmp = tempfile::tempdir().unwrap();
    let out = text_cohort(tmp.path());
    let pooled = open_store(out.join(POOLED_DIR)).unwrap();
    let fragments = open_store(out.join(FRAGMENTS_DIR)).unwrap();
    assert_eq!(pooled.record_count(), 30);
    assert!(fragments.record_count() >= 30);
    assert!(pooled.manifest().shards.len() >= 2);
    for i in 0..pooled.record_count() {
        let norm: f64 = pooled.vector(i).iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "row {i} norm {norm}");
        assert!(pooled.meta(i).label.is_some());
    }
}

#[test]
fn saved_hnsw_index_answers_like_the_built_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = text_cohort(tmp.path());
    let store = open_store(out.join(POOLED_DIR)).unwrap();
    let params = HnswParams {
        m: 4,
        ef_construction: 32,
        seed: 3,
    };
    let built = HnswIndex::build(&store, Metric::Cosine, params).unwrap();
    let path = store.dir().join(HNSW_FILE);
    built.save(&path).unwrap();
    let loaded = HnswIndex::load(&path, &store).unwrap();
    let exact = ExactIndex::build(&store, Metric::Cosine).unwrap();
    for i in 0..store.record_count() {
        let q = store.vector(i);
        let a = built.query(q, 5, Some(64)).unwrap();
        assert_eq!(a, loaded.query(q, 5, Some(64)).unwrap());
        assert_eq!(a[0].record_id, store.meta(i).record_id);
        assert_eq!(a, exact.query(q, 5).unwrap());
    }
}

#[test]
fn index_file_is_rejected_for_a_different_store() {
    let tmp = tempfile::tempdir().unwrap();
    let out = text_cohort(tmp.path());
    let pooled = open_store(out.join(POOLED_DIR)).unwrap();
    let fragments = open_store(out.join(FRAGMENTS_DIR)).unwrap();
    let path = tmp.path().join(HNSW_FILE);
    HnswIndex::build(&pooled, Metric::Cosine, HnswParams::default()).unwrap().save(&path).unwrap();
    let err = HnswIndex::load(&path, &fragments).unwrap_err();
    assert!(matches!(err, IndexError::Format(_)), "{err:?}");
}
