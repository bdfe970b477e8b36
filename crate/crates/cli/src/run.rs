use std::io::Write;
use std::path::Path;
use std::time::Duration;

use mmembed_core::corpus::{ingest_corpus, summarize_cohort, ModalityKind};
use mmembed_core::embedder::{serve_ndjson, Embedder, ExternalEmbedder, HashEmbedder};
use mmembed_core::eval::{knn_classify, project_2d, stratified_split, write_projection_csv};
use mmembed_core::index::{ExactIndex, HnswIndex, HnswParams, NeighborHit, HNSW_FILE};
use mmembed_core::pathology::{PathologyConfig, TissueRule};
use mmembed_core::pipeline::{embed_corpus, ModalityConfig};
use mmembed_core::store::{open_store, Store};
use mmembed_core::synth::{synth_corpus, SynthConfig, SynthError};
use mmembed_core::text::TextConfig;
use mmembed_core::volume::VolumeConfig;
use serde_json::json;

use crate::args::*;
use crate::CliError;

impl From<ModalityArg> for ModalityKind {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Text => ModalityKind::ClinicalText,
            ModalityArg::Pathology => ModalityKind::PathologyImage,
            ModalityArg::Volume => ModalityKind::RadiologyVolume,
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).expect("serializable");
    writeln!(out).map_err(CliError::stdout)
}

pub fn run(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => {
            let corpus = ingest_corpus(&a.corpus)?;
            let summary = summarize_cohort(&corpus);
            print_json(&json!({
                "patients": corpus.patients().len(),
                "assets": corpus.assets().len(),
                "per_project_counts": summary.per_project_counts,
                "total_patients": summary.total_patients,
            }))
        }
        Command::Embed(e) => embed(e),
        Command::Index(IndexCommand::Build(a)) => index_build(a),
        Command::Query(a) => query(a),
        Command::Eval(EvalCommand::Knn(a)) => {
            let store = open_store(&a.store)?;
            let split = stratified_split(&store, a.test_frac, a.seed)?;
            let report = knn_classify(&store, &split, a.k, a.metric)?;
            if let Some(path) = &a.report {
                let json = serde_json::to_string_pretty(&report).expect("serializable");
                std::fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))?;
            }
            print_json(&report)
        }
        Command::Eval(EvalCommand::Project(a)) => {
            let store = open_store(&a.store)?;
            let projection = project_2d(&store, a.sample_limit, a.seed)?;
            write_projection_csv(&projection, &a.out).map_err(|e| CliError::io(&a.out, e))?;
            print_json(&json!({
                "points": projection.points.len(),
                "variances": projection.pca.variances,
                "out": a.out,
            }))
        }
        Command::Export(a) => export(a),
        Command::ServeEmbedder(a) => {
            let embedder = HashEmbedder::new(a.dim, a.modality.into()).with_seed(a.seed);
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            serve_ndjson(&embedder, stdin, stdout).map_err(CliError::stdout)
        }
    }
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        n_patients: a.patients,
        n_projects: a.projects,
        assets_per_patient: a.assets_per_patient,
        seed: a.seed,
        profile: a.profile.into(),
        modalities: a.modalities.iter().map(|&m| m.into()).collect(),
        tile_px: a.tile_px,
        volume_px: a.volume_px,
        note_tokens: (a.min_tokens, a.max_tokens),
        text: TextConfig::default(),
    };
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let report = synth_corpus(&a.out, &config).map_err(|e| match e {
        SynthError::InvalidArgument(msg) => CliError::Usage(msg),
        other => CliError::Synth(other),
    })?;
    print_json(&report)
}

fn make_embedder(common: &CommonEmbedArgs, modality: ModalityKind) -> Result<Box<dyn Embedder>, CliError> {
    if common.dim == 0 {
        return Err(CliError::Usage("--dim must be >= 1".into()));
    }
    match common.embedder.as_str() {
        "builtin" => Ok(Box::new(HashEmbedder::new(common.dim, modality).with_seed(common.embedder_seed))),
        "builtin-hint" => Ok(Box::new(
            HashEmbedder::new(common.dim, modality)
                .with_seed(common.embedder_seed)
                .with_label_hint(common.hint_strength),
        )),
        other => match other.strip_prefix("exec:") {
            Some(cmd) if !cmd.trim().is_empty() => {
                let ext = ExternalEmbedder::spawn(cmd, modality, Duration::from_secs(common.timeout_secs))?;
                if ext.info().dim != common.dim {
                    log::warn!(
                        "external embedder declares dim {}; --dim {} ignored",
                        ext.info().dim,
                        common.dim
                    );
                }
                Ok(Box::new(ext))
            }
            _ => Err(CliError::Usage(format!(
                "unknown embedder {other:?} (expected builtin, builtin-hint or exec:<command>)"
            ))),
        },
    }
}

fn embed(e: &EmbedCommand) -> Result<(), CliError> {
    let (common, config) = match e {
        EmbedCommand::Text {
            common,
            chunk_size,
            overlap,
        } => {
            let cfg = TextConfig {
                chunk_size: *chunk_size,
                overlap: *overlap,
            };
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            (common, ModalityConfig::ClinicalText(cfg))
        }
        EmbedCommand::Pathology {
            common,
            tile_size,
            tau,
            saturation_min,
            value_max,
        } => {
            if *tile_size == 0 {
                return Err(CliError::Usage("--tile-size must be >= 1".into()));
            }
            (
                common,
                ModalityConfig::PathologyImage(PathologyConfig {
                    tile_size: *tile_size,
                    tau: *tau,
                    rule: TissueRule {
                        saturation_min: *saturation_min,
                        value_max: *value_max,
                    },
                }),
            )
        }
        EmbedCommand::Volume { common, window, resize } => {
            if *resize == Some(0) {
                return Err(CliError::Usage("--resize must be >= 1".into()));
            }
            (
                common,
                ModalityConfig::RadiologyVolume(VolumeConfig {
                    window_lo: window.lo,
                    window_hi: window.hi,
                    resize: *resize,
                }),
            )
        }
    };
    if common.shard_rows == 0 {
        return Err(CliError::Usage("--shard-rows must be >= 1".into()));
    }
    let corpus = ingest_corpus(&common.corpus)?;
    let embedder = make_embedder(common, config.kind())?;
    let summary = embed_corpus(&corpus, &config, embedder.as_ref(), &common.out, common.shard_rows)?;
    print_json(&json!({
        "modality": config.kind(),
        "model_id": summary.pooled.model_id,
        "dim": summary.pooled.dim,
        "fragment_records": summary.fragments.record_count,
        "pooled_records": summary.pooled.record_count,
        "flagged": summary.flagged,
    }))
}

fn index_build(a: &IndexBuildArgs) -> Result<(), CliError> {
    let store = open_store(&a.store)?;
    let params = HnswParams {
        m: a.m,
        ef_construction: a.efc,
        seed: a.seed,
    };
    let started = std::time::Instant::now();
    let index = HnswIndex::build(&store, a.metric, params)?;
    let path = a.store.join(HNSW_FILE);
    index.save(&path)?;
    print_json(&json!({
        "nodes": index.len(),
        "edges": index.graph().edge_count(),
        "max_level": index.graph().max_level(),
        "metric": a.metric,
        "build_secs": started.elapsed().as_secs_f64(),
        "file": path,
    }))
}

fn read_vector_file(path: &Path) -> Result<Vec<f32>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.is_empty() || bytes.len() % 4 != 0 {
        return Err(CliError::Usage(format!(
            "{}: expected a non-empty sequence of little-endian f32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn query(a: &QueryArgs) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be >= 1".into()));
    }
    let store = open_store(&a.store)?;
    let vector = match (&a.record, &a.vector_file) {
        (Some(id), _) => {
            let i = store
                .find(id)
                .ok_or_else(|| CliError::Usage(format!("record {id:?} not in store")))?;
            store.vector(i).to_vec()
        }
        (None, Some(path)) => read_vector_file(path)?,
        (None, None) => unreachable!("clap enforces one query source"),
    };
    let hits = if a.exact {
        ExactIndex::build(&store, a.metric)?.query(&vector, a.k)?
    } else {
        load_or_build_hnsw(&store)?.query(&vector, a.k, Some(a.ef))?
    };
    write_hits(&hits)
}

fn load_or_build_hnsw(store: &Store) -> Result<HnswIndex, CliError> {
    let path = store.dir().join(HNSW_FILE);
    if path.exists() {
        Ok(HnswIndex::load(&path, store)?)
    } else {
        log::warn!("{} missing; building a cosine index with default parameters", path.display());
        Ok(HnswIndex::build(store, mmembed_core::index::Metric::Cosine, HnswParams::default())?)
    }
}

fn write_hits(hits: &[NeighborHit]) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    for (rank, hit) in hits.iter().enumerate() {
        writeln!(out, "{}\t{}\t{}", rank + 1, hit.record_id, hit.distance).map_err(CliError::stdout)?;
    }
    Ok(())
}

fn export(a: &ExportArgs) -> Result<(), CliError> {
    let store = open_store(&a.store)?;
    let io = |e| CliError::io(&a.out, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(&a.out).map_err(io)?);
    let dim = store.dim();
    match a.format {
        ExportFormat::Csv => {
            let header: Vec<String> = (0..dim).map(|j| format!("f{j}")).collect();
            writeln!(w, "record_id,label,{}", header.join(",")).map_err(io)?;
            for i in 0..store.record_count() {
                let meta = store.meta(i);
                write!(
                    w,
                    "{},{}",
                    csv_field(&meta.record_id),
                    csv_field(meta.label.as_deref().unwrap_or(""))
                )
                .map_err(io)?;
                for v in store.vector(i) {
                    write!(w, ",{v}").map_err(io)?;
                }
                writeln!(w).map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        ExportFormat::NpyLikeRaw => {
            for v in store.matrix() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            w.flush().map_err(io)?;
            let labels_path = labels_path(&a.out);
            let lio = |e| CliError::io(&labels_path, e);
            let mut lw = std::io::BufWriter::new(std::fs::File::create(&labels_path).map_err(lio)?);
            writeln!(lw, "row\trecord_id\tlabel").map_err(lio)?;
            for (i, meta) in store.metas().iter().enumerate() {
                writeln!(lw, "{i}\t{}\t{}", meta.record_id, meta.label.as_deref().unwrap_or("")).map_err(lio)?;
            }
            lw.flush().map_err(lio)?;
        }
    }
    print_json(&json!({
        "rows": store.record_count(),
        "dim": dim,
        "format": a.format,
        "out": a.out,
    }))
}

/// `<out>.labels.tsv`
pub fn labels_path(out: &Path) -> std::path::PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".labels.tsv");
    name.into()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
