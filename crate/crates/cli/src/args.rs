use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmembed_core::index::Metric;
use mmembed_core::synth::SynthProfile;
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "mmembed", version, about = "Multimodal embedding pipeline", propagate_version = true)]
pub struct Cli {
    /// Worker threads (falls back to HB_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Validate a corpus file and print per-project patient counts.
    Ingest(IngestArgs),
    /// Embed every asset of one modality.
    #[command(subcommand)]
    Embed(EmbedCommand),
    /// Build and persist an HNSW index next to a store.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Nearest-neighbour query against a store.
    Query(QueryArgs),
    /// Classification and projection reports.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write a store as a flat matrix plus labels.
    Export(ExportArgs),
    /// Serve the built-in embedder over the NDJSON protocol on stdin/stdout.
    #[command(hide = true)]
    ServeEmbedder(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileArg {
    Even,
    Tcga,
}

impl From<ProfileArg> for SynthProfile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Even => SynthProfile::Even,
            ProfileArg::Tcga => SynthProfile::Tcga,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityArg {
    Text,
    Pathology,
    Volume,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub patients: usize,
    /// Number of projects (even profile only).
    #[arg(long, default_value_t = 3)]
    pub projects: usize,
    #[arg(long, default_value_t = 1)]
    pub assets_per_patient: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ProfileArg::Even)]
    pub profile: ProfileArg,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ModalityArg::Text, ModalityArg::Pathology, ModalityArg::Volume])]
    pub modalities: Vec<ModalityArg>,
    #[arg(long, default_value_t = 512)]
    pub tile_px: u32,
    #[arg(long, default_value_t = 32)]
    pub volume_px: usize,
    #[arg(long, default_value_t = 40)]
    pub min_tokens: usize,
    #[arg(long, default_value_t = 1200)]
    pub max_tokens: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CommonEmbedArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = mmembed_core::embedder::DEFAULT_DIM)]
    pub dim: usize,
    /// `builtin`, `builtin-hint` (label-hint mode) or `exec:<command>`.
    #[arg(long, default_value = "builtin")]
    pub embedder: String,
    /// Seed constant of the built-in embedder.
    #[arg(long, default_value_t = 0)]
    pub embedder_seed: u64,
    /// Centroid weight for `builtin-hint`.
    #[arg(long, default_value_t = 1.0)]
    pub hint_strength: f64,
    /// Per-batch deadline for `exec:` embedders, in seconds.
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
    #[arg(long, default_value_t = mmembed_core::store::DEFAULT_SHARD_ROWS)]
    pub shard_rows: usize,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedCommand {
    Text {
        #[command(flatten)]
        common: CommonEmbedArgs,
        #[arg(long, default_value_t = mmembed_core::text::DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        #[arg(long, default_value_t = mmembed_core::text::DEFAULT_OVERLAP)]
        overlap: usize,
    },
    Pathology {
        #[command(flatten)]
        common: CommonEmbedArgs,
        #[arg(long, default_value_t = mmembed_core::pathology::DEFAULT_TILE_SIZE)]
        tile_size: u32,
        #[arg(long, default_value_t = mmembed_core::pathology::DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = 0.08)]
        saturation_min: f64,
        #[arg(long, default_value_t = 0.98)]
        value_max: f64,
    },
    Volume {
        #[command(flatten)]
        common: CommonEmbedArgs,
        /// Intensity window `lo:hi`.
        #[arg(long, default_value = "-1000:400", value_parser = parse_window, allow_hyphen_values = true)]
        window: Window,
        /// Resize each slice to `n x n` (nearest neighbour).
        #[arg(long)]
        resize: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

fn parse_window(s: &str) -> Result<Window, String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad lo: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad hi: {e}"))?;
    if !(lo < hi) {
        return Err(format!("need lo < hi, got {lo}:{hi}"));
    }
    Ok(Window { lo, hi })
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: mmembed_core::IndexError| e.to_string())
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexCommand {
    Build(IndexBuildArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct IndexBuildArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "cosine", value_parser = parse_metric)]
    pub metric: Metric,
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = 200)]
    pub efc: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["record", "vector_file"])))]
pub struct QueryArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Use a stored record's vector as the query.
    #[arg(long)]
    pub record: Option<String>,
    /// Raw little-endian f32 query vector.
    #[arg(long)]
    pub vector_file: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Full scan instead of the HNSW index.
    #[arg(long)]
    pub exact: bool,
    /// Metric for exact search (HNSW uses the metric it was built with).
    #[arg(long, default_value = "cosine", value_parser = parse_metric)]
    pub metric: Metric,
    #[arg(long, default_value_t = mmembed_core::index::DEFAULT_EF_SEARCH)]
    pub ef: usize,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalCommand {
    Knn(KnnArgs),
    Project(ProjectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct KnnArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value = "cosine", value_parser = parse_metric)]
    pub metric: Metric,
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Also write the report JSON here (it always goes to stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ProjectArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub sample_limit: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    Csv,
    NpyLikeRaw,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
    pub format: ExportFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value_t = mmembed_core::embedder::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, value_enum, default_value_t = ModalityArg::Text)]
    pub modality: ModalityArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
