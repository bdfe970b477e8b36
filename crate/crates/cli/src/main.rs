mod args;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use args::Cli;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] mmembed_core::CorpusError),
    #[error(transparent)]
    Embed(#[from] mmembed_core::EmbedError),
    #[error(transparent)]
    Pipeline(#[from] mmembed_core::PipelineError),
    #[error(transparent)]
    Store(#[from] mmembed_core::StoreError),
    #[error(transparent)]
    Index(#[from] mmembed_core::IndexError),
    #[error(transparent)]
    Eval(#[from] mmembed_core::EvalError),
    #[error(transparent)]
    Synth(mmembed_core::synth::SynthError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn stdout(source: std::io::Error) -> Self {
        CliError::io(Path::new("<stdout>"), source)
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(n) = flag {
        return if n == 0 {
            Err(CliError::Usage("--threads must be >= 1".into()))
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var("HB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("HB_THREADS={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

fn report(err: &CliError) {
    let mut msg = format!("error: {err}");
    let mut source = std::error::Error::source(err);
    while let Some(s) = source {
        msg.push_str(&format!("\n  caused by: {s}"));
        source = s.source();
    }
    eprintln!("{msg}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let threads = match resolve_threads(cli.threads) {
        Ok(t) => t,
        Err(e) => {
            report(&e);
            return ExitCode::from(e.exit_code());
        }
    };
    let echo = json!({
        "threads": threads.unwrap_or_else(rayon::current_num_threads),
        "command": cli.command,
    });
    eprintln!("{}", serde_json::to_string(&echo).expect("config serializes"));
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    match run::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code())
        }
    }
}
