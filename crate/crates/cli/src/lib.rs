//! Pipeline orchestration for the `conceptlens` command.
//!
//! Every stage reads and writes files under one output directory, so stages
//! can be rerun independently. See [`Artifacts`] for the layout.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use conceptlens::Error;

pub use config::{Overrides, ProviderSpec, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("missing {}: run `conceptlens {command}` first", path.display())]
    MissingArtifact { path: PathBuf, command: &'static str },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl CliError {
    /// 2 configuration, 3 data, 4 provider.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Config(_) | Error::Precondition(_)) => 2,
            CliError::Core(Error::Provider { .. } | Error::ProviderUnavailable { .. } | Error::NonNegativity(_)) => 4,
            _ => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Artifacts { root: root.into() }
    }

    pub fn concepts(&self) -> PathBuf {
        self.root.join("concepts")
    }

    pub fn extract_meta(&self) -> PathBuf {
        self.concepts().join("extract.json")
    }

    pub fn concept_excerpts(&self) -> PathBuf {
        self.concepts().join("excerpts.ndjson")
    }

    pub fn importance(&self) -> PathBuf {
        self.root.join("importance.json")
    }

    pub fn importance_svg(&self) -> PathBuf {
        self.root.join("importance.svg")
    }

    pub fn explanations(&self) -> PathBuf {
        self.root.join("explanations.json")
    }

    pub fn fidelity(&self) -> PathBuf {
        self.root.join("fidelity.json")
    }

    pub fn fidelity_csv(&self) -> PathBuf {
        self.root.join("fidelity.csv")
    }

    pub fn fidelity_svg(&self, kind: &str) -> PathBuf {
        self.root.join(format!("fidelity_{kind}.svg"))
    }

    pub fn bootstrap_csv(&self) -> PathBuf {
        self.root.join("fidelity_bootstrap.csv")
    }

    pub fn bootstrap_json(&self) -> PathBuf {
        self.root.join("fidelity_bootstrap.json")
    }

    pub fn alignment(&self) -> PathBuf {
        self.root.join("alignment.json")
    }

    pub fn alignment_csv(&self) -> PathBuf {
        self.root.join("alignment.csv")
    }

    pub fn alignment_concepts_csv(&self) -> PathBuf {
        self.root.join("alignment_concepts.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.html")
    }

    /// Fails with a message naming the command that produces `path`.
    pub fn require(path: &Path, command: &'static str) -> CliResult<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::MissingArtifact { path: path.to_path_buf(), command })
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "conceptlens", version, about = "Concept-based explanations for text classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// builtin:<model.json>, cmd:<program> [args] or tcp:<host:port>.
    #[arg(long, global = true)]
    pub provider: Option<String>,
    /// Class to explain, by name or index.
    #[arg(long, global = true)]
    pub class: Option<String>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub annotations: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Concept excerpt granularity, e.g. `sentence` or `sentence:6`.
    #[arg(long, global = true)]
    pub tau1: Option<String>,
    /// Occlusion granularity: word, clause or sentence.
    #[arg(long, global = true)]
    pub tau2: Option<String>,
    /// Number of concepts.
    #[arg(long, global = true)]
    pub r: Option<usize>,
    /// Sobol designs N (a power of two).
    #[arg(long, global = true)]
    pub n_designs: Option<usize>,
    /// uniform or bernoulli.
    #[arg(long, global = true)]
    pub mask_law: Option<String>,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            provider: self.provider.clone(),
            class: self.class.clone(),
            corpus: self.corpus.clone(),
            eval_corpus: self.eval_corpus.clone(),
            annotations: self.annotations.clone(),
            out_dir: self.out_dir.clone(),
            cache_dir: self.cache_dir.clone(),
            seed: self.seed,
            tau1: self.tau1.clone(),
            tau2: self.tau2.clone(),
            r: self.r,
            n_designs: self.n_designs,
            mask_law: self.mask_law.clone(),
        }
    }

    /// The config file, if any, with flag overrides applied.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic review corpus with planted token groups.
    MakeToyCorpus {
        #[arg(long, default_value_t = 200)]
        docs: usize,
        /// Documents, newline-delimited JSON.
        #[arg(long)]
        out: PathBuf,
        /// Aspect annotations, newline-delimited JSON.
        #[arg(long)]
        annotations_out: Option<PathBuf>,
    },
    /// Train the builtin toy classifier on a labeled corpus.
    TrainToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Activation width.
        #[arg(long)]
        p: Option<usize>,
    },
    /// Serve a toy model over the provider wire protocol (stdio, or TCP with --listen).
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
    },
    /// Embed the class's excerpts and factorize them into concepts.
    ExtractConcepts,
    /// Estimate total Sobol indices of the concepts.
    RankConcepts,
    /// Attribute excerpt elements to concepts by occlusion.
    Explain {
        /// Text to explain; repeatable.
        #[arg(long)]
        text: Vec<String>,
        /// Documents to explain, newline-delimited JSON.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Deletion and insertion curves over the concept ranking.
    Fidelity,
    /// Score concept presence against aspect annotations.
    Align,
    /// Assemble the artifacts into a static HTML report.
    Report,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.global.resolve()?;
    cfg.validate()?;
    match &cli.command {
        Command::MakeToyCorpus { docs, out, annotations_out } => {
            commands::make_toy_corpus(&cfg, *docs, out, annotations_out.as_deref())
        }
        Command::TrainToy { out, epochs, p } => commands::train_toy(&cfg, out, *epochs, *p),
        Command::Serve { model, listen } => commands::serve(&cfg, model.as_deref(), listen.as_deref()),
        Command::ExtractConcepts => commands::extract_concepts(&cfg),
        Command::RankConcepts => commands::rank_concepts(&cfg),
        Command::Explain { text, input } => commands::explain(&cfg, text, input.as_deref()),
        Command::Fidelity => commands::fidelity(&cfg),
        Command::Align => commands::align(&cfg),
        Command::Report => commands::report(&cfg),
    }
}
