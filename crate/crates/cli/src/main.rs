use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use misdiag_core::corpus::{
    generate_synthetic_corpus, load_corpus, load_corpus_with_catalog, split_by_misconception, write_corpus,
    DialoguePoint, LabelCatalog, SplitAssignment, SplitFractions, SyntheticConfig,
};
use misdiag_core::embedder::EmbedderSpec;
use misdiag_core::llm::ContentCache;
use misdiag_core::pipeline::{
    ablation_matrix, prepare_embedder, run, run_matrix, BackendRegistry, BackendSpec, Experiment, RunArtifact,
    RunConfig, TfidfFit,
};
use misdiag_core::report::{render_table, write_traces, MatrixReport};

#[derive(Parser)]
#[command(name = "misdiag", version, about = "Misconception diagnosis experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its label catalog.
    Generate {
        #[arg(long, default_value_t = 922)]
        points: usize,
        #[arg(long, default_value_t = 546)]
        labels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        catalog_out: PathBuf,
    },
    /// Partition labels into train/valid/test.
    Split {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed the label catalog and save the index.
    Index {
        #[arg(long)]
        catalog: PathBuf,
        /// `hash`, `tfidf`, `minilm`, a JSON object, or a path to one.
        #[arg(long, default_value = "hash")]
        embedder: String,
        #[command(flatten)]
        runtime: RuntimeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one configuration and write its artifact.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        runtime: RuntimeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a list of configurations and write the combined report.
    Matrix {
        /// JSON array of run configs.
        #[arg(long, required_unless_present = "ablation", conflicts_with = "ablation")]
        configs: Option<PathBuf>,
        /// Comma-separated backend ids; runs the full ablation grid over them.
        #[arg(long, value_delimiter = ',')]
        ablation: Vec<String>,
        #[arg(long, default_value = "hash")]
        embedder: String,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        runtime: RuntimeArgs,
        /// Output directory for report.json, report.csv and runs/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build report tables from saved run artifacts.
    Report {
        #[arg(required = true)]
        artifacts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CorpusArgs {
    /// JSONL corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Fixed label catalog; without it labels are collected from the corpus.
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    /// Split file written by `split`.
    #[arg(long, required_unless_present = "seed", conflicts_with = "seed")]
    split: Option<PathBuf>,
    /// Compute the split from this seed instead of reading a file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RuntimeArgs {
    /// JSON object mapping backend ids to backend specs.
    #[arg(long)]
    backends: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    workers: usize,
}

fn load_corpus_args(args: &CorpusArgs) -> Result<(LabelCatalog, Vec<DialoguePoint>)> {
    match &args.catalog {
        Some(path) => {
            let catalog = LabelCatalog::load(path)?;
            let points = load_corpus_with_catalog(&args.corpus, &catalog)?;
            Ok((catalog, points))
        }
        None => Ok(load_corpus(&args.corpus)?),
    }
}

fn load_split(args: &SplitArgs, catalog: &LabelCatalog, points: &[DialoguePoint]) -> Result<SplitAssignment> {
    match (&args.split, args.seed) {
        (Some(path), _) => {
            let split = SplitAssignment::load(path)?;
            let n = split.train.len() + split.valid.len() + split.test.len();
            if n != catalog.len() {
                bail!("split {} covers {n} labels but the catalog has {}", path.display(), catalog.len());
            }
            Ok(split)
        }
        (None, Some(seed)) => Ok(split_by_misconception(points, catalog, SplitFractions::default(), seed)?),
        (None, None) => bail!("either --split or --seed is required"),
    }
}

fn registry(args: &RuntimeArgs) -> Result<BackendRegistry> {
    let specs: BTreeMap<String, BackendSpec> = match &args.backends {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => BTreeMap::new(),
    };
    let cache = args.cache_dir.as_ref().map(ContentCache::open).transpose()?;
    Ok(BackendRegistry::new(specs, cache))
}

fn parse_embedder(arg: &str) -> Result<EmbedderSpec> {
    match arg {
        "hash" | "hash_local" => return Ok(EmbedderSpec::default()),
        "tfidf" => return Ok(EmbedderSpec::Tfidf),
        "minilm" => return Ok(EmbedderSpec::minilm()),
        _ => {}
    }
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).with_context(|| format!("reading embedder spec {arg}"))?
    };
    serde_json::from_str(&text).with_context(|| format!("parsing embedder spec {arg}"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { points, labels, seed, noise, out, catalog_out } => {
            let (catalog, corpus) =
                generate_synthetic_corpus(&SyntheticConfig::new(points, labels, seed).with_noise(noise))?;
            write_corpus(&out, &corpus, &catalog)?;
            catalog.save(&catalog_out)?;
            println!("wrote {} points over {} labels", corpus.len(), catalog.len());
        }
        Command::Split { corpus, seed, out } => {
            let (catalog, points) = load_corpus_args(&corpus)?;
            let split = split_by_misconception(&points, &catalog, SplitFractions::default(), seed)?;
            split.save(&out)?;
            for s in misdiag_core::Split::ALL {
                println!("{s}: {} labels, {} points", split.labels(s).len(), split.select(&points, s).len());
            }
        }
        Command::Index { catalog, embedder, runtime, out } => {
            let catalog = LabelCatalog::load(&catalog)?;
            let spec = parse_embedder(&embedder)?;
            let backends = registry(&runtime)?;
            let split = SplitAssignment {
                seed: 0,
                train: (0..catalog.len()).collect(),
                valid: Default::default(),
                test: Default::default(),
            };
            let exp = Experiment {
                catalog: &catalog,
                points: &[],
                split: &split,
                backends: &backends,
                max_in_flight: runtime.workers,
            };
            let prepared = prepare_embedder(&spec, TfidfFit::Labels, &exp)?;
            prepared.index.save(&out)?;
            println!("indexed {} labels ({})", prepared.index.len(), prepared.embedder.fingerprint());
        }
        Command::Run { config, corpus, split, runtime, out } => {
            let config: RunConfig = read_json(&config)?;
            let (catalog, points) = load_corpus_args(&corpus)?;
            let split = load_split(&split, &catalog, &points)?;
            let backends = registry(&runtime)?;
            let exp = Experiment {
                catalog: &catalog,
                points: &points,
                split: &split,
                backends: &backends,
                max_in_flight: runtime.workers,
            };
            let artifact = run(&config, &exp)?;
            write_text(&out, &(serde_json::to_string_pretty(&artifact)? + "\n"))?;
            print!("{}", render_table(&MatrixReport::from_artifacts(std::slice::from_ref(&artifact))));
        }
        Command::Matrix { configs, ablation, embedder, corpus, split, runtime, out } => {
            let configs: Vec<RunConfig> = match configs {
                Some(path) => read_json(&path)?,
                None => {
                    let ids: Vec<&str> = ablation.iter().map(String::as_str).collect();
                    ablation_matrix(&ids, &parse_embedder(&embedder)?)
                }
            };
            let (catalog, points) = load_corpus_args(&corpus)?;
            let split = load_split(&split, &catalog, &points)?;
            let backends = registry(&runtime)?;
            let exp = Experiment {
                catalog: &catalog,
                points: &points,
                split: &split,
                backends: &backends,
                max_in_flight: runtime.workers,
            };
            let artifacts = run_matrix(&configs, &exp)?;
            let report = MatrixReport::from_artifacts(&artifacts);
            report.write(&out)?;
            write_traces(&artifacts, &out)?;
            print!("{}", render_table(&report));
        }
        Command::Report { artifacts, out } => {
            let artifacts = artifacts.iter().map(|p| read_json::<RunArtifact>(p)).collect::<Result<Vec<_>>>()?;
            let report = MatrixReport::from_artifacts(&artifacts);
            report.write(&out)?;
            print!("{}", render_table(&report));
        }
    }
    Ok(())
}
