//! `kerap` command-line entry point.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use kerap_core::cohort::{synth_cohort, AttributeVocab, Cohort};
use kerap_core::config::PipelineConfig;
use kerap_core::eval::{self, EvaluationReport};
use kerap_core::kg_store::{IngestOptions, KgStore};
use kerap_core::llm_gateway::GatewayMode;
use kerap_core::pipeline::Pipeline;
use kerap_core::prediction::Strategy;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "kerap", version, about = "Knowledge-graph-guided zero-shot diagnosis prediction")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Gateway mode, overriding the config.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<GatewayMode>,

    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> Result<GatewayMode, String> {
    s.parse()
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the knowledge graph, print statistics.
    IngestKg {
        /// Entity TSV; defaults to the config's.
        #[arg(long)]
        entities: Option<PathBuf>,
        /// Triple TSV; defaults to the config's.
        #[arg(long)]
        triples: Option<PathBuf>,
        /// Skip malformed rows instead of failing.
        #[arg(long)]
        skip_malformed: bool,
        /// Write the normalized store back out as `entities.tsv` and `triples.tsv`.
        #[arg(long)]
        export_dir: Option<PathBuf>,
    },
    /// Link a disease mention to a knowledge-graph entity.
    Link {
        #[arg(long)]
        mention: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Link a mention and build its knowledge bundle.
    Retrieve {
        #[arg(long)]
        mention: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Predict every visit of a cohort, one JSON line per outcome.
    Predict {
        #[arg(long)]
        cohort: PathBuf,
        /// Target disease; defaults to the cohort header.
        #[arg(long)]
        disease: Option<String>,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score strategies over repeated runs and write report.json and report.txt.
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        /// Strategy name or `all`.
        #[arg(long, default_value = "all")]
        strategy: String,
        /// Repetitions; defaults to the config's.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        output_dir: PathBuf,
        /// Also write every outcome to outcomes.jsonl.
        #[arg(long)]
        outcomes: bool,
    },
    /// Render report.json files as a text table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic labeled cohort.
    SynthCohort {
        /// Seed; defaults to the config's, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        prevalence: f64,
        /// Attribute vocabulary (TOML with indicative/exclusionary/background lists).
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        disease: String,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .json()
        .with_writer(io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %format!("{e:#}"), "command failed");
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .context("this command needs --config")?;
    let mut cfg = PipelineConfig::read(path)?;
    if let Some(mode) = cli.mode {
        cfg.llm.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_echo(cfg: &PipelineConfig, beside: &Path) -> Result<()> {
    let mut name = beside.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    write_atomic(&beside.with_file_name(name), &cfg.redacted_toml())
}

fn emit(json: String, output: Option<&Path>, cfg: &PipelineConfig) -> Result<()> {
    match output {
        Some(path) => {
            write_atomic(path, &(json + "\n"))?;
            write_echo(cfg, path)
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::IngestKg {
            entities,
            triples,
            skip_malformed,
            export_dir,
        } => {
            let cfg = match (&cli.config, entities, triples) {
                (_, Some(_), Some(_)) => None,
                (Some(_), _, _) => Some(load_config(&cli)?),
                _ => bail!("pass --entities and --triples, or --config"),
            };
            let entities = entities.clone().or_else(|| cfg.as_ref().map(|c| c.kg.entities.clone()));
            let triples = triples.clone().or_else(|| cfg.as_ref().map(|c| c.kg.triples.clone()));
            let opts = IngestOptions {
                categories: cfg.as_ref().and_then(|c| c.kg.categories.clone()),
                skip_malformed: *skip_malformed || cfg.as_ref().is_some_and(|c| c.kg.skip_malformed),
                memory_budget_bytes: cfg.as_ref().and_then(|c| c.kg.memory_budget_bytes),
            };
            let store = KgStore::ingest_files(
                entities.expect("entities path"),
                triples.expect("triples path"),
                &opts,
            )?;
            if let Some(dir) = export_dir {
                fs::create_dir_all(dir)?;
                let e = BufWriter::new(fs::File::create(dir.join("entities.tsv"))?);
                let t = BufWriter::new(fs::File::create(dir.join("triples.tsv"))?);
                store.export(e, t)?;
            }
            println!("{}", serde_json::to_string(&store.stats())?);
            Ok(())
        }
        Command::Link { mention, output } => {
            let cfg = load_config(&cli)?;
            let pipeline = Pipeline::new(cfg.clone())?;
            let link = pipeline.link(mention)?;
            pipeline.persist()?;
            emit(serde_json::to_string_pretty(&link)?, output.as_deref(), &cfg)
        }
        Command::Retrieve { mention, output } => {
            let cfg = load_config(&cli)?;
            let pipeline = Pipeline::new(cfg.clone())?;
            let (_, bundle) = pipeline.knowledge(mention)?;
            pipeline.persist()?;
            emit(serde_json::to_string_pretty(&bundle)?, output.as_deref(), &cfg)
        }
        Command::Predict {
            cohort,
            disease,
            strategy,
            output,
        } => {
            let cfg = load_config(&cli)?;
            let cohort = Cohort::load(cohort).with_context(|| format!("loading {}", cohort.display()))?;
            let disease = disease.clone().unwrap_or_else(|| cohort.disease.clone());
            let pipeline = Pipeline::new(cfg.clone())?;
            let bundle = if strategy.uses_knowledge() {
                Some(pipeline.knowledge(&disease)?.1)
            } else {
                None
            };
            let outcomes = pipeline.predict_cohort(&cohort, &disease, bundle.as_ref(), *strategy)?;
            pipeline.persist()?;
            let mut out = String::new();
            for o in &outcomes {
                out.push_str(&serde_json::to_string(o)?);
                out.push('\n');
            }
            write_atomic(output, &out)?;
            write_echo(&cfg, output)?;
            let fallbacks: u32 = outcomes.iter().map(|o| o.parse_fallbacks).sum();
            tracing::info!(visits = outcomes.len(), parse_fallbacks = fallbacks, "predictions written");
            Ok(())
        }
        Command::Evaluate {
            cohort,
            strategy,
            runs,
            output_dir,
            outcomes,
        } => {
            let cfg = load_config(&cli)?;
            let strategies: Vec<Strategy> = if strategy == "all" {
                Strategy::ALL.to_vec()
            } else {
                vec![strategy.parse().map_err(anyhow::Error::msg)?]
            };
            let cohort = Cohort::load(cohort).with_context(|| format!("loading {}", cohort.display()))?;
            let runs = runs.unwrap_or(cfg.runs);
            let pipeline = Pipeline::new(cfg.clone())?;
            let evaluation = eval::evaluate(&pipeline, &cohort, &strategies, runs)?;
            pipeline.persist()?;

            fs::create_dir_all(output_dir)?;
            let report_path = output_dir.join("report.json");
            write_atomic(&report_path, &eval::report_json(&evaluation.report)?)?;
            write_atomic(&output_dir.join("report.txt"), &eval::report_table(&evaluation.report)?)?;
            write_atomic(&output_dir.join("config.toml"), &cfg.redacted_toml())?;
            if *outcomes {
                let mut out = String::new();
                for (_, per_run) in &evaluation.outcomes {
                    for o in per_run.iter().flatten() {
                        out.push_str(&serde_json::to_string(o)?);
                        out.push('\n');
                    }
                }
                write_atomic(&output_dir.join("outcomes.jsonl"), &out)?;
            }
            print!("{}", eval::report_table(&evaluation.report)?);
            Ok(())
        }
        Command::Report { inputs, output } => {
            let mut table = String::new();
            for path in inputs {
                let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let report: EvaluationReport =
                    serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
                if !table.is_empty() {
                    table.push('\n');
                }
                table.push_str(&eval::report_table(&report)?);
            }
            match output {
                Some(path) => write_atomic(path, &table),
                None => {
                    io::stdout().write_all(table.as_bytes())?;
                    Ok(())
                }
            }
        }
        Command::SynthCohort {
            seed,
            n,
            prevalence,
            vocab,
            disease,
            output,
        } => {
            let seed = match seed {
                Some(s) => *s,
                None if cli.config.is_some() => PipelineConfig::read(cli.config.as_ref().unwrap())?.seed,
                None => 0,
            };
            let vocab = AttributeVocab::load(vocab).with_context(|| format!("loading {}", vocab.display()))?;
            let cohort = synth_cohort(seed, *n, *prevalence, &vocab, disease)?;
            let mut buf = Vec::new();
            cohort.write_to(&mut buf)?;
            write_atomic(output, &String::from_utf8(buf)?)?;
            tracing::info!(visits = cohort.visits.len(), positives = cohort.positives(), seed, "cohort written");
            Ok(())
        }
    }
}
