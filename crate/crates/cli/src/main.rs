//! Operator surface for the guardrail gateway: single-query checks, batch
//! evaluation, fixture generation, and an optional HTTP service.
//!
//! Exit codes are a stable contract: 0 for success/allow, 2 when a query was
//! defended (refused, clarified, or blocked), 1 for operational errors.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use ragweir_cli::config::{AppConfig, Overrides};
#[cfg(feature = "service")]
use ragweir_cli::service;

use ragweir::corpus;
use ragweir::eval::{load_corpus, EvalRunner, MetricsReport};
use ragweir::grounded::EchoMock;
use ragweir::model::{Clock, GuardAction, PipelineVariant};
use ragweir::pipeline::{FixtureTools, Pipeline};
use ragweir::retrieval::{ChunkStore, HashEmbedder};
use ragweir::telemetry::CpeLog;

#[derive(Parser)]
#[command(name = "ragweir", version, about = "Guardrail gateway and evaluation harness for RAG chat pipelines")]
struct Cli {
    /// Path to a TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Pipeline variant (v0..v4).
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Knowledge-store records file.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// CPE audit-log path.
    #[arg(long, global = true)]
    cpe_log: Option<PathBuf>,
    /// Seed for the deterministic mock backends.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use a logical counter instead of wall-clock timestamps.
    #[arg(long, global = true)]
    logical_time: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the corpus through one or more variants and print the report.
    Eval {
        /// Corpus records file.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated variants to evaluate (defaults to v0..v4).
        #[arg(long)]
        variants: Option<String>,
        /// Also write the machine-readable report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit nonzero if any sample hit a backend error.
        #[arg(long)]
        strict: bool,
    },
    /// Run a single query and print the verdict.
    Query { text: String },
    /// Serve the gateway over HTTP.
    Serve {
        /// host:port to bind.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Write the bundled synthetic fixtures (corpus, store, anchoring).
    GenFixtures {
        #[arg(long, default_value = "fixtures")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let overrides = Overrides {
        variant: cli.variant.clone(),
        store: cli.store.clone(),
        corpus: match &cli.command {
            Command::Eval { corpus, .. } => corpus.clone(),
            _ => None,
        },
        cpe_log: cli.cpe_log.clone(),
        seed: cli.seed,
        logical_timestamps: cli.logical_time,
        listen: match &cli.command {
            Command::Serve { listen } => listen.clone(),
            _ => None,
        },
    };
    let app = AppConfig::load(cli.config.as_deref(), &overrides)?;

    match cli.command {
        Command::Eval {
            variants,
            out,
            strict,
            ..
        } => cmd_eval(&app, variants.as_deref(), out.as_deref(), strict),
        Command::Query { text } => cmd_query(&app, &text),
        Command::Serve { .. } => cmd_serve(app),
        Command::GenFixtures { out_dir } => cmd_gen_fixtures(&out_dir),
    }
}

fn clock_for(app: &AppConfig) -> Clock {
    if app.logical_timestamps {
        Clock::logical()
    } else {
        Clock::wall()
    }
}

fn load_store(app: &AppConfig, embedder: &HashEmbedder) -> Result<ChunkStore> {
    ChunkStore::load_records(&app.store_path, embedder)
        .with_context(|| format!("loading store {}", app.store_path.display()))
}

fn parse_variants(spec: Option<&str>) -> Result<Vec<PipelineVariant>> {
    match spec {
        None => Ok(PipelineVariant::ALL.to_vec()),
        Some(spec) => spec
            .split(',')
            .map(|name| {
                PipelineVariant::parse(name)
                    .ok_or_else(|| anyhow::anyhow!("unknown variant `{name}`"))
            })
            .collect(),
    }
}

fn cmd_eval(
    app: &AppConfig,
    variants: Option<&str>,
    out: Option<&std::path::Path>,
    strict: bool,
) -> Result<ExitCode> {
    let variants = parse_variants(variants)?;
    let samples = load_corpus(&app.corpus_path)
        .with_context(|| format!("loading corpus {}", app.corpus_path.display()))?;
    if samples.is_empty() {
        eprintln!("warning: corpus {} is empty", app.corpus_path.display());
    } else {
        let attacks = samples
            .iter()
            .filter(|s| matches!(s.label, ragweir::eval::Label::Attack))
            .count();
        let by_category: Vec<String> = ragweir::eval::category_counts(&samples)
            .iter()
            .map(|(category, count)| format!("{}={count}", category.label()))
            .collect();
        println!(
            "corpus: {} samples ({attacks} attacks, {} benign; {})\n",
            samples.len(),
            samples.len() - attacks,
            by_category.join(", ")
        );
    }

    let embedder = Arc::new(HashEmbedder::new(256, app.mock_seed));
    let store = Arc::new(load_store(app, &embedder)?);
    let telemetry = Arc::new(
        CpeLog::with_file(&app.cpe_log_path)
            .with_context(|| format!("opening CPE log {}", app.cpe_log_path.display()))?,
    );
    let app_for_cfg = app.clone();
    let runner = EvalRunner {
        store,
        embedder,
        backend: Arc::new(EchoMock),
        tools: Arc::new(FixtureTools::new(app.mock_seed)),
        telemetry,
        clock: clock_for(app),
        config_for: Box::new(move |variant| {
            app_for_cfg
                .pipeline_config(variant)
                .expect("config validated at startup")
        }),
    };
    // Validate the pipeline config once up front so failures are diagnostics,
    // not panics inside the runner.
    for &variant in &variants {
        app.pipeline_config(variant)?;
    }

    let outcomes = runner.run_eval(&samples, &variants)?;
    let report = MetricsReport::from_outcomes(&outcomes)?;
    print!("{}", report.render_text());

    let mut had_errors = false;
    for outcome in &outcomes {
        if !outcome.errors.is_empty() {
            had_errors = true;
            eprintln!(
                "warning: {} samples hit backend errors under {}: {:?}",
                outcome.errors.len(),
                outcome.variant,
                outcome.errors
            );
        }
    }
    if let Some(path) = out {
        std::fs::write(path, report.to_json())
            .with_context(|| format!("writing report {}", path.display()))?;
    }
    if strict && had_errors {
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn build_pipeline(app: &AppConfig, variant: PipelineVariant) -> Result<Pipeline> {
    let embedder = Arc::new(HashEmbedder::new(256, app.mock_seed));
    let store = Arc::new(load_store(app, &embedder)?);
    let telemetry = Arc::new(
        CpeLog::with_file(&app.cpe_log_path)
            .with_context(|| format!("opening CPE log {}", app.cpe_log_path.display()))?,
    );
    Ok(Pipeline::new(
        app.pipeline_config(variant)?,
        store,
        embedder,
        Arc::new(EchoMock),
        Arc::new(FixtureTools::new(app.mock_seed)),
        telemetry,
        clock_for(app),
    )?)
}

fn cmd_query(app: &AppConfig, text: &str) -> Result<ExitCode> {
    let pipeline = build_pipeline(app, app.variant)?;
    let mut session = pipeline.new_session("cli-query");
    let verdict = pipeline.run_turn(&mut session, text);

    let tags: Vec<String> = verdict.cpe_tags.iter().map(|t| t.to_string()).collect();
    println!("action: {}", serde_json::to_value(verdict.action)?.as_str().unwrap_or("?"));
    println!("cpe_tags: {}", tags.join(" "));
    match &verdict.answer {
        Some(answer) => println!("answer: {answer}"),
        None => println!("reason: {}", verdict.reason),
    }
    if verdict.action == GuardAction::Allow {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

#[cfg(feature = "service")]
fn cmd_serve(app: AppConfig) -> Result<ExitCode> {
    service::serve(app)?;
    Ok(ExitCode::SUCCESS)
}

#[cfg(not(feature = "service"))]
fn cmd_serve(_app: AppConfig) -> Result<ExitCode> {
    anyhow::bail!("this build has the `service` feature disabled")
}

fn cmd_gen_fixtures(out_dir: &std::path::Path) -> Result<ExitCode> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    corpus::write_samples(&out_dir.join("corpus.jsonl"), &corpus::synthetic_corpus())?;
    corpus::write_samples(&out_dir.join("anchoring.jsonl"), &corpus::anchoring_fixtures())?;
    corpus::write_store(&out_dir.join("store.jsonl"), &corpus::store_records())?;
    println!("wrote corpus.jsonl, anchoring.jsonl, store.jsonl to {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}
