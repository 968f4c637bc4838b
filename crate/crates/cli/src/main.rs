//! `ckg`: build a context-enriched knowledge graph from documents and
//! evaluate it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ckg_core::alignment::Scope;
use ckg_core::config::Config;
use ckg_core::metrics::GraphScore;
use ckg_core::pipeline::{providers_from_config, score_triples, Pipeline};
use ckg_core::synthetic;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ckg", version, about = "Knowledge graph construction with schema induction")]
struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding all artifacts.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Provider for every stage, overriding the configuration.
    #[arg(long, global = true, value_enum)]
    provider: Option<ProviderKind>,
    /// Gold-triple scope for schema evaluation.
    #[arg(long, global = true, value_enum, default_value = "combined")]
    scope: ScopeArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Live,
    Stub,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Source,
    Heldout,
    Combined,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Source => Scope::Source,
            ScopeArg::Heldout => Scope::Heldout,
            ScopeArg::Combined => Scope::Combined,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Textualize and chunk documents (files or directories).
    Ingest { inputs: Vec<PathBuf> },
    /// Recognize entity mentions in every chunk.
    Extract,
    /// Resolve mentions into canonical entities.
    ResolveEntities,
    /// Recognize and resolve entity classes and class groups.
    InduceEntitySchema,
    /// Recognize relation instances between resolved entities.
    ExtractRelations,
    /// Canonicalize relations and induce the relation schema.
    ResolveRelations,
    /// Assemble, validate and export the graph.
    Assemble,
    /// Run every construction step.
    RunAll { inputs: Vec<PathBuf> },
    /// Retrieval accuracy against a benchmark of statements.
    EvalRetention {
        #[arg(long)]
        benchmark: PathBuf,
    },
    /// Align the induced schema with a reference ontology.
    EvalSchema {
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Re-check the assembled graph; exits nonzero on violations.
    Validate,
    /// Rebuild resolved artifacts from the action logs and diff them.
    ReplayActions,
    /// Structural metrics of the run, or of a triple file with its source.
    Score {
        #[arg(long, requires = "source")]
        triples: Option<PathBuf>,
        #[arg(long, requires = "triples")]
        source: Option<PathBuf>,
        /// Print a tab-separated table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Write the seeded synthetic corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 14)]
        docs: usize,
    },
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let v = serde_json::to_value(v)?;
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn table(rows: &[(String, GraphScore)]) {
    println!("instance\tnodes\tedges\tavg_entity_words\tavg_degree\tconnectivity\tclustering\tleak\ttricr");
    for (name, s) in rows {
        let st = &s.structural;
        println!(
            "{name}\t{:.2}\t{:.2}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
            st.node_count, st.edge_count, st.avg_entity_words, st.avg_degree, st.connectivity, st.clustering, s.leak, s.tricr
        );
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::SynthCorpus { out, seed, docs } = &cli.command {
        synthetic::generate(*seed, *docs).write_to(out)?;
        eprintln!("wrote {docs} documents to {}", out.display());
        return Ok(ExitCode::SUCCESS);
    }
    if let Command::Score { triples: Some(t), source: Some(s), table: as_table } = &cli.command {
        let score = score_triples(&read(t)?, &read(s)?)?;
        if *as_table {
            table(&[("input".to_string(), score)]);
        } else {
            print_json(&score)?;
        }
        return Ok(ExitCode::SUCCESS);
    }

    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let kind = cli.provider.map(|k| match k {
        ProviderKind::Live => "live",
        ProviderKind::Stub => "stub",
    });
    let providers = providers_from_config(&config, kind)?;
    let p = Pipeline::new(&cli.run_dir, config, providers);
    let count = |step: &str, n: usize| log::info!("{step}: {n} records");

    match cli.command {
        Command::Ingest { inputs } => count("ingest", p.ingest(&inputs)?),
        Command::Extract => count("extract", p.extract()?),
        Command::ResolveEntities => count("resolve-entities", p.resolve_entities()?),
        Command::InduceEntitySchema => count("induce-entity-schema", p.induce_entity_schema()?),
        Command::ExtractRelations => count("extract-relations", p.extract_relations()?),
        Command::ResolveRelations => count("resolve-relations", p.resolve_relations()?),
        Command::Assemble => print_json(&p.assemble()?)?,
        Command::RunAll { inputs } => {
            if inputs.is_empty() {
                bail!("run-all needs at least one input path");
            }
            print_json(&p.run_all(&inputs)?)?;
        }
        Command::EvalRetention { benchmark } => print_json(&p.eval_retention(&benchmark)?)?,
        Command::EvalSchema { ontology, gold } => {
            let eval = p.eval_schema(&ontology, &gold, cli.scope.into())?;
            print_json(&eval.report)?;
            eprintln!("{} judgement(s) routed to the audit log", eval.audit.len());
        }
        Command::Validate => {
            let report = p.validate()?;
            print_json(&report)?;
            if !report.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ReplayActions => {
            let diff = p.replay()?;
            print_json(&diff)?;
            if !diff.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Score { table: as_table, .. } => {
            let report = p.score()?;
            if as_table {
                let mut rows: Vec<(String, GraphScore)> = report.instances.clone().into_iter().collect();
                rows.push(("macro".to_string(), report.macro_avg));
                table(&rows);
            } else {
                print_json(&report)?;
            }
        }
        Command::SynthCorpus { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
