//! `guardrail`: batch drivers and the HTTP service over one TOML config.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use clap::{Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use guardrail_cli::config::{ConfigError, ServiceConfig};
use guardrail_cli::service::{serve, AppState, PolicyStore};
use guardrail_core::codec::{keyword_fallback, parse_moderation_output, qa_expected_answer};
use guardrail_core::consensus::{filter_unanimous, votes_from_jsonl};
use guardrail_core::eval::perturb::{perturb_file, PerturbKind};
use guardrail_core::eval::{run_benchmark, BenchmarkManifest};
use guardrail_core::gateway::ImageRef;
use guardrail_core::loss::LossFixture;
use guardrail_core::prompt::{
    build_classification_prompt, build_comprehension_prompt, build_qa_prompts, Mode,
};
use guardrail_core::refine::{run_refinement, RefineConfig, RefinementState, SampleRecord};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read {path:?}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error(transparent)]
    Gateway(#[from] guardrail_core::gateway::GatewayError),
    #[error(transparent)]
    Eval(#[from] guardrail_core::eval::EvalError),
    #[error(transparent)]
    Refine(#[from] guardrail_core::refine::RefineError),
    #[error(transparent)]
    Loss(#[from] guardrail_core::loss::LossError),
    #[error(transparent)]
    Consensus(#[from] guardrail_core::consensus::ConsensusError),
    #[error(transparent)]
    Prompt(#[from] guardrail_core::prompt::PromptError),
    #[error(transparent)]
    Codec(#[from] guardrail_core::codec::CodecError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn read_file(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|source| CliError::Unreadable { path: path.clone(), source })
}

#[derive(Parser)]
#[command(name = "guardrail", about = "Policy-driven image moderation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Moderate a single image through the configured guardrail backend.
    Moderate {
        #[arg(long)]
        config: PathBuf,
        /// Image file on disk.
        #[arg(long)]
        image_path: Option<PathBuf>,
        /// Synthetic tag understood by mock backends.
        #[arg(long)]
        image_tag: Option<String>,
        /// "classification" or "comprehension"; defaults from the config.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Keep only samples with a unanimous creation-time vote.
    Curate {
        /// Vote records, one JSON object per line.
        #[arg(long)]
        votes: PathBuf,
    },
    /// Run the iterative filter-and-update loop over a sample manifest.
    Refine {
        #[arg(long)]
        config: PathBuf,
        /// Sample records, one JSON object per line.
        #[arg(long)]
        samples: PathBuf,
        /// Directory for manifests and checkpoints.
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Score a benchmark manifest and print the report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Benchmark manifest (header line, then one sample per line).
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        /// Optional robustness transform: "noise", "res90", or "red".
        #[arg(long)]
        perturb: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a serialized loss fixture and gradient-check it.
    Losslab {
        /// Fixture JSON with logits, targets, and token weights.
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Emit the question-answer task rows for each labeled sample.
    Qagen {
        #[arg(long)]
        config: PathBuf,
        /// Sample records, one JSON object per line.
        #[arg(long)]
        samples: PathBuf,
    },
    /// Run the HTTP moderation service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_mode(raw: &str) -> Result<Mode, CliError> {
    match raw {
        "classification" => Ok(Mode::Classification),
        "comprehension" => Ok(Mode::Comprehension),
        other => Err(CliError::Usage(format!("unknown mode {other:?}"))),
    }
}

fn parse_perturb(raw: &str) -> Result<PerturbKind, CliError> {
    match raw {
        "noise" => Ok(PerturbKind::GaussianNoise),
        "res90" => Ok(PerturbKind::Resolution90),
        "red" => Ok(PerturbKind::RedFilter),
        other => Err(CliError::Usage(format!("unknown perturbation {other:?}"))),
    }
}

fn samples_from_jsonl(text: &str) -> Result<Vec<SampleRecord>, CliError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::from))
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Moderate { config, image_path, image_tag, mode } => {
            let config = ServiceConfig::load(&config)?;
            let policy = config.load_policy()?;
            let gateway = config.build_gateway(&policy)?;
            let image = match (image_path, image_tag) {
                (Some(path), _) => ImageRef::Path(path),
                (None, Some(tag)) => ImageRef::Tag(tag),
                (None, None) => {
                    return Err(CliError::Usage("pass --image-path or --image-tag".into()))
                }
            };
            let mode = match mode {
                Some(raw) => parse_mode(&raw)?,
                None => config.default_mode(),
            };
            let prompt = match mode {
                Mode::Classification => build_classification_prompt(),
                _ => build_comprehension_prompt(&policy),
            };
            let response = gateway.infer(config.guardrail_backend(), &prompt, &image)?;
            let report = parse_moderation_output(&response.text, &policy, mode);
            let result = match report.result {
                Some(r) if report.ok => r,
                _ => keyword_fallback(&response.text, &policy),
            };
            println!("{}", result.to_strict_json(&policy));
        }
        Command::Curate { votes } => {
            let records = votes_from_jsonl(&read_file(&votes)?)?;
            let retained = filter_unanimous(&records)?;
            println!(
                "{}",
                json!({ "total": records.len(), "retained": retained })
            );
        }
        Command::Refine { config, samples, run_dir } => {
            let config = ServiceConfig::load(&config)?;
            let policy = config.load_policy()?;
            let gateway = config.build_gateway(&policy)?;
            let samples = samples_from_jsonl(&read_file(&samples)?)?;
            let state = RefinementState::new(policy, samples);
            let refine = RefineConfig {
                self_backend: config.guardrail_backend().to_string(),
                peer_backends: config.peer_backends(),
                schedule: config.schedule(),
                threshold: config.consensus.threshold,
                stop: config.stop_criteria(),
                run_dir,
                trainer_hook: config.refinement.trainer_hook.clone(),
            };
            let report = run_refinement(state, &gateway, None, &refine)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval { config, manifest, mode, perturb, seed } => {
            let config = ServiceConfig::load(&config)?;
            let policy = config.load_policy()?;
            let gateway = config.build_gateway(&policy)?;
            let mut manifest = BenchmarkManifest::from_jsonl(&read_file(&manifest)?)?;
            if let Some(raw) = perturb {
                let kind = parse_perturb(&raw)?;
                for sample in &mut manifest.samples {
                    if let ImageRef::Path(path) = &sample.image_ref {
                        sample.image_ref = ImageRef::Path(perturb_file(path, kind, seed)?);
                    }
                }
            }
            let mode = match mode {
                Some(raw) => parse_mode(&raw)?,
                None => config.default_mode(),
            };
            let report =
                run_benchmark(&manifest, &gateway, config.guardrail_backend(), &policy, mode)?;
            println!("{}", report.to_json());
            println!("{}", report.to_text_table());
        }
        Command::Losslab { fixture, eps } => {
            let fixture: LossFixture = serde_json::from_str(&read_file(&fixture)?)?;
            let report = fixture.run(eps)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Qagen { config, samples } => {
            let config = ServiceConfig::load(&config)?;
            let policy = config.load_policy()?;
            let samples = samples_from_jsonl(&read_file(&samples)?)?;
            for sample in &samples {
                for bundle in build_qa_prompts(&sample.label, &policy)? {
                    let expected = qa_expected_answer(bundle.mode, &sample.label, &policy, None)?;
                    println!(
                        "{}",
                        json!({
                            "sample_id": sample.sample_id,
                            "mode": bundle.mode,
                            "system_text": bundle.system_text,
                            "user_text": bundle.user_text,
                            "max_output_tokens": bundle.max_output_tokens,
                            "expected": expected,
                        })
                    );
                }
            }
        }
        Command::Serve { config } => {
            let config = ServiceConfig::load(&config)?;
            let policy = config.load_policy()?;
            let gateway = config.build_gateway(&policy)?;
            let state = Arc::new(AppState {
                store: RwLock::new(PolicyStore::new(policy)),
                gateway: Arc::new(gateway),
                guardrail_backend: config.guardrail_backend().to_string(),
                default_mode: config.default_mode(),
            });
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(state, &config.listen_address))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{}", json!({ "error": err.to_string() }));
        std::process::exit(1);
    }
}
